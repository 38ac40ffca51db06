//! Scalarization functions that collapse a per-principle reward vector into
//! a single scalar reward.
//!
//! A [`ScalarizationSpec`] is the user-facing, serializable description; it is
//! turned into a [`CheckedSpec`] by [`validate_spec`] once the number of
//! principles is known. Only checked specs can be evaluated.
//!
//! Two domain restrictions matter for monotonicity:
//!
//! * `uncertainty_weighted` is monotone only while every score lies in
//!   `[-c, c]` with `c = n / (4 λ (n - 1))`. [`CheckedSpec::clamp_range`]
//!   exposes `c`; reward producers clamp through [`CheckedSpec::reward`].
//! * `soft_max_min` is monotone while `max(r) - min(r) <= T`.
//!
//! [`scalarize`] itself evaluates each formula exactly, without clamping.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    WeightedLinear,
    WorstCase,
    SoftMaxMin,
    UncertaintyWeighted,
    LowerQuantile,
    MaxMedian,
    BernoulliNash,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::WeightedLinear,
        Variant::WorstCase,
        Variant::SoftMaxMin,
        Variant::UncertaintyWeighted,
        Variant::LowerQuantile,
        Variant::MaxMedian,
        Variant::BernoulliNash,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::WeightedLinear => "weighted_linear",
            Variant::WorstCase => "worst_case",
            Variant::SoftMaxMin => "soft_max_min",
            Variant::UncertaintyWeighted => "uncertainty_weighted",
            Variant::LowerQuantile => "lower_quantile",
            Variant::MaxMedian => "max_median",
            Variant::BernoulliNash => "bernoulli_nash",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Named per-principle scores for one (prompt, response).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub principle_ids: Arc<[String]>,
    pub values: Vec<f64>,
}

impl RewardVector {
    pub fn new(principle_ids: Arc<[String]>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("reward vector"));
        }
        if principle_ids.len() != values.len() {
            return Err(Error::LengthMismatch {
                expected: principle_ids.len(),
                got: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(RewardVector {
            principle_ids,
            values,
        })
    }

    /// Builds a vector with ids `p0, p1, ...`; handy for tests and benches.
    pub fn anonymous(values: Vec<f64>) -> Result<Self> {
        let ids: Arc<[String]> = (0..values.len()).map(|i| format!("p{i}")).collect();
        Self::new(ids, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Serializable scalarization description, as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarizationSpec {
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Map scores through the logistic function before aggregation.
    /// Absent means "variant default": on for `bernoulli_nash`, off otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positivity_map: Option<bool>,
}

impl ScalarizationSpec {
    pub fn new(variant: Variant) -> Self {
        ScalarizationSpec {
            variant,
            weights: None,
            temperature: None,
            lambda: None,
            alpha: None,
            positivity_map: None,
        }
    }

    pub fn weighted_linear(weights: Vec<f64>) -> Self {
        ScalarizationSpec {
            weights: Some(weights),
            ..Self::new(Variant::WeightedLinear)
        }
    }

    pub fn soft_max_min(temperature: f64) -> Self {
        ScalarizationSpec {
            temperature: Some(temperature),
            ..Self::new(Variant::SoftMaxMin)
        }
    }

    pub fn uncertainty_weighted(lambda: f64) -> Self {
        ScalarizationSpec {
            lambda: Some(lambda),
            ..Self::new(Variant::UncertaintyWeighted)
        }
    }

    pub fn lower_quantile(alpha: f64) -> Self {
        ScalarizationSpec {
            alpha: Some(alpha),
            ..Self::new(Variant::LowerQuantile)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Params {
    WeightedLinear { weights: Vec<f64> },
    WorstCase,
    SoftMaxMin { temperature: f64 },
    UncertaintyWeighted { lambda: f64 },
    LowerQuantile { alpha: f64 },
    MaxMedian,
    BernoulliNash,
}

/// A spec whose parameters have been checked against a principle count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckedSpec {
    params: Params,
    n_principles: usize,
    positivity_map: bool,
}

pub fn validate_spec(spec: &ScalarizationSpec, n_principles: usize) -> Result<CheckedSpec> {
    use Variant::*;

    if n_principles == 0 {
        return Err(Error::InvalidSpec("principle count must be positive".into()));
    }
    let v = spec.variant;
    let stray = |name: &str, present: bool| -> Result<()> {
        if present {
            Err(Error::InvalidSpec(format!("parameter `{name}` is not used by {v}")))
        } else {
            Ok(())
        }
    };
    stray("weights", spec.weights.is_some() && v != WeightedLinear)?;
    stray("temperature", spec.temperature.is_some() && v != SoftMaxMin)?;
    stray("lambda", spec.lambda.is_some() && v != UncertaintyWeighted)?;
    stray("alpha", spec.alpha.is_some() && v != LowerQuantile)?;

    let params = match v {
        WeightedLinear => {
            let weights = spec
                .weights
                .clone()
                .ok_or_else(|| Error::InvalidSpec("weighted_linear requires weights".into()))?;
            if weights.len() != n_principles {
                return Err(Error::InvalidSpec(format!(
                    "weights length {} does not match {} principles",
                    weights.len(),
                    n_principles
                )));
            }
            if weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::InvalidSpec("weights must be finite".into()));
            }
            Params::WeightedLinear { weights }
        }
        WorstCase => Params::WorstCase,
        SoftMaxMin => {
            let temperature = spec.temperature.unwrap_or(DEFAULT_TEMPERATURE);
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "non-positive temperature {temperature}"
                )));
            }
            Params::SoftMaxMin { temperature }
        }
        UncertaintyWeighted => {
            let lambda = spec.lambda.unwrap_or(DEFAULT_LAMBDA);
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::InvalidSpec(format!("negative lambda {lambda}")));
            }
            Params::UncertaintyWeighted { lambda }
        }
        LowerQuantile => {
            let alpha = spec.alpha.unwrap_or(DEFAULT_ALPHA);
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::InvalidSpec(format!("alpha {alpha} outside (0, 1]")));
            }
            Params::LowerQuantile { alpha }
        }
        MaxMedian => Params::MaxMedian,
        BernoulliNash => Params::BernoulliNash,
    };

    let positivity_map = match (v, spec.positivity_map) {
        (BernoulliNash, Some(false)) => {
            return Err(Error::InvalidSpec(
                "bernoulli_nash requires positivity_map".into(),
            ))
        }
        (BernoulliNash, _) => true,
        (_, flag) => flag.unwrap_or(false),
    };

    Ok(CheckedSpec {
        params,
        n_principles,
        positivity_map,
    })
}

impl CheckedSpec {
    pub fn variant(&self) -> Variant {
        match self.params {
            Params::WeightedLinear { .. } => Variant::WeightedLinear,
            Params::WorstCase => Variant::WorstCase,
            Params::SoftMaxMin { .. } => Variant::SoftMaxMin,
            Params::UncertaintyWeighted { .. } => Variant::UncertaintyWeighted,
            Params::LowerQuantile { .. } => Variant::LowerQuantile,
            Params::MaxMedian => Variant::MaxMedian,
            Params::BernoulliNash => Variant::BernoulliNash,
        }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn n_principles(&self) -> usize {
        self.n_principles
    }

    pub fn positivity_map(&self) -> bool {
        self.positivity_map
    }

    /// Round-trips back to the serializable form, with defaults filled in.
    pub fn to_spec(&self) -> ScalarizationSpec {
        let mut s = ScalarizationSpec::new(self.variant());
        match &self.params {
            Params::WeightedLinear { weights } => s.weights = Some(weights.clone()),
            Params::SoftMaxMin { temperature } => s.temperature = Some(*temperature),
            Params::UncertaintyWeighted { lambda } => s.lambda = Some(*lambda),
            Params::LowerQuantile { alpha } => s.alpha = Some(*alpha),
            _ => {}
        }
        s.positivity_map = Some(self.positivity_map);
        s
    }

    /// Score bound `c` inside which `uncertainty_weighted` is monotone in every
    /// argument. `None` when no clamp is needed (other variants, λ = 0, n = 1).
    pub fn clamp_range(&self) -> Option<f64> {
        match self.params {
            Params::UncertaintyWeighted { lambda } if lambda > 0.0 && self.n_principles > 1 => {
                let n = self.n_principles as f64;
                Some(n / (4.0 * lambda * (n - 1.0)))
            }
            _ => None,
        }
    }

    /// Applies the monotonicity clamp (if any) to raw scores.
    pub fn clamp_values(&self, values: &mut [f64]) {
        if let Some(c) = self.clamp_range() {
            for v in values {
                *v = v.clamp(-c, c);
            }
        }
    }

    /// Reward used for training and prediction: clamp, then scalarize.
    pub fn reward(&self, values: &[f64]) -> Result<f64> {
        match self.clamp_range() {
            None => self.eval(values),
            Some(_) => {
                let mut v = values.to_vec();
                self.clamp_values(&mut v);
                self.eval(&v)
            }
        }
    }

    /// Evaluates the scalarization on a bare slice of scores.
    pub fn eval(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.n_principles {
            return Err(Error::LengthMismatch {
                expected: self.n_principles,
                got: values.len(),
            });
        }
        check_finite(values)?;
        let out = if self.positivity_map {
            let mapped: Vec<f64> = values.iter().map(|&x| logistic(x)).collect();
            self.apply(&mapped)
        } else {
            self.apply(values)
        };
        Ok(out)
    }

    fn apply(&self, r: &[f64]) -> f64 {
        match &self.params {
            Params::WeightedLinear { weights } => {
                weights.iter().zip(r).map(|(w, x)| w * x).sum()
            }
            Params::WorstCase => r.iter().copied().fold(f64::INFINITY, f64::min),
            Params::SoftMaxMin { temperature } => softmin_average(r, *temperature),
            Params::UncertaintyWeighted { lambda } => {
                let (mean, var) = mean_and_population_variance(r);
                mean - lambda * var
            }
            Params::LowerQuantile { alpha } => {
                let k = quantile_rank(*alpha, r.len());
                order_statistic(r, k)
            }
            Params::MaxMedian => median(r),
            Params::BernoulliNash => geometric_mean(r),
        }
    }
}

/// `f(R_1, ..., R_n)` for a checked spec.
pub fn scalarize(spec: &CheckedSpec, r: &RewardVector) -> Result<f64> {
    spec.eval(&r.values)
}

pub fn scalarize_batch(spec: &CheckedSpec, rows: &[RewardVector]) -> Result<Vec<f64>> {
    if let Some(first) = rows.first() {
        if let Some(bad) = rows
            .iter()
            .find(|r| r.principle_ids != first.principle_ids)
        {
            return Err(Error::LengthMismatch {
                expected: first.len(),
                got: bad.len(),
            });
        }
    }
    rows.iter().map(|r| scalarize(spec, r)).collect()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

fn softmin_average(r: &[f64], temperature: f64) -> f64 {
    // Shift by the minimum so the largest exponent is zero.
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let mut num = 0.0;
    let mut den = 0.0;
    for &x in r {
        let w = (-(x - lo) / temperature).exp();
        num += w * x;
        den += w;
    }
    num / den
}

fn mean_and_population_variance(r: &[f64]) -> (f64, f64) {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// 1-based rank `k = ceil(α n)`, kept within `[1, n]`.
pub fn quantile_rank(alpha: f64, n: usize) -> usize {
    // The epsilon absorbs representation error, e.g. (1/3) * 12.
    let k = (alpha * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

fn sorted(r: &[f64]) -> Vec<f64> {
    let mut v = r.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn order_statistic(r: &[f64], k: usize) -> f64 {
    sorted(r)[k - 1]
}

fn median(r: &[f64]) -> f64 {
    let v = sorted(r);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn geometric_mean(r: &[f64]) -> f64 {
    let n = r.len() as f64;
    (r.iter().map(|x| x.ln()).sum::<f64>() / n).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn checked(spec: ScalarizationSpec, n: usize) -> CheckedSpec {
        validate_spec(&spec, n).unwrap()
    }

    fn rv(values: &[f64]) -> RewardVector {
        RewardVector::anonymous(values.to_vec()).unwrap()
    }

    #[test]
    fn validate_accepts_and_canonicalizes() {
        let s = checked(ScalarizationSpec::weighted_linear(vec![1.0 / 12.0; 12]), 12);
        assert_eq!(s.variant(), Variant::WeightedLinear);

        let q = checked(ScalarizationSpec::new(Variant::LowerQuantile), 12);
        assert_eq!(q.params(), &Params::LowerQuantile { alpha: 1.0 / 3.0 });

        let t = checked(ScalarizationSpec::new(Variant::SoftMaxMin), 3);
        assert_eq!(t.params(), &Params::SoftMaxMin { temperature: 1.0 });

        let u = checked(ScalarizationSpec::new(Variant::UncertaintyWeighted), 3);
        assert_eq!(u.params(), &Params::UncertaintyWeighted { lambda: 0.5 });

        let b = checked(ScalarizationSpec::new(Variant::BernoulliNash), 3);
        assert!(b.positivity_map());
    }

    #[test]
    fn validate_rejects_bad_parameters() {
        let bad = [
            (ScalarizationSpec::soft_max_min(0.0), 3),
            (ScalarizationSpec::soft_max_min(-1.0), 3),
            (ScalarizationSpec::uncertainty_weighted(-0.1), 3),
            (ScalarizationSpec::lower_quantile(0.0), 3),
            (ScalarizationSpec::lower_quantile(1.5), 3),
            (ScalarizationSpec::weighted_linear(vec![1.0; 11]), 12),
            (ScalarizationSpec::new(Variant::WeightedLinear), 12),
            (
                ScalarizationSpec {
                    positivity_map: Some(false),
                    ..ScalarizationSpec::new(Variant::BernoulliNash)
                },
                3,
            ),
            (
                ScalarizationSpec {
                    temperature: Some(1.0),
                    ..ScalarizationSpec::new(Variant::WorstCase)
                },
                3,
            ),
        ];
        for (spec, n) in bad {
            assert!(
                matches!(validate_spec(&spec, n), Err(Error::InvalidSpec(_))),
                "{spec:?} should be rejected"
            );
        }
    }

    #[test]
    fn worked_examples() {
        let wl = checked(ScalarizationSpec::weighted_linear(vec![0.5, 0.5]), 2);
        assert_eq!(scalarize(&wl, &rv(&[2.0, 4.0])).unwrap(), 3.0);

        let wc = checked(ScalarizationSpec::new(Variant::WorstCase), 3);
        assert_eq!(scalarize(&wc, &rv(&[1.0, 2.0, 3.0])).unwrap(), 1.0);

        let sm = checked(ScalarizationSpec::soft_max_min(1.0), 2);
        assert_eq!(scalarize(&sm, &rv(&[0.0, 0.0])).unwrap(), 0.0);
        // softmin weight on the larger value is e^-1 / (1 + e^-1) = 1 / (1 + e)
        let expected = 1.0 / (1.0 + std::f64::consts::E);
        assert_abs_diff_eq!(scalarize(&sm, &rv(&[0.0, 1.0])).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.2689, epsilon = 1e-4);

        let uw3 = checked(ScalarizationSpec::uncertainty_weighted(0.5), 3);
        assert_eq!(scalarize(&uw3, &rv(&[1.0, 1.0, 1.0])).unwrap(), 1.0);
        let uw2 = checked(ScalarizationSpec::uncertainty_weighted(0.5), 2);
        assert_eq!(scalarize(&uw2, &rv(&[0.0, 2.0])).unwrap(), 0.5);

        let twelve: Vec<f64> = (1..=12).map(f64::from).collect();
        let lq = checked(ScalarizationSpec::lower_quantile(1.0 / 3.0), 12);
        assert_eq!(scalarize(&lq, &rv(&twelve)).unwrap(), 4.0);
        let mm = checked(ScalarizationSpec::new(Variant::MaxMedian), 12);
        assert_eq!(scalarize(&mm, &rv(&twelve)).unwrap(), 6.5);

        // values whose logistic images are exactly 0.8 and 0.2
        let bn = checked(ScalarizationSpec::new(Variant::BernoulliNash), 2);
        let pre = [(0.8f64 / 0.2).ln(), (0.2f64 / 0.8).ln()];
        assert_abs_diff_eq!(scalarize(&bn, &rv(&pre)).unwrap(), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn eval_rejects_length_mismatch_and_nan() {
        let wc = checked(ScalarizationSpec::new(Variant::WorstCase), 3);
        assert!(matches!(
            wc.eval(&[1.0, 2.0]),
            Err(Error::LengthMismatch { expected: 3, got: 2 })
        ));
        assert!(matches!(
            wc.eval(&[1.0, f64::NAN, 2.0]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(RewardVector::anonymous(vec![f64::INFINITY]).is_err());
        assert!(RewardVector::anonymous(vec![]).is_err());
    }

    #[test]
    fn batch_matches_rowwise() {
        let spec = checked(ScalarizationSpec::new(Variant::MaxMedian), 3);
        assert!(scalarize_batch(&spec, &[]).unwrap().is_empty());
        let row = rv(&[3.0, -1.0, 2.0]);
        assert_eq!(
            scalarize_batch(&spec, std::slice::from_ref(&row)).unwrap(),
            vec![scalarize(&spec, &row).unwrap()]
        );
        let mixed = [row, rv(&[1.0, 2.0])];
        assert!(scalarize_batch(&spec, &mixed).is_err());
    }

    #[test]
    fn clamp_range_matches_bound() {
        let u = checked(ScalarizationSpec::uncertainty_weighted(0.5), 12);
        assert_abs_diff_eq!(u.clamp_range().unwrap(), 12.0 / 22.0, epsilon = 1e-15);
        let u0 = checked(ScalarizationSpec::uncertainty_weighted(0.0), 12);
        assert!(u0.clamp_range().is_none());
        let mut v = vec![5.0, -5.0, 0.1];
        checked(ScalarizationSpec::uncertainty_weighted(1.0), 3).clamp_values(&mut v);
        assert_eq!(v, vec![0.375, -0.375, 0.1]);
    }

    #[test]
    fn spec_serde_uses_snake_case_names() {
        let s: ScalarizationSpec =
            toml::from_str("variant = \"soft_max_min\"\ntemperature = 2.0\n").unwrap();
        assert_eq!(s, ScalarizationSpec::soft_max_min(2.0));
        for v in Variant::ALL {
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert!(toml::from_str::<ScalarizationSpec>("variant = \"worst_case\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn quantile_rank_edges() {
        assert_eq!(quantile_rank(1.0 / 3.0, 12), 4);
        assert_eq!(quantile_rank(1.0, 12), 12);
        assert_eq!(quantile_rank(1.0 / 12.0, 12), 1);
        assert_eq!(quantile_rank(0.01, 12), 1);
    }
}
