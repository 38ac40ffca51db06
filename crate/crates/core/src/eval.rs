//! Judge win rates, win-rate matrices, principle label correlations and
//! principle-count ablations.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{judge_decision, ComparisonRecord, Label};
use crate::error::{Error, Result};
use crate::logistic::SolverConfig;
use crate::pm::{fit_linear_weights, multiobjective_accuracy, oracle_pms, LinearWeights, PreferenceModel};
use crate::rng;
use crate::scalarization::{logistic, validate_spec, ScalarizationSpec};
use crate::world::{sample_categorical, Policy, ResponseSpace, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Protocol {
    /// Forced choice, as with the automated judge.
    WithoutTie,
    /// Human-style protocol: utility gaps below `tie_band` are ties.
    WithTie { tie_band: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRateResult {
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    pub n: u64,
    /// `(wins + ties / 2) / n`.
    pub win_rate: f64,
    pub tie_rate: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub protocol: Protocol,
}

impl WinRateResult {
    fn from_counts(wins: u64, losses: u64, ties: u64, protocol: Protocol) -> Self {
        let n = wins + losses + ties;
        let win_rate = (wins as f64 + 0.5 * ties as f64) / n as f64;
        WinRateResult {
            wins,
            losses,
            ties,
            n,
            win_rate,
            tie_rate: ties as f64 / n as f64,
            ci95: ci95(win_rate, n),
            protocol,
        }
    }

    /// The same comparisons seen from the other policy.
    pub fn mirrored(&self) -> Self {
        WinRateResult {
            wins: self.losses,
            losses: self.wins,
            win_rate: 1.0 - self.win_rate,
            ..*self
        }
    }
}

pub fn ci95(p: f64, n: u64) -> f64 {
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}

fn fingerprint(policy: &Policy) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for row in &policy.logits {
        for l in row {
            for b in l.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

fn check_policies(x: &Policy, y: &Policy, space: &ResponseSpace) -> Result<()> {
    for p in [x, y] {
        if p.n_prompts() != space.n_prompts || p.logits.iter().any(|l| l.len() != space.n_templates) {
            return Err(Error::Config("policy shape does not match the response space".into()));
        }
    }
    Ok(())
}

/// Head-to-head judge comparisons of `x` against `y`.
///
/// Each trial draws a prompt and one response per policy, shows them in a
/// random order and records the judge's choice from `x`'s side. The pair of
/// policies is put in a fixed order before sampling, so the same seed with
/// the arguments swapped replays the same comparisons and
/// `win_rate(y, x) = 1 - win_rate(x, y)`.
pub fn win_rate(
    x: &Policy,
    y: &Policy,
    world: &World,
    space: &ResponseSpace,
    protocol: Protocol,
    n: u64,
    seed: u64,
) -> Result<WinRateResult> {
    if n == 0 {
        return Err(Error::Empty("win-rate trials"));
    }
    check_policies(x, y, space)?;
    let (allow_tie, band) = match protocol {
        Protocol::WithoutTie => (false, 0.0),
        Protocol::WithTie { tie_band } if tie_band >= 0.0 => (true, tie_band),
        Protocol::WithTie { tie_band } => {
            return Err(Error::Config(format!("tie_band must be >= 0, got {tie_band}")))
        }
    };
    let flip = fingerprint(x) > fingerprint(y);
    let (first, second) = if flip { (y, x) } else { (x, y) };
    let lp1: Vec<Vec<f64>> = (0..space.n_prompts).map(|p| first.log_probs(p)).collect();
    let lp2: Vec<Vec<f64>> = (0..space.n_prompts).map(|p| second.log_probs(p)).collect();
    let (w, l, t) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, "win-rate", i);
            let prompt = r.random_range(0..space.n_prompts);
            let a = sample_categorical(&lp1[prompt], &mut r);
            let b = sample_categorical(&lp2[prompt], &mut r);
            let swapped: bool = r.random();
            let (da, db) = if swapped { (b, a) } else { (a, b) };
            let delta = world.utility_of(space.phi(prompt, da)) - world.utility_of(space.phi(prompt, db));
            let shown = judge_decision(delta, world.judge_temp, allow_tie, band, &mut r);
            match if swapped { shown.flipped() } else { shown } {
                Label::A => (1u64, 0u64, 0u64),
                Label::B => (0, 1, 0),
                Label::Tie => (0, 0, 1),
            }
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let res = WinRateResult::from_counts(w, l, t, protocol);
    Ok(if flip { res.mirrored() } else { res })
}

/// Exact expected forced-choice win rate of `x` over `y`.
pub fn expected_win_rate(x: &Policy, y: &Policy, world: &World, space: &ResponseSpace) -> Result<f64> {
    check_policies(x, y, space)?;
    let mut total = 0.0;
    for p in 0..space.n_prompts {
        let u: Vec<f64> = (0..space.n_templates)
            .map(|k| world.utility_of(space.phi(p, k)))
            .collect();
        let px = x.probs(p);
        let py = y.probs(p);
        for (a, pa) in px.iter().enumerate() {
            for (b, pb) in py.iter().enumerate() {
                total += pa * pb * logistic((u[a] - u[b]) / world.judge_temp);
            }
        }
    }
    Ok(total / space.n_prompts as f64)
}

/// Tie band giving roughly `target` ties between two policies' responses.
pub fn calibrate_tie_band(
    x: &Policy,
    y: &Policy,
    world: &World,
    space: &ResponseSpace,
    target: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Config(format!("tie rate target must lie in [0, 1), got {target}")));
    }
    if n == 0 {
        return Err(Error::Empty("tie calibration sample"));
    }
    check_policies(x, y, space)?;
    let mut r = rng::stream(seed, "tie-band", 0);
    let mut gaps: Vec<f64> = (0..n)
        .map(|_| {
            let p = r.random_range(0..space.n_prompts);
            let a = sample_categorical(&x.log_probs(p), &mut r);
            let b = sample_categorical(&y.log_probs(p), &mut r);
            (world.utility_of(space.phi(p, a)) - world.utility_of(space.phi(p, b))).abs()
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    let k = ((target * n as f64).round() as usize).min(n - 1);
    let band = if k == 0 { 0.0 } else { 0.5 * (gaps[k - 1] + gaps[k]) };
    if band > 0.0 || target == 0.0 {
        return Ok(band);
    }
    // identical responses already fill the target; keep the band positive
    // so they still tie
    Ok(gaps.iter().find(|&&g| g > 0.0).map_or(1e-9, |g| 0.5 * g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateMatrix {
    /// `rates[i][j]` is the rate at which policy `i` beats policy `j`.
    pub rates: Vec<Vec<f64>>,
    pub cells: Vec<Vec<Option<WinRateResult>>>,
}

pub fn winrate_matrix(
    policies: &[Policy],
    world: &World,
    space: &ResponseSpace,
    protocol: Protocol,
    n: u64,
    seed: u64,
) -> Result<WinRateMatrix> {
    let m = policies.len();
    if m < 2 {
        return Err(Error::Empty("win-rate matrix (need at least 2 policies)"));
    }
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let results: Vec<WinRateResult> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let cell_seed = rng::derive_seed(seed, "win-rate-cell", (i * m + j) as u64);
            win_rate(&policies[i], &policies[j], world, space, protocol, n, cell_seed)
        })
        .collect::<Result<_>>()?;
    let mut rates = vec![vec![0.5; m]; m];
    let mut cells = vec![vec![None; m]; m];
    for (&(i, j), res) in pairs.iter().zip(results) {
        rates[i][j] = res.win_rate;
        rates[j][i] = 1.0 - res.win_rate;
        cells[i][j] = Some(res);
        cells[j][i] = Some(res.mirrored());
    }
    Ok(WinRateMatrix { rates, cells })
}

/// Pearson correlations between per-principle label vectors on shared pairs.
/// Entries involving a principle with constant labels are `None`.
pub fn principle_correlations(per_principle: &[Vec<ComparisonRecord>]) -> Result<Vec<Vec<Option<f64>>>> {
    let n = per_principle.len();
    let first = per_principle.first().ok_or(Error::Empty("principle label sets"))?;
    if first.is_empty() {
        return Err(Error::Empty("labeled pairs"));
    }
    let mut columns = Vec::with_capacity(n);
    for set in per_principle {
        if set.len() != first.len() || set.iter().zip(first).any(|(a, b)| a.pair_id != b.pair_id) {
            return Err(Error::Config(
                "every principle must label the same pairs in the same order".into(),
            ));
        }
        let col: Vec<f64> = set
            .iter()
            .map(|r| r.canonical().label.map_or(f64::NAN, Label::target))
            .collect();
        if col.iter().any(|v| v.is_nan()) {
            return Err(Error::Config("unlabeled record in correlation input".into()));
        }
        columns.push(col);
    }
    let centered: Vec<(Vec<f64>, f64)> = columns
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let d: Vec<f64> = c.iter().map(|v| v - m).collect();
            let ss = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            (d, ss)
        })
        .collect();
    let mut out = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let (di, si) = &centered[i];
            let (dj, sj) = &centered[j];
            let v = if *si <= 0.0 || *sj <= 0.0 {
                None
            } else if i == j {
                Some(1.0)
            } else {
                let c = di.iter().zip(dj).map(|(a, b)| a * b).sum::<f64>() / (si * sj);
                Some(c.clamp(-1.0, 1.0))
            };
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(out)
}

/// Mean off-diagonal correlation per principle, skipping missing entries.
pub fn mean_off_diagonal(corr: &[Vec<Option<f64>>]) -> Vec<Option<f64>> {
    corr.iter()
        .enumerate()
        .map(|(i, row)| {
            let vals: Vec<f64> = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .filter_map(|(_, v)| *v)
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub k: usize,
    pub kept: Vec<usize>,
    pub accuracy: f64,
    pub ceiling: f64,
}

pub struct AblationInputs<'a> {
    pub pms: &'a [PreferenceModel],
    pub weights: &'a LinearWeights,
    pub world: &'a World,
    pub space: &'a ResponseSpace,
    pub names: &'a [String],
    pub train: &'a [ComparisonRecord],
    pub ceiling_train: &'a [ComparisonRecord],
    pub test: &'a [ComparisonRecord],
    pub solver: SolverConfig,
}

/// Principles sorted by ascending signed weight, ties by index.
pub fn weight_order(weights: &LinearWeights) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.w.len()).collect();
    order.sort_by(|&a, &b| weights.w[a].total_cmp(&weights.w[b]).then(a.cmp(&b)));
    order
}

fn linear_accuracy(
    pms: &[PreferenceModel],
    space: &ResponseSpace,
    train: &[ComparisonRecord],
    test: &[ComparisonRecord],
    solver: &SolverConfig,
) -> Result<f64> {
    let w = fit_linear_weights(pms, space, train, None, solver)?;
    let spec = validate_spec(&ScalarizationSpec::weighted_linear(w.w), pms.len())?;
    multiobjective_accuracy(pms, &spec, space, test)
}

/// Removes principles lowest-order first, refitting linear weights on the
/// survivors at each size, for both fitted and exact scorers.
pub fn ablation_curve(inputs: &AblationInputs<'_>, order: Option<Vec<usize>>) -> Result<Vec<AblationPoint>> {
    let n = inputs.pms.len();
    let order = order.unwrap_or_else(|| weight_order(inputs.weights));
    let mut seen = order.clone();
    seen.sort_unstable();
    if seen != (0..n).collect::<Vec<_>>() {
        return Err(Error::Config("ablation order must be a permutation of the principles".into()));
    }
    if n == 0 {
        return Err(Error::Empty("ablation survivor set"));
    }
    let oracles = oracle_pms(inputs.world, inputs.names);
    (1..=n)
        .rev()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&k| {
            let mut kept = order[n - k..].to_vec();
            kept.sort_unstable();
            let fitted: Vec<PreferenceModel> = kept.iter().map(|&i| inputs.pms[i].clone()).collect();
            let exact: Vec<PreferenceModel> = kept.iter().map(|&i| oracles[i].clone()).collect();
            Ok(AblationPoint {
                k,
                accuracy: linear_accuracy(&fitted, inputs.space, inputs.train, inputs.test, &inputs.solver)?,
                ceiling: linear_accuracy(&exact, inputs.space, inputs.ceiling_train, inputs.test, &inputs.solver)?,
                kept,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pairs, Annotators};
    use crate::ppo::exact_best_response;
    use crate::rng::StreamRng;
    use crate::world::{make_world, AnnotatorTemps, PolicyTag, WorldConfig};
    use rand::SeedableRng;
    use std::sync::Arc;

    fn setup() -> (World, ResponseSpace) {
        make_world(&WorldConfig::default(), 11).unwrap()
    }

    #[test]
    fn identical_policies_split_evenly() {
        let (world, space) = setup();
        let pol = Policy::reference(&space, 1.0, 1);
        let r = win_rate(&pol, &pol, &world, &space, Protocol::WithoutTie, 10_000, 3).unwrap();
        assert!((r.win_rate - 0.5).abs() < 0.02, "{}", r.win_rate);
        assert_eq!(r.ties, 0);
        assert_eq!(r.wins + r.losses, 10_000);
    }

    #[test]
    fn swapping_arguments_mirrors_exactly() {
        let (world, space) = setup();
        let x = Policy::reference(&space, 1.0, 1);
        let y = Policy::reference(&space, 2.0, 2);
        for protocol in [Protocol::WithoutTie, Protocol::WithTie { tie_band: 0.5 }] {
            let xy = win_rate(&x, &y, &world, &space, protocol, 3001, 9).unwrap();
            let yx = win_rate(&y, &x, &world, &space, protocol, 3001, 9).unwrap();
            assert_eq!(xy.win_rate + yx.win_rate, 1.0);
            assert_eq!((xy.wins, xy.losses, xy.ties), (yx.losses, yx.wins, yx.ties));
        }
    }

    #[test]
    fn oracle_beats_uniform_under_low_noise() {
        let (mut world, space) = setup();
        world.judge_temp = 0.05;
        let best = exact_best_response(&space, |p, k| world.utility_of(space.phi(p, k)));
        let uniform = Policy::uniform(space.n_prompts, space.n_templates, PolicyTag::SftReference);
        let r = win_rate(&best, &uniform, &world, &space, Protocol::WithoutTie, 10_000, 1).unwrap();
        let exact = expected_win_rate(&best, &uniform, &world, &space).unwrap();
        assert!(r.win_rate > 0.9, "{}", r.win_rate);
        assert!((r.win_rate - exact).abs() < 4.0 * r.ci95 / 1.96);
    }

    #[test]
    fn tie_band_hits_target_rate() {
        let (world, space) = setup();
        let x = Policy::reference(&space, 1.0, 1);
        let y = Policy::reference(&space, 1.0, 2);
        let band = calibrate_tie_band(&x, &y, &world, &space, 0.2, 20_000, 4).unwrap();
        let r = win_rate(&x, &y, &world, &space, Protocol::WithTie { tie_band: band }, 20_000, 5).unwrap();
        assert!((r.tie_rate - 0.2).abs() < 0.02, "{}", r.tie_rate);
    }

    #[test]
    fn ci_shrinks_with_n() {
        assert!((ci95(0.5, 400) / ci95(0.5, 1600) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_is_antisymmetric() {
        let (world, space) = setup();
        let pols: Vec<Policy> = (0..4).map(|s| Policy::reference(&space, 1.5, s)).collect();
        let m = winrate_matrix(&pols, &world, &space, Protocol::WithoutTie, 500, 2).unwrap();
        for i in 0..4 {
            assert_eq!(m.rates[i][i], 0.5);
            for j in 0..4 {
                if i != j {
                    assert_eq!(m.rates[i][j] + m.rates[j][i], 1.0);
                }
            }
        }
        assert!(winrate_matrix(&pols[..1], &world, &space, Protocol::WithoutTie, 10, 0).is_err());
    }

    fn names(n: usize) -> Arc<[String]> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn correlations_basic_properties() {
        let (world, space) = setup();
        let pol = Policy::uniform(space.n_prompts, space.n_templates, PolicyTag::SftReference);
        let pairs = generate_pairs(&space, &pol, 2000, &mut StreamRng::seed_from_u64(1)).unwrap();
        let ann = Annotators::new(&world, &space, names(12)).unwrap();
        let mut sets = ann.label_all_principles(&pairs, 2);
        sets.push(sets[0].clone());
        let c = principle_correlations(&sets).unwrap();
        assert_eq!(c[0][12], Some(1.0));
        for i in 0..13 {
            assert_eq!(c[i][i], Some(1.0));
            for j in 0..13 {
                assert_eq!(c[i][j], c[j][i]);
            }
        }
        let mut constant = sets[1].clone();
        for r in &mut constant {
            r.label = Some(if r.position_swapped { Label::B } else { Label::A });
        }
        let c = principle_correlations(&[sets[0].clone(), constant]).unwrap();
        assert_eq!(c[0][1], None);
        assert_eq!(c[1][1], None);
    }

    #[test]
    fn coin_flip_labelers_are_uncorrelated() {
        let cfg = WorldConfig {
            annotator_temps: AnnotatorTemps::Explicit { temps: vec![1e12; 12] },
            ..Default::default()
        };
        let (world, space) = make_world(&cfg, 3).unwrap();
        let pol = Policy::uniform(space.n_prompts, space.n_templates, PolicyTag::SftReference);
        let pairs = generate_pairs(&space, &pol, 10_000, &mut StreamRng::seed_from_u64(1)).unwrap();
        let ann = Annotators::new(&world, &space, names(12)).unwrap();
        let c = principle_correlations(&ann.label_all_principles(&pairs, 2)).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                if i != j {
                    assert!(c[i][j].unwrap().abs() < 0.05, "{:?}", c[i][j]);
                }
            }
        }
    }

    #[test]
    fn weight_order_is_ascending() {
        let w = LinearWeights {
            principles: names(4),
            w: vec![0.3, -0.1, 0.3, 0.0],
            fit_meta: crate::pm::WeightsMeta {
                regularization: 0.0,
                train_accuracy: 0.0,
                heldout_accuracy: None,
                iterations: 0,
            },
        };
        assert_eq!(weight_order(&w), vec![1, 3, 0, 2]);
    }
}
