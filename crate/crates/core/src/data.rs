//! Comparison records, pair generation and simulated annotators.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalarization::logistic;
use crate::world::{log_softmax, sample_categorical, Policy, ResponseSpace, World};

pub const GATE_FAILED: &str = "gate_failed";
pub const PARSE_FAILED: &str = "parse_failed";
pub const SUSPECTED_LLM: &str = "suspected_llm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    #[serde(rename = "TIE")]
    Tie,
}

impl Label {
    pub fn flipped(self) -> Label {
        match self {
            Label::A => Label::B,
            Label::B => Label::A,
            Label::Tie => Label::Tie,
        }
    }

    /// Soft target for "A preferred": 1, 0 or 0.5 for ties.
    pub fn target(self) -> f64 {
        match self {
            Label::A => 1.0,
            Label::B => 0.0,
            Label::Tie => 0.5,
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Label::A),
            "B" => Ok(Label::B),
            "TIE" => Ok(Label::Tie),
            other => Err(Error::Config(format!("invalid choice `{other}`"))),
        }
    }
}

/// What a judgment is about: one principle, or overall quality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Overall,
    Principle(String),
}

impl Target {
    pub const OVERALL: &'static str = "OVERALL";

    pub fn as_str(&self) -> &str {
        match self {
            Target::Overall => Self::OVERALL,
            Target::Principle(p) => p,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Target {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == Self::OVERALL {
            Target::Overall
        } else {
            Target::Principle(s)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Simulated,
    Human,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptRef {
    Index(usize),
    Conversation(Vec<Turn>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResponseRef {
    Template(usize),
    Text { id: String, text: String },
}

impl ResponseRef {
    fn same_id(&self, other: &ResponseRef) -> bool {
        match (self, other) {
            (ResponseRef::Template(a), ResponseRef::Template(b)) => a == b,
            (ResponseRef::Text { id: a, .. }, ResponseRef::Text { id: b, .. }) => a == b,
            _ => false,
        }
    }

    pub fn template(&self) -> Option<usize> {
        match self {
            ResponseRef::Template(k) => Some(*k),
            ResponseRef::Text { .. } => None,
        }
    }
}

/// One pairwise judgment.
///
/// `response_a`, `response_b` and `label` are stored in display orientation;
/// `position_swapped` records whether the display order differs from the
/// canonical (generation) order. [`ComparisonRecord::canonical`] undoes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonRecord {
    pub pair_id: String,
    pub prompt_ref: PromptRef,
    pub response_a: ResponseRef,
    pub response_b: ResponseRef,
    pub target: Target,
    /// `None` only for records flagged `parse_failed`.
    pub label: Option<Label>,
    pub source: Source,
    pub position_swapped: bool,
    #[serde(default)]
    pub quality_flags: BTreeSet<String>,
    /// Unix milliseconds. Simulated records use the run's fixed epoch.
    pub created_at: u64,
}

impl ComparisonRecord {
    pub fn validate(&self) -> Result<()> {
        if self.response_a.same_id(&self.response_b) {
            return Err(Error::Config(format!(
                "record {} compares a response with itself",
                self.pair_id
            )));
        }
        if self.label.is_none() && !self.quality_flags.contains(PARSE_FAILED) {
            return Err(Error::Config(format!(
                "record {} has no label and is not flagged {PARSE_FAILED}",
                self.pair_id
            )));
        }
        Ok(())
    }

    /// The record in canonical orientation (display swap undone).
    pub fn canonical(&self) -> ComparisonRecord {
        if !self.position_swapped {
            return self.clone();
        }
        ComparisonRecord {
            response_a: self.response_b.clone(),
            response_b: self.response_a.clone(),
            label: self.label.map(Label::flipped),
            position_swapped: false,
            ..self.clone()
        }
    }

    pub fn prompt_index(&self) -> Option<usize> {
        match self.prompt_ref {
            PromptRef::Index(p) => Some(p),
            PromptRef::Conversation(_) => None,
        }
    }

    /// `(prompt, a, b)` for records over the synthetic space.
    pub fn synthetic_pair(&self) -> Option<(usize, usize, usize)> {
        Some((
            self.prompt_index()?,
            self.response_a.template()?,
            self.response_b.template()?,
        ))
    }

    pub fn is_flagged(&self) -> bool {
        !self.quality_flags.is_empty()
    }
}

/// Two distinct responses to one prompt, canonical orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub id: u64,
    pub prompt: usize,
    pub a: usize,
    pub b: usize,
}

impl Pair {
    pub fn pair_id(&self, prefix: &str) -> String {
        format!("{prefix}-{:06}", self.id)
    }
}

pub fn generate_pairs<R: Rng + ?Sized>(
    space: &ResponseSpace,
    policy: &Policy,
    n_pairs: usize,
    rng: &mut R,
) -> Result<Vec<Pair>> {
    if n_pairs == 0 {
        return Err(Error::Empty("pair request"));
    }
    if space.n_templates < 2 {
        return Err(Error::InvalidWorld(
            "cannot form pairs with fewer than 2 templates".into(),
        ));
    }
    (0..n_pairs)
        .map(|i| {
            let prompt = rng.random_range(0..space.n_prompts);
            let lp = policy.log_probs(prompt);
            let a = sample_categorical(&lp, rng);
            // Rejecting b == a is the same as sampling from the policy
            // renormalized over the remaining templates.
            let mut rest = policy.logits[prompt].clone();
            rest[a] = f64::NEG_INFINITY;
            let b = sample_categorical(&log_softmax(&rest), rng);
            Ok(Pair {
                id: i as u64,
                prompt,
                a,
                b,
            })
        })
        .collect()
}

/// Bernoulli–Bradley–Terry decision on a score gap `delta = s(A) - s(B)`.
pub fn bt_decision<R: Rng + ?Sized>(delta: f64, temperature: f64, rng: &mut R) -> Label {
    let p = logistic(delta / temperature);
    if rng.random::<f64>() < p {
        Label::A
    } else {
        Label::B
    }
}

/// Judge decision with optional tie band.
pub fn judge_decision<R: Rng + ?Sized>(
    delta: f64,
    temperature: f64,
    allow_tie: bool,
    tie_band: f64,
    rng: &mut R,
) -> Label {
    if allow_tie && delta.abs() < tie_band {
        Label::Tie
    } else {
        bt_decision(delta, temperature, rng)
    }
}

/// Simulated feedback over a world: per-principle annotators, constitution
/// sampling and the overall judge.
#[derive(Debug, Clone)]
pub struct Annotators<'a> {
    pub world: &'a World,
    pub space: &'a ResponseSpace,
    pub principle_names: Arc<[String]>,
    pub prefix: String,
    pub epoch: u64,
}

impl<'a> Annotators<'a> {
    pub fn new(
        world: &'a World,
        space: &'a ResponseSpace,
        principle_names: Arc<[String]>,
    ) -> Result<Self> {
        if principle_names.len() != world.n_principles() {
            return Err(Error::Config(format!(
                "{} principle names for a world with {} principles",
                principle_names.len(),
                world.n_principles()
            )));
        }
        Ok(Annotators {
            world,
            space,
            principle_names,
            prefix: "pair".into(),
            epoch: 0,
        })
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.prefix = prefix.into();
        self
    }

    fn record(&self, pair: &Pair, swapped: bool, target: Target, label: Label) -> ComparisonRecord {
        let (da, db) = if swapped {
            (pair.b, pair.a)
        } else {
            (pair.a, pair.b)
        };
        ComparisonRecord {
            pair_id: pair.pair_id(&self.prefix),
            prompt_ref: PromptRef::Index(pair.prompt),
            response_a: ResponseRef::Template(da),
            response_b: ResponseRef::Template(db),
            target,
            label: Some(label),
            source: Source::Simulated,
            position_swapped: swapped,
            quality_flags: BTreeSet::new(),
            created_at: self.epoch,
        }
    }

    fn displayed(&self, pair: &Pair, swapped: bool) -> (&[f64], &[f64]) {
        let a = self.space.phi(pair.prompt, pair.a);
        let b = self.space.phi(pair.prompt, pair.b);
        if swapped {
            (b, a)
        } else {
            (a, b)
        }
    }

    fn check_principle(&self, i: usize) -> Result<()> {
        if i >= self.world.n_principles() {
            return Err(Error::IndexOutOfRange {
                kind: "principle",
                index: i,
                len: self.world.n_principles(),
            });
        }
        Ok(())
    }

    pub fn principle_label<R: Rng + ?Sized>(
        &self,
        pair: &Pair,
        principle: usize,
        rng: &mut R,
    ) -> Result<ComparisonRecord> {
        self.check_principle(principle)?;
        let swapped = rng.random::<bool>();
        let label = self.principle_decision(pair, swapped, principle, rng);
        Ok(self.record(
            pair,
            swapped,
            Target::Principle(self.principle_names[principle].clone()),
            label,
        ))
    }

    fn principle_decision<R: Rng + ?Sized>(
        &self,
        pair: &Pair,
        swapped: bool,
        principle: usize,
        rng: &mut R,
    ) -> Label {
        let (a, b) = self.displayed(pair, swapped);
        let delta = self.world.score_features(a, principle) - self.world.score_features(b, principle);
        bt_decision(delta, self.world.annotator_temps[principle], rng)
    }

    /// Labels by a uniformly sampled principle; the record says OVERALL so a
    /// model trained on it never sees which principle was used.
    pub fn constitution_label<R: Rng + ?Sized>(
        &self,
        pair: &Pair,
        principle_set: &[usize],
        rng: &mut R,
    ) -> Result<ComparisonRecord> {
        if principle_set.is_empty() {
            return Err(Error::Empty("constitution principle set"));
        }
        for &i in principle_set {
            self.check_principle(i)?;
        }
        let principle = principle_set[rng.random_range(0..principle_set.len())];
        let swapped = rng.random::<bool>();
        let label = self.principle_decision(pair, swapped, principle, rng);
        Ok(self.record(pair, swapped, Target::Overall, label))
    }

    pub fn judge_label<R: Rng + ?Sized>(
        &self,
        pair: &Pair,
        allow_tie: bool,
        tie_band: f64,
        rng: &mut R,
    ) -> Result<ComparisonRecord> {
        if !(tie_band >= 0.0) {
            return Err(Error::Config(format!("tie_band must be >= 0, got {tie_band}")));
        }
        let swapped = rng.random::<bool>();
        let (a, b) = self.displayed(pair, swapped);
        let delta = self.world.utility_of(a) - self.world.utility_of(b);
        let label = judge_decision(delta, self.world.judge_temp, allow_tie, tie_band, rng);
        Ok(self.record(pair, swapped, Target::Overall, label))
    }

    /// Labels every pair under every principle, one derived stream per pair.
    pub fn label_all_principles(&self, pairs: &[Pair], seed: u64) -> Vec<Vec<ComparisonRecord>> {
        let n = self.world.n_principles();
        let per_pair: Vec<Vec<ComparisonRecord>> = pairs
            .par_iter()
            .map(|pair| {
                let mut rng = rng::stream(seed, "principle-labels", pair.id);
                (0..n)
                    .map(|i| self.principle_label(pair, i, &mut rng).expect("valid index"))
                    .collect()
            })
            .collect();
        // transpose to per-principle datasets
        (0..n)
            .map(|i| per_pair.iter().map(|row| row[i].clone()).collect())
            .collect()
    }

    pub fn label_constitution(&self, pairs: &[Pair], set: &[usize], seed: u64) -> Result<Vec<ComparisonRecord>> {
        pairs
            .par_iter()
            .map(|pair| {
                let mut rng = rng::stream(seed, "constitution-labels", pair.id);
                self.constitution_label(pair, set, &mut rng)
            })
            .collect()
    }

    pub fn label_judge(
        &self,
        pairs: &[Pair],
        allow_tie: bool,
        tie_band: f64,
        seed: u64,
    ) -> Result<Vec<ComparisonRecord>> {
        pairs
            .par_iter()
            .map(|pair| {
                let mut rng = rng::stream(seed, "judge-labels", pair.id);
                self.judge_label(pair, allow_tie, tie_band, &mut rng)
            })
            .collect()
    }
}

pub fn write_records(path: &Path, records: &[ComparisonRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ComparisonRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ComparisonRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Serde(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::world::{make_world, PolicyTag, WorldConfig};
    use rand::SeedableRng;

    fn names(n: usize) -> Arc<[String]> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    fn setup(cfg: WorldConfig) -> (World, ResponseSpace) {
        make_world(&cfg, 9).unwrap()
    }

    #[test]
    fn two_templates_always_pair_the_same_two() {
        let (_, space) = setup(WorldConfig {
            n_templates: 2,
            n_prompts: 4,
            ..WorldConfig::default()
        });
        let policy = Policy::uniform(4, 2, PolicyTag::SftReference);
        let mut rng = StreamRng::seed_from_u64(1);
        for p in generate_pairs(&space, &policy, 200, &mut rng).unwrap() {
            assert_eq!((p.a.min(p.b), p.a.max(p.b)), (0, 1));
        }
        assert!(generate_pairs(&space, &policy, 0, &mut rng).is_err());
    }

    #[test]
    fn pairs_are_deterministic_and_distinct() {
        let (_, space) = setup(WorldConfig::default());
        let policy = Policy::reference(&space, 1.0, 3);
        let a = generate_pairs(&space, &policy, 500, &mut StreamRng::seed_from_u64(5)).unwrap();
        let b = generate_pairs(&space, &policy, 500, &mut StreamRng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.a != p.b));
    }

    #[test]
    fn degenerate_policy_still_pairs() {
        let (_, space) = setup(WorldConfig {
            n_prompts: 1,
            n_templates: 3,
            ..WorldConfig::default()
        });
        let policy = Policy {
            logits: vec![vec![800.0, 0.0, 0.0]],
            tag: PolicyTag::Trained,
        };
        let pairs = generate_pairs(&space, &policy, 50, &mut StreamRng::seed_from_u64(0)).unwrap();
        assert!(pairs.iter().all(|p| p.a == 0 && p.b != 0));
    }

    #[test]
    fn noiseless_annotator_follows_scores() {
        let (mut world, space) = setup(WorldConfig::default());
        world.annotator_temps = vec![1e-12; 12];
        let ann = Annotators::new(&world, &space, names(12)).unwrap();
        let mut rng = StreamRng::seed_from_u64(2);
        let pair = Pair { id: 0, prompt: 0, a: 0, b: 1 };
        for i in 0..12 {
            let better_a = world.score_features(space.phi(0, 0), i) > world.score_features(space.phi(0, 1), i);
            for _ in 0..20 {
                let rec = ann.principle_label(&pair, i, &mut rng).unwrap().canonical();
                assert_eq!(rec.label, Some(if better_a { Label::A } else { Label::B }));
                assert_eq!(rec.target, Target::Principle(format!("p{i}")));
                assert_eq!(rec.source, Source::Simulated);
            }
        }
        assert!(ann.principle_label(&pair, 12, &mut rng).is_err());
    }

    #[test]
    fn judge_ties_only_when_allowed() {
        let phi = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let space = ResponseSpace::from_features(vec![phi]).unwrap();
        let cfg = WorldConfig {
            n_principles: 2,
            feature_dim: 2,
            n_prompts: 1,
            n_templates: 3,
            correlation: crate::world::CorrelationTarget::Identity,
            ..WorldConfig::default()
        };
        let (world, _) = make_world(&cfg, 0).unwrap();
        let ann = Annotators::new(&world, &space, names(2)).unwrap();
        let mut rng = StreamRng::seed_from_u64(3);
        let identical = Pair { id: 0, prompt: 0, a: 0, b: 1 };
        for _ in 0..200 {
            assert_eq!(ann.judge_label(&identical, true, 0.01, &mut rng).unwrap().label, Some(Label::Tie));
            assert_ne!(ann.judge_label(&identical, false, 0.01, &mut rng).unwrap().label, Some(Label::Tie));
        }
        assert!(ann.judge_label(&identical, true, -1.0, &mut rng).is_err());
    }

    #[test]
    fn constitution_label_validates_set() {
        let (world, space) = setup(WorldConfig::default());
        let ann = Annotators::new(&world, &space, names(12)).unwrap();
        let pair = Pair { id: 0, prompt: 0, a: 0, b: 1 };
        let mut rng = StreamRng::seed_from_u64(3);
        assert!(ann.constitution_label(&pair, &[], &mut rng).is_err());
        let rec = ann.constitution_label(&pair, &[3], &mut rng).unwrap();
        assert_eq!(rec.target, Target::Overall);
    }

    #[test]
    fn canonical_undoes_swap() {
        let rec = ComparisonRecord {
            pair_id: "x-1".into(),
            prompt_ref: PromptRef::Index(0),
            response_a: ResponseRef::Template(3),
            response_b: ResponseRef::Template(1),
            target: Target::Overall,
            label: Some(Label::A),
            source: Source::Simulated,
            position_swapped: true,
            quality_flags: BTreeSet::new(),
            created_at: 0,
        };
        let c = rec.canonical();
        assert_eq!(c.response_a, ResponseRef::Template(1));
        assert_eq!(c.label, Some(Label::B));
        assert_eq!(c.canonical(), c);
        assert!(rec.validate().is_ok());
        let same = ComparisonRecord {
            response_b: ResponseRef::Template(3),
            ..rec.clone()
        };
        assert!(same.validate().is_err());
        let unlabeled = ComparisonRecord { label: None, ..rec };
        assert!(unlabeled.validate().is_err());
    }

    #[test]
    fn record_json_field_names() {
        let rec = ComparisonRecord {
            pair_id: "h-1".into(),
            prompt_ref: PromptRef::Conversation(vec![Turn {
                role: Role::Human,
                content: "hi".into(),
            }]),
            response_a: ResponseRef::Text {
                id: "g0".into(),
                text: "hello".into(),
            },
            response_b: ResponseRef::Text {
                id: "g1".into(),
                text: "hey".into(),
            },
            target: Target::Overall,
            label: Some(Label::Tie),
            source: Source::Human,
            position_swapped: false,
            quality_flags: [GATE_FAILED.to_string()].into(),
            created_at: 17,
        };
        let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
        for key in [
            "pair_id",
            "prompt_ref",
            "response_a",
            "response_b",
            "target",
            "label",
            "source",
            "position_swapped",
            "quality_flags",
            "created_at",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["label"], "TIE");
        assert_eq!(v["target"], "OVERALL");
        assert_eq!(v["source"], "human");
        let back: ComparisonRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, rec);
    }
}
