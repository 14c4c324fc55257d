//! Exit confidence measures and the per-inference exit controller.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, dot_and_norms};
use crate::model::{count_flops, forward_exit, forward_stage, BranchNetSpec};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Feature-difference thresholds of the seven-exit two-student setup.
pub const DEFAULT_DIFF_THRESHOLDS: [f64; 7] = [1.0, 1.12, 1.14, 1.16, 1.18, 1.20, 1.22];

/// Neighbor-similarity thresholds of the seven-exit setup. Entry 1 has no
/// neighbor pair and is never consulted.
pub const DEFAULT_SIMILARITY_THRESHOLDS: [f64; 7] = [0.97, 0.97, 0.97, 0.97, 0.97, 0.975, 0.98];

/// Entropy thresholds (nats) used when none are configured.
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.5;

const PROBABILITY_SUM_TOLERANCE: f64 = 1e-5;

/// Shannon entropy `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy(probabilities: &Tensor) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut h = 0.0f64;
    for (index, &p) in probabilities.data().iter().enumerate() {
        if p < 0.0 || p.is_nan() {
            return Err(Error::NegativeProbability { index, value: p });
        }
        let p = f64::from(p);
        sum += p;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
        return Err(Error::NotNormalized(sum));
    }
    Ok(h.max(0.0))
}

/// Relative feature difference `‖a‖·‖b‖ / (a·b)`, the reciprocal of the
/// cosine similarity. At least 1 for non-negative inputs.
pub fn feature_diff(feature: &Tensor, first: &Tensor) -> Result<f64> {
    let (dot, na, nb) = dot_and_norms(feature, first)?;
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateFeature("zero-norm operand".into()));
    }
    if dot <= 0.0 {
        return Err(Error::DegenerateFeature(format!(
            "non-positive dot product {dot}"
        )));
    }
    // sqrt(na * nb) is exact for identical operands, so diff(F, F) == 1.
    Ok((na * nb).sqrt() / dot)
}

/// Cosine similarity between the features of two neighboring exits.
pub fn neighbor_similarity(feature: &Tensor, previous: &Tensor) -> Result<f64> {
    kernels::cosine_similarity(feature, previous)
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyKind {
    /// Always run to the final exit.
    LastExit,
    /// Exit index drawn uniformly from `1..=M` per inference.
    Random { seed: u64 },
    /// Exit at `j >= 2` when `sim(F_j, F_{j-1})` exceeds threshold `j`.
    NeighborSimilarity { thresholds: Vec<f64> },
    /// Exit when `diff(F_j, F_1)` exceeds threshold `j`.
    FeatureDiff { thresholds: Vec<f64> },
    /// Exit when the entropy of the class probabilities falls below
    /// threshold `j`.
    Entropy { thresholds: Vec<f64> },
}

/// An exit policy with its comparison mode. Serialized flat, e.g.
/// `{"policy": "feature_diff", "thresholds": [...], "strict": true}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyFile", into = "PolicyFile")]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Strict comparisons (`>` / `<`) when true, inclusive otherwise.
    pub strict: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thresholds: Option<Vec<f64>>,
    #[serde(default = "strict_default")]
    strict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

fn strict_default() -> bool {
    true
}

impl TryFrom<PolicyFile> for PolicyConfig {
    type Error = Error;

    fn try_from(f: PolicyFile) -> Result<Self> {
        let need = |t: Option<Vec<f64>>| {
            t.ok_or_else(|| {
                Error::Config(format!("policy `{}` needs a threshold vector", f.policy))
            })
        };
        let kind = match f.policy.as_str() {
            "last_exit" => PolicyKind::LastExit,
            "random" => PolicyKind::Random {
                seed: f.seed.unwrap_or(0),
            },
            "neighbor_similarity" => PolicyKind::NeighborSimilarity {
                thresholds: need(f.thresholds)?,
            },
            "feature_diff" => PolicyKind::FeatureDiff {
                thresholds: need(f.thresholds)?,
            },
            "entropy" => PolicyKind::Entropy {
                thresholds: need(f.thresholds)?,
            },
            other => return Err(Error::Config(format!("unknown policy `{other}`"))),
        };
        Ok(Self {
            kind,
            strict: f.strict,
        })
    }
}

impl From<PolicyConfig> for PolicyFile {
    fn from(c: PolicyConfig) -> Self {
        let policy = c.name().to_string();
        let (thresholds, seed) = match c.kind {
            PolicyKind::LastExit => (None, None),
            PolicyKind::Random { seed } => (None, Some(seed)),
            PolicyKind::NeighborSimilarity { thresholds }
            | PolicyKind::FeatureDiff { thresholds }
            | PolicyKind::Entropy { thresholds } => (Some(thresholds), None),
        };
        Self {
            policy,
            thresholds,
            strict: c.strict,
            seed,
        }
    }
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self { kind, strict: true }
    }

    pub fn last_exit() -> Self {
        Self::new(PolicyKind::LastExit)
    }

    pub fn random(seed: u64) -> Self {
        Self::new(PolicyKind::Random { seed })
    }

    pub fn feature_diff(thresholds: &[f64]) -> Self {
        Self::new(PolicyKind::FeatureDiff {
            thresholds: thresholds.to_vec(),
        })
    }

    pub fn neighbor_similarity(thresholds: &[f64]) -> Self {
        Self::new(PolicyKind::NeighborSimilarity {
            thresholds: thresholds.to_vec(),
        })
    }

    pub fn entropy(thresholds: &[f64]) -> Self {
        Self::new(PolicyKind::Entropy {
            thresholds: thresholds.to_vec(),
        })
    }

    pub fn non_strict(mut self) -> Self {
        self.strict = false;
        self
    }

    /// Policy by name with default thresholds for an `exits`-exit model.
    /// Seven-exit models get the reference threshold vectors.
    pub fn named(name: &str, exits: usize, seed: u64) -> Result<Self> {
        let pick = |defaults: &[f64; 7], fallback: f64| {
            if exits == defaults.len() {
                defaults.to_vec()
            } else {
                vec![fallback; exits]
            }
        };
        Ok(match name {
            "last_exit" => Self::last_exit(),
            "random" => Self::random(seed),
            "feature_diff" => Self::new(PolicyKind::FeatureDiff {
                thresholds: pick(&DEFAULT_DIFF_THRESHOLDS, 1.1),
            }),
            "neighbor_similarity" => Self::new(PolicyKind::NeighborSimilarity {
                thresholds: pick(&DEFAULT_SIMILARITY_THRESHOLDS, 0.97),
            }),
            "entropy" => Self::entropy(&vec![DEFAULT_ENTROPY_THRESHOLD; exits]),
            other => return Err(Error::Config(format!("unknown policy `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            PolicyKind::LastExit => "last_exit",
            PolicyKind::Random { .. } => "random",
            PolicyKind::NeighborSimilarity { .. } => "neighbor_similarity",
            PolicyKind::FeatureDiff { .. } => "feature_diff",
            PolicyKind::Entropy { .. } => "entropy",
        }
    }

    pub fn thresholds(&self) -> Option<&[f64]> {
        match &self.kind {
            PolicyKind::NeighborSimilarity { thresholds }
            | PolicyKind::FeatureDiff { thresholds }
            | PolicyKind::Entropy { thresholds } => Some(thresholds),
            _ => None,
        }
    }

    pub fn needs_probabilities(&self) -> bool {
        matches!(self.kind, PolicyKind::Entropy { .. })
    }

    /// Threshold arity must equal the exit count and thresholds must be finite.
    pub fn validate(&self, exits: usize) -> Result<()> {
        if let Some(t) = self.thresholds() {
            if t.len() != exits {
                return Err(Error::Config(format!(
                    "policy `{}` has {} thresholds for a {exits}-exit model",
                    self.name(),
                    t.len()
                )));
            }
            if let Some(bad) = t.iter().find(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "policy `{}` has non-finite threshold {bad}",
                    self.name()
                )));
            }
        }
        Ok(())
    }

    fn passes(&self, measure: f64, threshold: f64, above: bool) -> bool {
        match (above, self.strict) {
            (true, true) => measure > threshold,
            (true, false) => measure >= threshold,
            (false, true) => measure < threshold,
            (false, false) => measure <= threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Exit,
    Continue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    /// Selected exit, 1-based.
    pub exit_index: usize,
    /// Measure observed at exits `1..=exit_index`; `None` where the policy
    /// has no measure or the feature was degenerate.
    pub measures: Vec<Option<f64>>,
    /// True when the exit came from a passed test rather than falling
    /// through to the final exit.
    pub exited_early: bool,
    /// Exits whose features were degenerate and treated as not confident.
    pub degenerate: Vec<usize>,
}

/// Per-inference state machine. Call [`step`](Self::step) with exits
/// `1, 2, ...` in order until it returns [`Step::Exit`].
#[derive(Clone, Debug)]
pub struct ExitController {
    policy: PolicyConfig,
    exits: usize,
    next: usize,
    first: Option<Tensor>,
    previous: Option<Tensor>,
    measures: Vec<Option<f64>>,
    degenerate: Vec<usize>,
    drawn: usize,
    decision: Option<ExitDecision>,
}

impl ExitController {
    /// `stream` selects an independent random sequence for the random
    /// policy, typically one per (input, student).
    pub fn new(policy: &PolicyConfig, exits: usize, stream: u64) -> Result<Self> {
        if exits == 0 {
            return Err(Error::Config("a model needs at least one exit".into()));
        }
        policy.validate(exits)?;
        let drawn = match policy.kind {
            PolicyKind::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                rng.random_range(1..=exits)
            }
            _ => exits,
        };
        Ok(Self {
            policy: policy.clone(),
            exits,
            next: 1,
            first: None,
            previous: None,
            measures: Vec::with_capacity(exits),
            degenerate: Vec::new(),
            drawn,
            decision: None,
        })
    }

    pub fn exits(&self) -> usize {
        self.exits
    }

    /// Exit index pre-drawn by the random policy.
    pub fn drawn_exit(&self) -> Option<usize> {
        matches!(self.policy.kind, PolicyKind::Random { .. }).then_some(self.drawn)
    }

    /// Records the measure at exit `j` and reports whether its threshold
    /// test passes, without deciding.
    pub fn observe(
        &mut self,
        j: usize,
        feature: &Tensor,
        probabilities: Option<&Tensor>,
    ) -> Result<bool> {
        if self.decision.is_some() || j != self.next || j > self.exits {
            return Err(Error::OutOfOrderStep {
                expected: self.next,
                got: j,
            });
        }
        self.next += 1;
        if j == 1 {
            self.first = Some(feature.clone());
        }
        let outcome = match &self.policy.kind {
            PolicyKind::LastExit => Ok((None, false)),
            PolicyKind::Random { .. } => Ok((None, j >= self.drawn)),
            PolicyKind::FeatureDiff { thresholds } => {
                let first = self.first.as_ref().expect("captured at j = 1");
                feature_diff(feature, first)
                    .map(|d| (Some(d), self.policy.passes(d, thresholds[j - 1], true)))
            }
            PolicyKind::NeighborSimilarity { thresholds } => match &self.previous {
                None => Ok((None, false)),
                Some(prev) => neighbor_similarity(feature, prev)
                    .map(|s| (Some(s), self.policy.passes(s, thresholds[j - 1], true))),
            },
            PolicyKind::Entropy { thresholds } => {
                let p = probabilities.ok_or(Error::MissingProbabilities(j))?;
                entropy(p).map(|h| (Some(h), self.policy.passes(h, thresholds[j - 1], false)))
            }
        };
        if matches!(self.policy.kind, PolicyKind::NeighborSimilarity { .. }) {
            self.previous = Some(feature.clone());
        }
        let (measure, passed) = match outcome {
            Ok(v) => v,
            Err(Error::DegenerateFeature(_)) => {
                self.degenerate.push(j);
                (None, false)
            }
            Err(e) => return Err(e),
        };
        self.measures.push(measure);
        Ok(passed)
    }

    /// Fixes the decision at the last observed exit.
    pub fn exit_here(&mut self, passed: bool) -> Result<&ExitDecision> {
        let j = self.next - 1;
        if j == 0 || self.decision.is_some() {
            return Err(Error::OutOfOrderStep {
                expected: self.next,
                got: j,
            });
        }
        self.decision = Some(ExitDecision {
            exit_index: j,
            measures: self.measures.clone(),
            exited_early: j < self.exits || passed,
            degenerate: self.degenerate.clone(),
        });
        Ok(self.decision.as_ref().expect("just set"))
    }

    pub fn step(
        &mut self,
        j: usize,
        feature: &Tensor,
        probabilities: Option<&Tensor>,
    ) -> Result<Step> {
        let passed = self.observe(j, feature, probabilities)?;
        if passed || j == self.exits {
            self.exit_here(passed)?;
            Ok(Step::Exit)
        } else {
            Ok(Step::Continue)
        }
    }

    pub fn decision(&self) -> Option<&ExitDecision> {
        self.decision.as_ref()
    }

    pub fn into_decision(self) -> Option<ExitDecision> {
        self.decision
    }
}

/// Which exit branches are charged to an inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitAccounting {
    /// Every exit branch evaluated on the way, since the controller needs
    /// `F_j` to decide.
    #[default]
    AllEvaluated,
    /// Only the exit that was taken.
    TakenOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyRun {
    pub decision: ExitDecision,
    /// Feature of the selected exit.
    pub feature: Tensor,
    pub flops: u64,
}

/// Runs one student stage by stage, consulting the controller at every exit.
pub fn run_policy(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    student: usize,
    input: &Tensor,
    policy: &PolicyConfig,
    accounting: ExitAccounting,
    stream: u64,
) -> Result<PolicyRun> {
    let cost = count_flops(spec)?;
    let mut controller = ExitController::new(policy, spec.exit_count(), stream)?;
    let students = if policy.needs_probabilities() {
        weights.student_count(spec)?
    } else {
        0
    };
    let mut x = input.clone();
    let mut flops = 0;
    for j in 1..=spec.exit_count() {
        x = forward_stage(spec, weights, student, j, &x)?;
        flops += cost.backbone[j - 1];
        let feature = forward_exit(spec, weights, student, j, &x)?;
        if accounting == ExitAccounting::AllEvaluated {
            flops += cost.exits[j - 1];
        }
        let probs = if policy.needs_probabilities() {
            Some(student_probabilities(
                spec, weights, students, student, &feature,
            )?)
        } else {
            None
        };
        if controller.step(j, &feature, probs.as_ref())? == Step::Exit {
            if accounting == ExitAccounting::TakenOnly {
                flops += cost.exits[j - 1];
            }
            let decision = controller.into_decision().expect("exited");
            return Ok(PolicyRun {
                decision,
                feature,
                flops,
            });
        }
    }
    unreachable!("the controller always exits at the final exit")
}

/// Class probabilities from one student alone: the fusion head with every
/// other student's feature slot zeroed.
pub fn student_probabilities(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    students: usize,
    student: usize,
    feature: &Tensor,
) -> Result<Tensor> {
    let zero = Tensor::zeros(spec.feature_shape())?;
    let features: Vec<Tensor> = (0..students)
        .map(|s| {
            if s == student {
                feature.clone()
            } else {
                zero.clone()
            }
        })
        .collect();
    Ok(kernels::softmax(&crate::model::fusion_forward(
        spec, weights, &features,
    )?))
}
