//! Deterministic edge-cluster simulation: N devices each run one student,
//! ship their exit feature to a coordinator, and the coordinator fuses them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{
    count_flops, forward_exit, forward_features, forward_stage, fusion_forward, BranchNetSpec,
    FlopsReport,
};
use crate::policy::{
    student_probabilities, ExitAccounting, ExitController, ExitDecision, PolicyConfig,
};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: String,
    /// FLOPs per second.
    pub compute_rate: f64,
    /// Fixed setup cost per inference, in seconds.
    #[serde(default)]
    pub per_inference_overhead: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds per message.
    #[serde(default)]
    pub latency: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    /// Every student applies the policy on its own and may stop at a
    /// different depth.
    #[default]
    Independent,
    /// All students stop at the first exit where every student passes.
    Synchronized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub devices: Vec<DeviceProfile>,
    /// Device-to-coordinator links, one per device.
    pub links: Vec<LinkProfile>,
    pub coordinator: DeviceProfile,
    #[serde(default)]
    pub exit_mode: ExitMode,
    #[serde(default)]
    pub exit_accounting: ExitAccounting,
    #[serde(default)]
    pub seed: u64,
}

/// Throughput and fixed cost fitted to the reference laptop timings:
/// about 8.2 ms per MFLOP on top of roughly 1.5 s per inference.
pub const REFERENCE_COMPUTE_RATE: f64 = 1.2e8;
pub const REFERENCE_OVERHEAD: f64 = 1.49;
pub const REFERENCE_BANDWIDTH: f64 = 1_048_576.0;
pub const REFERENCE_LINK_LATENCY: f64 = 0.005;

impl ClusterConfig {
    /// `students` identical devices and links.
    pub fn uniform(
        students: usize,
        device: DeviceProfile,
        link: LinkProfile,
        coordinator: DeviceProfile,
    ) -> Self {
        let devices = (0..students)
            .map(|i| DeviceProfile {
                device_id: format!("{}-{i}", device.device_id),
                ..device.clone()
            })
            .collect();
        Self {
            devices,
            links: vec![link; students],
            coordinator,
            exit_mode: ExitMode::default(),
            exit_accounting: ExitAccounting::default(),
            seed: 0,
        }
    }

    /// The calibrated default profile.
    pub fn reference(students: usize) -> Self {
        Self::uniform(
            students,
            DeviceProfile {
                device_id: "edge".into(),
                compute_rate: REFERENCE_COMPUTE_RATE,
                per_inference_overhead: REFERENCE_OVERHEAD,
            },
            LinkProfile {
                bandwidth: REFERENCE_BANDWIDTH,
                latency: REFERENCE_LINK_LATENCY,
            },
            DeviceProfile {
                device_id: "coordinator".into(),
                compute_rate: REFERENCE_COMPUTE_RATE,
                per_inference_overhead: 0.0,
            },
        )
    }

    pub fn students(&self) -> usize {
        self.devices.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::Config("cluster needs at least one device".into()));
        }
        if self.links.len() != self.devices.len() {
            return Err(Error::Config(format!(
                "{} devices but {} links",
                self.devices.len(),
                self.links.len()
            )));
        }
        for d in self.devices.iter().chain([&self.coordinator]) {
            if d.compute_rate.is_nan() || d.compute_rate <= 0.0 {
                return Err(Error::Config(format!(
                    "device `{}` has compute_rate {}, expected > 0",
                    d.device_id, d.compute_rate
                )));
            }
            if !(d.per_inference_overhead >= 0.0 && d.per_inference_overhead.is_finite()) {
                return Err(Error::Config(format!(
                    "device `{}` has overhead {}, expected a finite value >= 0",
                    d.device_id, d.per_inference_overhead
                )));
            }
        }
        for (i, l) in self.links.iter().enumerate() {
            if l.bandwidth.is_nan() || l.bandwidth <= 0.0 {
                return Err(Error::Config(format!(
                    "link {i} has bandwidth {}, expected > 0",
                    l.bandwidth
                )));
            }
            if !(l.latency >= 0.0 && l.latency.is_finite()) {
                return Err(Error::Config(format!(
                    "link {i} has latency {}, expected >= 0",
                    l.latency
                )));
            }
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        crate::weights::sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentTrace {
    pub exit_index: usize,
    pub exited_early: bool,
    pub measures: Vec<Option<f64>>,
    pub degenerate: Vec<usize>,
    pub flops: u64,
    pub compute_time: f64,
    pub transfer_time: f64,
    pub feature_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub input_id: usize,
    pub students: Vec<StudentTrace>,
    pub fusion_time: f64,
    /// Seconds: the slowest student's compute plus transfer, then fusion.
    pub makespan: f64,
    pub predicted_label: usize,
    pub true_label: usize,
}

impl InferenceTrace {
    pub fn correct(&self) -> bool {
        self.predicted_label == self.true_label
    }
}

/// Stream id for the random draws of one (seed, input, student) triple.
pub fn random_stream(seed: u64, input_id: usize, student: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ ((input_id as u64) << 16 | student as u64))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Where per-exit features come from: live stage-by-stage execution, or a
/// bank filled by one full pass per image.
trait FeatureSource {
    fn feature(&mut self, student: usize, exit: usize) -> Result<Tensor>;
}

struct Live<'a> {
    spec: &'a BranchNetSpec,
    weights: &'a WeightStore,
    activations: Vec<Tensor>,
}

impl FeatureSource for Live<'_> {
    fn feature(&mut self, student: usize, exit: usize) -> Result<Tensor> {
        let x = forward_stage(
            self.spec,
            self.weights,
            student,
            exit,
            &self.activations[student],
        )?;
        let f = forward_exit(self.spec, self.weights, student, exit, &x)?;
        self.activations[student] = x;
        Ok(f)
    }
}

struct Banked<'a>(&'a [Vec<Tensor>]);

impl FeatureSource for Banked<'_> {
    fn feature(&mut self, student: usize, exit: usize) -> Result<Tensor> {
        Ok(self.0[student][exit - 1].clone())
    }
}

struct Context<'a> {
    spec: &'a BranchNetSpec,
    weights: &'a WeightStore,
    cost: FlopsReport,
    policy: &'a PolicyConfig,
    cluster: &'a ClusterConfig,
}

impl<'a> Context<'a> {
    fn new(
        spec: &'a BranchNetSpec,
        weights: &'a WeightStore,
        policy: &'a PolicyConfig,
        cluster: &'a ClusterConfig,
    ) -> Result<Self> {
        cluster.validate()?;
        policy.validate(spec.exit_count())?;
        let students = weights.student_count(spec)?;
        if students != cluster.students() {
            return Err(Error::Config(format!(
                "weights hold {students} students but the cluster has {} devices",
                cluster.students()
            )));
        }
        Ok(Self {
            spec,
            weights,
            cost: count_flops(spec)?,
            policy,
            cluster,
        })
    }

    fn probabilities(&self, student: usize, feature: &Tensor) -> Result<Option<Tensor>> {
        if !self.policy.needs_probabilities() {
            return Ok(None);
        }
        student_probabilities(
            self.spec,
            self.weights,
            self.cluster.students(),
            student,
            feature,
        )
        .map(Some)
    }

    fn trace(
        &self,
        source: &mut dyn FeatureSource,
        input_id: usize,
        label: usize,
    ) -> Result<InferenceTrace> {
        let n = self.cluster.students();
        let m = self.spec.exit_count();
        let accounting = self.cluster.exit_accounting;
        let mut controllers = (0..n)
            .map(|s| {
                ExitController::new(
                    self.policy,
                    m,
                    random_stream(self.cluster.seed, input_id, s),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut flops = vec![0u64; n];
        let mut features: Vec<Option<Tensor>> = vec![None; n];

        match self.cluster.exit_mode {
            ExitMode::Independent => {
                for s in 0..n {
                    for j in 1..=m {
                        let f = source.feature(s, j)?;
                        flops[s] += self.cost.backbone[j - 1];
                        if accounting == ExitAccounting::AllEvaluated {
                            flops[s] += self.cost.exits[j - 1];
                        }
                        let probs = self.probabilities(s, &f)?;
                        if controllers[s].step(j, &f, probs.as_ref())? == crate::policy::Step::Exit
                        {
                            if accounting == ExitAccounting::TakenOnly {
                                flops[s] += self.cost.exits[j - 1];
                            }
                            features[s] = Some(f);
                            break;
                        }
                    }
                }
            }
            ExitMode::Synchronized => {
                for j in 1..=m {
                    let mut all = true;
                    let mut current = Vec::with_capacity(n);
                    for s in 0..n {
                        let f = source.feature(s, j)?;
                        flops[s] += self.cost.backbone[j - 1];
                        if accounting == ExitAccounting::AllEvaluated {
                            flops[s] += self.cost.exits[j - 1];
                        }
                        let probs = self.probabilities(s, &f)?;
                        all &= controllers[s].observe(j, &f, probs.as_ref())?;
                        current.push(f);
                    }
                    if all || j == m {
                        for (s, f) in current.into_iter().enumerate() {
                            controllers[s].exit_here(all)?;
                            if accounting == ExitAccounting::TakenOnly {
                                flops[s] += self.cost.exits[j - 1];
                            }
                            features[s] = Some(f);
                        }
                        break;
                    }
                }
            }
        }

        let features: Vec<Tensor> = features
            .into_iter()
            .map(|f| f.expect("every student exits"))
            .collect();
        let logits = fusion_forward(self.spec, self.weights, &features)?;
        let fusion_flops = self
            .spec
            .fusion_layer(n)
            .flops(&[n * self.spec.feature_dim])?;
        let coordinator = &self.cluster.coordinator;
        let fusion_time =
            fusion_flops as f64 / coordinator.compute_rate + coordinator.per_inference_overhead;

        let mut students = Vec::with_capacity(n);
        for (s, controller) in controllers.into_iter().enumerate() {
            let decision: ExitDecision = controller.into_decision().expect("every student exits");
            let device = &self.cluster.devices[s];
            let link = &self.cluster.links[s];
            let feature_bytes = features[s].byte_len();
            students.push(StudentTrace {
                exit_index: decision.exit_index,
                exited_early: decision.exited_early,
                measures: decision.measures,
                degenerate: decision.degenerate,
                flops: flops[s],
                compute_time: flops[s] as f64 / device.compute_rate + device.per_inference_overhead,
                transfer_time: feature_bytes as f64 / link.bandwidth + link.latency,
                feature_bytes,
            });
        }
        let slowest = students
            .iter()
            .map(|s| s.compute_time + s.transfer_time)
            .fold(0.0f64, f64::max);
        Ok(InferenceTrace {
            input_id,
            students,
            fusion_time,
            makespan: slowest + fusion_time,
            predicted_label: logits.argmax(),
            true_label: label,
        })
    }
}

/// Simulates one collaborative inference, executing each student stage by
/// stage only as deep as its exit.
pub fn simulate_inference(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    input: &LabeledImage,
    input_id: usize,
    policy: &PolicyConfig,
    cluster: &ClusterConfig,
) -> Result<InferenceTrace> {
    let ctx = Context::new(spec, weights, policy, cluster)?;
    let mut live = Live {
        spec,
        weights,
        activations: vec![input.pixels.clone(); cluster.students()],
    };
    ctx.trace(&mut live, input_id, input.label)
}

/// Traces for every image, in dataset order. Images run in parallel; each
/// trace depends only on its own input, so the result matches a sequential
/// run exactly.
pub fn simulate_traces(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    dataset: &[LabeledImage],
    policy: &PolicyConfig,
    cluster: &ClusterConfig,
) -> Result<Vec<InferenceTrace>> {
    let ctx = Context::new(spec, weights, policy, cluster)?;
    dataset
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let mut live = Live {
                spec,
                weights,
                activations: vec![image.pixels.clone(); cluster.students()],
            };
            ctx.trace(&mut live, i, image.label)
        })
        .collect()
}

/// Every exit feature of every student for a set of images, computed once so
/// several policies can be replayed without re-running the backbone.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    /// `[image][student][exit - 1]`.
    features: Vec<Vec<Vec<Tensor>>>,
    labels: Vec<usize>,
}

impl FeatureBank {
    pub fn build(
        spec: &BranchNetSpec,
        weights: &WeightStore,
        dataset: &[LabeledImage],
        students: usize,
    ) -> Result<Self> {
        let features = dataset
            .par_iter()
            .map(|image| {
                (0..students)
                    .map(|s| forward_features(spec, weights, s, &image.pixels))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features,
            labels: dataset.iter().map(|i| i.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, image: usize) -> &[Vec<Tensor>] {
        &self.features[image]
    }

    /// Same traces as [`simulate_traces`] on the images the bank was built from.
    pub fn traces(
        &self,
        spec: &BranchNetSpec,
        weights: &WeightStore,
        policy: &PolicyConfig,
        cluster: &ClusterConfig,
    ) -> Result<Vec<InferenceTrace>> {
        let ctx = Context::new(spec, weights, policy, cluster)?;
        if self
            .features
            .first()
            .is_some_and(|f| f.len() != cluster.students())
        {
            return Err(Error::Config(
                "feature bank student count differs from the cluster".into(),
            ));
        }
        self.features
            .par_iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (features, &label))| ctx.trace(&mut Banked(features), i, label))
            .collect()
    }
}

/// Aggregate statistics of one policy over a set of traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub images: usize,
    /// Fraction of fused predictions equal to the label.
    pub accuracy: f64,
    /// FLOPs summed over students, divided by students and images.
    pub mean_flops: f64,
    pub mean_makespan: f64,
    pub p50_makespan: f64,
    pub p95_makespan: f64,
    pub mean_transfer: f64,
    /// Per student, count of inferences that left at each exit.
    pub exit_histograms: Vec<Vec<u64>>,
    pub degenerate_events: u64,
}

pub fn summarize(policy: &str, exits: usize, traces: &[InferenceTrace]) -> Result<PolicySummary> {
    if traces.is_empty() {
        return Err(Error::Config("cannot summarize an empty dataset".into()));
    }
    let images = traces.len();
    let students = traces[0].students.len();
    let mut histograms = vec![vec![0u64; exits]; students];
    let mut flops = 0u128;
    let mut transfer = 0.0;
    let mut degenerate = 0u64;
    for t in traces {
        for (s, st) in t.students.iter().enumerate() {
            histograms[s][st.exit_index - 1] += 1;
            flops += u128::from(st.flops);
            transfer += st.transfer_time;
            degenerate += st.degenerate.len() as u64;
        }
    }
    let mut makespans: Vec<f64> = traces.iter().map(|t| t.makespan).collect();
    makespans.sort_by(f64::total_cmp);
    Ok(PolicySummary {
        policy: policy.to_string(),
        images,
        accuracy: traces.iter().filter(|t| t.correct()).count() as f64 / images as f64,
        mean_flops: flops as f64 / (students * images) as f64,
        mean_makespan: makespans.iter().sum::<f64>() / images as f64,
        p50_makespan: percentile(&makespans, 50.0),
        p95_makespan: percentile(&makespans, 95.0),
        mean_transfer: transfer / (students * images) as f64,
        exit_histograms: histograms,
        degenerate_events: degenerate,
    })
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn simulate_dataset(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    dataset: &[LabeledImage],
    policy: &PolicyConfig,
    cluster: &ClusterConfig,
) -> Result<PolicySummary> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let traces = simulate_traces(spec, weights, dataset, policy, cluster)?;
    summarize(policy.name(), spec.exit_count(), &traces)
}

/// Fused accuracy of the plain model (every student at its final exit),
/// computed without the simulator.
pub fn direct_accuracy(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    dataset: &[LabeledImage],
    students: usize,
) -> Result<f64> {
    let correct = dataset
        .par_iter()
        .map(|image| {
            let features = (0..students)
                .map(|s| {
                    forward_features(spec, weights, s, &image.pixels)
                        .map(|mut f| f.pop().expect("one exit"))
                })
                .collect::<Result<Vec<_>>>()?;
            let probs = kernels::softmax(&fusion_forward(spec, weights, &features)?);
            Ok(usize::from(probs.argmax() == image.label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / dataset.len().max(1) as f64)
}
