//! Report builders: static cost tables, policy benchmarks, measure curves and
//! threshold sweeps. Every builder returns an in-memory report; nothing is
//! written until the caller serializes it.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledImage, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::layer::FLOPS_CONVENTION;
use crate::model::{
    build_wrn16_with, count_flops, count_params, forward_features, BranchNetSpec, WrnOptions,
    DEFAULT_EXIT_POSITIONS,
};
use crate::policy::{feature_diff, neighbor_similarity, PolicyConfig, PolicyKind};
use crate::sim::{summarize, ClusterConfig, FeatureBank, InferenceTrace, PolicySummary};
use crate::weights::{sha256_hex, WeightStore};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Reference per-segment backbone MFLOPs of the seven-exit WRN-16×1 layout.
pub const REFERENCE_BACKBONE_MFLOPS: [f64; 7] = [0.459, 4.817, 4.817, 7.356, 4.768, 7.28, 4.74];
/// Reference per-exit MFLOPs of the same layout.
pub const REFERENCE_EXIT_MFLOPS: [f64; 7] = [0.067, 0.067, 0.067, 0.035, 0.035, 0.02, 0.02];
/// Plain single-exit network, including the final head.
pub const REFERENCE_NETWORK_MFLOPS: f64 = 34.26;
pub const REFERENCE_FLOPS_OVERHEAD: f64 = 0.0088;
pub const REFERENCE_BACKBONE_PARAMS: u64 = 178_540;
pub const REFERENCE_PARAMS_WITH_EXITS: u64 = 189_044;
pub const REFERENCE_PARAM_OVERHEAD: f64 = 0.0588;

fn mflops(flops: u64) -> f64 {
    flops as f64 / 1e6
}

fn deviation_pct(actual: f64, reference: f64) -> f64 {
    (actual - reference) / reference * 100.0
}

/// Parses `wrn16-<k>` into the width multiplier `k`.
pub fn parse_arch(arch: &str) -> Result<usize> {
    arch.strip_prefix("wrn16-")
        .and_then(|k| k.parse::<usize>().ok())
        .filter(|&k| k > 0)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown architecture `{arch}`, expected wrn16-<width>"
            ))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub exit: usize,
    pub position: usize,
    pub backbone_flops: u64,
    pub exit_flops: u64,
    pub cumulative_flops: u64,
    pub stage_params: u64,
    pub exit_params: u64,
    pub reference_backbone_mflops: Option<f64>,
    pub backbone_deviation_pct: Option<f64>,
    pub reference_exit_mflops: Option<f64>,
    pub exit_deviation_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsTotals {
    /// Stages plus the final exit head.
    pub network_flops: u64,
    pub total_with_exits_flops: u64,
    pub flops_overhead: f64,
    pub backbone_params: u64,
    pub params_with_exits: u64,
    pub param_overhead: f64,
    pub reference_network_mflops: Option<f64>,
    pub network_deviation_pct: Option<f64>,
    pub reference_backbone_params: Option<u64>,
    pub backbone_params_deviation_pct: Option<f64>,
    pub reference_params_with_exits: Option<u64>,
    pub params_with_exits_deviation_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsTable {
    pub width: usize,
    pub input_shape: Vec<usize>,
    pub flops_convention: String,
    pub rows: Vec<FlopsRow>,
    pub totals: FlopsTotals,
}

const FLOPS_CSV_HEADER: [&str; 11] = [
    "exit",
    "position",
    "backbone_mflops",
    "exit_mflops",
    "cumulative_mflops",
    "stage_params",
    "exit_params",
    "ref_backbone_mflops",
    "backbone_dev_pct",
    "ref_exit_mflops",
    "exit_dev_pct",
];

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_default()
}

impl FlopsTable {
    pub fn build(spec: &BranchNetSpec) -> Result<Self> {
        let flops = count_flops(spec)?;
        let params = count_params(spec);
        let reference_model =
            spec.width == 1 && spec.input_shape == [3, 32, 32] && spec.class_count == 10;
        let per_exit = reference_model && spec.exit_positions == DEFAULT_EXIT_POSITIONS;
        let mut rows = Vec::with_capacity(spec.exit_count());
        for j in 1..=spec.exit_count() {
            let (rb, re) = if per_exit {
                (
                    Some(REFERENCE_BACKBONE_MFLOPS[j - 1]),
                    Some(REFERENCE_EXIT_MFLOPS[j - 1]),
                )
            } else if reference_model && spec.exit_count() == 1 {
                // A single exit carries the whole network.
                (
                    Some(REFERENCE_BACKBONE_MFLOPS.iter().sum()),
                    Some(REFERENCE_EXIT_MFLOPS[6]),
                )
            } else {
                (None, None)
            };
            let backbone = flops.backbone[j - 1];
            let exit = flops.exits[j - 1];
            rows.push(FlopsRow {
                exit: j,
                position: spec.exit_positions[j - 1],
                backbone_flops: backbone,
                exit_flops: exit,
                cumulative_flops: flops.cumulative_backbone(j),
                stage_params: params.stages[j - 1],
                exit_params: params.exits[j - 1],
                reference_backbone_mflops: rb,
                backbone_deviation_pct: rb.map(|r| deviation_pct(mflops(backbone), r)),
                reference_exit_mflops: re,
                exit_deviation_pct: re.map(|r| deviation_pct(mflops(exit), r)),
            });
        }
        let network = flops.network_total();
        let ref_net = reference_model.then_some(REFERENCE_NETWORK_MFLOPS);
        let ref_bp = reference_model.then_some(REFERENCE_BACKBONE_PARAMS);
        let ref_wp = per_exit.then_some(REFERENCE_PARAMS_WITH_EXITS);
        let totals = FlopsTotals {
            network_flops: network,
            total_with_exits_flops: flops.total_with_exits(),
            flops_overhead: flops.early_exit_overhead(),
            backbone_params: params.backbone_total(),
            params_with_exits: params.total_with_exits(),
            param_overhead: params.early_exit_overhead(),
            reference_network_mflops: ref_net,
            network_deviation_pct: ref_net.map(|r| deviation_pct(mflops(network), r)),
            reference_backbone_params: ref_bp,
            backbone_params_deviation_pct: ref_bp
                .map(|r| deviation_pct(params.backbone_total() as f64, r as f64)),
            reference_params_with_exits: ref_wp,
            params_with_exits_deviation_pct: ref_wp
                .map(|r| deviation_pct(params.total_with_exits() as f64, r as f64)),
        };
        Ok(Self {
            width: spec.width,
            input_shape: spec.input_shape.clone(),
            flops_convention: FLOPS_CONVENTION.to_string(),
            rows,
            totals,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(FLOPS_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.exit.to_string(),
                r.position.to_string(),
                format!("{:.6}", mflops(r.backbone_flops)),
                format!("{:.6}", mflops(r.exit_flops)),
                format!("{:.6}", mflops(r.cumulative_flops)),
                r.stage_params.to_string(),
                r.exit_params.to_string(),
                opt(r.reference_backbone_mflops, 3),
                opt(r.backbone_deviation_pct, 2),
                opt(r.reference_exit_mflops, 3),
                opt(r.exit_deviation_pct, 2),
            ])?;
        }
        let t = &self.totals;
        w.write_record([
            "total".to_string(),
            String::new(),
            format!("{:.6}", mflops(t.network_flops)),
            format!("{:.6}", mflops(t.total_with_exits_flops - t.network_flops)),
            format!("{:.6}", mflops(t.total_with_exits_flops)),
            t.backbone_params.to_string(),
            (t.params_with_exits - t.backbone_params).to_string(),
            opt(t.reference_network_mflops, 3),
            opt(t.network_deviation_pct, 2),
            String::new(),
            String::new(),
        ])?;
        finish_csv(w)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "WRN-16x{} on {:?} ({})",
            self.width, self.input_shape, self.flops_convention
        );
        let _ = writeln!(
            s,
            "{:>4} {:>4} {:>12} {:>10} {:>10} {:>10} {:>9} {:>9}",
            "exit", "pos", "backbone MF", "ref", "dev %", "exit MF", "ref", "dev %"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>4} {:>4} {:>12.4} {:>10} {:>10} {:>10.4} {:>9} {:>9}",
                format!("E{}", r.exit),
                r.position,
                mflops(r.backbone_flops),
                opt(r.reference_backbone_mflops, 3),
                opt(r.backbone_deviation_pct, 2),
                mflops(r.exit_flops),
                opt(r.reference_exit_mflops, 3),
                opt(r.exit_deviation_pct, 2),
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "network {:.4} MFLOPs (ref {}, dev {} %); with exits {:.4} MFLOPs, early-exit overhead {:.2} %",
            mflops(t.network_flops),
            opt(t.reference_network_mflops, 2),
            opt(t.network_deviation_pct, 2),
            mflops(t.total_with_exits_flops),
            t.flops_overhead * 100.0
        );
        let with_ref = |v: u64, r: Option<u64>, d: Option<f64>| match (r, d) {
            (Some(r), Some(d)) => format!("{v} (ref {r}, dev {d:.2} %)"),
            _ => v.to_string(),
        };
        let _ = writeln!(
            s,
            "params {}; with exits {}, overhead {:.2} %",
            with_ref(
                t.backbone_params,
                t.reference_backbone_params,
                t.backbone_params_deviation_pct
            ),
            with_ref(
                t.params_with_exits,
                t.reference_params_with_exits,
                t.params_with_exits_deviation_pct
            ),
            t.param_overhead * 100.0
        );
        s
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Model section of a run configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: String,
    pub exits: Vec<usize>,
    pub classes: usize,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: "wrn16-1".into(),
            exits: DEFAULT_EXIT_POSITIONS.to_vec(),
            classes: CLASS_COUNT,
            input_size: 32,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<BranchNetSpec> {
        build_wrn16_with(
            &WrnOptions::new(parse_arch(&self.arch)?, &self.exits, self.classes)
                .input_size(self.input_size),
        )
    }
}

/// Contents of a `--config` file. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub cluster: Option<ClusterConfig>,
    pub policies: Option<Vec<PolicyConfig>>,
    pub per_class: Option<usize>,
    pub repeats: Option<usize>,
    pub seed: Option<u64>,
    /// Base thresholds and offsets for sweeps.
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: PolicyConfig,
    pub offsets: Vec<f64>,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    /// Images drawn per class.
    pub per_class: usize,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            per_class: 10,
            seed: 0,
            repeats: 1,
        }
    }
}

/// Seeded stratified sample: up to `per_class` indices of each label, in
/// class order. Classes with fewer images contribute all they have.
pub fn stratified_sample(labels: &[usize], per_class: usize, seed: u64) -> Vec<usize> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_class);
        out.extend(idx);
    }
    out
}

fn sample(dataset: &[LabeledImage], opts: &BenchOptions) -> Result<Vec<LabeledImage>> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if opts.per_class == 0 || opts.repeats == 0 {
        return Err(Error::Config(
            "per_class and repeats must be positive".into(),
        ));
    }
    let labels: Vec<usize> = dataset.iter().map(|i| i.label).collect();
    Ok(stratified_sample(&labels, opts.per_class, opts.seed)
        .into_iter()
        .map(|i| dataset[i].clone())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub schema_version: u32,
    /// Latencies come from the analytic cluster model, not wall-clock time.
    pub latency: String,
    pub flops_convention: String,
    /// FLOPs columns are per student per image.
    pub flops_per_image: String,
    pub seed: u64,
    pub per_class: usize,
    pub repeats: usize,
    pub images: usize,
    pub students: usize,
    pub exits: usize,
    pub spec_fingerprint: String,
    pub weights_fingerprint: String,
    pub config_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub policy: String,
    pub accuracy_pct: f64,
    pub mean_mflops: f64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub mean_transfer_ms: f64,
    pub degenerate_events: u64,
    /// Per student; each sums to `images × repeats`.
    pub exit_histograms: Vec<Vec<u64>>,
}

impl BenchRow {
    fn from_summary(s: &PolicySummary) -> Self {
        Self {
            policy: s.policy.clone(),
            accuracy_pct: s.accuracy * 100.0,
            mean_mflops: s.mean_flops / 1e6,
            mean_latency_ms: s.mean_makespan * 1e3,
            p50_latency_ms: s.p50_makespan * 1e3,
            p95_latency_ms: s.p95_makespan * 1e3,
            mean_transfer_ms: s.mean_transfer * 1e3,
            degenerate_events: s.degenerate_events,
            exit_histograms: s.exit_histograms.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<BenchRow>,
}

const BENCH_CSV_HEADER: [&str; 9] = [
    "policy",
    "accuracy_pct",
    "mean_mflops",
    "mean_latency_ms",
    "p50_latency_ms",
    "p95_latency_ms",
    "mean_transfer_ms",
    "images",
    "degenerate_events",
];

impl BenchReport {
    pub fn csv_header(students: usize, exits: usize) -> Vec<String> {
        let mut h: Vec<String> = BENCH_CSV_HEADER.iter().map(|s| s.to_string()).collect();
        for s in 0..students {
            for j in 1..=exits {
                h.push(format!("s{s}_exit{j}"));
            }
        }
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let m = &self.metadata;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::csv_header(m.students, m.exits))?;
        for r in &self.rows {
            let mut rec = vec![
                r.policy.clone(),
                format!("{:.2}", r.accuracy_pct),
                format!("{:.4}", r.mean_mflops),
                format!("{:.3}", r.mean_latency_ms),
                format!("{:.3}", r.p50_latency_ms),
                format!("{:.3}", r.p95_latency_ms),
                format!("{:.4}", r.mean_transfer_ms),
                (m.images * m.repeats).to_string(),
                r.degenerate_events.to_string(),
            ];
            rec.extend(r.exit_histograms.iter().flatten().map(u64::to_string));
            w.write_record(rec)?;
        }
        finish_csv(w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn config_fingerprint(parts: &impl Serialize) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(parts)?.as_bytes()))
}

fn checked_students(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    cluster: &ClusterConfig,
) -> Result<usize> {
    let students = weights.student_count(spec)?;
    weights.validate(spec, students)?;
    if students != cluster.students() {
        return Err(Error::Config(format!(
            "weights hold {students} students but the cluster has {} devices",
            cluster.students()
        )));
    }
    Ok(students)
}

/// Traces of `policy` over every repeat, concatenated. Repeat `r` reseeds the
/// cluster with `seed + r`, which only changes the random policy's draws.
fn repeated_traces(
    bank: &FeatureBank,
    spec: &BranchNetSpec,
    weights: &WeightStore,
    policy: &PolicyConfig,
    cluster: &ClusterConfig,
    opts: &BenchOptions,
) -> Result<Vec<InferenceTrace>> {
    let mut all = Vec::with_capacity(bank.len() * opts.repeats);
    for r in 0..opts.repeats {
        let mut c = cluster.clone();
        c.seed = opts.seed.wrapping_add(r as u64);
        all.extend(bank.traces(spec, weights, policy, &c)?);
    }
    Ok(all)
}

/// One row per policy over the same stratified subset.
pub fn run_bench(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    dataset: &[LabeledImage],
    policies: &[PolicyConfig],
    cluster: &ClusterConfig,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if policies.is_empty() {
        return Err(Error::Config("no policies to benchmark".into()));
    }
    for p in policies {
        p.validate(spec.exit_count())?;
    }
    cluster.validate()?;
    let students = checked_students(spec, weights, cluster)?;
    let subset = sample(dataset, opts)?;
    let bank = FeatureBank::build(spec, weights, &subset, students)?;
    let rows = policies
        .iter()
        .map(|p| {
            let traces = repeated_traces(&bank, spec, weights, p, cluster, opts)?;
            Ok(BenchRow::from_summary(&summarize(
                p.name(),
                spec.exit_count(),
                &traces,
            )?))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec_fingerprint = spec.fingerprint();
    Ok(BenchReport {
        metadata: ReportMetadata {
            schema_version: REPORT_SCHEMA_VERSION,
            latency: "simulated".into(),
            flops_convention: FLOPS_CONVENTION.into(),
            flops_per_image: "mean per student".into(),
            seed: opts.seed,
            per_class: opts.per_class,
            repeats: opts.repeats,
            images: subset.len(),
            students,
            exits: spec.exit_count(),
            config_fingerprint: config_fingerprint(&(&spec_fingerprint, cluster, policies, opts))?,
            spec_fingerprint,
            weights_fingerprint: weights.fingerprint(),
        },
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub exit: usize,
    pub position: usize,
    /// Non-degenerate samples behind the feature-difference statistics.
    pub samples: usize,
    /// Neighbor similarity with exit `j - 1`; absent at the first exit.
    pub similarity_mean: Option<f64>,
    pub similarity_std: Option<f64>,
    pub diff_mean: Option<f64>,
    pub diff_std: Option<f64>,
    pub degenerate: usize,
}

const CURVE_CSV_HEADER: [&str; 8] = [
    "exit",
    "position",
    "samples",
    "similarity_mean",
    "similarity_std",
    "diff_mean",
    "diff_std",
    "degenerate",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub images: usize,
    pub students: usize,
    pub seed: u64,
    pub weights_fingerprint: String,
    pub rows: Vec<CurveRow>,
}

impl CurveReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CURVE_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.exit.to_string(),
                r.position.to_string(),
                r.samples.to_string(),
                opt(r.similarity_mean, 6),
                opt(r.similarity_std, 6),
                opt(r.diff_mean, 6),
                opt(r.diff_std, 6),
                r.degenerate.to_string(),
            ])?;
        }
        finish_csv(w)
    }
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Per-exit neighbor similarity and difference-to-first-exit statistics,
/// pooled over every student and sampled image.
pub fn measure_curves(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    dataset: &[LabeledImage],
    opts: &BenchOptions,
) -> Result<CurveReport> {
    let students = weights.student_count(spec)?;
    weights.validate(spec, students)?;
    let subset = sample(dataset, opts)?;
    let features = subset
        .par_iter()
        .map(|img| {
            (0..students)
                .map(|s| forward_features(spec, weights, s, &img.pixels))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let m = spec.exit_count();
    let mut rows = Vec::with_capacity(m);
    for j in 1..=m {
        let mut sims = Vec::new();
        let mut diffs = Vec::new();
        let mut degenerate = 0;
        for per_student in features.iter().flatten() {
            let f = &per_student[j - 1];
            match feature_diff(f, &per_student[0]) {
                Ok(d) => diffs.push(d),
                Err(Error::DegenerateFeature(_)) => degenerate += 1,
                Err(e) => return Err(e),
            }
            if j >= 2 {
                match neighbor_similarity(f, &per_student[j - 2]) {
                    Ok(s) => sims.push(s),
                    Err(Error::DegenerateFeature(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        let (similarity_mean, similarity_std) = mean_std(&sims);
        let (diff_mean, diff_std) = mean_std(&diffs);
        rows.push(CurveRow {
            exit: j,
            position: spec.exit_positions[j - 1],
            samples: diffs.len(),
            similarity_mean,
            similarity_std,
            diff_mean,
            diff_std,
            degenerate,
        });
    }
    Ok(CurveReport {
        images: subset.len(),
        students,
        seed: opts.seed,
        weights_fingerprint: weights.fingerprint(),
        rows,
    })
}

/// `threshold + offset`, saturating at ±`f64::MAX` so infinite offsets stay
/// valid finite thresholds.
pub fn offset_threshold(threshold: f64, offset: f64) -> f64 {
    (threshold + offset).clamp(-f64::MAX, f64::MAX)
}

/// `base` with every threshold shifted by `offset`.
pub fn offset_policy(base: &PolicyConfig, offset: f64) -> Result<PolicyConfig> {
    if offset.is_nan() {
        return Err(Error::Config("sweep offset is NaN".into()));
    }
    let shift = |t: &[f64]| t.iter().map(|&v| offset_threshold(v, offset)).collect();
    let kind = match &base.kind {
        PolicyKind::FeatureDiff { thresholds } => PolicyKind::FeatureDiff {
            thresholds: shift(thresholds),
        },
        PolicyKind::NeighborSimilarity { thresholds } => PolicyKind::NeighborSimilarity {
            thresholds: shift(thresholds),
        },
        PolicyKind::Entropy { thresholds } => PolicyKind::Entropy {
            thresholds: shift(thresholds),
        },
        _ => {
            return Err(Error::Config(format!(
                "policy `{}` has no thresholds to sweep",
                base.name()
            )))
        }
    };
    Ok(PolicyConfig {
        kind,
        strict: base.strict,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub offset: f64,
    pub thresholds: Vec<f64>,
    pub accuracy_pct: f64,
    pub mean_mflops: f64,
    pub mean_latency_ms: f64,
    pub mean_exit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub policy: String,
    pub strict: bool,
    pub images: usize,
    pub seed: u64,
    pub weights_fingerprint: String,
    pub rows: Vec<SweepRow>,
}

const SWEEP_CSV_HEADER: [&str; 6] = [
    "offset",
    "thresholds",
    "accuracy_pct",
    "mean_mflops",
    "mean_latency_ms",
    "mean_exit",
];

// Saturated thresholds would otherwise print 309 digits.
fn format_threshold(t: f64) -> String {
    if t.abs() >= 1e9 {
        format!("{t:e}")
    } else {
        format!("{t}")
    }
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SWEEP_CSV_HEADER)?;
        for r in &self.rows {
            let thresholds: Vec<String> =
                r.thresholds.iter().map(|&t| format_threshold(t)).collect();
            w.write_record([
                format!("{}", r.offset),
                thresholds.join(";"),
                format!("{:.2}", r.accuracy_pct),
                format!("{:.4}", r.mean_mflops),
                format!("{:.3}", r.mean_latency_ms),
                format!("{:.4}", r.mean_exit),
            ])?;
        }
        finish_csv(w)
    }
}

/// One row per offset: the accuracy/cost point of `base` shifted uniformly.
pub fn threshold_sweep(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    dataset: &[LabeledImage],
    base: &PolicyConfig,
    offsets: &[f64],
    cluster: &ClusterConfig,
    opts: &BenchOptions,
) -> Result<SweepReport> {
    if offsets.is_empty() {
        return Err(Error::Config("sweep needs at least one offset".into()));
    }
    base.validate(spec.exit_count())?;
    let policies = offsets
        .iter()
        .map(|&o| offset_policy(base, o))
        .collect::<Result<Vec<_>>>()?;
    cluster.validate()?;
    let students = checked_students(spec, weights, cluster)?;
    let subset = sample(dataset, opts)?;
    let bank = FeatureBank::build(spec, weights, &subset, students)?;
    let rows = offsets
        .iter()
        .zip(&policies)
        .map(|(&offset, p)| {
            let traces = repeated_traces(&bank, spec, weights, p, cluster, opts)?;
            let s = summarize(p.name(), spec.exit_count(), &traces)?;
            let exits: usize = traces
                .iter()
                .flat_map(|t| &t.students)
                .map(|s| s.exit_index)
                .sum();
            Ok(SweepRow {
                offset,
                thresholds: p.thresholds().expect("threshold policy").to_vec(),
                accuracy_pct: s.accuracy * 100.0,
                mean_mflops: s.mean_flops / 1e6,
                mean_latency_ms: s.mean_makespan * 1e3,
                mean_exit: exits as f64 / (traces.len() * students) as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        policy: base.name().into(),
        strict: base.strict,
        images: subset.len(),
        seed: opts.seed,
        weights_fingerprint: weights.fingerprint(),
        rows,
    })
}
