//! Naive f64 reference kernels and a monolithic WRN-16 forward pass written
//! directly from the architecture description, independent of the graph
//! executor in the library.

#![allow(dead_code)]

use distree_core::data::LabeledImage;
use distree_core::{Tensor, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A `C×H×W` activation in f64.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor) -> Self {
        let (c, h, w) = t.chw().expect("rank 3");
        Self {
            c,
            h,
            w,
            v: t.data().iter().map(|&x| f64::from(x)).collect(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

fn w64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| f64::from(x)).collect()
}

pub fn conv(input: &Map, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Map {
    let [oc, ic, kh, kw] = *weight.shape() else {
        panic!("conv weight rank")
    };
    assert_eq!(ic, input.c);
    let wt = w64(weight);
    let oh = (input.h + 2 * pad - kh) / stride + 1;
    let ow = (input.w + 2 * pad - kw) / stride + 1;
    let mut v = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = bias.map_or(0.0, |b| f64::from(b.data()[o]));
                for i in 0..ic {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (x * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= input.h as isize || ix >= input.w as isize
                            {
                                continue;
                            }
                            s += input.at(i, iy as usize, ix as usize)
                                * wt[((o * ic + i) * kh + dy) * kw + dx];
                        }
                    }
                }
                v[(o * oh + y) * ow + x] = s;
            }
        }
    }
    Map {
        c: oc,
        h: oh,
        w: ow,
        v,
    }
}

pub fn batchnorm(
    input: &Map,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f64,
) -> Map {
    let plane = input.h * input.w;
    let v = input
        .v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = i / plane;
            (x - f64::from(mean[c])) / (f64::from(var[c]) + eps).sqrt() * f64::from(gamma[c])
                + f64::from(beta[c])
        })
        .collect();
    Map { v, ..*input }
}

pub fn relu(input: &Map) -> Map {
    Map {
        v: input.v.iter().map(|&x| x.max(0.0)).collect(),
        ..*input
    }
}

pub fn avgpool(input: &Map, k: usize, s: usize) -> Map {
    let oh = (input.h - k) / s + 1;
    let ow = (input.w - k) / s + 1;
    let mut v = Vec::with_capacity(input.c * oh * ow);
    for c in 0..input.c {
        for y in 0..oh {
            for x in 0..ow {
                let mut sum = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        sum += input.at(c, y * s + dy, x * s + dx);
                    }
                }
                v.push(sum / (k * k) as f64);
            }
        }
    }
    Map {
        c: input.c,
        h: oh,
        w: ow,
        v,
    }
}

pub fn gap(input: &Map) -> Vec<f64> {
    let plane = (input.h * input.w) as f64;
    (0..input.c)
        .map(|c| {
            (0..input.h)
                .flat_map(|y| (0..input.w).map(move |x| (y, x)))
                .map(|(y, x)| input.at(c, y, x))
                .sum::<f64>()
                / plane
        })
        .collect()
}

pub fn fc(input: &[f64], weight: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let [out, inn] = *weight.shape() else {
        panic!("fc weight rank")
    };
    assert_eq!(inn, input.len());
    let w = w64(weight);
    (0..out)
        .map(|o| {
            bias.map_or(0.0, |b| f64::from(b.data()[o]))
                + (0..inn).map(|i| w[o * inn + i] * input[i]).sum::<f64>()
        })
        .collect()
}

pub fn add(a: &Map, b: &Map) -> Map {
    assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w));
    Map {
        v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
        ..*a
    }
}

fn get<'a>(weights: &'a WeightStore, name: &str) -> &'a Tensor {
    weights
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
}

fn bn_named(weights: &WeightStore, name: &str, x: &Map) -> Map {
    let p = |s: &str| get(weights, &format!("{name}.{s}")).data().to_vec();
    batchnorm(
        x,
        &p("gamma"),
        &p("beta"),
        &p("running_mean"),
        &p("running_var"),
        1e-5,
    )
}

/// Exit features of one student of the seven-exit WRN-16×`width` model,
/// computed in one monolithic pass.
pub fn oracle_features(
    weights: &WeightStore,
    student: usize,
    image: &Tensor,
    width: usize,
) -> Vec<Vec<f64>> {
    let widths = [16 * width, 32 * width, 64 * width];
    let stage = |j: usize| format!("s{student}.stage{j}");
    let mut x = conv(
        &Map::from_tensor(image),
        get(weights, &format!("{}.stem.weight", stage(1))),
        None,
        1,
        1,
    );
    let mut acts = vec![x.clone()];
    let mut in_ch = 16;
    let mut block = 0;
    for (g, &out) in widths.iter().enumerate() {
        for b in 0..2 {
            block += 1;
            let p = format!("{}.b{block}", stage(block + 1));
            let down = g > 0 && b == 0;
            let a = relu(&bn_named(weights, &format!("{p}.bn1"), &x));
            let mut y = conv(&a, get(weights, &format!("{p}.conv1.weight")), None, 1, 1);
            if down {
                y = avgpool(&y, 2, 2);
            }
            y = relu(&bn_named(weights, &format!("{p}.bn2"), &y));
            y = conv(&y, get(weights, &format!("{p}.conv2.weight")), None, 1, 1);
            let shortcut = if in_ch != out || down {
                conv(
                    &a,
                    get(weights, &format!("{p}.shortcut.weight")),
                    None,
                    if down { 2 } else { 1 },
                    0,
                )
            } else {
                x.clone()
            };
            x = add(&shortcut, &y);
            in_ch = out;
            acts.push(x.clone());
        }
    }
    acts.iter()
        .enumerate()
        .map(|(i, a)| {
            let j = i + 1;
            let e = format!("s{student}.exit{j}");
            if j == 7 {
                gap(&relu(&bn_named(weights, &format!("{e}.bn"), a)))
            } else {
                let k = 4.min(a.h);
                let pooled = avgpool(a, k, k);
                gap(&relu(&conv(
                    &pooled,
                    get(weights, &format!("{e}.proj.weight")),
                    None,
                    1,
                    0,
                )))
            }
        })
        .collect()
}

/// Largest `|a - b| / max(1, |b|)` over paired elements.
pub fn max_rel_err(actual: &[f32], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    actual
        .iter()
        .zip(expected)
        .map(|(&a, &e)| (f64::from(a) - e).abs() / e.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Deterministic synthetic images of `size×size`, labels cycling over 10
/// classes.
pub fn synthetic_images(count: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| LabeledImage {
            pixels: random_tensor(&mut rng, vec![3, size, size], -2.0, 2.0),
            label: i % 10,
        })
        .collect()
}

/// CIFAR-10 binary records with random pixels.
pub fn synthetic_cifar_bytes(count: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count * 3073);
    for i in 0..count {
        out.push((i % 10) as u8);
        out.extend((0..3072).map(|_| rng.random::<u8>()));
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs `cases` random small cases per kernel against the naive references
/// and returns the worst relative error seen for each kernel.
pub fn kernel_oracle_errors(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    use distree_core::kernels;
    use distree_core::layer::Conv2dSpec;

    let mut r = rng(seed);
    let mut worst = [
        ("conv2d", 0.0f64),
        ("avgpool", 0.0),
        ("fc", 0.0),
        ("batchnorm", 0.0),
    ];
    for _ in 0..cases {
        let c = r.random_range(1..5);
        let h = r.random_range(1..9);
        let w = r.random_range(1..9);
        let input = random_tensor(&mut r, vec![c, h, w], -1.0, 1.0);
        let map = Map::from_tensor(&input);

        let k = r.random_range(1..4usize).min(h + 2).min(w + 2);
        let pad = r.random_range(0..2usize);
        let k = k.min(h + 2 * pad).min(w + 2 * pad);
        let stride = r.random_range(1..3);
        let out = r.random_range(1..5);
        let mut spec = Conv2dSpec::new(c, out, k, stride, pad);
        let bias = r
            .random_bool(0.5)
            .then(|| random_tensor(&mut r, vec![out], -0.5, 0.5));
        if bias.is_some() {
            spec = spec.with_bias();
        }
        let weight = random_tensor(&mut r, spec.weight_shape(), -1.0, 1.0);
        let got = kernels::conv2d_forward("conv", &input, &spec, &weight, bias.as_ref()).unwrap();
        let want = conv(&map, &weight, bias.as_ref(), stride, pad);
        assert_eq!(got.shape(), [want.c, want.h, want.w]);
        worst[0].1 = worst[0].1.max(max_rel_err(got.data(), &want.v));

        let pk = r.random_range(1..=h.min(w));
        let ps = r.random_range(1..=pk);
        let got = kernels::avgpool("pool", &input, pk, ps).unwrap();
        let want = avgpool(&map, pk, ps);
        worst[1].1 = worst[1].1.max(max_rel_err(got.data(), &want.v));

        let flat = Tensor::from_slice(input.data());
        let fo = r.random_range(1..12);
        let fw = random_tensor(&mut r, vec![fo, flat.len()], -1.0, 1.0);
        let fb = r
            .random_bool(0.5)
            .then(|| random_tensor(&mut r, vec![fo], -1.0, 1.0));
        let got = kernels::fc_forward("fc", &flat, &fw, fb.as_ref()).unwrap();
        let want = fc(&map.v, &fw, fb.as_ref());
        worst[2].1 = worst[2].1.max(max_rel_err(got.data(), &want));

        let gamma = random_tensor(&mut r, vec![c], 0.5, 1.5);
        let beta = random_tensor(&mut r, vec![c], -0.5, 0.5);
        let mean = random_tensor(&mut r, vec![c], -0.5, 0.5);
        let var = random_tensor(&mut r, vec![c], 0.1, 2.0);
        let got =
            kernels::batchnorm_forward("bn", &input, &gamma, &beta, &mean, &var, 1e-5).unwrap();
        let want = batchnorm(
            &map,
            gamma.data(),
            beta.data(),
            mean.data(),
            var.data(),
            f64::from(1e-5f32),
        );
        worst[3].1 = worst[3].1.max(max_rel_err(got.data(), &want.v));
    }
    worst.to_vec()
}

/// Worst relative error between the staged executor and the monolithic
/// oracle over every exit of every student, for `images` random inputs.
pub fn composition_error(width: usize, size: usize, images: usize, seed: u64) -> f64 {
    use distree_core::model::{
        build_wrn16_with, forward_features, WrnOptions, DEFAULT_EXIT_POSITIONS,
    };

    let spec =
        build_wrn16_with(&WrnOptions::new(width, &DEFAULT_EXIT_POSITIONS, 10).input_size(size))
            .unwrap();
    let weights = WeightStore::random(&spec, 2, seed);
    let mut worst = 0.0f64;
    for img in synthetic_images(images, size, seed + 1) {
        for s in 0..2 {
            let staged = forward_features(&spec, &weights, s, &img.pixels).unwrap();
            let oracle = oracle_features(&weights, s, &img.pixels, width);
            for (a, b) in staged.iter().zip(&oracle) {
                worst = worst.max(max_rel_err(a.data(), b));
            }
        }
    }
    worst
}

/// A randomly generated controller scenario.
#[derive(Clone, Debug)]
pub struct PolicyCase {
    pub policy: distree_core::policy::PolicyConfig,
    pub features: Vec<Tensor>,
    pub probabilities: Vec<Tensor>,
    pub stream: u64,
}

fn sums(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na, nb)
}

/// `‖a‖‖b‖ / a·b`, or `None` when degenerate.
pub fn oracle_diff(a: &[f32], b: &[f32]) -> Option<f64> {
    let (dot, na, nb) = sums(a, b);
    (na > 0.0 && nb > 0.0 && dot > 0.0).then(|| (na * nb).sqrt() / dot)
}

pub fn oracle_cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (dot, na, nb) = sums(a, b);
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn oracle_entropy(p: &[f32]) -> f64 {
    let mut h = 0.0f64;
    for &v in p {
        let v = f64::from(v);
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h.max(0.0)
}

/// Brute-force first-crossing scan: compute every measure up front, then
/// return the first exit whose test passes, or the last exit.
pub fn scan_exit(case: &PolicyCase) -> usize {
    use distree_core::policy::PolicyKind;
    let m = case.features.len();
    let strict = case.policy.strict;
    let above = |v: f64, t: f64| if strict { v > t } else { v >= t };
    let below = |v: f64, t: f64| if strict { v < t } else { v <= t };
    let f = |j: usize| case.features[j - 1].data();
    let passes: Vec<bool> = (1..=m)
        .map(|j| match &case.policy.kind {
            PolicyKind::LastExit => false,
            PolicyKind::Random { seed } => {
                let mut r = ChaCha8Rng::seed_from_u64(*seed);
                r.set_stream(case.stream);
                j >= r.random_range(1..=m)
            }
            PolicyKind::FeatureDiff { thresholds } => {
                oracle_diff(f(j), f(1)).is_some_and(|d| above(d, thresholds[j - 1]))
            }
            PolicyKind::NeighborSimilarity { thresholds } => {
                j >= 2 && oracle_cosine(f(j), f(j - 1)).is_some_and(|s| above(s, thresholds[j - 1]))
            }
            PolicyKind::Entropy { thresholds } => below(
                oracle_entropy(case.probabilities[j - 1].data()),
                thresholds[j - 1],
            ),
        })
        .collect();
    passes.iter().position(|&p| p).map_or(m, |i| i + 1)
}

/// Exit chosen by stepping the library controller.
pub fn controller_exit(case: &PolicyCase) -> distree_core::policy::ExitDecision {
    use distree_core::policy::{ExitController, Step};
    let mut c = ExitController::new(&case.policy, case.features.len(), case.stream).unwrap();
    for (i, f) in case.features.iter().enumerate() {
        if c.step(i + 1, f, Some(&case.probabilities[i])).unwrap() == Step::Exit {
            break;
        }
    }
    c.into_decision()
        .expect("controller exits by the last exit")
}

fn softmax64(logits: &[f32]) -> Tensor {
    distree_core::kernels::softmax(&Tensor::from_slice(logits))
}

/// Random scenario: non-negative features with occasional zero vectors and
/// exact copies of the first feature, thresholds drawn near the measure
/// range with occasional exact ties.
pub fn random_policy_case(r: &mut ChaCha8Rng) -> PolicyCase {
    use distree_core::policy::PolicyConfig;
    let m = r.random_range(1..=8);
    let dim = r.random_range(1..=12);
    let mut features: Vec<Tensor> = Vec::with_capacity(m);
    for j in 0..m {
        let roll = r.random_range(0..10);
        let t = if roll == 0 {
            Tensor::zeros(vec![dim]).unwrap()
        } else if roll == 1 && j > 0 {
            features[0].clone()
        } else if roll == 2 && j > 0 {
            features[j - 1].scale(r.random_range(0.5..4.0))
        } else {
            let v: Vec<f32> = (0..dim)
                .map(|_| {
                    if r.random_bool(0.3) {
                        0.0
                    } else {
                        r.random_range(0.0..3.0)
                    }
                })
                .collect();
            Tensor::from_slice(&v)
        };
        features.push(t);
    }
    let probabilities = (0..m)
        .map(|_| {
            let n = r.random_range(2..=10);
            let spread = r.random_range(0.0f32..8.0);
            softmax64(
                &(0..n)
                    .map(|_| r.random_range(-spread..=spread))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let thresholds = |r: &mut ChaCha8Rng, lo: f64, hi: f64, tie: f64| -> Vec<f64> {
        (0..m)
            .map(|_| {
                if r.random_bool(0.1) {
                    tie
                } else {
                    r.random_range(lo..hi)
                }
            })
            .collect()
    };
    let mut policy = match r.random_range(0..10) {
        0 => PolicyConfig::last_exit(),
        1 => PolicyConfig::random(r.random()),
        2..=4 => PolicyConfig::neighbor_similarity(&thresholds(r, 0.3, 1.0, 1.0)),
        5..=7 => PolicyConfig::feature_diff(&thresholds(r, 0.9, 2.5, 1.0)),
        _ => PolicyConfig::entropy(&thresholds(r, 0.0, 2.3, 0.0)),
    };
    policy.strict = r.random_bool(0.5);
    PolicyCase {
        policy,
        features,
        probabilities,
        stream: r.random(),
    }
}

/// Number of cases where the controller and the scan disagree.
pub fn controller_scan_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let case = random_policy_case(&mut r);
            controller_exit(&case).exit_index != scan_exit(&case)
        })
        .count()
}

/// Hand-rolled writer for weight files, independent of the library encoder.
pub struct DeewBuilder {
    pub bytes: Vec<u8>,
}

impl DeewBuilder {
    pub fn new(magic: &[u8; 4], version: u32, meta: &str, count: u32) -> Self {
        let mut bytes = magic.to_vec();
        bytes.extend(version.to_le_bytes());
        bytes.extend((meta.len() as u32).to_le_bytes());
        bytes.extend(meta.as_bytes());
        bytes.extend(count.to_le_bytes());
        Self { bytes }
    }

    pub fn tensor(mut self, name: &[u8], dims: &[u32], data: &[f32]) -> Self {
        self.bytes.extend((name.len() as u16).to_le_bytes());
        self.bytes.extend(name);
        self.bytes.push(dims.len() as u8);
        for d in dims {
            self.bytes.extend(d.to_le_bytes());
        }
        for v in data {
            self.bytes.extend(v.to_le_bytes());
        }
        self
    }
}

pub type Expect = fn(&distree_core::FormatError) -> bool;

/// Malformed files paired with a predicate on the error each must produce.
pub fn adversarial_corpus() -> Vec<(String, Vec<u8>, Expect)> {
    use distree_core::FormatError as F;
    let ok = |count| DeewBuilder::new(b"DEEW", 1, "{}", count);
    let mut corpus: Vec<(String, Vec<u8>, Expect)> = vec![
        (
            "bad magic".into(),
            DeewBuilder::new(b"DEEX", 1, "{}", 0).bytes,
            |e| matches!(e, F::BadMagic(m) if m == b"DEEX"),
        ),
        (
            "lower-case magic".into(),
            DeewBuilder::new(b"deew", 1, "{}", 0).bytes,
            |e| matches!(e, F::BadMagic(_)),
        ),
        (
            "version 0".into(),
            DeewBuilder::new(b"DEEW", 0, "{}", 0).bytes,
            |e| matches!(e, F::UnsupportedVersion { found: 0, .. }),
        ),
        (
            "version 2".into(),
            DeewBuilder::new(b"DEEW", 2, "{}", 0).bytes,
            |e| matches!(e, F::UnsupportedVersion { found: 2, .. }),
        ),
        (
            "duplicate names".into(),
            ok(2)
                .tensor(b"a.w", &[1], &[1.0])
                .tensor(b"a.w", &[1], &[2.0])
                .bytes,
            |e| matches!(e, F::DuplicateName(n) if n == "a.w"),
        ),
        (
            "non-UTF-8 name".into(),
            ok(1).tensor(&[0xff, 0xfe], &[1], &[0.0]).bytes,
            |e| matches!(e, F::InvalidUtf8(_)),
        ),
        (
            "metadata not JSON".into(),
            DeewBuilder::new(b"DEEW", 1, "{oops", 0).bytes,
            |e| matches!(e, F::InvalidMetadata(_)),
        ),
        (
            "metadata not an object".into(),
            DeewBuilder::new(b"DEEW", 1, "[1]", 0).bytes,
            |e| matches!(e, F::InvalidMetadata(_)),
        ),
        ("rank 0".into(), ok(1).tensor(b"x", &[], &[]).bytes, |e| {
            matches!(e, F::InvalidRank { rank: 0, .. })
        }),
        (
            "rank 5".into(),
            ok(1).tensor(b"x", &[1, 1, 1, 1, 1], &[0.0]).bytes,
            |e| matches!(e, F::InvalidRank { rank: 5, .. }),
        ),
        (
            "zero dimension".into(),
            ok(1).tensor(b"x", &[3, 0], &[]).bytes,
            |e| matches!(e, F::ZeroDimension { .. }),
        ),
        (
            "trailing bytes".into(),
            {
                let mut b = ok(1).tensor(b"x", &[2], &[1.0, 2.0]).bytes;
                b.extend([0, 0, 0]);
                b
            },
            |e| matches!(e, F::TrailingBytes(3)),
        ),
        (
            "count exceeds entries".into(),
            ok(2).tensor(b"x", &[1], &[1.0]).bytes,
            |e| matches!(e, F::Truncated(_)),
        ),
        (
            "dims overflow".into(),
            ok(1)
                .tensor(b"x", &[u32::MAX, u32::MAX, u32::MAX, u32::MAX], &[])
                .bytes,
            |e| matches!(e, F::Truncated(_)),
        ),
        ("empty file".into(), Vec::new(), |e| {
            matches!(e, F::Truncated(_))
        }),
    ];
    // Every strict prefix of a valid file is truncated.
    let valid = ok(2)
        .tensor(b"s0.stage1.stem.weight", &[2, 1, 1, 1], &[0.5, -0.5])
        .tensor(b"b", &[1], &[3.0])
        .bytes;
    for cut in 0..valid.len() {
        corpus.push((format!("truncated at {cut}"), valid[..cut].to_vec(), |e| {
            matches!(e, F::Truncated(_))
        }));
    }
    corpus
}
