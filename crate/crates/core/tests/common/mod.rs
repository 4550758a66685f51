//! Independent oracles and checks shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use crosscorpus::autograd::Graph;
use crosscorpus::dsp::MfccConfig;
use crosscorpus::corpus::{batch_iter, make_synthetic_pair, Axis, ShiftSpec};
use crosscorpus::losses::{self, Bandwidth, LossConfig};
use crosscorpus::model::{Model, ModelConfig};
use crosscorpus::pseudo::ThresholdState;
use crosscorpus::trainer::{build_objective, Ablation, LossPins, TrainConfig};
use ndarray::{Array1, Array2, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn unit_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    out
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / (n + 1e-12)).collect()
}

fn column_mean(m: &Array2<f64>) -> Vec<f64> {
    let r = rows(m);
    (0..m.ncols()).map(|j| r.iter().map(|row| row[j]).sum::<f64>() / r.len() as f64).collect()
}

// ---------------------------------------------------------------------------
// Scalar oracles
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy computed from explicit exponentials.
pub fn oracle_softmax_ce(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in rows(logits).iter().zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[y].exp() / z).ln();
    }
    total / labels.len() as f64
}

pub fn oracle_bce(logits: &[f64], targets: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&z, &d) in logits.iter().zip(targets) {
        let p = 1.0 / (1.0 + (-z).exp());
        total += -(d * p.ln() + (1.0 - d) * (1.0 - p).ln());
    }
    total / logits.len() as f64
}

/// Decoupling loss of four prototypes (emotion/corpus for source, then target).
pub fn oracle_decouple(pe_s: &[f64], pc_s: &[f64], pe_t: &[f64], pc_t: &[f64], tau: f64) -> f64 {
    let term = |pe_m: &[f64], pc_m: &[f64], pe_n: &[f64], pc_n: &[f64]| {
        let num = (dot(pe_m, pe_n) / tau).exp();
        let den = (dot(pe_m, pc_m) / tau).exp() + (dot(pe_m, pc_n) / tau).exp();
        (num / den).ln()
    };
    -0.5 * (term(pe_s, pc_s, pe_t, pc_t) + term(pe_t, pc_t, pe_s, pc_s))
}

/// Decoupling loss from raw projected rows: batch means, normalized.
pub fn oracle_decouple_rows(zs: [&Array2<f64>; 4], tau: f64) -> f64 {
    let p: Vec<Vec<f64>> = zs.iter().map(|z| normalized(&column_mean(z))).collect();
    oracle_decouple(&p[0], &p[1], &p[2], &p[3], tau)
}

/// Supervised contrastive loss, averaged over anchors that have a positive.
pub fn oracle_scl(z: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
    let z = rows(z);
    let n = z.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let den: f64 = (0..n).filter(|&a| a != i).map(|a| (dot(&z[i], &z[a]) / tau).exp()).sum();
        let mut s = 0.0;
        for &p in &positives {
            s += ((dot(&z[i], &z[p]) / tau).exp() / den).ln();
        }
        total += -s / positives.len() as f64;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Biased squared MMD with a weighted sum of Gaussian kernels
/// `exp(-d² / (2 m σ²))`.
pub fn oracle_mmd(x: &Array2<f64>, y: &Array2<f64>, sigma2: f64, multipliers: &[f64], weights: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64]| -> f64 {
        let d2 = sq_dist(a, b);
        multipliers.iter().zip(weights).map(|(m, w)| w * (-d2 / (2.0 * m * sigma2)).exp()).sum()
    };
    let (x, y) = (rows(x), rows(y));
    let mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for u in a {
            for v in b {
                s += k(u, v);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    mean(&x, &x) + mean(&y, &y) - 2.0 * mean(&x, &y)
}

/// Median of pooled pairwise squared distances.
pub fn oracle_median_sq_dist(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let pooled: Vec<Vec<f64>> = rows(x).into_iter().chain(rows(y)).collect();
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(&pooled[i], &pooled[j]));
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        (d[m / 2 - 1] + d[m / 2]) / 2.0
    }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every coordinate of `x`.
pub fn fd_max_err(x: &Array2<f64>, analytic: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(x.dim()) {
        let mut xp = x.clone();
        xp[idx] += FD_STEP;
        let mut xm = x.clone();
        xm[idx] -= FD_STEP;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[idx], numeric));
    }
    worst
}

fn grad_of(g: &crosscorpus::autograd::Gradients, graph: &Graph, v: crosscorpus::autograd::Var) -> Array2<f64> {
    match g.get(v) {
        Some(t) => t.clone().into_dimensionality::<Ix2>().unwrap(),
        None => Array2::zeros(graph.value2(v).dim()),
    }
}

pub fn grad_emotion_ce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, k) = (r.random_range(2..9), r.random_range(2..6));
    let logits = normal(&mut r, n, k) * 2.0;
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let mut g = Graph::new();
    let v = g.input(logits.clone().into_dyn());
    let loss = losses::graph_softmax_ce(&mut g, v, &labels).unwrap();
    let grads = g.backward(loss);
    fd_max_err(&logits, &grad_of(&grads, &g, v), |l| oracle_softmax_ce(l, &labels))
}

pub fn grad_corpus_ce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..17);
    let logits = normal(&mut r, n, 1) * 2.0;
    let targets: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect();
    let mut g = Graph::new();
    let v = g.input(logits.clone().into_dyn());
    let loss = losses::graph_bce(&mut g, v, &targets);
    let grads = g.backward(loss);
    fd_max_err(&logits, &grad_of(&grads, &g, v), |l| oracle_bce(l.as_slice().unwrap(), &targets))
}

const TEMPERATURES: [f64; 3] = [1e-2, 0.1, 1.0];

/// Gradient of the decoupling loss w.r.t. its four prototypes.
pub fn grad_decouple(seed: u64) -> f64 {
    let mut r = rng(seed);
    let tau = TEMPERATURES[seed as usize % 3];
    let d = r.random_range(2..9);
    let protos = unit_rows(&normal(&mut r, 4, d));
    let mut g = Graph::new();
    let vars = [0, 1, 2, 3].map(|i| g.input(protos.row(i).to_owned().into_dyn()));
    let loss = losses::graph_decouple(&mut g, vars, tau);
    let grads = g.backward(loss);
    let mut analytic = Array2::zeros(protos.dim());
    for (i, v) in vars.iter().enumerate() {
        if let Some(t) = grads.get(*v) {
            analytic.row_mut(i).assign(&t.view().into_dimensionality::<ndarray::Ix1>().unwrap());
        }
    }
    fd_max_err(&protos, &analytic, |p| {
        let row = |i: usize| p.row(i).to_vec();
        oracle_decouple(&row(0), &row(1), &row(2), &row(3), tau)
    })
}

/// Gradient of the contrastive loss w.r.t. its unit rows.
pub fn grad_scl(seed: u64) -> f64 {
    let mut r = rng(seed);
    let tau = TEMPERATURES[seed as usize % 3];
    let (n, d) = (r.random_range(3..9), r.random_range(2..9));
    let z = unit_rows(&normal(&mut r, n, d));
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    let mut g = Graph::new();
    let v = g.input(z.clone().into_dyn());
    let (loss, _) = losses::graph_scl(&mut g, v, &labels, tau).unwrap();
    let grads = g.backward(loss);
    fd_max_err(&z, &grad_of(&grads, &g, v), |z| oracle_scl(z, &labels, tau))
}

/// Gradient of the multi-kernel MMD at a fixed bandwidth (the median of the
/// unperturbed batch).
pub fn grad_mmd(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.random_range(2..6);
    let (ns, nt) = (r.random_range(2..9), r.random_range(2..9));
    let x = normal(&mut r, ns, d);
    let y = normal(&mut r, nt, d) + 0.5;
    let sigma2 = oracle_median_sq_dist(&x, &y);
    let lc = LossConfig::default();
    let cfg = lc.mmd().with_bandwidth(Bandwidth::Fixed(sigma2));
    let mut g = Graph::new();
    let (vx, vy) = (g.input(x.clone().into_dyn()), g.input(y.clone().into_dyn()));
    let (loss, _) = losses::graph_mmd(&mut g, vx, vy, &cfg).unwrap();
    let grads = g.backward(loss);
    let f = |a: &Array2<f64>, b: &Array2<f64>| oracle_mmd(a, b, sigma2, &lc.mmd_multipliers, &lc.mmd_weights);
    let ex = fd_max_err(&x, &grad_of(&grads, &g, vx), |x| f(x, &y));
    let ey = fd_max_err(&y, &grad_of(&grads, &g, vy), |y| f(&x, y));
    ex.max(ey)
}

pub fn small_model_config(input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        backbone_channels: 4,
        tcn_channels: 4,
        tcn_blocks: 2,
        feature_dim: 6,
        lstm_hidden: 3,
        proj_dim: 5,
        ..ModelConfig::default()
    }
}

/// Composite objective through the encoder: every parameter tensor is
/// probed at `per_tensor` random coordinates. Returns the worst relative
/// error and the number of probed coordinates.
pub fn grad_composite(seed: u64, ablation: Ablation, per_tensor: usize) -> (f64, usize) {
    let dim = 6;
    let spec = ShiftSpec { n_source: 6, n_target: 6, frames: 12, dim, ..ShiftSpec::default() };
    let (s, t) = make_synthetic_pair(seed, &spec).unwrap();
    let t = t.unlabeled();
    let cfg = TrainConfig { batch_size: 6, seed, ablation, model: small_model_config(dim), ..TrainConfig::default() };
    let mut batch = batch_iter(&s, &t, 6, seed, 0, cfg.model.max_frames).unwrap().next().unwrap();
    // ragged lengths exercise the masks
    for (b, len) in [(0usize, 9usize), (3, 10)] {
        batch.source.lengths[b] = len;
        batch.source.features.slice_mut(ndarray::s![b, len.., ..]).fill(0.0);
        batch.target.lengths[b] = len;
        batch.target.features.slice_mut(ndarray::s![b, len.., ..]).fill(0.0);
    }
    let mut model = Model::init(cfg.model.clone(), seed).unwrap();
    // move off the zero-bias initial point
    let mut jitter = rng(seed ^ 0x717);
    for t in model.store.params.values_mut() {
        t.mapv_inplace(|v| v + 0.1 * jitter.sample::<f64, _>(StandardNormal));
    }
    let threshold = ThresholdState::new(2, cfg.lambda).unwrap();
    let dropout = {
        let mut r = rng(seed);
        r.set_stream(u64::MAX);
        r
    };

    let obj = build_objective(&model, &batch, &cfg, &threshold, &mut dropout.clone(), &LossPins::default()).unwrap();
    let pins = LossPins { bandwidth: obj.bandwidth, pseudo: Some(obj.pseudo.clone()) };
    let analytic = obj.graph.backward(obj.root).named(&obj.graph);
    let value = |m: &Model| build_objective(m, &batch, &cfg, &threshold, &mut dropout.clone(), &pins).unwrap().report.l_total;

    let mut pick = rng(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    for (name, tensor) in &model.store.params {
        for _ in 0..per_tensor {
            let i = pick.random_range(0..tensor.len());
            let at = |delta: f64| {
                let mut m = model.clone();
                *m.store.params.get_mut(name).unwrap().iter_mut().nth(i).unwrap() += delta;
                value(&m)
            };
            let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic.get(name).map_or(0.0, |g| *g.iter().nth(i).unwrap());
            worst = worst.max(rel_err(a, numeric));
            probed += 1;
        }
    }
    (worst, probed)
}

// ---------------------------------------------------------------------------
// Emotion table, typed in from the published mapping
// ---------------------------------------------------------------------------

pub const AROUSAL_LOW: [&str; 4] = ["boredom", "calm", "neutrality", "sadness"];
pub const AROUSAL_HIGH: [&str; 5] = ["anger", "disgust", "fear", "happiness", "surprise"];
pub const VALENCE_NEGATIVE: [&str; 5] = ["anger", "boredom", "disgust", "fear", "sadness"];
pub const VALENCE_POSITIVE: [&str; 4] = ["calm", "happiness", "neutrality", "surprise"];

/// All `(emotion, axis, class)` cells; class 1 is High / Positive.
pub fn table_cells() -> Vec<(&'static str, Axis, usize)> {
    let mut cells = Vec::new();
    cells.extend(AROUSAL_LOW.iter().map(|e| (*e, Axis::Arousal, 0)));
    cells.extend(AROUSAL_HIGH.iter().map(|e| (*e, Axis::Arousal, 1)));
    cells.extend(VALENCE_NEGATIVE.iter().map(|e| (*e, Axis::Valence, 0)));
    cells.extend(VALENCE_POSITIVE.iter().map(|e| (*e, Axis::Valence, 1)));
    cells
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

pub fn count_war(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Macro F1 by counting; a class with no predictions and no examples
/// scores 0.
pub fn count_f1(pred: &[usize], labels: &[usize], n_classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..n_classes {
        let tp = pred.iter().zip(labels).filter(|&(&p, &y)| p == c && y == c).count() as f64;
        let fp = pred.iter().zip(labels).filter(|&(&p, &y)| p == c && y != c).count() as f64;
        let fneg = pred.iter().zip(labels).filter(|&(&p, &y)| p != c && y == c).count() as f64;
        if tp + fp + fneg > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fneg);
        }
    }
    total / n_classes as f64
}

pub fn unit(v: &[f64]) -> Array1<f64> {
    Array1::from(normalized(v))
}

// ---------------------------------------------------------------------------
// MFCC reference fixture
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
pub struct MfccReference {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub log_floor: f64,
    pub sine_440: Vec<Vec<f64>>,
    pub chirp: Vec<Vec<f64>>,
}

pub fn mfcc_reference() -> MfccReference {
    serde_json::from_str(include_str!("../fixtures/mfcc_reference.json")).unwrap()
}

pub fn reference_config(r: &MfccReference) -> MfccConfig {
    MfccConfig { n_mfcc: r.n_mfcc, n_fft: r.n_fft, hop: r.hop, n_mels: r.n_mels, log_floor: r.log_floor, ..MfccConfig::default() }
}

/// One second of a unit 440 Hz sine.
pub fn sine(sr: u32) -> Vec<f64> {
    (0..sr).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin()).collect()
}

/// One second of a 150 to 3500 Hz linear chirp with a second harmonic and a
/// slow amplitude envelope.
pub fn chirp(sr: u32) -> Vec<f64> {
    use std::f64::consts::PI;
    let (f0, f1) = (150.0, 3500.0);
    (0..sr)
        .map(|i| {
            let t = i as f64 / sr as f64;
            let phase = 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) * t * t);
            let env = 0.6 - 0.4 * (2.0 * PI * 3.0 * t).cos();
            env * (phase.sin() + 0.3 * (2.0 * phase).sin())
        })
        .collect()
}

/// Largest elementwise error relative to `max(|reference|, 1)`.
pub fn worst_mfcc_error(got: &Array2<f64>, want: &[Vec<f64>]) -> f64 {
    if got.nrows() != want.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (row, w) in got.rows().into_iter().zip(want) {
        if row.len() != w.len() {
            return f64::INFINITY;
        }
        for (a, b) in row.iter().zip(w) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    worst
}
