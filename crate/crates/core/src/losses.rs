//! Training objectives.
//!
//! Every loss exists as a pure function returning its value together with
//! the gradient w.r.t. its differentiable inputs, plus a thin adapter that
//! places it on an autograd [`Graph`] as a fused node. Classification terms
//! are batch means; the contrastive terms run through log-sum-exp so
//! temperatures down to 1e-2 stay finite.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{Error, Result};

/// Probabilities are clipped to `[EPS, 1 - EPS]` inside logarithms.
pub const PROB_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;
const BANDWIDTH_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau_p: f64,
    pub tau_s: f64,
    pub alpha_1: f64,
    /// Bandwidth multipliers applied to the median-heuristic base bandwidth.
    pub mmd_multipliers: Vec<f64>,
    pub mmd_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_p: 1e-2,
            tau_s: 1e-2,
            alpha_1: 0.1,
            mmd_multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            mmd_weights: vec![0.2; 5],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_p > 0.0 && self.tau_s > 0.0) {
            return Err(Error::InvalidConfig("temperatures must be positive".into()));
        }
        if self.alpha_1 < 0.0 || !self.alpha_1.is_finite() {
            return Err(Error::InvalidConfig("alpha_1 must be a non-negative number".into()));
        }
        self.mmd().validate()
    }

    pub fn mmd(&self) -> MmdConfig {
        MmdConfig {
            multipliers: self.mmd_multipliers.clone(),
            weights: self.mmd_weights.clone(),
            bandwidth: Bandwidth::Median,
        }
    }
}

/// Per-step values of every objective term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_emotion: f64,
    pub l_corpus: f64,
    pub l_decouple: f64,
    pub d_k2: f64,
    pub l_scl: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub n_pseudo: usize,
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_emotion", self.l_emotion),
            ("l_corpus", self.l_corpus),
            ("l_decouple", self.l_decouple),
            ("d_k2", self.d_k2),
            ("l_scl", self.l_scl),
            ("l_align", self.l_align),
            ("l_total", self.l_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Classification terms
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of `labels` under row-stochastic `probs`.
pub fn emotion_ce(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (n, k) = probs.dim();
    if n != labels.len() {
        return Err(Error::LengthMismatch { left: n, right: labels.len() });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        total -= row[y].clamp(PROB_EPS, 1.0).ln();
    }
    Ok(total / n as f64)
}

/// Mean binary cross-entropy of Bernoulli `probs` against corpus labels.
pub fn corpus_ce(probs: &[f64], domain_labels: &[f64]) -> Result<f64> {
    if probs.len() != domain_labels.len() {
        return Err(Error::LengthMismatch { left: probs.len(), right: domain_labels.len() });
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs
        .iter()
        .zip(domain_labels)
        .map(|(&p, &d)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(d * p.ln() + (1.0 - d) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Softmax cross-entropy from logits; returns the batch mean and d/dlogits.
pub fn softmax_ce_with_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if n != labels.len() {
        return Err(Error::LengthMismatch { left: n, right: labels.len() });
    }
    let mut grad = softmax_rows(logits);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let row = logits.row(i);
        total += log_sum_exp(row.iter().copied()) - row[y];
        grad[[i, y]] -= 1.0;
    }
    let nf = n.max(1) as f64;
    grad /= nf;
    Ok((total / nf, grad))
}

/// Binary cross-entropy from logits; returns the batch mean and d/dlogits.
pub fn bce_with_grad(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &d) in logits.iter().zip(targets) {
        // softplus(z) - d z
        total += z.max(0.0) + (-z.abs()).exp().ln_1p() - d * z;
        grad.push((sigmoid(z) - d) / n);
    }
    (total / n, grad)
}

// ---------------------------------------------------------------------------
// Prototypes and decoupling
// ---------------------------------------------------------------------------

/// Unit-norm batch centres of projected emotion/corpus features per corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub emotion_source: Array1<f64>,
    pub corpus_source: Array1<f64>,
    pub emotion_target: Array1<f64>,
    pub corpus_target: Array1<f64>,
}

/// Mean of the rows, then ℓ2-normalized (`‖m‖ + 1e-12` in the denominator).
pub fn prototype(rows: ArrayView2<f64>) -> Result<Array1<f64>> {
    let mean = rows
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::InvalidInput("prototype of an empty batch".into()))?;
    let norm = mean.dot(&mean).sqrt();
    Ok(mean / (norm + NORM_EPS))
}

pub fn compute_prototypes(
    z_e_source: ArrayView2<f64>,
    z_c_source: ArrayView2<f64>,
    z_e_target: ArrayView2<f64>,
    z_c_target: ArrayView2<f64>,
) -> Result<PrototypeSet> {
    Ok(PrototypeSet {
        emotion_source: prototype(z_e_source)?,
        corpus_source: prototype(z_c_source)?,
        emotion_target: prototype(z_e_target)?,
        corpus_target: prototype(z_c_target)?,
    })
}

/// Gradients of the decoupling loss, one per prototype.
#[derive(Debug, Clone)]
pub struct DecoupleGrad {
    pub emotion_source: Array1<f64>,
    pub corpus_source: Array1<f64>,
    pub emotion_target: Array1<f64>,
    pub corpus_target: Array1<f64>,
}

/// Prototype-level decoupling loss.
///
/// For each ordered corpus pair `(m, n)` the emotion prototype of `m` is
/// attracted to the emotion prototype of `n` while the denominator holds only
/// its similarities to the two corpus prototypes; the attracting term does not
/// appear in the denominator, so the loss can go negative.
pub fn decouple_loss_with_grad(protos: &PrototypeSet, tau_p: f64) -> (f64, DecoupleGrad) {
    let p = protos;
    let mut g = DecoupleGrad {
        emotion_source: Array1::zeros(p.emotion_source.len()),
        corpus_source: Array1::zeros(p.corpus_source.len()),
        emotion_target: Array1::zeros(p.emotion_target.len()),
        corpus_target: Array1::zeros(p.corpus_target.len()),
    };
    let mut total = 0.0;
    for source_first in [true, false] {
        let (pe_m, pc_m, pe_n, pc_n) = if source_first {
            (&p.emotion_source, &p.corpus_source, &p.emotion_target, &p.corpus_target)
        } else {
            (&p.emotion_target, &p.corpus_target, &p.emotion_source, &p.corpus_source)
        };
        let a = pe_m.dot(pe_n) / tau_p;
        let b = pe_m.dot(pc_m) / tau_p;
        let c = pe_m.dot(pc_n) / tau_p;
        let lse = log_sum_exp([b, c].into_iter());
        let (wb, wc) = ((b - lse).exp(), (c - lse).exp());
        total += a - lse;
        // d(-½ term)
        let k = -0.5 / tau_p;
        let d_pe_m = (pe_n - &(pc_m * wb) - &(pc_n * wc)) * k;
        let d_pe_n = pe_m * k;
        let d_pc_m = pe_m * (-wb * k);
        let d_pc_n = pe_m * (-wc * k);
        if source_first {
            g.emotion_source += &d_pe_m;
            g.emotion_target += &d_pe_n;
            g.corpus_source += &d_pc_m;
            g.corpus_target += &d_pc_n;
        } else {
            g.emotion_target += &d_pe_m;
            g.emotion_source += &d_pe_n;
            g.corpus_target += &d_pc_m;
            g.corpus_source += &d_pc_n;
        }
    }
    (-0.5 * total, g)
}

pub fn decouple_loss(protos: &PrototypeSet, tau_p: f64) -> f64 {
    decouple_loss_with_grad(protos, tau_p).0
}

// ---------------------------------------------------------------------------
// Supervised contrastive class alignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SclOutcome {
    pub value: f64,
    /// Anchors with at least one positive.
    pub anchors: usize,
    /// Set when fewer than two rows were supplied and the loss defaulted to 0.
    pub degenerate: bool,
    pub grad: Array2<f64>,
}

/// Supervised contrastive loss over unit rows `z` with integer labels.
///
/// Anchors without positives contribute nothing; the sum over contributing
/// anchors is divided by their count.
pub fn scl_loss_with_grad(z: ArrayView2<f64>, labels: &[usize], tau_s: f64) -> Result<SclOutcome> {
    let n = z.nrows();
    if n != labels.len() {
        return Err(Error::LengthMismatch { left: n, right: labels.len() });
    }
    if n < 2 {
        log::warn!("supervised contrastive loss over {n} rows; returning 0");
        return Ok(SclOutcome { value: 0.0, anchors: 0, degenerate: true, grad: Array2::zeros(z.dim()) });
    }
    let sim = z.dot(&z.t()) / tau_s;
    let mut coef = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let row = sim.row(i);
        let lse = log_sum_exp((0..n).filter(|&k| k != i).map(|k| row[k]));
        let inv_p = 1.0 / positives.len() as f64;
        for &j in &positives {
            total -= inv_p * (row[j] - lse);
            coef[[i, j]] -= inv_p;
        }
        for k in (0..n).filter(|&k| k != i) {
            coef[[i, k]] += (row[k] - lse).exp();
        }
    }
    if anchors == 0 {
        return Ok(SclOutcome { value: 0.0, anchors, degenerate: false, grad: Array2::zeros(z.dim()) });
    }
    let a = anchors as f64;
    coef /= a;
    let sym = &coef + &coef.t();
    let grad = sym.dot(&z) / tau_s;
    Ok(SclOutcome { value: total / a, anchors, degenerate: false, grad })
}

pub fn scl_loss(z: ArrayView2<f64>, labels: &[usize], tau_s: f64) -> Result<f64> {
    Ok(scl_loss_with_grad(z, labels, tau_s)?.value)
}

// ---------------------------------------------------------------------------
// Multi-kernel MMD
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Base σ² is the median pairwise squared distance of the pooled batch.
    Median,
    /// Explicit base σ².
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmdConfig {
    pub multipliers: Vec<f64>,
    pub weights: Vec<f64>,
    pub bandwidth: Bandwidth,
}

impl MmdConfig {
    pub fn single(sigma2: f64) -> Self {
        Self { multipliers: vec![1.0], weights: vec![1.0], bandwidth: Bandwidth::Fixed(sigma2) }
    }

    pub fn with_bandwidth(mut self, bandwidth: Bandwidth) -> Self {
        self.bandwidth = bandwidth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.multipliers.len() != self.weights.len() {
            return Err(Error::InvalidConfig("MMD multipliers and weights must pair up".into()));
        }
        if self.multipliers.iter().any(|&m| m <= 0.0) {
            return Err(Error::InvalidConfig("MMD bandwidth multipliers must be positive".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig("MMD kernel weights must be non-negative and sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MmdOutcome {
    pub value: f64,
    /// Base σ² actually used.
    pub sigma2: f64,
    pub grad_source: Array2<f64>,
    pub grad_target: Array2<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of pairwise squared distances among the pooled rows of `x` and `y`,
/// floored at 1e-12.
pub fn median_bandwidth(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let pooled: Vec<ArrayView1<f64>> = x.rows().into_iter().chain(y.rows()).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return BANDWIDTH_FLOOR;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    med.max(BANDWIDTH_FLOOR)
}

/// Biased (V-statistic) squared MMD under a convex combination of Gaussian
/// kernels `exp(-‖a-b‖² / (2 m_u σ²))`. The bandwidth is treated as a
/// constant for differentiation.
pub fn mk_mmd_with_grad(x: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &MmdConfig) -> Result<MmdOutcome> {
    let (ns, nt) = (x.nrows(), y.nrows());
    if ns == 0 || nt == 0 {
        return Err(Error::InvalidInput("MMD needs non-empty source and target batches".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::InvalidInput("MMD feature dimensions differ".into()));
    }
    let sigma2 = match cfg.bandwidth {
        Bandwidth::Median => median_bandwidth(x, y),
        Bandwidth::Fixed(s) => s.max(BANDWIDTH_FLOOR),
    };
    let scales: Vec<f64> = cfg.multipliers.iter().map(|m| 2.0 * m * sigma2).collect();
    // kernel value and derivative weight: ∂k/∂a = -kd · (a - b)
    let kernel = |d2: f64| -> (f64, f64) {
        let mut k = 0.0;
        let mut kd = 0.0;
        for (&s, &w) in scales.iter().zip(&cfg.weights) {
            let e = w * (-d2 / s).exp();
            k += e;
            kd += e * 2.0 / s;
        }
        (k, kd)
    };
    let mut gx = Array2::<f64>::zeros(x.dim());
    let mut gy = Array2::<f64>::zeros(y.dim());
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    let cxx = 1.0 / (ns * ns) as f64;
    let cyy = 1.0 / (nt * nt) as f64;
    let cxy = 2.0 / (ns * nt) as f64;
    for i in 0..ns {
        for i2 in 0..ns {
            let (k, kd) = kernel(sq_dist(x.row(i), x.row(i2)));
            kxx += k;
            // both ordered pairs touch x_i
            let diff = &x.row(i) - &x.row(i2);
            gx.row_mut(i).scaled_add(-2.0 * cxx * kd, &diff);
        }
    }
    for j in 0..nt {
        for j2 in 0..nt {
            let (k, kd) = kernel(sq_dist(y.row(j), y.row(j2)));
            kyy += k;
            let diff = &y.row(j) - &y.row(j2);
            gy.row_mut(j).scaled_add(-2.0 * cyy * kd, &diff);
        }
    }
    for i in 0..ns {
        for j in 0..nt {
            let (k, kd) = kernel(sq_dist(x.row(i), y.row(j)));
            kxy += k;
            let diff = &x.row(i) - &y.row(j);
            gx.row_mut(i).scaled_add(cxy * kd, &diff);
            gy.row_mut(j).scaled_add(-cxy * kd, &diff);
        }
    }
    let value = kxx * cxx + kyy * cyy - kxy * cxy;
    Ok(MmdOutcome { value, sigma2, grad_source: gx, grad_target: gy })
}

pub fn mk_mmd(x: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &MmdConfig) -> Result<f64> {
    Ok(mk_mmd_with_grad(x, y, cfg)?.value)
}

// ---------------------------------------------------------------------------
// Combinations
// ---------------------------------------------------------------------------

pub fn align_loss(d_k2: f64, l_scl: f64, alpha_1: f64) -> f64 {
    d_k2 + alpha_1 * l_scl
}

/// Sum of the four objective terms; disabled terms are passed as zero.
pub fn total_loss(l_emotion: f64, l_corpus: f64, l_align: f64, l_decouple: f64) -> f64 {
    l_emotion + l_corpus + l_align + l_decouple
}

// ---------------------------------------------------------------------------
// Graph adapters
// ---------------------------------------------------------------------------

pub fn graph_softmax_ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (v, grad) = softmax_ce_with_grad(&g.value2(logits), labels)?;
    Ok(g.fused(v, &[logits], vec![grad.into_dyn()]))
}

/// `logits` is `[n, 1]`.
pub fn graph_bce(g: &mut Graph, logits: Var, targets: &[f64]) -> Var {
    let z: Vec<f64> = g.value(logits).iter().copied().collect();
    let (v, grad) = bce_with_grad(&z, targets);
    let shape = g.value(logits).raw_dim();
    let grad = ndarray::ArrayD::from_shape_vec(shape, grad).unwrap();
    g.fused(v, &[logits], vec![grad])
}

pub fn graph_decouple(g: &mut Graph, protos: [Var; 4], tau_p: f64) -> Var {
    let get = |g: &Graph, v: Var| g.value(v).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let set = PrototypeSet {
        emotion_source: get(g, protos[0]),
        corpus_source: get(g, protos[1]),
        emotion_target: get(g, protos[2]),
        corpus_target: get(g, protos[3]),
    };
    let (v, d) = decouple_loss_with_grad(&set, tau_p);
    g.fused(
        v,
        &protos,
        vec![
            d.emotion_source.into_dyn(),
            d.corpus_source.into_dyn(),
            d.emotion_target.into_dyn(),
            d.corpus_target.into_dyn(),
        ],
    )
}

pub fn graph_scl(g: &mut Graph, z: Var, labels: &[usize], tau_s: f64) -> Result<(Var, SclOutcome)> {
    let zv = g.value2(z);
    let out = scl_loss_with_grad(zv.view(), labels, tau_s)?;
    let v = g.fused(out.value, &[z], vec![out.grad.clone().into_dyn()]);
    Ok((v, out))
}

pub fn graph_mmd(g: &mut Graph, x: Var, y: Var, cfg: &MmdConfig) -> Result<(Var, f64)> {
    let (xv, yv) = (g.value2(x), g.value2(y));
    let out = mk_mmd_with_grad(xv.view(), yv.view(), cfg)?;
    let v = g.fused(out.value, &[x, y], vec![out.grad_source.into_dyn(), out.grad_target.into_dyn()]);
    Ok((v, out.sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn emotion_ce_examples() {
        let perfect = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(emotion_ce(&perfect, &[0, 1]).unwrap(), 0.0);
        let uniform = array![[0.5, 0.5], [0.5, 0.5]];
        assert!((emotion_ce(&uniform, &[0, 1]).unwrap() - LN2).abs() < 1e-15);
        let p = array![[0.9, 0.1], [0.2, 0.8]];
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((emotion_ce(&p, &[0, 1]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.1643).abs() < 1e-4);
        assert!(matches!(emotion_ce(&p, &[0, 2]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn corpus_ce_examples() {
        assert!((corpus_ce(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - LN2).abs() < 1e-15);
        assert!(corpus_ce(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-11);
        let v = corpus_ce(&[0.7, 0.3], &[1.0, 0.0]).unwrap();
        assert!((v + 0.7f64.ln()).abs() < 1e-15);
        assert!((v - 0.3567).abs() < 1e-4);
    }

    #[test]
    fn softmax_ce_agrees_with_probability_form() {
        let logits = array![[0.3, -1.2], [2.0, 0.5], [-0.4, -0.4]];
        let labels = [1, 0, 1];
        let (v, _) = softmax_ce_with_grad(&logits, &labels).unwrap();
        let probs = softmax_rows(&logits);
        assert!((v - emotion_ce(&probs, &labels).unwrap()).abs() < 1e-12);
        let z = [0.3, -2.0, 5.0];
        let d = [1.0, 0.0, 1.0];
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        assert!((bce_with_grad(&z, &d).0 - corpus_ce(&p, &d).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn prototype_examples() {
        let rows = array![[1.0, 0.0], [0.0, 1.0]];
        let p = prototype(rows.view()).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p[0] - h).abs() < 1e-10 && (p[1] - h).abs() < 1e-10);
        let single = array![[0.6, 0.8]];
        let p = prototype(single.view()).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-10 && (p[1] - 0.8).abs() < 1e-10);
        let permuted = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(prototype(permuted.view()).unwrap(), prototype(rows.view()).unwrap());
    }

    #[test]
    fn decouple_closed_forms() {
        let u = array![0.6, 0.8];
        let same = PrototypeSet {
            emotion_source: u.clone(),
            corpus_source: u.clone(),
            emotion_target: u.clone(),
            corpus_target: u.clone(),
        };
        for tau in [1.0, 0.1, 1e-2] {
            assert!((decouple_loss(&same, tau) - LN2).abs() < 1e-12);
        }
        let anti = PrototypeSet {
            emotion_source: u.clone(),
            corpus_source: -&u,
            emotion_target: u.clone(),
            corpus_target: -&u,
        };
        assert!((decouple_loss(&anti, 1.0) + (2.0 - LN2)).abs() < 1e-12);
    }

    #[test]
    fn scl_two_row_cases() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(scl_loss(z.view(), &[0, 0], 0.5).unwrap().abs() < 1e-15);
        assert_eq!(scl_loss(z.view(), &[0, 1], 0.5).unwrap(), 0.0);
        let one = array![[1.0, 0.0]];
        let out = scl_loss_with_grad(one.view(), &[0], 0.5).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn mmd_singletons_closed_form() {
        let sigma2 = 0.7;
        // ‖x - y‖² = 2σ²
        let x = array![[0.0, 0.0]];
        let y = array![[(2.0 * sigma2 as f64).sqrt(), 0.0]];
        let v = mk_mmd(x.view(), y.view(), &MmdConfig::single(sigma2)).unwrap();
        assert!((v - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-12);
        assert!((v - 1.2642).abs() < 1e-4);
    }

    #[test]
    fn mmd_identical_multisets_vanish() {
        let x = array![[0.1, 0.2, -0.3], [1.0, -0.5, 0.25], [0.0, 0.0, 2.0]];
        let y = array![[0.0, 0.0, 2.0], [0.1, 0.2, -0.3], [1.0, -0.5, 0.25]];
        let v = mk_mmd(x.view(), y.view(), &LossConfig::default().mmd()).unwrap();
        assert!(v.abs() < 1e-10, "{v}");
    }

    #[test]
    fn median_bandwidth_floor() {
        let x = array![[1.0, 1.0], [1.0, 1.0]];
        assert_eq!(median_bandwidth(x.view(), x.view()), 1e-12);
    }

    #[test]
    fn align_and_total() {
        assert_eq!(align_loss(0.0, 0.0, 0.1), 0.0);
        assert!((align_loss(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(align_loss(0.37, 5.0, 0.0), 0.37);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0), 0.0);
        assert!((total_loss(0.5, 0.7, 1.2, 0.6931) - 3.0931).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let mut bad = LossConfig::default();
        bad.mmd_weights = vec![0.5; 5];
        assert!(bad.validate().is_err());
        let mut bad = LossConfig::default();
        bad.tau_s = 0.0;
        assert!(bad.validate().is_err());
    }
}
