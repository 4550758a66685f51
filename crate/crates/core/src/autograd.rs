//! Reverse-mode automatic differentiation over a linear tape of `f64` tensors.
//!
//! Every forward operation appends a node holding its value and enough
//! information to propagate gradients back to its inputs. Scalar objectives
//! with hand-derived gradients (the contrastive and kernel losses) are fused
//! into a single node that stores its local gradients at construction time.

use std::collections::BTreeMap;

use ndarray::{
    s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3, IxDyn, Zip,
};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

enum Op {
    Leaf,
    /// a[n,k] · b[m,k]ᵀ
    MatMulT(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array3<f64>,
        centered: Array3<f64>,
        inv_std: Array1<f64>,
        mask: Array2<f64>,
        count: f64,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array3<f64>,
        inv_std: Array1<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    MaskedMeanTime {
        x: Var,
        weights: Array2<f64>,
    },
    SelectTime {
        x: Var,
        t: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Vec<Var>),
    /// Scalar with precomputed local gradients w.r.t. each input.
    Fused {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, used to update
/// running averages outside the tape.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var_unbiased: Array1<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

fn as3(t: &Tensor) -> ArrayView3<'_, f64> {
    t.view().into_dimensionality::<Ix3>().expect("expected rank-3 tensor")
}

fn im2col(x: &ArrayView3<f64>, k: usize, spec: ConvSpec, t_out: usize) -> Array2<f64> {
    let (b, c_in, t_in) = x.dim();
    let mut cols = Array2::<f64>::zeros((b * t_out, c_in * k));
    for bi in 0..b {
        for t in 0..t_out {
            let mut row = cols.row_mut(bi * t_out + t);
            for ki in 0..k {
                let src = (t + ki * spec.dilation) as isize - spec.pad_left as isize;
                if src < 0 || src as usize >= t_in {
                    continue;
                }
                let src = src as usize;
                for c in 0..c_in {
                    row[c * k + ki] = x[[bi, c, src]];
                }
            }
        }
    }
    cols
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.iter().copied().next().unwrap_or(0.0)
    }

    pub fn value2(&self, v: Var) -> Array2<f64> {
        as2(self.value(v)).to_owned()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not tracked as a named parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named trainable leaf. Repeated calls with the same name return the
    /// same node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = as2(self.value(a)).dot(&as2(self.value(b)).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(out.into_dyn(), Op::MatMulT(a, b), rg)
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let out = &as2(self.value(x)) + &bias.insert_axis(Axis(0));
        let rg = self.rg(x) || self.rg(b);
        self.push(out.into_dyn(), Op::AddRowBias(x, b), rg)
    }

    /// `x · Wᵀ + b` with `W` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_t(x, w);
        self.add_row_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), c.shape(), "mul_const shape mismatch");
        let out = self.value(x) * &c;
        let rg = self.rg(x);
        self.push(out, Op::MulConst(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    /// 1-D convolution over `[B, C_in, T]` with weights `[C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let xv = as3(self.value(x));
        let wv = as3(self.value(w));
        let (bsz, c_in, t_in) = xv.dim();
        let (c_out, wc_in, k) = wv.dim();
        assert_eq!(c_in, wc_in, "conv1d channel mismatch");
        let span = spec.dilation * (k - 1);
        assert!(t_in + spec.pad_left + spec.pad_right > span, "conv1d input too short");
        let t_out = t_in + spec.pad_left + spec.pad_right - span;
        let cols = im2col(&xv, k, spec, t_out);
        let wr = wv.to_shape((c_out, c_in * k)).unwrap();
        let bias = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let mut flat = cols.dot(&wr.t());
        flat += &bias.insert_axis(Axis(0));
        let out = flat
            .into_shape_with_order((bsz, t_out, c_out))
            .unwrap()
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .to_owned();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out.into_dyn(), Op::Conv1d { x, w, b, spec }, rg)
    }

    /// Training-mode batch norm over `[B, C, T]`, with statistics taken only
    /// over positions where `mask[b, t] == 1`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mask: &Array2<f64>,
    ) -> (Var, BatchStats) {
        let xv = as3(self.value(x));
        let (b, c, t) = xv.dim();
        assert_eq!(mask.dim(), (b, t), "batch norm mask shape");
        let count: f64 = mask.sum();
        assert!(count > 0.0, "batch norm over an empty mask");
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let ch = xv.slice(s![.., ci, ..]);
            let m = Zip::from(&ch).and(mask).fold(0.0, |acc, &v, &mk| acc + v * mk) / count;
            let v = Zip::from(&ch)
                .and(mask)
                .fold(0.0, |acc, &v, &mk| acc + mk * (v - m) * (v - m))
                / count;
            mean[ci] = m;
            var[ci] = v;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut centered = xv.to_owned();
        for ci in 0..c {
            centered.slice_mut(s![.., ci, ..]).mapv_inplace(|v| v - mean[ci]);
        }
        let mut xhat = centered.clone();
        for ci in 0..c {
            xhat.slice_mut(s![.., ci, ..]).mapv_inplace(|v| v * inv_std[ci]);
        }
        let g = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let be = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut out = xhat.clone();
        for ci in 0..c {
            out.slice_mut(s![.., ci, ..]).mapv_inplace(|v| v * g[ci] + be[ci]);
        }
        let var_unbiased = if count > 1.0 { &var * (count / (count - 1.0)) } else { var.clone() };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out.into_dyn(),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                centered,
                inv_std,
                mask: mask.clone(),
                count,
            },
            rg,
        );
        (v, BatchStats { mean, var_unbiased })
    }

    /// Inference-mode batch norm using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
    ) -> Var {
        let xv = as3(self.value(x));
        let c = xv.dim().1;
        let inv_std = running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = xv.to_owned();
        for ci in 0..c {
            let (m, is) = (running_mean[ci], inv_std[ci]);
            xhat.slice_mut(s![.., ci, ..]).mapv_inplace(|v| (v - m) * is);
        }
        let g = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let be = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut out = xhat.clone();
        for ci in 0..c {
            out.slice_mut(s![.., ci, ..]).mapv_inplace(|v| v * g[ci] + be[ci]);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out.into_dyn(), Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Max-pool with window 2 and stride 2 along time; a trailing odd frame is dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (b, c, t) = xv.dim();
        let t_out = t / 2;
        let mut out = Array3::<f64>::zeros((b, c, t_out));
        let mut argmax = Vec::with_capacity(b * c * t_out);
        for bi in 0..b {
            for ci in 0..c {
                for to in 0..t_out {
                    let (a0, a1) = (xv[[bi, ci, 2 * to]], xv[[bi, ci, 2 * to + 1]]);
                    let pick = if a1 > a0 { 2 * to + 1 } else { 2 * to };
                    out[[bi, ci, to]] = a0.max(a1);
                    argmax.push((bi * c + ci) * t + pick);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::MaxPool2 { x, argmax }, rg)
    }

    /// Mean over time of `[B, C, T]` restricted to the first `lengths[b]` frames.
    pub fn masked_mean_time(&mut self, x: Var, lengths: &[usize]) -> Var {
        let xv = as3(self.value(x));
        let (b, c, t) = xv.dim();
        assert_eq!(lengths.len(), b);
        let mut weights = Array2::<f64>::zeros((b, t));
        for (bi, &len) in lengths.iter().enumerate() {
            let len = len.clamp(1, t);
            weights.slice_mut(s![bi, ..len]).fill(1.0 / len as f64);
        }
        let mut out = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = xv.slice(s![bi, ci, ..]).dot(&weights.row(bi));
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::MaskedMeanTime { x, weights }, rg)
    }

    /// `[B, C, T] -> [B, C]` at frame `t`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Var {
        let out = as3(self.value(x)).slice(s![.., .., t]).to_owned();
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::SelectTime { x, t }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = as2(self.value(x)).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::SliceCols { x, start }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = as2(self.value(x)).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::SliceRows { x, start }, rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let out = as2(self.value(x)).select(Axis(0), rows);
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::SelectRows { x, rows: rows.to_vec() }, rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| as2(self.value(v))).collect();
        let out = ndarray::concatenate(Axis(1), &views).unwrap();
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(out.into_dyn(), Op::ConcatCols(xs.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| as2(self.value(v))).collect();
        let out = ndarray::concatenate(Axis(0), &views).unwrap();
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(out.into_dyn(), Op::ConcatRows(xs.to_vec()), rg)
    }

    /// `[n, m] -> [m]` arithmetic mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let out = as2(self.value(x)).mean_axis(Axis(0)).expect("mean of empty rows");
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::MeanRows(x), rg)
    }

    /// Divides every row (or a single vector) by `‖row‖ + 1e-12`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let m = v.to_shape((rows_of(&shape), *shape.last().unwrap())).unwrap();
        let norms: Vec<f64> = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut out = m.as_standard_layout().into_owned();
        for (mut r, &n) in out.rows_mut().into_iter().zip(&norms) {
            r /= n + NORM_EPS;
        }
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut total = ArrayD::<f64>::zeros(IxDyn(&[]));
        for &v in xs {
            total = total + self.value(v);
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(total, Op::Sum(xs.to_vec()), rg)
    }

    /// Scalar node with caller-supplied value and local gradients.
    pub fn fused(&mut self, value: f64, inputs: &[Var], grads: Vec<Tensor>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).shape(), g.shape(), "fused gradient shape mismatch");
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            Op::Fused { inputs: inputs.to_vec(), grads },
            rg,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMulT(a, b) => {
                let g2 = as2(g);
                if self.rg(*a) {
                    self.acc(grads, *a, g2.dot(&as2(self.value(*b))).into_dyn());
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g2.t().dot(&as2(self.value(*a))).into_dyn());
                }
            }
            Op::AddRowBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, as2(g).sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g * *c),
            Op::MulConst(x, c) => self.acc(grads, *x, g * c),
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &o| {
                    if o <= 0.0 {
                        *d = 0.0
                    }
                });
                self.acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &o| *d *= o * (1.0 - o));
                self.acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &o| *d *= 1.0 - o * o);
                self.acc(grads, *x, d);
            }
            Op::Conv1d { x, w, b, spec } => self.conv1d_backward(*x, *w, *b, *spec, g, grads),
            Op::BatchNormTrain { x, gamma, beta, xhat, centered, inv_std, mask, count } => {
                let g3 = as3(g);
                let c = xhat.dim().1;
                let gam = self.value(*gamma).view().into_dimensionality::<Ix1>().unwrap();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = Array3::<f64>::zeros(xhat.dim());
                for ci in 0..c {
                    let gc = g3.slice(s![.., ci, ..]);
                    let xh = xhat.slice(s![.., ci, ..]);
                    let cen = centered.slice(s![.., ci, ..]);
                    dgamma[ci] = Zip::from(&gc).and(&xh).fold(0.0, |a, &gg, &h| a + gg * h);
                    dbeta[ci] = gc.sum();
                    let is = inv_std[ci];
                    // dxhat = g * gamma
                    let sum_dxhat = gc.sum() * gam[ci];
                    let sum_dxhat_cen =
                        Zip::from(&gc).and(&cen).fold(0.0, |a, &gg, &x| a + gg * x) * gam[ci];
                    let dmean = -is * sum_dxhat;
                    let dvar = -0.5 * is * is * is * sum_dxhat_cen;
                    let mut dxc = dx.slice_mut(s![.., ci, ..]);
                    Zip::from(&mut dxc).and(&gc).and(&cen).and(mask).for_each(
                        |d, &gg, &x, &mk| {
                            *d = gg * gam[ci] * is + mk * (dmean + dvar * 2.0 * x) / count;
                        },
                    );
                }
                self.acc(grads, *x, dx.into_dyn());
                self.acc(grads, *gamma, dgamma.into_dyn());
                self.acc(grads, *beta, dbeta.into_dyn());
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let g3 = as3(g);
                let c = xhat.dim().1;
                let gam = self.value(*gamma).view().into_dimensionality::<Ix1>().unwrap();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = g3.to_owned();
                for ci in 0..c {
                    let gc = g3.slice(s![.., ci, ..]);
                    dgamma[ci] = Zip::from(&gc)
                        .and(&xhat.slice(s![.., ci, ..]))
                        .fold(0.0, |a, &gg, &h| a + gg * h);
                    dbeta[ci] = gc.sum();
                    let k = gam[ci] * inv_std[ci];
                    dx.slice_mut(s![.., ci, ..]).mapv_inplace(|v| v * k);
                }
                self.acc(grads, *x, dx.into_dyn());
                self.acc(grads, *gamma, dgamma.into_dyn());
                self.acc(grads, *beta, dbeta.into_dyn());
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = ArrayD::<f64>::zeros(self.value(*x).raw_dim());
                let flat = dx.as_slice_mut().unwrap();
                for (gv, &idx) in g.iter().zip(argmax) {
                    flat[idx] += gv;
                }
                self.acc(grads, *x, dx);
            }
            Op::MaskedMeanTime { x, weights } => {
                let g2 = as2(g);
                let (b, c) = g2.dim();
                let t = weights.dim().1;
                let mut dx = Array3::<f64>::zeros((b, c, t));
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g2[[bi, ci]];
                        dx.slice_mut(s![bi, ci, ..]).assign(&(&weights.row(bi) * gv));
                    }
                }
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::SelectTime { x, t } => {
                let mut dx = Array3::<f64>::zeros(as3(self.value(*x)).dim());
                dx.slice_mut(s![.., .., *t]).assign(&as2(g));
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::SliceCols { x, start } => {
                let mut dx = Array2::<f64>::zeros(as2(self.value(*x)).dim());
                let w = g.shape()[1];
                dx.slice_mut(s![.., *start..*start + w]).assign(&as2(g));
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::SliceRows { x, start } => {
                let mut dx = Array2::<f64>::zeros(as2(self.value(*x)).dim());
                let h = g.shape()[0];
                dx.slice_mut(s![*start..*start + h, ..]).assign(&as2(g));
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::SelectRows { x, rows } => {
                let mut dx = Array2::<f64>::zeros(as2(self.value(*x)).dim());
                let g2 = as2(g);
                for (k, &r) in rows.iter().enumerate() {
                    let mut row = dx.row_mut(r);
                    row += &g2.row(k);
                }
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::ConcatCols(xs) => {
                let g2 = as2(g);
                let mut off = 0;
                for &v in xs {
                    let w = self.value(v).shape()[1];
                    if self.rg(v) {
                        self.acc(grads, v, g2.slice(s![.., off..off + w]).to_owned().into_dyn());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let g2 = as2(g);
                let mut off = 0;
                for &v in xs {
                    let h = self.value(v).shape()[0];
                    if self.rg(v) {
                        self.acc(grads, v, g2.slice(s![off..off + h, ..]).to_owned().into_dyn());
                    }
                    off += h;
                }
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).shape()[0];
                let row = g.view().into_dimensionality::<Ix1>().unwrap().to_owned() / n as f64;
                let dx = row.insert_axis(Axis(0)).broadcast((n, g.len())).unwrap().to_owned();
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::L2NormalizeRows { x, norms } => {
                let xv = self.value(*x);
                let shape = xv.shape().to_vec();
                let dims = (rows_of(&shape), *shape.last().unwrap());
                let xm = xv.to_shape(dims).unwrap();
                let gm = g.to_shape(dims).unwrap();
                let mut dx = Array2::<f64>::zeros(dims);
                for (i, &n) in norms.iter().enumerate() {
                    let d = n + NORM_EPS;
                    let xr = xm.row(i);
                    let gr = gm.row(i);
                    let mut dr = dx.row_mut(i);
                    dr.assign(&(&gr / d));
                    if n > 0.0 {
                        let coef = xr.dot(&gr) / (n * d * d);
                        dr.scaled_add(-coef, &xr);
                    }
                }
                self.acc(grads, *x, dx.into_shape_with_order(IxDyn(&shape)).unwrap());
            }
            Op::Sum(xs) => {
                for &v in xs {
                    self.acc(grads, v, g.clone());
                }
            }
            Op::Fused { inputs, grads: local } => {
                let up = g.iter().copied().next().unwrap_or(0.0);
                for (&v, lg) in inputs.iter().zip(local) {
                    if self.rg(v) {
                        self.acc(grads, v, lg * up);
                    }
                }
            }
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = as3(self.value(x));
        let wv = as3(self.value(w));
        let (bsz, c_in, t_in) = xv.dim();
        let (c_out, _, k) = wv.dim();
        let t_out = g.shape()[2];
        let gflat = as3(g)
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((bsz * t_out, c_out))
            .unwrap();
        if self.rg(b) {
            self.acc(grads, b, gflat.sum_axis(Axis(0)).into_dyn());
        }
        if self.rg(w) {
            let cols = im2col(&xv, k, spec, t_out);
            let dw = gflat.t().dot(&cols).into_shape_with_order((c_out, c_in, k)).unwrap();
            self.acc(grads, w, dw.into_dyn());
        }
        if self.rg(x) {
            let wr = wv.to_shape((c_out, c_in * k)).unwrap();
            let dcols = gflat.dot(&wr);
            let mut dx = Array3::<f64>::zeros((bsz, c_in, t_in));
            for bi in 0..bsz {
                for t in 0..t_out {
                    let row = dcols.row(bi * t_out + t);
                    for ki in 0..k {
                        let src = (t + ki * spec.dilation) as isize - spec.pad_left as isize;
                        if src < 0 || src as usize >= t_in {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..c_in {
                            dx[[bi, c, src]] += row[c * k + ki];
                        }
                    }
                }
            }
            self.acc(grads, x, dx.into_dyn());
        }
    }
}

const NORM_EPS: f64 = 1e-12;

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product::<usize>().max(1)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; zeros are represented as `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Collects gradients for every named parameter of `graph`, filling
    /// parameters that did not participate with zeros.
    pub fn named(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .params()
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(graph.value(v).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }
}
