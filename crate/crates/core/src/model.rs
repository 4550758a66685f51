//! Dual-encoder network.
//!
//! A convolutional backbone feeds two branches: a residual temporal
//! convolution stack pooled over valid frames gives the emotion features `E`,
//! and a bidirectional LSTM gives the corpus features `C`. A shared two-layer
//! projection head maps either kind to the unit sphere; linear heads classify
//! emotion (softmax) and corpus (sigmoid).
//!
//! Every stage respects per-row valid lengths: batch-norm statistics skip
//! padded frames, padded positions are zeroed after each block, the TCN is
//! causal, and the LSTM carries its state across padding. A sequence padded
//! with zeros therefore encodes exactly like the unpadded sequence.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis as NdAxis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, BatchStats, ConvSpec, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::softmax_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub backbone_blocks: usize,
    pub backbone_channels: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub tcn_blocks: usize,
    pub tcn_kernel: usize,
    pub tcn_channels: usize,
    /// Dropout inside TCN residual blocks.
    pub tcn_dropout: bool,
    pub feature_dim: usize,
    pub lstm_hidden: usize,
    pub proj_dim: usize,
    pub n_classes: usize,
    pub max_frames: usize,
    /// Batch-norm running-average momentum.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 40,
            backbone_blocks: 3,
            backbone_channels: 64,
            conv_kernel: 3,
            dropout: 0.1,
            tcn_blocks: 5,
            tcn_kernel: 2,
            tcn_channels: 64,
            tcn_dropout: true,
            feature_dim: 128,
            lstm_hidden: 64,
            proj_dim: 128,
            n_classes: 2,
            max_frames: 300,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.backbone_blocks,
            self.backbone_channels,
            self.conv_kernel,
            self.tcn_blocks,
            self.tcn_kernel,
            self.tcn_channels,
            self.feature_dim,
            self.lstm_hidden,
            self.proj_dim,
            self.max_frames,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("at least two emotion classes are required".into()));
        }
        if 2 * self.lstm_hidden != self.feature_dim {
            return Err(Error::InvalidConfig(format!(
                "corpus features are the concatenated Bi-LSTM states: feature_dim ({}) must be 2 x lstm_hidden ({})",
                self.feature_dim, self.lstm_hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::InvalidConfig("bn_momentum must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Shortest input the backbone accepts after its pooling stages.
    pub fn min_frames(&self) -> usize {
        1 << self.backbone_blocks
    }
}

/// Learnable tensors and batch-norm running statistics, keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Array1<f64>>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|t| t.iter().all(|v| v.is_finite()))
            && self.buffers.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Emotion and corpus features of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub e: Array2<f64>,
    pub c: Array2<f64>,
}

/// Graph handles produced by [`Model::encode_graph`].
pub struct Encoded {
    pub e: Var,
    pub c: Option<Var>,
    /// Training-mode statistics per batch-norm layer.
    pub bn_stats: Vec<(String, BatchStats)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

/// Square matrix with orthonormal columns (Gram-Schmidt on a Gaussian draw).
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    loop {
        let mut m: Array2<f64> = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(rng));
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let proj: f64 = m.column(j).dot(&m.column(k));
                let ck = m.column(k).to_owned();
                m.column_mut(j).scaled_add(-proj, &ck);
            }
            let norm = m.column(j).dot(&m.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return m;
        }
    }
}

fn lengths_mask(lengths: &[usize], t: usize) -> Array2<f64> {
    Array2::from_shape_fn((lengths.len(), t), |(b, i)| if i < lengths[b] { 1.0 } else { 0.0 })
}

fn channel_mask(lengths: &[usize], c: usize, t: usize) -> Tensor {
    Array3::from_shape_fn((lengths.len(), c, t), |(b, _, i)| if i < lengths[b] { 1.0 } else { 0.0 }).into_dyn()
}

impl Model {
    /// Seeded initialization: fan-in uniform weights, zero biases,
    /// orthogonal recurrent blocks, identity batch norm.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let conv = |p: &mut BTreeMap<String, Tensor>, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize, k: usize| {
            let bound = 1.0 / ((inp * k) as f64).sqrt();
            p.insert(format!("{name}.w"), uniform(rng, &[out, inp, k], bound));
            p.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])));
        };
        let bn = |p: &mut BTreeMap<String, Tensor>, buffers: &mut BTreeMap<String, Array1<f64>>, name: &str, c: usize| {
            p.insert(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c])));
            p.insert(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])));
            buffers.insert(format!("{name}.mean"), Array1::zeros(c));
            buffers.insert(format!("{name}.var"), Array1::ones(c));
        };
        let linear = |p: &mut BTreeMap<String, Tensor>, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize| {
            let bound = 1.0 / (inp as f64).sqrt();
            p.insert(format!("{name}.w"), uniform(rng, &[out, inp], bound));
            p.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])));
        };
        let c = &config;
        let mut in_ch = c.input_dim;
        for i in 0..c.backbone_blocks {
            conv(&mut p, &mut rng, &format!("backbone.{i}.conv"), c.backbone_channels, in_ch, c.conv_kernel);
            bn(&mut p, &mut buffers, &format!("backbone.{i}.bn"), c.backbone_channels);
            in_ch = c.backbone_channels;
        }
        let mut tcn_in = c.backbone_channels;
        for i in 0..c.tcn_blocks {
            conv(&mut p, &mut rng, &format!("tcn.{i}.conv1"), c.tcn_channels, tcn_in, c.tcn_kernel);
            bn(&mut p, &mut buffers, &format!("tcn.{i}.bn1"), c.tcn_channels);
            conv(&mut p, &mut rng, &format!("tcn.{i}.conv2"), c.tcn_channels, c.tcn_channels, c.tcn_kernel);
            bn(&mut p, &mut buffers, &format!("tcn.{i}.bn2"), c.tcn_channels);
            if tcn_in != c.tcn_channels {
                conv(&mut p, &mut rng, &format!("tcn.{i}.down"), c.tcn_channels, tcn_in, 1);
            }
            tcn_in = c.tcn_channels;
        }
        linear(&mut p, &mut rng, "emotion.fc", c.feature_dim, c.tcn_channels);
        let h = c.lstm_hidden;
        for dir in ["fwd", "bwd"] {
            let bound = 1.0 / (h as f64).sqrt();
            p.insert(format!("lstm.{dir}.w_ih"), uniform(&mut rng, &[4 * h, c.backbone_channels], bound));
            let mut w_hh = Array2::<f64>::zeros((4 * h, h));
            for gate in 0..4 {
                w_hh.slice_mut(ndarray::s![gate * h..(gate + 1) * h, ..]).assign(&orthogonal(&mut rng, h));
            }
            p.insert(format!("lstm.{dir}.w_hh"), w_hh.into_dyn());
            p.insert(format!("lstm.{dir}.b"), ArrayD::zeros(IxDyn(&[4 * h])));
        }
        linear(&mut p, &mut rng, "proj.fc1", c.proj_dim, c.feature_dim);
        linear(&mut p, &mut rng, "proj.fc2", c.proj_dim, c.proj_dim);
        linear(&mut p, &mut rng, "head.emotion", c.n_classes, c.feature_dim);
        linear(&mut p, &mut rng, "head.corpus", 1, c.feature_dim);
        Ok(Self { config, store: ParamStore { params: p, buffers } })
    }

    fn param(&self, g: &mut Graph, name: &str) -> Var {
        g.param(name, self.store.get(name))
    }

    fn dropout(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let p = self.config.dropout;
        if mode == Mode::Eval || p == 0.0 {
            return x;
        }
        let rng = rng.as_deref_mut().expect("training-mode forward needs an RNG");
        let keep = 1.0 / (1.0 - p);
        let mask = g.value(x).mapv(|_| if rng.random::<f64>() < p { 0.0 } else { keep });
        g.mul_const(x, mask)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm(
        &self,
        g: &mut Graph,
        x: Var,
        name: &str,
        lengths: &[usize],
        mode: Mode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Var {
        let gamma = self.param(g, &format!("{name}.gamma"));
        let beta = self.param(g, &format!("{name}.beta"));
        match mode {
            Mode::Train => {
                let t = g.value(x).shape()[2];
                let (y, s) = g.batch_norm_train(x, gamma, beta, &lengths_mask(lengths, t));
                stats.push((name.to_string(), s));
                y
            }
            Mode::Eval => {
                let rm = &self.store.buffers[&format!("{name}.mean")];
                let rv = &self.store.buffers[&format!("{name}.var")];
                g.batch_norm_eval(x, gamma, beta, rm, rv)
            }
        }
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, spec: ConvSpec) -> Var {
        let w = self.param(g, &format!("{name}.w"));
        let b = self.param(g, &format!("{name}.b"));
        g.conv1d(x, w, b, spec)
    }

    fn mask(&self, g: &mut Graph, x: Var, lengths: &[usize]) -> Var {
        let shape = g.value(x).shape().to_vec();
        if lengths.iter().all(|&l| l >= shape[2]) {
            return x;
        }
        g.mul_const(x, channel_mask(lengths, shape[1], shape[2]))
    }

    /// Builds the encoder on `g` for `x: [B, T, D]`.
    ///
    /// `rng` drives dropout and is required in [`Mode::Train`].
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        x: &Array3<f64>,
        lengths: &[usize],
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
        with_corpus: bool,
    ) -> Result<Encoded> {
        let c = &self.config;
        let (b, t, d) = x.dim();
        if b == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if d != c.input_dim {
            return Err(Error::InvalidInput(format!("expected {} input coefficients, got {d}", c.input_dim)));
        }
        if lengths.len() != b {
            return Err(Error::InvalidInput("one length per batch row is required".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let t_pad = t.max(c.min_frames());
        let mut input = Array3::<f64>::zeros((b, d, t_pad));
        input.slice_mut(ndarray::s![.., .., ..t]).assign(&x.view().permuted_axes([0, 2, 1]));
        let mut lens: Vec<usize> = lengths.iter().map(|&l| l.clamp(1, t)).collect();
        let mut stats = Vec::new();

        let mut h = g.constant(input.into_dyn());
        let k = c.conv_kernel;
        let same = ConvSpec { dilation: 1, pad_left: (k - 1) / 2, pad_right: k - 1 - (k - 1) / 2 };
        for i in 0..c.backbone_blocks {
            h = self.conv(g, h, &format!("backbone.{i}.conv"), same);
            h = self.batch_norm(g, h, &format!("backbone.{i}.bn"), &lens, mode, &mut stats);
            h = g.relu(h);
            h = self.dropout(g, h, mode, &mut rng);
            h = g.max_pool2(h);
            lens.iter_mut().for_each(|l| *l = (*l / 2).max(1));
            h = self.mask(g, h, &lens);
        }
        let backbone = h;

        // emotion branch
        let mut e = backbone;
        for i in 0..c.tcn_blocks {
            let dil = 1usize << i;
            let causal = ConvSpec { dilation: dil, pad_left: dil * (c.tcn_kernel - 1), pad_right: 0 };
            let res = if self.store.params.contains_key(&format!("tcn.{i}.down.w")) {
                self.conv(g, e, &format!("tcn.{i}.down"), ConvSpec { dilation: 1, pad_left: 0, pad_right: 0 })
            } else {
                e
            };
            let mut y = self.conv(g, e, &format!("tcn.{i}.conv1"), causal);
            y = self.batch_norm(g, y, &format!("tcn.{i}.bn1"), &lens, mode, &mut stats);
            y = g.relu(y);
            if c.tcn_dropout {
                y = self.dropout(g, y, mode, &mut rng);
            }
            y = self.conv(g, y, &format!("tcn.{i}.conv2"), causal);
            y = self.batch_norm(g, y, &format!("tcn.{i}.bn2"), &lens, mode, &mut stats);
            y = g.relu(y);
            if c.tcn_dropout {
                y = self.dropout(g, y, mode, &mut rng);
            }
            let sum = g.add(y, res);
            e = g.relu(sum);
            e = self.mask(g, e, &lens);
        }
        let pooled = g.masked_mean_time(e, &lens);
        let w = self.param(g, "emotion.fc.w");
        let bias = self.param(g, "emotion.fc.b");
        let e = g.linear(pooled, w, bias);

        let c_out = if with_corpus { Some(self.bilstm(g, backbone, &lens)) } else { None };
        Ok(Encoded { e, c: c_out, bn_stats: stats })
    }

    fn bilstm(&self, g: &mut Graph, x: Var, lengths: &[usize]) -> Var {
        let h = self.config.lstm_hidden;
        let shape = g.value(x).shape().to_vec();
        let (b, t) = (shape[0], shape[2]);
        let steps: Vec<Var> = (0..t).map(|i| g.select_time(x, i)).collect();
        let mut finals = Vec::with_capacity(2);
        for (dir, order) in [("fwd", (0..t).collect::<Vec<_>>()), ("bwd", (0..t).rev().collect())] {
            let w_ih = self.param(g, &format!("lstm.{dir}.w_ih"));
            let w_hh = self.param(g, &format!("lstm.{dir}.w_hh"));
            let bias = self.param(g, &format!("lstm.{dir}.b"));
            let mut hs = g.constant(ArrayD::zeros(IxDyn(&[b, h])));
            let mut cs = g.constant(ArrayD::zeros(IxDyn(&[b, h])));
            for &ti in &order {
                let xi = g.matmul_t(steps[ti], w_ih);
                let hh = g.matmul_t(hs, w_hh);
                let pre = g.add(xi, hh);
                let gates = g.add_row_bias(pre, bias);
                let ig = g.slice_cols(gates, 0, h);
                let fg = g.slice_cols(gates, h, h);
                let gg = g.slice_cols(gates, 2 * h, h);
                let og = g.slice_cols(gates, 3 * h, h);
                let (ig, fg, gg, og) = (g.sigmoid(ig), g.sigmoid(fg), g.tanh(gg), g.sigmoid(og));
                let keep = g.mul(fg, cs);
                let write = g.mul(ig, gg);
                let c_new = g.add(keep, write);
                let tc = g.tanh(c_new);
                let h_new = g.mul(og, tc);
                if lengths.iter().all(|&l| ti < l) {
                    hs = h_new;
                    cs = c_new;
                } else {
                    let m = Array2::from_shape_fn((b, h), |(bi, _)| if ti < lengths[bi] { 1.0 } else { 0.0 })
                        .into_dyn();
                    let dh = g.sub(h_new, hs);
                    let dh = g.mul_const(dh, m.clone());
                    hs = g.add(hs, dh);
                    let dc = g.sub(c_new, cs);
                    let dc = g.mul_const(dc, m);
                    cs = g.add(cs, dc);
                }
            }
            finals.push(hs);
        }
        g.concat_cols(&finals)
    }

    pub fn emotion_logits_graph(&self, g: &mut Graph, e: Var) -> Var {
        let w = self.param(g, "head.emotion.w");
        let b = self.param(g, "head.emotion.b");
        g.linear(e, w, b)
    }

    /// `[B, 1]` corpus logits.
    pub fn corpus_logits_graph(&self, g: &mut Graph, c: Var) -> Var {
        let w = self.param(g, "head.corpus.w");
        let b = self.param(g, "head.corpus.b");
        g.linear(c, w, b)
    }

    pub fn project_graph(&self, g: &mut Graph, h: Var) -> Var {
        let w1 = self.param(g, "proj.fc1.w");
        let b1 = self.param(g, "proj.fc1.b");
        let w2 = self.param(g, "proj.fc2.w");
        let b2 = self.param(g, "proj.fc2.b");
        let y = g.linear(h, w1, b1);
        let y = g.relu(y);
        let y = g.linear(y, w2, b2);
        g.l2_normalize_rows(y)
    }

    /// Inference-mode encoding.
    pub fn encode(&self, x: &Array3<f64>, lengths: &[usize]) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, x, lengths, Mode::Eval, None, true)?;
        Ok(EncoderOutput { e: g.value2(enc.e), c: g.value2(enc.c.expect("corpus branch requested")) })
    }

    fn check_finite(m: &Array2<f64>, what: &str) -> Result<()> {
        if m.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.into()))
        }
    }

    /// Row-wise softmax of the emotion head.
    pub fn classify_emotion(&self, e: &Array2<f64>) -> Result<Array2<f64>> {
        Self::check_finite(e, "emotion features")?;
        let w = self.store.get("head.emotion.w").view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.store.get("head.emotion.b").view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let logits = e.dot(&w.t()) + &b.insert_axis(NdAxis(0));
        Ok(softmax_rows(&logits))
    }

    /// Sigmoid of the corpus head, one probability per row.
    pub fn classify_corpus(&self, c: &Array2<f64>) -> Result<Vec<f64>> {
        Self::check_finite(c, "corpus features")?;
        let w = self.store.get("head.corpus.w").view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.store.get("head.corpus.b")[[0]];
        Ok(c.dot(&w.t()).column(0).iter().map(|&z| sigmoid(z + b)).collect())
    }

    /// Projection head on plain arrays; rows come out with unit norm.
    pub fn project(&self, h: &Array2<f64>) -> Result<Array2<f64>> {
        Self::check_finite(h, "projection input")?;
        let mut g = Graph::new();
        let x = g.constant(h.clone().into_dyn());
        let z = self.project_graph(&mut g, x);
        Ok(g.value2(z))
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (name, s) in stats {
            let mean = self.store.buffers.get_mut(&format!("{name}.mean")).expect("bn buffer");
            *mean = &*mean * (1.0 - m) + &s.mean * m;
            let var = self.store.buffers.get_mut(&format!("{name}.var")).expect("bn buffer");
            *var = &*var * (1.0 - m) + &s.var_unbiased * m;
        }
    }
}
