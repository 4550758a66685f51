//! Training loop: objective assembly per mini-batch, optimizer steps,
//! ablation variants and checkpoints.

mod checkpoint;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use crate::autograd::{BatchStats, Graph, Var};
use crate::corpus::{batch_iter, BatchPair, CorpusDataset, FeatureSource, UnlabeledCorpus};
use crate::error::{Error, Result};
use crate::losses::{self, Bandwidth, LossConfig, LossReport};
use crate::model::{Mode, Model, ModelConfig};
use crate::optim::{RAdam, RAdamConfig};
use crate::pseudo::{select_pseudo, update_threshold, PseudoLabeledSet, ThresholdState};

/// Which objective terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Source classification only.
    V1,
    /// Classification of emotion and corpus.
    V2,
    /// Everything except the decoupling term.
    V3,
    /// Everything except alignment.
    V4,
    /// No corpus encoder: emotion classification plus alignment.
    V5,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Self::Full, Self::V1, Self::V2, Self::V3, Self::V4, Self::V5];

    pub fn uses_target(self) -> bool {
        self != Self::V1
    }

    pub fn corpus_branch(self) -> bool {
        matches!(self, Self::Full | Self::V2 | Self::V3 | Self::V4)
    }

    pub fn decouple(self) -> bool {
        matches!(self, Self::Full | Self::V4)
    }

    pub fn align(self) -> bool {
        matches!(self, Self::Full | Self::V3 | Self::V5)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Full => "full",
            Self::V1 => "V1",
            Self::V2 => "V2",
            Self::V3 => "V3",
            Self::V4 => "V4",
            Self::V5 => "V5",
        };
        f.write_str(s)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let head = s.split('_').next().unwrap_or("").to_ascii_lowercase();
        Ok(match head.as_str() {
            "full" => Self::Full,
            "v1" => Self::V1,
            "v2" => Self::V2,
            "v3" => Self::V3,
            "v4" => Self::V4,
            "v5" => Self::V5,
            _ => return Err(Error::InvalidConfig(format!("unknown ablation `{s}` (expected full or V1..V5)"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: u64,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub ablation: Ablation,
    /// EMA momentum of the pseudo-label threshold.
    pub lambda: f64,
    /// Write a checkpoint every this many steps (needs a checkpoint directory).
    pub checkpoint_every: Option<u64>,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 60,
            max_steps: None,
            seed: 0,
            ablation: Ablation::Full,
            lambda: 0.999,
            checkpoint_every: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidConfig("checkpoint_every must be positive".into()));
        }
        ThresholdState::new(self.model.n_classes, self.lambda)?;
        self.model.validate()?;
        self.loss.validate()
    }

    pub fn radam(&self) -> RAdamConfig {
        RAdamConfig { lr: self.learning_rate, ..RAdamConfig::default() }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optim: RAdam,
    pub threshold: ThresholdState,
    pub step: u64,
    /// Epochs completed.
    pub epoch: u64,
    /// Mini-batches already consumed in the current epoch.
    pub batch_in_epoch: usize,
    /// Drives dropout.
    pub rng: ChaCha8Rng,
    /// Target rows pushed through the encoder so far.
    pub target_rows_seen: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        Ok(Self {
            model: Model::init(cfg.model.clone(), cfg.seed)?,
            optim: RAdam::new(cfg.radam()),
            threshold: ThresholdState::new(cfg.model.n_classes, cfg.lambda)?,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            rng,
            target_rows_seen: 0,
        })
    }
}

/// Values held fixed while re-evaluating an objective, so that it becomes a
/// smooth function of the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossPins {
    /// Base MMD bandwidth σ².
    pub bandwidth: Option<f64>,
    pub pseudo: Option<PseudoLabeledSet>,
}

/// One mini-batch objective, built but not yet applied.
pub struct Objective {
    pub graph: Graph,
    pub root: Var,
    pub report: LossReport,
    pub bn_stats: Vec<(String, BatchStats)>,
    /// Threshold after this step's update.
    pub threshold: ThresholdState,
    pub pseudo: PseudoLabeledSet,
    pub bandwidth: Option<f64>,
    pub target_rows: usize,
}

/// Builds the total loss of `batch` on a fresh graph.
pub fn build_objective(
    model: &Model,
    batch: &BatchPair,
    cfg: &TrainConfig,
    threshold: &ThresholdState,
    rng: &mut ChaCha8Rng,
    pins: &LossPins,
) -> Result<Objective> {
    let ab = cfg.ablation;
    let lc = &cfg.loss;
    let mut g = Graph::new();
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    let mut threshold = *threshold;
    let mut pseudo = PseudoLabeledSet::default();
    let mut bandwidth = None;

    let src = model.encode_graph(&mut g, &batch.source.features, &batch.source.lengths, Mode::Train, Some(rng), ab.corpus_branch())?;
    let mut bn_stats = src.bn_stats;
    let logits_s = model.emotion_logits_graph(&mut g, src.e);
    let l_emotion = losses::graph_softmax_ce(&mut g, logits_s, &batch.source_labels)?;
    report.l_emotion = g.scalar(l_emotion);
    terms.push(l_emotion);

    let mut target_rows = 0;
    if ab.uses_target() {
        let tgt = model.encode_graph(&mut g, &batch.target.features, &batch.target.lengths, Mode::Train, Some(rng), ab.corpus_branch())?;
        bn_stats.extend(tgt.bn_stats);
        target_rows = batch.target.len();
        let (ns, nt) = (batch.source.len(), batch.target.len());

        if let (Some(cs), Some(ct)) = (src.c, tgt.c) {
            let c_all = g.concat_rows(&[cs, ct]);
            let logits_c = model.corpus_logits_graph(&mut g, c_all);
            let domain: Vec<f64> = (0..ns + nt).map(|i| if i < ns { 1.0 } else { 0.0 }).collect();
            let l_corpus = losses::graph_bce(&mut g, logits_c, &domain);
            report.l_corpus = g.scalar(l_corpus);
            terms.push(l_corpus);
        }

        let z_e = (ab.decouple() || ab.align()).then(|| {
            let zs = model.project_graph(&mut g, src.e);
            let zt = model.project_graph(&mut g, tgt.e);
            (zs, zt)
        });

        if ab.decouple() {
            let (zes, zet) = z_e.expect("projected emotion features");
            let (cs, ct) = (src.c.expect("corpus branch"), tgt.c.expect("corpus branch"));
            let zcs = model.project_graph(&mut g, cs);
            let zct = model.project_graph(&mut g, ct);
            let protos = [zes, zcs, zet, zct].map(|z| {
                let m = g.mean_rows(z);
                g.l2_normalize_rows(m)
            });
            let l_dec = losses::graph_decouple(&mut g, protos, lc.tau_p);
            report.l_decouple = g.scalar(l_dec);
            terms.push(l_dec);
        }

        if ab.align() {
            let (zes, zet) = z_e.expect("projected emotion features");
            let logits_t = model.emotion_logits_graph(&mut g, tgt.e);
            let probs_t = losses::softmax_rows(&g.value2(logits_t));
            threshold = update_threshold(&threshold, &probs_t);
            pseudo = match &pins.pseudo {
                Some(p) => p.clone(),
                None => select_pseudo(&probs_t, threshold.tau),
            };

            let mmd_cfg = match pins.bandwidth {
                Some(s) => lc.mmd().with_bandwidth(Bandwidth::Fixed(s)),
                None => lc.mmd(),
            };
            let (d_k2, sigma2) = losses::graph_mmd(&mut g, src.e, tgt.e, &mmd_cfg)?;
            bandwidth = Some(sigma2);

            let mut labels = batch.source_labels.clone();
            let z_h = if pseudo.is_empty() {
                zes
            } else {
                let picked = g.select_rows(zet, &pseudo.indices);
                labels.extend_from_slice(&pseudo.labels);
                g.concat_rows(&[zes, picked])
            };
            let (l_scl, _) = losses::graph_scl(&mut g, z_h, &labels, lc.tau_s)?;
            let weighted = g.scale(l_scl, lc.alpha_1);
            let l_align = g.add(d_k2, weighted);
            report.d_k2 = g.scalar(d_k2);
            report.l_scl = g.scalar(l_scl);
            report.l_align = g.scalar(l_align);
            report.n_pseudo = pseudo.len();
            terms.push(l_align);
        }
    }

    let root = g.sum(&terms);
    report.l_total = g.scalar(root);
    Ok(Objective { graph: g, root, report, bn_stats, threshold, pseudo, bandwidth, target_rows })
}

fn check_batch(batch: &BatchPair, n_classes: usize) -> Result<()> {
    if batch.source.is_empty() {
        return Err(Error::InvalidInput("empty source batch".into()));
    }
    if batch.source_labels.len() != batch.source.len() {
        return Err(Error::LengthMismatch { left: batch.source_labels.len(), right: batch.source.len() });
    }
    if let Some(&bad) = batch.source_labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes: n_classes });
    }
    Ok(())
}

/// One optimizer step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &BatchPair, cfg: &TrainConfig) -> Result<LossReport> {
    check_batch(batch, cfg.model.n_classes)?;
    if cfg.ablation.uses_target() && batch.target.is_empty() {
        return Err(Error::InvalidInput("empty target batch".into()));
    }
    let obj = build_objective(&state.model, batch, cfg, &state.threshold, &mut state.rng, &LossPins::default())?;
    let next = state.step + 1;
    if let Some(term) = obj.report.non_finite_term() {
        return Err(Error::NonFinite(format!("loss term {term} at step {next}")));
    }
    let grads = obj.graph.backward(obj.root).named(&obj.graph);
    if let Some((name, _)) = grads.iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {name} at step {next}")));
    }
    state.optim.step(&mut state.model.store.params, &grads);
    state.model.update_running_stats(&obj.bn_stats);
    state.threshold = obj.threshold;
    state.step = next;
    state.target_rows_seen += obj.target_rows as u64;
    Ok(obj.report)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub batch: usize,
    #[serde(flatten)]
    pub report: LossReport,
    pub tau: f64,
}

/// Optional side channels of [`fit_from`].
#[derive(Default)]
pub struct FitHooks<'a> {
    /// Receives the JSON-lines log.
    pub log: Option<&'a mut dyn Write>,
    /// Receives `{"step", "seconds"}` lines with wall-clock time per step.
    pub timings: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Called after every completed epoch.
    pub on_epoch_end: Option<&'a mut dyn FnMut(&TrainState) -> Result<()>>,
}

fn write_line(w: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::json(Path::new("<log>"), e))?;
    writeln!(w, "{line}").map_err(|e| Error::io(Path::new("<log>"), e))
}

/// Path of the periodic checkpoint written after `step`.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

/// Trains from scratch.
pub fn fit(source: &CorpusDataset, target: &UnlabeledCorpus, cfg: &TrainConfig) -> Result<(TrainState, Vec<StepRecord>)> {
    fit_from(TrainState::new(cfg)?, source, target, cfg, FitHooks::default())
}

/// Continues training from `state` until `max_epochs` or `max_steps`.
pub fn fit_from(
    mut state: TrainState,
    source: &CorpusDataset,
    target: &UnlabeledCorpus,
    cfg: &TrainConfig,
    mut hooks: FitHooks<'_>,
) -> Result<(TrainState, Vec<StepRecord>)> {
    cfg.validate()?;
    if source.n() == 0 {
        return Err(Error::EmptyDataset(source.name.clone()));
    }
    if target.is_empty() {
        return Err(Error::EmptyDataset(target.name.clone()));
    }
    let mut records = Vec::new();
    let limit = cfg.max_steps.unwrap_or(u64::MAX);
    while state.epoch < cfg.max_epochs && state.step < limit {
        let skip = state.batch_in_epoch;
        for pair in batch_iter(source, target, cfg.batch_size, cfg.seed, state.epoch, cfg.model.max_frames)?.skip(skip) {
            if state.step >= limit {
                break;
            }
            let started = Instant::now();
            let report = train_step(&mut state, &pair, cfg)?;
            state.batch_in_epoch += 1;
            let rec = StepRecord { step: state.step, epoch: state.epoch, batch: pair.index, report, tau: state.threshold.tau };
            if let Some(w) = hooks.log.as_deref_mut() {
                write_line(w, &rec)?;
            }
            if let Some(w) = hooks.timings.as_deref_mut() {
                write_line(w, &serde_json::json!({"step": state.step, "seconds": started.elapsed().as_secs_f64()}))?;
            }
            records.push(rec);
            if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &hooks.checkpoint_dir) {
                if state.step % every == 0 {
                    save_checkpoint(&state, cfg, &checkpoint_path(dir, state.step))?;
                }
            }
        }
        if state.step >= limit && state.batch_in_epoch < crate::corpus::batches_per_epoch(source.n(), target.len(), cfg.batch_size) {
            break;
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
        if let Some(f) = hooks.on_epoch_end.as_deref_mut() {
            f(&state)?;
        }
    }
    Ok((state, records))
}

/// Emotion-class probabilities of every row of `data`, in inference mode.
pub fn predict_proba<S: FeatureSource + ?Sized>(model: &Model, data: &S, batch_size: usize) -> Result<Array2<f64>> {
    let n = data.len();
    let mut out = Array2::<f64>::zeros((n, model.config.n_classes));
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = crate::corpus::PaddedBatch::gather(data, chunk, model.config.max_frames, None);
        let enc = model.encode(&b.features, &b.lengths)?;
        let p = model.classify_emotion(&enc.e)?;
        for (row, &i) in chunk.iter().enumerate() {
            out.row_mut(i).assign(&p.row(row));
        }
    }
    Ok(out)
}
