//! Metrics, scenario runs, ablation sweeps and feature export.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Axis, CorpusDataset, PaddedBatch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::{fit_from, predict_proba, Ablation, FitHooks, StepRecord, TrainConfig, TrainState};

/// `confusion[true][predicted]` counts.
pub fn confusion(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch { left: predictions.len(), right: labels.len() });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset("no predictions to score".into()));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        let bad = if p >= n_classes { Some(p) } else if y >= n_classes { Some(y) } else { None };
        if let Some(label) = bad {
            return Err(Error::LabelOutOfRange { label, classes: n_classes });
        }
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn war_from_confusion(m: &[Vec<u64>]) -> f64 {
    let n: u64 = m.iter().flatten().sum();
    let correct: u64 = (0..m.len()).map(|k| m[k][k]).sum();
    correct as f64 / n as f64
}

/// Macro average of per-class F1; a class with no predicted and no true
/// members scores 0.
pub fn f1_from_confusion(m: &[Vec<u64>]) -> f64 {
    let k = m.len();
    let per_class = (0..k).map(|c| {
        let tp = m[c][c] as f64;
        let predicted: u64 = (0..k).map(|r| m[r][c]).sum();
        let actual: u64 = m[c].iter().sum();
        let denom = predicted as f64 + actual as f64;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    });
    per_class.sum::<f64>() / k as f64
}

/// Mean per-class recall over classes that occur in the labels.
pub fn balanced_accuracy_from_confusion(m: &[Vec<u64>]) -> f64 {
    let recalls: Vec<f64> = m
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Fraction of correct predictions.
pub fn war(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(war_from_confusion(&confusion(predictions, labels, 2)?))
}

/// Macro F1 over the two classes.
pub fn f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(f1_from_confusion(&confusion(predictions, labels, 2)?))
}

pub fn balanced_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(balanced_accuracy_from_confusion(&confusion(predictions, labels, 2)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub war: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    pub n: u64,
    pub scenario: String,
    pub axis: Axis,
}

impl MetricsReport {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], scenario: String, axis: Axis) -> Result<Self> {
        let m = confusion(predictions, labels, 2)?;
        Ok(Self {
            war: war_from_confusion(&m),
            f1: f1_from_confusion(&m),
            balanced_accuracy: balanced_accuracy_from_confusion(&m),
            n: predictions.len() as u64,
            confusion: m,
            scenario,
            axis,
        })
    }

    /// Whether the scores and count agree with the confusion matrix within `tol`.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let total: u64 = self.confusion.iter().flatten().sum();
        total == self.n
            && (war_from_confusion(&self.confusion) - self.war).abs() <= tol
            && (f1_from_confusion(&self.confusion) - self.f1).abs() <= tol
            && (balanced_accuracy_from_confusion(&self.confusion) - self.balanced_accuracy).abs() <= tol
    }
}

pub fn scenario_name(source: &str, target: &str) -> String {
    format!("{source}→{target}")
}

fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best }).0)
        .collect()
}

/// Scores the emotion classifier on every utterance of a labeled dataset.
pub fn evaluate(model: &Model, data: &CorpusDataset, scenario: String, batch_size: usize) -> Result<MetricsReport> {
    let labels = data.labels()?;
    let preds = argmax_rows(&predict_proba(model, data, batch_size)?);
    MetricsReport::from_predictions(&preds, &labels, scenario, data.axis)
}

/// How the model reported by [`run_scenario`] is chosen among epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// The model after the last epoch.
    Final,
    /// The epoch with the highest target WAR (target labels used for
    /// selection only, after each epoch).
    TargetWar,
    /// The epoch with the highest WAR on a held-out share of the source.
    SourceValidation { fraction: f64 },
}

/// Splits the source into a training part and a validation part.
pub fn split_source(source: &CorpusDataset, fraction: f64, seed: u64) -> Result<(CorpusDataset, CorpusDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    let n_val = ((source.n() as f64 * fraction).round() as usize).clamp(1, source.n().saturating_sub(1).max(1));
    if source.n() < 2 {
        return Err(Error::EmptyDataset(format!("{} is too small to split", source.name)));
    }
    let mut idx: Vec<usize> = (0..source.n()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let pick = |ids: &[usize]| ids.iter().map(|&i| source.utterances[i].clone()).collect::<Vec<_>>();
    let val = CorpusDataset::new(format!("{}-val", source.name), source.role, source.axis, pick(&idx[..n_val]))?;
    let train = CorpusDataset::new(source.name.clone(), source.role, source.axis, pick(&idx[n_val..]))?;
    Ok((train, val))
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub report: MetricsReport,
    /// Model that produced `report`.
    pub model: Model,
    pub final_state: TrainState,
    pub log: Vec<StepRecord>,
    /// Number of completed epochs at the selected model.
    pub selected_epoch: u64,
    /// Target WAR after every epoch, when computed.
    pub epoch_war: Vec<f64>,
}

/// Trains on `source` plus the unlabeled view of `target`, then scores the
/// selected model on the labeled target.
pub fn run_scenario(
    source: &CorpusDataset,
    target: &CorpusDataset,
    cfg: &TrainConfig,
    selection: Selection,
) -> Result<ScenarioOutcome> {
    let scenario = scenario_name(&source.name, &target.name);
    let (train_src, val) = match selection {
        Selection::SourceValidation { fraction } => {
            let (t, v) = split_source(source, fraction, cfg.seed)?;
            (t, Some(v))
        }
        _ => (source.clone(), None),
    };
    let unlabeled = target.unlabeled();
    let eval_bs = cfg.batch_size.max(64);

    let mut best: Option<(f64, u64, Model)> = None;
    let mut epoch_war = Vec::new();
    let mut on_epoch = |state: &TrainState| -> Result<()> {
        let score = match (&val, selection) {
            (Some(v), _) => evaluate(&state.model, v, String::new(), eval_bs)?.war,
            (None, Selection::TargetWar) => evaluate(&state.model, target, String::new(), eval_bs)?.war,
            _ => return Ok(()),
        };
        if val.is_none() {
            epoch_war.push(score);
        }
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, state.epoch, state.model.clone()));
        }
        Ok(())
    };
    let hooks = FitHooks { on_epoch_end: Some(&mut on_epoch), ..FitHooks::default() };
    let (state, log) = fit_from(TrainState::new(cfg)?, &train_src, &unlabeled, cfg, hooks)?;
    let (model, selected_epoch) = match best {
        Some((_, epoch, model)) if selection != Selection::Final => (model, epoch),
        _ => (state.model.clone(), state.epoch),
    };
    let report = evaluate(&model, target, scenario, eval_bs)?;
    debug_assert!(report.is_consistent(1e-12));
    Ok(ScenarioOutcome { report, model, final_state: state, log, selected_epoch, epoch_war })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

pub struct Scenario {
    pub source: CorpusDataset,
    pub target: CorpusDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario: String,
    pub variant: String,
    pub seed: u64,
    pub war: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub selected_epoch: u64,
}

/// Worker count from `EMO_DNA_THREADS`, defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var("EMO_DNA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs every (scenario, variant, seed) combination; rows come back in that
/// nested order regardless of scheduling.
pub fn run_sweep(
    scenarios: &[Scenario],
    variants: &[Ablation],
    seeds: &[u64],
    base: &TrainConfig,
    selection: Selection,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(usize, Ablation, u64)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(i, _)| variants.iter().flat_map(move |&v| seeds.iter().map(move |&s| (i, v, s))))
        .collect();
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let k = {
                    let mut n = next.lock().unwrap();
                    if *n >= jobs.len() {
                        break;
                    }
                    *n += 1;
                    *n - 1
                };
                let (si, variant, seed) = jobs[k];
                let sc = &scenarios[si];
                let cfg = TrainConfig { ablation: variant, seed, ..base.clone() };
                let row = run_scenario(&sc.source, &sc.target, &cfg, selection).map(|o| SweepRow {
                    scenario: o.report.scenario.clone(),
                    variant: variant.to_string(),
                    seed,
                    war: o.report.war,
                    f1: o.report.f1,
                    balanced_accuracy: o.report.balanced_accuracy,
                    selected_epoch: o.selected_epoch,
                });
                results.lock().unwrap()[k] = Some(row);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Feature export
// ---------------------------------------------------------------------------

const DUMP_MAGIC: &[u8; 4] = b"EMOX";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub sample_id: String,
    pub corpus_id: String,
    pub label: Option<usize>,
    /// Top class of the emotion classifier.
    pub predicted: usize,
    pub confidence: f64,
    /// `predicted` when `confidence` reaches the pseudo-label threshold.
    pub pseudo_label: Option<usize>,
}

/// Emotion and corpus features of a dataset, row-aligned with `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub rows: Vec<DumpRow>,
    pub emotion: Array2<f32>,
    pub corpus: Array2<f32>,
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    n: usize,
    emotion_dim: usize,
    corpus_dim: usize,
    threshold: f64,
    rows: Vec<DumpRow>,
}

/// Encodes every utterance with `state`'s model and writes a dump: magic
/// `EMOX`, `u32` version, `u64` header length, JSON header with per-row
/// metadata, then `E` and `C` as row-major little-endian `f32`.
pub fn export_features(state: &TrainState, data: &CorpusDataset, path: &Path) -> Result<FeatureDump> {
    let model = &state.model;
    let n = data.n();
    let (de, dc) = (model.config.feature_dim, 2 * model.config.lstm_hidden);
    let mut emotion = Array2::<f32>::zeros((n, de));
    let mut corpus = Array2::<f32>::zeros((n, dc));
    let mut rows = Vec::with_capacity(n);
    let tau = state.threshold.tau;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(64) {
        let b = PaddedBatch::gather(data, chunk, model.config.max_frames, None);
        let enc = model.encode(&b.features, &b.lengths)?;
        let probs = model.classify_emotion(&enc.e)?;
        let preds = argmax_rows(&probs);
        for (r, &i) in chunk.iter().enumerate() {
            emotion.row_mut(i).assign(&enc.e.row(r).mapv(|v| v as f32));
            corpus.row_mut(i).assign(&enc.c.row(r).mapv(|v| v as f32));
            let u = &data.utterances[i];
            let conf = probs[[r, preds[r]]];
            rows.push(DumpRow {
                sample_id: u.sample_id.clone(),
                corpus_id: u.corpus_id.clone(),
                label: u.class,
                predicted: preds[r],
                confidence: conf,
                pseudo_label: (conf >= tau).then_some(preds[r]),
            });
        }
    }
    let header = DumpHeader { n, emotion_dim: de, corpus_dim: dc, threshold: tau, rows };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 4 * n * (de + dc));
    bytes.extend_from_slice(DUMP_MAGIC);
    bytes.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in emotion.iter().chain(corpus.iter()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(FeatureDump { rows: header.rows, emotion, corpus })
}

pub fn read_feature_dump(path: &Path) -> Result<FeatureDump> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::FeatureFormat { path: path.to_path_buf(), reason: reason.into() };
    if bytes.len() < 16 || &bytes[..4] != DUMP_MAGIC {
        return Err(bad("not a feature dump"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), found: version, expected: DUMP_VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let h: DumpHeader = serde_json::from_slice(body).map_err(|e| Error::json(path, e))?;
    let data = &bytes[16 + hlen..];
    if data.len() != 4 * h.n * (h.emotion_dim + h.corpus_dim) {
        return Err(bad("feature block size does not match the header"));
    }
    let vals: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let split = h.n * h.emotion_dim;
    let emotion = Array2::from_shape_vec((h.n, h.emotion_dim), vals[..split].to_vec()).map_err(|_| bad("shape"))?;
    let corpus = Array2::from_shape_vec((h.n, h.corpus_dim), vals[split..].to_vec()).map_err(|_| bad("shape"))?;
    Ok(FeatureDump { rows: h.rows, emotion, corpus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_synthetic_pair, ShiftSpec};
    use crate::model::ModelConfig;

    #[test]
    fn metric_examples() {
        assert_eq!(war(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(war(&[0, 1, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.75);
        assert_eq!(f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        let third = f1(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(balanced_accuracy(&[0, 0, 0, 0], &[0, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(war(&[0], &[0, 1]), Err(Error::LengthMismatch { .. })));
        assert!(war(&[], &[]).is_err());
        assert!(f1(&[2], &[0]).is_err());
    }

    #[test]
    fn f1_is_symmetric_under_relabeling() {
        let p = [0, 1, 1, 0, 1, 1, 0];
        let y = [0, 0, 1, 1, 1, 0, 0];
        let flip = |v: &[usize]| v.iter().map(|&c| 1 - c).collect::<Vec<_>>();
        assert!((f1(&p, &y).unwrap() - f1(&flip(&p), &flip(&y)).unwrap()).abs() < 1e-15);
    }

    fn tiny() -> (CorpusDataset, CorpusDataset, TrainConfig) {
        let (s, t) = make_synthetic_pair(4, &ShiftSpec { n_source: 24, n_target: 20, frames: 16, ..ShiftSpec::default() }).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 2,
            model: ModelConfig {
                backbone_channels: 4,
                tcn_channels: 4,
                tcn_blocks: 2,
                feature_dim: 6,
                lstm_hidden: 3,
                proj_dim: 5,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        (s, t, cfg)
    }

    #[test]
    fn scenario_reports_are_consistent() {
        let (s, t, cfg) = tiny();
        for sel in [Selection::Final, Selection::TargetWar, Selection::SourceValidation { fraction: 0.25 }] {
            let out = run_scenario(&s, &t, &cfg, sel).unwrap();
            assert!(out.report.is_consistent(1e-12));
            assert_eq!(out.report.n, 20);
            assert_eq!(out.report.scenario, "synthetic-source→synthetic-target");
            if sel == Selection::TargetWar {
                assert_eq!(out.epoch_war.len(), 2);
                let best = out.epoch_war.iter().cloned().fold(f64::MIN, f64::max);
                assert_eq!(out.report.war, best);
            }
        }
    }

    #[test]
    fn export_round_trip_and_determinism() {
        let (s, t, cfg) = tiny();
        let state = TrainState::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.emox"), dir.path().join("b.emox"));
        let dump = export_features(&state, &t, &a).unwrap();
        export_features(&state, &t, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(dump.rows.len(), t.n());
        let back = read_feature_dump(&a).unwrap();
        assert_eq!(back, dump);
        let first = PaddedBatch::gather(&t, &[0, 1, 2], 300, None);
        let enc = state.model.encode(&first.features, &first.lengths).unwrap();
        for r in 0..3 {
            for (x, y) in enc.e.row(r).iter().zip(back.emotion.row(r)) {
                assert!((x - *y as f64).abs() < 1e-6);
            }
        }
        let _ = s;
    }

    #[test]
    fn sweep_rows_are_ordered_and_written() {
        let (s, t, cfg) = tiny();
        let cfg = TrainConfig { max_epochs: 1, ..cfg };
        let sc = [Scenario { source: s, target: t }];
        let rows = run_sweep(&sc, &[Ablation::V1, Ablation::Full], &[0, 1], &cfg, Selection::Final, 2).unwrap();
        let order: Vec<_> = rows.iter().map(|r| (r.variant.clone(), r.seed)).collect();
        assert_eq!(order, [("V1".to_string(), 0), ("V1".into(), 1), ("full".into(), 0), ("full".into(), 1)]);
        let single = run_sweep(&sc, &[Ablation::V1, Ablation::Full], &[0, 1], &cfg, Selection::Final, 1).unwrap();
        assert_eq!(rows, single);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_sweep_csv(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("scenario,variant,seed,war,f1,balanced_accuracy,selected_epoch"));
        assert_eq!(text.lines().count(), 5);
    }
}
