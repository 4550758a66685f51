mod common;

use common::small_model_config;
use crosscorpus::corpus::{load_manifest, make_synthetic_pair, write_manifest, ShiftSpec};
use crosscorpus::trainer::{
    checkpoint_path, fit, fit_from, load_checkpoint, save_checkpoint, Ablation, FitHooks, StepRecord, TrainConfig,
    TrainState,
};

fn spec() -> ShiftSpec {
    ShiftSpec { n_source: 30, n_target: 26, frames: 16, ..ShiftSpec::default() }
}

fn cfg(ablation: Ablation) -> TrainConfig {
    TrainConfig { batch_size: 8, max_epochs: 3, seed: 7, ablation, model: small_model_config(40), ..TrainConfig::default() }
}

fn jsonl(records: &[StepRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
}

#[test]
fn identical_runs_write_identical_logs() {
    let (s, t) = make_synthetic_pair(3, &spec()).unwrap();
    for ab in Ablation::ALL {
        let c = cfg(ab);
        let (a, la) = fit(&s, &t.unlabeled(), &c).unwrap();
        let (b, lb) = fit(&s, &t.unlabeled(), &c).unwrap();
        assert_eq!(jsonl(&la), jsonl(&lb), "{ab}");
        assert_eq!(a, b, "{ab}");
        assert!(la.iter().all(|r| r.report.non_finite_term().is_none()));
    }
}

#[test]
fn resuming_from_any_checkpoint_is_bit_exact() {
    let (s, t) = make_synthetic_pair(4, &spec()).unwrap();
    let t = t.unlabeled();
    let c = TrainConfig { checkpoint_every: Some(1), ..cfg(Ablation::Full) };
    let dir = tempfile::tempdir().unwrap();
    let hooks = FitHooks { checkpoint_dir: Some(dir.path().to_path_buf()), ..FitHooks::default() };
    let (full, log) = fit_from(TrainState::new(&c).unwrap(), &s, &t, &c, hooks).unwrap();
    assert_eq!(log.len(), 12);
    // mid-epoch (2, 5) and epoch boundaries (4, 8)
    for k in [2u64, 4, 5, 8] {
        let (state, saved) = load_checkpoint(&checkpoint_path(dir.path(), k)).unwrap();
        assert_eq!(saved, c);
        assert_eq!(state.step, k);
        let (resumed, tail) = fit_from(state, &s, &t, &c, FitHooks::default()).unwrap();
        assert_eq!(resumed, full, "resume after step {k}");
        assert_eq!(jsonl(&tail), jsonl(&log[k as usize..]), "resume after step {k}");
    }
}

#[test]
fn stopping_and_resuming_matches_one_run() {
    let (s, t) = make_synthetic_pair(5, &spec()).unwrap();
    let t = t.unlabeled();
    let c = cfg(Ablation::Full);
    let (full, log) = fit(&s, &t, &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let (half, head) = fit(&s, &t, &TrainConfig { max_steps: Some(4), ..c.clone() }).unwrap();
    save_checkpoint(&half, &c, &path).unwrap();
    let (state, _) = load_checkpoint(&path).unwrap();
    assert_eq!(state, half);
    let (end, tail) = fit_from(state, &s, &t, &c, FitHooks::default()).unwrap();
    assert_eq!(end, full);
    assert_eq!(jsonl(&head) + &jsonl(&tail), jsonl(&log));
}

#[test]
fn synthetic_generation_is_a_pure_function() {
    let a = make_synthetic_pair(9, &spec()).unwrap();
    let b = make_synthetic_pair(9, &spec()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, make_synthetic_pair(10, &spec()).unwrap());
}

#[test]
fn manifest_loading_preserves_order_and_is_idempotent() {
    let (s, _) = make_synthetic_pair(2, &spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(dir.path(), "s", &s, true).unwrap();
    let once = load_manifest(&path).unwrap();
    let twice = load_manifest(&path).unwrap();
    assert_eq!(once, twice);
    assert_eq!(once, s);
    let ids: Vec<_> = once.utterances.iter().map(|u| u.sample_id.clone()).collect();
    let want: Vec<_> = s.utterances.iter().map(|u| u.sample_id.clone()).collect();
    assert_eq!(ids, want);
}
