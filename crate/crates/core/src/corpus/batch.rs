use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusDataset, FeatureSource};
use crate::error::{Error, Result};

/// Zero-padded `[B, T, D]` features with the valid length of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub features: Array3<f64>,
    pub lengths: Vec<usize>,
    pub indices: Vec<usize>,
}

impl PaddedBatch {
    /// Pads to the longest row (truncating at `max_frames`), or to exactly
    /// `pad_to` frames when given.
    pub fn gather<S: FeatureSource + ?Sized>(
        src: &S,
        indices: &[usize],
        max_frames: usize,
        pad_to: Option<usize>,
    ) -> Self {
        let lengths: Vec<usize> = indices.iter().map(|&i| src.features(i).nrows().min(max_frames)).collect();
        let t = pad_to.unwrap_or_else(|| lengths.iter().copied().max().unwrap_or(1)).max(1);
        let d = indices.first().map(|&i| src.features(i).ncols()).unwrap_or(0);
        let mut features = Array3::<f64>::zeros((indices.len(), t, d));
        for (row, &i) in indices.iter().enumerate() {
            let f = src.features(i);
            let len = lengths[row].min(t);
            features
                .slice_mut(s![row, ..len, ..])
                .assign(&f.slice(s![..len, ..]).mapv(f64::from));
        }
        Self { features, lengths, indices: indices.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPair {
    pub source: PaddedBatch,
    pub source_labels: Vec<usize>,
    pub target: PaddedBatch,
    pub epoch: u64,
    /// Position within the epoch.
    pub index: usize,
}

/// `min(⌈n_s / B⌉, ⌈n_t / B⌉)`.
pub fn batches_per_epoch(n_source: usize, n_target: usize, batch_size: usize) -> usize {
    n_source.div_ceil(batch_size).min(n_target.div_ceil(batch_size))
}

/// Shuffled source and target orders for one epoch.
pub fn epoch_order(n_source: usize, n_target: usize, seed: u64, epoch: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut src: Vec<usize> = (0..n_source).collect();
    let mut tgt: Vec<usize> = (0..n_target).collect();
    src.shuffle(&mut rng);
    tgt.shuffle(&mut rng);
    (src, tgt)
}

/// Mini-batches of one epoch, each with a source slice and a target slice.
pub fn batch_iter<'a, T: FeatureSource + ?Sized>(
    source: &'a CorpusDataset,
    target: &'a T,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    max_frames: usize,
) -> Result<impl Iterator<Item = BatchPair> + 'a> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig(format!("batch size must be at least 2, got {batch_size}")));
    }
    if source.n() == 0 {
        return Err(Error::EmptyDataset(source.name.clone()));
    }
    if target.is_empty() {
        return Err(Error::EmptyDataset("target".into()));
    }
    let labels = source.labels()?;
    let (src_order, tgt_order) = epoch_order(source.n(), target.len(), seed, epoch);
    let m = batches_per_epoch(source.n(), target.len(), batch_size);
    Ok((0..m).map(move |k| {
        let s_idx = &src_order[k * batch_size..((k + 1) * batch_size).min(src_order.len())];
        let t_idx = &tgt_order[k * batch_size..((k + 1) * batch_size).min(tgt_order.len())];
        BatchPair {
            source: PaddedBatch::gather(source, s_idx, max_frames, None),
            source_labels: s_idx.iter().map(|&i| labels[i]).collect(),
            target: PaddedBatch::gather(target, t_idx, max_frames, None),
            epoch,
            index: k,
        }
    }))
}
