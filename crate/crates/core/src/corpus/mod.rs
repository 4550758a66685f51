//! Corpora, binary emotion mapping, feature files, manifests, batching and
//! synthetic corpus pairs.

mod batch;
mod emotion;
pub mod features;
mod manifest;
pub mod synthetic;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{batch_iter, batches_per_epoch, epoch_order, BatchPair, PaddedBatch};
pub use emotion::{map_emotion, Axis, EmotionMap, TABLE_EMOTIONS};
pub use manifest::{load_manifest, load_manifest_as, write_manifest, write_manifest_with, Manifest, ManifestItem};
pub use synthetic::{make_synthetic_pair, ShiftSpec};

/// Number of cepstral coefficients per frame.
pub const N_COEFFS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub sample_id: String,
    pub corpus_id: String,
    /// `T × D` frames.
    pub features: Array2<f32>,
    /// Categorical emotion as annotated.
    pub label: Option<String>,
    /// Binary class of `label` on the dataset's axis.
    pub class: Option<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() == 0 {
            return Err(Error::InvalidInput(format!("utterance `{}` has no frames", self.sample_id)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of `{}`", self.sample_id)));
        }
        Ok(())
    }
}

/// Anything batches can be drawn from.
pub trait FeatureSource {
    fn len(&self) -> usize;
    fn features(&self, i: usize) -> &Array2<f32>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusDataset {
    pub name: String,
    pub role: Role,
    pub axis: Axis,
    pub utterances: Vec<Utterance>,
}

impl CorpusDataset {
    /// Validates role/label consistency and feature sanity.
    pub fn new(name: impl Into<String>, role: Role, axis: Axis, utterances: Vec<Utterance>) -> Result<Self> {
        let name = name.into();
        if utterances.is_empty() {
            return Err(Error::EmptyDataset(name));
        }
        for u in &utterances {
            u.validate()?;
            if role == Role::Source && u.class.is_none() {
                return Err(Error::MissingLabel(u.sample_id.clone()));
            }
        }
        Ok(Self { name, role, axis, utterances })
    }

    pub fn n(&self) -> usize {
        self.utterances.len()
    }

    /// Binary classes; `None` for unlabeled rows.
    pub fn classes(&self) -> Vec<Option<usize>> {
        self.utterances.iter().map(|u| u.class).collect()
    }

    /// Classes of a fully labeled dataset.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.utterances
            .iter()
            .map(|u| u.class.ok_or_else(|| Error::MissingLabel(u.sample_id.clone())))
            .collect()
    }

    /// Label-free copy handed to training for the target side.
    pub fn unlabeled(&self) -> UnlabeledCorpus {
        UnlabeledCorpus {
            name: self.name.clone(),
            items: self
                .utterances
                .iter()
                .map(|u| UnlabeledItem { sample_id: u.sample_id.clone(), features: u.features.clone() })
                .collect(),
        }
    }
}

impl FeatureSource for CorpusDataset {
    fn len(&self) -> usize {
        self.utterances.len()
    }
    fn features(&self, i: usize) -> &Array2<f32> {
        &self.utterances[i].features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledItem {
    pub sample_id: String,
    pub features: Array2<f32>,
}

/// Target corpus stripped of every annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledCorpus {
    pub name: String,
    pub items: Vec<UnlabeledItem>,
}

impl FeatureSource for UnlabeledCorpus {
    fn len(&self) -> usize {
        self.items.len()
    }
    fn features(&self, i: usize) -> &Array2<f32> {
        &self.items[i].features
    }
}
