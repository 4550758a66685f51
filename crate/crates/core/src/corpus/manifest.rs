use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{features, Axis, CorpusDataset, EmotionMap, Role, Utterance, N_COEFFS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// Feature file path, relative to the manifest's directory.
    pub features: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub role: Role,
    pub axis: Axis,
    pub items: Vec<ManifestItem>,
    /// Extra spellings, `alias -> table emotion`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aliases: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Loads a manifest and every feature file it references, in manifest order.
pub fn load_manifest(path: &Path) -> Result<CorpusDataset> {
    load_manifest_as(path, None)
}

/// Like [`load_manifest`], mapping labels onto `axis` instead of the
/// manifest's own axis when given.
pub fn load_manifest_as(path: &Path, axis: Option<Axis>) -> Result<CorpusDataset> {
    let mut manifest = Manifest::read(path)?;
    if let Some(a) = axis {
        manifest.axis = a;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let mut map = EmotionMap::new(manifest.axis);
    for (alias, canonical) in &manifest.aliases {
        map.register_alias(alias, canonical)?;
    }
    let mut utterances = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let fpath = base.join(&item.features);
        let feats = features::read(&fpath)?;
        if feats.ncols() != N_COEFFS {
            return Err(Error::ShapeMismatch { path: fpath, expected: N_COEFFS, found: feats.ncols() });
        }
        let class = match (&item.label, manifest.role) {
            (Some(l), _) => Some(map.class_of(l)?),
            (None, Role::Source) => return Err(Error::MissingLabel(item.id.clone())),
            (None, Role::Target) => None,
        };
        utterances.push(Utterance {
            sample_id: item.id.clone(),
            corpus_id: manifest.name.clone(),
            features: feats,
            label: item.label.clone(),
            class,
        });
    }
    CorpusDataset::new(manifest.name, manifest.role, manifest.axis, utterances)
}

/// Writes every utterance as `<dir>/<stem>/<id>.emof` and the manifest as
/// `<dir>/<stem>.json`. Returns the manifest path.
pub fn write_manifest(dir: &Path, stem: &str, ds: &CorpusDataset, with_labels: bool) -> Result<PathBuf> {
    write_manifest_with(dir, stem, ds, with_labels, &BTreeMap::new())
}

/// [`write_manifest`] that also records the label aliases needed to read it back.
pub fn write_manifest_with(
    dir: &Path,
    stem: &str,
    ds: &CorpusDataset,
    with_labels: bool,
    aliases: &BTreeMap<String, String>,
) -> Result<PathBuf> {
    let feat_dir = dir.join(stem);
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut items = Vec::with_capacity(ds.n());
    for u in &ds.utterances {
        let rel = format!("{stem}/{}.emof", u.sample_id);
        features::write(&dir.join(&rel), &u.features)?;
        items.push(ManifestItem {
            id: u.sample_id.clone(),
            features: rel,
            label: if with_labels { u.label.clone() } else { None },
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        role: ds.role,
        axis: ds.axis,
        items,
        aliases: aliases.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
