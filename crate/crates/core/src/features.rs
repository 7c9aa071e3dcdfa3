//! Precomputed encoder outputs: per-segment features, per-frame features, labels and
//! the text-embedding table, loaded from a manifest.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blob::Blob;
use crate::error::{Error, Result};
use crate::labels::{self, DenseLabelGrid, LabelRecord};
use crate::tensor::Tensor;
use crate::vocab::{ActionVocabulary, Family};

pub const SEGMENT_FEATURES: &str = "F";
pub const FRAME_FEATURES: &str = "Fimg";
pub const TEXT_ENTITY: &str = "u_ent";
pub const TEXT_MOTION: &str = "u_mot";

/// Segment features (T×D), frame features (T×𝔻) and labels (T×C) of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub features: Tensor,
    pub frame_features: Tensor,
    pub labels: DenseLabelGrid,
}

impl Sequence {
    pub fn new(
        id: impl Into<String>,
        features: Tensor,
        frame_features: Tensor,
        labels: DenseLabelGrid,
    ) -> Result<Self> {
        let id = id.into();
        let t = labels.timesteps();
        for (what, x) in [("features", &features), ("frame features", &frame_features)] {
            if x.rank() != 2 {
                return Err(Error::Alignment {
                    id,
                    detail: format!("{what} must be a matrix, got shape {:?}", x.shape()),
                });
            }
            if x.rows() != t {
                return Err(Error::Alignment {
                    id,
                    detail: format!("{what} have T={} but labels have T={t}", x.rows()),
                });
            }
            if !x.is_finite() {
                return Err(Error::Validation(format!(
                    "{what} of {id} contain non-finite values"
                )));
            }
        }
        Ok(Sequence {
            id,
            features,
            frame_features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.timesteps()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self, start: usize, len: usize) -> Sequence {
        Sequence {
            id: self.id.clone(),
            features: self.features.slice_rows(start, len),
            frame_features: self.frame_features.slice_rows(start, len),
            labels: self.labels.slice(start, len),
        }
    }
}

/// Contiguous training window of `min(t_train, T)` steps with a uniform start.
pub fn crop_for_training(seq: &Sequence, t_train: usize, rng: &mut impl Rng) -> Sequence {
    let len = t_train.max(1).min(seq.len());
    let start = rng.gen_range(0..=seq.len() - len);
    seq.window(start, len)
}

/// Text embeddings for each family, rows L2-normalized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingTable {
    pub entity: Tensor,
    pub motion: Tensor,
    pub entity_prompts: Vec<String>,
    pub motion_prompts: Vec<String>,
}

fn normalize_rows(name: &str, t: &Tensor) -> Result<Tensor> {
    let mut out = t.clone();
    let c = out.cols();
    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Schema(format!(
                "{name} row {r} cannot be normalized (norm {n})"
            )));
        }
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(out)
}

impl TextEmbeddingTable {
    pub fn new(entity: &Tensor, motion: &Tensor, vocab: &ActionVocabulary) -> Result<Self> {
        for (name, t, fam) in [
            (TEXT_ENTITY, entity, Family::Entity),
            (TEXT_MOTION, motion, Family::Motion),
        ] {
            if t.rank() != 2 || t.rows() != vocab.num_classes(fam) {
                return Err(Error::Schema(format!(
                    "{name} has shape {:?} but the vocabulary has {} {} classes",
                    t.shape(),
                    vocab.num_classes(fam),
                    fam.tag()
                )));
            }
        }
        Ok(TextEmbeddingTable {
            entity: normalize_rows(TEXT_ENTITY, entity)?,
            motion: normalize_rows(TEXT_MOTION, motion)?,
            entity_prompts: vocab.entities().iter().map(|c| c.prompt()).collect(),
            motion_prompts: vocab.motions().iter().map(|c| c.prompt()).collect(),
        })
    }

    pub fn family(&self, family: Family) -> &Tensor {
        match family {
            Family::Entity => &self.entity,
            Family::Motion => &self.motion,
        }
    }

    pub fn dim(&self, family: Family) -> usize {
        self.family(family).cols()
    }
}

pub fn load_text_table(blob: &Blob, vocab: &ActionVocabulary) -> Result<TextEmbeddingTable> {
    let ent = blob
        .require(TEXT_ENTITY)
        .map_err(|e| Error::Schema(e.to_string()))?;
    let mot = blob
        .require(TEXT_MOTION)
        .map_err(|e| Error::Schema(e.to_string()))?;
    TextEmbeddingTable::new(ent, mot, vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub features: String,
    pub frame_features: String,
    pub labels: String,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub sequences: Vec<ManifestEntry>,
    pub text_table: String,
    pub vocabulary: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<FileHash>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("manifest: {e}")))
    }
}

/// Vocabulary, text table and sequences of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: ActionVocabulary,
    pub text: TextEmbeddingTable,
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

impl Dataset {
    pub fn segment_dim(&self) -> usize {
        self.any().map(|s| s.features.cols()).unwrap_or(0)
    }

    pub fn frame_dim(&self) -> usize {
        self.any().map(|s| s.frame_features.cols()).unwrap_or(0)
    }

    fn any(&self) -> Option<&Sequence> {
        self.train.first().or(self.test.first())
    }
}

/// Loads one manifest entry; `labels` maps sequence ids to their label records.
pub fn load_sequence(
    entry: &ManifestEntry,
    base: &Path,
    labels: &[LabelRecord],
    classes: usize,
) -> Result<Sequence> {
    let resolve = |p: &str| -> PathBuf { base.join(p) };
    let fblob = Blob::read(&resolve(&entry.features))?;
    let features = fblob.require(SEGMENT_FEATURES)?.clone();
    let frame_features = if entry.frame_features == entry.features {
        fblob.require(FRAME_FEATURES)?.clone()
    } else {
        Blob::read(&resolve(&entry.frame_features))?
            .require(FRAME_FEATURES)?
            .clone()
    };
    let rec = labels
        .iter()
        .find(|r| r.id == entry.id)
        .ok_or_else(|| Error::Schema(format!("no labels for sequence {}", entry.id)))?;
    let grid = rec.to_grid(classes)?;
    Sequence::new(entry.id.clone(), features, frame_features, grid)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let vocab = ActionVocabulary::load(&base.join(&manifest.vocabulary))?;
    let text = load_text_table(&Blob::read(&base.join(&manifest.text_table))?, &vocab)?;
    let mut label_files: Vec<(String, Vec<LabelRecord>)> = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in &manifest.sequences {
        if !label_files.iter().any(|(p, _)| *p == entry.labels) {
            let recs = labels::read_ndjson(&base.join(&entry.labels))?;
            label_files.push((entry.labels.clone(), recs));
        }
        let recs = &label_files
            .iter()
            .find(|(p, _)| *p == entry.labels)
            .unwrap()
            .1;
        let seq = load_sequence(entry, base, recs, vocab.num_actions())?;
        match entry.split {
            Split::Train => train.push(seq),
            Split::Test => test.push(seq),
        }
    }
    Ok(Dataset {
        vocab,
        text,
        train,
        test,
    })
}
