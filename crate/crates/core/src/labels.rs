//! Dense per-timestep label grids, sub-label decomposition and co-occurrence sets.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{ActionVocabulary, Family};

/// T×C binary matrix of class activity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DenseLabelGrid {
    t: usize,
    c: usize,
    bits: Vec<bool>,
}

impl DenseLabelGrid {
    pub fn zeros(t: usize, c: usize) -> Self {
        DenseLabelGrid {
            t,
            c,
            bits: vec![false; t * c],
        }
    }

    pub fn from_active(t: usize, c: usize, active: &[[usize; 2]]) -> Result<Self> {
        let mut g = Self::zeros(t, c);
        for &[ti, ci] in active {
            if ti >= t || ci >= c {
                return Err(Error::Schema(format!(
                    "active coordinate [{ti}, {ci}] outside a {t}x{c} grid"
                )));
            }
            g.set(ti, ci, true);
        }
        Ok(g)
    }

    pub fn timesteps(&self) -> usize {
        self.t
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn get(&self, t: usize, c: usize) -> bool {
        self.bits[t * self.c + c]
    }

    pub fn set(&mut self, t: usize, c: usize, on: bool) {
        self.bits[t * self.c + c] = on;
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.bits[t * self.c..(t + 1) * self.c]
    }

    /// Sparse `[t, c]` coordinates in row-major order.
    pub fn active(&self) -> Vec<[usize; 2]> {
        (0..self.t)
            .flat_map(|t| {
                (0..self.c)
                    .filter(move |&c| self.get(t, c))
                    .map(move |c| [t, c])
            })
            .collect()
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.t == 0 || self.c == 0 {
            return None;
        }
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Some(Tensor::matrix(self.t, self.c, data).expect("shape matches"))
    }

    /// Rows `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        DenseLabelGrid {
            t: len,
            c: self.c,
            bits: self.bits[start * self.c..(start + len) * self.c].to_vec(),
        }
    }

    /// Maximal runs `[start, end)` where class `c` is active.
    pub fn intervals(&self, c: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for t in 0..self.t {
            match (self.get(t, c), start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    out.push((s, t));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, self.t));
        }
        out
    }

    /// Class permutation: column `perm[c]` of the result is column `c` of `self`.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        let mut g = Self::zeros(self.t, self.c);
        for t in 0..self.t {
            for (c, &target) in perm.iter().enumerate().take(self.c) {
                if self.get(t, c) {
                    g.set(t, target, true);
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubLabelGrids {
    pub entity: DenseLabelGrid,
    pub motion: DenseLabelGrid,
}

impl SubLabelGrids {
    pub fn family(&self, family: Family) -> &DenseLabelGrid {
        match family {
            Family::Entity => &self.entity,
            Family::Motion => &self.motion,
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        SubLabelGrids {
            entity: self.entity.slice(start, len),
            motion: self.motion.slice(start, len),
        }
    }
}

/// OR-projects action labels through the vocabulary's entity and motion mapping.
pub fn decompose_labels(y: &DenseLabelGrid, vocab: &ActionVocabulary) -> Result<SubLabelGrids> {
    if y.classes() != vocab.num_actions() {
        return Err(Error::Schema(format!(
            "label grid has {} classes but the vocabulary has {} actions",
            y.classes(),
            vocab.num_actions()
        )));
    }
    let project = |family: Family| {
        let mut out = DenseLabelGrid::zeros(y.timesteps(), vocab.num_classes(family));
        for (a, _) in vocab.actions().iter().enumerate() {
            let Some(target) = vocab.mapping(a, family) else {
                continue;
            };
            for t in 0..y.timesteps() {
                if y.get(t, a) {
                    out.set(t, target, true);
                }
            }
        }
        out
    };
    Ok(SubLabelGrids {
        entity: project(Family::Entity),
        motion: project(Family::Motion),
    })
}

/// Per-timestep active index sets of each family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoOccurrenceSet {
    pub entity: Vec<Vec<usize>>,
    pub motion: Vec<Vec<usize>>,
}

impl CoOccurrenceSet {
    pub fn family(&self, family: Family) -> &[Vec<usize>] {
        match family {
            Family::Entity => &self.entity,
            Family::Motion => &self.motion,
        }
    }
}

pub fn active_sets(grid: &DenseLabelGrid) -> Vec<Vec<usize>> {
    (0..grid.timesteps())
        .map(|t| (0..grid.classes()).filter(|&c| grid.get(t, c)).collect())
        .collect()
}

pub fn cooccurrence_sets(sub: &SubLabelGrids) -> CoOccurrenceSet {
    CoOccurrenceSet {
        entity: active_sets(&sub.entity),
        motion: active_sets(&sub.motion),
    }
}

/// One line of a label NDJSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub active: Vec<[usize; 2]>,
}

impl LabelRecord {
    pub fn from_grid(id: impl Into<String>, grid: &DenseLabelGrid) -> Self {
        LabelRecord {
            id: id.into(),
            t: grid.timesteps(),
            active: grid.active(),
        }
    }

    pub fn to_grid(&self, classes: usize) -> Result<DenseLabelGrid> {
        DenseLabelGrid::from_active(self.t, classes, &self.active)
            .map_err(|e| Error::Schema(format!("labels for {}: {e}", self.id)))
    }
}

/// One line of a sub-label NDJSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubLabelRecord {
    pub id: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub entity: Vec<[usize; 2]>,
    pub motion: Vec<[usize; 2]>,
}

impl SubLabelRecord {
    pub fn from_grids(id: impl Into<String>, sub: &SubLabelGrids) -> Self {
        SubLabelRecord {
            id: id.into(),
            t: sub.entity.timesteps(),
            entity: sub.entity.active(),
            motion: sub.motion.active(),
        }
    }
}

pub fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
