//! Deterministic compositional dense-action datasets.
//!
//! Each action is an (entity, motion) pair or a single component. Entities leave an
//! instantaneous trace in the frame features; motions leave a temporally smoothed
//! trace in the segment features. Text embeddings are the prototype vectors, so the
//! language side is aligned with the visual side by construction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob::Blob;
use crate::error::{Error, Result};
use crate::features::{
    Dataset, FileHash, Manifest, ManifestEntry, Sequence, Split, TextEmbeddingTable,
    FRAME_FEATURES, SEGMENT_FEATURES, TEXT_ENTITY, TEXT_MOTION,
};
use crate::labels::{self, DenseLabelGrid, LabelRecord};
use crate::tensor::Tensor;
use crate::vocab::{ActionSpec, ActionVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_entities: usize,
    pub n_motions: usize,
    /// Actions made of one entity and one motion.
    pub n_pair_actions: usize,
    pub n_entity_only: usize,
    pub n_motion_only: usize,
    pub timesteps: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Poisson mean of action instances per sequence.
    pub mean_instances: f64,
    pub mean_duration: f64,
    pub max_duration: usize,
    /// Target fraction of active timesteps with two or more active actions.
    pub overlap_target: f64,
    /// Allowed absolute deviation of the achieved overlap fraction.
    pub overlap_tolerance: f64,
    /// Candidate draws per sequence when steering towards the overlap target.
    pub max_retries: usize,
    pub segment_dim: usize,
    pub frame_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_entities: 12,
            n_motions: 10,
            n_pair_actions: 30,
            n_entity_only: 0,
            n_motion_only: 4,
            timesteps: 64,
            n_train: 200,
            n_test: 50,
            mean_instances: 4.0,
            mean_duration: 12.0,
            max_duration: 32,
            overlap_target: 0.4,
            overlap_tolerance: 0.02,
            max_retries: 16,
            segment_dim: 32,
            frame_dim: 32,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_actions(&self) -> usize {
        self.n_pair_actions + self.n_entity_only + self.n_motion_only
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        let (ne, nm) = (self.n_entities, self.n_motions);
        if ne == 0 || nm == 0 {
            return bad("need at least one entity and one motion".into());
        }
        if self.n_actions() > ne * nm + ne + nm {
            return bad(format!(
                "{} actions exceed the {} possible entity/motion combinations",
                self.n_actions(),
                ne * nm + ne + nm
            ));
        }
        if self.n_pair_actions > ne * nm || self.n_entity_only > ne || self.n_motion_only > nm {
            return bad("more actions of one kind than distinct combinations".into());
        }
        if self.n_pair_actions + self.n_entity_only < ne
            || self.n_pair_actions + self.n_motion_only < nm
        {
            return bad("too few actions to reference every entity and motion".into());
        }
        if self.timesteps == 0 || self.n_train == 0 {
            return bad("timesteps and n_train must be positive".into());
        }
        if self.segment_dim == 0 || self.frame_dim == 0 {
            return bad("feature dimensions must be positive".into());
        }
        if !(self.mean_instances > 0.0 && self.mean_duration >= 1.0 && self.max_duration >= 1) {
            return bad("instance statistics must be positive".into());
        }
        if !(0.0..1.0).contains(&self.overlap_target) || self.overlap_tolerance < 0.0 {
            return bad("overlap target must lie in [0, 1)".into());
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return bad("noise must be non-negative".into());
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub dataset: Dataset,
    /// n_entities × frame_dim unit rows.
    pub entity_prototypes: Tensor,
    /// n_motions × segment_dim unit rows.
    pub motion_prototypes: Tensor,
    /// Action → (entity, motion) indices, mirroring the vocabulary.
    pub components: Vec<(Option<usize>, Option<usize>)>,
}

fn unit_vectors(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.into_iter().map(|v| v / norm));
    }
    Tensor::matrix(n, dim, data).expect("non-empty prototype table")
}

fn choose_components(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<(Option<usize>, Option<usize>)> {
    let (ne, nm) = (spec.n_entities, spec.n_motions);
    let mut ent_perm: Vec<usize> = (0..ne).collect();
    let mut mot_perm: Vec<usize> = (0..nm).collect();
    ent_perm.shuffle(rng);
    mot_perm.shuffle(rng);

    let entity_only: Vec<usize> = ent_perm[..spec.n_entity_only].to_vec();
    let motion_only: Vec<usize> = mot_perm[..spec.n_motion_only].to_vec();
    let need_e: Vec<usize> = ent_perm[spec.n_entity_only..].to_vec();
    let need_m: Vec<usize> = mot_perm[spec.n_motion_only..].to_vec();

    let mut used = vec![false; ne * nm];
    let mut pairs = Vec::with_capacity(spec.n_pair_actions);
    // Cover every entity and motion not already covered by a single-component action.
    for i in 0..need_e.len().max(need_m.len()) {
        let (mut e, mut m) = match (need_e.get(i), need_m.get(i)) {
            (Some(&e), Some(&m)) => (e, m),
            (Some(&e), None) => (e, rng.gen_range(0..nm)),
            (None, Some(&m)) => (rng.gen_range(0..ne), m),
            (None, None) => unreachable!(),
        };
        while used[e * nm + m] {
            if i < need_e.len() {
                m = rng.gen_range(0..nm);
            } else {
                e = rng.gen_range(0..ne);
            }
        }
        used[e * nm + m] = true;
        pairs.push((e, m));
    }
    let mut rest: Vec<usize> = (0..ne * nm).filter(|&k| !used[k]).collect();
    rest.shuffle(rng);
    pairs.extend(
        rest.into_iter()
            .take(spec.n_pair_actions - pairs.len())
            .map(|k| (k / nm, k % nm)),
    );
    pairs.sort_unstable();

    pairs
        .into_iter()
        .map(|(e, m)| (Some(e), Some(m)))
        .chain(entity_only.into_iter().map(|e| (Some(e), None)))
        .chain(motion_only.into_iter().map(|m| (None, Some(m))))
        .collect()
}

fn entity_name(e: usize) -> String {
    format!("entity-{e:02}")
}

fn motion_name(m: usize) -> String {
    format!("motion-{m:02}")
}

fn action_name(c: (Option<usize>, Option<usize>)) -> String {
    match c {
        (Some(e), Some(m)) => format!("{} {}", motion_name(m), entity_name(e)),
        (Some(e), None) => entity_name(e),
        (None, Some(m)) => motion_name(m),
        (None, None) => unreachable!("every synthetic action has a component"),
    }
}

fn overlap_counts(y: &DenseLabelGrid) -> (usize, usize) {
    let mut active = 0;
    let mut overlapped = 0;
    for t in 0..y.timesteps() {
        let k = y.row(t).iter().filter(|b| **b).count();
        if k >= 1 {
            active += 1;
        }
        if k >= 2 {
            overlapped += 1;
        }
    }
    (active, overlapped)
}

fn sample_labels(spec: &SynthSpec, n_actions: usize, rng: &mut ChaCha8Rng) -> DenseLabelGrid {
    let t = spec.timesteps;
    let mut y = DenseLabelGrid::zeros(t, n_actions);
    let count = Poisson::new(spec.mean_instances)
        .map(|p| p.sample(rng) as usize)
        .unwrap_or(1)
        .max(1);
    let sigma = 0.5f64;
    let mu = spec.mean_duration.ln() - sigma * sigma / 2.0;
    let durations = LogNormal::new(mu, sigma).expect("valid log-normal");
    for _ in 0..count {
        let a = rng.gen_range(0..n_actions);
        let d: f64 = durations.sample(rng);
        let d = (d.round() as usize).clamp(1, spec.max_duration.min(t));
        let start = rng.gen_range(0..=t - d);
        for ti in start..start + d {
            y.set(ti, a, true);
        }
    }
    y
}

fn render_features(
    labels: &DenseLabelGrid,
    components: &[(Option<usize>, Option<usize>)],
    ent_proto: &Tensor,
    mot_proto: &Tensor,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    let t = labels.timesteps();
    let (de, dm) = (ent_proto.cols(), mot_proto.cols());
    let (ne, nm) = (ent_proto.rows(), mot_proto.rows());
    let mut frame = vec![0.0; t * de];
    let mut motion_raw = vec![0.0; t * dm];
    for ti in 0..t {
        let mut ent_on = vec![false; ne];
        let mut mot_on = vec![false; nm];
        for (a, &(e, m)) in components.iter().enumerate() {
            if labels.get(ti, a) {
                if let Some(e) = e {
                    ent_on[e] = true;
                }
                if let Some(m) = m {
                    mot_on[m] = true;
                }
            }
        }
        for (e, _) in ent_on.iter().enumerate().filter(|(_, on)| **on) {
            for (dst, src) in frame[ti * de..(ti + 1) * de]
                .iter_mut()
                .zip(ent_proto.row(e))
            {
                *dst += src;
            }
        }
        for (m, _) in mot_on.iter().enumerate().filter(|(_, on)| **on) {
            for (dst, src) in motion_raw[ti * dm..(ti + 1) * dm]
                .iter_mut()
                .zip(mot_proto.row(m))
            {
                *dst += src;
            }
        }
    }
    // Width-3 moving average over the available neighbours.
    let mut segment = vec![0.0; t * dm];
    for ti in 0..t {
        let lo = ti.saturating_sub(1);
        let hi = (ti + 1).min(t - 1);
        let n = (hi - lo + 1) as f64;
        for c in 0..dm {
            let s: f64 = (lo..=hi).map(|k| motion_raw[k * dm + c]).sum();
            segment[ti * dm + c] = s / n;
        }
    }
    if noise > 0.0 {
        for v in frame.iter_mut().chain(segment.iter_mut()) {
            let z: f64 = rng.sample(StandardNormal);
            *v += noise * z;
        }
    }
    (
        Tensor::matrix(t, dm, segment).expect("shape"),
        Tensor::matrix(t, de, frame).expect("shape"),
    )
}

/// Builds the dataset described by `spec`; a pure function of the spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let entity_prototypes = unit_vectors(spec.n_entities, spec.frame_dim, &mut rng);
    let motion_prototypes = unit_vectors(spec.n_motions, spec.segment_dim, &mut rng);
    let components = choose_components(spec, &mut rng);

    let names: Vec<String> = components.iter().map(|&c| action_name(c)).collect();
    let ent_names: Vec<String> = (0..spec.n_entities).map(entity_name).collect();
    let mot_names: Vec<String> = (0..spec.n_motions).map(motion_name).collect();
    let parts: Vec<ActionSpec<'_>> = components
        .iter()
        .zip(&names)
        .map(|(&(e, m), name)| ActionSpec {
            name,
            entity: e.map(|e| ent_names[e].as_str()),
            motion: m.map(|m| mot_names[m].as_str()),
        })
        .collect();
    let vocab = reindex_vocab(
        ActionVocabulary::from_parts(&parts)?,
        &ent_names,
        &mot_names,
    )?;

    let n_actions = components.len();
    let total = spec.n_train + spec.n_test;
    let mut sequences = Vec::with_capacity(total);
    let (mut active, mut overlapped) = (0usize, 0usize);
    for idx in 0..total {
        let mut seq_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        seq_rng.set_stream(idx as u64 + 1);
        // Keep the candidate whose own overlap fraction is closest to the target.
        let mut best: Option<(f64, DenseLabelGrid)> = None;
        for _ in 0..spec.max_retries {
            let y = sample_labels(spec, n_actions, &mut seq_rng);
            let (a, o) = overlap_counts(&y);
            let frac = if a == 0 { 0.0 } else { o as f64 / a as f64 };
            let gap = (frac - spec.overlap_target).abs();
            if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                best = Some((gap, y));
            }
        }
        let (_, y) = best.expect("max_retries >= 1");
        let (a, o) = overlap_counts(&y);
        active += a;
        overlapped += o;
        let (f, fimg) = render_features(
            &y,
            &components,
            &entity_prototypes,
            &motion_prototypes,
            spec.noise,
            &mut seq_rng,
        );
        let id = format!("seq-{idx:04}");
        sequences.push(Sequence::new(id, f, fimg, y)?);
    }
    let achieved = if active == 0 {
        0.0
    } else {
        overlapped as f64 / active as f64
    };
    if (achieved - spec.overlap_target).abs() > spec.overlap_tolerance {
        return Err(Error::Generation(format!(
            "overlap fraction {achieved:.3} misses target {:.3} ± {:.3} after {} draws per sequence",
            spec.overlap_target, spec.overlap_tolerance, spec.max_retries
        )));
    }
    let test = sequences.split_off(spec.n_train);
    let train = sequences;
    for a in 0..n_actions {
        if !train
            .iter()
            .any(|s| (0..s.len()).any(|t| s.labels.get(t, a)))
        {
            return Err(Error::Generation(format!(
                "action {:?} never occurs in the training split",
                vocab.actions()[a].name
            )));
        }
    }
    let text = TextEmbeddingTable::new(&entity_prototypes, &motion_prototypes, &vocab)?;
    Ok(SynthDataset {
        spec: spec.clone(),
        dataset: Dataset {
            vocab,
            text,
            train,
            test,
        },
        entity_prototypes,
        motion_prototypes,
        components,
    })
}

/// Re-lists entities and motions in prototype order so class index == prototype row.
fn reindex_vocab(
    v: ActionVocabulary,
    ent_names: &[String],
    mot_names: &[String],
) -> Result<ActionVocabulary> {
    #[derive(Serialize)]
    struct C<'a> {
        name: &'a str,
    }
    let mut json: serde_json::Value = serde_json::from_str(&v.to_json())?;
    json["entities"] =
        serde_json::to_value(ent_names.iter().map(|n| C { name: n }).collect::<Vec<_>>())?;
    json["motions"] =
        serde_json::to_value(mot_names.iter().map(|n| C { name: n }).collect::<Vec<_>>())?;
    ActionVocabulary::from_json(&json.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sequences: usize,
    pub timesteps: usize,
    /// Active cells over all T×C cells.
    pub label_density: f64,
    /// Fraction of active timesteps with two or more active actions.
    pub cooccurrence_fraction: f64,
    /// `histogram[k]` = timesteps with exactly k active actions.
    pub cooccurrence_histogram: Vec<usize>,
    /// Active timesteps per class.
    pub class_counts: Vec<usize>,
}

pub fn split_stats(sequences: &[Sequence]) -> SplitStats {
    let classes = sequences.first().map(|s| s.labels.classes()).unwrap_or(0);
    let mut stats = SplitStats {
        sequences: sequences.len(),
        timesteps: 0,
        label_density: 0.0,
        cooccurrence_fraction: 0.0,
        cooccurrence_histogram: vec![0; classes + 1],
        class_counts: vec![0; classes],
    };
    let (mut cells, mut on, mut active, mut overlapped) = (0usize, 0usize, 0usize, 0usize);
    for s in sequences {
        stats.timesteps += s.len();
        for t in 0..s.len() {
            let row = s.labels.row(t);
            let k = row.iter().filter(|b| **b).count();
            stats.cooccurrence_histogram[k] += 1;
            for (c, _) in row.iter().enumerate().filter(|(_, b)| **b) {
                stats.class_counts[c] += 1;
            }
            cells += classes;
            on += k;
            active += usize::from(k >= 1);
            overlapped += usize::from(k >= 2);
        }
    }
    if cells > 0 {
        stats.label_density = on as f64 / cells as f64;
    }
    if active > 0 {
        stats.cooccurrence_fraction = overlapped as f64 / active as f64;
    }
    stats
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes vocabulary, labels, per-sequence feature blobs, the text table and a hashed
/// manifest under `dir`. Returns the manifest.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(dir)?;
    mkdir(&dir.join("features"))?;

    let vocab_path = "vocabulary.json";
    std::fs::write(dir.join(vocab_path), ds.vocab.to_json())
        .map_err(|e| Error::io(dir.join(vocab_path), e))?;

    let mut text = Blob::new();
    text.push(TEXT_ENTITY, ds.text.entity.clone());
    text.push(TEXT_MOTION, ds.text.motion.clone());
    let text_path = "text_table.rfdn";
    text.write(&dir.join(text_path))?;

    let labels_path = "labels.ndjson";
    let all: Vec<(&Sequence, Split)> = ds
        .train
        .iter()
        .map(|s| (s, Split::Train))
        .chain(ds.test.iter().map(|s| (s, Split::Test)))
        .collect();
    let records: Vec<LabelRecord> = all
        .iter()
        .map(|(s, _)| LabelRecord::from_grid(s.id.clone(), &s.labels))
        .collect();
    labels::write_ndjson(&dir.join(labels_path), &records)?;

    let mut entries = Vec::with_capacity(all.len());
    for (s, split) in &all {
        let rel = format!("features/{}.rfdn", s.id);
        let mut b = Blob::new();
        b.push(SEGMENT_FEATURES, s.features.clone());
        b.push(FRAME_FEATURES, s.frame_features.clone());
        b.write(&dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            features: rel.clone(),
            frame_features: rel,
            labels: labels_path.to_string(),
            split: *split,
        });
    }

    let mut files = Vec::new();
    for p in [vocab_path, text_path, labels_path] {
        files.push(FileHash {
            path: p.to_string(),
            sha256: sha256_file(&dir.join(p))?,
        });
    }
    for e in &entries {
        files.push(FileHash {
            path: e.features.clone(),
            sha256: sha256_file(&dir.join(&e.features))?,
        });
    }
    let manifest = Manifest {
        sequences: entries,
        text_table: text_path.to_string(),
        vocabulary: vocab_path.to_string(),
        files,
    };
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}
