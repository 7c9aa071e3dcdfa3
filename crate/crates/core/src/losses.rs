//! Training objective: action BCE, per-family sub-task BCE on decomposed labels, and
//! the co-occurrence language-video contrastive term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TextEmbeddingTable;
use crate::labels::{CoOccurrenceSet, SubLabelGrids};
use crate::model::{ForwardOutput, Session};
use crate::tape::{ContrastDenominator, ContrastStats, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::Family;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Combination weights. A zero weight removes the term from the graph and the logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub action: f64,
    pub entity: f64,
    pub motion: f64,
    pub colv: f64,
    pub temperature: f64,
    /// L2-normalize projected video features before comparing with text rows.
    pub normalize: bool,
    /// `negatives-only` leaves positives out of the denominator; `all-classes` is standard InfoNCE.
    pub denominator: ContrastDenominator,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            action: 1.0,
            entity: 1.0,
            motion: 1.0,
            colv: 1.0,
            temperature: DEFAULT_TEMPERATURE,
            normalize: true,
            denominator: ContrastDenominator::NegativesOnly,
        }
    }
}

impl LossWeights {
    pub fn action_only() -> Self {
        LossWeights {
            entity: 0.0,
            motion: 0.0,
            colv: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.action, self.entity, self.motion, self.colv];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got {w:?}"
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn subtask(&self, family: Family) -> f64 {
        match family {
            Family::Entity => self.entity,
            Family::Motion => self.motion,
        }
    }
}

/// Per-term values of one loss evaluation; absent terms were not computed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_action")]
    pub action: f64,
    #[serde(rename = "L_ent_bce", default, skip_serializing_if = "Option::is_none")]
    pub ent_bce: Option<f64>,
    #[serde(rename = "L_mot_bce", default, skip_serializing_if = "Option::is_none")]
    pub mot_bce: Option<f64>,
    #[serde(
        rename = "L_ent_colv",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub ent_colv: Option<f64>,
    #[serde(
        rename = "L_mot_colv",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub mot_colv: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `w_action·L_action + w_ent·L_ent + w_mot·L_mot + w_colv·(L_ent_colv + L_mot_colv)`.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        let z = |v: Option<f64>| v.unwrap_or(0.0);
        w.action * self.action
            + w.entity * z(self.ent_bce)
            + w.motion * z(self.mot_bce)
            + w.colv * (z(self.ent_colv) + z(self.mot_colv))
    }

    /// Componentwise mean over a batch.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> Option<f64>| {
            let vals: Vec<f64> = items.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        LossBreakdown {
            action: items.iter().map(|b| b.action).sum::<f64>() / n,
            ent_bce: avg(|b| b.ent_bce),
            mot_bce: avg(|b| b.mot_bce),
            ent_colv: avg(|b| b.ent_colv),
            mot_colv: avg(|b| b.mot_colv),
            total: items.iter().map(|b| b.total).sum::<f64>() / n,
        }
    }
}

pub fn bce(tape: &mut Tape, p: Var, y: &Tensor) -> Result<Var> {
    tape.bce(p, y)
}

/// Contrastive term for one family. `z` is T×D_txt (already projected); rows are
/// L2-normalized when `normalize` is set, then compared against the unit-norm text rows.
pub fn colv(
    tape: &mut Tape,
    z: Var,
    text: &Tensor,
    positives: &[Vec<usize>],
    temperature: f64,
    normalize: bool,
    denominator: ContrastDenominator,
) -> Result<(Var, ContrastStats)> {
    let z = if normalize { tape.row_normalize(z) } else { z };
    let u = tape.constant(text.clone());
    let s = tape.matmul_nt(z, u)?;
    let s = tape.scale(s, 1.0 / temperature);
    tape.contrast(s, positives, denominator)
}

/// Targets for one crop.
#[derive(Debug, Clone)]
pub struct LossTargets<'a> {
    pub labels: &'a Tensor,
    pub sub: &'a SubLabelGrids,
    pub cooccurrence: &'a CoOccurrenceSet,
}

/// Builds the weighted objective on the session tape and reports each term.
pub fn total_loss(
    session: &mut Session<'_>,
    out: &ForwardOutput,
    targets: &LossTargets<'_>,
    text: &TextEmbeddingTable,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown, [ContrastStats; 2])> {
    weights.validate()?;
    let tape = &mut session.tape;
    let mut terms = Vec::new();
    let mut br = LossBreakdown::default();
    let mut stats = [ContrastStats::default(); 2];

    let la = tape.bce(out.action, targets.labels)?;
    br.action = tape.scalar(la);
    terms.push((la, weights.action));

    for (fi, fam) in Family::ALL.into_iter().enumerate() {
        let w = weights.subtask(fam);
        if let (true, Some(p), Some(y)) =
            (w > 0.0, out.probs(fam), targets.sub.family(fam).to_tensor())
        {
            let l = tape.bce(p, &y)?;
            let v = tape.scalar(l);
            match fam {
                Family::Entity => br.ent_bce = Some(v),
                Family::Motion => br.mot_bce = Some(v),
            }
            terms.push((l, w));
        }
        if weights.colv > 0.0 {
            let Some(z) = out.embed(fam) else { continue };
            let (l, st) = colv(
                tape,
                z,
                text.family(fam),
                targets.cooccurrence.family(fam),
                weights.temperature,
                weights.normalize,
                weights.denominator,
            )?;
            stats[fi] = st;
            let v = tape.scalar(l);
            match fam {
                Family::Entity => br.ent_colv = Some(v),
                Family::Motion => br.mot_colv = Some(v),
            }
            terms.push((l, weights.colv));
        }
    }
    let total = tape.weighted_sum(&terms);
    br.total = tape.scalar(total);
    Ok((total, br, stats))
}
