//! Per-frame mAP and the action-conditional metrics over temporal windows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::DenseLabelGrid;
use crate::tensor::Tensor;

/// Interpolation-free AP: mean precision at the rank of each positive after a stable
/// descending sort (ties keep input order). `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(
        scores.len(),
        labels.len(),
        "scores and labels differ in length"
    );
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(acc / positives as f64)
}

/// One sequence's scores (T×C) with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Tensor,
    pub labels: DenseLabelGrid,
}

impl Prediction {
    pub fn new(scores: Tensor, labels: DenseLabelGrid) -> Result<Self> {
        if scores.shape() != [labels.timesteps(), labels.classes()] {
            return Err(Error::dim(
                "prediction",
                scores.shape(),
                &[labels.timesteps(), labels.classes()],
            ));
        }
        Ok(Prediction { scores, labels })
    }
}

fn classes_of(preds: &[Prediction]) -> Result<usize> {
    let c = preds.first().map_or(0, |p| p.labels.classes());
    for p in preds {
        if p.labels.classes() != c || p.scores.shape() != [p.labels.timesteps(), c] {
            return Err(Error::dim(
                "metrics",
                p.scores.shape(),
                &[p.labels.timesteps(), c],
            ));
        }
    }
    Ok(c)
}

/// Per-class AP pooled over every frame of every sequence, and their mean over classes
/// with at least one positive frame.
pub fn per_frame_map(preds: &[Prediction]) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let c = classes_of(preds)?;
    let mut aps = Vec::with_capacity(c);
    for class in 0..c {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for p in preds {
            for t in 0..p.labels.timesteps() {
                s.push(p.scores.at(t, class));
                l.push(p.labels.get(t, class));
            }
        }
        aps.push(average_precision(&s, &l));
    }
    let valid: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
    Ok((aps, map))
}

/// Timesteps within `tau` of an occurrence of class `j`, ascending.
pub fn conditional_timesteps(y: &DenseLabelGrid, j: usize, tau: usize) -> Vec<usize> {
    let t = y.timesteps();
    let mut mark = vec![false; t];
    for s in 0..t {
        if y.get(s, j) {
            let lo = s.saturating_sub(tau);
            let hi = (s + tau).min(t - 1);
            mark[lo..=hi].iter_mut().for_each(|m| *m = true);
        }
    }
    (0..t).filter(|&s| mark[s]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionalOptions {
    pub threshold: f64,
    /// Also score i = j pairs.
    pub include_self_pairs: bool,
    /// Weight each pair by the size of its conditioning set instead of uniformly.
    pub weight_by_support: bool,
}

impl Default for ConditionalOptions {
    fn default() -> Self {
        ConditionalOptions {
            threshold: 0.5,
            include_self_pairs: false,
            weight_by_support: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMetrics {
    pub tau: usize,
    pub map_ac: Option<f64>,
    pub f1_ac: Option<f64>,
    pub p_ac: Option<f64>,
    pub r_ac: Option<f64>,
    pub pairs: usize,
    pub skipped_pairs: usize,
}

impl ConditionalMetrics {
    pub fn is_empty(&self) -> bool {
        self.pairs == 0
    }
}

/// Pairwise metrics of class `i` restricted to frames near occurrences of class `j`;
/// each aggregate is a mean over the qualifying ordered pairs.
pub fn action_conditional_suite(
    preds: &[Prediction],
    tau: usize,
    opts: &ConditionalOptions,
) -> Result<ConditionalMetrics> {
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {}",
            opts.threshold
        )));
    }
    let c = classes_of(preds)?;
    let windows: Vec<Vec<Vec<usize>>> = preds
        .iter()
        .map(|p| {
            (0..c)
                .map(|j| conditional_timesteps(&p.labels, j, tau))
                .collect()
        })
        .collect();
    let (mut sum_ap, mut sum_f1, mut sum_p, mut sum_r, mut sum_w) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut pairs = 0;
    let mut skipped = 0;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..c {
        for j in 0..c {
            if i == j && !opts.include_self_pairs {
                continue;
            }
            scores.clear();
            labels.clear();
            for (p, w) in preds.iter().zip(&windows) {
                for &t in &w[j] {
                    scores.push(p.scores.at(t, i));
                    labels.push(p.labels.get(t, i));
                }
            }
            let Some(ap) = average_precision(&scores, &labels) else {
                skipped += 1;
                continue;
            };
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (&s, &l) in scores.iter().zip(&labels) {
                match (s >= opts.threshold, l) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let prec = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let rec = tp as f64 / (tp + fn_) as f64;
            let f1 = if prec + rec == 0.0 {
                0.0
            } else {
                2.0 * prec * rec / (prec + rec)
            };
            let w = if opts.weight_by_support {
                scores.len() as f64
            } else {
                1.0
            };
            sum_ap += w * ap;
            sum_f1 += w * f1;
            sum_p += w * prec;
            sum_r += w * rec;
            sum_w += w;
            pairs += 1;
        }
    }
    let mean = |s: f64| (pairs > 0).then(|| s / sum_w);
    Ok(ConditionalMetrics {
        tau,
        map_ac: mean(sum_ap),
        f1_ac: mean(sum_f1),
        p_ac: mean(sum_p),
        r_ac: mean(sum_r),
        pairs,
        skipped_pairs: skipped,
    })
}

pub const DEFAULT_TAUS: [usize; 2] = [0, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub skipped_classes: usize,
    pub conditional: Vec<ConditionalMetrics>,
}

impl EvalReport {
    pub fn compute(
        preds: &[Prediction],
        taus: &[usize],
        opts: &ConditionalOptions,
    ) -> Result<Self> {
        let (per_class_ap, map) = per_frame_map(preds)?;
        let skipped_classes = per_class_ap.iter().filter(|a| a.is_none()).count();
        let conditional = taus
            .iter()
            .map(|&tau| action_conditional_suite(preds, tau, opts))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            per_class_ap,
            map,
            skipped_classes,
            conditional,
        })
    }

    pub fn conditional_at(&self, tau: usize) -> Option<&ConditionalMetrics> {
        self.conditional.iter().find(|c| c.tau == tau)
    }

    /// Aligned text layout with percentages to one decimal.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut s = String::new();
        let scored = self.per_class_ap.len() - self.skipped_classes;
        let _ = writeln!(
            s,
            "{:<10} {:>8}   ({} classes scored, {} skipped)",
            "metric", "value", scored, self.skipped_classes
        );
        let _ = writeln!(s, "{:<10} {:>8}", "mAP", pct(self.map));
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<6} {:>8} {:>8} {:>8} {:>8} {:>7}",
            "tau", "mAP_ac", "F1_ac", "P_ac", "R_ac", "pairs"
        );
        for c in &self.conditional {
            let _ = writeln!(
                s,
                "{:<6} {:>8} {:>8} {:>8} {:>8} {:>7}",
                c.tau,
                pct(c.map_ac),
                pct(c.f1_ac),
                pct(c.p_ac),
                pct(c.r_ac),
                c.pairs
            );
        }
        s
    }
}
