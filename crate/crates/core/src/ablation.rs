//! Ablation battery: trains a matrix of configurations over several seeds and
//! tabulates test metrics with full-minus-ablated deltas.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Dataset;
use crate::model::Architecture;
use crate::trainer::{evaluate, train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    EntityOnly,
    MotionOnly,
    NoSubLabels,
    NoColv,
    NoCrossAttention,
    SingleStream,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::EntityOnly,
        Variant::MotionOnly,
        Variant::NoSubLabels,
        Variant::NoColv,
        Variant::NoCrossAttention,
        Variant::SingleStream,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::EntityOnly => "entity-only",
            Variant::MotionOnly => "motion-only",
            Variant::NoSubLabels => "no-sub-labels",
            Variant::NoColv => "no-colv",
            Variant::NoCrossAttention => "no-cross-attention",
            Variant::SingleStream => "single-stream",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }

    /// The base configuration with this variant's switches applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::EntityOnly => c.model.architecture = Architecture::EntityOnly,
            Variant::MotionOnly => c.model.architecture = Architecture::MotionOnly,
            Variant::NoSubLabels => {
                c.flags.use_sub_labels_ent = false;
                c.flags.use_sub_labels_mot = false;
            }
            Variant::NoColv => c.flags.use_colv = false,
            Variant::NoCrossAttention => c.flags.use_cross_attention = false,
            Variant::SingleStream => {
                c.flags.single_stream_baseline = true;
                c.flags.use_colv = false;
            }
        }
        c
    }
}

/// Test metrics of one trained configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub map: Option<f64>,
    pub map_ac: Option<f64>,
    pub f1_ac: Option<f64>,
    pub map_ac_20: Option<f64>,
    pub f1_ac_20: Option<f64>,
    pub architecture_hash: Option<String>,
    /// Set when training failed; the battery continues.
    pub error: Option<String>,
    pub seconds: f64,
}

pub fn run_one(ds: &Dataset, base: &TrainConfig, variant: Variant, seed: u64) -> RunResult {
    let start = Instant::now();
    let cfg = TrainConfig {
        seed,
        threads: 1,
        ..variant.apply(base)
    };
    let mut result = RunResult {
        variant,
        seed,
        map: None,
        map_ac: None,
        f1_ac: None,
        map_ac_20: None,
        f1_ac_20: None,
        architecture_hash: None,
        error: None,
        seconds: 0.0,
    };
    match train(ds, &cfg, &mut ()).and_then(|out| {
        let r = evaluate(&out.best_model, &ds.test)?;
        Ok((out.best_model.architecture_hash(), r))
    }) {
        Ok((hash, r)) => {
            result.map = r.map;
            if let Some(c) = r.conditional_at(0) {
                result.map_ac = c.map_ac;
                result.f1_ac = c.f1_ac;
            }
            if let Some(c) = r.conditional_at(20) {
                result.map_ac_20 = c.map_ac;
                result.f1_ac_20 = c.f1_ac;
            }
            result.architecture_hash = Some(hash);
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result.seconds = start.elapsed().as_secs_f64();
    result
}

/// Mean and sample standard deviation over the runs that produced a value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: Variant,
    pub map: Option<Stat>,
    pub map_ac: Option<Stat>,
    pub f1_ac: Option<Stat>,
    pub map_ac_20: Option<Stat>,
    pub f1_ac_20: Option<Stat>,
    /// Full minus this row, in metric units (not percent).
    pub delta_map: Option<f64>,
    pub delta_map_ac: Option<f64>,
    pub delta_f1_ac: Option<f64>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
    pub rows: Vec<Row>,
}

fn stat(runs: &[&RunResult], f: fn(&RunResult) -> Option<f64>) -> Option<Stat> {
    Stat::of(&runs.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
}

impl AblationReport {
    /// Orders runs by (variant, seed) and aggregates rows in variant order.
    pub fn assemble(mut runs: Vec<RunResult>, seeds: Vec<u64>) -> Self {
        let pos = |v: Variant| Variant::ALL.iter().position(|x| *x == v).unwrap();
        runs.sort_by_key(|r| (pos(r.variant), r.seed));
        let mut variants: Vec<Variant> = runs.iter().map(|r| r.variant).collect();
        variants.dedup();
        let mut rows: Vec<Row> = variants
            .iter()
            .map(|&v| {
                let rs: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v).collect();
                Row {
                    variant: v,
                    map: stat(&rs, |r| r.map),
                    map_ac: stat(&rs, |r| r.map_ac),
                    f1_ac: stat(&rs, |r| r.f1_ac),
                    map_ac_20: stat(&rs, |r| r.map_ac_20),
                    f1_ac_20: stat(&rs, |r| r.f1_ac_20),
                    delta_map: None,
                    delta_map_ac: None,
                    delta_f1_ac: None,
                    failed: rs.iter().filter(|r| r.error.is_some()).count(),
                }
            })
            .collect();
        if let Some(full) = rows.iter().find(|r| r.variant == Variant::Full).cloned() {
            let d = |a: Option<Stat>, b: Option<Stat>| Some(a?.mean - b?.mean);
            for r in rows.iter_mut().filter(|r| r.variant != Variant::Full) {
                r.delta_map = d(full.map, r.map);
                r.delta_map_ac = d(full.map_ac, r.map_ac);
                r.delta_f1_ac = d(full.f1_ac, r.f1_ac);
            }
        }
        AblationReport { seeds, runs, rows }
    }

    pub fn row(&self, v: Variant) -> Option<&Row> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Percentages with spread, and signed deltas in parentheses.
    pub fn to_table(&self) -> String {
        let cell = |s: Option<Stat>, d: Option<f64>| {
            let base = s.map_or("-".to_string(), |s| {
                format!("{:.1}±{:.1}", 100.0 * s.mean, 100.0 * s.std)
            });
            match d {
                Some(d) => format!("{base} ({:+.1})", 100.0 * d),
                None => base,
            }
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>20} {:>20} {:>20}   seeds {:?}",
            "config", "mAP", "mAP_ac(tau=0)", "F1_ac(tau=0)", self.seeds
        );
        for r in &self.rows {
            let _ = write!(
                out,
                "{:<20} {:>20} {:>20} {:>20}",
                r.variant.name(),
                cell(r.map, r.delta_map),
                cell(r.map_ac, r.delta_map_ac),
                cell(r.f1_ac, r.delta_f1_ac)
            );
            if r.failed > 0 {
                let _ = write!(out, "   [{} run(s) failed]", r.failed);
            }
            let _ = writeln!(out);
        }
        out
    }

    /// One line per run for external plotting.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from(
            "variant,seed,map,map_ac_tau0,f1_ac_tau0,map_ac_tau20,f1_ac_tau20,seconds,error\n",
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.2},{}",
                r.variant.name(),
                r.seed,
                f(r.map),
                f(r.map_ac),
                f(r.f1_ac),
                f(r.map_ac_20),
                f(r.f1_ac_20),
                r.seconds,
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        out
    }
}

/// Trains every (variant, seed) pair; with `threads > 1` runs execute concurrently,
/// each single-threaded, and the report order does not depend on completion order.
pub fn run_battery(
    ds: &Dataset,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    threads: usize,
    progress: &(dyn Fn(&RunResult) + Sync),
) -> Result<AblationReport> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run = |&(v, s): &(Variant, u64)| {
        let r = run_one(ds, base, v, s);
        progress(&r);
        r
    };
    let runs: Vec<RunResult> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };
    Ok(AblationReport::assemble(runs, seeds.to_vec()))
}
