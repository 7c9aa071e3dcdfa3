//! Command-line front end: data generation, label decomposition, training,
//! evaluation, ablation batteries and report rendering.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ablation::{run_battery, AblationReport, Variant};
use crate::blob;
use crate::error::{Error, Result};
use crate::features::{load_dataset, Dataset, FileHash};
use crate::labels::{decompose_labels, read_ndjson, write_ndjson, LabelRecord, SubLabelRecord};
use crate::metrics::{ConditionalOptions, EvalReport};
use crate::model::Model;
use crate::synth::{generate, sha256_file, split_stats, write_dataset, SynthSpec};
use crate::trainer::{
    check_compatible, dataset_dims, evaluate_opts, label_oracle, load_checkpoint, save_checkpoint,
    train, CheckpointHeader, EpochSummary, StepLog, StepRecord, TrainConfig, TrainObserver,
};
use crate::vocab::{ActionVocabulary, Family};

#[derive(Debug, Parser)]
#[command(
    name = "refdense",
    version,
    about = "Dense action detection with entity and motion sub-concepts"
)]
struct Cli {
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration (SynthSpec for gen-data, TrainConfig otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (output file for decompose-labels).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, env = "REFDENSE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData,
    /// Project action labels onto entity and motion sub-labels.
    DecomposeLabels {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Train a model on a dataset manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated switches, e.g. `colv=off,cross=off,sub=off,single=on`.
        #[arg(long, value_delimiter = ',')]
        flags: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the ground-truth labels instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',', default_value = "0,20")]
        taus: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Train the ablation matrix over several seeds and tabulate deltas.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Variants to run; defaults to all.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Render a saved evaluation or ablation JSON as a table and CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<String>,
    pub wall_time_seconds: f64,
    pub versions: Value,
}

struct Run {
    command: &'static str,
    argv: Vec<String>,
    start: Instant,
    config: Value,
    inputs: Vec<FileHash>,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &'static str, argv: Vec<String>) -> Self {
        Run {
            command,
            argv,
            start: Instant::now(),
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn finish(self, manifest_path: &Path) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            argv: self.argv,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_seconds: self.start.elapsed().as_secs_f64(),
            versions: serde_json::json!({
                "refdense": env!("CARGO_PKG_VERSION"),
                "blob_format": blob::VERSION,
                "checkpoint_format": 1,
            }),
        };
        write_json(manifest_path, &m)
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

/// Creates `dir`, refusing a non-empty existing one unless forced.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The synthetic training preset overlaid with the fields of `--config`.
fn load_train_config(path: Option<&Path>, run: &mut Run) -> Result<TrainConfig> {
    let Some(p) = path else {
        return Ok(TrainConfig::synthetic());
    };
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    let patch: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    run.input(p)?;
    TrainConfig::synthetic_with(patch)
}

fn parse_switch(value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "switch value must be on or off, got {value:?}"
        ))),
    }
}

fn apply_flags(cfg: &mut TrainConfig, flags: &[String]) -> Result<()> {
    for f in flags.iter().filter(|f| !f.is_empty()) {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("flag {f:?} must look like name=on|off")))?;
        let on = parse_switch(v)?;
        let fl = &mut cfg.flags;
        match k {
            "colv" => fl.use_colv = on,
            "sub" => {
                fl.use_sub_labels_ent = on;
                fl.use_sub_labels_mot = on;
            }
            "sub_ent" => fl.use_sub_labels_ent = on,
            "sub_mot" => fl.use_sub_labels_mot = on,
            "cross" => fl.use_cross_attention = on,
            "single" => fl.single_stream_baseline = on,
            _ => return Err(Error::Config(format!("unknown flag {k:?}"))),
        }
    }
    Ok(())
}

fn load_data(path: &Path, run: &mut Run) -> Result<Dataset> {
    run.input(path)?;
    load_dataset(path)
}

fn cmd_gen_data(cli: &Cli, run: &mut Run) -> Result<()> {
    let out = require_out(&cli.out)?;
    let mut spec = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            run.input(p)?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| Error::Schema(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate()?;
    run.config = serde_json::to_value(&spec)?;
    prepare_dir(out, cli.force)?;
    let ds = generate(&spec)?;
    let manifest = write_dataset(&ds.dataset, out)?;
    write_json(&out.join("spec.json"), &spec)?;
    let all: Vec<_> = ds
        .dataset
        .train
        .iter()
        .chain(&ds.dataset.test)
        .cloned()
        .collect();
    let stats = split_stats(&all);
    write_json(&out.join("stats.json"), &stats)?;
    for f in ["manifest.json", "spec.json", "stats.json"] {
        run.output(&out.join(f));
    }
    for f in &manifest.files {
        run.output(&out.join(&f.path));
    }
    println!(
        "generated {} sequences ({} train, {} test) with {} actions, {} entities, {} motions",
        all.len(),
        ds.dataset.train.len(),
        ds.dataset.test.len(),
        ds.dataset.vocab.num_actions(),
        ds.dataset.vocab.num_classes(Family::Entity),
        ds.dataset.vocab.num_classes(Family::Motion)
    );
    println!(
        "label density {:.4}, co-occurrence fraction {:.4}",
        stats.label_density, stats.cooccurrence_fraction
    );
    Ok(())
}

fn cmd_decompose(cli: &Cli, run: &mut Run, vocab_path: &Path, labels_path: &Path) -> Result<()> {
    let out = require_out(&cli.out)?;
    if out.exists() && !cli.force {
        return Err(Error::OutputExists(out.to_path_buf()));
    }
    run.input(vocab_path)?;
    run.input(labels_path)?;
    let vocab = ActionVocabulary::load(vocab_path)?;
    let records: Vec<LabelRecord> = read_ndjson(labels_path)?;
    if records.is_empty() {
        eprintln!(
            "warning: {} contains no label records",
            labels_path.display()
        );
    }
    let mut subs = Vec::with_capacity(records.len());
    for r in &records {
        let y = r.to_grid(vocab.num_actions())?;
        subs.push(SubLabelRecord::from_grids(
            r.id.clone(),
            &decompose_labels(&y, &vocab)?,
        ));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_ndjson(out, &subs)?;
    run.output(out);
    println!(
        "decomposed {} sequences: {} action-entity and {} action-motion classes",
        subs.len(),
        vocab.num_classes(Family::Entity),
        vocab.num_classes(Family::Motion)
    );
    Ok(())
}

/// Logs steps and epochs and keeps a rolling checkpoint of the latest epoch.
struct CliObserver {
    steps: StepLog<BufWriter<File>>,
    epochs: StepLog<BufWriter<File>>,
    last: PathBuf,
    header: CheckpointHeader,
}

impl TrainObserver for CliObserver {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.steps.on_step(record)
    }

    fn on_epoch(&mut self, summary: &EpochSummary, model: &Model) -> Result<()> {
        serde_json::to_writer(&mut self.epochs.0, summary)?;
        std::io::Write::write_all(&mut self.epochs.0, b"\n")
            .map_err(|e| Error::io(&self.last, e))?;
        let header = CheckpointHeader {
            epoch: Some(summary.epoch),
            val_map: summary.val_map,
            ..self.header.clone()
        };
        save_checkpoint(&self.last, &header, &model.params)?;
        eprintln!(
            "epoch {:>3}  loss {:.4}  val mAP {}",
            summary.epoch,
            summary.mean_total,
            summary
                .val_map
                .map_or("-".into(), |v| format!("{:.1}", 100.0 * v))
        );
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn cmd_train(cli: &Cli, run: &mut Run, data: &Path, flags: &[String]) -> Result<()> {
    let out = require_out(&cli.out)?;
    let mut cfg = load_train_config(cli.config.as_deref(), run)?;
    apply_flags(&mut cfg, flags)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    run.config = serde_json::to_value(&cfg)?;
    let ds = load_data(data, run)?;
    let model_cfg = cfg.model_config(dataset_dims(&ds));
    model_cfg.validate()?;
    prepare_dir(out, cli.force)?;
    let header = CheckpointHeader {
        model: model_cfg,
        train: Some(cfg.clone()),
        epoch: None,
        val_map: None,
    };
    let mut obs = CliObserver {
        steps: StepLog(create(&out.join("steps.ndjson"))?),
        epochs: StepLog(create(&out.join("epochs.ndjson"))?),
        last: out.join("last.rfdc"),
        header: header.clone(),
    };
    let result = train(&ds, &cfg, &mut obs);
    let flush =
        |w: &mut BufWriter<File>, p: &Path| std::io::Write::flush(w).map_err(|e| Error::io(p, e));
    flush(&mut obs.steps.0, &out.join("steps.ndjson"))?;
    flush(&mut obs.epochs.0, &out.join("epochs.ndjson"))?;
    let outcome = result?;
    let best = CheckpointHeader {
        epoch: outcome.best_epoch,
        val_map: outcome.best_val_map,
        ..header.clone()
    };
    save_checkpoint(
        &out.join("checkpoint.rfdc"),
        &best,
        &outcome.best_model.params,
    )?;
    let fin = CheckpointHeader {
        epoch: cfg.epochs.checked_sub(1),
        val_map: outcome.epochs.last().and_then(|e| e.val_map),
        ..header
    };
    save_checkpoint(&out.join("final.rfdc"), &fin, &outcome.final_model.params)?;
    if cfg.epochs == 0 {
        save_checkpoint(&out.join("last.rfdc"), &fin, &outcome.final_model.params)?;
    }
    for f in [
        "checkpoint.rfdc",
        "final.rfdc",
        "last.rfdc",
        "steps.ndjson",
        "epochs.ndjson",
    ] {
        run.output(&out.join(f));
    }
    println!(
        "trained {} steps; best validation mAP {} at epoch {}; architecture {}",
        outcome.steps.len(),
        outcome
            .best_val_map
            .map_or("-".into(), |v| format!("{:.1}", 100.0 * v)),
        outcome.best_epoch.map_or("-".into(), |e| e.to_string()),
        &outcome.best_model.architecture_hash()[..12]
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cli: &Cli,
    run: &mut Run,
    data: &Path,
    checkpoint: Option<&Path>,
    oracle: bool,
    split: &str,
    taus: &[usize],
    threshold: f64,
) -> Result<()> {
    let out = require_out(&cli.out)?;
    let ds = load_data(data, run)?;
    let model = if oracle {
        label_oracle(dataset_dims(&ds))
    } else {
        let p = checkpoint
            .ok_or_else(|| Error::Config("--checkpoint or --oracle is required".into()))?;
        run.input(p)?;
        load_checkpoint(p)?.1
    };
    check_compatible(&model, &ds)?;
    let seqs = match split {
        "test" => &ds.test,
        "train" => &ds.train,
        _ => {
            return Err(Error::Config(format!(
                "split must be train or test, got {split:?}"
            )))
        }
    };
    let opts = ConditionalOptions {
        threshold,
        ..Default::default()
    };
    run.config =
        serde_json::json!({ "split": split, "taus": taus, "options": opts, "model": model.config });
    prepare_dir(out, cli.force)?;
    let report = evaluate_opts(&model, seqs, taus, &opts, cli.threads.unwrap_or(1))?;
    write_eval_outputs(out, &report, run)?;
    print!("{}", report.to_table());
    Ok(())
}

fn write_eval_outputs(out: &Path, report: &EvalReport, run: &mut Run) -> Result<()> {
    write_json(&out.join("eval.json"), report)?;
    write_text(&out.join("eval.txt"), &report.to_table())?;
    let mut csv = String::from("class,ap\n");
    for (c, ap) in report.per_class_ap.iter().enumerate() {
        csv.push_str(&format!(
            "{c},{}\n",
            ap.map_or(String::new(), |v| format!("{v:.6}"))
        ));
    }
    write_text(&out.join("per_class_ap.csv"), &csv)?;
    for f in ["eval.json", "eval.txt", "per_class_ap.csv"] {
        run.output(&out.join(f));
    }
    Ok(())
}

fn write_ablation_outputs(out: &Path, report: &AblationReport, run: &mut Run) -> Result<()> {
    write_json(&out.join("ablation.json"), report)?;
    write_text(&out.join("ablation.txt"), &report.to_table())?;
    write_text(&out.join("ablation.csv"), &report.to_csv())?;
    for f in ["ablation.json", "ablation.txt", "ablation.csv"] {
        run.output(&out.join(f));
    }
    Ok(())
}

fn cmd_ablate(
    cli: &Cli,
    run: &mut Run,
    data: &Path,
    variants: &[String],
    seeds: u64,
) -> Result<()> {
    let out = require_out(&cli.out)?;
    let base = load_train_config(cli.config.as_deref(), run)?;
    let variants: Vec<Variant> = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants
            .iter()
            .map(|v| Variant::parse(v))
            .collect::<Result<_>>()?
    };
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let first = cli.seed.unwrap_or(base.seed);
    let seeds: Vec<u64> = (first..first + seeds).collect();
    run.config = serde_json::json!({ "base": base, "variants": variants, "seeds": seeds });
    let ds = load_data(data, run)?;
    prepare_dir(out, cli.force)?;
    let progress = |r: &crate::ablation::RunResult| match &r.error {
        None => eprintln!(
            "{:<20} seed {:<3} mAP {:>5.1}  ({:.0}s)",
            r.variant.name(),
            r.seed,
            100.0 * r.map.unwrap_or(0.0),
            r.seconds
        ),
        Some(e) => eprintln!("{:<20} seed {:<3} FAILED: {e}", r.variant.name(), r.seed),
    };
    let report = run_battery(
        &ds,
        &base,
        &variants,
        &seeds,
        cli.threads.unwrap_or(1),
        &progress,
    )?;
    write_ablation_outputs(out, &report, run)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_report(cli: &Cli, run: &mut Run, input: &Path) -> Result<()> {
    let out = require_out(&cli.out)?;
    run.input(input)?;
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", input.display())))?;
    prepare_dir(out, cli.force)?;
    if value.get("rows").is_some() {
        let report: AblationReport = serde_json::from_value(value)
            .map_err(|e| Error::Schema(format!("ablation report: {e}")))?;
        write_ablation_outputs(out, &report, run)?;
        print!("{}", report.to_table());
    } else {
        let report: EvalReport = serde_json::from_value(value)
            .map_err(|e| Error::Schema(format!("evaluation report: {e}")))?;
        write_eval_outputs(out, &report, run)?;
        print!("{}", report.to_table());
    }
    Ok(())
}

fn dispatch(cli: &Cli, argv: Vec<String>) -> Result<()> {
    let name = match &cli.command {
        Command::GenData => "gen-data",
        Command::DecomposeLabels { .. } => "decompose-labels",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::Report { .. } => "report",
    };
    let mut run = Run::new(name, argv);
    match &cli.command {
        Command::GenData => cmd_gen_data(cli, &mut run)?,
        Command::DecomposeLabels { vocab, labels } => cmd_decompose(cli, &mut run, vocab, labels)?,
        Command::Train { data, flags } => cmd_train(cli, &mut run, data, flags)?,
        Command::Eval {
            data,
            checkpoint,
            oracle,
            split,
            taus,
            threshold,
        } => cmd_eval(
            cli,
            &mut run,
            data,
            checkpoint.as_deref(),
            *oracle,
            split,
            taus,
            *threshold,
        )?,
        Command::Ablate {
            data,
            variants,
            seeds,
        } => cmd_ablate(cli, &mut run, data, variants, *seeds)?,
        Command::Report { input } => cmd_report(cli, &mut run, input)?,
    }
    let out = require_out(&cli.out)?;
    let manifest = match &cli.command {
        Command::DecomposeLabels { .. } => {
            let mut name = out.as_os_str().to_owned();
            name.push(".run_manifest.json");
            PathBuf::from(name)
        }
        _ => out.join("run_manifest.json"),
    };
    run.finish(&manifest)
}

/// Runs the command line and returns the process exit code: 0 on success, 2 for
/// input, schema and configuration errors, 3 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
