//! `egrnet`: synthesize datasets, render EGRs, train, evaluate, sweep,
//! ablate, check gradients and inspect models.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad usage or input.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use egrnet::checks::{run_suite, Scope};
use egrnet::dataset::{generate_synthetic, import_csv, write_dataset, Dataset, SyntheticFaultSpec};
use egrnet::export::{write_matrix_csv, write_pgm};
use egrnet::harness::{
    configure_threads, evaluate, measure_inference, run_ablation, run_snr_sweep, run_trial,
    separability_report, write_sweep_outputs, ExperimentConfig, ExperimentData, NoiseSetting,
    SnrSummary, SweepOutcome, SweepSummary,
};
use egrnet::net::{Architecture, EgrNetModel, NetworkVariant};
use egrnet::signal::{
    add_noise_snr, build_rsm, gram, normalize_sample_with, stripe_profile, suggest_dims, NoiseSpec,
    Normalization,
};
use egrnet::tensor::GradCheckOptions;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Input(#[from] egrnet::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Input(_) | CliError::Usage(_) => 2,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "egrnet",
    version,
    about = "Embedding Gramian Representation and EGR-Net"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fault dataset from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one sample's RSM and/or EGR as PGM images and CSV matrices.
    Convert(ConvertArgs),
    /// Build a dataset from CSV files, one class per file.
    Import {
        /// `sample_rate_hz,<rate>` header, then one comma-separated sample per line.
        #[arg(long = "csv", required = true, num_args = 1..)]
        csv: Vec<PathBuf>,
        /// Class names, in the order of --csv; defaults to the file stems.
        #[arg(long, value_delimiter = ',')]
        names: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model (trial 0, first SNR) and save it with its results.
    Train(ExperimentArgs),
    /// Re-evaluate a saved model on the test split of its experiment.
    Eval {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trial whose noise draw to evaluate under.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Repeated trials at every configured SNR.
    Sweep(ExperimentArgs),
    /// The sweep for every network variant on identical data and seeds.
    Ablate(ExperimentArgs),
    /// Central-difference gradient checks; exit 1 if any fails.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Writes gradcheck.json here when given.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scale every analytic gradient by 1.01 (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Silhouette and 1-NN accuracy of flattened RSMs versus EGRs.
    Separability {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Samples per class to use (all when absent).
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Describe a dataset, a checkpoint or a canonical architecture.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Layer,
    Block,
    Net,
    All,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Emit {
    Rsm,
    Egr,
    Both,
}

#[derive(Args)]
struct ConvertArgs {
    /// Manifest file or dataset directory.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    class: usize,
    /// Index of the sample within its class.
    #[arg(long)]
    index: usize,
    #[arg(long, value_enum, default_value = "both")]
    emit: Emit,
    /// Add white Gaussian noise at this SNR first.
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Normalize the sample (mean removal, variance division) before reshaping.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON); flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    variant: Option<NetworkVariant>,
    /// Comma-separated SNR levels in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop a trial once an epoch's training accuracy reaches this percent.
    #[arg(long)]
    stop_at: Option<f64>,
    /// Leave the seconds column of results.csv empty.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    parallel_trials: bool,
}

impl ExperimentArgs {
    fn config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.manifest) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(m)) => ExperimentConfig::new(m),
            (None, None) => {
                return Err(CliError::Usage(
                    "either --config or --manifest is required".into(),
                ))
            }
        };
        if let Some(m) = &self.manifest {
            cfg.manifest = m.clone();
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(s) = &self.snr {
            cfg.snr_db = s.clone();
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.initial_lr = lr;
        }
        if let Some(s) = self.seed {
            cfg.rng_seed = s;
        }
        if self.stop_at.is_some() {
            cfg.stop_at_train_accuracy = self.stop_at;
        }
        if self.no_timing {
            cfg.record_timing = false;
        }
        if self.parallel_trials {
            cfg.parallel_trials = true;
        }
        cfg.validate()?;
        // absolute, so a config.json saved under --out still resolves
        if let Ok(abs) = fs::canonicalize(&cfg.manifest) {
            cfg.manifest = abs;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct InspectArgs {
    /// A dataset manifest or directory.
    #[arg(long, conflicts_with_all = ["checkpoint", "variant"])]
    manifest: Option<PathBuf>,
    /// A saved model.
    #[arg(long, conflicts_with = "variant")]
    checkpoint: Option<PathBuf>,
    /// A freshly initialized canonical network of this variant.
    #[arg(long)]
    variant: Option<NetworkVariant>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    /// Time this many single-sample inferences (model inspection only).
    #[arg(long)]
    latency_runs: Option<usize>,
    /// Writes inspect.json here when given.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn create_out(out: &Path) -> CliResult {
    fs::create_dir_all(out).map_err(|e| egrnet::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| egrnet::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(path, &(text + "\n"))
}

fn cmd_synth(spec: &Path, out: &Path) -> CliResult {
    let text = fs::read_to_string(spec).map_err(|e| egrnet::Error::Io {
        path: spec.to_path_buf(),
        source: e,
    })?;
    let spec: SyntheticFaultSpec =
        serde_json::from_str(&text).map_err(|e| egrnet::Error::Json {
            path: spec.to_path_buf(),
            source: e,
        })?;
    spec.validate()?;
    let manifest = generate_synthetic(&spec, out)?;
    println!(
        "{} classes, {} samples each of length {} at {} Hz",
        manifest.num_classes(),
        spec.samples_per_class,
        manifest.sample_length,
        manifest.sample_rate_hz
    );
    for c in &manifest.classes {
        println!("  {} {} -> {}", c.label_id, c.name, c.file_path);
    }
    Ok(())
}

fn cmd_convert(a: &ConvertArgs) -> CliResult {
    let ds = Dataset::open(&a.manifest)?;
    let samples = ds.samples(a.class)?;
    let Some(sample) = samples.get(a.index) else {
        return Err(CliError::Usage(format!(
            "sample {} out of range: class {} has {} samples",
            a.index,
            a.class,
            samples.len()
        )));
    };
    let mut sample = sample.clone();
    if let Some(snr) = a.snr {
        sample = add_noise_snr(&sample, NoiseSpec::new(snr, a.noise_seed))?;
    }
    if a.normalize {
        sample = normalize_sample_with(&sample, Normalization::Variance)?;
    }
    let rsm = build_rsm(&sample, suggest_dims(sample.len())?)?;
    create_out(&a.out)?;
    if a.emit != Emit::Egr {
        write_pgm(&a.out.join("rsm.pgm"), rsm.matrix())?;
        write_matrix_csv(&a.out.join("rsm.csv"), rsm.matrix())?;
    }
    if a.emit != Emit::Rsm {
        let egr = gram(&rsm)?;
        write_pgm(&a.out.join("egr.pgm"), egr.matrix())?;
        write_matrix_csv(&a.out.join("egr.csv"), egr.matrix())?;
        let profile = stripe_profile(&egr);
        let mut csv = String::from("lag,mean\n");
        for (k, v) in profile.lag_means.iter().enumerate() {
            writeln!(csv, "{k},{v:e}").unwrap();
        }
        write_text(&a.out.join("stripe_profile.csv"), &csv)?;
        if let Some(lag) = profile.dominant_lag(egr.size() / 2) {
            println!("dominant stripe lag: {lag}");
        }
    }
    Ok(())
}

fn cmd_import(csv: &[PathBuf], names: &[String], out: &Path) -> CliResult {
    if !names.is_empty() && names.len() != csv.len() {
        return Err(CliError::Usage(format!(
            "{} names for {} CSV files",
            names.len(),
            csv.len()
        )));
    }
    let mut classes = Vec::with_capacity(csv.len());
    let mut rate = None;
    for (i, path) in csv.iter().enumerate() {
        let signals = import_csv(path)?;
        let r = signals.first().map(|s| s.sample_rate_hz()).unwrap_or(0.0);
        match rate {
            None => rate = Some(r),
            Some(prev) if prev != r => {
                return Err(CliError::Usage(format!(
                    "{} is sampled at {r} Hz, earlier files at {prev} Hz",
                    path.display()
                )))
            }
            Some(_) => {}
        }
        let name = names.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("class_{i}"))
        });
        classes.push((name, signals));
    }
    let manifest = write_dataset(out, &classes, rate.unwrap_or(0.0))?;
    println!(
        "{} classes of length {} written to {}",
        manifest.num_classes(),
        manifest.sample_length,
        out.display()
    );
    Ok(())
}

fn cmd_train(exp: &ExperimentArgs) -> CliResult {
    let cfg = exp.config()?;
    let data = ExperimentData::load(&cfg)?;
    let snr = cfg.snr_db[0];
    let (model, result) = run_trial(&cfg, &data, snr, 0, &progress)?;
    create_out(&exp.out)?;
    model.save(&exp.out.join("model.bin"))?;
    write_json(&exp.out.join("config.json"), &cfg)?;
    let acc = result.test_accuracy_pct;
    let outcome = SweepOutcome {
        summary: SweepSummary {
            variant: cfg.variant,
            parameter_count: model.parameter_count(),
            snr: vec![SnrSummary {
                snr_db: snr,
                trials: 1,
                accuracies_pct: vec![acc],
                mean_accuracy_pct: acc,
                std_accuracy_pct: 0.0,
            }],
        },
        trials: vec![result],
    };
    write_sweep_outputs(&exp.out, &outcome)?;
    println!("test accuracy {acc:.2}% at {snr} dB");
    Ok(())
}

fn cmd_eval(exp: &ExperimentArgs, checkpoint: &Path, trial: usize) -> CliResult {
    let cfg = exp.config()?;
    let model = EgrNetModel::load(checkpoint)?;
    let data = ExperimentData::load(&cfg)?;
    let snr = cfg.snr_db[0];
    let noise = NoiseSetting::test(snr, cfg.trial_seed(trial), cfg.noise_order);
    let eval = evaluate(&model, &data.test, Some(noise), cfg.batch_size)?;
    create_out(&exp.out)?;
    let mut csv = String::from("actual,predicted,count\n");
    for (a, row) in eval.confusion.counts.iter().enumerate() {
        for (p, n) in row.iter().enumerate() {
            writeln!(csv, "{a},{p},{n}").unwrap();
        }
    }
    write_text(&exp.out.join("confusion.csv"), &csv)?;
    write_json(
        &exp.out.join("eval.json"),
        &json!({
            "checkpoint": checkpoint,
            "variant": model.variant(),
            "snr_db": snr,
            "trial": trial,
            "samples": eval.confusion.total(),
            "accuracy_pct": eval.accuracy_pct(),
            "confusion": eval.confusion.counts,
        }),
    )?;
    println!("test accuracy {:.2}% at {snr} dB", eval.accuracy_pct());
    Ok(())
}

fn cmd_sweep(exp: &ExperimentArgs) -> CliResult {
    let cfg = exp.config()?;
    create_out(&exp.out)?;
    write_json(&exp.out.join("config.json"), &cfg)?;
    let outcome = run_snr_sweep(&cfg, Some(&exp.out), &progress)?;
    println!(
        "{} ({} parameters)",
        cfg.variant, outcome.summary.parameter_count
    );
    for s in &outcome.summary.snr {
        println!(
            "  {:>6} dB  {:.2} ± {:.2}%  ({} trials)",
            s.snr_db, s.mean_accuracy_pct, s.std_accuracy_pct, s.trials
        );
    }
    Ok(())
}

fn cmd_ablate(exp: &ExperimentArgs) -> CliResult {
    let cfg = exp.config()?;
    create_out(&exp.out)?;
    write_json(&exp.out.join("config.json"), &cfg)?;
    let rows = run_ablation(&cfg, Some(&exp.out), &progress)?;
    for r in rows {
        println!(
            "  {:<14} {:>6} dB  {:.2} ± {:.2}%  {} parameters",
            r.variant.name(),
            r.snr_db,
            r.mean_accuracy_pct,
            r.std_accuracy_pct,
            r.parameter_count
        );
    }
    Ok(())
}

fn cmd_gradcheck(scope: ScopeArg, tolerance: f64, out: Option<&Path>, fault: bool) -> CliResult {
    let scope = match scope {
        ScopeArg::Layer => Scope::Layer,
        ScopeArg::Block => Scope::Block,
        ScopeArg::Net => Scope::Net,
        ScopeArg::All => Scope::All,
    };
    let opts = GradCheckOptions {
        fault: fault.then_some(1.01),
        ..GradCheckOptions::default().with_tolerance(tolerance)
    };
    let checks = run_suite(scope, &opts)?;
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{verdict:<4} {:<34} max rel {:.2e}",
            c.name,
            c.report.max_rel_error()
        );
        for t in &c.report.tensors {
            println!(
                "       {:<30} {:.2e}  ({} checked, {} skipped)",
                t.name, t.max_rel_error, t.checked, t.skipped
            );
        }
        failed += !c.passed() as usize;
    }
    if let Some(out) = out {
        create_out(out)?;
        let report: Vec<_> = checks
            .iter()
            .map(|c| {
                json!({
                    "name": c.name,
                    "passed": c.passed(),
                    "max_rel_error": c.report.max_rel_error(),
                    "tensors": c.report.tensors.iter().map(|t| json!({
                        "name": t.name,
                        "checked": t.checked,
                        "skipped": t.skipped,
                        "max_rel_error": t.max_rel_error,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        write_json(
            &out.join("gradcheck.json"),
            &json!({ "tolerance": tolerance, "checks": report }),
        )?;
    }
    if failed > 0 {
        return Err(CliError::CheckFailed(format!(
            "{failed} of {} gradient checks exceed tolerance {tolerance:e}",
            checks.len()
        )));
    }
    println!(
        "all {} gradient checks pass at tolerance {tolerance:e}",
        checks.len()
    );
    Ok(())
}

fn cmd_separability(exp: &ExperimentArgs, per_class: Option<usize>) -> CliResult {
    let cfg = exp.config()?;
    let ds = Dataset::open(&cfg.manifest)?;
    create_out(&exp.out)?;
    let mut reports = Vec::new();
    for &snr in &cfg.snr_db {
        let r = separability_report(&ds, snr, cfg.rng_seed, per_class, cfg.normalization)?;
        for s in &r.scores {
            println!(
                "  {:>6} dB  {:?}  silhouette {:.4}  1-NN {:.2}%",
                snr, s.representation, s.silhouette, s.knn_accuracy_pct
            );
        }
        reports.push(r);
    }
    write_json(&exp.out.join("separability.json"), &reports)
}

fn describe(arch: &Architecture) -> serde_json::Value {
    json!({
        "architecture": arch,
        "rsm_channels": arch.rsm_channels(),
        "egr_channels": arch.egr_channels(),
        "spatial_trace": arch.spatial_trace(),
        "classifier_width": arch.classifier_width(),
        "parameter_count": arch.parameter_count(),
        "flops": arch.flops(),
        "flops_total": arch.flops().total(),
    })
}

fn cmd_inspect(a: &InspectArgs) -> CliResult {
    let doc = if let Some(m) = &a.manifest {
        let ds = Dataset::open(m)?;
        serde_json::to_value(&ds.manifest).expect("manifest serializes")
    } else {
        let model = match (&a.checkpoint, a.variant) {
            (Some(p), _) => EgrNetModel::load(p)?,
            (None, Some(v)) => {
                let arch = Architecture {
                    input_side: a.side,
                    ..Architecture::canonical(a.classes, v)
                };
                EgrNetModel::new(arch, 0)?
            }
            (None, None) => {
                return Err(CliError::Usage(
                    "one of --manifest, --checkpoint or --variant is required".into(),
                ))
            }
        };
        let mut doc = describe(model.architecture());
        if let Some(runs) = a.latency_runs {
            let side = model.architecture().input_side;
            let sample = egrnet::signal::Signal::new(
                (0..side * side).map(|i| (i as f64 * 0.37).sin()).collect(),
                1.0,
            )?;
            let r = measure_inference(&model, &sample, runs)?;
            doc["latency_ms"] =
                json!({ "median": r.median_ms, "min": r.min_ms, "max": r.max_ms, "runs": r.runs });
        }
        doc
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&doc).expect("document serializes")
    );
    if let Some(out) = &a.out {
        create_out(out)?;
        write_json(&out.join("inspect.json"), &doc)?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match &cli.command {
        Command::Synth { spec, out } => cmd_synth(spec, out),
        Command::Convert(a) => cmd_convert(a),
        Command::Import { csv, names, out } => cmd_import(csv, names, out),
        Command::Train(exp) => cmd_train(exp),
        Command::Eval {
            exp,
            checkpoint,
            trial,
        } => cmd_eval(exp, checkpoint, *trial),
        Command::Sweep(exp) => cmd_sweep(exp),
        Command::Ablate(exp) => cmd_ablate(exp),
        Command::Gradcheck {
            scope,
            tolerance,
            out,
            inject_fault,
        } => cmd_gradcheck(*scope, *tolerance, out.as_deref(), *inject_fault),
        Command::Separability { exp, per_class } => cmd_separability(exp, *per_class),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
