//! Training schedule, repeated trials under noise, ablations and
//! representation separability.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::net::{
    argmax_rows, prepare_batch, Architecture, EgrNetModel, FlopCount, GcbSpec, InputBatch,
    NetworkVariant, CANONICAL_BLOCKS,
};
use crate::signal::{
    add_noise_snr, build_rsm, gram, normalize_sample_with, suggest_dims, NoiseSpec, Normalization,
    Signal,
};
use crate::tensor::ops::gemm;
use crate::tensor::Tensor;

/// Where noise enters relative to per-sample normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseOrder {
    /// Noise is added to the raw signal, which is then normalized.
    #[default]
    BeforeNormalization,
    /// The signal is normalized, noise is added, and the network's own
    /// normalization runs on the noisy result.
    AfterNormalization,
}

fn default_snr() -> Vec<f64> {
    vec![0.0]
}
fn default_trials() -> usize {
    5
}
fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-4
}
fn default_decay() -> f64 {
    0.1
}
fn default_decay_every() -> usize {
    15
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Manifest file or dataset directory; relative paths resolve against
    /// the config file's directory when loaded with [`ExperimentConfig::load`].
    pub manifest: PathBuf,
    #[serde(default = "default_variant")]
    pub variant: NetworkVariant,
    #[serde(default = "default_snr")]
    pub snr_db: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub initial_lr: f64,
    #[serde(default = "default_decay")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub lr_decay_every_epochs: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub split: SplitSpec,
    /// Block table; the canonical five blocks when absent.
    #[serde(default)]
    pub blocks: Option<Vec<GcbSpec>>,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_true")]
    pub normalize_egr_input: bool,
    #[serde(default)]
    pub noise_order: NoiseOrder,
    /// Stop a trial after the first epoch whose training accuracy (percent)
    /// reaches this value.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
    /// Record wall-clock seconds in results.csv. Timing is the only
    /// non-reproducible output, so bytewise comparisons turn it off.
    #[serde(default = "default_true")]
    pub record_timing: bool,
    /// Run the trials of a sweep concurrently. Each trial holds its own
    /// activations, so memory grows with the number of worker threads.
    #[serde(default)]
    pub parallel_trials: bool,
}

fn default_variant() -> NetworkVariant {
    NetworkVariant::EgrNet
}

impl ExperimentConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            manifest: manifest.into(),
            variant: default_variant(),
            snr_db: default_snr(),
            trials: default_trials(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            initial_lr: default_lr(),
            lr_decay_factor: default_decay(),
            lr_decay_every_epochs: default_decay_every(),
            rng_seed: 0,
            split: SplitSpec::default(),
            blocks: None,
            normalization: Normalization::default(),
            normalize_egr_input: true,
            noise_order: NoiseOrder::default(),
            stop_at_train_accuracy: None,
            record_timing: true,
            parallel_trials: false,
        }
    }

    /// Reads a JSON config; a relative `manifest` is taken relative to the
    /// config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if cfg.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.manifest = dir.join(&cfg.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.batch_size == 0 {
            return Err(Error::invalid("trials and batch_size must be at least 1"));
        }
        if self.lr_decay_every_epochs == 0 {
            return Err(Error::invalid("lr_decay_every_epochs must be at least 1"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid("initial_lr must be positive"));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("snr_db must list at least one finite value"));
        }
        Ok(())
    }

    /// `initial_lr · factor^⌊epoch/every⌋`, epochs counted from 0.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.initial_lr
            * self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every_epochs) as i32)
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.rng_seed.wrapping_add(trial as u64)
    }

    pub fn architecture(&self, num_classes: usize, sample_length: usize) -> Result<Architecture> {
        let dims = suggest_dims(sample_length)?;
        Ok(Architecture {
            variant: self.variant,
            blocks: self
                .blocks
                .clone()
                .unwrap_or_else(|| CANONICAL_BLOCKS.to_vec()),
            num_classes,
            input_side: dims.n,
            normalize_egr_input: self.normalize_egr_input,
            normalization: self.normalization,
        })
    }
}

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b))
}

const TRAIN_TAG: u64 = 1;
const TEST_TAG: u64 = 2;

/// Noise for one labelled sample set: each sample gets its own stream,
/// seeded from `(seed, class, index within class)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSetting {
    pub snr_db: f64,
    pub seed: u64,
    pub order: NoiseOrder,
}

impl NoiseSetting {
    /// Noise used for the training split of trial seed `trial_seed`.
    pub fn train(snr_db: f64, trial_seed: u64, order: NoiseOrder) -> Self {
        NoiseSetting {
            snr_db,
            seed: mix(trial_seed, TRAIN_TAG),
            order,
        }
    }

    /// Noise used for the test split of trial seed `trial_seed`.
    pub fn test(snr_db: f64, trial_seed: u64, order: NoiseOrder) -> Self {
        NoiseSetting {
            snr_db,
            seed: mix(trial_seed, TEST_TAG),
            order,
        }
    }

    fn apply(&self, s: &Signal, class: usize, index: usize, norm: Normalization) -> Result<Signal> {
        let spec = NoiseSpec::new(self.snr_db, mix(mix(self.seed, class as u64), index as u64));
        let noisy = match self.order {
            NoiseOrder::BeforeNormalization => add_noise_snr(s, spec)?,
            NoiseOrder::AfterNormalization => {
                add_noise_snr(&normalize_sample_with(s, norm)?, spec)?
            }
        };
        Ok(match s.label() {
            Some(l) => noisy.with_label(l),
            None => noisy,
        })
    }
}

/// Labelled samples grouped by class.
pub type ClassSamples = Vec<Vec<Signal>>;

/// Per-class chronological train/test split.
pub fn split_classes(
    classes: &ClassSamples,
    spec: SplitSpec,
) -> Result<(ClassSamples, ClassSamples)> {
    let mut train = Vec::with_capacity(classes.len());
    let mut test = Vec::with_capacity(classes.len());
    for (c, samples) in classes.iter().enumerate() {
        let (a, b) = split(samples, spec).map_err(|e| e.context(format!("class {c}")))?;
        train.push(a);
        test.push(b);
    }
    Ok((train, test))
}

/// Network inputs for a whole sample set, ready to be gathered into batches.
struct Prepared {
    rsm: Vec<f64>,
    egr: Option<Vec<f64>>,
    labels: Vec<usize>,
    plane: usize,
    side: usize,
}

impl Prepared {
    fn new(
        classes: &ClassSamples,
        noise: Option<NoiseSetting>,
        arch: &Architecture,
    ) -> Result<Self> {
        let side = arch.input_side;
        let plane = side * side;
        let total: usize = classes.iter().map(Vec::len).sum();
        let mut rsm = Vec::with_capacity(total * plane);
        let mut egr = arch
            .variant
            .uses_egr()
            .then(|| Vec::with_capacity(total * plane));
        let mut labels = Vec::with_capacity(total);
        for (c, samples) in classes.iter().enumerate() {
            for (i, s) in samples.iter().enumerate() {
                if s.len() != plane {
                    return Err(Error::invalid(format!(
                        "class {c} sample {i} has {} values, network expects {plane}",
                        s.len()
                    )));
                }
                let s = match noise {
                    Some(n) => n.apply(s, c, i, arch.normalization)?,
                    None => s.clone(),
                };
                let r = build_rsm(
                    &normalize_sample_with(&s, arch.normalization)?,
                    arch.rsm_config(),
                )?;
                if let Some(e) = egr.as_mut() {
                    e.extend_from_slice(gram(&r)?.matrix().as_slice());
                }
                rsm.extend_from_slice(r.matrix().as_slice());
                labels.push(c);
            }
        }
        Ok(Prepared {
            rsm,
            egr,
            labels,
            plane,
            side,
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, idx: &[usize]) -> Result<(InputBatch, Vec<usize>)> {
        let gather = |src: &[f64]| {
            let mut out = Vec::with_capacity(idx.len() * self.plane);
            for &i in idx {
                out.extend_from_slice(&src[i * self.plane..(i + 1) * self.plane]);
            }
            Tensor::new(vec![idx.len(), 1, self.side, self.side], out)
        };
        Ok((
            InputBatch {
                rsm: gather(&self.rsm)?,
                egr: self.egr.as_deref().map(gather).transpose()?,
            },
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[actual][predicted]`
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, actual: &[usize], predicted: &[usize]) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::invalid("actual and predicted label counts differ"));
        }
        let mut m = Self::new(classes);
        for (&a, &p) in actual.iter().zip(predicted) {
            m.record(a, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, actual: usize, predicted: usize) -> Result<()> {
        let k = self.counts.len();
        if actual >= k || predicted >= k {
            return Err(Error::invalid(format!(
                "label pair ({actual}, {predicted}) outside {k} classes"
            )));
        }
        self.counts[actual][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Share of correct predictions, in percent. With two classes this is
    /// `(TP + TN) / (TP + TN + FP + FN)`; with more it is the same ratio,
    /// correct over all, which reduces to `trace / total`.
    pub fn accuracy_pct(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        100.0 * self.trace() as f64 / total as f64
    }

    /// `(TP, TN, FP, FN)` of one class against the rest.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[class][class];
        let fn_ = self.row_sums()[class] - tp;
        let fp: u64 = (0..self.counts.len())
            .map(|a| self.counts[a][class])
            .sum::<u64>()
            - tp;
        let tn = self.total() - tp - fn_ - fp;
        (tp, tn, fp, fn_)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub variant: NetworkVariant,
    pub snr_db: f64,
    pub trial: usize,
    pub seed: u64,
    pub curves: Vec<EpochMetrics>,
    pub test_accuracy_pct: f64,
    pub confusion: ConfusionMatrix,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy_pct(&self) -> f64 {
        self.confusion.accuracy_pct()
    }
}

/// Progress sink; receives one human-readable line per event.
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

pub fn quiet(_: &str) {}

fn evaluate_prepared(
    model: &EgrNetModel,
    data: &Prepared,
    batch_size: usize,
) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size) {
        let (batch, _) = data.batch(idx)?;
        let (logits, _) = model.infer(&batch)?;
        predictions.extend(argmax_rows(&logits)?);
    }
    Ok(Evaluation {
        confusion: ConfusionMatrix::from_pairs(model.num_classes(), &data.labels, &predictions)?,
        predictions,
    })
}

/// Classifies labelled samples (grouped by class), optionally after adding
/// noise.
pub fn evaluate(
    model: &EgrNetModel,
    test: &ClassSamples,
    noise: Option<NoiseSetting>,
    batch_size: usize,
) -> Result<Evaluation> {
    if test.len() != model.num_classes() {
        return Err(Error::invalid(format!(
            "test set has {} classes, model {}",
            test.len(),
            model.num_classes()
        )));
    }
    let data = Prepared::new(test, noise, model.architecture())?;
    evaluate_prepared(model, &data, batch_size.max(1))
}

/// Train and test sets of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: ClassSamples,
    pub test: ClassSamples,
    pub sample_length: usize,
}

impl ExperimentData {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let ds = Dataset::open(&config.manifest)?;
        let classes = ds.all_samples()?;
        let (train, test) = split_classes(&classes, config.split)?;
        Ok(ExperimentData {
            train,
            test,
            sample_length: ds.manifest.sample_length,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.train.len()
    }
}

/// One training run at one SNR, then evaluation on the test split.
pub fn run_trial(
    config: &ExperimentConfig,
    data: &ExperimentData,
    snr_db: f64,
    trial: usize,
    progress: Progress,
) -> Result<(EgrNetModel, TrialResult)> {
    config.validate()?;
    let start = Instant::now();
    let seed = config.trial_seed(trial);
    let arch = config.architecture(data.num_classes(), data.sample_length)?;
    let tag = format!("{} snr={snr_db} trial={trial}", config.variant);
    let train = Prepared::new(
        &data.train,
        Some(NoiseSetting::train(snr_db, seed, config.noise_order)),
        &arch,
    )
    .map_err(|e| e.context(format!("{tag}: preparing training set")))?;
    let test = Prepared::new(
        &data.test,
        Some(NoiseSetting::test(snr_db, seed, config.noise_order)),
        &arch,
    )
    .map_err(|e| e.context(format!("{tag}: preparing test set")))?;

    let mut model = EgrNetModel::new(arch, seed)?;
    let mut states = model.adam_states();
    let mut curves = Vec::new();
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            seed,
            1000 + epoch as u64,
        )));
        let (mut loss_sum, mut correct) = (0.0, 0);
        for idx in order.chunks(config.batch_size) {
            let (batch, labels) = train.batch(idx)?;
            let step = model
                .train_step(&batch, &labels, &mut states, lr)
                .map_err(|e| e.context(format!("{tag}: epoch {epoch}")))?;
            loss_sum += step.loss * idx.len() as f64;
            correct += step.correct;
        }
        let m = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            accuracy_pct: 100.0 * correct as f64 / train.len() as f64,
        };
        progress(&format!(
            "{tag} epoch {}/{} lr={:.1e} loss={:.4} train_acc={:.2}%",
            epoch + 1,
            config.epochs,
            lr,
            m.loss,
            m.accuracy_pct
        ));
        let stop = config
            .stop_at_train_accuracy
            .is_some_and(|t| m.accuracy_pct >= t);
        curves.push(m);
        if stop {
            progress(&format!(
                "{tag} reached the training-accuracy target, stopping"
            ));
            break;
        }
    }
    let eval = evaluate_prepared(&model, &test, config.batch_size)?;
    let result = TrialResult {
        variant: config.variant,
        snr_db,
        trial,
        seed,
        curves,
        test_accuracy_pct: eval.accuracy_pct(),
        confusion: eval.confusion,
        seconds: config.record_timing.then(|| start.elapsed().as_secs_f64()),
    };
    progress(&format!("{tag} test_acc={:.2}%", result.test_accuracy_pct));
    Ok((model, result))
}

/// Loads the dataset and runs trial 0 at the first configured SNR.
pub fn train(config: &ExperimentConfig, progress: Progress) -> Result<(EgrNetModel, TrialResult)> {
    config.validate()?;
    let data = ExperimentData::load(config)?;
    run_trial(config, &data, config.snr_db[0], 0, progress)
}

/// Sample mean and sample standard deviation (`n − 1`); the deviation is 0
/// for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSummary {
    pub snr_db: f64,
    pub trials: usize,
    pub accuracies_pct: Vec<f64>,
    pub mean_accuracy_pct: f64,
    pub std_accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub variant: NetworkVariant,
    pub parameter_count: usize,
    pub snr: Vec<SnrSummary>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub summary: SweepSummary,
    pub trials: Vec<TrialResult>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn snr_tag(snr: f64) -> String {
    format!("{snr}").replace('-', "m").replace('.', "p")
}

/// Writes results.csv, curves.csv, confusion.csv and summary.json.
pub fn write_sweep_outputs(out: &Path, outcome: &SweepOutcome) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut results = String::from("snr_db,trial,accuracy_pct,seconds\n");
    let mut curves = String::from("snr_db,trial,epoch,lr,loss,accuracy_pct\n");
    let mut confusion = String::from("snr_db,trial,actual,predicted,count\n");
    for t in &outcome.trials {
        let secs = t.seconds.map(|s| format!("{s:.3}")).unwrap_or_default();
        writeln!(
            results,
            "{},{},{},{secs}",
            t.snr_db, t.trial, t.test_accuracy_pct
        )
        .unwrap();
        for e in &t.curves {
            writeln!(
                curves,
                "{},{},{},{},{},{}",
                t.snr_db, t.trial, e.epoch, e.lr, e.loss, e.accuracy_pct
            )
            .unwrap();
        }
        for (a, row) in t.confusion.counts.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                writeln!(confusion, "{},{},{a},{p},{n}", t.snr_db, t.trial).unwrap();
            }
        }
    }
    write_file(&out.join("results.csv"), &results)?;
    write_file(&out.join("curves.csv"), &curves)?;
    write_file(&out.join("confusion.csv"), &confusion)?;
    let json = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    write_file(&out.join("summary.json"), &(json + "\n"))
}

/// Every configured SNR × trial, each trial seeded `rng_seed + trial`.
/// When `out` is given, results and one checkpoint per trial are written there.
pub fn run_snr_sweep(
    config: &ExperimentConfig,
    out: Option<&Path>,
    progress: Progress,
) -> Result<SweepOutcome> {
    config.validate()?;
    let data = ExperimentData::load(config)?;
    sweep_with_data(config, &data, out, progress)
}

fn sweep_with_data(
    config: &ExperimentConfig,
    data: &ExperimentData,
    out: Option<&Path>,
    progress: Progress,
) -> Result<SweepOutcome> {
    let jobs: Vec<(f64, usize)> = config
        .snr_db
        .iter()
        .flat_map(|&s| (0..config.trials).map(move |t| (s, t)))
        .collect();
    if let Some(out) = out {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let job = |&(snr, trial): &(f64, usize)| -> Result<TrialResult> {
        let (model, result) = run_trial(config, data, snr, trial, progress)?;
        if let Some(out) = out {
            let path = out
                .join("checkpoints")
                .join(format!("snr_{}_trial_{trial}.bin", snr_tag(snr)));
            model.save(&path)?;
        }
        Ok(result)
    };
    let trials: Vec<TrialResult> = if config.parallel_trials {
        jobs.par_iter().map(job).collect::<Result<_>>()?
    } else {
        jobs.iter().map(job).collect::<Result<_>>()?
    };
    let snr = config
        .snr_db
        .iter()
        .map(|&s| {
            let acc: Vec<f64> = trials
                .iter()
                .filter(|t| t.snr_db == s)
                .map(|t| t.test_accuracy_pct)
                .collect();
            let (mean, std) = mean_std(&acc);
            SnrSummary {
                snr_db: s,
                trials: acc.len(),
                accuracies_pct: acc,
                mean_accuracy_pct: mean,
                std_accuracy_pct: std,
            }
        })
        .collect();
    let arch = config.architecture(data.num_classes(), data.sample_length)?;
    let outcome = SweepOutcome {
        summary: SweepSummary {
            variant: config.variant,
            parameter_count: arch.parameter_count(),
            snr,
        },
        trials,
    };
    if let Some(out) = out {
        write_sweep_outputs(out, &outcome)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: NetworkVariant,
    pub snr_db: f64,
    pub mean_accuracy_pct: f64,
    pub std_accuracy_pct: f64,
    pub parameter_count: usize,
}

/// The same sweep for every variant, on identical data, seeds and batch
/// order. Each variant's full outputs go to `out/<variant>/`, and the
/// comparison table to `out/ablation.csv`.
pub fn run_ablation(
    config: &ExperimentConfig,
    out: Option<&Path>,
    progress: Progress,
) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let data = ExperimentData::load(config)?;
    let mut rows = Vec::new();
    for variant in NetworkVariant::ALL {
        let cfg = ExperimentConfig {
            variant,
            ..config.clone()
        };
        let dir = out.map(|o| o.join(variant.name()));
        let outcome = sweep_with_data(&cfg, &data, dir.as_deref(), progress)?;
        for s in &outcome.summary.snr {
            rows.push(AblationRow {
                variant,
                snr_db: s.snr_db,
                mean_accuracy_pct: s.mean_accuracy_pct,
                std_accuracy_pct: s.std_accuracy_pct,
                parameter_count: outcome.summary.parameter_count,
            });
        }
    }
    if let Some(out) = out {
        let mut csv =
            String::from("variant,snr_db,mean_accuracy_pct,std_accuracy_pct,parameter_count\n");
        for r in &rows {
            writeln!(
                csv,
                "{},{},{},{},{}",
                r.variant, r.snr_db, r.mean_accuracy_pct, r.std_accuracy_pct, r.parameter_count
            )
            .unwrap();
        }
        write_file(&out.join("ablation.csv"), &csv)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Rsm,
    Egr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationScore {
    pub representation: Representation,
    pub silhouette: f64,
    pub knn_accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub snr_db: f64,
    pub samples: usize,
    pub scores: Vec<RepresentationScore>,
}

impl SeparabilityReport {
    pub fn score(&self, r: Representation) -> Option<&RepresentationScore> {
        self.scores.iter().find(|s| s.representation == r)
    }
}

/// Z-scores each column of a row-major `rows × cols` matrix in place;
/// constant columns become 0.
pub fn standardize_columns(x: &mut [f64], rows: usize, cols: usize) {
    for c in 0..cols {
        let mean = (0..rows).map(|r| x[r * cols + c]).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|r| (x[r * cols + c] - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for r in 0..rows {
            x[r * cols + c] = (x[r * cols + c] - mean) * inv;
        }
    }
}

/// Euclidean distances between the rows of a row-major `rows × cols` matrix.
pub fn pairwise_distances(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dot = vec![0.0; rows * rows];
    gemm(
        rows,
        cols,
        rows,
        1.0,
        x,
        (cols, 1),
        x,
        (1, cols),
        0.0,
        &mut dot,
        (rows, 1),
    );
    let norms: Vec<f64> = (0..rows).map(|i| dot[i * rows + i]).collect();
    let mut d = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            if i != j {
                d[i * rows + j] = (norms[i] + norms[j] - 2.0 * dot[i * rows + j])
                    .max(0.0)
                    .sqrt();
            }
        }
    }
    d
}

/// Mean silhouette over all points. Points alone in their cluster score 0.
pub fn silhouette(dist: &[f64], labels: &[usize]) -> f64 {
    let n = labels.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let sizes: Vec<usize> = (0..k)
        .map(|c| labels.iter().filter(|&&l| l == c).count())
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            sums[labels[j]] += dist[i * n + j];
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() && a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// Leave-one-out 1-nearest-neighbour accuracy in percent; ties go to the
/// lower index.
pub fn knn_loo_accuracy(dist: &[f64], labels: &[usize]) -> f64 {
    let n = labels.len();
    let correct = (0..n)
        .filter(|&i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in (0..n).filter(|&j| j != i) {
                if dist[i * n + j] < best.0 {
                    best = (dist[i * n + j], j);
                }
            }
            best.1 != usize::MAX && labels[best.1] == labels[i]
        })
        .count();
    100.0 * correct as f64 / n as f64
}

/// Silhouette and 1-NN accuracy of flattened, standardized features.
pub fn score_features(features: &[f64], cols: usize, labels: &[usize]) -> (f64, f64) {
    let rows = labels.len();
    let mut x = features.to_vec();
    standardize_columns(&mut x, rows, cols);
    let d = pairwise_distances(&x, rows, cols);
    (silhouette(&d, labels), knn_loo_accuracy(&d, labels))
}

/// Compares how well RSM and EGR representations separate the classes of a
/// dataset at one noise level. `per_class` caps the samples used per class.
pub fn separability_report(
    dataset: &Dataset,
    snr_db: f64,
    seed: u64,
    per_class: Option<usize>,
    normalization: Normalization,
) -> Result<SeparabilityReport> {
    let mut classes = dataset.all_samples()?;
    if let Some(cap) = per_class {
        for c in &mut classes {
            c.truncate(cap);
        }
    }
    let dims = suggest_dims(dataset.manifest.sample_length)?;
    let noise = NoiseSetting {
        snr_db,
        seed,
        order: NoiseOrder::BeforeNormalization,
    };
    let plane = dims.sample_length();
    let (mut rsm, mut egr, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (c, samples) in classes.iter().enumerate() {
        for (i, s) in samples.iter().enumerate() {
            let noisy = noise.apply(s, c, i, normalization)?;
            let r = build_rsm(&normalize_sample_with(&noisy, normalization)?, dims)?;
            egr.extend_from_slice(gram(&r)?.matrix().as_slice());
            rsm.extend_from_slice(r.matrix().as_slice());
            labels.push(c);
        }
    }
    let egr_cols = dims.n * dims.n;
    let (s_rsm, k_rsm) = score_features(&rsm, plane, &labels);
    let (s_egr, k_egr) = score_features(&egr, egr_cols, &labels);
    Ok(SeparabilityReport {
        snr_db,
        samples: labels.len(),
        scores: vec![
            RepresentationScore {
                representation: Representation::Rsm,
                silhouette: s_rsm,
                knn_accuracy_pct: k_rsm,
            },
            RepresentationScore {
                representation: Representation::Egr,
                silhouette: s_egr,
                knn_accuracy_pct: k_egr,
            },
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub flops: u64,
    pub flop_breakdown: FlopCount,
    pub parameter_count: usize,
    pub runs: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Analytic FLOPs and the wall-clock latency of classifying one raw sample
/// (preprocessing included), as the median of `runs` timed runs after a
/// few warm-up runs.
pub fn measure_inference(
    model: &EgrNetModel,
    sample: &Signal,
    runs: usize,
) -> Result<InferenceReport> {
    let runs = runs.max(1);
    let arch = model.architecture();
    let once = || -> Result<usize> {
        let batch = prepare_batch(&[sample], arch)?;
        let (logits, _) = model.infer(&batch)?;
        Ok(argmax_rows(&logits)?[0])
    };
    for _ in 0..3 {
        once()?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        once()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 {
        times[runs / 2]
    } else {
        0.5 * (times[runs / 2 - 1] + times[runs / 2])
    };
    let flops = model.flops();
    Ok(InferenceReport {
        flops: flops.total(),
        flop_breakdown: flops,
        parameter_count: model.parameter_count(),
        runs,
        median_ms: median,
        min_ms: times[0],
        max_ms: times[runs - 1],
    })
}

/// Sizes the global worker pool from `EGRNET_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("EGRNET_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::invalid(format!(
                "EGRNET_THREADS={value:?} is not a positive integer"
            ))
        })?;
    // a pool built earlier in the process stays in place
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}
