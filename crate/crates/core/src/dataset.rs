//! Sample files, manifests, segmentation, splitting and a synthetic
//! vibration generator.
//!
//! A dataset directory holds `manifest.json` and one `class_{id}.f32le`
//! per class: that class's samples back to back as little-endian `f32`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Signal;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub label_id: usize,
    pub name: String,
    /// Relative to the manifest's directory.
    pub file_path: String,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<ClassEntry>,
    pub sample_length: usize,
    pub sample_rate_hz: f64,
    pub format_version: u32,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |detail: String| {
            Err(Error::Format {
                path: path.to_path_buf(),
                detail,
            })
        };
        if self.format_version != FORMAT_VERSION {
            return bad(format!(
                "format_version {} (supported: {FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if self.sample_length == 0 {
            return bad("sample_length is 0".into());
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad(format!(
                "sample_rate_hz {} is not positive",
                self.sample_rate_hz
            ));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.label_id != i {
                return bad(format!(
                    "class {i} has label_id {}; ids must run 0..K-1 in order",
                    c.label_id
                ));
            }
            if c.sample_count == 0 {
                return bad(format!("class {i} ({}) has no samples", c.name));
            }
            if Path::new(&c.file_path).is_absolute() || c.file_path.contains("..") {
                return bad(format!(
                    "class {i}: file_path {:?} must stay inside the dataset directory",
                    c.file_path
                ));
            }
        }
        Ok(())
    }
}

/// A manifest plus the directory its file paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    /// Opens a dataset from its manifest path or its directory.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let manifest = load_manifest(&manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Dataset { manifest, root })
    }

    pub fn class_path(&self, class: usize) -> Result<PathBuf> {
        let entry = self.manifest.classes.get(class).ok_or_else(|| {
            Error::invalid(format!(
                "class {class} out of range ({} classes)",
                self.manifest.num_classes()
            ))
        })?;
        Ok(self.root.join(&entry.file_path))
    }

    pub fn samples(&self, class: usize) -> Result<Vec<Signal>> {
        load_samples(&self.manifest, &self.root, class)
    }

    /// Every class's samples, labelled.
    pub fn all_samples(&self) -> Result<Vec<Vec<Signal>>> {
        (0..self.manifest.num_classes())
            .map(|c| self.samples(c))
            .collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    manifest.validate(path)?;
    Ok(manifest)
}

/// Reads one class file, checking its size against the manifest and every
/// value for finiteness.
pub fn load_samples(manifest: &DatasetManifest, root: &Path, class: usize) -> Result<Vec<Signal>> {
    let entry = manifest.classes.get(class).ok_or_else(|| {
        Error::invalid(format!(
            "class {class} out of range ({} classes)",
            manifest.num_classes()
        ))
    })?;
    let path = root.join(&entry.file_path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let len = manifest.sample_length;
    let expected = entry.sample_count * len * 4;
    if bytes.len() < expected {
        let whole = bytes.len() / (4 * len);
        return Err(Error::Truncated {
            path,
            offset: bytes.len() as u64,
            detail: format!(
                "expected {expected} bytes for {} samples of {len}; sample {whole} is incomplete",
                entry.sample_count
            ),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            path,
            detail: format!(
                "{} trailing bytes after offset {expected}",
                bytes.len() - expected
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            path,
            detail: format!(
                "non-finite value at byte offset {} (sample {}, index {})",
                4 * i,
                i / len,
                i % len
            ),
        });
    }
    values
        .chunks_exact(len)
        .map(|c| Ok(Signal::new(c.to_vec(), manifest.sample_rate_hz)?.with_label(class)))
        .collect()
}

/// Writes one class file per entry of `classes` and the manifest into `dir`.
/// Every signal must have the same length.
pub fn write_dataset(
    dir: &Path,
    classes: &[(String, Vec<Signal>)],
    sample_rate_hz: f64,
) -> Result<DatasetManifest> {
    let sample_length = classes
        .first()
        .and_then(|(_, s)| s.first())
        .map(Signal::len)
        .ok_or_else(|| Error::invalid("dataset needs at least one class with samples"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(classes.len());
    for (id, (name, signals)) in classes.iter().enumerate() {
        if signals.is_empty() {
            return Err(Error::invalid(format!(
                "class {id} ({name}) has no samples"
            )));
        }
        let mut bytes = Vec::with_capacity(signals.len() * sample_length * 4);
        for (k, s) in signals.iter().enumerate() {
            if s.len() != sample_length {
                return Err(Error::invalid(format!(
                    "class {id} sample {k} has length {}, expected {sample_length}",
                    s.len()
                )));
            }
            for &v in s.samples() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let file = format!("class_{id}.f32le");
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ClassEntry {
            label_id: id,
            name: name.clone(),
            file_path: file,
            sample_count: signals.len(),
        });
    }
    let manifest = DatasetManifest {
        classes: entries,
        sample_length,
        sample_rate_hz,
        format_version: FORMAT_VERSION,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Windows of `sample_length` starting at `0, hop, 2·hop, …`.
pub fn segment(signal: &Signal, sample_length: usize, hop: usize) -> Result<Vec<Signal>> {
    if hop == 0 || sample_length == 0 {
        return Err(Error::invalid("hop and sample_length must be positive"));
    }
    if sample_length > signal.len() {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one window of {sample_length}",
            signal.len()
        )));
    }
    let count = (signal.len() - sample_length) / hop + 1;
    (0..count)
        .map(|i| {
            let start = i * hop;
            let mut s = Signal::new(
                signal.samples()[start..start + sample_length].to_vec(),
                signal.sample_rate_hz(),
            )?;
            if let Some(l) = signal.label() {
                s = s.with_label(l);
            }
            Ok(s)
        })
        .collect()
}

/// Largest hop giving at least `count` windows: `⌊(L − len)/(count − 1)⌋`.
pub fn hop_for_count(signal_length: usize, sample_length: usize, count: usize) -> Result<usize> {
    if count < 2 {
        return Err(Error::invalid(
            "a hop is only defined for two or more windows",
        ));
    }
    if sample_length > signal_length {
        return Err(Error::invalid(format!(
            "signal of {signal_length} samples is shorter than one window of {sample_length}"
        )));
    }
    let hop = (signal_length - sample_length) / (count - 1);
    if hop == 0 {
        return Err(Error::invalid(format!(
            "{count} windows of {sample_length} do not fit in {signal_length} samples"
        )));
    }
    Ok(hop)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// The first samples of each class train, the rest test.
    #[default]
    ChronologicalFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    #[serde(default)]
    pub policy: SplitPolicy,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.5,
            policy: SplitPolicy::ChronologicalFirst,
        }
    }
}

/// Splits one class's samples; the training side gets `⌊fraction·N⌋`.
pub fn split<T: Clone>(samples: &[T], spec: SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let n_train = (spec.train_fraction * samples.len() as f64).floor() as usize;
    if n_train == 0 || n_train == samples.len() {
        return Err(Error::invalid(format!(
            "splitting {} samples at {} leaves one side empty",
            samples.len(),
            spec.train_fraction
        )));
    }
    match spec.policy {
        SplitPolicy::ChronologicalFirst => {
            Ok((samples[..n_train].to_vec(), samples[n_train..].to_vec()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub name: String,
    pub carrier_freq_hz: f64,
    /// Impulses per second.
    pub impulse_rate_hz: f64,
    /// 0 gives a pure carrier, 1 a carrier gated entirely by the impulses.
    pub modulation_depth: f64,
    /// Envelope decay time of each impulse, in seconds.
    pub decay_constant: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaultSpec {
    pub classes: Vec<SyntheticClass>,
    pub sample_rate_hz: f64,
    pub sample_length: usize,
    pub samples_per_class: usize,
    pub rng_seed: u64,
}

impl SyntheticFaultSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz / 2.0;
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::invalid("sample_rate_hz must be positive"));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("at least one class is required"));
        }
        if self.sample_length < 2 || self.samples_per_class == 0 {
            return Err(Error::invalid(
                "sample_length must be at least 2 and samples_per_class positive",
            ));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let name = &c.name;
            if !(c.carrier_freq_hz > 0.0 && c.carrier_freq_hz < nyquist) {
                return Err(Error::invalid(format!(
                    "class {i} ({name}): carrier {} Hz must lie in (0, {nyquist}) Hz (Nyquist)",
                    c.carrier_freq_hz
                )));
            }
            if !(0.0..=1.0).contains(&c.modulation_depth) {
                return Err(Error::invalid(format!(
                    "class {i} ({name}): modulation_depth {} outside [0, 1]",
                    c.modulation_depth
                )));
            }
            if c.modulation_depth > 0.0
                && !(c.impulse_rate_hz > 0.0
                    && c.impulse_rate_hz < nyquist
                    && c.decay_constant > 0.0)
            {
                return Err(Error::invalid(format!(
                    "class {i} ({name}): impulse rate must lie in (0, {nyquist}) Hz and decay be positive"
                )));
            }
            if !(c.amplitude.is_finite() && c.amplitude > 0.0) {
                return Err(Error::invalid(format!(
                    "class {i} ({name}): amplitude must be positive"
                )));
            }
            let same = |a: &SyntheticClass, b: &SyntheticClass| {
                a.carrier_freq_hz == b.carrier_freq_hz
                    && a.impulse_rate_hz == b.impulse_rate_hz
                    && a.modulation_depth == b.modulation_depth
                    && a.decay_constant == b.decay_constant
                    && a.amplitude == b.amplitude
            };
            if let Some(j) = self.classes[..i].iter().position(|o| same(o, c)) {
                return Err(Error::invalid(format!(
                    "classes {j} and {i} have identical parameters"
                )));
            }
        }
        Ok(())
    }
}

/// One synthetic record:
///
/// ```text
/// x(t) = A · (1 − d + d·e(t)) · sin(2π f_c t + φ)
/// e(t) = Σ_k exp(−(t − t_k)/τ) · [t ≥ t_k]
/// ```
///
/// with impulse times `t_k = t_0 + k/f_i + j_k`, a random start `t_0`
/// within one impulse period, timing jitter `j_k` of up to ±5% of that
/// period, and a random carrier phase `φ`.
fn synth_sample(class: &SyntheticClass, rate: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phase = rng.gen_range(0.0..2.0 * PI);
    let d = class.modulation_depth;
    let mut envelope = vec![0.0; len];
    if d > 0.0 {
        let period = 1.0 / class.impulse_rate_hz;
        let duration = len as f64 / rate;
        // impulses that start before the window still contribute their tails
        let mut t = rng.gen_range(0.0..period) - 5.0 * class.decay_constant;
        t -= (t / period).floor().max(0.0) * period;
        while t < duration {
            let tk = t + rng.gen_range(-0.05..0.05) * period;
            let first = ((tk * rate).ceil().max(0.0)) as usize;
            for (i, e) in envelope.iter_mut().enumerate().skip(first) {
                let dt = i as f64 / rate - tk;
                let v = (-dt / class.decay_constant).exp();
                if v < 1e-12 {
                    break;
                }
                *e += v;
            }
            t += period;
        }
    }
    (0..len)
        .map(|i| {
            let t = i as f64 / rate;
            class.amplitude
                * (1.0 - d + d * envelope[i])
                * (2.0 * PI * class.carrier_freq_hz * t + phase).sin()
        })
        .collect()
}

/// Signals of every class, labelled, without writing anything.
pub fn synthesize(spec: &SyntheticFaultSpec) -> Result<Vec<Vec<Signal>>> {
    spec.validate()?;
    spec.classes
        .iter()
        .enumerate()
        .map(|(id, class)| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.rng_seed ^ 0xD1B5_4A32_D192_ED03u64.wrapping_mul(id as u64 + 1),
            );
            (0..spec.samples_per_class)
                .map(|_| {
                    let x = synth_sample(class, spec.sample_rate_hz, spec.sample_length, &mut rng);
                    Ok(Signal::new(x, spec.sample_rate_hz)?.with_label(id))
                })
                .collect()
        })
        .collect()
}

/// Generates the dataset into `dir`.
pub fn generate_synthetic(spec: &SyntheticFaultSpec, dir: &Path) -> Result<DatasetManifest> {
    let signals = synthesize(spec)?;
    let classes: Vec<(String, Vec<Signal>)> = spec
        .classes
        .iter()
        .map(|c| c.name.clone())
        .zip(signals)
        .collect();
    write_dataset(dir, &classes, spec.sample_rate_hz)
}

/// Reads a CSV of samples: a header row `sample_rate_hz,<value>`, then one
/// sample per row as comma-separated values. All rows must be equally long.
pub fn import_csv(path: &Path) -> Result<Vec<Signal>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    let rate = match header.split_once(',') {
        Some((key, value)) if key.trim() == "sample_rate_hz" => value
            .trim()
            .parse::<f64>()
            .map_err(|e| bad(1, format!("sample rate {value:?}: {e}")))?,
        _ => return Err(bad(1, "expected header `sample_rate_hz,<value>`".into())),
    };
    let mut out: Vec<Signal> = Vec::new();
    for (i, line) in lines {
        let values = line
            .split(',')
            .enumerate()
            .map(|(col, v)| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(i + 1, format!("column {}: {v:?}: {e}", col + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = out.first() {
            if values.len() != first.len() {
                return Err(bad(
                    i + 1,
                    format!("{} values, earlier rows have {}", values.len(), first.len()),
                ));
            }
        }
        out.push(Signal::new(values, rate).map_err(|e| bad(i + 1, e.to_string()))?);
    }
    if out.is_empty() {
        return Err(bad(2, "no sample rows".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{egr_of_signal, stripe_profile, RsmConfig};

    fn ramp(len: usize) -> Signal {
        Signal::new((0..len).map(|i| i as f64).collect(), 10.0).unwrap()
    }

    fn spec() -> SyntheticFaultSpec {
        let class = |name: &str, carrier: f64, rate: f64| SyntheticClass {
            name: name.into(),
            carrier_freq_hz: carrier,
            impulse_rate_hz: rate,
            modulation_depth: 0.5,
            decay_constant: 0.01,
            amplitude: 1.0,
        };
        SyntheticFaultSpec {
            classes: vec![class("a", 1600.0, 90.0), class("b", 800.0, 140.0)],
            sample_rate_hz: 12_800.0,
            sample_length: 256,
            samples_per_class: 6,
            rng_seed: 7,
        }
    }

    #[test]
    fn segment_windows() {
        let w = segment(&ramp(10), 4, 2).unwrap();
        assert_eq!(w.len(), 4);
        for (i, s) in w.iter().enumerate() {
            assert_eq!(s.samples()[0], (2 * i) as f64);
            assert_eq!(s.len(), 4);
        }
        let part = segment(&ramp(12), 4, 4).unwrap();
        let joined: Vec<f64> = part.iter().flat_map(|s| s.samples().to_vec()).collect();
        assert_eq!(joined, ramp(12).samples());
        assert!(segment(&ramp(3), 4, 1).is_err());
        assert!(segment(&ramp(10), 4, 0).is_err());
    }

    #[test]
    fn hop_rule_yields_requested_count() {
        let l = 120_000;
        let hop = hop_for_count(l, 4096, 800).unwrap();
        assert_eq!(hop, (l - 4096) / 799);
        assert!(segment(&ramp(l), 4096, hop).unwrap().len() >= 800);
    }

    #[test]
    fn split_floor_rule() {
        let v: Vec<usize> = (0..104).collect();
        let (a, b) = split(&v, SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len()), (52, 52));
        assert_eq!(a[51] + 1, b[0]);
        let ten: Vec<usize> = (0..10).collect();
        let spec = SplitSpec {
            train_fraction: 0.7,
            ..Default::default()
        };
        let (a, b) = split(&ten, spec).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert!(split(&[1], SplitSpec::default()).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_round_trips() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = generate_synthetic(&spec(), d1.path()).unwrap();
        generate_synthetic(&spec(), d2.path()).unwrap();
        for f in ["manifest.json", "class_0.f32le", "class_1.f32le"] {
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap()
            );
        }
        let ds = Dataset::open(d1.path()).unwrap();
        assert_eq!(ds.manifest, m1);
        let mem = synthesize(&spec()).unwrap();
        let loaded = ds.samples(1).unwrap();
        for (a, b) in loaded.iter().zip(&mem[1]) {
            assert_eq!(a.label(), Some(1));
            for (x, y) in a.samples().iter().zip(b.samples()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert_ne!(mem[0][0].samples(), mem[0][1].samples());
    }

    #[test]
    fn stripe_peak_at_carrier_period() {
        let mut s = spec();
        s.classes[0].modulation_depth = 0.0;
        s.classes[0].carrier_freq_hz = 12_800.0 / 16.0;
        s.classes[1].carrier_freq_hz = 12_800.0 / 8.0;
        s.sample_length = 4096;
        s.samples_per_class = 3;
        let cfg = RsmConfig::square(64).unwrap();
        for (class, period) in synthesize(&s).unwrap().iter().zip([16, 8]) {
            for sig in class {
                let p = stripe_profile(&egr_of_signal(sig, cfg).unwrap());
                assert_eq!(p.dominant_lag(32), Some(period));
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec();
        s.classes[0].carrier_freq_hz = 7000.0;
        assert!(s.validate().unwrap_err().to_string().contains("Nyquist"));
        let mut s = spec();
        s.classes[1] = s.classes[0].clone();
        assert!(s.validate().is_err());
    }

    #[test]
    fn load_errors_are_positioned() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&spec(), dir.path()).unwrap();
        let path = dir.path().join("class_0.f32le");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        let ds = Dataset::open(&dir.path().join(MANIFEST_FILE)).unwrap();
        match ds.samples(0).unwrap_err() {
            Error::Truncated { offset, .. } => assert_eq!(offset as usize, bytes.len() - 6),
            e => panic!("{e}"),
        }
        let mut nan = bytes.clone();
        nan[40..44].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &nan).unwrap();
        assert!(ds
            .samples(0)
            .unwrap_err()
            .to_string()
            .contains("byte offset 40"));

        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(
            Dataset::open(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        fs::write(&path, "sample_rate_hz,12000\n1,2,3\n4,5,6.5\n").unwrap();
        let s = import_csv(&path).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].samples(), [4.0, 5.0, 6.5]);
        assert_eq!(s[0].sample_rate_hz(), 12000.0);
        fs::write(&path, "sample_rate_hz,12000\n1,2,3\n4,x,6\n").unwrap();
        let err = import_csv(&path).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("column 2"), "{err}");
        fs::write(&path, "rate,1\n1,2\n").unwrap();
        assert!(import_csv(&path).is_err());
    }
}
