//! Synthetic bearing vibration, fixed-length windowing, train/test
//! splitting and the `VIB1` recording container.
//!
//! The synthetic model is a train of decaying resonances excited at the
//! defect rate, amplitude-modulated by shaft rotation and buried in white
//! Gaussian noise:
//!
//! `x(t) = A · Σ_j e^{-decay·(t-t_j)} sin(2π f_res (t-t_j)) · (1 + 0.3 sin(2π f_shaft t)) + N(0, σ²)`
//!
//! with impulse times `t_j` on a grid of period `1 / impulse_rate_hz`, each
//! jittered by up to ±1 % of the period.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const WINDOW_LEN: usize = 1024;
pub const RECORDING_MAGIC: &[u8; 4] = b"VIB1";

const JITTER: f64 = 0.01;
const MODULATION_DEPTH: f64 = 0.3;
/// Resonance tails are dropped once the envelope falls below this.
const TAIL_CUTOFF: f64 = 1e-9;

/// Parameters of one health state.
#[derive(Clone, Debug, PartialEq)]
pub struct FaultSpec {
    pub fault_class: usize,
    pub impulse_rate_hz: f64,
    pub resonance_hz: f64,
    pub decay: f64,
    pub amplitude: f64,
    pub shaft_hz: f64,
    pub noise_sigma: f64,
    pub sample_rate_hz: f64,
}

impl FaultSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("impulse_rate_hz", self.impulse_rate_hz),
            ("resonance_hz", self.resonance_hz),
            ("decay", self.decay),
            ("shaft_hz", self.shaft_hz),
            ("sample_rate_hz", self.sample_rate_hz),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(contract(format!(
                    "fault spec {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.amplitude >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(contract(
                "fault spec amplitude and noise_sigma must be nonnegative",
            ));
        }
        if self.resonance_hz >= self.sample_rate_hz / 2.0 {
            return Err(contract(format!(
                "resonance {} Hz is above Nyquist for {} Hz sampling",
                self.resonance_hz, self.sample_rate_hz
            )));
        }
        if self.fault_class == 0 && self.amplitude != 0.0 {
            return Err(contract(
                "class 0 (normal) must have zero impulse amplitude",
            ));
        }
        Ok(())
    }
}

/// Ten health states laid out like the CWRU drive-end scheme: 0 normal,
/// 1-3 inner race, 4-6 outer race, 7-9 ball, with severities 0.007, 0.014
/// and 0.021 inch mapped to amplitudes 0.5, 1.0 and 1.5.
///
/// Defect rates are the usual drive-end bearing multiples of a 1797 rpm
/// shaft: BPFI 5.415, BPFO 3.585 and twice BSF 4.714.
pub fn default_class_specs(noise_sigma: f64) -> Vec<FaultSpec> {
    let shaft_hz = 1797.0 / 60.0;
    let base = FaultSpec {
        fault_class: 0,
        impulse_rate_hz: 1.0,
        resonance_hz: 3000.0,
        decay: 800.0,
        amplitude: 0.0,
        shaft_hz,
        noise_sigma,
        sample_rate_hz: 12_000.0,
    };
    let mut specs = vec![base.clone()];
    let kinds = [(5.4152, 3000.0), (3.5848, 2600.0), (4.7135, 3400.0)];
    for (k, &(order, resonance)) in kinds.iter().enumerate() {
        for (s, amplitude) in [0.5, 1.0, 1.5].into_iter().enumerate() {
            specs.push(FaultSpec {
                fault_class: 1 + 3 * k + s,
                impulse_rate_hz: order * shaft_hz,
                resonance_hz: resonance,
                amplitude,
                ..base.clone()
            });
        }
    }
    specs
}

/// Number of samples `floor(duration_s · sample_rate_hz)`, tolerant of
/// the rounding in `k / fs · fs`.
fn sample_count(duration_s: f64, sample_rate_hz: f64) -> usize {
    (duration_s * sample_rate_hz * (1.0 + 1e-12))
        .floor()
        .max(0.0) as usize
}

/// Generates a synthetic recording; deterministic in `(spec, duration_s, seed)`.
pub fn synth_signal(spec: &FaultSpec, duration_s: f64, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let n = sample_count(duration_s, spec.sample_rate_hz);
    if n < WINDOW_LEN {
        return Err(contract(format!(
            "duration {duration_s} s gives {n} samples, fewer than one {WINDOW_LEN}-sample window"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = spec.sample_rate_hz;
    let mut x = vec![0.0; n];

    if spec.amplitude > 0.0 {
        let period = 1.0 / spec.impulse_rate_hz;
        let phase: f64 = rng.random_range(0.0..1.0);
        let tail_len = ((-TAIL_CUTOFF.ln()) / spec.decay * fs).ceil() as usize + 1;
        let duration = n as f64 / fs;
        let mut j = 0usize;
        loop {
            let jitter: f64 = rng.random_range(-JITTER..JITTER);
            let t_j = (j as f64 + phase + jitter) * period;
            if t_j >= duration {
                break;
            }
            let first = (t_j * fs).ceil() as usize;
            for (i, v) in x.iter_mut().enumerate().skip(first).take(tail_len) {
                let t = i as f64 / fs;
                let dt = t - t_j;
                let pulse = (-spec.decay * dt).exp() * (2.0 * PI * spec.resonance_hz * dt).sin();
                let modulation = 1.0 + MODULATION_DEPTH * (2.0 * PI * spec.shaft_hz * t).sin();
                *v += spec.amplitude * pulse * modulation;
            }
            j += 1;
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| contract(format!("noise distribution: {e}")))?;
        for v in &mut x {
            *v += normal.sample(&mut rng);
        }
    }
    Tensor::new(vec![n], x)
}

/// Where a window came from and which split it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lineage {
    /// Cut from a recording, not yet assigned to a split.
    Recorded,
    Train,
    Test,
    /// Produced by a generator.
    Generated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowMeta {
    pub source: String,
    pub offset: usize,
    pub lineage: Lineage,
}

/// One fixed-length labelled segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalWindow {
    pub samples: Tensor,
    pub label: usize,
    pub meta: WindowMeta,
}

impl SignalWindow {
    pub fn new(samples: Vec<f64>, label: usize, meta: WindowMeta) -> Result<Self> {
        if samples.len() != WINDOW_LEN {
            return Err(contract(format!(
                "a window holds exactly {WINDOW_LEN} samples, got {}",
                samples.len()
            )));
        }
        Ok(Self {
            samples: Tensor::from_vec(samples),
            label,
            meta,
        })
    }
}

/// Cuts `signal` into consecutive non-overlapping windows, dropping the tail.
pub fn window(signal: &Tensor, label: usize, source: &str) -> Result<Vec<SignalWindow>> {
    let m = signal.numel();
    if m < WINDOW_LEN {
        return Err(contract(format!(
            "signal of {m} samples is shorter than one {WINDOW_LEN}-sample window"
        )));
    }
    signal
        .data()
        .chunks_exact(WINDOW_LEN)
        .enumerate()
        .map(|(i, chunk)| {
            SignalWindow::new(
                chunk.to_vec(),
                label,
                WindowMeta {
                    source: source.to_string(),
                    offset: i * WINDOW_LEN,
                    lineage: Lineage::Recorded,
                },
            )
        })
        .collect()
}

/// Labelled windows over `class_count` health states.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    windows: Vec<SignalWindow>,
    class_count: usize,
}

impl Dataset {
    pub fn new(windows: Vec<SignalWindow>, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(contract("a dataset needs at least one class"));
        }
        if let Some(w) = windows.iter().find(|w| w.label >= class_count) {
            return Err(Error::Data(format!(
                "label {} outside [0, {class_count}) in {}",
                w.label, w.meta.source
            )));
        }
        Ok(Self {
            windows,
            class_count,
        })
    }

    pub fn empty(class_count: usize) -> Self {
        Self {
            windows: Vec::new(),
            class_count,
        }
    }

    pub fn windows(&self) -> &[SignalWindow] {
        &self.windows
    }

    pub fn into_windows(self) -> Vec<SignalWindow> {
        self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for w in &self.windows {
            counts[w.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.label).collect()
    }

    /// Appends the windows of `other` (same class count).
    pub fn merged(mut self, other: Dataset) -> Result<Self> {
        if other.class_count != self.class_count {
            return Err(contract(
                "cannot merge datasets with different class counts",
            ));
        }
        self.windows.extend(other.windows);
        Ok(self)
    }

    /// `[N, 1, 1024]` batch of the windows at `idx`, each multiplied by `scale`.
    pub fn batch(&self, idx: &[usize], scale: f64) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * WINDOW_LEN);
        for &i in idx {
            data.extend(self.windows[i].samples.data().iter().map(|v| v * scale));
        }
        Tensor::new(vec![idx.len(), 1, WINDOW_LEN], data)
    }

    pub fn max_abs(&self) -> f64 {
        self.windows
            .iter()
            .flat_map(|w| w.samples.data())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Synthetic dataset with `windows_per_class` windows for each spec. Each
/// class is drawn from independent recordings of `windows_per_recording`
/// windows.
pub fn synth_dataset(
    specs: &[FaultSpec],
    windows_per_class: usize,
    windows_per_recording: usize,
    seed: u64,
) -> Result<Dataset> {
    let per_rec = windows_per_recording.max(1);
    let mut windows = Vec::with_capacity(specs.len() * windows_per_class);
    for spec in specs {
        let mut remaining = windows_per_class;
        let mut rec = 0u64;
        while remaining > 0 {
            let count = remaining.min(per_rec);
            let duration = (count * WINDOW_LEN) as f64 / spec.sample_rate_hz;
            let rec_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((spec.fault_class as u64) << 32 | rec);
            let signal = synth_signal(spec, duration, rec_seed)?;
            let source = format!("synth/class{}/rec{rec}", spec.fault_class);
            windows.extend(
                window(&signal, spec.fault_class, &source)?
                    .into_iter()
                    .take(count),
            );
            remaining -= count;
            rec += 1;
        }
    }
    let class_count = specs.iter().map(|s| s.fault_class + 1).max().unwrap_or(1);
    Dataset::new(windows, class_count)
}

/// Splits into exactly `sample_size` training and `test_size` test windows
/// per class; deterministic in `seed`.
pub fn make_split(
    dataset: &Dataset,
    sample_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, w) in dataset.windows.iter().enumerate() {
        by_class[w.label].push(i);
    }
    let need = sample_size + test_size;
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < need {
            return Err(Error::Data(format!(
                "class {class} has {} windows, needs {need} ({sample_size} train + {test_size} test)",
                idx.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(sample_size * dataset.class_count);
    let mut test = Vec::with_capacity(test_size * dataset.class_count);
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        for (k, &i) in idx.iter().take(need).enumerate() {
            let mut w = dataset.windows[i].clone();
            if k < sample_size {
                w.meta.lineage = Lineage::Train;
                train.push(w);
            } else {
                w.meta.lineage = Lineage::Test;
                test.push(w);
            }
        }
    }
    Ok((
        Dataset::new(train, dataset.class_count)?,
        Dataset::new(test, dataset.class_count)?,
    ))
}

// ── VIB1 recordings ──────────────────────────────────────────────────

/// Single-channel recording as stored in a `VIB1` file.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub sample_rate_hz: u32,
    pub label: u32,
    pub samples: Vec<f64>,
}

impl Recording {
    /// Little-endian: magic, `u32` rate, `u32` label, `u64` count, `f64` samples.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.samples.len());
        out.extend_from_slice(RECORDING_MAGIC);
        out.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        out.extend_from_slice(&self.label.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for v in &self.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 20 {
            return Err(Error::Format(format!(
                "recording too short ({} bytes)",
                buf.len()
            )));
        }
        if &buf[0..4] != RECORDING_MAGIC {
            return Err(Error::Format("not a VIB1 recording (bad magic)".into()));
        }
        let sample_rate_hz = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        let label = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        let count = u64::from_le_bytes(buf[12..20].try_into().unwrap());
        let body = &buf[20..];
        if count.checked_mul(8) != Some(body.len() as u64) {
            return Err(Error::Format(format!(
                "header declares {count} samples but body holds {} bytes",
                body.len()
            )));
        }
        let samples = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            sample_rate_hz,
            label,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read recording {}: {e}", path.display())))?;
        Self::decode(&buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Accelerometer channels of the drive-end rig.
pub const CHANNELS: [&str; 3] = ["DE", "FE", "BA"];

/// File holding `channel` of the recording at `base`: `<base>_<CH>.vib`.
pub fn channel_path(base: &Path, channel: &str) -> PathBuf {
    let mut name = base.as_os_str().to_owned();
    name.push(format!("_{channel}.vib"));
    PathBuf::from(name)
}

/// Loads one channel of a converted CWRU recording and windows it.
pub fn load_cwru(base: &Path, channel: &str, label: usize) -> Result<Dataset> {
    if !CHANNELS.contains(&channel) {
        return Err(Error::Data(format!(
            "unknown channel {channel:?}; expected one of {CHANNELS:?}"
        )));
    }
    let path = channel_path(base, channel);
    if !path.exists() {
        return Err(Error::Data(format!(
            "channel {channel} missing: {} does not exist",
            path.display()
        )));
    }
    let rec = Recording::read(&path)?;
    if rec.label as usize != label {
        return Err(Error::Data(format!(
            "{} is labelled {} but the manifest says {label}",
            path.display(),
            rec.label
        )));
    }
    let signal = Tensor::new(vec![rec.samples.len()], rec.samples)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let windows = window(&signal, label, &path.display().to_string())?;
    Dataset::new(windows, label + 1)
}

/// One `path,label,channel` manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub channel: String,
}

/// Parses a manifest; relative paths are resolved against `base_dir`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!(
                "manifest line {}: expected path,label,channel",
                lineno + 1
            )));
        }
        let label = parts[1].parse().map_err(|_| {
            Error::Format(format!(
                "manifest line {}: bad label {:?}",
                lineno + 1,
                parts[1]
            ))
        })?;
        let path = Path::new(parts[0]);
        out.push(ManifestEntry {
            path: if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            },
            label,
            channel: parts[2].to_string(),
        });
    }
    Ok(out)
}

/// Loads every entry of a manifest file into one dataset.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base)?;
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} lists no recordings",
            path.display()
        )));
    }
    let class_count = entries.iter().map(|e| e.label + 1).max().unwrap();
    let mut windows = Vec::new();
    for e in &entries {
        windows.extend(load_cwru(&e.path, &e.channel, e.label)?.into_windows());
    }
    Dataset::new(windows, class_count)
}

/// Per-class window counts keyed by label, for reporting.
pub fn class_histogram(ds: &Dataset) -> BTreeMap<usize, usize> {
    ds.per_class_counts().into_iter().enumerate().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_spec(noise_sigma: f64) -> FaultSpec {
        FaultSpec {
            noise_sigma,
            ..default_class_specs(0.0)[0].clone()
        }
    }

    #[test]
    fn silent_normal_bearing_is_all_zero() {
        let x = synth_signal(&normal_spec(0.0), 0.5, 7).unwrap();
        assert_eq!(x.numel(), 6000);
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_duration_errors() {
        assert!(synth_signal(&normal_spec(1.0), 1000.0 / 12_000.0, 1).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = default_class_specs(0.1)[1].clone();
        s.resonance_hz = 7000.0;
        assert!(s.validate().is_err());
        let mut n = normal_spec(0.1);
        n.amplitude = 0.5;
        assert!(n.validate().is_err());
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let spec = &default_class_specs(0.3)[4];
        let a = synth_signal(spec, 0.2, 11).unwrap();
        let b = synth_signal(spec, 0.2, 11).unwrap();
        let c = synth_signal(spec, 0.2, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn window_counts() {
        let sig = |m: usize| Tensor::from_vec((0..m).map(|i| i as f64).collect());
        assert_eq!(window(&sig(4096), 0, "s").unwrap().len(), 4);
        assert_eq!(window(&sig(1024), 0, "s").unwrap().len(), 1);
        let w = window(&sig(2500), 3, "s").unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].samples.data()[0], 0.0);
        assert_eq!(w[1].samples.data()[0], 1024.0);
        assert_eq!(w[1].samples.data()[1023], 2047.0);
        assert_eq!(w[1].meta.offset, 1024);
        assert!(window(&sig(1023), 0, "s").is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = synth_dataset(&default_class_specs(0.5), 30, 8, 3).unwrap();
        let (train, test) = make_split(&ds, 20, 10, 9).unwrap();
        assert_eq!(train.len(), 200);
        assert_eq!(train.per_class_counts(), vec![20; 10]);
        assert_eq!(test.per_class_counts(), vec![10; 10]);
        let (train2, test2) = make_split(&ds, 20, 10, 9).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert!(train
            .windows()
            .iter()
            .all(|w| w.meta.lineage == Lineage::Train));
        assert!(test
            .windows()
            .iter()
            .all(|w| w.meta.lineage == Lineage::Test));
        for a in train.windows() {
            assert!(!test
                .windows()
                .iter()
                .any(|b| a.meta.source == b.meta.source && a.meta.offset == b.meta.offset));
        }
    }

    #[test]
    fn split_with_zero_train() {
        let ds = synth_dataset(&default_class_specs(0.5)[..3], 5, 5, 1).unwrap();
        let (train, test) = make_split(&ds, 0, 5, 2).unwrap();
        assert!(train.is_empty());
        assert_eq!(test.len(), 15);
    }

    #[test]
    fn split_names_deficient_class() {
        let ds = synth_dataset(&default_class_specs(0.5)[..2], 3, 3, 1).unwrap();
        let err = make_split(&ds, 2, 2, 0).unwrap_err().to_string();
        assert!(err.contains("class 0"), "{err}");
    }

    #[test]
    fn recording_decode_rejects_garbage() {
        assert!(Recording::decode(b"VIB1").is_err());
        let mut bytes = Recording {
            sample_rate_hz: 12_000,
            label: 1,
            samples: vec![1.0, 2.0],
        }
        .encode();
        bytes[12] = 3;
        assert!(Recording::decode(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Recording::decode(&bytes).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\n\nrec/a,1,DE\n/abs/b , 0 , FE\n";
        let entries = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].path, PathBuf::from("/data/rec/a"));
        assert_eq!(entries[1].path, PathBuf::from("/abs/b"));
        assert_eq!(entries[1].channel, "FE");
        assert!(parse_manifest("a,b\n", Path::new(".")).is_err());
        assert!(parse_manifest("a,x,DE\n", Path::new(".")).is_err());
    }
}
