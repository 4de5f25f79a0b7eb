//! Run configuration, the two-stage orchestration (augmentation, then
//! diagnosis), evaluation reports, the ablation grid and the GAN fairness
//! comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{joint_loss, similarity_margin, ContrastiveConfig};
use crate::error::{Error, Result};
use crate::gan::{
    augment, train_dcgan_baseline, train_gan, GanBundle, GanConfig, GanTrainConfig, LossTrace,
};
use crate::signal::{
    default_class_specs, load_manifest, make_split, synth_dataset, Dataset, FaultSpec, SignalWindow,
};
use crate::spectral::{Backbone, BackboneConfig};
use crate::tensor::{AdamConfig, Tape, Tensor};

/// Training-set sizes per class used throughout the experiments.
pub const SAMPLE_SIZES: [usize; 5] = [20, 50, 100, 150, 200];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub source: DataSource,
    /// Optional CSV of fault specs replacing the built-in ten classes.
    pub spec_file: Option<PathBuf>,
    pub noise_sigma: f64,
    pub sample_size: usize,
    pub test_size: usize,
    pub windows_per_recording: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Toggles {
    pub use_gan_aug: bool,
    pub use_contrastive: bool,
    pub use_fourier_conv: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        use_gan_aug: true,
        use_contrastive: true,
        use_fourier_conv: true,
    };
    pub const ALL_OFF: Toggles = Toggles {
        use_gan_aug: false,
        use_contrastive: false,
        use_fourier_conv: false,
    };

    /// The eight on/off combinations, GAN toggle varying slowest.
    pub fn grid() -> Vec<Toggles> {
        (0..8u8)
            .rev()
            .map(|b| Toggles {
                use_gan_aug: b & 4 != 0,
                use_contrastive: b & 2 != 0,
                use_fourier_conv: b & 1 != 0,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanSettings {
    pub model: GanConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub per_class_generated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSettings {
    pub backbone: BackboneConfig,
    pub lr: f64,
    pub batch_size: usize,
    /// `None` means `100 · 20 / sample_size`.
    pub epochs: Option<usize>,
    pub contrastive: ContrastiveConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSettings {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FairnessSettings {
    pub threshold: f64,
    /// Leading share of steps excluded from the fraction.
    pub warmup_fraction: f64,
}

/// Full description of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSettings,
    pub stages: Toggles,
    pub gan: GanSettings,
    pub classifier: ClassifierSettings,
    pub ablation: AblationSettings,
    pub fairness: FairnessSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data: DataSettings {
                source: DataSource::Synthetic,
                spec_file: None,
                noise_sigma: DEFAULT_NOISE_SIGMA,
                sample_size: 20,
                test_size: 200,
                windows_per_recording: 16,
            },
            stages: Toggles::ALL_ON,
            gan: GanSettings {
                model: GanConfig::default(),
                steps: 2000,
                batch_size: 32,
                lr: 1e-4,
                per_class_generated: 500,
            },
            classifier: ClassifierSettings {
                backbone: BackboneConfig::default(),
                lr: 2e-4,
                batch_size: 64,
                epochs: None,
                contrastive: ContrastiveConfig::default(),
            },
            ablation: AblationSettings {
                sizes: SAMPLE_SIZES.to_vec(),
                seeds: vec![0, 1, 2],
            },
            fairness: FairnessSettings {
                threshold: 0.02,
                warmup_fraction: 0.1,
            },
        }
    }
}

/// Background noise of the built-in synthetic classes.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.5;

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(config_err(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| config_err(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let l: Vec<usize> = parse_list(key, v)?;
    l.try_into()
        .map_err(|_| config_err(format!("{key}: expected three comma-separated values")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one `section.key` (or top-level `key`) from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let g = &mut self.gan.model;
        let b = &mut self.classifier.backbone;
        let c = &mut self.classifier.contrastive;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "output_dir" => self.output_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.source" => {
                self.data.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "manifest" => DataSource::Manifest(match &self.data.source {
                        DataSource::Manifest(p) => p.clone(),
                        DataSource::Synthetic => PathBuf::new(),
                    }),
                    _ => {
                        return Err(config_err(format!(
                            "data.source: expected synthetic or manifest, got {v:?}"
                        )))
                    }
                }
            }
            "data.manifest" => self.data.source = DataSource::Manifest(PathBuf::from(v)),
            "data.spec_file" => self.data.spec_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.noise_sigma" => self.data.noise_sigma = parse_num(key, v)?,
            "data.sample_size" => self.data.sample_size = parse_num(key, v)?,
            "data.test_size" => self.data.test_size = parse_num(key, v)?,
            "data.windows_per_recording" => self.data.windows_per_recording = parse_num(key, v)?,
            "stages.use_gan_aug" => self.stages.use_gan_aug = parse_bool(key, v)?,
            "stages.use_contrastive" => self.stages.use_contrastive = parse_bool(key, v)?,
            "stages.use_fourier_conv" => self.stages.use_fourier_conv = parse_bool(key, v)?,
            "gan.steps" => self.gan.steps = parse_num(key, v)?,
            "gan.batch_size" => self.gan.batch_size = parse_num(key, v)?,
            "gan.lr" => self.gan.lr = parse_num(key, v)?,
            "gan.per_class_generated" => self.gan.per_class_generated = parse_num(key, v)?,
            "gan.noise_dim" => g.noise_dim = parse_num(key, v)?,
            "gan.lambda1" => g.lambda1 = parse_num(key, v)?,
            "gan.lambda2" => g.lambda2 = parse_num(key, v)?,
            "gan.minimax" => g.minimax = parse_bool(key, v)?,
            "gan.seed_channels" => g.seed_channels = parse_num(key, v)?,
            "gan.stage_channels" => g.stage_channels = parse_triple(key, v)?,
            "gan.gen_kernel" => g.gen_kernel = parse_num(key, v)?,
            "gan.d_v" => g.d_v = parse_num(key, v)?,
            "gan.label_tokens" => g.label_tokens = parse_num(key, v)?,
            "gan.disc_channels" => g.disc_channels = parse_triple(key, v)?,
            "gan.disc_kernel" => g.disc_kernel = parse_num(key, v)?,
            "gan.disc_label_channels" => g.disc_label_channels = parse_num(key, v)?,
            "classifier.lr" => self.classifier.lr = parse_num(key, v)?,
            "classifier.batch_size" => self.classifier.batch_size = parse_num(key, v)?,
            "classifier.epochs" => {
                self.classifier.epochs = if v == "auto" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "classifier.channels" => b.channels = parse_num(key, v)?,
            "classifier.strides" => b.strides = parse_list(key, v)?,
            "classifier.local_kernel" => b.local_kernel = parse_num(key, v)?,
            "classifier.lfu_segments" => b.lfu_segments = parse_num(key, v)?,
            "classifier.feature_dim" => b.feature_dim = parse_num(key, v)?,
            "classifier.lambda_con" => c.lambda_con = parse_num(key, v)?,
            "classifier.n_pairs" => c.n_pairs = parse_num(key, v)?,
            "classifier.sim_epsilon" => c.sim_epsilon = parse_num(key, v)?,
            "ablation.sizes" => self.ablation.sizes = parse_list(key, v)?,
            "ablation.seeds" => self.ablation.seeds = parse_list(key, v)?,
            "fairness.threshold" => self.fairness.threshold = parse_num(key, v)?,
            "fairness.warmup_fraction" => self.fairness.warmup_fraction = parse_num(key, v)?,
            _ => return Err(config_err(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines under optional `[section]` headers.
    /// `#` starts a comment. Keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    config_err(format!("line {}: unterminated section header", n + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.set(&key, v)
                .map_err(|e| config_err(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The configuration in the same text format [`RunConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let g = &self.gan.model;
        let b = &self.classifier.backbone;
        let c = &self.classifier.contrastive;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(dir) = &self.output_dir {
            let _ = writeln!(s, "output_dir = {}", dir.display());
        }
        s.push_str("\n[data]\n");
        match &self.data.source {
            DataSource::Synthetic => s.push_str("source = synthetic\n"),
            DataSource::Manifest(p) => {
                let _ = writeln!(s, "source = manifest\nmanifest = {}", p.display());
            }
        }
        if let Some(p) = &self.data.spec_file {
            let _ = writeln!(s, "spec_file = {}", p.display());
        }
        let _ = writeln!(s, "noise_sigma = {}", self.data.noise_sigma);
        let _ = writeln!(s, "sample_size = {}", self.data.sample_size);
        let _ = writeln!(s, "test_size = {}", self.data.test_size);
        let _ = writeln!(
            s,
            "windows_per_recording = {}",
            self.data.windows_per_recording
        );
        let _ = writeln!(
            s,
            "\n[stages]\nuse_gan_aug = {}\nuse_contrastive = {}\nuse_fourier_conv = {}",
            self.stages.use_gan_aug, self.stages.use_contrastive, self.stages.use_fourier_conv
        );
        let _ = writeln!(
            s,
            "\n[gan]\nsteps = {}\nbatch_size = {}\nlr = {}\nper_class_generated = {}\nnoise_dim = {}\n\
             lambda1 = {}\nlambda2 = {}\nminimax = {}\nseed_channels = {}\nstage_channels = {}\n\
             gen_kernel = {}\nd_v = {}\nlabel_tokens = {}\ndisc_channels = {}\ndisc_kernel = {}\n\
             disc_label_channels = {}",
            self.gan.steps,
            self.gan.batch_size,
            self.gan.lr,
            self.gan.per_class_generated,
            g.noise_dim,
            g.lambda1,
            g.lambda2,
            g.minimax,
            g.seed_channels,
            join(&g.stage_channels),
            g.gen_kernel,
            g.d_v,
            g.label_tokens,
            join(&g.disc_channels),
            g.disc_kernel,
            g.disc_label_channels
        );
        let epochs = self
            .classifier
            .epochs
            .map_or("auto".to_string(), |e| e.to_string());
        let _ = writeln!(
            s,
            "\n[classifier]\nlr = {}\nbatch_size = {}\nepochs = {epochs}\nchannels = {}\nstrides = {}\n\
             local_kernel = {}\nlfu_segments = {}\nfeature_dim = {}\nlambda_con = {}\nn_pairs = {}\n\
             sim_epsilon = {}",
            self.classifier.lr,
            self.classifier.batch_size,
            b.channels,
            join(&b.strides),
            b.local_kernel,
            b.lfu_segments,
            b.feature_dim,
            c.lambda_con,
            c.n_pairs,
            c.sim_epsilon
        );
        let _ = writeln!(
            s,
            "\n[ablation]\nsizes = {}\nseeds = {}",
            join(&self.ablation.sizes),
            join(&self.ablation.seeds)
        );
        let _ = writeln!(
            s,
            "\n[fairness]\nthreshold = {}\nwarmup_fraction = {}",
            self.fairness.threshold, self.fairness.warmup_fraction
        );
        s
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| config_err(strip_prefix(&e));
        if !SAMPLE_SIZES.contains(&self.data.sample_size) {
            return Err(config_err(format!(
                "sample_size must be one of {SAMPLE_SIZES:?}, got {}",
                self.data.sample_size
            )));
        }
        if self.data.test_size == 0 {
            return Err(config_err("test_size must be positive"));
        }
        if self.data.windows_per_recording == 0 {
            return Err(config_err("windows_per_recording must be positive"));
        }
        if !(self.data.noise_sigma >= 0.0 && self.data.noise_sigma.is_finite()) {
            return Err(config_err("noise_sigma must be nonnegative"));
        }
        if let DataSource::Manifest(p) = &self.data.source {
            if p.as_os_str().is_empty() {
                return Err(config_err("data.source = manifest needs data.manifest"));
            }
        }
        for (name, lr) in [
            ("gan.lr", self.gan.lr),
            ("classifier.lr", self.classifier.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(config_err(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.gan.batch_size == 0 || self.classifier.batch_size == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        if self.classifier.epochs == Some(0) {
            return Err(config_err("classifier.epochs must be positive or auto"));
        }
        self.gan.model.validate().map_err(wrap)?;
        BackboneConfig {
            classes: self.gan.model.classes,
            ..self.classifier.backbone.clone()
        }
        .validate()
        .map_err(wrap)?;
        self.classifier.contrastive.validate().map_err(wrap)?;
        if self
            .ablation
            .sizes
            .iter()
            .any(|s| !SAMPLE_SIZES.contains(s))
            || self.ablation.seeds.is_empty()
        {
            return Err(config_err(format!(
                "ablation.sizes must be drawn from {SAMPLE_SIZES:?} and seeds must be non-empty"
            )));
        }
        if !(0.0..1.0).contains(&self.fairness.warmup_fraction) || !(self.fairness.threshold > 0.0)
        {
            return Err(config_err(
                "fairness.warmup_fraction must be in [0, 1) and threshold positive",
            ));
        }
        Ok(())
    }

    /// Classifier epochs after resolving `auto`.
    pub fn classifier_epochs(&self) -> usize {
        self.classifier
            .epochs
            .unwrap_or_else(|| (100 * 20 / self.data.sample_size.max(1)).max(1))
    }
}

fn strip_prefix(e: &Error) -> String {
    let s = e.to_string();
    match s.split_once(": ") {
        Some((head, rest)) if head.ends_with("error") || head.ends_with("violation") => {
            rest.to_string()
        }
        _ => s,
    }
}

// ── Fault spec files ─────────────────────────────────────────────────

const SPEC_HEADER: &str =
    "fault_class,impulse_rate_hz,resonance_hz,decay,amplitude,shaft_hz,noise_sigma,sample_rate_hz";

pub fn fault_specs_to_csv(specs: &[FaultSpec]) -> String {
    let mut s = format!("{SPEC_HEADER}\n");
    for f in specs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            f.fault_class,
            f.impulse_rate_hz,
            f.resonance_hz,
            f.decay,
            f.amplitude,
            f.shaft_hz,
            f.noise_sigma,
            f.sample_rate_hz
        );
    }
    s
}

pub fn parse_fault_specs(text: &str) -> Result<Vec<FaultSpec>> {
    let mut lines = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    if lines.next().map(str::trim) != Some(SPEC_HEADER) {
        return Err(Error::Format(format!(
            "fault spec file must start with {SPEC_HEADER}"
        )));
    }
    let mut specs = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("bad fault spec row {line:?}"));
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let spec = FaultSpec {
            fault_class: f[0].parse().map_err(|_| bad())?,
            impulse_rate_hz: num(1)?,
            resonance_hz: num(2)?,
            decay: num(3)?,
            amplitude: num(4)?,
            shaft_hz: num(5)?,
            noise_sigma: num(6)?,
            sample_rate_hz: num(7)?,
        };
        spec.validate()?;
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(Error::Format("fault spec file lists no classes".into()));
    }
    let mut classes: Vec<usize> = specs.iter().map(|s| s.fault_class).collect();
    classes.sort_unstable();
    if classes.iter().enumerate().any(|(i, &c)| i != c) {
        return Err(Error::Format(
            "fault classes must be 0..R, each exactly once".into(),
        ));
    }
    Ok(specs)
}

/// Specs for the synthetic source: the spec file if given, else the
/// built-in ten classes at `data.noise_sigma`.
pub fn synthetic_specs(config: &RunConfig) -> Result<Vec<FaultSpec>> {
    match &config.data.spec_file {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read spec file {}: {e}", p.display())))?;
            parse_fault_specs(&text)
        }
        None => Ok(default_class_specs(config.data.noise_sigma)),
    }
}

// ── Seeds ────────────────────────────────────────────────────────────

#[derive(Clone, Copy)]
enum Stream {
    Data = 1,
    Split,
    GanInit,
    GanTrain,
    Augment,
    ClassifierInit,
    ClassifierTrain,
}

fn sub_seed(seed: u64, stream: Stream) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stream as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

// ── Orchestration ────────────────────────────────────────────────────

/// Full dataset for `config` (before splitting).
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.data.source {
        DataSource::Manifest(p) => load_manifest(p),
        DataSource::Synthetic => {
            let specs = synthetic_specs(config)?;
            let per_class = config.data.sample_size + config.data.test_size;
            synth_dataset(
                &specs,
                per_class,
                config.data.windows_per_recording,
                sub_seed(config.seed, Stream::Data),
            )
        }
    }
}

/// Train/test split of the configured data, deterministic per seed.
pub fn build_split(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let ds = load_dataset(config)?;
    make_split(
        &ds,
        config.data.sample_size,
        config.data.test_size,
        sub_seed(config.seed, Stream::Split),
    )
}

fn gan_bundle_for(config: &RunConfig, classes: usize) -> Result<GanBundle> {
    GanBundle::new(
        GanConfig {
            classes,
            ..config.gan.model.clone()
        },
        sub_seed(config.seed, Stream::GanInit),
    )
}

fn gan_train_config(config: &RunConfig) -> GanTrainConfig {
    GanTrainConfig {
        steps: config.gan.steps,
        batch_size: config.gan.batch_size,
        lr: config.gan.lr,
        seed: sub_seed(config.seed, Stream::GanTrain),
    }
}

/// Trains the augmentation GAN on `train` as configured.
pub fn train_augmenter(config: &RunConfig, train: &Dataset) -> Result<(GanBundle, LossTrace)> {
    let mut bundle = gan_bundle_for(config, train.class_count())?;
    let trace = train_gan(&mut bundle, train, &gan_train_config(config))?;
    Ok((bundle, trace))
}

fn scaled(ds: &Dataset, factor: f64) -> Result<Dataset> {
    let windows = ds
        .windows()
        .iter()
        .map(|w| SignalWindow {
            samples: Tensor::from_vec(w.samples.data().iter().map(|v| v * factor).collect()),
            label: w.label,
            meta: w.meta.clone(),
        })
        .collect();
    Dataset::new(windows, ds.class_count())
}

/// Factor bringing the real training windows to unit RMS. Applied to
/// every classifier input, real or generated, after max-abs scaling.
fn unit_rms_gain(train: &Dataset) -> f64 {
    let (sum, n) = train
        .windows()
        .iter()
        .flat_map(|w| w.samples.data())
        .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    let rms = (sum / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        1.0 / rms
    } else {
        1.0
    }
}

/// Mean classifier losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub con: f64,
}

/// Trains a classifier on `pool` with `steps_per_epoch` batches per epoch.
fn train_classifier(
    config: &RunConfig,
    pool: &Dataset,
    input_gain: f64,
    steps_per_epoch: usize,
) -> Result<(Backbone, Vec<EpochRecord>)> {
    let backbone_cfg = BackboneConfig {
        classes: pool.class_count(),
        fourier: config.stages.use_fourier_conv,
        ..config.classifier.backbone.clone()
    };
    let mut model = Backbone::new(backbone_cfg, sub_seed(config.seed, Stream::ClassifierInit))?;
    let con_cfg = ContrastiveConfig {
        lambda_con: if config.stages.use_contrastive {
            config.classifier.contrastive.lambda_con
        } else {
            0.0
        },
        ..config.classifier.contrastive.clone()
    };
    let adam = AdamConfig::with_lr(config.classifier.lr);
    let mut state = model.store.adam_state();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, Stream::ClassifierTrain));
    let labels_all = pool.labels();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = order.len();
    let batch = config.classifier.batch_size.min(pool.len());
    let mut curves = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.classifier_epochs() {
        let (mut sum_l, mut sum_ce, mut sum_con) = (0.0, 0.0, 0.0);
        for _ in 0..steps_per_epoch {
            if cursor + batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            let labels: Vec<usize> = idx.iter().map(|&i| labels_all[i]).collect();
            let x = pool.batch(idx, input_gain)?;
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, true);
            let xv = tape.constant(x);
            let jl = joint_loss(&mut tape, &model, &p, xv, &labels, &con_cfg, &mut rng)?;
            let total = tape.value(jl.total).data()[0];
            if !total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: format!("classifier loss = {total}"),
                });
            }
            let grads = tape.backward(jl.total)?;
            let g = model.store.collect_grads(&p, &grads);
            model.store.adam_update(&g, &mut state, &adam)?;
            sum_l += total;
            sum_ce += jl.ce;
            sum_con += jl.con;
            step += 1;
        }
        let k = steps_per_epoch as f64;
        curves.push(EpochRecord {
            epoch,
            loss: sum_l / k,
            ce: sum_ce / k,
            con: sum_con / k,
        });
    }
    Ok((model, curves))
}

/// Features and logits of every window, in chunks.
pub fn infer_dataset(model: &Backbone, ds: &Dataset, scale: f64) -> Result<(Tensor, Tensor)> {
    const CHUNK: usize = 128;
    let mut feats = Vec::new();
    let mut logits = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let x = ds.batch(chunk, scale)?;
        let (f, l) = model.infer(&x)?;
        feats.extend_from_slice(f.data());
        logits.extend_from_slice(l.data());
    }
    let n = ds.len();
    let fd = model.config.feature_dim;
    let r = model.config.classes;
    Ok((
        Tensor::new(vec![n, fd], feats)?,
        Tensor::new(vec![n, r], logits)?,
    ))
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let r = logits.shape()[1];
    logits
        .data()
        .chunks(r)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Outcome of one pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub curves: Vec<EpochRecord>,
    pub gan_trace: Option<LossTrace>,
    /// Mean intra-class minus inter-class cosine similarity of test features.
    pub feature_margin: f64,
    pub predictions: Vec<(usize, usize)>,
    pub config_echo: String,
}

impl EvalReport {
    /// Metrics from `(true, predicted)` pairs over `classes` labels.
    pub fn from_predictions(predictions: Vec<(usize, usize)>, classes: usize) -> Result<Self> {
        let mut confusion = vec![vec![0usize; classes]; classes];
        for &(t, p) in &predictions {
            if t >= classes || p >= classes {
                return Err(Error::Data(format!(
                    "prediction ({t}, {p}) outside {classes} classes"
                )));
            }
            confusion[t][p] += 1;
        }
        let total: usize = predictions.len();
        let trace: usize = (0..classes).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[i] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self {
            accuracy: if total == 0 {
                0.0
            } else {
                trace as f64 / total as f64
            },
            per_class_accuracy,
            confusion,
            curves: Vec::new(),
            gan_trace: None,
            feature_margin: f64::NAN,
            predictions,
            config_echo: String::new(),
        })
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy = {}", self.accuracy);
        let _ = writeln!(s, "test_windows = {}", self.predictions.len());
        let _ = writeln!(s, "feature_margin = {}", self.feature_margin);
        let _ = writeln!(s, "per_class_accuracy = {}", join(&self.per_class_accuracy));
        if let Some(t) = &self.gan_trace {
            let _ = writeln!(s, "gan_steps = {}", t.len());
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,loss,ce,con\n");
        for r in &self.curves {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", r.epoch, r.loss, r.ce, r.con);
        }
        s
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("index,true,predicted\n");
        for (i, (t, p)) in self.predictions.iter().enumerate() {
            let _ = writeln!(s, "{i},{t},{p}");
        }
        s
    }

    pub fn parse_predictions(text: &str) -> Result<Vec<(usize, usize)>> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("index,true,predicted") {
            return Err(Error::Format(
                "predictions header must be index,true,predicted".into(),
            ));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').map(str::trim).collect();
                let bad = || Error::Format(format!("bad prediction row {l:?}"));
                if f.len() != 3 {
                    return Err(bad());
                }
                Ok((
                    f[1].parse().map_err(|_| bad())?,
                    f[2].parse().map_err(|_| bad())?,
                ))
            })
            .collect()
    }

    /// Writes every artefact of the report into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("report.txt"), &self.summary())?;
        write_atomic(&dir.join("confusion.csv"), &report_confusion(self))?;
        write_atomic(&dir.join("curves.csv"), &self.curves_csv())?;
        write_atomic(&dir.join("predictions.csv"), &self.predictions_csv())?;
        write_atomic(&dir.join("config.txt"), &self.config_echo)?;
        if let Some(t) = &self.gan_trace {
            write_atomic(&dir.join("loss_trace.csv"), &t.to_csv())?;
        }
        Ok(())
    }
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Confusion matrix as CSV: header row of predicted labels, one row per
/// true label.
pub fn report_confusion(report: &EvalReport) -> String {
    let r = report.confusion.len();
    let mut s = String::from("true\\predicted");
    for j in 0..r {
        let _ = write!(s, ",{j}");
    }
    s.push('\n');
    for (i, row) in report.confusion.iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub report: EvalReport,
    pub classifier: Backbone,
    pub gan: Option<GanBundle>,
}

impl RunArtifacts {
    /// Report files plus `classifier.dacw` and, with augmentation,
    /// `gan.dacw`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.report.write(dir)?;
        crate::checkpoint::write(
            &dir.join("classifier.dacw"),
            self.classifier.store.tensors(),
        )?;
        if let Some(g) = &self.gan {
            g.save(&dir.join("gan.dacw"))?;
        }
        Ok(())
    }
}

/// Runs both stages and evaluates on the held-out split.
pub fn run_pipeline(config: &RunConfig) -> Result<EvalReport> {
    Ok(run_pipeline_with(config, None)?.report)
}

/// As [`run_pipeline`]; a supplied `pretrained` augmenter replaces GAN
/// training when augmentation is on.
pub fn run_pipeline_with(
    config: &RunConfig,
    pretrained: Option<&GanBundle>,
) -> Result<RunArtifacts> {
    config.validate()?;
    let (train, test) = build_split(config)?;
    let max = train.max_abs();
    let scale = if max > 0.0 { max } else { 1.0 };
    let real_count = train.len();
    let mut pool = scaled(&train, 1.0 / scale)?;
    let input_gain = unit_rms_gain(&pool);
    let mut gan_trace = None;
    let mut gan = None;
    if config.stages.use_gan_aug {
        let bundle = match pretrained {
            Some(b) => b.clone(),
            None => {
                let (b, t) = train_augmenter(config, &train)?;
                gan_trace = Some(t);
                b
            }
        };
        let generated = augment(
            &bundle,
            config.gan.per_class_generated,
            sub_seed(config.seed, Stream::Augment),
        )?;
        pool = pool.merged(generated)?;
        gan = Some(bundle);
    }
    let steps_per_epoch = real_count.div_ceil(config.classifier.batch_size).max(1);
    let (model, curves) = train_classifier(config, &pool, input_gain, steps_per_epoch)?;
    let (features, logits) = infer_dataset(&model, &test, input_gain / scale)?;
    let labels = test.labels();
    let preds = argmax_rows(&logits);
    let mut report = EvalReport::from_predictions(
        labels.iter().copied().zip(preds).collect(),
        test.class_count(),
    )?;
    report.curves = curves;
    report.gan_trace = gan_trace;
    report.feature_margin = similarity_margin(&features, &labels).unwrap_or(f64::NAN);
    report.config_echo = config.to_text();
    Ok(RunArtifacts {
        report,
        classifier: model,
        gan,
    })
}

// ── Ablation grid ────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub toggles: Toggles,
    pub sample_size: usize,
    pub seed: u64,
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "use_gan_aug,use_contrastive,use_fourier_conv,sample_size,seed,accuracy,status\n",
        );
        for c in &self.cells {
            let t = c.toggles;
            let (acc, status) = match &c.outcome {
                Ok(a) => (a.to_string(), "ok".to_string()),
                Err(e) => (
                    String::new(),
                    format!("error: {}", e.replace([',', '\n'], ";")),
                ),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{acc},{status}",
                t.use_gan_aug, t.use_contrastive, t.use_fourier_conv, c.sample_size, c.seed
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim)
            != Some("use_gan_aug,use_contrastive,use_fourier_conv,sample_size,seed,accuracy,status")
        {
            return Err(Error::Format("not an ablation table".into()));
        }
        let mut cells = Vec::new();
        for l in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad ablation row {l:?}"));
            if f.len() != 7 {
                return Err(bad());
            }
            let b = |i: usize| parse_bool("ablation", f[i]).map_err(|_| bad());
            cells.push(AblationCell {
                toggles: Toggles {
                    use_gan_aug: b(0)?,
                    use_contrastive: b(1)?,
                    use_fourier_conv: b(2)?,
                },
                sample_size: f[3].parse().map_err(|_| bad())?,
                seed: f[4].parse().map_err(|_| bad())?,
                outcome: if f[6] == "ok" {
                    Ok(f[5].parse().map_err(|_| bad())?)
                } else {
                    Err(f[6].trim_start_matches("error: ").to_string())
                },
            });
        }
        Ok(Self { cells })
    }

    /// Median accuracy over seeds for one toggle setting and size.
    pub fn median_accuracy(&self, toggles: Toggles, sample_size: usize) -> f64 {
        median(
            self.cells
                .iter()
                .filter(|c| c.toggles == toggles && c.sample_size == sample_size)
                .filter_map(|c| c.outcome.as_ref().ok().copied())
                .collect(),
        )
    }

    /// One row per toggle setting: median over seeds at each size, then
    /// the plain mean over sizes.
    pub fn summary_csv(&self) -> String {
        let mut sizes: Vec<usize> = self.cells.iter().map(|c| c.sample_size).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut s = String::from("use_gan_aug,use_contrastive,use_fourier_conv");
        for z in &sizes {
            let _ = write!(s, ",{z}");
        }
        s.push_str(",average\n");
        let mut settings: Vec<Toggles> = Vec::new();
        for c in &self.cells {
            if !settings.contains(&c.toggles) {
                settings.push(c.toggles);
            }
        }
        for t in settings {
            let _ = write!(
                s,
                "{},{},{}",
                t.use_gan_aug, t.use_contrastive, t.use_fourier_conv
            );
            let meds: Vec<f64> = sizes.iter().map(|&z| self.median_accuracy(t, z)).collect();
            for m in &meds {
                let _ = write!(s, ",{m}");
            }
            let _ = writeln!(s, ",{}", meds.iter().sum::<f64>() / meds.len() as f64);
        }
        s
    }
}

/// Runs `base` for every toggle combination, size and seed. A failing cell
/// is recorded and the grid continues. GANs are trained once per
/// `(size, seed)` and shared across the cells that use augmentation.
pub fn ablation_matrix(base: &RunConfig) -> Result<AblationTable> {
    ablation_matrix_with(base, &Toggles::grid(), |_| {})
}

/// As [`ablation_matrix`] over a chosen subset of toggle settings;
/// `progress` sees each finished cell.
pub fn ablation_matrix_with(
    base: &RunConfig,
    settings: &[Toggles],
    mut progress: impl FnMut(&AblationCell),
) -> Result<AblationTable> {
    base.validate()?;
    let mut table = AblationTable::default();
    for &size in &base.ablation.sizes {
        for &seed in &base.ablation.seeds {
            let mut cfg = base.clone();
            cfg.data.sample_size = size;
            cfg.seed = seed;
            let mut gan_cache: Option<std::result::Result<GanBundle, String>> = None;
            for &toggles in settings {
                cfg.stages = toggles;
                let outcome = (|| -> std::result::Result<f64, String> {
                    let pretrained = if toggles.use_gan_aug {
                        let cached = gan_cache.get_or_insert_with(|| {
                            build_split(&cfg)
                                .and_then(|(train, _)| train_augmenter(&cfg, &train))
                                .map(|(b, _)| b)
                                .map_err(|e| e.to_string())
                        });
                        Some(cached.clone()?)
                    } else {
                        None
                    };
                    run_pipeline_with(&cfg, pretrained.as_ref())
                        .map(|a| a.report.accuracy)
                        .map_err(|e| e.to_string())
                })();
                let cell = AblationCell {
                    toggles,
                    sample_size: size,
                    seed,
                    outcome,
                };
                progress(&cell);
                table.cells.push(cell);
            }
        }
    }
    Ok(table)
}

// ── Fairness ─────────────────────────────────────────────────────────

/// CCLR-GAN against the plain conditional DCGAN on identical data, seeds
/// and initial weights.
#[derive(Clone, Debug)]
pub struct FairnessReport {
    pub cclr_trace: LossTrace,
    pub dcgan_trace: LossTrace,
    pub cclr_fraction: f64,
    pub dcgan_fraction: f64,
    pub warmup_steps: usize,
    pub threshold: f64,
    pub cclr: GanBundle,
    pub dcgan: GanBundle,
}

impl FairnessReport {
    pub fn summary(&self) -> String {
        format!(
            "threshold = {}\nwarmup_steps = {}\nsteps = {}\ncclr_fraction = {}\ndcgan_fraction = {}\n",
            self.threshold,
            self.warmup_steps,
            self.cclr_trace.len(),
            self.cclr_fraction,
            self.dcgan_fraction
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("loss_trace_cclr.csv"), &self.cclr_trace.to_csv())?;
        write_atomic(
            &dir.join("loss_trace_dcgan.csv"),
            &self.dcgan_trace.to_csv(),
        )?;
        write_atomic(&dir.join("fairness_summary.txt"), &self.summary())?;
        Ok(())
    }
}

pub fn fairness_report(config: &RunConfig) -> Result<FairnessReport> {
    config.validate()?;
    let (train, _) = build_split(config)?;
    let tc = gan_train_config(config);
    let mut cclr = gan_bundle_for(config, train.class_count())?;
    let mut dcgan = cclr.clone();
    let cclr_trace = train_gan(&mut cclr, &train, &tc)?;
    let dcgan_trace = train_dcgan_baseline(&mut dcgan, &train, &tc)?;
    let warmup_steps = (config.gan.steps as f64 * config.fairness.warmup_fraction).floor() as usize;
    let t = config.fairness.threshold;
    Ok(FairnessReport {
        cclr_fraction: cclr_trace.fraction_below(t, warmup_steps),
        dcgan_fraction: dcgan_trace.fraction_below(t, warmup_steps),
        cclr_trace,
        dcgan_trace,
        warmup_steps,
        threshold: t,
        cclr,
        dcgan,
    })
}

/// Per-class window counts, for logging.
pub fn class_counts(ds: &Dataset) -> BTreeMap<usize, usize> {
    ds.per_class_counts().into_iter().enumerate().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.gan.lr, 1e-4);
        assert_eq!(c.gan.batch_size, 32);
        assert_eq!(c.gan.model.noise_dim, 100);
        assert_eq!(c.gan.per_class_generated, 500);
        assert_eq!(c.classifier.lr, 2e-4);
        assert_eq!(c.classifier.batch_size, 64);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_text_roundtrip() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.output_dir = Some(PathBuf::from("out/x"));
        c.data.source = DataSource::Manifest(PathBuf::from("data/m.txt"));
        c.classifier.epochs = Some(3);
        c.gan.model.stage_channels = [8, 4, 2];
        c.ablation.seeds = vec![4, 5];
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn config_errors_name_the_problem() {
        let e = RunConfig::parse("[gan]\nbogus = 1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("gan.bogus"), "{e}");
        let e = RunConfig::parse("[data]\nsample_size = x\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2"), "{e}");
        let mut c = RunConfig::default();
        c.data.sample_size = 7;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("sample_size"));
    }

    #[test]
    fn auto_epochs_scale_with_size() {
        let mut c = RunConfig::default();
        for (size, e) in [(20, 100), (50, 40), (100, 20), (150, 13), (200, 10)] {
            c.data.sample_size = size;
            assert_eq!(c.classifier_epochs(), e);
        }
    }

    #[test]
    fn toggle_grid_is_complete() {
        let g = Toggles::grid();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], Toggles::ALL_ON);
        assert_eq!(g[7], Toggles::ALL_OFF);
        let mut d = g.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 8);
    }

    #[test]
    fn report_from_perfect_predictions() {
        let preds: Vec<(usize, usize)> = (0..12).map(|i| (i % 3, i % 3)).collect();
        let r = EvalReport::from_predictions(preds, 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(
            r.confusion,
            vec![vec![4, 0, 0], vec![0, 4, 0], vec![0, 0, 4]]
        );
        let csv = report_confusion(&r);
        assert_eq!(csv.lines().next().unwrap(), "true\\predicted,0,1,2");
        assert_eq!(csv.lines().nth(2).unwrap(), "1,0,4,0");
    }

    #[test]
    fn fault_spec_file_roundtrip() {
        let specs = default_class_specs(0.3);
        assert_eq!(
            parse_fault_specs(&fault_specs_to_csv(&specs)).unwrap(),
            specs
        );
        let mut bad = specs.clone();
        bad[2].fault_class = 1;
        assert!(parse_fault_specs(&fault_specs_to_csv(&bad)).is_err());
    }

    #[test]
    fn ablation_csv_roundtrip_and_summary() {
        let mut t = AblationTable::default();
        for (seed, acc) in [(0, 0.5), (1, 0.7), (2, 0.6)] {
            t.cells.push(AblationCell {
                toggles: Toggles::ALL_ON,
                sample_size: 20,
                seed,
                outcome: Ok(acc),
            });
        }
        t.cells.push(AblationCell {
            toggles: Toggles::ALL_OFF,
            sample_size: 20,
            seed: 0,
            outcome: Err("boom, bad".into()),
        });
        let back = AblationTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back.cells.len(), 4);
        assert_eq!(back.median_accuracy(Toggles::ALL_ON, 20), 0.6);
        assert!(back.cells[3].outcome.is_err());
        assert_eq!(t.to_csv().lines().count(), 5);
        assert!(t.summary_csv().contains("true,true,true,0.6,0.6"));
    }
}
