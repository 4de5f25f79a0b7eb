//! Conditional GAN with cascade cross-attention label injection and a
//! discriminator that doubles as a latent encoder.
//!
//! Losses, with `D` the sigmoid of the score logit and `ẑ` the latent head:
//!
//! - `L_D = -[mean ln D(x) + mean ln(1 - D(G(z)))]`
//! - `L_G = -mean ln D(G(z))` (or `mean ln(1 - D(G(z)))` in minimax mode)
//! - `L_CLR = mean ‖ẑ(G(z)) - z‖²`, `L_rec = mean ‖G(ẑ(x)) - x‖²`
//! - discriminator minimises `L_D + λ1·L_CLR`, generator `L_G + λ2·L_rec`.
//!
//! With `λ1 = λ2 = 0` this is a plain conditional DCGAN.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint;
use crate::error::{contract, sizing, Error, Result};
use crate::nn::{init_uniform, Bound, Conv1d, Linear, ParamId, ParamStore};
use crate::signal::{Dataset, Lineage, SignalWindow, WindowMeta, WINDOW_LEN};
use crate::tensor::{AdamConfig, Tape, Tensor, Var};

/// `softmax(F·vᵀ / √d_v)·v` for `f: [P, d_v]` and `v: [R_v, d_v]`, or the
/// batched form `[B, P, d_v]` against `[B, R_v, d_v]`.
pub fn cross_attention(tape: &mut Tape, f: Var, v: Var) -> Result<Var> {
    let (sf, sv) = (tape.shape(f).to_vec(), tape.shape(v).to_vec());
    let ok = sf.len() == sv.len()
        && (sf.len() == 2 || (sf.len() == 3 && sf[0] == sv[0]))
        && sf.last() == sv.last();
    if !ok {
        return Err(sizing(format!("cross_attention of {sf:?} against {sv:?}")));
    }
    let d_v = *sf.last().unwrap();
    let scores = tape.matmul_ex(f, v, true)?;
    let scaled = tape.scale(scores, 1.0 / (d_v as f64).sqrt());
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}

/// Architecture and loss weights of a [`GanBundle`].
#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub classes: usize,
    pub noise_dim: usize,
    /// Channels of the `[N, C0, 16]` seed map.
    pub seed_channels: usize,
    /// Output channels of the three upsampling stages.
    pub stage_channels: [usize; 3],
    pub gen_kernel: usize,
    pub d_v: usize,
    /// Key/value tokens per class in the cross-attention.
    pub label_tokens: usize,
    pub disc_channels: [usize; 3],
    pub disc_kernel: usize,
    /// Broadcast label channels concatenated to the discriminator input.
    pub disc_label_channels: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Generator minimises `mean ln(1 - D(G(z)))` instead of `-mean ln D(G(z))`.
    pub minimax: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            noise_dim: 100,
            seed_channels: 32,
            stage_channels: [32, 16, 8],
            gen_kernel: 5,
            d_v: 64,
            label_tokens: 4,
            disc_channels: [16, 32, 64],
            disc_kernel: 5,
            disc_label_channels: 1,
            lambda1: 1.0,
            lambda2: 1.0,
            minimax: false,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.classes,
            self.noise_dim,
            self.seed_channels,
            self.d_v,
            self.label_tokens,
            self.disc_label_channels,
        ];
        if dims.contains(&0) || self.stage_channels.contains(&0) || self.disc_channels.contains(&0)
        {
            return Err(contract("GAN widths must all be positive"));
        }
        if self.gen_kernel % 2 == 0 || self.disc_kernel % 2 == 0 {
            return Err(contract("GAN kernels must be odd"));
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(contract(format!("{name} must be nonnegative, got {l}")));
            }
        }
        Ok(())
    }
}

const SEED_LEN: usize = 16;
const UPSAMPLE: usize = 4;
const DISC_STRIDE: usize = 4;
const LEAK: f64 = 0.2;

/// Per-position projection to `d_v`, attention against the class tokens,
/// projection back and residual add.
#[derive(Clone, Debug)]
pub struct AttentionInjection {
    pub query: Linear,
    pub out: Linear,
    pub channels: usize,
}

impl AttentionInjection {
    fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, tokens: Var, d_v: usize) -> Result<Var> {
        let (n, c, l) = {
            let s = tape.shape(h);
            (s[0], s[1], s[2])
        };
        let hl = tape.swap_last2(h)?;
        let flat = tape.reshape(hl, &[n * l, c])?;
        let q = self.query.forward(tape, p, flat)?;
        let q = tape.reshape(q, &[n, l, d_v])?;
        let att = cross_attention(tape, q, tokens)?;
        let att = tape.reshape(att, &[n * l, d_v])?;
        let back = self.out.forward(tape, p, att)?;
        let back = tape.reshape(back, &[n, l, c])?;
        let back = tape.swap_last2(back)?;
        tape.add(h, back)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub fc: Linear,
    pub embedding: ParamId,
    pub stages: Vec<(Conv1d, AttentionInjection)>,
    pub to_signal: Conv1d,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub embedding: ParamId,
    pub trunk: Vec<Conv1d>,
    pub score: Linear,
    pub latent: Linear,
}

/// Trainable state of the augmentation stage.
#[derive(Clone, Debug)]
pub struct GanBundle {
    pub config: GanConfig,
    pub gen: Generator,
    pub gen_params: ParamStore,
    pub disc: Discriminator,
    pub disc_params: ParamStore,
    /// Real windows are divided by this before training; generated windows
    /// live in that normalised domain.
    pub data_scale: f64,
}

/// Discriminator outputs before the sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct DiscOut {
    pub logit: Var,
    pub z_hat: Var,
}

impl GanBundle {
    pub fn new(config: GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gs = ParamStore::new();
        let c0 = config.seed_channels;
        let fc = Linear::new(
            &mut gs,
            &mut rng,
            "gen.fc",
            config.noise_dim,
            c0 * SEED_LEN,
            true,
        );
        let embedding = gs.add(
            "gen.embedding",
            init_uniform(
                &mut rng,
                &[config.classes, config.label_tokens * config.d_v],
                1,
                1.0,
            ),
        );
        let mut stages = Vec::with_capacity(3);
        let mut c_in = c0;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            let conv = Conv1d::new(
                &mut gs,
                &mut rng,
                &format!("gen.stage{i}.conv"),
                c_in,
                c,
                config.gen_kernel,
                1,
                true,
            );
            let query = Linear::new(
                &mut gs,
                &mut rng,
                &format!("gen.stage{i}.query"),
                c,
                config.d_v,
                false,
            );
            let out = Linear::new(
                &mut gs,
                &mut rng,
                &format!("gen.stage{i}.out"),
                config.d_v,
                c,
                false,
            );
            stages.push((
                conv,
                AttentionInjection {
                    query,
                    out,
                    channels: c,
                },
            ));
            c_in = c;
        }
        let to_signal = Conv1d::new(
            &mut gs,
            &mut rng,
            "gen.to_signal",
            c_in,
            1,
            config.gen_kernel,
            1,
            true,
        );

        let mut ds = ParamStore::new();
        let e = config.disc_label_channels;
        let d_embedding = ds.add(
            "disc.embedding",
            init_uniform(&mut rng, &[config.classes, e], 1, 1.0),
        );
        let mut trunk = Vec::with_capacity(3);
        let mut c_in = 1 + e;
        for (i, &c) in config.disc_channels.iter().enumerate() {
            trunk.push(Conv1d::new(
                &mut ds,
                &mut rng,
                &format!("disc.conv{i}"),
                c_in,
                c,
                config.disc_kernel,
                DISC_STRIDE,
                true,
            ));
            c_in = c;
        }
        let flat = c_in * Self::disc_trunk_len();
        let score = Linear::new(&mut ds, &mut rng, "disc.score", flat, 1, true);
        let latent = Linear::new(
            &mut ds,
            &mut rng,
            "disc.latent",
            flat,
            config.noise_dim,
            true,
        );
        Ok(Self {
            gen: Generator {
                fc,
                embedding,
                stages,
                to_signal,
            },
            gen_params: gs,
            disc: Discriminator {
                embedding: d_embedding,
                trunk,
                score,
                latent,
            },
            disc_params: ds,
            config,
            data_scale: 1.0,
        })
    }

    fn disc_trunk_len() -> usize {
        WINDOW_LEN / DISC_STRIDE.pow(3)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.classes) {
            return Err(contract(format!(
                "label {bad} outside [0, {})",
                self.config.classes
            )));
        }
        Ok(())
    }

    /// `z: [N, noise_dim]` → `[N, 1, 1024]` in `[-1, 1]`.
    pub fn generate_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        labels: &[usize],
    ) -> Result<Var> {
        self.check_labels(labels)?;
        let cfg = &self.config;
        let zs = tape.shape(z).to_vec();
        if zs != [labels.len(), cfg.noise_dim] {
            return Err(sizing(format!(
                "noise {zs:?} for {} labels and noise dim {}",
                labels.len(),
                cfg.noise_dim
            )));
        }
        let n = labels.len();
        let h = self.gen.fc.forward(tape, p, z)?;
        let mut h = tape.reshape(h, &[n, cfg.seed_channels, SEED_LEN])?;
        let table = p.var(self.gen.embedding);
        let tok = tape.embedding(table, labels)?;
        let tokens = tape.reshape(tok, &[n, cfg.label_tokens, cfg.d_v])?;
        for (conv, att) in &self.gen.stages {
            let up = tape.upsample_nearest(h, UPSAMPLE)?;
            let c = conv.forward(tape, p, up)?;
            let a = tape.swish(c);
            h = att.forward(tape, p, a, tokens, cfg.d_v)?;
        }
        let out = self.gen.to_signal.forward(tape, p, h)?;
        Ok(tape.tanh(out))
    }

    /// Score logits `[N]` and latent estimate `[N, noise_dim]`.
    pub fn discriminate_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        labels: &[usize],
    ) -> Result<DiscOut> {
        self.check_labels(labels)?;
        let xs = tape.shape(x).to_vec();
        if xs != [labels.len(), 1, WINDOW_LEN] {
            return Err(sizing(format!(
                "discriminator expects [{}, 1, {WINDOW_LEN}], got {xs:?}",
                labels.len()
            )));
        }
        let n = labels.len();
        let e = self.config.disc_label_channels;
        let emb = tape.embedding(p.var(self.disc.embedding), labels)?;
        let emb = tape.reshape(emb, &[n, e, 1])?;
        let chan = tape.upsample_nearest(emb, WINDOW_LEN)?;
        let mut h = tape.concat(x, chan)?;
        for conv in &self.disc.trunk {
            let c = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(c, LEAK);
        }
        let flat_len = tape.value(h).numel() / n;
        let flat = tape.reshape(h, &[n, flat_len])?;
        let s = self.disc.score.forward(tape, p, flat)?;
        let logit = tape.reshape(s, &[n])?;
        let z_hat = self.disc.latent.forward(tape, p, flat)?;
        Ok(DiscOut { logit, z_hat })
    }

    /// Generates without gradient tracking.
    pub fn generate(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.gen_params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let y = self.generate_var(&mut tape, &p, zv, labels)?;
        Ok(tape.value(y).clone())
    }

    /// `(sigmoid score [N], ẑ [N, noise_dim])` without gradient tracking.
    pub fn discriminate(&self, x: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.disc_params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.discriminate_var(&mut tape, &p, xv, labels)?;
        let s = tape.sigmoid(out.logit);
        Ok((tape.value(s).clone(), tape.value(out.z_hat).clone()))
    }

    /// Zeros the attention output projections so labels no longer reach
    /// the generator output.
    pub fn zero_attention(&mut self) {
        for (_, att) in &self.gen.stages {
            self.gen_params.get_mut(att.out.weight).data_mut().fill(0.0);
        }
    }

    /// Zeros the score head so `D(x) = 0.5` everywhere.
    pub fn zero_score_head(&mut self) {
        self.disc_params
            .get_mut(self.disc.score.weight)
            .data_mut()
            .fill(0.0);
        if let Some(b) = self.disc.score.bias {
            self.disc_params.get_mut(b).data_mut().fill(0.0);
        }
    }

    /// All parameters followed by a scalar holding `data_scale`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ts: Vec<Tensor> = self.gen_params.tensors().to_vec();
        ts.extend(self.disc_params.tensors().iter().cloned());
        ts.push(Tensor::scalar(self.data_scale));
        checkpoint::write(path, &ts)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut ts = checkpoint::read(path)?;
        let (ng, nd) = (self.gen_params.len(), self.disc_params.len());
        if ts.len() != ng + nd + 1 {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, bundle needs {}",
                ts.len(),
                ng + nd + 1
            )));
        }
        let scale = ts
            .pop()
            .unwrap()
            .item()
            .ok_or_else(|| Error::Format("bad scale entry".into()))?;
        let disc = ts.split_off(ng);
        self.gen_params.load(ts)?;
        self.disc_params.load(disc)?;
        self.data_scale = scale;
        Ok(())
    }
}

/// Loss handles and values for one batch.
#[derive(Clone, Copy, Debug)]
pub struct GanLosses {
    pub d_total: Var,
    pub g_total: Var,
    pub l_d: f64,
    pub l_g: f64,
    pub l_clr: f64,
    pub l_rec: f64,
}

/// `sum((a - b)²) / N` for `[N, ...]` tensors.
fn mean_sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.shape(a)[0];
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n as f64))
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Which objectives [`gan_losses_for`] needs to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Player {
    Discriminator,
    Generator,
    Both,
}

/// Builds both players' objectives on one tape.
///
/// `real: [N, 1, 1024]` with `labels`, `z: [N, noise_dim]`. `gp`/`dp` are
/// the bound generator and discriminator parameters; freezing one side at
/// bind time selects which player receives gradients.
pub fn gan_losses(
    tape: &mut Tape,
    bundle: &GanBundle,
    gp: &Bound,
    dp: &Bound,
    real: Var,
    labels: &[usize],
    z: Var,
) -> Result<GanLosses> {
    gan_losses_for(tape, bundle, gp, dp, real, labels, z, Player::Both)
}

/// As [`gan_losses`], skipping the term the other player does not need:
/// the reconstruction pass for [`Player::Discriminator`] and the latent
/// consistency term for [`Player::Generator`]. Skipped values are NaN and
/// the corresponding total is left unset (equal to the adversarial loss).
#[allow(clippy::too_many_arguments)]
pub fn gan_losses_for(
    tape: &mut Tape,
    bundle: &GanBundle,
    gp: &Bound,
    dp: &Bound,
    real: Var,
    labels: &[usize],
    z: Var,
    player: Player,
) -> Result<GanLosses> {
    let cfg = &bundle.config;
    let fake = bundle.generate_var(tape, gp, z, labels)?;
    let d_real = bundle.discriminate_var(tape, dp, real, labels)?;
    let d_fake = bundle.discriminate_var(tape, dp, fake, labels)?;

    // discriminator: -[mean ln σ(s_r) + mean ln σ(-s_f)]
    let lr = tape.log_sigmoid(d_real.logit);
    let lr = tape.mean(lr);
    let neg_fake = tape.scale(d_fake.logit, -1.0);
    let lf = tape.log_sigmoid(neg_fake);
    let lf = tape.mean(lf);
    let sum = tape.add(lr, lf)?;
    let l_d = tape.scale(sum, -1.0);

    let l_g = if cfg.minimax {
        lf
    } else {
        let g = tape.log_sigmoid(d_fake.logit);
        let g = tape.mean(g);
        tape.scale(g, -1.0)
    };

    let l_clr = match player {
        Player::Generator => None,
        _ => Some(mean_sq_dist(tape, d_fake.z_hat, z)?),
    };
    let l_rec = match player {
        Player::Discriminator => None,
        _ => {
            let recon = bundle.generate_var(tape, gp, d_real.z_hat, labels)?;
            Some(mean_sq_dist(tape, recon, real)?)
        }
    };

    let d_total = match l_clr {
        Some(c) if cfg.lambda1 != 0.0 => {
            let w = tape.scale(c, cfg.lambda1);
            tape.add(l_d, w)?
        }
        _ => l_d,
    };
    let g_total = match l_rec {
        Some(r) if cfg.lambda2 != 0.0 => {
            let w = tape.scale(r, cfg.lambda2);
            tape.add(l_g, w)?
        }
        _ => l_g,
    };
    Ok(GanLosses {
        d_total,
        g_total,
        l_d: scalar(tape, l_d),
        l_g: scalar(tape, l_g),
        l_clr: l_clr.map_or(f64::NAN, |v| scalar(tape, v)),
        l_rec: l_rec.map_or(f64::NAN, |v| scalar(tape, v)),
    })
}

/// One row of a [`LossTrace`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_g: f64,
    pub l_d: f64,
    pub l_clr: f64,
    pub l_rec: f64,
}

/// Per-step adversarial and auxiliary losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: LossRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(contract(format!(
                    "trace steps must increase: {} after {}",
                    r.step, last.step
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Share of steps after the first `warmup` with `L_D < threshold`.
    pub fn fraction_below(&self, threshold: f64, warmup: usize) -> f64 {
        let tail = &self.records[warmup.min(self.records.len())..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().filter(|r| r.l_d < threshold).count() as f64 / tail.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,l_g,l_d,l_clr,l_rec\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e}",
                r.step, r.l_g, r.l_d, r.l_clr, r.l_rec
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("step,l_g,l_d,l_clr,l_rec") {
            return Err(Error::Format(
                "loss trace header must be step,l_g,l_d,l_clr,l_rec".into(),
            ));
        }
        let mut trace = Self::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Format(format!("loss trace row {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad());
            trace.push(LossRecord {
                step: f[0].trim().parse().map_err(|_| bad())?,
                l_g: num(1)?,
                l_d: num(2)?,
                l_clr: num(3)?,
                l_rec: num(4)?,
            })?;
        }
        Ok(trace)
    }
}

/// Optimisation settings for [`train_gan`].
#[derive(Clone, Debug, PartialEq)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
        }
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn check_finite(step: usize, l: &GanLosses, player: Player) -> Result<()> {
    let checks = match player {
        Player::Discriminator => [("L_D", l.l_d), ("L_CLR", l.l_clr)],
        _ => [("L_G", l.l_g), ("L_rec", l.l_rec)],
    };
    for (what, v) in checks {
        if !v.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("{what} = {v}"),
            });
        }
    }
    Ok(())
}

/// Alternating single discriminator / single generator Adam steps.
///
/// Only training-split windows are accepted. Real windows are scaled by
/// `1 / max|x|` of `train`, which is stored in the bundle.
pub fn train_gan(
    bundle: &mut GanBundle,
    train: &Dataset,
    config: &GanTrainConfig,
) -> Result<LossTrace> {
    if train.is_empty() {
        return Err(Error::Data(
            "GAN training needs a non-empty training set".into(),
        ));
    }
    if let Some(w) = train
        .windows()
        .iter()
        .find(|w| w.meta.lineage != Lineage::Train)
    {
        return Err(contract(format!(
            "GAN training received a {:?} window from {}",
            w.meta.lineage, w.meta.source
        )));
    }
    if train.class_count() != bundle.config.classes {
        return Err(contract(format!(
            "dataset has {} classes, bundle {}",
            train.class_count(),
            bundle.config.classes
        )));
    }
    if config.batch_size == 0 {
        return Err(contract("batch_size must be positive"));
    }
    let mut trace = LossTrace::new();
    if config.steps == 0 {
        return Ok(trace);
    }
    let max = train.max_abs();
    bundle.data_scale = if max > 0.0 { max } else { 1.0 };
    let inv = 1.0 / bundle.data_scale;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig::with_lr(config.lr);
    let mut g_state = bundle.gen_params.adam_state();
    let mut d_state = bundle.disc_params.adam_state();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let labels_all = train.labels();
    let b = config.batch_size.min(train.len());

    for step in 0..config.steps {
        if cursor + b > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + b];
        cursor += b;
        let labels: Vec<usize> = idx.iter().map(|&i| labels_all[i]).collect();
        let real = train.batch(idx, inv)?;
        let z = normal_tensor(&mut rng, &[b, bundle.config.noise_dim]);

        // discriminator step, generator frozen
        let mut tape = Tape::new();
        let gp = bundle.gen_params.bind(&mut tape, false);
        let dp = bundle.disc_params.bind(&mut tape, true);
        let rv = tape.constant(real.clone());
        let zv = tape.constant(z.clone());
        let l = gan_losses_for(
            &mut tape,
            bundle,
            &gp,
            &dp,
            rv,
            &labels,
            zv,
            Player::Discriminator,
        )?;
        check_finite(step, &l, Player::Discriminator)?;
        let grads = tape.backward(l.d_total)?;
        let dg = bundle.disc_params.collect_grads(&dp, &grads);
        bundle.disc_params.adam_update(&dg, &mut d_state, &adam)?;

        // generator step, discriminator frozen
        let mut tape = Tape::new();
        let gp = bundle.gen_params.bind(&mut tape, true);
        let dp = bundle.disc_params.bind(&mut tape, false);
        let rv = tape.constant(real);
        let zv = tape.constant(z);
        let l2 = gan_losses_for(
            &mut tape,
            bundle,
            &gp,
            &dp,
            rv,
            &labels,
            zv,
            Player::Generator,
        )?;
        check_finite(step, &l2, Player::Generator)?;
        let grads = tape.backward(l2.g_total)?;
        let gg = bundle.gen_params.collect_grads(&gp, &grads);
        bundle.gen_params.adam_update(&gg, &mut g_state, &adam)?;

        trace.push(LossRecord {
            step,
            l_g: l2.l_g,
            l_d: l.l_d,
            l_clr: l.l_clr,
            l_rec: l2.l_rec,
        })?;
    }
    Ok(trace)
}

/// The comparison baseline: the same networks trained with `λ1 = λ2 = 0`.
pub fn train_dcgan_baseline(
    bundle: &mut GanBundle,
    train: &Dataset,
    config: &GanTrainConfig,
) -> Result<LossTrace> {
    bundle.config.lambda1 = 0.0;
    bundle.config.lambda2 = 0.0;
    train_gan(bundle, train, config)
}

/// `per_class` generated windows for every class, in the normalised domain.
pub fn augment(bundle: &GanBundle, per_class: usize, seed: u64) -> Result<Dataset> {
    const CHUNK: usize = 50;
    let classes = bundle.config.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut windows = Vec::with_capacity(per_class * classes);
    for class in 0..classes {
        let mut done = 0;
        while done < per_class {
            let n = CHUNK.min(per_class - done);
            let z = normal_tensor(&mut rng, &[n, bundle.config.noise_dim]);
            let x = bundle.generate(&z, &vec![class; n])?;
            for (k, row) in x.data().chunks_exact(WINDOW_LEN).enumerate() {
                windows.push(SignalWindow::new(
                    row.to_vec(),
                    class,
                    WindowMeta {
                        source: format!("generated/class{class}"),
                        offset: (done + k) * WINDOW_LEN,
                        lineage: Lineage::Generated,
                    },
                )?);
            }
            done += n;
        }
    }
    Dataset::new(windows, classes)
}
