//! Dual-path Fourier convolution for 1-D signals.
//!
//! A block splits its channels into a local half `X_l` and a global half
//! `X_g`. The local half is processed by ordinary strided convolutions;
//! the global half by a spectral path (channel reduction, a Fourier Unit
//! and a Local Fourier Unit with a residual sum, channel expansion,
//! subsampling). Cross-path convolutions carry information both ways:
//!
//! `F_l = conv_ll(X_l) + conv_gl(X_g)`, `F_g = global(X_g) + conv_lg(X_l)`,
//! output `swish([F_l, F_g])`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, sizing, Result};
use crate::nn::{Bound, Conv1d, Linear, ParamStore};
use crate::signal::WINDOW_LEN;
use crate::tensor::{Tape, Tensor, Var};

/// Splits `[N, C, L]` into the first and second halves of the channels.
pub fn channel_split(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(sizing(format!(
            "channel_split expects [N, C, L], got {shape:?}"
        )));
    }
    if shape[1] % 2 != 0 {
        return Err(sizing(format!(
            "channel_split needs an even channel count, got {}",
            shape[1]
        )));
    }
    let half = shape[1] / 2;
    Ok((tape.narrow(x, 0, half)?, tape.narrow(x, half, half)?))
}

/// Pointwise nonlinearity applied to the mixed spectrum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpectrumActivation {
    #[default]
    Swish,
    /// No activation; makes an identity mixing conv an exact passthrough.
    Identity,
}

/// Spectral transform, pointwise channel mixing over stacked real and
/// imaginary parts, inverse transform.
#[derive(Clone, Debug)]
pub struct FourierUnit {
    pub mix: Conv1d,
    pub channels: usize,
    pub activation: SpectrumActivation,
}

impl FourierUnit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        activation: SpectrumActivation,
    ) -> Self {
        let c2 = 2 * channels;
        Self {
            mix: Conv1d::new(store, rng, &format!("{name}.mix"), c2, c2, 1, 1, true),
            channels,
            activation,
        }
    }

    /// Sets the mixing conv to the identity and its bias to zero.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let c2 = 2 * self.channels;
        let w = store.get_mut(self.mix.weight).data_mut();
        w.fill(0.0);
        for i in 0..c2 {
            w[i * c2 + i] = 1.0;
        }
        if let Some(b) = self.mix.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(sizing(format!(
                "fourier unit for {} channels got input {shape:?}",
                self.channels
            )));
        }
        // Orthonormal scaling keeps spectra at the magnitude of the signal
        // so the activation works in its nonlinear range.
        let norm = (shape[2] as f64).sqrt();
        let spec = tape.rfft(x)?;
        let spec = tape.scale(spec, 1.0 / norm);
        let mixed = self.mix.forward(tape, p, spec)?;
        let act = match self.activation {
            SpectrumActivation::Swish => tape.swish(mixed),
            SpectrumActivation::Identity => mixed,
        };
        let y = tape.irfft(act)?;
        Ok(tape.scale(y, norm))
    }
}

/// A Fourier Unit applied independently to `segments` equal slices of the
/// signal, with weights shared across slices.
#[derive(Clone, Debug)]
pub struct LocalFourierUnit {
    pub unit: FourierUnit,
    pub segments: usize,
}

impl LocalFourierUnit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        segments: usize,
        activation: SpectrumActivation,
    ) -> Self {
        Self {
            unit: FourierUnit::new(store, rng, name, channels, activation),
            segments,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        if self.segments == 1 {
            return self.unit.forward(tape, p, x);
        }
        let parts = tape.segment_split(x, self.segments)?;
        let y = self.unit.forward(tape, p, parts)?;
        tape.segment_merge(y, self.segments)
    }
}

/// Geometry of one dual-path block.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBlockConfig {
    pub channels: usize,
    pub stride: usize,
    pub local_kernel: usize,
    pub lfu_segments: usize,
    pub layer_index: usize,
}

impl SpectralBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(contract(format!(
                "block {}: channels must be even and positive, got {}",
                self.layer_index, self.channels
            )));
        }
        if self.stride == 0 || self.lfu_segments == 0 {
            return Err(contract(format!(
                "block {}: stride and lfu_segments must be positive",
                self.layer_index
            )));
        }
        if self.local_kernel % 2 == 0 {
            return Err(contract(format!(
                "block {}: local_kernel must be odd, got {}",
                self.layer_index, self.local_kernel
            )));
        }
        Ok(())
    }

    /// Checks that a signal of `len` samples fits the spectral path.
    pub fn check_length(&self, len: usize) -> Result<()> {
        if !len.is_power_of_two()
            || len % self.lfu_segments != 0
            || !(len / self.lfu_segments).is_power_of_two()
        {
            return Err(sizing(format!(
                "block {}: length {len} must be a power of two divisible by {} segments",
                self.layer_index, self.lfu_segments
            )));
        }
        Ok(())
    }
}

/// Spectral path on the global half: `C/2 → C/4`, `y + FU(y) + LFU(y)`,
/// `C/4 → C/2`, subsample by the block stride.
#[derive(Clone, Debug)]
pub struct GlobalPath {
    pub reduce: Conv1d,
    pub fu: FourierUnit,
    pub lfu: LocalFourierUnit,
    pub expand: Conv1d,
    pub stride: usize,
}

impl GlobalPath {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        half: usize,
        stride: usize,
        segments: usize,
        activation: SpectrumActivation,
    ) -> Self {
        let reduced = half.div_ceil(2);
        Self {
            reduce: Conv1d::new(
                store,
                rng,
                &format!("{name}.reduce"),
                half,
                reduced,
                1,
                1,
                true,
            ),
            fu: FourierUnit::new(store, rng, &format!("{name}.fu"), reduced, activation),
            lfu: LocalFourierUnit::new(
                store,
                rng,
                &format!("{name}.lfu"),
                reduced,
                segments,
                activation,
            ),
            expand: Conv1d::new(
                store,
                rng,
                &format!("{name}.expand"),
                reduced,
                half,
                1,
                1,
                true,
            ),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let r = self.reduce.forward(tape, p, x)?;
        let y = tape.swish(r);
        let f = self.fu.forward(tape, p, y)?;
        let l = self.lfu.forward(tape, p, y)?;
        let s = tape.add(y, f)?;
        let s = tape.add(s, l)?;
        // the 1×1 expansion commutes with subsampling, so subsample first
        let s = tape.subsample(s, self.stride)?;
        self.expand.forward(tape, p, s)
    }
}

/// One dual-path block.
#[derive(Clone, Debug)]
pub struct SpectralBlock {
    pub config: SpectralBlockConfig,
    pub l2l: Conv1d,
    pub g2l: Conv1d,
    pub l2g: Conv1d,
    pub global: GlobalPath,
}

impl SpectralBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: SpectralBlockConfig,
        activation: SpectrumActivation,
    ) -> Result<Self> {
        config.validate()?;
        let name = format!("block{}", config.layer_index);
        let half = config.channels / 2;
        let (k, s) = (config.local_kernel, config.stride);
        Ok(Self {
            l2l: Conv1d::new(store, rng, &format!("{name}.l2l"), half, half, k, s, true),
            g2l: Conv1d::new(store, rng, &format!("{name}.g2l"), half, half, k, s, false),
            l2g: Conv1d::new(store, rng, &format!("{name}.l2g"), half, half, k, s, false),
            global: GlobalPath::new(
                store,
                rng,
                &format!("{name}.global"),
                half,
                s,
                config.lfu_segments,
                activation,
            ),
            config,
        })
    }

    /// Zeros both cross-path kernels, decoupling the two halves.
    pub fn zero_cross_paths(&self, store: &mut ParamStore) {
        store.get_mut(self.g2l.weight).data_mut().fill(0.0);
        store.get_mut(self.l2g.weight).data_mut().fill(0.0);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.config.channels {
            return Err(sizing(format!(
                "block {} expects [N, {}, L], got {shape:?}",
                self.config.layer_index, self.config.channels
            )));
        }
        self.config.check_length(shape[2])?;
        let (xl, xg) = channel_split(tape, x)?;
        let ll = self.l2l.forward(tape, p, xl)?;
        let gl = self.g2l.forward(tape, p, xg)?;
        let lg = self.l2g.forward(tape, p, xl)?;
        let gg = self.global.forward(tape, p, xg)?;
        if tape.shape(gg) != tape.shape(lg) {
            return Err(sizing(format!(
                "internal: global path {:?} and cross path {:?} disagree",
                tape.shape(gg),
                tape.shape(lg)
            )));
        }
        let fl = tape.add(ll, gl)?;
        let fg = tape.add(gg, lg)?;
        let cat = tape.concat(fl, fg)?;
        Ok(tape.swish(cat))
    }
}

/// Control block for the Fourier ablation: one strided conv `C → C` with
/// bias, then swish.
#[derive(Clone, Debug)]
pub struct PlainBlock {
    pub conv: Conv1d,
}

impl PlainBlock {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        Ok(tape.swish(y))
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Spectral(SpectralBlock),
    Plain(PlainBlock),
}

/// Classifier backbone settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub channels: usize,
    pub strides: Vec<usize>,
    pub local_kernel: usize,
    pub lfu_segments: usize,
    pub feature_dim: usize,
    pub classes: usize,
    /// Dual-path spectral blocks when set, plain conv blocks otherwise.
    pub fourier: bool,
    pub activation: SpectrumActivation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            strides: vec![4, 2, 1, 1],
            local_kernel: 3,
            lfu_segments: 4,
            feature_dim: 128,
            classes: 10,
            fourier: true,
            activation: SpectrumActivation::Swish,
        }
    }
}

impl BackboneConfig {
    /// Kernel of the plain control blocks, chosen so a plain block has
    /// about as many weights as a spectral block (`≈ 0.75·C²·(K+1)`).
    pub fn plain_kernel(&self) -> usize {
        let k = (0.75 * (self.local_kernel + 1) as f64).round() as usize;
        if k % 2 == 0 {
            k + 1
        } else {
            k.max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.feature_dim == 0 || self.classes == 0 {
            return Err(contract(
                "backbone needs at least one block, a feature dim and a class",
            ));
        }
        let mut len = WINDOW_LEN;
        for (i, &s) in self.strides.iter().enumerate() {
            let cfg = self.block_config(i);
            cfg.validate()?;
            cfg.check_length(len)?;
            len = len.div_ceil(s);
        }
        Ok(())
    }

    fn block_config(&self, i: usize) -> SpectralBlockConfig {
        SpectralBlockConfig {
            channels: self.channels,
            stride: self.strides[i],
            local_kernel: self.local_kernel,
            lfu_segments: self.lfu_segments,
            layer_index: i,
        }
    }

    /// Signal length after each block for a 1024-sample window.
    pub fn block_lengths(&self) -> Vec<usize> {
        let mut len = WINDOW_LEN;
        self.strides
            .iter()
            .map(|&s| {
                len = len.div_ceil(s);
                len
            })
            .collect()
    }
}

/// Stem, blocks, global average pool, feature projection `F(x)` and
/// linear classifier `Z` on `swish(F(x))`.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub store: ParamStore,
    pub stem: Conv1d,
    pub blocks: Vec<Block>,
    pub features: Linear,
    pub head: Linear,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let stem = Conv1d::new(&mut store, &mut rng, "stem", 1, c, 1, 1, true);
        let mut blocks = Vec::with_capacity(config.strides.len());
        for (i, &s) in config.strides.iter().enumerate() {
            blocks.push(if config.fourier {
                Block::Spectral(SpectralBlock::new(
                    &mut store,
                    &mut rng,
                    config.block_config(i),
                    config.activation,
                )?)
            } else {
                let k = config.plain_kernel();
                Block::Plain(PlainBlock {
                    conv: Conv1d::new(
                        &mut store,
                        &mut rng,
                        &format!("block{i}.conv"),
                        c,
                        c,
                        k,
                        s,
                        true,
                    ),
                })
            });
        }
        let features = Linear::new(
            &mut store,
            &mut rng,
            "features",
            c,
            config.feature_dim,
            true,
        );
        let head = Linear::new(
            &mut store,
            &mut rng,
            "head",
            config.feature_dim,
            config.classes,
            true,
        );
        Ok(Self {
            config,
            store,
            stem,
            blocks,
            features,
            head,
        })
    }

    /// `x: [N, 1, 1024]` → `(features [N, feature_dim], logits [N, classes])`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != 1 || shape[2] != WINDOW_LEN {
            return Err(sizing(format!(
                "backbone expects [N, 1, {WINDOW_LEN}], got {shape:?}"
            )));
        }
        let h = self.stem.forward(tape, p, x)?;
        let mut h = tape.swish(h);
        for block in &self.blocks {
            h = match block {
                Block::Spectral(b) => b.forward(tape, p, h)?,
                Block::Plain(b) => b.forward(tape, p, h)?,
            };
        }
        let pooled = tape.mean_last(h)?;
        let f = self.features.forward(tape, p, pooled)?;
        let a = tape.swish(f);
        let logits = self.head.forward(tape, p, a)?;
        Ok((f, logits))
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (f, l) = self.forward(&mut tape, &p, xv)?;
        Ok((tape.value(f).clone(), tape.value(l).clone()))
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn run_unit<F>(store: &ParamStore, x: &Tensor, f: F) -> Tensor
    where
        F: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = f(&mut tape, &p, xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn channel_split_shapes_and_inverse() {
        let x = random(&[2, 16, 64], 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (l, g) = channel_split(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(l), &[2, 8, 64]);
        assert_eq!(tape.shape(g), &[2, 8, 64]);
        let back = tape.concat(l, g).unwrap();
        assert_eq!(tape.value(back), &x);

        let two = tape.constant(random(&[1, 2, 8], 2));
        let (a, b) = channel_split(&mut tape, two).unwrap();
        assert_eq!(tape.shape(a), &[1, 1, 8]);
        assert_eq!(tape.shape(b), &[1, 1, 8]);

        let odd = tape.constant(random(&[1, 3, 8], 3));
        assert!(channel_split(&mut tape, odd).is_err());
    }

    #[test]
    fn identity_fourier_unit_is_passthrough() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fu = FourierUnit::new(&mut store, &mut rng, "fu", 8, SpectrumActivation::Identity);
        fu.set_identity(&mut store);
        let x = random(&[2, 8, 64], 5);
        let y = run_unit(&store, &x, |t, p, v| fu.forward(t, p, v));
        assert_eq!(y.shape(), &[2, 8, 64]);
        assert!(y.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn lfu_with_one_segment_equals_fu() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lfu =
            LocalFourierUnit::new(&mut store, &mut rng, "lfu", 8, 1, SpectrumActivation::Swish);
        let x = random(&[2, 8, 64], 7);
        let a = run_unit(&store, &x, |t, p, v| lfu.forward(t, p, v));
        let b = run_unit(&store, &x, |t, p, v| lfu.unit.forward(t, p, v));
        assert_eq!(a, b);
        for s in [1, 2, 4] {
            let mut st = ParamStore::new();
            let u =
                LocalFourierUnit::new(&mut st, &mut rng, "lfu", 8, s, SpectrumActivation::Swish);
            assert_eq!(
                run_unit(&st, &x, |t, p, v| u.forward(t, p, v)).shape(),
                &[2, 8, 64]
            );
        }
    }

    #[test]
    fn global_path_lengths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (stride, len, out) in [(1, 64, 64), (4, 1024, 256)] {
            let g = GlobalPath::new(
                &mut store,
                &mut rng,
                "g",
                4,
                stride,
                4,
                SpectrumActivation::Swish,
            );
            let y = run_unit(&store, &random(&[1, 4, len], 9), |t, p, v| {
                g.forward(t, p, v)
            });
            assert_eq!(y.shape(), &[1, 4, out]);
        }
    }

    #[test]
    fn block_shape_and_stride() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = SpectralBlockConfig {
            channels: 16,
            stride: 4,
            local_kernel: 3,
            lfu_segments: 4,
            layer_index: 0,
        };
        let b = SpectralBlock::new(&mut store, &mut rng, cfg, SpectrumActivation::Swish).unwrap();
        let y = run_unit(&store, &random(&[4, 16, 1024], 11), |t, p, v| {
            b.forward(t, p, v)
        });
        assert_eq!(y.shape(), &[4, 16, 256]);
    }

    #[test]
    fn block_config_rejects_bad_geometry() {
        let ok = SpectralBlockConfig {
            channels: 8,
            stride: 1,
            local_kernel: 3,
            lfu_segments: 4,
            layer_index: 0,
        };
        assert!(ok.validate().is_ok());
        assert!(SpectralBlockConfig {
            channels: 7,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SpectralBlockConfig {
            local_kernel: 4,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(ok.check_length(96).is_err());
        assert!(SpectralBlockConfig {
            lfu_segments: 3,
            ..ok
        }
        .check_length(64)
        .is_err());
    }

    #[test]
    fn backbone_shapes_and_lengths() {
        let cfg = BackboneConfig {
            channels: 8,
            classes: 5,
            ..BackboneConfig::default()
        };
        assert_eq!(cfg.block_lengths(), vec![256, 128, 128, 128]);
        let bb = Backbone::new(cfg, 1).unwrap();
        let (f, l) = bb.infer(&random(&[2, 1, 1024], 12)).unwrap();
        assert_eq!(f.shape(), &[2, 128]);
        assert_eq!(l.shape(), &[2, 5]);
        assert!(bb.infer(&random(&[2, 1, 512], 13)).is_err());
    }

    #[test]
    fn plain_backbone_parameter_matched() {
        for channels in [16, 32] {
            let spectral = Backbone::new(
                BackboneConfig {
                    channels,
                    ..Default::default()
                },
                0,
            )
            .unwrap();
            let plain = Backbone::new(
                BackboneConfig {
                    channels,
                    fourier: false,
                    ..Default::default()
                },
                0,
            )
            .unwrap();
            let ratio = plain.parameter_count() as f64 / spectral.parameter_count() as f64;
            assert!((0.9..=1.1).contains(&ratio), "C={channels}: ratio {ratio}");
        }
    }

    #[test]
    fn fourier_unit_grad_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let fu = FourierUnit::new(&mut store, &mut rng, "fu", 2, SpectrumActivation::Swish);
        let mut params = vec![random(&[1, 2, 16], 15)];
        params.extend(store.tensors().iter().cloned());
        let err = grad_check(
            |tape, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let y = fu.forward(tape, &p, v[0])?;
                let y2 = tape.mul(y, y)?;
                Ok(tape.sum(y2))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
