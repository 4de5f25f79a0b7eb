//! Oracles and check suites shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::f64::consts::PI;

use fcdiag::contrastive::{contrastive_loss, cosine_similarity};
use fcdiag::gan::{cross_attention, gan_losses, GanBundle, GanConfig};
use fcdiag::nn::{Bound, Conv1d, ParamStore};
use fcdiag::spectral::{
    FourierUnit, GlobalPath, LocalFourierUnit, SpectralBlock, SpectralBlockConfig,
    SpectrumActivation,
};
use fcdiag::tensor::grad_check;
use fcdiag::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct `O(L²)` evaluation of `Σ x[n] e^{-i2πkn/L}` for `k = 0..=L/2`.
pub fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let l = x.len();
    (0..=l / 2)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &v)| {
                let a = -2.0 * PI * ((k * n) % l) as f64 / l as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

/// Nested-loop cross-correlation of `[N, Ci, L]` with `[Co, Ci, K]`.
pub fn naive_conv1d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (n, ci, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let lo = (l + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; n * co * lo];
    for b in 0..n {
        for o in 0..co {
            for t in 0..lo {
                let mut s = 0.0;
                for c in 0..ci {
                    for j in 0..k {
                        let idx = (t * stride + j) as isize - padding as isize;
                        if idx >= 0 && (idx as usize) < l {
                            s += w.data()[(o * ci + c) * k + j] * x.data()[(b * ci + c) * l + idx as usize];
                        }
                    }
                }
                out[(b * co + o) * lo + t] = s;
            }
        }
    }
    Tensor::new(vec![n, co, lo], out).unwrap()
}

/// Reduces `y` to a scalar through a fixed random weighting so that every
/// output coordinate carries a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.shape(y), seed);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

/// `(case name, worst relative error)` for one gradient check.
pub type GradCase = (&'static str, f64);

fn check<F>(name: &'static str, f: F, params: &[Tensor]) -> GradCase
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let err = grad_check(f, params, GRAD_EPS).unwrap_or_else(|e| panic!("{name}: {e}"));
    (name, err)
}

/// Positive values bounded away from zero, for ops with kinks at zero.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let t = uniform(shape, seed);
    let data = t.data().iter().map(|v| if *v >= 0.0 { v + 0.1 } else { v - 0.1 }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Finite-difference checks of every differentiable primitive.
pub fn primitive_grad_cases() -> Vec<GradCase> {
    let a = uniform(&[3, 4], 1);
    let b = uniform(&[3, 4], 2);
    let x3 = uniform(&[2, 3, 8], 3);
    let mut cases = vec![
        check("add", |t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y, 10) }, &[a.clone(), b.clone()]),
        check("sub", |t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, 11) }, &[a.clone(), b.clone()]),
        check("mul", |t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, 12) }, &[a.clone(), b.clone()]),
        check("scale", |t, v| { let y = t.scale(v[0], -2.5); weighted_sum(t, y, 13) }, &[a.clone()]),
        check(
            "add_bias",
            |t, v| { let y = t.add_bias(v[0], v[1])?; weighted_sum(t, y, 14) },
            &[x3.clone(), uniform(&[3], 4)],
        ),
        check("swish", |t, v| { let y = t.swish(v[0]); weighted_sum(t, y, 15) }, &[uniform(&[2, 5], 5)]),
        check("sigmoid", |t, v| { let y = t.sigmoid(v[0]); weighted_sum(t, y, 16) }, &[uniform(&[2, 5], 6)]),
        check("tanh", |t, v| { let y = t.tanh(v[0]); weighted_sum(t, y, 17) }, &[uniform(&[2, 5], 7)]),
        check(
            "leaky_relu",
            |t, v| { let y = t.leaky_relu(v[0], 0.2); weighted_sum(t, y, 18) },
            &[away_from_zero(&[2, 5], 8)],
        ),
        check("log_sigmoid", |t, v| { let y = t.log_sigmoid(v[0]); weighted_sum(t, y, 19) }, &[uniform(&[2, 5], 9)]),
        check(
            "matmul",
            |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, 20) },
            &[uniform(&[3, 4], 21), uniform(&[4, 2], 22)],
        ),
        check(
            "matmul_transposed",
            |t, v| { let y = t.matmul_ex(v[0], v[1], true)?; weighted_sum(t, y, 23) },
            &[uniform(&[3, 4], 24), uniform(&[5, 4], 25)],
        ),
        check(
            "matmul_batched",
            |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, 26) },
            &[uniform(&[2, 3, 4], 27), uniform(&[2, 4, 2], 28)],
        ),
        check(
            "reshape_swap",
            |t, v| {
                let r = t.reshape(v[0], &[2, 4, 3])?;
                let y = t.swap_last2(r)?;
                weighted_sum(t, y, 29)
            },
            &[uniform(&[2, 3, 4], 30)],
        ),
        check(
            "conv1d",
            |t, v| { let y = t.conv1d(v[0], v[1], 1, 1)?; weighted_sum(t, y, 31) },
            &[uniform(&[2, 3, 10], 32), uniform(&[4, 3, 3], 33)],
        ),
        check(
            "conv1d_strided",
            |t, v| { let y = t.conv1d(v[0], v[1], 2, 2)?; weighted_sum(t, y, 34) },
            &[uniform(&[2, 2, 11], 35), uniform(&[3, 2, 5], 36)],
        ),
        check(
            "softmax_rows",
            |t, v| { let y = t.softmax_rows(v[0])?; weighted_sum(t, y, 37) },
            &[uniform(&[3, 5], 38)],
        ),
        check("sum", |t, v| { let y = t.mul(v[0], v[0])?; Ok(t.sum(y)) }, &[uniform(&[6], 39)]),
        check("mean", |t, v| { let y = t.mul(v[0], v[0])?; Ok(t.mean(y)) }, &[uniform(&[6], 40)]),
        check(
            "mean_last",
            |t, v| { let y = t.mean_last(v[0])?; weighted_sum(t, y, 41) },
            &[x3.clone()],
        ),
        check(
            "gather_rows",
            |t, v| { let y = t.gather_rows(v[0], &[2, 0, 2, 1])?; weighted_sum(t, y, 42) },
            &[uniform(&[3, 4], 43)],
        ),
        check(
            "embedding",
            |t, v| { let y = t.embedding(v[0], &[1, 1, 0, 3])?; weighted_sum(t, y, 44) },
            &[uniform(&[4, 5], 45)],
        ),
        check(
            "upsample_nearest",
            |t, v| { let y = t.upsample_nearest(v[0], 3)?; weighted_sum(t, y, 46) },
            &[uniform(&[2, 2, 4], 47)],
        ),
        check(
            "subsample",
            |t, v| { let y = t.subsample(v[0], 3)?; weighted_sum(t, y, 48) },
            &[x3.clone()],
        ),
        check(
            "concat_narrow",
            |t, v| {
                let c = t.concat(v[0], v[1])?;
                let y = t.narrow(c, 1, 3)?;
                weighted_sum(t, y, 49)
            },
            &[uniform(&[2, 2, 5], 50), uniform(&[2, 3, 5], 51)],
        ),
        check("rfft", |t, v| { let y = t.rfft(v[0])?; weighted_sum(t, y, 52) }, &[uniform(&[2, 2, 16], 53)]),
        check("irfft", |t, v| { let y = t.irfft(v[0])?; weighted_sum(t, y, 54) }, &[uniform(&[2, 4, 9], 55)]),
        check(
            "segment_split_merge",
            |t, v| {
                let s = t.segment_split(v[0], 4)?;
                let w = t.swish(s);
                let y = t.segment_merge(w, 4)?;
                weighted_sum(t, y, 56)
            },
            &[uniform(&[2, 2, 16], 57)],
        ),
        check(
            "cross_entropy",
            |t, v| t.cross_entropy(v[0], &[0, 3, 1]),
            &[uniform(&[3, 4], 58)],
        ),
        check(
            "cosine_rows",
            |t, v| { let y = t.cosine_rows(v[0], v[1])?; weighted_sum(t, y, 59) },
            &[uniform(&[4, 6], 60), uniform(&[4, 6], 61)],
        ),
        check(
            "contrastive_ce",
            |t, v| { let y = t.contrastive_ce(v[0], &[1.0, 0.0, 1.0], 1e-6)?; Ok(t.sum(y)) },
            &[Tensor::from_vec(vec![0.3, -0.4, 0.8])],
        ),
    ];
    cases.sort_by_key(|c| c.0);
    cases
}

fn params_of(store: &ParamStore) -> Vec<Tensor> {
    store.tensors().to_vec()
}

/// Finite-difference checks of the composite layers and objectives.
pub fn composite_grad_cases() -> Vec<GradCase> {
    let mut out = Vec::new();

    // Fourier unit and local Fourier unit, input and weights
    let mut store = ParamStore::new();
    let mut r = rng(100);
    let fu = FourierUnit::new(&mut store, &mut r, "fu", 2, SpectrumActivation::Swish);
    let lfu = LocalFourierUnit::new(&mut store, &mut r, "lfu", 2, 4, SpectrumActivation::Swish);
    let mut params = vec![uniform(&[2, 2, 32], 101)];
    params.extend(params_of(&store));
    out.push(check(
        "fourier_unit",
        |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = fu.forward(t, &p, v[0])?;
            weighted_sum(t, y, 102)
        },
        &params,
    ));
    out.push(check(
        "local_fourier_unit",
        |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = lfu.forward(t, &p, v[0])?;
            weighted_sum(t, y, 103)
        },
        &params,
    ));

    // global path with stride
    let mut store = ParamStore::new();
    let gp = GlobalPath::new(&mut store, &mut rng(104), "g", 4, 2, 2, SpectrumActivation::Swish);
    let mut params = vec![uniform(&[2, 4, 16], 105)];
    params.extend(params_of(&store));
    out.push(check(
        "global_path",
        |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = gp.forward(t, &p, v[0])?;
            weighted_sum(t, y, 106)
        },
        &params,
    ));

    // full dual-path block
    let mut store = ParamStore::new();
    let cfg = SpectralBlockConfig {
        channels: 4,
        stride: 2,
        local_kernel: 3,
        lfu_segments: 2,
        layer_index: 0,
    };
    let block = SpectralBlock::new(&mut store, &mut rng(107), cfg, SpectrumActivation::Swish).unwrap();
    let mut params = vec![uniform(&[2, 4, 16], 108)];
    params.extend(params_of(&store));
    out.push(check(
        "spectral_block",
        |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = block.forward(t, &p, v[0])?;
            weighted_sum(t, y, 109)
        },
        &params,
    ));

    // conv layer with bias through the nn wrapper
    let mut store = ParamStore::new();
    let conv = Conv1d::new(&mut store, &mut rng(110), "c", 2, 3, 3, 2, true);
    let mut params = vec![uniform(&[2, 2, 9], 111)];
    params.extend(params_of(&store));
    out.push(check(
        "conv_layer",
        |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = conv.forward(t, &p, v[0])?;
            weighted_sum(t, y, 112)
        },
        &params,
    ));

    // cross-attention, plain and batched
    out.push(check(
        "cross_attention",
        |t, v| {
            let y = cross_attention(t, v[0], v[1])?;
            weighted_sum(t, y, 113)
        },
        &[uniform(&[5, 4], 114), uniform(&[3, 4], 115)],
    ));
    out.push(check(
        "cross_attention_batched",
        |t, v| {
            let y = cross_attention(t, v[0], v[1])?;
            weighted_sum(t, y, 116)
        },
        &[uniform(&[2, 5, 4], 117), uniform(&[2, 3, 4], 118)],
    ));

    // contrastive loss with respect to both embeddings
    out.push(check(
        "contrastive_loss",
        |t, v| {
            let s = t.cosine_rows(v[0], v[1])?;
            let l = t.contrastive_ce(s, &[1.0, 0.0, 0.0, 1.0], 1e-6)?;
            Ok(t.mean(l))
        },
        &[uniform(&[4, 8], 119), uniform(&[4, 8], 120)],
    ));

    // GAN heads: both totals with respect to every parameter and the input
    let bundle = tiny_gan(121);
    let ng = bundle.gen_params.len();
    let mut params = params_of(&bundle.gen_params);
    params.extend(params_of(&bundle.disc_params));
    params.push(uniform(&[2, bundle.config.noise_dim], 123));
    // normalized windows sit well inside [-1, 1]; a full-scale batch makes
    // the reconstruction term a large constant whose rounding swamps the
    // central differences of the small generator gradients
    let mut real = uniform(&[2, 1, 1024], 122);
    real.data_mut().iter_mut().for_each(|v| *v *= 0.1);
    let np = params.len();
    for (name, use_d) in [("gan_discriminator_total", true), ("gan_generator_total", false)] {
        out.push(check(
            name,
            |t, v| {
                let gp = Bound::from_vars(v[..ng].to_vec());
                let dp = Bound::from_vars(v[ng..np - 1].to_vec());
                let x = t.constant(real.clone());
                let l = gan_losses(t, &bundle, &gp, &dp, x, &[0, 2], v[np - 1])?;
                Ok(if use_d { l.d_total } else { l.g_total })
            },
            &params,
        ));
    }
    out
}

/// A GAN small enough for exhaustive finite differences.
pub fn tiny_gan(seed: u64) -> GanBundle {
    GanBundle::new(
        GanConfig {
            classes: 3,
            noise_dim: 4,
            seed_channels: 3,
            stage_channels: [3, 2, 2],
            gen_kernel: 3,
            d_v: 4,
            label_tokens: 2,
            disc_channels: [2, 2, 3],
            disc_kernel: 3,
            ..GanConfig::default()
        },
        seed,
    )
    .unwrap()
}

/// Output of `f` on `x` and on `x` with sample `pos` of channel 0 moved by
/// `delta`, as the absolute per-position change of `[1, C, L]` outputs.
pub fn probe_change<F>(f: F, x: &Tensor, pos: usize, delta: f64) -> Vec<f64>
where
    F: Fn(&Tensor) -> Tensor,
{
    let base = f(x);
    let mut moved = x.clone();
    moved.data_mut()[pos] += delta;
    let after = f(&moved);
    let c = base.shape()[1];
    let l = base.shape()[2];
    (0..l)
        .map(|t| (0..c).map(|ch| (after.data()[ch * l + t] - base.data()[ch * l + t]).abs()).fold(0.0, f64::max))
        .collect()
}

/// Runs a layer forward on a fresh tape with frozen parameters.
pub fn run_layer<F>(store: &ParamStore, x: &Tensor, f: F) -> Tensor
where
    F: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, &p, xv).unwrap();
    tape.value(y).clone()
}

/// Outcome of one globality or locality probe.
#[derive(Debug)]
pub struct ProbeResult {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

/// Perturbation probes of Fourier-unit globality and local-unit confinement.
pub fn locality_probes() -> Vec<ProbeResult> {
    let mut out = Vec::new();
    for (len, seed) in [(64usize, 200u64), (256, 201), (1024, 202)] {
        let mut store = ParamStore::new();
        let fu = FourierUnit::new(&mut store, &mut rng(seed), "fu", 4, SpectrumActivation::Swish);
        let x = uniform(&[1, 4, len], seed + 10);
        for pos in [0, len / 3, len - 1] {
            let d = probe_change(|x| run_layer(&store, x, |t, p, v| fu.forward(t, p, v)), &x, pos, 1e-3);
            let zero = d.iter().filter(|v| **v == 0.0).count();
            out.push(ProbeResult {
                name: format!("fourier_unit L={len} pos={pos}"),
                ok: zero == 0,
                detail: format!("{zero} unchanged of {len}, min change {:e}", d.iter().cloned().fold(f64::INFINITY, f64::min)),
            });
        }
    }
    for (act, tag) in [(SpectrumActivation::Identity, "identity"), (SpectrumActivation::Swish, "swish")] {
        for identity_mix in [true, false] {
            let mut store = ParamStore::new();
            let lfu = LocalFourierUnit::new(&mut store, &mut rng(210), "lfu", 4, 4, act);
            if identity_mix {
                lfu.unit.set_identity(&mut store);
            }
            let x = uniform(&[1, 4, 64], 211);
            for pos in [3usize, 20, 47, 63] {
                let d = probe_change(|x| run_layer(&store, x, |t, p, v| lfu.forward(t, p, v)), &x, pos, 0.5);
                let seg = pos / 16;
                let outside = d.iter().enumerate().filter(|(t, v)| t / 16 != seg && **v != 0.0).count();
                let inside = d.iter().enumerate().filter(|(t, v)| t / 16 == seg && **v != 0.0).count();
                let mix = if identity_mix { "identity-mix" } else { "random-mix" };
                out.push(ProbeResult {
                    name: format!("local_fourier_unit S=4 L=64 {tag} {mix} pos={pos}"),
                    ok: outside == 0 && inside > 0,
                    detail: format!("segment [{}, {}): {inside} changed inside, {outside} outside", seg * 16, seg * 16 + 16),
                });
            }
        }
    }
    out
}

/// Independent value of the pair loss `-[Y ln S' + (1-Y) ln(1-S')]`.
pub fn contrastive_oracle(s: f64, y: u8, eps: f64) -> f64 {
    let p = ((s + 1.0) / 2.0).clamp(eps, 1.0 - eps);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Randomized monotonicity, symmetry and scale-invariance checks; returns
/// the number of violations per property over `cases` draws.
pub fn contrastive_invariants(cases: usize, seed: u64) -> [(&'static str, usize); 4] {
    let mut r = rng(seed);
    let eps = 1e-6;
    let (mut mono, mut sym, mut scale, mut oracle) = (0, 0, 0, 0);
    for _ in 0..cases {
        let d = r.random_range(2..16);
        let u = Tensor::from_vec((0..d).map(|_| r.random_range(-2.0..2.0)).collect());
        let v = Tensor::from_vec((0..d).map(|_| r.random_range(-2.0..2.0)).collect());
        let s1: f64 = r.random_range(-1.0..1.0);
        let s2: f64 = r.random_range(-1.0..1.0);
        let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
        if contrastive_loss(hi, 1, eps) > contrastive_loss(lo, 1, eps)
            || contrastive_loss(hi, 0, eps) < contrastive_loss(lo, 0, eps)
        {
            mono += 1;
        }
        let a = cosine_similarity(&u, &v).unwrap();
        let b = cosine_similarity(&v, &u).unwrap();
        if (a - b).abs() > 1e-15 {
            sym += 1;
        }
        let k: f64 = r.random_range(0.01..100.0);
        let ku = Tensor::from_vec(u.data().iter().map(|x| x * k).collect());
        let c = cosine_similarity(&ku, &v).unwrap();
        if (a - c).abs() > 1e-12 {
            scale += 1;
        }
        let y = r.random_range(0..2u8);
        if (contrastive_loss(a, y, eps) - contrastive_oracle(a, y, eps)).abs() > 1e-12 {
            oracle += 1;
        }
    }
    [("monotonicity", mono), ("symmetry", sym), ("scale_invariance", scale), ("oracle", oracle)]
}

/// Bundle with real and fake batches for the loss identities.
fn loss_fixture(seed: u64) -> (GanBundle, Tensor, Tensor, Vec<usize>) {
    let bundle = tiny_gan(seed);
    let mut real = uniform(&[4, 1, 1024], seed + 1);
    real.data_mut().iter_mut().for_each(|v| *v *= 0.5);
    let z = uniform(&[4, bundle.config.noise_dim], seed + 2);
    (bundle, real, z, vec![0, 1, 2, 1])
}

fn losses_of(bundle: &GanBundle, real: &Tensor, z: &Tensor, labels: &[usize]) -> fcdiag::gan::GanLosses {
    let mut tape = Tape::new();
    let gp = bundle.gen_params.bind(&mut tape, false);
    let dp = bundle.disc_params.bind(&mut tape, false);
    let rv = tape.constant(real.clone());
    let zv = tape.constant(z.clone());
    gan_losses(&mut tape, bundle, &gp, &dp, rv, labels, zv).unwrap()
}

/// `(L_D, L_G)` with the score head zeroed so that `D(x) = 0.5`.
pub fn equilibrium_losses(seed: u64) -> (f64, f64) {
    let (mut bundle, real, z, labels) = loss_fixture(seed);
    bundle.zero_score_head();
    let l = losses_of(&bundle, &real, &z, &labels);
    (l.l_d, l.l_g)
}

/// Bit patterns of the CCLR totals `(d_total, g_total)` at `λ1 = λ2 = 0`
/// and of the plain adversarial losses `(L_D, L_G)` of the same weights on
/// the same batch with the default weights.
pub fn reduction_bits(seed: u64) -> ([u64; 2], [u64; 2]) {
    let (mut bundle, real, z, labels) = loss_fixture(seed);
    let base = losses_of(&bundle, &real, &z, &labels);
    bundle.config.lambda1 = 0.0;
    bundle.config.lambda2 = 0.0;
    let mut tape = Tape::new();
    let gp = bundle.gen_params.bind(&mut tape, false);
    let dp = bundle.disc_params.bind(&mut tape, false);
    let rv = tape.constant(real);
    let zv = tape.constant(z);
    let l = gan_losses(&mut tape, &bundle, &gp, &dp, rv, &labels, zv).unwrap();
    let cclr = [
        tape.value(l.d_total).data()[0].to_bits(),
        tape.value(l.g_total).data()[0].to_bits(),
    ];
    (cclr, [base.l_d.to_bits(), base.l_g.to_bits()])
}
