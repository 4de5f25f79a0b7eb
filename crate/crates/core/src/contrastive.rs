//! Pair construction, cosine similarity and the joint classification plus
//! contrastive objective.
//!
//! A pair `(x_i, x_j)` is labelled `Y = 1` when both windows share a class.
//! Its similarity `S = cos(F(x_i), F(x_j))` is mapped into the unit interval
//! as `S' = clamp((S + 1) / 2, eps, 1 - eps)` and scored with binary
//! cross-entropy. The joint objective is `CE + lambda_con · mean L_con`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::nn::Bound;
use crate::signal::{Dataset, SignalWindow};
use crate::spectral::Backbone;
use crate::tensor::tape::contrastive_value;
use crate::tensor::{Tape, Tensor, Var};

/// Two windows and whether they share a class.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub a: SignalWindow,
    pub b: SignalWindow,
    pub y: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub n_pairs: usize,
    pub lambda_con: f64,
    pub sim_epsilon: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            lambda_con: 0.5,
            sim_epsilon: 1e-6,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_epsilon > 0.0 && self.sim_epsilon < 0.1) {
            return Err(contract(format!(
                "sim_epsilon must lie in (0, 0.1), got {}",
                self.sim_epsilon
            )));
        }
        if !(self.lambda_con >= 0.0 && self.lambda_con.is_finite()) {
            return Err(contract(format!(
                "lambda_con must be nonnegative, got {}",
                self.lambda_con
            )));
        }
        if self.n_pairs == 0 {
            return Err(contract("n_pairs must be positive"));
        }
        Ok(())
    }
}

/// Index pairs over `labels`: `n_pairs / 2` positives, the rest negatives,
/// never pairing an element with itself.
fn balanced_index_pairs(
    labels: &[usize],
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize, u8)>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let populated: Vec<usize> = (0..classes).filter(|&c| !members[c].is_empty()).collect();
    if populated.len() < 2 {
        return Err(Error::Data(
            "pairing needs at least two classes to form negatives".into(),
        ));
    }
    let pos_classes: Vec<usize> = populated
        .iter()
        .copied()
        .filter(|&c| members[c].len() >= 2)
        .collect();
    let n_pos = n_pairs / 2;
    if n_pos > 0 && pos_classes.is_empty() {
        return Err(Error::Data(
            "pairing needs a class with two windows to form positives".into(),
        ));
    }
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pos {
        let c = *pos_classes.choose(rng).unwrap();
        let m = &members[c];
        let a = rng.random_range(0..m.len());
        let mut b = rng.random_range(0..m.len() - 1);
        if b >= a {
            b += 1;
        }
        out.push((m[a], m[b], 1));
    }
    for _ in n_pos..n_pairs {
        let a = rng.random_range(0..labels.len());
        let others = labels.len() - members[labels[a]].len();
        let k = rng.random_range(0..others);
        let b = (0..labels.len())
            .filter(|&j| labels[j] != labels[a])
            .nth(k)
            .unwrap();
        out.push((a, b, 0));
    }
    Ok(out)
}

/// Balanced positive/negative pairs drawn from `train`; deterministic in `seed`.
pub fn make_pairs(train: &Dataset, n_pairs: usize, seed: u64) -> Result<Vec<SamplePair>> {
    if train.len() < 2 {
        return Err(Error::Data("pairing needs at least two windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = balanced_index_pairs(&train.labels(), n_pairs, &mut rng)?;
    let w = train.windows();
    Ok(idx
        .into_iter()
        .map(|(a, b, y)| SamplePair {
            a: w[a].clone(),
            b: w[b].clone(),
            y,
        })
        .collect())
}

/// `u·v / (‖u‖‖v‖)` for two vectors of equal length.
pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.numel() != v.numel() {
        return Err(contract(format!(
            "cosine similarity of lengths {} and {}",
            u.numel(),
            v.numel()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, u.numel()], u.data().to_vec())?);
    let b = tape.constant(Tensor::new(vec![1, v.numel()], v.data().to_vec())?);
    let s = tape.cosine_rows(a, b)?;
    Ok(tape.value(s).data()[0])
}

/// `-(Y ln S' + (1 - Y) ln(1 - S'))` with `S' = clamp((S + 1) / 2, eps, 1 - eps)`.
pub fn contrastive_loss(s: f64, y: u8, eps: f64) -> f64 {
    contrastive_value(s, f64::from(y), eps)
}

/// Loss value and its parts for one batch.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub ce: f64,
    pub con: f64,
    /// The batch held a single class, so only positive pairs were used.
    pub positives_only: bool,
    /// Every label in the batch was distinct, so only negatives were used.
    pub negatives_only: bool,
}

/// In-batch pairs for `labels`, falling back to one-sided sampling when
/// the batch cannot supply both kinds.
fn batch_pairs(
    labels: &[usize],
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<(usize, usize, u8)>, bool, bool) {
    if labels.len() < 2 {
        return (Vec::new(), false, false);
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        let pairs = (0..n_pairs)
            .map(|_| {
                let a = rng.random_range(0..labels.len());
                let mut b = rng.random_range(0..labels.len() - 1);
                if b >= a {
                    b += 1;
                }
                (a, b, 1)
            })
            .collect();
        return (pairs, true, false);
    }
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).all(|w| w[0] != w[1]) {
        // no class repeats: negatives only
        let mut out = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let a = rng.random_range(0..labels.len());
            let mut b = rng.random_range(0..labels.len() - 1);
            if b >= a {
                b += 1;
            }
            out.push((a, b, 0));
        }
        return (out, false, true);
    }
    let pairs =
        balanced_index_pairs(labels, n_pairs, rng).expect("two classes and a repeated class");
    (pairs, false, false)
}

/// Joint objective from precomputed `features [N, D]` and `logits [N, R]`.
pub fn joint_loss_from(
    tape: &mut Tape,
    features: Var,
    logits: Var,
    labels: &[usize],
    config: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<JointLoss> {
    let ce = tape.cross_entropy(logits, labels)?;
    let ce_value = tape.value(ce).data()[0];
    let (pairs, positives_only, negatives_only) = batch_pairs(labels, config.n_pairs, rng);
    if pairs.is_empty() {
        return Ok(JointLoss {
            total: ce,
            ce: ce_value,
            con: 0.0,
            positives_only,
            negatives_only,
        });
    }
    let ia: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ib: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let targets: Vec<f64> = pairs.iter().map(|p| f64::from(p.2)).collect();
    let fa = tape.gather_rows(features, &ia)?;
    let fb = tape.gather_rows(features, &ib)?;
    let s = tape.cosine_rows(fa, fb)?;
    let per_pair = tape.contrastive_ce(s, &targets, config.sim_epsilon)?;
    let con = tape.mean(per_pair);
    let con_value = tape.value(con).data()[0];
    let total = if config.lambda_con == 0.0 {
        ce
    } else {
        let weighted = tape.scale(con, config.lambda_con);
        tape.add(ce, weighted)?
    };
    Ok(JointLoss {
        total,
        ce: ce_value,
        con: con_value,
        positives_only,
        negatives_only,
    })
}

/// Runs `model` on `batch` and builds the joint objective.
pub fn joint_loss(
    tape: &mut Tape,
    model: &Backbone,
    params: &Bound,
    batch: Var,
    labels: &[usize],
    config: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<JointLoss> {
    let (features, logits) = model.forward(tape, params, batch)?;
    joint_loss_from(tape, features, logits, labels, config, rng)
}

/// Mean intra-class minus mean inter-class cosine similarity over all
/// distinct row pairs of `features [N, D]`.
pub fn similarity_margin(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if features.rank() != 2 || features.shape()[0] != n {
        return Err(contract(format!(
            "features {:?} with {n} labels",
            features.shape()
        )));
    }
    let d = features.shape()[1];
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            features.data()[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        let a = &features.data()[i * d..(i + 1) * d];
        for j in i + 1..n {
            let b = &features.data()[j * d..(j + 1) * d];
            let denom = norms[i] * norms[j];
            if denom == 0.0 {
                continue;
            }
            let s = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / denom;
            if labels[i] == labels[j] {
                intra += s;
                n_intra += 1;
            } else {
                inter += s;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::Data(
            "margin needs both same-class and cross-class pairs".into(),
        ));
    }
    Ok(intra / n_intra as f64 - inter / n_inter as f64)
}
