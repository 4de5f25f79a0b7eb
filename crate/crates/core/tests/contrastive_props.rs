mod common;

use common::{contrastive_invariants, contrastive_oracle, rng, uniform};
use fcdiag::contrastive::{
    contrastive_loss, cosine_similarity, joint_loss_from, make_pairs, similarity_margin,
    ContrastiveConfig,
};
use fcdiag::signal::{default_class_specs, make_split, synth_dataset};
use fcdiag::{Tape, Tensor};
use proptest::prelude::*;

#[test]
fn invariants_hold_over_ten_thousand_cases() {
    for (name, violations) in contrastive_invariants(10_000, 17) {
        assert_eq!(violations, 0, "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn loss_matches_closed_form(s in -1.0..=1.0f64, y in 0u8..2, eps_exp in 3i32..9) {
        let eps = 10f64.powi(-eps_exp);
        prop_assert!((contrastive_loss(s, y, eps) - contrastive_oracle(s, y, eps)).abs() < 1e-12);
        prop_assert!(contrastive_loss(s, y, eps).is_finite());
    }

    #[test]
    fn tape_gradient_matches_analytic_derivative(s in -0.99..0.99f64, y in 0u8..2) {
        // d/ds of -ln((s+1)/2) is -1/(s+1); of -ln((1-s)/2) is 1/(1-s)
        let mut tape = Tape::new();
        let sv = tape.param(Tensor::from_vec(vec![s]));
        let l = tape.contrastive_ce(sv, &[f64::from(y)], 1e-9).unwrap();
        let loss = tape.sum(l);
        let g = tape.backward(loss).unwrap().get(sv).unwrap()[0];
        let expect = if y == 1 { -1.0 / (s + 1.0) } else { 1.0 / (1.0 - s) };
        prop_assert!((g - expect).abs() < 1e-5 * expect.abs().max(1.0));
    }

    #[test]
    fn cosine_rows_match_scalar_cosine(seed in any::<u64>(), d in 1usize..12) {
        let a = uniform(&[3, d], seed);
        let b = uniform(&[3, d], seed ^ 5);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let s = tape.cosine_rows(av, bv).unwrap();
        for i in 0..3 {
            let expect = cosine_similarity(&Tensor::from_vec(a.row(i).to_vec()), &Tensor::from_vec(b.row(i).to_vec())).unwrap();
            prop_assert!((tape.value(s).data()[i] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn clamping_keeps_extremes_finite() {
    let eps = 1e-6;
    assert!((contrastive_loss(-1.0, 1, eps) + eps.ln()).abs() < 1e-12);
    assert_eq!(contrastive_loss(1.0, 0, eps), -(1.0 - (1.0 - eps)).ln());
    assert!(contrastive_loss(1.0, 1, eps) < 1e-5);
}

#[test]
fn cosine_of_zero_vector_is_an_error() {
    let z = Tensor::from_vec(vec![0.0; 3]);
    let v = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
    assert!(cosine_similarity(&z, &v).is_err());
}

#[test]
fn pairs_are_balanced_and_never_self() {
    let ds = synth_dataset(&default_class_specs(0.5)[..4], 6, 6, 3).unwrap();
    let (train, _) = make_split(&ds, 5, 1, 4).unwrap();
    let pairs = make_pairs(&train, 40, 9).unwrap();
    assert_eq!(pairs.len(), 40);
    assert_eq!(pairs.iter().filter(|p| p.y == 1).count(), 20);
    for p in &pairs {
        assert_eq!(p.y == 1, p.a.label == p.b.label);
        assert_ne!((p.a.meta.source.as_str(), p.a.meta.offset), (p.b.meta.source.as_str(), p.b.meta.offset));
    }
    assert_eq!(pairs, make_pairs(&train, 40, 9).unwrap());
}

#[test]
fn margin_of_hand_built_features() {
    // two tight clusters on orthogonal axes: intra 1, inter 0
    let f = Tensor::new(vec![4, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0]).unwrap();
    assert!((similarity_margin(&f, &[0, 0, 1, 1]).unwrap() - 1.0).abs() < 1e-15);
    let mixed = similarity_margin(&f, &[0, 1, 0, 1]).unwrap();
    assert!((mixed - (0.0 - 0.5)).abs() < 1e-15, "{mixed}");
}

#[test]
fn zero_weight_reduces_to_cross_entropy() {
    let feats = uniform(&[8, 5], 1);
    let logits = uniform(&[8, 3], 2);
    let labels = [0, 1, 2, 0, 1, 2, 0, 1];
    let mut tape = Tape::new();
    let (f, l) = (tape.constant(feats), tape.constant(logits));
    let off = ContrastiveConfig { lambda_con: 0.0, ..ContrastiveConfig::default() };
    let j = joint_loss_from(&mut tape, f, l, &labels, &off, &mut rng(3)).unwrap();
    let ce = tape.cross_entropy(l, &labels).unwrap();
    assert_eq!(tape.value(j.total).data(), tape.value(ce).data());
    let on = ContrastiveConfig::default();
    let j2 = joint_loss_from(&mut tape, f, l, &labels, &on, &mut rng(3)).unwrap();
    let total = tape.value(j2.total).data()[0];
    assert!((total - (j2.ce + 0.5 * j2.con)).abs() < 1e-12);
}
