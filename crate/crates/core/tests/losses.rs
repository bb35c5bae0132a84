mod common;

use common::{check_anchors, check_decompositions, check_loss_oracles, contrastive_direct, rand_tensor, rng};
use fedack::losses::{self, kl_divergence, ProbPair};
use numkit::{Tape, Tensor};
use proptest::prelude::*;

#[test]
fn losses_match_direct_sums() {
    for seed in [3, 4] {
        check_loss_oracles(seed).unwrap();
    }
}

#[test]
fn closed_form_anchors() {
    check_anchors().unwrap();
}

#[test]
fn composites_decompose_into_weighted_parts() {
    check_decompositions(5).unwrap();
}

#[test]
fn contrastive_prefers_the_global_anchor() {
    let mut r = rng(8);
    let x = rand_tensor(&mut r, 6, 4, 1.0);
    let far = rand_tensor(&mut r, 6, 4, 1.0);
    let toward_global = contrastive_direct(&x, &x, &far, 0.5);
    let toward_previous = contrastive_direct(&x, &far, &x, 0.5);
    assert!(toward_global < toward_previous);
}

#[test]
fn empty_batches_are_rejected() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[1, 2]));
    assert!(losses::cls_loss(&mut t, z, &[]).is_err());
    assert!(ProbPair::new(vec![0.5, 0.6], vec![0.5, 0.5]).is_err());
}

fn dist2() -> impl Strategy<Value = Vec<f64>> {
    (0.0f64..1.0).prop_map(|p| vec![p, 1.0 - p])
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(p in dist2(), q in dist2()) {
        let pq = kl_divergence(&ProbPair::new(p.clone(), q).unwrap());
        prop_assert!(pq >= -1e-15);
        let pp = kl_divergence(&ProbPair::new(p.clone(), p).unwrap());
        prop_assert!(pp.abs() < 1e-15);
    }

    #[test]
    fn diversity_stays_in_unit_interval(seed in 0u64..500, n in 1usize..6) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, n, 3, 2.0);
        let z = rand_tensor(&mut r, n, 2, 2.0);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let v = losses::diversity_loss(&mut t, xv, &z).unwrap();
        prop_assert!(t.item(v) > 0.0 && t.item(v) <= 1.0);
    }

    #[test]
    fn contrastive_is_bounded_by_the_temperature(seed in 0u64..500, tau in 0.1f64..2.0) {
        let mut r = rng(seed);
        let (x, g, p) = (rand_tensor(&mut r, 3, 4, 1.0), rand_tensor(&mut r, 3, 4, 1.0), rand_tensor(&mut r, 3, 4, 1.0));
        let v = contrastive_direct(&x, &g, &p, tau);
        prop_assert!(v >= (1.0 + (-2.0 / tau).exp()).ln() - 1e-12);
        prop_assert!(v <= (1.0 + (2.0 / tau).exp()).ln() + 1e-12);
    }
}
