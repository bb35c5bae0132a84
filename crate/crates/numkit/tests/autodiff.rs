use numkit::gradcheck::{max_relative_error, numeric_gradient};
use numkit::{AdamConfig, AdamState, ParamSet, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out[i * m + j] = s;
        }
    }
    out
}

#[test]
fn dense_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, 4, 3);
    let w = rand_tensor(&mut rng, 3, 2);
    let b = Tensor::row(&[0.5, -0.25]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b));
    let y = tape.dense(xv, wv, bv).unwrap();
    let oracle = naive_matmul(&x, &w);
    for (i, (&got, &want)) in tape.value(y).data().iter().zip(&oracle).enumerate() {
        let want = want + if i % 2 == 0 { 0.5 } else { -0.25 };
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_matches_direct_sum() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::row(&[1.0, 2.0, 3.0]));
    let s = tape.softmax(a);
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, &got) in tape.value(s).data().iter().enumerate() {
        assert!((got - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

/// A loss touching every op in the vocabulary.
fn composite_loss(tape: &mut Tape, p: &ParamSet, trainable: bool) -> (numkit::Var, numkit::Bound) {
    let b = tape.bind(p, trainable);
    let x = tape.constant(
        Tensor::matrix(3, 2, vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9]).unwrap(),
    );
    let h = tape.dense(x, b.get("l0.w"), b.get("l0.b")).unwrap();
    let h1 = tape.tanh(h);
    let h2 = tape.leaky_relu(h, 0.2);
    let h3 = tape.relu(h);
    let s = tape.add(h1, h2).unwrap();
    let s = tape.sub(s, h3).unwrap();
    let sig = tape.sigmoid(s);
    let prod = tape.mul(sig, h1).unwrap();
    let cat = tape.concat_cols(prod, s).unwrap();
    let logits = tape.matmul(cat, b.get("l1.w")).unwrap();
    let lsm = tape.log_softmax(logits);
    let picked = tape.gather(lsm, &[0, 1, 0]).unwrap();
    let sm = tape.softmax(logits);
    let cos = tape.cosine_rows(sm, lsm).unwrap();
    let seg_scores = tape.sum_cols(h1);
    let w = tape.segment_softmax(seg_scores, &[0..2, 2..3]).unwrap();
    let pooled = tape.segment_weighted_sum(w, h2, &[0..2, 2..3]).unwrap();
    let dist = tape.pairwise_distance(h);
    let dmean = tape.mean(dist);
    let e = tape.exp(dmean);
    let colmean = tape.mean_rows(pooled);
    let weighted = tape.mul_col(h1, cos).unwrap();
    let parts = [
        tape.sum(picked),
        tape.mean(cos),
        tape.sum(colmean),
        tape.mean(weighted),
        e,
    ];
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p).unwrap();
    }
    let total = tape.scale(total, 0.5);
    (tape.add_scalar(total, 1.0), b)
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let mut p = ParamSet::new();
        p.push("l0.w", rand_tensor(&mut rng, 2, 4)).unwrap();
        p.push("l0.b", Tensor::new(vec![4], (0..4).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap())
            .unwrap();
        p.push("l1.w", rand_tensor(&mut rng, 8, 2)).unwrap();

        let mut tape = Tape::new();
        let (loss, bound) = composite_loss(&mut tape, &p, true);
        let analytic = tape.backward(loss).unwrap().for_bound(&tape, &bound);
        let numeric = numeric_gradient(&p, 1e-5, |q| {
            let mut t = Tape::new();
            let (l, _) = composite_loss(&mut t, q, false);
            t.item(l)
        });
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-3, "relative error {err}");
    }
}

#[test]
fn adam_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut p = ParamSet::new();
        p.push("w", rand_tensor(&mut rng, 3, 3)).unwrap();
        let mut state = AdamState::new(&p, AdamConfig::default());
        for _ in 0..20 {
            let mut tape = Tape::new();
            let b = tape.bind(&p, true);
            let sq = tape.mul(b.get("w"), b.get("w")).unwrap();
            let l = tape.sum(sq);
            let g = tape.backward(l).unwrap();
            state.step(&mut p, &g.for_bound(&tape, &b)).unwrap();
        }
        p
    };
    assert_eq!(run().fingerprint(), run().fingerprint());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-500.0f64..500.0, 1..6), 1..5)) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&rows).unwrap());
        let s = tape.softmax(a);
        let out = tape.value(s);
        for i in 0..out.rows() {
            let row = out.row_slice(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 2..6), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(&row));
        let b = tape.constant(Tensor::row(&shifted));
        let (sa, sb) = (tape.softmax(a), tape.softmax(b));
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
