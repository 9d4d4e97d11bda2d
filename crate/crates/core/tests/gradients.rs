mod support;

use proptest::prelude::*;
use support::*;
use xtqa::nn::{softmax, AttentionPool, Gru, Mode, ParamStore, Tape, Tensor};

#[test]
fn every_layer_matches_finite_differences() {
    for (name, report) in gradient_suite() {
        assert!(report.checked > 0, "{name}: nothing checked");
        assert!(
            report.max_rel_error < GRAD_TOLERANCE,
            "{name}: relative error {:.3e} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn gru_matches_scalar_recurrence() {
    let mut r = rng(21);
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "gru", 3, 5, &mut r);
    scramble(&mut store, &mut r, 0.7);
    let (batch, steps) = (3, 4);
    let xs: Vec<Vec<f64>> = (0..batch * steps).map(|_| uniform(&mut r, 3, 1.0)).collect();
    let mask: Vec<bool> = (0..batch * steps).map(|i| i % steps < [4, 2, 3][i / steps]).collect();

    let mut tape = Tape::new(&store);
    let flat: Vec<f64> = xs.iter().flatten().copied().collect();
    let x = tape.constant(Tensor::matrix(batch * steps, 3, flat).unwrap());
    let h = gru.forward(&mut tape, x, &mask, batch).unwrap();
    let h = tape.value(h).clone();
    for b in 0..batch {
        let range = b * steps..(b + 1) * steps;
        let expected = gru_oracle(&store, &gru, &xs[range.clone()], &mask[range]);
        for (t, row) in expected.iter().enumerate() {
            for (a, e) in h.row(b * steps + t).iter().zip(row) {
                assert!((a - e).abs() < 1e-12, "batch {b} step {t}: {a} vs {e}");
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&x);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_pool_stays_in_the_box(seed in 0u64..1000, rows in 1usize..8) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let pool = AttentionPool::new(&mut store, "pool", 3, 4, 0.0, &mut r);
        scramble(&mut store, &mut r, 2.0);
        let h = random_matrix(&mut r, rows, 3);
        let mut tape = Tape::new(&store);
        let hv = tape.constant(h.clone());
        let out = pool.forward(&mut tape, hv, &vec![true; rows], &mut Mode::eval()).unwrap();
        let out = tape.value(out).data().to_vec();
        for j in 0..3 {
            let col: Vec<f64> = (0..rows).map(|i| h.row(i)[j]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[j] >= lo - 1e-12 && out[j] <= hi + 1e-12);
        }
    }
}
