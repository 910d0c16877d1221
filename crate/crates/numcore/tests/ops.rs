use numcore::gradcheck::{self, op_suite};
use numcore::{NumError, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matmul_identity_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::uniform([3, 3], 2.0, &mut rng).unwrap();
    let mut tape = Tape::new();
    let i = tape.leaf(&Tensor::identity(3).unwrap());
    let av = tape.leaf(&a);
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), a.values());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant([4], vec![0.0; 4]).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y), &[0.25; 4]);
}

#[test]
fn conv1d_matches_sliding_window_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (len, ch, width, maps) = (5, 2, 3, 2);
    let x = Tensor::uniform([len, ch], 1.0, &mut rng).unwrap();
    let w = Tensor::uniform([width * ch, maps], 1.0, &mut rng).unwrap();
    let b = Tensor::uniform([maps], 1.0, &mut rng).unwrap();
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    let y = tape.conv1d(xv, wv, bv).unwrap();
    assert_eq!(tape.shape(y), &[3, maps]);

    // direct sliding window
    for s in 0..len - width + 1 {
        for f in 0..maps {
            let mut acc = b.values()[f];
            for off in 0..width {
                for c in 0..ch {
                    acc += x.values()[(s + off) * ch + c] * w.values()[(off * ch + c) * maps + f];
                }
            }
            assert!((tape.value(y)[s * maps + f] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0).requires_grad());
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[6.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new([5], vec![0.3, -1.0, 2.0, 0.0, 0.7]).unwrap().requires_grad());
    let y = tape.softmax(x, 0).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(x).unwrap().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant([2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant([2, 3], vec![0.0; 6]).unwrap();
    assert_eq!(
        tape.matmul(a, b),
        Err(NumError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        })
    );
    let c = tape.constant([3, 2], vec![0.0; 6]).unwrap();
    assert!(matches!(tape.add(a, c), Err(NumError::Shape { op: "add", .. })));
}

#[test]
fn all_masked_softmax_row_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(
        tape.masked_softmax(x, &[1.0, 0.0, 0.0, 0.0]),
        Err(NumError::AllMasked {
            op: "masked_softmax",
            row: 1
        })
    );
    assert_eq!(
        tape.masked_softmax(x, &[1.0, 0.5, 1.0, 1.0]),
        Err(NumError::BadMask { op: "masked_softmax" })
    );
}

#[test]
fn masked_softmax_zeroes_masked_positions() {
    let mut tape = Tape::new();
    let x = tape.constant([1, 3], vec![5.0, 1.0, 1.0]).unwrap();
    let y = tape.masked_softmax(x, &[0.0, 1.0, 1.0]).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.5, 0.5]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros([2]).unwrap().requires_grad());
    let y = tape.tanh(x);
    assert_eq!(tape.backward(y).unwrap_err(), NumError::NonScalarLoss(vec![2]));
}

#[test]
fn constants_are_not_recorded_for_backward() {
    let mut tape = Tape::new();
    let a = tape.constant([2], vec![1.0, 2.0]).unwrap();
    let b = tape.tanh(a);
    assert!(!tape.requires_grad(b));
    let s = tape.sum(b);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(a).is_none());
}

#[test]
fn every_op_passes_finite_differences() {
    let reports = op_suite(2024, 100).unwrap();
    assert_eq!(reports.len(), gradcheck::OPS.len());
    for r in &reports {
        assert!(r.max_rel_error < 1e-4, "{}: {:e}", r.op, r.max_rel_error);
    }
}

proptest! {
    #[test]
    fn softmax_rows_normalize(vals in prop::collection::vec(-30.0f64..30.0, 12), axis in 0usize..2) {
        let mut tape = Tape::new();
        let x = tape.constant([3, 4], vals).unwrap();
        let y = tape.softmax(x, axis).unwrap();
        let ly = tape.log_softmax(x, axis).unwrap();
        let (rows, cols) = (3, 4);
        let (outer, len) = if axis == 1 { (rows, cols) } else { (cols, rows) };
        for o in 0..outer {
            let at = |t: usize| if axis == 1 { o * cols + t } else { t * cols + o };
            let s: f64 = (0..len).map(|t| tape.value(y)[at(t)]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            let ls: f64 = (0..len).map(|t| tape.value(ly)[at(t)].exp()).sum();
            prop_assert!((ls - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::uniform([4, 5], 1.0, &mut rng).unwrap();
            let b = Tensor::uniform([5, 3], 1.0, &mut rng).unwrap();
            let mut tape = Tape::new();
            let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
            let h = tape.matmul(av, bv).unwrap();
            let s = tape.sigmoid(h);
            tape.value(s).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn clamps_floor_values_but_pass_nan() {
    let mut tape = Tape::new();
    let x = tape.constant([3], vec![f64::NAN, 1e-20, 0.5]).unwrap();
    let c = tape.clamp_min(x, 1e-12);
    let l = tape.log_clamp(x, 1e-12);
    let (cv, lv) = (tape.value(c).to_vec(), tape.value(l).to_vec());
    assert!(cv[0].is_nan() && lv[0].is_nan());
    assert_eq!(&cv[1..], &[1e-12, 0.5]);
    assert_eq!(&lv[1..], &[1e-12f64.ln(), 0.5f64.ln()]);
}

#[test]
fn masked_softmax_propagates_nan_rows() {
    let mut tape = Tape::new();
    let x = tape.constant([1, 2], vec![f64::NAN, f64::NAN]).unwrap();
    let y = tape.masked_softmax(x, &[1.0, 1.0]).unwrap();
    assert!(tape.value(y).iter().all(|v| v.is_nan()));
}
