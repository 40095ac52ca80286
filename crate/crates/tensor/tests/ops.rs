use mvfuse_tensor::{Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::uniform([3, 3], -5.0, 5.0, &mut rng);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(3));
    let av = tape.constant(a.clone());
    let y = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(y), &a);
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([1, 4], 2.5));
    let y = tape.softmax(x).unwrap();
    assert!(tape.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros([2, 3, 2]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    let gx = g.get(x).unwrap();
    assert_eq!(gx.shape(), &[2, 3, 2]);
    assert!(gx.data().iter().all(|&v| v == 1.0));
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let blocked = tape.stop_gradient(x);
    let y = tape.mul(blocked, blocked).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).is_none());

    // Mixed: only the unblocked path contributes.
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let blocked = tape.stop_gradient(x);
    let y = tape.mul(blocked, x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros([3]));
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss { .. })));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([4, 5]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
}

#[test]
fn zero_row_normalizes_to_zero_and_is_flagged() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new([2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
    let y = tape.l2_normalize(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
    assert_eq!(tape.degenerate_normalizations(), 1);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().is_finite());
}

#[test]
fn conv2d_same_padding_keeps_spatial_size() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones([1, 2, 5, 5]));
    let w = tape.constant(Tensor::ones([3, 2, 3, 3]));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 5, 5]);
    // centre pixel sees the full 2x3x3 window, the corner only 2x2x2
    let v = tape.value(y).data();
    assert_eq!(v[12], 18.0);
    assert_eq!(v[0], 8.0);
}

fn run_small_net(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::uniform([2, 1, 6, 6], 0.0, 1.0, &mut rng));
    let w = tape.param(Tensor::randn([4, 1, 3, 3], 0.3, &mut rng));
    let h = tape.conv2d(x, w, None, 2, 1).unwrap();
    let h = tape.gelu(h);
    let h = tape.reshape(h, &[2, 36]).unwrap();
    let h = tape.layer_norm(h).unwrap();
    let p = tape.softmax(h).unwrap();
    let l = tape.log(p).unwrap();
    let loss = tape.mean(l);
    let g = tape.backward(loss).unwrap();
    (tape.value(h).data().to_vec(), g.get(w).unwrap().data().to_vec())
}

#[test]
fn repeated_runs_are_bit_identical() {
    let (f1, g1) = run_small_net(5);
    let (f2, g2) = run_small_net(5);
    assert_eq!(f1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), f2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn l2_normalize_yields_unit_rows(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 5), 1..6)) {
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([n, 5], flat.clone()).unwrap());
        let y = tape.l2_normalize(x).unwrap();
        for (r, out) in flat.chunks(5).zip(tape.value(y).data().chunks(5)) {
            let norm_in: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm_out: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm_in > 1e-12 {
                prop_assert!((norm_out - 1.0).abs() < 1e-6);
            } else {
                prop_assert_eq!(norm_out, 0.0);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 7), 1..5)) {
        let n = rows.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([n, 7], rows.concat()).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn gradients_are_finite(seed in 0u64..1000) {
        let (_, g) = run_small_net(seed);
        prop_assert!(g.iter().all(|v| v.is_finite()));
    }
}
