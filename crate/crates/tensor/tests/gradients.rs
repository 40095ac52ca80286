//! Finite-difference checks for every primitive and a few compositions.

use mvfuse_tensor::{grad_check, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const THRESHOLD: f64 = 1e-4;
const POINTS: u64 = 10;

/// Reduces `y` to a scalar with fixed pseudo-random weights, so that ops whose
/// plain sum is constant (softmax, l2_normalize) still get a useful check.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let w = Tensor::uniform(shape, -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check_at_points<F>(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(point);
        let inputs: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("x{i}"), Tensor::uniform(s.to_vec(), lo, hi, &mut rng)))
            .collect();
        let named: Vec<(&str, Tensor)> = inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        let report = grad_check(&f, &named, STEP).unwrap();
        assert!(report.passed(THRESHOLD), "{name} at point {point}: {:?}", report.worst());
    }
}

#[test]
fn square_at_three_is_exact() {
    let report = grad_check(
        |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        },
        &[("x", Tensor::scalar(3.0))],
        STEP,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-8);
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn elementwise_binary_ops() {
    check_at_points("add", &[&[3, 4], &[4]], -2.0, 2.0, |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y)
    });
    check_at_points("sub", &[&[2, 1, 3], &[4, 1]], -2.0, 2.0, |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y)
    });
    check_at_points("mul", &[&[3, 4], &[3, 1]], -2.0, 2.0, |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y)
    });
    check_at_points("minimum", &[&[5, 3], &[5, 3]], -2.0, 2.0, |t, v| {
        let y = t.minimum(v[0], v[1])?;
        weighted_sum(t, y)
    });
}

#[test]
fn elementwise_unary_ops() {
    check_at_points("scale", &[&[6]], -2.0, 2.0, |t, v| {
        let y = t.scale(v[0], -1.7);
        weighted_sum(t, y)
    });
    check_at_points("add_scalar", &[&[6]], -2.0, 2.0, |t, v| {
        let y = t.add_scalar(v[0], 0.3);
        let y = t.mul(y, y)?;
        weighted_sum(t, y)
    });
    check_at_points("exp", &[&[6]], -2.0, 2.0, |t, v| {
        let y = t.exp(v[0]);
        weighted_sum(t, y)
    });
    check_at_points("log", &[&[6]], 0.2, 3.0, |t, v| {
        let y = t.log(v[0])?;
        weighted_sum(t, y)
    });
    check_at_points("abs", &[&[6]], -2.0, 2.0, |t, v| {
        let y = t.abs(v[0]);
        weighted_sum(t, y)
    });
    check_at_points("tanh", &[&[6]], -2.0, 2.0, |t, v| {
        let y = t.tanh(v[0]);
        weighted_sum(t, y)
    });
    check_at_points("relu", &[&[8]], -2.0, 2.0, |t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y)
    });
    check_at_points("gelu", &[&[8]], -3.0, 3.0, |t, v| {
        let y = t.gelu(v[0]);
        weighted_sum(t, y)
    });
    check_at_points("clamp", &[&[8]], -2.0, 2.0, |t, v| {
        let y = t.clamp(v[0], -0.8, 0.9)?;
        weighted_sum(t, y)
    });
    check_at_points("huber", &[&[10]], -3.0, 3.0, |t, v| {
        let y = t.huber(v[0], 1.0)?;
        weighted_sum(t, y)
    });
}

#[test]
fn matrix_products() {
    check_at_points("matmul rows", &[&[2, 3, 4], &[4, 5]], -1.0, 1.0, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y)
    });
    check_at_points("matmul batched", &[&[3, 2, 4], &[3, 4, 2]], -1.0, 1.0, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y)
    });
}

#[test]
fn convolution() {
    check_at_points("conv2d 1x4x4 / 3x3", &[&[1, 1, 4, 4], &[1, 1, 3, 3]], -1.0, 1.0, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 0)?;
        weighted_sum(t, y)
    });
    check_at_points("conv2d strided, padded, biased", &[&[2, 3, 7, 6], &[4, 3, 3, 3], &[4]], -1.0, 1.0, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        weighted_sum(t, y)
    });
}

#[test]
fn normalizations() {
    check_at_points("softmax", &[&[3, 5]], -2.0, 2.0, |t, v| {
        let y = t.softmax(v[0])?;
        weighted_sum(t, y)
    });
    check_at_points("log_softmax", &[&[3, 5]], -2.0, 2.0, |t, v| {
        let y = t.log_softmax(v[0])?;
        weighted_sum(t, y)
    });
    check_at_points("layer_norm 8-vector", &[&[8]], -2.0, 2.0, |t, v| {
        let y = t.layer_norm(v[0])?;
        weighted_sum(t, y)
    });
    check_at_points("l2_normalize", &[&[4, 6]], -2.0, 2.0, |t, v| {
        let y = t.l2_normalize(v[0])?;
        weighted_sum(t, y)
    });
    check_at_points("cosine_similarity", &[&[4, 6], &[4, 6]], -2.0, 2.0, |t, v| {
        let y = t.cosine_similarity(v[0], v[1])?;
        weighted_sum(t, y)
    });
}

#[test]
fn layout_ops() {
    check_at_points("concat", &[&[2, 3], &[2, 2]], -1.0, 1.0, |t, v| {
        let y = t.concat(&[v[0], v[1], v[0]], 1)?;
        weighted_sum(t, y)
    });
    check_at_points("reshape", &[&[2, 6]], -1.0, 1.0, |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        weighted_sum(t, y)
    });
    check_at_points("transpose", &[&[2, 3, 4]], -1.0, 1.0, |t, v| {
        let y = t.transpose(v[0], 0, 2)?;
        weighted_sum(t, y)
    });
    check_at_points("permute", &[&[2, 3, 4]], -1.0, 1.0, |t, v| {
        let y = t.permute(v[0], &[1, 2, 0])?;
        weighted_sum(t, y)
    });
    check_at_points("slice", &[&[3, 5]], -1.0, 1.0, |t, v| {
        let y = t.slice(v[0], 1, 1, 3)?;
        weighted_sum(t, y)
    });
    check_at_points("gather_rows", &[&[4, 3]], -1.0, 1.0, |t, v| {
        let y = t.gather_rows(v[0], &[3, 0, 3, 1])?;
        weighted_sum(t, y)
    });
    check_at_points("mean", &[&[3, 4]], -1.0, 1.0, |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.mean(y))
    });
    check_at_points("sum_last", &[&[3, 4]], -1.0, 1.0, |t, v| {
        let y = t.sum_last(v[0])?;
        weighted_sum(t, y)
    });
}

#[test]
fn huber_matches_central_differences_at_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x = Tensor::uniform([12], -4.0, 4.0, &mut rng);
        let delta = rng.random_range(0.2..2.0);
        let report = grad_check(
            |t, v| {
                let y = t.huber(v[0], delta)?;
                Ok(t.sum(y))
            },
            &[("x", x)],
            STEP,
        )
        .unwrap();
        assert!(report.passed(THRESHOLD), "{:?}", report.worst());
    }
}

#[test]
fn non_finite_gradients_fail_the_check() {
    // |x|^0.5 style blow-up: log near zero has a huge but finite derivative,
    // so force a NaN through 0 * inf instead.
    let report = grad_check(
        |t, v| {
            let inf = t.constant(Tensor::scalar(f64::INFINITY));
            let y = t.mul(v[0], inf)?;
            Ok(t.sum(y))
        },
        &[("x", Tensor::scalar(1.0))],
        STEP,
    )
    .unwrap();
    assert!(report.entries[0].non_finite);
    assert!(!report.passed(THRESHOLD));
}
