use super::bisim_target;
use crate::error::{invalid, Error, Result};

/// Iterates the fusion-loss target rule directly on a finite state set:
/// `d(i, j) ← target(r_i, r_j, E_{k~P_i, l~P_j} d(k, l))` for `i ≠ j`, with a
/// zero diagonal, until successive iterates differ by at most `tol`.
///
/// Returns the row-major `n × n` distance table.
pub fn tabular_fusion_fixed_point(
    rewards: &[f64],
    transitions: &[Vec<f64>],
    c_r: f64,
    c_t: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if transitions.len() != n || transitions.iter().any(|row| row.len() != n) {
        return Err(invalid("transition table must be n x n"));
    }
    if !(0.0..1.0).contains(&c_t) {
        return Err(invalid("c_t must lie in [0, 1)"));
    }
    let mut d = vec![0.0; n * n];
    let mut trace = Vec::new();
    for _ in 0..max_iter {
        // inner[k][j] = Σ_l P_j(l)·d(k, l)
        let mut inner = vec![0.0; n * n];
        for k in 0..n {
            for (j, pj) in transitions.iter().enumerate() {
                inner[k * n + j] = pj.iter().enumerate().map(|(l, p)| p * d[k * n + l]).sum();
            }
        }
        let mut next = vec![0.0; n * n];
        for (i, pi) in transitions.iter().enumerate() {
            for j in 0..n {
                if i != j {
                    let expected: f64 = pi.iter().enumerate().map(|(k, p)| p * inner[k * n + j]).sum();
                    next[i * n + j] = bisim_target(rewards[i], rewards[j], expected, c_r, c_t);
                }
            }
        }
        let residual = next.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        d = next;
        trace.push(residual);
        if residual <= tol {
            return Ok(d);
        }
    }
    Err(Error::NotConverged {
        what: "tabular fusion target",
        iterations: max_iter,
        residual: trace.last().copied().unwrap_or(f64::INFINITY),
        trace,
    })
}
