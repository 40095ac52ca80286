use super::TabularMdp;
use crate::error::{invalid, Error, Result};

/// Default cap on Bellman sweeps.
pub const MAX_SWEEPS: usize = 200_000;
/// Q-values within this of the best count as tied; the lowest action wins.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct ValueSolution {
    pub values: Vec<f64>,
    /// `[s][a]`.
    pub q: Vec<f64>,
    pub greedy: Vec<usize>,
    pub iterations: usize,
    pub residual: f64,
}

fn bellman(mdp: &TabularMdp, v: &[f64], q: &mut [f64], out: &mut [f64]) {
    let (n, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    for s in 0..n {
        let mut best = f64::NEG_INFINITY;
        for a in 0..na {
            let ev: f64 = mdp.transition(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
            let qa = mdp.reward(s, a) + g * ev;
            q[s * na + a] = qa;
            best = best.max(qa);
        }
        out[s] = best;
    }
}

pub fn greedy_actions(q: &[f64], n_actions: usize) -> Vec<usize> {
    q.chunks(n_actions)
        .map(|row| {
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|&x| x >= best - TIE_TOL).unwrap_or(0)
        })
        .collect()
}

/// Iterates the Bellman optimality operator until successive iterates differ
/// by at most `tolerance` in sup norm.
pub fn value_iteration(mdp: &TabularMdp, tolerance: f64) -> Result<ValueSolution> {
    value_iteration_capped(mdp, tolerance, MAX_SWEEPS)
}

pub fn value_iteration_capped(mdp: &TabularMdp, tolerance: f64, max_sweeps: usize) -> Result<ValueSolution> {
    if !(tolerance > 0.0) {
        return Err(invalid(format!("tolerance must be positive, got {tolerance}")));
    }
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut q = vec![0.0; n * mdp.n_actions()];
    let mut residual = f64::INFINITY;
    for it in 1..=max_sweeps {
        bellman(mdp, &v, &mut q, &mut next);
        residual = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if residual <= tolerance {
            // refresh q for the returned v so the greedy policy matches it
            bellman(mdp, &v, &mut q, &mut next);
            let greedy = greedy_actions(&q, mdp.n_actions());
            return Ok(ValueSolution { values: v, q, greedy, iterations: it, residual });
        }
    }
    Err(Error::NotConverged { what: "value iteration", iterations: max_sweeps, residual, trace: vec![residual] })
}

/// Exact `V^π` for a deterministic policy by solving `(I - γP^π) V = r^π`.
pub fn evaluate_policy(mdp: &TabularMdp, actions: &[usize]) -> Vec<f64> {
    let n = mdp.n_states();
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        a[s * n + s] = 1.0;
        for (t, &p) in mdp.transition(s, actions[s]).iter().enumerate() {
            a[s * n + t] -= mdp.gamma() * p;
        }
        b[s] = mdp.reward(s, actions[s]);
    }
    solve_dense(n, &mut a, &mut b);
    b
}

/// Gaussian elimination with partial pivoting, in place; `b` receives x.
fn solve_dense(n: usize, a: &mut [f64], b: &mut [f64]) {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * b[k]).sum();
        b[row] = (b[row] - s) / a[row * n + row];
    }
}
