#![allow(dead_code)]

use mvfuse_core::mdp::TabularMdp;

/// Appends a copy of state `k`: same rewards and transitions, and every
/// transition into `k` is split evenly between `k` and its copy.
pub fn duplicate_state(mdp: &TabularMdp, k: usize) -> TabularMdp {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let m = n + 1;
    let mut p = Vec::with_capacity(m * na * m);
    let mut r = Vec::with_capacity(m * na);
    for s in (0..n).chain(std::iter::once(k)) {
        for a in 0..na {
            let row = mdp.transition(s, a);
            let mut new = row.to_vec();
            new.push(row[k] / 2.0);
            new[k] = row[k] / 2.0;
            p.extend(new);
            r.push(mdp.reward(s, a));
        }
    }
    let mut p0 = mdp.initial().to_vec();
    p0.push(p0[k] / 2.0);
    p0[k] /= 2.0;
    TabularMdp::new(m, na, mdp.gamma(), p, r, p0).unwrap()
}

/// Deterministic MDP: action `a` in state `s` moves to `next[s][a]`.
pub fn deterministic_mdp(next: &[Vec<usize>], rewards: &[Vec<f64>], gamma: f64) -> TabularMdp {
    let n = next.len();
    let na = next[0].len();
    let mut p = vec![0.0; n * na * n];
    for s in 0..n {
        for a in 0..na {
            p[(s * na + a) * n + next[s][a]] = 1.0;
        }
    }
    let r = rewards.iter().flatten().copied().collect();
    TabularMdp::new(n, na, gamma, p, r, vec![1.0 / n as f64; n]).unwrap()
}
