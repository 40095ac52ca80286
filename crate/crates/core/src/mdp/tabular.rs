use crate::error::{Error, Result};
use rand::Rng;

const SUM_TOL: f64 = 1e-12;

/// A finite MDP with dense transition and reward tables.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    /// `[s][a][s']`, row-major.
    transitions: Vec<f64>,
    /// `[s][a]`.
    rewards: Vec<f64>,
    initial: Vec<f64>,
}

fn check_distribution(p: &[f64], what: impl Fn() -> String) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidMdp(format!("{} has a negative or non-finite entry", what())));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidMdp(format!("{} sums to {s}, not 1", what())));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("needs at least one state and one action".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidMdp(format!("discount {gamma} outside [0, 1)")));
        }
        if transitions.len() != n_states * n_actions * n_states {
            return Err(Error::InvalidMdp(format!(
                "transition table has {} entries, expected {}",
                transitions.len(),
                n_states * n_actions * n_states
            )));
        }
        if rewards.len() != n_states * n_actions || rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp("reward table has wrong size or non-finite entries".into()));
        }
        if initial.len() != n_states {
            return Err(Error::InvalidMdp("initial distribution has wrong length".into()));
        }
        for (k, row) in transitions.chunks(n_states).enumerate() {
            check_distribution(row, || format!("P[{}][{}]", k / n_actions, k % n_actions))?;
        }
        check_distribution(&initial, || "p0".to_string())?;
        Ok(Self { n_states, n_actions, gamma, transitions, rewards, initial })
    }

    /// Draws a random MDP: each `P[s][a]` is uniform weights on a random
    /// support of 1..=|S| states, rewards uniform in `[0, 1]`, uniform `p0`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Result<Self> {
        let mut transitions = vec![0.0; n_states * n_actions * n_states];
        for row in transitions.chunks_mut(n_states) {
            let support = rng.random_range(1..=n_states);
            let mut idx: Vec<usize> = (0..n_states).collect();
            for i in 0..support {
                let j = rng.random_range(i..n_states);
                idx.swap(i, j);
            }
            let weights: Vec<f64> = (0..support).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = weights.iter().sum();
            for (&s, w) in idx[..support].iter().zip(weights) {
                row[s] = w / total;
            }
            renormalize(row);
        }
        let rewards = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        let mut initial = vec![1.0 / n_states as f64; n_states];
        renormalize(&mut initial);
        Self::new(n_states, n_actions, gamma, transitions, rewards, initial)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states;
        &self.transitions[(s * self.n_actions + a) * n..][..n]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, self.gamma, self.transitions.clone(), rewards, self.initial.clone())
    }

    pub fn with_initial(&self, initial: Vec<f64>) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, self.gamma, self.transitions.clone(), self.rewards.clone(), initial)
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            gamma,
            self.transitions.clone(),
            self.rewards.clone(),
            self.initial.clone(),
        )
    }
}

/// Rescales a nonnegative vector to sum to one, correcting roundoff on the
/// largest entry so the sum is as exact as floating point allows.
pub(crate) fn renormalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        p.iter_mut().for_each(|x| *x /= s);
    }
    let s: f64 = p.iter().sum();
    if let Some(k) = (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])) {
        p[k] += 1.0 - s;
    }
}

/// A stochastic policy, one action distribution per state.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            return Err(Error::InvalidArgument("policy table has wrong size".into()));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row, || format!("policy row {s}"))?;
        }
        Ok(Self { n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self { n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..][..self.n_actions]
    }

    /// `r^π` and `P^π` (row-major `|S|×|S|`).
    pub fn induced(&self, mdp: &TabularMdp) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = mdp.n_states();
        if self.n_states() != n || self.n_actions != mdp.n_actions() {
            return Err(Error::InvalidArgument(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states(),
                self.n_actions,
                n,
                mdp.n_actions()
            )));
        }
        let mut r = vec![0.0; n];
        let mut p = vec![0.0; n * n];
        for s in 0..n {
            for (a, &pa) in self.probs(s).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                r[s] += pa * mdp.reward(s, a);
                for (dst, &q) in p[s * n..(s + 1) * n].iter_mut().zip(mdp.transition(s, a)) {
                    *dst += pa * q;
                }
            }
        }
        Ok((r, p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_rows_and_discount() {
        assert!(TabularMdp::new(1, 1, 1.0, vec![1.0], vec![0.0], vec![1.0]).is_err());
        assert!(TabularMdp::new(2, 1, 0.9, vec![0.5, 0.6, 1.0, 0.0], vec![0.0; 2], vec![0.5; 2]).is_err());
        assert!(TabularMdp::new(2, 1, 0.9, vec![1.5, -0.5, 1.0, 0.0], vec![0.0; 2], vec![0.5; 2]).is_err());
    }

    #[test]
    fn random_mdps_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..=12);
            let a = rng.random_range(1..=4);
            let m = TabularMdp::random(&mut rng, n, a, 0.9).unwrap();
            assert_eq!(m.n_states(), n);
        }
    }

    #[test]
    fn induced_chain_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TabularMdp::random(&mut rng, 5, 3, 0.9).unwrap();
        let (_, p) = Policy::uniform(5, 3).induced(&m).unwrap();
        for row in p.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
