use crate::error::{invalid, Result};
use crate::model::layers::Mlp;
use mvfuse_tensor::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::Rng;

/// Policy and value heads over the fused embedding.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    store: ParamStore,
    policy: Mlp,
    value: Mlp,
    n_actions: usize,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let policy = Mlp::new(&mut store, "policy", [dim, hidden, n_actions], rng);
        let value = Mlp::new(&mut store, "value", [dim, hidden, 1], rng);
        // Small final policy weights start the policy close to uniform.
        let w = policy.fc2.w;
        let v = store.value(w).map(|x| 0.01 * x);
        store.get_mut(w).value = v;
        Self { store, policy, value, n_actions }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Action logits `[B, A]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bindings, z: Var) -> Result<Var> {
        self.policy.forward(tape, p, z)
    }

    /// State values `[B]`.
    pub fn values(&self, tape: &mut Tape, p: &Bindings, z: Var) -> Result<Var> {
        let v = self.value.forward(tape, p, z)?;
        let b = tape.shape(v)[0];
        Ok(tape.reshape(v, &[b])?)
    }
}

/// Numerically stable probabilities from one row of logits.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Generalised advantage estimation over one worker-ordered buffer.
///
/// `next_values[t]` is the value estimate of the observation reached by step
/// `t`; `terminal[t]` zeroes that bootstrap; `episode_end[t]` stops the
/// λ-recursion from crossing into an unrelated trajectory (including the last
/// step of each worker's segment). Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminal: &[bool],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && next_values.len() == n && terminal.len() == n && episode_end.len() == n);
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if episode_end[t] {
            running = 0.0;
        }
        let boot = if terminal[t] { 0.0 } else { gamma * next_values[t] };
        let delta = rewards[t] + boot - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Clipped-surrogate pieces for one minibatch.
#[derive(Clone, Copy, Debug)]
pub struct PolicyTerms {
    pub loss: Var,
    /// Mean entropy of the current policy (graph node).
    pub entropy: Var,
    /// `E[(ratio − 1) − log ratio]`, a nonnegative KL estimate.
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// `−mean(min(ρ·A, clip(ρ, 1−ε, 1+ε)·A))` with `ρ = π/π_old`.
pub fn policy_loss(
    tape: &mut Tape,
    logits: Var,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> Result<PolicyTerms> {
    let s = tape.shape(logits).to_vec();
    let b = actions.len();
    if s.len() != 2 || s[0] != b || old_log_probs.len() != b || advantages.len() != b {
        return Err(invalid("policy loss inputs disagree on batch size"));
    }
    if !(clip > 0.0) {
        return Err(invalid("clip range must be positive"));
    }
    let na = s[1];
    let mut onehot = Tensor::zeros([b, na]);
    for (i, &a) in actions.iter().enumerate() {
        if a >= na {
            return Err(invalid(format!("action {a} out of range for {na} actions")));
        }
        onehot.data_mut()[i * na + a] = 1.0;
    }
    let logp_all = tape.log_softmax(logits)?;
    let oh = tape.constant(onehot);
    let picked = tape.mul(logp_all, oh)?;
    let logp = tape.sum_last(picked)?;
    let old = tape.constant(Tensor::from_vec(old_log_probs.to_vec()));
    let diff = tape.sub(logp, old)?;
    let ratio = tape.exp(diff);
    let adv = tape.constant(Tensor::from_vec(advantages.to_vec()));
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let s2 = tape.mul(clipped, adv)?;
    let surr = tape.minimum(s1, s2)?;
    let m = tape.mean(surr);
    let loss = tape.neg(m);

    let probs = tape.exp(logp_all);
    let plogp = tape.mul(probs, logp_all)?;
    let h = tape.sum_last(plogp)?;
    let h = tape.mean(h);
    let entropy = tape.neg(h);

    let r = tape.value(ratio).data();
    let approx_kl = r.iter().map(|&x| (x - 1.0) - x.ln()).sum::<f64>() / b as f64;
    let clip_fraction = r.iter().filter(|&&x| (x - 1.0).abs() > clip).count() as f64 / b as f64;
    Ok(PolicyTerms { loss, entropy, approx_kl, clip_fraction })
}
