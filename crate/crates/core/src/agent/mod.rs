//! On-policy actor-critic learner that trains the fusion network jointly
//! with its policy and value heads.

mod eval;
mod ppo;
mod rollout;

pub use eval::{EvalMode, EvalResult};
pub use ppo::{argmax, compute_gae, policy_loss, sample_categorical, softmax_row, ActorCritic, PolicyTerms};
pub use rollout::{collect_rollout, policy_snapshot, EpisodeRecord, RolloutBuffer, Step};

use crate::envs::{EnvConfig, GridWorld, MultiViewObservation};
use crate::error::{invalid, Error, Result};
use crate::losses::{dynamics_loss, mfsc_loss, EnsembleDynamics, LossWeights, MfscBatch, RewardNormalizer};
use crate::model::{cube_mask_observation, FusionModel, MaskConfig, ModelConfig};
use crate::seeding::derive;
use mvfuse_tensor::{clip_grad_norm, Adam, Checkpoint, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs_per_update: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub grad_clip: f64,
    pub target_kl: f64,
    pub learning_rate: f64,
    pub repr_learning_rate: f64,
    /// Steps per worker per update.
    pub rollout_len: usize,
    pub workers: usize,
    pub minibatch_size: usize,
    /// Hidden width of the policy and value heads.
    pub head_hidden: usize,
    /// Let the policy loss reach the encoder through the fused embedding.
    pub actor_grad_to_encoder: bool,
    /// Train the representation objectives and the dynamics ensemble.
    pub representation_losses: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs_per_update: 8,
            entropy_coef: 0.0,
            value_coef: 0.5,
            grad_clip: 0.5,
            target_kl: 0.12,
            learning_rate: 2e-4,
            repr_learning_rate: 2e-4,
            rollout_len: 128,
            workers: 4,
            minibatch_size: 64,
            head_hidden: 64,
            actor_grad_to_encoder: false,
            representation_losses: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(invalid(format!("ppo.{m}")));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.epochs_per_update == 0 || self.rollout_len == 0 || self.workers == 0 || self.head_hidden == 0 {
            return bad("epochs_per_update, rollout_len, workers and head_hidden must be positive");
        }
        if self.minibatch_size < 2 {
            return bad("minibatch_size must be at least 2 (the fusion loss compares pairs)");
        }
        if !(self.learning_rate > 0.0 && self.repr_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.grad_clip > 0.0 && self.target_kl > 0.0 && self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return bad("grad_clip and target_kl must be positive; coefficients nonnegative");
        }
        Ok(())
    }
}

/// Means over the minibatches of one update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub l_policy: f64,
    pub l_value: f64,
    pub entropy: f64,
    pub l_fus: f64,
    pub l_rec: f64,
    pub l_dyn: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
    pub epochs_completed: usize,
    pub early_stopped: bool,
}

/// Everything trained by one run: network, ensemble, heads, optimisers.
#[derive(Clone, Debug)]
pub struct Agent {
    pub env_config: EnvConfig,
    pub mask: MaskConfig,
    pub weights: LossWeights,
    pub ppo: PpoConfig,
    pub model: FusionModel,
    pub ensemble: EnsembleDynamics,
    pub ac: ActorCritic,
    pub normalizer: RewardNormalizer,
    model_opt: Adam,
    ens_opt: Adam,
    ac_opt: Adam,
    seed: u64,
    updates_done: u64,
    env_steps: u64,
    probe: GridWorld,
}

/// Result of one collect-then-optimise cycle.
#[derive(Clone, Debug)]
pub struct IterationReport {
    pub update: u64,
    pub env_steps: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub stats: UpdateStats,
}

impl Agent {
    pub fn new(
        env_config: &EnvConfig,
        model_config: &ModelConfig,
        mask: &MaskConfig,
        weights: &LossWeights,
        ppo: &PpoConfig,
        seed: u64,
    ) -> Result<Self> {
        env_config.validate()?;
        mask.validate(env_config.view_size)?;
        weights.validate()?;
        ppo.validate()?;
        let probe = GridWorld::new(env_config.clone(), derive(seed, &[0xE7]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x1417]));
        let model = FusionModel::new(
            model_config,
            env_config.n_views(),
            env_config.channels(),
            env_config.view_size,
            &mut rng,
        )?;
        let d = model.embed_dim();
        let na = probe.n_actions();
        let ensemble = EnsembleDynamics::new(d, na, weights.dynamics_hidden, weights.ensemble_size, &mut rng)?;
        let ac = ActorCritic::new(d, ppo.head_hidden, na, &mut rng);
        Ok(Self {
            model_opt: Adam::new(model.params(), ppo.repr_learning_rate),
            ens_opt: Adam::new(ensemble.params(), ppo.repr_learning_rate),
            ac_opt: Adam::new(ac.params(), ppo.learning_rate),
            normalizer: RewardNormalizer::new(weights.reward_norm_rate),
            env_config: env_config.clone(),
            mask: mask.clone(),
            weights: weights.clone(),
            ppo: ppo.clone(),
            model,
            ensemble,
            ac,
            seed,
            updates_done: 0,
            env_steps: 0,
            probe,
        })
    }

    pub fn updates_done(&self) -> u64 {
        self.updates_done
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn steps_per_update(&self) -> u64 {
        (self.ppo.rollout_len * self.ppo.workers) as u64
    }

    /// A copy of the environment the agent trains on.
    pub fn env(&self) -> &GridWorld {
        &self.probe
    }

    /// Collects one rollout and optimises on it.
    ///
    /// All randomness of update `u` derives from `(seed, u)`, and workers
    /// start fresh episodes each update, so a run resumed from a checkpoint
    /// continues exactly as the uninterrupted run would.
    pub fn iterate(&mut self) -> Result<IterationReport> {
        let u = self.updates_done;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.seed, &[0x0B5, u]));
        let mut workers: Vec<GridWorld> = (0..self.ppo.workers)
            .map(|w| {
                let mut env = self.probe.clone();
                env.reseed(derive(self.seed, &[0xE7, u, w as u64]));
                env
            })
            .collect();
        let mut current: Vec<MultiViewObservation> = workers.iter_mut().map(|w| w.reset()).collect();
        let mut running = vec![(0.0, 0usize); workers.len()];
        let (mut buffer, episodes) = collect_rollout(
            &mut workers,
            &mut current,
            &mut running,
            &self.model,
            &self.ac,
            &mut self.normalizer,
            self.ppo.rollout_len,
            &mut rng,
        )?;
        buffer.compute_advantages(self.ppo.gamma, self.ppo.gae_lambda);
        let stats = self.optimize(&buffer, &mut rng)?;
        self.updates_done += 1;
        self.env_steps += buffer.len() as u64;
        Ok(IterationReport { update: u, env_steps: self.env_steps, episodes, stats })
    }

    /// Clipped-surrogate optimisation plus the representation objectives.
    pub fn optimize(&mut self, buffer: &RolloutBuffer, rng: &mut ChaCha8Rng) -> Result<UpdateStats> {
        let n = buffer.len();
        if buffer.advantages.len() != n {
            return Err(invalid("advantages have not been computed"));
        }
        let mean = buffer.advantages.iter().sum::<f64>() / n as f64;
        let var = buffer.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-8);
        let adv_norm: Vec<f64> = buffer.advantages.iter().map(|a| (a - mean) / std).collect();

        let mut stats = UpdateStats::default();
        let mut order: Vec<usize> = (0..n).collect();
        let mb = self.ppo.minibatch_size.min(n);
        'epochs: for _ in 0..self.ppo.epochs_per_update {
            order.shuffle(rng);
            for chunk in order.chunks(mb) {
                if chunk.len() < 2 {
                    continue;
                }
                let kl = self.minibatch_step(buffer, &adv_norm, chunk, rng, &mut stats)?;
                if kl > self.ppo.target_kl {
                    stats.early_stopped = true;
                    break 'epochs;
                }
            }
            stats.epochs_completed += 1;
        }
        if stats.minibatches > 0 {
            let k = stats.minibatches as f64;
            for v in [
                &mut stats.l_policy,
                &mut stats.l_value,
                &mut stats.entropy,
                &mut stats.l_fus,
                &mut stats.l_rec,
                &mut stats.l_dyn,
                &mut stats.kl,
                &mut stats.clip_fraction,
                &mut stats.grad_norm,
            ] {
                *v /= k;
            }
        }
        Ok(stats)
    }

    /// One gradient step; returns the minibatch KL estimate, measured before
    /// the step. A KL above target skips the step.
    fn minibatch_step(
        &mut self,
        buffer: &RolloutBuffer,
        adv_norm: &[f64],
        idx: &[usize],
        rng: &mut ChaCha8Rng,
        stats: &mut UpdateStats,
    ) -> Result<f64> {
        let steps: Vec<&Step> = idx.iter().map(|&i| &buffer.steps[i]).collect();
        let obs: Vec<&MultiViewObservation> = steps.iter().map(|s| &s.obs).collect();
        let actions: Vec<usize> = steps.iter().map(|s| s.action).collect();
        let old_logp: Vec<f64> = steps.iter().map(|s| s.log_prob).collect();
        let adv: Vec<f64> = idx.iter().map(|&i| adv_norm[i]).collect();
        let returns: Vec<f64> = idx.iter().map(|&i| buffer.returns[i]).collect();

        let mut tape = Tape::new();
        let mp = self.model.params().bind(&mut tape, true);
        let ep = self.ensemble.params().bind(&mut tape, true);
        let ap = self.ac.params().bind(&mut tape, true);

        let mut repr = None;
        let (z, dyn_loss) = if self.ppo.representation_losses {
            let masked: Vec<MultiViewObservation> =
                obs.iter().map(|o| cube_mask_observation(o, &self.mask, rng)).collect();
            let masked_refs: Vec<&MultiViewObservation> = masked.iter().collect();
            let rewards: Vec<f64> = steps.iter().map(|s| s.norm_reward).collect();
            let tp = if self.model.config().target == crate::model::TargetMode::Momentum {
                Some(self.model.target_params().bind(&mut tape, false))
            } else {
                None
            };
            let batch = MfscBatch { obs: &obs, masked: &masked_refs, actions: &actions, rewards: &rewards };
            let out = mfsc_loss(&mut tape, &self.model, &mp, tp.as_ref(), &self.ensemble, &batch, &self.weights, rng)?;
            let next: Vec<&MultiViewObservation> = steps.iter().map(|s| &s.next_obs).collect();
            let z_next = self.model.embed(&next)?;
            let z_next = tape.constant(z_next);
            let z_dyn = if self.weights.dynamics_grad_to_encoder { out.fused } else { tape.stop_gradient(out.fused) };
            let dl = dynamics_loss(&mut tape, &self.ensemble, &ep, z_dyn, &actions, z_next)?;
            repr = Some(out);
            (out.fused, Some(dl))
        } else {
            (self.model.forward(&mut tape, &mp, &obs)?.fused, None)
        };

        let z_actor = if self.ppo.actor_grad_to_encoder { z } else { tape.stop_gradient(z) };
        let logits = self.ac.logits(&mut tape, &ap, z_actor)?;
        let pol = policy_loss(&mut tape, logits, &actions, &old_logp, &adv, self.ppo.clip)?;
        let values = self.ac.values(&mut tape, &ap, z)?;
        let ret = tape.constant(Tensor::from_vec(returns));
        let err = tape.sub(values, ret)?;
        let sq = tape.mul(err, err)?;
        let value_loss = tape.mean(sq);

        if pol.approx_kl > self.ppo.target_kl {
            return Ok(pol.approx_kl);
        }

        let vl = tape.scale(value_loss, self.ppo.value_coef);
        let ent = tape.scale(pol.entropy, -self.ppo.entropy_coef);
        let mut total = tape.add(pol.loss, vl)?;
        total = tape.add(total, ent)?;
        if let Some(out) = &repr {
            total = tape.add(total, out.total)?;
        }
        if let Some(dl) = dyn_loss {
            total = tape.add(total, dl)?;
        }
        let scalar = |t: &Tape, v| t.value(v).item();
        let total_value = scalar(&tape, total);
        if !total_value.is_finite() {
            let states: Vec<usize> = steps.iter().map(|s| s.state).collect();
            return Err(Error::NonFiniteLoss(format!(
                "update {}: loss {total_value}; minibatch states {states:?}, actions {actions:?}, returns {:?}",
                self.updates_done,
                tape.value(ret).data()
            )));
        }
        let grads = tape.backward(total)?;
        self.model.params_mut().accumulate_grads(&mp, &grads);
        self.ensemble.params_mut().accumulate_grads(&ep, &grads);
        self.ac.params_mut().accumulate_grads(&ap, &grads);
        let norm = clip_grad_norm(
            &mut [self.model.params_mut(), self.ensemble.params_mut(), self.ac.params_mut()],
            self.ppo.grad_clip,
        );
        self.model_opt.step(self.model.params_mut());
        self.ens_opt.step(self.ensemble.params_mut());
        self.ac_opt.step(self.ac.params_mut());
        self.model.update_target();

        stats.minibatches += 1;
        stats.l_policy += scalar(&tape, pol.loss);
        stats.l_value += scalar(&tape, value_loss);
        stats.entropy += scalar(&tape, pol.entropy);
        if let Some(out) = &repr {
            stats.l_fus += scalar(&tape, out.fusion);
            stats.l_rec += scalar(&tape, out.reconstruction);
        }
        if let Some(dl) = dyn_loss {
            stats.l_dyn += scalar(&tape, dl);
        }
        stats.kl += pol.approx_kl;
        stats.clip_fraction += pol.clip_fraction;
        stats.grad_norm += norm;
        Ok(pol.approx_kl)
    }

    /// Writes all trainable state, optimiser moments and counters.
    pub fn export(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.model.params().export("model/", &mut ck);
        if self.model.config().target == crate::model::TargetMode::Momentum {
            self.model.target_params().export("target/", &mut ck);
        }
        self.ensemble.params().export("ensemble/", &mut ck);
        self.ac.params().export("heads/", &mut ck);
        self.model_opt.export("opt/model/", &mut ck);
        self.ens_opt.export("opt/ensemble/", &mut ck);
        self.ac_opt.export("opt/heads/", &mut ck);
        ck.insert("normalizer", Tensor::from_vec(self.normalizer.to_state().to_vec()));
        ck.insert("counters", Tensor::from_vec(vec![self.updates_done as f64, self.env_steps as f64]));
        ck
    }

    /// Restores state written by [`Agent::export`] into an agent built with
    /// the same configuration.
    pub fn import(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model.params_mut().import("model/", ck)?;
        if let Some(t) = self.model.target_params_mut() {
            t.import("target/", ck)?;
        }
        self.ensemble.params_mut().import("ensemble/", ck)?;
        self.ac.params_mut().import("heads/", ck)?;
        let ok = self.model_opt.import("opt/model/", ck)
            && self.ens_opt.import("opt/ensemble/", ck)
            && self.ac_opt.import("opt/heads/", ck);
        if !ok {
            return Err(invalid("checkpoint lacks optimiser state"));
        }
        let norm = ck.get("normalizer").ok_or_else(|| invalid("checkpoint lacks normalizer"))?;
        let counters = ck.get("counters").ok_or_else(|| invalid("checkpoint lacks counters"))?;
        if norm.numel() != 4 || counters.numel() != 2 {
            return Err(invalid("malformed checkpoint counters"));
        }
        let n = norm.data();
        self.normalizer = RewardNormalizer::from_state([n[0], n[1], n[2], n[3]]);
        self.updates_done = counters.data()[0] as u64;
        self.env_steps = counters.data()[1] as u64;
        Ok(())
    }
}
