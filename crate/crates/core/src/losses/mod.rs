//! Representation objectives: the bisimulation fusion loss, masked latent
//! reconstruction, their combination, ensemble latent dynamics, and reward
//! normalisation.

mod dynamics;
mod reward;
mod tabular;

pub use dynamics::{dynamics_loss, EnsembleDynamics};
pub use reward::{RewardNormalizer, REWARD_CLIP, REWARD_WARMUP};
pub use tabular::tabular_fusion_fixed_point;

use crate::envs::MultiViewObservation;
use crate::error::{invalid, Result};
use crate::model::FusionModel;
use mvfuse_tensor::{Bindings, Tape, Tensor, Var, NORM_FLOOR};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Penalty applied to `z_diff − target` in the fusion loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FusionPenalty {
    Squared,
    Huber { delta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the reconstruction term.
    pub lambda: f64,
    pub gamma: f64,
    /// Reward-difference coefficient; `1 − gamma` when unset.
    pub c_r: Option<f64>,
    /// Next-latent coefficient; `gamma` when unset.
    pub c_t: Option<f64>,
    pub penalty: FusionPenalty,
    /// Ablation switch for the bisimulation fusion term.
    pub fusion: bool,
    pub ensemble_size: usize,
    pub dynamics_hidden: usize,
    /// Let the dynamics loss shape the encoder through the current latent.
    pub dynamics_grad_to_encoder: bool,
    /// Moving-average rate of the reward normaliser.
    pub reward_norm_rate: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.99,
            c_r: None,
            c_t: None,
            penalty: FusionPenalty::Huber { delta: 1.0 },
            fusion: true,
            ensemble_size: 5,
            dynamics_hidden: 128,
            dynamics_grad_to_encoder: false,
            reward_norm_rate: 0.01,
        }
    }
}

impl LossWeights {
    /// `(c_r, c_t)`.
    pub fn coefficients(&self) -> (f64, f64) {
        (self.c_r.unwrap_or(1.0 - self.gamma), self.c_t.unwrap_or(self.gamma))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("weights.lambda must be finite and >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("weights.gamma must lie in (0, 1)"));
        }
        let (cr, ct) = self.coefficients();
        if !(cr >= 0.0 && (0.0..1.0).contains(&ct)) || (cr + ct - 1.0).abs() > 1e-9 {
            return Err(invalid(format!(
                "weights.c_r and weights.c_t must be nonnegative, c_t < 1, and sum to 1 (got {cr} + {ct})"
            )));
        }
        if let FusionPenalty::Huber { delta } = self.penalty {
            if !(delta > 0.0) {
                return Err(invalid("weights.penalty.delta must be positive"));
            }
        }
        if self.ensemble_size == 0 || self.dynamics_hidden == 0 {
            return Err(invalid("weights.ensemble_size and weights.dynamics_hidden must be positive"));
        }
        if !(self.reward_norm_rate > 0.0 && self.reward_norm_rate <= 1.0) {
            return Err(invalid("weights.reward_norm_rate must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// `1 − cos(u, v)`. A zero vector is treated as orthogonal to everything.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu <= NORM_FLOOR || nv <= NORM_FLOOR {
        log::warn!("cosine distance of a zero vector; using 1");
        return 1.0;
    }
    1.0 - dot / (nu * nv)
}

/// The regression target for one pair of transitions.
pub fn bisim_target(r_i: f64, r_j: f64, next_distance: f64, c_r: f64, c_t: f64) -> f64 {
    c_r * (r_i - r_j).abs() + c_t * next_distance
}

/// Pairwise targets `[B, B]` from rewards and predicted next latents `[B, d]`.
pub fn fusion_targets(rewards: &[f64], next: &Tensor, c_r: f64, c_t: f64) -> Result<Tensor> {
    let b = rewards.len();
    if next.rank() != 2 || next.shape()[0] != b {
        return Err(invalid(format!("next latents {:?} do not match {b} rewards", next.shape())));
    }
    let mut t = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if i != j {
                t[i * b + j] =
                    bisim_target(rewards[i], rewards[j], cosine_distance(next.row(i), next.row(j)), c_r, c_t);
            }
        }
    }
    Ok(Tensor::new([b, b], t)?)
}

/// Mean penalised gap between pairwise latent distances and the targets,
/// over ordered pairs `i ≠ j`. The targets carry no gradient.
pub fn fusion_loss(tape: &mut Tape, z: Var, rewards: &[f64], next: &Tensor, weights: &LossWeights) -> Result<Var> {
    let b = rewards.len();
    if b < 2 {
        return Err(invalid("fusion loss needs at least two transitions"));
    }
    if tape.shape(z).len() != 2 || tape.shape(z)[0] != b {
        return Err(invalid(format!("latents {:?} do not match {b} rewards", tape.shape(z))));
    }
    let (c_r, c_t) = weights.coefficients();
    let target = tape.constant(fusion_targets(rewards, next, c_r, c_t)?);
    let zn = tape.l2_normalize(z)?;
    let znt = tape.transpose(zn, 0, 1)?;
    let sim = tape.matmul(zn, znt)?;
    let neg = tape.neg(sim);
    let zdiff = tape.add_scalar(neg, 1.0);
    let gap = tape.sub(zdiff, target)?;
    let pen = match weights.penalty {
        FusionPenalty::Squared => tape.mul(gap, gap)?,
        FusionPenalty::Huber { delta } => tape.huber(gap, delta)?,
    };
    let mut mask = Tensor::ones([b, b]);
    for i in 0..b {
        mask.data_mut()[i * b + i] = 0.0;
    }
    let mask = tape.constant(mask);
    let off = tape.mul(pen, mask)?;
    let s = tape.sum(off);
    Ok(tape.scale(s, 1.0 / (b * (b - 1)) as f64))
}

/// `1 − mean cos(prediction, target)` over all tokens; targets are detached.
pub fn reconstruction_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let target = tape.stop_gradient(target);
    let cos = tape.cosine_similarity(pred, target)?;
    let m = tape.mean(cos);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Inputs for one representation update.
pub struct MfscBatch<'a> {
    pub obs: &'a [&'a MultiViewObservation],
    pub masked: &'a [&'a MultiViewObservation],
    pub actions: &'a [usize],
    /// Normalised rewards.
    pub rewards: &'a [f64],
}

/// Graph handles produced by [`mfsc_loss`].
#[derive(Clone, Copy, Debug)]
pub struct MfscOutput {
    pub total: Var,
    pub fusion: Var,
    pub reconstruction: Var,
    /// Online fused embedding of the unmasked batch, reusable by heads.
    pub fused: Var,
    /// Ensemble member used for the next-latent predictions.
    pub member: usize,
}

/// `L_fus + λ·L_rec` on one batch.
///
/// `target` binds the momentum weights; without it the reconstruction
/// targets are the online unmasked tokens with gradients blocked.
#[allow(clippy::too_many_arguments)]
pub fn mfsc_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &FusionModel,
    online: &Bindings,
    target: Option<&Bindings>,
    ensemble: &EnsembleDynamics,
    batch: &MfscBatch<'_>,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<MfscOutput> {
    let b = batch.obs.len();
    if batch.masked.len() != b || batch.actions.len() != b || batch.rewards.len() != b {
        return Err(invalid("mfsc batch fields have different lengths"));
    }
    let out = model.forward(tape, online, batch.obs)?;
    let masked = model.forward(tape, online, batch.masked)?;
    let pred = model.predict(tape, online, masked.tokens)?;
    let target_tokens = match target {
        Some(p) => model.forward(tape, p, batch.obs)?.tokens,
        None => out.tokens,
    };
    let reconstruction = reconstruction_loss(tape, pred, target_tokens)?;

    let z = tape.value(out.fused).clone();
    let (member, next) = ensemble.sample_prediction(&z, batch.actions, rng)?;
    let fusion = if weights.fusion {
        fusion_loss(tape, out.fused, batch.rewards, &next, weights)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let rec = tape.scale(reconstruction, weights.lambda);
    let total = tape.add(fusion, rec)?;
    Ok(MfscOutput { total, fusion, reconstruction, fused: out.fused, member })
}
