use super::ppo::{sample_categorical, softmax_row, ActorCritic};
use crate::envs::{GridWorld, MultiViewObservation};
use crate::error::Result;
use crate::losses::RewardNormalizer;
use crate::model::FusionModel;
use mvfuse_tensor::{Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One environment step with everything the learners need.
#[derive(Clone, Debug)]
pub struct Step {
    pub obs: MultiViewObservation,
    pub action: usize,
    pub reward: f64,
    /// Reward after the running normaliser; feeds the representation loss.
    pub norm_reward: f64,
    pub next_obs: MultiViewObservation,
    /// The goal was reached: no bootstrap.
    pub terminal: bool,
    /// Last step of a trajectory piece (goal, horizon, or rollout end).
    pub episode_end: bool,
    pub log_prob: f64,
    pub value: f64,
    /// Value estimate of `next_obs` (0 for terminal steps).
    pub next_value: f64,
    /// Hidden states, for verification only.
    pub state: usize,
    pub next_state: usize,
}

/// Steps ordered by (worker, step), with advantages once computed.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<Step>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        let col = |f: fn(&Step) -> f64| self.steps.iter().map(f).collect::<Vec<_>>();
        let (adv, ret) = super::ppo::compute_gae(
            &col(|s| s.reward),
            &col(|s| s.value),
            &col(|s| s.next_value),
            &self.steps.iter().map(|s| s.terminal).collect::<Vec<_>>(),
            &self.steps.iter().map(|s| s.episode_end).collect::<Vec<_>>(),
            gamma,
            lambda,
        );
        self.advantages = adv;
        self.returns = ret;
    }
}

/// A finished episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub worker: usize,
    pub return_raw: f64,
    pub length: usize,
    pub success: bool,
}

/// Probabilities `[B][A]` and values `[B]` under a fixed snapshot.
pub fn policy_snapshot(
    model: &FusionModel,
    ac: &ActorCritic,
    obs: &[&MultiViewObservation],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let z = model.embed(obs)?;
    head_outputs(ac, &z)
}

pub(crate) fn head_outputs(ac: &ActorCritic, z: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = ac.params().bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let logits = ac.logits(&mut tape, &p, zv)?;
    let values = ac.values(&mut tape, &p, zv)?;
    let na = ac.n_actions();
    let probs = tape.value(logits).data().chunks(na).map(softmax_row).collect();
    Ok((probs, tape.value(values).data().to_vec()))
}

/// Runs every worker for `steps` steps from `current` observations with the
/// snapshot (`model`, `ac`), sampling actions from `rng`.
///
/// Workers whose episode ends are reset in place; a fault while stepping
/// is logged and the worker restarted.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout<R: Rng + ?Sized>(
    workers: &mut [GridWorld],
    current: &mut [MultiViewObservation],
    returns_so_far: &mut [(f64, usize)],
    model: &FusionModel,
    ac: &ActorCritic,
    normalizer: &mut RewardNormalizer,
    steps: usize,
    rng: &mut R,
) -> Result<(RolloutBuffer, Vec<EpisodeRecord>)> {
    let nw = workers.len();
    let mut per_worker: Vec<Vec<Step>> = vec![Vec::with_capacity(steps); nw];
    let mut episodes = Vec::new();
    for t in 0..steps {
        let refs: Vec<&MultiViewObservation> = current.iter().collect();
        let (probs, values) = policy_snapshot(model, ac, &refs)?;
        let mut pending = Vec::new();
        for w in 0..nw {
            let action = sample_categorical(&probs[w], rng);
            let state = workers[w].state();
            let out = match workers[w].step(action) {
                Ok(o) => o,
                Err(e) => {
                    log::warn!("worker {w} fault ({e}); restarting its episode");
                    if let Some(prev) = per_worker[w].last_mut() {
                        prev.episode_end = true;
                    }
                    current[w] = workers[w].reset();
                    returns_so_far[w] = (0.0, 0);
                    continue;
                }
            };
            let next_state = workers[w].state();
            let terminal = out.done && !out.truncated;
            let last = t + 1 == steps;
            returns_so_far[w].0 += out.reward;
            returns_so_far[w].1 += 1;
            if out.done {
                episodes.push(EpisodeRecord {
                    worker: w,
                    return_raw: returns_so_far[w].0,
                    length: returns_so_far[w].1,
                    success: terminal,
                });
                returns_so_far[w] = (0.0, 0);
            }
            let next_obs = out.obs;
            let obs = if out.done {
                let fresh = workers[w].reset();
                std::mem::replace(&mut current[w], fresh)
            } else {
                std::mem::replace(&mut current[w], next_obs.clone())
            };
            if !terminal && (out.truncated || last) {
                pending.push((w, per_worker[w].len()));
            }
            per_worker[w].push(Step {
                obs,
                action,
                reward: out.reward,
                norm_reward: normalizer.normalize(out.reward),
                next_obs,
                terminal,
                episode_end: out.done || last,
                log_prob: probs[w][action].max(f64::MIN_POSITIVE).ln(),
                value: values[w],
                next_value: 0.0,
                state,
                next_state,
            });
        }
        // Bootstraps for pieces cut by the horizon or the rollout end.
        if !pending.is_empty() {
            let refs: Vec<&MultiViewObservation> = pending.iter().map(|&(w, i)| &per_worker[w][i].next_obs).collect();
            let (_, v) = policy_snapshot(model, ac, &refs)?;
            for (&(w, i), v) in pending.iter().zip(v) {
                per_worker[w][i].next_value = v;
            }
        }
    }
    for steps in &mut per_worker {
        for i in 0..steps.len().saturating_sub(1) {
            if !steps[i].episode_end {
                steps[i].next_value = steps[i + 1].value;
            }
        }
    }
    let buffer = RolloutBuffer { steps: per_worker.into_iter().flatten().collect(), ..RolloutBuffer::default() };
    Ok((buffer, episodes))
}
