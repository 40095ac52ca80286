use super::ppo::argmax;
use super::rollout::head_outputs;
use super::Agent;
use crate::envs::{corrupt, Corruption, GridWorld, MultiViewObservation};
use crate::error::{invalid, Result};
use crate::losses::cosine_distance;
use crate::mdp::{greedy_policy_metric, MetricKind};
use crate::seeding::derive;
use crate::stats::spearman;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Observation protocol during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EvalMode {
    Full,
    /// The view is flagged missing; the network substitutes its mask token.
    MissingView {
        view: usize,
    },
    /// The view is overwritten with uniform noise and encoded as usual.
    NoisyView {
        view: usize,
    },
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Full => write!(f, "full"),
            EvalMode::MissingView { view } => write!(f, "missing_view({view})"),
            EvalMode::NoisyView { view } => write!(f, "noisy_view({view})"),
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "full" {
            return Ok(EvalMode::Full);
        }
        let arg = |prefix: &str| -> Option<usize> {
            s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?.trim().parse().ok()
        };
        if let Some(view) = arg("missing_view") {
            return Ok(EvalMode::MissingView { view });
        }
        if let Some(view) = arg("noisy_view") {
            return Ok(EvalMode::NoisyView { view });
        }
        Err(invalid(format!("unknown eval mode '{s}' (full, missing_view(i), noisy_view(i))")))
    }
}

impl TryFrom<String> for EvalMode {
    type Error = crate::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EvalMode> for String {
    fn from(m: EvalMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: EvalMode,
    /// Mean undiscounted return over one greedy episode per start state.
    pub mean_return: f64,
    pub success_rate: f64,
    /// Mean of the optimal returns over the same start states.
    pub oracle_return: f64,
    pub returns: Vec<f64>,
}

impl Agent {
    /// Greedy episodes from every start state, in lockstep.
    pub fn evaluate(&self, mode: EvalMode, seed: u64) -> Result<EvalResult> {
        let k = self.env_config.n_views();
        match mode {
            EvalMode::MissingView { view } | EvalMode::NoisyView { view } if view >= k => {
                return Err(invalid(format!("{mode} needs a view index below {k}")));
            }
            _ => {}
        }
        let mut cfg = self.env_config.clone();
        cfg.missing_view_prob.clear();
        let base = GridWorld::new(cfg, 0)?;
        let starts = base.start_states();
        let mut envs: Vec<GridWorld> = starts
            .iter()
            .map(|&s| {
                let mut e = base.clone();
                e.reseed(derive(seed, &[s as u64]));
                e
            })
            .collect();
        let mut obs: Vec<MultiViewObservation> = envs.iter_mut().zip(&starts).map(|(e, &s)| e.reset_to(s)).collect();
        let mut returns = vec![0.0; starts.len()];
        let mut success = vec![false; starts.len()];
        let mut t = 0u64;
        loop {
            let active: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].is_done()).collect();
            if active.is_empty() {
                break;
            }
            let seen: Vec<MultiViewObservation> = active
                .iter()
                .map(|&i| apply_mode(&obs[i], mode, derive(seed, &[starts[i] as u64, t, 0x4015E])))
                .collect::<Result<_>>()?;
            let refs: Vec<&MultiViewObservation> = seen.iter().collect();
            let z = self.model.embed(&refs)?;
            let (probs, _) = head_outputs(&self.ac, &z)?;
            for (j, &i) in active.iter().enumerate() {
                let out = envs[i].step(argmax(&probs[j]))?;
                returns[i] += out.reward;
                success[i] |= out.done && !out.truncated;
                obs[i] = out.obs;
            }
            t += 1;
        }
        let n = starts.len() as f64;
        Ok(EvalResult {
            mode,
            mean_return: returns.iter().sum::<f64>() / n,
            success_rate: success.iter().filter(|&&s| s).count() as f64 / n,
            oracle_return: starts.iter().map(|&s| base.optimal_return(s)).sum::<f64>() / n,
            returns,
        })
    }

    /// Spearman correlation between fused-embedding cosine distances and the
    /// exact independent-coupling metric of the optimal greedy policy, over
    /// `pairs` state pairs (all distinct pairs if there are fewer).
    pub fn representation_spearman(&self, pairs: usize, seed: u64) -> Result<f64> {
        let env = self.env();
        let n = env.n_states();
        let (_, c_t) = self.weights.coefficients();
        let exact = greedy_policy_metric(env.mdp(), c_t, MetricKind::Mico, 1e-10, 200_000)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x5EA]));
        let rendered: Vec<MultiViewObservation> = (0..n).map(|s| env.render_state(s, &mut rng)).collect();
        let refs: Vec<&MultiViewObservation> = rendered.iter().collect();
        let z = self.model.embed(&refs)?;
        let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let chosen: Vec<(usize, usize)> =
            if pairs >= all.len() { all } else { (0..pairs).map(|_| all[rng.random_range(0..all.len())]).collect() };
        let learned: Vec<f64> = chosen.iter().map(|&(i, j)| cosine_distance(z.row(i), z.row(j))).collect();
        let truth: Vec<f64> = chosen.iter().map(|&(i, j)| exact.metric.get(i, j)).collect();
        Ok(spearman(&learned, &truth))
    }
}

fn apply_mode(obs: &MultiViewObservation, mode: EvalMode, seed: u64) -> Result<MultiViewObservation> {
    match mode {
        EvalMode::Full => Ok(obs.clone()),
        EvalMode::MissingView { view } => corrupt(obs, Corruption::Drop { view }),
        EvalMode::NoisyView { view } => corrupt(obs, Corruption::Noise { view, seed }),
    }
}
