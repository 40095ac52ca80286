//! Procedural multi-view gridworlds.
//!
//! A hidden agent position on an N×N grid is rendered into K small images
//! (full map, agent-centred crop, goal-centred crop), optionally followed by
//! a pure-noise distractor view. Views can go missing at random, and
//! [`corrupt`] applies evaluation-time drops or noise substitutions.

mod grid;
mod render;

pub use grid::{GridWorld, Layout, StepOutcome, Transition, ACTIONS, GOAL_REWARD, STEP_PENALTY};
pub use render::render_view;

use crate::error::{invalid, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Image channels per frame: agent, goal, walls (out-of-bounds counts as wall).
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ViewKind {
    FullMap,
    /// `window × window` cells centred on the agent.
    AgentCrop {
        window: usize,
    },
    /// `window × window` cells centred on the goal.
    GoalCrop {
        window: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub grid_size: usize,
    /// Probability that a non-goal cell is a wall in random layouts.
    pub wall_density: f64,
    /// Fixed wall cells `[row, col]`; random layout when absent.
    pub walls: Option<Vec<[usize; 2]>>,
    /// Fixed goal cell; random when absent.
    pub goal: Option<[usize; 2]>,
    pub views: Vec<ViewKind>,
    /// Pixel side length of every view.
    pub view_size: usize,
    /// Appends a view of uniform noise, redrawn every step.
    pub distractor_view: bool,
    /// Per-view probability of going missing at each step (empty = never).
    pub missing_view_prob: Vec<f64>,
    pub frame_stack: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_size: 7,
            wall_density: 0.15,
            walls: None,
            goal: None,
            views: vec![ViewKind::FullMap, ViewKind::AgentCrop { window: 5 }, ViewKind::GoalCrop { window: 5 }],
            view_size: 48,
            distractor_view: false,
            missing_view_prob: Vec::new(),
            frame_stack: 1,
            horizon: 100,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(invalid("env.grid_size must be at least 2"));
        }
        if self.views.len() < 2 {
            return Err(invalid("env.views needs at least 2 views"));
        }
        if self.horizon < 1 || self.frame_stack < 1 || self.view_size < 1 {
            return Err(invalid("env.horizon, env.frame_stack and env.view_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.wall_density) {
            return Err(invalid("env.wall_density must lie in [0, 1)"));
        }
        for v in &self.views {
            if let ViewKind::AgentCrop { window } | ViewKind::GoalCrop { window } = v {
                if *window == 0 || window % 2 == 0 {
                    return Err(invalid("env.views crop windows must be odd and positive"));
                }
            }
        }
        if !self.missing_view_prob.is_empty() && self.missing_view_prob.len() != self.views.len() {
            return Err(invalid("env.missing_view_prob must be empty or have one entry per view"));
        }
        if self.missing_view_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("env.missing_view_prob entries must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Total views including the distractor.
    pub fn n_views(&self) -> usize {
        self.views.len() + usize::from(self.distractor_view)
    }

    pub fn channels(&self) -> usize {
        CHANNELS * self.frame_stack
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Present,
    Missing,
    Noise,
}

/// K same-shaped `channels × height × width` images with validity flags.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewObservation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub views: Vec<Vec<f64>>,
    pub validity: Vec<Validity>,
}

impl MultiViewObservation {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Views not flagged missing.
    pub fn count_valid(&self) -> usize {
        self.validity.iter().filter(|v| **v != Validity::Missing).count()
    }

    pub fn is_missing(&self, view: usize) -> bool {
        self.validity[view] == Validity::Missing
    }

    pub(crate) fn mark_missing(&mut self, view: usize) {
        self.views[view].iter_mut().for_each(|x| *x = 0.0);
        self.validity[view] = Validity::Missing;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Corruption {
    /// Blank the view and flag it missing.
    Drop { view: usize },
    /// Replace the view with uniform noise drawn from `seed`.
    Noise { view: usize, seed: u64 },
}

/// Evaluation-time corruption. Applying the same corruption twice gives the
/// same observation as applying it once.
pub fn corrupt(obs: &MultiViewObservation, mode: Corruption) -> Result<MultiViewObservation> {
    let view = match mode {
        Corruption::Drop { view } | Corruption::Noise { view, .. } => view,
    };
    if view >= obs.n_views() {
        return Err(invalid(format!("view {view} out of range for {} views", obs.n_views())));
    }
    let mut out = obs.clone();
    match mode {
        Corruption::Drop { view } => out.mark_missing(view),
        Corruption::Noise { view, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.views[view].iter_mut().for_each(|x| *x = rng.random());
            out.validity[view] = Validity::Noise;
        }
    }
    Ok(out)
}
