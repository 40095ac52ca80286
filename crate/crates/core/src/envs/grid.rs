use super::render::render_view;
use super::{EnvConfig, MultiViewObservation, Validity, CHANNELS};
use crate::error::{invalid, Error, Result};
use crate::mdp::TabularMdp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{HashSet, VecDeque};

/// Up, right, down, left as (row, col) offsets.
pub const ACTIONS: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
pub const GOAL_REWARD: f64 = 1.0;
pub const STEP_PENALTY: f64 = -0.01;
const LAYOUT_ATTEMPTS: u64 = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub size: usize,
    /// Row-major wall flags.
    pub walls: Vec<bool>,
    pub goal: (usize, usize),
}

impl Layout {
    fn random(size: usize, density: f64, rng: &mut ChaCha8Rng) -> Self {
        let goal = (rng.random_range(0..size), rng.random_range(0..size));
        let walls = (0..size * size).map(|i| (i / size, i % size) != goal && rng.random::<f64>() < density).collect();
        Self { size, walls, goal }
    }

    fn is_free(&self, r: isize, c: isize) -> bool {
        let n = self.size as isize;
        r >= 0 && c >= 0 && r < n && c < n && !self.walls[(r * n + c) as usize]
    }

    /// Moves from `cell` by action `a`; blocked moves stay put.
    pub fn apply(&self, cell: (usize, usize), a: usize) -> (usize, usize) {
        let (dr, dc) = ACTIONS[a];
        let (r, c) = (cell.0 as isize + dr, cell.1 as isize + dc);
        if self.is_free(r, c) {
            (r as usize, c as usize)
        } else {
            cell
        }
    }

    /// Shortest-path step counts to the goal; `None` for unreachable cells.
    pub fn goal_distances(&self) -> Vec<Option<usize>> {
        let n = self.size;
        let mut dist = vec![None; n * n];
        let mut queue = VecDeque::from([self.goal]);
        dist[self.goal.0 * n + self.goal.1] = Some(0);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.0 * n + cell.1].unwrap();
            for a in 0..ACTIONS.len() {
                let next = self.apply(cell, a);
                if dist[next.0 * n + next.1].is_none() {
                    dist[next.0 * n + next.1] = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    fn fully_connected(&self) -> bool {
        let d = self.goal_distances();
        let free = self.walls.iter().filter(|w| !**w).count();
        free >= 2 && d.iter().filter(|x| x.is_some()).count() == free
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: MultiViewObservation,
    pub reward: f64,
    /// Goal reached or horizon exhausted.
    pub done: bool,
    /// True when `done` came from the horizon rather than the goal.
    pub truncated: bool,
}

/// One environment step as recorded for learning. `state` is the hidden
/// simulator state and exists only for verification code.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: MultiViewObservation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: MultiViewObservation,
    pub done: bool,
    pub state: usize,
}

/// A gridworld episode simulator with multi-view rendering.
#[derive(Clone, Debug)]
pub struct GridWorld {
    config: EnvConfig,
    layout: Layout,
    layout_seed: u64,
    cells: Vec<(usize, usize)>,
    state_of_cell: Vec<Option<usize>>,
    goal_state: usize,
    mdp: TabularMdp,
    /// Noise-free renders of every state, `[state][view]`.
    renders: Vec<Vec<Vec<f64>>>,
    rng: ChaCha8Rng,
    state: usize,
    t: usize,
    done: bool,
    frames: VecDeque<Vec<Vec<f64>>>,
}

impl GridWorld {
    /// Builds the layout from `config.seed` (bumping the seed until the goal
    /// is reachable from every free cell); `episode_seed` drives starts,
    /// noise and missing views.
    pub fn new(config: EnvConfig, episode_seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.grid_size;
        let mut layout_seed = config.seed;
        let layout = loop {
            let layout = match (&config.walls, config.goal) {
                (Some(walls), Some(goal)) => {
                    let mut w = vec![false; n * n];
                    for &[r, c] in walls {
                        if r >= n || c >= n {
                            return Err(invalid(format!("env.walls cell [{r}, {c}] is off the grid")));
                        }
                        w[r * n + c] = true;
                    }
                    let goal = (goal[0], goal[1]);
                    if goal.0 >= n || goal.1 >= n || w[goal.0 * n + goal.1] {
                        return Err(invalid("env.goal must be a free cell on the grid"));
                    }
                    let fixed = Layout { size: n, walls: w, goal };
                    if !fixed.fully_connected() {
                        return Err(invalid("fixed layout has cells that cannot reach the goal"));
                    }
                    break fixed;
                }
                (None, None) => Layout::random(n, config.wall_density, &mut ChaCha8Rng::seed_from_u64(layout_seed)),
                _ => return Err(invalid("env.walls and env.goal must be given together")),
            };
            if layout.fully_connected() {
                break layout;
            }
            log::info!("layout seed {layout_seed} has unreachable cells; regenerating with seed {}", layout_seed + 1);
            layout_seed += 1;
            if layout_seed - config.seed > LAYOUT_ATTEMPTS {
                return Err(invalid("could not generate a connected layout; lower env.wall_density"));
            }
        };
        let cells: Vec<(usize, usize)> = (0..n * n).filter(|&i| !layout.walls[i]).map(|i| (i / n, i % n)).collect();
        let mut state_of_cell = vec![None; n * n];
        for (s, &(r, c)) in cells.iter().enumerate() {
            state_of_cell[r * n + c] = Some(s);
        }
        let goal_state = state_of_cell[layout.goal.0 * n + layout.goal.1].unwrap();
        let mdp = build_mdp(&layout, &cells, &state_of_cell, goal_state)?;
        let renders = cells
            .iter()
            .map(|&agent| {
                config
                    .views
                    .iter()
                    .map(|&k| render_view(k, config.view_size, n, &layout.walls, layout.goal, agent))
                    .collect()
            })
            .collect();
        let env = Self {
            layout,
            layout_seed,
            cells,
            state_of_cell,
            goal_state,
            mdp,
            renders,
            rng: ChaCha8Rng::seed_from_u64(episode_seed),
            state: 0,
            t: 0,
            done: true,
            frames: VecDeque::new(),
            config,
        };
        if !env.identifies_state(&[]) {
            return Err(invalid("rendered views do not identify the state; increase env.view_size"));
        }
        if let Some(full) = env.config.views.iter().position(|v| *v == super::ViewKind::FullMap) {
            let others: Vec<usize> = (0..env.config.views.len()).filter(|&i| i != full).collect();
            if !env.identifies_state(&others) {
                return Err(invalid("full-map view alone does not identify the state; increase env.view_size"));
            }
        }
        Ok(env)
    }

    /// Whether the rendered views, minus `excluded`, still distinguish every
    /// state (exhaustive over the render table).
    pub fn identifies_state(&self, excluded: &[usize]) -> bool {
        let mut seen = HashSet::new();
        self.renders.iter().all(|views| {
            let key: Vec<u64> = views
                .iter()
                .enumerate()
                .filter(|(i, _)| !excluded.contains(i))
                .flat_map(|(_, v)| v.iter().map(|x| x.to_bits()))
                .collect();
            seen.insert(key)
        })
    }

    /// Rendered views (excluding the distractor) whose loss still leaves the
    /// state identifiable.
    pub fn redundant_views(&self) -> Vec<usize> {
        (0..self.config.views.len()).filter(|&i| self.identifies_state(&[i])).collect()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Seed that produced the layout (after any regeneration bumps).
    pub fn layout_seed(&self) -> u64 {
        self.layout_seed
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn n_states(&self) -> usize {
        self.cells.len()
    }

    pub fn n_actions(&self) -> usize {
        ACTIONS.len()
    }

    pub fn goal_state(&self) -> usize {
        self.goal_state
    }

    pub fn cell(&self, state: usize) -> (usize, usize) {
        self.cells[state]
    }

    pub fn state_at(&self, cell: (usize, usize)) -> Option<usize> {
        self.state_of_cell.get(cell.0 * self.config.grid_size + cell.1).copied().flatten()
    }

    /// Start states: every free cell except the goal.
    pub fn start_states(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&s| s != self.goal_state).collect()
    }

    /// Undiscounted return of a shortest path from `state`.
    pub fn optimal_return(&self, state: usize) -> f64 {
        let (r, c) = self.cells[state];
        let d = self.layout.goal_distances()[r * self.config.grid_size + c].expect("connected layout");
        if d == 0 {
            0.0
        } else {
            GOAL_REWARD + STEP_PENALTY * (d as f64 - 1.0)
        }
    }

    /// Hidden state; verification only.
    pub fn state(&self) -> usize {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Restarts the episode randomness; the next call must be a reset.
    pub fn reseed(&mut self, episode_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed);
        self.done = true;
    }

    pub fn reset(&mut self) -> MultiViewObservation {
        let starts = self.start_states();
        let s = starts[self.rng.random_range(0..starts.len())];
        self.reset_to(s)
    }

    /// Starts an episode from a chosen state.
    pub fn reset_to(&mut self, state: usize) -> MultiViewObservation {
        self.state = state;
        self.t = 0;
        self.done = state == self.goal_state;
        self.frames.clear();
        let frame = self.fresh_frame();
        for _ in 0..self.config.frame_stack {
            self.frames.push_back(frame.clone());
        }
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        if action >= ACTIONS.len() {
            return Err(invalid(format!("action {action} out of range")));
        }
        let next = self.layout.apply(self.cells[self.state], action);
        self.state = self.state_at(next).expect("moves stay on free cells");
        self.t += 1;
        let at_goal = self.state == self.goal_state;
        let reward = if at_goal { GOAL_REWARD } else { STEP_PENALTY };
        let truncated = !at_goal && self.t >= self.config.horizon;
        self.done = at_goal || truncated;
        let frame = self.fresh_frame();
        self.frames.pop_front();
        self.frames.push_back(frame);
        Ok(StepOutcome { obs: self.observe(), reward, done: self.done, truncated })
    }

    fn fresh_frame(&mut self) -> Vec<Vec<f64>> {
        let mut views = self.renders[self.state].clone();
        if self.config.distractor_view {
            let len = CHANNELS * self.config.view_size * self.config.view_size;
            views.push((0..len).map(|_| self.rng.random()).collect());
        }
        views
    }

    fn observe(&mut self) -> MultiViewObservation {
        let k = self.config.n_views();
        let views: Vec<Vec<f64>> =
            (0..k).map(|v| self.frames.iter().flat_map(|f| f[v].iter().copied()).collect()).collect();
        let mut obs = MultiViewObservation {
            channels: self.config.channels(),
            height: self.config.view_size,
            width: self.config.view_size,
            views,
            validity: vec![Validity::Present; k],
        };
        for v in 0..self.config.missing_view_prob.len() {
            let p = self.config.missing_view_prob[v];
            if p > 0.0 && self.rng.random::<f64>() < p {
                obs.mark_missing(v);
            }
        }
        obs
    }

    /// Observation of `state` with every view present (distractor noise,
    /// if any, drawn from `rng`), frame-stacked by repetition.
    pub fn render_state<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> MultiViewObservation {
        let mut views: Vec<Vec<f64>> = self.renders[state].iter().map(|v| v.repeat(self.config.frame_stack)).collect();
        if self.config.distractor_view {
            let len = self.config.channels() * self.config.view_size * self.config.view_size;
            views.push((0..len).map(|_| rng.random()).collect());
        }
        MultiViewObservation {
            channels: self.config.channels(),
            height: self.config.view_size,
            width: self.config.view_size,
            validity: vec![Validity::Present; views.len()],
            views,
        }
    }
}

fn build_mdp(
    layout: &Layout,
    cells: &[(usize, usize)],
    state_of_cell: &[Option<usize>],
    goal_state: usize,
) -> Result<TabularMdp> {
    let n = cells.len();
    let na = ACTIONS.len();
    let mut p = vec![0.0; n * na * n];
    let mut r = vec![0.0; n * na];
    for (s, &cell) in cells.iter().enumerate() {
        for a in 0..na {
            if s == goal_state {
                p[(s * na + a) * n + s] = 1.0;
                continue;
            }
            let next = layout.apply(cell, a);
            let t = state_of_cell[next.0 * layout.size + next.1].unwrap();
            p[(s * na + a) * n + t] = 1.0;
            r[s * na + a] = if t == goal_state { GOAL_REWARD } else { STEP_PENALTY };
        }
    }
    let mut p0 = vec![1.0 / (n - 1) as f64; n];
    p0[goal_state] = 0.0;
    let total: f64 = p0.iter().sum();
    let fix = 1.0 - total;
    if let Some(s) = (0..n).find(|&s| s != goal_state) {
        p0[s] += fix;
    }
    TabularMdp::new(n, na, 0.99, p, r, p0)
}
