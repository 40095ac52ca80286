//! Randomised sweeps over tabular MDPs: fixed-point convergence of both
//! bisimulation operators, and the aggregation value bound.

use crate::error::{Error, Result};
use crate::mdp::{
    action_max_metric, aggregate_epsilon, solve_fixed_point, verify_value_bound, write_mdp, BisimOperator, MetricKind,
    MetricMatrix, Policy, TabularMdp,
};
use crate::seeding::derive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Absolute roundoff allowance when comparing consecutive residuals.
pub const RESIDUAL_ROUNDOFF: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionSettings {
    pub count: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub c: f64,
    pub gamma: f64,
    /// Required final residual.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Required sup distance between fixed points from two initialisations.
    pub agreement: f64,
    /// Allowed excess of a residual ratio over `c`.
    pub factor_slack: f64,
    pub seed: u64,
}

impl Default for ContractionSettings {
    fn default() -> Self {
        Self {
            count: 50,
            max_states: 12,
            max_actions: 4,
            c: 0.9,
            gamma: 0.9,
            tolerance: 1e-9,
            max_iter: 2000,
            agreement: 1e-8,
            factor_slack: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionCase {
    pub index: usize,
    pub kind: MetricKind,
    pub n_states: usize,
    pub n_actions: usize,
    /// Iterations used by the slower of the two initialisations.
    pub iterations: usize,
    pub final_residual: f64,
    pub worst_factor: f64,
    pub factor_violations: usize,
    pub init_gap: f64,
    pub passed: bool,
    /// Text form of the MDP, kept only for failures.
    pub mdp: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub settings: ContractionSettings,
    pub cases: Vec<ContractionCase>,
    pub failures: usize,
    pub worst_factor: f64,
    pub max_iterations: usize,
    pub max_init_gap: f64,
}

fn random_policy<R: Rng + ?Sized>(rng: &mut R, n: usize, na: usize) -> Result<Policy> {
    let mut probs = Vec::with_capacity(n * na);
    for _ in 0..n {
        let w: Vec<f64> = (0..na).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = w.iter().sum();
        probs.extend(w.iter().map(|x| x / s));
    }
    Policy::new(n, na, probs)
}

fn random_mdp<R: Rng + ?Sized>(rng: &mut R, max_states: usize, max_actions: usize, gamma: f64) -> Result<TabularMdp> {
    let n = rng.random_range(2..=max_states.max(2));
    let na = rng.random_range(1..=max_actions.max(1));
    TabularMdp::random(rng, n, na, gamma)
}

/// Each MDP and policy is drawn from its own derived stream, so a case can
/// be replayed in isolation from `(seed, index)`.
pub fn contraction_suite(s: &ContractionSettings) -> Result<ContractionReport> {
    if !(0.0..1.0).contains(&s.c) {
        return Err(Error::Config(format!("c must lie in [0, 1), got {}", s.c)));
    }
    if s.max_states < 2 || s.max_actions < 1 || s.count == 0 {
        return Err(Error::Config("count, max_states >= 2 and max_actions >= 1 are required".into()));
    }
    let mut cases = Vec::new();
    for index in 0..s.count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(s.seed, &[0xC0, index as u64]));
        let mdp = random_mdp(&mut rng, s.max_states, s.max_actions, s.gamma)?;
        let policy = random_policy(&mut rng, mdp.n_states(), mdp.n_actions())?;
        for kind in [MetricKind::Mico, MetricKind::Wasserstein] {
            let op = BisimOperator::new(&mdp, &policy, s.c, kind)?;
            let n = mdp.n_states();
            let runs: Vec<_> = (0..2)
                .map(|_| {
                    let init = MetricMatrix::random(n, 10.0, &mut rng);
                    solve_fixed_point(&op, &init, s.tolerance * 0.5, s.max_iter)
                })
                .collect();
            let case = match (&runs[0], &runs[1]) {
                (Ok(a), Ok(b)) => {
                    let gap = a.metric.sup_distance(&b.metric);
                    let factor = s.c + s.factor_slack;
                    let violations = a.contraction_violations(factor, RESIDUAL_ROUNDOFF)
                        + b.contraction_violations(factor, RESIDUAL_ROUNDOFF);
                    let residual =
                        a.residuals.last().copied().unwrap_or(0.0).max(b.residuals.last().copied().unwrap_or(0.0));
                    let passed = violations == 0 && gap < s.agreement && residual < s.tolerance;
                    ContractionCase {
                        index,
                        kind,
                        n_states: n,
                        n_actions: mdp.n_actions(),
                        iterations: a.iterations.max(b.iterations),
                        final_residual: residual,
                        worst_factor: a.worst_contraction(1e-12).max(b.worst_contraction(1e-12)),
                        factor_violations: violations,
                        init_gap: gap,
                        passed,
                        mdp: (!passed).then(|| write_mdp(&mdp)),
                    }
                }
                _ => ContractionCase {
                    index,
                    kind,
                    n_states: n,
                    n_actions: mdp.n_actions(),
                    iterations: s.max_iter,
                    final_residual: f64::INFINITY,
                    worst_factor: f64::INFINITY,
                    factor_violations: 0,
                    init_gap: f64::INFINITY,
                    passed: false,
                    mdp: Some(write_mdp(&mdp)),
                },
            };
            cases.push(case);
        }
    }
    Ok(ContractionReport {
        settings: s.clone(),
        failures: cases.iter().filter(|c| !c.passed).count(),
        worst_factor: cases.iter().map(|c| c.worst_factor).fold(0.0, f64::max),
        max_iterations: cases.iter().map(|c| c.iterations).max().unwrap_or(0),
        max_init_gap: cases.iter().map(|c| c.init_gap).fold(0.0, f64::max),
        cases,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSettings {
    pub count: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma: f64,
    pub c: f64,
    pub kind: MetricKind,
    pub seed: u64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self { count: 100, max_states: 12, max_actions: 4, gamma: 0.9, c: 0.95, kind: MetricKind::Mico, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCase {
    pub index: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_clusters: usize,
    pub epsilon: f64,
    pub bound: f64,
    pub max_difference: f64,
    pub slack: f64,
    pub violation: bool,
    pub mdp: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSuiteReport {
    pub settings: BoundSettings,
    pub cases: Vec<BoundCase>,
    pub violations: usize,
    pub min_slack: f64,
    pub max_slack: f64,
}

/// Aggregates each random MDP at a radius drawn from its own pairwise
/// distances and checks the optimal-value gap against the bound.
pub fn bound_suite(s: &BoundSettings) -> Result<BoundSuiteReport> {
    if !(s.gamma > 0.0 && s.gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", s.gamma)));
    }
    if !(s.c >= s.gamma && s.c < 1.0) {
        return Err(Error::Config(format!("the bound needs gamma <= c < 1 (got c = {}, gamma = {})", s.c, s.gamma)));
    }
    if s.max_states < 2 || s.max_actions < 1 || s.count == 0 {
        return Err(Error::Config("count, max_states >= 2 and max_actions >= 1 are required".into()));
    }
    let mut cases = Vec::new();
    for index in 0..s.count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(s.seed, &[0xB0, index as u64]));
        let mdp = random_mdp(&mut rng, s.max_states, s.max_actions, s.gamma)?;
        let fp = action_max_metric(&mdp, s.c, s.kind, 1e-12, 20_000)?;
        let dists: Vec<f64> = fp.metric.pairs().map(|(_, _, d)| d).collect();
        let radius = if dists.is_empty() { 0.0 } else { dists[rng.random_range(0..dists.len())] };
        let agg = aggregate_epsilon(&fp.metric, radius)?;
        let r = verify_value_bound(&mdp, &agg, s.c)?;
        cases.push(BoundCase {
            index,
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            n_clusters: r.n_clusters,
            epsilon: r.epsilon,
            bound: r.bound,
            max_difference: r.max_difference(),
            slack: r.slack,
            violation: r.violation,
            mdp: r.violation.then(|| write_mdp(&mdp)),
        });
    }
    Ok(BoundSuiteReport {
        settings: s.clone(),
        violations: cases.iter().filter(|c| c.violation).count(),
        min_slack: cases.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min),
        max_slack: cases.iter().map(|c| c.slack).fold(f64::NEG_INFINITY, f64::max),
        cases,
    })
}
