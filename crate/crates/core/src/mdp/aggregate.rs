//! ε-aggregation of states, the induced latent MDP, and the value-gap bound.

use super::value::value_iteration;
use super::{MetricMatrix, TabularMdp};
use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

/// Absolute slack on the bound check, covering value-iteration tolerance.
pub const BOUND_SLACK: f64 = 1e-6;
const VALUE_TOL: f64 = 1e-11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub cluster_of: Vec<usize>,
    /// First member of each cluster, the state every later member was
    /// compared against.
    pub representatives: Vec<usize>,
    /// Achieved radius: any two states sharing a cluster are within
    /// `2·epsilon` of each other, and every member is within `epsilon` of its
    /// representative.
    pub epsilon: f64,
}

impl Aggregation {
    pub fn identity(n: usize) -> Self {
        Self { cluster_of: (0..n).collect(), representatives: (0..n).collect(), epsilon: 0.0 }
    }

    pub fn n_clusters(&self) -> usize {
        self.representatives.len()
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.cluster_of.iter().enumerate().filter(move |&(_, &c)| c == cluster).map(|(s, _)| s)
    }
}

/// Greedy first-fit clustering: states are scanned in index order and join
/// the first cluster whose representative lies within `radius`, otherwise
/// they open a new cluster.
///
/// The recorded epsilon is the larger of the worst member-to-representative
/// distance and half the worst within-cluster pairwise distance. The second
/// term matters because the independent-coupling metric need not satisfy the
/// triangle inequality.
pub fn aggregate_epsilon(metric: &MetricMatrix, radius: f64) -> Result<Aggregation> {
    if !(radius >= 0.0) {
        return Err(invalid(format!("radius must be nonnegative, got {radius}")));
    }
    let n = metric.len();
    let mut cluster_of = vec![0; n];
    let mut reps: Vec<usize> = Vec::new();
    for s in 0..n {
        match reps.iter().position(|&r| metric.get(s, r) <= radius) {
            Some(c) => cluster_of[s] = c,
            None => {
                cluster_of[s] = reps.len();
                reps.push(s);
            }
        }
    }
    let mut eps: f64 = 0.0;
    for s in 0..n {
        eps = eps.max(metric.get(s, reps[cluster_of[s]]));
        for t in s + 1..n {
            if cluster_of[s] == cluster_of[t] {
                eps = eps.max(0.5 * metric.get(s, t));
            }
        }
    }
    Ok(Aggregation { cluster_of, representatives: reps, epsilon: eps })
}

fn cluster_weights(mdp: &TabularMdp, agg: &Aggregation) -> Vec<f64> {
    let p0 = mdp.initial();
    let k = agg.n_clusters();
    let mut mass = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (s, &c) in agg.cluster_of.iter().enumerate() {
        mass[c] += p0[s];
        count[c] += 1;
    }
    agg.cluster_of
        .iter()
        .enumerate()
        .map(|(s, &c)| if mass[c] > 0.0 { p0[s] / mass[c] } else { 1.0 / count[c] as f64 })
        .collect()
}

/// Latent MDP over clusters: rewards and cluster-level transitions are
/// member averages weighted by `p0` restricted to the cluster (uniform when
/// the cluster carries no initial mass).
pub fn build_latent_mdp(mdp: &TabularMdp, agg: &Aggregation) -> Result<TabularMdp> {
    let n = mdp.n_states();
    if agg.cluster_of.len() != n || agg.cluster_of.iter().any(|&c| c >= agg.n_clusters()) {
        return Err(invalid("aggregation does not cover the MDP's states"));
    }
    let (k, na) = (agg.n_clusters(), mdp.n_actions());
    let w = cluster_weights(mdp, agg);
    let mut p = vec![0.0; k * na * k];
    let mut r = vec![0.0; k * na];
    let mut p0 = vec![0.0; k];
    for s in 0..n {
        let c = agg.cluster_of[s];
        p0[c] += mdp.initial()[s];
        for a in 0..na {
            r[c * na + a] += w[s] * mdp.reward(s, a);
            let row = &mut p[(c * na + a) * k..][..k];
            for (t, &q) in mdp.transition(s, a).iter().enumerate() {
                row[agg.cluster_of[t]] += w[s] * q;
            }
        }
    }
    for row in p.chunks_mut(k) {
        super::tabular::renormalize(row);
    }
    super::tabular::renormalize(&mut p0);
    TabularMdp::new(k, na, mdp.gamma(), p, r, p0)
}

/// Worst per-(state, action) violation of the latent model's Markov
/// property: reward gap plus L1 gap between the state's cluster-level
/// transition and its cluster's latent transition.
pub fn markov_error(mdp: &TabularMdp, agg: &Aggregation, latent: &TabularMdp) -> f64 {
    let k = agg.n_clusters();
    let mut worst: f64 = 0.0;
    for s in 0..mdp.n_states() {
        let c = agg.cluster_of[s];
        for a in 0..mdp.n_actions() {
            let mut mapped = vec![0.0; k];
            for (t, &q) in mdp.transition(s, a).iter().enumerate() {
                mapped[agg.cluster_of[t]] += q;
            }
            let l1: f64 = mapped.iter().zip(latent.transition(c, a)).map(|(x, y)| (x - y).abs()).sum();
            worst = worst.max((mdp.reward(s, a) - latent.reward(c, a)).abs() + l1);
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `|V*(s) - V̄*(φ(s))|` per original state.
    pub differences: Vec<f64>,
    pub bound: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub c: f64,
    pub n_clusters: usize,
    /// Markov-property approximation error of the aggregation.
    pub eta: f64,
    pub violation: bool,
    /// `bound - max difference`.
    pub slack: f64,
}

impl BoundReport {
    pub fn max_difference(&self) -> f64 {
        self.differences.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares optimal values of `mdp` and its latent MDP under `agg` against
/// `2ε / ((1 - γ)(1 - c))`.
///
/// The metric the aggregation was built from must have been computed with
/// this `c`; `c < γ` falls outside the bound's hypotheses and is rejected.
pub fn verify_value_bound(mdp: &TabularMdp, agg: &Aggregation, c: f64) -> Result<BoundReport> {
    let gamma = mdp.gamma();
    if !(c >= gamma && c < 1.0) {
        return Err(invalid(format!("bound requires gamma <= c < 1, got c = {c}, gamma = {gamma}")));
    }
    let latent = build_latent_mdp(mdp, agg)?;
    let v = value_iteration(mdp, VALUE_TOL)?.values;
    let vbar = value_iteration(&latent, VALUE_TOL)?.values;
    let differences: Vec<f64> = (0..mdp.n_states()).map(|s| (v[s] - vbar[agg.cluster_of[s]]).abs()).collect();
    let bound = 2.0 * agg.epsilon / ((1.0 - gamma) * (1.0 - c));
    let worst = differences.iter().cloned().fold(0.0, f64::max);
    Ok(BoundReport {
        bound,
        epsilon: agg.epsilon,
        gamma,
        c,
        n_clusters: agg.n_clusters(),
        eta: markov_error(mdp, agg, &latent),
        violation: differences.iter().any(|&d| d > bound + BOUND_SLACK),
        slack: bound - worst,
        differences,
    })
}
