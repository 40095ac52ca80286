//! π-bisimulation metric operators and their fixed points.
//!
//! Both operators map a metric `g` to
//! `F(g)(i, j) = (1 - c)·|r^π_i - r^π_j| + c·T_g(P^π_i, P^π_j)` where `T_g`
//! is either the optimal-transport (Wasserstein) distance under cost `g` or
//! the independent-coupling expectation `Σ_k Σ_l P^π_i[k] P^π_j[l] g[k][l]`.
//!
//! The independent coupling gives a nonzero self-distance whenever `P^π_i`
//! is not a point mass. Outputs here are projected onto the zero-diagonal
//! cone (`F(g)(i, i) := 0`): the projection is 1-Lipschitz and monotone, so
//! contraction and uniqueness survive, and the result is a valid
//! [`MetricMatrix`].

use super::transport::optimal_transport;
use super::{Policy, TabularMdp};
use crate::error::{invalid, Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A symmetric, nonnegative, zero-diagonal `n × n` table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricMatrix {
    n: usize,
    d: Vec<f64>,
}

impl MetricMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, d: vec![0.0; n * n] }
    }

    /// Validates symmetry, nonnegativity and the zero diagonal.
    pub fn from_vec(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(invalid(format!("metric needs {} entries, got {}", n * n, d.len())));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(invalid(format!("metric diagonal ({i},{i}) is {}", d[i * n + i])));
            }
            for j in 0..n {
                let x = d[i * n + j];
                if !(x >= 0.0) || !x.is_finite() || x != d[j * n + i] {
                    return Err(invalid(format!("metric entry ({i},{j}) = {x} breaks symmetry/nonnegativity")));
                }
            }
        }
        Ok(Self { n, d })
    }

    /// Symmetric random entries uniform in `[0, scale)`.
    pub fn random<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i + 1..n {
                let x = rng.random::<f64>() * scale;
                m.set(i, j, x);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, x: f64) {
        self.d[i * self.n + j] = x;
        self.d[j * self.n + i] = x;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }

    pub fn max_entry(&self) -> f64 {
        self.d.iter().cloned().fold(0.0, f64::max)
    }

    pub fn sup_distance(&self, other: &MetricMatrix) -> f64 {
        self.d.iter().zip(&other.d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Off-diagonal entries `(i, j, d)` with `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| (i + 1..self.n).map(move |j| (i, j, self.get(i, j))))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Wasserstein,
    Mico,
}

/// A bisimulation operator for one (MDP, policy, c), with `r^π` and `P^π`
/// precomputed.
#[derive(Clone, Debug)]
pub struct BisimOperator {
    kind: MetricKind,
    c: f64,
    n: usize,
    r: Vec<f64>,
    p: Vec<f64>,
    /// Support of each `P^π_i` as (state, probability).
    support: Vec<Vec<(usize, f64)>>,
}

impl BisimOperator {
    pub fn new(mdp: &TabularMdp, policy: &Policy, c: f64, kind: MetricKind) -> Result<Self> {
        let (r, p) = policy.induced(mdp)?;
        Self::from_chain(r, p, c, kind)
    }

    /// Builds the operator from an explicit reward vector and row-stochastic
    /// `n × n` chain.
    pub fn from_chain(r: Vec<f64>, p: Vec<f64>, c: f64, kind: MetricKind) -> Result<Self> {
        if !(0.0..1.0).contains(&c) {
            return Err(invalid(format!("c must lie in [0, 1), got {c}")));
        }
        let n = r.len();
        if p.len() != n * n {
            return Err(invalid("chain must be |S| x |S|"));
        }
        let support = p
            .chunks(n.max(1))
            .take(n)
            .map(|row| row.iter().cloned().enumerate().filter(|&(_, q)| q > 0.0).collect())
            .collect();
        Ok(Self { kind, c, n, r, p, support })
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn rewards(&self) -> &[f64] {
        &self.r
    }

    pub fn apply(&self, g: &MetricMatrix) -> MetricMatrix {
        assert_eq!(g.len(), self.n, "metric size does not match the operator");
        let n = self.n;
        let mut out = MetricMatrix::zeros(n);
        match self.kind {
            MetricKind::Mico => {
                // E = P g Pᵀ
                let mut pg = vec![0.0; n * n];
                for i in 0..n {
                    for &(k, q) in &self.support[i] {
                        let row = &g.d[k * n..(k + 1) * n];
                        for (dst, x) in pg[i * n..(i + 1) * n].iter_mut().zip(row) {
                            *dst += q * x;
                        }
                    }
                }
                for i in 0..n {
                    for j in i + 1..n {
                        let e: f64 = self.support[j].iter().map(|&(l, q)| q * pg[i * n + l]).sum();
                        out.set(i, j, self.combine(i, j, e));
                    }
                }
            }
            MetricKind::Wasserstein => {
                let mut cost = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        let (si, sj) = (&self.support[i], &self.support[j]);
                        cost.clear();
                        for &(k, _) in si {
                            for &(l, _) in sj {
                                cost.push(g.get(k, l));
                            }
                        }
                        let a: Vec<f64> = si.iter().map(|&(_, q)| q).collect();
                        let b: Vec<f64> = sj.iter().map(|&(_, q)| q).collect();
                        let w = optimal_transport(&a, &b, &cost).cost;
                        out.set(i, j, self.combine(i, j, w));
                    }
                }
            }
        }
        out
    }

    fn combine(&self, i: usize, j: usize, next: f64) -> f64 {
        ((1.0 - self.c) * (self.r[i] - self.r[j]).abs() + self.c * next).max(0.0)
    }

    /// Row `i` of `P^π`.
    pub fn chain_row(&self, i: usize) -> &[f64] {
        &self.p[i * self.n..(i + 1) * self.n]
    }
}

/// One application of the Wasserstein operator.
pub fn bisim_operator_wasserstein(mdp: &TabularMdp, policy: &Policy, g: &MetricMatrix, c: f64) -> Result<MetricMatrix> {
    Ok(BisimOperator::new(mdp, policy, c, MetricKind::Wasserstein)?.apply(g))
}

/// One application of the independent-coupling operator.
pub fn bisim_operator_mico(mdp: &TabularMdp, policy: &Policy, g: &MetricMatrix, c: f64) -> Result<MetricMatrix> {
    Ok(BisimOperator::new(mdp, policy, c, MetricKind::Mico)?.apply(g))
}

#[derive(Clone, Debug)]
pub struct FixedPoint {
    pub metric: MetricMatrix,
    pub iterations: usize,
    /// `‖g_{t+1} - g_t‖∞` for every step taken.
    pub residuals: Vec<f64>,
}

impl FixedPoint {
    /// Largest ratio of consecutive residuals, ignoring steps whose previous
    /// residual is below `floor` (pure roundoff).
    pub fn worst_contraction(&self, floor: f64) -> f64 {
        self.residuals.windows(2).filter(|w| w[0] > floor).map(|w| w[1] / w[0]).fold(0.0, f64::max)
    }

    /// Steps where `res_{t+1} > factor·res_t + roundoff`.
    pub fn contraction_violations(&self, factor: f64, roundoff: f64) -> usize {
        self.residuals.windows(2).filter(|w| w[1] > factor * w[0] + roundoff).count()
    }
}

/// Iterates `op` from `init` until successive iterates differ by at most
/// `tolerance`.
pub fn solve_fixed_point(
    op: &BisimOperator,
    init: &MetricMatrix,
    tolerance: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    if !(tolerance > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let mut g = init.clone();
    let mut residuals = Vec::new();
    for it in 1..=max_iter {
        let next = op.apply(&g);
        let res = next.sup_distance(&g);
        residuals.push(res);
        g = next;
        if res <= tolerance {
            return Ok(FixedPoint { metric: g, iterations: it, residuals });
        }
    }
    Err(Error::NotConverged {
        what: "bisimulation fixed point",
        iterations: max_iter,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        trace: residuals,
    })
}

/// Fixed point of the policy-independent operator
/// `g ↦ max_a [(1 − c)|R(i,a) − R(j,a)| + c·D_a(g)(i, j)]`, where `D_a` is
/// the kind's transition term for action `a`. Unlike an on-policy metric,
/// close states agree under every action, which is what the value bound
/// on aggregated MDPs needs.
pub fn action_max_metric(
    mdp: &TabularMdp,
    c: f64,
    kind: MetricKind,
    tolerance: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    if !(tolerance > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let n = mdp.n_states();
    let ops = (0..mdp.n_actions())
        .map(|a| BisimOperator::new(mdp, &Policy::deterministic(&vec![a; n], mdp.n_actions()), c, kind))
        .collect::<Result<Vec<_>>>()?;
    let mut g = MetricMatrix::zeros(n);
    let mut residuals = Vec::new();
    for it in 1..=max_iter {
        let mut next = ops[0].apply(&g);
        for op in &ops[1..] {
            let other = op.apply(&g);
            for (x, y) in next.d.iter_mut().zip(&other.d) {
                *x = x.max(*y);
            }
        }
        let res = next.sup_distance(&g);
        residuals.push(res);
        g = next;
        if res <= tolerance {
            return Ok(FixedPoint { metric: g, iterations: it, residuals });
        }
    }
    Err(Error::NotConverged {
        what: "action-max bisimulation fixed point",
        iterations: max_iter,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        trace: residuals,
    })
}

/// Fixed point of the operator under the greedy optimal policy of `mdp`,
/// started from the zero metric.
pub fn greedy_policy_metric(
    mdp: &TabularMdp,
    c: f64,
    kind: MetricKind,
    tolerance: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    let sol = super::value_iteration(mdp, 1e-11)?;
    let policy = Policy::deterministic(&sol.greedy, mdp.n_actions());
    let op = BisimOperator::new(mdp, &policy, c, kind)?;
    solve_fixed_point(&op, &MetricMatrix::zeros(mdp.n_states()), tolerance, max_iter)
}
