//! Exact optimal transport between small discrete distributions.
//!
//! Successive shortest paths on the bipartite transport network. Dijkstra
//! runs on reduced costs with node potentials, so every augmentation is a
//! cheapest path and the final plan is optimal; the potentials double as a
//! dual certificate.

/// Masses below this are treated as exhausted.
const MASS_TOL: f64 = 1e-15;

#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub cost: f64,
    /// `[i][j]` mass moved from source `i` to sink `j`.
    pub flow: Vec<f64>,
    /// Dual variables: `u[i] + v[j] <= cost[i][j]`, with equality on used arcs.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Solves `min Σ flow·cost` subject to row sums `a` and column sums `b`.
///
/// `cost` is `a.len() × b.len()` row-major and must be nonnegative-finite.
/// `a` and `b` should carry equal total mass; any roundoff surplus is left
/// unshipped.
pub fn optimal_transport(a: &[f64], b: &[f64], cost: &[f64]) -> TransportPlan {
    let (m, n) = (a.len(), b.len());
    assert_eq!(cost.len(), m * n, "cost matrix must be {m}x{n}");
    let mut flow = vec![0.0; m * n];
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    // potentials: sources 0..m, sinks m..m+n; reduced cost c + pi[u] - pi[v]
    let mut pi = vec![0.0; m + n];
    for j in 0..n {
        pi[m + j] = (0..m).map(|i| cost[i * n + j]).fold(f64::INFINITY, f64::min);
    }
    if m == 0 || n == 0 {
        return TransportPlan { cost: 0.0, flow, u: vec![], v: vec![] };
    }

    let nodes = m + n;
    let mut dist = vec![0.0; nodes];
    let mut prev = vec![usize::MAX; nodes];
    let mut done = vec![false; nodes];
    let cap = 64 * nodes * nodes + 64;
    for _ in 0..cap {
        if supply.iter().all(|&s| s <= MASS_TOL) {
            break;
        }
        for v in 0..nodes {
            dist[v] = if v < m && supply[v] > MASS_TOL { 0.0 } else { f64::INFINITY };
            prev[v] = usize::MAX;
            done[v] = false;
        }
        let mut target = None;
        loop {
            let u =
                (0..nodes).filter(|&v| !done[v] && dist[v].is_finite()).min_by(|&x, &y| dist[x].total_cmp(&dist[y]));
            let Some(u) = u else { break };
            done[u] = true;
            if u >= m {
                let j = u - m;
                if demand[j] > MASS_TOL {
                    target = Some(u);
                    break;
                }
                // residual reverse arcs sink j -> source i
                for i in 0..m {
                    if flow[i * n + j] > MASS_TOL && !done[i] {
                        let rc = (-cost[i * n + j] + pi[u] - pi[i]).max(0.0);
                        let nd = dist[u] + rc;
                        if nd < dist[i] {
                            dist[i] = nd;
                            prev[i] = u;
                        }
                    }
                }
            } else {
                for j in 0..n {
                    let v = m + j;
                    if !done[v] {
                        let rc = (cost[u * n + j] + pi[u] - pi[v]).max(0.0);
                        let nd = dist[u] + rc;
                        if nd < dist[v] {
                            dist[v] = nd;
                            prev[v] = u;
                        }
                    }
                }
            }
        }
        let Some(t) = target else { break };
        let dt = dist[t];
        for v in 0..nodes {
            pi[v] += dist[v].min(dt);
        }
        // bottleneck along the path
        let mut amount = demand[t - m];
        let mut v = t;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= m {
                amount = amount.min(flow[v * n + (u - m)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        let source = v;
        let mut v = t;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < m {
                flow[u * n + (v - m)] += amount;
            } else {
                let f = &mut flow[v * n + (u - m)];
                *f -= amount;
                if *f < MASS_TOL {
                    *f = 0.0;
                }
            }
            v = u;
        }
        supply[source] -= amount;
        demand[t - m] -= amount;
    }
    let total = flow.iter().zip(cost).map(|(f, c)| f * c).sum();
    TransportPlan { cost: total, flow, u: pi[..m].iter().map(|p| -p).collect(), v: pi[m..].to_vec() }
}
