mod common;

use common::{deterministic_mdp, duplicate_state};
use mvfuse_core::mdp::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_policy(r: &mut ChaCha8Rng, n: usize, na: usize) -> Policy {
    let mut probs = Vec::new();
    for _ in 0..n {
        let w: Vec<f64> = (0..na).map(|_| r.random::<f64>()).collect();
        let s: f64 = w.iter().sum();
        let mut row: Vec<f64> = w.iter().map(|x| x / s).collect();
        let fix = 1.0 - row.iter().sum::<f64>();
        row[0] += fix;
        probs.extend(row);
    }
    Policy::new(n, na, probs).unwrap()
}

// ---- value iteration -------------------------------------------------------

#[test]
fn value_iteration_matches_truncated_rollout_oracle() {
    let mut r = rng(21);
    let mdp = TabularMdp::random(&mut r, 8, 3, 0.9).unwrap();
    let sol = value_iteration(&mdp, 1e-12).unwrap();
    let n = 8;
    for s in 0..n {
        let mut dist = vec![0.0; n];
        dist[s] = 1.0;
        let mut total = 0.0;
        let mut disc = 1.0;
        for _ in 0..10_000 {
            let mut next = vec![0.0; n];
            for (t, &w) in dist.iter().enumerate() {
                let a = sol.greedy[t];
                total += disc * w * mdp.reward(t, a);
                for (u, &q) in mdp.transition(t, a).iter().enumerate() {
                    next[u] += w * q;
                }
            }
            dist = next;
            disc *= mdp.gamma();
        }
        assert!((total - sol.values[s]).abs() < 1e-4, "state {s}: {total} vs {}", sol.values[s]);
    }
    // Bellman residual contract
    assert!(sol.residual <= 1e-12);
}

#[test]
fn value_iteration_rejects_bad_tolerance() {
    let mdp = TabularMdp::new(1, 1, 0.5, vec![1.0], vec![1.0], vec![1.0]).unwrap();
    assert!(value_iteration(&mdp, 0.0).is_err());
}

// ---- operators ---------------------------------------------------------------

#[test]
fn indistinguishable_states_get_zero_distance() {
    // states 0 and 1 share rewards and transitions
    let p = vec![0.2, 0.3, 0.5, 0.2, 0.3, 0.5, 0.0, 0.0, 1.0];
    let mdp = TabularMdp::new(3, 1, 0.9, p, vec![0.4, 0.4, 1.0], vec![1.0 / 3.0; 3]).unwrap();
    let pol = Policy::uniform(3, 1);
    let g = MetricMatrix::random(3, 5.0, &mut rng(1));
    let out = bisim_operator_wasserstein(&mdp, &pol, &g, 0.7).unwrap();
    assert_eq!(out.get(0, 1), 0.0);
    // The independent coupling only collapses them when the shared next-state
    // distribution is a point mass.
    let out = bisim_operator_mico(&mdp, &pol, &g, 0.7).unwrap();
    assert!(out.get(0, 1) > 0.0);
    let det = deterministic_mdp(&[vec![2], vec![2], vec![0]], &[vec![0.4], vec![0.4], vec![1.0]], 0.9);
    let out = bisim_operator_mico(&det, &pol, &g, 0.7).unwrap();
    assert_eq!(out.get(0, 1), 0.0);
}

#[test]
fn zero_metric_leaves_only_reward_gaps() {
    let mut r = rng(2);
    let mdp = TabularMdp::random(&mut r, 6, 2, 0.9).unwrap();
    let pol = random_policy(&mut r, 6, 2);
    let (rp, _) = pol.induced(&mdp).unwrap();
    let c = 0.6;
    let zero = MetricMatrix::zeros(6);
    for out in
        [bisim_operator_wasserstein(&mdp, &pol, &zero, c).unwrap(), bisim_operator_mico(&mdp, &pol, &zero, c).unwrap()]
    {
        for (i, j, d) in out.pairs() {
            assert_eq!(d, (1.0 - c) * (rp[i] - rp[j]).abs());
        }
    }
}

#[test]
fn hand_computed_three_state_application() {
    // deterministic chain 0 -> 1 -> 2 -> 2, rewards (0, 0.5, 1)
    let mdp = deterministic_mdp(&[vec![1], vec![2], vec![2]], &[vec![0.0], vec![0.5], vec![1.0]], 0.9);
    let pol = Policy::uniform(3, 1);
    let out = bisim_operator_wasserstein(&mdp, &pol, &MetricMatrix::zeros(3), 0.5).unwrap();
    assert_eq!(out.get(0, 2), 0.5);
}

#[test]
fn operators_reject_c_of_one() {
    let mdp = TabularMdp::new(1, 1, 0.5, vec![1.0], vec![1.0], vec![1.0]).unwrap();
    let pol = Policy::uniform(1, 1);
    let g = MetricMatrix::zeros(1);
    assert!(bisim_operator_wasserstein(&mdp, &pol, &g, 1.0).is_err());
    assert!(bisim_operator_mico(&mdp, &pol, &g, 1.5).is_err());
}

#[test]
fn deterministic_transitions_make_operators_agree() {
    let mut r = rng(3);
    for _ in 0..20 {
        let n = r.random_range(2..9);
        let na = r.random_range(1..4);
        let next: Vec<Vec<usize>> = (0..n).map(|_| (0..na).map(|_| r.random_range(0..n)).collect()).collect();
        let rewards: Vec<Vec<f64>> = (0..n).map(|_| (0..na).map(|_| r.random::<f64>()).collect()).collect();
        let mdp = deterministic_mdp(&next, &rewards, 0.9);
        let pol = Policy::deterministic(&(0..n).map(|_| r.random_range(0..na)).collect::<Vec<_>>(), na);
        let g = MetricMatrix::random(n, 2.0, &mut r);
        let w = bisim_operator_wasserstein(&mdp, &pol, &g, 0.8).unwrap();
        let m = bisim_operator_mico(&mdp, &pol, &g, 0.8).unwrap();
        assert_eq!(w, m);
        let zw = solve_fixed_point(
            &BisimOperator::new(&mdp, &pol, 0.8, MetricKind::Wasserstein).unwrap(),
            &MetricMatrix::zeros(n),
            1e-13,
            5000,
        )
        .unwrap();
        let zm = solve_fixed_point(
            &BisimOperator::new(&mdp, &pol, 0.8, MetricKind::Mico).unwrap(),
            &MetricMatrix::zeros(n),
            1e-13,
            5000,
        )
        .unwrap();
        assert_eq!(zw.metric, zm.metric);
    }
}

#[test]
fn mico_expectation_matches_monte_carlo() {
    let mut r = rng(4);
    let n = 6;
    let mdp = TabularMdp::random(&mut r, n, 2, 0.9).unwrap();
    let pol = random_policy(&mut r, n, 2);
    let g = MetricMatrix::random(n, 1.0, &mut r);
    let c = 0.9;
    let out = bisim_operator_mico(&mdp, &pol, &g, c).unwrap();
    let (rp, pp) = pol.induced(&mdp).unwrap();
    let sample = |r: &mut ChaCha8Rng, row: &[f64]| -> usize {
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (k, &q) in row.iter().enumerate() {
            acc += q;
            if u < acc {
                return k;
            }
        }
        row.iter().rposition(|&q| q > 0.0).unwrap()
    };
    const SAMPLES: usize = 1_000_000;
    for (i, j, d) in out.pairs() {
        let (pi, pj) = (&pp[i * n..(i + 1) * n], &pp[j * n..(j + 1) * n]);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..SAMPLES {
            let x = g.get(sample(&mut r, pi), sample(&mut r, pj));
            sum += x;
            sq += x * x;
        }
        let mean = sum / SAMPLES as f64;
        let se = ((sq / SAMPLES as f64 - mean * mean) / SAMPLES as f64).sqrt();
        let estimate = (1.0 - c) * (rp[i] - rp[j]).abs() + c * mean;
        assert!((estimate - d).abs() <= 3.0 * c * se + 1e-12, "pair ({i},{j}): {estimate} vs {d}, se {se}");
    }
}

// ---- fixed points ------------------------------------------------------------

fn random_deterministic(r: &mut ChaCha8Rng, n: usize, na: usize) -> TabularMdp {
    let next: Vec<Vec<usize>> = (0..n).map(|_| (0..na).map(|_| r.random_range(0..n)).collect()).collect();
    let rewards: Vec<Vec<f64>> = (0..n).map(|_| (0..na).map(|_| r.random::<f64>()).collect()).collect();
    deterministic_mdp(&next, &rewards, 0.9)
}

#[test]
fn duplicated_states_are_at_distance_zero() {
    let mut r = rng(5);
    let stochastic = duplicate_state(&TabularMdp::random(&mut r, 6, 3, 0.9).unwrap(), 2);
    let fp = greedy_policy_metric(&stochastic, 0.9, MetricKind::Wasserstein, 1e-12, 2000).unwrap();
    assert!(fp.metric.get(2, 6) <= 1e-9, "{}", fp.metric.get(2, 6));

    let det = duplicate_state(&random_deterministic(&mut r, 6, 3), 2);
    for kind in [MetricKind::Mico, MetricKind::Wasserstein] {
        let fp = greedy_policy_metric(&det, 0.9, kind, 1e-12, 2000).unwrap();
        assert!(fp.metric.get(2, 6) <= 1e-9, "{kind:?}: {}", fp.metric.get(2, 6));
    }
}

#[test]
fn single_state_fixed_point_is_zero() {
    let mdp = TabularMdp::new(1, 2, 0.9, vec![1.0, 1.0], vec![0.3, 0.8], vec![1.0]).unwrap();
    let fp = greedy_policy_metric(&mdp, 0.9, MetricKind::Mico, 1e-12, 10).unwrap();
    assert_eq!(fp.metric, MetricMatrix::zeros(1));
}

#[test]
fn fixed_point_is_unique_and_contracts() {
    let mut r = rng(6);
    let mdp = TabularMdp::random(&mut r, 10, 3, 0.9).unwrap();
    let pol = random_policy(&mut r, 10, 3);
    for kind in [MetricKind::Mico, MetricKind::Wasserstein] {
        let op = BisimOperator::new(&mdp, &pol, 0.9, kind).unwrap();
        let a = solve_fixed_point(&op, &MetricMatrix::zeros(10), 1e-12, 2000).unwrap();
        let b = solve_fixed_point(&op, &MetricMatrix::random(10, 10.0, &mut r), 1e-12, 2000).unwrap();
        assert!(a.metric.sup_distance(&b.metric) < 1e-8);
        assert!(op.apply(&a.metric).sup_distance(&a.metric) < 1e-9);
        assert_eq!(a.contraction_violations(0.9 + 1e-9, 1e-13), 0);
        assert_eq!(b.contraction_violations(0.9 + 1e-9, 1e-13), 0);
    }
}

#[test]
fn solver_reports_residual_trace_when_capped() {
    let mut r = rng(7);
    let mdp = TabularMdp::random(&mut r, 5, 2, 0.9).unwrap();
    let op = BisimOperator::new(&mdp, &Policy::uniform(5, 2), 0.9, MetricKind::Mico).unwrap();
    match solve_fixed_point(&op, &MetricMatrix::random(5, 3.0, &mut r), 1e-14, 3) {
        Err(mvfuse_core::Error::NotConverged { trace, .. }) => assert_eq!(trace.len(), 3),
        other => panic!("{other:?}"),
    }
}

fn pair_of_ordered_metrics(n: usize, seed: u64) -> (MetricMatrix, MetricMatrix) {
    let mut r = rng(seed);
    let g = MetricMatrix::random(n, 2.0, &mut r);
    let bump = MetricMatrix::random(n, 1.0, &mut r);
    let h: Vec<f64> = g.as_slice().iter().zip(bump.as_slice()).map(|(a, b)| a + b).collect();
    (g, MetricMatrix::from_vec(n, h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operators_are_monotone_contractions(seed in 0u64..10_000, n in 2usize..9, c in 0.0f64..0.99) {
        let mut r = rng(seed);
        let mdp = TabularMdp::random(&mut r, n, 2, 0.9).unwrap();
        let pol = random_policy(&mut r, n, 2);
        let (g, h) = pair_of_ordered_metrics(n, seed + 1);
        for kind in [MetricKind::Mico, MetricKind::Wasserstein] {
            let op = BisimOperator::new(&mdp, &pol, c, kind).unwrap();
            let (fg, fh) = (op.apply(&g), op.apply(&h));
            for (x, y) in fg.as_slice().iter().zip(fh.as_slice()) {
                prop_assert!(*x <= *y + 1e-12);
            }
            prop_assert!(fg.sup_distance(&fh) <= c * g.sup_distance(&h) + 1e-12);
            prop_assert!(MetricMatrix::from_vec(n, fg.as_slice().to_vec()).is_ok());
        }
    }
}

// ---- aggregation and latent MDPs -------------------------------------------

#[test]
fn zero_radius_keeps_distinct_states_apart() {
    let mut r = rng(8);
    let g = MetricMatrix::random(7, 1.0, &mut r);
    let agg = aggregate_epsilon(&g, 0.0).unwrap();
    assert_eq!(agg.n_clusters(), 7);
    assert_eq!(agg.epsilon, 0.0);
}

#[test]
fn radius_above_max_gives_one_cluster() {
    let mut r = rng(9);
    let g = MetricMatrix::random(7, 1.0, &mut r);
    let agg = aggregate_epsilon(&g, g.max_entry()).unwrap();
    assert_eq!(agg.n_clusters(), 1);
}

#[test]
fn tiny_radius_merges_only_duplicates() {
    let mut r = rng(10);
    let cases = [
        (duplicate_state(&TabularMdp::random(&mut r, 6, 2, 0.9).unwrap(), 4), MetricKind::Wasserstein),
        (duplicate_state(&random_deterministic(&mut r, 6, 2), 4), MetricKind::Mico),
    ];
    for (mdp, kind) in cases {
        let fp = greedy_policy_metric(&mdp, 0.9, kind, 1e-12, 2000).unwrap();
        let agg = aggregate_epsilon(&fp.metric, 1e-9).unwrap();
        assert_eq!(agg.cluster_of[4], agg.cluster_of[6]);
        // every other state stays alone
        let shared = (0..7).filter(|&s| agg.cluster_of[s] == agg.cluster_of[4]).count();
        assert_eq!(shared, 2);
        assert_eq!(agg.n_clusters(), 6, "{:?}", fp.metric);
    }
}

#[test]
fn within_cluster_pairs_respect_twice_epsilon() {
    let mut r = rng(11);
    for _ in 0..50 {
        let n = r.random_range(2..12);
        let g = MetricMatrix::random(n, 1.0, &mut r);
        let agg = aggregate_epsilon(&g, r.random::<f64>()).unwrap();
        for (i, j, d) in g.pairs() {
            if agg.cluster_of[i] == agg.cluster_of[j] {
                assert!(d <= 2.0 * agg.epsilon + 1e-15);
            }
        }
    }
}

#[test]
fn identity_aggregation_reproduces_the_mdp() {
    let mut r = rng(12);
    let mdp = TabularMdp::random(&mut r, 6, 3, 0.9).unwrap();
    let latent = build_latent_mdp(&mdp, &Aggregation::identity(6)).unwrap();
    for s in 0..6 {
        for a in 0..3 {
            assert_eq!(latent.reward(s, a), mdp.reward(s, a));
            for (x, y) in latent.transition(s, a).iter().zip(mdp.transition(s, a)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn merging_duplicates_preserves_values() {
    let mut r = rng(13);
    let mdp = duplicate_state(&TabularMdp::random(&mut r, 7, 3, 0.9).unwrap(), 1);
    let fp = greedy_policy_metric(&mdp, 0.9, MetricKind::Wasserstein, 1e-12, 2000).unwrap();
    let agg = aggregate_epsilon(&fp.metric, 1e-9).unwrap();
    assert_eq!(agg.n_clusters(), 7);
    let latent = build_latent_mdp(&mdp, &agg).unwrap();
    let v = value_iteration(&mdp, 1e-12).unwrap().values;
    let vl = value_iteration(&latent, 1e-12).unwrap().values;
    for s in 0..mdp.n_states() {
        assert!((v[s] - vl[agg.cluster_of[s]]).abs() < 1e-8);
    }
    let report = verify_value_bound(&mdp, &agg, 0.95).unwrap();
    assert!(report.max_difference() <= 1e-8 && !report.violation);
}

#[test]
fn single_cluster_averages_rewards() {
    let mdp = TabularMdp::new(2, 1, 0.9, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
    let agg = aggregate_epsilon(&MetricMatrix::from_vec(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap(), 1.0).unwrap();
    let latent = build_latent_mdp(&mdp, &agg).unwrap();
    assert_eq!(latent.reward(0, 0), 0.5);
}

#[test]
fn identity_aggregation_has_zero_bound_and_no_violation() {
    let mut r = rng(14);
    let mdp = TabularMdp::random(&mut r, 5, 2, 0.9).unwrap();
    let report = verify_value_bound(&mdp, &Aggregation::identity(5), 0.95).unwrap();
    assert_eq!(report.bound, 0.0);
    assert!(report.differences.iter().all(|&d| d == 0.0));
    assert!(!report.violation);
}

#[test]
fn bound_requires_c_at_least_gamma() {
    let mut r = rng(15);
    let mdp = TabularMdp::random(&mut r, 4, 2, 0.9).unwrap();
    assert!(verify_value_bound(&mdp, &Aggregation::identity(4), 0.85).is_err());
    assert!(verify_value_bound(&mdp, &Aggregation::identity(4), 0.9).is_ok());
}

#[test]
fn bound_holds_on_random_aggregations() {
    let mut r = rng(16);
    for _ in 0..30 {
        let n = r.random_range(2..=12);
        let na = r.random_range(1..=4);
        let mdp = TabularMdp::random(&mut r, n, na, 0.9).unwrap();
        let fp = action_max_metric(&mdp, 0.95, MetricKind::Mico, 1e-12, 5000).unwrap();
        let dists: Vec<f64> = fp.metric.pairs().map(|(_, _, d)| d).collect();
        let radius = dists[r.random_range(0..dists.len())];
        let agg = aggregate_epsilon(&fp.metric, radius).unwrap();
        let report = verify_value_bound(&mdp, &agg, 0.95).unwrap();
        assert!(!report.violation, "{report:?}");
    }
}

#[test]
fn bound_report_serializes_as_json_line() {
    let mut r = rng(17);
    let mdp = TabularMdp::random(&mut r, 3, 2, 0.9).unwrap();
    let report = verify_value_bound(&mdp, &Aggregation::identity(3), 0.95).unwrap();
    let line = serde_json::to_string(&report).unwrap();
    assert!(!line.contains('\n'));
    let back: BoundReport = serde_json::from_str(&line).unwrap();
    assert_eq!(back, report);
}

/// Two states that behave alike under the optimal action but not under the
/// others: the on-policy metric merges them and the bound breaks, the
/// action-max metric keeps them apart.
#[test]
fn bound_needs_the_action_max_metric() {
    let mdp = read_mdp(include_str!("data/offpolicy_bound.mdp")).unwrap();
    let on_policy = greedy_policy_metric(&mdp, 0.95, MetricKind::Mico, 1e-12, 20_000).unwrap();
    let radius = on_policy.metric.pairs().map(|(_, _, d)| d).fold(f64::INFINITY, f64::min);
    let agg = aggregate_epsilon(&on_policy.metric, radius).unwrap();
    assert!(verify_value_bound(&mdp, &agg, 0.95).unwrap().violation);

    let fp = action_max_metric(&mdp, 0.95, MetricKind::Mico, 1e-12, 20_000).unwrap();
    for (_, _, d) in fp.metric.pairs() {
        let agg = aggregate_epsilon(&fp.metric, d).unwrap();
        assert!(!verify_value_bound(&mdp, &agg, 0.95).unwrap().violation);
    }
}

#[test]
fn action_max_metric_is_a_fixed_point_of_the_max_operator() {
    let mut r = rng(18);
    for kind in [MetricKind::Mico, MetricKind::Wasserstein] {
        let mdp = TabularMdp::random(&mut r, 6, 3, 0.9).unwrap();
        let fp = action_max_metric(&mdp, 0.9, kind, 1e-12, 5000).unwrap();
        assert_eq!(fp.contraction_violations(0.9 + 1e-9, 1e-13), 0);
        for a in 0..3 {
            let op = BisimOperator::new(&mdp, &Policy::deterministic(&[a; 6], 3), 0.9, kind).unwrap();
            let one = op.apply(&fp.metric);
            for (i, j, d) in fp.metric.pairs() {
                assert!(one.get(i, j) <= d + 1e-10);
            }
        }
        // Dominates the metric of any single policy.
        let on = greedy_policy_metric(&mdp, 0.9, kind, 1e-12, 5000).unwrap();
        for (i, j, d) in on.metric.pairs() {
            assert!(d <= fp.metric.get(i, j) + 1e-9);
        }
    }
}

#[test]
fn action_max_metric_with_one_action_is_the_policy_metric() {
    let mut r = rng(19);
    let mdp = TabularMdp::random(&mut r, 5, 1, 0.9).unwrap();
    let a = action_max_metric(&mdp, 0.9, MetricKind::Mico, 1e-12, 5000).unwrap();
    let b = greedy_policy_metric(&mdp, 0.9, MetricKind::Mico, 1e-12, 5000).unwrap();
    assert!(a.metric.sup_distance(&b.metric) < 1e-12);
}
