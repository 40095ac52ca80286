//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the criteria execute in order and
//! share the expensive training run. Oracles here are written out
//! independently of the library code they check.

use mvfuse_core::agent::EvalMode;
use mvfuse_core::envs::GridWorld;
use mvfuse_core::harness::run::{read_metrics, tabular_check, train, train_seed, MetricRecord};
use mvfuse_core::harness::{
    bound_suite, contraction_suite, grad_suite, BoundSettings, ContractionSettings, ExperimentConfig,
};
use mvfuse_core::losses::{
    dynamics_loss, fusion_loss, reconstruction_loss, EnsembleDynamics, FusionPenalty, LossWeights,
};
use mvfuse_core::mdp::{Policy, TabularMdp};
use mvfuse_core::stats::mean;
use mvfuse_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

type Outcome = Result<String, String>;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str, out: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut o = vec![format!("output_dir={:?}", out.display().to_string())];
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::load(&config_path(name), &o).expect("config loads")
}

fn fixed_point_theory() -> Outcome {
    let t0 = Instant::now();
    let r = contraction_suite(&ContractionSettings::default()).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "{} solves, worst factor {:.6}, max iters {}, max init gap {:.1e}, {secs:.1}s",
        r.cases.len(),
        r.worst_factor,
        r.max_iterations,
        r.max_init_gap
    );
    if r.failures == 0 && secs < 30.0 && r.max_iterations <= 2000 {
        Ok(detail)
    } else {
        Err(format!("{} failures; {detail}", r.failures))
    }
}

fn value_bound() -> Outcome {
    let t0 = Instant::now();
    let r = bound_suite(&BoundSettings::default()).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    // Independent re-check of each reported case against the closed form.
    for c in &r.cases {
        let bound = 2.0 * c.epsilon / ((1.0 - 0.9) * (1.0 - 0.95));
        if (bound - c.bound).abs() > 1e-9 * bound.max(1.0) || c.max_difference > bound + 1e-6 {
            return Err(format!("case {}: difference {} vs bound {bound}", c.index, c.max_difference));
        }
    }
    let detail = format!("{} MDPs, min slack {:.4}, {secs:.1}s", r.cases.len(), r.min_slack);
    if r.violations == 0 && secs < 120.0 {
        Ok(detail)
    } else {
        Err(format!("{} violations; {detail}", r.violations))
    }
}

fn gradients() -> Outcome {
    let r = grad_suite().map_err(|e| e.to_string())?;
    let detail =
        format!("{} cases, worst {} w.r.t. {} at {:.2e}", r.cases.len(), r.worst_case, r.worst_input, r.max_rel_error);
    if r.failures == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    dot / (u.iter().map(|a| a * a).sum::<f64>().sqrt() * v.iter().map(|a| a * a).sum::<f64>().sqrt())
}

fn huber(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn member_forward(ens: &EnsembleDynamics, k: usize, z: &[f64], a: usize, na: usize) -> Vec<f64> {
    let get = |n: &str| ens.params().value(ens.params().find(&format!("member{k}.{n}")).unwrap()).clone();
    let (w1, b1, w2, b2) = (get("fc1.w"), get("fc1.b"), get("fc2.w"), get("fc2.b"));
    let mut x = z.to_vec();
    x.extend((0..na).map(|i| f64::from(u8::from(i == a))));
    let (h_n, o_n) = (b1.numel(), b2.numel());
    let h: Vec<f64> = (0..h_n)
        .map(|j| gelu(b1.data()[j] + (0..x.len()).map(|i| x[i] * w1.data()[i * h_n + j]).sum::<f64>()))
        .collect();
    let y: Vec<f64> =
        (0..o_n).map(|j| b2.data()[j] + (0..h_n).map(|i| h[i] * w2.data()[i * o_n + j]).sum::<f64>()).collect();
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    y.iter().map(|v| v / n).collect()
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    let w = LossWeights::default();
    let (cr, ct) = w.coefficients();

    // Identical transitions.
    let z = Tensor::new([5, 4], [0.4, -0.1, 0.7, 0.2].repeat(5)).unwrap();
    let next = Tensor::new([5, 4], [0.1, 0.9, -0.3, 0.5].repeat(5)).unwrap();
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let f = fusion_loss(&mut tape, zv, &[0.3; 5], &next, &w).map_err(|e| e.to_string())?;
    let f0 = tape.value(f).item();
    if f0.abs() > 1e-12 {
        return Err(format!("fusion loss on identical transitions is {f0}"));
    }

    // Reconstruction landmarks.
    let t = Tensor::randn([2, 3, 6], 1.0, &mut rng);
    let rec = |p: &Tensor, t: &Tensor| {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(p.clone()), tape.constant(t.clone()));
        let l = reconstruction_loss(&mut tape, a, b).unwrap();
        tape.value(l).item()
    };
    let (same, neg) = (rec(&t, &t), rec(&t.map(|x| -x), &t));
    if same.abs() > 1e-12 || (neg - 2.0).abs() > 1e-12 {
        return Err(format!("reconstruction landmarks {same}, {neg}"));
    }

    // Perfect dynamics prediction (single member, so the prediction is unique).
    let ens1 = EnsembleDynamics::new(4, 3, 8, 1, &mut rng).unwrap();
    let z = Tensor::randn([6, 4], 1.0, &mut rng);
    let actions = [0, 1, 2, 2, 1, 0];
    let (_, pred) = ens1.sample_prediction(&z, &actions, &mut rng).unwrap();
    let dyn_eval = |ens: &EnsembleDynamics, z: &Tensor, a: &[usize], n: &Tensor| {
        let mut tape = Tape::new();
        let p = ens.params().bind(&mut tape, false);
        let (zv, nv) = (tape.constant(z.clone()), tape.constant(n.clone()));
        let l = dynamics_loss(&mut tape, ens, &p, zv, a, nv).unwrap();
        tape.value(l).item()
    };
    let d0 = dyn_eval(&ens1, &z, &actions, &pred);
    if d0.abs() > 1e-12 {
        return Err(format!("dynamics loss on perfect prediction is {d0}"));
    }

    // Brute-force agreement on random inputs.
    for trial in 0..20 {
        let b = rng.random_range(2..9);
        let d = rng.random_range(2..7);
        let z = Tensor::randn([b, d], 1.0, &mut rng);
        let next = Tensor::randn([b, d], 1.0, &mut rng);
        let rewards: Vec<f64> = (0..b).map(|_| rng.random_range(-2.0..2.0)).collect();
        for penalty in [FusionPenalty::Huber { delta: 1.0 }, FusionPenalty::Squared] {
            let wp = LossWeights { penalty, ..w.clone() };
            let mut acc = 0.0;
            for i in 0..b {
                for j in 0..b {
                    if i != j {
                        let gap = (1.0 - cos(z.row(i), z.row(j)))
                            - (cr * (rewards[i] - rewards[j]).abs() + ct * (1.0 - cos(next.row(i), next.row(j))));
                        acc += if matches!(penalty, FusionPenalty::Squared) { gap * gap } else { huber(gap) };
                    }
                }
            }
            let expect = acc / (b * (b - 1)) as f64;
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let got = fusion_loss(&mut tape, zv, &rewards, &next, &wp).map_err(|e| e.to_string())?;
            worst = worst.max((tape.value(got).item() - expect).abs());
        }

        let tokens = rng.random_range(1..5);
        let p = Tensor::randn([b, tokens, d], 1.0, &mut rng);
        let t = Tensor::randn([b, tokens, d], 1.0, &mut rng);
        let mut acc = 0.0;
        for i in 0..b * tokens {
            acc += cos(&p.data()[i * d..(i + 1) * d], &t.data()[i * d..(i + 1) * d]);
        }
        worst = worst.max((rec(&p, &t) - (1.0 - acc / (b * tokens) as f64)).abs());

        let k = rng.random_range(1..4);
        let ens = EnsembleDynamics::new(d, 3, 5, k, &mut rng).unwrap();
        let acts: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let mut acc = 0.0;
        for m in 0..k {
            for i in 0..b {
                acc += 1.0 - cos(&member_forward(&ens, m, z.row(i), acts[i], 3), next.row(i));
            }
        }
        let expect = acc / (k * b) as f64;
        worst = worst.max((dyn_eval(&ens, &z, &acts, &next) - expect).abs());
        if worst > 1e-6 {
            return Err(format!("trial {trial}: deviation {worst:.2e} from brute force"));
        }
    }
    Ok(format!("landmarks exact; max brute-force deviation {worst:.1e}"))
}

fn tabular_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..20 {
        let n = rng.random_range(2..10);
        let na = rng.random_range(1..4);
        let mdp = TabularMdp::random(&mut rng, n, na, 0.9).map_err(|e| e.to_string())?;
        let env_free = tabular_on_mdp(&mdp, 0.9)?;
        worst = worst.max(env_free);
    }
    let cfg = ExperimentConfig::load(&config_path("desk.toml"), &[]).map_err(|e| e.to_string())?;
    let env = GridWorld::new(cfg.env.clone(), 0).map_err(|e| e.to_string())?;
    let r = tabular_check(&env, &Policy::uniform(env.n_states(), env.n_actions()), 0.9).map_err(|e| e.to_string())?;
    worst = worst.max(r.max_abs_difference);
    let detail = format!("max entry difference {worst:.1e}; gridworld rank correlation {:.6}", r.spearman);
    if worst < 1e-6 && r.spearman >= 0.99 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Iterates the target rule with (c_r, c_t) = (1 − γ, γ) by hand, and
/// compares with the library's independent-coupling fixed point.
fn tabular_on_mdp(mdp: &TabularMdp, gamma: f64) -> Result<f64, String> {
    let n = mdp.n_states();
    let policy = Policy::uniform(n, mdp.n_actions());
    let (r, p) = policy.induced(mdp).map_err(|e| e.to_string())?;
    let mut d = vec![0.0; n * n];
    for _ in 0..5000 {
        let mut nd = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut e = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        e += p[i * n + k] * p[j * n + l] * d[k * n + l];
                    }
                }
                nd[i * n + j] = (1.0 - gamma) * (r[i] - r[j]).abs() + gamma * e;
            }
        }
        let delta = nd.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        d = nd;
        if delta < 1e-13 {
            break;
        }
    }
    let op = mvfuse_core::mdp::BisimOperator::new(mdp, &policy, gamma, mvfuse_core::mdp::MetricKind::Mico)
        .map_err(|e| e.to_string())?;
    let fp = mvfuse_core::mdp::solve_fixed_point(&op, &mvfuse_core::mdp::MetricMatrix::zeros(n), 1e-13, 100_000)
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                worst = worst.max((d[i * n + j] - fp.metric.get(i, j)).abs());
            }
        }
    }
    Ok(worst)
}

/// Final evaluation records of every seed in a finished run.
fn final_evals(run_dir: &Path, cfg: &ExperimentConfig) -> Vec<Vec<MetricRecord>> {
    cfg.seeds
        .iter()
        .map(|s| {
            let recs = read_metrics(&run_dir.join(format!("seed-{s}/metrics.jsonl"))).unwrap();
            let last = recs.iter().map(MetricRecord::update).max().unwrap();
            recs.into_iter().filter(|r| matches!(r, MetricRecord::Eval { .. }) && r.update() == last).collect()
        })
        .collect()
}

fn mode_return(recs: &[MetricRecord], want: EvalMode) -> f64 {
    recs.iter()
        .find_map(|r| match r {
            MetricRecord::Eval { mode, mean_return, .. } if *mode == want => Some(*mean_return),
            _ => None,
        })
        .expect("mode evaluated")
}

struct Trained {
    cfg: ExperimentConfig,
    evals: Vec<Vec<MetricRecord>>,
}

fn desk_training(root: &Path) -> Result<Trained, String> {
    let cfg = load("desk.toml", root, &[]);
    let steps = cfg.updates() * (cfg.ppo.rollout_len * cfg.ppo.workers) as u64;
    if steps > 200_000 || cfg.seeds.len() != 4 || !cfg.env.distractor_view || cfg.env.grid_size != 7 {
        return Err(format!("desk config is outside the protocol ({steps} steps)"));
    }
    let (dir, _) = train(&cfg).map_err(|e| e.to_string())?;
    let evals = final_evals(&dir, &cfg);
    Ok(Trained { cfg, evals })
}

fn desk_scale(t: &Trained) -> Outcome {
    let mut ratios = Vec::new();
    let mut corr = Vec::new();
    for recs in &t.evals {
        match recs.iter().find(|r| matches!(r, MetricRecord::Eval { mode: EvalMode::Full, .. })) {
            Some(MetricRecord::Eval { mean_return, oracle_return, spearman, .. }) => {
                ratios.push(mean_return / oracle_return);
                corr.push(*spearman);
            }
            _ => return Err("missing full-view evaluation".into()),
        }
    }
    let steps = t.cfg.updates() * (t.cfg.ppo.rollout_len * t.cfg.ppo.workers) as u64;
    let detail = format!(
        "{steps} steps/seed; return/oracle per seed {:?} (mean {:.3}); rank correlation per seed {:?} (mean {:.3}) over {} pairs",
        ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
        mean(&ratios),
        corr.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
        mean(&corr),
        t.cfg.spearman_pairs
    );
    if mean(&ratios) >= 0.9 && mean(&corr) >= 0.7 && t.cfg.spearman_pairs >= 500 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn missing_view(t: &Trained) -> Outcome {
    let env = GridWorld::new(t.cfg.env.clone(), 0).map_err(|e| e.to_string())?;
    let full = mean(&t.evals.iter().map(|r| mode_return(r, EvalMode::Full)).collect::<Vec<_>>());
    let mut parts = Vec::new();
    let mut ok = true;
    for v in env.redundant_views() {
        let masked =
            mean(&t.evals.iter().map(|r| mode_return(r, EvalMode::MissingView { view: v })).collect::<Vec<_>>());
        let noisy = mean(&t.evals.iter().map(|r| mode_return(r, EvalMode::NoisyView { view: v })).collect::<Vec<_>>());
        let degradation = (full - masked) / full.abs();
        ok &= degradation <= 0.25 && masked >= noisy;
        parts.push(format!("view {v}: masked {masked:.3} ({:.1}% drop), noise {noisy:.3}", 100.0 * degradation));
    }
    let detail = format!("full {full:.3}; {}", parts.join("; "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablations(root: &Path) -> Outcome {
    let short = ["total_steps=2048", "eval_every=1024", "seeds=[0]", "checkpoint_every=0"];
    let run = |name: &str, switch: Option<&str>| -> Result<Vec<(u64, String)>, String> {
        let mut extra: Vec<&str> = short.to_vec();
        let n = format!("name=\"{name}\"");
        extra.push(&n);
        extra.extend(switch);
        let cfg = load("desk.toml", root, &extra);
        let (dir, _) = train(&cfg).map_err(|e| e.to_string())?;
        let text = std::fs::read_to_string(dir.join("curve.csv")).map_err(|e| e.to_string())?;
        Ok(text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].parse().unwrap(), f[1].to_string())
            })
            .collect())
    };
    let base = run("ablation-base", None)?;
    let no_rec = run("ablation-no-rec", Some("weights.lambda=0.0"))?;
    let no_fus = run("ablation-no-fus", Some("weights.fusion=false"))?;
    if base.is_empty() || base != no_rec || base != no_fus {
        return Err(format!("curves differ in shape: {} / {} / {} rows", base.len(), no_rec.len(), no_fus.len()));
    }
    Ok(format!("three runs, {} matching curve rows each", base.len()))
}

fn files_equal(a: &Path, b: &Path) -> Result<(), String> {
    let (x, y) = (std::fs::read(a).map_err(|e| e.to_string())?, std::fs::read(b).map_err(|e| e.to_string())?);
    if x == y {
        Ok(())
    } else {
        Err(format!("{} and {} differ", a.display(), b.display()))
    }
}

fn determinism(root: &Path) -> Outcome {
    let a = load("smoke.toml", &root.join("a"), &[]);
    let b = load("smoke.toml", &root.join("b"), &[]);
    train(&a).map_err(|e| e.to_string())?;
    train(&b).map_err(|e| e.to_string())?;
    // Interrupted run: stop after two updates, then resume to the end.
    let c = load("smoke.toml", &root.join("c"), &[]);
    let partial = ExperimentConfig { total_steps: 64, ..c.clone() };
    let seed_dir = c.run_dir().join("seed-0");
    train_seed(&partial, 0, &seed_dir).map_err(|e| e.to_string())?;
    train_seed(&c, 0, &seed_dir).map_err(|e| e.to_string())?;
    let mut files = 0;
    for s in &a.seeds {
        for f in ["metrics.jsonl", "curve.csv", "checkpoint.bin"] {
            files_equal(&a.run_dir().join(format!("seed-{s}/{f}")), &b.run_dir().join(format!("seed-{s}/{f}")))?;
            files += 1;
        }
    }
    files_equal(&a.run_dir().join("curve.csv"), &b.run_dir().join("curve.csv"))?;
    for f in ["metrics.jsonl", "curve.csv", "checkpoint.bin"] {
        files_equal(&a.run_dir().join(format!("seed-0/{f}")), &seed_dir.join(f))?;
    }
    let r1 =
        serde_json::to_string(&contraction_suite(&ContractionSettings { count: 5, ..Default::default() }).unwrap())
            .unwrap();
    let r2 =
        serde_json::to_string(&contraction_suite(&ContractionSettings { count: 5, ..Default::default() }).unwrap())
            .unwrap();
    let b1 = serde_json::to_string(&bound_suite(&BoundSettings { count: 5, ..Default::default() }).unwrap()).unwrap();
    let b2 = serde_json::to_string(&bound_suite(&BoundSettings { count: 5, ..Default::default() }).unwrap()).unwrap();
    if r1 != r2 || b1 != b2 {
        return Err("theory reports differ between runs".into());
    }
    Ok(format!(
        "{} training files + aggregate curve identical; resumed run identical; theory reports identical",
        files + 1
    ))
}

fn report(n: usize, name: &str, outcome: &Outcome, failures: &mut Vec<usize>) {
    match outcome {
        Ok(d) => println!("PASS  criterion {n} ({name}): {d}"),
        Err(d) => {
            println!("FAIL  criterion {n} ({name}): {d}");
            failures.push(n);
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters would otherwise launch the full run.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let root = tempfile::tempdir().expect("temp dir");
    let mut failures = Vec::new();
    report(1, "fixed-point theory", &fixed_point_theory(), &mut failures);
    report(2, "value bound", &value_bound(), &mut failures);
    report(3, "gradient correctness", &gradients(), &mut failures);
    report(4, "loss identities", &loss_identities(), &mut failures);
    report(5, "tabular fixed-point equivalence", &tabular_equivalence(), &mut failures);
    let t0 = Instant::now();
    match desk_training(&root.path().join("desk")) {
        Ok(t) => {
            println!("      desk training took {:.0}s", t0.elapsed().as_secs_f64());
            report(6, "desk-scale training", &desk_scale(&t), &mut failures);
            report(7, "missing-view robustness", &missing_view(&t), &mut failures);
        }
        Err(e) => {
            report(6, "desk-scale training", &Err(e.clone()), &mut failures);
            report(7, "missing-view robustness", &Err(e), &mut failures);
        }
    }
    report(8, "ablation harness", &ablations(&root.path().join("ablations")), &mut failures);
    report(9, "determinism", &determinism(&root.path().join("determinism")), &mut failures);
    println!("acceptance: {} of 9 criteria pass; failing: {failures:?}", 9 - failures.len());
}
