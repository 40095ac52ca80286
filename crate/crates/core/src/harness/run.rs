//! Train, evaluate and export drivers. Every file written here except the
//! manifest is a pure function of the config and seed.

use super::config::{write_atomic, ExperimentConfig, RunManifest, RunStatus};
use crate::agent::{Agent, EvalMode, IterationReport};
use crate::envs::{GridWorld, MultiViewObservation, CHANNELS};
use crate::error::{Error, Result};
use crate::losses::tabular_fusion_fixed_point;
use crate::mdp::{solve_fixed_point, BisimOperator, MetricKind, MetricMatrix, Policy};
use crate::seeding::derive;
use crate::stats::{ci95, mean, spearman};
use mvfuse_tensor::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const METRICS_SCHEMA: u32 = 1;
const CURVE_HEADER: &str = "step,update,mode,mean_return,oracle_return,success_rate,spearman";

/// One line of `metrics.jsonl`. `update` counts completed updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Update {
        schema: u32,
        update: u64,
        step: u64,
        episodes: usize,
        /// Mean raw return of episodes finished during the rollout.
        episode_return_raw: Option<f64>,
        episode_length: Option<f64>,
        success_rate: Option<f64>,
        l_policy: f64,
        l_value: f64,
        entropy: f64,
        l_fus: f64,
        l_rec: f64,
        l_dyn: f64,
        kl: f64,
        clip_fraction: f64,
        grad_norm: f64,
        epochs_completed: usize,
        early_stopped: bool,
        reward_mean: f64,
        reward_std: f64,
    },
    Eval {
        schema: u32,
        update: u64,
        step: u64,
        mode: EvalMode,
        mean_return: f64,
        oracle_return: f64,
        success_rate: f64,
        /// Mode-independent: computed once per evaluation point.
        spearman: f64,
    },
}

impl MetricRecord {
    pub fn update(&self) -> u64 {
        match self {
            MetricRecord::Update { update, .. } | MetricRecord::Eval { update, .. } => *update,
        }
    }
}

fn update_record(agent: &Agent, r: &IterationReport) -> MetricRecord {
    let n = r.episodes.len();
    let avg = |f: &dyn Fn(&crate::agent::EpisodeRecord) -> f64| {
        (n > 0).then(|| r.episodes.iter().map(f).sum::<f64>() / n as f64)
    };
    let (reward_mean, reward_std) = agent.normalizer.stats();
    let s = &r.stats;
    MetricRecord::Update {
        schema: METRICS_SCHEMA,
        update: r.update + 1,
        step: r.env_steps,
        episodes: n,
        episode_return_raw: avg(&|e| e.return_raw),
        episode_length: avg(&|e| e.length as f64),
        success_rate: avg(&|e| f64::from(u8::from(e.success))),
        l_policy: s.l_policy,
        l_value: s.l_value,
        entropy: s.entropy,
        l_fus: s.l_fus,
        l_rec: s.l_rec,
        l_dyn: s.l_dyn,
        kl: s.kl,
        clip_fraction: s.clip_fraction,
        grad_norm: s.grad_norm,
        epochs_completed: s.epochs_completed,
        early_stopped: s.early_stopped,
        reward_mean,
        reward_std,
    }
}

/// Evaluates every configured mode at the agent's current state.
pub fn eval_records(agent: &Agent, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricRecord>> {
    let spearman = agent.representation_spearman(cfg.spearman_pairs, seed)?;
    cfg.eval_modes
        .iter()
        .map(|&mode| {
            let e = agent.evaluate(mode, seed)?;
            Ok(MetricRecord::Eval {
                schema: METRICS_SCHEMA,
                update: agent.updates_done(),
                step: agent.env_steps(),
                mode,
                mean_return: e.mean_return,
                oracle_return: e.oracle_return,
                success_rate: e.success_rate,
                spearman,
            })
        })
        .collect()
}

pub fn build_agent(cfg: &ExperimentConfig, seed: u64) -> Result<Agent> {
    Agent::new(&cfg.env, &cfg.model, &cfg.mask, &cfg.weights, &cfg.ppo, seed)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let Ok(f) = File::open(path) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        // A torn final line from a crash is dropped, never half-parsed.
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
    }
    Ok(out)
}

fn curve_line(r: &MetricRecord) -> Option<String> {
    match r {
        MetricRecord::Eval { update, step, mode, mean_return, oracle_return, success_rate, spearman, .. } => {
            Some(format!("{step},{update},{mode},{mean_return},{oracle_return},{success_rate},{spearman}"))
        }
        MetricRecord::Update { .. } => None,
    }
}

fn write_curve(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut text = format!("{CURVE_HEADER}\n");
    for line in records.iter().filter_map(curve_line) {
        text.push_str(&line);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn append(file: &mut File, records: &[MetricRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())?;
    file.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub updates_done: u64,
    pub resumed_from: Option<u64>,
    pub final_evals: Vec<MetricRecord>,
}

fn eval_due(cfg: &ExperimentConfig, before: u64, after: u64, last: bool) -> bool {
    last || (cfg.eval_every > 0 && before / cfg.eval_every != after / cfg.eval_every)
}

/// Trains one seed into `seed_dir`, resuming from its checkpoint if present.
///
/// On resume, records past the checkpointed update are dropped, so the
/// metrics file ends up identical to that of an uninterrupted run.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, seed_dir: &Path) -> Result<SeedOutcome> {
    std::fs::create_dir_all(seed_dir)?;
    let metrics_path = seed_dir.join("metrics.jsonl");
    let curve_path = seed_dir.join("curve.csv");
    let ck_path = seed_dir.join("checkpoint.bin");
    let mut agent = build_agent(cfg, seed)?;
    let mut resumed_from = None;
    let mut kept = Vec::new();
    if ck_path.exists() {
        let ck = Checkpoint::read_from(BufReader::new(File::open(&ck_path)?))?;
        agent.import(&ck)?;
        resumed_from = Some(agent.updates_done());
        kept = read_metrics(&metrics_path)?;
        kept.retain(|r| r.update() <= agent.updates_done());
    }
    let mut prefix = String::new();
    for r in &kept {
        prefix.push_str(&serde_json::to_string(r)?);
        prefix.push('\n');
    }
    // Replaced atomically: a crash here leaves either the old or the new file.
    write_atomic(&metrics_path, prefix.as_bytes())?;
    write_curve(&curve_path, &kept)?;
    let mut metrics = OpenOptions::new().append(true).open(&metrics_path)?;
    let mut evals: Vec<MetricRecord> =
        kept.iter().filter(|r| matches!(r, MetricRecord::Eval { .. })).cloned().collect();

    let total = cfg.updates();
    if agent.updates_done() == 0 && cfg.eval_every > 0 {
        let recs = eval_records(&agent, cfg, seed)?;
        append(&mut metrics, &recs)?;
        evals.extend(recs);
        write_curve(&curve_path, &evals)?;
    }
    while agent.updates_done() < total {
        let before = agent.env_steps();
        let report = agent.iterate()?;
        let mut recs = vec![update_record(&agent, &report)];
        let done = agent.updates_done();
        let last = done == total;
        if eval_due(cfg, before, agent.env_steps(), last) {
            let e = eval_records(&agent, cfg, seed)?;
            evals.extend(e.iter().cloned());
            recs.extend(e);
        }
        append(&mut metrics, &recs)?;
        if recs.len() > 1 {
            write_curve(&curve_path, &evals)?;
        }
        if last || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            save_checkpoint(&agent, &ck_path)?;
        }
        log::info!("seed {seed}: update {done}/{total}");
    }
    if resumed_from == Some(total) {
        // Already complete; nothing ran.
        save_checkpoint(&agent, &ck_path)?;
    }
    let final_update = agent.updates_done();
    Ok(SeedOutcome {
        seed,
        updates_done: final_update,
        resumed_from,
        final_evals: evals.into_iter().filter(|r| r.update() == final_update).collect(),
    })
}

pub fn save_checkpoint(agent: &Agent, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    agent.export().write_to(&mut bytes)?;
    write_atomic(path, &bytes)
}

pub fn load_agent(cfg: &ExperimentConfig, seed: u64, checkpoint: &Path) -> Result<Agent> {
    let mut agent = build_agent(cfg, seed)?;
    let ck = Checkpoint::read_from(BufReader::new(File::open(checkpoint)?))?;
    agent.import(&ck)?;
    Ok(agent)
}

/// Trains every seed in sequence. The manifest is written before the first
/// update and rewritten as seeds finish.
pub fn train(cfg: &ExperimentConfig) -> Result<(PathBuf, RunManifest)> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    let mut manifest = match RunManifest::read(&run_dir) {
        Ok(m) if m.config_hash == cfg.hash() => m,
        Ok(_) => {
            return Err(Error::Config(format!(
                "{} holds a run with a different config; choose another name",
                run_dir.display()
            )))
        }
        Err(_) => RunManifest::new(cfg),
    };
    manifest.status = RunStatus::Running;
    manifest.write(&run_dir)?;
    let mut outcomes = Vec::new();
    for i in 0..manifest.seeds.len() {
        let seed = manifest.seeds[i].seed;
        manifest.seeds[i].status = RunStatus::Running;
        manifest.write(&run_dir)?;
        let t0 = Instant::now();
        let res = train_seed(cfg, seed, &run_dir.join(&manifest.seeds[i].dir));
        manifest.seeds[i].wall_clock_secs += t0.elapsed().as_secs_f64();
        match res {
            Ok(o) => {
                manifest.seeds[i].status = RunStatus::Complete;
                manifest.seeds[i].updates_done = o.updates_done;
                outcomes.push(o);
            }
            Err(e) => {
                manifest.seeds[i].status = RunStatus::Failed;
                manifest.status = RunStatus::Failed;
                manifest.write(&run_dir)?;
                return Err(e);
            }
        }
        manifest.write(&run_dir)?;
    }
    write_aggregate_curve(&run_dir, &manifest)?;
    manifest.status = RunStatus::Complete;
    manifest.write(&run_dir)?;
    Ok((run_dir, manifest))
}

/// `curve.csv` at the run level: per (step, mode) mean and 95% interval
/// across seeds, ready for plotting.
pub fn write_aggregate_curve(run_dir: &Path, manifest: &RunManifest) -> Result<()> {
    let mut groups: BTreeMap<(u64, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in &manifest.seeds {
        for r in read_metrics(&run_dir.join(&s.metrics))? {
            if let MetricRecord::Eval { step, mode, mean_return, spearman, .. } = r {
                let g = groups.entry((step, mode.to_string())).or_default();
                g.0.push(mean_return);
                g.1.push(spearman);
            }
        }
    }
    let mut text = String::from("step,mode,seeds,mean_return,ci95_return,mean_spearman,ci95_spearman\n");
    for ((step, mode), (ret, sp)) in &groups {
        text.push_str(&format!("{step},{mode},{},{},{},{},{}\n", ret.len(), mean(ret), ci95(ret), mean(sp), ci95(sp)));
    }
    write_atomic(&run_dir.join("curve.csv"), text.as_bytes())
}

/// Expands `key=v1,v2,...` into one config per value, each with the value
/// appended to the run name.
pub fn sweep_configs(text: &str, overrides: &[String], sweep: &str) -> Result<Vec<ExperimentConfig>> {
    let (key, values) =
        sweep.split_once('=').ok_or_else(|| Error::Config(format!("sweep '{sweep}' must look like key.path=v1,v2")))?;
    let base = ExperimentConfig::from_toml_with_overrides(text, overrides)?;
    values
        .split(',')
        .map(|v| {
            let mut all = overrides.to_vec();
            all.push(format!("{}={}", key.trim(), v.trim()));
            let leaf = key.trim().rsplit('.').next().unwrap_or(key);
            all.push(format!("name=\"{}-{}-{}\"", base.name, leaf, v.trim()));
            ExperimentConfig::from_toml_with_overrides(text, &all)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: EvalMode,
    pub mean_return: f64,
    pub oracle_return: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub seed: u64,
    pub updates_done: u64,
    pub env_steps: u64,
    /// Mean undiscounted return of the uniform random policy.
    pub uniform_return: f64,
    pub spearman: f64,
    pub spearman_pairs: usize,
    pub modes: Vec<ModeSummary>,
}

/// Monte-Carlo return of the uniform policy, `episodes` per start state.
pub fn uniform_policy_return(env: &GridWorld, episodes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x0F1]));
    let mut total = 0.0;
    let starts = env.start_states();
    for &s in &starts {
        for k in 0..episodes {
            let mut e = env.clone();
            e.reseed(derive(seed, &[s as u64, k as u64]));
            e.reset_to(s);
            while !e.is_done() {
                total += e.step(rng.random_range(0..env.n_actions()))?.reward;
            }
        }
    }
    Ok(total / (starts.len() * episodes) as f64)
}

pub fn evaluate_agent(agent: &Agent, seed: u64, modes: &[EvalMode], pairs: usize) -> Result<EvalSummary> {
    let k = agent.env_config.n_views();
    for m in modes {
        if let EvalMode::MissingView { view } | EvalMode::NoisyView { view } = m {
            if *view >= k {
                return Err(Error::Config(format!("mode {m} is not supported: the env has {k} views")));
            }
        }
    }
    let modes = modes
        .iter()
        .map(|&m| {
            let e = agent.evaluate(m, seed)?;
            Ok(ModeSummary {
                mode: m,
                mean_return: e.mean_return,
                oracle_return: e.oracle_return,
                success_rate: e.success_rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary {
        seed,
        updates_done: agent.updates_done(),
        env_steps: agent.env_steps(),
        uniform_return: uniform_policy_return(agent.env(), 10, seed)?,
        spearman: agent.representation_spearman(pairs, seed)?,
        spearman_pairs: pairs,
        modes,
    })
}

pub fn write_eval(out_dir: &Path, summary: &EvalSummary) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("mode,mean_return,oracle_return,success_rate,spearman\n");
    for m in &summary.modes {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            m.mode, m.mean_return, m.oracle_return, m.success_rate, summary.spearman
        ));
    }
    write_atomic(&out_dir.join("eval.csv"), csv.as_bytes())?;
    write_atomic(&out_dir.join("eval.json"), serde_json::to_string_pretty(summary)?.as_bytes())
}

/// The no-network check: the fusion target rule iterated on the env's own
/// state set against the independent-coupling fixed point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularCheck {
    pub n_states: usize,
    pub c_r: f64,
    pub c_t: f64,
    pub max_abs_difference: f64,
    pub spearman: f64,
}

pub fn tabular_check(env: &GridWorld, policy: &Policy, c_t: f64) -> Result<TabularCheck> {
    let mdp = env.mdp();
    let n = mdp.n_states();
    let c_r = 1.0 - c_t;
    let (rewards, p) = policy.induced(mdp)?;
    let transitions: Vec<Vec<f64>> = p.chunks(n).map(<[f64]>::to_vec).collect();
    let table = tabular_fusion_fixed_point(&rewards, &transitions, c_r, c_t, 1e-12, 100_000)?;
    let op = BisimOperator::new(mdp, policy, c_t, MetricKind::Mico)?;
    let fp = solve_fixed_point(&op, &MetricMatrix::zeros(n), 1e-12, 100_000)?;
    let mut diff: f64 = 0.0;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in 0..n {
            if i != j {
                diff = diff.max((table[i * n + j] - fp.metric.get(i, j)).abs());
                a.push(table[i * n + j]);
                b.push(fp.metric.get(i, j));
            }
        }
    }
    Ok(TabularCheck { n_states: n, c_r, c_t, max_abs_difference: diff, spearman: spearman(&a, &b) })
}

/// One PNG per view of each requested state (latest frame only), plus an
/// index file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    pub state: usize,
    pub cell: (usize, usize),
    pub views: Vec<String>,
    pub validity: Vec<crate::envs::Validity>,
}

pub fn export_views(
    env: &GridWorld,
    states: &[usize],
    scale: u32,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ExportEntry>> {
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0xE4]));
    let mut entries = Vec::new();
    for &s in states {
        if s >= env.n_states() {
            return Err(Error::Config(format!("state {s} out of range for {} states", env.n_states())));
        }
        let obs = env.render_state(s, &mut rng);
        let mut files = Vec::new();
        for v in 0..obs.n_views() {
            let name = format!("state-{s}-view-{v}.png");
            save_png(&obs, v, scale, &out_dir.join(&name))?;
            files.push(name);
        }
        entries.push(ExportEntry { state: s, cell: env.cell(s), views: files, validity: obs.validity.clone() });
    }
    write_atomic(&out_dir.join("export.json"), serde_json::to_string_pretty(&entries)?.as_bytes())?;
    Ok(entries)
}

fn save_png(obs: &MultiViewObservation, view: usize, scale: u32, path: &Path) -> Result<()> {
    let (h, w) = (obs.height, obs.width);
    let frames = obs.channels / CHANNELS;
    let base = (frames - 1) * CHANNELS * h * w;
    let data = &obs.views[view];
    let scale = scale.max(1);
    let img = image::RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let (px, py) = ((x / scale) as usize, (y / scale) as usize);
        let ch = |c: usize| (data[base + (c * h + py) * w + px].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([ch(0), ch(1), ch(2)])
    });
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}
