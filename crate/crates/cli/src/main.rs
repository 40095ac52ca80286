//! `mvfuse`: theory checks, gradient checks, training, evaluation and view
//! export. Exit codes: 0 success, 1 verification failure, 2 usage or config
//! error.

use clap::{Args, Parser, Subcommand};
use mvfuse_core::agent::EvalMode;
use mvfuse_core::envs::GridWorld;
use mvfuse_core::harness::run::{
    evaluate_agent, export_views, load_agent, sweep_configs, tabular_check, train, write_eval,
};
use mvfuse_core::harness::{
    bound_suite, contraction_suite, grad_suite, write_atomic, BoundSettings, ContractionSettings, ExperimentConfig,
    RunManifest, GRAD_THRESHOLD, OUTPUT_ENV,
};
use mvfuse_core::mdp::{MetricKind, Policy};
use mvfuse_core::Error;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mvfuse", version, about = "Multi-view state fusion with bisimulation metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fixed-point and value-bound sweeps over random tabular MDPs.
    VerifyTheory(TheoryArgs),
    /// Finite-difference checks of every primitive, the fusion block and the losses.
    GradCheck {
        /// Write the JSON report here as well as printing a summary.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train every seed of a config; reruns resume from checkpoints.
    Train(TrainArgs),
    /// Evaluate trained checkpoints, or run the no-network tabular check.
    Eval(EvalArgs),
    /// Write PNG renderings of every view for chosen states.
    Export(ExportArgs),
}

#[derive(Args)]
struct TheoryArgs {
    /// Which sweep to run: contraction, bound or all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// MDPs in the contraction sweep.
    #[arg(long, default_value_t = 50)]
    contraction_count: usize,
    /// MDPs in the bound sweep.
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 12)]
    max_states: usize,
    #[arg(long, default_value_t = 4)]
    max_actions: usize,
    /// Metric discount for the bound sweep; must be at least gamma.
    #[arg(long, default_value_t = 0.95)]
    c: f64,
    /// Metric discount for the contraction sweep.
    #[arg(long, default_value_t = 0.9)]
    contraction_c: f64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Required final residual of each fixed-point solve.
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    /// Bound metric: mico or wasserstein.
    #[arg(long, default_value = "mico")]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config.
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set weights.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// One run per value, e.g. `--sweep weights.lambda=0.5,1.0,2.0`.
    #[arg(long, value_name = "KEY=V1,V2,..")]
    sweep: Option<String>,
    /// Output root; defaults to the config, then $MVFUSE_OUT, then ./runs.
    #[arg(long, env = OUTPUT_ENV)]
    output_dir: Option<PathBuf>,
    /// Print the default config (all documented defaults) and exit.
    #[arg(long)]
    print_default_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    run_dir: Option<PathBuf>,
    /// Seeds to evaluate; defaults to every seed in the manifest.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Modes such as `full,missing_view(0),noisy_view(1)`.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    modes: Vec<String>,
    /// Sampled state pairs for the representation correlation.
    #[arg(long, default_value_t = 500)]
    pairs: usize,
    /// Output directory; defaults to `<run_dir>/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tabular mode: iterate the fusion target rule on the env's states
    /// (no network) and compare with the exact metric. Needs `--config`.
    #[arg(long)]
    tabular: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Minimum rank correlation required in tabular mode.
    #[arg(long, default_value_t = 0.99)]
    min_spearman: f64,
}

#[derive(Args)]
struct ExportArgs {
    /// TOML experiment config whose env is rendered.
    config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// States to render; defaults to all.
    #[arg(long, value_delimiter = ',')]
    states: Vec<usize>,
    /// Pixel upscaling factor.
    #[arg(long, default_value_t = 8)]
    scale: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "export")]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Verification(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.into()))?;
    if let Some(p) = path {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
        }
        write_atomic(p, text.as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TheoryReport {
    contraction: Option<mvfuse_core::harness::ContractionReport>,
    bound: Option<mvfuse_core::harness::BoundSuiteReport>,
}

fn verify_theory(a: &TheoryArgs) -> CmdResult {
    let (run_contraction, run_bound) = match a.suite.as_str() {
        "all" => (true, true),
        "contraction" => (true, false),
        "bound" => (false, true),
        other => return Err(Failure::Usage(format!("--suite must be all, contraction or bound, got {other}"))),
    };
    let kind = match a.kind.as_str() {
        "mico" => MetricKind::Mico,
        "wasserstein" => MetricKind::Wasserstein,
        other => return Err(Failure::Usage(format!("--kind must be mico or wasserstein, got {other}"))),
    };
    let bound_settings = BoundSettings {
        count: a.count,
        max_states: a.max_states,
        max_actions: a.max_actions,
        gamma: a.gamma,
        c: a.c,
        kind,
        seed: a.seed,
    };
    // Hypothesis check up front, so a bad flag fails before any work.
    if run_bound && a.c < a.gamma {
        return Err(Failure::Usage(format!("--c ({}) must be at least --gamma ({})", a.c, a.gamma)));
    }
    let mut report = TheoryReport { contraction: None, bound: None };
    let mut problems = Vec::new();
    if run_contraction {
        let s = ContractionSettings {
            count: a.contraction_count,
            max_states: a.max_states,
            max_actions: a.max_actions,
            c: a.contraction_c,
            gamma: a.gamma,
            tolerance: a.tolerance,
            max_iter: a.max_iter,
            seed: a.seed,
            ..ContractionSettings::default()
        };
        let r = contraction_suite(&s)?;
        println!(
            "contraction: {} solves, {} failures, worst factor {:.6}, max iterations {}, max init gap {:.3e}",
            r.cases.len(),
            r.failures,
            r.worst_factor,
            r.max_iterations,
            r.max_init_gap
        );
        if r.failures > 0 {
            problems.push(format!("{} contraction failures", r.failures));
        }
        report.contraction = Some(r);
    }
    if run_bound {
        let r = bound_suite(&bound_settings)?;
        println!(
            "bound: {} MDPs, {} violations, slack in [{:.6}, {:.6}]",
            r.cases.len(),
            r.violations,
            r.min_slack,
            r.max_slack
        );
        if r.violations > 0 {
            problems.push(format!("{} bound violations", r.violations));
        }
        report.bound = Some(r);
    }
    write_json(a.report.as_deref(), &report)?;
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} (offending MDPs are serialized in the report)", problems.join(", "))))
    }
}

fn grad_check(report: Option<&Path>) -> CmdResult {
    let r = grad_suite()?;
    for c in &r.cases {
        println!("{:<32} {:>10.3e}  {}", c.name, c.max_rel_error, if c.passed { "ok" } else { "FAIL" });
    }
    write_json(report, &r)?;
    if r.failures == 0 {
        println!("all {} cases below {GRAD_THRESHOLD:e}", r.cases.len());
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "{} failing cases; worst is {} w.r.t. {} ({:.3e})",
            r.failures, r.worst_case, r.worst_input, r.max_rel_error
        )))
    }
}

fn train_cmd(a: &TrainArgs) -> CmdResult {
    if a.print_default_config {
        print!("{}", ExperimentConfig::default().to_toml());
        return Ok(());
    }
    let path = a.config.as_ref().ok_or_else(|| Failure::Usage("train needs a config path".into()))?;
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut overrides = a.overrides.clone();
    if let Some(dir) = &a.output_dir {
        overrides.push(format!("output_dir={}", toml_string(&dir.display().to_string())));
    }
    let configs = match &a.sweep {
        Some(s) => sweep_configs(&text, &overrides, s)?,
        None => vec![ExperimentConfig::from_toml_with_overrides(&text, &overrides)?],
    };
    for cfg in &configs {
        log::info!("training {} ({} updates per seed)", cfg.name, cfg.updates());
        let (dir, manifest) = train(cfg)?;
        println!("{}: {} seeds complete in {}", cfg.name, manifest.seeds.len(), dir.display());
    }
    Ok(())
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn parse_modes(modes: &[String]) -> Result<Vec<EvalMode>, Failure> {
    modes.iter().map(|m| m.parse::<EvalMode>().map_err(|e| Failure::Usage(format!("mode '{m}': {e}")))).collect()
}

fn eval_cmd(a: &EvalArgs) -> CmdResult {
    if a.tabular {
        let path = a.config.as_ref().ok_or_else(|| Failure::Usage("--tabular needs --config".into()))?;
        let cfg = ExperimentConfig::load(path, &[])?;
        let env = GridWorld::new(cfg.env.clone(), 0)?;
        let policy = Policy::uniform(env.n_states(), env.n_actions());
        let (_, c_t) = cfg.weights.coefficients();
        let r = tabular_check(&env, &policy, c_t)?;
        println!(
            "tabular: {} states, max difference {:.3e}, spearman {:.6}",
            r.n_states, r.max_abs_difference, r.spearman
        );
        let out = a.out.clone().unwrap_or_else(|| PathBuf::from("eval-tabular"));
        write_json(Some(&out.join("tabular.json")), &r)?;
        return if r.spearman >= a.min_spearman && r.max_abs_difference < 1e-6 {
            Ok(())
        } else {
            Err(Failure::Verification("tabular fixed points disagree".into()))
        };
    }
    let run_dir = a.run_dir.as_ref().ok_or_else(|| Failure::Usage("eval needs a run directory".into()))?;
    let manifest = RunManifest::read(run_dir)
        .map_err(|e| Failure::Usage(format!("no readable manifest in {}: {e}", run_dir.display())))?;
    let modes = parse_modes(&a.modes)?;
    let seeds: Vec<_> = manifest.seeds.iter().filter(|s| a.seeds.is_empty() || a.seeds.contains(&s.seed)).collect();
    if seeds.is_empty() {
        return Err(Failure::Usage("none of the requested seeds are in the manifest".into()));
    }
    let out_root = a.out.clone().unwrap_or_else(|| run_dir.join("eval"));
    for s in seeds {
        let ck = run_dir.join(&s.checkpoint);
        if !ck.exists() {
            return Err(Failure::Usage(format!("checkpoint {} is missing", ck.display())));
        }
        let agent = load_agent(&manifest.config, s.seed, &ck)?;
        let summary = evaluate_agent(&agent, s.seed, &modes, a.pairs)?;
        for m in &summary.modes {
            println!(
                "seed {} {:<16} return {:.3} (oracle {:.3}, uniform {:.3}) success {:.2}",
                s.seed,
                m.mode.to_string(),
                m.mean_return,
                m.oracle_return,
                summary.uniform_return,
                m.success_rate
            );
        }
        println!("seed {} spearman {:.3} over {} pairs", s.seed, summary.spearman, summary.spearman_pairs);
        write_eval(&out_root.join(format!("seed-{}", s.seed)), &summary)?;
    }
    Ok(())
}

fn export_cmd(a: &ExportArgs) -> CmdResult {
    let cfg = ExperimentConfig::load(&a.config, &a.overrides)?;
    let env = GridWorld::new(cfg.env.clone(), a.seed)?;
    let states: Vec<usize> = if a.states.is_empty() { (0..env.n_states()).collect() } else { a.states.clone() };
    let entries = export_views(&env, &states, a.scale, a.seed, &a.out)?;
    println!("wrote {} states to {}", entries.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::VerifyTheory(a) => verify_theory(a),
        Command::GradCheck { report } => grad_check(report.as_deref()),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Export(a) => export_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
