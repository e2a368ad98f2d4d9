use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mspc::harness::{self, ExperimentConfig, StudyMethod, Studies, StudyReport, TrueSystem};
use mspc::socp::Method;
use mspc::{Error, Result};

/// Multi-step predictor identification and chance-constrained control.
#[derive(Parser)]
#[command(name = "mspc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Identify state-space models and multi-step predictors for every trial.
    Identify(Common),
    /// Probabilistic reachable sets of the last output under a constant input.
    Reach(Common),
    /// Feasibility and constraint-violation study for one method.
    Control {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["proposed", "ellipsoidal", "nominal"])]
        method: String,
    },
    /// Every study and the full set of report files.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    solver_tol: Option<f64>,
    #[arg(long)]
    solver_max_iter: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json(&fs::read_to_string(p)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(t) = self.trials {
            cfg.n_trials = t;
        }
        if let Some(s) = self.seed {
            cfg.base_seed = s;
        }
        if let Some(t) = self.solver_tol {
            cfg.solver.tol = t;
        }
        if let Some(m) = self.solver_max_iter {
            cfg.solver.max_iter = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn identify(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let truth = TrueSystem::from_config(cfg)?;
    let trials: Vec<usize> = (0..cfg.n_trials).collect();
    let pipe = harness::run_pipeline(cfg, &truth, &trials);
    if pipe.trials.is_empty() {
        return Err(Error::Numerical("every trial failed".into()));
    }
    let dir = out.join("trials");
    fs::create_dir_all(&dir)?;
    for a in &pipe.trials {
        fs::write(dir.join(format!("trial_{:04}.json", a.trial)), serde_json::to_string(a)?)?;
    }
    let report = StudyReport {
        config: cfg.clone(),
        identified: pipe.trials,
        failures: pipe.failures,
        reach_trial: None,
        reach: None,
        feasibility: None,
        violation: None,
    };
    harness::write_report(&report, out)
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Identify(c) | Command::Reach(c) | Command::Report(c) => c,
        Command::Control { common, .. } => common,
    };
    let cfg = common.load()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = common.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let out = common.out.clone();
    pool.install(|| match &cli.command {
        Command::Identify(_) => identify(&cfg, &out),
        Command::Reach(_) => {
            let report = harness::run_studies(&cfg, &Studies { reach: true, control: vec![] })?;
            harness::write_report(&report, &out)
        }
        Command::Control { method, .. } => {
            let m: Method = method.parse()?;
            let studies = Studies { reach: false, control: vec![StudyMethod::from(m)] };
            let report = harness::run_studies(&cfg, &studies)?;
            harness::write_report(&report, &out)
        }
        Command::Report(_) => {
            let report = harness::run_studies(&cfg, &Studies::all(&cfg))?;
            harness::write_report(&report, &out)
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // exit code 2 is reserved for numerical failures, so usage errors get 1
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
