//! Feasibility and constraint-violation study on a handful of trials.
use mspc::harness::{run_studies, ExperimentConfig, Studies};

fn main() -> mspc::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.n_trials = 4;
    cfg.rollouts = 2_000;
    let studies = Studies { reach: false, ..Studies::all(&cfg) };
    let report = run_studies(&cfg, &studies)?;
    if let Some(f) = &report.feasibility {
        for s in &f.summary {
            println!("{:12} feasible {:5.1}% ({} / {})", s.method.name(), s.feasible_pct, s.feasible, s.trials);
        }
    }
    if let Some(v) = &report.violation {
        for s in &v.summary {
            println!(
                "{:12} max violation {:5.2}% at k={} j={}",
                s.method.name(),
                s.max_violation_pct,
                s.argmax_k,
                s.argmax_j
            );
        }
    }
    Ok(())
}
