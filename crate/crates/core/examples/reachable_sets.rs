//! Probabilistic reachable intervals of the last mass under a constant input,
//! for one identified trial.
use mspc::harness::{identify_trial, reachability_study, ExperimentConfig, TrueSystem};

fn main() -> mspc::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.reach_samples = 20_000;
    let truth = TrueSystem::from_config(&cfg)?;
    let art = identify_trial(&cfg, &truth, 0)?;
    let rows = reachability_study(&cfg, &truth, &art)?;
    println!(" k  method            lower      upper");
    for r in rows.iter().filter(|r| r.k % 4 == 0 || r.k == 1) {
        println!("{:2}  {:15} {:9.5} {:9.5}", r.k, r.method.name(), r.lower, r.upper);
    }
    Ok(())
}
