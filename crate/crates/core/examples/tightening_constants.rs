//! Chance-constraint constants and the tightened rows of one identified trial.
use mspc::harness::{control_problem, identify_trial, ExperimentConfig, TrueSystem};
use mspc::socp::compute_constants;
use mspc::tightening::{build_row, Tightening};

fn main() -> mspc::Result<()> {
    let cfg = ExperimentConfig::default();
    let truth = TrueSystem::from_config(&cfg)?;
    println!(
        "c_p={:.4} c_p~={:.4} c_eps={:.4}",
        cfg.spec.c_p()?,
        cfg.spec.c_p_tilde()?,
        cfg.spec.c_epsilon()?
    );
    let art = identify_trial(&cfg, &truth, 0)?;
    let init = truth.belief(&cfg, cfg.init_mean);
    let problem = control_problem(&cfg, truth.model.n_y(), truth.model.n_u(), init)?;
    let constants = compute_constants(&art.bundle, &problem, cfg.mc_samples, art.seed)?;
    println!(" k  j   d_kj      f_kj      f_eps     rhs(prop)  rhs(ell)");
    for c in constants.iter().filter(|c| c.k % 5 == 0 || c.k == 1) {
        let msp = art.bundle.get(c.k)?;
        let h = &problem.constraints[c.j];
        let n = problem.n_vars();
        let prop = build_row(Tightening::Proposed, msp, c.j, h, &problem.init, c, n)?;
        let ell = build_row(Tightening::Ellipsoidal, msp, c.j, h, &problem.init, c, n)?;
        println!(
            "{:2} {:2} {:9.3e} {:9.3e} {:9.3e} {:9.4} {:9.4}",
            c.k, c.j, c.d_kj, c.f_kj, c.f_eps_kj, prop.rhs, ell.rhs
        );
    }
    Ok(())
}
