//! Interior-point solve of the benchmark control problem with the exact model,
//! followed by a small hand-written second-order cone program.
use mspc::harness::{control_problem, ExperimentConfig, TrueSystem};
use mspc::socp::{solve, solve_nominal_exact, ConicProgram, SolverSettings};
use mspc::tightening::SocRow;
use nalgebra::{DMatrix, DVector};

fn main() -> mspc::Result<()> {
    let cfg = ExperimentConfig::default();
    let truth = TrueSystem::from_config(&cfg)?;
    let problem = control_problem(&cfg, 3, 1, truth.belief(&cfg, cfg.init_mean))?;
    let sol = solve_nominal_exact(&truth.model, &problem, &SolverSettings::default())?;
    println!(
        "benchmark: {:?} in {} iterations, {:.1} ms, objective {:.6}, KKT {:.1e}",
        sol.status,
        sol.iterations,
        1e3 * sol.wall_time,
        sol.objective,
        sol.kkt_residuals.max()
    );

    // minimize ‖u − (2, 2)‖² subject to ‖u‖ ≤ 1
    let mut prog = ConicProgram::unconstrained(DMatrix::identity(2, 2) * 2.0, DVector::from_vec(vec![-4.0, -4.0]))?;
    prog.soc_rows.push(SocRow {
        k: 1,
        j: 0,
        offset: 0.0,
        linear: DVector::zeros(2),
        scale: 1.0,
        cone_matrix: DMatrix::identity(2, 2),
        cone_offset: DVector::zeros(2),
        rhs: 1.0,
        nonpositive_rhs: false,
    });
    let sol = solve(&prog, &SolverSettings::default())?;
    println!("ball projection: u* = {:.6?} (expected ±{:.6})", sol.u_star.as_slice(), 0.5f64.sqrt());
    Ok(())
}
