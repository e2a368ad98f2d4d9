//! Steady-state Kalman filter of the benchmark: Riccati solution by fixed
//! point and by doubling, then the filter log-likelihood of simulated data.
use mspc::kalman::{dare_doubling, dare_steady_state, filter, riccati_residual};
use mspc::model::{build_msd_chain, simulate, to_observability_form, GaussianBelief, MsdParams};
use mspc::rng;
use nalgebra::DVector;

fn main() -> mspc::Result<()> {
    let (model, _) = to_observability_form(&build_msd_chain(&MsdParams::default())?)?;
    let inno = dare_steady_state(&model, 1e-13, 100_000)?;
    let doubled = dare_doubling(&model, 1e-14, 200)?;
    println!("riccati residual (fixed point) {:.2e}", riccati_residual(&model, &inno.prior_cov)?);
    println!("fixed point vs doubling        {:.2e}", (&inno.prior_cov - &doubled).norm());
    println!("gain L =\n{:.4}", inno.gain);
    let inputs: Vec<_> = (0..1000).map(|t| rng::normal_vector(3, rng::streams::EXCITATION, t, 1) * 2.0).collect();
    let traj = simulate(&model, &DVector::zeros(model.n_x()), &inputs, 3);
    let out = filter(&model, &inno, &traj, &GaussianBelief::point(DVector::zeros(model.n_x())))?;
    println!("log-likelihood of 1000 samples: {:.3}", out.loglik);
    Ok(())
}
