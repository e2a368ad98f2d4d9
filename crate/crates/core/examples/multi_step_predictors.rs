//! Generalized least squares for the multi-step predictors, regressed on the
//! filter states of the true model, with the normalized estimation error.
use mspc::harness::{ExperimentConfig, TrueSystem};
use mspc::kalman::filter;
use mspc::model::{simulate, GaussianBelief};
use mspc::predictor::{build_noise_covariance, build_regressors, gls_identify, MultiStepPredictor};
use mspc::{linalg, model, rng};
use nalgebra::DVector;

fn main() -> mspc::Result<()> {
    let cfg = ExperimentConfig::default();
    let truth = TrueSystem::from_config(&cfg)?;
    let m = &truth.model;
    let inputs: Vec<_> = (0..cfg.data_length as u64)
        .map(|t| rng::normal_vector(5, rng::streams::EXCITATION, t, 1) * cfg.excitation_std)
        .collect();
    let x0 = DVector::zeros(m.n_x());
    let traj = simulate(m, &x0, &inputs, 5);
    let filt = filter(m, &truth.filter, &traj, &GaussianBelief::point(x0))?;
    for k in [1, 5, 10, 20] {
        let reg = build_regressors(&filt, &traj, k, cfg.burn_in)?;
        let ms = model::multi_step_from_model(m, &truth.filter.gain, k)?;
        let cov = build_noise_covariance(&ms, &truth.filter.innovation_cov, reg.n_windows())?;
        let (theta, sigma) = gls_identify(&reg, &cov)?;
        let exact = MultiStepPredictor::exact(m, &truth.filter.gain, k)?;
        let err = &theta - &exact.theta_hat;
        let z2 = err.dot(&(linalg::spd_inverse(&sigma, "sigma_theta")? * &err));
        println!("k={k:2} n_theta={:3} z'z={:8.2} trace(Sigma)={:.3e}", theta.len(), z2, sigma.trace());
    }
    Ok(())
}
