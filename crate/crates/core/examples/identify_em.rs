//! Expectation-maximization identification from one input/output record.
use mspc::harness::{ExperimentConfig, TrueSystem};
use mspc::model::simulate;
use mspc::rng;
use mspc::sysid::{em_identify, markov_relative_error, EmConfig};
use nalgebra::{DMatrix, DVector};

fn main() -> mspc::Result<()> {
    let cfg = ExperimentConfig::default();
    let truth = TrueSystem::from_config(&cfg)?;
    let m = &truth.model;
    let inputs: Vec<_> = (0..cfg.data_length as u64)
        .map(|t| rng::normal_vector(11, rng::streams::EXCITATION, t, 1) * cfg.excitation_std)
        .collect();
    let traj = simulate(m, &DVector::zeros(m.n_x()), &inputs, 11);
    let mut em = EmConfig::new(m.n_x(), m.e.clone(), DMatrix::identity(m.n_y(), m.n_y()));
    em.seed = 11;
    let fit = em_identify(&traj, &em)?;
    println!("iterations {} converged {}", fit.loglik_trace.len() - 1, fit.converged);
    println!("log-likelihood {:.3} -> {:.3}", fit.loglik_trace[0], fit.loglik_trace.last().unwrap());
    println!("disturbance scale {:.4}, measurement scale {:.4}", fit.disturbance_scale, fit.measurement_scale);
    println!("Markov relative error (i < 41): {:.4}", markov_relative_error(&fit.model, m, 41));
    Ok(())
}
