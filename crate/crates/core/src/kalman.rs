//! Kalman filtering for the innovation form of a state-space model.
//!
//! Timing convention: `x_{t|t}` is the posterior mean given `y_1 … y_t`, and
//!
//! ```text
//! e_{t+1}         = y_{t+1} - C (A x_{t|t} + B u_t)
//! x_{t+1|t+1}     = A x_{t|t} + B u_t + L e_{t+1}
//! ```

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{self, symmetrize};
use crate::model::{GaussianBelief, StateSpaceModel, Trajectory};

/// Steady-state filter quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationForm {
    /// `L = P_prior Cᵀ S⁻¹`.
    #[serde(with = "io::matrix")]
    pub gain: DMatrix<f64>,
    /// `S = C P_prior Cᵀ + R`.
    #[serde(with = "io::matrix")]
    pub innovation_cov: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub prior_cov: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub post_cov: DMatrix<f64>,
}

/// One step of the Riccati recursion on the prior covariance.
pub fn riccati_map(model: &StateSpaceModel, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = &model.c * p * model.c.transpose() + &model.r;
    let s_inv = linalg::spd_inverse(&s, "innovation covariance")?;
    let pc = p * model.c.transpose();
    let post = p - &pc * s_inv * pc.transpose();
    let mut next = &model.a * post * model.a.transpose() + model.process_cov();
    symmetrize(&mut next);
    Ok(next)
}

/// `‖Ric(P) − P‖_F / ‖P‖_F`.
pub fn riccati_residual(model: &StateSpaceModel, p: &DMatrix<f64>) -> Result<f64> {
    let next = riccati_map(model, p)?;
    Ok((next - p).norm() / p.norm().max(1e-300))
}

pub fn dare_steady_state(model: &StateSpaceModel, tol: f64, max_iter: usize) -> Result<InnovationForm> {
    dare_steady_state_from(model, &model.process_cov(), tol, max_iter)
}

/// Fixed-point iteration of the Riccati map from `p0`, symmetrizing every
/// step, until the relative Frobenius change drops below `tol`.
pub fn dare_steady_state_from(
    model: &StateSpaceModel,
    p0: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<InnovationForm> {
    let mut p = linalg::symmetrized(p0);
    let mut converged = false;
    for _ in 0..max_iter {
        let next = riccati_map(model, &p)?;
        if !linalg::all_finite(&next) {
            return Err(Error::NonFinite("Riccati iteration".into()));
        }
        let change = (&next - &p).norm();
        p = next;
        if change <= tol * p.norm() || change == 0.0 {
            converged = true;
            break;
        }
    }
    if !converged {
        // Slow linear convergence near marginal modes; doubling converges quadratically.
        let q = dare_doubling(model, tol, 200)?;
        if !(riccati_residual(model, &q)? <= tol.max(1e-10)) {
            return Err(Error::NoConvergence {
                what: "discrete algebraic Riccati equation".into(),
                iterations: max_iter,
            });
        }
        p = q;
    }
    innovation_form_from_prior(model, p)
}

/// Structure-preserving doubling for the filter Riccati equation, applied to
/// the dual pair `(Aᵀ, Cᵀ)`: the `H` iterate converges to the prior covariance.
pub fn dare_doubling(model: &StateSpaceModel, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let n = model.n_x();
    let r_inv = linalg::spd_inverse(&model.r, "measurement covariance")?;
    let mut a = model.a.transpose();
    let mut g = model.c.transpose() * r_inv * &model.c;
    let mut h = model.process_cov();
    let eye = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iter {
        let w = (&eye + &g * &h)
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular doubling step".into()))?;
        let aw = &a * &w;
        let h_next = &h + a.transpose() * &h * &w * &a;
        let g_next = &g + &aw * &g * a.transpose();
        let a_next = &aw * &a;
        let change = (&h_next - &h).norm();
        h = h_next;
        g = g_next;
        a = a_next;
        symmetrize(&mut h);
        symmetrize(&mut g);
        if !linalg::all_finite(&h) {
            return Err(Error::NonFinite("Riccati doubling".into()));
        }
        if change <= tol * h.norm() {
            return Ok(h);
        }
    }
    Err(Error::NoConvergence { what: "Riccati doubling".into(), iterations: max_iter })
}

fn innovation_form_from_prior(model: &StateSpaceModel, prior_cov: DMatrix<f64>) -> Result<InnovationForm> {
    let mut s = &model.c * &prior_cov * model.c.transpose() + &model.r;
    symmetrize(&mut s);
    let s_inv = linalg::spd_inverse(&s, "innovation covariance")?;
    let gain = &prior_cov * model.c.transpose() * s_inv;
    let n = model.n_x();
    let mut post_cov = (DMatrix::identity(n, n) - &gain * &model.c) * &prior_cov;
    symmetrize(&mut post_cov);
    Ok(InnovationForm {
        gain,
        innovation_cov: s,
        prior_cov,
        post_cov,
    })
}

/// Stationary-filter output: `states[t] = x_{t|t}` for `t = 0..=T` and
/// `innovations[t] = e_{t+1}`.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub states: Vec<DVector<f64>>,
    pub innovations: Vec<DVector<f64>>,
    pub loglik: f64,
}

fn gaussian_logpdf_terms(s: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((chol, -0.5 * (s.nrows() as f64 * (2.0 * PI).ln() + logdet)))
}

/// Runs the stationary filter with the gain of `inno`, starting from
/// `x_{0|0} = init.mean`.
pub fn filter(
    model: &StateSpaceModel,
    inno: &InnovationForm,
    traj: &Trajectory,
    init: &GaussianBelief,
) -> Result<FilterOutput> {
    check_dims(model, traj, init)?;
    let (chol, log_norm) = gaussian_logpdf_terms(&inno.innovation_cov)?;
    let mut x = init.mean.clone();
    let mut states = Vec::with_capacity(traj.len() + 1);
    let mut innovations = Vec::with_capacity(traj.len());
    let mut loglik = 0.0;
    states.push(x.clone());
    for t in 0..traj.len() {
        let pred = &model.a * &x + &model.b * traj.u(t);
        let e = traj.y(t + 1) - &model.c * &pred;
        let w = chol.solve(&e);
        loglik += log_norm - 0.5 * e.dot(&w);
        x = pred + &inno.gain * &e;
        states.push(x.clone());
        innovations.push(e);
    }
    Ok(FilterOutput {
        states,
        innovations,
        loglik,
    })
}

fn check_dims(model: &StateSpaceModel, traj: &Trajectory, init: &GaussianBelief) -> Result<()> {
    if init.mean.len() != model.n_x() {
        return Err(Error::Dimension("initial belief".into()));
    }
    if !traj.is_empty() && (traj.n_u() != model.n_u() || traj.n_y() != model.n_y()) {
        return Err(Error::Dimension("trajectory does not match model".into()));
    }
    Ok(())
}

/// Time-varying Kalman filter. Index `t` of `means`/`covs` is `x_{t|t}`,
/// `P_{t|t}`; index `t` of `pred_means`/`pred_covs` is `x_{t+1|t}`,
/// `P_{t+1|t}`.
#[derive(Debug, Clone)]
pub struct KalmanPass {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub pred_means: Vec<DVector<f64>>,
    pub pred_covs: Vec<DMatrix<f64>>,
    pub innovations: Vec<DVector<f64>>,
    pub innovation_covs: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub loglik: f64,
    /// First step from which the covariances, gain and innovation
    /// covariance no longer change.
    pub steady_from: Option<usize>,
}

pub fn time_varying_filter(model: &StateSpaceModel, traj: &Trajectory, init: &GaussianBelief) -> Result<KalmanPass> {
    check_dims(model, traj, init)?;
    let n = model.n_x();
    let t_len = traj.len();
    let q = model.process_cov();
    let at = model.a.transpose();
    let ct = model.c.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut out = KalmanPass {
        means: Vec::with_capacity(t_len + 1),
        covs: Vec::with_capacity(t_len + 1),
        pred_means: Vec::with_capacity(t_len),
        pred_covs: Vec::with_capacity(t_len),
        innovations: Vec::with_capacity(t_len),
        innovation_covs: Vec::with_capacity(t_len),
        gains: Vec::with_capacity(t_len),
        loglik: 0.0,
        steady_from: None,
    };
    let mut x = init.mean.clone();
    let mut p = init.cov.clone();
    out.means.push(x.clone());
    out.covs.push(p.clone());
    let ln2pi = (2.0 * PI).ln() * model.n_y() as f64;
    // covariance recursion, frozen once it stops changing
    let mut steady: Option<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> = None;
    for t in 0..t_len {
        let xp = &model.a * &x + &model.b * traj.u(t);
        let e = traj.y(t + 1) - &model.c * &xp;
        if let Some((chol, logdet)) = &steady {
            let k = &out.gains[t - 1];
            out.loglik += -0.5 * (ln2pi + logdet + e.dot(&chol.solve(&e)));
            x = &xp + k * &e;
            out.means.push(x.clone());
            out.covs.push(out.covs[t].clone());
            out.pred_means.push(xp);
            out.pred_covs.push(out.pred_covs[t - 1].clone());
            out.innovations.push(e);
            out.innovation_covs.push(out.innovation_covs[t - 1].clone());
            out.gains.push(k.clone());
            continue;
        }
        let mut pp = &model.a * &p * &at + &q;
        symmetrize(&mut pp);
        let pct = &pp * &ct;
        let mut s = &model.c * &pct + &model.r;
        symmetrize(&mut s);
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("innovation covariance at t={}", t + 1)))?;
        let k = chol.solve(&pct.transpose()).transpose();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        out.loglik += -0.5 * (ln2pi + logdet + e.dot(&chol.solve(&e)));
        x = &xp + &k * &e;
        // Joseph form
        let ikc = &eye - &k * &model.c;
        let mut p_next = &ikc * &pp * ikc.transpose() + &k * &model.r * k.transpose();
        symmetrize(&mut p_next);
        if t > 0 && (&p_next - &p).amax() <= STEADY_TOL * p.amax() {
            steady = Some((chol, logdet));
            out.steady_from = Some(t);
        }
        p = p_next;
        out.means.push(x.clone());
        out.covs.push(p.clone());
        out.pred_means.push(xp);
        out.pred_covs.push(pp);
        out.innovations.push(e);
        out.innovation_covs.push(s);
        out.gains.push(k);
    }
    if !out.loglik.is_finite() {
        return Err(Error::NonFinite("filter log-likelihood".into()));
    }
    Ok(out)
}

/// Relative change below which a covariance recursion is treated as
/// stationary.
const STEADY_TOL: f64 = 1e-14;

/// Fixed-interval smoother output; index `t` runs over `0..=T`, and
/// `cross_covs[t] = Cov[x_t, x_{t+1} | y_1 … y_T]`.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub cross_covs: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

/// Rauch-Tung-Striebel smoother.
pub fn rts_smooth(model: &StateSpaceModel, traj: &Trajectory, init: &GaussianBelief) -> Result<SmootherOutput> {
    let fwd = time_varying_filter(model, traj, init)?;
    let t_len = traj.len();
    let mut means = fwd.means.clone();
    let mut covs = fwd.covs.clone();
    let mut cross_covs = vec![DMatrix::zeros(model.n_x(), model.n_x()); t_len];
    let mut gain_cache: Option<DMatrix<f64>> = None;
    let mut cov_steady = false;
    for t in (0..t_len).rev() {
        let frozen = fwd.steady_from.is_some_and(|s| t > s);
        // J_t = P_{t|t} Aᵀ P_{t+1|t}⁻¹
        let j = match (&gain_cache, frozen) {
            (Some(j), true) => j.clone(),
            _ => {
                let ap = &model.a * &fwd.covs[t];
                let j = match fwd.pred_covs[t].clone().cholesky() {
                    Some(ch) => ch.solve(&ap).transpose(),
                    None => (linalg::pseudo_inverse(&fwd.pred_covs[t]) * &ap).transpose(),
                };
                if frozen {
                    gain_cache = Some(j.clone());
                }
                j
            }
        };
        let dm = &means[t + 1] - &fwd.pred_means[t];
        means[t] = &fwd.means[t] + &j * dm;
        if frozen && cov_steady {
            covs[t] = covs[t + 1].clone();
            cross_covs[t] = cross_covs[t + 1].clone();
            continue;
        }
        let dp = &covs[t + 1] - &fwd.pred_covs[t];
        let mut c = &fwd.covs[t] + &j * dp * j.transpose();
        symmetrize(&mut c);
        cross_covs[t] = &j * &covs[t + 1];
        if frozen && t + 1 < t_len && (&c - &covs[t + 1]).amax() <= STEADY_TOL * c.amax() {
            cov_steady = true;
        }
        covs[t] = c;
    }
    Ok(SmootherOutput {
        means,
        covs,
        cross_covs,
        loglik: fwd.loglik,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_msd_chain, simulate, simulate_with_states, MsdParams};

    fn chain() -> StateSpaceModel {
        build_msd_chain(&MsdParams::default()).unwrap()
    }

    fn excitation(n: usize) -> Vec<DVector<f64>> {
        (0..n)
            .map(|t| DVector::from_element(1, 2.0 * crate::rng::normal_vector(99, 3, t as u64, 1)[0]))
            .collect()
    }

    #[test]
    fn doubling_matches_fixed_point() {
        let m = chain();
        let fixed = dare_steady_state(&m, 1e-14, 100_000).unwrap().prior_cov;
        let doubled = dare_doubling(&m, 1e-14, 200).unwrap();
        assert!((&fixed - &doubled).norm() <= 1e-9 * fixed.norm());
        assert!(riccati_residual(&m, &doubled).unwrap() < 1e-10);
    }

    #[test]
    fn zero_dynamics_collapse_in_one_step() {
        let mut m = chain();
        m.a.fill(0.0);
        let inno = dare_steady_state(&m, 1e-14, 100).unwrap();
        let q = m.process_cov();
        assert!((&inno.prior_cov - &q).amax() < 1e-15);
        let s = &m.c * &q * m.c.transpose() + &m.r;
        assert!((&inno.innovation_cov - s).amax() < 1e-15);
    }

    #[test]
    fn noise_free_state_has_zero_gain() {
        let mut m = chain();
        m.e.fill(0.0);
        let inno = dare_steady_state(&m, 1e-14, 100).unwrap();
        assert!(inno.prior_cov.amax() < 1e-14);
        assert!(inno.gain.amax() < 1e-12);
        assert!((&inno.innovation_cov - &m.r).amax() < 1e-15);
    }

    #[test]
    fn chain_riccati_residual_is_tiny_and_initialization_free() {
        let m = chain();
        let base = dare_steady_state(&m, 1e-14, 100_000).unwrap();
        assert!(riccati_residual(&m, &base.prior_cov).unwrap() <= 1e-10);
        for scale in [0.0, 1.0, 100.0] {
            let p0 = DMatrix::identity(6, 6) * scale;
            let other = dare_steady_state_from(&m, &p0, 1e-14, 100_000).unwrap();
            assert!((&other.prior_cov - &base.prior_cov).amax() < 1e-8);
        }
    }

    #[test]
    fn truncated_iteration_falls_back_to_doubling() {
        let m = chain();
        let short = dare_steady_state(&m, 1e-13, 2).unwrap();
        assert!(riccati_residual(&m, &short.prior_cov).unwrap() <= 1e-10);
    }

    #[test]
    fn undetectable_unstable_mode_is_reported() {
        let mut m = chain();
        m.a *= 1.5;
        m.c.fill(0.0);
        assert!(dare_steady_state(&m, 1e-13, 50).is_err());
    }

    #[test]
    fn exact_model_exact_state_has_zero_innovations() {
        let mut m = chain();
        m.e.fill(0.0);
        m.r = DMatrix::identity(3, 3) * 1e-3;
        let mut clean = m.clone();
        clean.r.fill(0.0);
        let x0 = DVector::from_fn(6, |i, _| 0.1 * i as f64);
        let u = excitation(100);
        let traj = simulate(&clean, &x0, &u, 1);
        let inno = dare_steady_state(&m, 1e-14, 1000).unwrap();
        let out = filter(&m, &inno, &traj, &GaussianBelief::point(x0)).unwrap();
        assert!(out.innovations.iter().all(|e| e.amax() < 1e-8));
    }

    #[test]
    fn loglik_matches_independent_sum() {
        let m = chain();
        let u = excitation(200);
        let traj = simulate(&m, &DVector::zeros(6), &u, 2);
        let inno = dare_steady_state(&m, 1e-14, 100_000).unwrap();
        let out = filter(&m, &inno, &traj, &GaussianBelief::point(DVector::zeros(6))).unwrap();
        let s_inv = inno.innovation_cov.clone().try_inverse().unwrap();
        let det = inno.innovation_cov.determinant();
        let mut ll = 0.0;
        for e in &out.innovations {
            ll += -0.5 * (3.0 * (2.0 * PI).ln() + det.ln() + (e.transpose() * &s_inv * e)[(0, 0)]);
        }
        assert!((ll - out.loglik).abs() <= 1e-9 * ll.abs().max(1.0));
    }

    #[test]
    fn stationary_filter_tracks_time_varying_filter() {
        let m = chain();
        let u = excitation(300);
        let traj = simulate(&m, &DVector::zeros(6), &u, 4);
        let init = GaussianBelief::new(DVector::zeros(6), DMatrix::identity(6, 6)).unwrap();
        let inno = dare_steady_state(&m, 1e-14, 100_000).unwrap();
        let st = filter(&m, &inno, &traj, &init).unwrap();
        let tv = time_varying_filter(&m, &traj, &init).unwrap();
        for t in 50..=300 {
            assert!((&st.states[t] - &tv.means[t]).amax() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn innovations_are_white_with_covariance_s() {
        let m = chain();
        let n = 100_000;
        let u = excitation(n);
        let traj = simulate(&m, &DVector::zeros(6), &u, 8);
        let inno = dare_steady_state(&m, 1e-14, 100_000).unwrap();
        let init = GaussianBelief::point(DVector::zeros(6));
        let out = filter(&m, &inno, &traj, &init).unwrap();
        let es = &out.innovations[100..];
        let mut cov = DMatrix::zeros(3, 3);
        for e in es {
            cov += e * e.transpose();
        }
        cov /= es.len() as f64;
        let rel = (&cov - &inno.innovation_cov).norm() / inno.innovation_cov.norm();
        assert!(rel < 0.05, "innovation covariance error {rel}");
        // whiteness on a 10⁴-step window
        let w = &es[..10_000];
        let sd: Vec<f64> = (0..3).map(|i| cov[(i, i)].sqrt()).collect();
        let bound = 3.0 / (w.len() as f64).sqrt();
        for lag in 1..=5 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for t in lag..w.len() {
                        acc += w[t][i] * w[t - lag][j];
                    }
                    let rho = acc / (w.len() as f64 * sd[i] * sd[j]);
                    assert!(rho.abs() <= bound, "lag {lag} ({i},{j}) rho {rho}");
                }
            }
        }
    }

    #[test]
    fn smoother_single_step_equals_filter() {
        let m = chain();
        let u = excitation(1);
        let traj = simulate(&m, &DVector::zeros(6), &u, 1);
        let init = GaussianBelief::new(DVector::zeros(6), DMatrix::identity(6, 6)).unwrap();
        let f = time_varying_filter(&m, &traj, &init).unwrap();
        let s = rts_smooth(&m, &traj, &init).unwrap();
        assert!((&s.means[1] - &f.means[1]).amax() < 1e-14);
        assert!((&s.covs[1] - &f.covs[1]).amax() < 1e-14);
    }

    #[test]
    fn smoothing_reduces_covariance() {
        let m = chain();
        let u = excitation(60);
        let traj = simulate(&m, &DVector::zeros(6), &u, 2);
        let init = GaussianBelief::new(DVector::zeros(6), DMatrix::identity(6, 6)).unwrap();
        let f = time_varying_filter(&m, &traj, &init).unwrap();
        let s = rts_smooth(&m, &traj, &init).unwrap();
        for t in 0..=60 {
            assert!(linalg::min_eigenvalue(&(&f.covs[t] - &s.covs[t])) > -1e-12, "t={t}");
        }
    }

    #[test]
    fn degenerate_measurement_noise_recovers_state() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let m = StateSpaceModel::new(a, DMatrix::from_column_slice(2, 1, &[1.0, 0.5]), c.clone(), DMatrix::identity(2, 2) * 0.1, DMatrix::identity(2, 2) * 1e-12)
            .unwrap();
        let u = excitation(50);
        let (traj, _) = simulate_with_states(&m, &DVector::zeros(2), &u, 6);
        let inno = dare_steady_state(&m, 1e-14, 10_000).unwrap();
        let out = filter(&m, &inno, &traj, &GaussianBelief::point(DVector::zeros(2))).unwrap();
        let c_inv = c.try_inverse().unwrap();
        for t in 1..=50 {
            assert!((&out.states[t] - &c_inv * traj.y(t)).amax() < 1e-5);
        }
    }

    #[test]
    fn smoother_matches_joint_gaussian_conditioning() {
        let (a, b, c, e, r) = (0.8, 0.5, 1.3, 0.4, 0.2);
        let m = StateSpaceModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, e),
            DMatrix::from_element(1, 1, r),
        )
        .unwrap();
        let (m0, p0) = (0.3, 0.7);
        let n = 4;
        let u = [0.5, -1.0, 2.0, 0.1];
        let y = [0.4, -0.2, 1.1, 0.9];
        let traj = Trajectory::new(
            u.iter().map(|&v| DVector::from_element(1, v)).collect(),
            y.iter().map(|&v| DVector::from_element(1, v)).collect(),
        )
        .unwrap();
        // latent z = [x_0 - m0, w_0..w_3, v_1..v_4]; x and y are affine in z
        let nz = 1 + 2 * n;
        let mut sz = DMatrix::zeros(nz, nz);
        sz[(0, 0)] = p0;
        for i in 0..n {
            sz[(1 + i, 1 + i)] = 1.0;
            sz[(1 + n + i, 1 + n + i)] = r;
        }
        let mut mx = DMatrix::zeros(n + 1, nz);
        let mut dx = DVector::zeros(n + 1);
        mx[(0, 0)] = 1.0;
        dx[0] = m0;
        for t in 0..n {
            let row = mx.row(t) * a;
            mx.row_mut(t + 1).copy_from(&row);
            mx[(t + 1, 1 + t)] += e;
            dx[t + 1] = a * dx[t] + b * u[t];
        }
        let mut my = mx.rows(1, n) * c;
        for t in 0..n {
            my[(t, 1 + n + t)] = 1.0;
        }
        let dy = dx.rows(1, n) * c;
        let syy = &my * &sz * my.transpose();
        let sxy = &mx * &sz * my.transpose();
        let sxx = &mx * &sz * mx.transpose();
        let syy_inv = syy.clone().try_inverse().unwrap();
        let resid = DVector::from_column_slice(&y) - &dy;
        let mean = &dx + &sxy * &syy_inv * &resid;
        let cov = &sxx - &sxy * &syy_inv * sxy.transpose();
        let ll = -0.5
            * (n as f64 * (2.0 * PI).ln() + syy.determinant().ln() + (resid.transpose() * &syy_inv * &resid)[(0, 0)]);

        let init = GaussianBelief::new(DVector::from_element(1, m0), DMatrix::from_element(1, 1, p0)).unwrap();
        let s = rts_smooth(&m, &traj, &init).unwrap();
        for t in 0..=n {
            assert!((s.means[t][0] - mean[t]).abs() < 1e-12, "mean t={t}");
            assert!((s.covs[t][(0, 0)] - cov[(t, t)]).abs() < 1e-12, "cov t={t}");
        }
        for t in 0..n {
            assert!((s.cross_covs[t][(0, 0)] - cov[(t, t + 1)]).abs() < 1e-12, "cross t={t}");
        }
        assert!((s.loglik - ll).abs() < 1e-12);
    }
}
