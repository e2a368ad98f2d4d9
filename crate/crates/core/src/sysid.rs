//! State-space identification from a single input-output trajectory by
//! Expectation-Maximization, with the disturbance and measurement-noise
//! covariances known up to scale.
//!
//! All estimates live in observability canonical coordinates (see
//! [`crate::model::to_observability_form`]), where `C = [I, 0]` is a
//! normalization rather than a free parameter. An iteration consists of
//!
//! 1. an E-step (fixed-interval smoother at the current parameters),
//! 2. conditional maximization of the expected complete-data likelihood over
//!    the stochastic rows of `A` and then over the two scale factors,
//! 3. exact conditional maximization of the observed-data likelihood over
//!    `B` and the initial mean, which enter the innovations affinely.
//!
//! Every step is a conditional maximizer, so the likelihood never decreases.
//! Rows of `A` in the null space of the disturbance pattern describe
//! deterministic state relations and are left untouched by step 2.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::kalman::{dare_steady_state, filter, rts_smooth, time_varying_filter};
use crate::linalg::{self, symmetrize};
use crate::model::{to_observability_form, GaussianBelief, StateSpaceModel, Trajectory};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmConfig {
    pub n_x: usize,
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement falls below this.
    pub loglik_tol: f64,
    pub seed: u64,
    /// `E = √q · e_pattern`, expressed in observability coordinates.
    #[serde(with = "io::matrix")]
    pub e_pattern: DMatrix<f64>,
    /// `R = r · r_pattern`.
    #[serde(with = "io::matrix")]
    pub r_pattern: DMatrix<f64>,
    /// Fixed initial-state covariance is `p0_scale · I`.
    pub p0_scale: f64,
}

impl EmConfig {
    pub fn new(n_x: usize, e_pattern: DMatrix<f64>, r_pattern: DMatrix<f64>) -> Self {
        EmConfig {
            n_x,
            max_iters: 500,
            loglik_tol: 1e-6,
            seed: 0,
            e_pattern,
            r_pattern,
            p0_scale: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.loglik_tol > 0.0) {
            return Err(Error::InvalidArgument("loglik_tol must be positive".into()));
        }
        if self.e_pattern.nrows() != self.n_x {
            return Err(Error::Dimension("disturbance pattern must have n_x rows".into()));
        }
        if self.r_pattern.nrows() != self.r_pattern.ncols() {
            return Err(Error::Dimension("measurement pattern must be square".into()));
        }
        if self.e_pattern.amax() == 0.0 {
            return Err(Error::InvalidArgument("disturbance pattern is zero".into()));
        }
        if !(self.p0_scale > 0.0) {
            return Err(Error::InvalidArgument("p0_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: StateSpaceModel,
    pub initial_state: GaussianBelief,
    /// Log-likelihood at the start of every iteration and at the final
    /// parameters.
    pub loglik_trace: Vec<f64>,
    pub disturbance_scale: f64,
    pub measurement_scale: f64,
    pub converged: bool,
}

/// `C A^i B` for `i = 0..count`.
pub fn markov_parameters(model: &StateSpaceModel, count: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut ab = model.b.clone();
    for _ in 0..count {
        out.push(&model.c * &ab);
        ab = &model.a * ab;
    }
    out
}

/// Relative Frobenius error of the stacked Markov parameters
/// `[CB, CAB, …, CA^{count-1}B]`.
pub fn markov_relative_error(est: &StateSpaceModel, truth: &StateSpaceModel, count: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in markov_parameters(est, count).iter().zip(markov_parameters(truth, count).iter()) {
        num += (a - b).norm_squared();
        den += b.norm_squared();
    }
    (num / den.max(1e-300)).sqrt()
}

/// Least-squares ARX fit `y_t = Σ A_i y_{t-i} + Σ B_i u_{t-i}` of order `p`.
/// Returns the impulse response `h_1 … h_count` (with `h_j = C A^{j-1} B`
/// for a state-space realization) and the residual covariance.
pub fn arx_markov(traj: &Trajectory, p: usize, count: usize) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let (nu, ny, n) = (traj.n_u(), traj.n_y(), traj.len());
    let width = p * (ny + nu);
    if n < p + 1 + 2 * width {
        return Err(Error::InsufficientData(format!(
            "ARX of order {p} needs more than {} samples",
            p + 1 + 2 * width
        )));
    }
    let rows = n - p;
    let mut phi = DMatrix::zeros(rows, width);
    let mut target = DMatrix::zeros(rows, ny);
    for (r, t) in (p + 1..=n).enumerate() {
        for i in 1..=p {
            let y = traj.y(t - i);
            let u = traj.u(t - i);
            for j in 0..ny {
                phi[(r, (i - 1) * ny + j)] = y[j];
            }
            for j in 0..nu {
                phi[(r, p * ny + (i - 1) * nu + j)] = u[j];
            }
        }
        target.row_mut(r).copy_from(&traj.y(t).transpose());
    }
    let sv = phi.clone().singular_values();
    let (smax, smin) = sv
        .iter()
        .fold((0.0_f64, f64::INFINITY), |(a, b), &s| (a.max(s), b.min(s)));
    if smin <= 0.0 || smax / smin > 1e8 {
        warn!("ARX regressor is poorly conditioned (condition number {:e})", smax / smin);
    }
    let gram = phi.transpose() * &phi;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::InsufficientExcitation("ARX normal equations are singular".into()))?;
    let coef = chol.solve(&(phi.transpose() * &target)); // width × ny
    let resid = &target - &phi * &coef;
    let mut sigma = resid.transpose() * &resid / rows as f64;
    symmetrize(&mut sigma);
    let theta = coef.transpose(); // ny × width
    let a_blk = |i: usize| theta.view((0, (i - 1) * ny), (ny, ny)).into_owned();
    let b_blk = |i: usize| theta.view((0, p * ny + (i - 1) * nu), (ny, nu)).into_owned();
    let mut h: Vec<DMatrix<f64>> = Vec::with_capacity(count);
    for j in 1..=count {
        let mut hj = if j <= p { b_blk(j) } else { DMatrix::zeros(ny, nu) };
        for i in 1..=p.min(j - 1) {
            hj += a_blk(i) * &h[j - i - 1];
        }
        h.push(hj);
    }
    Ok((h, sigma))
}

/// Realization of order `n_x` from the impulse response `h_1, h_2, …` by
/// SVD truncation of the block Hankel matrix.
pub fn ho_kalman(h: &[DMatrix<f64>], n_x: usize, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (ny, nu) = (h[0].nrows(), h[0].ncols());
    let r = n_x + 1;
    let c = n_x + 1;
    if h.len() < r + c - 1 {
        return Err(Error::InsufficientData("impulse response too short for the Hankel matrix".into()));
    }
    let mut hank = DMatrix::zeros(r * ny, c * nu);
    for i in 0..r {
        for j in 0..c {
            hank.view_mut((i * ny, j * nu), (ny, nu)).copy_from(&h[i + j]);
        }
    }
    let mut attempt = 0;
    loop {
        let svd = hank.clone().svd(true, true);
        let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
        // nalgebra returns singular values unsorted
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        if order.len() < n_x {
            return Err(Error::RankDeficient("Hankel matrix smaller than the model order".into()));
        }
        let s_max = svd.singular_values[order[0]];
        let s_min = svd.singular_values[order[n_x - 1]];
        if s_max > 0.0 && s_min > 1e-10 * s_max {
            let mut obs = DMatrix::zeros(r * ny, n_x);
            let mut ctr = DMatrix::zeros(n_x, c * nu);
            for (k, &i) in order.iter().take(n_x).enumerate() {
                let s = svd.singular_values[i].sqrt();
                obs.set_column(k, &(u.column(i) * s));
                ctr.set_row(k, &(vt.row(i) * s));
            }
            let up = obs.rows(0, (r - 1) * ny).into_owned();
            let down = obs.rows(ny, (r - 1) * ny).into_owned();
            let a = linalg::pseudo_inverse(&up) * down;
            let cm = obs.rows(0, ny).into_owned();
            let b = ctr.columns(0, nu).into_owned();
            return Ok((a, b, cm));
        }
        attempt += 1;
        if attempt > 5 {
            return Err(Error::RankDeficient("Hankel matrix stays rank deficient after perturbation".into()));
        }
        warn!("Hankel matrix is rank deficient; perturbing (attempt {attempt})");
        let scale = 1e-6 * hank.amax().max(1e-12);
        let noise = rng::normal_vector(seed, streams::EM_PERTURBATION, attempt as u64, hank.len());
        hank += DMatrix::from_column_slice(hank.nrows(), hank.ncols(), noise.as_slice()) * scale;
    }
}

/// Initial model in observability coordinates: ARX of lag `2 n_x`, Markov
/// parameters, Hankel truncation to order `n_x`, then the noise scales
/// from the ARX residuals.
pub fn initial_estimate(traj: &Trajectory, cfg: &EmConfig) -> Result<StateSpaceModel> {
    let n_x = cfg.n_x;
    let ny = traj.n_y();
    let (h, sigma) = arx_markov(traj, 2 * n_x, 2 * n_x + 2)?;
    let (mut a, b, c) = ho_kalman(&h, n_x, cfg.seed)?;
    let placeholder_e = DMatrix::zeros(n_x, 1);
    let mut attempt = 0;
    let (canon, _) = loop {
        let candidate = StateSpaceModel {
            a: a.clone(),
            b: b.clone(),
            c: c.clone(),
            e: placeholder_e.clone(),
            r: DMatrix::identity(ny, ny),
        };
        match to_observability_form(&candidate) {
            Ok(v) => break v,
            Err(e) if attempt < 5 => {
                attempt += 1;
                warn!("initial realization not observable ({e}); perturbing");
                let noise = rng::normal_vector(cfg.seed, streams::EM_PERTURBATION, 100 + attempt as u64, n_x * n_x);
                a += DMatrix::from_column_slice(n_x, n_x, noise.as_slice()) * (1e-6 * a.amax().max(1e-12));
            }
            Err(e) => return Err(e),
        }
    };
    let rp_inv = linalg::spd_inverse(&cfg.r_pattern, "measurement pattern")?;
    let r0 = 0.5 * (&rp_inv * &sigma).trace() / ny as f64;
    let qp = &cfg.e_pattern * cfg.e_pattern.transpose();
    let ca = &canon.c * &canon.a;
    let reach = (&canon.c * &qp * canon.c.transpose()).trace() + (&ca * &qp * ca.transpose()).trace();
    let q0 = if reach > 0.0 {
        0.5 * sigma.trace() / reach
    } else {
        0.5 * sigma.trace() / qp.trace()
    };
    let (q, r) = tune_noise_scales(&canon, traj, cfg, q0.max(1e-12), r0.max(1e-12));
    Ok(StateSpaceModel {
        e: &cfg.e_pattern * q.sqrt(),
        r: &cfg.r_pattern * r,
        ..canon
    })
}

/// Stationary-filter log-likelihood with the scales `(q, r)` applied to the
/// patterns; failures count as `-∞`.
fn stationary_loglik(model: &StateSpaceModel, traj: &Trajectory, cfg: &EmConfig, q: f64, r: f64) -> f64 {
    let m = StateSpaceModel {
        e: &cfg.e_pattern * q.sqrt(),
        r: &cfg.r_pattern * r,
        ..model.clone()
    };
    let init = GaussianBelief::point(DVector::zeros(m.n_x()));
    dare_steady_state(&m, 1e-10, 10_000)
        .and_then(|inno| filter(&m, &inno, traj, &init))
        .map(|f| f.loglik)
        .unwrap_or(f64::NEG_INFINITY)
}

/// Coordinate-wise golden-section search over `log q` and `log r`, three
/// decades either side of the starting guess.
fn tune_noise_scales(model: &StateSpaceModel, traj: &Trajectory, cfg: &EmConfig, q0: f64, r0: f64) -> (f64, f64) {
    let (mut lq, mut lr) = (q0.ln(), r0.ln());
    let span = 3.0 * std::f64::consts::LN_10;
    for _ in 0..2 {
        lq = golden_max(|v| stationary_loglik(model, traj, cfg, v.exp(), lr.exp()), lq - span, lq + span, 24);
        lr = golden_max(|v| stationary_loglik(model, traj, cfg, lq.exp(), v.exp()), lr - span, lr + span, 24);
    }
    (lq.exp(), lr.exp())
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iters {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Runs EM from the ARX/Hankel initializer.
pub fn em_identify(traj: &Trajectory, cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    let init = initial_estimate(traj, cfg)?;
    em_from(traj, cfg, &init)
}

/// Runs EM from a given model, first brought into observability
/// coordinates. The disturbance and measurement scales are read off the
/// given model by projection onto the patterns.
pub fn em_from(traj: &Trajectory, cfg: &EmConfig, start: &StateSpaceModel) -> Result<EmFit> {
    cfg.validate()?;
    let n = cfg.n_x;
    let (ny, nu) = (traj.n_y(), traj.n_u());
    if start.n_x() != n || start.n_y() != ny || start.n_u() != nu {
        return Err(Error::Dimension("starting model does not match the data".into()));
    }
    if cfg.r_pattern.nrows() != ny {
        return Err(Error::Dimension("measurement pattern must be n_y x n_y".into()));
    }
    if traj.len() < 10 * n {
        return Err(Error::InsufficientData(format!(
            "trajectory of length {} is shorter than 10 n_x",
            traj.len()
        )));
    }
    let (canon, _) = to_observability_form(start)?;

    let qp = {
        let mut q = &cfg.e_pattern * cfg.e_pattern.transpose();
        symmetrize(&mut q);
        q
    };
    let (range, null) = linalg::range_and_null(&qp, 1e-10);
    let q_rank = range.ncols();
    let qp_reduced_inv = linalg::spd_inverse(&(range.transpose() * &qp * &range), "disturbance pattern")?;
    let rp_inv = linalg::spd_inverse(&cfg.r_pattern, "measurement pattern")?;
    let proj_range = &range * range.transpose();
    let proj_null = &null * null.transpose();

    // scales implied by the starting model
    let q_start = (&qp_reduced_inv * range.transpose() * canon.process_cov() * &range).trace() / q_rank as f64;
    let r_start = (&rp_inv * &canon.r).trace() / ny as f64;
    let mut q = q_start.max(1e-12);
    let mut r = r_start.max(1e-12);
    let mut model = StateSpaceModel {
        e: &cfg.e_pattern * q.sqrt(),
        r: &cfg.r_pattern * r,
        ..canon
    };
    let p0 = DMatrix::identity(n, n) * cfg.p0_scale;
    let mut mu0 = DVector::zeros(n);

    let t_len = traj.len();
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 0..cfg.max_iters {
        let belief = GaussianBelief {
            mean: mu0.clone(),
            cov: p0.clone(),
        };
        let sm = rts_smooth(&model, traj, &belief)?;
        let ll = sm.loglik;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if ll < prev - 10.0 * cfg.loglik_tol * prev.abs().max(1.0) {
                return Err(Error::LikelihoodDecrease {
                    iteration: iter,
                    before: prev,
                    after: ll,
                });
            }
            let gain = (ll - prev) / prev.abs().max(1.0);
            debug!("EM iteration {iter}: loglik {ll} (relative gain {gain:e})");
            if gain < cfg.loglik_tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);

        // sufficient statistics over t = 0..T-1
        let mut p_sum0 = DMatrix::zeros(n, n); // Σ P_t
        let mut p_sum1 = DMatrix::zeros(n, n); // Σ P_{t+1}
        let mut x_sum = DMatrix::zeros(n, n); // Σ Cov[x_t, x_{t+1}]
        for t in 0..t_len {
            p_sum0 += &sm.covs[t];
            p_sum1 += &sm.covs[t + 1];
            x_sum += &sm.cross_covs[t];
        }
        let mut s00 = p_sum0.clone();
        let mut s10 = x_sum.transpose();
        let mut su0 = DMatrix::zeros(n, n); // Σ B u_t x_tᵀ
        for t in 0..t_len {
            let (m0, m1) = (&sm.means[t], &sm.means[t + 1]);
            s00.ger(1.0, m0, m0, 1.0);
            s10.ger(1.0, m1, m0, 1.0);
            su0.ger(1.0, &(&model.b * traj.u(t)), m0, 1.0);
        }
        symmetrize(&mut s00);
        let s00_chol = s00
            .clone()
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("M-step state Gram matrix is singular".into()))?;
        let a_ls = s00_chol.solve(&(&s10 - &su0).transpose()).transpose();
        let a_new = &proj_range * a_ls + &proj_null * &model.a;
        model.a = a_new;

        // scale factors at the new A
        let ax = &model.a * &x_sum;
        let mut res_cov = &p_sum1 + &model.a * &p_sum0 * model.a.transpose() - &ax - ax.transpose();
        let mut out_cov = &model.c * &p_sum1 * model.c.transpose();
        for t in 0..t_len {
            let (m0, m1) = (&sm.means[t], &sm.means[t + 1]);
            let d = m1 - &model.a * m0 - &model.b * traj.u(t);
            res_cov.ger(1.0, &d, &d, 1.0);
            let ey = traj.y(t + 1) - &model.c * m1;
            out_cov.ger(1.0, &ey, &ey, 1.0);
        }
        res_cov /= t_len as f64;
        out_cov /= t_len as f64;
        q = ((&qp_reduced_inv * range.transpose() * &res_cov * &range).trace() / q_rank as f64).max(1e-14);
        r = ((&rp_inv * &out_cov).trace() / ny as f64).max(1e-14);
        model.e = &cfg.e_pattern * q.sqrt();
        model.r = &cfg.r_pattern * r;

        // exact maximization over B and the initial mean
        let (b_new, mu_new) = maximize_affine_parameters(&model, traj, &mu0, &p0)?;
        model.b = b_new;
        mu0 = mu_new;
        if !linalg::all_finite(&model.a) || !linalg::all_finite(&model.b) {
            return Err(Error::NonFinite("EM parameter update".into()));
        }
    }
    if !converged {
        let belief = GaussianBelief {
            mean: mu0.clone(),
            cov: p0.clone(),
        };
        trace.push(time_varying_filter(&model, traj, &belief)?.loglik);
        warn!("EM stopped after {} iterations without meeting the tolerance", cfg.max_iters);
    }
    Ok(EmFit {
        model,
        initial_state: GaussianBelief { mean: mu0, cov: p0 },
        loglik_trace: trace,
        disturbance_scale: q,
        measurement_scale: r,
        converged,
    })
}

/// For fixed `A`, `C`, `E`, `R` and initial covariance, the innovations are
/// affine in `β = [vec(B); μ0]` while their covariances do not depend on
/// `β`, so the log-likelihood is a concave quadratic in `β` and its
/// maximizer is a weighted least-squares solution.
fn maximize_affine_parameters(
    model: &StateSpaceModel,
    traj: &Trajectory,
    mu0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (n, nu) = (model.n_x(), model.n_u());
    let nb = n * nu + n;
    let pass = time_varying_filter(
        model,
        traj,
        &GaussianBelief {
            mean: mu0.clone(),
            cov: p0.clone(),
        },
    )?;
    let mut sens = DMatrix::zeros(n, nb);
    for i in 0..n {
        sens[(i, n * nu + i)] = 1.0;
    }
    let mut hess = DMatrix::zeros(nb, nb);
    let mut grad = DVector::zeros(nb);
    let mut chol = None;
    for t in 0..traj.len() {
        let mut pred = &model.a * &sens;
        let u = traj.u(t);
        for j in 0..nu {
            for i in 0..n {
                pred[(i, j * n + i)] += u[j];
            }
        }
        let jac = -(&model.c * &pred); // ∂e_{t+1}/∂β
        if chol.is_none() || pass.steady_from.is_none_or(|s| t <= s + 1) {
            chol = Some(
                pass.innovation_covs[t]
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?,
            );
        }
        let wj = chol.as_ref().unwrap().solve(&jac);
        hess += jac.transpose() * &wj;
        grad += wj.transpose() * &pass.innovations[t];
        sens = &pred + &pass.gains[t] * &jac;
    }
    symmetrize(&mut hess);
    let step = hess
        .cholesky()
        .ok_or_else(|| Error::InsufficientExcitation("input and initial-state normal equations are singular".into()))?
        .solve(&grad);
    let mut beta = DVector::zeros(nb);
    for j in 0..nu {
        for i in 0..n {
            beta[j * n + i] = model.b[(i, j)];
        }
    }
    beta.rows_mut(n * nu, n).copy_from(mu0);
    beta -= step;
    let b = DMatrix::from_column_slice(n, nu, beta.rows(0, n * nu).as_slice());
    Ok((b, beta.rows(n * nu, n).into_owned()))
}
