//! Multi-step output predictors identified by generalized least squares.
//!
//! For horizon `k` the regression model is
//!
//! ```text
//! y_{t+k} = (φ_tᵀ ⊗ I_{n_y}) θ_k + ẽ_{t,k},   φ_t = [x_{t|t}; u_t; …; u_{t+k-1}]
//! ```
//!
//! with `θ_k = vec([G0, Gu])` (column-major) and `ẽ_{t,k} = Ge e_{[t, t+k]}`
//! a moving average of filter innovations. The error covariance over all
//! rows is block Toeplitz with `k - 1` nonzero off-diagonal block lags.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::kalman::{filter, FilterOutput, InnovationForm};
use crate::linalg::{self, symmetrize};
use crate::model::{multi_step_from_model, GaussianBelief, MultiStepMatrices, StateSpaceModel, Trajectory};

/// Compact regressors: `phi[i] = φ_t` and `targets[i] = y_{t+k}` for
/// `t = first + i`.
#[derive(Debug, Clone)]
pub struct RegressorSet {
    pub k: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub first: usize,
    pub phi: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
}

impl RegressorSet {
    /// `n_θ = n_y (n_x + k n_u)`.
    pub fn n_theta(&self) -> usize {
        self.n_y * (self.n_x + self.k * self.n_u)
    }

    pub fn n_windows(&self) -> usize {
        self.phi.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_y * self.phi.len()
    }

    /// Dense `Φ` with the Kronecker structure expanded.
    pub fn expanded(&self) -> DMatrix<f64> {
        let ny = self.n_y;
        let mut out = DMatrix::zeros(self.n_rows(), self.n_theta());
        for (i, phi) in self.phi.iter().enumerate() {
            for (c, v) in phi.iter().enumerate() {
                for r in 0..ny {
                    out[(i * ny + r, c * ny + r)] = *v;
                }
            }
        }
        out
    }

    pub fn stacked_targets(&self) -> DVector<f64> {
        let ny = self.n_y;
        let mut out = DVector::zeros(self.n_rows());
        for (i, y) in self.targets.iter().enumerate() {
            out.rows_mut(i * ny, ny).copy_from(y);
        }
        out
    }
}

pub fn build_regressors(filter_out: &FilterOutput, traj: &Trajectory, k: usize, burn_in: usize) -> Result<RegressorSet> {
    if k < 1 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let t_len = traj.len();
    if filter_out.states.len() != t_len + 1 {
        return Err(Error::Dimension("filter output does not match trajectory".into()));
    }
    let (n_x, n_u, n_y) = (filter_out.states[0].len(), traj.n_u(), traj.n_y());
    let width = n_x + k * n_u;
    if t_len < burn_in + k || n_y * (t_len - burn_in - k + 1) <= n_y * width {
        return Err(Error::InsufficientData(format!(
            "{t_len} samples with burn-in {burn_in} are too few for horizon {k}"
        )));
    }
    let mut phi = Vec::with_capacity(t_len - burn_in - k + 1);
    let mut targets = Vec::with_capacity(phi.capacity());
    for t in burn_in..=t_len - k {
        let mut p = DVector::zeros(width);
        p.rows_mut(0, n_x).copy_from(&filter_out.states[t]);
        for i in 0..k {
            p.rows_mut(n_x + i * n_u, n_u).copy_from(traj.u(t + i));
        }
        phi.push(p);
        targets.push(traj.y(t + k).clone());
    }
    Ok(RegressorSet {
        k,
        n_x,
        n_u,
        n_y,
        first: burn_in,
        phi,
        targets,
    })
}

/// Symmetric block-Toeplitz matrix with `n_blocks × n_blocks` blocks of size
/// `block`; `lags[m]` is the block at position `(i, i + m)` and blocks
/// beyond `lags.len() - 1` are zero.
#[derive(Debug, Clone)]
pub struct BandedCovariance {
    pub block: usize,
    pub n_blocks: usize,
    pub lags: Vec<DMatrix<f64>>,
}

/// Lower Cholesky factor in band storage.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    w: usize,
    band: Vec<f64>,
}

impl BandCholesky {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.band[i * (self.w + 1) + (j + self.w - i)]
    }

    /// Solves `L z = v` in place.
    pub fn forward_solve(&self, v: &mut [f64]) {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.w);
            let row = &self.band[i * (self.w + 1)..(i + 1) * (self.w + 1)];
            let mut s = v[i];
            for j in lo..i {
                s -= row[j + self.w - i] * v[j];
            }
            v[i] = s / row[self.w];
        }
    }

    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.at(i, i).ln()).sum::<f64>()
    }
}

impl BandedCovariance {
    pub fn identity(block: usize, n_blocks: usize) -> Self {
        BandedCovariance {
            block,
            n_blocks,
            lags: vec![DMatrix::identity(block, block)],
        }
    }

    pub fn dim(&self) -> usize {
        self.block * self.n_blocks
    }

    /// Scalar half-bandwidth.
    pub fn bandwidth(&self) -> usize {
        self.lags.len() * self.block - 1
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let (bi, bj) = (i / self.block, j / self.block);
        let (ri, rj) = (i % self.block, j % self.block);
        if bj >= bi {
            let m = bj - bi;
            if m < self.lags.len() {
                self.lags[m][(ri, rj)]
            } else {
                0.0
            }
        } else {
            let m = bi - bj;
            if m < self.lags.len() {
                self.lags[m][(rj, ri)]
            } else {
                0.0
            }
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j))
    }

    /// Banded Cholesky, `O(n w²)` for half-bandwidth `w`.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let n = self.dim();
        let w = self.bandwidth().min(n.saturating_sub(1));
        let stride = w + 1;
        let mut band = vec![0.0; n * stride];
        for i in 0..n {
            let lo = i.saturating_sub(w);
            for j in lo..=i {
                let mut s = self.entry(i, j);
                let start = lo.max(j.saturating_sub(w));
                for p in start..j {
                    s -= band[i * stride + (p + w - i)] * band[j * stride + (p + w - j)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite(format!(
                            "banded noise covariance (pivot {i} is {s:e})"
                        )));
                    }
                    band[i * stride + w] = s.sqrt();
                } else {
                    band[i * stride + (j + w - i)] = s / band[j * stride + w];
                }
            }
        }
        Ok(BandCholesky { n, w, band })
    }
}

/// `Cov[ẽ_t, ẽ_{t+m}] = Σ_i Ge_i S Ge_{i-m}ᵀ` over the `k + 1` blocks of `Ge`.
pub fn build_noise_covariance(ms: &MultiStepMatrices, s: &DMatrix<f64>, n_rows: usize) -> Result<BandedCovariance> {
    let ny = s.nrows();
    let blocks = ms.k + 1;
    if ms.ge.ncols() != blocks * ny || ms.ge.nrows() != ny {
        return Err(Error::Dimension("Ge does not match the innovation covariance".into()));
    }
    let g = |i: usize| ms.ge.view((0, i * ny), (ny, ny));
    let mut lags = Vec::new();
    for m in 0..blocks {
        let mut lag = DMatrix::zeros(ny, ny);
        for i in m..blocks {
            lag += g(i) * s * g(i - m).transpose();
        }
        if m == 0 {
            symmetrize(&mut lag);
        }
        lags.push(lag);
    }
    while lags.len() > 1 && lags.last().is_some_and(|l| l.amax() == 0.0) {
        lags.pop();
    }
    let cov = BandedCovariance {
        block: ny,
        n_blocks: n_rows,
        lags,
    };
    cov.cholesky()?;
    Ok(cov)
}

/// Identified `k`-step predictor with parameter covariance and disturbance
/// surrogates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStepPredictor {
    pub k: usize,
    #[serde(with = "io::vector")]
    pub theta_hat: DVector<f64>,
    #[serde(with = "io::matrix")]
    pub sigma_theta: DMatrix<f64>,
    /// Lower factor `F` with `Σ_θ = F Fᵀ`.
    #[serde(with = "io::matrix")]
    pub sigma_theta_factor: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub g0_hat: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub gu_hat: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub gw_hat: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub r_hat: DMatrix<f64>,
}

impl MultiStepPredictor {
    pub fn n_x(&self) -> usize {
        self.g0_hat.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.g0_hat.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.gu_hat.ncols() / self.k
    }

    pub fn n_theta(&self) -> usize {
        self.theta_hat.len()
    }

    /// Splits `θ = vec([G0, Gu])` into `(G0, Gu)`.
    pub fn extract_matrices(theta: &DVector<f64>, n_y: usize, n_x: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let g = linalg::unvec(theta, n_y, theta.len() / n_y);
        let cols = g.ncols();
        (g.columns(0, n_x).into_owned(), g.columns(n_x, cols - n_x).into_owned())
    }

    pub fn from_estimate(
        k: usize,
        n_x: usize,
        theta_hat: DVector<f64>,
        sigma_theta: DMatrix<f64>,
        gw_hat: DMatrix<f64>,
        r_hat: DMatrix<f64>,
    ) -> Result<Self> {
        let n_y = r_hat.nrows();
        let (g0_hat, gu_hat) = Self::extract_matrices(&theta_hat, n_y, n_x);
        let sigma_theta_factor = match sigma_theta.clone().cholesky() {
            Some(c) => c.l(),
            None => linalg::psd_factor(&sigma_theta, 0.0),
        };
        Ok(MultiStepPredictor {
            k,
            theta_hat,
            sigma_theta,
            sigma_theta_factor,
            g0_hat,
            gu_hat,
            gw_hat,
            r_hat,
        })
    }

    /// Predictor built from known matrices, with no parameter uncertainty.
    pub fn exact(model: &StateSpaceModel, gain: &DMatrix<f64>, k: usize) -> Result<Self> {
        let ms = multi_step_from_model(model, gain, k)?;
        let mut g = DMatrix::zeros(model.n_y(), model.n_x() + ms.gu.ncols());
        g.columns_mut(0, model.n_x()).copy_from(&ms.g0);
        g.columns_mut(model.n_x(), ms.gu.ncols()).copy_from(&ms.gu);
        let theta = linalg::vec_of(&g);
        let n = theta.len();
        Self::from_estimate(k, model.n_x(), theta, DMatrix::zeros(n, n), ms.gw, model.r.clone())
    }

    /// `G0 x + Gu u` for the stacked input window `u`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.g0_hat * x + &self.gu_hat * u
    }
}

/// Whitened regressors `L⁻¹Φ`, `L⁻¹y` via the banded factor.
fn whiten(reg: &RegressorSet, chol: &BandCholesky) -> (DMatrix<f64>, DVector<f64>) {
    let mut phi = reg.expanded();
    for mut col in phi.column_iter_mut() {
        chol.forward_solve(col.as_mut_slice());
    }
    let mut y = reg.stacked_targets();
    chol.forward_solve(y.as_mut_slice());
    (phi, y)
}

/// Least squares on whitened data by Householder QR, so the conditioning
/// of `Φ` is not squared: `θ = R⁻¹Qᵀy`, `Σ_θ = R⁻¹R⁻ᵀ`.
fn solve_whitened(phi: DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = phi.ncols();
    if phi.nrows() < p {
        return Err(Error::InsufficientExcitation("fewer rows than parameters".into()));
    }
    let qr = phi.qr();
    let r = qr.r();
    let dmax = r.diagonal().amax();
    if !(dmax > 0.0) || r.diagonal().iter().any(|d| d.abs() <= 1e-13 * dmax) {
        return Err(Error::InsufficientExcitation("whitened regressors are rank deficient".into()));
    }
    let qty = qr.q().transpose() * y;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::InsufficientExcitation("singular triangular factor".into()))?;
    let theta = &r_inv * qty;
    let mut sigma = &r_inv * r_inv.transpose();
    symmetrize(&mut sigma);
    if !linalg::all_finite(&sigma) {
        return Err(Error::InsufficientExcitation("parameter covariance is not finite".into()));
    }
    Ok((theta, sigma))
}

/// Generalized least squares `θ̂ = (ΦᵀΣ⁻¹Φ)⁻¹ΦᵀΣ⁻¹y`, `Σ_θ = (ΦᵀΣ⁻¹Φ)⁻¹`.
pub fn gls_identify(reg: &RegressorSet, cov: &BandedCovariance) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_cov(reg, cov)?;
    let chol = cov.cholesky()?;
    let (phi, y) = whiten(reg, &chol);
    solve_whitened(phi, &y)
}

/// Dense reference path, `O(n³)` in the number of rows.
pub fn gls_identify_dense(reg: &RegressorSet, cov: &BandedCovariance) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_cov(reg, cov)?;
    let sigma = cov.dense();
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("noise covariance".into()))?;
    let l = chol.l();
    let phi = l
        .solve_lower_triangular(&reg.expanded())
        .ok_or_else(|| Error::NotPositiveDefinite("noise covariance".into()))?;
    let y = l
        .solve_lower_triangular(&reg.stacked_targets())
        .ok_or_else(|| Error::NotPositiveDefinite("noise covariance".into()))?;
    solve_whitened(phi, &y)
}

fn check_cov(reg: &RegressorSet, cov: &BandedCovariance) -> Result<()> {
    if cov.block != reg.n_y || cov.n_blocks != reg.n_windows() {
        return Err(Error::Dimension(format!(
            "covariance has {}x{} blocks, regression has {} windows of size {}",
            cov.n_blocks, cov.block, reg.n_windows(), reg.n_y
        )));
    }
    Ok(())
}

/// `Ĝ_w = √inflation · C [A^{k-1}E, …, E]` and `R̂ = inflation · R` from the
/// estimated model.
pub fn surrogate_disturbance_terms(
    est_model: &StateSpaceModel,
    k: usize,
    inflation: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(inflation >= 1.0) {
        return Err(Error::InvalidArgument(format!("inflation {inflation} must be at least 1")));
    }
    let ms = multi_step_from_model(est_model, &DMatrix::zeros(est_model.n_x(), est_model.n_y()), k)?;
    Ok((ms.gw * inflation.sqrt(), &est_model.r * inflation))
}

/// Settings for identifying the predictors of all horizons `1..=horizon`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorSettings {
    pub horizon: usize,
    pub burn_in: usize,
    pub inflation: f64,
}

/// Filters the data with the estimated model and identifies one predictor
/// per horizon.
pub fn identify_predictors(
    est_model: &StateSpaceModel,
    inno: &InnovationForm,
    traj: &Trajectory,
    init: &GaussianBelief,
    settings: &PredictorSettings,
) -> Result<Vec<MultiStepPredictor>> {
    let filt = filter(est_model, inno, traj, init)?;
    (1..=settings.horizon)
        .map(|k| {
            let reg = build_regressors(&filt, traj, k, settings.burn_in)?;
            let ms = multi_step_from_model(est_model, &inno.gain, k)?;
            let cov = build_noise_covariance(&ms, &inno.innovation_cov, reg.n_windows())?;
            let (theta, sigma) = gls_identify(&reg, &cov)?;
            let (gw, r) = surrogate_disturbance_terms(est_model, k, settings.inflation)?;
            MultiStepPredictor::from_estimate(k, est_model.n_x(), theta, sigma, gw, r)
        })
        .collect()
}

/// JSON bundle of the predictors for all horizons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorBundle {
    pub predictors: Vec<MultiStepPredictor>,
}

impl PredictorBundle {
    pub fn get(&self, k: usize) -> Result<&MultiStepPredictor> {
        self.predictors
            .iter()
            .find(|p| p.k == k)
            .ok_or(Error::MissingPredictor(k))
    }
}
