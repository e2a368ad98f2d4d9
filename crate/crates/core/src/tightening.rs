//! Probabilistic constants and tightened constraint rows.
//!
//! A chance constraint `Pr[hᵀ y_k ≤ 1] ≥ p` on the `k`-step output becomes a
//! second-order-cone row in the stacked input `u`:
//!
//! ```text
//! hᵀ(Ĝ0 x̄0 + Ĝu u) + scale · ‖Σ_θ^{1/2} ([x̄0; u] ⊗ h)‖ ≤ 1 − c_p̃ √(f + d)
//! ```
//!
//! where `d = hᵀ(Ĝw Ĝwᵀ + R̂)h` covers disturbances and `f` bounds the
//! variance contribution `θᵀMθ` of the initial-state uncertainty, with
//! `M = diag(Σ_x0, 0) ⊗ hhᵀ`. The ellipsoidal scheme uses
//! `scale = d_δ = √χ²_{n_θ}(δ)` and the maximum of `θᵀMθ` over the
//! confidence ellipsoid; the proposed scheme uses `scale = c_ε` and the
//! `1 + δ − ε` quantile of `θᵀMθ` under `θ ~ N(θ̂, Σ_θ)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{self, symmetrize};
use crate::model::{multi_step_from_model, GaussianBelief, StateSpaceModel};
use crate::predictor::MultiStepPredictor;
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceSpec {
    pub p: f64,
    pub delta: f64,
    pub epsilon: f64,
}

impl ChanceSpec {
    pub fn new(p: f64, delta: f64, epsilon: f64) -> Result<Self> {
        let spec = ChanceSpec { p, delta, epsilon };
        spec.validate()?;
        Ok(spec)
    }

    /// `δ = √p`.
    pub fn with_natural_delta(p: f64, epsilon: f64) -> Result<Self> {
        Self::new(p, p.sqrt(), epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        let ChanceSpec { p, delta, epsilon } = *self;
        if !(0.0 < p && p < delta && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("need 0 < p < δ < 1, got p={p}, δ={delta}")));
        }
        let pt = p / delta;
        if !(pt > 0.5 && epsilon > pt && epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 1/2 < p/δ < ε < 1, got p/δ={pt}, ε={epsilon}"
            )));
        }
        let level = 1.0 + delta - epsilon;
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidArgument(format!("1 + δ − ε = {level} must lie in (0, 1)")));
        }
        Ok(())
    }

    pub fn p_tilde(&self) -> f64 {
        self.p / self.delta
    }

    /// Level of the quadratic-form quantile, `1 + δ − ε`.
    pub fn quantile_level(&self) -> f64 {
        1.0 + self.delta - self.epsilon
    }

    pub fn c_p(&self) -> Result<f64> {
        one_sided_constant(self.p)
    }

    pub fn c_p_tilde(&self) -> Result<f64> {
        one_sided_constant(self.p_tilde())
    }

    pub fn c_epsilon(&self) -> Result<f64> {
        one_sided_constant(self.epsilon)
    }

    /// `d_δ = √χ²_{n_θ}(δ)`.
    pub fn d_delta(&self, n_theta: usize) -> Result<f64> {
        Ok(chi2_quantile(n_theta, self.delta)?.sqrt())
    }
}

/// `√χ²_1(2q − 1)`, the standard normal `q`-quantile for `q ≥ 1/2`.
pub fn one_sided_constant(q: f64) -> Result<f64> {
    if !(0.5..1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("probability {q} outside [1/2, 1)")));
    }
    Ok(chi2_quantile(1, 2.0 * q - 1.0)?.sqrt())
}

pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(dof as f64 / 2.0, x / 2.0)
    }
}

fn chi2_ln_pdf(dof: usize, x: f64) -> f64 {
    let k = dof as f64 / 2.0;
    (k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)
}

/// Inverse of the χ² CDF by safeguarded Newton iteration on a bracket.
pub fn chi2_quantile(dof: usize, prob: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidArgument("χ² needs at least one degree of freedom".into()));
    }
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!("χ² quantile level {prob} outside [0, 1)")));
    }
    if prob == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0_f64, (dof as f64).max(1.0));
    while chi2_cdf(dof, hi) < prob {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Numerical("χ² quantile bracket overflow".into()));
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = chi2_cdf(dof, x) - prob;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let step = f / chi2_ln_pdf(dof, x).exp();
        let newton = x - step;
        if step.abs() <= 1e-15 * x {
            return Ok(newton.clamp(lo, hi));
        }
        x = if newton.is_finite() && newton >= lo && newton <= hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(x)
}

/// Maximum of `zᵀ diag(a) z + 2 βᵀz + c` over `‖z‖ ≤ r` for `a ≥ 0`.
fn secular_max(a: &[f64], beta: &[f64], r: f64, c: f64) -> f64 {
    let a_max = a.iter().cloned().fold(0.0_f64, f64::max);
    let bnorm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    if r == 0.0 || (a_max == 0.0 && bnorm == 0.0) {
        return c;
    }
    let value = |z: &[f64]| -> f64 {
        z.iter()
            .zip(a)
            .zip(beta)
            .map(|((zi, ai), bi)| ai * zi * zi + 2.0 * bi * zi)
            .sum::<f64>()
            + c
    };
    let top_tol = 1e-12 * a_max.max(1e-300);
    let is_top = |i: usize| a_max - a[i] <= top_tol;
    // ψ(λ) = Σ β_i² / (λ − a_i)²
    let psi = |lam: f64| -> f64 {
        a.iter()
            .zip(beta)
            .map(|(ai, bi)| if *bi == 0.0 { 0.0 } else { bi * bi / ((lam - ai) * (lam - ai)) })
            .sum()
    };
    let top_beta = (0..a.len())
        .filter(|&i| is_top(i))
        .map(|i| beta[i] * beta[i])
        .sum::<f64>()
        .sqrt();
    if top_beta <= 1e-14 * bnorm.max(1e-300) {
        // possible hard case: λ = a_max if the remaining components fit
        let mut z: Vec<f64> = (0..a.len())
            .map(|i| if is_top(i) { 0.0 } else { beta[i] / (a_max - a[i]) })
            .collect();
        let rest = z.iter().map(|v| v * v).sum::<f64>();
        if rest <= r * r {
            let tau = (r * r - rest).sqrt();
            let i_top = (0..a.len()).find(|&i| is_top(i)).unwrap();
            z[i_top] = tau;
            return value(&z);
        }
    }
    // easy case: unique λ > a_max with ψ(λ) = r²
    let mut lo = a_max;
    let mut hi = a_max + bnorm / r;
    let mut lam = hi;
    for _ in 0..200 {
        let p = psi(lam);
        let f = 1.0 / p.sqrt() - 1.0 / r;
        if f > 0.0 {
            hi = lam;
        } else {
            lo = lam;
        }
        // dψ/dλ = −2 Σ β²/(λ−a)³, dφ/dλ = −½ ψ^{-3/2} ψ'
        let dpsi: f64 = a
            .iter()
            .zip(beta)
            .map(|(ai, bi)| -2.0 * bi * bi / (lam - ai).powi(3))
            .sum();
        let dphi = -0.5 * p.powf(-1.5) * dpsi;
        if f.abs() <= 1e-15 / r {
            break;
        }
        let newton = lam - f / dphi;
        lam = if newton.is_finite() && newton > lo && newton <= hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-15 * hi.abs().max(1e-300) {
            break;
        }
    }
    let z: Vec<f64> = a.iter().zip(beta).map(|(ai, bi)| bi / (lam - ai)).collect();
    value(&z)
}

fn lower_factor(sigma: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    sigma
        .clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(what.into()))
}

/// `max θᵀMθ` over `(θ − θ̂)ᵀ Σ⁻¹ (θ − θ̂) ≤ radius²`.
pub fn trust_region_max(m: &DMatrix<f64>, theta_hat: &DVector<f64>, sigma: &DMatrix<f64>, radius: f64) -> Result<f64> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument("radius must be non-negative".into()));
    }
    if !linalg::is_psd(m, 1e-12) {
        return Err(Error::NotPositiveDefinite("trust-region objective".into()));
    }
    let l = lower_factor(&linalg::symmetrized(sigma), "trust-region shape matrix")?;
    let mut at = l.transpose() * m * &l;
    symmetrize(&mut at);
    let b = l.transpose() * m * theta_hat;
    let c = theta_hat.dot(&(m * theta_hat));
    let eig = SymmetricEigen::new(at);
    let beta = eig.eigenvectors.transpose() * b;
    let a: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    Ok(secular_max(&a, beta.as_slice(), radius, c))
}

/// [`trust_region_max`] for `M = W Wᵀ` and `Σ = F Fᵀ`, working in the
/// column space of `W` (dimension `W.ncols()`).
pub fn trust_region_max_factored(
    w: &DMatrix<f64>,
    theta_hat: &DVector<f64>,
    sigma_factor: &DMatrix<f64>,
    radius: f64,
) -> Result<f64> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument("radius must be non-negative".into()));
    }
    let wt_theta = w.transpose() * theta_hat;
    let c = wt_theta.norm_squared();
    let v = sigma_factor.transpose() * w; // Ã = V Vᵀ
    if v.ncols() == 0 {
        return Ok(c);
    }
    let mut gram = v.transpose() * &v;
    symmetrize(&mut gram);
    let eig = SymmetricEigen::new(gram);
    let mut a = Vec::new();
    let mut beta = Vec::new();
    for i in 0..eig.eigenvalues.len() {
        let lam = eig.eigenvalues[i];
        if lam > 0.0 {
            // eigenvector V u / √λ, b = V Wᵀθ̂
            a.push(lam);
            beta.push(lam.sqrt() * eig.eigenvectors.column(i).dot(&wt_theta));
        }
    }
    Ok(secular_max(&a, &beta, radius, c))
}

/// Conservative empirical `level`-quantile of `θᵀMθ` for `θ ~ N(θ̂, Σ)`.
pub fn quad_form_quantile(
    m: &DMatrix<f64>,
    theta_hat: &DVector<f64>,
    sigma: &DMatrix<f64>,
    level: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let w = linalg::psd_factor(m, 1e-14);
    let f = linalg::psd_factor(sigma, 1e-14);
    quad_form_quantile_factored(&w, theta_hat, &f, level, n_samples, seed)
}

/// [`quad_form_quantile`] for `M = W Wᵀ` and `Σ = F Fᵀ`: samples
/// `‖Wᵀθ̂ + Wᵀ F ξ‖²` with `ξ ~ N(0, I)` through a factor of `WᵀΣW`.
pub fn quad_form_quantile_factored(
    w: &DMatrix<f64>,
    theta_hat: &DVector<f64>,
    sigma_factor: &DMatrix<f64>,
    level: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {level} outside (0, 1)")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mean = w.transpose() * theta_hat;
    let wf = w.transpose() * sigma_factor;
    let k = linalg::psd_factor(&(&wf * wf.transpose()), 1e-14);
    let m = mean.len();
    let r = k.ncols();
    if r == 0 {
        return Ok(mean.norm_squared());
    }
    let mut rng = rng::keyed_rng(seed, streams::QUANTILE, 0);
    let mut xi = vec![0.0; r];
    let mut vals = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let mut s = 0.0;
        for i in 0..m {
            let mut acc = mean[i];
            for (j, x) in xi.iter().enumerate() {
                acc += k[(i, j)] * x;
            }
            s += acc * acc;
        }
        vals.push(s);
    }
    vals.sort_by(f64::total_cmp);
    let idx = ((level * n_samples as f64).ceil() as usize).clamp(1, n_samples) - 1;
    Ok(vals[idx])
}

/// Output half-space `hᵀ y ≤ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfspaceConstraint {
    #[serde(with = "io::vector")]
    pub h: DVector<f64>,
}

impl HalfspaceConstraint {
    pub fn new(h: DVector<f64>) -> Result<Self> {
        if h.is_empty() || !h.iter().all(|v| v.is_finite()) || h.amax() == 0.0 {
            return Err(Error::InvalidArgument("constraint direction must be finite and nonzero".into()));
        }
        Ok(HalfspaceConstraint { h })
    }

    /// `y_i ≤ bound` for `bound > 0`.
    pub fn upper_bound(n_y: usize, i: usize, bound: f64) -> Result<Self> {
        let mut h = DVector::zeros(n_y);
        h[i] = 1.0 / bound;
        Self::new(h)
    }

    pub fn negated(&self) -> Self {
        HalfspaceConstraint { h: -&self.h }
    }
}

/// Row `offset + linearᵀu + scale · ‖cone_matrix u + cone_offset‖ ≤ rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocRow {
    pub k: usize,
    pub j: usize,
    pub offset: f64,
    #[serde(with = "io::vector")]
    pub linear: DVector<f64>,
    pub scale: f64,
    #[serde(with = "io::matrix")]
    pub cone_matrix: DMatrix<f64>,
    #[serde(with = "io::vector")]
    pub cone_offset: DVector<f64>,
    pub rhs: f64,
    /// Set when the right-hand side is not positive, so that the row can
    /// only hold if the predicted mean is pushed below zero.
    pub nonpositive_rhs: bool,
}

impl SocRow {
    pub fn n_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn has_cone(&self) -> bool {
        self.scale != 0.0 && self.cone_matrix.nrows() > 0
    }

    /// Left-hand side minus right-hand side at `u` (feasible when `≤ 0`).
    pub fn slack(&self, u: &DVector<f64>) -> f64 {
        let mut lhs = self.offset + self.linear.dot(u);
        if self.has_cone() {
            lhs += self.scale * (&self.cone_matrix * u + &self.cone_offset).norm();
        }
        lhs - self.rhs
    }
}

/// Tightening constants for one `(k, j)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowConstants {
    pub k: usize,
    pub j: usize,
    pub n_theta: usize,
    pub c_p: f64,
    pub c_epsilon: f64,
    pub c_p_tilde: f64,
    pub d_delta: f64,
    /// `hᵀ(Ĝw Ĝwᵀ + R̂)h`.
    pub d_kj: f64,
    /// Maximum of `θᵀMθ` over the `δ` confidence ellipsoid.
    pub f_kj: f64,
    /// `1 + δ − ε` quantile of `θᵀMθ`.
    pub f_eps_kj: f64,
}

/// `W` with `W Wᵀ = diag(Σ_x0, 0) ⊗ hhᵀ`.
pub fn initial_uncertainty_factor(msp: &MultiStepPredictor, h: &DVector<f64>, init: &GaussianBelief) -> DMatrix<f64> {
    let (nx, ny) = (msp.n_x(), msp.n_y());
    let width = msp.n_theta() / ny;
    let f = linalg::psd_factor(&init.cov, 1e-14);
    let mut ft = DMatrix::zeros(width, f.ncols());
    ft.view_mut((0, 0), (nx, f.ncols())).copy_from(&f);
    linalg::kron(&ft, &DMatrix::from_column_slice(ny, 1, h.as_slice()))
}

pub fn row_constants(
    msp: &MultiStepPredictor,
    j: usize,
    h: &HalfspaceConstraint,
    init: &GaussianBelief,
    spec: &ChanceSpec,
    mc_samples: usize,
    seed: u64,
) -> Result<RowConstants> {
    spec.validate()?;
    check_dims(msp, h, init)?;
    let n_theta = msp.n_theta();
    let d_delta = spec.d_delta(n_theta)?;
    let w = initial_uncertainty_factor(msp, &h.h, init);
    let gw_h = msp.gw_hat.transpose() * &h.h;
    let d_kj = gw_h.norm_squared() + h.h.dot(&(&msp.r_hat * &h.h));
    let f_kj = trust_region_max_factored(&w, &msp.theta_hat, &msp.sigma_theta_factor, d_delta)?;
    let qseed = rng::derive_seed(seed, streams::QUANTILE, (msp.k as u64) << 16 | j as u64);
    let f_eps_kj = quad_form_quantile_factored(
        &w,
        &msp.theta_hat,
        &msp.sigma_theta_factor,
        spec.quantile_level(),
        mc_samples,
        qseed,
    )?;
    Ok(RowConstants {
        k: msp.k,
        j,
        n_theta,
        c_p: spec.c_p()?,
        c_epsilon: spec.c_epsilon()?,
        c_p_tilde: spec.c_p_tilde()?,
        d_delta,
        d_kj,
        f_kj,
        f_eps_kj,
    })
}

fn check_dims(msp: &MultiStepPredictor, h: &HalfspaceConstraint, init: &GaussianBelief) -> Result<()> {
    if h.h.len() != msp.n_y() || init.mean.len() != msp.n_x() {
        return Err(Error::Dimension("constraint, belief and predictor disagree".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tightening {
    Ellipsoidal,
    Proposed,
}

/// Mean part `hᵀ(Ĝ0 x̄0 + Ĝu u)` and the cone `Gᵀ [x̄0; u]` with
/// `G Gᵀ = K_hᵀ Σ_θ K_h`, `K_h = I ⊗ h`, padded to `n_vars` inputs.
fn mean_and_cone(
    msp: &MultiStepPredictor,
    h: &DVector<f64>,
    init: &GaussianBelief,
    n_vars: usize,
) -> Result<(f64, DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let (nx, ny) = (msp.n_x(), msp.n_y());
    let width = msp.n_theta() / ny;
    let nu_k = width - nx;
    if nu_k > n_vars {
        return Err(Error::Dimension(format!("predictor for k={} needs {nu_k} inputs", msp.k)));
    }
    let offset = h.dot(&(&msp.g0_hat * &init.mean));
    let mut linear = DVector::zeros(n_vars);
    linear.rows_mut(0, nu_k).copy_from(&(msp.gu_hat.transpose() * h));
    let kh = linalg::kron(&DMatrix::identity(width, width), &DMatrix::from_column_slice(ny, 1, h.as_slice()));
    let fk = msp.sigma_theta_factor.transpose() * &kh;
    let mut psi = fk.transpose() * &fk;
    symmetrize(&mut psi);
    let g = linalg::psd_factor(&psi, 1e-14);
    let gt = g.transpose();
    let mut cone = DMatrix::zeros(gt.nrows(), n_vars);
    cone.view_mut((0, 0), (gt.nrows(), nu_k)).copy_from(&gt.columns(nx, nu_k));
    let cone_offset = gt.columns(0, nx) * &init.mean;
    Ok((offset, linear, cone, cone_offset))
}

/// Tightened row for horizon `msp.k` and constraint `j`.
pub fn build_row(
    method: Tightening,
    msp: &MultiStepPredictor,
    j: usize,
    h: &HalfspaceConstraint,
    init: &GaussianBelief,
    consts: &RowConstants,
    n_vars: usize,
) -> Result<SocRow> {
    check_dims(msp, h, init)?;
    let (offset, linear, cone_matrix, cone_offset) = mean_and_cone(msp, &h.h, init, n_vars)?;
    let (scale, f) = match method {
        Tightening::Ellipsoidal => (consts.d_delta, consts.f_kj),
        Tightening::Proposed => (consts.c_epsilon, consts.f_eps_kj),
    };
    let rhs = 1.0 - consts.c_p_tilde * (f + consts.d_kj).sqrt();
    Ok(SocRow {
        k: msp.k,
        j,
        offset,
        linear,
        scale,
        cone_matrix,
        cone_offset,
        rhs,
        nonpositive_rhs: rhs <= 0.0,
    })
}

pub fn build_rows_proposed(
    msp: &MultiStepPredictor,
    j: usize,
    h: &HalfspaceConstraint,
    init: &GaussianBelief,
    consts: &RowConstants,
    n_vars: usize,
) -> Result<SocRow> {
    build_row(Tightening::Proposed, msp, j, h, init, consts, n_vars)
}

pub fn build_rows_ellipsoidal(
    msp: &MultiStepPredictor,
    j: usize,
    h: &HalfspaceConstraint,
    init: &GaussianBelief,
    consts: &RowConstants,
    n_vars: usize,
) -> Result<SocRow> {
    build_row(Tightening::Ellipsoidal, msp, j, h, init, consts, n_vars)
}

/// Exact-model row `hᵀ(G0 x̄0 + Gu u) ≤ 1 − c_p √(hᵀ Σ_y h)` with
/// `Σ_y = G0 Σ_x0 G0ᵀ + Gw Gwᵀ + R`.
pub fn build_row_nominal(
    model: &StateSpaceModel,
    k: usize,
    j: usize,
    h: &HalfspaceConstraint,
    init: &GaussianBelief,
    spec: &ChanceSpec,
    n_vars: usize,
) -> Result<SocRow> {
    let ms = multi_step_from_model(model, &DMatrix::zeros(model.n_x(), model.n_y()), k)?;
    let nu_k = ms.gu.ncols();
    if nu_k > n_vars {
        return Err(Error::Dimension(format!("horizon {k} exceeds the decision length")));
    }
    let hv = &h.h;
    let g0h = ms.g0.transpose() * hv;
    let var = g0h.dot(&(&init.cov * &g0h)) + (ms.gw.transpose() * hv).norm_squared() + hv.dot(&(&model.r * hv));
    let rhs = 1.0 - spec.c_p()? * var.max(0.0).sqrt();
    let mut linear = DVector::zeros(n_vars);
    linear.rows_mut(0, nu_k).copy_from(&(ms.gu.transpose() * hv));
    Ok(SocRow {
        k,
        j,
        offset: hv.dot(&(&ms.g0 * &init.mean)),
        linear,
        scale: 0.0,
        cone_matrix: DMatrix::zeros(0, n_vars),
        cone_offset: DVector::zeros(0),
        rhs,
        nonpositive_rhs: rhs <= 0.0,
    })
}
