//! Conic program assembly and a dense primal-dual interior-point solver.
//!
//! Programs have the form
//!
//! ```text
//! minimize ½ uᵀHu + gᵀu + c0
//! s.t.     aᵢᵀu ≤ bᵢ,  offset + linᵀu + scale·‖C u + d‖ ≤ rhs
//! ```
//!
//! The solver rewrites the quadratic cost as a second-order cone and runs a
//! Mehrotra predictor-corrector method on the homogeneous self-dual
//! embedding with Nesterov-Todd scaling. Newton systems are reduced to the
//! normal equations `Gᵀ W⁻² G`, which is small since `n_vars ≤ ~100`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{self, symmetrize};
use crate::model::{multi_step_from_model, GaussianBelief, StateSpaceModel};
use crate::predictor::PredictorBundle;
use crate::tightening::{self, ChanceSpec, HalfspaceConstraint, RowConstants, SocRow, Tightening};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nominal,
    Ellipsoidal,
    Proposed,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Nominal => "nominal",
            Method::Ellipsoidal => "ellipsoidal",
            Method::Proposed => "proposed",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Method::Nominal),
            "ellipsoidal" => Ok(Method::Ellipsoidal),
            "proposed" => Ok(Method::Proposed),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRow {
    #[serde(with = "io::vector")]
    pub a: DVector<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    pub n_vars: usize,
    #[serde(with = "io::matrix")]
    pub h: DMatrix<f64>,
    #[serde(with = "io::vector")]
    pub g: DVector<f64>,
    pub c0: f64,
    pub lin_rows: Vec<LinearRow>,
    pub soc_rows: Vec<SocRow>,
}

impl ConicProgram {
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Result<Self> {
        let prog = ConicProgram { n_vars: g.len(), h, g, c0: 0.0, lin_rows: vec![], soc_rows: vec![] };
        prog.validate()?;
        Ok(prog)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars;
        if self.h.shape() != (n, n) || self.g.len() != n {
            return Err(Error::Dimension("cost dimensions disagree with n_vars".into()));
        }
        if (&self.h - self.h.transpose()).amax() > 1e-9 * (1.0 + self.h.amax()) {
            return Err(Error::InvalidArgument("cost matrix is not symmetric".into()));
        }
        if !linalg::is_psd(&self.h, 1e-10) {
            return Err(Error::NotPositiveDefinite("cost matrix".into()));
        }
        for r in &self.lin_rows {
            if r.a.len() != n || !r.b.is_finite() {
                return Err(Error::Dimension("linear row".into()));
            }
        }
        for r in &self.soc_rows {
            if r.linear.len() != n || r.cone_matrix.ncols() != n || r.cone_matrix.nrows() != r.cone_offset.len() {
                return Err(Error::Dimension("cone row".into()));
            }
            if !r.rhs.is_finite() || !r.offset.is_finite() || r.scale < 0.0 {
                return Err(Error::InvalidArgument("cone row data must be finite with scale ≥ 0".into()));
            }
        }
        Ok(())
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.g.dot(u) + self.c0
    }

    /// Largest row violation at `u` (non-positive when feasible).
    pub fn max_violation(&self, u: &DVector<f64>) -> f64 {
        let lin = self.lin_rows.iter().map(|r| r.a.dot(u) - r.b);
        let soc = self.soc_rows.iter().map(|r| r.slack(u));
        lin.chain(soc).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Scales every right-hand side and offset by `factor`.
    pub fn scaled_rows(&self, factor: f64) -> ConicProgram {
        let mut p = self.clone();
        for r in &mut p.lin_rows {
            r.b *= factor;
        }
        for r in &mut p.soc_rows {
            r.rhs *= factor;
            r.offset *= factor;
        }
        p
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ConicProgram = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Finite-horizon chance-constrained problem data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProblem {
    pub horizon: usize,
    pub constraints: Vec<HalfspaceConstraint>,
    #[serde(with = "io::matrix")]
    pub q_c: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub r_c: DMatrix<f64>,
    /// `|u_t| ≤ u_max` elementwise; infinite disables the box.
    pub u_max: f64,
    pub init: GaussianBelief,
    pub spec: ChanceSpec,
}

impl ControlProblem {
    pub fn n_u(&self) -> usize {
        self.r_c.nrows()
    }

    pub fn n_vars(&self) -> usize {
        self.horizon * self.n_u()
    }

    fn validate(&self, n_x: usize, n_y: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if self.q_c.shape() != (n_y, n_y) || !self.r_c.is_square() || self.init.mean.len() != n_x {
            return Err(Error::Dimension("cost weights or initial belief".into()));
        }
        if self.constraints.iter().any(|c| c.h.len() != n_y) {
            return Err(Error::Dimension("constraint direction".into()));
        }
        if !(self.u_max > 0.0) {
            return Err(Error::InvalidArgument("input bound must be positive".into()));
        }
        self.spec.validate()
    }
}

/// Quadratic cost from per-step predictions `ŷ_k = G0_k x̄0 + P_k u`.
fn quadratic_cost(
    problem: &ControlProblem,
    preds: &[(DMatrix<f64>, DMatrix<f64>)],
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = problem.n_vars();
    let nu = problem.n_u();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut c0 = 0.0;
    for (g0, gu) in preds {
        let mut p = DMatrix::zeros(gu.nrows(), n);
        p.view_mut((0, 0), gu.shape()).copy_from(gu);
        let qp = &problem.q_c * &p;
        h += 2.0 * p.transpose() * &qp;
        let free = g0 * &problem.init.mean;
        g += 2.0 * qp.transpose() * &free;
        c0 += free.dot(&(&problem.q_c * &free));
    }
    for t in 0..problem.horizon {
        let mut blk = h.view_mut((t * nu, t * nu), (nu, nu));
        blk += 2.0 * &problem.r_c;
    }
    symmetrize(&mut h);
    (h, g, c0)
}

fn input_box(problem: &ControlProblem) -> Vec<LinearRow> {
    let n = problem.n_vars();
    if !problem.u_max.is_finite() {
        return vec![];
    }
    let mut rows = Vec::with_capacity(2 * n);
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut a = DVector::zeros(n);
            a[i] = sign;
            rows.push(LinearRow { a, b: problem.u_max });
        }
    }
    rows
}

/// Tightening constants for every `(k, j)`, `k = 1..=N`, in k-major order.
pub fn compute_constants(
    bundle: &PredictorBundle,
    problem: &ControlProblem,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<RowConstants>> {
    let mut out = Vec::new();
    for k in 1..=problem.horizon {
        let msp = bundle.get(k)?;
        for (j, h) in problem.constraints.iter().enumerate() {
            out.push(tightening::row_constants(msp, j, h, &problem.init, &problem.spec, mc_samples, seed)?);
        }
    }
    Ok(out)
}

/// Program for the identified predictors with the given tightening.
pub fn assemble(
    bundle: &PredictorBundle,
    problem: &ControlProblem,
    method: Tightening,
    constants: &[RowConstants],
) -> Result<ConicProgram> {
    let first = bundle.get(1)?;
    problem.validate(first.n_x(), first.n_y())?;
    let n = problem.n_vars();
    let mut preds = Vec::with_capacity(problem.horizon);
    let mut soc_rows = Vec::new();
    for k in 1..=problem.horizon {
        let msp = bundle.get(k)?;
        preds.push((msp.g0_hat.clone(), msp.gu_hat.clone()));
        for (j, h) in problem.constraints.iter().enumerate() {
            let c = constants
                .iter()
                .find(|c| c.k == k && c.j == j)
                .ok_or_else(|| Error::InvalidArgument(format!("no tightening constants for k={k}, j={j}")))?;
            soc_rows.push(tightening::build_row(method, msp, j, h, &problem.init, c, n)?);
        }
    }
    let (h, g, c0) = quadratic_cost(problem, &preds);
    let prog = ConicProgram { n_vars: n, h, g, c0, lin_rows: input_box(problem), soc_rows };
    prog.validate()?;
    Ok(prog)
}

/// Exact reformulation with the true model and its Gaussian output law.
pub fn assemble_nominal(model: &StateSpaceModel, problem: &ControlProblem) -> Result<ConicProgram> {
    problem.validate(model.n_x(), model.n_y())?;
    let n = problem.n_vars();
    let zero_gain = DMatrix::zeros(model.n_x(), model.n_y());
    let mut preds = Vec::with_capacity(problem.horizon);
    let mut soc_rows = Vec::new();
    for k in 1..=problem.horizon {
        let ms = multi_step_from_model(model, &zero_gain, k)?;
        preds.push((ms.g0, ms.gu));
        for (j, h) in problem.constraints.iter().enumerate() {
            soc_rows.push(tightening::build_row_nominal(model, k, j, h, &problem.init, &problem.spec, n)?);
        }
    }
    let (h, g, c0) = quadratic_cost(problem, &preds);
    let prog = ConicProgram { n_vars: n, h, g, c0, lin_rows: input_box(problem), soc_rows };
    prog.validate()?;
    Ok(prog)
}

pub fn solve_nominal_exact(model: &StateSpaceModel, problem: &ControlProblem, settings: &SolverSettings) -> Result<Solution> {
    solve(&assemble_nominal(model, problem)?, settings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    PrimalInfeasible,
    /// Objective unbounded below.
    DualInfeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub status: Status,
    #[serde(with = "io::vector")]
    pub u_star: DVector<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub kkt_residuals: KktResiduals,
    /// `‖Gᵀz‖ / (−hᵀz)` of the normalized Farkas certificate.
    pub certificate_residual: Option<f64>,
    pub iterations: usize,
    pub wall_time: f64,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Cone {
    Nonneg(usize),
    Soc(usize),
}

impl Cone {
    fn dim(&self) -> usize {
        match *self {
            Cone::Nonneg(d) | Cone::Soc(d) => d,
        }
    }

    fn degree(&self) -> usize {
        match *self {
            Cone::Nonneg(d) => d,
            Cone::Soc(_) => 1,
        }
    }
}

/// `minimize cᵀx s.t. Gx + s = h, s ∈ K`.
struct ConeLp {
    c: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    cones: Vec<Cone>,
}

/// Cone data for a program in variables `[u; t]`, with the last cone the
/// epigraph `½‖F u‖² ≤ t`.
fn to_cone_lp(prog: &ConicProgram) -> ConeLp {
    let n = prog.n_vars;
    let nx = n + 1;
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut cones = Vec::new();
    let mut lin: Vec<(&DVector<f64>, f64)> = prog.lin_rows.iter().map(|r| (&r.a, r.b)).collect();
    let mut socs = Vec::new();
    for r in &prog.soc_rows {
        if r.has_cone() {
            socs.push(r);
        } else {
            lin.push((&r.linear, r.rhs - r.offset));
        }
    }
    for (a, b) in &lin {
        let mut row = a.as_slice().to_vec();
        row.push(0.0);
        rows.push((row, *b));
    }
    if !lin.is_empty() {
        cones.push(Cone::Nonneg(lin.len()));
    }
    for r in socs {
        // ‖A [1; u]‖ = ‖R [1; u]‖ for A = QR
        let mut a = DMatrix::zeros(r.cone_matrix.nrows(), n + 1);
        a.column_mut(0).copy_from(&r.cone_offset);
        a.columns_mut(1, n).copy_from(&r.cone_matrix);
        let a = if a.nrows() > a.ncols() { a.qr().r() } else { a };
        let mut head = r.linear.as_slice().to_vec();
        head.push(0.0);
        rows.push((head, r.rhs - r.offset));
        for i in 0..a.nrows() {
            let mut row: Vec<f64> = (0..n).map(|c| -r.scale * a[(i, c + 1)]).collect();
            row.push(0.0);
            rows.push((row, r.scale * a[(i, 0)]));
        }
        cones.push(Cone::Soc(1 + a.nrows()));
    }
    // ‖[F u; t − ½]‖ ≤ t + ½
    let f = linalg::psd_factor(&prog.h, 1e-14).transpose();
    let mut top = vec![0.0; nx];
    top[n] = -1.0;
    rows.push((top.clone(), 0.5));
    for i in 0..f.nrows() {
        let mut row: Vec<f64> = (0..n).map(|c| -f[(i, c)]).collect();
        row.push(0.0);
        rows.push((row, 0.0));
    }
    rows.push((top, -0.5));
    cones.push(Cone::Soc(f.nrows() + 2));

    let m = rows.len();
    let mut g = DMatrix::zeros(m, nx);
    let mut h = DVector::zeros(m);
    for (i, (row, b)) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            g[(i, j)] = v;
        }
        h[i] = b;
    }
    let mut c = DVector::zeros(nx);
    c.rows_mut(0, n).copy_from(&prog.g);
    c[n] = 1.0;
    ConeLp { c, g, h, cones }
}

enum Scaling {
    Nonneg(Vec<f64>),
    /// `W = β(2vvᵀ − J)` with `vᵀJv = 1`.
    Soc { beta: f64, v: DVector<f64> },
}

/// `x0² − ‖x1‖²` in factored form.
fn lorentz_sq(x: &[f64]) -> f64 {
    let n1 = x[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
    (x[0] - n1) * (x[0] + n1)
}

fn strictly_interior(cones: &[Cone], v: &DVector<f64>) -> bool {
    let mut off = 0;
    for cone in cones {
        let d = cone.dim();
        let blk = &v.as_slice()[off..off + d];
        let ok = match cone {
            Cone::Nonneg(_) => blk.iter().all(|x| *x > 0.0),
            Cone::Soc(_) => blk[0] > 0.0 && lorentz_sq(blk) > 0.0,
        };
        if !ok {
            return false;
        }
        off += d;
    }
    true
}

impl Scaling {
    fn new(cone: Cone, s: &[f64], z: &[f64]) -> Result<Scaling> {
        match cone {
            Cone::Nonneg(_) => Ok(Scaling::Nonneg(s.iter().zip(z).map(|(a, b)| (a / b).sqrt()).collect())),
            Cone::Soc(_) => {
                let (ss, zz) = (lorentz_sq(s), lorentz_sq(z));
                if !(ss > 0.0 && zz > 0.0) {
                    return Err(Error::Numerical("iterate left the cone interior".into()));
                }
                let (sn, zn) = (ss.sqrt(), zz.sqrt());
                let sb: Vec<f64> = s.iter().map(|v| v / sn).collect();
                let zb: Vec<f64> = z.iter().map(|v| v / zn).collect();
                let gamma = ((1.0 + sb.iter().zip(&zb).map(|(a, b)| a * b).sum::<f64>()) / 2.0).sqrt();
                let mut w: Vec<f64> = sb.iter().zip(&zb).map(|(a, b)| (a - b) / (2.0 * gamma)).collect();
                w[0] = (sb[0] + zb[0]) / (2.0 * gamma);
                let norm = (2.0 * (w[0] + 1.0)).sqrt();
                let mut v = DVector::from_vec(w);
                v[0] += 1.0;
                v /= norm;
                Ok(Scaling::Soc { beta: (ss / zz).powf(0.25), v })
            }
        }
    }

    fn apply(&self, x: &mut [f64], inverse: bool) {
        match self {
            Scaling::Nonneg(d) => {
                for (xi, di) in x.iter_mut().zip(d) {
                    if inverse {
                        *xi /= di;
                    } else {
                        *xi *= di;
                    }
                }
            }
            Scaling::Soc { beta, v } => {
                // W x = β(2v(vᵀx) − Jx), W⁻¹ x = (2Jv(vᵀJx) − Jx)/β
                let n = x.len();
                if inverse {
                    let vjx = v[0] * x[0] - (1..n).map(|i| v[i] * x[i]).sum::<f64>();
                    x[0] = (2.0 * v[0] * vjx - x[0]) / beta;
                    for i in 1..n {
                        x[i] = (-2.0 * v[i] * vjx + x[i]) / beta;
                    }
                } else {
                    let vx = (0..n).map(|i| v[i] * x[i]).sum::<f64>();
                    x[0] = beta * (2.0 * v[0] * vx - x[0]);
                    for i in 1..n {
                        x[i] = beta * (2.0 * v[i] * vx + x[i]);
                    }
                }
            }
        }
    }
}

struct Scalings {
    blocks: Vec<(usize, Scaling)>,
}

impl Scalings {
    fn new(cones: &[Cone], s: &DVector<f64>, z: &DVector<f64>) -> Result<Scalings> {
        let mut off = 0;
        let mut blocks = Vec::with_capacity(cones.len());
        for &cone in cones {
            let d = cone.dim();
            blocks.push((off, Scaling::new(cone, &s.as_slice()[off..off + d], &z.as_slice()[off..off + d])?));
            off += d;
        }
        Ok(Scalings { blocks })
    }

    fn apply(&self, cones: &[Cone], x: &DVector<f64>, inverse: bool) -> DVector<f64> {
        let mut y = x.clone();
        for ((off, w), cone) in self.blocks.iter().zip(cones) {
            w.apply(&mut y.as_mut_slice()[*off..*off + cone.dim()], inverse);
        }
        y
    }
}

fn jordan_product(cones: &[Cone], a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len());
    let mut off = 0;
    for cone in cones {
        let d = cone.dim();
        match cone {
            Cone::Nonneg(_) => {
                for i in off..off + d {
                    out[i] = a[i] * b[i];
                }
            }
            Cone::Soc(_) => {
                out[off] = a.rows(off, d).dot(&b.rows(off, d));
                for i in off + 1..off + d {
                    out[i] = a[off] * b[i] + b[off] * a[i];
                }
            }
        }
        off += d;
    }
    out
}

/// Solves `λ ∘ x = r` for `x`.
fn jordan_divide(cones: &[Cone], lambda: &DVector<f64>, r: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(r.len());
    let mut off = 0;
    for cone in cones {
        let d = cone.dim();
        match cone {
            Cone::Nonneg(_) => {
                for i in off..off + d {
                    out[i] = r[i] / lambda[i];
                }
            }
            Cone::Soc(_) => {
                let l0 = lambda[off];
                let l1 = lambda.rows(off + 1, d - 1);
                let r1 = r.rows(off + 1, d - 1);
                let det = l0 * l0 - l1.norm_squared();
                let x0 = (l0 * r[off] - l1.dot(&r1)) / det;
                out[off] = x0;
                for i in 1..d {
                    out[off + i] = (r[off + i] - x0 * lambda[off + i]) / l0;
                }
            }
        }
        off += d;
    }
    out
}

fn identity_element(cones: &[Cone], m: usize) -> DVector<f64> {
    let mut e = DVector::zeros(m);
    let mut off = 0;
    for cone in cones {
        match cone {
            Cone::Nonneg(d) => e.rows_mut(off, *d).fill(1.0),
            Cone::Soc(_) => e[off] = 1.0,
        }
        off += cone.dim();
    }
    e
}

/// Largest `α ≥ 0` with `x + α d` in the cone (capped at `cap`).
fn max_step(cones: &[Cone], x: &DVector<f64>, d: &DVector<f64>, cap: f64) -> f64 {
    let mut alpha = cap;
    let mut off = 0;
    for cone in cones {
        let n = cone.dim();
        match cone {
            Cone::Nonneg(_) => {
                for i in off..off + n {
                    if d[i] < 0.0 {
                        alpha = alpha.min(-x[i] / d[i]);
                    }
                }
            }
            Cone::Soc(_) => {
                let (x0, d0) = (x[off], d[off]);
                let x1 = x.rows(off + 1, n - 1);
                let d1 = d.rows(off + 1, n - 1);
                let a = d0 * d0 - d1.norm_squared();
                let b = 2.0 * (x0 * d0 - x1.dot(&d1));
                let c = (x0 * x0 - x1.norm_squared()).max(0.0);
                if d0 < 0.0 {
                    alpha = alpha.min(-x0 / d0);
                }
                // smallest positive root of aα² + bα + c
                let disc = b * b - 4.0 * a * c;
                if a.abs() < 1e-300 {
                    if b < 0.0 {
                        alpha = alpha.min(-c / b);
                    }
                } else if disc >= 0.0 {
                    let sq = disc.sqrt();
                    let q = -0.5 * (b + b.signum() * sq);
                    for root in [q / a, if q != 0.0 { c / q } else { f64::INFINITY }] {
                        if root > 0.0 {
                            alpha = alpha.min(root);
                        }
                    }
                }
            }
        }
        off += n;
    }
    alpha
}

/// Reduced KKT solve in scaled form: with `Ĝ = W⁻¹G` the step satisfies
/// `ĜᵀĜ dx = r1 + Ĝᵀ W⁻¹ r2`, solved through a QR factor of `Ĝ` so the
/// product `ĜᵀĜ` is never formed.
struct NormalSystem<'a> {
    lp: &'a ConeLp,
    w: &'a Scalings,
    ghat: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl<'a> NormalSystem<'a> {
    fn new(lp: &'a ConeLp, w: &'a Scalings) -> Result<Self> {
        let n = lp.g.ncols();
        let mut ghat = lp.g.clone();
        for j in 0..n {
            let col = w.apply(&lp.cones, &ghat.column(j).into_owned(), true);
            ghat.set_column(j, &col);
        }
        if n == 0 {
            return Ok(NormalSystem { lp, w, ghat, r: DMatrix::zeros(0, 0) });
        }
        let scale = ghat.column_iter().map(|c| c.norm()).fold(0.0, f64::max).max(1e-300);
        let mut reg: f64 = 0.0;
        for _ in 0..8 {
            // Regularisation enters as extra rows `sqrt(reg)·I`.
            let mut stacked = DMatrix::zeros(ghat.nrows() + n, n);
            stacked.rows_mut(0, ghat.nrows()).copy_from(&ghat);
            for i in 0..n {
                stacked[(ghat.nrows() + i, i)] = reg.sqrt();
            }
            let r = stacked.qr().r();
            let r = r.rows(0, n).into_owned();
            let dmin = r.diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
            if dmin.is_finite() && dmin > 1e-14 * scale {
                return Ok(NormalSystem { lp, w, ghat, r });
            }
            reg = if reg == 0.0 { 1e-24 * scale * scale } else { reg * 1e4 };
        }
        Err(Error::Numerical("normal equations are not positive definite".into()))
    }

    fn w2(&self, z: &DVector<f64>) -> DVector<f64> {
        let c = &self.lp.cones;
        self.w.apply(c, &self.w.apply(c, z, false), false)
    }

    fn solve_once(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let c = &self.lp.cones;
        let r2h = self.w.apply(c, r2, true);
        let mut dx = r1 + self.ghat.transpose() * &r2h;
        if dx.len() > 0 {
            let rt = self.r.transpose();
            let ok = rt.solve_lower_triangular_mut(&mut dx) && self.r.solve_upper_triangular_mut(&mut dx);
            debug_assert!(ok);
        }
        let dzh = &self.ghat * &dx - r2h;
        let dz = self.w.apply(c, &dzh, true);
        (dx, dz)
    }

    /// `[0 Gᵀ; G −W²] [dx; dz] = [r1; r2]` with iterative refinement.
    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let g = &self.lp.g;
        let (mut dx, mut dz) = self.solve_once(r1, r2);
        for _ in 0..3 {
            let e1 = r1 - g.transpose() * &dz;
            let e2 = r2 - (g * &dx - self.w2(&dz));
            let (cx, cz) = self.solve_once(&e1, &e2);
            dx += cx;
            dz += cz;
        }
        (dx, dz)
    }
}

struct Iterate {
    x: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Direction {
    x: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    tau: f64,
    kappa: f64,
}

fn cone_lp_solve(lp: &ConeLp, settings: &SolverSettings) -> Result<(Status, Iterate, KktResiduals, Option<f64>, usize)> {
    let (m, n) = lp.g.shape();
    let cones = &lp.cones;
    let nu = cones.iter().map(|c| c.degree()).sum::<usize>() as f64;
    let e = identity_element(cones, m);
    let mut it = Iterate { x: DVector::zeros(n), s: e.clone(), z: e.clone(), tau: 1.0, kappa: 1.0 };
    let hnorm = lp.h.norm().max(1.0);
    let cnorm = lp.c.norm().max(1.0);
    let tol = settings.tol;
    let mut best: Option<(f64, Iterate, KktResiduals)> = None;

    for iter in 0..=settings.max_iter {
        let rx = lp.g.transpose() * &it.z + &lp.c * it.tau;
        let rz = &lp.g * &it.x + &it.s - &lp.h * it.tau;
        let ctx = lp.c.dot(&it.x);
        let htz = lp.h.dot(&it.z);
        let rt = it.kappa + ctx + htz;

        let pcost = ctx / it.tau;
        let dcost = -htz / it.tau;
        let res = KktResiduals {
            primal: rz.norm() / it.tau / hnorm,
            dual: rx.norm() / it.tau / cnorm,
            gap: (it.s.dot(&it.z) / (it.tau * it.tau)).abs() / pcost.abs().max(1.0),
        };
        if res.primal <= tol && res.dual <= tol && res.gap <= tol && (pcost - dcost).abs() <= 10.0 * tol * pcost.abs().max(1.0) {
            return Ok((Status::Optimal, it, res, None, iter));
        }
        if htz < 0.0 {
            let cert = (lp.g.transpose() * &it.z).norm() / -htz;
            if cert <= tol {
                return Ok((Status::PrimalInfeasible, it, res, Some(cert), iter));
            }
        }
        if ctx < 0.0 {
            let cert = (&lp.g * &it.x + &it.s).norm() / -ctx;
            if cert <= tol {
                return Ok((Status::DualInfeasible, it, res, Some(cert), iter));
            }
        }
        if best.as_ref().map_or(true, |(b, _, _)| res.max() < *b) && it.tau > 0.0 {
            let copy = Iterate { x: it.x.clone(), s: it.s.clone(), z: it.z.clone(), tau: it.tau, kappa: it.kappa };
            best = Some((res.max(), copy, res));
        }
        if iter == settings.max_iter {
            break;
        }

        let w = match Scalings::new(cones, &it.s, &it.z) {
            Ok(w) => w,
            Err(e) => {
                log::debug!("iteration {iter}: {e}");
                break;
            }
        };
        let lambda = w.apply(cones, &it.z, false);
        let sys = match NormalSystem::new(lp, &w) {
            Ok(sys) => sys,
            Err(e) => {
                log::debug!("iteration {iter}: {e}");
                break;
            }
        };
        let (x2, z2) = sys.solve(&(-&lp.c), &lp.h);
        let mu = (it.s.dot(&it.z) + it.tau * it.kappa) / (nu + 1.0);

        let direction = |ds_target: &DVector<f64>, dk_target: f64, keep: f64| -> Direction {
            let xi = jordan_divide(cones, &lambda, ds_target);
            let w_xi = w.apply(cones, &xi, false);
            let r1 = -&rx * keep;
            let r2 = -&rz * keep - &w_xi;
            let (x1, z1) = sys.solve(&r1, &r2);
            let num = -keep * rt - dk_target / it.tau - lp.c.dot(&x1) - lp.h.dot(&z1);
            let den = lp.c.dot(&x2) + lp.h.dot(&z2) - it.kappa / it.tau;
            let dtau = num / den;
            let dx = x1 + &x2 * dtau;
            let dz = z1 + &z2 * dtau;
            // taken from the linearised primal equation rather than
            // `Wξ − W²dz`, which cancels badly on inactive cones
            let ds = -&rz * keep - &lp.g * &dx + &lp.h * dtau;
            let dkappa = (dk_target - it.kappa * dtau) / it.tau;
            Direction { x: dx, s: ds, z: dz, tau: dtau, kappa: dkappa }
        };
        let step_to_boundary = |d: &Direction| -> f64 {
            let mut a = max_step(cones, &it.s, &d.s, f64::INFINITY);
            a = max_step(cones, &it.z, &d.z, a);
            if d.tau < 0.0 {
                a = a.min(-it.tau / d.tau);
            }
            if d.kappa < 0.0 {
                a = a.min(-it.kappa / d.kappa);
            }
            a
        };

        // predictor
        let lam2 = jordan_product(cones, &lambda, &lambda);
        let aff = direction(&(-&lam2), -it.tau * it.kappa, 1.0);
        let alpha_aff = step_to_boundary(&aff).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        // corrector
        let ws = w.apply(cones, &aff.s, true);
        let wz = w.apply(cones, &aff.z, false);
        let ds_target = -lam2 - jordan_product(cones, &ws, &wz) + &e * (sigma * mu);
        let dk_target = -it.tau * it.kappa - aff.tau * aff.kappa + sigma * mu;
        let d = direction(&ds_target, dk_target, 1.0 - sigma);
        let mut alpha = (0.99 * step_to_boundary(&d)).min(1.0);
        // guard against roundoff in the boundary computation
        while alpha > 1e-14
            && !(strictly_interior(cones, &(&it.s + &d.s * alpha)) && strictly_interior(cones, &(&it.z + &d.z * alpha)))
        {
            alpha *= 0.8;
        }
        if !(alpha > 1e-14) || !d.x.iter().all(|v| v.is_finite()) {
            log::debug!("solver stalled at iteration {iter}");
            break;
        }
        it.x += &d.x * alpha;
        it.s += &d.s * alpha;
        it.z += &d.z * alpha;
        it.tau += alpha * d.tau;
        it.kappa += alpha * d.kappa;
    }
    let (_, it, res) = best.ok_or_else(|| Error::Numerical("no valid iterate".into()))?;
    Ok((Status::MaxIterations, it, res, None, settings.max_iter))
}

pub fn solve(prog: &ConicProgram, settings: &SolverSettings) -> Result<Solution> {
    if !(settings.tol > 0.0) || settings.max_iter == 0 {
        return Err(Error::InvalidArgument("solver tolerance and iteration limit must be positive".into()));
    }
    prog.validate()?;
    let start = Instant::now();
    let lp = to_cone_lp(prog);
    let (status, it, res, cert, iterations) = cone_lp_solve(&lp, settings)?;
    let n = prog.n_vars;
    let scale = if status == Status::Optimal || status == Status::MaxIterations { it.tau } else { 1.0 };
    let u_star = it.x.rows(0, n) / scale;
    let objective = prog.objective(&u_star);
    let dual_objective = -lp.h.dot(&it.z) / scale + prog.c0;
    Ok(Solution {
        status,
        u_star,
        objective,
        dual_objective,
        kkt_residuals: res,
        certificate_residual: cert,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
