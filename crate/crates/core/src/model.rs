//! Linear-Gaussian state-space models, simulation, the mass-spring-damper
//! benchmark and exact multi-step prediction matrices.
//!
//! The plant is
//!
//! ```text
//! x_{t+1} = A x_t + B u_t + E w_t,   w_t ~ N(0, I)
//! y_t     = C x_t + v_t,             v_t ~ N(0, R)
//! ```
//!
//! with inputs `u_0 … u_{T-1}` and outputs `y_1 … y_T`.

use std::io::{Read, Write};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{self, symmetrize};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel {
    #[serde(with = "io::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub b: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub c: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub e: DMatrix<f64>,
    #[serde(with = "io::matrix")]
    pub r: DMatrix<f64>,
}

impl StateSpaceModel {
    /// Validates dimensions and the measurement covariance. A pair `(A, C)`
    /// that is not observable only produces a warning.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        e: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        let model = StateSpaceModel { a, b, c, e, r };
        model.validate()?;
        if linalg::rank(&linalg::observability_matrix(&model.a, &model.c), 1e-10) < model.n_x() {
            warn!("state-space pair (A, C) is not observable");
        }
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n {
            return Err(Error::Dimension(format!("A is {}x{}", n, self.a.ncols())));
        }
        if self.b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", self.b.nrows())));
        }
        if self.c.ncols() != n {
            return Err(Error::Dimension(format!("C has {} cols, expected {n}", self.c.ncols())));
        }
        if self.e.nrows() != n {
            return Err(Error::Dimension(format!("E has {} rows, expected {n}", self.e.nrows())));
        }
        let ny = self.c.nrows();
        if self.r.nrows() != ny || self.r.ncols() != ny {
            return Err(Error::Dimension(format!(
                "R is {}x{}, expected {ny}x{ny}",
                self.r.nrows(),
                self.r.ncols()
            )));
        }
        if (&self.r - self.r.transpose()).amax() > 1e-12 * self.r.amax().max(1.0) {
            return Err(Error::InvalidArgument("R is not symmetric".into()));
        }
        if !linalg::is_psd(&self.r, 1e-12) {
            return Err(Error::NotPositiveDefinite("measurement covariance R".into()));
        }
        for (name, m) in [("A", &self.a), ("B", &self.b), ("C", &self.c), ("E", &self.e), ("R", &self.r)] {
            if !linalg::all_finite(m) {
                return Err(Error::NonFinite(format!("model matrix {name}")));
            }
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }
    pub fn n_w(&self) -> usize {
        self.e.ncols()
    }

    /// `E Eᵀ`.
    pub fn process_cov(&self) -> DMatrix<f64> {
        let mut q = &self.e * self.e.transpose();
        symmetrize(&mut q);
        q
    }

    /// `C A^i B`.
    pub fn markov_parameter(&self, i: usize) -> DMatrix<f64> {
        &self.c * linalg::mat_pow(&self.a, i) * &self.b
    }

    /// Change of coordinates `z = T x`.
    pub fn transformed(&self, t: &DMatrix<f64>) -> Result<StateSpaceModel> {
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient("similarity transform is singular".into()))?;
        Ok(StateSpaceModel {
            a: t * &self.a * &t_inv,
            b: t * &self.b,
            c: &self.c * &t_inv,
            e: t * &self.e,
            r: self.r.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: StateSpaceModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

/// Input-output record: `inputs[t] = u_t` for `t = 0..T-1` and
/// `outputs[t] = y_{t+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(with = "io::vectors")]
    pub inputs: Vec<DVector<f64>>,
    #[serde(with = "io::vectors")]
    pub outputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(inputs: Vec<DVector<f64>>, outputs: Vec<DVector<f64>>) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} outputs",
                inputs.len(),
                outputs.len()
            )));
        }
        if let (Some(u0), Some(y0)) = (inputs.first(), outputs.first()) {
            if inputs.iter().any(|u| u.len() != u0.len()) || outputs.iter().any(|y| y.len() != y0.len()) {
                return Err(Error::Dimension("ragged trajectory".into()));
            }
        }
        Ok(Trajectory { inputs, outputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    pub fn n_y(&self) -> usize {
        self.outputs.first().map_or(0, |y| y.len())
    }

    /// `y_t` for `t = 1..=T`.
    pub fn y(&self, t: usize) -> &DVector<f64> {
        &self.outputs[t - 1]
    }

    /// `u_t` for `t = 0..T`.
    pub fn u(&self, t: usize) -> &DVector<f64> {
        &self.inputs[t]
    }

    pub fn is_finite(&self) -> bool {
        self.outputs.iter().chain(self.inputs.iter()).all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// CSV with header `t,u_0,…,y_0,…`; row `t` holds `u_t` and `y_{t+1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.n_u()).map(|i| format!("u_{i}")));
        header.extend((0..self.n_y()).map(|i| format!("y_{i}")));
        wtr.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![t.to_string()];
            rec.extend(self.inputs[t].iter().map(|v| format!("{v:e}")));
            rec.extend(self.outputs[t].iter().map(|v| format!("{v:e}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let n_u = headers.iter().filter(|h| h.starts_with("u_")).count();
        let n_y = headers.iter().filter(|h| h.starts_with("y_")).count();
        let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("bad CSV value: {e}")))?;
            if vals.len() != n_u + n_y {
                return Err(Error::Dimension("CSV row width".into()));
            }
            inputs.push(DVector::from_column_slice(&vals[..n_u]));
            outputs.push(DVector::from_column_slice(&vals[n_u..]));
        }
        Trajectory::new(inputs, outputs)
    }
}

/// Exact multi-step matrices for horizon `k`:
///
/// ```text
/// y_{t+k} = G0 x_{t|t} + Gu u_{[t, t+k-1]} + Ge e_{[t, t+k]}
/// ```
///
/// and, from the true state, `y_k = G0 x_0 + Gu u + Gw w + v_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepMatrices {
    pub k: usize,
    pub g0: DMatrix<f64>,
    pub gu: DMatrix<f64>,
    pub gw: DMatrix<f64>,
    /// `k + 1` blocks over `e_t … e_{t+k}`: `[0, C A^{k-1} L, …, C A L, I]`.
    pub ge: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    #[serde(with = "io::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "io::matrix")]
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, mut cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension("belief covariance".into()));
        }
        symmetrize(&mut cov);
        if linalg::min_eigenvalue(&cov) < -1e-10 {
            return Err(Error::NotPositiveDefinite("belief covariance is not PSD".into()));
        }
        Ok(GaussianBelief { mean, cov })
    }

    pub fn point(mean: DVector<f64>) -> Self {
        let n = mean.len();
        GaussianBelief {
            mean,
            cov: DMatrix::zeros(n, n),
        }
    }
}

/// Physical parameters of a chain of identical masses attached to a wall,
/// actuated at the free end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsdParams {
    pub n_masses: usize,
    pub mass: f64,
    pub spring: f64,
    pub damping: f64,
    pub dt: f64,
    /// Diagonal of `E Eᵀ` (positions first, then velocities).
    pub dist_cov_diag: Vec<f64>,
    pub meas_cov_scale: f64,
}

impl Default for MsdParams {
    fn default() -> Self {
        MsdParams {
            n_masses: 3,
            mass: 1.0,
            spring: 10.0,
            damping: 2.0,
            dt: 0.5,
            dist_cov_diag: vec![0.0, 0.0, 0.0, 1e-3, 1e-3, 1e-3],
            meas_cov_scale: 1e-3,
        }
    }
}

/// Continuous-time chain dynamics `(A_c, B_c)` with state `[positions; velocities]`.
pub fn msd_continuous(p: &MsdParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = p.n_masses;
    // Tridiagonal coupling; the last mass has a single neighbour.
    let mut lap = DMatrix::zeros(n, n);
    for i in 0..n {
        lap[(i, i)] = if i + 1 < n { 2.0 } else { 1.0 };
        if i + 1 < n {
            lap[(i, i + 1)] = -1.0;
            lap[(i + 1, i)] = -1.0;
        }
    }
    let mut ac = DMatrix::zeros(2 * n, 2 * n);
    ac.view_mut((0, n), (n, n)).fill_with_identity();
    ac.view_mut((n, 0), (n, n)).copy_from(&(&lap * (-p.spring / p.mass)));
    ac.view_mut((n, n), (n, n)).copy_from(&(&lap * (-p.damping / p.mass)));
    let mut bc = DMatrix::zeros(2 * n, 1);
    bc[(2 * n - 1, 0)] = 1.0 / p.mass;
    (ac, bc)
}

/// Zero-order-hold discretization through the exponential of the augmented
/// matrix `[[A_c, B_c], [0, 0]] · dt`.
pub fn discretize(ac: &DMatrix<f64>, bc: &DMatrix<f64>, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = ac.nrows();
    let m = bc.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(ac);
    aug.view_mut((0, n), (n, m)).copy_from(bc);
    let phi = (aug * dt).exp();
    if !linalg::all_finite(&phi) {
        return Err(Error::NonFinite("matrix exponential".into()));
    }
    Ok((
        phi.view((0, 0), (n, n)).into_owned(),
        phi.view((0, n), (n, m)).into_owned(),
    ))
}

pub fn build_msd_chain(p: &MsdParams) -> Result<StateSpaceModel> {
    let n = p.n_masses;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one mass".into()));
    }
    if !(p.mass > 0.0 && p.spring > 0.0 && p.damping > 0.0 && p.dt > 0.0 && p.meas_cov_scale >= 0.0) {
        return Err(Error::InvalidArgument("physical parameters must be positive".into()));
    }
    if p.dist_cov_diag.len() != 2 * n || p.dist_cov_diag.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "disturbance covariance diagonal needs {} non-negative entries",
            2 * n
        )));
    }
    let (ac, bc) = msd_continuous(p);
    let (a, b) = discretize(&ac, &bc, p.dt)?;
    let mut c = DMatrix::zeros(n, 2 * n);
    c.view_mut((0, 0), (n, n)).fill_with_identity();
    let e = DMatrix::from_diagonal(&DVector::from_iterator(
        2 * n,
        p.dist_cov_diag.iter().map(|v| v.sqrt()),
    ));
    let r = DMatrix::identity(n, n) * p.meas_cov_scale;
    StateSpaceModel::new(a, b, c, e, r)
}

/// Coordinates in which `C = [I, 0]`: the rows of `C` become the leading
/// state coordinates, completed by an orthonormal basis of the complement of
/// the row space of `C`. Returns the transformed model and `T` (`z = T x`).
pub fn to_output_normal_form(model: &StateSpaceModel) -> Result<(StateSpaceModel, DMatrix<f64>)> {
    let n = model.n_x();
    let ny = model.n_y();
    if linalg::rank(&model.c, 1e-10) < ny {
        return Err(Error::RankDeficient("C must have full row rank".into()));
    }
    let proj = DMatrix::identity(n, n) - linalg::pseudo_inverse(&model.c) * &model.c;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for i in 0..n {
        if basis.len() == n - ny {
            break;
        }
        let mut v = proj.column(i).into_owned();
        for b in &basis {
            let d = b.dot(&v);
            v -= b * d;
        }
        let nv = v.norm();
        if nv > 1e-8 {
            basis.push(v / nv);
        }
    }
    let mut t = DMatrix::zeros(n, n);
    t.view_mut((0, 0), (ny, n)).copy_from(&model.c);
    for (i, b) in basis.iter().enumerate() {
        t.row_mut(ny + i).copy_from(&b.transpose());
    }
    let out = model.transformed(&t)?;
    Ok((out, t))
}

/// Observability canonical coordinates: the state is built from the rows of
/// `[C; CA; CA²; …]`, taken block by block and skipping rows that are
/// linearly dependent on earlier ones. The output map becomes `[I, 0]` and,
/// when `n_x = 2 n_y`, the state is `[C x; C A x]`.
pub fn to_observability_form(model: &StateSpaceModel) -> Result<(StateSpaceModel, DMatrix<f64>)> {
    let n = model.n_x();
    let ny = model.n_y();
    if linalg::rank(&model.c, 1e-10) < ny {
        return Err(Error::RankDeficient("C must have full row rank".into()));
    }
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    let mut block = model.c.clone();
    for _ in 0..n {
        for i in 0..ny {
            if rows.len() == n {
                break;
            }
            let r = block.row(i).transpose();
            let mut v = r.clone();
            for o in &ortho {
                let d = o.dot(&v);
                v -= o * d;
            }
            if v.norm() > 1e-8 * r.norm().max(1e-300) {
                let nv = v.norm();
                ortho.push(v / nv);
                rows.push(r);
            }
        }
        block = &block * &model.a;
    }
    if rows.len() < n {
        return Err(Error::RankDeficient("pair (A, C) is not observable".into()));
    }
    let mut t = DMatrix::zeros(n, n);
    for (i, r) in rows.iter().enumerate() {
        t.row_mut(i).copy_from(&r.transpose());
    }
    let out = model.transformed(&t)?;
    Ok((out, t))
}

/// Iterates the plant from `x0` with process and measurement noise keyed by
/// `(seed, t)`.
pub fn simulate(model: &StateSpaceModel, x0: &DVector<f64>, inputs: &[DVector<f64>], seed: u64) -> Trajectory {
    simulate_with_states(model, x0, inputs, seed).0
}

/// Like [`simulate`], also returning the states `x_0 … x_T`.
pub fn simulate_with_states(
    model: &StateSpaceModel,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    seed: u64,
) -> (Trajectory, Vec<DVector<f64>>) {
    let r_sqrt = linalg::sym_sqrt(&model.r);
    let noisy_w = model.e.amax() > 0.0;
    let noisy_v = r_sqrt.amax() > 0.0;
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut x = x0.clone();
    states.push(x.clone());
    for (t, u) in inputs.iter().enumerate() {
        let mut next = &model.a * &x + &model.b * u;
        if noisy_w {
            next += &model.e * rng::normal_vector(seed, streams::PROCESS_NOISE, t as u64, model.n_w());
        }
        let mut y = &model.c * &next;
        if noisy_v {
            y += &r_sqrt * rng::normal_vector(seed, streams::MEASUREMENT_NOISE, t as u64, model.n_y());
        }
        x = next;
        states.push(x.clone());
        outputs.push(y);
    }
    let traj = Trajectory {
        inputs: inputs.to_vec(),
        outputs,
    };
    if !traj.is_finite() {
        warn!("simulation produced non-finite values");
    }
    (traj, states)
}

/// Multi-step matrices of `model` with filter gain `gain` (`n_x × n_y`).
pub fn multi_step_from_model(model: &StateSpaceModel, gain: &DMatrix<f64>, k: usize) -> Result<MultiStepMatrices> {
    if k < 1 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let (nx, nu, ny, nw) = (model.n_x(), model.n_u(), model.n_y(), model.n_w());
    if gain.nrows() != nx || gain.ncols() != ny {
        return Err(Error::Dimension("filter gain must be n_x x n_y".into()));
    }
    // powers[i] = C A^i
    let mut powers = Vec::with_capacity(k + 1);
    let mut ca = model.c.clone();
    for _ in 0..=k {
        powers.push(ca.clone());
        ca = &ca * &model.a;
    }
    let g0 = powers[k].clone();
    let mut gu = DMatrix::zeros(ny, k * nu);
    let mut gw = DMatrix::zeros(ny, k * nw);
    for i in 0..k {
        let p = &powers[k - 1 - i];
        gu.view_mut((0, i * nu), (ny, nu)).copy_from(&(p * &model.b));
        gw.view_mut((0, i * nw), (ny, nw)).copy_from(&(p * &model.e));
    }
    let mut ge = DMatrix::zeros(ny, (k + 1) * ny);
    for i in 1..k {
        ge.view_mut((0, i * ny), (ny, ny)).copy_from(&(&powers[k - i] * gain));
    }
    ge.view_mut((0, k * ny), (ny, ny)).fill_with_identity();
    Ok(MultiStepMatrices { k, g0, gu, gw, ge })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Complex;

    fn benchmark_chain() -> StateSpaceModel {
        build_msd_chain(&MsdParams::default()).unwrap()
    }

    #[test]
    fn benchmark_chain_dimensions() {
        let m = benchmark_chain();
        assert_eq!((m.n_x(), m.n_u(), m.n_y()), (6, 1, 3));
        assert_eq!(m.r, DMatrix::identity(3, 3) * 1e-3);
        let q = m.process_cov();
        for i in 0..6 {
            let expect = if i < 3 { 0.0 } else { 1e-3 };
            assert!((q[(i, i)] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn small_step_matches_first_order_expansion() {
        let p = MsdParams {
            dt: 1e-4,
            ..MsdParams::default()
        };
        let m = build_msd_chain(&p).unwrap();
        let (ac, _) = msd_continuous(&p);
        let first = DMatrix::identity(6, 6) + &ac * p.dt;
        let err = (&m.a - first).norm();
        // second-order term is ‖A_c²‖ dt² / 2
        let bound = (&ac * &ac).norm() * p.dt * p.dt;
        assert!(err <= bound, "err {err} bound {bound}");
    }

    #[test]
    fn discrete_eigenvalues_are_exponentials_of_continuous_ones() {
        let p = MsdParams::default();
        let m = build_msd_chain(&p).unwrap();
        let (ac, _) = msd_continuous(&p);
        let cont = ac.complex_eigenvalues();
        let disc = m.a.complex_eigenvalues();
        for l in cont.iter() {
            let target: Complex<f64> = (l * p.dt).exp();
            let best = disc.iter().map(|d| (d - target).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-9, "no match for {target}: {best}");
        }
    }

    #[test]
    fn normal_form_identity_case() {
        let m = benchmark_chain();
        let (out, t) = to_output_normal_form(&m).unwrap();
        assert!((t - DMatrix::<f64>::identity(6, 6)).amax() < 1e-12);
        assert!((out.a - m.a).amax() < 1e-12);
    }

    #[test]
    fn normal_form_preserves_markov_parameters() {
        let m = benchmark_chain();
        // scramble coordinates first
        let s = DMatrix::from_fn(6, 6, |i, j| if i == j { 2.0 } else { 0.1 * ((i * 7 + j * 3) % 5) as f64 });
        let scrambled = m.transformed(&s).unwrap();
        for form in [to_output_normal_form, to_observability_form] {
            let (out, _) = form(&scrambled).unwrap();
            let mut expect_c = DMatrix::zeros(3, 6);
            expect_c.view_mut((0, 0), (3, 3)).fill_with_identity();
            assert!((&out.c - &expect_c).amax() < 1e-10);
            for i in 0..=10 {
                let d = (out.markov_parameter(i) - m.markov_parameter(i)).amax();
                assert!(d < 1e-10, "markov {i}: {d}");
            }
        }
    }

    #[test]
    fn observability_form_of_chain_has_shift_structure() {
        let (m, t) = to_observability_form(&benchmark_chain()).unwrap();
        let mut shift = DMatrix::zeros(3, 6);
        shift.view_mut((0, 3), (3, 3)).fill_with_identity();
        assert!((m.a.rows(0, 3) - shift).amax() < 1e-10);
        // top block of E vanishes since the disturbance only enters velocities
        assert!(m.e.rows(0, 3).amax() < 1e-12);
        assert!(t.rows(0, 3).into_owned() == benchmark_chain().c);
    }

    #[test]
    fn rank_deficient_output_map_is_rejected() {
        let mut m = benchmark_chain();
        m.c = DMatrix::from_row_slice(2, 6, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        m.r = DMatrix::identity(2, 2);
        assert!(matches!(to_output_normal_form(&m), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn zero_noise_zero_input_gives_zero_output() {
        let mut m = benchmark_chain();
        m.e.fill(0.0);
        m.r.fill(0.0);
        let u = vec![DVector::zeros(1); 50];
        let traj = simulate(&m, &DVector::zeros(6), &u, 3);
        assert!(traj.outputs.iter().all(|y| y.amax() == 0.0));
    }

    #[test]
    fn simulation_is_deterministic() {
        let m = benchmark_chain();
        let u: Vec<_> = (0..40).map(|t| DVector::from_element(1, (t as f64).sin())).collect();
        let a = simulate(&m, &DVector::zeros(6), &u, 11);
        let b = simulate(&m, &DVector::zeros(6), &u, 11);
        let c = simulate(&m, &DVector::zeros(6), &u, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stationary_output_covariance() {
        // A = 0, C = I: y_{t+1} = E w_t + v_{t+1}
        let e = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.8]);
        let r = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
        let m = StateSpaceModel::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2), e.clone(), r.clone())
            .unwrap();
        let n = 100_000;
        let u = vec![DVector::zeros(1); n];
        let traj = simulate(&m, &DVector::zeros(2), &u, 5);
        let mut cov = DMatrix::zeros(2, 2);
        for y in &traj.outputs {
            cov += y * y.transpose();
        }
        cov /= n as f64;
        let expect = &e * e.transpose() + r;
        let rel = (&cov - &expect).norm() / expect.norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn single_step_matrices() {
        let m = benchmark_chain();
        let l = DMatrix::from_fn(6, 3, |i, j| 0.1 * (i as f64) - 0.05 * j as f64);
        let ms = multi_step_from_model(&m, &l, 1).unwrap();
        assert!((&ms.g0 - &m.c * &m.a).amax() < 1e-15);
        assert!((&ms.gu - &m.c * &m.b).amax() < 1e-15);
        assert!((&ms.gw - &m.c * &m.e).amax() < 1e-15);
        assert!(ms.ge.columns(0, 3).amax() == 0.0);
        assert_eq!(ms.ge.columns(3, 3).into_owned(), DMatrix::identity(3, 3));
        assert!(matches!(multi_step_from_model(&m, &l, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn nilpotent_case() {
        let mut m = benchmark_chain();
        m.a.fill(0.0);
        let l = DMatrix::zeros(6, 3);
        let ms = multi_step_from_model(&m, &l, 3).unwrap();
        assert_eq!(ms.g0.amax(), 0.0);
        assert_eq!(ms.gu.columns(0, 2).amax(), 0.0);
        assert!((ms.gu.column(2) - (&m.c * &m.b).column(0)).amax() < 1e-15);
    }

    #[test]
    fn input_blocks_follow_recursion() {
        let m = benchmark_chain();
        let l = DMatrix::zeros(6, 3);
        for k in 1..8 {
            let a = multi_step_from_model(&m, &l, k).unwrap();
            let b = multi_step_from_model(&m, &l, k + 1).unwrap();
            assert!((b.gu.column(0) - m.markov_parameter(k).column(0)).amax() < 1e-14);
            assert!((b.gu.columns(1, k) - &a.gu).amax() < 1e-14);
        }
    }

    #[test]
    fn stacked_predictions_match_iteration() {
        let mut m = benchmark_chain();
        m.e.fill(0.0);
        m.r.fill(0.0);
        let x0 = DVector::from_fn(6, |i, _| 0.1 * i as f64 - 0.2);
        let u: Vec<_> = (0..15).map(|t| DVector::from_element(1, (0.7 * t as f64).cos())).collect();
        let traj = simulate(&m, &x0, &u, 0);
        let l = DMatrix::zeros(6, 3);
        for k in 1..=15 {
            let ms = multi_step_from_model(&m, &l, k).unwrap();
            let uk = DVector::from_iterator(k, u[..k].iter().map(|v| v[0]));
            let y = &ms.g0 * &x0 + &ms.gu * uk;
            assert!((y - traj.y(k)).amax() < 1e-10);
        }
    }

    #[test]
    fn innovation_blocks_match_filter_recursion() {
        let m = benchmark_chain();
        let l = DMatrix::from_fn(6, 3, |i, j| 0.03 * (i as f64) - 0.02 * j as f64 + 0.01);
        let x0 = DVector::from_fn(6, |i, _| 0.2 - 0.05 * i as f64);
        let k = 6;
        let u: Vec<_> = (0..k).map(|t| DVector::from_element(1, (1.3 * t as f64).sin())).collect();
        let e: Vec<_> = (0..=k).map(|t| DVector::from_fn(3, |i, _| ((t * 3 + i) as f64 * 0.9).cos())).collect();
        // x_{t+1|t+1} = A x + B u_t + L e_{t+1}, y_{t+1} = C(A x + B u_t) + e_{t+1}
        let mut x = x0.clone();
        let mut y = DVector::zeros(3);
        for t in 0..k {
            let pred = &m.a * &x + &m.b * &u[t];
            y = &m.c * &pred + &e[t + 1];
            x = pred + &l * &e[t + 1];
        }
        let ms = multi_step_from_model(&m, &l, k).unwrap();
        let uk = DVector::from_iterator(k, u.iter().map(|v| v[0]));
        let mut es = DVector::zeros(3 * (k + 1));
        for (t, et) in e.iter().enumerate() {
            es.rows_mut(3 * t, 3).copy_from(et);
        }
        let direct = &ms.g0 * &x0 + &ms.gu * uk + &ms.ge * es;
        assert!((direct - y).amax() < 1e-12);
    }

    #[test]
    fn multi_step_invariant_under_similarity() {
        let m = benchmark_chain();
        let l = DMatrix::from_fn(6, 3, |i, j| 0.05 * (i + j) as f64);
        let s = DMatrix::from_fn(6, 6, |i, j| if i == j { 1.5 } else { 0.2 * ((i + 2 * j) % 3) as f64 });
        let mt = m.transformed(&s).unwrap();
        let lt = &s * &l;
        for k in [1, 4, 9] {
            let a = multi_step_from_model(&m, &l, k).unwrap();
            let b = multi_step_from_model(&mt, &lt, k).unwrap();
            assert!((&a.gu - &b.gu).amax() < 1e-10);
            assert!((&a.gw - &b.gw).amax() < 1e-10);
            assert!((&a.ge - &b.ge).amax() < 1e-10);
            assert!((&a.g0 * s.clone().try_inverse().unwrap() - &b.g0).amax() < 1e-10);
        }
    }

    #[test]
    fn json_and_csv_round_trip() {
        let m = benchmark_chain();
        let back = StateSpaceModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let u: Vec<_> = (0..5).map(|t| DVector::from_element(1, t as f64 * 0.5)).collect();
        let traj = simulate(&m, &DVector::zeros(6), &u, 1);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,u_0,y_0,y_1,y_2\n"));
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, traj);
    }
}
