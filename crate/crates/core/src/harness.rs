//! Experiment configuration, the identification pipeline and the studies:
//! probabilistic reachable sets, feasibility and constraint violation.
//!
//! Every random draw is keyed by the trial seed, so results do not depend on
//! the number of worker threads or on the order in which trials run.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{dare_steady_state, InnovationForm};
use crate::linalg;
use crate::model::{build_msd_chain, simulate, to_observability_form, GaussianBelief, MsdParams, StateSpaceModel};
use crate::predictor::{identify_predictors, PredictorBundle, PredictorSettings};
use crate::rng::{self, streams};
use crate::socp::{self, ControlProblem, SolverSettings, Status};
use crate::sysid::{em_identify, EmConfig};
use crate::tightening::{self, ChanceSpec, HalfspaceConstraint, RowConstants, Tightening};

/// How the initial state is interpreted: the mean is a constant vector in
/// the physical coordinates of the true system (positions and velocities,
/// where `C = [I, 0]`), mapped into observability coordinates and used
/// there for both the true and the estimated model. The covariance is the
/// steady-state posterior covariance of the true system.
pub const INITIAL_STATE_CONVENTION: &str = "initial mean is a constant vector in the physical coordinates of the true \
system (positions and velocities, C = [I, 0]), mapped into observability coordinates (state = [C x; C A x]) and used \
there for the true and the estimated model; covariance is the steady-state posterior of the true system";

pub const SEQUENTIAL_PLACEHOLDER: &str = "not implemented (external method)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMethod {
    /// Exact reformulation with the true model.
    Nominal,
    Ellipsoidal,
    Proposed,
    /// Monte Carlo reachable set under the identified parameter law.
    SamplingOracle,
}

impl StudyMethod {
    pub fn name(&self) -> &'static str {
        match self {
            StudyMethod::Nominal => "nominal",
            StudyMethod::Ellipsoidal => "ellipsoidal",
            StudyMethod::Proposed => "proposed",
            StudyMethod::SamplingOracle => "sampling_oracle",
        }
    }

    pub fn tightening(&self) -> Option<Tightening> {
        match self {
            StudyMethod::Ellipsoidal => Some(Tightening::Ellipsoidal),
            StudyMethod::Proposed => Some(Tightening::Proposed),
            _ => None,
        }
    }
}

impl From<socp::Method> for StudyMethod {
    fn from(m: socp::Method) -> Self {
        match m {
            socp::Method::Nominal => StudyMethod::Nominal,
            socp::Method::Ellipsoidal => StudyMethod::Ellipsoidal,
            socp::Method::Proposed => StudyMethod::Proposed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitCovariance {
    SteadyStatePosterior,
    Zero,
}

/// Seeded description of a whole experiment. Missing JSON fields take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: MsdParams,
    /// Length `T` of the identification data.
    pub data_length: usize,
    /// Inputs are `u_t ~ N(0, excitation_std²)`.
    pub excitation_std: f64,
    /// Filter samples discarded before the regression.
    pub burn_in: usize,
    /// Factor applied to the estimated disturbance covariances.
    pub inflation: f64,
    pub em_max_iters: usize,
    pub em_tol: f64,
    /// Horizon `N`.
    pub horizon: usize,
    pub spec: ChanceSpec,
    /// `Q_c = q_c I`.
    pub q_c: f64,
    /// `R_c = r_c I`.
    pub r_c: f64,
    /// `|u_t| ≤ input_bound`; `None` leaves the input free.
    pub input_bound: Option<f64>,
    /// `y_{t,i} ≤ output_bound` for every output; `None` drops the chance
    /// constraints.
    pub output_bound: Option<f64>,
    pub init_mean: f64,
    pub init_cov: InitCovariance,
    /// Constant input of the reachable-set study.
    pub reach_input: f64,
    pub reach_init_mean: f64,
    pub n_trials: usize,
    pub base_seed: u64,
    /// Samples for the quadratic-form quantiles.
    pub mc_samples: usize,
    /// Samples for the reachable-set oracle.
    pub reach_samples: usize,
    /// True-system rollouts per solved trial.
    pub rollouts: usize,
    /// Multiplies every identified `Σ_θ` (1 leaves them unchanged).
    pub sigma_theta_scale: f64,
    pub methods: Vec<StudyMethod>,
    pub solver: SolverSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: MsdParams::default(),
            data_length: 1000,
            excitation_std: 2.0,
            burn_in: 50,
            inflation: 1.2,
            em_max_iters: 500,
            em_tol: 1e-6,
            horizon: 20,
            spec: ChanceSpec { p: 0.9, delta: 0.95, epsilon: 0.975 },
            q_c: 1.0,
            r_c: 0.1,
            input_bound: Some(2.5),
            output_bound: Some(0.05),
            init_mean: -0.2,
            init_cov: InitCovariance::SteadyStatePosterior,
            reach_input: 5.0,
            reach_init_mean: 0.0,
            n_trials: 100,
            base_seed: 0,
            mc_samples: 10_000,
            reach_samples: 100_000,
            rollouts: 10_000,
            sigma_theta_scale: 1.0,
            methods: vec![
                StudyMethod::Nominal,
                StudyMethod::Ellipsoidal,
                StudyMethod::Proposed,
                StudyMethod::SamplingOracle,
            ],
            solver: SolverSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_trials < 1 {
            return bad("n_trials must be at least 1");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if self.data_length <= self.burn_in + self.horizon {
            return bad("data_length must exceed burn_in + horizon");
        }
        if !(self.excitation_std > 0.0) {
            return bad("excitation_std must be positive");
        }
        if !(self.inflation >= 1.0) {
            return bad("inflation must be at least 1");
        }
        if self.em_max_iters < 1 || !(self.em_tol > 0.0) {
            return bad("EM iteration limit and tolerance must be positive");
        }
        if !(self.q_c >= 0.0) || !(self.r_c > 0.0) {
            return bad("cost weights need q_c ≥ 0 and r_c > 0");
        }
        if self.input_bound.is_some_and(|b| !(b > 0.0)) || self.output_bound.is_some_and(|b| !(b > 0.0)) {
            return bad("bounds must be positive");
        }
        if self.mc_samples < 1 || self.reach_samples < 1 || self.rollouts < 1 {
            return bad("sample counts must be positive");
        }
        if !(self.sigma_theta_scale >= 0.0) {
            return bad("sigma_theta_scale must be non-negative");
        }
        if self.methods.is_empty() {
            return bad("no methods selected");
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter < 1 {
            return bad("solver tolerance and iteration limit must be positive");
        }
        if !self.init_mean.is_finite() || !self.reach_init_mean.is_finite() || !self.reach_input.is_finite() {
            return bad("initial means and reach input must be finite");
        }
        self.spec.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn has(&self, m: StudyMethod) -> bool {
        self.methods.contains(&m)
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        rng::derive_seed(self.base_seed, streams::TRIAL, trial as u64)
    }

    /// Short hexadecimal digest of the configuration.
    pub fn digest(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        let h = json
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        Ok(format!("{h:016x}"))
    }
}

/// The data-generating plant in observability coordinates, with its
/// stationary filter.
#[derive(Debug, Clone)]
pub struct TrueSystem {
    pub model: StateSpaceModel,
    /// `z = T x` from physical to observability coordinates.
    pub transform: DMatrix<f64>,
    pub filter: InnovationForm,
}

impl TrueSystem {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let physical = build_msd_chain(&cfg.system)?;
        let (model, transform) = to_observability_form(&physical)?;
        let filter = dare_steady_state(&model, 1e-13, 100_000)?;
        Ok(TrueSystem { model, transform, filter })
    }

    /// Belief with every physical coordinate of the mean equal to `mean`.
    pub fn belief(&self, cfg: &ExperimentConfig, mean: f64) -> GaussianBelief {
        let n = self.model.n_x();
        let cov = match cfg.init_cov {
            InitCovariance::SteadyStatePosterior => self.filter.post_cov.clone(),
            InitCovariance::Zero => DMatrix::zeros(n, n),
        };
        GaussianBelief { mean: &self.transform * DVector::from_element(n, mean), cov }
    }
}

/// Everything identified from one trial's data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialArtifacts {
    pub trial: usize,
    pub seed: u64,
    /// Estimated surrogate model, observability coordinates.
    pub model: StateSpaceModel,
    pub bundle: PredictorBundle,
    pub em_iterations: usize,
    pub em_converged: bool,
    /// Seconds spent on the state-space model (EM and Riccati equation).
    pub identification_time: f64,
    /// Seconds spent on all multi-step predictors.
    pub predictor_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub trials: Vec<TrialArtifacts>,
    pub failures: Vec<TrialFailure>,
}

fn excitation(cfg: &ExperimentConfig, n_u: usize, seed: u64) -> Vec<DVector<f64>> {
    (0..cfg.data_length)
        .map(|t| rng::normal_vector(seed, streams::EXCITATION, t as u64, n_u) * cfg.excitation_std)
        .collect()
}

/// Simulates one data set and identifies the surrogate model and all
/// predictors from it.
pub fn identify_trial(cfg: &ExperimentConfig, truth: &TrueSystem, trial: usize) -> Result<TrialArtifacts> {
    let seed = cfg.trial_seed(trial);
    let m = &truth.model;
    let traj = simulate(m, &DVector::zeros(m.n_x()), &excitation(cfg, m.n_u(), seed), seed);
    if !traj.is_finite() {
        return Err(Error::NonFinite("simulated identification data".into()));
    }

    let start = Instant::now();
    let em_cfg = EmConfig {
        max_iters: cfg.em_max_iters,
        loglik_tol: cfg.em_tol,
        seed,
        ..EmConfig::new(m.n_x(), m.e.clone(), DMatrix::identity(m.n_y(), m.n_y()))
    };
    let fit = em_identify(&traj, &em_cfg)?;
    let (model, t) = to_observability_form(&fit.model)?;
    let init = GaussianBelief::new(&t * &fit.initial_state.mean, &t * &fit.initial_state.cov * t.transpose())?;
    let inno = dare_steady_state(&model, 1e-13, 100_000)?;
    let identification_time = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let settings = PredictorSettings { horizon: cfg.horizon, burn_in: cfg.burn_in, inflation: cfg.inflation };
    let predictors = identify_predictors(&model, &inno, &traj, &init, &settings)?;
    let predictor_time = start.elapsed().as_secs_f64();

    let mut bundle = PredictorBundle { predictors };
    if cfg.sigma_theta_scale != 1.0 {
        bundle = scale_uncertainty(&bundle, cfg.sigma_theta_scale);
    }
    Ok(TrialArtifacts {
        trial,
        seed,
        model,
        bundle,
        em_iterations: fit.loglik_trace.len().saturating_sub(1),
        em_converged: fit.converged,
        identification_time,
        predictor_time,
    })
}

/// Runs [`identify_trial`] for every trial on the current rayon pool.
/// Failed trials are logged and reported, not fatal.
pub fn run_pipeline(cfg: &ExperimentConfig, truth: &TrueSystem, trials: &[usize]) -> PipelineOutput {
    let results: Vec<_> = trials
        .par_iter()
        .map(|&t| (t, identify_trial(cfg, truth, t)))
        .collect();
    let mut out = PipelineOutput { trials: Vec::new(), failures: Vec::new() };
    for (trial, r) in results {
        match r {
            Ok(a) => out.trials.push(a),
            Err(e) => {
                warn!("trial {trial} excluded: {e}");
                out.failures.push(TrialFailure { trial, seed: cfg.trial_seed(trial), reason: e.to_string() });
            }
        }
    }
    out
}

/// `Σ_θ ← factor · Σ_θ` for every predictor.
pub fn scale_uncertainty(bundle: &PredictorBundle, factor: f64) -> PredictorBundle {
    let mut out = bundle.clone();
    for p in &mut out.predictors {
        p.sigma_theta *= factor;
        p.sigma_theta_factor *= factor.sqrt();
    }
    out
}

pub fn control_problem(cfg: &ExperimentConfig, n_y: usize, n_u: usize, init: GaussianBelief) -> Result<ControlProblem> {
    let constraints = match cfg.output_bound {
        Some(b) => (0..n_y).map(|i| HalfspaceConstraint::upper_bound(n_y, i, b)).collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok(ControlProblem {
        horizon: cfg.horizon,
        constraints,
        q_c: DMatrix::identity(n_y, n_y) * cfg.q_c,
        r_c: DMatrix::identity(n_u, n_u) * cfg.r_c,
        u_max: cfg.input_bound.unwrap_or(f64::INFINITY),
        init,
        spec: cfg.spec,
    })
}

// ---------------------------------------------------------------------------
// reachable sets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachRow {
    pub k: usize,
    pub method: StudyMethod,
    pub lower: f64,
    pub upper: f64,
}

/// Empirical `(1 − p, p)` quantiles of `hᵀ y_k` when `θ ~ N(θ̂, Σ_θ)`, the
/// initial state follows `init` and the output noise has the surrogate
/// covariance `Ĝw Ĝwᵀ + R̂`.
pub fn sampling_oracle_interval(
    msp: &crate::predictor::MultiStepPredictor,
    h: &DVector<f64>,
    init: &GaussianBelief,
    u: &DVector<f64>,
    p: f64,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let (nx, ny) = (msp.n_x(), msp.n_y());
    let width = msp.n_theta() / ny;
    let nu_k = width - nx;
    if h.len() != ny || init.mean.len() != nx || u.len() < nu_k {
        return Err(Error::Dimension("oracle inputs disagree with the predictor".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let kh = linalg::kron(&DMatrix::identity(width, width), &DMatrix::from_column_slice(ny, 1, h.as_slice()));
    let g_hat = kh.transpose() * &msp.theta_hat;
    let kf = kh.transpose() * &msp.sigma_theta_factor;
    let g_fac = linalg::psd_factor(&(&kf * kf.transpose()), 1e-14);
    let x_fac = linalg::psd_factor(&init.cov, 1e-14);
    let noise_sd = ((msp.gw_hat.transpose() * h).norm_squared() + h.dot(&(&msp.r_hat * h))).max(0.0).sqrt();
    let u_k = u.rows(0, nu_k);

    let mut rng = rng::keyed_rng(seed, streams::REACH_ORACLE, msp.k as u64);
    let mut xi_g = vec![0.0; g_fac.ncols()];
    let mut xi_x = vec![0.0; x_fac.ncols()];
    let mut vals = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        rng::fill_normal(&mut rng, &mut xi_g);
        rng::fill_normal(&mut rng, &mut xi_x);
        let e: f64 = rng.sample(StandardNormal);
        let mut y = noise_sd * e;
        for i in 0..width {
            let mut gi = g_hat[i];
            for (j, z) in xi_g.iter().enumerate() {
                gi += g_fac[(i, j)] * z;
            }
            let zi = if i < nx {
                let mut x = init.mean[i];
                for (j, z) in xi_x.iter().enumerate() {
                    x += x_fac[(i, j)] * z;
                }
                x
            } else {
                u_k[i - nx]
            };
            y += gi * zi;
        }
        vals.push(y);
    }
    vals.sort_by(f64::total_cmp);
    let n = n_samples as f64;
    let hi = ((p * n).ceil() as usize).clamp(1, n_samples) - 1;
    let lo = (((1.0 - p) * n).floor() as usize).min(n_samples - 1);
    Ok((vals[lo], vals[hi]))
}

/// Two-sided reachable intervals of the last output under the constant
/// input `cfg.reach_input`, for `k = 1..=N`.
pub fn reachability_study(cfg: &ExperimentConfig, truth: &TrueSystem, art: &TrialArtifacts) -> Result<Vec<ReachRow>> {
    let first = art.bundle.get(1)?;
    let (ny, nu) = (first.n_y(), first.n_u());
    let n_vars = cfg.horizon * nu;
    let init = truth.belief(cfg, cfg.reach_init_mean);
    let u = DVector::from_element(n_vars, cfg.reach_input);
    let mut e = DVector::zeros(ny);
    e[ny - 1] = 1.0;
    let up = HalfspaceConstraint::new(e.clone())?;
    let down = up.negated();

    // Rows are normalised to `… ≤ 1`, so the bound implied by a row is its
    // slack plus one.
    let bound = |row: &tightening::SocRow| row.slack(&u) + 1.0;

    let per_k: Vec<Result<Vec<ReachRow>>> = (1..=cfg.horizon)
        .into_par_iter()
        .map(|k| {
            let msp = art.bundle.get(k)?;
            let mut rows = Vec::new();
            for m in [StudyMethod::Nominal, StudyMethod::Ellipsoidal, StudyMethod::Proposed, StudyMethod::SamplingOracle] {
                if !cfg.has(m) {
                    continue;
                }
                let (lower, upper) = match m {
                    StudyMethod::Nominal => {
                        let hi = tightening::build_row_nominal(&truth.model, k, 0, &up, &init, &cfg.spec, n_vars)?;
                        let lo = tightening::build_row_nominal(&truth.model, k, 1, &down, &init, &cfg.spec, n_vars)?;
                        (-bound(&lo), bound(&hi))
                    }
                    StudyMethod::SamplingOracle => {
                        sampling_oracle_interval(msp, &e, &init, &u, cfg.spec.p, cfg.reach_samples, art.seed)?
                    }
                    _ => {
                        let t = m.tightening().expect("tightened method");
                        let mut b = [0.0; 2];
                        for (j, h) in [&up, &down].into_iter().enumerate() {
                            let c = tightening::row_constants(msp, j, h, &init, &cfg.spec, cfg.mc_samples, art.seed)?;
                            b[j] = bound(&tightening::build_row(t, msp, j, h, &init, &c, n_vars)?);
                        }
                        (-b[1], b[0])
                    }
                };
                rows.push(ReachRow { k, method: m, lower, upper });
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_k {
        rows.extend(r?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// feasibility

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveRecord {
    pub trial: usize,
    pub seed: u64,
    pub method: StudyMethod,
    /// `None` when assembly or the solver failed outright.
    pub status: Option<Status>,
    pub error: Option<String>,
    pub objective: Option<f64>,
    pub iterations: usize,
    /// Largest row violation of the returned input (optimal solves only).
    pub max_row_violation: Option<f64>,
    pub solve_time: f64,
    #[serde(with = "crate::io::vector")]
    pub u_star: DVector<f64>,
}

impl SolveRecord {
    pub fn is_feasible(&self) -> bool {
        self.status == Some(Status::Optimal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilitySummary {
    pub method: StudyMethod,
    pub trials: usize,
    pub feasible: usize,
    pub infeasible: usize,
    pub max_iterations: usize,
    pub failed: usize,
    pub feasible_pct: f64,
    pub mean_solve_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrialConstants {
    pub trial: usize,
    pub constants: Vec<RowConstants>,
}

#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub records: Vec<SolveRecord>,
    pub constants: Vec<TrialConstants>,
    pub summary: Vec<FeasibilitySummary>,
}

fn solve_record(
    trial: usize,
    seed: u64,
    method: StudyMethod,
    n_vars: usize,
    prog: Result<socp::ConicProgram>,
    settings: &SolverSettings,
) -> SolveRecord {
    let mut rec = SolveRecord {
        trial,
        seed,
        method,
        status: None,
        error: None,
        objective: None,
        iterations: 0,
        max_row_violation: None,
        solve_time: 0.0,
        u_star: DVector::zeros(n_vars),
    };
    let result = prog.and_then(|p| socp::solve(&p, settings).map(|s| (p, s)));
    match result {
        Ok((prog, sol)) => {
            rec.status = Some(sol.status);
            rec.iterations = sol.iterations;
            rec.solve_time = sol.wall_time;
            if sol.is_optimal() {
                rec.objective = Some(sol.objective);
                rec.max_row_violation = Some(prog.max_violation(&sol.u_star));
            }
            rec.u_star = sol.u_star;
        }
        Err(e) => {
            warn!("trial {trial}, {}: {e}", method.name());
            rec.error = Some(e.to_string());
        }
    }
    rec
}

fn summarize(method: StudyMethod, records: &[&SolveRecord]) -> FeasibilitySummary {
    let count = |f: &dyn Fn(&SolveRecord) -> bool| records.iter().filter(|r| f(r)).count();
    let trials = records.len();
    let feasible = count(&|r| r.is_feasible());
    let solved: Vec<f64> = records.iter().filter(|r| r.status.is_some()).map(|r| r.solve_time).collect();
    FeasibilitySummary {
        method,
        trials,
        feasible,
        infeasible: count(&|r| matches!(r.status, Some(Status::PrimalInfeasible) | Some(Status::DualInfeasible))),
        max_iterations: count(&|r| r.status == Some(Status::MaxIterations)),
        failed: count(&|r| r.status.is_none()),
        feasible_pct: if trials == 0 { 0.0 } else { 100.0 * feasible as f64 / trials as f64 },
        mean_solve_time: if solved.is_empty() { 0.0 } else { solved.iter().sum::<f64>() / solved.len() as f64 },
    }
}

/// Solves the tightened problems of every identified trial with each
/// requested method.
pub fn feasibility_study(
    cfg: &ExperimentConfig,
    truth: &TrueSystem,
    trials: &[TrialArtifacts],
    methods: &[StudyMethod],
) -> Result<FeasibilityReport> {
    let methods: Vec<StudyMethod> = methods.iter().copied().filter(|m| m.tightening().is_some()).collect();
    let init = truth.belief(cfg, cfg.init_mean);
    let per_trial: Vec<Result<(TrialConstants, Vec<SolveRecord>)>> = trials
        .par_iter()
        .map(|art| {
            let first = art.bundle.get(1)?;
            let problem = control_problem(cfg, first.n_y(), first.n_u(), init.clone())?;
            let constants = socp::compute_constants(&art.bundle, &problem, cfg.mc_samples, art.seed)?;
            let records = methods
                .iter()
                .map(|&m| {
                    let t = m.tightening().expect("tightened method");
                    let prog = socp::assemble(&art.bundle, &problem, t, &constants);
                    solve_record(art.trial, art.seed, m, problem.n_vars(), prog, &cfg.solver)
                })
                .collect();
            Ok((TrialConstants { trial: art.trial, constants }, records))
        })
        .collect();
    let mut records = Vec::new();
    let mut constants = Vec::new();
    for r in per_trial {
        let (c, recs) = r?;
        constants.push(c);
        records.extend(recs);
    }
    let summary = methods
        .iter()
        .map(|&m| summarize(m, &records.iter().filter(|r| r.method == m).collect::<Vec<_>>()))
        .collect();
    Ok(FeasibilityReport { records, constants, summary })
}

// ---------------------------------------------------------------------------
// violation

/// Fraction of `n` true-system rollouts with `h_jᵀ y_k > 1`, in k-major
/// order (`(k − 1) · n_c + j`). Rollout `i` draws from its own keyed stream.
pub fn rollout_violations(
    model: &StateSpaceModel,
    init: &GaussianBelief,
    u: &DVector<f64>,
    horizon: usize,
    constraints: &[HalfspaceConstraint],
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (nx, nu, nw, ny) = (model.n_x(), model.n_u(), model.n_w(), model.n_y());
    if u.len() < horizon * nu || init.mean.len() != nx || constraints.iter().any(|c| c.h.len() != ny) {
        return Err(Error::Dimension("rollout inputs disagree with the model".into()));
    }
    let nc = constraints.len();
    let x_fac = linalg::psd_factor(&init.cov, 1e-14);
    let r_sqrt = linalg::sym_sqrt(&model.r);
    let mut counts = vec![0usize; horizon * nc];
    let mut xi0 = vec![0.0; x_fac.ncols()];
    let mut w = DVector::zeros(nw);
    let mut v = DVector::zeros(ny);
    for i in 0..n {
        let mut rng = rng::keyed_rng(seed, streams::ROLLOUT, i as u64);
        rng::fill_normal(&mut rng, &mut xi0);
        let mut x = &init.mean + &x_fac * DVector::from_column_slice(&xi0);
        for k in 0..horizon {
            rng::fill_normal(&mut rng, w.as_mut_slice());
            rng::fill_normal(&mut rng, v.as_mut_slice());
            x = &model.a * &x + &model.b * u.rows(k * nu, nu) + &model.e * &w;
            let y = &model.c * &x + &r_sqrt * &v;
            for (j, c) in constraints.iter().enumerate() {
                if c.h.dot(&y) > 1.0 {
                    counts[k * nc + j] += 1;
                }
            }
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRow {
    pub method: StudyMethod,
    pub k: usize,
    pub j: usize,
    /// Violation percentage averaged over the feasible trials.
    pub violation_pct: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationSummary {
    pub method: StudyMethod,
    pub trials: usize,
    pub rollouts_per_trial: usize,
    /// Maximum over `(k, j)` of the averaged violation percentage.
    pub max_violation_pct: f64,
    pub argmax_k: usize,
    pub argmax_j: usize,
}

#[derive(Debug, Clone)]
pub struct ViolationReport {
    pub rows: Vec<ViolationRow>,
    pub summary: Vec<ViolationSummary>,
    /// Solve of the exact-model baseline, when requested.
    pub nominal: Option<SolveRecord>,
}

fn aggregate(
    method: StudyMethod,
    per_trial: &[Vec<f64>],
    horizon: usize,
    nc: usize,
    rollouts: usize,
    rows: &mut Vec<ViolationRow>,
) -> ViolationSummary {
    let trials = per_trial.len();
    let mut best = ViolationSummary {
        method,
        trials,
        rollouts_per_trial: rollouts,
        max_violation_pct: 0.0,
        argmax_k: 0,
        argmax_j: 0,
    };
    if trials == 0 || nc == 0 {
        return best;
    }
    for k in 1..=horizon {
        for j in 0..nc {
            let idx = (k - 1) * nc + j;
            let pct = 100.0 * per_trial.iter().map(|v| v[idx]).sum::<f64>() / trials as f64;
            rows.push(ViolationRow { method, k, j, violation_pct: pct, trials });
            if pct > best.max_violation_pct || best.argmax_k == 0 {
                best.max_violation_pct = pct;
                best.argmax_k = k;
                best.argmax_j = j;
            }
        }
    }
    best
}

/// Applies each feasible trial's input to the true plant and estimates the
/// per-step violation probabilities. The exact-model baseline is solved
/// once and rolled out `rollouts · max(1, feasible trials)` times.
pub fn violation_study(
    cfg: &ExperimentConfig,
    truth: &TrueSystem,
    feas: Option<&FeasibilityReport>,
    methods: &[StudyMethod],
) -> Result<ViolationReport> {
    let init = truth.belief(cfg, cfg.init_mean);
    let m = &truth.model;
    let problem = control_problem(cfg, m.n_y(), m.n_u(), init.clone())?;
    let nc = problem.constraints.len();
    let mut rows = Vec::new();
    let mut summary = Vec::new();

    if let Some(feas) = feas {
        for &method in methods.iter().filter(|m| m.tightening().is_some()) {
            let feasible: Vec<&SolveRecord> =
                feas.records.iter().filter(|r| r.method == method && r.is_feasible()).collect();
            let per_trial = feasible
                .par_iter()
                .map(|r| {
                    let seed = rng::derive_seed(r.seed, streams::ROLLOUT, method as u64);
                    rollout_violations(m, &init, &r.u_star, cfg.horizon, &problem.constraints, cfg.rollouts, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            summary.push(aggregate(method, &per_trial, cfg.horizon, nc, cfg.rollouts, &mut rows));
        }
    }

    let mut nominal = None;
    if methods.contains(&StudyMethod::Nominal) {
        let seed = cfg.trial_seed(usize::MAX);
        let prog = socp::assemble_nominal(m, &problem);
        let rec = solve_record(usize::MAX, seed, StudyMethod::Nominal, problem.n_vars(), prog, &cfg.solver);
        if let Some(err) = &rec.error {
            return Err(Error::Numerical(format!("exact-model baseline: {err}")));
        }
        if rec.is_feasible() {
            let n = cfg.rollouts * feas.map_or(1, |f| f.summary.iter().map(|s| s.feasible).max().unwrap_or(1)).max(1);
            let v = rollout_violations(m, &init, &rec.u_star, cfg.horizon, &problem.constraints, n, seed)?;
            summary.push(aggregate(StudyMethod::Nominal, &[v], cfg.horizon, nc, n, &mut rows));
        } else {
            warn!("exact-model baseline is not feasible ({:?})", rec.status);
        }
        nominal = Some(rec);
    }
    Ok(ViolationReport { rows, summary, nominal })
}

// ---------------------------------------------------------------------------
// report

/// Which parts of the experiment to run.
#[derive(Debug, Clone, PartialEq)]
pub struct Studies {
    pub reach: bool,
    /// Methods for the feasibility and violation studies.
    pub control: Vec<StudyMethod>,
}

impl Studies {
    pub fn all(cfg: &ExperimentConfig) -> Self {
        Studies { reach: true, control: cfg.methods.clone() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub trial: usize,
    pub stage: String,
    pub method: Option<StudyMethod>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub config: ExperimentConfig,
    pub identified: Vec<TrialArtifacts>,
    pub failures: Vec<TrialFailure>,
    /// Trial whose predictors produced the reachable sets.
    pub reach_trial: Option<usize>,
    pub reach: Option<Vec<ReachRow>>,
    pub feasibility: Option<FeasibilityReport>,
    pub violation: Option<ViolationReport>,
}

impl StudyReport {
    pub fn timings(&self) -> Vec<TimingRow> {
        let mut out = Vec::new();
        for a in &self.identified {
            out.push(TimingRow {
                trial: a.trial,
                stage: "state_space_identification".into(),
                method: None,
                seconds: a.identification_time,
            });
            out.push(TimingRow {
                trial: a.trial,
                stage: "multi_step_predictors".into(),
                method: None,
                seconds: a.predictor_time,
            });
        }
        if let Some(f) = &self.feasibility {
            for r in f.records.iter().filter(|r| r.status.is_some()) {
                out.push(TimingRow { trial: r.trial, stage: "solve".into(), method: Some(r.method), seconds: r.solve_time });
            }
        }
        out
    }

    pub fn reach_interval(&self, k: usize, method: StudyMethod) -> Option<(f64, f64)> {
        self.reach
            .as_ref()?
            .iter()
            .find(|r| r.k == k && r.method == method)
            .map(|r| (r.lower, r.upper))
    }
}

/// Runs the pipeline and the selected studies.
pub fn run_studies(cfg: &ExperimentConfig, studies: &Studies) -> Result<StudyReport> {
    cfg.validate()?;
    let truth = TrueSystem::from_config(cfg)?;
    let needs_data = studies.reach || studies.control.iter().any(|m| m.tightening().is_some());
    let trials: Vec<usize> = if !needs_data {
        vec![]
    } else if studies.control.iter().any(|m| m.tightening().is_some()) {
        (0..cfg.n_trials).collect()
    } else {
        vec![0]
    };
    info!("identifying {} trial(s)", trials.len());
    let pipe = run_pipeline(cfg, &truth, &trials);
    if needs_data && pipe.trials.is_empty() {
        return Err(Error::Numerical(format!(
            "every trial failed, first reason: {}",
            pipe.failures.first().map_or("none", |f| f.reason.as_str())
        )));
    }

    let mut report = StudyReport {
        config: cfg.clone(),
        identified: pipe.trials,
        failures: pipe.failures,
        reach_trial: None,
        reach: None,
        feasibility: None,
        violation: None,
    };
    if studies.reach {
        let art = &report.identified[0];
        info!("reachable sets from trial {}", art.trial);
        report.reach = Some(reachability_study(cfg, &truth, art)?);
        report.reach_trial = Some(art.trial);
    }
    if studies.control.iter().any(|m| m.tightening().is_some()) {
        info!("feasibility study");
        report.feasibility = Some(feasibility_study(cfg, &truth, &report.identified, &studies.control)?);
    }
    if !studies.control.is_empty() {
        info!("violation study");
        report.violation = Some(violation_study(cfg, &truth, report.feasibility.as_ref(), &studies.control)?);
    }
    Ok(report)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ReachCsvRow {
    k: usize,
    method: String,
    lower: Option<f64>,
    upper: Option<f64>,
    note: String,
}

#[derive(Serialize)]
struct FeasibilityCsvRow {
    method: String,
    trials: usize,
    feasible: usize,
    infeasible: usize,
    max_iterations: usize,
    failed: usize,
    feasible_pct: f64,
}

#[derive(Serialize)]
struct SolveCsvRow {
    trial: usize,
    seed: u64,
    method: StudyMethod,
    status: String,
    objective: Option<f64>,
    iterations: usize,
    max_row_violation: Option<f64>,
}

#[derive(Serialize)]
struct ConstantsCsvRow {
    trial: usize,
    k: usize,
    j: usize,
    n_theta: usize,
    c_p: f64,
    c_epsilon: f64,
    c_p_tilde: f64,
    d_delta: f64,
    d_kj: f64,
    f_kj: f64,
    f_eps_kj: f64,
}

fn status_name(r: &SolveRecord) -> String {
    match r.status {
        Some(Status::Optimal) => "optimal",
        Some(Status::PrimalInfeasible) => "primal_infeasible",
        Some(Status::DualInfeasible) => "dual_infeasible",
        Some(Status::MaxIterations) => "max_iterations",
        None => "error",
    }
    .into()
}

/// Writes the CSV tables and `summary.json` for whatever parts of the
/// experiment `report` contains. All files except `timings.csv` depend only
/// on the configuration.
pub fn write_report(report: &StudyReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let cfg = &report.config;

    if let Some(reach) = &report.reach {
        let mut rows: Vec<ReachCsvRow> = reach
            .iter()
            .map(|r| ReachCsvRow {
                k: r.k,
                method: r.method.name().into(),
                lower: Some(r.lower),
                upper: Some(r.upper),
                note: String::new(),
            })
            .collect();
        rows.extend((1..=cfg.horizon).map(|k| ReachCsvRow {
            k,
            method: "sequential".into(),
            lower: None,
            upper: None,
            note: SEQUENTIAL_PLACEHOLDER.into(),
        }));
        write_csv(&out_dir.join("reach.csv"), &rows)?;
    }

    if let Some(f) = &report.feasibility {
        let mut rows: Vec<FeasibilityCsvRow> = f
            .summary
            .iter()
            .map(|s| FeasibilityCsvRow {
                method: s.method.name().into(),
                trials: s.trials,
                feasible: s.feasible,
                infeasible: s.infeasible,
                max_iterations: s.max_iterations,
                failed: s.failed,
                feasible_pct: s.feasible_pct,
            })
            .collect();
        rows.push(FeasibilityCsvRow {
            method: format!("sequential ({SEQUENTIAL_PLACEHOLDER})"),
            trials: 0,
            feasible: 0,
            infeasible: 0,
            max_iterations: 0,
            failed: 0,
            feasible_pct: 0.0,
        });
        write_csv(&out_dir.join("feasibility.csv"), &rows)?;
        let solves: Vec<SolveCsvRow> = f
            .records
            .iter()
            .map(|r| SolveCsvRow {
                trial: r.trial,
                seed: r.seed,
                method: r.method,
                status: status_name(r),
                objective: r.objective,
                iterations: r.iterations,
                max_row_violation: r.max_row_violation,
            })
            .collect();
        write_csv(&out_dir.join("solves.csv"), &solves)?;
        let constants: Vec<ConstantsCsvRow> = f
            .constants
            .iter()
            .flat_map(|tc| {
                tc.constants.iter().map(move |c| ConstantsCsvRow {
                    trial: tc.trial,
                    k: c.k,
                    j: c.j,
                    n_theta: c.n_theta,
                    c_p: c.c_p,
                    c_epsilon: c.c_epsilon,
                    c_p_tilde: c.c_p_tilde,
                    d_delta: c.d_delta,
                    d_kj: c.d_kj,
                    f_kj: c.f_kj,
                    f_eps_kj: c.f_eps_kj,
                })
            })
            .collect();
        write_csv(&out_dir.join("constants.csv"), &constants)?;
    }

    if let Some(v) = &report.violation {
        write_csv(&out_dir.join("violation.csv"), &v.rows)?;
    }

    write_csv(&out_dir.join("timings.csv"), &report.timings())?;
    fs::write(out_dir.join("summary.json"), summary_json(report)?)?;
    Ok(())
}

/// Configuration echo, run metadata and the headline numbers.
pub fn summary_json(report: &StudyReport) -> Result<String> {
    let cfg = &report.config;
    let mut reach_gap = serde_json::Value::Null;
    let n = cfg.horizon;
    if let (Some(o), Some(p), Some(e)) = (
        report.reach_interval(n, StudyMethod::SamplingOracle),
        report.reach_interval(n, StudyMethod::Proposed),
        report.reach_interval(n, StudyMethod::Ellipsoidal),
    ) {
        let gap = |b: (f64, f64)| (b.1 - o.1).max(o.0 - b.0);
        reach_gap = serde_json::json!({ "k": n, "proposed": gap(p), "ellipsoidal": gap(e) });
    }
    let value = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config_digest": cfg.digest()?,
        "config": cfg,
        "initial_state_convention": INITIAL_STATE_CONVENTION,
        "sequential_baseline": SEQUENTIAL_PLACEHOLDER,
        "trials_identified": report.identified.len(),
        "failures": report.failures,
        "em_not_converged": report.identified.iter().filter(|a| !a.em_converged).map(|a| a.trial).collect::<Vec<_>>(),
        "reach_trial": report.reach_trial,
        "reach_gap": reach_gap,
        "feasibility": report.feasibility.as_ref().map(|f| &f.summary).map(|s| {
            s.iter().map(|x| serde_json::json!({
                "method": x.method, "trials": x.trials, "feasible": x.feasible, "infeasible": x.infeasible,
                "max_iterations": x.max_iterations, "failed": x.failed, "feasible_pct": x.feasible_pct,
            })).collect::<Vec<_>>()
        }),
        "violation": report.violation.as_ref().map(|v| &v.summary),
        "nominal_status": report.violation.as_ref().and_then(|v| v.nominal.as_ref()).map(status_name),
    });
    Ok(serde_json::to_string_pretty(&value)?)
}
