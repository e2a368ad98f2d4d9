//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use mspc::rng;
use mspc::socp::{ConicProgram, LinearRow};
use mspc::tightening::SocRow;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

pub fn gauss<R: Rng>(r: &mut R) -> f64 {
    StandardNormal.sample(r)
}

/// Random strictly feasible program whose cones are typically active.
pub fn random_socp(seed: u64) -> ConicProgram {
    let mut r = rng::keyed_rng(seed, 191, 0);
    let n = r.random_range(2..=30);
    let n_cones = r.random_range(1..=40);
    let b = DMatrix::from_fn(n, n, |_, _| gauss(&mut r));
    let h = &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let g = DVector::from_fn(n, |_, _| 3.0 * gauss(&mut r));
    let x0 = DVector::from_fn(n, |_, _| 0.3 * gauss(&mut r));
    let mut soc_rows = Vec::new();
    for j in 0..n_cones {
        let rows = r.random_range(1..=6);
        let c = DMatrix::from_fn(rows, n, |_, _| gauss(&mut r) / (n as f64).sqrt());
        let d = DVector::from_fn(rows, |_, _| 0.5 * gauss(&mut r));
        let linear = DVector::from_fn(n, |_, _| gauss(&mut r) / (n as f64).sqrt());
        let scale = r.random_range(0.2..2.0);
        let offset = gauss(&mut r);
        let rhs = offset + linear.dot(&x0) + scale * (&c * &x0 + &d).norm() + r.random_range(0.05..1.0);
        soc_rows.push(SocRow {
            k: j,
            j: 0,
            offset,
            linear,
            scale,
            cone_matrix: c,
            cone_offset: d,
            rhs,
            nonpositive_rhs: false,
        });
    }
    let mut lin_rows = Vec::new();
    for _ in 0..r.random_range(0..=5) {
        let a = DVector::from_fn(n, |_, _| gauss(&mut r));
        let b = a.dot(&x0) + r.random_range(0.1..1.0);
        lin_rows.push(LinearRow { a, b });
    }
    ConicProgram { n_vars: n, h, g, c0: gauss(&mut r), lin_rows, soc_rows }
}

fn project_soc(v: &mut [f64]) {
    let t = v[0];
    let nx = v[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
    if nx <= t {
        return;
    }
    if nx <= -t {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let a = 0.5 * (t + nx);
    v[0] = a;
    for x in v[1..].iter_mut() {
        *x *= a / nx;
    }
}

/// Operator-splitting reference: `min ½xᵀPx + qᵀx, Ax + s = b, s ∈ K`,
/// built directly from the row definitions and run to tight residuals.
/// Returns the objective at the final iterate.
pub fn admm_reference(prog: &ConicProgram) -> f64 {
    let n = prog.n_vars;
    let mut a_rows: Vec<DVector<f64>> = Vec::new();
    let mut b = Vec::new();
    let mut blocks: Vec<(usize, usize, bool)> = Vec::new();
    for r in &prog.lin_rows {
        blocks.push((a_rows.len(), 1, false));
        a_rows.push(r.a.clone());
        b.push(r.b);
    }
    for r in &prog.soc_rows {
        blocks.push((a_rows.len(), 1 + r.cone_matrix.nrows(), true));
        a_rows.push(r.linear.clone());
        b.push(r.rhs - r.offset);
        for i in 0..r.cone_matrix.nrows() {
            a_rows.push(-r.scale * r.cone_matrix.row(i).transpose());
            b.push(r.scale * r.cone_offset[i]);
        }
    }
    let m = a_rows.len();
    let a = DMatrix::from_fn(m, n, |i, j| a_rows[i][j]);
    let b = DVector::from_vec(b);
    let project = |v: &mut DVector<f64>| {
        for &(off, d, soc) in &blocks {
            let sl = &mut v.as_mut_slice()[off..off + d];
            if soc {
                project_soc(sl);
            } else {
                sl[0] = sl[0].max(0.0);
            }
        }
    };
    let (sigma, alpha) = (1e-6, 1.6);
    let mut rho = 0.1;
    let ata = a.transpose() * &a;
    let factor = |rho: f64| (&prog.h + DMatrix::identity(n, n) * sigma + &ata * rho).cholesky().unwrap();
    let mut chol = factor(rho);
    let (mut x, mut s, mut y) = (DVector::zeros(n), DVector::zeros(m), DVector::zeros(m));
    for it in 0..400_000 {
        let rhs = &x * sigma - &prog.g + a.transpose() * ((&b - &s) * rho + &y);
        let xt = chol.solve(&rhs);
        let st = &b - &a * &xt;
        x = &xt * alpha + &x * (1.0 - alpha);
        let relaxed = &st * alpha + &s * (1.0 - alpha);
        let mut s_new = &relaxed + &y / rho;
        project(&mut s_new);
        y += (&relaxed - &s_new) * rho;
        s = s_new;
        if it % 50 == 0 {
            let ax = &a * &x;
            let rp = (&ax + &s - &b).norm();
            let rd = (&prog.h * &x + &prog.g - a.transpose() * &y).norm();
            let sp = ax.norm().max(s.norm()).max(b.norm()).max(1.0);
            let sd = (&prog.h * &x).norm().max((a.transpose() * &y).norm()).max(prog.g.norm()).max(1.0);
            if rp <= 1e-12 * sp && rd <= 1e-12 * sd {
                break;
            }
            let ratio = ((rp / sp) / (rd / sd).max(1e-300)).sqrt();
            if it % 500 == 0 && !(0.2..5.0).contains(&ratio) {
                rho = (rho * ratio).clamp(1e-6, 1e6);
                chol = factor(rho);
            }
        }
    }
    prog.objective(&x)
}

/// `(M, θ̂, Σ, r)` for `max θᵀMθ` over `(θ−θ̂)ᵀΣ⁻¹(θ−θ̂) ≤ r²`.
pub fn trust_region_instance(seed: u64) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, f64) {
    let mut r = rng::keyed_rng(seed, 177, 0);
    let n = r.random_range(1..=10);
    let rank = r.random_range(1..=n);
    let w = DMatrix::from_fn(n, rank, |_, _| gauss(&mut r));
    let mut m = &w * w.transpose();
    let mut theta = DVector::from_fn(n, |_, _| gauss(&mut r));
    if seed % 5 == 0 {
        // repeated top eigenvalue with the centre orthogonal to it
        m = DMatrix::identity(n, n);
        if n > 1 {
            m[(0, 0)] = 0.2;
        }
        theta.fill(0.0);
        theta[0] = 0.3;
    }
    let s = DMatrix::from_fn(n, n, |_, _| gauss(&mut r));
    let sigma = &s * s.transpose() + DMatrix::identity(n, n) * 0.1;
    (m, theta, sigma, r.random_range(0.1..3.0))
}

/// Best value from random boundary sampling and projected gradient ascent
/// on the ball in whitened coordinates: `(best sampled, best overall)`.
pub fn trust_region_brute_force(
    m: &DMatrix<f64>,
    theta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    radius: f64,
    seed: u64,
) -> (f64, f64) {
    let n = theta.len();
    let l = sigma.clone().cholesky().unwrap().l();
    let f = |z: &DVector<f64>| {
        let t = theta + &l * z;
        t.dot(&(m * &t))
    };
    let mut r = rng::keyed_rng(seed, 178, 0);
    let mut sampled = f64::NEG_INFINITY;
    let mut starts = Vec::new();
    for i in 0..100_000 {
        let mut z = DVector::from_fn(n, |_, _| gauss(&mut r));
        z *= radius / z.norm();
        sampled = sampled.max(f(&z));
        if i < 40 {
            starts.push(z);
        }
    }
    let at = l.transpose() * m * &l;
    let eig = SymmetricEigen::new(at.clone());
    let e = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
    starts.push(&e * radius);
    starts.push(&e * -radius);
    let b = l.transpose() * m * theta;
    let step = 0.5 / eig.eigenvalues.amax().max(1e-9);
    let mut best = sampled;
    for mut z in starts {
        for _ in 0..20_000 {
            let g = &at * &z + &b;
            let mut next = &z + g * step;
            let nn = next.norm();
            if nn > 0.0 {
                next *= radius / nn;
            }
            if (&next - &z).norm() < 1e-15 {
                break;
            }
            z = next;
        }
        best = best.max(f(&z));
    }
    (sampled, best)
}

/// Quantile of `x²` for `x ~ N(μ, s²)` by bisection on
/// `Φ((√q−μ)/s) − Φ((−√q−μ)/s)`.
pub fn squared_normal_quantile(mu: f64, sd: f64, level: f64) -> f64 {
    let nrm = Normal::new(0.0, 1.0).unwrap();
    let cdf = |x: f64| nrm.cdf((x.sqrt() - mu) / sd) - nrm.cdf((-x.sqrt() - mu) / sd);
    let (mut lo, mut hi) = (0.0, (mu.abs() + 10.0 * sd).powi(2));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
