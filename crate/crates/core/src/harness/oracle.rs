//! Noise-free moment oracles for models whose one-step maps are affine in the
//! state for every batch outcome (lin-wgan).
//!
//! Discrete side: every outcome `k` of the batch draw gives `u' = A_k u + c_k`,
//! so `m' = E[A]m + E[c]` and `S' = E[A S Aᵀ + A m cᵀ + c mᵀ Aᵀ + c cᵀ]` close
//! exactly. SDE side: an affine drift `Gu + h` and a diffusion `σσᵀ` quadratic
//! in `u` give the closed moment ODEs
//! `ṁ = Gm + h`, `Ṡ = GS + SGᵀ + hmᵀ + mhᵀ + E[σσᵀ(U)]`, integrated with RK4.

use crate::error::{Error, Result};
use crate::model::{Dataset, JointParams, Matrix, MinimaxModel, Vector};
use crate::sde::{sde_coefficients_with, NoiseCoupling, SdeKind};
use crate::sga::{alt_step_with, sml_step_with, steps_for_horizon, Scheme};
use crate::stats::{enumerate_tuples, Minibatch};

/// Mean and second moment `E[UUᵀ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vector,
    pub second: Matrix,
}

impl Moments {
    pub fn point(u: &Vector) -> Self {
        Self { mean: u.clone(), second: u * u.transpose() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub a: Matrix,
    pub c: Vector,
}

/// Relative tolerance of the affinity and quadraticity checks.
const STRUCTURE_TOL: f64 = 1e-8;

fn probe_point(n: usize) -> Vector {
    Vector::from_fn(n, |i, _| 0.37 - 0.61 * i as f64 + 0.11 * (i * i) as f64)
}

fn basis(n: usize, i: usize) -> Vector {
    let mut e = Vector::zeros(n);
    e[i] = 1.0;
    e
}

/// Reads off `A` and `c` from `n + 1` evaluations and checks the fit at a probe point.
pub fn extract_affine(n: usize, f: impl Fn(&Vector) -> Result<Vector>) -> Result<AffineMap> {
    let c = f(&Vector::zeros(n))?;
    let m = c.len();
    let mut a = Matrix::zeros(m, n);
    for i in 0..n {
        a.set_column(i, &(f(&basis(n, i))? - &c));
    }
    let p = probe_point(n);
    let actual = f(&p)?;
    let predicted = &a * &p + &c;
    let defect = (&actual - &predicted).amax();
    if defect > STRUCTURE_TOL * (1.0 + actual.amax()) {
        return Err(Error::OracleUnavailable(format!(
            "map is not affine in the state (defect {defect:e})"
        )));
    }
    Ok(AffineMap { a, c })
}

/// `D(u) = D0 + Σ_i u_i L_i + Σ_{i≤j} u_i u_j Q_ij`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticMatrixField {
    pub d0: Matrix,
    pub linear: Vec<Matrix>,
    /// `quadratic[i][j]` for `i ≤ j`.
    pub quadratic: Vec<Vec<Matrix>>,
}

impl QuadraticMatrixField {
    pub fn eval(&self, u: &Vector) -> Matrix {
        let mut d = self.d0.clone();
        for (i, l) in self.linear.iter().enumerate() {
            d += u[i] * l;
        }
        for i in 0..u.len() {
            for j in i..u.len() {
                d += u[i] * u[j] * &self.quadratic[i][j];
            }
        }
        d
    }

    /// `E[D(U)]` from the first two moments.
    pub fn expectation(&self, m: &Moments) -> Matrix {
        let mut d = self.d0.clone();
        for (i, l) in self.linear.iter().enumerate() {
            d += m.mean[i] * l;
        }
        let n = m.mean.len();
        for i in 0..n {
            for j in i..n {
                d += m.second[(i, j)] * &self.quadratic[i][j];
            }
        }
        d
    }
}

#[allow(clippy::needless_range_loop)]
pub fn extract_quadratic(n: usize, f: impl Fn(&Vector) -> Result<Matrix>) -> Result<QuadraticMatrixField> {
    let d0 = f(&Vector::zeros(n))?;
    let mut linear = Vec::with_capacity(n);
    let mut quadratic = vec![vec![Matrix::zeros(d0.nrows(), d0.ncols()); n]; n];
    let mut plus = Vec::with_capacity(n);
    for i in 0..n {
        let p = f(&basis(n, i))?;
        let m = f(&(-basis(n, i)))?;
        linear.push(0.5 * (&p - &m));
        quadratic[i][i] = 0.5 * (&p + &m) - &d0;
        plus.push(p);
    }
    for i in 0..n {
        for j in i + 1..n {
            let pij = f(&(basis(n, i) + basis(n, j)))?;
            quadratic[i][j] = pij - &plus[i] - &plus[j] + &d0;
        }
    }
    let field = QuadraticMatrixField { d0, linear, quadratic };
    let p = probe_point(n);
    let actual = f(&p)?;
    let defect = (&actual - field.eval(&p)).amax();
    if defect > STRUCTURE_TOL * (1.0 + actual.amax()) {
        return Err(Error::OracleUnavailable(format!(
            "diffusion is not quadratic in the state (defect {defect:e})"
        )));
    }
    Ok(field)
}

/// Exact moments of the discrete scheme at steps `0..=⌊T/η⌋`.
pub fn sga_moments(
    model: &MinimaxModel,
    dataset: &Dataset,
    scheme: Scheme,
    eta: f64,
    batch_size: usize,
    initial: &JointParams,
    horizon: f64,
) -> Result<Vec<Moments>> {
    if model.injects_noise() {
        return Err(Error::OracleUnavailable("injected Gaussian noise cannot be enumerated".into()));
    }
    let d_theta = model.dims().0;
    let n = model.dim();
    let length = match scheme {
        Scheme::Alt => 2 * batch_size,
        Scheme::Sml => batch_size,
    };
    let mut maps = Vec::new();
    for t in enumerate_tuples(dataset.pair_count(), length)? {
        let batch = Minibatch::from_flat(dataset, &t[..batch_size]);
        let bar = Minibatch::from_flat(dataset, &t[batch_size..]);
        let map = extract_affine(n, |u| {
            let p = JointParams::from_stacked(u, d_theta);
            let next = match scheme {
                Scheme::Alt => alt_step_with(model, dataset, &p, eta, &batch, &bar)?,
                Scheme::Sml => sml_step_with(model, dataset, &p, eta, &batch)?,
            };
            Ok(next.stacked())
        })?;
        maps.push(map);
    }
    let k = maps.len() as f64;
    let mean_a = maps.iter().fold(Matrix::zeros(n, n), |acc, m| acc + &m.a) / k;
    let mean_c = maps.iter().fold(Vector::zeros(n), |acc, m| acc + &m.c) / k;
    let mut state = Moments::point(&initial.stacked());
    let mut out = vec![state.clone()];
    for _ in 0..steps_for_horizon(horizon, eta) {
        let mut second = Matrix::zeros(n, n);
        for m in &maps {
            let am = &m.a * &state.mean;
            let cross = &am * m.c.transpose();
            second += &m.a * &state.second * m.a.transpose() + &cross + cross.transpose() + &m.c * m.c.transpose();
        }
        state = Moments { mean: &mean_a * &state.mean + &mean_c, second: second / k };
        out.push(state.clone());
    }
    Ok(out)
}

/// Moments of the SDE at times `tη`, `t = 0..=⌊T/η⌋`, by RK4 on the moment ODEs
/// with a step close to `ode_step` that divides η.
#[allow(clippy::too_many_arguments)]
pub fn sde_moments(
    model: &MinimaxModel,
    dataset: &Dataset,
    kind: SdeKind,
    coupling: NoiseCoupling,
    eta: f64,
    batch_size: usize,
    initial: &JointParams,
    horizon: f64,
    ode_step: f64,
) -> Result<Vec<Moments>> {
    let d_theta = model.dims().0;
    let n = model.dim();
    let coeff = |u: &Vector| {
        sde_coefficients_with(kind, coupling, model, dataset, &JointParams::from_stacked(u, d_theta), eta, batch_size)
    };
    let drift = extract_affine(n, |u| Ok(coeff(u)?.drift))?;
    let diffusion = extract_quadratic(n, |u| Ok(coeff(u)?.diffusion()))?;
    let g = drift.a;
    let h = drift.c;
    let rhs = |m: &Moments| -> Moments {
        let hm = &h * m.mean.transpose();
        Moments {
            mean: &g * &m.mean + &h,
            second: &g * &m.second + &m.second * g.transpose() + &hm + hm.transpose() + diffusion.expectation(m),
        }
    };
    let axpy = |m: &Moments, k: &Moments, s: f64| Moments { mean: &m.mean + s * &k.mean, second: &m.second + s * &k.second };
    let substeps = (eta / ode_step).round().max(1.0) as usize;
    let dt = eta / substeps as f64;
    let mut state = Moments::point(&initial.stacked());
    let mut out = vec![state.clone()];
    for _ in 0..steps_for_horizon(horizon, eta) {
        for _ in 0..substeps {
            let k1 = rhs(&state);
            let k2 = rhs(&axpy(&state, &k1, dt / 2.0));
            let k3 = rhs(&axpy(&state, &k2, dt / 2.0));
            let k4 = rhs(&axpy(&state, &k3, dt));
            state = Moments {
                mean: &state.mean + dt / 6.0 * (k1.mean + 2.0 * k2.mean + 2.0 * k3.mean + k4.mean),
                second: &state.second + dt / 6.0 * (k1.second + 2.0 * k2.second + 2.0 * k3.second + k4.second),
            };
        }
        out.push(state.clone());
    }
    Ok(out)
}
