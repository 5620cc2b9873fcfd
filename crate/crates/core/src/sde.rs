//! SDE approximations of the discrete schemes: coefficients, Euler–Maruyama
//! integration and the infinitesimal generator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, JointParams, Matrix, MinimaxModel, Vector};
use crate::rng::{stream, Stream};
use crate::sga::{check_divergence, record_stats, steps_for_horizon, Initialization, Scheme, Trajectory};
use crate::stats::{population_covariances, psd_sqrt_default};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdeKind {
    AltSde,
    SmlSde,
    SmlSde2,
}

impl SdeKind {
    pub const ALL: [SdeKind; 3] = [SdeKind::AltSde, SdeKind::SmlSde, SdeKind::SmlSde2];

    pub fn name(self) -> &'static str {
        match self {
            SdeKind::AltSde => "alt-sde",
            SdeKind::SmlSde => "sml-sde",
            SdeKind::SmlSde2 => "sml-sde2",
        }
    }

    /// The SDE a discrete scheme is usually compared with.
    pub fn for_scheme(scheme: Scheme) -> Self {
        match scheme {
            Scheme::Alt => SdeKind::AltSde,
            Scheme::Sml => SdeKind::SmlSde,
        }
    }

    /// Whether the drift carries the order-η correction of the alternating scheme.
    pub fn is_alternating(self) -> bool {
        self == SdeKind::AltSde
    }

    pub fn default_coupling(self) -> NoiseCoupling {
        match self {
            SdeKind::SmlSde2 => NoiseCoupling::SharedBatch,
            _ => NoiseCoupling::BlockDiagonal,
        }
    }
}

impl fmt::Display for SdeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SdeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SdeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown SDE kind {s:?}")))
    }
}

/// How the θ and ω noise components are correlated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCoupling {
    /// `σ = √(2/β)·diag(Σ_θ^{1/2}, Σ_ω^{1/2})`.
    BlockDiagonal,
    /// `σ = √(2/β)·C^{1/2}` with `C = [Σ_θ, -Cov(g_θ,g_ω); -Cov(g_ω,g_θ), Σ_ω]`,
    /// the covariance of `(-g_θ^B; g_ω^B)` when one batch feeds both players.
    SharedBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdeCoefficients {
    pub kind: SdeKind,
    pub b0: Vector,
    /// Drift correction: the ALT interaction term, `-(1/2)∇b0·b0` for SML-SDE2, zero for SML-SDE.
    pub b1: Vector,
    pub drift: Vector,
    pub sigma: Matrix,
    pub beta: f64,
    pub eta: f64,
}

impl SdeCoefficients {
    /// `σσᵀ`.
    pub fn diffusion(&self) -> Matrix {
        &self.sigma * self.sigma.transpose()
    }
}

/// Tolerance of the dual-form drift-correction check, relative to `1 + |b1|∞`.
pub const B1_TOLERANCE: f64 = 1e-9;

/// `β = 2B/η`.
pub fn beta(eta: f64, batch_size: usize) -> f64 {
    2.0 * batch_size as f64 / eta
}

/// Both closed forms of the ALT drift correction `b1`.
pub fn b1_forms(model: &MinimaxModel, dataset: &Dataset, params: &JointParams) -> Result<(Vector, Vector)> {
    let g = crate::stats::full_gradients(model, dataset, params)?;
    let h = model.full_hessian_blocks(dataset, params)?;
    let b0 = g.drift();
    let (dt, dw) = model.dims();
    let mut m = Matrix::zeros(dt + dw, dt + dw);
    m.view_mut((0, 0), (dt, dt)).copy_from(&h.dtheta_gtheta);
    m.view_mut((0, dt), (dt, dw)).copy_from(&(-&h.domega_gtheta));
    m.view_mut((dt, 0), (dw, dt)).copy_from(&(-&h.dtheta_gomega));
    m.view_mut((dt, dt), (dw, dw)).copy_from(&(-&h.domega_gomega));
    let form_a = 0.5 * &m * &b0;
    let mut interaction = Vector::zeros(dt + dw);
    interaction.rows_mut(0, dt).copy_from(&(&h.domega_gtheta * &g.omega));
    let form_b = -0.5 * h.drift_jacobian() * &b0 - interaction;
    Ok((form_a, form_b))
}

pub fn sde_coefficients(
    kind: SdeKind,
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch_size: usize,
) -> Result<SdeCoefficients> {
    sde_coefficients_with(kind, kind.default_coupling(), model, dataset, params, eta, batch_size)
}

pub fn sde_coefficients_with(
    kind: SdeKind,
    coupling: NoiseCoupling,
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch_size: usize,
) -> Result<SdeCoefficients> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    if batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let stats = population_covariances(model, dataset, params)?;
    let h = model.full_hessian_blocks(dataset, params)?;
    let b0 = stats.gradients().drift();
    let (dt, dw) = model.dims();

    let (form_a, form_b) = b1_forms(model, dataset, params)?;
    let defect = (&form_a - &form_b).amax();
    if defect > B1_TOLERANCE * (1.0 + form_a.amax()) {
        return Err(Error::DriftInconsistency { defect });
    }

    let (b1, drift) = match kind {
        SdeKind::AltSde => {
            let drift = &b0 + eta * &form_a;
            (form_a, drift)
        }
        SdeKind::SmlSde => (Vector::zeros(dt + dw), b0.clone()),
        SdeKind::SmlSde2 => {
            let corr = -0.5 * h.drift_jacobian() * &b0;
            let drift = &b0 + eta * &corr;
            (corr, drift)
        }
    };

    let beta = beta(eta, batch_size);
    let scale = (2.0 / beta).sqrt();
    let sigma = match coupling {
        NoiseCoupling::BlockDiagonal => {
            let mut s = Matrix::zeros(dt + dw, dt + dw);
            s.view_mut((0, 0), (dt, dt)).copy_from(&psd_sqrt_default(&stats.sigma_theta)?);
            s.view_mut((dt, dt), (dw, dw)).copy_from(&psd_sqrt_default(&stats.sigma_omega)?);
            scale * s
        }
        NoiseCoupling::SharedBatch => scale * psd_sqrt_default(&stats.joint_covariance(true))?,
    };
    Ok(SdeCoefficients { kind, b0, b1, drift, sigma, beta, eta })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegratorConfig {
    pub horizon: f64,
    /// Inner Euler–Maruyama step; `None` means `η/100`.
    pub inner_step: Option<f64>,
    pub seed: u64,
    /// Record every `record_every` multiples of η.
    pub record_every: usize,
    pub record_stats: bool,
    pub coupling: Option<NoiseCoupling>,
}

impl IntegratorConfig {
    pub fn new(horizon: f64, seed: u64) -> Self {
        Self { horizon, inner_step: None, seed, record_every: 1, record_stats: false, coupling: None }
    }

    pub fn step_for(&self, eta: f64) -> f64 {
        self.inner_step.unwrap_or(eta / 100.0)
    }

    /// Inner steps per η-interval; `h` must divide η and satisfy `h ≤ η/10`.
    pub fn substeps(&self, eta: f64) -> Result<usize> {
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidArgument(format!("horizon must be finite and >= 0, got {}", self.horizon)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        let h = self.step_for(eta);
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!("inner step must be positive, got {h}")));
        }
        if h > eta / 10.0 * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "inner step {h} exceeds eta/10 = {}",
                eta / 10.0
            )));
        }
        let n = (eta / h).round();
        if ((n * h - eta) / eta).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "inner step {h} does not divide the recording interval {eta}"
            )));
        }
        Ok(n as usize)
    }
}

#[allow(clippy::too_many_arguments)]
fn em_path<R: Rng + ?Sized>(
    kind: SdeKind,
    coupling: NoiseCoupling,
    model: &MinimaxModel,
    dataset: &Dataset,
    initial: &JointParams,
    eta: f64,
    batch_size: usize,
    config: &IntegratorConfig,
    monitors: &[u32],
    rng: &mut R,
) -> Result<Trajectory> {
    model.check_params(initial)?;
    let substeps = config.substeps(eta)?;
    let h = eta / substeps as f64;
    let sqrt_h = h.sqrt();
    let intervals = steps_for_horizon(config.horizon, eta);
    let stats = |p: &JointParams| -> Result<_> {
        if config.record_stats {
            record_stats(model, dataset, p).map(Some)
        } else {
            Ok(None)
        }
    };
    let d_theta = model.dims().0;
    let mut traj = Trajectory::new(initial.clone(), stats(initial)?, monitors);
    let mut u = initial.stacked();
    let n = u.len();
    let mut xi = Vector::zeros(n);
    for k in 1..=intervals {
        for _ in 0..substeps {
            let params = JointParams::from_stacked(&u, d_theta);
            let c = sde_coefficients_with(kind, coupling, model, dataset, &params, eta, batch_size)?;
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            u += h * &c.drift + sqrt_h * (&c.sigma * &xi);
        }
        let state = JointParams::from_stacked(&u, d_theta);
        if !state.is_finite() {
            return Err(Error::NonFinite(format!("{kind} path at t={}", k as f64 * eta)));
        }
        check_divergence(k, &state)?;
        traj.observe(&state);
        if k % config.record_every == 0 {
            let s = stats(&state)?;
            traj.push(k, k as f64 * eta, state, s);
        }
    }
    Ok(traj)
}

/// Euler–Maruyama path of the chosen SDE on an explicit stream.
#[allow(clippy::too_many_arguments)]
pub fn em_integrate<R: Rng + ?Sized>(
    kind: SdeKind,
    model: &MinimaxModel,
    dataset: &Dataset,
    initial: &JointParams,
    eta: f64,
    batch_size: usize,
    config: &IntegratorConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let coupling = config.coupling.unwrap_or(kind.default_coupling());
    em_path(kind, coupling, model, dataset, initial, eta, batch_size, config, &[], rng)
}

/// Independent Euler–Maruyama replicas on streams `(seed, r)`.
#[allow(clippy::too_many_arguments)]
pub fn em_replicas(
    kind: SdeKind,
    model: &MinimaxModel,
    dataset: &Dataset,
    initial: &Initialization,
    eta: f64,
    batch_size: usize,
    config: &IntegratorConfig,
    replicas: usize,
) -> Result<Vec<Trajectory>> {
    let coupling = config.coupling.unwrap_or(kind.default_coupling());
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng: Stream = stream(config.seed, r as u64);
            let start = initial.draw(&mut rng);
            em_path(kind, coupling, model, dataset, &start, eta, batch_size, config, &[], &mut rng)
        })
        .collect()
}

/// Result of the step-halving check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefinementReport {
    pub coarse_step: f64,
    pub fine_step: f64,
    /// Per-coordinate `E[u_T]` with the coarse and the fine step.
    pub coarse_mean: Vec<f64>,
    pub fine_mean: Vec<f64>,
    /// Monte Carlo standard error of each fine-step mean.
    pub standard_error: Vec<f64>,
    pub passed: bool,
}

/// Integrates every replica with step `h` and `h/2` on the same Brownian path
/// (the coarse increment is the sum of two fine ones) and requires the change
/// in `E[u_T]` to stay below the Monte Carlo standard error of the estimate.
#[allow(clippy::too_many_arguments)]
pub fn h_refinement_check(
    kind: SdeKind,
    model: &MinimaxModel,
    dataset: &Dataset,
    initial: &JointParams,
    eta: f64,
    batch_size: usize,
    config: &IntegratorConfig,
    replicas: usize,
) -> Result<RefinementReport> {
    if replicas < 2 {
        return Err(Error::InvalidArgument("refinement check needs at least 2 replicas".into()));
    }
    let coupling = config.coupling.unwrap_or(kind.default_coupling());
    let substeps = config.substeps(eta)?;
    let h = eta / substeps as f64;
    let total = steps_for_horizon(config.horizon, eta) * substeps;
    let d_theta = model.dims().0;
    let n = model.dim();
    let pairs: Vec<(Vector, Vector)> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<(Vector, Vector)> {
            let mut rng = stream(config.seed, r as u64);
            let mut coarse = initial.stacked();
            let mut fine = initial.stacked();
            let advance = |u: &mut Vector, dt: f64, dw: &Vector| -> Result<()> {
                let p = JointParams::from_stacked(u, d_theta);
                let c = sde_coefficients_with(kind, coupling, model, dataset, &p, eta, batch_size)?;
                *u += dt * &c.drift + &c.sigma * dw;
                Ok(())
            };
            let half = (h / 2.0).sqrt();
            for _ in 0..total {
                let w1 = Vector::from_fn(n, |_, _| half * rng.sample::<f64, _>(StandardNormal));
                let w2 = Vector::from_fn(n, |_, _| half * rng.sample::<f64, _>(StandardNormal));
                advance(&mut fine, h / 2.0, &w1)?;
                advance(&mut fine, h / 2.0, &w2)?;
                advance(&mut coarse, h, &(&w1 + &w2))?;
            }
            Ok((coarse, fine))
        })
        .collect::<Result<_>>()?;
    let rn = replicas as f64;
    let mut coarse_mean = vec![0.0; n];
    let mut fine_mean = vec![0.0; n];
    for (c, f) in &pairs {
        for k in 0..n {
            coarse_mean[k] += c[k] / rn;
            fine_mean[k] += f[k] / rn;
        }
    }
    let standard_error: Vec<f64> = (0..n)
        .map(|k| {
            let var = pairs.iter().map(|(_, f)| (f[k] - fine_mean[k]).powi(2)).sum::<f64>() / (rn - 1.0);
            (var / rn).sqrt()
        })
        .collect();
    let passed = (0..n).all(|k| (coarse_mean[k] - fine_mean[k]).abs() <= standard_error[k]);
    Ok(RefinementReport { coarse_step: h, fine_step: h / 2.0, coarse_mean, fine_mean, standard_error, passed })
}

/// A scalar function on the stacked parameter space `(θ; ω)` with derivatives.
pub trait SmoothFunction: Send + Sync {
    fn name(&self) -> String;
    fn value(&self, u: &Vector) -> f64;
    fn gradient(&self, u: &Vector) -> Vector;
    fn hessian(&self, u: &Vector) -> Matrix;
}

/// Central-difference derivatives of a plain function.
pub struct FiniteDifference<F> {
    pub label: String,
    pub f: F,
}

impl<F: Fn(&Vector) -> f64 + Send + Sync> FiniteDifference<F> {
    pub fn new(label: impl Into<String>, f: F) -> Self {
        Self { label: label.into(), f }
    }

    fn step(x: f64) -> f64 {
        1e-5 * (1.0 + x.abs())
    }
}

impl<F: Fn(&Vector) -> f64 + Send + Sync> SmoothFunction for FiniteDifference<F> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn value(&self, u: &Vector) -> f64 {
        (self.f)(u)
    }

    fn gradient(&self, u: &Vector) -> Vector {
        Vector::from_fn(u.len(), |i, _| {
            let h = Self::step(u[i]);
            let mut up = u.clone();
            up[i] += h;
            let mut dn = u.clone();
            dn[i] -= h;
            ((self.f)(&up) - (self.f)(&dn)) / (2.0 * h)
        })
    }

    fn hessian(&self, u: &Vector) -> Matrix {
        let n = u.len();
        let mut hess = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let (hi, hj) = (Self::step(u[i]) * 10.0, Self::step(u[j]) * 10.0);
                let eval = |si: f64, sj: f64| {
                    let mut v = u.clone();
                    v[i] += si * hi;
                    v[j] += sj * hj;
                    (self.f)(&v)
                };
                let val = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hi * hj);
                hess[(i, j)] = val;
                hess[(j, i)] = val;
            }
        }
        hess
    }
}

/// Φ itself as a test function.
pub struct LossFunction<'a> {
    pub model: &'a MinimaxModel,
    pub dataset: &'a Dataset,
}

impl SmoothFunction for LossFunction<'_> {
    fn name(&self) -> String {
        "phi".into()
    }

    fn value(&self, u: &Vector) -> f64 {
        let p = JointParams::from_stacked(u, self.model.dims().0);
        self.model.evaluate_loss(self.dataset, &p).unwrap_or(f64::NAN)
    }

    fn gradient(&self, u: &Vector) -> Vector {
        let p = JointParams::from_stacked(u, self.model.dims().0);
        match crate::stats::full_gradients(self.model, self.dataset, &p) {
            Ok(g) => JointParams { theta: g.theta, omega: g.omega }.stacked(),
            Err(_) => Vector::from_element(u.len(), f64::NAN),
        }
    }

    fn hessian(&self, u: &Vector) -> Matrix {
        let p = JointParams::from_stacked(u, self.model.dims().0);
        match self.model.full_hessian_blocks(self.dataset, &p) {
            Ok(h) => h.full(),
            Err(_) => Matrix::from_element(u.len(), u.len(), f64::NAN),
        }
    }
}

/// `𝒜f = bᵀ∇f + (1/2)Tr(σσᵀ∇²f)` at `params`.
#[allow(clippy::too_many_arguments)]
pub fn generator_apply(
    f: &dyn SmoothFunction,
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch_size: usize,
    kind: SdeKind,
) -> Result<f64> {
    let c = sde_coefficients(kind, model, dataset, params, eta, batch_size)?;
    Ok(generator_with(&c, f, &params.stacked()))
}

pub fn generator_with(c: &SdeCoefficients, f: &dyn SmoothFunction, u: &Vector) -> f64 {
    let grad = f.gradient(u);
    let hess = f.hessian(u);
    c.drift.dot(&grad) + 0.5 * (c.diffusion() * hess).trace()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin() -> (MinimaxModel, Dataset) {
        (MinimaxModel::lin_wgan(), Dataset::scalar(&[1.0, 3.0], &[2.0, 0.0]).unwrap())
    }

    fn quad(s: f64) -> MinimaxModel {
        MinimaxModel::quad_sim(1.0, 1.0, 0.0, s).unwrap()
    }

    #[test]
    fn lin_coefficients() {
        let (m, d) = lin();
        let c = sde_coefficients(SdeKind::AltSde, &m, &d, &JointParams::scalar(1.0, 1.0), 0.1, 4).unwrap();
        assert_eq!(c.b0.as_slice(), &[2.0, -1.0]);
        assert!((c.b1[0] + 1.0).abs() < 1e-15 && (c.b1[1] - 2.0).abs() < 1e-15);
        assert!((c.beta - 80.0).abs() < 1e-12);
        assert!((c.sigma[(0, 0)] - (1.0f64 / 40.0).sqrt()).abs() < 1e-12);
        assert!((c.sigma[(1, 1)] - (2.0f64 / 40.0).sqrt()).abs() < 1e-12);
        assert_eq!(c.sigma[(0, 1)], 0.0);
        let (a, b) = b1_forms(&m, &d, &JointParams::scalar(1.0, 1.0)).unwrap();
        assert!((a - b).amax() < 1e-15);

        let c = sde_coefficients(SdeKind::AltSde, &m, &d, &JointParams::scalar(0.5, 0.0), 0.1, 4).unwrap();
        assert_eq!(c.b0.amax(), 0.0);
        assert_eq!(c.b1.amax(), 0.0);
    }

    #[test]
    fn quad_coefficients() {
        let m = quad(1.0);
        let d = Dataset::placeholder(1);
        let c = sde_coefficients(SdeKind::AltSde, &m, &d, &JointParams::scalar(2.0, 3.0), 0.1, 4).unwrap();
        assert_eq!(c.b0.as_slice(), &[-2.0, -3.0]);
        assert_eq!(c.b1.as_slice(), &[-1.0, -1.5]);
        assert!((c.sigma[(0, 0)] - (2.0f64 / 80.0).sqrt()).abs() < 1e-15);
        let s = sde_coefficients(SdeKind::SmlSde, &m, &d, &JointParams::scalar(2.0, 3.0), 0.1, 4).unwrap();
        assert_eq!(s.b1.amax(), 0.0);
        assert_eq!(s.drift, s.b0);
    }

    #[test]
    fn beta_invariance() {
        let (m, d) = lin();
        let p = JointParams::scalar(0.7, -0.4);
        let a = sde_coefficients(SdeKind::AltSde, &m, &d, &p, 0.05, 2).unwrap();
        let b = sde_coefficients(SdeKind::AltSde, &m, &d, &p, 0.1, 4).unwrap();
        assert!((&a.sigma - &b.sigma).amax() < 1e-15);
        let da = &a.drift - &a.b0;
        let db = &b.drift - &b.b0;
        assert!((2.0 * &da - db).amax() < 1e-14);
        assert!(da.amax() > 0.0);
    }

    #[test]
    fn shared_batch_diffusion_has_cross_blocks() {
        let (m, d) = lin();
        let p = JointParams::scalar(1.0, 1.0);
        let c = sde_coefficients(SdeKind::SmlSde2, &m, &d, &p, 0.1, 1).unwrap();
        let stats = population_covariances(&m, &d, &p).unwrap();
        let expect = (2.0 / c.beta) * stats.joint_covariance(true);
        assert!((c.diffusion() - expect).amax() < 1e-12);
        // Cov(-ωz, x - θz) = ωθ Var z = 1
        assert!((stats.cross[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn noiseless_path_matches_ode() {
        let m = quad(0.0);
        let d = Dataset::placeholder(1);
        let mut cfg = IntegratorConfig::new(1.0, 0);
        cfg.inner_step = Some(1e-4);
        let t = em_integrate(SdeKind::SmlSde, &m, &d, &JointParams::scalar(2.0, 3.0), 0.1, 1, &cfg, &mut stream(0, 0)).unwrap();
        let last = t.last();
        let e = (-1.0f64).exp();
        assert!((last.theta[0] - 2.0 * e).abs() < 1e-3 && (last.omega[0] - 3.0 * e).abs() < 1e-3);
        assert_eq!(t.len(), 11);
        assert!((t.times[10] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_horizon_and_step_checks() {
        let m = quad(1.0);
        let d = Dataset::placeholder(1);
        let cfg = IntegratorConfig::new(0.0, 0);
        let t = em_integrate(SdeKind::SmlSde, &m, &d, &JointParams::scalar(2.0, 3.0), 0.1, 1, &cfg, &mut stream(0, 0)).unwrap();
        assert_eq!(t.len(), 1);
        let mut bad = IntegratorConfig::new(1.0, 0);
        bad.inner_step = Some(0.05);
        assert!(bad.substeps(0.1).is_err());
        bad.inner_step = Some(0.003);
        assert!(bad.substeps(0.1).is_err());
    }

    #[test]
    fn generator_examples() {
        let m = quad(1.0);
        let d = Dataset::placeholder(1);
        let p = JointParams::scalar(0.6, -1.3);
        let phi = LossFunction { model: &m, dataset: &d };
        let a = generator_apply(&phi, &m, &d, &p, 0.1, 4, SdeKind::SmlSde).unwrap();
        assert!((a - (1.3f64.powi(2) - 0.36)).abs() < 1e-12);
        let constant = FiniteDifference::new("one", |_: &Vector| 1.0);
        assert!(generator_apply(&constant, &m, &d, &p, 0.1, 4, SdeKind::SmlSde).unwrap().abs() < 1e-9);
        let half_sq = FiniteDifference::new("half-norm", |u: &Vector| 0.5 * u.norm_squared());
        let a = generator_apply(&half_sq, &m, &d, &p, 0.1, 4, SdeKind::SmlSde).unwrap();
        let expect = -0.36 - 1.69 + 2.0 / 80.0;
        assert!((a - expect).abs() < 1e-6, "{a} vs {expect}");
    }
}
