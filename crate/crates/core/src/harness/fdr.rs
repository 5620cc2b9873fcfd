//! Fluctuation-dissipation residuals on empirical measures, and the
//! closed-form Ornstein–Uhlenbeck oracle.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, JointParams, Matrix, MinimaxModel, Vector};
use crate::sde::{beta, generator_with, sde_coefficients, LossFunction, SdeKind};
use crate::sga::Scheme;
use crate::stats::population_covariances;

use super::oracle::{extract_affine, extract_quadratic};
use super::stationary::{EmpiricalMeasure, Engine, Provenance};
use super::batch_means;

/// Batches used for the batch-means standard errors.
pub const FDR_BATCHES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FdrKind {
    #[serde(rename = "FDR1")]
    Fdr1,
    #[serde(rename = "FDR2")]
    Fdr2,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdrReport {
    pub which: FdrKind,
    pub samples: usize,
    pub eta: f64,
    pub beta: f64,
    /// Whether the η-correction of FDR1 was included.
    pub eta_term: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// `max(|lhs|, |rhs|)`.
    pub scale: f64,
    pub se: f64,
    /// `max(3·SE, 0.05·scale)`.
    pub tolerance: f64,
    pub generator_mean: f64,
    pub generator_se: f64,
    pub generator_passed: bool,
    pub verdict: bool,
}

fn sde_kind_for(engine: Option<Engine>) -> SdeKind {
    match engine {
        Some(Engine::Sde(k)) => k,
        Some(Engine::Sga(s)) => SdeKind::for_scheme(s),
        None => SdeKind::for_scheme(Scheme::Sml),
    }
}

/// Evaluates FDR1 or FDR2 over `measure`; the FDR1 η-term is kept only for
/// measures produced by an alternating engine.
pub fn fdr_residuals(
    measure: &EmpiricalMeasure,
    model: &MinimaxModel,
    dataset: &Dataset,
    eta: f64,
    batch_size: usize,
    which: FdrKind,
) -> Result<FdrReport> {
    if measure.is_empty() {
        return Err(Error::EmptySample("FDR needs a nonempty measure".into()));
    }
    let b = beta(eta, batch_size);
    let eta_term = which == FdrKind::Fdr1 && measure.engine.is_some_and(Engine::is_alternating);
    let kind = sde_kind_for(measure.engine);
    let phi = LossFunction { model, dataset };
    let n = measure.len();
    let mut lhs = Vec::with_capacity(n);
    let mut rhs = Vec::with_capacity(n);
    let mut gen = Vec::with_capacity(n);
    for p in &measure.samples {
        let st = population_covariances(model, dataset, p)?;
        let (gt, gw) = (&st.g_theta, &st.g_omega);
        match which {
            FdrKind::Fdr1 => {
                let h = model.full_hessian_blocks(dataset, p)?;
                if !h.is_finite() {
                    return Err(Error::NonFinite(format!("Hessian at {p}")));
                }
                let mut l = gt.norm_squared() - gw.norm_squared();
                if eta_term {
                    let q = gt.dot(&(&h.dtheta_gtheta * gt)) + gw.dot(&(&h.domega_gomega * gw));
                    l += 0.5 * eta * q;
                }
                lhs.push(l);
                rhs.push(((&st.sigma_theta * &h.dtheta_gtheta).trace() + (&st.sigma_omega * &h.domega_gomega).trace()) / b);
            }
            FdrKind::Fdr2 => {
                lhs.push(p.theta.dot(gt) - p.omega.dot(gw));
                rhs.push((st.sigma_theta.trace() + st.sigma_omega.trace()) / b);
            }
        }
        let c = sde_coefficients(kind, model, dataset, p, eta, batch_size)?;
        gen.push(generator_with(&c, &phi, &p.stacked()));
    }
    let residuals: Vec<f64> = lhs.iter().zip(&rhs).map(|(l, r)| l - r).collect();
    let (residual, se) = batch_means(&residuals, FDR_BATCHES);
    let (lhs_mean, _) = batch_means(&lhs, FDR_BATCHES);
    let (rhs_mean, _) = batch_means(&rhs, FDR_BATCHES);
    let (generator_mean, generator_se) = batch_means(&gen, FDR_BATCHES);
    let scale = lhs_mean.abs().max(rhs_mean.abs());
    let tolerance = (3.0 * se).max(0.05 * scale);
    let generator_passed = generator_mean.abs() <= 3.0 * generator_se + super::stationary::DIAGNOSTIC_FLOOR;
    Ok(FdrReport {
        which,
        samples: n,
        eta,
        beta: b,
        eta_term,
        lhs: lhs_mean,
        rhs: rhs_mean,
        residual,
        scale,
        se,
        tolerance,
        generator_mean,
        generator_se,
        generator_passed,
        verdict: residual.abs() <= tolerance,
    })
}

/// Solves `AS + SAᵀ + D = 0` through `(I⊗A + A⊗I) vec S = -vec D`.
pub fn ou_stationary_covariance(a: &Matrix, d: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n || d.shape() != (n, n) {
        return Err(Error::Dimension("Lyapunov equation needs square matrices of one size".into()));
    }
    let eye = Matrix::identity(n, n);
    let k = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = -Vector::from_column_slice(d.as_slice());
    let v = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("drift matrix has eigenvalues summing to zero".into()))?;
    let s = Matrix::from_column_slice(n, n, v.as_slice());
    Ok(0.5 * (&s + s.transpose()))
}

/// Stationary law `N(m, S)` of an SDE with affine drift and constant diffusion.
#[derive(Clone, Debug, PartialEq)]
pub struct OuLaw {
    pub drift: Matrix,
    pub offset: Vector,
    pub diffusion: Matrix,
    pub mean: Vector,
    pub covariance: Matrix,
}

pub fn ou_law(model: &MinimaxModel, dataset: &Dataset, kind: SdeKind, eta: f64, batch_size: usize) -> Result<OuLaw> {
    let n = model.dim();
    let d_theta = model.dims().0;
    let coeff = |u: &Vector| sde_coefficients(kind, model, dataset, &JointParams::from_stacked(u, d_theta), eta, batch_size);
    let map = extract_affine(n, |u| Ok(coeff(u)?.drift))?;
    let field = extract_quadratic(n, |u| Ok(coeff(u)?.diffusion()))?;
    let varying = field.linear.iter().chain(field.quadratic.iter().flatten()).map(|m| m.amax()).fold(0.0, f64::max);
    if varying > 1e-12 * (1.0 + field.d0.amax()) {
        return Err(Error::OracleUnavailable("diffusion depends on the state".into()));
    }
    let mean = map
        .a
        .clone()
        .lu()
        .solve(&(-&map.c))
        .ok_or_else(|| Error::OracleUnavailable("drift matrix is singular".into()))?;
    let covariance = ou_stationary_covariance(&map.a, &field.d0)?;
    Ok(OuLaw { drift: map.a, offset: map.c, diffusion: field.d0, mean, covariance })
}

/// FDR2 residual with expectations taken under the closed-form stationary law.
pub fn fdr2_closed_form(model: &MinimaxModel, dataset: &Dataset, kind: SdeKind, eta: f64, batch_size: usize) -> Result<f64> {
    let law = ou_law(model, dataset, kind, eta, batch_size)?;
    let n = model.dim();
    let d_theta = model.dims().0;
    // θᵀg_θ - ωᵀg_ω = -uᵀb0(u) with b0 affine
    let b0 = extract_affine(n, |u| {
        Ok(crate::stats::full_gradients(model, dataset, &JointParams::from_stacked(u, d_theta))?.drift())
    })?;
    let second = &law.covariance + &law.mean * law.mean.transpose();
    let lhs = -(&b0.a * &second).trace() - b0.c.dot(&law.mean);
    let st = population_covariances(model, dataset, &JointParams::from_stacked(&law.mean, d_theta))?;
    let rhs = (st.sigma_theta.trace() + st.sigma_omega.trace()) / beta(eta, batch_size);
    Ok(lhs - rhs)
}

/// `count` independent draws from the closed-form stationary law.
#[allow(clippy::too_many_arguments)]
pub fn ou_oracle_measure<R: Rng + ?Sized>(
    model: &MinimaxModel,
    dataset: &Dataset,
    kind: SdeKind,
    eta: f64,
    batch_size: usize,
    count: usize,
    rng: &mut R,
) -> Result<EmpiricalMeasure> {
    let law = ou_law(model, dataset, kind, eta, batch_size)?;
    let root = crate::stats::psd_sqrt_default(&law.covariance)?;
    let n = model.dim();
    let d_theta = model.dims().0;
    let samples = (0..count)
        .map(|_| {
            let xi = Vector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            JointParams::from_stacked(&(&law.mean + &root * xi), d_theta)
        })
        .collect();
    let mut m = EmpiricalMeasure::from_samples(model, dataset, samples, Some(Engine::Sde(kind)))?;
    m.provenance = Provenance::Oracle;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn quad(s: f64) -> MinimaxModel {
        MinimaxModel::quad_sim(1.0, 1.0, 0.0, s).unwrap()
    }

    #[test]
    fn lyapunov_solution_for_isotropic_ou() {
        let m = quad(1.0);
        let law = ou_law(&m, &Dataset::placeholder(1), SdeKind::SmlSde, 0.1, 4).unwrap();
        assert!((&law.covariance - Matrix::identity(2, 2) * 0.0125).amax() < 1e-15);
        assert!(law.mean.amax() < 1e-15);
    }

    #[test]
    fn lyapunov_solution_with_rotation() {
        let m = MinimaxModel::quad_sim(1.0, 2.0, 0.7, 1.0).unwrap();
        let law = ou_law(&m, &Dataset::placeholder(1), SdeKind::AltSde, 0.1, 4).unwrap();
        let res = &law.drift * &law.covariance + &law.covariance * law.drift.transpose() + &law.diffusion;
        assert!(res.amax() < 1e-14);
    }

    #[test]
    fn closed_form_fdr2_vanishes() {
        for (a, c, b) in [(1.0, 1.0, 0.0), (1.0, 2.0, 0.7), (0.5, 3.0, -1.2)] {
            let m = MinimaxModel::quad_sim(a, c, b, 1.3).unwrap();
            let r = fdr2_closed_form(&m, &Dataset::placeholder(1), SdeKind::SmlSde, 0.1, 4).unwrap();
            assert!(r.abs() < 1e-10, "{r}");
        }
    }

    #[test]
    fn point_mass_without_noise() {
        let m = quad(0.0);
        let d = Dataset::placeholder(1);
        let mu = EmpiricalMeasure::point_mass(&m, &d, JointParams::scalar(0.0, 0.0)).unwrap();
        for which in [FdrKind::Fdr1, FdrKind::Fdr2] {
            let r = fdr_residuals(&mu, &m, &d, 0.1, 4, which).unwrap();
            assert_eq!((r.lhs, r.rhs, r.residual), (0.0, 0.0, 0.0));
            assert!(r.verdict && r.generator_passed);
        }
    }

    #[test]
    fn oracle_samples_satisfy_fdr2() {
        let m = quad(1.0);
        let d = Dataset::placeholder(1);
        let mu = ou_oracle_measure(&m, &d, SdeKind::SmlSde, 0.1, 4, 20_000, &mut stream(2, 0)).unwrap();
        let r = fdr_residuals(&mu, &m, &d, 0.1, 4, FdrKind::Fdr2).unwrap();
        assert!((r.rhs - 0.025).abs() < 1e-12);
        assert!(r.verdict, "{r:?}");
    }
}
