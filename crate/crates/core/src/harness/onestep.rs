//! One-step moments of the discrete schemes against their small-η expansions.
//!
//! Predictions:
//! `E[Δ] ≈ η(-g_θ; g_ω) + η²(-∇_ωg_θ·g_ω; 0)` for ALT (the η² term is absent
//! for SML) and `E[ΔΔᵀ] ≈ η²[(1/B)diag(Σ_θ, Σ_ω) + b0 b0ᵀ]`.
//!
//! The Monte Carlo path uses control variates with known expectations built
//! from the same batches, so that the estimated residual carries noise of
//! the residual's own order rather than of order η.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, JointParams, Matrix, MinimaxModel, Vector};
use crate::rng::{derive_seed, stream};
use crate::sga::{alt_step_with, sml_step_with, Scheme};
use crate::stats::{
    enumerate_tuples, enumeration_count, minibatch_gradients, minibatch_hessian_blocks,
    population_covariances, GradientStats, Minibatch,
};

use super::fit_log_slope;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MomentMode {
    /// Enumerate when the outcome count allows it, otherwise Monte Carlo with `draws` and `seed`.
    Auto { draws: usize, seed: u64 },
    Exact,
    MonteCarlo { draws: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OneStepReport {
    pub eta: f64,
    pub scheme: String,
    pub exact: bool,
    pub draws: u64,
    /// `E[Δ]` (Monte Carlo: prediction plus the control-variate residual estimate).
    pub mean: Vec<f64>,
    pub predicted_mean: Vec<f64>,
    /// Row-major `E[ΔΔᵀ]`.
    pub second: Vec<f64>,
    pub predicted_second: Vec<f64>,
    /// Euclidean norm of `E[Δ] - prediction`.
    pub first_residual: f64,
    pub first_residual_se: f64,
    /// Frobenius norm of `E[ΔΔᵀ] - prediction`.
    pub second_residual: f64,
    pub second_residual_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OneStepStudy {
    pub reports: Vec<OneStepReport>,
    /// Log-log slope of the first-moment residual against η; `None` when a residual vanishes.
    pub first_slope: Option<f64>,
    pub second_slope: Option<f64>,
}

struct Predictions {
    mean: Vector,
    second: Matrix,
    /// Exact expectation of the second-moment control variate.
    cv_second: Matrix,
}

fn predictions(scheme: Scheme, stats: &GradientStats, interaction: &Vector, eta: f64, batch_size: usize) -> Predictions {
    let b0 = stats.gradients().drift();
    let mut mean = eta * &b0;
    if scheme == Scheme::Alt {
        let dt = stats.g_theta.len();
        let mut rows = mean.rows_mut(0, dt);
        rows -= eta * eta * interaction;
    }
    let b = batch_size as f64;
    let outer = &b0 * b0.transpose();
    let second = eta * eta * (stats.joint_covariance(false) / b + &outer);
    let cv_second = eta * eta * (stats.joint_covariance(scheme == Scheme::Sml) / b + &outer);
    Predictions { mean, second, cv_second }
}

fn step_with(
    scheme: Scheme,
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch: &Minibatch,
    batch_bar: &Minibatch,
) -> Result<Vector> {
    let next = match scheme {
        Scheme::Alt => alt_step_with(model, dataset, params, eta, batch, batch_bar)?,
        Scheme::Sml => sml_step_with(model, dataset, params, eta, batch)?,
    };
    Ok(next.stacked() - params.stacked())
}

/// Expectations of both moments of the one-step difference and their expansions.
#[allow(clippy::too_many_arguments)]
pub fn one_step_moment_compare(
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch_size: usize,
    scheme: Scheme,
    mode: MomentMode,
) -> Result<OneStepReport> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("eta must be finite and >= 0, got {eta}")));
    }
    if batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let stats = population_covariances(model, dataset, params)?;
    let hess = model.full_hessian_blocks(dataset, params)?;
    let interaction = &hess.domega_gtheta * &stats.g_omega;
    let pred = predictions(scheme, &stats, &interaction, eta, batch_size);

    let length = match scheme {
        Scheme::Alt => 2 * batch_size,
        Scheme::Sml => batch_size,
    };
    let enumerable = !model.injects_noise() && enumeration_count(dataset.pair_count(), length).is_ok();
    let (exact, draws, seed) = match mode {
        MomentMode::Exact => {
            if model.injects_noise() {
                return Err(Error::OracleUnavailable(
                    "exact enumeration cannot cover injected Gaussian noise".into(),
                ));
            }
            enumeration_count(dataset.pair_count(), length)?;
            (true, 0, 0)
        }
        MomentMode::Auto { draws, seed } => (enumerable, draws, seed),
        MomentMode::MonteCarlo { draws, seed } => (false, draws, seed),
    };

    let n = model.dim();
    let (mean, second, first_se, second_se, count) = if exact {
        let mut mean = Vector::zeros(n);
        let mut second = Matrix::zeros(n, n);
        let mut count = 0u64;
        for t in enumerate_tuples(dataset.pair_count(), length)? {
            let batch = Minibatch::from_flat(dataset, &t[..batch_size]);
            let bar = Minibatch::from_flat(dataset, &t[batch_size..]);
            let d = step_with(scheme, model, dataset, params, eta, &batch, &bar)?;
            second += &d * d.transpose();
            mean += d;
            count += 1;
        }
        (mean / count as f64, second / count as f64, 0.0, 0.0, count)
    } else {
        if draws < 2 {
            return Err(Error::InvalidArgument("Monte Carlo needs at least 2 draws".into()));
        }
        let (r1, r2, se1, se2) = mc_residuals(model, dataset, params, eta, batch_size, scheme, draws, seed)?;
        let mean = &pred.mean + r1;
        let second = &pred.cv_second + r2;
        (mean, second, se1, se2, draws as u64)
    };

    Ok(OneStepReport {
        eta,
        scheme: scheme.to_string(),
        exact,
        draws: count,
        first_residual: (&mean - &pred.mean).norm(),
        first_residual_se: first_se,
        second_residual: (&second - &pred.second).norm(),
        second_residual_se: second_se,
        mean: mean.as_slice().to_vec(),
        predicted_mean: pred.mean.as_slice().to_vec(),
        second: second.transpose().as_slice().to_vec(),
        predicted_second: pred.second.transpose().as_slice().to_vec(),
    })
}

/// Mean of `Δ - c1` and `ΔΔᵀ - c2c2ᵀ`, with standard errors of their norms.
#[allow(clippy::too_many_arguments)]
fn mc_residuals(
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch_size: usize,
    scheme: Scheme,
    draws: usize,
    seed: u64,
) -> Result<(Vector, Matrix, f64, f64)> {
    let n = model.dim();
    let dt = model.dims().0;
    const CHUNKS: usize = 64;
    let per_chunk = draws.div_ceil(CHUNKS);
    let chunks: Vec<(Vector, Matrix, Vector, Matrix, usize)> = (0..CHUNKS)
        .into_par_iter()
        .map(|c| -> Result<_> {
            let mut rng = stream(derive_seed(seed, &[eta.to_bits()]), c as u64);
            let mut s1 = Vector::zeros(n);
            let mut s2 = Matrix::zeros(n, n);
            let mut q1 = Vector::zeros(n);
            let mut q2 = Matrix::zeros(n, n);
            let todo = per_chunk.min(draws.saturating_sub(c * per_chunk));
            for _ in 0..todo {
                let (r1, r2) = one_draw(model, dataset, params, eta, batch_size, scheme, dt, &mut rng)?;
                q1 += r1.component_mul(&r1);
                q2 += r2.component_mul(&r2);
                s1 += r1;
                s2 += r2;
            }
            Ok((s1, s2, q1, q2, todo))
        })
        .collect::<Result<_>>()?;
    let total: usize = chunks.iter().map(|c| c.4).sum();
    let nf = total as f64;
    let mut s1 = Vector::zeros(n);
    let mut s2 = Matrix::zeros(n, n);
    let mut q1 = Vector::zeros(n);
    let mut q2 = Matrix::zeros(n, n);
    for c in &chunks {
        s1 += &c.0;
        s2 += &c.1;
        q1 += &c.2;
        q2 += &c.3;
    }
    let m1 = s1 / nf;
    let m2 = s2 / nf;
    let var1 = (q1 / nf - m1.component_mul(&m1)) * (nf / (nf - 1.0));
    let var2 = (q2 / nf - m2.component_mul(&m2)) * (nf / (nf - 1.0));
    let se1 = (var1.map(|v| v.max(0.0)).sum() / nf).sqrt();
    let se2 = (var2.map(|v| v.max(0.0)).sum() / nf).sqrt();
    Ok((m1, m2, se1, se2))
}

#[allow(clippy::too_many_arguments)]
fn one_draw<R: Rng + ?Sized>(
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch_size: usize,
    scheme: Scheme,
    dt: usize,
    rng: &mut R,
) -> Result<(Vector, Matrix)> {
    let batch = Minibatch::sample(model, dataset, batch_size, rng)?;
    let bar = match scheme {
        Scheme::Alt => Minibatch::sample(model, dataset, batch_size, rng)?,
        Scheme::Sml => batch.clone(),
    };
    let delta = step_with(scheme, model, dataset, params, eta, &batch, &bar)?;
    let g = minibatch_gradients(model, dataset, &batch, params)?;
    let g_bar = match scheme {
        Scheme::Alt => minibatch_gradients(model, dataset, &bar, params)?,
        Scheme::Sml => g.clone(),
    };
    let mut first_order = Vector::zeros(delta.len());
    first_order.rows_mut(0, dt).copy_from(&(-eta * &g_bar.theta));
    first_order.rows_mut(dt, delta.len() - dt).copy_from(&(eta * &g.omega));
    let mut c1 = first_order.clone();
    if scheme == Scheme::Alt {
        let h_bar = minibatch_hessian_blocks(model, dataset, &bar, params)?;
        let mut rows = c1.rows_mut(0, dt);
        rows -= eta * eta * (&h_bar.domega_gtheta * &g.omega);
    }
    let r1 = &delta - c1;
    let r2 = &delta * delta.transpose() - &first_order * first_order.transpose();
    Ok((r1, r2))
}

/// Residuals over an η-grid and their log-log slopes.
#[allow(clippy::too_many_arguments)]
pub fn one_step_order_study(
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    etas: &[f64],
    batch_size: usize,
    scheme: Scheme,
    mode: MomentMode,
) -> Result<OneStepStudy> {
    let reports = etas
        .iter()
        .map(|&eta| one_step_moment_compare(model, dataset, params, eta, batch_size, scheme, mode))
        .collect::<Result<Vec<_>>>()?;
    let first: Vec<f64> = reports.iter().map(|r| r.first_residual).collect();
    let second: Vec<f64> = reports.iter().map(|r| r.second_residual).collect();
    Ok(OneStepStudy {
        first_slope: fit_log_slope(etas, &first).map(|f| f.slope),
        second_slope: fit_log_slope(etas, &second).map(|f| f.slope),
        reports,
    })
}
