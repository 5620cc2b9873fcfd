//! Probe-based checks of dissipativity, ellipticity and the exponential
//! Lyapunov drift inequality `𝓛V ≤ -δV` for `V = exp(δt + ε‖u‖)`.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, JointParams, MinimaxModel, Vector};
use crate::rng::stream;
use crate::sde::{sde_coefficients, SdeCoefficients, SdeKind};

/// User-fixed Lyapunov constants; `l` defaults to the measured dissipativity rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LyapunovChoice {
    pub m: f64,
    pub epsilon: f64,
    pub l: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Inner radius of the probed shells.
    pub m0: f64,
    pub r_max: f64,
    pub count: usize,
    pub seed: u64,
    pub lyapunov: Option<LyapunovChoice>,
}

impl ProbeConfig {
    pub fn new(m0: f64, r_max: f64, count: usize, seed: u64) -> Self {
        Self { m0, r_max, count, seed, lyapunov: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DissipativityReport {
    pub m0: f64,
    pub r_max: f64,
    pub probes: usize,
    /// Largest `r` with `uᵀb(u) ≤ -r‖u‖` at every probe.
    pub r: f64,
    pub violated: bool,
    /// Probe attaining the minimum of `-uᵀb/‖u‖`.
    pub worst_probe: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovReport {
    pub m: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub l: f64,
    pub k_squared: f64,
    pub probes: usize,
    /// Largest `[𝓛V/V] + δ` over probes with `‖u‖ > M`; the inequality holds when it is `≤ 0`.
    pub max_margin: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub kind: String,
    pub dissipativity: DissipativityReport,
    /// Smallest eigenvalue of `σσᵀ` over all probes.
    pub min_ellipticity: f64,
    /// Largest `‖σ‖_F²` over all probes.
    pub k_squared: f64,
    /// Skipped when dissipativity fails.
    pub lyapunov: Option<LyapunovReport>,
}

/// `δ = -(1/2)[K²ε²/2 + (K²/2M - l)ε]`.
pub fn lyapunov_delta(k_squared: f64, l: f64, m: f64, epsilon: f64) -> f64 {
    -0.5 * (k_squared * epsilon * epsilon / 2.0 + (k_squared / (2.0 * m) - l) * epsilon)
}

/// `M = 1.1·max(K²/2l, M0)`, `ε = min(1, (2l/K² - 1/M)/2)`.
pub fn auto_lyapunov_constants(k_squared: f64, l: f64, m0: f64) -> (f64, f64) {
    let m = 1.1 * (k_squared / (2.0 * l)).max(m0);
    let upper = if k_squared > 0.0 { 2.0 * l / k_squared - 1.0 / m } else { f64::INFINITY };
    (m, (0.5 * upper).min(1.0))
}

/// `𝓛V/V` at `u` (the time factor cancels).
pub fn lyapunov_bracket(c: &SdeCoefficients, u: &Vector, epsilon: f64, delta: f64) -> f64 {
    let r = u.norm();
    let n = u.len();
    let weight = epsilon * r * r * crate::model::Matrix::identity(n, n) + (epsilon * epsilon * r - epsilon) * u * u.transpose();
    epsilon * u.dot(&c.drift) / r + delta + 0.5 * (c.diffusion() * weight).trace() / r.powi(3)
}

fn direction<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vector {
    loop {
        let v = Vector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Probes: every tenth lies on the inner shell `‖u‖ = inner`, the rest have radii uniform in `[inner, outer]`.
fn probes(n: usize, inner: f64, outer: f64, count: usize, seed: u64, stream_index: u64) -> Vec<Vector> {
    let mut rng = stream(seed, stream_index);
    (0..count)
        .map(|k| {
            let r = if k % 10 == 0 || outer <= inner { inner } else { rng.random_range(inner..=outer) };
            r * direction(n, &mut rng)
        })
        .collect()
}

pub fn convergence_condition_check(
    model: &MinimaxModel,
    dataset: &Dataset,
    eta: f64,
    batch_size: usize,
    kind: SdeKind,
    config: &ProbeConfig,
) -> Result<ConditionReport> {
    if !(config.m0 > 0.0) || !(config.r_max >= config.m0) || !config.r_max.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "probe radii must satisfy 0 < m0 <= r_max < inf, got m0={} r_max={}",
            config.m0, config.r_max
        )));
    }
    if config.count == 0 {
        return Err(Error::InvalidArgument("probe count must be at least 1".into()));
    }
    let n = model.dim();
    let d_theta = model.dims().0;
    let coeff = |u: &Vector| sde_coefficients(kind, model, dataset, &JointParams::from_stacked(u, d_theta), eta, batch_size);

    let mut r = f64::INFINITY;
    let mut worst = Vector::zeros(n);
    let mut min_ellipticity = f64::INFINITY;
    let mut k_squared: f64 = 0.0;
    for u in probes(n, config.m0, config.r_max, config.count, config.seed, 0) {
        let c = coeff(&u)?;
        let rate = -u.dot(&c.drift) / u.norm();
        if rate < r {
            r = rate;
            worst = u.clone();
        }
        let d = c.diffusion();
        let eig = SymmetricEigen::new(d).eigenvalues.min();
        min_ellipticity = min_ellipticity.min(eig);
        k_squared = k_squared.max(c.sigma.norm_squared());
    }
    let violated = !(r > 0.0);
    let dissipativity = DissipativityReport {
        m0: config.m0,
        r_max: config.r_max,
        probes: config.count,
        r,
        violated,
        worst_probe: worst.iter().copied().collect(),
    };

    let lyapunov = if violated {
        None
    } else {
        let (m, epsilon, l) = match config.lyapunov {
            Some(choice) => {
                let l = choice.l.unwrap_or(r);
                let floor = (k_squared / (2.0 * l)).max(config.m0);
                if !(choice.m > floor) {
                    return Err(Error::InvalidArgument(format!("Lyapunov M={} must exceed {floor}", choice.m)));
                }
                let upper = 2.0 * l / k_squared - 1.0 / choice.m;
                if !(choice.epsilon > 0.0 && choice.epsilon < upper) {
                    return Err(Error::InvalidArgument(format!(
                        "Lyapunov epsilon={} must lie in (0, {upper})",
                        choice.epsilon
                    )));
                }
                (choice.m, choice.epsilon, l)
            }
            None => {
                let (m, e) = auto_lyapunov_constants(k_squared, r, config.m0);
                (m, e, r)
            }
        };
        let delta = lyapunov_delta(k_squared, l, m, epsilon);
        let outer = config.r_max.max(m);
        let mut max_margin = f64::NEG_INFINITY;
        let mut count = 0;
        for u in probes(n, m, outer, config.count, config.seed, 1) {
            if !(u.norm() > m) {
                continue;
            }
            let c = coeff(&u)?;
            max_margin = max_margin.max(lyapunov_bracket(&c, &u, epsilon, delta) + delta);
            count += 1;
        }
        Some(LyapunovReport { m, epsilon, delta, l, k_squared, probes: count, max_margin, holds: count > 0 && max_margin <= 0.0 })
    };

    Ok(ConditionReport { kind: kind.name().into(), dissipativity, min_ellipticity, k_squared, lyapunov })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_matches_the_recipe_arithmetic() {
        let d = lyapunov_delta(0.05, 1.0, 1.1, 1.0);
        assert!((d - 0.476136).abs() < 5e-7, "{d}");
        let (m, e) = auto_lyapunov_constants(0.05, 1.0, 1.0);
        assert!((m - 1.1).abs() < 1e-15 && e == 1.0);
    }

    #[test]
    fn quad_sim_is_dissipative_at_rate_one() {
        let m = MinimaxModel::quad_sim(1.0, 1.0, 0.0, 1.0).unwrap();
        let rep = convergence_condition_check(&m, &Dataset::placeholder(1), 0.1, 4, SdeKind::SmlSde, &ProbeConfig::new(1.0, 10.0, 1000, 1)).unwrap();
        assert!((rep.dissipativity.r - 1.0).abs() < 1e-12);
        assert!((rep.k_squared - 0.05).abs() < 1e-15);
        assert!((rep.min_ellipticity - 0.025).abs() < 1e-15);
        let l = rep.lyapunov.unwrap();
        assert!(l.holds && (l.delta - 0.476136).abs() < 5e-7);
    }

    #[test]
    fn bilinear_rotation_is_reported() {
        let m = MinimaxModel::lin_wgan();
        let d = Dataset::scalar(&[1.0, 3.0], &[2.0, 0.0]).unwrap();
        let rep = convergence_condition_check(&m, &d, 0.1, 1, SdeKind::SmlSde, &ProbeConfig::new(1.0, 100.0, 500, 2)).unwrap();
        assert!(rep.dissipativity.violated && rep.lyapunov.is_none());
    }

    #[test]
    fn user_constants_are_validated() {
        let m = MinimaxModel::quad_sim(1.0, 1.0, 0.0, 1.0).unwrap();
        let mut cfg = ProbeConfig::new(1.0, 10.0, 100, 1);
        cfg.lyapunov = Some(LyapunovChoice { m: 0.5, epsilon: 1.0, l: Some(1.0) });
        assert!(convergence_condition_check(&m, &Dataset::placeholder(1), 0.1, 4, SdeKind::SmlSde, &cfg).is_err());
    }
}
