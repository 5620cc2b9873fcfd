//! Learning-rate decay driven by the FDR2 ratio
//! `[Θ_tᵀg^B_θ - W_tᵀg^B_ω] / [β⁻¹Tr(Σ̂_θ + Σ̂_ω)]`.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::stationary::{StationarityDiagnostic, DIAGNOSTIC_FLOOR};
use crate::harness::integrated_autocorrelation_time;
use crate::model::{Dataset, GradientPair, JointParams, Matrix, MinimaxModel};
use crate::rng::stream;
use crate::sga::{check_divergence, record_stats, sml_step_with, Scheme, SgaConfig, Trajectory};
use crate::stats::{batch_statistics, sample_gradients, Minibatch};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchedulerState {
    pub eta: f64,
    pub eta_initial: f64,
    pub epsilon_tol: f64,
    pub delta_decay: f64,
    pub batch_size: usize,
    /// Always `2B/η`.
    pub beta: f64,
    pub window: usize,
    pub eta_min: f64,
}

impl SchedulerState {
    pub fn new(eta: f64, epsilon_tol: f64, delta_decay: f64, batch_size: usize, window: usize, eta_min: f64) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::InvalidArgument(format!("eta must lie in (0, 1), got {eta}")));
        }
        if !(eta_min > 0.0 && eta_min <= eta) {
            return Err(Error::InvalidArgument(format!("eta_min must lie in (0, eta], got {eta_min}")));
        }
        if !(epsilon_tol >= 0.0) || !epsilon_tol.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon_tol must be >= 0, got {epsilon_tol}")));
        }
        if !(0.0..1.0).contains(&delta_decay) {
            return Err(Error::InvalidArgument(format!("delta_decay must lie in [0, 1), got {delta_decay}")));
        }
        if batch_size < 2 {
            return Err(Error::EstimatorUndefined(batch_size));
        }
        if window == 0 {
            return Err(Error::InvalidArgument("window must be at least 1".into()));
        }
        Ok(Self {
            eta,
            eta_initial: eta,
            epsilon_tol,
            delta_decay,
            batch_size,
            beta: crate::sde::beta(eta, batch_size),
            window,
            eta_min,
        })
    }

    pub fn triggers(&self, ratio: f64) -> bool {
        (ratio - 1.0).abs() < self.epsilon_tol
    }
}

/// `η ← max((1-δ)η, η_min)` when `|ratio - 1| < ε`, with β recomputed.
pub fn scheduler_step(state: &SchedulerState, ratio: f64) -> SchedulerState {
    let mut next = state.clone();
    if state.triggers(ratio) {
        next.eta = ((1.0 - state.delta_decay) * state.eta).max(state.eta_min);
        next.beta = crate::sde::beta(next.eta, state.batch_size);
    }
    next
}

/// Numerator and denominator of the ratio.
pub fn fdr2_terms(params: &JointParams, g: &GradientPair, sigma_theta: &Matrix, sigma_omega: &Matrix, beta: f64) -> (f64, f64) {
    let num = params.theta.dot(&g.theta) - params.omega.dot(&g.omega);
    let den = (sigma_theta.trace() + sigma_omega.trace()) / beta;
    (num, den)
}

/// `None` when the denominator vanishes (undefined ratio, step skipped).
pub fn fdr2_ratio(params: &JointParams, g: &GradientPair, sigma_theta: &Matrix, sigma_omega: &Matrix, beta: f64) -> Option<f64> {
    let (num, den) = fdr2_terms(params, g, sigma_theta, sigma_omega, beta);
    (den > 0.0 && den.is_finite()).then(|| num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleRecord {
    pub step: usize,
    /// Rate used for this step.
    pub eta: f64,
    /// Per-step ratio; `None` when undefined.
    pub ratio: Option<f64>,
    /// Set on the last step of a window whose ratio fired the rule.
    pub triggered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowRecord {
    pub end_step: usize,
    pub eta_before: f64,
    pub eta_after: f64,
    /// `Σ numerators / Σ denominators` over the defined steps of the window.
    pub ratio: Option<f64>,
    pub triggered: bool,
    /// Split-half check of Φ within the window.
    pub diagnostic: StationarityDiagnostic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduledRun {
    pub trajectory: Trajectory,
    pub records: Vec<ScheduleRecord>,
    pub windows: Vec<WindowRecord>,
    pub final_state: SchedulerState,
}

impl ScheduledRun {
    /// CSV `step,eta,ratio,triggered`; undefined ratios are left empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "eta", "ratio", "triggered"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.eta.to_string(),
                r.ratio.map(|v| v.to_string()).unwrap_or_default(),
                r.triggered.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Index of the first window whose diagnostic passed.
    pub fn first_stationary_window(&self) -> Option<usize> {
        self.windows.iter().position(|w| w.diagnostic.passed)
    }

    pub fn first_trigger_window(&self) -> Option<usize> {
        self.windows.iter().position(|w| w.triggered)
    }
}

/// Split-half comparison of one series; the standard error of each half mean
/// is `sqrt(v τ / n)` with variance `v` and autocorrelation time `τ` taken
/// from the second half, i.e. the null hypothesis is that the first half
/// follows the law of the second.
pub fn window_diagnostic(series: &[f64]) -> StationarityDiagnostic {
    let h = series.len() / 2;
    let (a, b) = series.split_at(h);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let first_half = mean(a);
    let second_half = mean(b);
    let var = if b.len() > 1 {
        b.iter().map(|v| (v - second_half).powi(2)).sum::<f64>() / (b.len() - 1) as f64
    } else {
        0.0
    };
    let tau = integrated_autocorrelation_time(b);
    let standard_error = (var * tau * (1.0 / a.len().max(1) as f64 + 1.0 / b.len().max(1) as f64)).sqrt();
    let difference = first_half - second_half;
    let passed = !a.is_empty() && difference.abs() <= 3.0 * standard_error + DIAGNOSTIC_FLOOR;
    StationarityDiagnostic { first_half, second_half, difference, standard_error, passed }
}

/// SML training with the rule applied at the end of every window, on stream `(seed, 0)`.
pub fn scheduled_run(
    model: &MinimaxModel,
    dataset: &Dataset,
    config: &SgaConfig,
    state: SchedulerState,
    initial: &JointParams,
) -> Result<ScheduledRun> {
    scheduled_run_with(model, dataset, config, state, initial, &mut stream(config.seed, 0))
}

pub fn scheduled_run_with<R: Rng + ?Sized>(
    model: &MinimaxModel,
    dataset: &Dataset,
    config: &SgaConfig,
    mut state: SchedulerState,
    initial: &JointParams,
    rng: &mut R,
) -> Result<ScheduledRun> {
    if config.scheme != Scheme::Sml {
        return Err(Error::InvalidArgument("the scheduler drives the simultaneous scheme only".into()));
    }
    if config.batch_size != state.batch_size {
        return Err(Error::InvalidArgument(format!(
            "batch size {} differs from the scheduler's {}",
            config.batch_size, state.batch_size
        )));
    }
    model.check_params(initial)?;
    let phi0 = record_stats(model, dataset, initial)?;
    let mut trajectory = Trajectory::new(initial.clone(), Some(phi0.clone()), &[]);
    let mut records = Vec::with_capacity(config.steps);
    let mut windows = Vec::new();
    let mut params = initial.clone();
    let mut time = 0.0;
    let (mut num_sum, mut den_sum) = (0.0, 0.0);
    let mut phi_window = Vec::with_capacity(state.window);
    for k in 1..=config.steps {
        let batch = Minibatch::sample(model, dataset, state.batch_size, rng)?;
        let samples = sample_gradients(model, dataset, &batch, &params)?;
        let (g, st, sw) = batch_statistics(&samples);
        let (num, den) = fdr2_terms(&params, &g, &st, &sw, state.beta);
        let ratio = (den > 0.0 && den.is_finite()).then(|| num / den);
        if ratio.is_some() {
            num_sum += num;
            den_sum += den;
        }
        let eta = state.eta;
        params = sml_step_with(model, dataset, &params, eta, &batch)?;
        check_divergence(k, &params)?;
        time += eta;
        let stats = record_stats(model, dataset, &params)?;
        phi_window.push(stats.phi);
        trajectory.observe(&params);
        if k % config.record_every == 0 {
            trajectory.push(k, time, params.clone(), Some(stats));
        }
        let mut triggered = false;
        if k % state.window == 0 {
            let window_ratio = (den_sum > 0.0).then(|| num_sum / den_sum);
            let next = match window_ratio {
                Some(r) => scheduler_step(&state, r),
                None => state.clone(),
            };
            triggered = window_ratio.is_some_and(|r| state.triggers(r));
            windows.push(WindowRecord {
                end_step: k,
                eta_before: state.eta,
                eta_after: next.eta,
                ratio: window_ratio,
                triggered,
                diagnostic: window_diagnostic(&phi_window),
            });
            state = next;
            num_sum = 0.0;
            den_sum = 0.0;
            phi_window.clear();
        }
        records.push(ScheduleRecord { step: k, eta, ratio, triggered });
    }
    Ok(ScheduledRun { trajectory, records, windows, final_state: state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vector;

    fn state() -> SchedulerState {
        SchedulerState::new(0.1, 0.01, 0.1, 4, 100, 0.01).unwrap()
    }

    #[test]
    fn decay_rule_examples() {
        let s = scheduler_step(&state(), 1.005);
        assert!((s.eta - 0.09).abs() < 1e-15);
        assert_eq!(s.beta, 8.0 / s.eta);
        assert_eq!(scheduler_step(&state(), 2.0), state());
        let mut floor = state();
        floor.eta = 0.01;
        floor.beta = 800.0;
        assert_eq!(scheduler_step(&floor, 1.0).eta, 0.01);
    }

    #[test]
    fn ratio_examples() {
        let origin = JointParams::scalar(0.0, 0.0);
        let g = GradientPair::zeros(1, 1);
        let one = Matrix::identity(1, 1);
        assert_eq!(fdr2_ratio(&origin, &g, &one, &one, 80.0), Some(0.0));
        assert_eq!(fdr2_ratio(&origin, &g, &Matrix::zeros(1, 1), &Matrix::zeros(1, 1), 80.0), None);
        let p = JointParams::scalar(0.1, 0.1);
        let g = GradientPair { theta: Vector::from_element(1, 0.1), omega: Vector::from_element(1, -0.1) };
        // (0.01 + 0.01) / (2/80)
        assert!((fdr2_ratio(&p, &g, &one, &one, 80.0).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_decay_keeps_eta() {
        let m = MinimaxModel::quad_sim(1.0, 1.0, 0.0, 1.0).unwrap();
        let d = Dataset::placeholder(1);
        let cfg = SgaConfig::new(Scheme::Sml, 0.1, 4, 5000, 7);
        let s = SchedulerState::new(0.1, 0.5, 0.0, 4, 100, 0.01).unwrap();
        let run = scheduled_run(&m, &d, &cfg, s, &JointParams::scalar(1.0, 0.0)).unwrap();
        assert!(run.records.iter().all(|r| r.eta == 0.1));
    }

    #[test]
    fn rejects_the_alternating_scheme() {
        let m = MinimaxModel::quad_sim(1.0, 1.0, 0.0, 1.0).unwrap();
        let cfg = SgaConfig::new(Scheme::Alt, 0.1, 4, 10, 7);
        assert!(scheduled_run(&m, &Dataset::placeholder(1), &cfg, state(), &JointParams::scalar(0.0, 0.0)).is_err());
    }

    #[test]
    fn noiseless_ratio_is_undefined() {
        let m = MinimaxModel::quad_sim(1.0, 1.0, 0.0, 0.0).unwrap();
        let cfg = SgaConfig::new(Scheme::Sml, 0.1, 4, 200, 7);
        let run = scheduled_run(&m, &Dataset::placeholder(1), &cfg, state(), &JointParams::scalar(1.0, 0.0)).unwrap();
        assert!(run.records.iter().all(|r| r.ratio.is_none() && !r.triggered));
    }
}
