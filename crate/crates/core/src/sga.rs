//! Discrete alternating (ALT) and simultaneous (SML) stochastic gradient
//! descent-ascent.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, JointParams, MinimaxModel, Vector};
use crate::rng::{stream, Stream};
use crate::stats::{full_gradients, minibatch_gradients, Minibatch};

/// Parameter norm beyond which a run is aborted.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Alt,
    Sml,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Alt => "ALT",
            Scheme::Sml => "SML",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alt" => Ok(Scheme::Alt),
            "sml" => Ok(Scheme::Sml),
            _ => Err(Error::InvalidArgument(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgaConfig {
    pub scheme: Scheme,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub record_every: usize,
    /// Record Φ and gradient norms alongside states (costs one pass over the dataset per record).
    pub record_stats: bool,
}

impl SgaConfig {
    pub fn new(scheme: Scheme, eta: f64, batch_size: usize, steps: usize, seed: u64) -> Self {
        Self { scheme, eta, batch_size, steps, seed, record_every: 1, record_stats: true }
    }

    /// `⌊T/η⌋` steps for horizon `T`.
    pub fn from_horizon(scheme: Scheme, eta: f64, batch_size: usize, horizon: f64, seed: u64) -> Result<Self> {
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!("horizon must be finite and >= 0, got {horizon}")));
        }
        let config = Self::new(scheme, eta, batch_size, steps_for_horizon(horizon, eta), seed);
        config.validate()?;
        if horizon > 0.0 && eta >= horizon {
            return Err(Error::InvalidArgument(format!(
                "eta must lie in (0, min(1, T)); got eta={eta}, T={horizon}"
            )));
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidArgument(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of whole steps of size `eta` in `[0, horizon]`.
pub fn steps_for_horizon(horizon: f64, eta: f64) -> usize {
    (horizon / eta + 1e-9).floor() as usize
}

/// Initial law of `(θ_0, ω_0)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Initialization {
    Point(JointParams),
    /// Independent normal coordinates around `mean`.
    Gaussian { mean: JointParams, std: f64 },
}

impl Initialization {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> JointParams {
        match self {
            Initialization::Point(p) => p.clone(),
            Initialization::Gaussian { mean, std } => {
                let mut p = mean.clone();
                for v in p.theta.iter_mut().chain(p.omega.iter_mut()) {
                    let xi: f64 = rng.sample(StandardNormal);
                    *v += std * xi;
                }
                p
            }
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Initialization::Point(p) | Initialization::Gaussian { mean: p, .. } => p.dims(),
        }
    }
}

impl From<JointParams> for Initialization {
    fn from(p: JointParams) -> Self {
        Initialization::Point(p)
    }
}

/// Per-record diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordStats {
    pub phi: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_omega: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Step index of each record (SGA step, or `t/η` rounded for SDE paths).
    pub steps: Vec<usize>,
    /// Continuous time of each record, `step·η`.
    pub times: Vec<f64>,
    pub states: Vec<JointParams>,
    pub stats: Option<Vec<RecordStats>>,
    /// `(m, max_t ‖(θ_t, ω_t)‖^m)` over every step, recorded or not.
    pub moment_monitors: Vec<(u32, f64)>,
}

impl Trajectory {
    pub fn new(initial: JointParams, stats: Option<RecordStats>, orders: &[u32]) -> Self {
        let norm = initial.norm();
        Self {
            steps: vec![0],
            times: vec![0.0],
            states: vec![initial],
            stats: stats.map(|s| vec![s]),
            moment_monitors: orders.iter().map(|&m| (m, norm.powi(m as i32))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &JointParams {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn observe(&mut self, state: &JointParams) {
        let norm = state.norm();
        for (m, max) in &mut self.moment_monitors {
            *max = max.max(norm.powi(*m as i32));
        }
    }

    pub fn push(&mut self, step: usize, time: f64, state: JointParams, stats: Option<RecordStats>) {
        self.steps.push(step);
        self.times.push(time);
        self.states.push(state);
        if let (Some(all), Some(s)) = (&mut self.stats, stats) {
            all.push(s);
        }
    }

    pub fn phi(&self) -> Option<Vec<f64>> {
        self.stats.as_ref().map(|s| s.iter().map(|r| r.phi).collect())
    }

    /// CSV with header `step,[time,]theta_0..,omega_0..,phi,grad_norm_theta,grad_norm_omega`.
    pub fn write_csv<W: Write>(&self, writer: W, with_time: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let (dt, dw) = self.states[0].dims();
        let mut header = vec!["step".to_string()];
        if with_time {
            header.push("time".into());
        }
        header.extend((0..dt).map(|k| format!("theta_{k}")));
        header.extend((0..dw).map(|k| format!("omega_{k}")));
        header.extend(["phi", "grad_norm_theta", "grad_norm_omega"].map(String::from));
        w.write_record(&header)?;
        for (k, state) in self.states.iter().enumerate() {
            let mut row = vec![self.steps[k].to_string()];
            if with_time {
                row.push(self.times[k].to_string());
            }
            row.extend(state.theta.iter().chain(state.omega.iter()).map(|v| v.to_string()));
            match &self.stats {
                Some(s) => row.extend(
                    [s[k].phi, s[k].grad_norm_theta, s[k].grad_norm_omega].map(|v| v.to_string()),
                ),
                None => row.extend(["", "", ""].map(String::from)),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn record_stats(model: &MinimaxModel, dataset: &Dataset, params: &JointParams) -> Result<RecordStats> {
    let g = full_gradients(model, dataset, params)?;
    Ok(RecordStats {
        phi: model.evaluate_loss(dataset, params)?,
        grad_norm_theta: g.theta.norm(),
        grad_norm_omega: g.omega.norm(),
    })
}

fn check_update(next: JointParams, prev: &JointParams, eta: f64, scheme: Scheme) -> Result<JointParams> {
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::NonFinite(format!("{scheme} update with eta={eta} from {prev} gave {next}")))
    }
}

/// ALT update with given batches: ω first on `batch`, then θ on `batch_bar` at the new ω.
pub fn alt_step_with(
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch: &Minibatch,
    batch_bar: &Minibatch,
) -> Result<JointParams> {
    let g = minibatch_gradients(model, dataset, batch, params)?;
    let omega = &params.omega + eta * g.omega;
    let mid = JointParams { theta: params.theta.clone(), omega };
    let g_bar = minibatch_gradients(model, dataset, batch_bar, &mid)?;
    let theta = &params.theta - eta * g_bar.theta;
    check_update(JointParams { theta, omega: mid.omega }, params, eta, Scheme::Alt)
}

/// SML update with one shared batch, both players at the old state.
pub fn sml_step_with(
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch: &Minibatch,
) -> Result<JointParams> {
    let g = minibatch_gradients(model, dataset, batch, params)?;
    let next = JointParams {
        theta: &params.theta - eta * g.theta,
        omega: &params.omega + eta * g.omega,
    };
    check_update(next, params, eta, Scheme::Sml)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta >= 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("eta must be finite and >= 0, got {eta}")))
    }
}

pub fn alt_step<R: Rng + ?Sized>(
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<JointParams> {
    check_eta(eta)?;
    let batch = Minibatch::sample(model, dataset, batch_size, rng)?;
    let batch_bar = Minibatch::sample(model, dataset, batch_size, rng)?;
    alt_step_with(model, dataset, params, eta, &batch, &batch_bar)
}

pub fn sml_step<R: Rng + ?Sized>(
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<JointParams> {
    check_eta(eta)?;
    let batch = Minibatch::sample(model, dataset, batch_size, rng)?;
    sml_step_with(model, dataset, params, eta, &batch)
}

pub fn step<R: Rng + ?Sized>(
    scheme: Scheme,
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
    eta: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<JointParams> {
    match scheme {
        Scheme::Alt => alt_step(model, dataset, params, eta, batch_size, rng),
        Scheme::Sml => sml_step(model, dataset, params, eta, batch_size, rng),
    }
}

pub fn check_divergence(step: usize, state: &JointParams) -> Result<()> {
    let norm = state.norm();
    if norm > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { step, norm, limit: DIVERGENCE_LIMIT });
    }
    Ok(())
}

/// One trajectory driven by an explicit random stream.
pub fn run_sga_with<R: Rng + ?Sized>(
    model: &MinimaxModel,
    dataset: &Dataset,
    config: &SgaConfig,
    initial: &JointParams,
    monitors: &[u32],
    rng: &mut R,
) -> Result<Trajectory> {
    config.validate()?;
    model.check_params(initial)?;
    let stats = |p: &JointParams| -> Result<Option<RecordStats>> {
        if config.record_stats {
            record_stats(model, dataset, p).map(Some)
        } else {
            Ok(None)
        }
    };
    let mut traj = Trajectory::new(initial.clone(), stats(initial)?, monitors);
    let mut state = initial.clone();
    for k in 1..=config.steps {
        state = step(config.scheme, model, dataset, &state, config.eta, config.batch_size, rng)?;
        check_divergence(k, &state)?;
        traj.observe(&state);
        if k % config.record_every == 0 {
            traj.push(k, k as f64 * config.eta, state.clone(), stats(&state)?);
        }
    }
    Ok(traj)
}

/// One trajectory on stream `(seed, 0)`.
pub fn run_sga(
    model: &MinimaxModel,
    dataset: &Dataset,
    config: &SgaConfig,
    initial: &JointParams,
    monitors: &[u32],
) -> Result<Trajectory> {
    run_sga_with(model, dataset, config, initial, monitors, &mut stream(config.seed, 0))
}

/// Independent replicas on streams `(seed, r)`; the initial state of each
/// replica is drawn from its own stream.
pub fn run_sga_replicas(
    model: &MinimaxModel,
    dataset: &Dataset,
    config: &SgaConfig,
    initial: &Initialization,
    replicas: usize,
    monitors: &[u32],
) -> Result<Vec<Trajectory>> {
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng: Stream = stream(config.seed, r as u64);
            let start = initial.draw(&mut rng);
            run_sga_with(model, dataset, config, &start, monitors, &mut rng)
        })
        .collect()
}

/// Running ensemble moment `max_t (1/R) Σ_r ‖u_t^r‖^m` over the recorded times.
pub fn ensemble_moment_max(trajectories: &[Trajectory], m: u32) -> f64 {
    let records = trajectories.iter().map(Trajectory::len).min().unwrap_or(0);
    (0..records)
        .map(|k| {
            trajectories.iter().map(|t| t.states[k].norm().powi(m as i32)).sum::<f64>()
                / trajectories.len() as f64
        })
        .fold(0.0, f64::max)
}

/// Stacked state vectors of every record.
pub fn stacked_states(traj: &Trajectory) -> Vec<Vector> {
    traj.states.iter().map(JointParams::stacked).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::enumerate_batches;

    fn lin() -> (MinimaxModel, Dataset) {
        (MinimaxModel::lin_wgan(), Dataset::scalar(&[1.0, 3.0], &[2.0, 0.0]).unwrap())
    }

    #[test]
    fn full_batch_steps() {
        let (m, d) = lin();
        let p = JointParams::scalar(1.0, 1.0);
        let full = Minibatch::full(&d);
        let a = alt_step_with(&m, &d, &p, 0.1, &full, &full).unwrap();
        assert!((a.omega[0] - 0.9).abs() < 1e-15 && (a.theta[0] - 1.18).abs() < 1e-15);
        let s = sml_step_with(&m, &d, &p, 0.1, &full).unwrap();
        assert!((s.theta[0] - 1.2).abs() < 1e-15 && (s.omega[0] - 0.9).abs() < 1e-15);
        let q = MinimaxModel::quad_sim(1.0, 1.0, 0.0, 0.0).unwrap();
        let s = sml_step_with(&q, &Dataset::placeholder(1), &JointParams::scalar(2.0, 3.0), 0.1, &Minibatch::full(&Dataset::placeholder(1))).unwrap();
        assert!((s.theta[0] - 1.8).abs() < 1e-15 && (s.omega[0] - 2.7).abs() < 1e-15);
    }

    #[test]
    fn zero_step_is_identity() {
        let (m, d) = lin();
        let p = JointParams::scalar(0.3, -0.7);
        let mut rng = stream(1, 0);
        assert_eq!(alt_step(&m, &d, &p, 0.0, 2, &mut rng).unwrap(), p);
        assert_eq!(sml_step(&m, &d, &p, 0.0, 2, &mut rng).unwrap(), p);
    }

    #[test]
    fn enumerated_alt_mean_and_gap() {
        let (m, d) = lin();
        let p = JointParams::scalar(1.0, 1.0);
        let mut alt = 0.0;
        let mut count = 0;
        for b in enumerate_batches(&d, 1).unwrap() {
            for bb in enumerate_batches(&d, 1).unwrap() {
                alt += alt_step_with(&m, &d, &p, 0.1, &b, &bb).unwrap().theta[0] - 1.0;
                count += 1;
            }
        }
        assert_eq!(count, 16);
        alt /= 16.0;
        let sml = enumerate_batches(&d, 1)
            .unwrap()
            .map(|b| sml_step_with(&m, &d, &p, 0.1, &b).unwrap().theta[0] - 1.0)
            .sum::<f64>()
            / 4.0;
        assert!((alt - 0.18).abs() < 1e-14, "{alt}");
        assert!((sml - 0.20).abs() < 1e-14);
        assert!((alt - sml + 0.02).abs() < 1e-14);
    }

    #[test]
    fn noiseless_quad_contracts() {
        let q = MinimaxModel::quad_sim(1.0, 1.0, 0.0, 0.0).unwrap();
        let d = Dataset::placeholder(1);
        let cfg = SgaConfig::new(Scheme::Sml, 0.1, 1, 100, 0);
        let t = run_sga(&q, &d, &cfg, &JointParams::scalar(2.0, 3.0), &[2]).unwrap();
        assert!(t.last().norm() < 1e-3);
        assert_eq!(t.len(), 101);
        assert!((t.moment_monitors[0].1 - 13.0).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_and_determinism() {
        let (m, d) = lin();
        let p = JointParams::scalar(1.0, 1.0);
        let cfg = SgaConfig::new(Scheme::Alt, 0.1, 1, 0, 9);
        assert_eq!(run_sga(&m, &d, &cfg, &p, &[]).unwrap().len(), 1);
        let cfg = SgaConfig::new(Scheme::Alt, 0.1, 1, 10, 9);
        let a = run_sga(&m, &d, &cfg, &p, &[]).unwrap();
        let b = run_sga(&m, &d, &cfg, &p, &[]).unwrap();
        assert_eq!(a, b);
        let s = run_sga(&m, &d, &SgaConfig { scheme: Scheme::Sml, ..cfg }, &p, &[]).unwrap();
        assert!((a.last().stacked() - s.last().stacked()).norm() > 0.0);
    }

    #[test]
    fn divergence_guard_fires() {
        let (m, d) = lin();
        let cfg = SgaConfig::new(Scheme::Sml, 0.9, 1, 10_000, 1);
        let err = run_sga(&m, &d, &cfg, &JointParams::scalar(1.0, 1.0), &[]).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn horizon_and_validation() {
        assert_eq!(SgaConfig::from_horizon(Scheme::Alt, 0.1, 1, 1.0, 0).unwrap().steps, 10);
        assert_eq!(SgaConfig::from_horizon(Scheme::Alt, 0.025, 1, 1.0, 0).unwrap().steps, 40);
        assert!(SgaConfig::from_horizon(Scheme::Alt, 0.5, 1, 0.4, 0).is_err());
        assert!(SgaConfig::new(Scheme::Alt, -0.1, 1, 1, 0).validate().is_err());
    }

    #[test]
    fn csv_schema() {
        let (m, d) = lin();
        let cfg = SgaConfig::new(Scheme::Alt, 0.1, 1, 2, 3);
        let t = run_sga(&m, &d, &cfg, &JointParams::scalar(1.0, 1.0), &[]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,theta_0,omega_0,phi,grad_norm_theta,grad_norm_omega\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
