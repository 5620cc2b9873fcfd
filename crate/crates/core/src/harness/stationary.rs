//! Long-run sampling of the invariant measure and its diagnostics.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, JointParams, MinimaxModel, ModelKind, Vector};
use crate::sde::{em_replicas, IntegratorConfig, SdeKind};
use crate::sga::{run_sga_replicas, Initialization, Scheme, SgaConfig, Trajectory};

use super::{batch_means, fit_line, integrated_autocorrelation_time, mean_se};

/// Absolute slack added to the split-half bound so that a collapsed (noise-free) run passes.
pub const DIAGNOSTIC_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Engine {
    Sga(Scheme),
    Sde(SdeKind),
}

impl Engine {
    /// Whether FDR1 carries the η-correction for measures from this engine.
    pub fn is_alternating(self) -> bool {
        match self {
            Engine::Sga(s) => s == Scheme::Alt,
            Engine::Sde(k) => k.is_alternating(),
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Engine::Sga(s) => write!(f, "{s}"),
            Engine::Sde(k) => write!(f, "{}", k.name()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Post-burn-in, thinned states of every replica.
    TimeAverage,
    /// Final states across replicas.
    Ensemble,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationaryConfig {
    pub engine: Engine,
    pub eta: f64,
    pub batch_size: usize,
    pub horizon: f64,
    pub replicas: usize,
    pub burn_in_fraction: f64,
    /// Keep every `thin`-th record; `None` uses `⌈τ⌉` of the Φ series.
    pub thin: Option<usize>,
    pub mode: SamplingMode,
    pub seed: u64,
    /// SDE inner step; `None` means η/100.
    pub inner_step: Option<f64>,
    pub initial: Initialization,
    /// Required for models without a dissipativity guarantee.
    pub acknowledge_non_dissipative: bool,
}

impl StationaryConfig {
    pub fn new(engine: Engine, eta: f64, batch_size: usize, horizon: f64, initial: impl Into<Initialization>) -> Self {
        Self {
            engine,
            eta,
            batch_size,
            horizon,
            replicas: 16,
            burn_in_fraction: 0.5,
            thin: None,
            mode: SamplingMode::TimeAverage,
            seed: 0,
            inner_step: None,
            initial: initial.into(),
            acknowledge_non_dissipative: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    TimeAverage { burn_in_fraction: f64, thin: usize, replicas: usize },
    Ensemble { replicas: usize, time: f64 },
    /// Draws from a closed-form law.
    Oracle,
    /// Caller-supplied states.
    Supplied,
}

/// Split-half comparison of Φ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StationarityDiagnostic {
    pub first_half: f64,
    pub second_half: f64,
    pub difference: f64,
    pub standard_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    pub samples: Vec<JointParams>,
    /// Φ at each sample.
    pub phi: Vec<f64>,
    pub engine: Option<Engine>,
    pub provenance: Provenance,
    pub diagnostic: Option<StationarityDiagnostic>,
}

impl EmpiricalMeasure {
    pub fn from_samples(model: &MinimaxModel, dataset: &Dataset, samples: Vec<JointParams>, engine: Option<Engine>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySample("no samples".into()));
        }
        let phi = samples.iter().map(|p| model.evaluate_loss(dataset, p)).collect::<Result<_>>()?;
        Ok(Self { samples, phi, engine, provenance: Provenance::Supplied, diagnostic: None })
    }

    pub fn point_mass(model: &MinimaxModel, dataset: &Dataset, params: JointParams) -> Result<Self> {
        Self::from_samples(model, dataset, vec![params], None)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn stacked(&self) -> Vec<Vector> {
        self.samples.iter().map(JointParams::stacked).collect()
    }

    /// Sample mean of the stacked states.
    pub fn mean(&self) -> Vector {
        let n = self.samples.len() as f64;
        self.stacked().iter().fold(Vector::zeros(self.samples[0].dim()), |acc, u| acc + u) / n
    }

    /// Sample covariance (divisor `n - 1`, zero for a single sample).
    pub fn covariance(&self) -> crate::model::Matrix {
        let d = self.samples[0].dim();
        let n = self.samples.len();
        let m = self.mean();
        let mut c = crate::model::Matrix::zeros(d, d);
        if n < 2 {
            return c;
        }
        for u in self.stacked() {
            let v = u - &m;
            c += &v * v.transpose();
        }
        c / (n as f64 - 1.0)
    }

    /// Mean and batch-means SE of a statistic of the stacked state.
    pub fn statistic(&self, f: impl Fn(&Vector) -> f64) -> (f64, f64) {
        let vals: Vec<f64> = self.stacked().iter().map(f).collect();
        batch_means(&vals, 32)
    }
}

fn check_preconditions(model: &MinimaxModel, dataset: &Dataset, config: &StationaryConfig) -> Result<()> {
    if model.kind() != ModelKind::QuadSim && !config.acknowledge_non_dissipative {
        return Err(Error::InvalidArgument(format!(
            "{} has no dissipativity guarantee; set acknowledge_non_dissipative to sample it anyway",
            model.kind()
        )));
    }
    if !(0.0..=1.0).contains(&config.burn_in_fraction) {
        return Err(Error::InvalidArgument(format!(
            "burn_in_fraction must lie in [0, 1), got {}",
            config.burn_in_fraction
        )));
    }
    if config.burn_in_fraction >= 1.0 {
        return Err(Error::EmptySample("burn_in_fraction = 1 discards every record".into()));
    }
    if config.replicas == 0 {
        return Err(Error::InvalidArgument("replicas must be at least 1".into()));
    }
    if config.thin == Some(0) {
        return Err(Error::InvalidArgument("thin must be at least 1".into()));
    }
    model.check_dataset(dataset)?;
    Ok(())
}

/// Simulates the replicas with Φ recorded at every multiple of η.
pub fn simulate_replicas(model: &MinimaxModel, dataset: &Dataset, config: &StationaryConfig) -> Result<Vec<Trajectory>> {
    match config.engine {
        Engine::Sga(scheme) => {
            let mut cfg = SgaConfig::from_horizon(scheme, config.eta, config.batch_size, config.horizon, config.seed)?;
            cfg.record_stats = true;
            run_sga_replicas(model, dataset, &cfg, &config.initial, config.replicas, &[])
        }
        Engine::Sde(kind) => {
            let mut cfg = IntegratorConfig::new(config.horizon, config.seed);
            cfg.inner_step = config.inner_step;
            cfg.record_stats = true;
            em_replicas(kind, model, dataset, &config.initial, config.eta, config.batch_size, &cfg, config.replicas)
        }
    }
}

fn phi_series(traj: &Trajectory) -> Vec<f64> {
    traj.phi().expect("replicas are recorded with statistics")
}

/// Paired split-half test: per replica, mean Φ over the first half of `series`
/// minus the second half; the SE is across replicas, or from batch means for one replica.
pub fn split_half_diagnostic(series: &[Vec<f64>]) -> StationarityDiagnostic {
    let halves: Vec<(f64, f64)> = series
        .iter()
        .map(|s| {
            let h = s.len() / 2;
            let a = s[..h].iter().sum::<f64>() / h.max(1) as f64;
            let b = s[h..].iter().sum::<f64>() / (s.len() - h).max(1) as f64;
            (a, b)
        })
        .collect();
    let r = halves.len() as f64;
    let first_half = halves.iter().map(|p| p.0).sum::<f64>() / r;
    let second_half = halves.iter().map(|p| p.1).sum::<f64>() / r;
    let (difference, standard_error) = if series.len() >= 2 {
        let diffs: Vec<f64> = halves.iter().map(|(a, b)| a - b).collect();
        mean_se(&diffs)
    } else {
        let s = &series[0];
        let h = s.len() / 2;
        let (_, se1) = batch_means(&s[..h], 16);
        let (_, se2) = batch_means(&s[h..], 16);
        (first_half - second_half, se1.hypot(se2))
    };
    let passed = difference.abs() <= 3.0 * standard_error + DIAGNOSTIC_FLOOR;
    StationarityDiagnostic { first_half, second_half, difference, standard_error, passed }
}

/// Runs the engine and returns the post-burn-in sample; fails with
/// `NotStationary` when the split-half diagnostic rejects.
pub fn stationary_sample(model: &MinimaxModel, dataset: &Dataset, config: &StationaryConfig) -> Result<EmpiricalMeasure> {
    check_preconditions(model, dataset, config)?;
    let runs = simulate_replicas(model, dataset, config)?;
    measure_from_runs(model, &runs, config)
}

/// Builds the measure from already simulated replicas.
pub fn measure_from_runs(model: &MinimaxModel, runs: &[Trajectory], config: &StationaryConfig) -> Result<EmpiricalMeasure> {
    let _ = model;
    let records = runs[0].len();
    let start = (config.burn_in_fraction * records as f64).floor() as usize;
    if start >= records {
        return Err(Error::EmptySample(format!("burn-in keeps none of {records} records")));
    }
    let (samples, phi, provenance, diagnostic) = match config.mode {
        SamplingMode::TimeAverage => {
            let tails: Vec<Vec<f64>> = runs.iter().map(|t| phi_series(t)[start..].to_vec()).collect();
            let diagnostic = split_half_diagnostic(&tails);
            let thin = config.thin.unwrap_or_else(|| {
                let tau = tails.iter().map(|s| integrated_autocorrelation_time(s)).sum::<f64>() / tails.len() as f64;
                tau.ceil().max(1.0) as usize
            });
            let mut samples = Vec::new();
            let mut phi = Vec::new();
            for (t, tail) in runs.iter().zip(&tails) {
                for (k, v) in tail.iter().enumerate().step_by(thin) {
                    samples.push(t.states[start + k].clone());
                    phi.push(*v);
                }
            }
            let provenance = Provenance::TimeAverage { burn_in_fraction: config.burn_in_fraction, thin, replicas: runs.len() };
            (samples, phi, provenance, diagnostic)
        }
        SamplingMode::Ensemble => {
            if runs.len() < 2 {
                return Err(Error::InvalidArgument("ensemble sampling needs at least 2 replicas".into()));
            }
            let last = records - 1;
            let paired: Vec<Vec<f64>> = runs.iter().map(|t| {
                let p = phi_series(t);
                vec![p[start], p[last]]
            }).collect();
            let diagnostic = split_half_diagnostic(&paired);
            let samples: Vec<JointParams> = runs.iter().map(|t| t.states[last].clone()).collect();
            let phi = runs.iter().map(|t| phi_series(t)[last]).collect();
            let provenance = Provenance::Ensemble { replicas: runs.len(), time: runs[0].times[last] };
            (samples, phi, provenance, diagnostic)
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptySample("no samples survived burn-in and thinning".into()));
    }
    if !diagnostic.passed {
        return Err(Error::NotStationary(format!(
            "split-half means of Phi differ by {:e} > 3 x {:e}",
            diagnostic.difference, diagnostic.standard_error
        )));
    }
    Ok(EmpiricalMeasure { samples, phi, engine: Some(config.engine), provenance, diagnostic: Some(diagnostic) })
}

/// Largest standardized gap `|a - b| / sqrt(se_a² + se_b²)` over coordinate
/// means and second moments of two measures.
pub fn compare_measures(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    let d = a.samples[0].dim();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for power in [1, 2] {
            let (ma, sa) = a.statistic(|u| u[i].powi(power));
            let (mb, sb) = b.statistic(|u| u[i].powi(power));
            let se = sa.hypot(sb);
            let z = if se > 0.0 { (ma - mb).abs() / se } else if ma == mb { 0.0 } else { f64::INFINITY };
            worst = worst.max(z);
        }
    }
    worst
}

/// Fitted rate `λ` of `‖E u_t - target‖ ≈ C e^{-λt}` over the leading records
/// whose ensemble-mean distance exceeds `cutoff`.
pub fn mean_decay_rate(runs: &[Trajectory], target: &Vector, cutoff: f64) -> Option<f64> {
    let records = runs.iter().map(Trajectory::len).min()?;
    let r = runs.len() as f64;
    let mut t = Vec::new();
    let mut y = Vec::new();
    for k in 0..records {
        let mean = runs.iter().fold(Vector::zeros(target.len()), |acc, tr| acc + tr.states[k].stacked()) / r;
        let dist = (mean - target).norm();
        if !(dist > cutoff) {
            break;
        }
        t.push(runs[0].times[k]);
        y.push(dist.ln());
    }
    fit_line(&t, &y).map(|(slope, _)| -slope)
}
