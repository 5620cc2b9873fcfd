//! Weak-error order studies: `max_t max_f |E f(u_t) - E f(U_{tη})|` against η.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, JointParams, MinimaxModel};
use crate::rng::derive_seed;
use crate::sde::{em_replicas, h_refinement_check, IntegratorConfig, NoiseCoupling, SdeKind, SmoothFunction};
use crate::sga::{run_sga_replicas, Initialization, Scheme, SgaConfig, Trajectory};

use super::oracle::{sde_moments, sga_moments, Moments};
use super::testfn::TestFunction;
use super::{fit_log_slope, mean_se};

/// One side of a comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Process {
    Sga(Scheme),
    Sde(SdeKind, NoiseCoupling),
}

impl Process {
    pub fn sde(kind: SdeKind) -> Self {
        Process::Sde(kind, kind.default_coupling())
    }
}

impl fmt::Display for Process {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Process::Sga(s) => write!(f, "{s}"),
            Process::Sde(k, NoiseCoupling::BlockDiagonal) => write!(f, "{}", k.name().to_uppercase()),
            Process::Sde(k, NoiseCoupling::SharedBatch) => write!(f, "{}[shared-batch]", k.name().to_uppercase()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StudyMode {
    /// Exact moment recursion / RK4 moment ODEs; needs affine dynamics and quadratic test functions.
    Oracle { ode_step: f64 },
    MonteCarlo {
        replicas: usize,
        inner_step: Option<f64>,
        /// Draw the two sides from unrelated streams.
        independent_sides: bool,
        /// Replicas for the step-halving check run before the study; `None` skips it.
        refinement_replicas: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakErrorConfig {
    pub left: Process,
    pub right: Process,
    pub horizon: f64,
    pub eta_grid: Vec<f64>,
    pub batch_size: usize,
    pub initial: JointParams,
    pub seed: u64,
    pub mode: StudyMode,
}

impl WeakErrorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta_grid.is_empty() {
            return Err(Error::InvalidArgument("eta_grid is empty".into()));
        }
        if self.eta_grid.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidArgument("eta_grid must be strictly decreasing".into()));
        }
        if self.eta_grid.iter().any(|&e| !(e > 0.0 && e < 1.0_f64.min(self.horizon))) {
            return Err(Error::InvalidArgument("every eta must lie in (0, min(1, T))".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if let StudyMode::MonteCarlo { replicas, .. } = self.mode {
            if replicas < 2 {
                return Err(Error::InvalidArgument("Monte Carlo needs at least 2 replicas".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderStudyResult {
    pub left: String,
    pub right: String,
    pub mode: String,
    pub eta_grid: Vec<f64>,
    pub test_functions: Vec<String>,
    /// `errors[e][f]`: max over `t = 1..⌊T/η⌋` of the gap for η index `e`, function `f`.
    pub errors: Vec<Vec<f64>>,
    pub standard_errors: Vec<Vec<f64>>,
    /// Max over test functions.
    pub max_errors: Vec<f64>,
    pub max_standard_errors: Vec<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

impl OrderStudyResult {
    /// Slope of one test function's error curve.
    pub fn slope_for(&self, index: usize) -> Option<f64> {
        let y: Vec<f64> = self.errors.iter().map(|row| row[index]).collect();
        fit_log_slope(&self.eta_grid, &y).map(|f| f.slope)
    }

    /// CSV `eta,test_function,error,se`, one row per (η, f) plus a `max` row per η.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["eta", "test_function", "error", "se"])?;
        for (e, eta) in self.eta_grid.iter().enumerate() {
            for (f, name) in self.test_functions.iter().enumerate() {
                w.write_record([eta.to_string(), name.clone(), self.errors[e][f].to_string(), self.standard_errors[e][f].to_string()])?;
            }
            w.write_record([eta.to_string(), "max".into(), self.max_errors[e].to_string(), self.max_standard_errors[e].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expected values `E f(u_t)`, `t = 0..`, with standard errors.
struct Series {
    values: Vec<Vec<f64>>,
    se: Vec<Vec<f64>>,
}

fn oracle_series(
    model: &MinimaxModel,
    dataset: &Dataset,
    process: Process,
    config: &WeakErrorConfig,
    eta: f64,
    ode_step: f64,
    functions: &[TestFunction],
) -> Result<Series> {
    let moments: Vec<Moments> = match process {
        Process::Sga(s) => sga_moments(model, dataset, s, eta, config.batch_size, &config.initial, config.horizon)?,
        Process::Sde(k, c) => sde_moments(model, dataset, k, c, eta, config.batch_size, &config.initial, config.horizon, ode_step)?,
    };
    let forms = functions
        .iter()
        .map(|f| {
            f.quadratic_form().ok_or_else(|| {
                Error::OracleUnavailable(format!("test function {} is not quadratic", f.label))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let values = moments
        .iter()
        .map(|m| forms.iter().map(|q| q.expectation(&m.mean, &m.second)).collect())
        .collect::<Vec<Vec<f64>>>();
    let se = values.iter().map(|row| vec![0.0; row.len()]).collect();
    Ok(Series { values, se })
}

#[allow(clippy::too_many_arguments)]
fn monte_carlo_series(
    model: &MinimaxModel,
    dataset: &Dataset,
    process: Process,
    config: &WeakErrorConfig,
    eta: f64,
    seed: u64,
    replicas: usize,
    inner_step: Option<f64>,
    functions: &[TestFunction],
) -> Result<Series> {
    let init = Initialization::Point(config.initial.clone());
    let runs: Vec<Trajectory> = match process {
        Process::Sga(scheme) => {
            let mut cfg = SgaConfig::from_horizon(scheme, eta, config.batch_size, config.horizon, seed)?;
            cfg.record_stats = false;
            run_sga_replicas(model, dataset, &cfg, &init, replicas, &[])?
        }
        Process::Sde(kind, coupling) => {
            let mut cfg = IntegratorConfig::new(config.horizon, seed);
            cfg.inner_step = inner_step;
            cfg.coupling = Some(coupling);
            em_replicas(kind, model, dataset, &init, eta, config.batch_size, &cfg, replicas)?
        }
    };
    let records = runs[0].len();
    let mut values = Vec::with_capacity(records);
    let mut se = Vec::with_capacity(records);
    for t in 0..records {
        let stacked: Vec<_> = runs.iter().map(|r| r.states[t].stacked()).collect();
        let mut row = Vec::with_capacity(functions.len());
        let mut row_se = Vec::with_capacity(functions.len());
        for f in functions {
            let vals: Vec<f64> = stacked.iter().map(|u| f.value(u)).collect();
            let (m, s) = mean_se(&vals);
            row.push(m);
            row_se.push(s);
        }
        values.push(row);
        se.push(row_se);
    }
    Ok(Series { values, se })
}

/// Runs the study over the η-grid.
pub fn weak_error_curve(
    model: &MinimaxModel,
    dataset: &Dataset,
    config: &WeakErrorConfig,
    functions: &[TestFunction],
) -> Result<OrderStudyResult> {
    config.validate()?;
    if functions.is_empty() {
        return Err(Error::InvalidArgument("no test functions".into()));
    }
    model.check_params(&config.initial)?;

    if let StudyMode::MonteCarlo { inner_step, refinement_replicas: Some(r), .. } = &config.mode {
        for side in [config.left, config.right] {
            if let Process::Sde(kind, coupling) = side {
                let eta = config.eta_grid[0];
                let mut cfg = IntegratorConfig::new(config.horizon, derive_seed(config.seed, &[u64::MAX]));
                cfg.inner_step = *inner_step;
                cfg.coupling = Some(coupling);
                let report = h_refinement_check(kind, model, dataset, &config.initial, eta, config.batch_size, &cfg, *r)?;
                if !report.passed {
                    return Err(Error::Inconclusive(format!(
                        "halving the inner step of {kind} moved E[u_T] from {:?} to {:?} (SE {:?})",
                        report.coarse_mean, report.fine_mean, report.standard_error
                    )));
                }
            }
        }
    }

    let mut errors = Vec::new();
    let mut standard_errors = Vec::new();
    let mut max_errors = Vec::new();
    let mut max_standard_errors = Vec::new();
    for (e, &eta) in config.eta_grid.iter().enumerate() {
        let (left, right) = match &config.mode {
            StudyMode::Oracle { ode_step } => (
                oracle_series(model, dataset, config.left, config, eta, *ode_step, functions)?,
                oracle_series(model, dataset, config.right, config, eta, *ode_step, functions)?,
            ),
            StudyMode::MonteCarlo { replicas, inner_step, independent_sides, .. } => {
                let seed_for = |side: u64| {
                    derive_seed(config.seed, &[e as u64, if *independent_sides { side } else { 0 }])
                };
                (
                    monte_carlo_series(model, dataset, config.left, config, eta, seed_for(0), *replicas, *inner_step, functions)?,
                    monte_carlo_series(model, dataset, config.right, config, eta, seed_for(1), *replicas, *inner_step, functions)?,
                )
            }
        };
        let steps = left.values.len().min(right.values.len());
        let mut row = vec![0.0; functions.len()];
        let mut row_se = vec![0.0; functions.len()];
        for t in 1..steps {
            for f in 0..functions.len() {
                let gap = (left.values[t][f] - right.values[t][f]).abs();
                if gap > row[f] {
                    row[f] = gap;
                    row_se[f] = left.se[t][f].hypot(right.se[t][f]);
                }
            }
        }
        let (arg, &max) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("at least one test function");
        let max_se = row_se[arg];
        if max_se > 0.2 * max {
            return Err(Error::Inconclusive(format!(
                "at eta={eta} the Monte Carlo standard error {max_se:e} exceeds 20% of the gap {max:e}; add replicas"
            )));
        }
        errors.push(row);
        standard_errors.push(row_se);
        max_errors.push(max);
        max_standard_errors.push(max_se);
    }
    let fit = fit_log_slope(&config.eta_grid, &max_errors);
    Ok(OrderStudyResult {
        left: config.left.to_string(),
        right: config.right.to_string(),
        mode: match config.mode {
            StudyMode::Oracle { .. } => "oracle".into(),
            StudyMode::MonteCarlo { .. } => "monte-carlo".into(),
        },
        eta_grid: config.eta_grid.clone(),
        test_functions: functions.iter().map(|f| f.label.clone()).collect(),
        errors,
        standard_errors,
        max_errors,
        max_standard_errors,
        slope: fit.map(|f| f.slope),
        intercept: fit.map(|f| f.intercept),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin() -> (MinimaxModel, Dataset) {
        (MinimaxModel::lin_wgan(), Dataset::scalar(&[1.0, 3.0], &[2.0, 0.0]).unwrap())
    }

    fn config(left: Process, right: Process, mode: StudyMode) -> WeakErrorConfig {
        WeakErrorConfig {
            left,
            right,
            horizon: 1.0,
            eta_grid: vec![0.2, 0.1, 0.05, 0.025],
            batch_size: 1,
            initial: JointParams::scalar(1.0, 1.0),
            seed: 3,
            mode,
        }
    }

    #[test]
    fn self_comparison_is_zero() {
        let (m, d) = lin();
        let basis = TestFunction::polynomial_basis(1, 1);
        let mode = StudyMode::MonteCarlo { replicas: 50, inner_step: None, independent_sides: false, refinement_replicas: None };
        let r = weak_error_curve(&m, &d, &config(Process::Sga(Scheme::Alt), Process::Sga(Scheme::Alt), mode), &basis).unwrap();
        assert!(r.max_errors.iter().all(|&e| e == 0.0));
        assert!(r.slope.is_none());
        let r = weak_error_curve(&m, &d, &config(Process::Sga(Scheme::Sml), Process::Sga(Scheme::Sml), StudyMode::Oracle { ode_step: 1e-3 }), &basis).unwrap();
        assert!(r.max_errors.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn grid_must_decrease() {
        let (m, d) = lin();
        let mut c = config(Process::Sga(Scheme::Alt), Process::sde(SdeKind::AltSde), StudyMode::Oracle { ode_step: 1e-3 });
        c.eta_grid = vec![0.1, 0.2];
        assert!(weak_error_curve(&m, &d, &c, &TestFunction::polynomial_basis(1, 1)).is_err());
    }

    #[test]
    fn tanh_basis_is_refused_by_the_oracle() {
        let (m, d) = lin();
        let c = config(Process::Sga(Scheme::Alt), Process::sde(SdeKind::AltSde), StudyMode::Oracle { ode_step: 1e-3 });
        let f = [TestFunction::tanh_linear(crate::model::Vector::from_vec(vec![1.0, 0.0]))];
        assert!(matches!(weak_error_curve(&m, &d, &c, &f), Err(Error::OracleUnavailable(_))));
    }

    #[test]
    fn underpowered_monte_carlo_is_inconclusive() {
        let (m, d) = lin();
        let mode = StudyMode::MonteCarlo { replicas: 20, inner_step: Some(0.005), independent_sides: true, refinement_replicas: None };
        let mut c = config(Process::Sga(Scheme::Alt), Process::sde(SdeKind::AltSde), mode);
        c.eta_grid = vec![0.1, 0.05];
        let err = weak_error_curve(&m, &d, &c, &TestFunction::polynomial_basis(1, 1)).unwrap_err();
        assert!(err.is_inconclusive(), "{err}");
    }
}
