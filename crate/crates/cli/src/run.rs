//! Dispatch of parsed experiments and persistence of their artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use gansde_core::harness::conditions::{convergence_condition_check, LyapunovChoice, ProbeConfig};
use gansde_core::harness::fdr::{fdr_residuals, FdrKind};
use gansde_core::harness::onestep::{one_step_order_study, MomentMode};
use gansde_core::harness::stationary::{stationary_sample, StationaryConfig};
use gansde_core::harness::testfn::TestFunction;
use gansde_core::harness::weak::{weak_error_curve, Process, StudyMode, WeakErrorConfig};
use gansde_core::rng::{derive_seed, stream};
use gansde_core::scheduler::{scheduled_run, SchedulerState};
use gansde_core::sde::{h_refinement_check, IntegratorConfig};
use gansde_core::{build_model, em_replicas, run_sga_replicas, Dataset, Initialization, JointParams, MinimaxModel, SgaConfig, Trajectory, Vector};
use serde::Serialize;
use serde_json::json;

use crate::config::{DatasetSpec, ExperimentConfig, ExperimentParams, InitialSpec, MomentModeSpec, StudyModeSpec};

/// Stream tags for auxiliary draws derived from the experiment seed.
const DATASET_STREAM: u64 = 1;
const TEST_FUNCTION_STREAM: u64 = 2;
const MOMENT_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    Inconclusive,
    Error,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Inconclusive => 2,
            Status::Error => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Inconclusive => "inconclusive",
            Status::Error => "error",
        }
    }
}

/// Result of one run: status, optional pass/fail verdict, summary lines and written files.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub status: Status,
    pub verdict: Option<bool>,
    pub summary: Vec<String>,
    pub files: Vec<String>,
}

struct Artifacts<'a> {
    dir: &'a Path,
    files: Vec<String>,
    summary: Vec<String>,
    verdict: Option<bool>,
}

impl<'a> Artifacts<'a> {
    fn create(&mut self, name: &str) -> anyhow::Result<BufWriter<File>> {
        self.files.push(name.into());
        let path = self.dir.join(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("cannot create {}", path.display()))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn trajectories(&mut self, runs: &[Trajectory], with_time: bool) -> anyhow::Result<()> {
        if runs.len() == 1 {
            runs[0].write_csv(self.create("trajectory.csv")?, with_time)?;
        } else {
            for (r, t) in runs.iter().enumerate() {
                t.write_csv(self.create(&format!("trajectory_r{r:04}.csv"))?, with_time)?;
            }
        }
        Ok(())
    }

    fn line(&mut self, s: impl Into<String>) {
        self.summary.push(s.into());
    }

    fn judge(&mut self, label: &str, ok: bool) {
        self.verdict = Some(self.verdict.unwrap_or(true) && ok);
        self.line(format!("{label}: {}", if ok { "PASS" } else { "FAIL" }));
    }
}

pub fn build_dataset(config: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let d = match &config.dataset {
        DatasetSpec::Placeholder => Dataset::placeholder(1),
        DatasetSpec::Inline { z, x, bound } => {
            let data = Dataset::new(
                z.iter().map(|p| Vector::from_column_slice(p)).collect(),
                x.iter().map(|p| Vector::from_column_slice(p)).collect(),
            )?;
            match bound {
                Some(b) => data.with_bound(*b)?,
                None => data,
            }
        }
        DatasetSpec::Csv { path, bound } => {
            let data = Dataset::load_csv(path)?;
            match bound {
                Some(b) => data.with_bound(*b)?,
                None => data,
            }
        }
        DatasetSpec::Uniform { n, m, dim, bound } => {
            let mut rng = stream(derive_seed(config.seed, &[DATASET_STREAM]), 0);
            Dataset::uniform_box(*n, *m, *dim, *bound, &mut rng)?
        }
    };
    Ok(d)
}

pub fn build(config: &ExperimentConfig) -> anyhow::Result<(MinimaxModel, Dataset)> {
    let m = &config.model;
    let model = build_model(m.kind.name(), m.d_theta, m.d_omega, m.quad)?;
    let dataset = build_dataset(config)?;
    model.check_dataset(&dataset)?;
    Ok((model, dataset))
}

fn point(init: &InitialSpec) -> anyhow::Result<JointParams> {
    Ok(JointParams::from_slices(&init.theta, &init.omega)?)
}

fn initialization(init: &InitialSpec) -> anyhow::Result<Initialization> {
    let mean = point(init)?;
    Ok(match init.std {
        Some(std) if std > 0.0 => Initialization::Gaussian { mean, std },
        _ => Initialization::Point(mean),
    })
}

fn fmt_vec(v: &Vector) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("({})", parts.join(", "))
}

fn ensemble_mean(runs: &[Trajectory]) -> Vector {
    let n = runs.len() as f64;
    runs.iter().fold(Vector::zeros(runs[0].last().dim()), |acc, t| acc + t.last().stacked()) / n
}

fn test_functions(labels: Option<&[String]>, model: &MinimaxModel, seed: u64, with_tanh: bool) -> anyhow::Result<Vec<TestFunction>> {
    let (dt, dw) = model.dims();
    let mut rng = stream(derive_seed(seed, &[TEST_FUNCTION_STREAM]), 0);
    match labels {
        None if with_tanh => Ok(TestFunction::default_basis(dt, dw, &mut rng)),
        None => Ok(TestFunction::polynomial_basis(dt, dw)),
        Some(labels) => labels
            .iter()
            .map(|l| {
                if l == "tanh_linear" {
                    // same direction as the default basis
                    Ok(TestFunction::default_basis(dt, dw, &mut stream(derive_seed(seed, &[TEST_FUNCTION_STREAM]), 0))
                        .pop()
                        .expect("default basis ends with tanh"))
                } else {
                    Ok(TestFunction::by_label(l, dt, dw)?)
                }
            })
            .collect(),
    }
}

fn execute(config: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<()> {
    let (model, dataset) = build(config)?;
    art.line(format!("experiment: {}", config.kind));
    art.line(format!("model: {}  seed: {}", model.kind(), config.seed));
    match &config.params {
        ExperimentParams::SimulateSga(p) => {
            let mut cfg = SgaConfig::new(p.scheme, p.eta, p.batch_size, p.steps, config.seed);
            cfg.record_every = p.record_every;
            cfg.record_stats = true;
            let runs = run_sga_replicas(&model, &dataset, &cfg, &initialization(&p.initial)?, p.replicas, &[])?;
            art.trajectories(&runs, false)?;
            art.line(format!("{} steps, eta={}, B={}, {} replica(s)", p.steps, p.eta, p.batch_size, p.replicas));
            art.line(format!("final mean state: {}", fmt_vec(&ensemble_mean(&runs))));
        }
        ExperimentParams::SimulateSde(p) => {
            let mut cfg = IntegratorConfig::new(p.horizon, config.seed);
            cfg.inner_step = p.inner_step;
            cfg.record_every = p.record_every;
            cfg.record_stats = true;
            cfg.coupling = p.coupling;
            let init = initialization(&p.initial)?;
            if let Some(r) = p.refinement_replicas {
                let mut rcfg = cfg.clone();
                rcfg.seed = derive_seed(config.seed, &[u64::MAX]);
                let report = h_refinement_check(p.kind, &model, &dataset, &point(&p.initial)?, p.eta, p.batch_size, &rcfg, r)?;
                art.json("refinement.json", &report)?;
                art.judge("step-halving check", report.passed);
            }
            let runs = em_replicas(p.kind, &model, &dataset, &init, p.eta, p.batch_size, &cfg, p.replicas)?;
            art.trajectories(&runs, true)?;
            art.line(format!("{} to T={}, eta={}, B={}, h={}", p.kind, p.horizon, p.eta, p.batch_size, cfg.step_for(p.eta)));
            art.line(format!("final mean state: {}", fmt_vec(&ensemble_mean(&runs))));
        }
        ExperimentParams::OneStepMoments(p) => {
            let seed = derive_seed(config.seed, &[MOMENT_STREAM]);
            let mode = match p.mode {
                MomentModeSpec::Auto => MomentMode::Auto { draws: p.draws, seed },
                MomentModeSpec::Exact => MomentMode::Exact,
                MomentModeSpec::MonteCarlo => MomentMode::MonteCarlo { draws: p.draws, seed },
            };
            let study = one_step_order_study(&model, &dataset, &point(&p.initial)?, &p.eta_grid, p.batch_size, p.scheme, mode)?;
            art.json("one_step.json", &study)?;
            for r in &study.reports {
                art.line(format!(
                    "eta={}: E[delta]={:?} prediction={:?} first residual {:.3e} (se {:.1e}), second residual {:.3e}",
                    r.eta, r.mean, r.predicted_mean, r.first_residual, r.first_residual_se, r.second_residual
                ));
            }
            art.line(format!("first-moment residual slope: {:?}", study.first_slope));
            if let Some(min) = p.min_first_slope {
                art.judge(&format!("first-moment slope >= {min}"), study.first_slope.is_some_and(|s| s >= min));
            }
        }
        ExperimentParams::WeakError(p) => {
            let mode = match p.mode {
                StudyModeSpec::Oracle => StudyMode::Oracle { ode_step: p.ode_step },
                StudyModeSpec::MonteCarlo => StudyMode::MonteCarlo {
                    replicas: p.replicas,
                    inner_step: p.inner_step,
                    independent_sides: p.independent_sides,
                    refinement_replicas: Some(p.refinement_replicas),
                },
            };
            let functions = test_functions(p.test_functions.as_deref(), &model, config.seed, p.mode == StudyModeSpec::MonteCarlo)?;
            let cfg = WeakErrorConfig {
                left: Process::Sga(p.scheme),
                right: Process::Sde(p.sde_kind, p.coupling),
                horizon: p.horizon,
                eta_grid: p.eta_grid.clone(),
                batch_size: p.batch_size,
                initial: point(&p.initial)?,
                seed: config.seed,
                mode,
            };
            let result = weak_error_curve(&model, &dataset, &cfg, &functions)?;
            result.write_csv(art.create("order_study.csv")?)?;
            art.json("order_study.json", &result)?;
            art.line(format!("{} vs {} ({} mode), T={}", result.left, result.right, result.mode, p.horizon));
            for (eta, e) in result.eta_grid.iter().zip(&result.max_errors) {
                art.line(format!("eta={eta}: max weak error {e:.6e}"));
            }
            art.line(format!("log-log slope: {:?}", result.slope));
            if let Some((lo, hi)) = p.expected_slope {
                art.judge(&format!("slope in [{lo}, {hi}]"), result.slope.is_some_and(|s| s >= lo && s <= hi));
            }
        }
        ExperimentParams::StationaryFdr(p) => {
            let mut cfg = StationaryConfig::new(p.engine, p.eta, p.batch_size, p.horizon, initialization(&p.initial)?);
            cfg.replicas = p.replicas;
            cfg.burn_in_fraction = p.burn_in_fraction;
            cfg.thin = p.thin;
            cfg.mode = p.sampling;
            cfg.seed = config.seed;
            cfg.inner_step = p.inner_step;
            cfg.acknowledge_non_dissipative = p.acknowledge_non_dissipative;
            let measure = stationary_sample(&model, &dataset, &cfg)?;
            let fdr1 = fdr_residuals(&measure, &model, &dataset, p.eta, p.batch_size, FdrKind::Fdr1)?;
            let fdr2 = fdr_residuals(&measure, &model, &dataset, p.eta, p.batch_size, FdrKind::Fdr2)?;
            {
                let mut w = csv::Writer::from_writer(art.create("samples.csv")?);
                let (dt, dw) = model.dims();
                let mut header: Vec<String> = (0..dt).map(|k| format!("theta_{k}")).collect();
                header.extend((0..dw).map(|k| format!("omega_{k}")));
                header.push("phi".into());
                w.write_record(&header)?;
                for (s, phi) in measure.samples.iter().zip(&measure.phi) {
                    let mut row: Vec<String> = s.theta.iter().chain(s.omega.iter()).map(|v| v.to_string()).collect();
                    row.push(phi.to_string());
                    w.write_record(&row)?;
                }
                w.flush()?;
            }
            let mean = measure.mean();
            let cov = measure.covariance();
            let cov_rows: Vec<Vec<f64>> = cov.row_iter().map(|r| r.iter().copied().collect()).collect();
            let verdict = fdr1.verdict && fdr2.verdict && fdr1.generator_passed;
            art.json(
                "fdr.json",
                &json!({
                    "engine": p.engine.to_string(),
                    "measure": {
                        "samples": measure.len(),
                        "provenance": measure.provenance,
                        "diagnostic": measure.diagnostic,
                        "mean": mean.iter().collect::<Vec<_>>(),
                        "covariance": cov_rows,
                    },
                    "fdr1": fdr1,
                    "fdr2": fdr2,
                    "verdict": verdict,
                }),
            )?;
            art.line(format!("{} samples from {}; mean {}", measure.len(), p.engine, fmt_vec(&mean)));
            for r in [&fdr1, &fdr2] {
                art.line(format!(
                    "{:?}: lhs {:.6e} rhs {:.6e} residual {:.3e} (se {:.1e}, tolerance {:.1e})",
                    r.which, r.lhs, r.rhs, r.residual, r.se, r.tolerance
                ));
            }
            art.line(format!("E[A Phi] = {:.3e} (se {:.1e})", fdr1.generator_mean, fdr1.generator_se));
            art.judge("FDR residuals within max(3 SE, 5% of scale) and |E[A Phi]| <= 3 SE", verdict);
        }
        ExperimentParams::ConditionCheck(p) => {
            let mut probe = ProbeConfig::new(p.m0, p.r_max, p.probes, config.seed);
            probe.lyapunov = p.lyapunov.map(|(m, epsilon, l)| LyapunovChoice { m, epsilon, l });
            let report = convergence_condition_check(&model, &dataset, p.eta, p.batch_size, p.sde_kind, &probe)?;
            art.json("conditions.json", &report)?;
            let d = &report.dissipativity;
            if d.violated {
                art.line(format!("dissipativity violated on [{}, {}]: worst probe {:?} has u.b/|u| = {:.4}", d.m0, d.r_max, d.worst_probe, -d.r));
            } else {
                art.line(format!("dissipativity holds with r = {:.6} for |u| >= {}", d.r, d.m0));
            }
            art.line(format!("min ellipticity eigenvalue {:.6e}, K^2 = {:.6e}", report.min_ellipticity, report.k_squared));
            if let Some(l) = &report.lyapunov {
                art.line(format!(
                    "Lyapunov: M={} eps={} delta={:.6} l={} max margin {:.4e} over {} probes",
                    l.m, l.epsilon, l.delta, l.l, l.max_margin, l.probes
                ));
            }
            art.judge("conditions hold", !d.violated && report.lyapunov.as_ref().is_some_and(|l| l.holds));
        }
        ExperimentParams::ScheduleDemo(p) => {
            let state = SchedulerState::new(p.eta, p.epsilon, p.delta, p.batch_size, p.window, p.eta_min)?;
            let mut cfg = SgaConfig::new(gansde_core::Scheme::Sml, p.eta, p.batch_size, p.steps, config.seed);
            cfg.record_every = p.record_every;
            let run = scheduled_run(&model, &dataset, &cfg, state, &point(&p.initial)?)?;
            run.write_csv(art.create("schedule.csv")?)?;
            {
                let mut w = csv::Writer::from_writer(art.create("windows.csv")?);
                w.write_record(["end_step", "eta_before", "eta_after", "ratio", "triggered", "phi_half_difference", "phi_half_se", "stationary"])?;
                for win in &run.windows {
                    w.write_record([
                        win.end_step.to_string(),
                        win.eta_before.to_string(),
                        win.eta_after.to_string(),
                        win.ratio.map(|r| r.to_string()).unwrap_or_default(),
                        win.triggered.to_string(),
                        win.diagnostic.difference.to_string(),
                        win.diagnostic.standard_error.to_string(),
                        win.diagnostic.passed.to_string(),
                    ])?;
                }
                w.flush()?;
            }
            run.trajectory.write_csv(art.create("trajectory.csv")?, true)?;
            let decays = run.windows.iter().filter(|w| w.eta_after < w.eta_before).count();
            art.line(format!("{} steps, {} windows, {decays} decay(s); final eta {}", p.steps, run.windows.len(), run.final_state.eta));
            art.line(format!(
                "first stationary window {:?}, first trigger window {:?}",
                run.first_stationary_window(),
                run.first_trigger_window()
            ));
        }
    }
    Ok(())
}

/// Runs the experiment into `out` and writes `config.toml`, `manifest.json` and `summary.txt`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> anyhow::Result<Outcome> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut art = Artifacts { dir: out, files: Vec::new(), summary: Vec::new(), verdict: None };
    let status = match execute(config, &mut art) {
        Ok(()) => Status::Ok,
        Err(e) => {
            let inconclusive = e.downcast_ref::<gansde_core::Error>().is_some_and(|c| c.is_inconclusive());
            art.line(format!("{}: {e:#}", if inconclusive { "inconclusive" } else { "error" }));
            if inconclusive {
                Status::Inconclusive
            } else {
                Status::Error
            }
        }
    };
    if let Some(v) = art.verdict {
        art.line(format!("verdict: {}", if v { "PASS" } else { "FAIL" }));
    }
    let echo = toml::to_string(&config.echo)?;
    fs::write(out.join("config.toml"), &echo)?;
    let mut outputs = art.files.clone();
    outputs.sort();
    let manifest = json!({
        "tool": "gansde",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": config.kind.name(),
        "seed": config.seed,
        "status": status.name(),
        "verdict": art.verdict,
        "outputs": outputs,
        "config": config.echo,
    });
    let mut m = serde_json::to_string_pretty(&manifest)?;
    m.push('\n');
    fs::write(out.join("manifest.json"), m)?;
    let mut summary = art.summary.join("\n");
    summary.push('\n');
    fs::write(out.join("summary.txt"), summary)?;
    let mut files = art.files;
    files.extend(["config.toml", "manifest.json", "summary.txt"].map(String::from));
    Ok(Outcome { status, verdict: art.verdict, summary: art.summary, files })
}

/// Sets the global worker count from `GANSDE_WORKERS` when present.
pub fn configure_workers() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("GANSDE_WORKERS") {
        let n: usize = v.parse().with_context(|| format!("GANSDE_WORKERS={v:?} is not a count"))?;
        if n == 0 {
            bail!("GANSDE_WORKERS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    Ok(())
}
