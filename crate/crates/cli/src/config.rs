//! TOML experiment configuration: parsing, defaults and validation.
//!
//! Every violation is collected before reporting, and unknown keys are errors.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gansde_core::harness::stationary::{Engine, SamplingMode};
use gansde_core::{ModelKind, NoiseCoupling, QuadCoefficients, Scheme, SdeKind};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    SimulateSga,
    SimulateSde,
    OneStepMoments,
    WeakError,
    StationaryFdr,
    ConditionCheck,
    ScheduleDemo,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::SimulateSga,
        ExperimentKind::SimulateSde,
        ExperimentKind::OneStepMoments,
        ExperimentKind::WeakError,
        ExperimentKind::StationaryFdr,
        ExperimentKind::ConditionCheck,
        ExperimentKind::ScheduleDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SimulateSga => "simulate-sga",
            ExperimentKind::SimulateSde => "simulate-sde",
            ExperimentKind::OneStepMoments => "one-step-moments",
            ExperimentKind::WeakError => "weak-error",
            ExperimentKind::StationaryFdr => "stationary-fdr",
            ExperimentKind::ConditionCheck => "condition-check",
            ExperimentKind::ScheduleDemo => "schedule-demo",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub d_theta: usize,
    pub d_omega: usize,
    pub quad: Option<QuadCoefficients>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    /// quad-sim ignores data.
    Placeholder,
    Inline { z: Vec<Vec<f64>>, x: Vec<Vec<f64>>, bound: Option<f64> },
    Csv { path: PathBuf, bound: Option<f64> },
    /// `n` latents and `m` reals uniform in `[-bound, bound]^dim`, drawn from the seed.
    Uniform { n: usize, m: usize, dim: usize, bound: f64 },
}

/// Starting point, optionally perturbed by independent Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialSpec {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateSga {
    pub scheme: Scheme,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub replicas: usize,
    pub record_every: usize,
    pub initial: InitialSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateSde {
    pub kind: SdeKind,
    pub coupling: Option<NoiseCoupling>,
    pub eta: f64,
    pub batch_size: usize,
    pub horizon: f64,
    pub inner_step: Option<f64>,
    pub replicas: usize,
    pub record_every: usize,
    pub refinement_replicas: Option<usize>,
    pub initial: InitialSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentModeSpec {
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OneStepMoments {
    pub scheme: Scheme,
    pub eta_grid: Vec<f64>,
    pub batch_size: usize,
    pub mode: MomentModeSpec,
    pub draws: usize,
    pub min_first_slope: Option<f64>,
    pub initial: InitialSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudyModeSpec {
    Oracle,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakError {
    pub scheme: Scheme,
    pub sde_kind: SdeKind,
    pub coupling: NoiseCoupling,
    pub horizon: f64,
    pub eta_grid: Vec<f64>,
    pub batch_size: usize,
    pub mode: StudyModeSpec,
    pub ode_step: f64,
    pub replicas: usize,
    pub inner_step: Option<f64>,
    pub independent_sides: bool,
    pub refinement_replicas: usize,
    pub test_functions: Option<Vec<String>>,
    pub expected_slope: Option<(f64, f64)>,
    pub initial: InitialSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationaryFdr {
    pub engine: Engine,
    pub eta: f64,
    pub batch_size: usize,
    pub horizon: f64,
    pub replicas: usize,
    pub burn_in_fraction: f64,
    pub thin: Option<usize>,
    pub sampling: SamplingMode,
    pub inner_step: Option<f64>,
    pub acknowledge_non_dissipative: bool,
    pub initial: InitialSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionCheck {
    pub sde_kind: SdeKind,
    pub eta: f64,
    pub batch_size: usize,
    pub m0: f64,
    pub r_max: f64,
    pub probes: usize,
    pub lyapunov: Option<(f64, f64, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleDemo {
    pub eta: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub batch_size: usize,
    pub window: usize,
    pub eta_min: f64,
    pub steps: usize,
    pub record_every: usize,
    pub initial: InitialSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExperimentParams {
    SimulateSga(SimulateSga),
    SimulateSde(SimulateSde),
    OneStepMoments(OneStepMoments),
    WeakError(WeakError),
    StationaryFdr(StationaryFdr),
    ConditionCheck(ConditionCheck),
    ScheduleDemo(ScheduleDemo),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub params: ExperimentParams,
    /// Effective configuration (seed applied, paths resolved, `out` dropped), echoed into outputs.
    pub echo: Table,
}

/// All violations found in one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem(s)):", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// Typed access to one table that remembers which keys were read.
struct Section<'a> {
    path: String,
    table: Option<&'a Table>,
    used: BTreeSet<String>,
    errors: Vec<String>,
}

impl<'a> Section<'a> {
    fn new(path: &str, table: Option<&'a Table>) -> Self {
        Self { path: path.into(), table, used: BTreeSet::new(), errors: Vec::new() }
    }

    fn key(&self, key: &str) -> String {
        if self.path.is_empty() || key.is_empty() {
            format!("{}{key}", self.path)
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn fail(&mut self, key: &str, msg: impl fmt::Display) {
        let k = self.key(key);
        self.errors.push(format!("{k}: {msg}"));
    }

    fn raw(&mut self, key: &str) -> Option<&'a Value> {
        self.used.insert(key.into());
        self.table.and_then(|t| t.get(key))
    }

    fn has(&self, key: &str) -> bool {
        self.table.is_some_and(|t| t.contains_key(key))
    }

    fn opt_f64(&mut self, key: &str) -> Option<f64> {
        match self.raw(key)? {
            Value::Float(v) => Some(*v),
            Value::Integer(v) => Some(*v as f64),
            other => {
                self.fail(key, format!("expected a number, got {}", other.type_str()));
                None
            }
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> f64 {
        self.opt_f64(key).unwrap_or(default)
    }

    fn req_f64(&mut self, key: &str) -> f64 {
        if !self.has(key) {
            self.used.insert(key.into());
            self.fail(key, "required");
            return f64::NAN;
        }
        self.opt_f64(key).unwrap_or(f64::NAN)
    }

    fn opt_usize(&mut self, key: &str) -> Option<usize> {
        match self.raw(key)? {
            Value::Integer(v) if *v >= 0 => Some(*v as usize),
            Value::Integer(v) => {
                self.fail(key, format!("must be a nonnegative integer, got {v}"));
                None
            }
            other => {
                self.fail(key, format!("expected an integer, got {}", other.type_str()));
                None
            }
        }
    }

    fn usize_or(&mut self, key: &str, default: usize) -> usize {
        self.opt_usize(key).unwrap_or(default)
    }

    fn opt_bool(&mut self, key: &str) -> Option<bool> {
        match self.raw(key)? {
            Value::Boolean(b) => Some(*b),
            other => {
                self.fail(key, format!("expected a boolean, got {}", other.type_str()));
                None
            }
        }
    }

    fn opt_str(&mut self, key: &str) -> Option<&'a str> {
        match self.raw(key)? {
            Value::String(s) => Some(s.as_str()),
            other => {
                self.fail(key, format!("expected a string, got {}", other.type_str()));
                None
            }
        }
    }

    fn opt_parse<T: FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: fmt::Display,
    {
        let s = self.opt_str(key)?;
        match s.parse() {
            Ok(v) => Some(v),
            Err(e) => {
                self.fail(key, e);
                None
            }
        }
    }

    fn opt_f64_list(&mut self, key: &str) -> Option<Vec<f64>> {
        match self.raw(key)? {
            Value::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for v in items {
                    match v {
                        Value::Float(f) => out.push(*f),
                        Value::Integer(i) => out.push(*i as f64),
                        other => {
                            self.fail(key, format!("expected numbers, found {}", other.type_str()));
                            return None;
                        }
                    }
                }
                Some(out)
            }
            other => {
                self.fail(key, format!("expected an array of numbers, got {}", other.type_str()));
                None
            }
        }
    }

    /// Numbers (one-dimensional points) or arrays of numbers.
    fn opt_points(&mut self, key: &str) -> Option<Vec<Vec<f64>>> {
        let items = match self.raw(key)? {
            Value::Array(items) => items,
            other => {
                self.fail(key, format!("expected an array, got {}", other.type_str()));
                return None;
            }
        };
        let mut out = Vec::with_capacity(items.len());
        for v in items {
            match v {
                Value::Float(f) => out.push(vec![*f]),
                Value::Integer(i) => out.push(vec![*i as f64]),
                Value::Array(inner) => {
                    let mut p = Vec::with_capacity(inner.len());
                    for w in inner {
                        match w {
                            Value::Float(f) => p.push(*f),
                            Value::Integer(i) => p.push(*i as f64),
                            other => {
                                self.fail(key, format!("expected numbers, found {}", other.type_str()));
                                return None;
                            }
                        }
                    }
                    out.push(p);
                }
                other => {
                    self.fail(key, format!("expected numbers or arrays, found {}", other.type_str()));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn opt_str_list(&mut self, key: &str) -> Option<Vec<String>> {
        match self.raw(key)? {
            Value::Array(items) => {
                let mut out = Vec::new();
                for v in items {
                    match v {
                        Value::String(s) => out.push(s.clone()),
                        other => {
                            self.fail(key, format!("expected strings, found {}", other.type_str()));
                            return None;
                        }
                    }
                }
                Some(out)
            }
            other => {
                self.fail(key, format!("expected an array of strings, got {}", other.type_str()));
                None
            }
        }
    }

    fn check(&mut self, ok: bool, key: &str, msg: impl fmt::Display) {
        if !ok {
            self.fail(key, msg);
        }
    }

    fn eta(&mut self, key: &str) -> f64 {
        let v = self.req_f64(key);
        if !v.is_nan() {
            self.check(v > 0.0 && v < 1.0, key, format!("must satisfy {key} > 0 and {key} < 1, got {v}"));
        }
        v
    }

    fn batch_size(&mut self, default: usize, min: usize) -> usize {
        let b = self.usize_or("batch_size", default);
        self.check(b >= min, "batch_size", format!("must be at least {min}, got {b}"));
        b
    }

    fn positive(&mut self, key: &str, v: f64) {
        if !v.is_nan() {
            self.check(v > 0.0 && v.is_finite(), key, format!("must satisfy {key} > 0, got {v}"));
        }
    }

    fn at_least_one(&mut self, key: &str, v: usize) {
        self.check(v >= 1, key, format!("must be at least 1, got {v}"));
    }

    fn initial(&mut self, model: &ModelSpec) -> InitialSpec {
        let theta = self.opt_f64_list("theta").unwrap_or_else(|| vec![0.0; model.d_theta]);
        let omega = self.opt_f64_list("omega").unwrap_or_else(|| vec![0.0; model.d_omega]);
        self.check(theta.len() == model.d_theta, "theta", format!("needs {} entries, got {}", model.d_theta, theta.len()));
        self.check(omega.len() == model.d_omega, "omega", format!("needs {} entries, got {}", model.d_omega, omega.len()));
        let std = self.opt_f64("init_std");
        if let Some(s) = std {
            self.check(s >= 0.0 && s.is_finite(), "init_std", format!("must satisfy init_std >= 0, got {s}"));
        }
        InitialSpec { theta, omega, std }
    }

    fn fixed_initial(&mut self, model: &ModelSpec) -> InitialSpec {
        let init = self.initial(model);
        if init.std.is_some() {
            self.fail("init_std", "not supported here; this experiment starts from one point");
        }
        init
    }

    /// Unknown keys plus recorded errors.
    fn finish(mut self, sink: &mut Vec<String>) {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !self.used.contains(k) {
                    let full = self.key(k);
                    self.errors.push(format!("{full}: unknown key"));
                }
            }
        }
        sink.append(&mut self.errors);
    }
}

fn strictly_decreasing(grid: &[f64]) -> bool {
    grid.windows(2).all(|w| w[1] < w[0])
}

fn parse_engine(s: &str) -> Result<Engine, String> {
    if let Ok(scheme) = s.parse::<Scheme>() {
        return Ok(Engine::Sga(scheme));
    }
    s.parse::<SdeKind>()
        .map(Engine::Sde)
        .map_err(|_| format!("unknown engine {s:?}; expected ALT, SML, alt-sde, sml-sde or sml-sde2"))
}

fn parse_coupling(s: &str) -> Result<NoiseCoupling, String> {
    match s {
        "block-diagonal" => Ok(NoiseCoupling::BlockDiagonal),
        "shared-batch" => Ok(NoiseCoupling::SharedBatch),
        _ => Err(format!("unknown coupling {s:?}; expected block-diagonal or shared-batch")),
    }
}

fn parse_model(root: &Table, errors: &mut Vec<String>) -> Option<ModelSpec> {
    let table = match root.get("model") {
        Some(Value::Table(t)) => t,
        Some(_) => {
            errors.push("model: expected a table".into());
            return None;
        }
        None => {
            errors.push("model: required".into());
            return None;
        }
    };
    let mut s = Section::new("model", Some(table));
    let kind = if s.has("kind") {
        s.opt_parse::<ModelKind>("kind")
    } else {
        s.used.insert("kind".into());
        s.fail("kind", "required");
        None
    };
    let d_theta = s.usize_or("d_theta", 1);
    let d_omega = s.usize_or("d_omega", d_theta);
    s.at_least_one("d_theta", d_theta);
    s.at_least_one("d_omega", d_omega);
    let quad_keys = ["a", "c", "b", "s"];
    let quad = if kind == Some(ModelKind::QuadSim) {
        let d = QuadCoefficients::default();
        let q = QuadCoefficients { a: s.f64_or("a", d.a), c: s.f64_or("c", d.c), b: s.f64_or("b", d.b), s: s.f64_or("s", d.s) };
        s.check(q.a > 0.0, "a", format!("dissipativity coefficient must be positive, got a={}", q.a));
        s.check(q.c > 0.0, "c", format!("dissipativity coefficient must be positive, got c={}", q.c));
        s.check(q.s >= 0.0, "s", format!("must satisfy s >= 0, got {}", q.s));
        Some(q)
    } else {
        for k in quad_keys {
            if s.has(k) {
                s.used.insert(k.into());
                s.fail(k, "only quad-sim takes this coefficient");
            }
        }
        if kind.is_some() && d_theta != d_omega {
            s.fail("d_omega", "must equal d_theta for data-driven models");
        }
        None
    };
    s.finish(errors);
    kind.map(|kind| ModelSpec { kind, d_theta, d_omega, quad })
}

fn parse_dataset(root: &Table, model: Option<&ModelSpec>, base: &Path, errors: &mut Vec<String>, echo: &mut Table) -> DatasetSpec {
    let table = match root.get("dataset") {
        Some(Value::Table(t)) => Some(t),
        Some(_) => {
            errors.push("dataset: expected a table".into());
            return DatasetSpec::Placeholder;
        }
        None => None,
    };
    let needs_data = model.is_some_and(|m| m.kind != ModelKind::QuadSim);
    let mut s = Section::new("dataset", table);
    let path = s.opt_str("path");
    let z = s.opt_points("z");
    let x = s.opt_points("x");
    let n = s.opt_usize("n");
    let m = s.opt_usize("m");
    let dim = s.opt_usize("dim");
    let bound = s.opt_f64("bound");
    if let Some(b) = bound {
        s.positive("bound", b);
    }
    let inline = z.is_some() || x.is_some();
    let uniform = n.is_some() || m.is_some() || dim.is_some();
    let chosen = [path.is_some(), inline, uniform].iter().filter(|&&v| v).count();
    let spec = if chosen > 1 {
        s.fail("", "choose one of path, z/x or n/m/dim");
        DatasetSpec::Placeholder
    } else if let Some(p) = path {
        let raw = PathBuf::from(p);
        let full = if raw.is_absolute() { raw } else { base.join(raw) };
        match full.canonicalize() {
            Ok(abs) => {
                if let Some(Value::Table(t)) = echo.get_mut("dataset") {
                    t.insert("path".into(), Value::String(abs.display().to_string()));
                }
                DatasetSpec::Csv { path: abs, bound }
            }
            Err(e) => {
                s.fail("path", format!("cannot open {}: {e}", full.display()));
                DatasetSpec::Placeholder
            }
        }
    } else if inline {
        match (z, x) {
            (Some(z), Some(x)) => {
                s.check(!z.is_empty(), "z", "must not be empty");
                s.check(!x.is_empty(), "x", "must not be empty");
                DatasetSpec::Inline { z, x, bound }
            }
            _ => {
                s.fail("", "z and x must be given together");
                DatasetSpec::Placeholder
            }
        }
    } else if uniform {
        let (n, m) = (n.unwrap_or(0), m.unwrap_or(0));
        s.at_least_one("n", n);
        s.at_least_one("m", m);
        let dim = dim.unwrap_or(1);
        s.at_least_one("dim", dim);
        DatasetSpec::Uniform { n, m, dim, bound: bound.unwrap_or(1.0) }
    } else {
        if needs_data {
            s.fail("", format!("required for {}", model.map(|m| m.kind.name()).unwrap_or("this model")));
        }
        DatasetSpec::Placeholder
    };
    s.finish(errors);
    spec
}

fn parse_params(kind: ExperimentKind, root: &Table, model: &ModelSpec, errors: &mut Vec<String>) -> Option<ExperimentParams> {
    let name = kind.name();
    let table = match root.get(name) {
        Some(Value::Table(t)) => Some(t),
        Some(_) => {
            errors.push(format!("{name}: expected a table"));
            return None;
        }
        None => None,
    };
    let mut s = Section::new(name, table);
    let params = match kind {
        ExperimentKind::SimulateSga => {
            let scheme = s.opt_parse("scheme").unwrap_or(Scheme::Alt);
            let eta = s.eta("eta");
            let batch_size = s.batch_size(1, 1);
            let steps = match (s.opt_usize("steps"), s.opt_f64("horizon")) {
                (Some(n), None) => n,
                (None, Some(t)) => {
                    s.positive("horizon", t);
                    gansde_core::sga::steps_for_horizon(t, eta)
                }
                (None, None) => {
                    s.fail("steps", "either steps or horizon is required");
                    0
                }
                (Some(_), Some(_)) => {
                    s.fail("steps", "give steps or horizon, not both");
                    0
                }
            };
            let replicas = s.usize_or("replicas", 1);
            s.at_least_one("replicas", replicas);
            let record_every = s.usize_or("record_every", 1);
            s.at_least_one("record_every", record_every);
            let initial = s.initial(model);
            ExperimentParams::SimulateSga(SimulateSga { scheme, eta, batch_size, steps, replicas, record_every, initial })
        }
        ExperimentKind::SimulateSde => {
            let kind = s.opt_parse("kind").unwrap_or(SdeKind::AltSde);
            let coupling = s.opt_str("coupling").and_then(|c| parse_coupling(c).map_err(|e| s.fail("coupling", e)).ok());
            let eta = s.eta("eta");
            let batch_size = s.batch_size(1, 1);
            let horizon = s.req_f64("horizon");
            s.positive("horizon", horizon);
            let inner_step = s.opt_f64("inner_step");
            if let Some(h) = inner_step {
                s.positive("inner_step", h);
                s.check(!(h > eta / 10.0 * (1.0 + 1e-12)), "inner_step", format!("must satisfy inner_step <= eta/10, got {h}"));
            }
            let replicas = s.usize_or("replicas", 1);
            s.at_least_one("replicas", replicas);
            let record_every = s.usize_or("record_every", 1);
            s.at_least_one("record_every", record_every);
            let refinement_replicas = s.opt_usize("refinement_replicas");
            if let Some(r) = refinement_replicas {
                s.check(r >= 2, "refinement_replicas", format!("must be at least 2, got {r}"));
            }
            let initial = s.initial(model);
            ExperimentParams::SimulateSde(SimulateSde { kind, coupling, eta, batch_size, horizon, inner_step, replicas, record_every, refinement_replicas, initial })
        }
        ExperimentKind::OneStepMoments => {
            let scheme = s.opt_parse("scheme").unwrap_or(Scheme::Alt);
            let eta_grid = match (s.opt_f64_list("eta_grid"), s.has("eta")) {
                (Some(g), false) => g,
                (None, true) => vec![s.eta("eta")],
                (Some(_), true) => {
                    s.used.insert("eta".into());
                    s.fail("eta", "give eta or eta_grid, not both");
                    vec![]
                }
                (None, false) => {
                    s.fail("eta_grid", "either eta or eta_grid is required");
                    vec![]
                }
            };
            for &e in &eta_grid {
                s.check((0.0..1.0).contains(&e), "eta_grid", format!("entries must satisfy 0 <= eta < 1, got {e}"));
            }
            let batch_size = s.batch_size(1, 1);
            let mode = match s.opt_str("mode").unwrap_or("auto") {
                "auto" => MomentModeSpec::Auto,
                "exact" => MomentModeSpec::Exact,
                "monte-carlo" => MomentModeSpec::MonteCarlo,
                other => {
                    s.fail("mode", format!("unknown mode {other:?}; expected auto, exact or monte-carlo"));
                    MomentModeSpec::Auto
                }
            };
            let draws = s.usize_or("draws", 1_000_000);
            s.check(draws >= 2, "draws", format!("must be at least 2, got {draws}"));
            let min_first_slope = s.opt_f64("min_first_slope");
            let initial = s.fixed_initial(model);
            ExperimentParams::OneStepMoments(OneStepMoments { scheme, eta_grid, batch_size, mode, draws, min_first_slope, initial })
        }
        ExperimentKind::WeakError => {
            let scheme = s.opt_parse("scheme").unwrap_or(Scheme::Alt);
            let sde_kind = s.opt_parse("sde_kind").unwrap_or(SdeKind::for_scheme(scheme));
            let coupling = s
                .opt_str("coupling")
                .and_then(|c| parse_coupling(c).map_err(|e| s.fail("coupling", e)).ok())
                .unwrap_or(sde_kind.default_coupling());
            let horizon = s.f64_or("horizon", 1.0);
            s.positive("horizon", horizon);
            let eta_grid = s.opt_f64_list("eta_grid").unwrap_or_else(|| {
                s.fail("eta_grid", "required");
                vec![]
            });
            s.check(strictly_decreasing(&eta_grid), "eta_grid", "must be strictly decreasing");
            for &e in &eta_grid {
                s.check(e > 0.0 && e < 1.0 && e < horizon, "eta_grid", format!("entries must satisfy 0 < eta < min(1, horizon), got {e}"));
            }
            let batch_size = s.batch_size(1, 1);
            let mode = match s.opt_str("mode").unwrap_or("oracle") {
                "oracle" => StudyModeSpec::Oracle,
                "monte-carlo" => StudyModeSpec::MonteCarlo,
                other => {
                    s.fail("mode", format!("unknown mode {other:?}; expected oracle or monte-carlo"));
                    StudyModeSpec::Oracle
                }
            };
            let ode_step = s.f64_or("ode_step", 1e-5);
            s.positive("ode_step", ode_step);
            let replicas = s.usize_or("replicas", 1000);
            s.check(replicas >= 2, "replicas", format!("must be at least 2, got {replicas}"));
            let inner_step = s.opt_f64("inner_step");
            if let Some(h) = inner_step {
                s.positive("inner_step", h);
            }
            let independent_sides = s.opt_bool("independent_sides").unwrap_or(true);
            let refinement_replicas = s.usize_or("refinement_replicas", replicas);
            s.check(refinement_replicas >= 2, "refinement_replicas", format!("must be at least 2, got {refinement_replicas}"));
            let test_functions = s.opt_str_list("test_functions");
            let expected_slope = match s.opt_f64_list("expected_slope") {
                Some(v) if v.len() == 2 && v[0] <= v[1] => Some((v[0], v[1])),
                Some(_) => {
                    s.fail("expected_slope", "must be [low, high] with low <= high");
                    None
                }
                None => None,
            };
            let initial = s.fixed_initial(model);
            ExperimentParams::WeakError(WeakError {
                scheme,
                sde_kind,
                coupling,
                horizon,
                eta_grid,
                batch_size,
                mode,
                ode_step,
                replicas,
                inner_step,
                independent_sides,
                refinement_replicas,
                test_functions,
                expected_slope,
                initial,
            })
        }
        ExperimentKind::StationaryFdr => {
            let engine = s
                .opt_str("engine")
                .and_then(|e| parse_engine(e).map_err(|m| s.fail("engine", m)).ok())
                .unwrap_or(Engine::Sde(SdeKind::SmlSde));
            let eta = s.eta("eta");
            let batch_size = s.batch_size(1, 1);
            let horizon = s.req_f64("horizon");
            s.positive("horizon", horizon);
            let replicas = s.usize_or("replicas", 16);
            s.at_least_one("replicas", replicas);
            let burn_in_fraction = s.f64_or("burn_in_fraction", 0.5);
            s.check((0.0..=1.0).contains(&burn_in_fraction), "burn_in_fraction", format!("must lie in [0, 1), got {burn_in_fraction}"));
            let thin = s.opt_usize("thin");
            if let Some(t) = thin {
                s.at_least_one("thin", t);
            }
            let sampling = match s.opt_str("sampling").unwrap_or("time-average") {
                "time-average" => SamplingMode::TimeAverage,
                "ensemble" => SamplingMode::Ensemble,
                other => {
                    s.fail("sampling", format!("unknown sampling {other:?}; expected time-average or ensemble"));
                    SamplingMode::TimeAverage
                }
            };
            let inner_step = s.opt_f64("inner_step");
            if let Some(h) = inner_step {
                s.positive("inner_step", h);
            }
            let acknowledge_non_dissipative = s.opt_bool("acknowledge_non_dissipative").unwrap_or(false);
            let initial = s.initial(model);
            ExperimentParams::StationaryFdr(StationaryFdr {
                engine,
                eta,
                batch_size,
                horizon,
                replicas,
                burn_in_fraction,
                thin,
                sampling,
                inner_step,
                acknowledge_non_dissipative,
                initial,
            })
        }
        ExperimentKind::ConditionCheck => {
            let sde_kind = s.opt_parse("sde_kind").unwrap_or(SdeKind::SmlSde);
            let eta = s.eta("eta");
            let batch_size = s.batch_size(1, 1);
            let m0 = s.f64_or("m0", 1.0);
            s.positive("m0", m0);
            let r_max = s.f64_or("r_max", 10.0);
            s.check(r_max >= m0 && r_max.is_finite(), "r_max", format!("must satisfy m0 <= r_max < inf, got {r_max}"));
            let probes = s.usize_or("probes", 10_000);
            s.at_least_one("probes", probes);
            let lm = s.opt_f64("lyapunov_m");
            let le = s.opt_f64("lyapunov_epsilon");
            let ll = s.opt_f64("lyapunov_l");
            let lyapunov = match (lm, le) {
                (Some(m), Some(e)) => Some((m, e, ll)),
                (None, None) => {
                    if ll.is_some() {
                        s.fail("lyapunov_l", "needs lyapunov_m and lyapunov_epsilon");
                    }
                    None
                }
                _ => {
                    s.fail("lyapunov_m", "lyapunov_m and lyapunov_epsilon go together");
                    None
                }
            };
            ExperimentParams::ConditionCheck(ConditionCheck { sde_kind, eta, batch_size, m0, r_max, probes, lyapunov })
        }
        ExperimentKind::ScheduleDemo => {
            let eta = s.eta("eta");
            let epsilon = s.f64_or("epsilon", 0.1);
            s.check(epsilon >= 0.0 && epsilon.is_finite(), "epsilon", format!("must satisfy epsilon >= 0, got {epsilon}"));
            let delta = s.f64_or("delta", 0.1);
            s.check((0.0..1.0).contains(&delta), "delta", format!("must lie in [0, 1), got {delta}"));
            let batch_size = s.batch_size(4, 2);
            let window = s.usize_or("window", 100);
            s.at_least_one("window", window);
            let eta_min = s.f64_or("eta_min", 0.01);
            s.check(eta_min > 0.0 && (eta.is_nan() || eta_min <= eta), "eta_min", format!("must satisfy 0 < eta_min <= eta, got {eta_min}"));
            let steps = s.opt_usize("steps").unwrap_or_else(|| {
                s.fail("steps", "required");
                0
            });
            let record_every = s.usize_or("record_every", 1);
            s.at_least_one("record_every", record_every);
            let initial = s.fixed_initial(model);
            ExperimentParams::ScheduleDemo(ScheduleDemo { eta, epsilon, delta, batch_size, window, eta_min, steps, record_every, initial })
        }
    };
    s.finish(errors);
    Some(params)
}

/// Parses TOML text. `kind` is the subcommand; a config naming a different
/// experiment is rejected. Relative dataset paths resolve against `base`.
pub fn parse_config_str(text: &str, kind: Option<ExperimentKind>, seed: Option<u64>, base: &Path) -> Result<ExperimentConfig, ConfigError> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError { violations: vec![format!("not valid TOML: {}", e.message())] })?;
    let mut errors = Vec::new();
    let mut top = Section::new("", Some(&root));
    let named = top.opt_parse::<ExperimentKind>("experiment");
    let file_seed = top.opt_u64("seed");
    let out = top.opt_str("out").map(PathBuf::from);
    top.used.insert("model".into());
    top.used.insert("dataset".into());
    let kind = match (kind, named) {
        (Some(k), Some(n)) if k != n => {
            top.fail("experiment", format!("config is for {n}, but the subcommand is {k}"));
            k
        }
        (Some(k), _) => k,
        (None, Some(n)) => n,
        (None, None) => {
            top.fail("experiment", "required when no subcommand is given");
            ExperimentKind::SimulateSga
        }
    };
    top.used.insert(kind.name().into());
    top.finish(&mut errors);

    let seed = seed.or(file_seed).unwrap_or(0);
    let mut echo = root.clone();
    echo.remove("out");
    echo.insert("experiment".into(), Value::String(kind.name().into()));
    echo.insert("seed".into(), Value::Integer(seed as i64));

    let model = parse_model(&root, &mut errors);
    let dataset = parse_dataset(&root, model.as_ref(), base, &mut errors, &mut echo);
    let params = model.as_ref().and_then(|m| parse_params(kind, &root, m, &mut errors));
    match (model, params) {
        (Some(model), Some(params)) if errors.is_empty() => Ok(ExperimentConfig { kind, seed, out, model, dataset, params, echo }),
        _ => Err(ConfigError { violations: errors }),
    }
}

pub fn parse_config(path: &Path, kind: Option<ExperimentKind>, seed: Option<u64>) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError { violations: vec![format!("cannot read {}: {e}", path.display())] })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, kind, seed, &base)
}

impl Section<'_> {
    fn opt_u64(&mut self, key: &str) -> Option<u64> {
        match self.raw(key)? {
            Value::Integer(v) if *v >= 0 => Some(*v as u64),
            other => {
                self.fail(key, format!("expected a nonnegative integer, got {other}"));
                None
            }
        }
    }
}
