//! Minimax models.
//!
//! A model is a per-sample cost `J(D_ω(x), D_ω(G_θ(z)))` averaged over every
//! (latent, real) pair of a [`Dataset`]. Three of the built-in families share
//! one composite form
//!
//! ```text
//! J = F(ω·x) + H(ω·u),   u_k = φ(θ_k z_k)
//! ```
//!
//! which gives closed-form gradients and Hessian blocks by the chain rule:
//!
//! | family             | F(a)            | H(b)               | φ(y)    |
//! |--------------------|-----------------|--------------------|---------|
//! | `lin-wgan`         | a               | -b                 | y       |
//! | `tanh-wgan`        | tanh a          | -tanh b            | tanh y  |
//! | `vanilla-logistic` | ln clamp(s(a))  | ln(1-clamp(s(b)))  | y       |
//!
//! with `s` the logistic sigmoid. These families need `d_θ = d_ω = d` and data
//! vectors of length `d`. The fourth family, `quad-sim`, is the quadratic
//! saddle `a/2|θ|² + b θ·ω - c/2|ω|²` whose minibatch noise is synthetic
//! (Gaussian, covariance `s²I` per sample) rather than data driven.

use std::fmt;
use std::ops::AddAssign;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Logistic outputs are clamped into `[DISCRIMINATOR_FLOOR, 1 - DISCRIMINATOR_FLOOR]`.
pub const DISCRIMINATOR_FLOOR: f64 = 1e-12;

/// Generator and discriminator parameters `(θ, ω)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointParams {
    pub theta: Vector,
    pub omega: Vector,
}

impl JointParams {
    pub fn new(theta: Vector, omega: Vector) -> Result<Self> {
        if theta.is_empty() || omega.is_empty() {
            return Err(Error::Dimension(
                "parameter blocks must have at least one entry".into(),
            ));
        }
        let params = Self { theta, omega };
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters {params}")));
        }
        Ok(params)
    }

    pub fn from_slices(theta: &[f64], omega: &[f64]) -> Result<Self> {
        Self::new(Vector::from_column_slice(theta), Vector::from_column_slice(omega))
    }

    pub fn scalar(theta: f64, omega: f64) -> Self {
        Self {
            theta: Vector::from_element(1, theta),
            omega: Vector::from_element(1, omega),
        }
    }

    pub fn zeros(d_theta: usize, d_omega: usize) -> Self {
        Self {
            theta: Vector::zeros(d_theta),
            omega: Vector::zeros(d_omega),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.theta.len(), self.omega.len())
    }

    pub fn dim(&self) -> usize {
        self.theta.len() + self.omega.len()
    }

    /// `(θ; ω)` as a single column.
    pub fn stacked(&self) -> Vector {
        let (dt, dw) = self.dims();
        let mut u = Vector::zeros(dt + dw);
        u.rows_mut(0, dt).copy_from(&self.theta);
        u.rows_mut(dt, dw).copy_from(&self.omega);
        u
    }

    pub fn from_stacked(u: &Vector, d_theta: usize) -> Self {
        let d_omega = u.len() - d_theta;
        Self {
            theta: u.rows(0, d_theta).into_owned(),
            omega: u.rows(d_theta, d_omega).into_owned(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.theta.norm_squared() + self.omega.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(self.omega.iter()).all(|v| v.is_finite())
    }
}

impl fmt::Display for JointParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "θ={:?} ω={:?}", self.theta.as_slice(), self.omega.as_slice())
    }
}

/// Latent vectors `z_i` and real samples `x_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    latents: Vec<Vector>,
    reals: Vec<Vector>,
    bound: Option<f64>,
}

impl Dataset {
    pub fn new(latents: Vec<Vector>, reals: Vec<Vector>) -> Result<Self> {
        if latents.is_empty() || reals.is_empty() {
            return Err(Error::InvalidDataset(
                "need at least one latent and one real sample".into(),
            ));
        }
        for (kind, set) in [("z", &latents), ("x", &reals)] {
            let dim = set[0].len();
            for (i, v) in set.iter().enumerate() {
                if v.len() != dim {
                    return Err(Error::InvalidDataset(format!(
                        "{kind}[{i}] has length {} but {kind}[0] has length {dim}",
                        v.len()
                    )));
                }
                if v.iter().any(|e| !e.is_finite()) {
                    return Err(Error::InvalidDataset(format!("{kind}[{i}] is not finite")));
                }
            }
        }
        Ok(Self { latents, reals, bound: None })
    }

    /// One-dimensional data.
    pub fn scalar(z: &[f64], x: &[f64]) -> Result<Self> {
        Self::new(
            z.iter().map(|&v| Vector::from_element(1, v)).collect(),
            x.iter().map(|&v| Vector::from_element(1, v)).collect(),
        )
    }

    /// A single all-zero pair; the data-free models only need something to index.
    pub fn placeholder(dim: usize) -> Self {
        Self {
            latents: vec![Vector::zeros(dim)],
            reals: vec![Vector::zeros(dim)],
            bound: None,
        }
    }

    /// Uniform samples in `[-bound, bound]^dim`, with the box declared.
    pub fn uniform_box<R: Rng + ?Sized>(
        n: usize,
        m: usize,
        dim: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::InvalidDataset(format!("box bound must be positive, got {bound}")));
        }
        let mut draw = |count: usize| -> Vec<Vector> {
            (0..count)
                .map(|_| Vector::from_fn(dim, |_, _| rng.random_range(-bound..=bound)))
                .collect()
        };
        let latents = draw(n);
        let reals = draw(m);
        Self::new(latents, reals)?.with_bound(bound)
    }

    /// Declares the box `[-bound, bound]` and checks every entry against it.
    pub fn with_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::InvalidDataset(format!("box bound must be positive, got {bound}")));
        }
        for (kind, set) in [("z", &self.latents), ("x", &self.reals)] {
            for (i, v) in set.iter().enumerate() {
                if v.iter().any(|e| e.abs() > bound) {
                    return Err(Error::InvalidDataset(format!(
                        "{kind}[{i}] leaves the declared box [-{bound}, {bound}]"
                    )));
                }
            }
        }
        self.bound = Some(bound);
        Ok(self)
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn latents(&self) -> &[Vector] {
        &self.latents
    }

    pub fn reals(&self) -> &[Vector] {
        &self.reals
    }

    pub fn latent_dim(&self) -> usize {
        self.latents[0].len()
    }

    pub fn real_dim(&self) -> usize {
        self.reals[0].len()
    }

    /// Number of (i, j) pairs, `N·M`.
    pub fn pair_count(&self) -> usize {
        self.latents.len() * self.reals.len()
    }

    /// Row-major pair index to `(i, j)`.
    pub fn pair(&self, k: usize) -> (usize, usize) {
        (k / self.reals.len(), k % self.reals.len())
    }

    pub fn iter_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.pair_count()).map(|k| self.pair(k))
    }

    /// Parses the two-section CSV format: a header `kind,value...` and rows
    /// whose first field is `z` or `x`.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("kind") {
            return Err(Error::InvalidDataset(
                "CSV header must start with `kind`".into(),
            ));
        }
        let mut latents = Vec::new();
        let mut reals = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let kind = record.get(0).unwrap_or_default();
            let values = record
                .iter()
                .skip(1)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>().map_err(|e| {
                        Error::InvalidDataset(format!("row {}: bad value {s:?}: {e}", line + 2))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.is_empty() {
                return Err(Error::InvalidDataset(format!("row {} has no values", line + 2)));
            }
            let v = Vector::from_vec(values);
            match kind {
                "z" => latents.push(v),
                "x" => reals.push(v),
                other => {
                    return Err(Error::InvalidDataset(format!(
                        "row {}: kind must be `z` or `x`, got {other:?}",
                        line + 2
                    )))
                }
            }
        }
        Self::new(latents, reals)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_csv_reader(file)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinWgan,
    TanhWgan,
    VanillaLogistic,
    QuadSim,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::LinWgan,
        ModelKind::TanhWgan,
        ModelKind::VanillaLogistic,
        ModelKind::QuadSim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LinWgan => "lin-wgan",
            ModelKind::TanhWgan => "tanh-wgan",
            ModelKind::VanillaLogistic => "vanilla-logistic",
            ModelKind::QuadSim => "quad-sim",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidModel(format!("unknown model kind {s:?}")))
    }
}

/// Coefficients of `a/2|θ|² + b θ·ω - c/2|ω|²` and the per-sample noise scale `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadCoefficients {
    pub a: f64,
    pub c: f64,
    pub b: f64,
    pub s: f64,
}

impl Default for QuadCoefficients {
    fn default() -> Self {
        Self { a: 1.0, c: 1.0, b: 0.0, s: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair {
    pub theta: Vector,
    pub omega: Vector,
}

impl GradientPair {
    pub fn zeros(d_theta: usize, d_omega: usize) -> Self {
        Self { theta: Vector::zeros(d_theta), omega: Vector::zeros(d_omega) }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(self.omega.iter()).all(|v| v.is_finite())
    }

    /// The leading drift `(-g_θ; g_ω)`.
    pub fn drift(&self) -> Vector {
        let (dt, dw) = (self.theta.len(), self.omega.len());
        let mut b = Vector::zeros(dt + dw);
        b.rows_mut(0, dt).copy_from(&(-&self.theta));
        b.rows_mut(dt, dw).copy_from(&self.omega);
        b
    }
}

/// Jacobian blocks of `(g_θ, g_ω)`: rows index the gradient, columns the variable.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianBlocks {
    /// ∇_θ g_θ, d_θ × d_θ
    pub dtheta_gtheta: Matrix,
    /// ∇_ω g_θ, d_θ × d_ω
    pub domega_gtheta: Matrix,
    /// ∇_θ g_ω, d_ω × d_θ
    pub dtheta_gomega: Matrix,
    /// ∇_ω g_ω, d_ω × d_ω
    pub domega_gomega: Matrix,
}

impl HessianBlocks {
    pub fn zeros(d_theta: usize, d_omega: usize) -> Self {
        Self {
            dtheta_gtheta: Matrix::zeros(d_theta, d_theta),
            domega_gtheta: Matrix::zeros(d_theta, d_omega),
            dtheta_gomega: Matrix::zeros(d_omega, d_theta),
            domega_gomega: Matrix::zeros(d_omega, d_omega),
        }
    }

    pub fn add_assign(&mut self, other: &HessianBlocks) {
        self.dtheta_gtheta += &other.dtheta_gtheta;
        self.domega_gtheta += &other.domega_gtheta;
        self.dtheta_gomega += &other.dtheta_gomega;
        self.domega_gomega += &other.domega_gomega;
    }

    pub fn scale(&mut self, factor: f64) {
        self.dtheta_gtheta *= factor;
        self.domega_gtheta *= factor;
        self.dtheta_gomega *= factor;
        self.domega_gomega *= factor;
    }

    /// Full Hessian of Φ in `(θ, ω)` order.
    pub fn full(&self) -> Matrix {
        let dt = self.dtheta_gtheta.nrows();
        let dw = self.domega_gomega.nrows();
        let mut h = Matrix::zeros(dt + dw, dt + dw);
        h.view_mut((0, 0), (dt, dt)).copy_from(&self.dtheta_gtheta);
        h.view_mut((0, dt), (dt, dw)).copy_from(&self.domega_gtheta);
        h.view_mut((dt, 0), (dw, dt)).copy_from(&self.dtheta_gomega);
        h.view_mut((dt, dt), (dw, dw)).copy_from(&self.domega_gomega);
        h
    }

    /// Jacobian of the leading drift `b0 = (-g_θ; g_ω)`.
    pub fn drift_jacobian(&self) -> Matrix {
        let dt = self.dtheta_gtheta.nrows();
        let mut j = self.full();
        j.rows_mut(0, dt).neg_mut();
        j
    }

    /// Largest violation of the two symmetry invariants.
    pub fn symmetry_defect(&self) -> f64 {
        let asym = |m: &Matrix| (m - m.transpose()).abs().max();
        let mixed = (&self.domega_gtheta - self.dtheta_gomega.transpose()).abs().max();
        asym(&self.dtheta_gtheta)
            .max(asym(&self.domega_gomega))
            .max(mixed)
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.dtheta_gtheta,
            &self.domega_gtheta,
            &self.dtheta_gomega,
            &self.domega_gomega,
        ]
        .iter()
        .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Finite-difference Hessian blocks and their diagnostics.
#[derive(Clone, Debug)]
pub struct FiniteDifferenceHessian {
    pub blocks: HessianBlocks,
    /// Largest step used, `1e-5·(1+|coordinate|)`.
    pub max_step: f64,
    pub symmetry_defect: f64,
    pub warning: Option<String>,
}

/// Scalar link functions: value, first and second derivative.
type Link = (f64, f64, f64);

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

fn tanh_link(y: f64) -> Link {
    let t = y.tanh();
    let d1 = 1.0 - t * t;
    (t, d1, -2.0 * t * d1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinimaxModel {
    kind: ModelKind,
    d_theta: usize,
    d_omega: usize,
    quad: Option<QuadCoefficients>,
}

/// Constructs a model from its kind name, dimensions, and (for `quad-sim`) coefficients.
pub fn build_model(
    kind: &str,
    d_theta: usize,
    d_omega: usize,
    coefficients: Option<QuadCoefficients>,
) -> Result<MinimaxModel> {
    let kind: ModelKind = kind.parse()?;
    MinimaxModel::new(kind, d_theta, d_omega, coefficients)
}

impl MinimaxModel {
    pub fn new(
        kind: ModelKind,
        d_theta: usize,
        d_omega: usize,
        coefficients: Option<QuadCoefficients>,
    ) -> Result<Self> {
        if d_theta == 0 || d_omega == 0 {
            return Err(Error::InvalidModel("d_theta and d_omega must be at least 1".into()));
        }
        let quad = match kind {
            ModelKind::QuadSim => {
                let q = coefficients.unwrap_or_default();
                if !(q.a > 0.0) || !(q.c > 0.0) {
                    return Err(Error::InvalidModel(format!(
                        "dissipativity coefficient must be positive (a={}, c={})",
                        q.a, q.c
                    )));
                }
                if !q.b.is_finite() || !(q.s >= 0.0) || !q.s.is_finite() || !q.a.is_finite() || !q.c.is_finite() {
                    return Err(Error::InvalidModel(format!(
                        "quad-sim needs finite b and s >= 0 (b={}, s={})",
                        q.b, q.s
                    )));
                }
                Some(q)
            }
            _ => {
                if coefficients.is_some() {
                    return Err(Error::InvalidModel(format!(
                        "{kind} takes no quadratic coefficients"
                    )));
                }
                if d_theta != d_omega {
                    return Err(Error::InvalidModel(format!(
                        "{kind} needs d_theta == d_omega (got {d_theta} and {d_omega})"
                    )));
                }
                None
            }
        };
        Ok(Self { kind, d_theta, d_omega, quad })
    }

    pub fn lin_wgan() -> Self {
        Self::new(ModelKind::LinWgan, 1, 1, None).expect("valid")
    }

    pub fn tanh_wgan() -> Self {
        Self::new(ModelKind::TanhWgan, 1, 1, None).expect("valid")
    }

    pub fn vanilla_logistic() -> Self {
        Self::new(ModelKind::VanillaLogistic, 1, 1, None).expect("valid")
    }

    pub fn quad_sim(a: f64, c: f64, b: f64, s: f64) -> Result<Self> {
        Self::new(ModelKind::QuadSim, 1, 1, Some(QuadCoefficients { a, c, b, s }))
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_theta, self.d_omega)
    }

    pub fn dim(&self) -> usize {
        self.d_theta + self.d_omega
    }

    pub fn quad_coefficients(&self) -> Option<QuadCoefficients> {
        self.quad
    }

    /// Per-sample noise scale of the synthetic-noise model; zero otherwise.
    pub fn injected_noise_scale(&self) -> f64 {
        self.quad.map_or(0.0, |q| q.s)
    }

    /// Whether minibatch gradients carry Gaussian noise that is not a function of the batch indices.
    pub fn injects_noise(&self) -> bool {
        self.injected_noise_scale() > 0.0
    }

    pub fn check_params(&self, params: &JointParams) -> Result<()> {
        if params.dims() != self.dims() {
            return Err(Error::Dimension(format!(
                "{} expects (d_theta, d_omega) = {:?}, got {:?}",
                self.kind,
                self.dims(),
                params.dims()
            )));
        }
        Ok(())
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if self.kind == ModelKind::QuadSim {
            return Ok(());
        }
        let d = self.d_theta;
        if dataset.latent_dim() != d || dataset.real_dim() != d {
            return Err(Error::Dimension(format!(
                "{} with d={d} needs z and x of length {d}, got {} and {}",
                self.kind,
                dataset.latent_dim(),
                dataset.real_dim()
            )));
        }
        if self.kind == ModelKind::TanhWgan && dataset.bound().is_none() {
            return Err(Error::InvalidDataset(
                "tanh-wgan needs a dataset with a declared bounding box".into(),
            ));
        }
        Ok(())
    }

    fn outer_real(&self, a: f64) -> Link {
        match self.kind {
            ModelKind::LinWgan => (a, 1.0, 0.0),
            ModelKind::TanhWgan => tanh_link(a),
            ModelKind::VanillaLogistic => {
                let d = sigmoid(a);
                if d < DISCRIMINATOR_FLOOR {
                    (DISCRIMINATOR_FLOOR.ln(), 0.0, 0.0)
                } else if d > 1.0 - DISCRIMINATOR_FLOOR {
                    ((1.0 - DISCRIMINATOR_FLOOR).ln(), 0.0, 0.0)
                } else {
                    (-softplus(-a), 1.0 - d, -d * (1.0 - d))
                }
            }
            ModelKind::QuadSim => unreachable!("quad-sim has no composite form"),
        }
    }

    fn outer_fake(&self, b: f64) -> Link {
        match self.kind {
            ModelKind::LinWgan => (-b, -1.0, 0.0),
            ModelKind::TanhWgan => {
                let (v, d1, d2) = tanh_link(b);
                (-v, -d1, -d2)
            }
            ModelKind::VanillaLogistic => {
                let d = sigmoid(b);
                if d < DISCRIMINATOR_FLOOR {
                    ((1.0 - DISCRIMINATOR_FLOOR).ln(), 0.0, 0.0)
                } else if d > 1.0 - DISCRIMINATOR_FLOOR {
                    (DISCRIMINATOR_FLOOR.ln(), 0.0, 0.0)
                } else {
                    (-softplus(b), -d, -d * (1.0 - d))
                }
            }
            ModelKind::QuadSim => unreachable!("quad-sim has no composite form"),
        }
    }

    fn generator(&self, y: f64) -> Link {
        match self.kind {
            ModelKind::TanhWgan => tanh_link(y),
            _ => (y, 1.0, 0.0),
        }
    }

    /// Coupling matrix of the quadratic model: ones on the leading diagonal.
    fn coupling(&self) -> Matrix {
        Matrix::from_fn(self.d_theta, self.d_omega, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Per-sample cost `J(D_ω(x), D_ω(G_θ(z)))`.
    pub fn sample_loss(&self, params: &JointParams, z: &Vector, x: &Vector) -> f64 {
        if let Some(q) = self.quad {
            let cross = (params.theta.transpose() * self.coupling() * &params.omega)[(0, 0)];
            return 0.5 * q.a * params.theta.norm_squared() + q.b * cross
                - 0.5 * q.c * params.omega.norm_squared();
        }
        let u = Vector::from_fn(self.d_theta, |k, _| {
            self.generator(params.theta[k] * z[k]).0
        });
        let a = params.omega.dot(x);
        let b = params.omega.dot(&u);
        self.outer_real(a).0 + self.outer_fake(b).0
    }

    /// Per-sample gradients `(g_θ^{ij}, g_ω^{ij})`.
    pub fn sample_gradients(&self, params: &JointParams, z: &Vector, x: &Vector) -> GradientPair {
        if let Some(q) = self.quad {
            let p = self.coupling();
            return GradientPair {
                theta: q.a * &params.theta + q.b * (&p * &params.omega),
                omega: q.b * (p.transpose() * &params.theta) - q.c * &params.omega,
            };
        }
        let d = self.d_theta;
        let mut u = Vector::zeros(d);
        let mut db_dtheta = Vector::zeros(d);
        for k in 0..d {
            let (phi, dphi, _) = self.generator(params.theta[k] * z[k]);
            u[k] = phi;
            db_dtheta[k] = params.omega[k] * dphi * z[k];
        }
        let (_, f1, _) = self.outer_real(params.omega.dot(x));
        let (_, h1, _) = self.outer_fake(params.omega.dot(&u));
        GradientPair {
            theta: h1 * db_dtheta,
            omega: f1 * x + h1 * u,
        }
    }

    /// Per-sample Jacobian blocks of `(g_θ^{ij}, g_ω^{ij})`.
    pub fn sample_hessian(&self, params: &JointParams, z: &Vector, x: &Vector) -> HessianBlocks {
        if let Some(q) = self.quad {
            let p = self.coupling();
            return HessianBlocks {
                dtheta_gtheta: q.a * Matrix::identity(self.d_theta, self.d_theta),
                domega_gtheta: q.b * &p,
                dtheta_gomega: q.b * p.transpose(),
                domega_gomega: -q.c * Matrix::identity(self.d_omega, self.d_omega),
            };
        }
        let d = self.d_theta;
        let mut u = Vector::zeros(d);
        let mut db_dtheta = Vector::zeros(d);
        let mut curvature = Vector::zeros(d);
        let mut dphi_z = Vector::zeros(d);
        for k in 0..d {
            let (phi, dphi, ddphi) = self.generator(params.theta[k] * z[k]);
            u[k] = phi;
            db_dtheta[k] = params.omega[k] * dphi * z[k];
            curvature[k] = params.omega[k] * ddphi * z[k] * z[k];
            dphi_z[k] = dphi * z[k];
        }
        let (_, _, f2) = self.outer_real(params.omega.dot(x));
        let (_, h1, h2) = self.outer_fake(params.omega.dot(&u));

        let dtheta_gtheta =
            h2 * &db_dtheta * db_dtheta.transpose() + Matrix::from_diagonal(&(h1 * curvature));
        let domega_gtheta =
            h2 * &db_dtheta * u.transpose() + Matrix::from_diagonal(&(h1 * dphi_z));
        let dtheta_gomega = domega_gtheta.transpose();
        let domega_gomega = f2 * x * x.transpose() + h2 * &u * u.transpose();
        HessianBlocks { dtheta_gtheta, domega_gtheta, dtheta_gomega, domega_gomega }
    }

    /// Φ(θ, ω), the average per-sample cost over all `N·M` pairs.
    pub fn evaluate_loss(&self, dataset: &Dataset, params: &JointParams) -> Result<f64> {
        self.check_params(params)?;
        self.check_dataset(dataset)?;
        let mut total = 0.0;
        for (i, j) in dataset.iter_pairs() {
            let v = self.sample_loss(params, &dataset.latents[i], &dataset.reals[j]);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at pair (i={i}, j={j}) with {params}"
                )));
            }
            total += v;
        }
        Ok(total / dataset.pair_count() as f64)
    }

    /// Checked per-sample gradients for one `(z, x)`.
    pub fn per_sample_grads(
        &self,
        params: &JointParams,
        z: &Vector,
        x: &Vector,
    ) -> Result<GradientPair> {
        self.check_params(params)?;
        if self.kind != ModelKind::QuadSim && (z.len() != self.d_theta || x.len() != self.d_omega) {
            return Err(Error::Dimension(format!(
                "{} needs z and x of length {}",
                self.kind, self.d_theta
            )));
        }
        let g = self.sample_gradients(params, z, x);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "per-sample gradient at {params}, z={:?}, x={:?}",
                z.as_slice(),
                x.as_slice()
            )));
        }
        Ok(g)
    }

    /// Hessian blocks of Φ averaged over the dataset (analytic).
    pub fn full_hessian_blocks(&self, dataset: &Dataset, params: &JointParams) -> Result<HessianBlocks> {
        self.check_params(params)?;
        self.check_dataset(dataset)?;
        if self.quad.is_some() {
            return Ok(self.sample_hessian(params, &dataset.latents[0], &dataset.reals[0]));
        }
        let mut acc = HessianBlocks::zeros(self.d_theta, self.d_omega);
        for (i, j) in dataset.iter_pairs() {
            acc.add_assign(&self.sample_hessian(params, &dataset.latents[i], &dataset.reals[j]));
        }
        acc.scale(1.0 / dataset.pair_count() as f64);
        if !acc.is_finite() {
            return Err(Error::NonFinite(format!("Hessian blocks at {params}")));
        }
        Ok(acc)
    }

    /// Hessian blocks by central differences of the full gradients, step
    /// `1e-5·(1+|coordinate|)`. A warning is attached when the result breaks
    /// the symmetry invariants by more than `1e-5` relative.
    pub fn finite_difference_hessian_blocks(
        &self,
        dataset: &Dataset,
        params: &JointParams,
    ) -> Result<FiniteDifferenceHessian> {
        self.check_params(params)?;
        self.check_dataset(dataset)?;
        let n = self.dim();
        let u0 = params.stacked();
        let mut jac = Matrix::zeros(n, n);
        let mut max_step: f64 = 0.0;
        for col in 0..n {
            let h = 1e-5 * (1.0 + u0[col].abs());
            max_step = max_step.max(h);
            let mut up = u0.clone();
            up[col] += h;
            let mut dn = u0.clone();
            dn[col] -= h;
            let gp = self.stacked_gradient(dataset, &JointParams::from_stacked(&up, self.d_theta));
            let gm = self.stacked_gradient(dataset, &JointParams::from_stacked(&dn, self.d_theta));
            jac.set_column(col, &((gp - gm) / (2.0 * h)));
        }
        let (dt, dw) = self.dims();
        let blocks = HessianBlocks {
            dtheta_gtheta: jac.view((0, 0), (dt, dt)).into_owned(),
            domega_gtheta: jac.view((0, dt), (dt, dw)).into_owned(),
            dtheta_gomega: jac.view((dt, 0), (dw, dt)).into_owned(),
            domega_gomega: jac.view((dt, dt), (dw, dw)).into_owned(),
        };
        let symmetry_defect = blocks.symmetry_defect();
        let scale = 1.0 + jac.abs().max();
        let warning = (symmetry_defect > 1e-5 * scale).then(|| {
            format!(
                "finite-difference Hessian (step up to {max_step:e}) breaks symmetry by {symmetry_defect:e}"
            )
        });
        Ok(FiniteDifferenceHessian { blocks, max_step, symmetry_defect, warning })
    }

    fn stacked_gradient(&self, dataset: &Dataset, params: &JointParams) -> Vector {
        let mut g = Vector::zeros(self.dim());
        for (i, j) in dataset.iter_pairs() {
            let s = self.sample_gradients(params, &dataset.latents[i], &dataset.reals[j]);
            g.rows_mut(0, self.d_theta).add_assign(&s.theta);
            g.rows_mut(self.d_theta, self.d_omega).add_assign(&s.omega);
        }
        g / dataset.pair_count() as f64
    }
}


/// Φ evaluated over a dataset.
pub fn evaluate_loss(model: &MinimaxModel, dataset: &Dataset, params: &JointParams) -> Result<f64> {
    model.evaluate_loss(dataset, params)
}

pub fn per_sample_grads(
    model: &MinimaxModel,
    params: &JointParams,
    z: &Vector,
    x: &Vector,
) -> Result<GradientPair> {
    model.per_sample_grads(params, z, x)
}

pub fn full_hessian_blocks(
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
) -> Result<HessianBlocks> {
    model.full_hessian_blocks(dataset, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn lin_data() -> Dataset {
        Dataset::scalar(&[1.0, 3.0], &[2.0, 0.0]).unwrap()
    }

    #[test]
    fn lin_wgan_loss_is_hand_average() {
        let m = MinimaxModel::lin_wgan();
        let data = lin_data();
        let p = JointParams::scalar(1.0, 1.0);
        // brute force: mean over (z, x) of ω x - ω θ z
        let mut brute = 0.0;
        for z in [1.0, 3.0] {
            for x in [2.0, 0.0] {
                brute += x - z;
            }
        }
        brute /= 4.0;
        let phi = m.evaluate_loss(&data, &p).unwrap();
        assert!(close(phi, -1.0, 1e-15));
        assert!(close(phi, brute, 1e-15));
    }

    #[test]
    fn vanilla_at_zero_discriminator_is_minus_two_log_two() {
        let m = MinimaxModel::vanilla_logistic();
        let data = Dataset::scalar(&[0.3, -1.7, 2.0], &[0.5, 4.0]).unwrap();
        let p = JointParams::scalar(1.3, 0.0);
        let phi = m.evaluate_loss(&data, &p).unwrap();
        assert!(close(phi, -2.0 * 2f64.ln(), 1e-12), "{phi}");
    }

    #[test]
    fn tanh_at_origin_is_zero() {
        let m = MinimaxModel::tanh_wgan();
        let data = Dataset::scalar(&[0.2, -0.9], &[0.7]).unwrap().with_bound(1.0).unwrap();
        let p = JointParams::scalar(0.0, 0.0);
        assert_eq!(m.evaluate_loss(&data, &p).unwrap(), 0.0);
        let g = m.per_sample_grads(&p, &data.latents()[0], &data.reals()[0]).unwrap();
        assert_eq!(g.theta[0], 0.0);
    }

    #[test]
    fn per_sample_examples() {
        let m = MinimaxModel::lin_wgan();
        let p = JointParams::scalar(1.0, 1.0);
        let g = m
            .per_sample_grads(&p, &Vector::from_element(1, 3.0), &Vector::from_element(1, 0.0))
            .unwrap();
        assert_eq!(g.theta[0], -3.0);
        assert_eq!(g.omega[0], -3.0);

        let q = MinimaxModel::quad_sim(1.0, 1.0, 0.0, 1.0).unwrap();
        let g = q
            .per_sample_grads(&JointParams::scalar(2.0, 3.0), &Vector::zeros(1), &Vector::zeros(1))
            .unwrap();
        assert_eq!((g.theta[0], g.omega[0]), (2.0, -3.0));
    }

    #[test]
    fn hessian_block_examples() {
        let m = MinimaxModel::lin_wgan();
        let h = m.full_hessian_blocks(&lin_data(), &JointParams::scalar(0.4, -2.0)).unwrap();
        assert_eq!(h.full(), Matrix::from_row_slice(2, 2, &[0.0, -2.0, -2.0, 0.0]));

        let q = MinimaxModel::quad_sim(1.5, 0.7, 0.3, 1.0).unwrap();
        let h = q
            .full_hessian_blocks(&Dataset::placeholder(1), &JointParams::scalar(2.0, 3.0))
            .unwrap();
        assert_eq!(h.full(), Matrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, -0.7]));

        let t = MinimaxModel::tanh_wgan();
        let data = Dataset::scalar(&[1.0], &[1.0]).unwrap().with_bound(1.0).unwrap();
        let h = t.full_hessian_blocks(&data, &JointParams::scalar(0.0, 0.0)).unwrap();
        assert_eq!(h.domega_gomega[(0, 0)], 0.0);
    }

    #[test]
    fn build_model_validation() {
        assert!(build_model("quad-sim", 1, 1, Some(QuadCoefficients { a: 1.0, c: 1.0, b: 0.0, s: 1.0 })).is_ok());
        assert!(build_model("lin-wgan", 1, 1, None).is_ok());
        let err = build_model("quad-sim", 1, 1, Some(QuadCoefficients { a: -1.0, c: 1.0, b: 0.0, s: 1.0 }))
            .unwrap_err();
        assert!(err.to_string().contains("dissipativity coefficient must be positive"));
        assert!(build_model("dcgan", 1, 1, None).is_err());
        assert!(build_model("lin-wgan", 1, 2, None).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = MinimaxModel::lin_wgan();
        let p = JointParams::from_slices(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!(matches!(m.evaluate_loss(&lin_data(), &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_loss_names_the_pair() {
        let m = MinimaxModel::lin_wgan();
        let data = Dataset::scalar(&[0.0, 1e300], &[0.0]).unwrap();
        let p = JointParams::scalar(1e300, 1e300);
        let err = m.evaluate_loss(&data, &p).unwrap_err().to_string();
        assert!(err.contains("i=1"), "{err}");
    }

    #[test]
    fn vanilla_clamp_saturates_gradient() {
        let m = MinimaxModel::vanilla_logistic();
        let p = JointParams::scalar(1.0, 100.0);
        let g = m.sample_gradients(&p, &Vector::from_element(1, 1.0), &Vector::from_element(1, 1.0));
        assert_eq!(g.omega[0], 0.0);
        let loss = m.sample_loss(&p, &Vector::from_element(1, 1.0), &Vector::from_element(1, 1.0));
        assert!(loss.is_finite() && loss < -20.0);
    }

    #[test]
    fn csv_dataset_round() {
        let text = "kind,value\nz,1.0\nz,3.0\nx,2.0\nx,0.0\n";
        let d = Dataset::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(d, lin_data());
        assert!(Dataset::from_csv_reader("kind,value\ny,1\n".as_bytes()).is_err());
        assert!(Dataset::from_csv_reader("kind,value\nz,1\n".as_bytes()).is_err());
    }

    #[test]
    fn tanh_requires_box() {
        let m = MinimaxModel::tanh_wgan();
        let p = JointParams::scalar(0.1, 0.1);
        assert!(m.evaluate_loss(&lin_data(), &p).is_err());
        assert!(Dataset::scalar(&[2.0], &[0.0]).unwrap().with_bound(1.0).is_err());
    }
}
