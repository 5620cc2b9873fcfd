//! Test functions with polynomial growth certificates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Matrix, Vector};
use crate::sde::SmoothFunction;

#[derive(Clone, Debug, PartialEq)]
pub enum TestKind {
    /// `u_i`
    Coordinate(usize),
    /// `u_i u_j`
    Monomial(usize, usize),
    /// `tanh(aᵀu)`
    TanhLinear(Vector),
}

/// `f(u) = c + lᵀu + uᵀQu` with `Q` symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub constant: f64,
    pub linear: Vector,
    pub quadratic: Matrix,
}

impl Quadratic {
    /// `E f(U)` from the mean `m` and second moment `S = E[UUᵀ]`.
    pub fn expectation(&self, mean: &Vector, second: &Matrix) -> f64 {
        self.constant + self.linear.dot(mean) + (&self.quadratic * second).trace()
    }
}

/// A member of the test class: derivatives up to order 3 bounded by `k1(1 + ‖u‖^{2k2})`.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunction {
    pub label: String,
    pub kind: TestKind,
    pub dim: usize,
    pub k1: f64,
    pub k2: u32,
}

fn stacked_label(i: usize, d_theta: usize) -> String {
    if i < d_theta {
        format!("theta_{i}")
    } else {
        format!("omega_{}", i - d_theta)
    }
}

impl TestFunction {
    pub fn coordinate(i: usize, d_theta: usize, d_omega: usize) -> Self {
        Self {
            label: stacked_label(i, d_theta),
            kind: TestKind::Coordinate(i),
            dim: d_theta + d_omega,
            k1: 1.0,
            k2: 1,
        }
    }

    pub fn monomial(i: usize, j: usize, d_theta: usize, d_omega: usize) -> Self {
        let (i, j) = (i.min(j), i.max(j));
        let label = if i == j {
            format!("{}^2", stacked_label(i, d_theta))
        } else {
            format!("{}*{}", stacked_label(i, d_theta), stacked_label(j, d_theta))
        };
        Self { label, kind: TestKind::Monomial(i, j), dim: d_theta + d_omega, k1: 2.0, k2: 1 }
    }

    pub fn tanh_linear(a: Vector) -> Self {
        let n = a.norm();
        let k1 = [1.0, n, n * n, 2.0 * n.powi(3)].into_iter().fold(0.0, f64::max);
        Self { label: "tanh_linear".into(), dim: a.len(), kind: TestKind::TanhLinear(a), k1, k2: 0 }
    }

    /// Coordinates and all quadratic monomials.
    pub fn polynomial_basis(d_theta: usize, d_omega: usize) -> Vec<Self> {
        let n = d_theta + d_omega;
        let mut out: Vec<Self> = (0..n).map(|i| Self::coordinate(i, d_theta, d_omega)).collect();
        for i in 0..n {
            for j in i..n {
                out.push(Self::monomial(i, j, d_theta, d_omega));
            }
        }
        out
    }

    /// The polynomial basis plus `tanh` of a random unit linear form.
    pub fn default_basis<R: Rng + ?Sized>(d_theta: usize, d_omega: usize, rng: &mut R) -> Vec<Self> {
        let mut out = Self::polynomial_basis(d_theta, d_omega);
        let a = Vector::from_fn(d_theta + d_omega, |_, _| rng.random_range(-1.0..1.0));
        let norm = a.norm().max(1e-12);
        out.push(Self::tanh_linear(a / norm));
        out
    }

    /// Looks up a basis function by label, e.g. `theta_0`, `omega_0^2`, `theta_0*omega_0`.
    pub fn by_label(label: &str, d_theta: usize, d_omega: usize) -> Result<Self> {
        Self::polynomial_basis(d_theta, d_omega)
            .into_iter()
            .find(|f| f.label == label)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown test function {label:?}")))
    }

    pub fn quadratic_form(&self) -> Option<Quadratic> {
        let n = self.dim;
        let mut linear = Vector::zeros(n);
        let mut quadratic = Matrix::zeros(n, n);
        match &self.kind {
            TestKind::Coordinate(i) => linear[*i] = 1.0,
            TestKind::Monomial(i, j) => {
                quadratic[(*i, *j)] += 0.5;
                quadratic[(*j, *i)] += 0.5;
            }
            TestKind::TanhLinear(_) => return None,
        }
        Some(Quadratic { constant: 0.0, linear, quadratic })
    }

    /// Norms of the derivatives of order 0 to 3 (Frobenius for tensors).
    pub fn derivative_norms(&self, u: &Vector) -> [f64; 4] {
        match &self.kind {
            TestKind::Coordinate(i) => [u[*i].abs(), 1.0, 0.0, 0.0],
            TestKind::Monomial(i, j) => {
                let g = self.gradient(u).norm();
                let h = if i == j { 2.0 } else { 2f64.sqrt() };
                [(u[*i] * u[*j]).abs(), g, h, 0.0]
            }
            TestKind::TanhLinear(a) => {
                let t = a.dot(u).tanh();
                let s = 1.0 - t * t;
                let n = a.norm();
                [t.abs(), s * n, (2.0 * t * s).abs() * n * n, (2.0 * s * (1.0 - 3.0 * t * t)).abs() * n.powi(3)]
            }
        }
    }

    pub fn growth_bound(&self, u: &Vector) -> f64 {
        self.k1 * (1.0 + u.norm().powi(2 * self.k2 as i32))
    }

    /// Checks the certificate at `probes` points with radii uniform in `[0, radius]`.
    pub fn verify_certificate<R: Rng + ?Sized>(&self, probes: usize, radius: f64, rng: &mut R) -> Result<()> {
        for _ in 0..probes {
            let dir = Vector::from_fn(self.dim, |_, _| rng.random_range(-1.0..1.0));
            let r = rng.random_range(0.0..=radius);
            let u = dir.normalize() * r;
            let bound = self.growth_bound(&u);
            let norms = self.derivative_norms(&u);
            if let Some(order) = norms.iter().position(|&v| v > bound * (1.0 + 1e-12)) {
                return Err(Error::InvalidArgument(format!(
                    "{}: derivative of order {order} is {:e} > {:e} at radius {r}",
                    self.label, norms[order], bound
                )));
            }
        }
        Ok(())
    }
}

impl SmoothFunction for TestFunction {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn value(&self, u: &Vector) -> f64 {
        match &self.kind {
            TestKind::Coordinate(i) => u[*i],
            TestKind::Monomial(i, j) => u[*i] * u[*j],
            TestKind::TanhLinear(a) => a.dot(u).tanh(),
        }
    }

    fn gradient(&self, u: &Vector) -> Vector {
        let mut g = Vector::zeros(self.dim);
        match &self.kind {
            TestKind::Coordinate(i) => g[*i] = 1.0,
            TestKind::Monomial(i, j) => {
                g[*i] += u[*j];
                g[*j] += u[*i];
            }
            TestKind::TanhLinear(a) => {
                let t = a.dot(u).tanh();
                g = (1.0 - t * t) * a;
            }
        }
        g
    }

    fn hessian(&self, u: &Vector) -> Matrix {
        let mut h = Matrix::zeros(self.dim, self.dim);
        match &self.kind {
            TestKind::Coordinate(_) => {}
            TestKind::Monomial(i, j) => {
                h[(*i, *j)] += 1.0;
                h[(*j, *i)] += 1.0;
            }
            TestKind::TanhLinear(a) => {
                let t = a.dot(u).tanh();
                h = -2.0 * t * (1.0 - t * t) * a * a.transpose();
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn basis_labels_and_certificates() {
        let mut rng = stream(5, 0);
        let basis = TestFunction::default_basis(1, 1, &mut rng);
        let labels: Vec<_> = basis.iter().map(|f| f.label.clone()).collect();
        assert_eq!(labels, ["theta_0", "omega_0", "theta_0^2", "theta_0*omega_0", "omega_0^2", "tanh_linear"]);
        for f in &basis {
            f.verify_certificate(10_000, 1e3, &mut rng).unwrap();
        }
    }

    #[test]
    fn quadratic_forms_match_values() {
        let u = Vector::from_vec(vec![0.3, -1.7]);
        for f in TestFunction::polynomial_basis(1, 1) {
            let q = f.quadratic_form().unwrap();
            let v = q.constant + q.linear.dot(&u) + (u.transpose() * &q.quadratic * &u)[(0, 0)];
            assert!((v - f.value(&u)).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_derivatives_match_differences() {
        let f = TestFunction::tanh_linear(Vector::from_vec(vec![0.6, -0.8]));
        let u = Vector::from_vec(vec![0.4, 0.2]);
        let h = 1e-6;
        for i in 0..2 {
            let mut up = u.clone();
            up[i] += h;
            let mut dn = u.clone();
            dn[i] -= h;
            let fd = (f.value(&up) - f.value(&dn)) / (2.0 * h);
            assert!((fd - f.gradient(&u)[i]).abs() < 1e-8);
            let fdh = (f.gradient(&up) - f.gradient(&dn)) / (2.0 * h);
            assert!((fdh - f.hessian(&u).column(i)).amax() < 1e-7);
        }
    }
}
