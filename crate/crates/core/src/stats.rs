//! Gradient statistics: full and minibatch gradients, per-sample covariances,
//! unbiased estimators, batch enumeration and PSD square roots.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{Dataset, GradientPair, HessianBlocks, JointParams, Matrix, MinimaxModel, Vector};

/// Hard cap on the number of outcomes an enumeration oracle will visit.
pub const ENUMERATION_BOUND: u64 = 1_000_000;

/// `B` index pairs drawn i.i.d. with replacement, plus optional synthetic noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub pairs: Vec<(usize, usize)>,
    /// Per-sample standard normal vectors of length `d_θ + d_ω`; present only
    /// for models that inject noise.
    pub noise: Option<Vec<Vector>>,
}

impl Minibatch {
    pub fn from_pairs(pairs: Vec<(usize, usize)>) -> Self {
        Self { pairs, noise: None }
    }

    /// Pairs given by row-major flat indices into the dataset.
    pub fn from_flat(dataset: &Dataset, indices: &[usize]) -> Self {
        Self::from_pairs(indices.iter().map(|&k| dataset.pair(k)).collect())
    }

    /// Every pair of the dataset exactly once.
    pub fn full(dataset: &Dataset) -> Self {
        Self::from_pairs(dataset.iter_pairs().collect())
    }

    pub fn sample<R: Rng + ?Sized>(
        model: &MinimaxModel,
        dataset: &Dataset,
        size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = dataset.latents().len();
        let m = dataset.reals().len();
        let pairs = (0..size)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..m)))
            .collect();
        let noise = model.injects_noise().then(|| {
            (0..size)
                .map(|_| Vector::from_fn(model.dim(), |_, _| rng.sample(StandardNormal)))
                .collect()
        });
        Ok(Self { pairs, noise })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (n, m) = (dataset.latents().len(), dataset.reals().len());
        if let Some(&(i, j)) = self.pairs.iter().find(|&&(i, j)| i >= n || j >= m) {
            return Err(Error::InvalidArgument(format!(
                "batch pair ({i}, {j}) out of range for N={n}, M={m}"
            )));
        }
        if let Some(noise) = &self.noise {
            if noise.len() != self.pairs.len() {
                return Err(Error::InvalidArgument("noise count differs from batch size".into()));
            }
        }
        Ok(())
    }
}

/// Full gradients and per-sample gradient covariances at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStats {
    pub g_theta: Vector,
    pub g_omega: Vector,
    pub sigma_theta: Matrix,
    pub sigma_omega: Matrix,
    /// `Cov(g_θ^{ij}, g_ω^{ij})`, d_θ × d_ω.
    pub cross: Matrix,
}

impl GradientStats {
    pub fn gradients(&self) -> GradientPair {
        GradientPair { theta: self.g_theta.clone(), omega: self.g_omega.clone() }
    }

    /// `diag(Σ_θ, Σ_ω)`, optionally with the off-diagonal blocks a shared
    /// batch induces on the update direction `(-g_θ; g_ω)`.
    pub fn joint_covariance(&self, shared_batch: bool) -> Matrix {
        let dt = self.g_theta.len();
        let dw = self.g_omega.len();
        let mut c = Matrix::zeros(dt + dw, dt + dw);
        c.view_mut((0, 0), (dt, dt)).copy_from(&self.sigma_theta);
        c.view_mut((dt, dt), (dw, dw)).copy_from(&self.sigma_omega);
        if shared_batch {
            c.view_mut((0, dt), (dt, dw)).copy_from(&(-&self.cross));
            c.view_mut((dt, 0), (dw, dt)).copy_from(&(-self.cross.transpose()));
        }
        c
    }
}

fn checked(g: GradientPair, model: &MinimaxModel, i: usize, j: usize, params: &JointParams) -> Result<GradientPair> {
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::NonFinite(format!(
            "{} per-sample gradient at pair (i={i}, j={j}) with {params}",
            model.kind()
        )))
    }
}

pub fn full_gradients(model: &MinimaxModel, dataset: &Dataset, params: &JointParams) -> Result<GradientPair> {
    model.check_params(params)?;
    model.check_dataset(dataset)?;
    let (dt, dw) = model.dims();
    if model.quad_coefficients().is_some() {
        let g = model.sample_gradients(params, &dataset.latents()[0], &dataset.reals()[0]);
        return checked(g, model, 0, 0, params);
    }
    let mut acc = GradientPair::zeros(dt, dw);
    for (i, j) in dataset.iter_pairs() {
        let g = checked(
            model.sample_gradients(params, &dataset.latents()[i], &dataset.reals()[j]),
            model,
            i,
            j,
            params,
        )?;
        acc.theta += g.theta;
        acc.omega += g.omega;
    }
    let n = dataset.pair_count() as f64;
    acc.theta /= n;
    acc.omega /= n;
    Ok(acc)
}

/// Per-sample gradients of the batch, injected noise included.
pub fn sample_gradients(
    model: &MinimaxModel,
    dataset: &Dataset,
    batch: &Minibatch,
    params: &JointParams,
) -> Result<Vec<GradientPair>> {
    model.check_params(params)?;
    model.check_dataset(dataset)?;
    batch.validate(dataset)?;
    let (dt, dw) = model.dims();
    let s = model.injected_noise_scale();
    batch
        .pairs
        .iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            let mut g = checked(
                model.sample_gradients(params, &dataset.latents()[i], &dataset.reals()[j]),
                model,
                i,
                j,
                params,
            )?;
            if let Some(noise) = &batch.noise {
                g.theta += s * noise[k].rows(0, dt);
                g.omega += s * noise[k].rows(dt, dw);
            }
            Ok(g)
        })
        .collect()
}

/// `g^B`, the batch average of per-sample gradients.
pub fn minibatch_gradients(
    model: &MinimaxModel,
    dataset: &Dataset,
    batch: &Minibatch,
    params: &JointParams,
) -> Result<GradientPair> {
    let samples = sample_gradients(model, dataset, batch, params)?;
    Ok(mean_gradient(&samples))
}

fn mean_gradient(samples: &[GradientPair]) -> GradientPair {
    let (dt, dw) = (samples[0].theta.len(), samples[0].omega.len());
    let mut acc = GradientPair::zeros(dt, dw);
    for g in samples {
        acc.theta += &g.theta;
        acc.omega += &g.omega;
    }
    let n = samples.len() as f64;
    acc.theta /= n;
    acc.omega /= n;
    acc
}

/// Population covariances of the per-sample gradients over all `N·M` pairs.
pub fn population_covariances(
    model: &MinimaxModel,
    dataset: &Dataset,
    params: &JointParams,
) -> Result<GradientStats> {
    let g = full_gradients(model, dataset, params)?;
    let (dt, dw) = model.dims();
    if model.quad_coefficients().is_some() {
        let s2 = model.injected_noise_scale().powi(2);
        return Ok(GradientStats {
            g_theta: g.theta,
            g_omega: g.omega,
            sigma_theta: s2 * Matrix::identity(dt, dt),
            sigma_omega: s2 * Matrix::identity(dw, dw),
            cross: Matrix::zeros(dt, dw),
        });
    }
    let mut st = Matrix::zeros(dt, dt);
    let mut sw = Matrix::zeros(dw, dw);
    let mut cross = Matrix::zeros(dt, dw);
    for (i, j) in dataset.iter_pairs() {
        let s = model.sample_gradients(params, &dataset.latents()[i], &dataset.reals()[j]);
        let et = &s.theta - &g.theta;
        let ew = &s.omega - &g.omega;
        st += &et * et.transpose();
        sw += &ew * ew.transpose();
        cross += &et * ew.transpose();
    }
    let n = dataset.pair_count() as f64;
    Ok(GradientStats {
        g_theta: g.theta,
        g_omega: g.omega,
        sigma_theta: st / n,
        sigma_omega: sw / n,
        cross: cross / n,
    })
}

/// `(Σ̂_θ, Σ̂_ω)` with the `1/(B-1)` normalisation.
pub fn unbiased_covariance_estimates(
    model: &MinimaxModel,
    dataset: &Dataset,
    batch: &Minibatch,
    params: &JointParams,
) -> Result<(Matrix, Matrix)> {
    if batch.len() < 2 {
        return Err(Error::EstimatorUndefined(batch.len()));
    }
    let samples = sample_gradients(model, dataset, batch, params)?;
    let (_, st, sw) = batch_statistics(&samples);
    Ok((st, sw))
}

/// Batch mean and unbiased covariances from per-sample gradients (`B ≥ 2`).
pub fn batch_statistics(samples: &[GradientPair]) -> (GradientPair, Matrix, Matrix) {
    let mean = mean_gradient(samples);
    let (dt, dw) = (mean.theta.len(), mean.omega.len());
    let mut st = Matrix::zeros(dt, dt);
    let mut sw = Matrix::zeros(dw, dw);
    for g in samples {
        let et = &g.theta - &mean.theta;
        let ew = &g.omega - &mean.omega;
        st += &et * et.transpose();
        sw += &ew * ew.transpose();
    }
    let denom = (samples.len() as f64 - 1.0).max(1.0);
    (mean, st / denom, sw / denom)
}

/// Jacobian blocks averaged over a batch (noise does not enter the Hessian).
pub fn minibatch_hessian_blocks(
    model: &MinimaxModel,
    dataset: &Dataset,
    batch: &Minibatch,
    params: &JointParams,
) -> Result<HessianBlocks> {
    model.check_params(params)?;
    batch.validate(dataset)?;
    let (dt, dw) = model.dims();
    let mut acc = HessianBlocks::zeros(dt, dw);
    for &(i, j) in &batch.pairs {
        acc.add_assign(&model.sample_hessian(params, &dataset.latents()[i], &dataset.reals()[j]));
    }
    acc.scale(1.0 / batch.len() as f64);
    Ok(acc)
}

/// Number of ordered tuples of length `length` over `alphabet` symbols, checked against the bound.
pub fn enumeration_count(alphabet: usize, length: usize) -> Result<u64> {
    let count = (alphabet as f64).powi(length as i32);
    if count > ENUMERATION_BOUND as f64 {
        return Err(Error::EnumerationTooLarge { count, bound: ENUMERATION_BOUND });
    }
    Ok(count as u64)
}

/// All ordered index tuples of length `length` over `0..alphabet`, in lexicographic order.
pub struct TupleEnumerator {
    alphabet: usize,
    current: Option<Vec<usize>>,
}

impl Iterator for TupleEnumerator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let mut next = out.clone();
        let mut pos = next.len();
        loop {
            if pos == 0 {
                self.current = None;
                break;
            }
            pos -= 1;
            next[pos] += 1;
            if next[pos] < self.alphabet {
                self.current = Some(next);
                break;
            }
            next[pos] = 0;
        }
        Some(out)
    }
}

pub fn enumerate_tuples(alphabet: usize, length: usize) -> Result<TupleEnumerator> {
    enumeration_count(alphabet, length)?;
    let current = (alphabet > 0).then(|| vec![0; length]);
    Ok(TupleEnumerator { alphabet, current })
}

/// Every ordered batch of size `size` over the dataset's pairs, each with probability `(NM)^{-B}`.
pub fn enumerate_batches(dataset: &Dataset, size: usize) -> Result<impl Iterator<Item = Minibatch> + '_> {
    if size == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(enumerate_tuples(dataset.pair_count(), size)?.map(move |t| Minibatch::from_flat(dataset, &t)))
}

/// Default eigenvalue clipping tolerance for a covariance matrix.
pub fn default_clip_tol(matrix: &Matrix) -> f64 {
    let scale = matrix.abs().max();
    (1e-10 * matrix.trace()).max(1e-14 * scale).max(f64::MIN_POSITIVE)
}

/// Symmetric PSD square root by spectral decomposition. Eigenvalues in
/// `[-clip_tol, clip_tol)` are set to zero.
pub fn psd_sqrt(matrix: &Matrix, clip_tol: f64) -> Result<Matrix> {
    if !matrix.is_square() {
        return Err(Error::Dimension(format!(
            "square root needs a square matrix, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to psd_sqrt".into()));
    }
    let asym = (matrix - matrix.transpose()).abs().max();
    if asym > 1e-10 * (1.0 + matrix.abs().max()) {
        return Err(Error::Asymmetric(asym));
    }
    let n = matrix.nrows();
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || matrix[(i, j)] == 0.0));
    let root_of = |lambda: f64| -> Result<f64> {
        if lambda < -clip_tol {
            Err(Error::Indefinite { eigenvalue: lambda, tolerance: clip_tol })
        } else if lambda < clip_tol {
            Ok(0.0)
        } else {
            Ok(lambda.sqrt())
        }
    };
    if diagonal {
        let mut r = Matrix::zeros(n, n);
        for i in 0..n {
            r[(i, i)] = root_of(matrix[(i, i)])?;
        }
        return Ok(r);
    }
    let sym = 0.5 * (matrix + matrix.transpose());
    let eig = SymmetricEigen::new(sym);
    let roots = eig
        .eigenvalues
        .iter()
        .map(|&l| root_of(l))
        .collect::<Result<Vec<f64>>>()?;
    let q = &eig.eigenvectors;
    let r = q * Matrix::from_diagonal(&Vector::from_vec(roots)) * q.transpose();
    Ok(0.5 * (&r + r.transpose()))
}

/// [`psd_sqrt`] with [`default_clip_tol`].
pub fn psd_sqrt_default(matrix: &Matrix) -> Result<Matrix> {
    psd_sqrt(matrix, default_clip_tol(matrix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn lin() -> (MinimaxModel, Dataset, JointParams) {
        (
            MinimaxModel::lin_wgan(),
            Dataset::scalar(&[1.0, 3.0], &[2.0, 0.0]).unwrap(),
            JointParams::scalar(1.0, 1.0),
        )
    }

    #[test]
    fn full_gradient_examples() {
        let (m, d, p) = lin();
        let g = full_gradients(&m, &d, &p).unwrap();
        assert_eq!((g.theta[0], g.omega[0]), (-2.0, -1.0));
        let g = full_gradients(&m, &d, &JointParams::scalar(7.0, 0.0)).unwrap();
        assert_eq!(g.theta[0], 0.0);
        let q = MinimaxModel::quad_sim(1.0, 1.0, 0.0, 1.0).unwrap();
        let g = full_gradients(&q, &Dataset::placeholder(1), &JointParams::scalar(2.0, 3.0)).unwrap();
        assert_eq!((g.theta[0], g.omega[0]), (2.0, -3.0));
    }

    #[test]
    fn minibatch_examples() {
        let (m, d, p) = lin();
        let g = minibatch_gradients(&m, &d, &Minibatch::from_pairs(vec![(1, 0)]), &p).unwrap();
        assert_eq!((g.theta[0], g.omega[0]), (-3.0, -1.0));
        let g = minibatch_gradients(&m, &d, &Minibatch::full(&d), &p).unwrap();
        assert_eq!((g.theta[0], g.omega[0]), (-2.0, -1.0));
        assert!(matches!(
            minibatch_gradients(&m, &d, &Minibatch::from_pairs(vec![]), &p),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn quad_noise_has_scaled_covariance() {
        let q = MinimaxModel::quad_sim(1.0, 1.0, 0.0, 2.0).unwrap();
        let d = Dataset::placeholder(1);
        let p = JointParams::scalar(0.0, 0.0);
        let mut rng = stream(3, 0);
        let n = 20_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let b = Minibatch::sample(&q, &d, 4, &mut rng).unwrap();
            let g = minibatch_gradients(&q, &d, &b, &p).unwrap();
            acc += g.theta[0] * g.theta[0];
        }
        let var = acc / n as f64;
        // s²/B = 1, standard error of a variance estimate ≈ √(2/n)
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt(), "{var}");
    }

    #[test]
    fn covariance_examples() {
        let (m, d, p) = lin();
        let s = population_covariances(&m, &d, &p).unwrap();
        assert_eq!(s.sigma_theta[(0, 0)], 1.0);
        assert_eq!(s.sigma_omega[(0, 0)], 2.0);
        let single = Dataset::scalar(&[1.5], &[0.3]).unwrap();
        let s = population_covariances(&m, &single, &p).unwrap();
        assert_eq!(s.sigma_theta[(0, 0)], 0.0);
        assert_eq!(s.sigma_omega[(0, 0)], 0.0);
        let s = population_covariances(&m, &d, &JointParams::scalar(1.0, 0.0)).unwrap();
        assert_eq!(s.sigma_theta[(0, 0)], 0.0);
    }

    #[test]
    fn unbiased_estimator_examples() {
        let (m, d, p) = lin();
        let (st, _) = unbiased_covariance_estimates(&m, &d, &Minibatch::from_pairs(vec![(0, 0), (1, 1)]), &p).unwrap();
        assert_eq!(st[(0, 0)], 2.0);
        let (st, sw) = unbiased_covariance_estimates(&m, &d, &Minibatch::from_pairs(vec![(1, 0); 3]), &p).unwrap();
        assert_eq!((st[(0, 0)], sw[(0, 0)]), (0.0, 0.0));
        assert!(matches!(
            unbiased_covariance_estimates(&m, &d, &Minibatch::from_pairs(vec![(1, 0)]), &p),
            Err(Error::EstimatorUndefined(1))
        ));
    }

    #[test]
    fn enumeration_guard_and_order() {
        let t: Vec<_> = enumerate_tuples(2, 2).unwrap().collect();
        assert_eq!(t, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert!(matches!(enumerate_tuples(1001, 2), Err(Error::EnumerationTooLarge { .. })));
        assert_eq!(enumerate_tuples(10, 6).unwrap().count(), 1_000_000);
    }

    #[test]
    fn psd_sqrt_examples() {
        let i = Matrix::identity(2, 2);
        assert_eq!(psd_sqrt_default(&i).unwrap(), i);
        assert_eq!(psd_sqrt_default(&Matrix::from_element(1, 1, 4.0)).unwrap()[(0, 0)], 2.0);
        let r = psd_sqrt_default(&Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 8.0])).unwrap();
        assert!((r[(0, 0)] - 2f64.sqrt()).abs() < 1e-15 && (r[(1, 1)] - 8f64.sqrt()).abs() < 1e-15);
        let full = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let r = psd_sqrt_default(&full).unwrap();
        assert!((&r * &r - &full).norm() < 1e-12);
        assert!(matches!(
            psd_sqrt_default(&Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])),
            Err(Error::Asymmetric(_))
        ));
        assert!(matches!(
            psd_sqrt_default(&Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])),
            Err(Error::Indefinite { .. })
        ));
    }
}
