use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gansde_bench::{quad_fixture, tanh_fixture};
use gansde_core::harness::testfn::TestFunction;
use gansde_core::harness::weak::{weak_error_curve, Process, StudyMode, WeakErrorConfig};
use gansde_core::rng::stream;
use gansde_core::sde::IntegratorConfig;
use gansde_core::stats::{population_covariances, psd_sqrt_default};
use gansde_core::{em_integrate, run_sga, Dataset, JointParams, Matrix, MinimaxModel, Scheme, SdeKind, SgaConfig};
use rand::Rng;
use std::hint::black_box;

fn sga(c: &mut Criterion) {
    let (model, data) = tanh_fixture(4, 32);
    let start = JointParams::from_slices(&[0.3; 4], &[0.2; 4]).unwrap();
    for scheme in [Scheme::Alt, Scheme::Sml] {
        let cfg = SgaConfig::new(scheme, 0.05, 8, 1000, 3);
        c.bench_function(&format!("sga_{scheme}_1000_steps_d4_b8"), |b| {
            b.iter(|| run_sga(&model, &data, &cfg, black_box(&start), &[]).unwrap())
        });
    }
}

fn euler_maruyama(c: &mut Criterion) {
    let (model, data) = quad_fixture();
    let start = JointParams::scalar(1.0, 1.0);
    for kind in [SdeKind::AltSde, SdeKind::SmlSde, SdeKind::SmlSde2] {
        let mut cfg = IntegratorConfig::new(1.0, 0);
        cfg.inner_step = Some(0.001);
        c.bench_function(&format!("em_{}_1000_substeps", kind.name()), |b| {
            b.iter_batched(
                || stream(4, 0),
                |mut rng| em_integrate(kind, &model, &data, black_box(&start), 0.1, 4, &cfg, &mut rng).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
}

fn linear_algebra(c: &mut Criterion) {
    let mut rng = stream(5, 0);
    let a = Matrix::from_fn(16, 16, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose();
    c.bench_function("psd_sqrt_16x16", |b| b.iter(|| psd_sqrt_default(black_box(&m)).unwrap()));

    let (model, data) = tanh_fixture(4, 32);
    let p = JointParams::from_slices(&[0.3; 4], &[0.2; 4]).unwrap();
    c.bench_function("population_covariances_1024_pairs", |b| {
        b.iter(|| population_covariances(&model, &data, black_box(&p)).unwrap())
    });
}

fn oracle_study(c: &mut Criterion) {
    let model = MinimaxModel::lin_wgan();
    let data = Dataset::scalar(&[1.0, 3.0], &[2.0, 0.0]).unwrap();
    let functions = TestFunction::polynomial_basis(1, 1);
    let cfg = WeakErrorConfig {
        left: Process::Sga(Scheme::Alt),
        right: Process::sde(SdeKind::AltSde),
        horizon: 1.0,
        eta_grid: vec![0.2, 0.1],
        batch_size: 1,
        initial: JointParams::scalar(1.0, 1.0),
        seed: 0,
        mode: StudyMode::Oracle { ode_step: 1e-4 },
    };
    let mut group = c.benchmark_group("weak_error");
    group.sample_size(10);
    group.bench_function("oracle_lin_wgan_two_steps", |b| b.iter(|| weak_error_curve(&model, &data, &cfg, &functions).unwrap()));
    group.finish();
}

criterion_group!(benches, sga, euler_maruyama, linear_algebra, oracle_study);
criterion_main!(benches);
