use gansde_core::harness::testfn::TestFunction;
use gansde_core::rng::stream;
use gansde_core::sde::{b1_forms, B1_TOLERANCE};
use gansde_core::stats::{full_gradients, psd_sqrt_default};
use gansde_core::{
    build_model, run_sga, scheduler_step, Dataset, JointParams, Matrix, MinimaxModel, QuadCoefficients, Scheme,
    SchedulerState, SgaConfig, Vector,
};
use proptest::prelude::*;

fn composite(kind: &str) -> (MinimaxModel, Dataset) {
    let model = build_model(kind, 2, 2, None).unwrap();
    let data = Dataset::uniform_box(3, 3, 2, 1.0, &mut stream(77, 0)).unwrap();
    (model, data)
}

fn stacked_gradient(model: &MinimaxModel, data: &Dataset, u: &Vector) -> Vector {
    let dt = model.dims().0;
    let g = full_gradients(model, data, &JointParams::from_stacked(u, dt)).unwrap();
    let mut s = Vector::zeros(u.len());
    s.rows_mut(0, dt).copy_from(&g.theta);
    s.rows_mut(dt, u.len() - dt).copy_from(&g.omega);
    s
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.5f64..2.5, 4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradients_match_central_differences(kind in prop::sample::select(vec!["lin-wgan", "tanh-wgan", "vanilla-logistic"]), u in point()) {
        let (model, data) = composite(kind);
        let u = Vector::from_vec(u);
        let g = stacked_gradient(&model, &data, &u);
        for k in 0..4 {
            let h = 1e-5 * (1.0 + u[k].abs());
            let (mut a, mut b) = (u.clone(), u.clone());
            a[k] += h;
            b[k] -= h;
            let fa = model.evaluate_loss(&data, &JointParams::from_stacked(&a, 2)).unwrap();
            let fb = model.evaluate_loss(&data, &JointParams::from_stacked(&b, 2)).unwrap();
            let fd = (fa - fb) / (2.0 * h);
            prop_assert!((g[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{kind} coordinate {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn hessian_blocks_match_gradient_differences(kind in prop::sample::select(vec!["lin-wgan", "tanh-wgan", "vanilla-logistic"]), u in point()) {
        let (model, data) = composite(kind);
        let u = Vector::from_vec(u);
        let h = model.full_hessian_blocks(&data, &JointParams::from_stacked(&u, 2)).unwrap().full();
        for k in 0..4 {
            let step = 1e-5 * (1.0 + u[k].abs());
            let (mut a, mut b) = (u.clone(), u.clone());
            a[k] += step;
            b[k] -= step;
            let col = (stacked_gradient(&model, &data, &a) - stacked_gradient(&model, &data, &b)) / (2.0 * step);
            prop_assert!((h.column(k) - &col).amax() <= 1e-6 * (1.0 + col.amax()));
        }
        prop_assert!((&h - h.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn psd_square_root_round_trips(entries in prop::collection::vec(-3.0f64..3.0, 16), rank in 1usize..=4) {
        let a = Matrix::from_fn(4, rank, |i, j| entries[i * 4 + j]);
        let m = &a * a.transpose();
        let r = psd_sqrt_default(&m).unwrap();
        prop_assert!((&r - r.transpose()).amax() <= 1e-12 * (1.0 + r.amax()));
        prop_assert!((&r * &r - &m).amax() <= 1e-9 * (1.0 + m.amax()));
        let min_eig = r.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= -1e-7 * (1.0 + r.amax()));
    }

    #[test]
    fn drift_correction_forms_agree(kind in prop::sample::select(vec!["lin-wgan", "tanh-wgan", "vanilla-logistic"]), u in point()) {
        let (model, data) = composite(kind);
        let (a, b) = b1_forms(&model, &data, &JointParams::from_stacked(&Vector::from_vec(u), 2)).unwrap();
        prop_assert!((&a - &b).amax() <= B1_TOLERANCE * (1.0 + a.amax()));
    }

    #[test]
    fn quadratic_drift_correction_forms_agree(a in 0.1f64..3.0, c in 0.1f64..3.0, b in -2.0f64..2.0, u in point()) {
        let model = MinimaxModel::new(gansde_core::ModelKind::QuadSim, 2, 2, Some(QuadCoefficients { a, c, b, s: 1.0 })).unwrap();
        let (x, y) = b1_forms(&model, &Dataset::placeholder(1), &JointParams::from_stacked(&Vector::from_vec(u), 2)).unwrap();
        prop_assert!((&x - &y).amax() <= B1_TOLERANCE * (1.0 + x.amax()));
    }

    #[test]
    fn moment_monitor_sees_unrecorded_steps(b in -1.0f64..1.0, theta in 0.5f64..3.0, omega in -3.0f64..3.0, m in 1u32..=4) {
        // noiseless contraction: the running maximum is the starting value
        let model = MinimaxModel::quad_sim(1.0, 1.0, b, 0.0).unwrap();
        let mut cfg = SgaConfig::new(Scheme::Sml, 0.2, 1, 40, 0);
        cfg.record_every = 40;
        let start = JointParams::scalar(theta, omega);
        let t = run_sga(&model, &Dataset::placeholder(1), &cfg, &start, &[m]).unwrap();
        let (order, max) = t.moment_monitors[0];
        prop_assert_eq!(order, m);
        let expected = start.norm().powi(m as i32);
        prop_assert!((max - expected).abs() <= 1e-12 * expected);
        prop_assert!(t.states.iter().all(|s| s.norm().powi(m as i32) <= max * (1.0 + 1e-12)));
    }

    #[test]
    fn scheduler_never_increases_or_crosses_the_floor(ratios in prop::collection::vec(0.0f64..2.0, 1..200), delta in 0.0f64..0.9) {
        let mut s = SchedulerState::new(0.5, 0.2, delta, 4, 10, 0.05).unwrap();
        for r in ratios {
            let next = scheduler_step(&s, r);
            prop_assert!(next.eta <= s.eta && next.eta >= 0.05);
            prop_assert!((next.beta - 8.0 / next.eta).abs() <= 1e-12 * next.beta);
            s = next;
        }
    }
}

#[test]
fn growth_certificates_hold_for_the_default_basis() {
    for (dt, dw) in [(1, 1), (2, 3)] {
        let mut rng = stream(3, 0);
        for f in TestFunction::default_basis(dt, dw, &mut rng) {
            f.verify_certificate(2000, 50.0, &mut rng).unwrap();
        }
    }
}

#[test]
fn replicas_are_reproducible() {
    let model = MinimaxModel::quad_sim(1.0, 2.0, 0.5, 1.0).unwrap();
    let cfg = SgaConfig::new(Scheme::Alt, 0.05, 3, 500, 42);
    let init = gansde_core::Initialization::Gaussian { mean: JointParams::scalar(1.0, -1.0), std: 0.3 };
    let a = gansde_core::run_sga_replicas(&model, &Dataset::placeholder(1), &cfg, &init, 5, &[2]).unwrap();
    let b = gansde_core::run_sga_replicas(&model, &Dataset::placeholder(1), &cfg, &init, 5, &[2]).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].states, a[1].states);
}
