//! Fixtures shared by the engine benchmarks.

use gansde_core::rng::stream;
use gansde_core::{build_model, Dataset, MinimaxModel};

/// `tanh-wgan` in dimension `d` on a uniform box of `n` latents and `n` reals.
pub fn tanh_fixture(d: usize, n: usize) -> (MinimaxModel, Dataset) {
    let model = build_model("tanh-wgan", d, d, None).expect("valid model");
    let data = Dataset::uniform_box(n, n, d, 1.0, &mut stream(1, 0)).expect("valid dataset");
    (model, data)
}

pub fn quad_fixture() -> (MinimaxModel, Dataset) {
    (MinimaxModel::quad_sim(1.0, 1.0, 0.0, 1.0).expect("valid model"), Dataset::placeholder(1))
}
