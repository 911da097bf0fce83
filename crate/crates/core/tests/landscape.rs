//! Loss landscapes around trained 1-bit toy models: the discrete grid has
//! jumps, the continuous one is smooth.

use idf::analysis::{
    landscape_grid, landscape_pca, landscape_range, toy_model_config, toy_pmf, toy_train_config,
    train_toy, LandscapeGrid,
};
use idf::autodiff::rounding::RoundingConfig;
use idf::flows::{FlowModel, Mode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BOUND: f64 = 10.0;

fn trained_grid(mode: Mode, rounding: RoundingConfig) -> LandscapeGrid {
    let toy = toy_pmf(1).unwrap();
    let model = FlowModel::new(toy_model_config(1, mode, rounding, 0)).unwrap();
    let run = train_toy(&toy, model, toy_train_config(0), 3000, 150).unwrap();
    let thetas: Vec<Vec<f64>> = run.snapshots.iter().map(|(_, t)| t.clone()).collect();
    let (t1, t2) = landscape_pca(&thetas).unwrap();
    let r = landscape_range(&thetas, &t1, &t2).unwrap();
    let batch = toy
        .sample(512, &mut ChaCha8Rng::seed_from_u64(0x1a2d))
        .unwrap();
    landscape_grid(
        &run.model,
        &t1,
        &t2,
        (-r, r),
        (-r, r),
        21,
        &batch,
        &run.snapshots,
    )
    .unwrap()
}

#[test]
fn discrete_landscape_jumps_and_continuous_is_smooth() {
    let discrete = trained_grid(Mode::Discrete, RoundingConfig::STRAIGHT_THROUGH).jump_ratio();
    let continuous = trained_grid(Mode::Continuous, RoundingConfig::CONTINUOUS).jump_ratio();
    assert!(
        discrete >= BOUND,
        "discrete max/median neighbour jump {discrete}"
    );
    assert!(
        continuous < BOUND,
        "continuous max/median neighbour jump {continuous}"
    );
}
