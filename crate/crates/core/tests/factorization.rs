use std::time::Instant;

use hatesub_core::factor::{
    fit, fit_traced, gradient_check, gradient_check_with, predict_cell, FactorModel, Regularization,
    TrainConfig,
};
use hatesub_core::interaction::{Entry, InteractionMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rank-2 matrix from positive factors, split into observed and held-out cells.
fn planted(seed: u64) -> (InteractionMatrix, Vec<Entry>) {
    let (z, m) = (40, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: Vec<[f64; 2]> = (0..z).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let q: Vec<[f64; 2]> = (0..m).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let mut observed = Vec::new();
    let mut held_out = Vec::new();
    for (l, pl) in p.iter().enumerate() {
        for (j, qj) in q.iter().enumerate() {
            let e = Entry {
                row: l,
                col: j,
                weight: pl[0] * qj[0] + pl[1] * qj[1],
            };
            if rng.random_bool(0.5) {
                observed.push(e);
            } else {
                held_out.push(e);
            }
        }
    }
    (InteractionMatrix::from_entries(z, m, observed).unwrap(), held_out)
}

fn rmse_over(model: &FactorModel, cells: &[Entry]) -> f64 {
    let se: f64 = cells
        .iter()
        .map(|e| (predict_cell(model, e.row, e.col).unwrap() - e.weight).powi(2))
        .sum();
    (se / cells.len() as f64).sqrt()
}

fn recovery_config() -> TrainConfig {
    TrainConfig {
        dim: 2,
        learning_rate: 0.02,
        lambda: 1e-6,
        epochs: 5000,
        seed: 7,
        init_scale: 0.1,
        tolerance: 1e-12,
        ..Default::default()
    }
}

#[test]
fn planted_rank_two_is_recovered() {
    let (matrix, held_out) = planted(42);
    let start = Instant::now();
    let model = fit(&matrix, &recovery_config()).unwrap();
    let elapsed = start.elapsed();
    let observed = rmse_over(&model, matrix.entries());
    let held = rmse_over(&model, &held_out);
    assert!(observed < 1e-2, "observed rmse {observed}");
    assert!(held < 5e-2, "held-out rmse {held}");
    assert!(elapsed.as_secs() < 60);
}

#[test]
fn loss_trend_is_non_increasing_on_default_config() {
    let (matrix, _) = planted(3);
    let config = TrainConfig {
        dim: 4,
        epochs: 100,
        ..Default::default()
    };
    let (_, trace) = fit_traced(&matrix, &config).unwrap();
    let mut prev = trace.initial_loss;
    for &l in &trace.epoch_losses {
        assert!(l <= prev + 1e-9, "{l} > {prev}");
        prev = l;
    }
}

fn random_instance(seed: u64) -> (FactorModel, InteractionMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z, m, d) = (5, 6, 3);
    let mut entries = Vec::new();
    for row in 0..z {
        for col in 0..m {
            if rng.random_bool(0.6) {
                entries.push(Entry {
                    row,
                    col,
                    weight: rng.random_range(0.0..3.0),
                });
            }
        }
    }
    let matrix = InteractionMatrix::from_entries(z, m, entries).unwrap();
    let mut model = FactorModel::zeros(z, m, d, matrix.mean());
    for v in model.combination_factors.as_mut_slice() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in model.post_factors.as_mut_slice() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in model.combination_bias.iter_mut().chain(model.post_bias.iter_mut()) {
        *v = rng.random_range(-0.5..0.5);
    }
    (model, matrix)
}

#[test]
fn gradient_check_over_seeds() {
    for seed in 0..20 {
        let (model, matrix) = random_instance(seed);
        for reg in [Regularization::PerCell, Regularization::PerParameter] {
            let err = gradient_check_with(&model, &matrix, 0.05, 1e-5, reg).unwrap();
            assert!(err < 1e-4, "seed {seed} {reg:?}: {err}");
        }
    }
}

#[test]
fn penalty_only_gradient_is_twice_the_parameter() {
    // One cell fit exactly by mu; only the penalty contributes.
    let matrix = InteractionMatrix::from_entries(1, 1, vec![Entry { row: 0, col: 0, weight: 2.0 }]).unwrap();
    let mut model = FactorModel::zeros(1, 1, 1, 2.0);
    model.combination_bias[0] = 0.25;
    model.post_bias[0] = -0.25;
    assert_eq!(predict_cell(&model, 0, 0).unwrap(), 2.0);
    assert!(gradient_check(&model, &matrix, 1.0, 1e-5).unwrap() < 1e-6);
    let g = hatesub_core::factor::gradient(&model, &matrix, 1.0, Regularization::PerCell);
    assert!((g.combination_bias[0] - 0.5).abs() < 1e-12);
    assert!((g.post_bias[0] + 0.5).abs() < 1e-12);
}
