mod support;

use rand::Rng as _;
use support::joint::{da_steps_per_utility_phase, run_tiny, tiny_joint};
use zeroal::deepsets::{split_records, train_deepsets, DeepSetsConfig, DeepSetsModel, EmbeddedUtilityDataset};
use zeroal::eval::spearman;
use zeroal::nnkit::Matrix;
use zeroal::rng;

#[test]
fn k_adaptation_steps_between_utility_phases() {
    for k in [5, 10] {
        let report = run_tiny(&tiny_joint(k, 3), 4);
        assert_eq!(da_steps_per_utility_phase(&report), vec![k; 3]);
        assert_eq!(report.da_steps, 3 * k);
        assert_eq!(report.epochs.len(), 3);
    }
}

#[test]
fn zero_epochs_leave_an_empty_log() {
    let report = run_tiny(&tiny_joint(5, 0), 1);
    assert!(report.epochs.is_empty());
    assert_eq!(report.da_steps, 0);
}

fn cardinality_data(seed: u64) -> EmbeddedUtilityDataset {
    let mut r = rng::seeded(seed);
    let pool = Matrix::from_vec(200, 4, (0..800).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let mut subsets = Vec::new();
    let mut utilities = Vec::new();
    for _ in 0..300 {
        let k = r.random_range(1..40);
        subsets.push(rand::seq::index::sample(&mut r, 200, k).into_vec());
        utilities.push(0.02 * k as f64);
    }
    EmbeddedUtilityDataset::new(pool, subsets, utilities).unwrap()
}

#[test]
fn cardinality_linear_targets_are_ranked_correctly() {
    let data = cardinality_data(3);
    let (tr, va) = split_records(data.len(), (4, 1), 5);
    let cfg = DeepSetsConfig {
        hidden: 32,
        set_dim: 16,
        lr: 1e-3,
        patience: 50,
        ..DeepSetsConfig::default()
    };
    let mut m = DeepSetsModel::new(4, &cfg, 7).unwrap();
    train_deepsets(&mut m, &data.select(&tr), &data.select(&va), 200, &cfg, 9).unwrap();
    let held = data.select(&va);
    let pred = m.predict_records(&held).unwrap();
    let rho = spearman(&pred, held.utilities()).unwrap();
    assert!(rho > 0.99, "spearman {rho}");
}

#[test]
fn deepsets_training_loss_mostly_decreases() {
    let data = cardinality_data(11);
    let (tr, va) = split_records(data.len(), (4, 1), 2);
    let cfg = DeepSetsConfig {
        hidden: 32,
        set_dim: 16,
        lr: 1e-4,
        patience: 0,
        ..DeepSetsConfig::default()
    };
    let mut m = DeepSetsModel::new(4, &cfg, 1).unwrap();
    let rep = train_deepsets(&mut m, &data.select(&tr), &data.select(&va), 50, &cfg, 3).unwrap();
    let steps = rep.train_mse.windows(2).count();
    let down = rep.train_mse.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.9 * steps as f64, "{down} of {steps} epochs decreased");
}
