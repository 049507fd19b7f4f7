use proptest::prelude::*;
use zeroal::data::{corrupt_white_noise, Dataset, DomainTag, IndexSet};
use zeroal::deepsets::{DeepSetsConfig, DeepSetsModel, PooledSet, Pooling};
use zeroal::eval::{average_ranks, noise_pick_fraction, pearson, spearman};
use zeroal::nnkit::Matrix;
use zeroal::select::{kmeanspp, proportional_quotas, sample_size, top_m};
use zeroal::pipeline::{prepare, sample_stage, ExperimentConfig};
use zeroal::usample::{draw_subset, SampleConfig, UtilityDataset};

fn small_ds(pooling: Pooling) -> DeepSetsConfig {
    DeepSetsConfig {
        hidden: 8,
        set_dim: 6,
        layers: 2,
        pooling,
        ..DeepSetsConfig::default()
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn set_and_perm() -> impl Strategy<Value = (Matrix, Vec<usize>)> {
    (1usize..30).prop_flat_map(|n| (matrix(n, 3), Just((0..n).collect::<Vec<_>>()).prop_shuffle()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deepsets_permutation_invariance((set, perm) in set_and_perm(), seed in 0u64..50, mean in any::<bool>()) {
        let pooling = if mean { Pooling::Mean } else { Pooling::Sum };
        let m = DeepSetsModel::new(3, &small_ds(pooling), seed).unwrap();
        let a = m.predict(&set).unwrap();
        let b = m.predict(&set.select_rows(&perm)).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn incremental_gains_telescope(set in (1usize..25).prop_flat_map(|n| matrix(n, 3)), seed in 0u64..50) {
        let m = DeepSetsModel::new(3, &small_ds(Pooling::Sum), seed).unwrap();
        let phi = m.phi_rows(&set).unwrap();
        let mut pooled = PooledSet::new(m.set_dim());
        let mut total = 0.0;
        for k in 0..set.rows() {
            total += pooled.marginal_gain(&m, phi.row(k)).unwrap();
            pooled.insert(phi.row(k));
        }
        prop_assert!((total - m.predict(&set).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn quotas_sum_to_budget(sizes in prop::collection::vec(0usize..50, 1..8), frac in 0.0f64..1.0) {
        let n: usize = sizes.iter().sum();
        prop_assume!(n > 0);
        let m = ((n as f64 * frac) as usize).max(1);
        let q = proportional_quotas(&sizes, m);
        prop_assert_eq!(q.iter().sum::<usize>(), m);
        for (qi, si) in q.iter().zip(&sizes) {
            prop_assert!(qi <= si);
        }
    }

    #[test]
    fn kmeanspp_returns_distinct_indices(pts in (2usize..40).prop_flat_map(|n| matrix(n, 2)), seed in 0u64..100, frac in 0.0f64..1.0) {
        let m = ((pts.rows() as f64 * frac) as usize).clamp(1, pts.rows());
        let c = kmeanspp(&pts, m, seed).unwrap();
        prop_assert_eq!(c.len(), m);
        let mut s = c.clone();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), m);
        prop_assert!(c.iter().all(|&i| i < pts.rows()));
    }

    #[test]
    fn top_m_is_sorted_by_score(scores in prop::collection::vec(-5.0f64..5.0, 1..60), frac in 0.0f64..1.0) {
        let m = ((scores.len() as f64 * frac) as usize).clamp(1, scores.len());
        let t = top_m(&scores, m);
        prop_assert_eq!(t.len(), m);
        let worst_kept = t.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for (i, &s) in scores.iter().enumerate() {
            if !t.contains(&i) {
                prop_assert!(s <= worst_kept);
            }
        }
    }

    #[test]
    fn rank_correlations_are_bounded_and_monotone_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50)
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Some(r) = pearson(&a, &b) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
        let s = spearman(&a, &b);
        let cubed: Vec<f64> = b.iter().map(|v| v.powi(3) + 2.0).collect();
        prop_assert_eq!(s.map(|v| (v * 1e9).round()), spearman(&a, &cubed).map(|v| (v * 1e9).round()));
        let ranks = average_ranks(&a);
        let n = a.len() as f64;
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn corruption_count_and_pick_fraction(n in 1usize..200, frac in 0.0f64..1.0, seed in 0u64..1000) {
        let x = Matrix::zeros(n, 2);
        let ds = Dataset::new("p", DomainTag::Target, x, Some(vec![0; n]), 1).unwrap();
        let (out, idx) = corrupt_white_noise(&ds, frac, 1.0, seed).unwrap();
        prop_assert_eq!(idx.len(), ((frac * n as f64) + 1e-9).floor() as usize);
        prop_assert_eq!(out.n(), n);
        let all: Vec<usize> = (0..n).collect();
        let f = noise_pick_fraction(&all, &idx);
        prop_assert!((f - idx.len() as f64 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn drawn_subsets_are_valid(seed in 0u64..1000, i in 0usize..100, pool in 2usize..200) {
        let hi = pool.min(50);
        let s = draw_subset(seed, i, pool, (1, hi));
        prop_assert!(!s.is_empty() && s.len() <= hi);
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        prop_assert_eq!(d.len(), s.len());
        prop_assert!(s.iter().all(|&j| j < pool));
        prop_assert!(IndexSet::new(s.clone(), pool).is_ok());
        prop_assert_eq!(s, draw_subset(seed, i, pool, (1, hi)));
    }

    #[test]
    fn sample_size_never_exceeds_pool(n in 1usize..5000, m in 1usize..500, eps in 1e-6f64..0.99) {
        let r = sample_size(n, m, eps);
        prop_assert!(r >= 1 && r <= n);
    }
}

#[test]
fn utility_jsonl_round_trips() {
    let cfg = ExperimentConfig::smoke();
    let prep = prepare(&cfg.data, 1).unwrap();
    let scfg = SampleConfig {
        n_records: 20,
        ..cfg.usample.clone()
    };
    let sds = sample_stage(&prep, &scfg, 1).unwrap();
    let text = sds.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), 21);
    let back = UtilityDataset::from_jsonl(&text).unwrap();
    assert_eq!(back, sds);
    assert_eq!(back.to_jsonl().unwrap(), text);
}
