use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal};

use super::{Dataset, IndexSet};
use crate::error::{Error, Result};
use crate::rng;

/// Noise amplitude used when a config does not override it.
pub const DEFAULT_NOISE_SIGMA: f64 = 1.0;

/// Replaces `⌊fraction·n⌋` uniformly chosen rows with i.i.d. `N(0, σ²)`
/// features. Labels are left untouched, so corrupted rows carry labels
/// unrelated to their features.
pub fn corrupt_white_noise(
    pool: &Dataset,
    fraction: f64,
    sigma: f64,
    seed: u64,
) -> Result<(Dataset, IndexSet)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Param(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Param(format!("noise sigma must be positive, got {sigma}")));
    }
    let n = pool.n();
    // guard against 0.3 * 100 = 29.999…
    let count = ((fraction * n as f64) + 1e-9).floor() as usize;
    let count = count.min(n);
    if count == 0 {
        return Ok((pool.clone(), IndexSet::empty(n)));
    }
    let mut rng = rng::seeded(seed);
    let rows = index::sample(&mut rng, n, count).into_vec();
    let corrupted = IndexSet::new(rows, n)?;
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut features = pool.features().clone();
    for &r in corrupted.indices() {
        for v in features.row_mut(r) {
            *v = normal.sample(&mut rng);
        }
    }
    Ok((pool.with_features(features)?, corrupted))
}

/// Random disjoint partition with sizes proportional to `ratio`.
pub fn split(ds: &Dataset, ratio: (usize, usize), seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = ratio;
    if a == 0 || b == 0 {
        return Err(Error::Param(format!("split ratio parts must be ≥ 1, got {a}:{b}")));
    }
    let n = ds.n();
    if n < a + b {
        return Err(Error::Size(format!("cannot split {n} rows with ratio {a}:{b}")));
    }
    let (first, second) = split_indices(n, ratio, seed);
    Ok((ds.subset(&first), ds.subset(&second)))
}

/// Index-level version of [`split`]; both halves come back sorted.
pub fn split_indices(n: usize, (a, b): (usize, usize), seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_first = ((n * a) as f64 / (a + b) as f64).round() as usize;
    let n_first = if n >= 2 { n_first.clamp(1, n - 1) } else { n_first.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut first = order[..n_first].to_vec();
    let mut second = order[n_first..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}
