//! Budgeted subset selection from an unlabeled pool.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptModel;
use crate::d2ulo::JointModels;
use crate::deepsets::{DeepSetsModel, PooledSet};
use crate::error::{Error, Result};
use crate::nnkit::{loss, Matrix};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    D2ulo,
    Badge,
    Aada,
    Fass,
    Optimal,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Random,
        Strategy::D2ulo,
        Strategy::Badge,
        Strategy::Aada,
        Strategy::Fass,
        Strategy::Optimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::D2ulo => "d2ulo",
            Strategy::Badge => "badge",
            Strategy::Aada => "aada",
            Strategy::Fass => "fass",
            Strategy::Optimal => "optimal",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Param(format!("unknown strategy '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub seed: u64,
    #[serde(rename = "M")]
    pub budget: usize,
    /// Selected pool indices in pick order.
    pub indices: Vec<usize>,
    /// Marginal gain of each pick; the first entry is the singleton value.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gains: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub estimated_utility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
}

impl SelectionResult {
    fn plain(strategy: Strategy, seed: u64, indices: Vec<usize>) -> Self {
        SelectionResult {
            strategy,
            seed,
            budget: indices.len(),
            indices,
            gains: None,
            estimated_utility: None,
            config_hash: None,
        }
    }

    pub fn sorted_indices(&self) -> Vec<usize> {
        let mut v = self.indices.clone();
        v.sort_unstable();
        v
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn check_budget(n: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::Param(format!("budget {m} must be in 1..={n}")));
    }
    Ok(())
}

/// Candidates evaluated per stochastic-greedy step, `⌈(n/M)·ln(1/ε)⌉`.
pub fn sample_size(n: usize, m: usize, eps: f64) -> usize {
    let r = (n as f64 / m.max(1) as f64 * (1.0 / eps).ln()).ceil();
    (r.max(1.0) as usize).min(n.max(1))
}

/// A monotone set function queried through marginal gains.
pub trait GainOracle {
    fn n_candidates(&self) -> usize;
    /// Gains of adding each of `candidates` to the current set.
    fn gains(&self, candidates: &[usize]) -> Result<Vec<f64>>;
    fn commit(&mut self, candidate: usize);
}

/// Pick order and gains of a greedy run. `None` as `eps` evaluates every
/// remaining candidate; ties go to the lowest index.
pub fn greedy<O: GainOracle>(oracle: &mut O, m: usize, eps: Option<f64>, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = oracle.n_candidates();
    check_budget(n, m)?;
    if let Some(e) = eps {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::Param(format!("epsilon must be in (0, 1), got {e}")));
        }
    }
    let mut rng = rng::seeded(seed);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(m);
    let mut gains = Vec::with_capacity(m);
    for _ in 0..m {
        let cand: Vec<usize> = match eps {
            Some(e) => {
                let r = sample_size(n, m, e).min(remaining.len());
                index::sample(&mut rng, remaining.len(), r).into_iter().map(|k| remaining[k]).collect()
            }
            None => remaining.clone(),
        };
        let g = oracle.gains(&cand)?;
        let mut best = 0;
        for k in 1..cand.len() {
            if g[k] > g[best] || (g[k] == g[best] && cand[k] < cand[best]) {
                best = k;
            }
        }
        if !g[best].is_finite() {
            return Err(Error::NonFinite(format!("gain of candidate {}", cand[best])));
        }
        let pick = cand[best];
        oracle.commit(pick);
        order.push(pick);
        gains.push(g[best]);
        let pos = remaining.iter().position(|&c| c == pick).expect("candidate is remaining");
        remaining.swap_remove(pos);
    }
    Ok((order, gains))
}

/// Marginal gains of a DeepSets utility over precomputed `φ` rows.
pub struct DeepSetsGain<'a> {
    model: &'a DeepSetsModel,
    phi: Matrix,
    pooled: PooledSet,
    base: f64,
}

impl<'a> DeepSetsGain<'a> {
    /// `embeddings` are the pool rows already mapped by the feature extractor.
    pub fn new(model: &'a DeepSetsModel, embeddings: &Matrix) -> Result<Self> {
        let phi = model.phi_rows(embeddings)?;
        Ok(DeepSetsGain {
            model,
            pooled: PooledSet::new(phi.cols()),
            phi,
            base: 0.0,
        })
    }

    pub fn value(&self) -> Result<f64> {
        self.pooled.value(self.model)
    }
}

impl GainOracle for DeepSetsGain<'_> {
    fn n_candidates(&self) -> usize {
        self.phi.rows()
    }

    fn gains(&self, candidates: &[usize]) -> Result<Vec<f64>> {
        let sd = self.phi.cols();
        let n = self.pooled.len() + 1;
        let mut batch = Matrix::zeros(candidates.len(), sd);
        for (r, &c) in candidates.iter().enumerate() {
            let pooled = self.model.pool(&self.pooled.with(self.phi.row(c)), n);
            batch.row_mut(r).copy_from_slice(&pooled);
        }
        let v = self.model.predict_pooled_batch(&batch)?;
        Ok(v.into_iter().map(|x| x - self.base).collect())
    }

    fn commit(&mut self, candidate: usize) {
        self.pooled.insert(self.phi.row(candidate));
        self.base = self.pooled.value(self.model).unwrap_or(f64::NAN);
    }
}

/// Stochastic greedy maximisation of the learned set utility.
pub fn select_deepsets(
    models: &JointModels,
    pool_x: &Matrix,
    m: usize,
    eps: f64,
    seed: u64,
    strategy: Strategy,
) -> Result<SelectionResult> {
    let emb = models.adapt.embed(pool_x)?;
    let mut oracle = DeepSetsGain::new(&models.deepsets, &emb)?;
    let (order, gains) = greedy(&mut oracle, m, Some(eps), seed)?;
    Ok(SelectionResult {
        strategy,
        seed,
        budget: m,
        estimated_utility: Some(oracle.value()?),
        indices: order,
        gains: Some(gains),
        config_hash: None,
    })
}

pub fn select_random(n: usize, m: usize, seed: u64) -> Result<SelectionResult> {
    check_budget(n, m)?;
    let idx = index::sample(&mut rng::seeded(seed), n, m).into_vec();
    Ok(SelectionResult::plain(Strategy::Random, seed, idx))
}

/// Last-layer gradient embeddings `(p − e_ŷ) ⊗ h` where `h` is the input of
/// the classifier's final layer.
pub fn gradient_embeddings(model: &AdaptModel, x: &Matrix) -> Result<Matrix> {
    let emb = model.embed(x)?;
    let (probs, cache) = model.g_y.forward(&emb)?;
    let last = model.g_y.layers().len() - 1;
    let h = cache.layer_input(last);
    let c = probs.cols();
    let hd = h.cols();
    let mut out = Matrix::zeros(x.rows(), c * hd);
    for r in 0..x.rows() {
        let yhat = probs.argmax_row(r);
        let row = out.row_mut(r);
        for k in 0..c {
            let g = probs.get(r, k) - if k == yhat { 1.0 } else { 0.0 };
            for (j, hv) in h.row(r).iter().enumerate() {
                row[k * hd + j] = g * hv;
            }
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding with a uniformly drawn first center. When every row is
/// identical the lowest `m` indices are returned.
pub fn kmeanspp(points: &Matrix, m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.rows();
    check_budget(n, m)?;
    if points.iter_rows().all(|r| r == points.row(0)) {
        return Ok((0..m).collect());
    }
    let mut rng = rng::seeded(seed);
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    while chosen.len() < m {
        let total: f64 = (0..n).filter(|&i| !taken[i]).map(|i| d2[i]).sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = None;
            for i in (0..n).filter(|&i| !taken[i]) {
                if d2[i] > 0.0 {
                    pick = Some(i);
                    t -= d2[i];
                    if t < 0.0 {
                        break;
                    }
                }
            }
            pick.expect("positive mass has a carrier")
        } else {
            (0..n).find(|&i| !taken[i]).expect("budget ≤ n")
        };
        taken[next] = true;
        chosen.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(points.row(i), points.row(next)));
        }
    }
    Ok(chosen)
}

pub fn select_badge(model: &AdaptModel, pool_x: &Matrix, m: usize, seed: u64) -> Result<SelectionResult> {
    let g = gradient_embeddings(model, pool_x)?;
    Ok(SelectionResult::plain(Strategy::Badge, seed, kmeanspp(&g, m, seed)?))
}

/// `((1 − d)/d)·H(p)` with `d` the source probability clamped to
/// `[1e-6, 1 − 1e-6]`.
pub fn aada_scores(model: &AdaptModel, pool_x: &Matrix) -> Result<Vec<f64>> {
    let d = model.domain_probs(pool_x)?;
    let probs = model.class_probs(pool_x)?;
    Ok(d.iter()
        .zip(probs.iter_rows().map(loss::entropy))
        .map(|(&d, h)| {
            let d = d.clamp(1e-6, 1.0 - 1e-6);
            (1.0 - d) / d * h
        })
        .collect())
}

/// Indices of the `m` largest scores; ties go to the lower index.
pub fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

pub fn select_aada(model: &AdaptModel, pool_x: &Matrix, m: usize, seed: u64) -> Result<SelectionResult> {
    check_budget(pool_x.rows(), m)?;
    let s = aada_scores(model, pool_x)?;
    Ok(SelectionResult::plain(Strategy::Aada, seed, top_m(&s, m)))
}

/// Per-class budgets proportional to class sizes, rounded by largest
/// remainder (ties to the lower class).
pub fn proportional_quotas(sizes: &[usize], m: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut q: Vec<usize> = sizes.iter().map(|&s| m * s / n).collect();
    let mut rem: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(c, &s)| ((m * s) % n, c)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = m.min(n) - q.iter().sum::<usize>();
    for &(_, c) in rem.iter().cycle().take(rem.len() * 2) {
        if left == 0 {
            break;
        }
        if q[c] < sizes[c] {
            q[c] += 1;
            left -= 1;
        }
    }
    q
}

#[derive(PartialEq)]
struct Bound(f64, usize);

impl Eq for Bound {}

impl PartialOrd for Bound {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Bound {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

/// Lazy greedy on facility location `Σ_i max_{s∈S} sim(i, s)` over `rows`,
/// with `sim = d_max − ‖x_i − x_s‖`.
pub fn facility_location(points: &Matrix, rows: &[usize], k: usize, d_max: f64) -> Vec<usize> {
    let n = rows.len();
    let dist = |a: usize, b: usize| sq_dist(points.row(rows[a]), points.row(rows[b])).sqrt();
    let mut cover = vec![0.0f64; n];
    let gain = |c: usize, cover: &[f64]| -> f64 {
        (0..n).map(|i| (d_max - dist(i, c) - cover[i]).max(0.0)).sum()
    };
    let mut heap: BinaryHeap<Bound> = (0..n).map(|c| Bound(f64::INFINITY, c)).collect();
    let mut fresh = vec![usize::MAX; n];
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k.min(n) {
        let Some(Bound(_, c)) = heap.pop() else { break };
        if fresh[c] == picked.len() {
            for (i, cv) in cover.iter_mut().enumerate() {
                *cv = cv.max(d_max - dist(i, c));
            }
            picked.push(c);
        } else {
            fresh[c] = picked.len();
            heap.push(Bound(gain(c, &cover), c));
        }
    }
    picked.into_iter().map(|c| rows[c]).collect()
}

pub fn select_fass(model: &AdaptModel, pool_x: &Matrix, m: usize, seed: u64) -> Result<SelectionResult> {
    check_budget(pool_x.rows(), m)?;
    let emb = model.embed(pool_x)?;
    let labels = model.predict(pool_x)?;
    let c = model.n_classes();
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in labels.iter().enumerate() {
        strata[y].push(i);
    }
    let mut d_max = 0.0f64;
    for i in 0..emb.rows() {
        for j in i + 1..emb.rows() {
            d_max = d_max.max(sq_dist(emb.row(i), emb.row(j)));
        }
    }
    let d_max = d_max.sqrt();
    let quotas = proportional_quotas(&strata.iter().map(Vec::len).collect::<Vec<_>>(), m);
    let mut picked = Vec::with_capacity(m);
    for (rows, &q) in strata.iter().zip(&quotas) {
        picked.extend(facility_location(&emb, rows, q, d_max));
    }
    Ok(SelectionResult::plain(Strategy::Fass, seed, picked))
}
