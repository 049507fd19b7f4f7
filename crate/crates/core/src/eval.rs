//! Evaluation harnesses. This module is the only place allowed to read the
//! ground-truth labels of a target pool.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptModel;
use crate::data::{Dataset, DomainPair, IndexSet};
use crate::error::{Error, Result};
use crate::nnkit::{loss, Adam, Matrix};
use crate::proxy::{self, ProxyHyper, ProxyKind};
use crate::rng;
use crate::usample::{self, SampleConfig};

/// Capability for reading quarantined labels.
#[derive(Debug)]
pub struct OracleKey {
    _private: (),
}

impl OracleKey {
    pub(crate) fn mint() -> Self {
        OracleKey { _private: () }
    }
}

/// The target pool with its ground truth visible. For evaluation only.
pub fn reveal_target_pool(pair: &DomainPair) -> Dataset {
    pair.target_pool().reveal(&OracleKey::mint())
}

/// Ground-truth labels of arbitrary quarantined data.
pub fn reveal(ds: &Dataset) -> Dataset {
    ds.reveal(&OracleKey::mint())
}

fn eval_classes(pair: &DomainPair) -> usize {
    pair.target_pool().n_classes().max(pair.target_test.n_classes())
}

fn check_chosen(chosen: &[usize], n: usize) -> Result<()> {
    if chosen.is_empty() {
        return Err(Error::EmptySet("nothing was selected".into()));
    }
    IndexSet::new(chosen.to_vec(), n).map(|_| ())
}

/// Accuracy on the target test set of a fresh proxy trained on the chosen
/// pool points and their true labels.
pub fn train_from_scratch(
    chosen: &[usize],
    pair: &DomainPair,
    kind: ProxyKind,
    hyper: &ProxyHyper,
    seed: u64,
) -> Result<f64> {
    let pool = pair.target_pool();
    check_chosen(chosen, pool.n())?;
    let train = reveal(&pool.subset(chosen));
    let model = proxy::train_proxy(kind, &train, eval_classes(pair), hyper, seed)?;
    proxy::accuracy(&model, &pair.target_test)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Wasserstein,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub freeze_gf: bool,
    pub similarity: Similarity,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            lr: 1e-4,
            batch_size: 32,
            freeze_gf: false,
            similarity: Similarity::Wasserstein,
        }
    }
}

pub const SIMILARITY_DELTA: f64 = 1e-8;

/// 1-D Wasserstein distance between the coordinate multisets of two
/// equal-length vectors: mean absolute difference after sorting each.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "wasserstein1 needs equal lengths");
    if a.is_empty() {
        return 0.0;
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}

fn distance(kind: Similarity, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        Similarity::Wasserstein => wasserstein1(a, b),
        Similarity::Euclidean => a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt(),
    }
}

/// Nearest-centroid hypothesized labels. Returns, per row of `emb`, the
/// label and the normalized similarity `s_max / Σ_c s_c` over the classes
/// present in `labels`; `None` when no class has a centroid.
pub fn centroid_pseudo_labels(
    emb: &Matrix,
    chosen: &[usize],
    labels: &[usize],
    n_classes: usize,
    kind: Similarity,
) -> Vec<Option<(usize, f64)>> {
    let d = emb.cols();
    let mut sums = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (&i, &y) in chosen.iter().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(emb.row(i)) {
            *s += v;
        }
    }
    let centroids: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .enumerate()
        .filter(|(c, _)| counts[*c] > 0)
        .map(|(c, s)| (c, s.into_iter().map(|v| v / counts[c] as f64).collect()))
        .collect();
    if centroids.len() < n_classes {
        log::warn!(
            "{} of {n_classes} classes have no chosen point; pseudo-labels use the rest",
            n_classes - centroids.len()
        );
    }
    (0..emb.rows())
        .map(|i| {
            if centroids.is_empty() {
                return None;
            }
            let sims: Vec<f64> = centroids
                .iter()
                .map(|(_, c)| 1.0 / (distance(kind, emb.row(i), c) + SIMILARITY_DELTA))
                .collect();
            let mut best = 0;
            for k in 1..sims.len() {
                if sims[k] > sims[best] {
                    best = k;
                }
            }
            let total: f64 = sims.iter().sum();
            Some((centroids[best].0, sims[best] / total))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    /// Accuracy of the hypothesized labels on the unchosen pool points.
    pub pseudo_label_accuracy: f64,
}

/// Fine-tunes a copy of the adapted classifier on the chosen points
/// (weight 1) plus centroid-labeled remaining pool points (weight = their
/// normalized similarity) and reports target test accuracy.
pub fn finetune_eval(
    chosen: &[usize],
    pair: &DomainPair,
    model: &AdaptModel,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    let pool = pair.target_pool();
    check_chosen(chosen, pool.n())?;
    let key = OracleKey::mint();
    let truth = pool.oracle_labels(&key)?;
    let c = model.n_classes();
    if let Some(&bad) = truth.iter().find(|&&y| y >= c) {
        return Err(Error::Label(format!("target label {bad} but the classifier has {c} classes")));
    }
    let test_y = pair.target_test.labels()?;
    let baseline = model.accuracy(pair.target_test.features(), test_y)?;

    let emb = model.embed(pool.features())?;
    let chosen_y: Vec<usize> = chosen.iter().map(|&i| truth[i]).collect();
    let pseudo = centroid_pseudo_labels(&emb, chosen, &chosen_y, c, cfg.similarity);
    let mut is_chosen = vec![false; pool.n()];
    for &i in chosen {
        is_chosen[i] = true;
    }
    let mut rows = chosen.to_vec();
    let mut ys = chosen_y.clone();
    let mut ws = vec![1.0; chosen.len()];
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, p) in pseudo.iter().enumerate() {
        if is_chosen[i] {
            continue;
        }
        if let Some((y, w)) = *p {
            rows.push(i);
            ys.push(y);
            ws.push(w);
            total += 1;
            hit += usize::from(y == truth[i]);
        }
    }
    let pseudo_acc = if total == 0 { 0.0 } else { hit as f64 / total as f64 };

    let mut tuned = model.clone();
    let mut opt_f = Adam::with_lr(cfg.lr)?;
    let mut opt_y = Adam::with_lr(cfg.lr)?;
    let mut r = rng::seeded(seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let x = pool.features();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let bx = x.select_rows(&batch.iter().map(|&k| rows[k]).collect::<Vec<_>>());
            let by: Vec<usize> = batch.iter().map(|&k| ys[k]).collect();
            let bw: Vec<f64> = batch.iter().map(|&k| ws[k]).collect();
            let (e, f_cache) = tuned.g_f.forward(&bx)?;
            let (p, y_cache) = tuned.g_y.forward(&e)?;
            let (_, gp) = loss::cross_entropy(&p, &by, Some(&bw))?;
            let (gy, ge) = tuned.g_y.backward(&y_cache, &gp, 1.0)?;
            if !cfg.freeze_gf {
                let (gf, _) = tuned.g_f.backward(&f_cache, &ge, 1.0)?;
                tuned.g_f.apply_adam(&mut opt_f, &gf)?;
            }
            tuned.g_y.apply_adam(&mut opt_y, &gy)?;
        }
    }
    let accuracy = if cfg.epochs == 0 {
        baseline
    } else {
        tuned.accuracy(pair.target_test.features(), test_y)?
    };
    Ok(FinetuneReport {
        accuracy,
        baseline_accuracy: baseline,
        pseudo_label_accuracy: pseudo_acc,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || n != b.len() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub size: usize,
    pub true_utility: f64,
    pub estimated_utility: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    /// The estimates had no spread; both correlations are reported as 0.
    pub constant_estimator: bool,
    pub points: Vec<ScatterPoint>,
}

impl CorrelationReport {
    pub fn from_points(points: Vec<ScatterPoint>) -> Self {
        let t: Vec<f64> = points.iter().map(|p| p.true_utility).collect();
        let e: Vec<f64> = points.iter().map(|p| p.estimated_utility).collect();
        let constant = e.windows(2).all(|w| w[0] == w[1]);
        CorrelationReport {
            pearson: if constant { 0.0 } else { pearson(&t, &e).unwrap_or(0.0) },
            spearman: if constant { 0.0 } else { spearman(&t, &e).unwrap_or(0.0) },
            constant_estimator: constant,
            points,
        }
    }

    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("size,true_utility,estimated_utility\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.size, p.true_utility, p.estimated_utility);
        }
        s
    }
}

/// Correlation between `estimate(features of S)` and the proxy utility of
/// `S` for `n_subsets` random subsets of a labeled `pool`.
pub fn utility_correlation_with(
    estimate: &(dyn Fn(&Matrix) -> Result<f64> + Sync),
    pool: &Dataset,
    val: &Dataset,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<CorrelationReport> {
    let truth = usample::sample_utility(pool, val, cfg, seed)?;
    let mut points = Vec::with_capacity(truth.len());
    for r in &truth.records {
        points.push(ScatterPoint {
            size: r.subset.len(),
            true_utility: r.utility,
            estimated_utility: estimate(&pool.features().select_rows(&r.subset))?,
        });
    }
    Ok(CorrelationReport::from_points(points))
}

/// Draws `sample_size` held-out target points (the rest of the target test
/// set validates the proxies) and correlates estimated against true
/// utilities over `n_subsets` random subsets.
pub fn utility_correlation(
    estimate: &(dyn Fn(&Matrix) -> Result<f64> + Sync),
    pair: &DomainPair,
    sample_size: usize,
    mut cfg: SampleConfig,
    seed: u64,
) -> Result<CorrelationReport> {
    let test = &pair.target_test;
    if sample_size == 0 || sample_size >= test.n() {
        return Err(Error::Size(format!(
            "held-out sample of {sample_size} needs a larger target test set ({})",
            test.n()
        )));
    }
    let mut idx: Vec<usize> = (0..test.n()).collect();
    idx.shuffle(&mut rng::child(seed, 0));
    let (a, b) = idx.split_at(sample_size);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    let pool = reveal(&test.subset(&a));
    let val = reveal(&test.subset(&b));
    if cfg.max_size.is_none() {
        cfg.max_size = Some(sample_size);
    }
    utility_correlation_with(estimate, &pool, &val, &cfg, rng::derive(seed, 1))
}

/// `|chosen ∩ corrupted| / |chosen|`.
pub fn noise_pick_fraction(chosen: &[usize], corrupted: &IndexSet) -> f64 {
    if chosen.is_empty() {
        return 0.0;
    }
    chosen.iter().filter(|&&i| corrupted.contains(i)).count() as f64 / chosen.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub strategy: String,
    pub evaluator: String,
    pub budget: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub evaluator: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub budgets: Vec<usize>,
    pub accuracy_curves: Vec<AccuracyCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_pick_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility_correlation: Option<(f64, f64)>,
    pub cells: Vec<EvalCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl EvalReport {
    /// Aggregates per-seed cells of one strategy into mean/std curves.
    pub fn from_cells(strategy: &str, budgets: &[usize], cells: Vec<EvalCell>) -> Result<Self> {
        let mut evaluators: Vec<String> = Vec::new();
        for c in &cells {
            if c.strategy != strategy {
                return Err(Error::Param(format!("cell for '{}' in report of '{strategy}'", c.strategy)));
            }
            if !(0.0..=1.0).contains(&c.accuracy) {
                return Err(Error::Param(format!("accuracy {} outside [0, 1]", c.accuracy)));
            }
            if !evaluators.contains(&c.evaluator) {
                evaluators.push(c.evaluator.clone());
            }
        }
        let accuracy_curves = evaluators
            .into_iter()
            .map(|ev| {
                let (mean, std) = budgets
                    .iter()
                    .map(|&b| {
                        let v: Vec<f64> = cells
                            .iter()
                            .filter(|c| c.evaluator == ev && c.budget == b)
                            .map(|c| c.accuracy)
                            .collect();
                        mean_std(&v)
                    })
                    .unzip();
                AccuracyCurve { evaluator: ev, mean, std }
            })
            .collect();
        Ok(EvalReport {
            strategy: strategy.to_string(),
            budgets: budgets.to_vec(),
            accuracy_curves,
            noise_pick_fraction: None,
            utility_correlation: None,
            cells,
            config_hash: None,
        })
    }

    pub const CSV_HEADER: &'static str = "strategy,evaluator,budget,seed,accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{},{}", c.strategy, c.evaluator, c.budget, c.seed, c.accuracy);
        }
        s
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        std::fs::write(json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(json, e))?;
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))
    }

    pub fn read(json: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
