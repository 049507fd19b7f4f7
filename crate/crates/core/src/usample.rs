//! Utility sampling: score many random subsets of a labeled pool by
//! training a proxy on each and measuring it on a validation set.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, IndexSet};
use crate::error::{Error, Result};
use crate::hash;
use crate::proxy::{self, ProxyHyper, ProxyKind, ProxyModel};
use crate::rng;

/// Scores a trained proxy. Validation accuracy is the default.
pub trait UtilityMetric: Sync {
    fn score(&self, model: &ProxyModel, val: &Dataset) -> Result<f64>;
}

pub struct ValidationAccuracy;

impl UtilityMetric for ValidationAccuracy {
    fn score(&self, model: &ProxyModel, val: &Dataset) -> Result<f64> {
        proxy::accuracy(model, val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityRecord {
    #[serde(rename = "idx")]
    pub subset: Vec<usize>,
    #[serde(rename = "u")]
    pub utility: f64,
}

/// Header line of the JSON-lines file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityHeader {
    #[serde(rename = "N")]
    pub n_records: usize,
    pub seed: u64,
    pub proxy_kind: ProxyKind,
    pub pool_hash: String,
    pub pool_size: usize,
    pub size_range: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilityDataset {
    pub header: UtilityHeader,
    pub records: Vec<UtilityRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub n_records: usize,
    /// Inclusive subset-size range; `None` for the upper end means the pool
    /// size.
    pub min_size: usize,
    pub max_size: Option<usize>,
    pub proxy: ProxyKind,
    pub hyper: ProxyHyper,
    pub law: SubsetLaw,
}

/// How record subsets are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetLaw {
    /// Uniform size, then a uniform subset of that size.
    #[default]
    Uniform,
    /// Uniform size, flat-Dirichlet class proportions, then members drawn
    /// class by class. Covers skewed class mixes that uniform subsets of
    /// moderate size almost never produce.
    ClassMix,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n_records: 5000,
            min_size: 20,
            max_size: None,
            proxy: ProxyKind::Logistic,
            hyper: ProxyHyper::default(),
            law: SubsetLaw::Uniform,
        }
    }
}

impl SampleConfig {
    pub fn size_range(&self, pool_size: usize) -> (usize, usize) {
        let hi = self.max_size.unwrap_or(pool_size).min(pool_size);
        (self.min_size.min(hi), hi)
    }
}

pub fn pool_hash(pool: &Dataset) -> String {
    let mut bytes = Vec::new();
    for v in pool.features().data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Ok(l) = pool.labels() {
        for &y in l {
            bytes.extend_from_slice(&(y as u64).to_le_bytes());
        }
    }
    hash::short_hash(&bytes)
}

/// Draws record `i`'s subset. Depends only on `(seed, i)`.
pub fn draw_subset(seed: u64, i: usize, pool_size: usize, (lo, hi): (usize, usize)) -> Vec<usize> {
    let mut r = rng::child(seed, i as u64);
    let size = r.random_range(lo..=hi);
    let mut idx = index::sample(&mut r, pool_size, size).into_vec();
    idx.sort_unstable();
    idx
}

/// Record `i`'s subset under [`SubsetLaw::ClassMix`]. Depends only on
/// `(seed, i)` and the labels.
pub fn draw_mixed_subset(seed: u64, i: usize, labels: &[usize], (lo, hi): (usize, usize)) -> Vec<usize> {
    let mut r = rng::child(seed, i as u64);
    let size = r.random_range(lo..=hi);
    let c = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (j, &y) in labels.iter().enumerate() {
        by_class[y].push(j);
    }
    // flat Dirichlet via normalized exponentials
    let mut w: Vec<f64> = by_class
        .iter()
        .map(|m| if m.is_empty() { 0.0 } else { -(1.0 - r.random::<f64>()).ln() })
        .collect();
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let total: f64 = w.iter().sum();
        let mut t = r.random::<f64>() * total;
        let mut k = w.iter().rposition(|&v| v > 0.0).expect("a class has members left");
        for (j, &v) in w.iter().enumerate() {
            if v > 0.0 && t < v {
                k = j;
                break;
            }
            t -= v;
        }
        let members = &mut by_class[k];
        let pick = r.random_range(0..members.len());
        out.push(members.swap_remove(pick));
        if members.is_empty() {
            w[k] = 0.0;
        }
    }
    out.sort_unstable();
    out
}

/// Builds `n_records` utility records. Runs on the current rayon pool;
/// results do not depend on the number of threads.
pub fn sample_utility(
    pool: &Dataset,
    val: &Dataset,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<UtilityDataset> {
    sample_utility_with(pool, val, cfg, seed, &ValidationAccuracy)
}

pub fn sample_utility_with(
    pool: &Dataset,
    val: &Dataset,
    cfg: &SampleConfig,
    seed: u64,
    metric: &dyn UtilityMetric,
) -> Result<UtilityDataset> {
    let pool_labels = pool.labels()?;
    if val.labels().is_err() {
        return Err(Error::Param("the validation set must be labeled".into()));
    }
    if cfg.n_records == 0 {
        return Err(Error::Param("N must be ≥ 1".into()));
    }
    let (lo, hi) = cfg.size_range(pool.n());
    if lo == 0 || lo > hi || hi > pool.n() {
        return Err(Error::Param(format!(
            "subset sizes must satisfy 1 ≤ min ≤ max ≤ {}; got [{lo}, {hi}]",
            pool.n()
        )));
    }
    if pool.d() != val.d() {
        return Err(Error::Shape("pool and validation dims differ".into()));
    }
    let n_classes = pool.n_classes().max(val.n_classes());
    let records = (0..cfg.n_records)
        .into_par_iter()
        .map(|i| {
            let subset = match cfg.law {
                SubsetLaw::Uniform => draw_subset(seed, i, pool.n(), (lo, hi)),
                SubsetLaw::ClassMix => draw_mixed_subset(seed, i, pool_labels, (lo, hi)),
            };
            let x = pool.features().select_rows(&subset);
            let y: Vec<usize> = subset.iter().map(|&j| pool_labels[j]).collect();
            let model = proxy::train_proxy_raw(
                cfg.proxy,
                &x,
                &y,
                n_classes,
                &cfg.hyper,
                rng::derive(seed ^ 0x5EED, i as u64),
            )?;
            let utility = metric.score(&model, val)?;
            Ok(UtilityRecord { subset, utility })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UtilityDataset {
        header: UtilityHeader {
            n_records: cfg.n_records,
            seed,
            proxy_kind: cfg.proxy,
            pool_hash: pool_hash(pool),
            pool_size: pool.n(),
            size_range: (lo, hi),
            config_hash: None,
        },
        records,
    })
}

impl UtilityDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn utilities(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.utility).collect()
    }

    pub fn subsets(&self) -> Vec<Vec<usize>> {
        self.records.iter().map(|r| r.subset.clone()).collect()
    }

    pub fn index_set(&self, i: usize) -> Result<IndexSet> {
        IndexSet::new(self.records[i].subset.clone(), self.header.pool_size)
    }

    /// Checks the record invariants against a pool of `pool_size` rows.
    pub fn validate(&self) -> Result<()> {
        if self.records.len() != self.header.n_records {
            return Err(Error::Param(format!(
                "header says {} records, found {}",
                self.header.n_records,
                self.records.len()
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.subset.is_empty() {
                return Err(Error::Param(format!("record {i} has an empty subset")));
            }
            if !(0.0..=1.0).contains(&r.utility) {
                return Err(Error::Param(format!("record {i} utility {} outside [0, 1]", r.utility)));
            }
            IndexSet::new(r.subset.clone(), self.header.pool_size)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.header)?;
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: UtilityHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Param("empty utility file".into()))?,
        )?;
        let records = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<UtilityRecord>, _>>()?;
        let ds = UtilityDataset { header, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(f).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        UtilityDataset::from_jsonl(&text)
    }
}
