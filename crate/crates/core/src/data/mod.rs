//! Datasets, domain pairs, and everything that produces them: synthetic
//! shift generators, IDX ingestion, white-noise corruption and splits.
//!
//! Target-pool labels are stored *quarantined*. [`Dataset::labels`] refuses
//! to hand them out; the only way to read them is
//! [`Dataset::oracle_labels`], which needs an [`OracleKey`] that can only be
//! minted inside the evaluation module.

pub mod container;
mod generate;
pub mod idx;
mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::OracleKey;
use crate::nnkit::Matrix;

pub use generate::{gen_shift, ShiftKind, ShiftParams};
pub use idx::load_idx;
pub use ops::{corrupt_white_noise, split, split_indices, DEFAULT_NOISE_SIGMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
enum Labels {
    Absent,
    Visible(Vec<usize>),
    Quarantined(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    domain: DomainTag,
    features: Matrix,
    labels: Labels,
    n_classes: usize,
}

impl Dataset {
    /// Builds a dataset, validating `n ≥ 1` and label ranges.
    pub fn new(
        name: impl Into<String>,
        domain: DomainTag,
        features: Matrix,
        labels: Option<Vec<usize>>,
        n_classes: usize,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Size("a dataset needs at least one row".into()));
        }
        if features.cols() == 0 {
            return Err(Error::Size("a dataset needs at least one feature column".into()));
        }
        let labels = match labels {
            None => Labels::Absent,
            Some(l) => {
                check_labels(&l, features.rows(), n_classes)?;
                Labels::Visible(l)
            }
        };
        Ok(Dataset {
            name: name.into(),
            domain,
            features,
            labels,
            n_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn has_visible_labels(&self) -> bool {
        matches!(self.labels, Labels::Visible(_))
    }

    pub fn is_quarantined(&self) -> bool {
        matches!(self.labels, Labels::Quarantined(_))
    }

    /// Visible labels. Quarantined labels produce [`Error::Access`].
    pub fn labels(&self) -> Result<&[usize]> {
        match &self.labels {
            Labels::Visible(l) => Ok(l),
            Labels::Quarantined(_) => Err(Error::Access(format!(
                "labels of '{}' are quarantined; only the evaluation oracle may read them",
                self.name
            ))),
            Labels::Absent => Err(Error::Label(format!("dataset '{}' is unlabeled", self.name))),
        }
    }

    /// Ground-truth labels regardless of quarantine.
    pub fn oracle_labels(&self, _key: &OracleKey) -> Result<&[usize]> {
        match &self.labels {
            Labels::Visible(l) | Labels::Quarantined(l) => Ok(l),
            Labels::Absent => Err(Error::Access(format!(
                "dataset '{}' has no ground truth to reveal",
                self.name
            ))),
        }
    }

    /// Moves visible labels behind the quarantine.
    pub fn quarantine(mut self) -> Self {
        self.labels = match std::mem::replace(&mut self.labels, Labels::Absent) {
            Labels::Visible(l) | Labels::Quarantined(l) => Labels::Quarantined(l),
            Labels::Absent => Labels::Absent,
        };
        self
    }

    /// A copy whose quarantined labels are visible again.
    pub fn reveal(&self, _key: &OracleKey) -> Self {
        let mut out = self.clone();
        out.labels = match std::mem::replace(&mut out.labels, Labels::Absent) {
            Labels::Visible(l) | Labels::Quarantined(l) => Labels::Visible(l),
            Labels::Absent => Labels::Absent,
        };
        out
    }

    pub fn without_labels(&self) -> Self {
        Dataset {
            labels: Labels::Absent,
            ..self.clone()
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_domain(mut self, domain: DomainTag) -> Self {
        self.domain = domain;
        self
    }

    /// Rows `indices` in the given order, labels carried along under the
    /// same visibility.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |l: &Vec<usize>| indices.iter().map(|&i| l[i]).collect::<Vec<_>>();
        Dataset {
            name: self.name.clone(),
            domain: self.domain,
            features: self.features.select_rows(indices),
            labels: match &self.labels {
                Labels::Absent => Labels::Absent,
                Labels::Visible(l) => Labels::Visible(pick(l)),
                Labels::Quarantined(l) => Labels::Quarantined(pick(l)),
            },
            n_classes: self.n_classes,
        }
    }

    /// Same labels, new feature matrix with the same shape.
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::Shape(format!(
                "replacement features {:?} vs {:?}",
                features.shape(),
                self.features.shape()
            )));
        }
        Ok(Dataset {
            features,
            ..self.clone()
        })
    }

    pub(crate) fn raw_labels(&self) -> (Option<&[usize]>, bool) {
        match &self.labels {
            Labels::Absent => (None, false),
            Labels::Visible(l) => (Some(l), false),
            Labels::Quarantined(l) => (Some(l), true),
        }
    }
}

fn check_labels(labels: &[usize], n: usize, n_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Label(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Label(format!("label {bad} outside 0..{n_classes}")));
    }
    Ok(())
}

/// Sorted, duplicate-free indices into a universe `0..universe_size`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexSet {
    indices: Vec<usize>,
    universe_size: usize,
}

impl IndexSet {
    /// Sorts `indices`; rejects duplicates and out-of-range entries.
    pub fn new(mut indices: Vec<usize>, universe_size: usize) -> Result<Self> {
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Param(format!("duplicate index {}", w[0])));
        }
        if let Some(&last) = indices.last() {
            if last >= universe_size {
                return Err(Error::Param(format!(
                    "index {last} outside universe of size {universe_size}"
                )));
            }
        }
        Ok(IndexSet {
            indices,
            universe_size,
        })
    }

    pub fn empty(universe_size: usize) -> Self {
        IndexSet {
            indices: Vec::new(),
            universe_size,
        }
    }

    pub fn full(universe_size: usize) -> Self {
        IndexSet {
            indices: (0..universe_size).collect(),
            universe_size,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn universe_size(&self) -> usize {
        self.universe_size
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        let (mut a, mut b, mut n) = (0, 0, 0);
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    a += 1;
                    b += 1;
                }
            }
        }
        n
    }
}

/// A labeled source domain, an unlabeled target pool, and a labeled target
/// test set reserved for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source: Dataset,
    target_pool: Dataset,
    pub target_test: Dataset,
    pub shift_descriptor: String,
    /// Original class id of each source label.
    pub source_classes: Vec<usize>,
    /// Original class id of each target label (targets are remapped to
    /// `0..C_t`).
    pub target_classes: Vec<usize>,
}

impl DomainPair {
    /// Assembles a pair. The target pool's labels, if any, are quarantined.
    pub fn new(
        source: Dataset,
        target_pool: Dataset,
        target_test: Dataset,
        shift_descriptor: impl Into<String>,
    ) -> Result<Self> {
        if !source.has_visible_labels() {
            return Err(Error::Label("the source domain must be labeled".into()));
        }
        if source.d() != target_pool.d() || source.d() != target_test.d() {
            return Err(Error::Shape(format!(
                "feature dims differ: source {}, pool {}, test {}",
                source.d(),
                target_pool.d(),
                target_test.d()
            )));
        }
        let source_classes = (0..source.n_classes()).collect();
        let target_classes = (0..target_test.n_classes()).collect();
        Ok(DomainPair {
            source,
            target_pool: target_pool.quarantine(),
            target_test,
            shift_descriptor: shift_descriptor.into(),
            source_classes,
            target_classes,
        })
    }

    pub fn with_class_maps(mut self, source: Vec<usize>, target: Vec<usize>) -> Self {
        self.source_classes = source;
        self.target_classes = target;
        self
    }

    pub fn target_pool(&self) -> &Dataset {
        &self.target_pool
    }

    /// Replaces the pool features (used for noise corruption), keeping the
    /// quarantine in place.
    pub fn with_target_pool(mut self, pool: Dataset) -> Result<Self> {
        if pool.d() != self.source.d() {
            return Err(Error::Shape("replacement pool has a different dimension".into()));
        }
        self.target_pool = pool.quarantine();
        Ok(self)
    }

    /// Replaces the source (e.g. with corrupted features).
    pub fn with_source(mut self, source: Dataset) -> Result<Self> {
        if source.d() != self.source.d() || !source.has_visible_labels() {
            return Err(Error::Shape("replacement source must be labeled with the same dimension".into()));
        }
        self.source = source;
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.source.d()
    }
}
