//! Sum-pooled set-utility model `ρ(Σ_{x∈S} φ(x))`.
//!
//! Utility records are subsets of one shared pool, so training embeds the
//! union of a mini-batch's members once and scatters pooled gradients back
//! to the member rows instead of re-running `φ` per record.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{Activation, Adam, Gradients, Matrix, MlpNet};
use crate::rng;

/// How member features are combined before `ρ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Sum,
    /// Sum divided by the set size.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepSetsConfig {
    /// Width of every hidden layer in both `φ` and `ρ`.
    pub hidden: usize,
    /// Output width of `φ`.
    pub set_dim: usize,
    /// Linear layers per network.
    pub layers: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Squash `ρ`'s output into (0, 1) with a sigmoid; utilities that are
    /// accuracies live there, and the bound keeps greedy search from
    /// chasing extrapolated values.
    pub bounded_output: bool,
    pub pooling: Pooling,
}

impl Default for DeepSetsConfig {
    fn default() -> Self {
        DeepSetsConfig {
            hidden: 256,
            set_dim: 256,
            layers: 3,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            weight_decay: 0.0,
            patience: 20,
            bounded_output: false,
            pooling: Pooling::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepSetsModel {
    pub phi: MlpNet,
    pub rho: MlpNet,
    pub pooling: Pooling,
}

impl DeepSetsModel {
    pub fn new(input_dim: usize, cfg: &DeepSetsConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 || cfg.set_dim == 0 {
            return Err(Error::Param("DeepSets widths and depth must be ≥ 1".into()));
        }
        let mut phi_dims = vec![input_dim];
        phi_dims.extend(std::iter::repeat_n(cfg.hidden, cfg.layers - 1));
        phi_dims.push(cfg.set_dim);
        let mut rho_dims = vec![cfg.set_dim];
        rho_dims.extend(std::iter::repeat_n(cfg.hidden, cfg.layers - 1));
        rho_dims.push(1);
        Ok(DeepSetsModel {
            phi: MlpNet::new(&phi_dims, Activation::Elu, Activation::Identity, rng::derive(seed, 0))?,
            rho: MlpNet::new(
                &rho_dims,
                Activation::Elu,
                if cfg.bounded_output { Activation::Sigmoid } else { Activation::Identity },
                rng::derive(seed, 1),
            )?,
            pooling: cfg.pooling,
        })
    }

    pub fn from_parts(phi: MlpNet, rho: MlpNet) -> Result<Self> {
        if phi.output_dim() != rho.input_dim() || rho.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "φ emits {} but ρ takes {} and emits {}",
                phi.output_dim(),
                rho.input_dim(),
                rho.output_dim()
            )));
        }
        Ok(DeepSetsModel {
            phi,
            rho,
            pooling: Pooling::Sum,
        })
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    /// Pooled vector of a set of `n` members whose `φ` rows sum to `sum`.
    pub fn pool(&self, sum: &[f64], n: usize) -> Vec<f64> {
        match self.pooling {
            Pooling::Sum => sum.to_vec(),
            Pooling::Mean => sum.iter().map(|v| v / n as f64).collect(),
        }
    }

    fn pool_scale(&self, n: usize) -> f64 {
        match self.pooling {
            Pooling::Sum => 1.0,
            Pooling::Mean => 1.0 / n as f64,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn set_dim(&self) -> usize {
        self.phi.output_dim()
    }

    /// `φ` applied to every row.
    pub fn phi_rows(&self, x: &Matrix) -> Result<Matrix> {
        self.phi.predict(x)
    }

    /// `ρ` of an already pooled feature vector.
    pub fn predict_pooled(&self, pooled: &[f64]) -> Result<f64> {
        let m = Matrix::from_vec(1, pooled.len(), pooled.to_vec())?;
        Ok(self.rho.predict(&m)?.get(0, 0))
    }

    /// `ρ` for many pooled vectors at once (one per row).
    pub fn predict_pooled_batch(&self, pooled: &Matrix) -> Result<Vec<f64>> {
        Ok(self.rho.predict(pooled)?.into_vec())
    }

    pub fn predict(&self, set: &Matrix) -> Result<f64> {
        if set.rows() == 0 {
            return Err(Error::EmptySet("the utility of the empty set is not modelled".into()));
        }
        let phi = self.phi_rows(set)?;
        self.predict_pooled(&self.pool(&order_free_sums(&phi), set.rows()))
    }
}

/// Column sums taken over sorted values, so the result does not depend on
/// row order.
fn order_free_sums(m: &Matrix) -> Vec<f64> {
    let mut col = Vec::with_capacity(m.rows());
    (0..m.cols())
        .map(|c| {
            col.clear();
            col.extend(m.iter_rows().map(|r| r[c]));
            col.sort_unstable_by(f64::total_cmp);
            col.iter().sum()
        })
        .collect()
}

/// Running pooled sum for incremental marginal-gain queries.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledSet {
    sum: Vec<f64>,
    len: usize,
}

impl PooledSet {
    pub fn new(set_dim: usize) -> Self {
        PooledSet {
            sum: vec![0.0; set_dim],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    pub fn insert(&mut self, phi_x: &[f64]) {
        for (s, v) in self.sum.iter_mut().zip(phi_x) {
            *s += v;
        }
        self.len += 1;
    }

    pub fn with(&self, phi_x: &[f64]) -> Vec<f64> {
        self.sum.iter().zip(phi_x).map(|(s, v)| s + v).collect()
    }

    pub fn value(&self, model: &DeepSetsModel) -> Result<f64> {
        if self.len == 0 {
            return Err(Error::EmptySet("the utility of the empty set is not modelled".into()));
        }
        model.predict_pooled(&model.pool(&self.sum, self.len))
    }

    /// `f(S ∪ {x}) − f(S)`; for an empty `S` this is `f({x})`.
    pub fn marginal_gain(&self, model: &DeepSetsModel, phi_x: &[f64]) -> Result<f64> {
        let with = model.predict_pooled(&model.pool(&self.with(phi_x), self.len + 1))?;
        if self.len == 0 {
            Ok(with)
        } else {
            Ok(with - self.value(model)?)
        }
    }
}

/// Utility records over a shared embedded pool.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedUtilityDataset {
    embeddings: Arc<Matrix>,
    subsets: Vec<Vec<usize>>,
    utilities: Vec<f64>,
}

impl EmbeddedUtilityDataset {
    pub fn new(embeddings: Matrix, subsets: Vec<Vec<usize>>, utilities: Vec<f64>) -> Result<Self> {
        Self::shared(Arc::new(embeddings), subsets, utilities)
    }

    pub fn shared(embeddings: Arc<Matrix>, subsets: Vec<Vec<usize>>, utilities: Vec<f64>) -> Result<Self> {
        if subsets.len() != utilities.len() {
            return Err(Error::Shape(format!(
                "{} subsets but {} utilities",
                subsets.len(),
                utilities.len()
            )));
        }
        for (i, s) in subsets.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::EmptySet(format!("record {i} is empty")));
            }
            if let Some(&bad) = s.iter().find(|&&j| j >= embeddings.rows()) {
                return Err(Error::Param(format!("record {i} references row {bad} outside the pool")));
            }
        }
        if let Some(u) = utilities.iter().find(|u| !u.is_finite()) {
            return Err(Error::NonFinite(format!("utility {u}")));
        }
        Ok(EmbeddedUtilityDataset {
            embeddings,
            subsets,
            utilities,
        })
    }

    /// One record per set; the sets are stacked into a private pool.
    pub fn from_sets(sets: &[Matrix], utilities: Vec<f64>) -> Result<Self> {
        let cols = sets.first().map_or(0, Matrix::cols);
        let mut data = Vec::new();
        let mut subsets = Vec::with_capacity(sets.len());
        let mut offset = 0;
        for s in sets {
            if s.cols() != cols {
                return Err(Error::Shape("all sets must share an embedding width".into()));
            }
            data.extend_from_slice(s.data());
            subsets.push((offset..offset + s.rows()).collect());
            offset += s.rows();
        }
        Self::new(Matrix::from_vec(offset, cols, data)?, subsets, utilities)
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn utilities(&self) -> &[f64] {
        &self.utilities
    }

    /// Materialized embedding matrix of record `i` (rows = subset size).
    pub fn record(&self, i: usize) -> Matrix {
        self.embeddings.select_rows(&self.subsets[i])
    }

    /// The records at `indices`, sharing the same pool.
    pub fn select(&self, indices: &[usize]) -> Self {
        EmbeddedUtilityDataset {
            embeddings: Arc::clone(&self.embeddings),
            subsets: indices.iter().map(|&i| self.subsets[i].clone()).collect(),
            utilities: indices.iter().map(|&i| self.utilities[i]).collect(),
        }
    }
}

/// Loss and gradients of one mini-batch of records.
pub struct BatchGradients {
    /// Mean squared error over the batch.
    pub loss: f64,
    pub phi: Gradients,
    pub rho: Gradients,
    /// Pool rows touched by the batch, ascending.
    pub rows: Vec<usize>,
    /// Gradient w.r.t. the embeddings of `rows`.
    pub input_grad: Matrix,
}

impl DeepSetsModel {
    /// Mean squared error of `records` and its gradients.
    pub fn batch_gradients(&self, data: &EmbeddedUtilityDataset, records: &[usize]) -> Result<BatchGradients> {
        if records.is_empty() {
            return Err(Error::Size("empty mini-batch".into()));
        }
        let n_pool = data.embeddings.rows();
        let mut local = vec![usize::MAX; n_pool];
        let mut rows = Vec::new();
        for &r in records {
            for &j in &data.subsets[r] {
                if local[j] == usize::MAX {
                    local[j] = 0;
                    rows.push(j);
                }
            }
        }
        rows.sort_unstable();
        for (k, &j) in rows.iter().enumerate() {
            local[j] = k;
        }
        let x = data.embeddings.select_rows(&rows);
        let (phi_out, phi_cache) = self.phi.forward(&x)?;
        let sd = self.set_dim();
        let b = records.len();
        let mut pooled = Matrix::zeros(b, sd);
        for (i, &r) in records.iter().enumerate() {
            let p = pooled.row_mut(i);
            let w = self.pool_scale(data.subsets[r].len());
            for &j in &data.subsets[r] {
                for (s, v) in p.iter_mut().zip(phi_out.row(local[j])) {
                    *s += w * v;
                }
            }
        }
        let (pred, rho_cache) = self.rho.forward(&pooled)?;
        let mut g_pred = Matrix::zeros(b, 1);
        let mut loss = 0.0;
        for (i, &r) in records.iter().enumerate() {
            let d = pred.get(i, 0) - data.utilities[r];
            loss += d * d;
            g_pred.set(i, 0, 2.0 * d / b as f64);
        }
        let loss = loss / b as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged(
                "DeepSets loss is not finite; lower the DeepSets learning rate".into(),
            ));
        }
        let (rho_g, g_pooled) = self.rho.backward(&rho_cache, &g_pred, 1.0)?;
        let mut g_phi_out = Matrix::zeros(rows.len(), sd);
        for (i, &r) in records.iter().enumerate() {
            let gp = g_pooled.row(i);
            let w = self.pool_scale(data.subsets[r].len());
            for &j in &data.subsets[r] {
                for (s, v) in g_phi_out.row_mut(local[j]).iter_mut().zip(gp) {
                    *s += w * v;
                }
            }
        }
        let (phi_g, input_grad) = self.phi.backward(&phi_cache, &g_phi_out, 1.0)?;
        Ok(BatchGradients {
            loss,
            phi: phi_g,
            rho: rho_g,
            rows,
            input_grad,
        })
    }

    /// Predictions for every record.
    pub fn predict_records(&self, data: &EmbeddedUtilityDataset) -> Result<Vec<f64>> {
        let phi_all = self.phi_rows(&data.embeddings)?;
        let mut pooled = Matrix::zeros(data.len(), self.set_dim());
        for (i, s) in data.subsets.iter().enumerate() {
            let p = pooled.row_mut(i);
            let w = self.pool_scale(s.len());
            for &j in s {
                for (a, v) in p.iter_mut().zip(phi_all.row(j)) {
                    *a += w * v;
                }
            }
        }
        self.predict_pooled_batch(&pooled)
    }

    pub fn mse(&self, data: &EmbeddedUtilityDataset) -> Result<f64> {
        let pred = self.predict_records(data)?;
        let n = pred.len().max(1) as f64;
        Ok(pred
            .iter()
            .zip(&data.utilities)
            .map(|(p, u)| (p - u) * (p - u))
            .sum::<f64>()
            / n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_val_mse: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Full training-set MSE after each epoch.
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
}

/// Fits `model` to `train` by mini-batch Adam on the squared error,
/// keeping the weights of the best validation epoch.
pub fn train_deepsets(
    model: &mut DeepSetsModel,
    train: &EmbeddedUtilityDataset,
    val: &EmbeddedUtilityDataset,
    epochs: usize,
    cfg: &DeepSetsConfig,
    seed: u64,
) -> Result<TrainReport> {
    if train.len() + val.len() < 2 || train.is_empty() {
        return Err(Error::Size("DeepSets training needs at least 2 records".into()));
    }
    if train.embeddings.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "records embedded in {} dims, model expects {}",
            train.embeddings.cols(),
            model.input_dim()
        )));
    }
    let mut adam_phi = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, 1e-8)?.weight_decay(cfg.weight_decay);
    let mut adam_rho = adam_phi.clone();
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let eval_val = |m: &DeepSetsModel| if val.is_empty() { m.mse(train) } else { m.mse(val) };

    let mut report = TrainReport {
        best_val_mse: eval_val(model)?,
        best_epoch: 0,
        epochs_run: 0,
        train_mse: Vec::new(),
        val_mse: Vec::new(),
    };
    let mut best = model.clone();
    let mut stale = 0;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let g = model.batch_gradients(train, batch)?;
            model.phi.apply_adam(&mut adam_phi, &g.phi)?;
            model.rho.apply_adam(&mut adam_rho, &g.rho)?;
        }
        let tr = model.mse(train)?;
        let va = eval_val(model)?;
        if !(tr.is_finite() && va.is_finite()) {
            return Err(Error::Diverged(format!(
                "DeepSets MSE became non-finite at epoch {epoch}; lower the learning rate (currently {})",
                cfg.lr
            )));
        }
        report.train_mse.push(tr);
        report.val_mse.push(va);
        report.epochs_run = epoch;
        if va < report.best_val_mse {
            report.best_val_mse = va;
            report.best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    *model = best;
    Ok(report)
}

/// Deterministic `a:b` split of record indices.
pub fn split_records(n: usize, ratio: (usize, usize), seed: u64) -> (Vec<usize>, Vec<usize>) {
    crate::data::split_indices(n, ratio, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::Dense;
    use rand::Rng as _;

    fn small() -> DeepSetsConfig {
        DeepSetsConfig {
            hidden: 16,
            set_dim: 8,
            lr: 1e-3,
            ..DeepSetsConfig::default()
        }
    }

    fn random_set(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn permutation_invariant() {
        let m = DeepSetsModel::new(3, &small(), 1).unwrap();
        let s = random_set(7, 3, 2);
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut rng::seeded(3));
        let p = m.predict(&s).unwrap();
        let q = m.predict(&s.select_rows(&perm)).unwrap();
        assert_eq!(p.to_bits(), q.to_bits());
    }

    #[test]
    fn constant_net_returns_bias() {
        let zero = |i, o, a| Dense::zeros(i, o, a);
        let phi = MlpNet::from_layers(vec![zero(3, 4, Activation::Elu), zero(4, 4, Activation::Identity)]).unwrap();
        let mut last = zero(4, 1, Activation::Identity);
        last.bias[0] = 0.42;
        let rho = MlpNet::from_layers(vec![zero(4, 4, Activation::Elu), last]).unwrap();
        let m = DeepSetsModel::from_parts(phi, rho).unwrap();
        for k in 1..5 {
            assert_eq!(m.predict(&random_set(k, 3, k as u64)).unwrap(), 0.42);
        }
    }

    #[test]
    fn sum_pooling_distinguishes_duplicates() {
        let m = DeepSetsModel::new(2, &small(), 5).unwrap();
        let x = random_set(1, 2, 6);
        let xx = x.vstack(&x).unwrap();
        assert!(m.phi_rows(&x).unwrap().data().iter().any(|&v| v != 0.0));
        assert_ne!(m.predict(&x).unwrap(), m.predict(&xx).unwrap());
    }

    #[test]
    fn empty_set_rejected() {
        let m = DeepSetsModel::new(2, &small(), 5).unwrap();
        assert!(matches!(m.predict(&Matrix::zeros(0, 2)), Err(Error::EmptySet(_))));
    }

    #[test]
    fn incremental_gain_matches_scratch() {
        for pooling in [Pooling::Sum, Pooling::Mean] {
            let cfg = DeepSetsConfig { pooling, ..small() };
            let m = DeepSetsModel::new(3, &cfg, 8).unwrap();
            let s = random_set(6, 3, 9);
            let phi = m.phi_rows(&s).unwrap();
            let mut pooled = PooledSet::new(m.set_dim());
            for k in 0..6 {
                let gain = pooled.marginal_gain(&m, phi.row(k)).unwrap();
                let after = m.predict(&s.slice_rows(0, k + 1)).unwrap();
                let before = if k == 0 { 0.0 } else { m.predict(&s.slice_rows(0, k)).unwrap() };
                assert!((gain - (after - before)).abs() < 1e-10);
                pooled.insert(phi.row(k));
            }
        }
    }

    #[test]
    fn mean_pooling_ignores_duplication() {
        let cfg = DeepSetsConfig {
            pooling: Pooling::Mean,
            ..small()
        };
        let m = DeepSetsModel::new(3, &cfg, 4).unwrap();
        let x = random_set(1, 3, 5);
        let xx = x.vstack(&x).unwrap();
        assert!((m.predict(&x).unwrap() - m.predict(&xx).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn batch_gradients_match_per_record_predictions() {
        let m = DeepSetsModel::new(3, &small(), 10).unwrap();
        let emb = random_set(12, 3, 11);
        let subsets = vec![vec![0, 3, 5], vec![1, 2], vec![3, 7, 8, 11]];
        let data = EmbeddedUtilityDataset::new(emb.clone(), subsets.clone(), vec![0.1, 0.5, 0.9]).unwrap();
        let preds = m.predict_records(&data).unwrap();
        for (i, s) in subsets.iter().enumerate() {
            assert!((preds[i] - m.predict(&emb.select_rows(s)).unwrap()).abs() < 1e-12);
        }
        let g = m.batch_gradients(&data, &[0, 1, 2]).unwrap();
        assert!((g.loss - m.mse(&data).unwrap()).abs() < 1e-12);
        assert_eq!(g.rows, vec![0, 1, 2, 3, 5, 7, 8, 11]);
    }

    #[test]
    fn constant_target_is_learned() {
        let sets: Vec<Matrix> = (0..40).map(|i| random_set(1 + i % 5, 3, i as u64)).collect();
        let data = EmbeddedUtilityDataset::from_sets(&sets, vec![0.8; 40]).unwrap();
        let (tr, va) = split_records(40, (4, 1), 0);
        let cfg = DeepSetsConfig {
            batch_size: 8,
            patience: 200,
            ..small()
        };
        let mut m = DeepSetsModel::new(3, &cfg, 12).unwrap();
        let rep = train_deepsets(&mut m, &data.select(&tr), &data.select(&va), 1000, &cfg, 1).unwrap();
        assert!(rep.best_val_mse < 1e-4, "{}", rep.best_val_mse);
    }

    #[test]
    fn training_is_deterministic() {
        let sets: Vec<Matrix> = (0..20).map(|i| random_set(2 + i % 3, 2, i as u64)).collect();
        let u: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let data = EmbeddedUtilityDataset::from_sets(&sets, u).unwrap();
        let run = || {
            let mut m = DeepSetsModel::new(2, &small(), 3).unwrap();
            train_deepsets(&mut m, &data.select(&(0..16).collect::<Vec<_>>()), &data.select(&(16..20).collect::<Vec<_>>()), 10, &small(), 4).unwrap();
            m
        };
        assert_eq!(run(), run());
    }
}
