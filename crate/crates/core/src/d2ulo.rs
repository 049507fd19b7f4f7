//! Joint training of the adapted feature extractor and the set-utility model.
//!
//! Each outer epoch runs `k` adaptation steps, embeds the utility pool with
//! the current extractor, fits the DeepSets model on the embedded records,
//! then nudges the extractor towards embeddings on which the frozen DeepSets
//! model predicts the recorded utilities.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapt::{self, AdaptConfig, AdaptModel, BatchSampler, DaOptimizers, StepOptions};
use crate::deepsets::{self, DeepSetsConfig, DeepSetsModel, EmbeddedUtilityDataset, Pooling};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnkit::{checkpoint, Adam, Gradients, Matrix, MlpNet};
use crate::rng;
use crate::usample::UtilityDataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMode {
    /// Adaptation steps interleaved with utility learning.
    #[default]
    D2ulo,
    /// Labeled target data stands in for the source; no adaptation steps.
    OptimalTargetOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub mode: JointMode,
    /// Adaptation steps per outer epoch.
    pub k: usize,
    pub epochs: usize,
    /// Source-only classifier steps before the first epoch.
    pub pretrain_steps: usize,
    pub deepsets_inner_epochs: usize,
    /// Train/validation ratio for the utility records.
    pub record_split: (usize, usize),
    /// Learning rate of the extractor's utility-regression step.
    pub gf_utility_lr: f64,
    /// Passes over the training records in the extractor's utility step.
    pub gf_utility_passes: usize,
    pub reset_deepsets_each_epoch: bool,
    /// Return the models of the epoch with the lowest held-out DeepSets
    /// error instead of the final ones.
    pub keep_best: bool,
    pub adapt: AdaptConfig,
    pub deepsets: DeepSetsConfig,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            mode: JointMode::D2ulo,
            k: 5,
            epochs: 30,
            pretrain_steps: 0,
            deepsets_inner_epochs: 10,
            record_split: (4, 1),
            gf_utility_lr: 1e-6,
            gf_utility_passes: 1,
            reset_deepsets_each_epoch: false,
            keep_best: true,
            adapt: AdaptConfig::default(),
            deepsets: DeepSetsConfig::default(),
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        if self.k == 0 {
            return Err(Error::Param("k must be ≥ 1".into()));
        }
        if self.record_split.0 == 0 {
            return Err(Error::Param("record split needs a training share".into()));
        }
        Adam::new(self.gf_utility_lr, 0.9, 0.999, 1e-8)?;
        Adam::new(self.deepsets.lr, self.deepsets.beta1, self.deepsets.beta2, 1e-8)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
    Embed,
    DeepSets,
    ExtractorUtility,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cls_loss: f64,
    pub gan_loss: f64,
    pub disc_acc: f64,
    pub deepsets_train_mse: f64,
    pub deepsets_val_mse: f64,
    /// Record MSE before and after the extractor's utility step.
    pub utility_loss_before: f64,
    pub utility_loss_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    /// Phases in execution order with their step counts.
    pub phases: Vec<(Phase, usize)>,
    pub pretrain_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub da_steps: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointModels {
    pub adapt: AdaptModel,
    pub deepsets: DeepSetsModel,
}

impl JointModels {
    /// `φ(g_f(x))` for every row, ready for incremental set scoring.
    pub fn pooled_features(&self, x: &Matrix) -> Result<Matrix> {
        self.deepsets.phi_rows(&self.adapt.embed(x)?)
    }

    pub fn predict_set(&self, x: &Matrix) -> Result<f64> {
        self.deepsets.predict(&self.adapt.embed(x)?)
    }

    /// Writes one checkpoint per network into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, net) in self.nets() {
            checkpoint::save(net, &dir.join(format!("{name}.nnkt")))?;
        }
        let p = dir.join("lambda.json");
        std::fs::write(&p, serde_json::to_string(&self.adapt.lambda)?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("pooling.json");
        std::fs::write(&p, serde_json::to_string(&self.deepsets.pooling)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let net = |name: &str| checkpoint::load(&dir.join(format!("{name}.nnkt")));
        let p = dir.join("lambda.json");
        let lambda: f64 = serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let p = dir.join("pooling.json");
        let pooling: Pooling = serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        Ok(JointModels {
            adapt: AdaptModel::from_parts(net("g_f")?, net("g_y")?, net("g_d")?, lambda)?,
            deepsets: DeepSetsModel::from_parts(net("phi")?, net("rho")?)?.with_pooling(pooling),
        })
    }

    fn nets(&self) -> [(&'static str, &MlpNet); 5] {
        [
            ("g_f", &self.adapt.g_f),
            ("g_y", &self.adapt.g_y),
            ("g_d", &self.adapt.g_d),
            ("phi", &self.deepsets.phi),
            ("rho", &self.deepsets.rho),
        ]
    }
}

/// Training stopped early; carries the models of the last completed epoch.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<JointModels>,
    pub report: JointReport,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "joint training stopped after {} epochs: {}", self.report.epochs.len(), self.error)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

/// Labeled source data, unlabeled target features and the feature matrix of
/// the pool the utility records index into.
pub struct JointInputs<'a> {
    pub source_x: &'a Matrix,
    pub source_y: &'a [usize],
    pub target_x: &'a Matrix,
    pub utility_pool_x: &'a Matrix,
    pub utilities: &'a UtilityDataset,
    pub n_classes: usize,
}

/// Record MSE of the frozen DeepSets model on `g_f(pool)` and its gradient
/// w.r.t. the parameters of `g_f`.
pub fn extractor_utility_gradient(
    g_f: &MlpNet,
    ds: &DeepSetsModel,
    pool_x: &Matrix,
    subsets: &[Vec<usize>],
    utilities: &[f64],
) -> Result<(f64, Gradients)> {
    let emb = Arc::new(g_f.predict(pool_x)?);
    let data = EmbeddedUtilityDataset::shared(emb, subsets.to_vec(), utilities.to_vec())?;
    let all: Vec<usize> = (0..data.len()).collect();
    let g = ds.batch_gradients(&data, &all)?;
    let (_, cache) = g_f.forward(&pool_x.select_rows(&g.rows))?;
    let (grads, _) = g_f.backward(&cache, &g.input_grad, 1.0)?;
    Ok((g.loss, grads))
}

fn embedded(
    g_f: &MlpNet,
    pool_x: &Matrix,
    subsets: &[Vec<usize>],
    utilities: &[f64],
) -> Result<EmbeddedUtilityDataset> {
    EmbeddedUtilityDataset::shared(Arc::new(g_f.predict(pool_x)?), subsets.to_vec(), utilities.to_vec())
}

pub fn train_joint(inputs: &JointInputs<'_>, cfg: &JointConfig, seed: u64) -> Result<(JointModels, JointReport), TrainFailure> {
    let mut report = JointReport::default();
    let fail = |error: Error, last_good: Option<JointModels>, report: JointReport| TrainFailure {
        error,
        last_good,
        report,
    };
    if let Err(e) = check_inputs(inputs, cfg) {
        return Err(fail(e, None, report));
    }
    let build = || -> Result<(AdaptModel, DeepSetsModel, DaOptimizers, Adam)> {
        let adapt = AdaptModel::new(inputs.source_x.cols(), inputs.n_classes, &cfg.adapt, rng::derive(seed, 1))?;
        let ds = DeepSetsModel::new(cfg.adapt.embed_dim, &cfg.deepsets, rng::derive(seed, 2))?;
        let opt = DaOptimizers::new(&cfg.adapt)?;
        let gf_adam = Adam::new(cfg.gf_utility_lr, 0.9, 0.999, 1e-8)?;
        Ok((adapt, ds, opt, gf_adam))
    };
    let (mut adapt, mut ds, mut opt, mut gf_adam) = match build() {
        Ok(v) => v,
        Err(e) => return Err(fail(e, None, report)),
    };
    let mut sampler = BatchSampler::new(cfg.adapt.batch_size, rng::derive(seed, 3));
    let mut shuffle_rng = rng::child(seed, 4);
    let subsets = inputs.utilities.subsets();
    let utilities = inputs.utilities.utilities();
    let (tr_idx, va_idx) = deepsets::split_records(subsets.len(), cfg.record_split, rng::derive(seed, 5));
    let pick = |idx: &[usize]| -> (Vec<Vec<usize>>, Vec<f64>) {
        (idx.iter().map(|&i| subsets[i].clone()).collect(), idx.iter().map(|&i| utilities[i]).collect())
    };
    let (tr_sets, tr_u) = pick(&tr_idx);
    let (va_sets, va_u) = pick(&va_idx);

    if cfg.pretrain_steps > 0 {
        match adapt::pretrain_source(&mut adapt, inputs.source_x, inputs.source_y, cfg.pretrain_steps, &mut opt, &mut sampler) {
            Ok(l) => report.pretrain_losses = l,
            Err(e) => return Err(fail(e, None, report)),
        }
        report.phases.push((Phase::Pretrain, cfg.pretrain_steps));
    }

    if cfg.epochs == 0 {
        return Ok((JointModels { adapt, deepsets: ds }, report));
    }
    let k = match cfg.mode {
        JointMode::D2ulo => cfg.k,
        JointMode::OptimalTargetOracle => 0,
    };
    let mut best: Option<(f64, JointModels)> = None;
    let mut last_good: Option<JointModels> = None;
    let options = StepOptions {
        update_discriminator: true,
        lambda_warmup_steps: cfg.adapt.lambda_warmup_steps,
    };
    for epoch in 1..=cfg.epochs {
        let step = (|| -> Result<(EpochLog, usize)> {
            let da = adapt::train_adaptation(
                &mut adapt,
                inputs.source_x,
                inputs.source_y,
                inputs.target_x,
                k,
                &mut opt,
                &mut sampler,
                options,
            )?;
            let mean = |f: fn(&adapt::StepReport) -> f64| {
                if da.is_empty() {
                    f64::NAN
                } else {
                    da.iter().map(f).sum::<f64>() / da.len() as f64
                }
            };

            if cfg.reset_deepsets_each_epoch {
                ds = DeepSetsModel::new(cfg.adapt.embed_dim, &cfg.deepsets, rng::derive(seed, 100 + epoch as u64))?;
            }
            let train_data = embedded(&adapt.g_f, inputs.utility_pool_x, &tr_sets, &tr_u)?;
            let val_data = embedded(&adapt.g_f, inputs.utility_pool_x, &va_sets, &va_u)?;
            let ds_rep = deepsets::train_deepsets(
                &mut ds,
                &train_data,
                &val_data,
                cfg.deepsets_inner_epochs,
                &cfg.deepsets,
                rng::derive(seed, 1000 + epoch as u64),
            )?;

            let before = ds.mse(&train_data)?;
            let mut order: Vec<usize> = (0..tr_sets.len()).collect();
            for _ in 0..cfg.gf_utility_passes {
                order.shuffle(&mut shuffle_rng);
                for batch in order.chunks(cfg.deepsets.batch_size.max(1)) {
                    let sets: Vec<Vec<usize>> = batch.iter().map(|&i| tr_sets[i].clone()).collect();
                    let us: Vec<f64> = batch.iter().map(|&i| tr_u[i]).collect();
                    let (_, g) = extractor_utility_gradient(&adapt.g_f, &ds, inputs.utility_pool_x, &sets, &us)?;
                    if !g.is_finite() {
                        return Err(Error::Diverged(format!(
                            "extractor utility gradient is not finite; lower the extractor utility learning rate (currently {})",
                            cfg.gf_utility_lr
                        )));
                    }
                    adapt.g_f.apply_adam(&mut gf_adam, &g)?;
                }
            }
            let after = ds.mse(&embedded(&adapt.g_f, inputs.utility_pool_x, &tr_sets, &tr_u)?)?;
            let val_after = if va_sets.is_empty() {
                after
            } else {
                ds.mse(&embedded(&adapt.g_f, inputs.utility_pool_x, &va_sets, &va_u)?)?
            };
            if !val_after.is_finite() {
                return Err(Error::Diverged("held-out utility error is not finite".into()));
            }
            let log = EpochLog {
                epoch,
                cls_loss: mean(|r| r.cls_loss),
                gan_loss: mean(|r| r.gan_loss),
                disc_acc: mean(|r| r.disc_acc),
                deepsets_train_mse: ds_rep.train_mse.last().copied().unwrap_or(before),
                deepsets_val_mse: val_after,
                utility_loss_before: before,
                utility_loss_after: after,
            };
            Ok((log, da.len()))
        })();
        let (log, da_done) = match step {
            Ok(l) => l,
            Err(e) => return Err(fail(e, last_good.or(best.map(|b| b.1)), report)),
        };
        if da_done > 0 {
            report.phases.push((Phase::Adapt, da_done));
        }
        report.phases.push((Phase::Embed, 1));
        report.phases.push((Phase::DeepSets, cfg.deepsets_inner_epochs));
        report.phases.push((Phase::ExtractorUtility, cfg.gf_utility_passes));
        report.da_steps += da_done;
        log::info!(
            "epoch {epoch}: cls {:.4} gan {:.4} disc {:.3} ds-train {:.5} ds-val {:.5}",
            log.cls_loss,
            log.gan_loss,
            log.disc_acc,
            log.deepsets_train_mse,
            log.deepsets_val_mse
        );
        let models = JointModels {
            adapt: adapt.clone(),
            deepsets: ds.clone(),
        };
        if best.as_ref().is_none_or(|(v, _)| log.deepsets_val_mse < *v) {
            best = Some((log.deepsets_val_mse, models.clone()));
            report.best_epoch = epoch;
        }
        last_good = Some(models);
        report.epochs.push(log);
    }
    let final_models = last_good.expect("at least one epoch ran");
    let models = if cfg.keep_best {
        best.map(|b| b.1).unwrap_or(final_models)
    } else {
        report.best_epoch = cfg.epochs;
        final_models
    };
    Ok((models, report))
}

/// Utility model trained directly on labeled target data: the target set is
/// both the classification data and the utility pool, and no adaptation
/// steps run.
pub fn train_optimal_oracle(
    target_labeled: &Dataset,
    sds_target: &UtilityDataset,
    cfg: &JointConfig,
    seed: u64,
) -> Result<(JointModels, JointReport), TrainFailure> {
    let labels = match target_labeled.labels() {
        Ok(l) => l,
        Err(error) => {
            return Err(TrainFailure {
                error,
                last_good: None,
                report: JointReport::default(),
            })
        }
    };
    let inputs = JointInputs {
        source_x: target_labeled.features(),
        source_y: labels,
        target_x: target_labeled.features(),
        utility_pool_x: target_labeled.features(),
        utilities: sds_target,
        n_classes: target_labeled.n_classes(),
    };
    let cfg = JointConfig {
        mode: JointMode::OptimalTargetOracle,
        ..cfg.clone()
    };
    train_joint(&inputs, &cfg, seed)
}

fn check_inputs(inputs: &JointInputs<'_>, cfg: &JointConfig) -> Result<()> {
    cfg.validate()?;
    let d = inputs.source_x.cols();
    if inputs.target_x.cols() != d || inputs.utility_pool_x.cols() != d {
        return Err(Error::Shape("source, target and utility pool must share a feature width".into()));
    }
    if inputs.source_y.len() != inputs.source_x.rows() {
        return Err(Error::Shape("one source label per source row".into()));
    }
    if inputs.utilities.len() < 2 {
        return Err(Error::Size("at least 2 utility records are required".into()));
    }
    if inputs.utilities.header.pool_size != inputs.utility_pool_x.rows() {
        return Err(Error::Param(format!(
            "utility records were drawn from a pool of {} rows, got {}",
            inputs.utilities.header.pool_size,
            inputs.utility_pool_x.rows()
        )));
    }
    Ok(())
}
