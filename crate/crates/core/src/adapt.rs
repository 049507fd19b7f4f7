//! Adversarial domain adaptation: feature extractor `g_f`, class predictor
//! `g_y` and domain discriminator `g_d`. The discriminator is trained to
//! output 1 on source and 0 on target embeddings; the extractor receives its
//! gradient through a reversal of strength `lambda`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{loss, Activation, Adam, Matrix, MlpNet};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub feature_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub lambda: f64,
    /// Linear ramp of the reversal strength from 0 to `lambda` over this
    /// many steps; 0 disables the ramp.
    pub lambda_warmup_steps: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            feature_hidden: vec![128, 128],
            embed_dim: 64,
            classifier_hidden: vec![64],
            discriminator_hidden: vec![64, 64],
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            batch_size: 128,
            lambda: 1.0,
            lambda_warmup_steps: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.batch_size == 0 {
            return Err(Error::Param("embedding width and batch size must be ≥ 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Param(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        Adam::new(self.lr, self.beta1, self.beta2, 1e-8).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptModel {
    pub g_f: MlpNet,
    pub g_y: MlpNet,
    pub g_d: MlpNet,
    pub lambda: f64,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl AdaptModel {
    pub fn new(input_dim: usize, n_classes: usize, cfg: &AdaptConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        Ok(AdaptModel {
            g_f: MlpNet::new(
                &widths(input_dim, &cfg.feature_hidden, e),
                Activation::Elu,
                Activation::Elu,
                rng::derive(seed, 0),
            )?,
            g_y: MlpNet::new(
                &widths(e, &cfg.classifier_hidden, n_classes),
                Activation::Elu,
                Activation::Softmax,
                rng::derive(seed, 1),
            )?,
            g_d: MlpNet::new(
                &widths(e, &cfg.discriminator_hidden, 1),
                Activation::Elu,
                Activation::Sigmoid,
                rng::derive(seed, 2),
            )?,
            lambda: cfg.lambda,
        })
    }

    /// Assembles a model from existing nets after checking that they compose.
    pub fn from_parts(g_f: MlpNet, g_y: MlpNet, g_d: MlpNet, lambda: f64) -> Result<Self> {
        if g_f.output_dim() != g_y.input_dim() || g_f.output_dim() != g_d.input_dim() {
            return Err(Error::Shape(format!(
                "embedding width {} feeds heads expecting {} and {}",
                g_f.output_dim(),
                g_y.input_dim(),
                g_d.input_dim()
            )));
        }
        if g_d.output_dim() != 1 {
            return Err(Error::Shape("the discriminator must emit one probability".into()));
        }
        Ok(AdaptModel { g_f, g_y, g_d, lambda })
    }

    pub fn n_classes(&self) -> usize {
        self.g_y.output_dim()
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.g_f.predict(x)
    }

    pub fn class_probs(&self, x: &Matrix) -> Result<Matrix> {
        self.g_y.predict(&self.g_f.predict(x)?)
    }

    /// Probability that each row comes from the source domain.
    pub fn domain_probs(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.g_d.predict(&self.g_f.predict(x)?)?.into_vec())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let p = self.class_probs(x)?;
        Ok((0..p.rows()).map(|r| p.argmax_row(r)).collect())
    }

    pub fn accuracy(&self, x: &Matrix, y: &[usize]) -> Result<f64> {
        if x.rows() != y.len() || y.is_empty() {
            return Err(Error::Shape(format!("{} rows for {} labels", x.rows(), y.len())));
        }
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
    }

    /// Fraction of rows the discriminator assigns to the right domain.
    pub fn discriminator_accuracy(&self, source: &Matrix, target: &Matrix) -> Result<f64> {
        let ds = self.domain_probs(source)?;
        let dt = self.domain_probs(target)?;
        let hits = ds.iter().filter(|&&p| p > 0.5).count() + dt.iter().filter(|&&p| p < 0.5).count();
        Ok(hits as f64 / (ds.len() + dt.len()) as f64)
    }
}

/// Discriminator cross-entropy with logs clamped at [`loss::LOG_FLOOR`].
pub fn gan_loss_from_probs(d_source: &[f64], d_target: &[f64]) -> f64 {
    let ms = d_source.iter().map(|&p| p.max(loss::LOG_FLOOR).ln()).sum::<f64>() / d_source.len() as f64;
    let mt = d_target
        .iter()
        .map(|&p| (1.0 - p).max(loss::LOG_FLOOR).ln())
        .sum::<f64>()
        / d_target.len() as f64;
    -(ms + mt)
}

fn check_batches(model: &AdaptModel, bs: &Matrix, bt: &Matrix) -> Result<()> {
    if bs.rows() == 0 || bt.rows() == 0 {
        return Err(Error::Size("domain batches must be non-empty".into()));
    }
    if bs.cols() != bt.cols() || bs.cols() != model.g_f.input_dim() {
        return Err(Error::Shape(format!(
            "batch dims {} / {} vs model input {}",
            bs.cols(),
            bt.cols(),
            model.g_f.input_dim()
        )));
    }
    Ok(())
}

pub fn gan_loss(model: &AdaptModel, bs: &Matrix, bt: &Matrix) -> Result<f64> {
    check_batches(model, bs, bt)?;
    Ok(gan_loss_from_probs(&model.domain_probs(bs)?, &model.domain_probs(bt)?))
}

pub fn cls_loss(model: &AdaptModel, bs: &Matrix, labels: &[usize]) -> Result<f64> {
    let p = model.class_probs(bs)?;
    Ok(loss::cross_entropy(&p, labels, None)?.0)
}

/// Adam state for the three sub-networks.
#[derive(Clone, Debug)]
pub struct DaOptimizers {
    pub f: Adam,
    pub y: Adam,
    pub d: Adam,
    steps: u64,
}

impl DaOptimizers {
    pub fn new(cfg: &AdaptConfig) -> Result<Self> {
        let adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, 1e-8)?;
        Ok(DaOptimizers {
            f: adam.clone(),
            y: adam.clone(),
            d: adam,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub cls_loss: f64,
    pub gan_loss: f64,
    pub disc_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub update_discriminator: bool,
    pub lambda_warmup_steps: u64,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            update_discriminator: true,
            lambda_warmup_steps: 0,
        }
    }
}

/// Gradients of one adaptation step, computed before any parameter moves.
pub struct StepGradients {
    pub g_f: crate::nnkit::Gradients,
    pub g_y: crate::nnkit::Gradients,
    pub g_d: crate::nnkit::Gradients,
    pub report: StepReport,
}

/// Computes the step's gradients with reversal strength `lambda`:
/// `g_y` and `g_f` descend the classification loss, `g_d` descends the
/// discriminator loss, and `g_f` receives `-lambda` times the
/// discriminator-loss gradient.
pub fn step_gradients(
    model: &AdaptModel,
    bs: &Matrix,
    ys: &[usize],
    bt: &Matrix,
    lambda: f64,
) -> Result<StepGradients> {
    check_batches(model, bs, bt)?;
    let ns = bs.rows();
    let nt = bt.rows();
    let both = bs.vstack(bt)?;
    let (emb, f_cache) = model.g_f.forward(&both)?;
    let emb_s = emb.slice_rows(0, ns);

    let (probs, y_cache) = model.g_y.forward(&emb_s)?;
    let (cls, g_probs) = loss::cross_entropy(&probs, ys, None)?;
    let (gy, g_emb_cls) = model.g_y.backward(&y_cache, &g_probs, 1.0)?;

    let (dprob, d_cache) = model.g_d.forward(&emb)?;
    let dv = dprob.data();
    let gan = gan_loss_from_probs(&dv[..ns], &dv[ns..]);
    let mut g_d_out = Matrix::zeros(ns + nt, 1);
    for (i, &p) in dv.iter().enumerate() {
        let g = if i < ns {
            -1.0 / (ns as f64 * p.max(loss::LOG_FLOOR))
        } else {
            1.0 / (nt as f64 * (1.0 - p).max(loss::LOG_FLOOR))
        };
        g_d_out.set(i, 0, g);
    }
    let (gd, g_emb_dom) = model.g_d.backward(&d_cache, &g_d_out, -lambda)?;

    let mut g_emb = g_emb_dom;
    for r in 0..ns {
        for (a, b) in g_emb.row_mut(r).iter_mut().zip(g_emb_cls.row(r)) {
            *a += b;
        }
    }
    let (gf, _) = model.g_f.backward(&f_cache, &g_emb, 1.0)?;

    let hits = dv[..ns].iter().filter(|&&p| p > 0.5).count() + dv[ns..].iter().filter(|&&p| p < 0.5).count();
    let report = StepReport {
        cls_loss: cls,
        gan_loss: gan,
        disc_acc: hits as f64 / (ns + nt) as f64,
    };
    if !(cls.is_finite() && gan.is_finite() && gf.is_finite() && gy.is_finite() && gd.is_finite()) {
        return Err(Error::Diverged(format!(
            "adaptation step produced a non-finite loss or gradient (cls {cls}, gan {gan})"
        )));
    }
    Ok(StepGradients {
        g_f: gf,
        g_y: gy,
        g_d: gd,
        report,
    })
}

/// One adaptation update with default options.
pub fn da_step(
    model: &mut AdaptModel,
    bs: &Matrix,
    ys: &[usize],
    bt: &Matrix,
    opt: &mut DaOptimizers,
) -> Result<StepReport> {
    da_step_with(model, bs, ys, bt, opt, StepOptions::default())
}

pub fn da_step_with(
    model: &mut AdaptModel,
    bs: &Matrix,
    ys: &[usize],
    bt: &Matrix,
    opt: &mut DaOptimizers,
    options: StepOptions,
) -> Result<StepReport> {
    let ramp = if options.lambda_warmup_steps == 0 {
        1.0
    } else {
        (opt.steps as f64 / options.lambda_warmup_steps as f64).min(1.0)
    };
    let lambda = model.lambda * ramp;
    let grads = step_gradients(model, bs, ys, bt, lambda).map_err(|e| match e {
        Error::Diverged(m) => Error::Diverged(format!(
            "{m}; lower the adaptation learning rate (currently {})",
            opt.f.lr
        )),
        other => other,
    })?;
    model.g_f.apply_adam(&mut opt.f, &grads.g_f)?;
    model.g_y.apply_adam(&mut opt.y, &grads.g_y)?;
    if options.update_discriminator {
        model.g_d.apply_adam(&mut opt.d, &grads.g_d)?;
    }
    opt.steps += 1;
    Ok(grads.report)
}

/// Draws aligned mini-batches for adaptation steps.
pub struct BatchSampler {
    rng: rng::Rng,
    batch: usize,
}

impl BatchSampler {
    pub fn new(batch: usize, seed: u64) -> Self {
        BatchSampler {
            rng: rng::seeded(seed),
            batch,
        }
    }

    /// Indices of a batch without replacement from `0..n`.
    pub fn draw(&mut self, n: usize) -> Vec<usize> {
        index::sample(&mut self.rng, n, self.batch.min(n)).into_vec()
    }
}

/// Runs `steps` adaptation updates on the given source/target features.
#[allow(clippy::too_many_arguments)]
pub fn train_adaptation(
    model: &mut AdaptModel,
    source_x: &Matrix,
    source_y: &[usize],
    target_x: &Matrix,
    steps: usize,
    opt: &mut DaOptimizers,
    sampler: &mut BatchSampler,
    options: StepOptions,
) -> Result<Vec<StepReport>> {
    let mut reports = Vec::with_capacity(steps);
    for _ in 0..steps {
        let si = sampler.draw(source_x.rows());
        let ti = sampler.draw(target_x.rows());
        let ys: Vec<usize> = si.iter().map(|&i| source_y[i]).collect();
        reports.push(da_step_with(
            model,
            &source_x.select_rows(&si),
            &ys,
            &target_x.select_rows(&ti),
            opt,
            options,
        )?);
    }
    Ok(reports)
}

/// Source-only classification updates of `g_f` and `g_y`.
pub fn pretrain_source(
    model: &mut AdaptModel,
    source_x: &Matrix,
    source_y: &[usize],
    steps: usize,
    opt: &mut DaOptimizers,
    sampler: &mut BatchSampler,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let si = sampler.draw(source_x.rows());
        let ys: Vec<usize> = si.iter().map(|&i| source_y[i]).collect();
        let (emb, f_cache) = model.g_f.forward(&source_x.select_rows(&si))?;
        let (probs, y_cache) = model.g_y.forward(&emb)?;
        let (cls, g_probs) = loss::cross_entropy(&probs, &ys, None)?;
        let (gy, g_emb) = model.g_y.backward(&y_cache, &g_probs, 1.0)?;
        let (gf, _) = model.g_f.backward(&f_cache, &g_emb, 1.0)?;
        if !(cls.is_finite() && gf.is_finite() && gy.is_finite()) {
            return Err(Error::Diverged(format!(
                "source pretraining diverged; lower the adaptation learning rate (currently {})",
                opt.f.lr
            )));
        }
        model.g_f.apply_adam(&mut opt.f, &gf)?;
        model.g_y.apply_adam(&mut opt.y, &gy)?;
        losses.push(cls);
    }
    Ok(losses)
}
