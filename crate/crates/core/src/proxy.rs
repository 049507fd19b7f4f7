//! Cheap classifiers used to score subsets: multinomial logistic
//! regression, a Crammer–Singer linear hinge model and a one-hidden-layer
//! MLP.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnkit::{loss, softmax_in_place, Activation, Adam, Matrix, MlpNet};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    Logistic,
    LinearHinge,
    SmallMlp,
}

impl ProxyKind {
    pub fn name(self) -> &'static str {
        match self {
            ProxyKind::Logistic => "logistic",
            ProxyKind::LinearHinge => "linear_hinge",
            ProxyKind::SmallMlp => "small_mlp",
        }
    }
}

impl std::str::FromStr for ProxyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ProxyKind::Logistic),
            "linear_hinge" | "svm" | "hinge" => Ok(ProxyKind::LinearHinge),
            "small_mlp" | "mlp" => Ok(ProxyKind::SmallMlp),
            other => Err(Error::Param(format!("unknown proxy kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyHyper {
    /// Inverse regularization strength of the hinge model; the L2 weight is
    /// `1 / (C·n)`.
    pub hinge_c: f64,
    /// Inverse regularization strength of the logistic model, same mapping.
    pub logistic_c: f64,
    pub logistic_lr: f64,
    pub hinge_lr: f64,
    pub mlp_lr: f64,
    pub mlp_hidden: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Relative loss change regarded as "no progress".
    pub plateau_tol: f64,
    /// Consecutive no-progress epochs before stopping.
    pub plateau_patience: usize,
}

impl Default for ProxyHyper {
    fn default() -> Self {
        ProxyHyper {
            hinge_c: 0.1,
            logistic_c: 1.0,
            logistic_lr: 0.1,
            hinge_lr: 0.05,
            mlp_lr: 1e-3,
            mlp_hidden: 32,
            batch_size: 32,
            max_epochs: 200,
            plateau_tol: 1e-6,
            plateau_patience: 10,
        }
    }
}

impl ProxyHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.hinge_c > 0.0 && self.logistic_c > 0.0) {
            return Err(Error::Param("regularization constants must be positive".into()));
        }
        if !(self.logistic_lr > 0.0 && self.hinge_lr > 0.0 && self.mlp_lr > 0.0) {
            return Err(Error::Param("proxy learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.mlp_hidden == 0 {
            return Err(Error::Param("batch size, epochs and hidden width must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Linear { weights: Matrix, bias: Vec<f64> },
    Mlp(MlpNet),
    Constant(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyModel {
    kind: ProxyKind,
    n_classes: usize,
    d_in: usize,
    body: Body,
    /// Set when the training subset contained a single class; the model
    /// then predicts that class everywhere.
    pub single_class: bool,
    pub epochs_run: usize,
}

impl ProxyModel {
    pub fn kind(&self) -> ProxyKind {
        self.kind
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `(weights, bias)` for the linear kinds.
    pub fn linear_params(&self) -> Option<(&Matrix, &[f64])> {
        match &self.body {
            Body::Linear { weights, bias } => Some((weights, bias)),
            _ => None,
        }
    }

    /// Per-class scores, one row per input.
    pub fn scores(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in {
            return Err(Error::Shape(format!(
                "proxy trained on {} features, got {}",
                self.d_in,
                x.cols()
            )));
        }
        match &self.body {
            Body::Linear { weights, bias } => {
                let mut s = x.matmul(weights)?;
                s.add_row_vector(bias);
                Ok(s)
            }
            Body::Mlp(net) => net.predict(x),
            Body::Constant(c) => {
                let mut s = Matrix::zeros(x.rows(), self.n_classes);
                for r in 0..x.rows() {
                    s.set(r, *c, 1.0);
                }
                Ok(s)
            }
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let s = self.scores(x)?;
        Ok((0..s.rows()).map(|r| s.argmax_row(r)).collect())
    }
}

/// Trains a proxy on a labeled dataset with `n_classes` global classes.
pub fn train_proxy(
    kind: ProxyKind,
    train: &Dataset,
    n_classes: usize,
    hyper: &ProxyHyper,
    seed: u64,
) -> Result<ProxyModel> {
    let labels = train.labels()?;
    train_proxy_raw(kind, train.features(), labels, n_classes, hyper, seed)
}

/// [`train_proxy`] on bare features and labels.
pub fn train_proxy_raw(
    kind: ProxyKind,
    x: &Matrix,
    y: &[usize],
    n_classes: usize,
    hyper: &ProxyHyper,
    seed: u64,
) -> Result<ProxyModel> {
    hyper.validate()?;
    if x.rows() == 0 {
        return Err(Error::Size("cannot train a proxy on zero points".into()));
    }
    if x.rows() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.rows(), y.len())));
    }
    if n_classes == 0 {
        return Err(Error::Param("n_classes must be ≥ 1".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Label(format!("label {bad} with {n_classes} classes")));
    }
    let base = |body, single_class, epochs_run| ProxyModel {
        kind,
        n_classes,
        d_in: x.cols(),
        body,
        single_class,
        epochs_run,
    };
    if y.iter().all(|&c| c == y[0]) {
        return Ok(base(Body::Constant(y[0]), true, 0));
    }
    let n = x.rows() as f64;
    let (body, epochs) = match kind {
        ProxyKind::Logistic => {
            let l2 = 1.0 / (hyper.logistic_c * n);
            let (w, b, e) = fit_logistic(x, y, n_classes, l2, hyper)?;
            (Body::Linear { weights: w, bias: b }, e)
        }
        ProxyKind::LinearHinge => {
            let l2 = 1.0 / (hyper.hinge_c * n);
            let (w, b, e) = fit_hinge(x, y, n_classes, l2, hyper, seed)?;
            (Body::Linear { weights: w, bias: b }, e)
        }
        ProxyKind::SmallMlp => {
            let (net, e) = fit_mlp(x, y, n_classes, hyper, seed)?;
            (Body::Mlp(net), e)
        }
    };
    Ok(base(body, false, epochs))
}

struct Plateau {
    last: f64,
    stale: usize,
    tol: f64,
    patience: usize,
}

impl Plateau {
    fn new(hyper: &ProxyHyper) -> Self {
        Plateau {
            last: f64::INFINITY,
            stale: 0,
            tol: hyper.plateau_tol,
            patience: hyper.plateau_patience,
        }
    }

    /// Returns true once the loss has stalled for `patience` epochs.
    fn update(&mut self, loss: f64) -> bool {
        let rel = (self.last - loss).abs() / self.last.abs().max(1e-12);
        if rel < self.tol {
            self.stale += 1;
        } else {
            self.stale = 0;
        }
        self.last = loss;
        self.stale >= self.patience
    }
}

fn pack(w: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut p = w.data().to_vec();
    p.extend_from_slice(b);
    p
}

fn unpack(p: &[f64], w: &mut Matrix, b: &mut [f64]) {
    let nw = w.data().len();
    w.data_mut().copy_from_slice(&p[..nw]);
    b.copy_from_slice(&p[nw..]);
}

fn fit_logistic(
    x: &Matrix,
    y: &[usize],
    c: usize,
    l2: f64,
    hyper: &ProxyHyper,
) -> Result<(Matrix, Vec<f64>, usize)> {
    let n = x.rows() as f64;
    let mut w = Matrix::zeros(x.cols(), c);
    let mut b = vec![0.0; c];
    let mut adam = Adam::new(hyper.logistic_lr, 0.9, 0.999, 1e-8)?;
    let mut plateau = Plateau::new(hyper);
    let mut epochs = 0;
    for _ in 0..hyper.max_epochs {
        epochs += 1;
        let mut p = x.matmul(&w)?;
        p.add_row_vector(&b);
        let mut loss = 0.0;
        for (r, &yr) in y.iter().enumerate() {
            let row = p.row_mut(r);
            softmax_in_place(row);
            loss -= row[yr].max(loss::LOG_FLOOR).ln();
            row[yr] -= 1.0;
        }
        let wsq: f64 = w.data().iter().map(|v| v * v).sum();
        let loss = loss / n + 0.5 * l2 * wsq;
        // p now holds (P − Y)
        let mut gw = x.t_matmul(&p)?;
        gw.scale(1.0 / n);
        for (g, wv) in gw.data_mut().iter_mut().zip(w.data()) {
            *g += l2 * wv;
        }
        let gb: Vec<f64> = p.column_sums().into_iter().map(|s| s / n).collect();
        let mut params = pack(&w, &b);
        adam.step(&mut params, &pack(&gw, &gb))?;
        unpack(&params, &mut w, &mut b);
        if !loss.is_finite() {
            return Err(Error::Diverged("logistic proxy loss is not finite".into()));
        }
        if plateau.update(loss) {
            break;
        }
    }
    Ok((w, b, epochs))
}

fn fit_hinge(
    x: &Matrix,
    y: &[usize],
    c: usize,
    l2: f64,
    hyper: &ProxyHyper,
    seed: u64,
) -> Result<(Matrix, Vec<f64>, usize)> {
    let n = x.rows();
    let mut w = Matrix::zeros(x.cols(), c);
    let mut b = vec![0.0; c];
    let mut adam = Adam::new(hyper.hinge_lr, 0.9, 0.999, 1e-8)?;
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut plateau = Plateau::new(hyper);
    let mut epochs = 0;
    for _ in 0..hyper.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let xb = x.select_rows(batch);
            let mut s = xb.matmul(&w)?;
            s.add_row_vector(&b);
            let mut gs = Matrix::zeros(batch.len(), c);
            let m = batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let yi = y[i];
                let row = s.row(r);
                let mut rival = usize::MAX;
                let mut best = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if j != yi && v > best {
                        best = v;
                        rival = j;
                    }
                }
                let margin = 1.0 + best - row[yi];
                if margin > 0.0 {
                    epoch_loss += margin;
                    gs.set(r, rival, 1.0 / m);
                    gs.set(r, yi, -1.0 / m);
                }
            }
            let mut gw = xb.t_matmul(&gs)?;
            for (g, wv) in gw.data_mut().iter_mut().zip(w.data()) {
                *g += l2 * wv;
            }
            let gb = gs.column_sums();
            let mut params = pack(&w, &b);
            adam.step(&mut params, &pack(&gw, &gb))?;
            unpack(&params, &mut w, &mut b);
        }
        let wsq: f64 = w.data().iter().map(|v| v * v).sum();
        let loss = epoch_loss / n as f64 + 0.5 * l2 * wsq;
        if !loss.is_finite() {
            return Err(Error::Diverged("hinge proxy loss is not finite".into()));
        }
        if plateau.update(loss) {
            break;
        }
    }
    Ok((w, b, epochs))
}

fn fit_mlp(
    x: &Matrix,
    y: &[usize],
    c: usize,
    hyper: &ProxyHyper,
    seed: u64,
) -> Result<(MlpNet, usize)> {
    let mut net = MlpNet::new(
        &[x.cols(), hyper.mlp_hidden, c],
        Activation::Elu,
        Activation::Softmax,
        rng::derive(seed, 0),
    )?;
    let mut adam = Adam::new(hyper.mlp_lr, 0.9, 0.999, 1e-7)?;
    let mut rng = rng::child(seed, 1);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut plateau = Plateau::new(hyper);
    let mut epochs = 0;
    for _ in 0..hyper.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let xb = x.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let (p, cache) = net.forward(&xb)?;
            let (l, g) = loss::cross_entropy(&p, &yb, None)?;
            epoch_loss += l * batch.len() as f64;
            let (grads, _) = net.backward(&cache, &g, 1.0)?;
            net.apply_adam(&mut adam, &grads)?;
        }
        let loss = epoch_loss / x.rows() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged("MLP proxy loss is not finite".into()));
        }
        if plateau.update(loss) {
            break;
        }
    }
    Ok((net, epochs))
}

/// Fraction of argmax-correct predictions (ties to the lowest class id).
pub fn accuracy(model: &ProxyModel, eval: &Dataset) -> Result<f64> {
    accuracy_raw(model, eval.features(), eval.labels()?)
}

pub fn accuracy_raw(model: &ProxyModel, x: &Matrix, y: &[usize]) -> Result<f64> {
    if x.rows() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.rows(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::Size("accuracy on an empty set".into()));
    }
    let pred = model.predict(x)?;
    let correct = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / y.len() as f64)
}
