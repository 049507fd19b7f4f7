//! Central finite-difference oracle for every analytic gradient in the
//! crate: plain MLP layers, the classification and discriminator losses,
//! the reversal path into the extractor, and the utility loss through both
//! DeepSets and the extractor.

use rand::Rng as _;
use zeroal::adapt::{self, AdaptConfig, AdaptModel};
use zeroal::d2ulo::extractor_utility_gradient;
use zeroal::deepsets::{DeepSetsConfig, DeepSetsModel, EmbeddedUtilityDataset, Pooling};
use zeroal::nnkit::{loss, Activation, Matrix, MlpNet};
use zeroal::rng;

const H: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Summary {
    pub nets: usize,
    pub entries: usize,
    pub worst: f64,
    pub worst_at: String,
    /// Entries above `TOLERANCE`.
    pub failures: Vec<String>,
}

pub const TOLERANCE: f64 = 1e-4;

impl Summary {
    fn compare(&mut self, what: &str, analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len(), "{what}: length");
        for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a - n).abs() / (a.abs() + n.abs()).max(FLOOR);
            self.entries += 1;
            if !(err < TOLERANCE) && self.failures.len() < 20 {
                self.failures.push(format!("{what}[{k}]: analytic {a:e} numeric {n:e}"));
            }
            if err > self.worst || err.is_nan() {
                self.worst = err;
                self.worst_at = format!("{what}[{k}]: analytic {a:e} numeric {n:e}");
            }
        }
    }
}

fn random_matrix(r: &mut rng::Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Moves every parameter off its initial value; zero biases would otherwise
/// put ReLU pre-activations exactly on the kink.
fn jitter(mut net: MlpNet, r: &mut rng::Rng) -> MlpNet {
    let p: Vec<f64> = net.params_flat().iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
    net.set_params_flat(&p).unwrap();
    net
}

/// Numeric gradient of `f` over the parameters of `net`.
fn numeric_params(net: &MlpNet, f: impl Fn(&MlpNet) -> f64) -> Vec<f64> {
    let base = net.params_flat();
    let mut probe = net.clone();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + H;
            probe.set_params_flat(&p).unwrap();
            let up = f(&probe);
            p[i] = base[i] - H;
            probe.set_params_flat(&p).unwrap();
            let down = f(&probe);
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn numeric_input(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Vec<f64> {
    (0..x.data().len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += H;
            let up = f(&p);
            p.data_mut()[i] -= 2.0 * H;
            let down = f(&p);
            (up - down) / (2.0 * H)
        })
        .collect()
}

const HIDDEN: [Activation; 3] = [Activation::Elu, Activation::Relu, Activation::Identity];

fn mlp_checks(s: &mut Summary, i: u64, r: &mut rng::Rng) {
    let input = r.random_range(2..5);
    let depth = r.random_range(1..3);
    let mut dims = vec![input];
    for _ in 0..depth {
        dims.push(r.random_range(3..7));
    }
    let classes = r.random_range(2..5);
    dims.push(classes);
    let hidden = HIDDEN[i as usize % HIDDEN.len()];
    let x = random_matrix(r, 5, input);

    let net = jitter(MlpNet::new(&dims, hidden, Activation::Softmax, rng::derive(i, 1)).unwrap(), r);
    let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..classes)).collect();
    let ce = |n: &MlpNet, x: &Matrix| loss::cross_entropy(&n.predict(x).unwrap(), &labels, None).unwrap().0;
    let (out, cache) = net.forward(&x).unwrap();
    let (_, g) = loss::cross_entropy(&out, &labels, None).unwrap();
    let (grads, gx) = net.backward(&cache, &g, 1.0).unwrap();
    s.compare("mlp/ce/params", &grads.flatten(), &numeric_params(&net, |n| ce(n, &x)));
    s.compare("mlp/ce/input", gx.data(), &numeric_input(&x, |x| ce(&net, x)));

    let out_act = if i % 2 == 0 { Activation::Identity } else { Activation::Sigmoid };
    let net = jitter(MlpNet::new(&dims, hidden, out_act, rng::derive(i, 2)).unwrap(), r);
    let target = random_matrix(r, 5, classes);
    let sq = |n: &MlpNet, x: &Matrix| loss::mse(&n.predict(x).unwrap(), &target).unwrap().0;
    let (out, cache) = net.forward(&x).unwrap();
    let (_, g) = loss::mse(&out, &target).unwrap();
    let (grads, gx) = net.backward(&cache, &g, 1.0).unwrap();
    s.compare("mlp/mse/params", &grads.flatten(), &numeric_params(&net, |n| sq(n, &x)));
    s.compare("mlp/mse/input", gx.data(), &numeric_input(&x, |x| sq(&net, x)));
}

fn with_net(model: &AdaptModel, which: usize, net: &MlpNet) -> AdaptModel {
    let mut m = model.clone();
    match which {
        0 => m.g_f = net.clone(),
        1 => m.g_y = net.clone(),
        _ => m.g_d = net.clone(),
    }
    m
}

fn adapt_checks(s: &mut Summary, i: u64, r: &mut rng::Rng) {
    let input = r.random_range(2..4);
    let classes = r.random_range(2..4);
    let cfg = AdaptConfig {
        feature_hidden: vec![r.random_range(3..6)],
        embed_dim: r.random_range(2..5),
        classifier_hidden: vec![4],
        discriminator_hidden: vec![4],
        ..AdaptConfig::default()
    };
    let mut model = AdaptModel::new(input, classes, &cfg, rng::derive(i, 3)).unwrap();
    model.g_f = jitter(model.g_f, r);
    model.g_y = jitter(model.g_y, r);
    model.g_d = jitter(model.g_d, r);
    let bs = random_matrix(r, 4, input);
    let bt = random_matrix(r, 3, input);
    let ys: Vec<usize> = (0..4).map(|_| r.random_range(0..classes)).collect();
    let lambda = r.random_range(0.1..2.0);
    let g = adapt::step_gradients(&model, &bs, &ys, &bt, lambda).unwrap();

    let cls = |m: &AdaptModel| adapt::cls_loss(m, &bs, &ys).unwrap();
    let gan = |m: &AdaptModel| adapt::gan_loss(m, &bs, &bt).unwrap();
    s.compare("cls/g_y", &g.g_y.flatten(), &numeric_params(&model.g_y, |n| cls(&with_net(&model, 1, n))));
    s.compare("gan/g_d", &g.g_d.flatten(), &numeric_params(&model.g_d, |n| gan(&with_net(&model, 2, n))));
    s.compare(
        "reversal/g_f",
        &g.g_f.flatten(),
        &numeric_params(&model.g_f, |n| {
            let m = with_net(&model, 0, n);
            cls(&m) - lambda * gan(&m)
        }),
    );
}

fn utility_checks(s: &mut Summary, i: u64, r: &mut rng::Rng) {
    let input = r.random_range(2..4);
    let embed = r.random_range(2..4);
    let g_f = jitter(MlpNet::new(&[input, 4, embed], Activation::Elu, Activation::Elu, rng::derive(i, 4)).unwrap(), r);
    let cfg = DeepSetsConfig {
        hidden: 5,
        set_dim: 4,
        layers: 2,
        bounded_output: i % 3 == 0,
        pooling: if i % 2 == 0 { Pooling::Sum } else { Pooling::Mean },
        ..DeepSetsConfig::default()
    };
    let mut ds = DeepSetsModel::new(embed, &cfg, rng::derive(i, 5)).unwrap();
    ds.phi = jitter(ds.phi, r);
    ds.rho = jitter(ds.rho, r);
    let pool = random_matrix(r, 8, input);
    let subsets: Vec<Vec<usize>> = (0..4)
        .map(|_| {
            let k = r.random_range(1..6);
            let mut v = rand::seq::index::sample(r, 8, k).into_vec();
            v.sort_unstable();
            v
        })
        .collect();
    let utilities: Vec<f64> = (0..4).map(|_| r.random_range(0.0..1.0)).collect();

    let mse_of = |g: &MlpNet, d: &DeepSetsModel| {
        let data = EmbeddedUtilityDataset::new(g.predict(&pool).unwrap(), subsets.clone(), utilities.clone()).unwrap();
        d.mse(&data).unwrap()
    };
    let (_, gf) = extractor_utility_gradient(&g_f, &ds, &pool, &subsets, &utilities).unwrap();
    s.compare("utility/g_f", &gf.flatten(), &numeric_params(&g_f, |n| mse_of(n, &ds)));

    let data = EmbeddedUtilityDataset::new(g_f.predict(&pool).unwrap(), subsets.clone(), utilities.clone()).unwrap();
    let all: Vec<usize> = (0..subsets.len()).collect();
    let b = ds.batch_gradients(&data, &all).unwrap();
    let with_phi = |n: &MlpNet| DeepSetsModel { phi: n.clone(), ..ds.clone() };
    let with_rho = |n: &MlpNet| DeepSetsModel { rho: n.clone(), ..ds.clone() };
    s.compare("utility/phi", &b.phi.flatten(), &numeric_params(&ds.phi, |n| mse_of(&g_f, &with_phi(n))));
    s.compare("utility/rho", &b.rho.flatten(), &numeric_params(&ds.rho, |n| mse_of(&g_f, &with_rho(n))));
}

/// Runs every check on `nets` independently drawn networks of each family.
pub fn run(nets: u64, seed: u64) -> Summary {
    let mut s = Summary::default();
    for i in 0..nets {
        let mut r = rng::child(seed, i);
        let k = rng::derive(seed, i);
        mlp_checks(&mut s, k, &mut r);
        adapt_checks(&mut s, k, &mut r);
        utility_checks(&mut s, k, &mut r);
        s.nets += 1;
    }
    s
}

