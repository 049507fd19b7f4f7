use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DomainPair, DomainTag};
use crate::error::{Error, Result};
use crate::nnkit::Matrix;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Two interleaved half-moons; the target is the source rotated about
    /// the origin.
    TwoMoonsRotate,
    /// Gaussian mixture whose target copy is translated.
    GaussMixShift,
    /// Gaussian mixture whose first half of classes forms the source and
    /// second half the target.
    LabelMismatch,
}

/// Generator knobs. Fields that a kind does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftParams {
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    /// Moons: rotation of the target in radians.
    pub angle: f64,
    /// Moons: isotropic Gaussian jitter.
    pub noise: f64,
    /// Mixtures: number of components (= classes).
    pub components: usize,
    /// Mixtures: feature dimension.
    pub dim: usize,
    /// Mixtures: scale of the component means.
    pub separation: f64,
    /// Mixtures: per-component standard deviation.
    pub spread: f64,
    /// Mixtures: length of the target translation.
    pub shift: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        ShiftParams {
            n_source: 500,
            n_target: 500,
            n_test: 500,
            angle: PI / 4.0,
            noise: 0.1,
            components: 10,
            dim: 8,
            separation: 2.0,
            spread: 1.0,
            shift: 1.0,
        }
    }
}

/// Generates a deterministic source/target pair for `kind`.
///
/// Moons are emitted at unit scale, centred at the origin, so rotations act
/// about the data centre. Mixture features are standardized with the
/// source's per-column mean and deviation; the same affine map is applied to
/// the target so the shift survives.
pub fn gen_shift(kind: ShiftKind, params: &ShiftParams, seed: u64) -> Result<DomainPair> {
    validate(kind, params)?;
    match kind {
        ShiftKind::TwoMoonsRotate => moons_pair(params, seed),
        ShiftKind::GaussMixShift => mixture_pair(params, seed, false),
        ShiftKind::LabelMismatch => mixture_pair(params, seed, true),
    }
}

fn validate(kind: ShiftKind, p: &ShiftParams) -> Result<()> {
    let classes = match kind {
        ShiftKind::TwoMoonsRotate => 2,
        ShiftKind::GaussMixShift => p.components,
        ShiftKind::LabelMismatch => p.components / 2,
    };
    if kind != ShiftKind::TwoMoonsRotate {
        if p.components < 2 {
            return Err(Error::Param(format!("mixture needs K ≥ 2 components, got {}", p.components)));
        }
        if kind == ShiftKind::LabelMismatch && p.components < 4 {
            return Err(Error::Param("label mismatch needs at least 4 components".into()));
        }
        if p.dim == 0 {
            return Err(Error::Param("mixture dimension must be positive".into()));
        }
        if !(p.spread > 0.0) || !p.separation.is_finite() || !p.shift.is_finite() {
            return Err(Error::Param("mixture spread must be positive and scales finite".into()));
        }
    } else if !(p.noise >= 0.0) || !p.angle.is_finite() {
        return Err(Error::Param("moons noise must be ≥ 0 and the angle finite".into()));
    }
    for (name, n) in [("n_source", p.n_source), ("n_target", p.n_target), ("n_test", p.n_test)] {
        if n < 10 * classes {
            return Err(Error::Param(format!(
                "{name} = {n} gives fewer than 10 points per class ({classes} classes)"
            )));
        }
    }
    Ok(())
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Balanced class assignment, shuffled.
fn balanced_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn moons(n: usize, noise: f64, angle: f64, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let labels = balanced_labels(n, 2, rng);
    let (c, s) = (angle.cos(), angle.sin());
    let mut data = Vec::with_capacity(2 * n);
    for &y in &labels {
        let t: f64 = rng.random_range(0.0..PI);
        let (mut x0, mut x1) = if y == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x0 += noise * gaussian(rng) - 0.5;
        x1 += noise * gaussian(rng) - 0.25;
        data.push(c * x0 - s * x1);
        data.push(s * x0 + c * x1);
    }
    (Matrix::from_vec(n, 2, data).expect("sized above"), labels)
}

fn moons_pair(p: &ShiftParams, seed: u64) -> Result<DomainPair> {
    let (xs, ys) = moons(p.n_source, p.noise, 0.0, &mut rng::child(seed, 0));
    let (xt, yt) = moons(p.n_target, p.noise, p.angle, &mut rng::child(seed, 1));
    let (xe, ye) = moons(p.n_test, p.noise, p.angle, &mut rng::child(seed, 2));
    let source = Dataset::new("moons-source", DomainTag::Source, xs, Some(ys), 2)?;
    let pool = Dataset::new("moons-target-pool", DomainTag::Target, xt, Some(yt), 2)?;
    let test = Dataset::new("moons-target-test", DomainTag::Target, xe, Some(ye), 2)?;
    DomainPair::new(
        source,
        pool,
        test,
        format!("two moons, target rotated by {:.6} rad, noise {}", p.angle, p.noise),
    )
}

struct Mixture {
    means: Vec<Vec<f64>>,
    spread: f64,
}

impl Mixture {
    fn draw(&self, n: usize, classes: &[usize], offset: &[f64], rng: &mut Rng) -> (Matrix, Vec<usize>) {
        let local = balanced_labels(n, classes.len(), rng);
        let d = offset.len();
        let mut data = Vec::with_capacity(n * d);
        for &y in &local {
            let mean = &self.means[classes[y]];
            for j in 0..d {
                data.push(mean[j] + offset[j] + self.spread * gaussian(rng));
            }
        }
        (Matrix::from_vec(n, d, data).expect("sized above"), local)
    }
}

fn mixture_pair(p: &ShiftParams, seed: u64, mismatch: bool) -> Result<DomainPair> {
    let d = p.dim;
    let mut mrng = rng::child(seed, 3);
    let means: Vec<Vec<f64>> = (0..p.components)
        .map(|_| (0..d).map(|_| p.separation * gaussian(&mut mrng)).collect())
        .collect();
    let mix = Mixture {
        means,
        spread: p.spread,
    };
    let mut direction: Vec<f64> = (0..d).map(|_| gaussian(&mut mrng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in &mut direction {
        *v *= p.shift / norm;
    }
    let zero = vec![0.0; d];

    let (source_classes, target_classes): (Vec<usize>, Vec<usize>) = if mismatch {
        let half = p.components / 2;
        ((0..half).collect(), (half..2 * half).collect())
    } else {
        ((0..p.components).collect(), (0..p.components).collect())
    };

    let (mut xs, ys) = mix.draw(p.n_source, &source_classes, &zero, &mut rng::child(seed, 0));
    let (mut xt, yt) = mix.draw(p.n_target, &target_classes, &direction, &mut rng::child(seed, 1));
    let (mut xe, ye) = mix.draw(p.n_test, &target_classes, &direction, &mut rng::child(seed, 2));

    let (mu, sd) = column_stats(&xs);
    for m in [&mut xs, &mut xt, &mut xe] {
        standardize(m, &mu, &sd);
    }

    let prefix = if mismatch { "mismatch" } else { "gaussmix" };
    let cs = source_classes.len();
    let ct = target_classes.len();
    let source = Dataset::new(format!("{prefix}-source"), DomainTag::Source, xs, Some(ys), cs)?;
    let pool = Dataset::new(format!("{prefix}-target-pool"), DomainTag::Target, xt, Some(yt), ct)?;
    let test = Dataset::new(format!("{prefix}-target-test"), DomainTag::Target, xe, Some(ye), ct)?;
    let descriptor = if mismatch {
        format!(
            "gaussian mixture, source classes {source_classes:?}, target classes {target_classes:?} remapped to 0..{ct}, shift {}",
            p.shift
        )
    } else {
        format!("gaussian mixture with {} components, target shifted by {}", p.components, p.shift)
    };
    Ok(DomainPair::new(source, pool, test, descriptor)?.with_class_maps(source_classes, target_classes))
}

pub(crate) fn column_stats(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let mu: Vec<f64> = m.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        for ((v, x), u) in var.iter_mut().zip(r).zip(&mu) {
            *v += (x - u) * (x - u);
        }
    }
    let sd = var.into_iter().map(|v| (v / n).sqrt().max(1e-12)).collect();
    (mu, sd)
}

fn standardize(m: &mut Matrix, mu: &[f64], sd: &[f64]) {
    for r in 0..m.rows() {
        for ((x, u), s) in m.row_mut(r).iter_mut().zip(mu).zip(sd) {
            *x = (*x - u) / s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::OracleKey;

    fn moons_params(angle: f64) -> ShiftParams {
        ShiftParams {
            angle,
            n_source: 500,
            n_target: 500,
            n_test: 100,
            ..ShiftParams::default()
        }
    }

    /// Welch z statistic per coordinate for two samples.
    fn mean_diff_z(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let (ma, sa) = column_stats(a);
        let (mb, sb) = column_stats(b);
        (0..a.cols())
            .map(|j| {
                let se = (sa[j].powi(2) / a.rows() as f64 + sb[j].powi(2) / b.rows() as f64).sqrt();
                (ma[j] - mb[j]) / se
            })
            .collect()
    }

    // two-sided α = 0.01
    const Z_CRIT: f64 = 2.5758;
    // 40 tests at α = 0.01: P(more than 2 rejections) < 0.01
    const MAX_REJECTIONS: usize = 2;

    #[test]
    fn zero_rotation_is_indistinguishable() {
        let mut rejections = 0;
        for seed in 0..20 {
            let pair = gen_shift(ShiftKind::TwoMoonsRotate, &moons_params(0.0), seed).unwrap();
            let z = mean_diff_z(pair.source.features(), pair.target_pool().features());
            rejections += z.iter().filter(|z| z.abs() >= Z_CRIT).count();
        }
        assert!(rejections <= MAX_REJECTIONS, "{rejections} rejections");
    }

    #[test]
    fn half_turn_maps_back_onto_source() {
        let mut rejections = 0;
        for seed in 0..20 {
            let pair = gen_shift(ShiftKind::TwoMoonsRotate, &moons_params(PI), seed).unwrap();
            let unrotated = pair.target_pool().features().map(|v| -v);
            let z = mean_diff_z(pair.source.features(), &unrotated);
            rejections += z.iter().filter(|z| z.abs() >= Z_CRIT).count();
        }
        assert!(rejections <= MAX_REJECTIONS, "{rejections} rejections");
    }

    #[test]
    fn half_turn_target_is_negated_source_stream() {
        // Same RNG stream for source and target ⇒ points match exactly.
        let (a, _) = moons(50, 0.1, 0.0, &mut rng::seeded(5));
        let (b, _) = moons(50, 0.1, PI, &mut rng::seeded(5));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x + y).abs() < 1e-12);
        }
    }

    #[test]
    fn label_mismatch_is_disjoint() {
        let p = ShiftParams {
            components: 10,
            n_source: 200,
            n_target: 200,
            n_test: 200,
            ..ShiftParams::default()
        };
        let pair = gen_shift(ShiftKind::LabelMismatch, &p, 3).unwrap();
        assert_eq!(pair.source_classes, vec![0, 1, 2, 3, 4]);
        assert_eq!(pair.target_classes, vec![5, 6, 7, 8, 9]);
        let key = OracleKey::mint();
        let src: std::collections::BTreeSet<usize> =
            pair.source.labels().unwrap().iter().map(|&y| pair.source_classes[y]).collect();
        let tgt: std::collections::BTreeSet<usize> = pair
            .target_pool()
            .oracle_labels(&key)
            .unwrap()
            .iter()
            .map(|&y| pair.target_classes[y])
            .collect();
        assert!(src.is_disjoint(&tgt));
        assert_eq!(tgt.len(), 5);
    }

    #[test]
    fn deterministic_per_seed() {
        let p = ShiftParams::default();
        for kind in [ShiftKind::TwoMoonsRotate, ShiftKind::GaussMixShift, ShiftKind::LabelMismatch] {
            let a = gen_shift(kind, &p, 9).unwrap();
            let b = gen_shift(kind, &p, 9).unwrap();
            assert_eq!(a, b);
            let c = gen_shift(kind, &p, 10).unwrap();
            assert_ne!(a.source.features(), c.source.features());
        }
    }

    #[test]
    fn invalid_params() {
        let p = ShiftParams {
            components: 1,
            ..ShiftParams::default()
        };
        assert!(matches!(gen_shift(ShiftKind::GaussMixShift, &p, 0), Err(Error::Param(_))));
        let p = ShiftParams {
            n_source: 5,
            ..ShiftParams::default()
        };
        assert!(matches!(gen_shift(ShiftKind::TwoMoonsRotate, &p, 0), Err(Error::Param(_))));
    }
}
