//! Weighted-coverage instances: a monotone submodular oracle with an
//! independent exact-greedy reference.

use rand::Rng as _;
use zeroal::select::{greedy, GainOracle};
use zeroal::Result;

#[derive(Clone, Debug)]
pub struct Coverage {
    pub sets: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
    covered: Vec<bool>,
}

impl Coverage {
    pub fn random(n: usize, universe: usize, seed: u64) -> Self {
        let mut r = zeroal::rng::seeded(seed);
        let weights = (0..universe).map(|_| r.random_range(0.1..2.0)).collect();
        let sets = (0..n)
            .map(|_| {
                let k = r.random_range(1..universe / 4);
                rand::seq::index::sample(&mut r, universe, k).into_vec()
            })
            .collect();
        Coverage {
            sets,
            weights,
            covered: vec![false; universe],
        }
    }

    pub fn value(&self, chosen: &[usize]) -> f64 {
        let mut cov = vec![false; self.weights.len()];
        for &s in chosen {
            for &e in &self.sets[s] {
                cov[e] = true;
            }
        }
        cov.iter().zip(&self.weights).filter(|(c, _)| **c).map(|(_, w)| w).sum()
    }

    fn gain(&self, s: usize) -> f64 {
        self.sets[s].iter().filter(|&&e| !self.covered[e]).map(|&e| self.weights[e]).sum()
    }

    /// Textbook greedy scanning every remaining set, ties to the lowest index.
    pub fn exact_greedy(&self, m: usize) -> Vec<usize> {
        let mut chosen: Vec<usize> = Vec::new();
        for _ in 0..m {
            let mut best: Option<(f64, usize)> = None;
            for s in 0..self.sets.len() {
                if chosen.contains(&s) {
                    continue;
                }
                let mut with = chosen.clone();
                with.push(s);
                let g = self.value(&with) - self.value(&chosen);
                if best.is_none_or(|(bg, _)| g > bg) {
                    best = Some((g, s));
                }
            }
            chosen.push(best.unwrap().1);
        }
        chosen
    }

    /// Best value over all `m`-subsets.
    pub fn brute_force_opt(&self, m: usize) -> f64 {
        fn rec(c: &Coverage, start: usize, m: usize, cur: &mut Vec<usize>, best: &mut f64) {
            if cur.len() == m {
                *best = best.max(c.value(cur));
                return;
            }
            for s in start..c.sets.len() {
                cur.push(s);
                rec(c, s + 1, m, cur, best);
                cur.pop();
            }
        }
        let mut best = 0.0;
        rec(self, 0, m, &mut Vec::new(), &mut best);
        best
    }
}

impl GainOracle for Coverage {
    fn n_candidates(&self) -> usize {
        self.sets.len()
    }

    fn gains(&self, candidates: &[usize]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|&s| self.gain(s)).collect())
    }

    fn commit(&mut self, candidate: usize) {
        for &e in &self.sets[candidate] {
            self.covered[e] = true;
        }
    }
}

pub struct Outcome {
    pub seeds: usize,
    pub within_bound: usize,
    pub worst_ratio: f64,
}

/// Stochastic greedy against exact greedy on `seeds` instances.
pub fn run(seeds: u64, n: usize, m: usize, eps: f64) -> Outcome {
    let bound = 1.0 - (-1.0f64).exp() - eps;
    let mut within = 0;
    let mut worst = f64::INFINITY;
    for seed in 0..seeds {
        let inst = Coverage::random(n, 4 * n, seed);
        let reference = inst.value(&inst.exact_greedy(m));
        let mut oracle = inst.clone();
        let (picked, _) = greedy(&mut oracle, m, Some(eps), 1000 + seed).unwrap();
        let ratio = inst.value(&picked) / reference;
        worst = worst.min(ratio);
        if ratio >= bound {
            within += 1;
        }
    }
    Outcome {
        seeds: seeds as usize,
        within_bound: within,
        worst_ratio: worst,
    }
}
