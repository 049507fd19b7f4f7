//! Experiment configuration and the in-memory stages of a full run:
//! data → utility sampling → joint training → selection → evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::d2ulo::{self, JointConfig, JointInputs, JointModels, JointReport};
use crate::data::{self, container, Dataset, DomainPair, DomainTag, IndexSet, ShiftKind, ShiftParams};
use crate::error::{Error, Result};
use crate::eval::{self, CorrelationReport, EvalCell, FinetuneConfig};
use crate::hash;
use crate::proxy::{ProxyHyper, ProxyKind};
use crate::rng;
use crate::select::{self, SelectionResult, Strategy};
use crate::usample::{self, SampleConfig, UtilityDataset};

/// IDX files for a real-data pair. The target file is split into pool and
/// test halves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub source_images: PathBuf,
    pub source_labels: PathBuf,
    pub target_images: PathBuf,
    pub target_labels: PathBuf,
    #[serde(default = "half")]
    pub target_pool_fraction: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceNoise {
    /// Only the target pool is corrupted.
    None,
    /// The labeled utility pool is corrupted too.
    UtilityPool,
    /// Every source row except the utility validation set, so adaptation
    /// sees noise on both sides.
    AllButValidation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: ShiftKind,
    pub params: ShiftParams,
    /// When set, replaces the synthetic generator.
    pub idx: Option<IdxPaths>,
    /// Fraction of the target pool replaced by white noise.
    pub noise_fraction: f64,
    pub noise_sigma: f64,
    /// Which source rows receive the same fraction of noise.
    pub source_noise: SourceNoise,
    /// Size of the labeled source subset that utility records index into.
    pub utility_pool_size: usize,
    /// Size of the labeled source subset that scores the proxies.
    pub utility_val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: ShiftKind::TwoMoonsRotate,
            params: ShiftParams::default(),
            idx: None,
            noise_fraction: 0.0,
            noise_sigma: data::DEFAULT_NOISE_SIGMA,
            source_noise: SourceNoise::AllButValidation,
            utility_pool_size: 300,
            utility_val_size: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub strategies: Vec<Strategy>,
    pub budgets: Vec<usize>,
    pub epsilon: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            strategies: Strategy::ALL.to_vec(),
            budgets: vec![25, 50, 100],
            epsilon: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Proxy kinds used for train-from-scratch evaluation.
    pub scratch: Vec<ProxyKind>,
    pub hyper: ProxyHyper,
    pub finetune: bool,
    pub finetune_cfg: FinetuneConfig,
    /// Random held-out subsets for the estimated-vs-true utility check;
    /// 0 disables it.
    pub correlation_subsets: usize,
    pub correlation_sample: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: vec![0],
            scratch: vec![ProxyKind::Logistic],
            hyper: ProxyHyper::default(),
            finetune: true,
            finetune_cfg: FinetuneConfig::default(),
            correlation_subsets: 0,
            correlation_sample: 300,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub usample: SampleConfig,
    pub joint: JointConfig,
    pub select: SelectConfig,
    pub eval: EvalConfig,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Param(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Param(format!("config: {e}")))
    }

    /// Cross-field checks that must pass before any compute.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.noise_fraction) {
            return Err(Error::Param(format!("noise_fraction {} outside [0, 1]", d.noise_fraction)));
        }
        if d.utility_pool_size < 2 || d.utility_val_size == 0 {
            return Err(Error::Param("utility pool needs ≥ 2 points and a non-empty validation set".into()));
        }
        if d.idx.is_none() {
            let need = d.utility_pool_size + d.utility_val_size;
            if need > d.params.n_source {
                return Err(Error::Param(format!(
                    "utility pool + validation ({need}) exceed the {} source points",
                    d.params.n_source
                )));
            }
            if let Some(&m) = self.select.budgets.iter().find(|&&m| m > d.params.n_target) {
                return Err(Error::Param(format!("budget {m} exceeds the target pool size {}", d.params.n_target)));
            }
            let sample = self.eval.correlation_sample;
            if self.eval.correlation_subsets > 0 && (sample == 0 || sample >= d.params.n_test) {
                return Err(Error::Param(format!(
                    "correlation_sample {sample} must be in 1..{} (the target test size)",
                    d.params.n_test
                )));
            }
        }
        if self.select.budgets.is_empty() || self.select.budgets.contains(&0) {
            return Err(Error::Param("budgets must be non-empty and ≥ 1".into()));
        }
        if !(self.select.epsilon > 0.0 && self.select.epsilon < 1.0) {
            return Err(Error::Param(format!("epsilon {} outside (0, 1)", self.select.epsilon)));
        }
        if self.select.strategies.is_empty() {
            return Err(Error::Param("no strategies requested".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Param("at least one seed is required".into()));
        }
        if self.usample.n_records < 2 {
            return Err(Error::Param("at least 2 utility records are required".into()));
        }
        if self.usample.min_size == 0 {
            return Err(Error::Param("utility subsets must be non-empty".into()));
        }
        self.usample.hyper.validate()?;
        self.eval.hyper.validate()?;
        self.joint.validate()
    }

    /// Hash of the whole config, embedded in every artifact. The output
    /// directory is not part of it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        section_hash(&c)
    }

    /// Ready-made small settings: moons, a few hundred records, 1 seed.
    pub fn smoke() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.data.params.n_source = 600;
        cfg.data.params.n_target = 300;
        cfg.data.params.n_test = 300;
        cfg.data.utility_pool_size = 150;
        cfg.data.utility_val_size = 150;
        cfg.usample.n_records = 200;
        cfg.usample.min_size = 5;
        cfg.usample.hyper.max_epochs = 100;
        cfg.joint = desk_joint();
        cfg.joint.epochs = 5;
        cfg.select.budgets = vec![20];
        cfg.eval.finetune_cfg.epochs = 5;
        cfg
    }
}

/// Joint-training settings sized for a laptop CPU.
pub fn desk_joint() -> JointConfig {
    let mut j = JointConfig {
        k: 5,
        epochs: 30,
        pretrain_steps: 500,
        deepsets_inner_epochs: 5,
        ..JointConfig::default()
    };
    j.adapt.feature_hidden = vec![32, 32];
    j.adapt.embed_dim = 16;
    j.adapt.classifier_hidden = vec![16];
    j.adapt.discriminator_hidden = vec![32, 32];
    j.adapt.lr = 1e-3;
    j.adapt.batch_size = 64;
    j.deepsets.hidden = 64;
    j.deepsets.set_dim = 64;
    j.deepsets.lr = 1e-3;
    j.deepsets.patience = 0;
    j
}

/// Stable short hash of any serializable value.
pub fn section_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config sections serialize");
    hash::short_hash(&json)
}

/// The data a seed works on.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub pair: DomainPair,
    /// Target-pool rows replaced by noise.
    pub corrupted: IndexSet,
    pub utility_pool: Dataset,
    pub utility_val: Dataset,
    pub utility_corrupted: IndexSet,
}

fn load_pair(paths: &IdxPaths, seed: u64) -> Result<DomainPair> {
    let source = data::load_idx(&paths.source_images, Some(&paths.source_labels))?.renamed("source");
    let target = data::load_idx(&paths.target_images, Some(&paths.target_labels))?.with_domain(DomainTag::Target);
    let f = paths.target_pool_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Param(format!("target_pool_fraction {f} outside (0, 1)")));
    }
    let a = (f * 1000.0).round() as usize;
    let (pool_idx, test_idx) = data::split_indices(target.n(), (a.max(1), (1000 - a).max(1)), seed);
    DomainPair::new(
        source,
        target.subset(&pool_idx).renamed("target_pool"),
        target.subset(&test_idx).renamed("target_test"),
        "idx files",
    )
}

/// Builds the pair (generated or loaded), applies noise, and carves the
/// labeled utility pool and its validation set out of the source.
pub fn prepare(cfg: &DataConfig, seed: u64) -> Result<Prepared> {
    let pair = match &cfg.idx {
        Some(p) => load_pair(p, rng::derive(seed, 10))?,
        None => data::gen_shift(cfg.kind, &cfg.params, rng::derive(seed, 10))?,
    };
    let (pair, corrupted) = if cfg.noise_fraction > 0.0 {
        let (pool, idx) =
            data::corrupt_white_noise(pair.target_pool(), cfg.noise_fraction, cfg.noise_sigma, rng::derive(seed, 11))?;
        (pair.with_target_pool(pool)?, idx)
    } else {
        let n = pair.target_pool().n();
        (pair, IndexSet::empty(n))
    };
    let n_src = pair.source.n();
    let need = cfg.utility_pool_size + cfg.utility_val_size;
    if need > n_src {
        return Err(Error::Size(format!("utility pool + validation ({need}) exceed {n_src} source points")));
    }
    let mut order: Vec<usize> = (0..n_src).collect();
    order.shuffle(&mut rng::child(seed, 12));
    let mut val_idx = order[..cfg.utility_val_size].to_vec();
    let mut pool_idx = order[cfg.utility_val_size..need].to_vec();
    val_idx.sort_unstable();
    pool_idx.sort_unstable();
    let noisy = cfg.noise_fraction > 0.0;
    let mut source_corrupted = vec![false; n_src];
    let pair = if noisy && cfg.source_noise == SourceNoise::AllButValidation {
        let mut rest = order[cfg.utility_val_size..].to_vec();
        rest.sort_unstable();
        let (noised, hit) =
            data::corrupt_white_noise(&pair.source.subset(&rest), cfg.noise_fraction, cfg.noise_sigma, rng::derive(seed, 13))?;
        let mut features = pair.source.features().clone();
        for (k, &i) in rest.iter().enumerate() {
            features.row_mut(i).copy_from_slice(noised.features().row(k));
        }
        for &k in hit.indices() {
            source_corrupted[rest[k]] = true;
        }
        let source = pair.source.with_features(features)?;
        pair.with_source(source)?
    } else {
        pair
    };
    let utility_pool = pair.source.subset(&pool_idx).renamed("utility_pool");
    let utility_val = pair.source.subset(&val_idx).renamed("utility_val");
    let (utility_pool, utility_corrupted) = if noisy && cfg.source_noise == SourceNoise::UtilityPool {
        data::corrupt_white_noise(&utility_pool, cfg.noise_fraction, cfg.noise_sigma, rng::derive(seed, 13))?
    } else {
        let hit: Vec<usize> = (0..pool_idx.len()).filter(|&k| source_corrupted[pool_idx[k]]).collect();
        let n = utility_pool.n();
        (utility_pool, IndexSet::new(hit, n)?)
    };
    Ok(Prepared {
        pair,
        corrupted,
        utility_pool,
        utility_val,
        utility_corrupted,
    })
}

#[derive(Serialize, Deserialize)]
struct CorruptedRows {
    target: Vec<usize>,
    target_n: usize,
    utility_pool: Vec<usize>,
    utility_pool_n: usize,
}

impl Prepared {
    /// Writes the pair, the utility pool/validation sets and the corrupted
    /// row lists into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        container::write_pair(&self.pair, &dir.join("pair"))?;
        container::write_dataset(&self.utility_pool, &dir.join("utility_pool.bin"))?;
        container::write_dataset(&self.utility_val, &dir.join("utility_val.bin"))?;
        let rows = CorruptedRows {
            target: self.corrupted.indices().to_vec(),
            target_n: self.corrupted.universe_size(),
            utility_pool: self.utility_corrupted.indices().to_vec(),
            utility_pool_n: self.utility_corrupted.universe_size(),
        };
        let p = dir.join("corrupted.json");
        std::fs::write(&p, serde_json::to_string_pretty(&rows)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("corrupted.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let rows: CorruptedRows = serde_json::from_str(&text)?;
        Ok(Prepared {
            pair: container::read_pair(&dir.join("pair"))?,
            corrupted: IndexSet::new(rows.target, rows.target_n)?,
            utility_pool: container::read_dataset(&dir.join("utility_pool.bin"))?,
            utility_val: container::read_dataset(&dir.join("utility_val.bin"))?,
            utility_corrupted: IndexSet::new(rows.utility_pool, rows.utility_pool_n)?,
        })
    }
}

pub fn sample_stage(prep: &Prepared, cfg: &SampleConfig, seed: u64) -> Result<UtilityDataset> {
    usample::sample_utility(&prep.utility_pool, &prep.utility_val, cfg, rng::derive(seed, 20))
}

pub fn train_stage(prep: &Prepared, sds: &UtilityDataset, cfg: &JointConfig, seed: u64) -> Result<(JointModels, JointReport)> {
    let labels = prep.pair.source.labels()?;
    let inputs = JointInputs {
        source_x: prep.pair.source.features(),
        source_y: labels,
        target_x: prep.pair.target_pool().features(),
        utility_pool_x: prep.utility_pool.features(),
        utilities: sds,
        n_classes: prep.pair.source.n_classes(),
    };
    d2ulo::train_joint(&inputs, cfg, rng::derive(seed, 30)).map_err(|f| {
        log::error!("{f}");
        f.error
    })
}

/// The target-labeled upper bound: utilities are sampled on the revealed
/// target pool (proxies scored on the target test set) and the utility
/// model is trained without adaptation.
pub fn oracle_stage(prep: &Prepared, scfg: &SampleConfig, jcfg: &JointConfig, seed: u64) -> Result<JointModels> {
    let pool = eval::reveal_target_pool(&prep.pair);
    let val = &prep.pair.target_test;
    let sds = usample::sample_utility(&pool, val, scfg, rng::derive(seed, 40))?;
    let (models, _) = d2ulo::train_optimal_oracle(&pool, &sds, jcfg, rng::derive(seed, 41)).map_err(|f| f.error)?;
    Ok(models)
}

pub fn selection_seed(seed: u64, strategy: Strategy, budget: usize) -> u64 {
    let k = Strategy::ALL.iter().position(|&s| s == strategy).unwrap_or(0) as u64;
    rng::derive(rng::derive(seed, 50 + k), budget as u64)
}

pub fn select_stage(
    prep: &Prepared,
    models: &JointModels,
    oracle: Option<&JointModels>,
    strategy: Strategy,
    budget: usize,
    eps: f64,
    seed: u64,
) -> Result<SelectionResult> {
    let x = prep.pair.target_pool().features();
    let s = selection_seed(seed, strategy, budget);
    match strategy {
        Strategy::Random => select::select_random(x.rows(), budget, s),
        Strategy::D2ulo => select::select_deepsets(models, x, budget, eps, s, Strategy::D2ulo),
        Strategy::Optimal => {
            let o = oracle.ok_or_else(|| Error::State("the optimal strategy needs oracle models".into()))?;
            select::select_deepsets(o, x, budget, eps, s, Strategy::Optimal)
        }
        Strategy::Badge => select::select_badge(&models.adapt, x, budget, s),
        Strategy::Aada => select::select_aada(&models.adapt, x, budget, s),
        Strategy::Fass => select::select_fass(&models.adapt, x, budget, s),
    }
}

pub fn scratch_name(kind: ProxyKind) -> String {
    format!("scratch_{}", kind.name())
}

pub const FINETUNE: &str = "finetune";

pub fn eval_stage(
    prep: &Prepared,
    models: &JointModels,
    sel: &SelectionResult,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<EvalCell>> {
    let s = rng::derive(selection_seed(seed, sel.strategy, sel.budget), 1);
    let mut cells = Vec::new();
    let cell = |evaluator: String, accuracy: f64| EvalCell {
        strategy: sel.strategy.name().to_string(),
        evaluator,
        budget: sel.budget,
        seed,
        accuracy,
    };
    for &kind in &cfg.scratch {
        let acc = eval::train_from_scratch(&sel.indices, &prep.pair, kind, &cfg.hyper, s)?;
        cells.push(cell(scratch_name(kind), acc));
    }
    if cfg.finetune {
        let r = eval::finetune_eval(&sel.indices, &prep.pair, &models.adapt, &cfg.finetune_cfg, s)?;
        cells.push(cell(FINETUNE.to_string(), r.accuracy));
    }
    Ok(cells)
}

pub fn correlation_stage(prep: &Prepared, models: &JointModels, cfg: &ExperimentConfig, seed: u64) -> Result<CorrelationReport> {
    let scfg = SampleConfig {
        n_records: cfg.eval.correlation_subsets,
        ..cfg.usample.clone()
    };
    let est = |x: &crate::nnkit::Matrix| models.predict_set(x);
    eval::utility_correlation(&est, &prep.pair, cfg.eval.correlation_sample, scfg, rng::derive(seed, 60))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePick {
    pub strategy: Strategy,
    pub budget: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub utilities: UtilityDataset,
    pub models: JointModels,
    pub joint_report: JointReport,
    pub selections: Vec<SelectionResult>,
    pub cells: Vec<EvalCell>,
    pub noise_picks: Vec<NoisePick>,
    pub correlation: Option<CorrelationReport>,
}

/// Every stage for one seed, in memory. Selection and evaluation cells run
/// in parallel; the result does not depend on the thread count.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let prep = prepare(&cfg.data, seed)?;
    let sds = sample_stage(&prep, &cfg.usample, seed)?;
    let (models, joint_report) = train_stage(&prep, &sds, &cfg.joint, seed)?;
    let oracle = if cfg.select.strategies.contains(&Strategy::Optimal) {
        Some(oracle_stage(&prep, &cfg.usample, &cfg.joint, seed)?)
    } else {
        None
    };
    let jobs: Vec<(Strategy, usize)> = cfg
        .select
        .strategies
        .iter()
        .flat_map(|&s| cfg.select.budgets.iter().map(move |&b| (s, b)))
        .collect();
    let results: Vec<(SelectionResult, Vec<EvalCell>)> = jobs
        .par_iter()
        .map(|&(s, b)| {
            let sel = select_stage(&prep, &models, oracle.as_ref(), s, b, cfg.select.epsilon, seed)?;
            let cells = eval_stage(&prep, &models, &sel, &cfg.eval, seed)?;
            Ok((sel, cells))
        })
        .collect::<Result<_>>()?;
    let correlation = if cfg.eval.correlation_subsets > 0 {
        Some(correlation_stage(&prep, &models, cfg, seed)?)
    } else {
        None
    };
    let mut selections = Vec::new();
    let mut cells = Vec::new();
    let mut noise_picks = Vec::new();
    for (sel, c) in results {
        noise_picks.push(NoisePick {
            strategy: sel.strategy,
            budget: sel.budget,
            fraction: eval::noise_pick_fraction(&sel.indices, &prep.corrupted),
        });
        selections.push(sel);
        cells.extend(c);
    }
    Ok(SeedOutcome {
        seed,
        utilities: sds,
        models,
        joint_report,
        selections,
        cells,
        noise_picks,
        correlation,
    })
}
