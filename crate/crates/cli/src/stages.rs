//! On-disk layout and the content-hashed stages of a run.
//!
//! ```text
//! <out>/manifest.json
//! <out>/config.toml
//! <out>/seed-<s>/data/          pair, utility pool, corrupted rows
//! <out>/seed-<s>/utility/       utility.jsonl
//! <out>/seed-<s>/models/        extractor, heads, DeepSets
//! <out>/seed-<s>/oracle/        target-labeled DeepSets (optimal strategy)
//! <out>/seed-<s>/selections/    <strategy>-<budget>.json
//! <out>/seed-<s>/eval/          <strategy>.json / .csv
//! ```
//! Each stage directory holds a `stage.json` whose hash covers the config
//! sections and upstream stages it depends on.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use zeroal::d2ulo::JointModels;
use zeroal::eval::{self, EvalReport};
use zeroal::pipeline::{self, section_hash, ExperimentConfig, Prepared};
use zeroal::select::{SelectionResult, Strategy};
use zeroal::usample::UtilityDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: String,
    pub stage_hash: String,
    pub config_hash: String,
    pub seed: u64,
}

pub struct Run<'a> {
    pub cfg: &'a ExperimentConfig,
    pub root: PathBuf,
    pub seed: u64,
    /// Skip stages whose recorded hash matches.
    pub resume: bool,
}

fn read_meta(dir: &Path) -> Option<StageMeta> {
    let text = fs::read_to_string(dir.join("stage.json")).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

impl Run<'_> {
    pub fn seed_dir(&self) -> PathBuf {
        self.root.join(format!("seed-{}", self.seed))
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.seed_dir().join(stage)
    }

    pub fn data_hash(&self) -> String {
        section_hash(&(&self.cfg.data, self.seed))
    }

    pub fn utility_hash(&self) -> String {
        section_hash(&(self.data_hash(), &self.cfg.usample))
    }

    pub fn train_hash(&self) -> String {
        section_hash(&(self.utility_hash(), &self.cfg.joint))
    }

    pub fn oracle_hash(&self) -> String {
        section_hash(&(self.data_hash(), &self.cfg.usample, &self.cfg.joint))
    }

    pub fn select_hash(&self, strategy: Strategy, budget: usize) -> String {
        let upstream = match strategy {
            Strategy::Optimal => self.oracle_hash(),
            Strategy::Random => self.data_hash(),
            _ => self.train_hash(),
        };
        section_hash(&(upstream, strategy, budget, self.cfg.select.epsilon))
    }

    pub fn eval_hash(&self, strategy: Strategy) -> String {
        let sel: Vec<String> = self.cfg.select.budgets.iter().map(|&b| self.select_hash(strategy, b)).collect();
        section_hash(&(sel, self.train_hash(), &self.cfg.eval))
    }

    fn fresh(&self, dir: &Path, hash: &str) -> bool {
        self.resume && read_meta(dir).is_some_and(|m| m.stage_hash == hash)
    }

    fn begin(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.dir(stage);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let _ = fs::remove_file(dir.join("stage.json"));
        Ok(dir)
    }

    fn finish(&self, dir: &Path, stage: &str, hash: String) -> Result<()> {
        let meta = StageMeta {
            stage: stage.to_string(),
            stage_hash: hash,
            config_hash: self.cfg.hash(),
            seed: self.seed,
        };
        write_json(&dir.join("stage.json"), &meta)
    }

    /// Upstream artifact check: present and produced by the current config.
    fn require(&self, stage: &str, hash: &str, producer: &str) -> Result<PathBuf> {
        let dir = self.dir(stage);
        match read_meta(&dir) {
            None => bail!(
                "missing {stage} artifacts in {}; run `zeroal {producer}` first",
                dir.display()
            ),
            Some(m) if m.stage_hash != hash => bail!(
                "{stage} artifacts in {} were produced by a different config; rerun `zeroal {producer}`",
                dir.display()
            ),
            Some(_) => Ok(dir),
        }
    }

    pub fn gen_data(&self) -> Result<bool> {
        let hash = self.data_hash();
        if self.fresh(&self.dir("data"), &hash) {
            return Ok(false);
        }
        let dir = self.begin("data")?;
        let prep = pipeline::prepare(&self.cfg.data, self.seed)?;
        prep.save(&dir)?;
        self.finish(&dir, "data", hash)?;
        Ok(true)
    }

    pub fn load_data(&self) -> Result<Prepared> {
        let dir = self.require("data", &self.data_hash(), "gen-data")?;
        Ok(Prepared::load(&dir)?)
    }

    pub fn sample_utility(&self) -> Result<bool> {
        let hash = self.utility_hash();
        if self.fresh(&self.dir("utility"), &hash) {
            return Ok(false);
        }
        let prep = self.load_data()?;
        let dir = self.begin("utility")?;
        let mut sds = pipeline::sample_stage(&prep, &self.cfg.usample, self.seed)?;
        sds.header.config_hash = Some(self.cfg.hash());
        sds.write(&dir.join("utility.jsonl"))?;
        self.finish(&dir, "utility", hash)?;
        Ok(true)
    }

    pub fn load_utility(&self) -> Result<UtilityDataset> {
        let dir = self.require("utility", &self.utility_hash(), "sample-utility")?;
        Ok(UtilityDataset::read(&dir.join("utility.jsonl"))?)
    }

    pub fn train(&self) -> Result<bool> {
        let hash = self.train_hash();
        if self.fresh(&self.dir("models"), &hash) {
            return Ok(false);
        }
        let prep = self.load_data()?;
        let sds = self.load_utility()?;
        let dir = self.begin("models")?;
        let (models, report) = pipeline::train_stage(&prep, &sds, &self.cfg.joint, self.seed)?;
        models.save(&dir)?;
        write_json(&dir.join("training_log.json"), &report)?;
        self.finish(&dir, "models", hash)?;
        Ok(true)
    }

    pub fn load_models(&self) -> Result<JointModels> {
        let dir = self.require("models", &self.train_hash(), "train")?;
        Ok(JointModels::load(&dir)?)
    }

    pub fn train_oracle(&self) -> Result<bool> {
        let hash = self.oracle_hash();
        if self.fresh(&self.dir("oracle"), &hash) {
            return Ok(false);
        }
        let prep = self.load_data()?;
        let dir = self.begin("oracle")?;
        let models = pipeline::oracle_stage(&prep, &self.cfg.usample, &self.cfg.joint, self.seed)?;
        models.save(&dir)?;
        self.finish(&dir, "oracle", hash)?;
        Ok(true)
    }

    fn selection_path(&self, strategy: Strategy, budget: usize) -> PathBuf {
        self.dir("selections").join(format!("{strategy}-{budget}.json"))
    }

    pub fn select(&self, strategy: Strategy, budget: usize) -> Result<bool> {
        let hash = self.select_hash(strategy, budget);
        let path = self.selection_path(strategy, budget);
        let meta_dir = self.dir("selections").join(format!(".{strategy}-{budget}"));
        if self.fresh(&meta_dir, &hash) && path.exists() {
            return Ok(false);
        }
        let prep = self.load_data()?;
        let models = match strategy {
            Strategy::Random => None,
            _ => Some(self.load_models()?),
        };
        let oracle = match strategy {
            Strategy::Optimal => {
                let dir = self.require("oracle", &self.oracle_hash(), "train --oracle")?;
                Some(JointModels::load(&dir)?)
            }
            _ => None,
        };
        let x = prep.pair.target_pool().features();
        if budget == 0 || budget > x.rows() {
            bail!("budget {budget} must be in 1..={}", x.rows());
        }
        let mut sel = match &models {
            Some(m) => pipeline::select_stage(&prep, m, oracle.as_ref(), strategy, budget, self.cfg.select.epsilon, self.seed)?,
            None => zeroal::select::select_random(x.rows(), budget, pipeline::selection_seed(self.seed, strategy, budget))?,
        };
        sel.config_hash = Some(self.cfg.hash());
        fs::create_dir_all(&meta_dir)?;
        let _ = fs::remove_file(meta_dir.join("stage.json"));
        write_json(&path, &sel)?;
        self.finish(&meta_dir, "select", hash)?;
        Ok(true)
    }

    pub fn load_selection(&self, strategy: Strategy, budget: usize) -> Result<SelectionResult> {
        let meta_dir = self.dir("selections").join(format!(".{strategy}-{budget}"));
        let hash = self.select_hash(strategy, budget);
        match read_meta(&meta_dir) {
            Some(m) if m.stage_hash == hash => {}
            _ => bail!(
                "no current selection for {strategy} at budget {budget}; run `zeroal select --strategy {strategy} --budget {budget}`"
            ),
        }
        Ok(SelectionResult::read(&self.selection_path(strategy, budget))?)
    }

    pub fn evaluate(&self, strategy: Strategy) -> Result<bool> {
        let hash = self.eval_hash(strategy);
        let dir = self.dir("eval");
        let meta_dir = dir.join(format!(".{strategy}"));
        if self.fresh(&meta_dir, &hash) {
            return Ok(false);
        }
        let prep = self.load_data()?;
        let models = self.load_models()?;
        let mut cells = Vec::new();
        let mut noise = Vec::new();
        for &b in &self.cfg.select.budgets {
            let sel = self.load_selection(strategy, b)?;
            cells.extend(pipeline::eval_stage(&prep, &models, &sel, &self.cfg.eval, self.seed)?);
            noise.push(eval::noise_pick_fraction(&sel.indices, &prep.corrupted));
        }
        let mut report = EvalReport::from_cells(strategy.name(), &self.cfg.select.budgets, cells)?;
        if !prep.corrupted.is_empty() {
            report.noise_pick_fraction = Some(noise.iter().sum::<f64>() / noise.len() as f64);
        }
        if strategy == Strategy::D2ulo && self.cfg.eval.correlation_subsets > 0 {
            let c = pipeline::correlation_stage(&prep, &models, self.cfg, self.seed)?;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("utility_scatter.csv"), c.scatter_csv())?;
            report.utility_correlation = Some((c.pearson, c.spearman));
        }
        report.config_hash = Some(self.cfg.hash());
        fs::create_dir_all(&meta_dir)?;
        let _ = fs::remove_file(meta_dir.join("stage.json"));
        report.write(&dir.join(format!("{strategy}.json")), &dir.join(format!("{strategy}.csv")))?;
        self.finish(&meta_dir, "evaluate", hash)?;
        Ok(true)
    }

    /// Every stage in order; returns the names of stages that ran.
    pub fn all(&self) -> Result<Vec<String>> {
        let mut ran = Vec::new();
        let mut step = |name: String, r: Result<bool>| -> Result<()> {
            match r {
                Ok(true) => {
                    log::info!("seed {}: {name} done", self.seed);
                    ran.push(name);
                    Ok(())
                }
                Ok(false) => {
                    log::info!("seed {}: {name} up to date, skipped", self.seed);
                    Ok(())
                }
                Err(e) => Err(e.context(format!("stage {name} failed (seed {})", self.seed))),
            }
        };
        step("gen-data".into(), self.gen_data())?;
        step("sample-utility".into(), self.sample_utility())?;
        step("train".into(), self.train())?;
        let strategies = &self.cfg.select.strategies;
        if strategies.contains(&Strategy::Optimal) {
            step("train-oracle".into(), self.train_oracle())?;
        }
        for &s in strategies {
            for &b in &self.cfg.select.budgets {
                step(format!("select {s} {b}"), self.select(s, b))?;
            }
        }
        for &s in strategies {
            step(format!("evaluate {s}"), self.evaluate(s))?;
        }
        Ok(ran)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub budgets: Vec<usize>,
}

/// Records the config next to the artifacts; refuses to mix configs in one
/// directory unless resuming is off and the caller forces it.
pub fn write_manifest(root: &Path, cfg: &ExperimentConfig, force: bool) -> Result<()> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let path = root.join("manifest.json");
    if let Ok(text) = fs::read_to_string(&path) {
        let old: Manifest = serde_json::from_str(&text)?;
        if old.config_hash != cfg.hash() && !force {
            bail!(
                "{} holds artifacts of config {}, not {}; choose another --out or pass --force",
                root.display(),
                old.config_hash,
                cfg.hash()
            );
        }
    }
    let m = Manifest {
        config_hash: cfg.hash(),
        seeds: cfg.eval.seeds.clone(),
        strategies: cfg.select.strategies.clone(),
        budgets: cfg.select.budgets.clone(),
    };
    write_json(&path, &m)?;
    fs::write(root.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}
