//! Merging per-seed evaluation reports into accuracy-vs-budget tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use zeroal::eval::{mean_std, EvalCell, EvalReport};

pub const HEADER: &str = "row,strategy,evaluator,budget,seed,accuracy,std,n";

/// All `seed-*/eval/*.json` reports under `root`, in path order.
pub fn find_reports(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(root).with_context(|| format!("reading {}", root.display()))?;
    let mut seeds: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")))
        .collect();
    seeds.sort();
    for dir in seeds {
        let eval = dir.join("eval");
        let Ok(entries) = fs::read_dir(&eval) else { continue };
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        out.extend(files);
    }
    Ok(out)
}

pub struct Merged {
    pub csv: String,
    pub mean_rows: usize,
    pub seed_rows: usize,
}

/// Mean rows (one per strategy, evaluator and budget) followed by the
/// per-seed rows. Reports from different configs are refused unless forced.
pub fn merge(paths: &[PathBuf], force: bool) -> Result<Merged> {
    if paths.is_empty() {
        bail!("no evaluation reports found; run `zeroal evaluate` or `zeroal run` first");
    }
    let mut hash: Option<(String, &Path)> = None;
    let mut cells: Vec<EvalCell> = Vec::new();
    for p in paths {
        let r = EvalReport::read(p).with_context(|| format!("reading {}", p.display()))?;
        let h = r.config_hash.clone().unwrap_or_default();
        match &hash {
            None => hash = Some((h, p)),
            Some((first, fp)) if *first != h && !force => bail!(
                "{} (config {h}) and {} (config {first}) come from different configs; pass --force to merge anyway",
                p.display(),
                fp.display()
            ),
            _ => {}
        }
        cells.extend(r.cells);
    }
    let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    for c in &cells {
        groups.entry((c.strategy.clone(), c.evaluator.clone(), c.budget)).or_default().push(c.accuracy);
    }
    let mut csv = format!("{HEADER}\n");
    for ((s, e, b), v) in &groups {
        let (m, sd) = mean_std(v);
        let _ = writeln!(csv, "mean,{s},{e},{b},,{m},{sd},{}", v.len());
    }
    cells.sort_by(|a, b| {
        (&a.strategy, &a.evaluator, a.budget, a.seed).cmp(&(&b.strategy, &b.evaluator, b.budget, b.seed))
    });
    for c in &cells {
        let _ = writeln!(csv, "seed,{},{},{},{},{},,", c.strategy, c.evaluator, c.budget, c.seed, c.accuracy);
    }
    Ok(Merged {
        csv,
        mean_rows: groups.len(),
        seed_rows: cells.len(),
    })
}
