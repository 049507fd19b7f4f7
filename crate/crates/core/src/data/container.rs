//! Dataset persistence.
//!
//! Binary layout (little-endian): `ZALD` magic, then `u32` version, `u64 n`,
//! `u64 d`, `u32 C`, `u32 flags`, `u32` name length and UTF-8 name, the
//! `n·d` features as `f64` row-major, and, when flagged, `n` labels as `u32`.
//!
//! Flags: bit 0 labels present, bit 1 labels quarantined, bit 2 target domain.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DomainPair, DomainTag, Labels};
use crate::error::{Error, Result};
use crate::nnkit::Matrix;

const MAGIC: &[u8; 4] = b"ZALD";
pub const CONTAINER_VERSION: u32 = 1;

const FLAG_LABELS: u32 = 1;
const FLAG_QUARANTINED: u32 = 2;
const FLAG_TARGET: u32 = 4;

pub fn to_bytes(ds: &Dataset) -> Vec<u8> {
    let (labels, quarantined) = ds.raw_labels();
    let mut flags = 0;
    if labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if quarantined {
        flags |= FLAG_QUARANTINED;
    }
    if ds.domain() == DomainTag::Target {
        flags |= FLAG_TARGET;
    }
    let mut out = Vec::with_capacity(40 + ds.n() * (ds.d() * 8 + 4));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.n() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.d() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.n_classes() as u32).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(ds.name().len() as u32).to_le_bytes());
    out.extend_from_slice(ds.name().as_bytes());
    for v in ds.features().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = labels {
        for &y in l {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Dataset, String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| format!("truncated at offset {pos}: need {n} bytes"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err("not a dataset container (bad magic)".into());
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != CONTAINER_VERSION {
        return Err(format!("unsupported container version {version}"));
    }
    let n = u64_at(take(8)?) as usize;
    let d = u64_at(take(8)?) as usize;
    let c = u32_at(take(4)?) as usize;
    let flags = u32_at(take(4)?);
    let name_len = u32_at(take(4)?) as usize;
    let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|e| e.to_string())?;
    let feats: Vec<f64> = take(n * d * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = if flags & FLAG_LABELS != 0 {
        Some(
            take(n * 4)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - pos));
    }
    let domain = if flags & FLAG_TARGET != 0 {
        DomainTag::Target
    } else {
        DomainTag::Source
    };
    let features = Matrix::from_vec(n, d, feats).map_err(|e| e.to_string())?;
    let ds = Dataset::new(name, domain, features, labels, c).map_err(|e| e.to_string())?;
    Ok(if flags & FLAG_QUARANTINED != 0 {
        ds.quarantine()
    } else {
        ds
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|m| Error::format(path, m))
}

/// CSV for inspection: `f0..f{d-1}` plus `label` when labels are visible.
/// Quarantined labels are never exported.
pub fn to_csv(ds: &Dataset) -> String {
    let visible = match &ds.labels {
        Labels::Visible(l) => Some(l),
        _ => None,
    };
    let mut s = (0..ds.d()).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
    if visible.is_some() {
        s.push_str(",label");
    }
    s.push('\n');
    for (i, row) in ds.features().iter_rows().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        if let Some(l) = visible {
            write!(s, ",{}", l[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_csv(ds)).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    shift_descriptor: String,
    source_classes: Vec<usize>,
    target_classes: Vec<usize>,
}

/// Stores a pair as `source.bin`, `target_pool.bin`, `target_test.bin` and
/// `pair.json` inside `dir`.
pub fn write_pair(pair: &DomainPair, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_dataset(&pair.source, &dir.join("source.bin"))?;
    write_dataset(pair.target_pool(), &dir.join("target_pool.bin"))?;
    write_dataset(&pair.target_test, &dir.join("target_test.bin"))?;
    let meta = PairMeta {
        shift_descriptor: pair.shift_descriptor.clone(),
        source_classes: pair.source_classes.clone(),
        target_classes: pair.target_classes.clone(),
    };
    let p = dir.join("pair.json");
    fs::write(&p, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(p, e))
}

pub fn read_pair(dir: &Path) -> Result<DomainPair> {
    let p = dir.join("pair.json");
    let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let meta: PairMeta = serde_json::from_slice(&raw)?;
    let pair = DomainPair::new(
        read_dataset(&dir.join("source.bin"))?,
        read_dataset(&dir.join("target_pool.bin"))?,
        read_dataset(&dir.join("target_test.bin"))?,
        meta.shift_descriptor,
    )?;
    Ok(pair.with_class_maps(meta.source_classes, meta.target_classes))
}
