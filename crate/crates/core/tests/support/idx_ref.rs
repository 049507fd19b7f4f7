//! Independent IDX encoder and the round-trip / corruption oracle.

use rand::Rng as _;
use zeroal::data::idx::{parse_images, parse_labels, IMAGES_MAGIC, LABELS_MAGIC};
use zeroal::{Error, IdxError};

pub fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub files: usize,
    pub image_files: usize,
    pub label_files: usize,
    pub roundtrip_failures: Vec<String>,
    /// `(variant, error)` for each corrupted input; `None` if accepted.
    pub rejections: Vec<(&'static str, Option<IdxError>)>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.files >= 20
            && self.image_files > 0
            && self.label_files > 0
            && self.roundtrip_failures.is_empty()
            && self.rejections.len() == 5
            && self.rejections.iter().all(|(_, e)| e.as_ref().is_some_and(|e| offset(e).is_some()))
    }
}

pub fn offset(e: &IdxError) -> Option<usize> {
    match e {
        IdxError::BadMagic { offset, .. }
        | IdxError::Truncated { offset, .. }
        | IdxError::Trailing { offset, .. }
        | IdxError::CountMismatch { offset, .. } => Some(*offset),
    }
}

fn idx_err(e: Error) -> Option<IdxError> {
    match e {
        Error::Idx(i) => Some(i),
        _ => None,
    }
}

/// 20 random files (alternating image and label magics) plus five corrupted
/// variants; `dir` receives the files used for the on-disk mismatch case.
pub fn run(seed: u64, dir: &std::path::Path) -> Outcome {
    let mut r = zeroal::rng::seeded(seed);
    let mut o = Outcome::default();
    for f in 0..20 {
        let n = r.random_range(1..40);
        if f % 2 == 0 {
            let (rows, cols) = (r.random_range(1..9), r.random_range(1..9));
            let pixels: Vec<u8> = (0..n * rows * cols).map(|_| r.random()).collect();
            let bytes = encode_images(n, rows, cols, &pixels);
            match parse_images(&bytes) {
                Ok(m) if m.shape() == (n, rows * cols)
                    && m.data().iter().zip(&pixels).all(|(v, &p)| *v == f64::from(p) / 255.0) => {}
                other => o.roundtrip_failures.push(format!("images file {f}: {other:?}")),
            }
            o.image_files += 1;
        } else {
            let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..10)).collect();
            match parse_labels(&encode_labels(&labels)) {
                Ok(l) if l.iter().zip(&labels).all(|(a, &b)| *a == usize::from(b)) && l.len() == n => {}
                other => o.roundtrip_failures.push(format!("labels file {f}: {other:?}")),
            }
            o.label_files += 1;
        }
        o.files += 1;
    }

    let pixels: Vec<u8> = (0..5 * 4).map(|_| r.random()).collect();
    let good = encode_images(5, 2, 2, &pixels);
    let mut bad_magic = good.clone();
    bad_magic[3] = 0x01;
    o.rejections.push(("bad magic", parse_images(&bad_magic).err()));
    o.rejections.push(("truncated header", parse_images(&good[..10]).err()));
    o.rejections.push(("truncated payload", parse_images(&good[..good.len() - 1]).err()));
    let mut trailing = good.clone();
    trailing.push(0);
    o.rejections.push(("trailing bytes", parse_images(&trailing).err()));
    let img = dir.join("images.idx");
    let lab = dir.join("labels.idx");
    std::fs::write(&img, &good).unwrap();
    std::fs::write(&lab, encode_labels(&[0, 1, 2, 3])).unwrap();
    o.rejections.push((
        "count mismatch",
        zeroal::data::load_idx(&img, Some(&lab)).err().and_then(idx_err),
    ));
    o
}
