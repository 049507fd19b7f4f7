//! IDX reader (the MNIST/USPS distribution format): big-endian header,
//! unsigned-byte payload.

use std::fs;
use std::path::Path;

use super::{Dataset, DomainTag};
use crate::error::{Error, IdxError, Result};
use crate::nnkit::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().unwrap())),
        None => Err(IdxError::Truncated {
            offset,
            expected: 4,
            actual: bytes.len().saturating_sub(offset),
        }),
    }
}

fn payload(bytes: &[u8], offset: usize, expected: usize) -> Result<&[u8], IdxError> {
    let actual = bytes.len() - offset;
    if actual < expected {
        return Err(IdxError::Truncated {
            offset,
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(IdxError::Trailing {
            offset: offset + expected,
            extra: actual - expected,
        });
    }
    Ok(&bytes[offset..])
}

/// Decodes an image file into `(n, rows·cols, pixels scaled to [0, 1])`.
pub fn parse_images(bytes: &[u8]) -> Result<Matrix, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            offset: 0,
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let d = rows * cols;
    let raw = payload(bytes, 16, n * d)?;
    let data = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Matrix::from_vec(n, d, data).expect("payload length checked"))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            offset: 0,
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image file and, optionally, its label file. The number of
/// classes is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let features = parse_images(&img)?;
    let labels = match labels_path {
        None => None,
        Some(p) => {
            let raw = fs::read(p).map_err(|e| Error::io(p, e))?;
            let labels = parse_labels(&raw)?;
            if labels.len() != features.rows() {
                return Err(IdxError::CountMismatch {
                    offset: 4,
                    images: features.rows(),
                    labels: labels.len(),
                }
                .into());
            }
            Some(labels)
        }
    };
    let n_classes = labels
        .as_ref()
        .and_then(|l| l.iter().max())
        .map_or(0, |m| m + 1);
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, DomainTag::Source, features, labels, n_classes)
}
