//! Binary net checkpoints: `NNKT` magic, `u32` version, `u32` layer count,
//! then per layer `u32 in, u32 out, u8 activation` followed by the weights
//! and bias as little-endian `f64`. A plain-text manifest lists the same
//! shapes for humans.

use std::fs;
use std::path::Path;

use super::matrix::Matrix;
use super::mlp::{Activation, Dense, MlpNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NNKT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(net: &MlpNet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + net.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for l in net.layers() {
        out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
        out.push(l.activation.code());
        for v in l.weight.data().iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "truncated at offset {}: need {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<MlpNet, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not an nnkit checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let input = r.u32()? as usize;
        let output = r.u32()? as usize;
        let code = r.take(1)?[0];
        let activation =
            Activation::from_code(code).ok_or_else(|| format!("layer {i}: unknown activation {code}"))?;
        let w = r.f64s(input * output)?;
        let bias = r.f64s(output)?;
        layers.push(Dense {
            weight: Matrix::from_vec(input, output, w).map_err(|e| e.to_string())?,
            bias,
            activation,
        });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    MlpNet::from_layers(layers).map_err(|e| e.to_string())
}

pub fn manifest(net: &MlpNet) -> String {
    let mut s = format!(
        "nnkit checkpoint v{CHECKPOINT_VERSION}\nparams {}\n",
        net.param_count()
    );
    for (i, l) in net.layers().iter().enumerate() {
        s.push_str(&format!(
            "layer {i}: {} -> {} {}\n",
            l.input_dim(),
            l.output_dim(),
            l.activation.name()
        ));
    }
    s
}

/// Writes `path` and a sibling `<path>.manifest.txt`.
pub fn save(net: &MlpNet, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest(net)).map_err(|e| Error::io(mpath, e))
}

pub fn load(path: &Path) -> Result<MlpNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let net = MlpNet::new(&[3, 7, 2], Activation::Elu, Activation::Softmax, 11).unwrap();
        let back = decode(&encode(&net)).unwrap();
        assert_eq!(net, back);
        assert!(manifest(&net).contains("layer 1: 7 -> 2 softmax"));
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let net = MlpNet::new(&[2, 2], Activation::Elu, Activation::Identity, 1).unwrap();
        let bytes = encode(&net);
        assert!(decode(&bytes[..bytes.len() - 1]).unwrap_err().contains("truncated"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
