//! Binary checkpoints.
//!
//! ```text
//! METACSR-CKPT v1
//! config-hash <hex>
//! tensors <n>
//! <name> <d1>x<d2>...\n<little-endian f32 payload>
//! ...
//! ```
//!
//! Optimizer state rides along as `state/m/<name>`, `state/v/<name>` and a
//! 1x1 `state/step`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::meta::AdamState;
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &str = "METACSR-CKPT v1";
const STATE_M: &str = "state/m/";
const STATE_V: &str = "state/v/";
const STATE_STEP: &str = "state/step";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| bad(format!("bad shape `{s}`"))))
        .collect()
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(k, t)| (k.clone(), t)).collect();
        if let Some(adam) = &self.adam {
            out.extend(adam.m.iter().map(|(k, t)| (format!("{STATE_M}{k}"), t)));
            out.extend(adam.v.iter().map(|(k, t)| (format!("{STATE_V}{k}"), t)));
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut tensors = self.tensors();
        let step = self.adam.as_ref().map(|a| Tensor::matrix(1, 1, vec![a.step as f64]));
        if let Some(s) = &step {
            tensors.push((STATE_STEP.to_string(), s));
        }
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "config-hash {}", self.config_hash)?;
        writeln!(w, "tensors {}", tensors.len())?;
        for (name, t) in tensors {
            writeln!(w, "{name} {}", shape_text(t.shape()))?;
            let mut buf = Vec::with_capacity(4 * t.numel());
            for &x in t.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("write to Vec");
        out
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
            if n == 0 {
                return Err(bad("unexpected end of file"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad("missing header"));
        }
        let hash = next_line(&mut r)?;
        let config_hash = hash
            .strip_prefix("config-hash ")
            .ok_or_else(|| bad("missing config-hash line"))?
            .to_string();
        let count: usize = next_line(&mut r)?
            .strip_prefix("tensors ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing tensor count"))?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut step = None;
        for _ in 0..count {
            let head = next_line(&mut r)?;
            let (name, shape) = head.rsplit_once(' ').ok_or_else(|| bad(format!("bad tensor line `{head}`")))?;
            let shape = parse_shape(shape)?;
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; 4 * numel];
            r.read_exact(&mut buf).map_err(|_| bad(format!("truncated payload for `{name}`")))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data)?;
            if name == STATE_STEP {
                step = Some(t.data()[0] as u64);
            } else if let Some(k) = name.strip_prefix(STATE_M) {
                m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(STATE_V) {
                v.insert(k.to_string(), t);
            } else {
                params.insert(name.to_string(), t);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| bad(e.to_string()))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let adam = match step {
            Some(step) => Some(AdamState {
                m: ModelParams::from_map(m),
                v: ModelParams::from_map(v),
                step,
            }),
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(bad("optimizer moments without a step counter")),
        };
        Ok(Checkpoint {
            config_hash,
            params: ModelParams::from_map(params),
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f)
    }

    /// Fails unless the checkpoint was written under `expected`.
    pub fn check_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::ConfigMismatch {
                expected: expected.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}

/// Rounds every value through f32, matching what a checkpoint stores.
pub fn quantize(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_adam: bool) -> Checkpoint {
        let mut params = ModelParams::from_map(BTreeMap::new());
        params.insert("theta1/inherent", Tensor::matrix(2, 3, vec![0.1, -2.0, 3.5, 0.0, 1e-3, 7.25]));
        params.insert("theta2/encoder/b3", Tensor::row(vec![0.5, -0.25]));
        let adam = with_adam.then(|| AdamState {
            m: quantize(&params),
            v: quantize(&params),
            step: 17,
        });
        Checkpoint {
            config_hash: "abc123".into(),
            params: quantize(&params),
            adam,
        }
    }

    #[test]
    fn roundtrip() {
        for with_adam in [false, true] {
            let ck = sample(with_adam);
            let back = Checkpoint::read_from(ck.to_bytes().as_slice()).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn header_and_layout() {
        let bytes = sample(true).to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("METACSR-CKPT v1\nconfig-hash abc123\ntensors 7\n"));
        assert!(text.contains("state/step 1x1\n"));
        assert!(text.contains("theta1/inherent 2x3\n"));
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample(false).to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(extra.as_slice()).is_err());
        assert!(Checkpoint::read_from(&b"METACSR-CKPT v2\n"[..]).is_err());
    }

    #[test]
    fn hash_check() {
        let ck = sample(false);
        assert!(ck.check_hash("abc123").is_ok());
        assert!(matches!(ck.check_hash("zzz"), Err(Error::ConfigMismatch { .. })));
    }
}
