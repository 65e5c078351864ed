//! Parameter checkpoints: a text manifest followed by a raw float payload.
//!
//! ```text
//! DIFFEEG-CHECKPOINT 1
//! meta <key> <value>
//! tensor <name> <d0>x<d1>x...
//! end
//! <little-endian f64 payload, tensors in manifest order>
//! ```
//!
//! The payload must be exactly 8·Σ numel bytes.

use std::fs;
use std::path::Path;

use crate::error::{format_err, invalid, Result};
use crate::numerics::Tensor;

const MAGIC_LINE: &str = "DIFFEEG-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor)>) -> Self {
        Self { meta: Vec::new(), tensors }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parse a metadata value, reporting a format error when absent or malformed.
    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key).ok_or_else(|| format_err!("checkpoint lacks metadata `{key}`"))?;
        raw.parse().map_err(|_| format_err!("checkpoint metadata `{key}` = `{raw}` is malformed"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = String::from(MAGIC_LINE);
        head.push('\n');
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(invalid!("checkpoint metadata `{k}` cannot be encoded"));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(invalid!("tensor name `{name}` cannot be encoded"));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("tensor {name} {}\n", dims.join("x")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| format_err!("checkpoint manifest is not terminated"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| format_err!("checkpoint manifest is not text"))
        };
        if next_line()? != MAGIC_LINE {
            return Err(format_err!("not a checkpoint (bad magic line)"));
        }
        let mut meta = Vec::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => meta.push((k.to_string(), v.unwrap_or("").to_string())),
                (Some("tensor"), Some(name), Some(dims)) => {
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| format_err!("bad shape `{dims}` for tensor `{name}`"))?;
                    shapes.push((name.to_string(), shape));
                }
                _ => return Err(format_err!("unrecognised manifest line `{line}`")),
            }
        }
        let payload = &bytes[pos..];
        let numel: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if payload.len() != 8 * numel {
            return Err(format_err!("checkpoint payload is {} bytes, manifest implies {}", payload.len(), 8 * numel));
        }
        let mut values = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        let tensors = shapes
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data: Vec<f64> = values.by_ref().take(n).collect();
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
