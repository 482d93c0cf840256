//! Tensor container on disk.
//!
//! Layout (all header lines UTF-8, `\n` terminated):
//!
//! ```text
//! meshdiff-tensors 1
//! meta <key> <value>            zero or more; value runs to end of line
//! tensor <name> f32 <d0>x<d1>   one per tensor, payload order; "scalar" for rank 0
//! end
//! <payload>                     row-major little-endian f32, tensors back to back
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "meshdiff-tensors 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks meta key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta_str(key)?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("meta `{key}`: cannot parse `{raw}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}").unwrap();
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::invalid(format!("meta entry `{k}` not representable")));
            }
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("tensor name `{name}` has whitespace")));
            }
            let dims = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            writeln!(out, "tensor {name} f32 {dims}").unwrap();
        }
        writeln!(out, "end").unwrap();
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(mut reader: impl BufRead, origin: &str) -> Result<Self> {
        let mut line = String::new();
        let mut lineno = 0;
        let mut next = |line: &mut String| -> Result<usize> {
            line.clear();
            lineno += 1;
            let n = reader
                .read_line(line)
                .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
            if n == 0 {
                return Err(Error::parse(origin, lineno, "unexpected end of header"));
            }
            Ok(lineno)
        };
        let ln = next(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::parse(origin, ln, "not a meshdiff tensor container"));
        }
        let mut ckpt = Checkpoint::new();
        let mut order = Vec::new();
        loop {
            let ln = next(&mut line)?;
            let text = line.trim_end_matches(['\n', '\r']);
            if text == "end" {
                break;
            }
            if let Some(rest) = text.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = text.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [name, dtype, dims] = parts[..] else {
                    return Err(Error::parse(origin, ln, "expected `tensor <name> <dtype> <dims>`"));
                };
                if dtype != "f32" {
                    return Err(Error::parse(origin, ln, format!("unsupported dtype {dtype}")));
                }
                let shape = if dims == "scalar" {
                    Vec::new()
                } else {
                    dims.split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::parse(origin, ln, format!("bad dims `{dims}`")))?
                };
                order.push((name.to_string(), shape));
            } else {
                return Err(Error::parse(origin, ln, format!("unexpected header line `{text}`")));
            }
        }
        // Payload follows in header order; the BTreeMap writer emits sorted names.
        for (name, shape) in order {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            reader
                .read_exact(&mut buf)
                .map_err(|e| Error::parse(origin, 0, format!("payload of `{name}`: {e}")))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::parse(origin, 0, format!("`{name}`: {e}")))?;
            ckpt.tensors.insert(name, t);
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest).ok();
        if !rest.is_empty() {
            return Err(Error::parse(origin, 0, format!("{} trailing bytes", rest.len())));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(f), &path.display().to_string())
    }
}
