//! Versioned checkpoint container.
//!
//! A text header lists the format version, a configuration hash, free-form
//! metadata and a tensor manifest (name, shape, byte offset). The raw
//! little-endian `f64` buffers follow the `end` line. Round trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, ParamSet, Tensor};

const MAGIC: &str = "ADVSUM-CKPT";
const VERSION: u32 = 1;

/// Hex SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(bad(format!("{kind} {s:?} must be non-empty without whitespace")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Checkpoint {
            config_hash: config_hash.into(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Parses a required metadata value.
    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key).ok_or_else(|| bad(format!("missing metadata {key:?}")))?;
        raw.parse()
            .map_err(|_| bad(format!("metadata {key:?} has unparsable value {raw:?}")))
    }

    /// Stores every tensor of `params` as `<prefix><name>`.
    pub fn add_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Tensors named `<prefix>*`, prefix stripped, in stored order.
    pub fn params(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Stores Adam moments as `<prefix>m.<name>` and `<prefix>v.<name>` plus
    /// the step count.
    pub fn add_adam(&mut self, prefix: &str, params: &ParamSet, adam: &AdamState) {
        let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
        for (name, m) in names.iter().zip(adam.first_moments()) {
            self.tensors.push((format!("{prefix}m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(adam.second_moments()) {
            self.tensors.push((format!("{prefix}v.{name}"), v.clone()));
        }
        self.set_meta(&format!("{prefix}step"), adam.step_count());
    }

    /// Restores Adam moments saved by [`Self::add_adam`], or `None` when the
    /// checkpoint holds none.
    pub fn adam(&self, prefix: &str, params: &ParamSet, config: AdamConfig) -> Result<Option<AdamState>> {
        let step_key = format!("{prefix}step");
        if self.meta(&step_key).is_none() {
            return Ok(None);
        }
        let step: u64 = self.meta_parse(&step_key)?;
        let first = self.params(&format!("{prefix}m."));
        let second = self.params(&format!("{prefix}v."));
        params.check_congruent(&first)?;
        params.check_congruent(&second)?;
        let collect = |set: ParamSet| set.iter().map(|(_, t)| t.clone()).collect();
        Ok(Some(AdamState::from_parts(config, step, collect(first), collect(second))?))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        check_token("config hash", &self.config_hash)?;
        writeln!(w, "{MAGIC} {VERSION}")?;
        writeln!(w, "config_hash {}", self.config_hash)?;
        for (k, v) in &self.meta {
            check_token("metadata key", k)?;
            if v.contains('\n') {
                return Err(bad(format!("metadata {k:?} spans several lines")));
            }
            writeln!(w, "meta {k} {v}")?;
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "tensor {name} {} {offset}", dims.join(","))?;
            offset += 8 * t.len();
        }
        writeln!(w, "end")?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("unexpected end of header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };

        let first = next_line(&mut r)?;
        match first.split_once(' ') {
            Some((MAGIC, v)) if v == VERSION.to_string() => {}
            Some((MAGIC, v)) => return Err(bad(format!("unsupported checkpoint version {v}"))),
            _ => return Err(bad("not a checkpoint file")),
        }
        let hash_line = next_line(&mut r)?;
        let config_hash = hash_line
            .strip_prefix("config_hash ")
            .ok_or_else(|| bad("missing config_hash line"))?
            .to_string();

        let mut ckpt = Checkpoint::new(config_hash);
        let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = l.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, dims, offset] = parts[..] else {
                    return Err(bad(format!("malformed manifest line {l:?}")));
                };
                let shape = dims
                    .split(',')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dimension in {l:?}"))))
                    .collect::<Result<Vec<usize>>>()?;
                let offset = offset.parse().map_err(|_| bad(format!("bad offset in {l:?}")))?;
                manifest.push((name.to_string(), shape, offset));
            } else {
                return Err(bad(format!("unrecognized header line {l:?}")));
            }
        }

        let mut expected = 0usize;
        for (name, shape, offset) in manifest {
            if offset != expected {
                return Err(bad(format!("tensor {name} at offset {offset}, expected {expected}")));
            }
            let len: usize = shape.iter().product();
            let mut bytes = vec![0u8; 8 * len];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(format!("data for tensor {name} is truncated")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            ckpt.tensors.push((name, Tensor::new(shape, data)?));
            expected += 8 * len;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        self.write_to(BufWriter::new(File::create(&tmp)?))?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(BufReader::new(file))
    }
}
