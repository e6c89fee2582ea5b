//! `SEQDREAM-W1` weight files.
//!
//! Line-oriented UTF-8 text:
//!
//! ```text
//! SEQDREAM-W1
//! config blocks=3 convs_per_block=3 channels=64,128,128 kernels=7,5,3 num_classes=2 length=500
//! params <count>
//! tensor <name> <d0>,<d1>,...
//! <v0> <v1> ...            (all values of that tensor on one line)
//! ...
//! end
//! ```
//!
//! Values use the shortest decimal form that parses back to the same `f64`,
//! so a save/load round trip is bit-exact. Tensors appear in the order given
//! by `ResNetConfig::param_layout`.

use std::fmt::Write as _;
use std::path::Path;

use super::{ModelWeights, NamedTensor, ResNetConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &str = "SEQDREAM-W1";
const MAGIC_PREFIX: &str = "SEQDREAM-W";

pub fn encode_weights(model: &ModelWeights) -> String {
    let c = model.config();
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut out = String::new();
    let _ = writeln!(out, "{WEIGHTS_MAGIC}");
    let _ = writeln!(
        out,
        "config blocks={} convs_per_block={} channels={} kernels={} num_classes={} length={}",
        c.blocks,
        c.convs_per_block,
        join(&c.channels),
        join(&c.kernels),
        c.num_classes,
        c.length
    );
    let _ = writeln!(out, "params {}", model.params().len());
    for p in model.params() {
        let _ = writeln!(out, "tensor {} {}", p.name, join(p.tensor.shape()));
        let mut first = true;
        for v in p.tensor.data() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:e}");
        }
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn save_weights(model: &ModelWeights, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingWeights(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    decode_weights(&bytes)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.parse().map_err(|_| corrupt(format!("bad {what} entry `{t}`"))))
        .collect()
}

fn parse_config(line: &str) -> Result<ResNetConfig> {
    let rest = line
        .strip_prefix("config ")
        .ok_or_else(|| corrupt("missing config line"))?;
    let mut fields = std::collections::BTreeMap::new();
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| corrupt(format!("bad config field `{kv}`")))?;
        if fields.insert(k, v).is_some() {
            return Err(corrupt(format!("duplicate config field `{k}`")));
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| corrupt(format!("config field `{k}` missing")));
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| corrupt(format!("config field `{k}` is not an integer")))
    };
    let cfg = ResNetConfig {
        blocks: num("blocks")?,
        convs_per_block: num("convs_per_block")?,
        channels: parse_list(get("channels")?, "channels")?,
        kernels: parse_list(get("kernels")?, "kernels")?,
        num_classes: num("num_classes")?,
        length: num("length")?,
    };
    if fields.len() != 6 {
        return Err(corrupt("unexpected config fields"));
    }
    cfg.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(cfg)
}

/// Parses a weight file. Fails with [`Error::Version`] for another format
/// version and [`Error::Corrupt`] for truncated or malformed content.
pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let text = std::str::from_utf8(bytes).map_err(|_| corrupt("not UTF-8"))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut it = lines.iter().copied();
    let magic = it.next().ok_or_else(|| corrupt("empty file"))?;
    if magic != WEIGHTS_MAGIC {
        if magic.starts_with(MAGIC_PREFIX) {
            return Err(Error::Version {
                found: magic.to_string(),
                expected: WEIGHTS_MAGIC.to_string(),
            });
        }
        return Err(corrupt("bad magic"));
    }
    let config = parse_config(it.next().ok_or_else(|| corrupt("truncated before config"))?)?;
    let count: usize = it
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| corrupt("missing params line"))?;
    let expected = config.param_count().ok_or_else(|| corrupt("config too large"))?;
    if count != expected {
        return Err(Error::shape(format!(
            "file declares {count} tensors, config implies {expected}"
        )));
    }
    // every tensor takes two lines; reject before building the layout
    if expected.saturating_mul(2) > lines.len() {
        return Err(corrupt("truncated: fewer lines than declared tensors"));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in config.param_layout() {
        let header = it.next().ok_or_else(|| corrupt(format!("truncated before tensor `{name}`")))?;
        let mut parts = header.split(' ');
        if parts.next() != Some("tensor") {
            return Err(corrupt(format!("expected tensor header, found `{header}`")));
        }
        let got_name = parts.next().ok_or_else(|| corrupt("tensor header without name"))?;
        let got_shape = parse_list(parts.next().ok_or_else(|| corrupt("tensor header without shape"))?, "shape")?;
        if parts.next().is_some() {
            return Err(corrupt(format!("trailing fields in `{header}`")));
        }
        if got_name != name || got_shape != shape {
            return Err(Error::shape(format!(
                "tensor `{got_name}` {got_shape:?} does not match config (expected `{name}` {shape:?})"
            )));
        }
        let values = it.next().ok_or_else(|| corrupt(format!("truncated in tensor `{name}`")))?;
        let data = values
            .split(' ')
            .map(|t| {
                let v: f64 = t.parse().map_err(|_| corrupt(format!("bad value `{t}` in `{name}`")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(corrupt(format!("non-finite value in `{name}`")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(format!("`{name}`: {e}")))?;
        params.push(NamedTensor { name, tensor });
    }
    if it.next() != Some("end") {
        return Err(corrupt("missing end marker"));
    }
    if it.any(|l| !l.trim().is_empty()) {
        return Err(corrupt("content after end marker"));
    }
    ModelWeights::from_parts(config, params)
}
