//! Checkpoint file format.
//!
//! Layout: the 8-byte magic `FDFCNCP1`, a little-endian `u64` byte length,
//! a UTF-8 header of `key = value` lines (version, epoch, seed, score bits,
//! the embedded network configuration under `config.`, and an ordered
//! parameter manifest of name/shape/offset), then raw little-endian `f32`
//! blobs in manifest order. When optimizer state is present its first and
//! second moments follow the parameter blobs in the same order. Round-trips
//! are bit-exact.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::params::{ParamShape, ParamValue, Parameters};
use super::{Network, NetworkConfig};
use crate::config::{network_config_from_doc, network_config_to_doc, ConfigDoc};

pub const MAGIC: &[u8; 8] = b"FDFCNCP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format error: {0}")]
    FormatError(String),
    #[error("checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint parameter `{param}`: {detail}")]
    ShapeMismatch { param: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimizer state as stored: first/second moments aligned with the
/// parameter manifest, plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerSnapshot {
    pub first: Vec<ParamValue<f32>>,
    pub second: Vec<ParamValue<f32>>,
    pub step: u64,
}

/// Everything needed to resume or serve a model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: Parameters<f32>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub epoch: u32,
    pub seed: u64,
    pub score: f64,
}

fn shape_token(shape: &ParamShape) -> String {
    match shape {
        ParamShape::Tensor(s) => format!("t,{},{},{},{},{}", s[0], s[1], s[2], s[3], s[4]),
        ParamShape::Vector(n) => format!("v,{n}"),
    }
}

fn parse_shape_token(token: &str) -> Result<ParamShape, CheckpointError> {
    let parts: Vec<&str> = token.split(',').collect();
    let err = || CheckpointError::FormatError(format!("bad shape token `{token}`"));
    match parts.as_slice() {
        ["v", n] => Ok(ParamShape::Vector(n.parse().map_err(|_| err())?)),
        ["t", a, b, c, d, e] => {
            let mut s = [0usize; 5];
            for (slot, p) in s.iter_mut().zip([a, b, c, d, e]) {
                *slot = p.parse().map_err(|_| err())?;
            }
            Ok(ParamShape::Tensor(s))
        }
        _ => Err(err()),
    }
}

fn append_values(blob: &mut Vec<u8>, values: &[ParamValue<f32>]) {
    for value in values {
        for v in value.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let layout = ckpt.params.layout();
    let mut doc = ConfigDoc::default();
    doc.push("version", FORMAT_VERSION);
    doc.push("epoch", ckpt.epoch);
    doc.push("seed", ckpt.seed);
    doc.push("score_bits", format!("{:016x}", ckpt.score.to_bits()));
    doc.push("optimizer", if ckpt.optimizer.is_some() { 1 } else { 0 });
    if let Some(opt) = &ckpt.optimizer {
        doc.push("optimizer_step", opt.step);
    }
    for (k, v) in network_config_to_doc(&ckpt.config, "config.").pairs() {
        doc.push(k.clone(), v.clone());
    }
    doc.push("param.count", layout.len());
    let mut offset = 0usize;
    for (i, spec) in layout.specs().iter().enumerate() {
        doc.push(format!("param.{i}.name"), spec.name.clone());
        doc.push(format!("param.{i}.shape"), shape_token(&spec.shape));
        doc.push(format!("param.{i}.offset"), offset);
        offset += spec.shape.scalar_count() * 4;
    }
    let header = doc.render();

    let mut bytes = Vec::with_capacity(16 + header.len() + offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    append_values(&mut bytes, ckpt.params.values());
    if let Some(opt) = &ckpt.optimizer {
        append_values(&mut bytes, &opt.first);
        append_values(&mut bytes, &opt.second);
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_values(
    blob: &[u8],
    layout_values: &mut [ParamValue<f32>],
    cursor: &mut usize,
) -> Result<(), CheckpointError> {
    for value in layout_values {
        let slice = value.as_mut_slice();
        let bytes_needed = slice.len() * 4;
        let end = *cursor + bytes_needed;
        if end > blob.len() {
            return Err(CheckpointError::FormatError(
                "truncated parameter blob".into(),
            ));
        }
        for (i, v) in slice.iter_mut().enumerate() {
            let at = *cursor + i * 4;
            *v = f32::from_le_bytes([blob[at], blob[at + 1], blob[at + 2], blob[at + 3]]);
        }
        *cursor = end;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::FormatError("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(CheckpointError::FormatError("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[16..16 + header_len])
        .map_err(|_| CheckpointError::FormatError("header is not UTF-8".into()))?;
    let doc = ConfigDoc::parse(header)
        .map_err(|e| CheckpointError::FormatError(format!("header: {e}")))?;

    let get = |key: &str| {
        doc.get(key)
            .ok_or_else(|| CheckpointError::FormatError(format!("missing header key `{key}`")))
    };
    let version: u32 = get("version")?
        .parse()
        .map_err(|_| CheckpointError::FormatError("bad version".into()))?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let epoch: u32 = get("epoch")?
        .parse()
        .map_err(|_| CheckpointError::FormatError("bad epoch".into()))?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| CheckpointError::FormatError("bad seed".into()))?;
    let score_bits = u64::from_str_radix(get("score_bits")?, 16)
        .map_err(|_| CheckpointError::FormatError("bad score bits".into()))?;
    let has_optimizer = get("optimizer")? == "1";

    let config = network_config_from_doc(&doc, "config.")
        .map_err(|e| CheckpointError::FormatError(format!("embedded config: {e}")))?;
    let network = Network::assemble(&config)
        .map_err(|e| CheckpointError::FormatError(format!("embedded config rejected: {e}")))?;
    let layout = network.layout().clone();

    let count: usize = get("param.count")?
        .parse()
        .map_err(|_| CheckpointError::FormatError("bad param count".into()))?;
    if count != layout.len() {
        return Err(CheckpointError::FormatError(format!(
            "manifest lists {count} parameters, config derives {}",
            layout.len()
        )));
    }
    let mut expected_offset = 0usize;
    for (i, spec) in layout.specs().iter().enumerate() {
        let name = get(&format!("param.{i}.name"))?;
        if name != spec.name {
            return Err(CheckpointError::ShapeMismatch {
                param: name.to_string(),
                detail: format!("manifest position {i} should hold `{}`", spec.name),
            });
        }
        let shape = parse_shape_token(get(&format!("param.{i}.shape"))?)?;
        if shape != spec.shape {
            return Err(CheckpointError::ShapeMismatch {
                param: spec.name.clone(),
                detail: format!("stored shape {shape:?}, config derives {:?}", spec.shape),
            });
        }
        let offset: usize = get(&format!("param.{i}.offset"))?
            .parse()
            .map_err(|_| CheckpointError::FormatError("bad offset".into()))?;
        if offset != expected_offset {
            return Err(CheckpointError::FormatError(format!(
                "parameter `{}` offset {offset}, expected {expected_offset}",
                spec.name
            )));
        }
        expected_offset += spec.shape.scalar_count() * 4;
    }

    let blob = &bytes[16 + header_len..];
    let param_bytes = expected_offset;
    let moment_bytes = if has_optimizer { 2 * param_bytes } else { 0 };
    if blob.len() != param_bytes + moment_bytes {
        return Err(CheckpointError::FormatError(format!(
            "blob section holds {} bytes, manifest requires {}",
            blob.len(),
            param_bytes + moment_bytes
        )));
    }

    let mut params = Parameters::<f32>::zeros(layout.clone());
    let mut cursor = 0usize;
    read_values(blob, params.values_mut(), &mut cursor)?;

    let optimizer = if has_optimizer {
        let step: u64 = get("optimizer_step")?
            .parse()
            .map_err(|_| CheckpointError::FormatError("bad optimizer step".into()))?;
        let mut first: Vec<ParamValue<f32>> = layout
            .specs()
            .iter()
            .map(|s| ParamValue::zeros(&s.shape))
            .collect();
        let mut second = first.clone();
        read_values(blob, &mut first, &mut cursor)?;
        read_values(blob, &mut second, &mut cursor)?;
        Some(OptimizerSnapshot {
            first,
            second,
            step,
        })
    } else {
        None
    };

    Ok(Checkpoint {
        config,
        params,
        optimizer,
        epoch,
        seed,
        score: f64::from_bits(score_bits),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build;

    fn small_checkpoint() -> Checkpoint {
        let cfg = crate::net::tests::tiny_config();
        let (_, params) = build::<f32>(&cfg, 11).unwrap();
        Checkpoint {
            config: cfg,
            params,
            optimizer: None,
            epoch: 3,
            seed: 11,
            score: 0.875,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = small_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.seed, 11);
        assert_eq!(loaded.score.to_bits(), ckpt.score.to_bits());
        assert_eq!(loaded.params.values(), ckpt.params.values());
        // saving again reproduces the exact bytes
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &small_checkpoint()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::FormatError(_))
        ));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &small_checkpoint()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::FormatError(_))
        ));
    }

    #[test]
    fn version_bump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &small_checkpoint()).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        let patched = header.replace("version = 1", "version = 9");
        assert_eq!(patched.len(), header.len());
        let mut out = bytes[..16].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        fs::write(&path, out).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::VersionMismatch {
                found: 9,
                expected: 1
            })
        ));
    }

    #[test]
    fn mismatched_shape_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &small_checkpoint()).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        // corrupt the stored shape of conv1.weight (4,1,3,3,3 -> 4,1,3,3,2)
        let patched = header.replace("t,4,1,3,3,3", "t,4,1,3,3,2");
        assert_eq!(patched.len(), header.len());
        let mut out = bytes[..16].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        fs::write(&path, out).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::ShapeMismatch { param, .. }) => {
                assert_eq!(param, "conv1.weight");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
