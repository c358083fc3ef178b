//! Checkpoint container: "PSEG" magic, version, a key=value config block, a
//! tensor directory, little-endian f32 payloads, and a trailing CRC32 over
//! everything before it.
//!
//! Layout:
//!
//! ```text
//! magic   4 bytes "PSEG"
//! version u16 LE (currently 1)
//! config  u32 LE byte length, then UTF-8 "key=value\n" lines
//! dir     u32 LE tensor count, then per tensor:
//!         u32 LE name length + name bytes,
//!         u32 LE rank, rank * u32 LE dims,
//!         u64 LE payload offset from file start
//! payload f32 LE data, contiguous in directory order
//! crc     u32 LE CRC32 of all preceding bytes
//! ```
//!
//! Optimizer moments live under the reserved `opt/` name prefix; run metadata
//! under `meta/`. Loading a checkpoint reproduces the saved training state
//! bit-exactly; any version or checksum mismatch is a hard error.

use std::path::Path;

use super::{crc32, write_atomic};
use crate::error::PersistError;
use crate::losses::LossReport;
use crate::network::{Model, ModelConfig, Param};
use crate::tensor::adam::AdamState;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"PSEG";
pub const VERSION: u16 = 1;

/// Generic decoded checkpoint: config lines plus named tensors in file order.
pub struct CheckpointFile {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl CheckpointFile {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn encode(file: &CheckpointFile) -> Vec<u8> {
    let mut config_text = String::new();
    for (k, v) in &file.config {
        config_text.push_str(k);
        config_text.push('=');
        config_text.push_str(v);
        config_text.push('\n');
    }
    let config_bytes = config_text.into_bytes();

    // Directory size first so payload offsets are known.
    let mut dir_size = 4usize;
    for (name, t) in &file.tensors {
        dir_size += 4 + name.len() + 4 + 4 * t.shape().len() + 8;
    }
    let header_size = 4 + 2 + 4 + config_bytes.len() + dir_size;

    let mut out = Vec::with_capacity(header_size + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_bytes);
    out.extend_from_slice(&(file.tensors.len() as u32).to_le_bytes());
    let mut offset = header_size as u64;
    for (name, t) in &file.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    debug_assert_eq!(out.len(), header_size);
    for (_, t) in &file.tensors {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], PersistError> {
        if self.pos + n > self.bytes.len() {
            return Err(PersistError::Truncated(what.into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, PersistError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, PersistError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, PersistError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointFile, PersistError> {
    if bytes.len() < 4 + 2 + 4 + 4 + 4 {
        return Err(PersistError::Truncated("checkpoint".into()));
    }
    // CRC covers everything before the trailing 4 bytes.
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32(body);
    if stored != computed {
        return Err(PersistError::CrcMismatch { stored, computed });
    }

    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(PersistError::BadMagic { expected: "PSEG" });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(PersistError::UnknownVersion {
            found: version,
            supported: VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config block")?;
    let config_text = std::str::from_utf8(config_bytes).map_err(|_| PersistError::Malformed {
        what: "checkpoint config",
        msg: "not utf-8".into(),
    })?;
    let mut config = Vec::new();
    for line in config_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| PersistError::Malformed {
            what: "checkpoint config",
            msg: format!("line without '=': {line}"),
        })?;
        config.push((k.to_string(), v.to_string()));
    }

    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| PersistError::Malformed {
                what: "tensor name",
                msg: "not utf-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let offset = r.u64("payload offset")? as usize;
        entries.push((name, shape, offset));
    }
    let header_end = r.pos;

    let mut tensors = Vec::with_capacity(count);
    let mut expected = header_end;
    for (name, shape, offset) in entries {
        let numel: usize = shape.iter().product();
        if offset != expected {
            return Err(PersistError::Malformed {
                what: "tensor directory",
                msg: format!("payload for '{name}' at {offset}, expected {expected}"),
            });
        }
        let end = offset + 4 * numel;
        if end > body.len() {
            return Err(PersistError::Truncated(format!("payload of '{name}'")));
        }
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((
            name,
            Tensor::new(&shape, data).map_err(|e| PersistError::Malformed {
                what: "tensor payload",
                msg: e.to_string(),
            })?,
        ));
        expected = end;
    }
    if expected != body.len() {
        return Err(PersistError::TrailingGarbage);
    }
    Ok(CheckpointFile { config, tensors })
}

fn f32_bits(v: f32) -> String {
    format!("{:#010x}", v.to_bits())
}

fn parse_f32_bits(s: &str) -> Result<f32, PersistError> {
    let raw = s.strip_prefix("0x").ok_or_else(|| PersistError::Malformed {
        what: "checkpoint config",
        msg: format!("expected hex bits, got {s}"),
    })?;
    u32::from_str_radix(raw, 16)
        .map(f32::from_bits)
        .map_err(|_| PersistError::Malformed {
            what: "checkpoint config",
            msg: format!("bad hex bits {s}"),
        })
}

fn parse_num<T: std::str::FromStr>(file: &CheckpointFile, key: &str) -> Result<T, PersistError> {
    file.config_value(key)
        .ok_or_else(|| PersistError::Malformed {
            what: "checkpoint config",
            msg: format!("missing key {key}"),
        })?
        .parse()
        .map_err(|_| PersistError::Malformed {
            what: "checkpoint config",
            msg: format!("bad value for {key}"),
        })
}

/// Serializes a full training state (model, optimizer moments, counters).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), PersistError> {
    let cfg = &state.model.config;
    let widths = cfg
        .widths
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let config = vec![
        ("d".into(), cfg.d.to_string()),
        ("widths".into(), widths),
        ("input_h".into(), cfg.input_hw.0.to_string()),
        ("input_w".into(), cfg.input_hw.1.to_string()),
        ("model_seed".into(), cfg.seed.to_string()),
        ("act_slope_bits".into(), f32_bits(cfg.act_slope)),
        ("epoch".into(), state.epoch.to_string()),
        ("step".into(), state.step.to_string()),
        ("adam_step".into(), state.adam.step.to_string()),
    ];

    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for p in &state.model.params {
        tensors.push((p.name.clone(), p.value.clone()));
    }
    for (p, m) in state.model.params.iter().zip(&state.adam.m) {
        tensors.push((
            format!("opt/m/{}", p.name),
            Tensor::new(p.value.shape(), m.clone()).expect("moment shape"),
        ));
    }
    for (p, v) in state.model.params.iter().zip(&state.adam.v) {
        tensors.push((
            format!("opt/v/{}", p.name),
            Tensor::new(p.value.shape(), v.clone()).expect("moment shape"),
        ));
    }
    let r = state.running;
    tensors.push((
        "meta/running_loss".into(),
        Tensor::new(&[7], r.components().to_vec()).expect("running loss shape"),
    ));

    write_atomic(path, &encode(&CheckpointFile { config, tensors }))
}

/// Loads a checkpoint back into a training state.
pub fn load_checkpoint(path: &Path) -> Result<TrainState, PersistError> {
    let file = decode(&std::fs::read(path)?)?;

    let widths: Vec<usize> = file
        .config_value("widths")
        .ok_or_else(|| PersistError::Malformed {
            what: "checkpoint config",
            msg: "missing key widths".into(),
        })?
        .split(',')
        .map(|s| {
            s.parse().map_err(|_| PersistError::Malformed {
                what: "checkpoint config",
                msg: format!("bad width {s}"),
            })
        })
        .collect::<Result<_, _>>()?;
    let model_config = ModelConfig {
        d: parse_num(&file, "d")?,
        widths,
        input_hw: (parse_num(&file, "input_h")?, parse_num(&file, "input_w")?),
        seed: parse_num(&file, "model_seed")?,
        act_slope: parse_f32_bits(file.config_value("act_slope_bits").ok_or_else(|| {
            PersistError::Malformed {
                what: "checkpoint config",
                msg: "missing key act_slope_bits".into(),
            }
        })?)?,
    };

    let mut params = Vec::new();
    for (name, t) in &file.tensors {
        if !name.starts_with("opt/") && !name.starts_with("meta/") {
            params.push(Param {
                name: name.clone(),
                value: t.clone(),
            });
        }
    }
    if params.is_empty() {
        return Err(PersistError::Malformed {
            what: "checkpoint",
            msg: "no model parameters".into(),
        });
    }
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for p in &params {
        let mm = file
            .tensor(&format!("opt/m/{}", p.name))
            .ok_or_else(|| PersistError::Malformed {
                what: "checkpoint",
                msg: format!("missing first moment for {}", p.name),
            })?;
        let vv = file
            .tensor(&format!("opt/v/{}", p.name))
            .ok_or_else(|| PersistError::Malformed {
                what: "checkpoint",
                msg: format!("missing second moment for {}", p.name),
            })?;
        m.push(mm.data().to_vec());
        v.push(vv.data().to_vec());
    }

    let running = file
        .tensor("meta/running_loss")
        .map(|t| {
            let d = t.data();
            LossReport {
                la: d[0],
                lr: d[1],
                lrc: d[2],
                lu: d[3],
                ls: d[4],
                lg: d[5],
                total: d[6],
                degenerate_projection: false,
            }
        })
        .unwrap_or_default();

    Ok(TrainState {
        model: Model {
            config: model_config,
            params,
        },
        adam: AdamState {
            m,
            v,
            step: parse_num(&file, "adam_step")?,
        },
        step: parse_num(&file, "step")?,
        epoch: parse_num(&file, "epoch")?,
        running,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Model, ModelConfig};

    fn tiny_state() -> TrainState {
        TrainState::new(Model::init(ModelConfig {
            d: 4,
            widths: vec![4],
            input_hw: (8, 8),
            seed: 5,
            act_slope: 0.01,
        }))
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut state = tiny_state();
        state.step = 42;
        state.epoch = 3;
        state.adam.step = 40;
        state.adam.m[0][0] = 0.125;
        state.running.total = 1.5;
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model.config, state.model.config);
        assert_eq!(loaded.model.params, state.model.params);
        assert_eq!(loaded.adam, state.adam);
        assert_eq!((loaded.step, loaded.epoch), (42, 3));
        assert_eq!(loaded.running.total, 1.5);
        // Saving the loaded state reproduces the same bytes.
        let path2 = dir.path().join("b.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&tiny_state(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            decode(&bytes),
            Err(PersistError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&tiny_state(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2; // version low byte
        let body_len = bytes.len() - 4;
        let crc = crate::persist::crc32(&bytes[..body_len]);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(PersistError::UnknownVersion { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&tiny_state(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 9];
        assert!(decode(cut).is_err());
    }
}
