//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4   b"NLNS"
//! version      u32 1
//! model kind   u8  0 autoencoder, 1 classifier, 2 truncated, 3 custom
//! input shape  3 x u32 (C, H, W)
//! encoder len  u32 (0 = none)
//! config len   u32, followed by the config echo as UTF-8 JSON
//! layer count  u32, followed by one 32-byte record per layer:
//!     kind u8 | activation u8 | frozen u8 | reserved u8
//!     dim0 u32 (out channels / units) | dim1 u32 (in channels / inputs)
//!     kernel u32 | blob offset u64 (bytes) | parameter count u64
//! header crc   u32 CRC-32 of every byte above
//! blob len     u64 bytes
//! blob         f32 parameters in layer order, weights then bias
//! blob crc     u32 CRC-32 of the blob
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::layers::{Activation, Conv2d, Dense, Layer};
use crate::model::{ModelConfig, ModelKind, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NLNS";
pub const FORMAT_VERSION: u32 = 1;
const LAYER_RECORD_LEN: usize = 32;

const KIND_CONV: u8 = 0;
const KIND_POOL: u8 = 1;
const KIND_UPSAMPLE: u8 = 2;
const KIND_FLATTEN: u8 = 3;
const KIND_DENSE: u8 = 4;

fn kind_tag(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Autoencoder => 0,
        ModelKind::Classifier => 1,
        ModelKind::Truncated => 2,
        ModelKind::Custom => 3,
    }
}

fn activation_tag(a: Option<Activation>) -> u8 {
    match a {
        None => 0,
        Some(Activation::Relu) => 1,
        Some(Activation::Sigmoid) => 2,
        Some(Activation::Linear) => 3,
    }
}

/// Serialize a model. Parameters are stored as little-endian `f32`.
pub fn encode(model: &ModelSpec<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind_tag(model.kind));
    for d in model.input_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.encoder_len.unwrap_or(0) as u32).to_le_bytes());
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());

    let mut blob: Vec<u8> = Vec::with_capacity(model.param_count() * 4);
    for (layer, &frozen) in model.layers.iter().zip(&model.frozen) {
        let (tag, dim0, dim1, kernel) = match layer {
            Layer::Conv2d(c) => (KIND_CONV, c.out_channels(), c.in_channels(), c.kernel_size()),
            Layer::MaxPool2x2 => (KIND_POOL, 0, 0, 0),
            Layer::UpsampleNearest2x => (KIND_UPSAMPLE, 0, 0, 0),
            Layer::Flatten => (KIND_FLATTEN, 0, 0, 0),
            Layer::Dense(d) => (KIND_DENSE, d.units(), d.inputs(), 0),
        };
        out.push(tag);
        out.push(activation_tag(layer.activation()));
        out.push(frozen as u8);
        out.push(0);
        out.extend_from_slice(&(dim0 as u32).to_le_bytes());
        out.extend_from_slice(&(dim1 as u32).to_le_bytes());
        out.extend_from_slice(&(kernel as u32).to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&(layer.param_count() as u64).to_le_bytes());
        if let Some((w, b)) = layer.params() {
            for v in w.data().iter().chain(b) {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header_crc = crc32fast::hash(&out);
    out.extend_from_slice(&header_crc.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&crc32fast::hash(&blob).to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct LayerRecord {
    kind: u8,
    activation: u8,
    frozen: u8,
    dim0: usize,
    dim1: usize,
    kernel: usize,
    offset: u64,
    count: u64,
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

/// Parse and validate a checkpoint. Never panics on arbitrary input.
pub fn decode(bytes: &[u8]) -> Result<ModelSpec<f32>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let kind = r.u8()?;
    let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let encoder_len = r.u32()? as usize;
    let config_len = r.u32()? as usize;
    let config_bytes = r.take(config_len)?;
    let layer_count = r.u32()? as usize;
    let records_len = layer_count
        .checked_mul(LAYER_RECORD_LEN)
        .ok_or_else(|| malformed("layer count overflows"))?;
    let records_bytes = r.take(records_len)?;
    let header_end = r.pos;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&bytes[..header_end]);
    if stored != computed {
        return Err(CheckpointError::HeaderCrc { stored, computed });
    }

    let kind = match kind {
        0 => ModelKind::Autoencoder,
        1 => ModelKind::Classifier,
        2 => ModelKind::Truncated,
        3 => ModelKind::Custom,
        tag => {
            return Err(CheckpointError::UnknownTag {
                field: "model kind",
                tag,
            })
        }
    };
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| malformed(format!("config echo: {e}")))?;

    let mut rec_reader = Reader {
        bytes: records_bytes,
        pos: 0,
    };
    let mut records = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = rec_reader.u8()?;
        let activation = rec_reader.u8()?;
        let frozen = rec_reader.u8()?;
        let _reserved = rec_reader.u8()?;
        records.push(LayerRecord {
            kind,
            activation,
            frozen,
            dim0: rec_reader.u32()? as usize,
            dim1: rec_reader.u32()? as usize,
            kernel: rec_reader.u32()? as usize,
            offset: rec_reader.u64()?,
            count: rec_reader.u64()?,
        });
    }

    let blob_len = r.u64()?;
    let blob_len = usize::try_from(blob_len).map_err(|_| malformed("blob length overflows"))?;
    let blob = r.take(blob_len)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(blob);
    if stored != computed {
        return Err(CheckpointError::BlobCrc { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(malformed(format!(
            "{} trailing bytes after blob CRC",
            bytes.len() - r.pos
        )));
    }
    if blob_len % 4 != 0 {
        return Err(malformed("blob length is not a multiple of 4"));
    }

    let mut cursor = 0u64;
    let mut layers = Vec::with_capacity(layer_count);
    let mut frozen = Vec::with_capacity(layer_count);
    for (i, rec) in records.iter().enumerate() {
        let activation = match rec.activation {
            0 => None,
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            3 => Some(Activation::Linear),
            tag => {
                return Err(CheckpointError::UnknownTag {
                    field: "activation",
                    tag,
                })
            }
        };
        frozen.push(match rec.frozen {
            0 => false,
            1 => true,
            tag => return Err(CheckpointError::UnknownTag { field: "frozen", tag }),
        });
        let expected_count = match rec.kind {
            KIND_CONV => rec
                .dim0
                .checked_mul(rec.dim1)
                .and_then(|v| v.checked_mul(rec.kernel))
                .and_then(|v| v.checked_mul(rec.kernel))
                .and_then(|v| v.checked_add(rec.dim0)),
            KIND_DENSE => rec
                .dim0
                .checked_mul(rec.dim1)
                .and_then(|v| v.checked_add(rec.dim0)),
            KIND_POOL | KIND_UPSAMPLE | KIND_FLATTEN => Some(0),
            tag => return Err(CheckpointError::UnknownLayerKind { tag, version }),
        }
        .ok_or_else(|| malformed(format!("layer {i} dimensions overflow")))?;
        if rec.offset != cursor || rec.count != expected_count as u64 {
            return Err(malformed(format!(
                "layer {i} parameter table entry (offset {}, count {}) disagrees with its shape",
                rec.offset, rec.count
            )));
        }
        let end = cursor
            .checked_add(rec.count.saturating_mul(4))
            .filter(|&e| e <= blob_len as u64)
            .ok_or_else(|| malformed(format!("layer {i} parameters exceed the blob")))?;
        let floats: Vec<f32> = blob[cursor as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor = end;

        let needs_activation = matches!(rec.kind, KIND_CONV | KIND_DENSE);
        if needs_activation != activation.is_some() {
            return Err(malformed(format!("layer {i} activation tag does not fit its kind")));
        }
        let layer = match rec.kind {
            KIND_CONV => {
                if rec.kernel % 2 == 0 || rec.dim0 == 0 || rec.dim1 == 0 {
                    return Err(malformed(format!("layer {i} has invalid conv dimensions")));
                }
                let (w, b) = floats.split_at(floats.len() - rec.dim0);
                Layer::Conv2d(Conv2d {
                    weight: Tensor::from_vec([rec.dim0, rec.dim1, rec.kernel, rec.kernel], w.to_vec())
                        .map_err(|e| malformed(e.to_string()))?,
                    bias: b.to_vec(),
                    activation: activation.unwrap(),
                })
            }
            KIND_DENSE => {
                if rec.dim0 == 0 || rec.dim1 == 0 {
                    return Err(malformed(format!("layer {i} has invalid dense dimensions")));
                }
                let (w, b) = floats.split_at(floats.len() - rec.dim0);
                Layer::Dense(Dense {
                    weight: Tensor::from_vec([rec.dim0, rec.dim1, 1, 1], w.to_vec())
                        .map_err(|e| malformed(e.to_string()))?,
                    bias: b.to_vec(),
                    activation: activation.unwrap(),
                })
            }
            KIND_POOL => Layer::MaxPool2x2,
            KIND_UPSAMPLE => Layer::UpsampleNearest2x,
            _ => Layer::Flatten,
        };
        layers.push(layer);
    }
    if cursor != blob_len as u64 {
        return Err(malformed("blob has unreferenced trailing parameters"));
    }

    let model = ModelSpec {
        kind,
        input_shape,
        layers,
        encoder_len: (encoder_len > 0).then_some(encoder_len),
        frozen,
        config,
    };
    // Guard shape propagation against absurd declared sizes before validating.
    if input_shape.iter().any(|&d| d == 0 || d > 1 << 16) {
        return Err(malformed(format!("implausible input shape {input_shape:?}")));
    }
    model
        .validate()
        .map_err(|e| malformed(format!("invalid model: {e}")))?;
    Ok(model)
}

/// Write atomically: the file appears complete or not at all.
pub fn save_checkpoint(model: &ModelSpec<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model);
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelSpec<f32>> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_autoencoder, build_classifier, AutoencoderConfig, ClassifierConfig};

    fn small_ae() -> ModelSpec<f32> {
        let cfg = AutoencoderConfig {
            input_size: 8,
            channel_schedule: vec![4, 2],
            ..Default::default()
        };
        let mut m = build_autoencoder(&cfg, 3).unwrap();
        m.frozen[0] = true;
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small_ae();
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);

        let c = build_classifier::<f32>(&ClassifierConfig::default(), 9).unwrap();
        assert_eq!(decode(&encode(&c)).unwrap(), c);
    }

    #[test]
    fn blob_corruption_is_a_crc_error() {
        let m = small_ae();
        let mut bytes = encode(&m);
        let idx = bytes.len() - 10;
        bytes[idx] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(CheckpointError::BlobCrc { .. })));
    }

    #[test]
    fn header_corruption_is_detected() {
        let mut bytes = encode(&small_ae());
        bytes[20] ^= 1;
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn truncation_is_structured() {
        let bytes = encode(&small_ae());
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode(&bytes[..cut]),
                Err(CheckpointError::Truncated { .. }) | Err(CheckpointError::BadMagic)
            ));
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = encode(&small_ae());
        bytes[4] = 2;
        assert_eq!(
            decode(&bytes),
            Err(CheckpointError::UnsupportedVersion {
                found: 2,
                supported: 1
            })
        );
    }

    #[test]
    fn unknown_layer_kind_is_versioned() {
        let m = small_ae();
        let mut bytes = encode(&m);
        // First layer record's kind byte: recompute the header CRC so only
        // the tag is wrong.
        let config_len = u32::from_le_bytes(bytes[25..29].try_into().unwrap()) as usize;
        let rec0 = 29 + config_len + 4;
        bytes[rec0] = 99;
        let header_end = rec0 + LAYER_RECORD_LEN * m.layers.len();
        let crc = crc32fast::hash(&bytes[..header_end]);
        bytes[header_end..header_end + 4].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(
            decode(&bytes),
            Err(CheckpointError::UnknownLayerKind { tag: 99, version: 1 })
        );
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = small_ae();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }
}
