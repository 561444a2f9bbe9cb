//! SCNC model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "SCNC" | version u32 = 1 | variant id u32 | temperature f64 | layer_count u32
//! per layer (fc0, fc1, [fc2], fc3): in_dim u32 | out_dim u32 | weight f64 row-major | bias f64
//! config_len u64 | TrainConfig as UTF-8 JSON
//! footer: CRC32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, ScanError};
use crate::io_util::{write_atomic, Reader};
use crate::model::{ModelParams, Variant};
use crate::numkit::{LinearLayer, Matrix, Vector};
use crate::training::TrainConfig;

pub const MAGIC: [u8; 4] = *b"SCNC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = &ckpt.params;
    params.validate()?;
    let layers = params.layers();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::from(params.variant.id()).to_le_bytes());
    buf.extend_from_slice(&params.temperature.to_le_bytes());
    buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for (_, layer) in &layers {
        buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        put_f64s(&mut buf, layer.weight.data());
        put_f64s(&mut buf, layer.bias.as_slice());
    }
    let config = serde_json::to_vec(&ckpt.config)?;
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn read_f64s(r: &mut Reader<'_>, n: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = r.take(n.saturating_mul(8), what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_layer(r: &mut Reader<'_>) -> Result<LinearLayer> {
    let in_dim = r.u32("layer in_dim")? as usize;
    let out_dim = r.u32("layer out_dim")? as usize;
    let n = in_dim
        .checked_mul(out_dim)
        .ok_or_else(|| ScanError::Truncated("layer size overflows".into()))?;
    let weight = Matrix::from_vec(in_dim, out_dim, read_f64s(r, n, "layer weight")?)?;
    let bias = Vector::from(read_f64s(r, out_dim, "layer bias")?);
    LinearLayer::new(weight, bias)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(ScanError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ScanError::Version {
            expected: VERSION,
            found: version,
        });
    }
    let variant_id = r.u32("variant")?;
    let variant = u8::try_from(variant_id)
        .ok()
        .and_then(Variant::from_id)
        .ok_or_else(|| ScanError::Contract(format!("unknown variant id {variant_id}")))?;
    let temperature = f64::from_le_bytes(r.take(8, "temperature")?.try_into().unwrap());
    let count = r.u32("layer_count")? as usize;
    let expected = if variant.shares_fc() { 3 } else { 4 };
    if count != expected {
        return Err(ScanError::Contract(format!(
            "variant {variant} stores {expected} layers, file has {count}"
        )));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        layers.push(read_layer(&mut r)?);
    }
    let config_len = r.u64("config length")?;
    let config_bytes = r.take(usize::try_from(config_len).unwrap_or(usize::MAX), "config")?;
    let body_len = r.position();
    let stored = r.u32("checksum footer")?;
    if r.remaining() != 0 {
        return Err(ScanError::Contract(format!(
            "{} unexpected bytes after the checksum footer",
            r.remaining()
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(ScanError::Checksum { stored, computed });
    }
    let config: TrainConfig = serde_json::from_slice(config_bytes)?;

    let fc3 = layers.pop().expect("count checked");
    let fc2 = (!variant.shares_fc()).then(|| layers.pop().expect("count checked"));
    let fc1 = layers.pop().expect("count checked");
    let fc0 = layers.pop().expect("count checked");
    let params = ModelParams {
        fc0,
        fc1,
        fc2,
        fc3,
        variant,
        temperature,
    };
    params.validate()?;
    Ok(Checkpoint { params, config })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
