//! SCNF frame-feature files.
//!
//! Little-endian layout:
//!
//! ```text
//! "SCNF" | version u32 = 1 | record_count u64 | feature_dim u32
//! per record: identity u32 | camera u32 | frame_count u32 | frame_count*feature_dim f32
//! footer: CRC32 (IEEE) of every preceding byte
//! ```
//!
//! A JSON manifest with the same basename and a `.json` extension lists the
//! byte offset of every record.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, SequenceRecord};
use crate::error::{Result, ScanError};
use crate::io_util::{write_atomic, Reader};
use crate::numkit::Matrix;

pub const MAGIC: [u8; 4] = *b"SCNF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;
const RECORD_HEADER_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub identity: u32,
    pub camera: u32,
    pub frame_count: u32,
    /// Byte offset of the record header within the SCNF file.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub format: String,
    pub version: u32,
    pub feature_dim: u32,
    pub record_count: u64,
    pub records: Vec<ManifestRecord>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| ScanError::Contract(format!("{what} {v} does not fit in u32")))
}

/// Serializes a dataset; values are stored as `f32`.
pub fn encode_features(dataset: &Dataset) -> Result<(Vec<u8>, FeatureManifest)> {
    let dim = dataset.feature_dim;
    let mut buf = Vec::with_capacity(
        HEADER_LEN
            + 4
            + dataset
                .records
                .iter()
                .map(|r| RECORD_HEADER_LEN + 4 * r.features.data().len())
                .sum::<usize>(),
    );
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.records.len() as u64).to_le_bytes());
    buf.extend_from_slice(&to_u32(dim, "feature_dim")?.to_le_bytes());
    let mut entries = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        if r.features.cols() != dim {
            return Err(ScanError::dim("write_features", dim, r.features.cols()));
        }
        let frame_count = to_u32(r.frames(), "frame_count")?;
        entries.push(ManifestRecord {
            identity: r.identity,
            camera: r.camera,
            frame_count,
            offset: buf.len() as u64,
        });
        buf.extend_from_slice(&r.identity.to_le_bytes());
        buf.extend_from_slice(&r.camera.to_le_bytes());
        buf.extend_from_slice(&frame_count.to_le_bytes());
        for &v in r.features.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let manifest = FeatureManifest {
        format: "SCNF".into(),
        version: VERSION,
        feature_dim: dim as u32,
        record_count: dataset.records.len() as u64,
        records: entries,
    };
    Ok((buf, manifest))
}

/// Writes the SCNF file and its manifest, each atomically.
pub fn write_features(dataset: &Dataset, path: &Path) -> Result<()> {
    let (bytes, manifest) = encode_features(dataset)?;
    write_atomic(path, &bytes)?;
    write_atomic(&manifest_path(path), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_header(r: &mut Reader<'_>) -> Result<(u64, usize)> {
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
    let count = r.u64("record_count")?;
    let dim = r.u32("feature_dim")? as usize;
    Ok((count, dim))
}

fn read_record_body(r: &mut Reader<'_>, dim: usize) -> Result<SequenceRecord> {
    let identity = r.u32("identity")?;
    let camera = r.u32("camera")?;
    let frames = r.u32("frame_count")? as usize;
    let n = frames
        .checked_mul(dim)
        .ok_or_else(|| ScanError::Truncated("frame payload size overflows".into()))?;
    let raw = r.take(n.saturating_mul(4), "frame payload")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(SequenceRecord {
        identity,
        camera,
        features: Matrix::from_vec(frames, dim, data)?,
    })
}

pub fn decode_features(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    let (count, dim) = read_header(&mut r)?;
    let mut records = Vec::new();
    for _ in 0..count {
        records.push(read_record_body(&mut r, dim)?);
    }
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
    Dataset::new(dim, records)
}

pub fn read_features(path: &Path) -> Result<Dataset> {
    decode_features(&fs::read(path)?)
}

pub fn read_manifest(path: &Path) -> Result<FeatureManifest> {
    Ok(serde_json::from_slice(&fs::read(manifest_path(path))?)?)
}

/// Reads a single record through the manifest offsets without decoding the
/// rest of the file. The checksum is not verified on this path.
pub fn read_record(path: &Path, index: usize) -> Result<SequenceRecord> {
    let manifest = read_manifest(path)?;
    let entry = manifest.records.get(index).ok_or_else(|| {
        ScanError::Contract(format!(
            "record {index} out of range ({} records)",
            manifest.records.len()
        ))
    })?;
    let bytes = fs::read(path)?;
    let mut header = Reader::new(&bytes);
    let (_, dim) = read_header(&mut header)?;
    let offset = entry.offset as usize;
    if offset > bytes.len() {
        return Err(ScanError::Truncated(format!(
            "record offset {offset} past end of file"
        )));
    }
    let mut r = Reader::new(&bytes[offset..]);
    read_record_body(&mut r, dim)
}
