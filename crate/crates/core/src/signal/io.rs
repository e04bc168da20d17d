//! I/Q capture files.
//!
//! Layout: one JSON header line terminated by `\n`
//! (`{"count":N,"length":L,"sample_rate":fs,"labels_present":bool}`),
//! then `N * L` interleaved little-endian `f32` I,Q pairs in record-major
//! order, then, when `labels_present`, `N` little-endian `i32` labels
//! (`-1` marks a record without ground truth).

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::IqRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqFileHeader {
    pub count: usize,
    pub length: usize,
    pub sample_rate: f64,
    pub labels_present: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqFile {
    pub sample_rate: f64,
    pub records: Vec<IqRecord>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Serializes records; the label block carries each record's ground truth.
pub fn encode_iq(records: &[IqRecord], sample_rate: f64) -> Result<Vec<u8>> {
    let length = records.first().map_or(0, IqRecord::len);
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.len() != length) {
        return Err(Error::config(format!(
            "record {i} has {} samples, expected {length}",
            r.len()
        )));
    }
    let header = IqFileHeader {
        count: records.len(),
        length,
        sample_rate,
        labels_present: records.iter().any(|r| r.emitter_truth.or(r.label).is_some()),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::config(e.to_string()))?;
    out.push(b'\n');
    out.reserve(records.len() * (length * 8 + 4));
    for r in records {
        for s in &r.samples {
            out.extend_from_slice(&(s.re as f32).to_le_bytes());
            out.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
    }
    if header.labels_present {
        for r in records {
            let label = match r.emitter_truth.or(r.label) {
                Some(l) => i32::try_from(l).map_err(|_| Error::config(format!("label {l} too large")))?,
                None => -1,
            };
            out.extend_from_slice(&label.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_iq(bytes: &[u8]) -> Result<IqFile> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| parse_err(bytes.len(), "missing header line terminator"))?;
    let header: IqFileHeader =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| parse_err(0, format!("malformed header: {e}")))?;
    let payload_start = newline + 1;
    let record_bytes = header
        .length
        .checked_mul(8)
        .ok_or_else(|| parse_err(0, "record length overflows"))?;
    let sample_bytes = header
        .count
        .checked_mul(record_bytes)
        .ok_or_else(|| parse_err(0, "record count overflows"))?;
    let label_bytes = if header.labels_present { header.count * 4 } else { 0 };
    let expected = payload_start + sample_bytes + label_bytes;
    if bytes.len() < expected {
        // Report where the first incomplete record (or the label block) starts.
        let available = bytes.len() - payload_start;
        let offset = if available < sample_bytes && record_bytes > 0 {
            payload_start + (available / record_bytes) * record_bytes
        } else {
            payload_start + sample_bytes
        };
        return Err(parse_err(
            offset,
            format!(
                "truncated payload: header promises {} records of {} samples ({} bytes), file has {}",
                header.count,
                header.length,
                expected,
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(parse_err(expected, format!("{} trailing bytes after payload", bytes.len() - expected)));
    }
    let f32_at = |pos: usize| f32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as f64;
    let mut records = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let base = payload_start + i * record_bytes;
        let samples = (0..header.length)
            .map(|k| Complex64::new(f32_at(base + 8 * k), f32_at(base + 8 * k + 4)))
            .collect();
        records.push(IqRecord::new(samples, None));
    }
    if header.labels_present {
        let base = payload_start + sample_bytes;
        for (i, r) in records.iter_mut().enumerate() {
            let pos = base + 4 * i;
            let raw = i32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
            let truth = match raw {
                -1 => None,
                l if l >= 0 => Some(l as usize),
                l => return Err(parse_err(pos, format!("invalid label {l}"))),
            };
            r.label = truth;
            r.emitter_truth = truth;
        }
    }
    Ok(IqFile {
        sample_rate: header.sample_rate,
        records,
    })
}

pub fn save_iq_file(path: impl AsRef<Path>, records: &[IqRecord], sample_rate: f64) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_iq(records, sample_rate)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_iq_file(path: impl AsRef<Path>) -> Result<IqFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_iq(&bytes)
}
