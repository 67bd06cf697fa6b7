//! Feature files (binary) and alignment files (text).
//!
//! A feature file is a 16-byte header (`VCFT`, version, Q, T as little-endian
//! u32) followed by Q×T row-major f32 features, T f32 log-F0 values (NaN on
//! unvoiced frames), T voicing bytes (0 or 1), and a u32-length-prefixed
//! aperiodicity payload.

use std::fmt::Write as _;
use std::path::Path;

use vclab_core::dataset::{AcousticFeatureSeq, PhonemeAlignment};

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"VCFT";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(seq: &AcousticFeatureSeq) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.u32(seq.q() as u32);
    w.u32(seq.frames() as u32);
    for &v in seq.features() {
        w.f32(v as f32);
    }
    for (&f, &voiced) in seq.log_f0().iter().zip(seq.voiced()) {
        w.f32(if voiced { f as f32 } else { f32::NAN });
    }
    for &v in seq.voiced() {
        w.u8(v as u8);
    }
    w.u32(seq.aperiodicity().len() as u32);
    w.buf.extend_from_slice(seq.aperiodicity());
    w.buf
}

/// Decodes a feature file; `id` names the utterance in validation errors.
pub fn decode_features(data: &[u8], path: &Path, id: &str) -> Result<AcousticFeatureSeq> {
    let mut r = Reader::new(data, path);
    r.header(FEATURE_MAGIC, FEATURE_VERSION)?;
    let q = r.u32()? as usize;
    let t = r.u32()? as usize;
    let n = q.checked_mul(t).ok_or_else(|| r.error("Q×T overflows"))?;
    let expected_min = n.saturating_mul(4).saturating_add(t.saturating_mul(5)).saturating_add(4);
    if data.len() < 16 + expected_min {
        return Err(r.error(format!("{} bytes is too short for Q={q}, T={t}", data.len())));
    }
    let features = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    let raw_f0 = (0..t).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    let mut voiced = Vec::with_capacity(t);
    for i in 0..t {
        voiced.push(match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(r.error(format!("voicing byte {b} at frame {i} is neither 0 nor 1"))),
        });
    }
    let log_f0 = raw_f0.iter().zip(&voiced).map(|(&f, &v)| if v { f } else { f64::NAN }).collect();
    let ap_len = r.u32()? as usize;
    let aperiodicity = r.take(ap_len)?.to_vec();
    r.finish()?;
    Ok(AcousticFeatureSeq::new_for(id, q, t, features, log_f0, voiced, aperiodicity)?)
}

pub fn read_features(path: &Path, id: &str) -> Result<AcousticFeatureSeq> {
    decode_features(&read_file(path)?, path, id)
}

pub fn write_features(path: &Path, seq: &AcousticFeatureSeq) -> Result<()> {
    write_file(path, &encode_features(seq))
}

/// One 1-based label per line; blank lines are ignored.
pub fn parse_alignment(text: &str, path: &Path) -> Result<PhonemeAlignment> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let label: usize = line
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: {line:?} is not a phoneme label", i + 1)))?;
        if label == 0 {
            return Err(Error::format(path, format!("line {}: labels are 1-based", i + 1)));
        }
        labels.push(label - 1);
    }
    Ok(PhonemeAlignment::new(labels))
}

pub fn format_alignment(alignment: &PhonemeAlignment) -> String {
    let mut s = String::with_capacity(alignment.len() * 3);
    for &p in alignment.labels() {
        writeln!(s, "{}", p + 1).unwrap();
    }
    s
}

pub fn read_alignment(path: &Path) -> Result<PhonemeAlignment> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment(&text, path)
}

pub fn write_alignment(path: &Path, alignment: &PhonemeAlignment) -> Result<()> {
    write_file(path, format_alignment(alignment).as_bytes())
}
