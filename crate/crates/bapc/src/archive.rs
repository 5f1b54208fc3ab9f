//! On-disk archives for feature sequences and frame labels.
//!
//! Both use the same little-endian container: a 4-byte magic, a format
//! version, then one length-prefixed record per utterance. Features store
//! row-major 32-bit floats; labels store 32-bit class indices plus the class
//! count in the header. Readers are strict — a short file or a duplicated
//! utterance id is an error, not a warning.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bytes::{ReadLe, WriteLe};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::objectives::AlignmentLabels;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FARC";
pub const LABEL_MAGIC: &[u8; 4] = b"LARC";
pub const ARCHIVE_VERSION: u32 = 1;

/// Sanity bound on record fields so a corrupt length prefix fails fast
/// instead of attempting a huge allocation.
const MAX_FIELD: u32 = 1 << 28;

fn bad(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {}", path.display(), what))
}

fn check_unique<'a>(path: &Path, seen: &mut HashSet<&'a str>, id: &'a str) -> Result<()> {
    if !seen.insert(id) {
        return Err(bad(path, format!("duplicate utterance id `{id}`")));
    }
    Ok(())
}

fn read_string(r: &mut impl Read, path: &Path, what: &str) -> Result<String> {
    let len = r.u32_le()?;
    if len > MAX_FIELD {
        return Err(bad(path, format!("{what} length {len} is not plausible")));
    }
    let bytes = r.bytes_exact(len as usize)?;
    String::from_utf8(bytes).map_err(|_| bad(path, format!("{what} is not UTF-8")))
}

fn read_dim(r: &mut impl Read, path: &Path, what: &str) -> Result<usize> {
    let v = r.u32_le()?;
    if v > MAX_FIELD {
        return Err(bad(path, format!("{what} {v} is not plausible")));
    }
    Ok(v as usize)
}

fn check_header(r: &mut impl Read, path: &Path, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(bad(
            path,
            format!(
                "bad magic {:?}, want {}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = r.u32_le()?;
    if version != ARCHIVE_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    Ok(())
}

/// Write feature sequences; values are stored as 32-bit floats.
pub fn write_feature_archive(path: &Path, seqs: &[FeatureSequence]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in seqs {
        check_unique(path, &mut seen, &s.utterance_id)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.put_u32_le(ARCHIVE_VERSION)?;
    w.put_u32_le(seqs.len() as u32)?;
    for s in seqs {
        w.put_u32_le(s.utterance_id.len() as u32)?;
        w.write_all(s.utterance_id.as_bytes())?;
        w.put_u32_le(s.num_frames() as u32)?;
        w.put_u32_le(s.dim() as u32)?;
        for &v in s.frames.data() {
            w.put_f32_le(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a feature archive written by [`write_feature_archive`].
///
/// Frame timing is not stored; sequences come back with the default
/// 25 ms / 10 ms stamp.
pub fn read_feature_archive(path: &Path) -> Result<Vec<FeatureSequence>> {
    let mut r = BufReader::new(File::open(path)?);
    check_header(&mut r, path, FEATURE_MAGIC)?;
    let count = read_dim(&mut r, path, "record count")?;
    let mut seqs = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let id = read_string(&mut r, path, "utterance id")?;
        if !seen.insert(id.clone()) {
            return Err(bad(path, format!("duplicate utterance id `{id}`")));
        }
        let t = read_dim(&mut r, path, "frame count")?;
        let d = read_dim(&mut r, path, "feature dim")?;
        let mut values = Vec::with_capacity(t * d);
        for _ in 0..t * d {
            values.push(r.f32_le()? as f64);
        }
        seqs.push(FeatureSequence::new(id, Tensor::new(vec![t, d], values)?));
    }
    Ok(seqs)
}

/// Write frame labels with their class count.
pub fn write_label_archive(
    path: &Path,
    labels: &[AlignmentLabels],
    num_classes: usize,
) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::Invalid("label archive needs at least one class".into()));
    }
    let mut seen = HashSet::new();
    for l in labels {
        check_unique(path, &mut seen, &l.utterance_id)?;
        for &v in &l.labels {
            if v as usize >= num_classes {
                return Err(Error::LabelOutOfRange { label: v, classes: num_classes });
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(LABEL_MAGIC)?;
    w.put_u32_le(ARCHIVE_VERSION)?;
    w.put_u32_le(num_classes as u32)?;
    w.put_u32_le(labels.len() as u32)?;
    for l in labels {
        w.put_u32_le(l.utterance_id.len() as u32)?;
        w.write_all(l.utterance_id.as_bytes())?;
        w.put_u32_le(l.labels.len() as u32)?;
        for &v in &l.labels {
            w.put_u32_le(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a label archive; returns the records and the class count.
pub fn read_label_archive(path: &Path) -> Result<(Vec<AlignmentLabels>, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    check_header(&mut r, path, LABEL_MAGIC)?;
    let num_classes = read_dim(&mut r, path, "class count")?;
    if num_classes == 0 {
        return Err(bad(path, "class count is zero"));
    }
    let count = read_dim(&mut r, path, "record count")?;
    let mut out = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let id = read_string(&mut r, path, "utterance id")?;
        if !seen.insert(id.clone()) {
            return Err(bad(path, format!("duplicate utterance id `{id}`")));
        }
        let t = read_dim(&mut r, path, "label count")?;
        let mut labels = Vec::with_capacity(t);
        for _ in 0..t {
            let v = r.u32_le()?;
            if v as usize >= num_classes {
                return Err(Error::LabelOutOfRange { label: v, classes: num_classes });
            }
            labels.push(v);
        }
        out.push(AlignmentLabels::new(id, labels));
    }
    Ok((out, num_classes))
}
