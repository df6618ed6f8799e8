//! Binary containers for datasets and checkpoints.
//!
//! Both share one layout: an 8-byte magic, a little-endian `u64` byte length,
//! that many bytes of UTF-8 JSON header, then a raw payload.
//!
//! Dataset (`EEGTNSR1`): header `{dims, subjects, labels_offset}`, then the
//! `[N, t, c, w, h]` tensor as row-major little-endian `f32`, then one label
//! byte per sample (`255` marks an unlabeled sample). `labels_offset` is the
//! absolute byte offset of the label block.
//!
//! Checkpoint (`EEGCKPT1`): header with model configuration, normalisation
//! statistics, attention reference, metadata and the list of parameter
//! blocks, then every parameter as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};
use crate::imaging::{MultiFrameEEGImage, SubjectDomain};
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"EEGTNSR1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EEGCKPT1";
pub const UNLABELED: u8 = 255;

/// Byte length of the magic plus the header length prefix.
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub start: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub dims: [usize; 5],
    pub subjects: Vec<SubjectEntry>,
    pub labels_offset: u64,
}

/// Magic, length prefix and header bytes.
pub(crate) fn frame_header(magic: &[u8; 8], header_json: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREAMBLE + header_json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json);
    out
}

/// Splits a container into its JSON header bytes and the byte offset where
/// the payload starts.
pub(crate) fn read_header<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], usize)> {
    if bytes.len() < PREAMBLE {
        return Err(data_err!("file is {} bytes, shorter than the {PREAMBLE}-byte preamble", bytes.len()));
    }
    if &bytes[..8] != magic {
        return Err(data_err!(
            "bad magic at offset 0: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&bytes[..8])
        ));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = PREAMBLE
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| data_err!("header length {len} at offset 8 runs past end of file ({} bytes)", bytes.len()))?;
    Ok((&bytes[PREAMBLE..end], end))
}

pub fn encode_dataset(domains: &[SubjectDomain]) -> Result<Vec<u8>> {
    let first = domains.first().ok_or_else(|| data_err!("dataset has no subjects"))?;
    let shape = first.sample_shape().to_vec();
    let mut subjects = Vec::with_capacity(domains.len());
    let mut n = 0;
    for d in domains {
        if d.sample_shape() != shape.as_slice() {
            return Err(data_err!("subject {:?} has sample shape {:?}, expected {:?}", d.subject_id, d.sample_shape(), shape));
        }
        subjects.push(SubjectEntry { id: d.subject_id.clone(), start: n, count: d.len() });
        n += d.len();
    }
    let dims = [n, shape[0], shape[1], shape[2], shape[3]];
    let per = shape.iter().product::<usize>();
    let data_bytes = (n * per * 4) as u64;

    // The offset is written inside the header whose length it depends on.
    let mut header = DatasetHeader { dims, subjects, labels_offset: 0 };
    let mut json = serde_json::to_vec(&header)?;
    loop {
        let offset = (PREAMBLE + json.len()) as u64 + data_bytes;
        if offset == header.labels_offset {
            break;
        }
        header.labels_offset = offset;
        json = serde_json::to_vec(&header)?;
    }

    let mut out = frame_header(DATASET_MAGIC, &json);
    out.reserve(data_bytes as usize + n);
    for d in domains {
        for s in d.samples() {
            for v in s.frames.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    for d in domains {
        for s in d.samples() {
            out.push(s.label.map_or(UNLABELED, |y| y as u8));
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SubjectDomain>> {
    let (json, payload) = read_header(bytes, DATASET_MAGIC)?;
    let header: DatasetHeader = serde_json::from_slice(json)
        .map_err(|e| data_err!("dataset header at offset {PREAMBLE} is not valid: {e}"))?;
    let [n, t, c, w, h] = header.dims;
    let per = t * c * w * h;
    if per == 0 {
        return Err(data_err!("dataset dims {:?} contain a zero extent", header.dims));
    }
    let data_end = payload + n * per * 4;
    if header.labels_offset as usize != data_end {
        return Err(data_err!(
            "labels_offset {} does not match the end of tensor data at offset {}",
            header.labels_offset,
            data_end
        ));
    }
    if bytes.len() != data_end + n {
        return Err(data_err!("file is {} bytes, dims {:?} imply {}", bytes.len(), header.dims, data_end + n));
    }
    let mut next = 0;
    let mut domains = Vec::with_capacity(header.subjects.len());
    for subj in &header.subjects {
        if subj.start != next {
            return Err(data_err!("subject {:?} starts at sample {}, expected {}", subj.id, subj.start, next));
        }
        if subj.count == 0 {
            return Err(data_err!("subject {:?} has no samples", subj.id));
        }
        let mut samples = Vec::with_capacity(subj.count);
        for i in subj.start..subj.start + subj.count {
            if i >= n {
                return Err(data_err!("subject {:?} extends past sample count {}", subj.id, n));
            }
            let off = payload + i * per * 4;
            let data: Vec<f64> = bytes[off..off + per * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            if let Some(k) = data.iter().position(|v| !v.is_finite()) {
                return Err(data_err!("non-finite value at offset {}", off + 4 * k));
            }
            let label_off = data_end + i;
            let label = match bytes[label_off] {
                UNLABELED => None,
                y if (y as usize) < crate::imaging::N_CLASSES => Some(y as usize),
                y => return Err(data_err!("label {y} at offset {label_off} is out of range")),
            };
            samples.push(MultiFrameEEGImage::new(Tensor::new(vec![t, c, w, h], data)?, label)?);
        }
        next += subj.count;
        domains.push(SubjectDomain::new(subj.id.clone(), samples)?);
    }
    if next != n {
        return Err(data_err!("subjects cover {next} samples, dims declare {n}"));
    }
    Ok(domains)
}

pub fn write_dataset(path: &Path, domains: &[SubjectDomain]) -> Result<()> {
    let bytes = encode_dataset(domains)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<SubjectDomain>> {
    decode_dataset(&fs::read(path)?)
}
