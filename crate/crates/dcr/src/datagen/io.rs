//! Binary dataset container.
//!
//! ```text
//! magic      8 bytes  "DCRDATA1"
//! header_len u64 LE
//! header     canonical key-sorted JSON of the manifest
//! hash       u64 LE   first 8 bytes of SHA-256(header), little-endian
//! count      u64 LE
//! record*    id_len u32, id, conflict u8, conflict_modality u8 (255 = none),
//!            multimodal class u32, unimodal classes 3 x u32 (T, A, V),
//!            then per modality T, A, V: tag u8, snr f64, rows u32, cols u32,
//!            rows * cols f64 LE
//! ```
//!
//! A companion `<file>.index` text file lists `split<TAB>id` per line.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::generate::{Dataset, Split, SplitName};
use super::{ConflictClass, DatasetManifest, Modality, ModalitySignal, Sample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"DCRDATA1";

pub(crate) fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index");
    PathBuf::from(s)
}

fn conflict_code(c: ConflictClass) -> u8 {
    match c {
        ConflictClass::None => 0,
        ConflictClass::Benign => 1,
        ConflictClass::Severe => 2,
    }
}

pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let header = dataset.manifest.canonical_text().into_bytes();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&hash64(&header).to_le_bytes());
    out.extend_from_slice(&(dataset.samples.len() as u64).to_le_bytes());
    for s in &dataset.samples {
        out.extend_from_slice(&(s.id.len() as u32).to_le_bytes());
        out.extend_from_slice(s.id.as_bytes());
        out.push(conflict_code(s.conflict_class));
        out.push(s.conflict_modality.map_or(255, |m| m.index() as u8));
        out.extend_from_slice(&(s.multimodal_label.class_index as u32).to_le_bytes());
        for l in &s.unimodal_labels {
            out.extend_from_slice(&(l.class_index as u32).to_le_bytes());
        }
        for sig in &s.signals {
            out.push(sig.modality.index() as u8);
            out.extend_from_slice(&sig.snr.to_le_bytes());
            let shape = sig.sequence.shape();
            out.extend_from_slice(&(shape[0] as u32).to_le_bytes());
            out.extend_from_slice(&(shape[1] as u32).to_le_bytes());
            for v in sig.sequence.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn encode_index(dataset: &Dataset) -> String {
    let mut text = String::from("# split\tsample_id\n");
    for name in SplitName::ALL {
        for &i in dataset.split.get(name) {
            text.push_str(name.name());
            text.push('\t');
            text.push_str(&dataset.samples[i].id);
            text.push('\n');
        }
    }
    text
}

/// Writes the container and its split index.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(dataset))?;
    fs::write(index_path(path), encode_index(dataset))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                field: field.into(),
                message: format!("need {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn fail<T>(&self, at: usize, field: &str, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: at as u64,
            field: field.into(),
            message: message.into(),
        })
    }
}

/// Decodes a container; the split must be supplied separately.
pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetManifest, Vec<Sample>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return r.fail(0, "magic", "not a dataset file");
    }
    let header_len = r.u64("header_len")? as usize;
    let header_at = r.pos;
    let header = r.take(header_len, "header")?;
    let stored = r.u64("header_hash")?;
    let computed = hash64(header);
    if stored != computed {
        return Err(Error::Integrity(format!(
            "manifest hash mismatch: header says {stored:016x}, recomputed {computed:016x}"
        )));
    }
    let manifest: DatasetManifest = match serde_json::from_slice(header) {
        Ok(m) => m,
        Err(e) => return r.fail(header_at, "header", e.to_string()),
    };
    if let Err(e) = manifest.validate() {
        return r.fail(header_at, "header", e.to_string());
    }
    let count = r.u64("count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id_len = r.u32("id_len")? as usize;
        let at = r.pos;
        let id = match std::str::from_utf8(r.take(id_len, "id")?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail(at, "id", "invalid utf-8"),
        };
        let at = r.pos;
        let conflict_class = match r.u8("conflict_class")? {
            0 => ConflictClass::None,
            1 => ConflictClass::Benign,
            2 => ConflictClass::Severe,
            other => return r.fail(at, "conflict_class", format!("unknown code {other}")),
        };
        let at = r.pos;
        let conflict_modality = match r.u8("conflict_modality")? {
            255 => None,
            code => match Modality::from_index(code as usize) {
                Some(m) => Some(m),
                None => return r.fail(at, "conflict_modality", format!("unknown code {code}")),
            },
        };
        let class_of = |r: &mut Reader, field: &str| -> Result<usize> {
            let at = r.pos;
            let c = r.u32(field)? as usize;
            if c >= manifest.num_classes {
                return r.fail(at, field, format!("class {c} out of range"));
            }
            Ok(c)
        };
        let multimodal = class_of(&mut r, "multimodal_label")?;
        let mut uni = [0usize; 3];
        for u in uni.iter_mut() {
            *u = class_of(&mut r, "unimodal_label")?;
        }
        let mut signals = Vec::with_capacity(3);
        for m in Modality::ALL {
            let at = r.pos;
            if r.u8("modality")? as usize != m.index() {
                return r.fail(at, "modality", format!("expected modality {}", m.name()));
            }
            let snr = r.f64("snr")?;
            let at = r.pos;
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            if rows == 0 || cols == 0 {
                return r.fail(at, "shape", "zero extent");
            }
            let raw = r.take(rows * cols * 8, "payload")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            signals.push(ModalitySignal {
                modality: m,
                sequence: Tensor::new(&[rows, cols], data)?,
                snr,
            });
        }
        let signals: [ModalitySignal; 3] = signals.try_into().unwrap();
        samples.push(Sample {
            id,
            signals,
            unimodal_labels: uni.map(|c| manifest.label(c)),
            multimodal_label: manifest.label(multimodal),
            conflict_class,
            conflict_modality,
        });
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, "trailer", "unexpected bytes after the last record");
    }
    Ok((manifest, samples))
}

pub fn decode_index(text: &str, samples: &[Sample]) -> Result<Split> {
    let by_id: HashMap<&str, usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut split = Split::default();
    let mut offset = 0u64;
    for line in text.lines() {
        let line_start = offset;
        offset += line.len() as u64 + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(name), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                offset: line_start,
                field: "index".into(),
                message: format!("expected `split<TAB>id`, got `{line}`"),
            });
        };
        let Some(&i) = by_id.get(id) else {
            return Err(Error::Parse {
                offset: line_start,
                field: "index".into(),
                message: format!("unknown sample id `{id}`"),
            });
        };
        match name {
            "train" => split.train.push(i),
            "valid" => split.valid.push(i),
            "test" => split.test.push(i),
            other => {
                return Err(Error::Parse {
                    offset: line_start,
                    field: "index".into(),
                    message: format!("unknown split `{other}`"),
                })
            }
        }
    }
    Ok(split)
}

/// Reads a container and its split index. Nothing is returned on error.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Environment(format!("cannot read dataset {}: {e}", path.display())))?;
    let (manifest, samples) = decode_dataset(&bytes)?;
    let ipath = index_path(path);
    let text = fs::read_to_string(&ipath).map_err(|e| {
        Error::Environment(format!("cannot read split index {}: {e}", ipath.display()))
    })?;
    let split = decode_index(&text, &samples)?;
    Ok(Dataset {
        manifest,
        samples,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;

    fn small() -> Dataset {
        generate_dataset(&DatasetManifest::standard(4), 10, 8).unwrap()
    }

    #[test]
    fn round_trip_through_disk() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.dcr");
        save_dataset(&d, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = encode_dataset(&small());
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            match decode_dataset(&bytes[..cut]) {
                Err(Error::Parse { offset, field, .. }) => {
                    assert!(offset as usize <= cut, "{field} at {offset}");
                }
                other => panic!("expected parse error at cut {cut}, got {other:?}"),
            }
        }
    }

    #[test]
    fn header_tampering_is_an_integrity_error() {
        let mut bytes = encode_dataset(&small());
        // first byte of the JSON header
        bytes[16] ^= 0x01;
        assert!(matches!(decode_dataset(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn stored_hash_matches_canonical_text() {
        let d = small();
        let bytes = encode_dataset(&d);
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = &bytes[16..16 + header_len];
        assert_eq!(header, d.manifest.canonical_text().as_bytes());
        let stored =
            u64::from_le_bytes(bytes[16 + header_len..24 + header_len].try_into().unwrap());
        let digest = Sha256::digest(d.manifest.canonical_text().as_bytes());
        assert_eq!(stored, u64::from_le_bytes(digest[..8].try_into().unwrap()));
    }

    #[test]
    fn unknown_index_id() {
        let d = small();
        assert!(decode_index("train\tnope\n", &d.samples).is_err());
    }
}
