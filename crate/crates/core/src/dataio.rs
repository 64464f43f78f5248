//! Binary embedding files, JSON manifests and label files.
//!
//! Embedding file layout (all little-endian, packed):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"TTLE"`               |
//! | 4      | 2    | version (`u16`, = 1)          |
//! | 6      | 1    | dtype (`u8`, 0 = `f32` LE)    |
//! | 7      | 4    | dim (`u32`)                   |
//! | 11     | 8    | count (`u64`)                 |
//! | 19     | 4·n·d| row-major payload             |

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtlError};
use crate::vector::Embedding;

pub const MAGIC: [u8; 4] = *b"TTLE";
pub const VERSION: u16 = 1;
pub const DTYPE_F32_LE: u8 = 0;
pub const HEADER_LEN: usize = 19;

/// Raw rows of an embedding file, exactly as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
}

impl EmbeddingFile {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows.len() * self.dim * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32_LE);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for row in &self.rows {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(TtlError::Format(format!(
                "file too short for header ({} bytes)",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(TtlError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(TtlError::Format(format!("unsupported version {version}")));
        }
        if bytes[6] != DTYPE_F32_LE {
            return Err(TtlError::Format(format!("unsupported dtype {}", bytes[6])));
        }
        let dim = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[11..19].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        let expected = (count as u128) * (dim as u128) * 4;
        if payload.len() as u128 != expected {
            return Err(TtlError::Corruption(format!(
                "header declares {count} rows of dim {dim} ({expected} bytes) but payload holds {} bytes",
                payload.len()
            )));
        }
        if dim == 0 && count > 0 {
            return Err(TtlError::Format("zero dimension with nonzero rows".into()));
        }
        let rows = if dim == 0 {
            Vec::new()
        } else {
            payload
                .chunks_exact(dim * 4)
                .map(|row| {
                    row.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect()
                })
                .collect()
        };
        Ok(Self { dim, rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| TtlError::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| TtlError::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.encode())
            .and_then(|_| w.flush())
            .map_err(|e| TtlError::io(path, e))
    }

    /// Builds a file from `f64` vectors of uniform dimension.
    pub fn from_vectors<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Self> {
        let dim = vectors.first().map_or(0, |v| v.as_ref().len());
        let mut rows = Vec::with_capacity(vectors.len());
        for (i, v) in vectors.iter().enumerate() {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(TtlError::Argument(format!(
                    "mixed dimensions: row {i} has {} values, expected {dim}",
                    v.len()
                )));
            }
            rows.push(v.iter().map(|&x| x as f32).collect());
        }
        Ok(Self { dim, rows })
    }

    /// Normalizes every row. Zero or non-finite rows are corruption.
    pub fn to_embeddings(&self) -> Result<Vec<Embedding>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                Embedding::from_f32(row)
                    .map_err(|e| TtlError::Corruption(format!("row {i}: {e}")))
            })
            .collect()
    }
}

/// Row-by-row reader. A payload shorter than the header declares surfaces
/// as a corruption error at the first missing row.
pub struct EmbeddingReader {
    reader: BufReader<fs::File>,
    dim: usize,
    count: u64,
    read: u64,
    path: PathBuf,
}

impl EmbeddingReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = fs::File::open(&path).map_err(|e| TtlError::io(&path, e))?;
        let mut reader = BufReader::new(file);
        let mut header = [0u8; HEADER_LEN];
        reader
            .read_exact(&mut header)
            .map_err(|_| TtlError::Format(format!("{}: file too short for header", path.display())))?;
        // validate the header through the full decoder on an empty payload
        let mut probe = header.to_vec();
        probe[11..19].copy_from_slice(&0u64.to_le_bytes());
        let dim = EmbeddingFile::decode(&probe)?.dim;
        let count = u64::from_le_bytes(header[11..19].try_into().unwrap());
        Ok(Self {
            reader,
            dim,
            count,
            read: 0,
            path,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn declared_len(&self) -> u64 {
        self.count
    }
}

impl Iterator for EmbeddingReader {
    type Item = Result<Vec<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read >= self.count {
            return None;
        }
        let mut buf = vec![0u8; self.dim * 4];
        if let Err(e) = self.reader.read_exact(&mut buf) {
            self.read = self.count;
            return Some(Err(TtlError::Corruption(format!(
                "{}: payload ends before row {} of {} ({e})",
                self.path.display(),
                self.read,
                self.count
            ))));
        }
        self.read += 1;
        Some(Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect()))
    }
}

/// Reads and unit-normalizes every row. `expected_dim` is checked when given.
pub fn read_embeddings(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Vec<Embedding>> {
    let file = EmbeddingFile::read(&path)?;
    if let Some(d) = expected_dim {
        if file.dim != d && !file.is_empty() {
            return Err(TtlError::Config(format!(
                "{}: dimension {} does not match manifest dimension {d}",
                path.as_ref().display(),
                file.dim
            )));
        }
    }
    file.to_embeddings()
}

pub fn write_embeddings<V: AsRef<[f64]>>(path: impl AsRef<Path>, vectors: &[V]) -> Result<()> {
    EmbeddingFile::from_vectors(vectors)?.write(path)
}

/// Ground-truth labels: 1 = ID, 0 = OOD, one per line.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TtlError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(TtlError::Format(format!(
                "{}:{}: expected 0 or 1, got '{other}'",
                path.display(),
                i + 1
            ))),
        })
        .collect()
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(labels.len() * 2);
    for &l in labels {
        if l > 1 {
            return Err(TtlError::Argument(format!("label {l} is not 0/1")));
        }
        text.push(if l == 1 { '1' } else { '0' });
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| TtlError::io(path, e))
}

/// Plain-text score list, one real per line.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TtlError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|_| {
                TtlError::Format(format!("{}:{}: not a number: '{}'", path.display(), i + 1, l.trim()))
            })
        })
        .collect()
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in scores {
        text.push_str(&format!("{s:.17e}\n"));
    }
    fs::write(path, text).map_err(|e| TtlError::io(path, e))
}

/// File roles in a manifest.
pub const ROLE_ID_TEXT: &str = "id_text";
pub const ROLE_IMAGE_STREAM: &str = "image_stream";
pub const ROLE_EVAL_LABELS: &str = "eval_labels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub dim: usize,
    pub id_classnames: Vec<String>,
    /// Role → path. Relative paths resolve against the manifest's directory.
    pub files: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub notes: String,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TtlError::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for role in [ROLE_ID_TEXT, ROLE_IMAGE_STREAM] {
            if !m.files.contains_key(role) {
                return Err(TtlError::Config(format!("manifest lacks required file role '{role}'")));
            }
        }
        if m.dim == 0 {
            return Err(TtlError::Config("manifest dim must be positive".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| TtlError::io(path, e))
    }

    pub fn path_for(&self, role: &str) -> Option<PathBuf> {
        self.files.get(role).map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                self.base_dir.join(p)
            }
        })
    }

    fn required(&self, role: &str) -> Result<PathBuf> {
        self.path_for(role)
            .ok_or_else(|| TtlError::Config(format!("manifest lacks file role '{role}'")))
    }

    /// Loads the ID text features and checks their count against the class names.
    pub fn load_id_text(&self) -> Result<Vec<Embedding>> {
        let feats = read_embeddings(self.required(ROLE_ID_TEXT)?, Some(self.dim))?;
        if feats.len() != self.id_classnames.len() {
            return Err(TtlError::Config(format!(
                "id_text holds {} rows but manifest lists {} class names",
                feats.len(),
                self.id_classnames.len()
            )));
        }
        Ok(feats)
    }

    /// Opens the image stream for row-by-row reading.
    pub fn open_stream(&self) -> Result<EmbeddingReader> {
        let reader = EmbeddingReader::open(self.required(ROLE_IMAGE_STREAM)?)?;
        if reader.dim() != self.dim && reader.declared_len() > 0 {
            return Err(TtlError::Config(format!(
                "image_stream dimension {} does not match manifest dimension {}",
                reader.dim(),
                self.dim
            )));
        }
        Ok(reader)
    }

    pub fn has_labels(&self) -> bool {
        self.files.contains_key(ROLE_EVAL_LABELS)
    }

    /// Ground-truth labels, for evaluation only.
    pub fn load_labels(&self) -> Result<Option<Vec<u8>>> {
        self.path_for(ROLE_EVAL_LABELS).map(read_labels).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.emb");
        write_embeddings::<Vec<f64>>(&p, &[]).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), HEADER_LEN as u64);
        assert!(read_embeddings(&p, None).unwrap().is_empty());
    }

    #[test]
    fn single_row_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.emb");
        let v = vec![1.0 / (512f64).sqrt(); 512];
        write_embeddings(&p, &[v]).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), (HEADER_LEN + 2048) as u64);
    }

    #[test]
    fn mixed_dims_rejected() {
        let err = EmbeddingFile::from_vectors(&[vec![1.0, 0.0], vec![1.0]]).unwrap_err();
        assert!(matches!(err, TtlError::Argument(_)));
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 + 1.0, 1.0, 0.5]).collect();
        let mut bytes = EmbeddingFile::from_vectors(&rows).unwrap().encode();
        bytes.truncate(bytes.len() - 12);
        assert!(matches!(EmbeddingFile::decode(&bytes), Err(TtlError::Corruption(_))));
    }

    #[test]
    fn bad_header_fields() {
        let good = EmbeddingFile::from_vectors(&[vec![1.0, 2.0]]).unwrap().encode();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(EmbeddingFile::decode(&b), Err(TtlError::Format(_))));
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(EmbeddingFile::decode(&b), Err(TtlError::Format(_))));
        let mut b = good;
        b[6] = 1;
        assert!(matches!(EmbeddingFile::decode(&b), Err(TtlError::Format(_))));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = EmbeddingFile::from_vectors(&[vec![1.0f64; 3], vec![2.0; 3]])
            .unwrap()
            .encode();
        assert_eq!(&bytes[0..4], b"TTLE");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(&bytes[7..11], &[3, 0, 0, 0]);
        assert_eq!(&bytes[11..19], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[19..23], &1.0f32.to_le_bytes());
    }

    #[test]
    fn dim_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.emb");
        write_embeddings(&p, &[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(read_embeddings(&p, Some(4)), Err(TtlError::Config(_))));
    }

    #[test]
    fn labels_round_trip_and_reject_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        write_labels(&p, &[1, 0, 1]).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![1, 0, 1]);
        fs::write(&p, "1\n2\n").unwrap();
        assert!(read_labels(&p).is_err());
    }

    #[test]
    fn streaming_reader_reports_truncation_at_the_missing_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.emb");
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
        let mut bytes = EmbeddingFile::from_vectors(&rows).unwrap().encode();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, bytes).unwrap();
        let items: Vec<_> = EmbeddingReader::open(&p).unwrap().collect();
        assert_eq!(items.len(), 10);
        assert!(items[..9].iter().all(|r| r.is_ok()));
        assert!(matches!(items[9], Err(TtlError::Corruption(_))));
    }

    proptest! {
        #[test]
        fn round_trip_preserves_f32_values(
            rows in (1usize..12).prop_flat_map(|d| proptest::collection::vec(
                proptest::collection::vec(-5.0f32..5.0, d), 0..8))
        ) {
            let f = EmbeddingFile {
                dim: rows.first().map_or(0, |r| r.len()),
                rows,
            };
            let back = EmbeddingFile::decode(&f.encode()).unwrap();
            prop_assert_eq!(back.encode(), f.encode());
            if !f.rows.is_empty() {
                prop_assert_eq!(back, f);
            }
        }
    }
}
