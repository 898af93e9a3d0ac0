//! Grouped feature datasets and the HSFM-FS binary file format.
//!
//! An HSFM-FS file is a 32-byte little-endian header followed by the payload:
//!
//! ```text
//! 0..4    magic "HSFM"
//! 4..8    version (u32) = 1
//! 8..12   n  (u32) rows
//! 12..16  d  (u32) feature dimension
//! 16..20  C  (u32) classes
//! 20..24  G  (u32) groups
//! 24..32  reserved, zero
//! payload n*d f32 features (row-major), n u32 labels, n u32 groups
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HSFM";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Frozen embeddings with class labels and group ids.
///
/// Immutable once constructed; every constructor validates the invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Vec<f32>,
    labels: Vec<usize>,
    groups: Vec<usize>,
    dim: usize,
    class_count: usize,
    group_count: usize,
}

impl FeatureDataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<usize>,
        groups: Vec<usize>,
        dim: usize,
        class_count: usize,
        group_count: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("feature dimension must be at least 1"));
        }
        if class_count < 2 {
            return Err(Error::validation(format!(
                "class count must be at least 2, got {class_count}"
            )));
        }
        if group_count == 0 {
            return Err(Error::validation("group count must be at least 1"));
        }
        let n = labels.len();
        if groups.len() != n {
            return Err(Error::validation(format!(
                "{} labels but {} group ids",
                n,
                groups.len()
            )));
        }
        if features.len() != n * dim {
            return Err(Error::validation(format!(
                "expected {} feature values for {n} rows of dimension {dim}, got {}",
                n * dim,
                features.len()
            )));
        }
        for (row, (&y, &g)) in labels.iter().zip(&groups).enumerate() {
            if y >= class_count {
                return Err(Error::validation(format!(
                    "row {row}: label {y} >= class count {class_count}"
                )));
            }
            if g >= group_count {
                return Err(Error::validation(format!(
                    "row {row}: group {g} >= group count {group_count}"
                )));
            }
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "row {}: non-finite feature value {}",
                pos / dim,
                features[pos]
            )));
        }
        Ok(Self {
            features,
            labels,
            groups,
            dim,
            class_count,
            group_count,
        })
    }

    pub fn empty(dim: usize, class_count: usize, group_count: usize) -> Result<Self> {
        Self::new(
            Vec::new(),
            Vec::new(),
            Vec::new(),
            dim,
            class_count,
            group_count,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Features widened to f64, the precision every numerical routine runs at.
    pub fn features_f64(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.dim), |(i, j)| {
            f64::from(self.features[i * self.dim + j])
        })
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        let mut groups = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
            groups.push(self.groups[r]);
        }
        Self {
            features,
            labels,
            groups,
            dim: self.dim,
            class_count: self.class_count,
            group_count: self.group_count,
        }
    }

    /// Number of rows per group.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0; self.group_count];
        for &g in &self.groups {
            counts[g] += 1;
        }
        counts
    }

    /// Number of rows per class.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Serialize to the HSFM-FS byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (n * self.dim + 2 * n));
        out.extend_from_slice(&MAGIC);
        for v in [
            FORMAT_VERSION,
            n as u32,
            self.dim as u32,
            self.class_count as u32,
            self.group_count as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&[0u8; 8]);
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        for &g in &self.groups {
            out.extend_from_slice(&(g as u32).to_le_bytes());
        }
        out
    }

    /// Parse the HSFM-FS byte layout. `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 && MAGIC.starts_with(bytes) {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if bytes.len() < 4 || bytes[0..4] != MAGIC {
            let mut found = [0u8; 4];
            let k = bytes.len().min(4);
            found[..k].copy_from_slice(&bytes[..k]);
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let n = word(8) as u64;
        let dim = word(12) as u64;
        let class_count = word(16) as usize;
        let group_count = word(20) as usize;

        let expected = HEADER_LEN as u64 + 4 * (n * dim + 2 * n);
        if bytes.len() as u64 != expected {
            // Trailing garbage is reported the same way: the header fixes the length.
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let (n, dim) = (n as usize, dim as usize);
        let mut pos = HEADER_LEN;
        let mut features = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            features.push(f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()));
            pos += 4;
        }
        let read_indices = |pos: &mut usize| {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize);
                *pos += 4;
            }
            v
        };
        let labels = read_indices(&mut pos);
        let groups = read_indices(&mut pos);

        Self::new(features, labels, groups, dim, class_count, group_count).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Train/validation/test splits sharing one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: FeatureDataset,
    pub val: FeatureDataset,
    pub test: FeatureDataset,
}

impl DatasetSplit {
    pub fn new(train: FeatureDataset, val: FeatureDataset, test: FeatureDataset) -> Result<Self> {
        let key = |d: &FeatureDataset| (d.dim(), d.class_count(), d.group_count());
        if key(&train) != key(&val) || key(&train) != key(&test) {
            return Err(Error::validation(format!(
                "splits disagree on (d, C, G): train {:?}, val {:?}, test {:?}",
                key(&train),
                key(&val),
                key(&test)
            )));
        }
        Ok(Self { train, val, test })
    }
}

pub fn write_features(path: impl AsRef<Path>, ds: &FeatureDataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureDataset::from_bytes(&bytes, path)
}
