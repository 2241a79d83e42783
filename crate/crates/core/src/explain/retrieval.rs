//! Exact nearest-neighbour retrieval over case embeddings.
//!
//! Sidecar file layout (little-endian):
//!
//! ```text
//! magic   b"OCSIDX\0\0"
//! version u32
//! metric  u8 (0 euclidean, 1 cosine)
//! dim     u32
//! count   u32
//! version string: u32 length + UTF-8
//! repeat count times: id (u32 length + UTF-8), 8 label bytes, dim x f64
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{LabelVector, NUM_CLASSES};

const MAGIC: &[u8; 8] = b"OCSIDX\0\0";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`; a zero vector has cosine 0 with everything.
    Cosine,
}

impl Metric {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => Some(Metric::Euclidean),
            "cosine" => Some(Metric::Cosine),
            _ => None,
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na.sqrt() * nb.sqrt())
                }
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("length mismatch: {embeddings} embeddings, {ids} ids, {labels} label vectors")]
    Length {
        embeddings: usize,
        ids: usize,
        labels: usize,
    },
    #[error("embedding dimension must be >= 1")]
    ZeroDim,
    #[error("embedding {index} has dimension {found}, expected {expected}")]
    Dim {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate case id {0}")]
    Duplicate(String),
    #[error("k = {k} exceeds index capacity {capacity}")]
    Capacity { k: usize, capacity: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("query has dimension {found}, index has {expected}")]
    QueryDim { expected: usize, found: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("index file: {0}")]
    Format(String),
    #[error("index i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub case_id: String,
    pub distance: f64,
    pub labels: LabelVector,
}

/// Immutable `M x D` embedding table with ids and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    metric: Metric,
    ids: Vec<String>,
    labels: Vec<LabelVector>,
    data: Vec<f64>,
    positions: HashMap<String, usize>,
    /// Provenance of the embeddings (e.g. the model checksum).
    model_version: String,
}

pub fn build_index(
    embeddings: &[Vec<f64>],
    ids: &[String],
    labels: &[LabelVector],
    metric: Metric,
) -> Result<RetrievalIndex, IndexError> {
    RetrievalIndex::build(embeddings, ids, labels, metric, String::new())
}

impl RetrievalIndex {
    pub fn build(
        embeddings: &[Vec<f64>],
        ids: &[String],
        labels: &[LabelVector],
        metric: Metric,
        model_version: String,
    ) -> Result<Self, IndexError> {
        if embeddings.len() != ids.len() || ids.len() != labels.len() {
            return Err(IndexError::Length {
                embeddings: embeddings.len(),
                ids: ids.len(),
                labels: labels.len(),
            });
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(IndexError::ZeroDim);
        }
        let mut data = Vec::with_capacity(dim * embeddings.len());
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, (e, id)) in embeddings.iter().zip(ids).enumerate() {
            if e.len() != dim {
                return Err(IndexError::Dim {
                    index: i,
                    expected: dim,
                    found: e.len(),
                });
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(IndexError::NonFinite);
            }
            if positions.insert(id.clone(), i).is_some() {
                return Err(IndexError::Duplicate(id.clone()));
            }
            data.extend_from_slice(e);
        }
        Ok(Self {
            dim,
            metric,
            ids: ids.to_vec(),
            labels: labels.to_vec(),
            data,
            positions,
            model_version,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn embedding(&self, id: &str) -> Option<&[f64]> {
        let i = *self.positions.get(id)?;
        Some(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn labels_of(&self, id: &str) -> Option<LabelVector> {
        self.positions.get(id).map(|&i| self.labels[i])
    }

    /// Largest `k` a query excluding `exclude` can ask for.
    pub fn capacity(&self, exclude: Option<&str>) -> usize {
        self.len() - exclude.is_some_and(|id| self.contains(id)) as usize
    }

    /// The `k` nearest entries in ascending distance, ties in insertion
    /// order. When `exclude` names an indexed case it is skipped.
    pub fn knn_query(
        &self,
        query: &[f64],
        k: usize,
        exclude: Option<&str>,
    ) -> Result<Vec<Neighbor>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::QueryDim {
                expected: self.dim,
                found: query.len(),
            });
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let capacity = self.capacity(exclude);
        if k > capacity {
            return Err(IndexError::Capacity { k, capacity });
        }
        let skip = exclude.and_then(|id| self.positions.get(id).copied());
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| Some(i) != skip)
            .map(|i| {
                (
                    self.metric
                        .distance(query, &self.data[i * self.dim..(i + 1) * self.dim]),
                    i,
                )
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(distance, i)| Neighbor {
                case_id: self.ids[i].clone(),
                distance,
                labels: self.labels[i],
            })
            .collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&[match self.metric {
            Metric::Euclidean => 0,
            Metric::Cosine => 1,
        }])?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        write_str(w, &self.model_version)?;
        for (i, id) in self.ids.iter().enumerate() {
            write_str(w, id)?;
            let bits = self.labels[i].bits().map(u8::from);
            w.write_all(&bits)?;
            for v in &self.data[i * self.dim..(i + 1) * self.dim] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, IndexError> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != INDEX_VERSION {
            return Err(IndexError::Format(format!(
                "version mismatch: expected {INDEX_VERSION}, found {version}"
            )));
        }
        let mut m = [0u8; 1];
        read_exact(r, &mut m)?;
        let metric = match m[0] {
            0 => Metric::Euclidean,
            1 => Metric::Cosine,
            x => return Err(IndexError::Format(format!("unknown metric tag {x}"))),
        };
        let dim = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let model_version = read_str(r)?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut labels = Vec::with_capacity(count.min(1 << 20));
        let mut embeddings = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            ids.push(read_str(r)?);
            let mut bits = [0u8; NUM_CLASSES];
            read_exact(r, &mut bits)?;
            let ints: Vec<i64> = bits.iter().map(|&b| b as i64).collect();
            labels.push(
                LabelVector::from_ints(&ints).map_err(|e| IndexError::Format(e.to_string()))?,
            );
            let mut e = vec![0.0; dim];
            for v in &mut e {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
            embeddings.push(e);
        }
        Self::build(&embeddings, &ids, &labels, metric, model_version)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), IndexError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => IndexError::Format("truncated".into()),
        _ => IndexError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, IndexError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, IndexError> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| IndexError::Format("string is not UTF-8".into()))
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}
