//! Row-major sample batches with provenance metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a batch came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BatchMeta {
    pub seed: u64,
    #[serde(default)]
    pub grid: Option<String>,
    #[serde(default)]
    pub drift: Option<String>,
    /// Time at which the batch is a draw of the process.
    pub t: f64,
}

/// `n × d` matrix of samples, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    n: usize,
    dim: usize,
    data: Vec<f64>,
    pub meta: BatchMeta,
}

impl SampleBatch {
    pub fn new(n: usize, dim: usize, data: Vec<f64>, meta: BatchMeta) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::Config("a batch needs at least one sample and one dimension".into()));
        }
        if data.len() != n * dim {
            return Err(Error::Shape {
                expected: n * dim,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite entry in sample {}",
                pos / dim
            )));
        }
        Ok(Self { n, dim, data, meta })
    }

    /// Builds a batch from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], meta: BatchMeta) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            crate::error::check_dim(dim, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, data, meta)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Per-coordinate sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for row in self.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.n as f64);
        mean
    }

    /// Unbiased sample covariance, row-major `d × d`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut cov = vec![0.0; d * d];
        for row in self.rows() {
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += di * (row[j] - mean[j]);
                }
            }
        }
        let denom = (self.n.max(2) - 1) as f64;
        for i in 0..d {
            for j in 0..=i {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        cov
    }

    /// Writes one CSV row per sample with a `dim0,dim1,...` header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record((0..self.dim).map(|j| format!("dim{j}")))?;
        for row in self.rows() {
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Writes the CSV body plus a `<path>.meta.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.write_csv(path)?;
        let sidecar = sidecar_path(path);
        let file = File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &self.meta)?;
        Ok(())
    }

    /// Reads a CSV written by [`SampleBatch::save`]. The sidecar is optional.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(BufReader::new(file));
        let dim = r.headers()?.len();
        let mut data = Vec::new();
        let mut n = 0;
        for record in r.records() {
            let record = record?;
            crate::error::check_dim(dim, record.len())?;
            for field in record.iter() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Config(format!("{}: row {}: cannot parse {field:?}", path.display(), n + 1))
                })?;
                data.push(v);
            }
            n += 1;
        }
        let sidecar = sidecar_path(path);
        let meta = match File::open(&sidecar) {
            Ok(f) => serde_json::from_reader(BufReader::new(f))?,
            Err(_) => BatchMeta::default(),
        };
        Self::new(n, dim, data, meta)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}
