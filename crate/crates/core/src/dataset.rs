//! Feature/label tables and the synthetic Gaussian-cluster generator.
//!
//! Text formats, one sample per row:
//!
//! ```text
//! # dhd-features v1 dim=<D> count=<N>
//! 0.25,-1.5,...
//!
//! # dhd-labels v1 n_classes=<C> count=<N>
//! 0;3
//! ```
//!
//! Floats are written in shortest round-trip form, so write → read → write is
//! byte-identical. A packed binary feature variant (`DHDF`) is also provided.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::Sample;

fn header_field(header: &str, key: &str) -> Option<usize> {
    header
        .split_whitespace()
        .find_map(|t| t.strip_prefix(key)?.strip_prefix('=')?.parse().ok())
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        reason: reason.into(),
    }
}

fn read_header(
    path: &Path,
    lines: &mut impl Iterator<Item = std::io::Result<String>>,
    tag: &str,
) -> Result<String> {
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?
        .map_err(|e| Error::io(path, e))?;
    let expected = format!("# {tag} v1");
    if !header.starts_with(&expected) {
        return Err(Error::Version {
            path: path.into(),
            reason: format!("expected header `{expected} ...`, found `{header}`"),
        });
    }
    Ok(header)
}

pub fn write_features(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::shape("feature row", dim, r.len()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = format!("# dhd-features v1 dim={dim} count={}\n", rows.len());
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
        if out.len() > 1 << 16 {
            w.write_all(out.as_bytes())
                .map_err(|e| Error::io(path, e))?;
            out.clear();
        }
    }
    w.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = read_header(path, &mut lines, "dhd-features")?;
    let dim = header_field(&header, "dim").ok_or_else(|| parse_err(path, 1, "header lacks dim"))?;
    let count =
        header_field(&header, "count").ok_or_else(|| parse_err(path, 1, "header lacks count"))?;
    let mut rows = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, i + 2, format!("bad number: {e}")))?;
        if row.len() != dim {
            return Err(parse_err(
                path,
                i + 2,
                format!("expected {dim} values, found {}", row.len()),
            ));
        }
        rows.push(row);
    }
    if rows.len() != count {
        return Err(parse_err(
            path,
            rows.len() + 1,
            format!("expected {count} rows, found {}", rows.len()),
        ));
    }
    Ok(rows)
}

pub fn write_labels(path: &Path, n_classes: usize, labels: &[Vec<u8>]) -> Result<()> {
    if let Some(l) = labels.iter().find(|l| l.len() != n_classes) {
        return Err(Error::shape("label width", n_classes, l.len()));
    }
    let mut out = format!(
        "# dhd-labels v1 n_classes={n_classes} count={}\n",
        labels.len()
    );
    for l in labels {
        let idx: Vec<String> = l
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0)
            .map(|(i, _)| i.to_string())
            .collect();
        out.push_str(&idx.join(";"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(n_classes, labels)`.
pub fn read_labels(path: &Path) -> Result<(usize, Vec<Vec<u8>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = read_header(path, &mut lines, "dhd-labels")?;
    let n = header_field(&header, "n_classes")
        .ok_or_else(|| parse_err(path, 1, "header lacks n_classes"))?;
    let count =
        header_field(&header, "count").ok_or_else(|| parse_err(path, 1, "header lacks count"))?;
    let mut labels = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut l = vec![0u8; n];
        for tok in line.split(';').filter(|t| !t.trim().is_empty()) {
            let c: usize = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(path, i + 2, format!("bad class index `{tok}`")))?;
            if c >= n {
                return Err(parse_err(
                    path,
                    i + 2,
                    format!("class {c} out of range for {n} classes"),
                ));
            }
            l[c] = 1;
        }
        labels.push(l);
    }
    if labels.len() != count {
        return Err(parse_err(
            path,
            labels.len() + 1,
            format!("expected {count} rows, found {}", labels.len()),
        ));
    }
    Ok((n, labels))
}

const FEATURE_MAGIC: &[u8; 4] = b"DHDF";
const FEATURE_VERSION: u16 = 1;

/// Packed variant: `"DHDF" | version u16 | dim u32 | count u64 | f64 LE values`.
pub fn write_features_binary(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::shape("feature row", dim, r.len()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    put(FEATURE_MAGIC)?;
    put(&FEATURE_VERSION.to_le_bytes())?;
    put(&(dim as u32).to_le_bytes())?;
    put(&(rows.len() as u64).to_le_bytes())?;
    for v in rows.iter().flatten() {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features_binary(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut take = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| Error::io(path, e));
    let mut magic = [0u8; 4];
    take(&mut magic)?;
    let mut b2 = [0u8; 2];
    take(&mut b2)?;
    if &magic != FEATURE_MAGIC || u16::from_le_bytes(b2) != FEATURE_VERSION {
        return Err(Error::Version {
            path: path.into(),
            reason: "not a version 1 DHDF feature file".into(),
        });
    }
    let mut b4 = [0u8; 4];
    take(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    take(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut rows = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            take(&mut b8)?;
            row.push(f64::from_le_bytes(b8));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reads features, picking the format from the file's first bytes.
pub fn read_features_any(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut head = [0u8; 4];
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    if n == 4 && &head == FEATURE_MAGIC {
        read_features_binary(path)
    } else {
        read_features(path)
    }
}

/// Loads a split from a feature table and a label table.
pub fn load_split(features: &Path, labels: &Path) -> Result<(usize, Vec<Sample>)> {
    let x = read_features_any(features)?;
    let (n_cls, y) = read_labels(labels)?;
    if x.len() != y.len() {
        return Err(Error::shape(
            format!("rows in {}", labels.display()),
            x.len(),
            y.len(),
        ));
    }
    let samples = x
        .into_iter()
        .zip(y)
        .map(|(features, label)| Sample { features, label })
        .collect();
    Ok((n_cls, samples))
}

pub fn save_split(dir: &Path, stem: &str, n_classes: usize, samples: &[Sample]) -> Result<()> {
    let x: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    let y: Vec<Vec<u8>> = samples.iter().map(|s| s.label.clone()).collect();
    write_features(&dir.join(format!("{stem}.features.csv")), &x)?;
    write_labels(&dir.join(format!("{stem}.labels.csv")), n_classes, &y)
}

/// Gaussian-cluster dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub dim: usize,
    /// Per-coordinate noise std as a fraction of the smallest centroid distance.
    pub spread: f64,
    pub n_train: usize,
    pub n_query: usize,
    pub n_database: usize,
    /// `co_occurrence[i][j]`: probability that class `j` is also present when
    /// `i` is the primary class. Absent means single-label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub co_occurrence: Option<Vec<Vec<f64>>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::config("data.n_clusters", "must be >= 2"));
        }
        if self.dim == 0 {
            return Err(Error::config("data.dim", "must be >= 1"));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return Err(Error::config("data.spread", "must be finite and >= 0"));
        }
        if self.n_train == 0 || self.n_query == 0 || self.n_database == 0 {
            return Err(Error::config(
                "data.n_train/n_query/n_database",
                "all splits must be non-empty",
            ));
        }
        if let Some(c) = &self.co_occurrence {
            if c.len() != self.n_clusters || c.iter().any(|r| r.len() != self.n_clusters) {
                return Err(Error::config(
                    "data.co_occurrence",
                    format!("must be {0} x {0}", self.n_clusters),
                ));
            }
            if c.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::config(
                    "data.co_occurrence",
                    "entries must be in [0, 1]",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub centroids: Vec<Vec<f64>>,
    /// Absolute per-coordinate noise std.
    pub noise_std: f64,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub database: Vec<Sample>,
}

/// Draws centroids from `N(0, I)`, then samples train, query and database
/// splits in that order from the same stream. Each sample picks a primary
/// class uniformly, adds co-occurring classes, and sits at the mean of its
/// classes' centroids plus isotropic Gaussian noise.
pub fn generate_synthetic<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<SyntheticData> {
    spec.validate()?;
    let centroids: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| (0..spec.dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let mut d_min = f64::INFINITY;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let d: f64 = centroids[i]
                .iter()
                .zip(&centroids[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d_min = d_min.min(d);
        }
    }
    let noise_std = spec.spread * d_min;
    let mut draw = |n: usize| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let primary = rng.random_range(0..spec.n_clusters);
                let mut label = vec![0u8; spec.n_clusters];
                label[primary] = 1;
                if let Some(c) = &spec.co_occurrence {
                    for (j, p) in c[primary].iter().enumerate() {
                        if j != primary && rng.random::<f64>() < *p {
                            label[j] = 1;
                        }
                    }
                }
                let active: Vec<usize> = (0..spec.n_clusters).filter(|&j| label[j] == 1).collect();
                let features = (0..spec.dim)
                    .map(|d| {
                        let mean = active.iter().map(|&j| centroids[j][d]).sum::<f64>()
                            / active.len() as f64;
                        let z: f64 = StandardNormal.sample(rng);
                        mean + noise_std * z
                    })
                    .collect();
                Sample { features, label }
            })
            .collect()
    };
    let train = draw(spec.n_train);
    let query = draw(spec.n_query);
    let database = draw(spec.n_database);
    Ok(SyntheticData {
        centroids,
        noise_std,
        train,
        query,
        database,
    })
}
