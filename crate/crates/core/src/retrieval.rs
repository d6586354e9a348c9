//! Exhaustive Hamming ranking over a packed code database and the
//! evaluation metrics built on it: mAP@M, a precision-recall curve over
//! Hamming radii, and precision at fixed ranks.
//!
//! Relevance: a database item is relevant to a query when they share at
//! least one class label. Rankings order by distance, then by database id.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codes::{read_codes, write_codes, BinaryCode};
use crate::dataset::{read_labels, write_labels};
use crate::error::{Error, Result};
use crate::par;

/// Binary codes with their multi-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    codes: Vec<BinaryCode>,
    labels: Vec<Vec<u8>>,
    code_length: usize,
}

/// Builds an index. `code_length` is taken from the first code (0 when empty).
pub fn build_index(codes: Vec<BinaryCode>, labels: Vec<Vec<u8>>) -> Result<RetrievalIndex> {
    if codes.len() != labels.len() {
        return Err(Error::shape("labels", codes.len(), labels.len()));
    }
    let k = codes.first().map_or(0, BinaryCode::len);
    if let Some(c) = codes.iter().find(|c| c.len() != k) {
        return Err(Error::shape("code length", k, c.len()));
    }
    let n_cls = labels.first().map_or(0, Vec::len);
    if let Some(l) = labels.iter().find(|l| l.len() != n_cls) {
        return Err(Error::shape("label width", n_cls, l.len()));
    }
    Ok(RetrievalIndex {
        codes,
        labels,
        code_length: k,
    })
}

/// True when the two multi-hot labels share a class.
pub fn shares_label(a: &[u8], b: &[u8]) -> bool {
    a.iter().zip(b).any(|(x, y)| *x != 0 && *y != 0)
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn codes(&self) -> &[BinaryCode] {
        &self.codes
    }

    pub fn labels(&self) -> &[Vec<u8>] {
        &self.labels
    }

    fn check_query(&self, query: &BinaryCode) -> Result<()> {
        if self.codes.is_empty() {
            return Err(Error::InvalidInput("query against an empty index".into()));
        }
        if query.len() != self.code_length {
            return Err(Error::shape(
                "query code length",
                self.code_length,
                query.len(),
            ));
        }
        Ok(())
    }

    /// Hamming distance from `query` to every database code.
    pub fn distances(&self, query: &BinaryCode) -> Result<Vec<u32>> {
        self.check_query(query)?;
        Ok(self
            .codes
            .iter()
            .map(|c| c.hamming_unchecked(query))
            .collect())
    }

    /// Top-`m` `(id, distance)` pairs by ascending distance, ties by id.
    pub fn rank(&self, query: &BinaryCode, m: usize) -> Result<Vec<(usize, u32)>> {
        let d = self.distances(query)?;
        Ok(order_by_distance(&d, self.code_length, m))
    }

    /// Writes `<stem>.dhdc` and `<stem>.labels`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_codes(
            &dir.join(format!("{stem}.dhdc")),
            self.code_length,
            &self.codes,
        )?;
        let n_cls = self.labels.first().map_or(0, Vec::len);
        write_labels(&dir.join(format!("{stem}.labels")), n_cls, &self.labels)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (k, codes) = read_codes(&dir.join(format!("{stem}.dhdc")))?;
        let (_, labels) = read_labels(&dir.join(format!("{stem}.labels")))?;
        let mut idx = build_index(codes, labels)?;
        idx.code_length = k;
        Ok(idx)
    }
}

/// Counting sort of ids by distance; stable, so equal distances keep id order.
fn order_by_distance(d: &[u32], k: usize, m: usize) -> Vec<(usize, u32)> {
    let mut start = vec![0usize; k + 2];
    for &x in d {
        start[x as usize + 1] += 1;
    }
    for i in 1..start.len() {
        start[i] += start[i - 1];
    }
    let mut sorted = vec![(0usize, 0u32); d.len()];
    for (id, &x) in d.iter().enumerate() {
        let slot = &mut start[x as usize];
        sorted[*slot] = (id, x);
        *slot += 1;
    }
    sorted.truncate(m.min(d.len()));
    sorted
}

/// Average precision over ranked relevance flags, normalized by the number of
/// relevant items among them; 0 when none are relevant.
pub fn average_precision(flags: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub radius: u32,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub m: usize,
    pub n_queries: usize,
    pub n_database: usize,
    pub code_length: usize,
    pub map_at_m: f64,
    /// One point per Hamming radius `0..=K`.
    pub pr_curve: Vec<PrPoint>,
    /// `(rank, precision@rank)` pairs.
    pub p_at_top: Vec<(usize, f64)>,
}

struct QueryEval {
    ap: f64,
    // Per radius: (retrieved, relevant retrieved).
    ball: Vec<(usize, usize)>,
    total_relevant: usize,
    p_at: Vec<f64>,
}

fn eval_query(
    index: &RetrievalIndex,
    query: &BinaryCode,
    label: &[u8],
    m: usize,
    top_ranks: &[usize],
) -> Result<QueryEval> {
    let d = index.distances(query)?;
    let k = index.code_length;
    let rel: Vec<bool> = index
        .labels
        .iter()
        .map(|l| shares_label(l, label))
        .collect();

    let order = order_by_distance(&d, k, usize::MAX);
    let flags: Vec<bool> = order.iter().take(m).map(|(id, _)| rel[*id]).collect();
    let ap = average_precision(&flags);

    let mut prefix = Vec::with_capacity(order.len() + 1);
    prefix.push(0usize);
    for (id, _) in &order {
        prefix.push(prefix.last().unwrap() + usize::from(rel[*id]));
    }
    let p_at = top_ranks
        .iter()
        .map(|&r| {
            let n = r.min(order.len());
            if n == 0 {
                0.0
            } else {
                prefix[n] as f64 / n as f64
            }
        })
        .collect();

    let mut hist = vec![(0usize, 0usize); k + 1];
    for (x, r) in d.iter().zip(&rel) {
        hist[*x as usize].0 += 1;
        hist[*x as usize].1 += usize::from(*r);
    }
    let mut ball = Vec::with_capacity(k + 1);
    let (mut ret, mut relret) = (0, 0);
    for (c, r) in hist {
        ret += c;
        relret += r;
        ball.push((ret, relret));
    }
    Ok(QueryEval {
        ap,
        ball,
        total_relevant: prefix[order.len()],
        p_at,
    })
}

/// Evaluates every query against `index`.
///
/// Precision at a radius averages over queries that retrieve at least one
/// item; recall averages over queries with at least one relevant item in the
/// database. Either is 0 when no query qualifies.
pub fn evaluate(
    index: &RetrievalIndex,
    queries: &[BinaryCode],
    query_labels: &[Vec<u8>],
    m: usize,
    top_ranks: &[usize],
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("empty query set".into()));
    }
    if queries.len() != query_labels.len() {
        return Err(Error::shape(
            "query labels",
            queries.len(),
            query_labels.len(),
        ));
    }
    if m == 0 {
        return Err(Error::config("m", "must be >= 1"));
    }
    let idx: Vec<usize> = (0..queries.len()).collect();
    let per = par::try_map(&idx, |&q| {
        eval_query(index, &queries[q], &query_labels[q], m, top_ranks)
    })?;

    let nq = per.len() as f64;
    let map_at_m = per.iter().map(|p| p.ap).sum::<f64>() / nq;
    let k = index.code_length;
    let pr_curve = (0..=k)
        .map(|r| {
            let (mut psum, mut pn, mut rsum, mut rn) = (0.0, 0usize, 0.0, 0usize);
            for q in &per {
                let (ret, relret) = q.ball[r];
                if ret > 0 {
                    psum += relret as f64 / ret as f64;
                    pn += 1;
                }
                if q.total_relevant > 0 {
                    rsum += relret as f64 / q.total_relevant as f64;
                    rn += 1;
                }
            }
            PrPoint {
                radius: r as u32,
                precision: if pn > 0 { psum / pn as f64 } else { 0.0 },
                recall: if rn > 0 { rsum / rn as f64 } else { 0.0 },
            }
        })
        .collect();
    let p_at_top = top_ranks
        .iter()
        .enumerate()
        .map(|(j, &r)| (r, per.iter().map(|q| q.p_at[j]).sum::<f64>() / nq))
        .collect();
    Ok(EvalReport {
        m,
        n_queries: queries.len(),
        n_database: index.len(),
        code_length: k,
        map_at_m,
        pr_curve,
        p_at_top,
    })
}

impl EvalReport {
    /// Writes `report.json`, `pr_curve.csv` and `p_at_top.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("report: {e}")))?;
        let p = dir.join("report.json");
        std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;

        let mut pr = String::from("radius,precision,recall\n");
        for pt in &self.pr_curve {
            pr.push_str(&format!("{},{},{}\n", pt.radius, pt.precision, pt.recall));
        }
        let p = dir.join("pr_curve.csv");
        std::fs::write(&p, pr).map_err(|e| Error::io(&p, e))?;

        let mut top = String::from("rank,precision\n");
        for (r, v) in &self.p_at_top {
            top.push_str(&format!("{r},{v}\n"));
        }
        let p = dir.join("p_at_top.csv");
        std::fs::write(&p, top).map_err(|e| Error::io(&p, e))
    }
}
