//! Identity-leakage search: exact nearest reference classes for every
//! synthetic class center, compared against how close real classes already
//! sit to each other.

use rayon::prelude::*;

use crate::embedding::{norm, normalize_rows, ClassCenterSet, Matrix, DEFAULT_BLOCK};
use crate::error::{Error, Result};
use crate::kernel;
use crate::metrics::Histogram;

/// Query rows handled together by one worker.
const QUERY_BLOCK: usize = 64;

pub const DEFAULT_BINS: usize = 100;

/// Verdict quantile: the maximum.
pub const DEFAULT_VERDICT_QUANTILE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditOptions {
    pub top_j: usize,
    /// Reference rows per scanned block.
    pub block: usize,
    pub bins: usize,
    /// Also scan the reference against itself for the verdict baseline.
    pub baseline: bool,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions { top_j: 5, block: DEFAULT_BLOCK, bins: DEFAULT_BINS, baseline: true }
    }
}

/// A reference class and its cosine to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query: usize,
    /// Best first; ties go to the lower reference id.
    pub neighbors: Vec<Neighbor>,
}

impl QueryResult {
    pub fn top1(&self) -> Neighbor {
        self.neighbors[0]
    }
}

/// Nearest other reference class for every reference class.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfBaseline {
    pub nearest: Vec<Neighbor>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageReport {
    pub queries: Vec<QueryResult>,
    pub top1_histogram: Histogram,
    /// `None` when the reference has a single class.
    pub baseline: Option<SelfBaseline>,
}

impl LeakageReport {
    pub fn top1_cosines(&self) -> Vec<f64> {
        self.queries.iter().map(|q| q.top1().cosine).collect()
    }
}

/// Bounded best-first list.
struct TopJ {
    cap: usize,
    items: Vec<Neighbor>,
}

impl TopJ {
    fn new(cap: usize) -> Self {
        TopJ { cap, items: Vec::with_capacity(cap + 1) }
    }

    /// Whether a reference whose cosine is at most `upper` could enter.
    #[inline]
    fn may_accept(&self, upper: f64) -> bool {
        self.items.len() < self.cap || upper >= self.items[self.cap - 1].cosine
    }

    #[inline]
    fn offer(&mut self, id: usize, cosine: f64) {
        if self.items.len() == self.cap {
            let w = self.items[self.cap - 1];
            if cosine < w.cosine || (cosine == w.cosine && id > w.id) {
                return;
            }
        }
        let pos = self.items.partition_point(|n| n.cosine > cosine || (n.cosine == cosine && n.id < id));
        self.items.insert(pos, Neighbor { id, cosine });
        self.items.truncate(self.cap);
    }
}

/// Exact top-`top_j` rows of `refs` for each row of `queries` (both unit
/// normalized), scanning `block` reference rows at a time. With
/// `exclude_self`, query `i` never matches reference `i`.
///
/// Each block is first scored in single precision. A reference is rescored
/// with the exact kernel whenever its screened score plus the rounding
/// bound could still reach the query's current top-`top_j`, so the result
/// equals an exact double-precision scan.
pub fn exact_top_j(queries: &Matrix, refs: &Matrix, top_j: usize, block: usize, exclude_self: bool) -> Vec<Vec<Neighbor>> {
    let (q, r, d) = (queries.rows(), refs.rows(), queries.cols());
    let block = block.max(1);
    let to_f32 = |m: &Matrix| -> Vec<f32> { m.as_slice().iter().map(|&x| x as f32).collect() };
    let (q32, r32) = (to_f32(queries), to_f32(refs));
    let max_norm = |m: &Matrix| m.iter_rows().map(norm).fold(0.0, f64::max);
    let slack = kernel::f32_dot_error_bound(d, max_norm(queries), max_norm(refs));
    let starts: Vec<usize> = (0..q).step_by(QUERY_BLOCK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&q0| {
            let nq = QUERY_BLOCK.min(q - q0);
            let qa = &q32[q0 * d..(q0 + nq) * d];
            let mut heaps: Vec<TopJ> = (0..nq).map(|_| TopJ::new(top_j)).collect();
            let mut buf = vec![0.0f32; nq * block.min(r)];
            let mut r0 = 0;
            while r0 < r {
                let nr = block.min(r - r0);
                let rb = &r32[r0 * d..(r0 + nr) * d];
                let out = &mut buf[..nq * nr];
                kernel::dot_block_f32(qa, nq, rb, nr, d, out);
                for (i, heap) in heaps.iter_mut().enumerate() {
                    let query = queries.row(q0 + i);
                    for (j, &screen) in out[i * nr..(i + 1) * nr].iter().enumerate() {
                        let id = r0 + j;
                        if (exclude_self && id == q0 + i) || !heap.may_accept(screen as f64 + slack) {
                            continue;
                        }
                        heap.offer(id, kernel::dot(query, refs.row(id)).clamp(-1.0, 1.0));
                    }
                }
                r0 += nr;
            }
            heaps.into_iter().map(|h| h.items)
        })
        .collect()
}

/// [`leakage_audit_with`] using default block size and histogram bins.
pub fn leakage_audit(queries: &ClassCenterSet, reference: &ClassCenterSet, top_j: usize) -> Result<LeakageReport> {
    leakage_audit_with(queries, reference, &AuditOptions { top_j, ..AuditOptions::default() })
}

pub fn leakage_audit_with(queries: &ClassCenterSet, reference: &ClassCenterSet, opts: &AuditOptions) -> Result<LeakageReport> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if queries.dim() != reference.dim() {
        return Err(Error::DimensionMismatch { expected: reference.dim(), found: queries.dim() });
    }
    if opts.top_j == 0 || opts.block == 0 {
        return Err(Error::ConfigInvalid("top_j and block must be at least 1".into()));
    }
    let qn = normalize_rows(queries.centers())?;
    let rn = normalize_rows(reference.centers())?;
    let top_j = opts.top_j.min(reference.len());
    let lists = exact_top_j(&qn, &rn, top_j, opts.block, false);
    let queries: Vec<QueryResult> =
        lists.into_iter().enumerate().map(|(query, neighbors)| QueryResult { query, neighbors }).collect();
    let top1_histogram = Histogram::from_values(opts.bins, queries.iter().map(|q| q.top1().cosine))?;
    let baseline = if opts.baseline && reference.len() >= 2 { Some(baseline_normalized(&rn, opts.block, opts.bins)?) } else { None };
    Ok(LeakageReport { queries, top1_histogram, baseline })
}

/// Cosine from each reference class to its nearest other reference class.
pub fn reference_self_baseline(reference: &ClassCenterSet, bins: usize) -> Result<SelfBaseline> {
    if reference.len() < 2 {
        return Err(Error::SingleClass);
    }
    let rn = normalize_rows(reference.centers())?;
    baseline_normalized(&rn, DEFAULT_BLOCK, bins)
}

fn baseline_normalized(rn: &Matrix, block: usize, bins: usize) -> Result<SelfBaseline> {
    let nearest: Vec<Neighbor> = exact_top_j(rn, rn, 1, block, true).into_iter().map(|v| v[0]).collect();
    let histogram = Histogram::from_values(bins, nearest.iter().map(|n| n.cosine))?;
    Ok(SelfBaseline { nearest, histogram })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    /// Query quantile strictly below the baseline quantile.
    pub leak_free: bool,
    /// Baseline quantile minus query quantile.
    pub margin: f64,
    pub query_quantile: f64,
    pub baseline_quantile: f64,
    pub quantile: f64,
}

/// Compares the `quantile` (linear interpolation, 1 = maximum) of query
/// top-1 cosines with that of the reference self-baseline.
pub fn leakage_verdict(report: &LeakageReport, quantile: f64) -> Result<Verdict> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::ConfigInvalid(format!("verdict quantile {quantile} must lie in [0, 1]")));
    }
    let baseline = report.baseline.as_ref().ok_or(Error::SingleClass)?;
    if report.queries.is_empty() {
        return Err(Error::ConfigInvalid("leakage report has no queries".into()));
    }
    let q = quantile_of(report.top1_cosines(), quantile);
    let b = quantile_of(baseline.nearest.iter().map(|n| n.cosine).collect(), quantile);
    Ok(Verdict { leak_free: q < b, margin: b - q, query_quantile: q, baseline_quantile: b, quantile })
}

fn quantile_of(mut v: Vec<f64>, p: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
