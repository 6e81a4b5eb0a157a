//! On-disk formats.
//!
//! Embedding file (`VPEM`), little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `b"VPEM"`                        |
//! | 4      | 2    | version (`u16`, currently 1)           |
//! | 6      | 4    | dim (`u32`)                            |
//! | 10     | 8    | count (`u64`)                          |
//! | 18     | 4    | flags (`u32`, bit 0 = rows unit norm)  |
//! | 22     | …    | `count × dim` `f32`, row-major         |
//!
//! Labels live in a sidecar text file (`<path>.labels`), one decimal class id
//! per line.
//!
//! Checkpoint file (`VPCK`), little-endian: magic, version `u16`, dim `u32`,
//! n_real `u64`, k_virtual `u64`, then `(n_real + k_virtual) × dim` `f64`
//! prototypes, then the sigma tracker as alpha `f64`, iteration `u64` and
//! `dim` `f64` sigma values.
//!
//! CSV outputs write floats with Rust's shortest round-trip formatting and
//! leave missing values empty.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::embedding::{norm, LabeledEmbeddingSet, Matrix};
use crate::error::{Error, Result};
use crate::leakage::{LeakageReport, Neighbor, QueryResult};
use crate::metrics::{ClassProperties, Histogram, PropertyAverages, PropertyReport, QualityScoreSet};
use crate::trainer::{PairStats, PrototypeBank, SigmaTracker, TrainReport};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"VPEM";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VPCK";
pub const FORMAT_VERSION: u16 = 1;
pub const FLAG_UNIT: u32 = 1;
pub const EMBEDDING_HEADER_LEN: usize = 22;
pub const CHECKPOINT_HEADER_LEN: usize = 26;

/// Largest deviation from 1 tolerated for row norms of unit-flagged files.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Path of the sidecar label file for an embedding file.
pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub version: u16,
    pub dim: u32,
    pub count: u64,
    pub flags: u32,
}

impl EmbeddingHeader {
    pub fn unit(&self) -> bool {
        self.flags & FLAG_UNIT != 0
    }
}

/// Cursor over a byte buffer that reports truncation offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    expected: u64,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedPayload { offset: self.buf.len() as u64, expected: self.expected });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::TrailingBytes { offset: self.pos as u64 });
        }
        Ok(())
    }
}

fn check_magic(found: [u8; 4], expected: [u8; 4]) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Encodes an embedding file. Bit 0 of the flags is set when every row,
/// after rounding to `f32`, has norm within [`UNIT_TOLERANCE`] of 1.
pub fn encode_embeddings(matrix: &Matrix) -> Result<Vec<u8>> {
    let dim = u32::try_from(matrix.cols()).map_err(|_| Error::InvalidHeader("dimension exceeds u32".into()))?;
    let rounded: Vec<f32> = matrix.as_slice().iter().map(|&v| v as f32).collect();
    if rounded.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what: "embeddings (as f32)" });
    }
    let unit = matrix.rows() > 0
        && dim > 0
        && rounded.chunks_exact(dim as usize).all(|r| {
            let n = r.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            (n - 1.0).abs() <= UNIT_TOLERANCE
        });
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + rounded.len() * 4);
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(if unit { FLAG_UNIT } else { 0 }).to_le_bytes());
    for v in rounded {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes and validates an embedding payload (without labels).
pub fn decode_embeddings(buf: &[u8]) -> Result<(EmbeddingHeader, Matrix)> {
    let mut r = Reader { buf, pos: 0, expected: EMBEDDING_HEADER_LEN as u64 };
    check_magic(r.array()?, EMBEDDING_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = r.u32()?;
    let count = r.u64()?;
    let flags = r.u32()?;
    if flags & !FLAG_UNIT != 0 {
        return Err(Error::InvalidHeader(format!("unknown flag bits {flags:#x}")));
    }
    if dim == 0 && count > 0 {
        return Err(Error::InvalidHeader("dimension is zero but count is positive".into()));
    }
    let payload = count
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::InvalidHeader("payload size overflows".into()))?;
    r.expected = EMBEDDING_HEADER_LEN as u64 + payload;
    let bytes = r.take(usize::try_from(payload).map_err(|_| Error::InvalidHeader("payload too large".into()))?)?;
    r.finish()?;
    let data: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        let _ = i;
        return Err(Error::NonFiniteInput { what: "embedding payload" });
    }
    let header = EmbeddingHeader { version, dim, count, flags };
    let m = Matrix::new(count as usize, dim as usize, data)?;
    if header.unit() {
        for (row, v) in m.iter_rows().enumerate() {
            let n = norm(v);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::UnitNormViolation { row, norm: n });
            }
        }
    }
    Ok((header, m))
}

pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse::<usize>().map_err(|_| Error::MalformedLabel { line: i + 1, text: l.to_string() }))
        .collect()
}

pub fn write_embeddings(set: &LabeledEmbeddingSet, path: &Path) -> Result<()> {
    fs::write(path, encode_embeddings(set.matrix())?)?;
    let mut labels = String::with_capacity(set.len() * 4);
    for l in set.labels() {
        writeln!(labels, "{l}").expect("writing to a String cannot fail");
    }
    fs::write(labels_path(path), labels)?;
    Ok(())
}

/// Reads an embedding file and its label sidecar; the class count is
/// `max(label) + 1`.
pub fn read_embeddings(path: &Path) -> Result<LabeledEmbeddingSet> {
    let (header, matrix) = decode_embeddings(&fs::read(path)?)?;
    let labels = parse_labels(&fs::read_to_string(labels_path(path))?)?;
    if labels.len() as u64 != header.count {
        return Err(Error::LabelCountMismatch { header: header.count, labels: labels.len() as u64 });
    }
    LabeledEmbeddingSet::with_inferred_classes(matrix, labels)
}

/// Prototype bank and sigma tracker as persisted between runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bank: PrototypeBank,
    pub tracker: SigmaTracker,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let dim = u32::try_from(ck.bank.dim()).map_err(|_| Error::InvalidHeader("dimension exceeds u32".into()))?;
    if ck.tracker.sigma().len() != ck.bank.dim() {
        return Err(Error::DimensionMismatch { expected: ck.bank.dim(), found: ck.tracker.sigma().len() });
    }
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 8 * (ck.bank.matrix().as_slice().len() + dim as usize + 2));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(ck.bank.n_real() as u64).to_le_bytes());
    out.extend_from_slice(&(ck.bank.k_virtual() as u64).to_le_bytes());
    for v in ck.bank.matrix().as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ck.tracker.alpha().to_le_bytes());
    out.extend_from_slice(&ck.tracker.iteration().to_le_bytes());
    for v in ck.tracker.sigma() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0, expected: CHECKPOINT_HEADER_LEN as u64 };
    check_magic(r.array()?, CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = r.u32()? as u64;
    let n_real = r.u64()?;
    let k_virtual = r.u64()?;
    let rows = n_real.checked_add(k_virtual).ok_or_else(|| Error::InvalidHeader("row count overflows".into()))?;
    let values = rows
        .checked_mul(dim)
        .and_then(|v| v.checked_add(dim + 2))
        .ok_or_else(|| Error::InvalidHeader("payload size overflows".into()))?;
    r.expected = values
        .checked_mul(8)
        .and_then(|b| b.checked_add(CHECKPOINT_HEADER_LEN as u64))
        .ok_or_else(|| Error::InvalidHeader("payload size overflows".into()))?;
    if (buf.len() as u64) < r.expected {
        return Err(Error::TruncatedPayload { offset: buf.len() as u64, expected: r.expected });
    }
    let mut data = Vec::with_capacity((rows * dim) as usize);
    for _ in 0..rows * dim {
        data.push(r.f64()?);
    }
    let alpha = r.f64()?;
    let iteration = r.u64()?;
    let mut sigma = Vec::with_capacity(dim as usize);
    for _ in 0..dim {
        sigma.push(r.f64()?);
    }
    r.finish()?;
    let bank = PrototypeBank::new(Matrix::new(rows as usize, dim as usize, data)?, n_real as usize, k_virtual as usize)?;
    let tracker = SigmaTracker::from_parts(sigma, alpha, iteration)?;
    Ok(Checkpoint { bank, tracker })
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// One score in `[0, 1]` per line.
pub fn read_quality_scores(path: &Path) -> Result<QualityScoreSet> {
    let text = fs::read_to_string(path)?;
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| Error::MalformedCsv { line: i + 1, reason: format!("bad score {t:?}") })?;
        scores.push(v);
    }
    QualityScoreSet::new(scores)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Data lines of a CSV file with their 1-based line numbers, skipping the
/// header, blank lines and `#` comments.
fn csv_rows(path: &Path, header: &str) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut comments = Vec::new();
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(c) = t.strip_prefix('#') {
            comments.push(c.trim().to_string());
            continue;
        }
        if !saw_header {
            if t != header {
                return Err(Error::MalformedCsv { line: i + 1, reason: format!("expected header {header:?}") });
            }
            saw_header = true;
            continue;
        }
        rows.push((i + 1, t.split(',').map(str::to_string).collect()));
    }
    if !saw_header {
        return Err(Error::MalformedCsv { line: 1, reason: "missing header".into() });
    }
    Ok((comments, rows))
}

fn parse_f64(line: usize, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::MalformedCsv { line, reason: format!("bad number {s:?}") })
}

fn parse_opt(line: usize, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(line, s).map(Some)
    }
}

fn parse_usize(line: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::MalformedCsv { line, reason: format!("bad integer {s:?}") })
}

pub const HISTOGRAM_HEADER: &str = "bin_left,bin_right,count";

pub fn write_histogram_csv(h: &Histogram, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{HISTOGRAM_HEADER}")?;
    for (i, c) in h.counts().iter().enumerate() {
        let (l, r) = h.bin_bounds(i);
        writeln!(w, "{l},{r},{c}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_histogram_csv(path: &Path) -> Result<Histogram> {
    let (_, rows) = csv_rows(path, HISTOGRAM_HEADER)?;
    let mut counts = Vec::with_capacity(rows.len());
    for (line, f) in &rows {
        if f.len() != 3 {
            return Err(Error::MalformedCsv { line: *line, reason: "expected 3 fields".into() });
        }
        counts.push(f[2].parse().map_err(|_| Error::MalformedCsv { line: *line, reason: "bad count".into() })?);
    }
    Histogram::from_counts(counts)
}

pub const PROPERTY_HEADER: &str = "class,count,consistency,separability,diversity,quality_mean";

/// One row per class, then an `average` row. A normalized report starts
/// with a `# baseline=<id>` comment.
pub fn write_property_report_csv(report: &PropertyReport, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    if let Some(b) = &report.baseline {
        writeln!(w, "# baseline={b}")?;
    }
    writeln!(w, "{PROPERTY_HEADER}")?;
    for c in &report.classes {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.class,
            c.count,
            c.consistency,
            c.separability,
            fmt_opt(c.diversity),
            fmt_opt(c.quality_mean)
        )?;
    }
    let a = &report.averages;
    let total: usize = report.classes.iter().map(|c| c.count).sum();
    writeln!(
        w,
        "average,{},{},{},{},{}",
        total,
        a.consistency,
        a.separability,
        fmt_opt(a.diversity),
        fmt_opt(a.quality_mean)
    )?;
    w.flush()?;
    Ok(())
}

pub fn read_property_report_csv(path: &Path) -> Result<PropertyReport> {
    let (comments, rows) = csv_rows(path, PROPERTY_HEADER)?;
    let baseline = comments.iter().find_map(|c| c.strip_prefix("baseline=").map(str::to_string));
    let mut classes = Vec::new();
    let mut averages = None;
    for (line, f) in &rows {
        let line = *line;
        if f.len() != 6 {
            return Err(Error::MalformedCsv { line, reason: "expected 6 fields".into() });
        }
        if f[0] == "average" {
            averages = Some(PropertyAverages {
                consistency: parse_f64(line, &f[2])?,
                separability: parse_f64(line, &f[3])?,
                diversity: parse_opt(line, &f[4])?,
                quality_mean: parse_opt(line, &f[5])?,
            });
        } else {
            classes.push(ClassProperties {
                class: parse_usize(line, &f[0])?,
                count: parse_usize(line, &f[1])?,
                consistency: parse_f64(line, &f[2])?,
                separability: parse_f64(line, &f[3])?,
                diversity: parse_opt(line, &f[4])?,
                quality_mean: parse_opt(line, &f[5])?,
            });
        }
    }
    let averages = averages.ok_or(Error::MalformedCsv { line: rows.len() + 1, reason: "missing average row".into() })?;
    Ok(PropertyReport { classes, averages, baseline })
}

pub const LEAKAGE_HEADER: &str = "query_id,rank,ref_id,cosine";

pub fn write_leakage_csv(report: &LeakageReport, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{LEAKAGE_HEADER}")?;
    for q in &report.queries {
        for (rank, n) in q.neighbors.iter().enumerate() {
            writeln!(w, "{},{},{},{}", q.query, rank + 1, n.id, n.cosine)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_leakage_csv(path: &Path) -> Result<Vec<QueryResult>> {
    let (_, rows) = csv_rows(path, LEAKAGE_HEADER)?;
    let mut out: Vec<QueryResult> = Vec::new();
    for (line, f) in &rows {
        let line = *line;
        if f.len() != 4 {
            return Err(Error::MalformedCsv { line, reason: "expected 4 fields".into() });
        }
        let query = parse_usize(line, &f[0])?;
        let rank = parse_usize(line, &f[1])?;
        let n = Neighbor { id: parse_usize(line, &f[2])?, cosine: parse_f64(line, &f[3])? };
        match out.last_mut() {
            Some(q) if q.query == query && rank == q.neighbors.len() + 1 => q.neighbors.push(n),
            _ if rank == 1 => out.push(QueryResult { query, neighbors: vec![n] }),
            _ => return Err(Error::MalformedCsv { line, reason: "ranks out of order".into() }),
        }
    }
    Ok(out)
}

pub const TRAIN_HEADER: &str = "iteration,loss,learning_rate,rr_mean,rr_max,rv_mean,rv_max,vv_mean,vv_max";

pub fn write_train_summary_csv(report: &TrainReport, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{TRAIN_HEADER}")?;
    let pair = |p: Option<PairStats>| match p {
        Some(p) => format!("{},{}", p.mean, p.max),
        None => ",".to_string(),
    };
    for c in &report.checkpoints {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.iteration,
            fmt_opt(c.loss),
            c.learning_rate,
            pair(c.summary.real_real),
            pair(c.summary.real_virtual),
            pair(c.summary.virtual_virtual)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Plain numeric matrix, one row per line.
pub fn write_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(line.split(',').map(|s| parse_f64(i + 1, s)).collect::<Result<Vec<_>>>()?);
    }
    Matrix::from_rows(&rows)
}

/// `label,x0,…,x{D-1}` for external plotting tools.
pub fn write_labeled_csv(set: &LabeledEmbeddingSet, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let header: Vec<String> = std::iter::once("label".to_string()).chain((0..set.dim()).map(|d| format!("x{d}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    for (row, l) in set.matrix().iter_rows().zip(set.labels()) {
        write!(w, "{l}")?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_train_report_text(report: &TrainReport, path: &Path) -> Result<()> {
    let mut s = String::new();
    let b = &report.bank;
    let _ = writeln!(s, "[bank]");
    let _ = writeln!(s, "dim = {}", b.dim());
    let _ = writeln!(s, "n_real = {}", b.n_real());
    let _ = writeln!(s, "k_virtual = {}", b.k_virtual());
    let _ = writeln!(s, "\n[sigma]");
    let _ = writeln!(s, "alpha = {}", report.tracker.alpha());
    let _ = writeln!(s, "updates = {}", report.tracker.iteration());
    let mean = report.tracker.sigma().iter().sum::<f64>() / report.tracker.sigma().len().max(1) as f64;
    let _ = writeln!(s, "mean = {mean}");
    if let Some(last) = report.checkpoints.last() {
        let _ = writeln!(s, "\n[final]");
        let _ = writeln!(s, "iteration = {}", last.iteration);
        if let Some(l) = last.loss {
            let _ = writeln!(s, "loss = {l}");
        }
        for (name, p) in [
            ("real_real", last.summary.real_real),
            ("real_virtual", last.summary.real_virtual),
            ("virtual_virtual", last.summary.virtual_virtual),
        ] {
            if let Some(p) = p {
                let _ = writeln!(s, "{name}_mean = {}", p.mean);
                let _ = writeln!(s, "{name}_max = {}", p.max);
            }
        }
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_synthetic_clusters;
    use proptest::prelude::*;

    #[test]
    fn embedding_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.emb");
        let set = generate_synthetic_clusters(10, 10, 16, 0.2, 4).unwrap();
        write_embeddings(&set, &p).unwrap();
        let back = read_embeddings(&p).unwrap();
        assert_eq!(back.labels(), set.labels());
        for (a, b) in back.matrix().as_slice().iter().zip(set.matrix().as_slice()) {
            assert_eq!(*a as f32, *b as f32);
        }
        write_embeddings(&back, &dir.path().join("f.emb")).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join("f.emb")).unwrap());
        let (h, _) = decode_embeddings(&fs::read(&p).unwrap()).unwrap();
        assert!(h.unit());
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let m = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let mut bytes = encode_embeddings(&m).unwrap();
        bytes.truncate(bytes.len() - 3);
        match decode_embeddings(&bytes) {
            Err(Error::TruncatedPayload { offset, expected }) => {
                assert_eq!(offset, (EMBEDDING_HEADER_LEN + 24 - 3) as u64);
                assert_eq!(expected, (EMBEDDING_HEADER_LEN + 24) as u64);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_embeddings(&bytes[..10]), Err(Error::TruncatedPayload { offset: 10, .. })));
    }

    #[test]
    fn unit_flag_with_off_norm_row_is_rejected() {
        let m = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut bytes = encode_embeddings(&m).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), FLAG_UNIT);
        // Scale the second row by (1 + 1e-5).
        let v = (1.0f32 + 1e-5).to_le_bytes();
        bytes[EMBEDDING_HEADER_LEN + 12..EMBEDDING_HEADER_LEN + 16].copy_from_slice(&v);
        assert!(matches!(decode_embeddings(&bytes), Err(Error::UnitNormViolation { row: 1, .. })));
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let m = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let good = encode_embeddings(&m).unwrap();
        let (h, _) = decode_embeddings(&good).unwrap();
        assert!(!h.unit());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embeddings(&bad), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_embeddings(&bad), Err(Error::UnsupportedVersion(9))));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_embeddings(&bad), Err(Error::TrailingBytes { .. })));
    }

    #[test]
    fn label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.emb");
        let set = generate_synthetic_clusters(2, 2, 3, 0.1, 1).unwrap();
        write_embeddings(&set, &p).unwrap();
        fs::write(labels_path(&p), "0\n1\n").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::LabelCountMismatch { header: 4, labels: 2 })));
        fs::write(labels_path(&p), "0\nx\n1\n1\n").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::MalformedLabel { line: 2, .. })));
    }

    #[test]
    fn checkpoint_roundtrip_and_truncation() {
        let bank = PrototypeBank::random(3, 2, 5, 8).unwrap();
        let tracker = SigmaTracker::from_parts(vec![0.1, 0.2, 0.3, 0.4, 0.5], 0.9, 7).unwrap();
        let ck = Checkpoint { bank, tracker };
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(bytes.len(), CHECKPOINT_HEADER_LEN + 8 * (25 + 2 + 5));
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::TruncatedPayload { .. })));
        let mut bad = bytes.clone();
        bad[3] = b'E';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn csv_outputs_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_synthetic_clusters(4, 5, 8, 0.3, 2).unwrap();
        let scores = QualityScoreSet::new((0..20).map(|i| i as f64 / 19.0).collect()).unwrap();
        let rep = crate::metrics::property_report(&set, Some(&scores)).unwrap();
        let p = dir.path().join("props.csv");
        write_property_report_csv(&rep, &p).unwrap();
        assert_eq!(read_property_report_csv(&p).unwrap(), rep);
        let norm = rep.normalized_by(&rep.averages, "casia");
        write_property_report_csv(&norm, &p).unwrap();
        assert_eq!(read_property_report_csv(&p).unwrap(), norm);

        let h = Histogram::from_values(7, [-1.0, 0.0, 0.3, 1.0]).unwrap();
        let hp = dir.path().join("h.csv");
        write_histogram_csv(&h, &hp).unwrap();
        assert_eq!(read_histogram_csv(&hp).unwrap(), h);

        let m = Matrix::new(2, 2, vec![0.1, 1.0 / 3.0, -2.5e-9, 1.0]).unwrap();
        let mp = dir.path().join("m.csv");
        write_matrix_csv(&m, &mp).unwrap();
        assert_eq!(read_matrix_csv(&mp).unwrap(), m);
    }

    proptest! {
        #[test]
        fn embedding_bytes_roundtrip(rows in 0usize..6, dim in 1usize..6, seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-10.0f32..10.0) as f64).collect();
            let m = Matrix::new(rows, dim, data).unwrap();
            let bytes = encode_embeddings(&m).unwrap();
            let (h, back) = decode_embeddings(&bytes).unwrap();
            prop_assert_eq!(h.count as usize, rows);
            prop_assert_eq!(back, m);
        }
    }
}
