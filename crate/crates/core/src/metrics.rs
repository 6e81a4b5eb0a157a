//! Dataset properties: per-class consistency, separability and quality
//! diversity; prototype similarity matrices; pairwise similarity
//! distributions; and the expected near-orthogonality of random identities.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::{class_centers, cosine_block, normalize_rows, ClassCenterSet, LabeledEmbeddingSet, Matrix,
    DEFAULT_BLOCK};
use crate::error::{Error, Result};
use crate::kernel;
use crate::trainer::PrototypeBank;

/// Per-sample quality scores in `[0, 1]`, index-aligned with an embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityScoreSet {
    scores: Vec<f64>,
}

impl QualityScoreSet {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::QualityOutOfRange { index, value });
        }
        Ok(QualityScoreSet { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Mean cosine over all `N²` ordered member pairs of class `k`, self-pairs included.
pub fn class_consistency(set: &LabeledEmbeddingSet, k: usize) -> Result<f64> {
    let members = set.class_members(k)?;
    let rows = set.matrix().select_rows(&members);
    let cos = cosine_block(&rows, &rows, DEFAULT_BLOCK)?;
    let n = members.len() as f64;
    Ok(cos.as_slice().iter().sum::<f64>() / (n * n))
}

/// Mean cosine distance from center `k` to every other center.
pub fn class_separability(centers: &ClassCenterSet, k: usize) -> Result<f64> {
    let all = separability_all(centers)?;
    all.get(k).copied().ok_or(Error::LabelOutOfRange { label: k, limit: all.len() })
}

/// [`class_separability`] for every class from one center-cosine matrix.
pub fn separability_all(centers: &ClassCenterSet) -> Result<Vec<f64>> {
    let k = centers.len();
    if k < 2 {
        return Err(Error::SingleClass);
    }
    let cos = cosine_block(centers.centers(), centers.centers(), DEFAULT_BLOCK)?;
    Ok((0..k)
        .map(|c| {
            let s: f64 = (0..k).filter(|&i| i != c).map(|i| 1.0 - cos.get(c, i)).sum();
            s / (k - 1) as f64
        })
        .collect())
}

/// Population mean and variance of the quality scores of class `k`.
pub fn class_diversity(scores: &QualityScoreSet, set: &LabeledEmbeddingSet, k: usize) -> Result<(f64, f64)> {
    if scores.len() != set.len() {
        return Err(Error::LengthMismatch { expected: set.len(), found: scores.len() });
    }
    let members = set.class_members(k)?;
    Ok(mean_and_variance(members.iter().map(|&i| scores.scores()[i])))
}

// Two passes over values shifted by the first one, so identical scores give
// a variance of exactly zero.
fn mean_and_variance(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let Some(first) = values.clone().next() else {
        return (f64::NAN, f64::NAN);
    };
    let n = values.clone().count() as f64;
    let shift = values.clone().map(|v| v - first).sum::<f64>() / n;
    let var = values.map(|v| (v - first - shift) * (v - first - shift)).sum::<f64>() / n;
    (first + shift, var)
}

/// Pairwise prototype cosines, optionally min-max rescaled over the whole
/// matrix (a constant matrix maps to zeros).
pub fn prototype_similarity_matrix(bank: &PrototypeBank, minmax_normalize: bool) -> Result<Matrix> {
    let mut cos = cosine_block(bank.matrix(), bank.matrix(), DEFAULT_BLOCK)?;
    if minmax_normalize {
        minmax_in_place(&mut cos);
    }
    Ok(cos)
}

pub fn minmax_in_place(m: &mut Matrix) {
    let (lo, hi) = m
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in m.as_mut_slice() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Fixed-width histogram over `[-1, 1]`; the last bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    counts: Vec<u64>,
}

impl Histogram {
    pub const LOW: f64 = -1.0;
    pub const HIGH: f64 = 1.0;

    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::ConfigInvalid("histogram needs at least one bin".into()));
        }
        Ok(Histogram { counts: vec![0; bins] })
    }

    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::ConfigInvalid("histogram needs at least one bin".into()));
        }
        Ok(Histogram { counts })
    }

    pub fn from_values(bins: usize, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut h = Self::new(bins)?;
        values.into_iter().for_each(|v| h.add(v));
        Ok(h)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_of(&self, x: f64) -> usize {
        let b = self.counts.len();
        let t = ((x - Self::LOW) / (Self::HIGH - Self::LOW) * b as f64).floor();
        if t < 0.0 {
            0
        } else {
            (t as usize).min(b - 1)
        }
    }

    pub fn add(&mut self, x: f64) {
        let i = self.bin_of(x);
        self.counts[i] += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `[left, right)` edges of bin `i`.
    pub fn bin_bounds(&self, i: usize) -> (f64, f64) {
        let b = self.counts.len() as f64;
        let edge = |k: usize| Self::LOW + (Self::HIGH - Self::LOW) * k as f64 / b;
        (edge(i), edge(i + 1))
    }

    fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Same-class and cross-class cosine similarity histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDistributions {
    /// Same-class member pairs, self-pairs excluded.
    pub positive: Histogram,
    /// Pairs of distinct class centers.
    pub negative_centers: Histogram,
    /// Member pairs from distinct classes.
    pub negative_members: Histogram,
}

/// Builds the similarity histograms. With `max_pairs_per_class = Some(cap)`,
/// each class contributes at most `cap` positive pairs and `cap` negative
/// member pairs (pairing with members of higher-numbered classes), drawn
/// without replacement from a per-class stream seeded by `seed`.
pub fn similarity_distributions(
    set: &LabeledEmbeddingSet,
    bins: usize,
    max_pairs_per_class: Option<usize>,
    seed: u64,
) -> Result<SimilarityDistributions> {
    let k = set.class_count();
    if k < 2 {
        return Err(Error::SingleClass);
    }
    if bins < 2 {
        return Err(Error::ConfigInvalid("similarity histograms need at least two bins".into()));
    }
    let unit = normalize_rows(set.matrix())?;
    let groups = set.members_by_class();
    if let Some(empty) = groups.iter().position(|g| g.is_empty()) {
        return Err(Error::EmptyClass(empty));
    }
    let centers = class_centers(set)?;
    let cc = cosine_block(centers.centers(), centers.centers(), DEFAULT_BLOCK)?;
    let mut negative_centers = Histogram::new(bins)?;
    for i in 0..k {
        for j in i + 1..k {
            negative_centers.add(cc.get(i, j));
        }
    }

    let cos = |a: usize, b: usize| kernel::dot(unit.row(a), unit.row(b)).clamp(-1.0, 1.0);
    // Members of classes > c, for each c.
    let mut higher: Vec<Vec<usize>> = vec![Vec::new(); k];
    for c in (0..k.saturating_sub(1)).rev() {
        let mut v = higher[c + 1].clone();
        v.extend_from_slice(&groups[c + 1]);
        higher[c] = v;
    }

    let per_class: Vec<(Histogram, Histogram)> = (0..k)
        .into_par_iter()
        .map(|c| -> Result<(Histogram, Histogram)> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mem = &groups[c];
            let n = mem.len();
            let mut pos = Histogram::new(bins)?;
            let total_pos = n * n.saturating_sub(1) / 2;
            match max_pairs_per_class {
                Some(cap) if cap < total_pos => {
                    for t in index::sample(&mut rng, total_pos, cap) {
                        let (a, b) = triangular_pair(n, t);
                        pos.add(cos(mem[a], mem[b]));
                    }
                }
                _ => {
                    for a in 0..n {
                        for b in a + 1..n {
                            pos.add(cos(mem[a], mem[b]));
                        }
                    }
                }
            }
            let mut neg = Histogram::new(bins)?;
            let others = &higher[c];
            let total_neg = n * others.len();
            match max_pairs_per_class {
                Some(cap) if cap < total_neg => {
                    for t in index::sample(&mut rng, total_neg, cap) {
                        neg.add(cos(mem[t / others.len()], others[t % others.len()]));
                    }
                }
                _ => {
                    for &a in mem {
                        for &b in others {
                            neg.add(cos(a, b));
                        }
                    }
                }
            }
            Ok((pos, neg))
        })
        .collect::<Result<_>>()?;

    let mut positive = Histogram::new(bins)?;
    let mut negative_members = Histogram::new(bins)?;
    for (p, n) in &per_class {
        positive.merge(p);
        negative_members.merge(n);
    }
    Ok(SimilarityDistributions { positive, negative_centers, negative_members })
}

/// Maps `t` in `0..n(n-1)/2` to the pair `(a, b)`, `a < b`, in row-major order.
fn triangular_pair(n: usize, mut t: usize) -> (usize, usize) {
    for a in 0..n {
        let row = n - 1 - a;
        if t < row {
            return (a, a + 1 + t);
        }
        t -= row;
    }
    unreachable!("pair index out of range")
}

/// Typical largest cosine among `n` random directions in `d` dimensions,
/// `sqrt(ln n / d)`.
pub fn orthogonality_expectation(n: f64, d: usize) -> f64 {
    debug_assert!(n >= 1.0 && d >= 1);
    (n.ln() / d as f64).sqrt()
}

/// Largest off-diagonal cosine among the rows of `m`.
pub fn max_pairwise_cosine(m: &Matrix) -> Result<f64> {
    let cos = cosine_block(m, m, DEFAULT_BLOCK)?;
    let mut best = f64::NEG_INFINITY;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            best = best.max(cos.get(i, j));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProperties {
    pub class: usize,
    pub count: usize,
    pub consistency: f64,
    pub separability: f64,
    pub diversity: Option<f64>,
    pub quality_mean: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropertyAverages {
    pub consistency: f64,
    pub separability: f64,
    pub diversity: Option<f64>,
    pub quality_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub classes: Vec<ClassProperties>,
    pub averages: PropertyAverages,
    /// Identifier of the dataset whose averages divided every value.
    pub baseline: Option<String>,
}

/// Per-class properties and their dataset averages.
pub fn property_report(set: &LabeledEmbeddingSet, scores: Option<&QualityScoreSet>) -> Result<PropertyReport> {
    if let Some(s) = scores {
        if s.len() != set.len() {
            return Err(Error::LengthMismatch { expected: set.len(), found: s.len() });
        }
    }
    let centers = class_centers(set)?;
    let sep = separability_all(&centers)?;
    let groups = set.members_by_class();
    let unit = normalize_rows(set.matrix())?;
    let classes: Vec<ClassProperties> = (0..set.class_count())
        .into_par_iter()
        .map(|k| {
            let rows = unit.select_rows(&groups[k]);
            let n = groups[k].len() as f64;
            let cos = crate::embedding::cosine_block_normalized(&rows, &rows, DEFAULT_BLOCK);
            let consistency = cos.as_slice().iter().sum::<f64>() / (n * n);
            let (quality_mean, diversity) = match scores {
                Some(s) => {
                    let (m, v) = mean_and_variance(groups[k].iter().map(|&i| s.scores()[i]));
                    (Some(m), Some(v))
                }
                None => (None, None),
            };
            ClassProperties { class: k, count: groups[k].len(), consistency, separability: sep[k], diversity, quality_mean }
        })
        .collect();
    let kf = classes.len() as f64;
    let avg = |f: &dyn Fn(&ClassProperties) -> f64| classes.iter().map(f).sum::<f64>() / kf;
    let averages = PropertyAverages {
        consistency: avg(&|c| c.consistency),
        separability: avg(&|c| c.separability),
        diversity: scores.map(|_| avg(&|c| c.diversity.unwrap_or(0.0))),
        quality_mean: scores.map(|_| avg(&|c| c.quality_mean.unwrap_or(0.0))),
    };
    Ok(PropertyReport { classes, averages, baseline: None })
}

impl PropertyReport {
    /// Divides every value by the corresponding baseline average.
    pub fn normalized_by(&self, baseline: &PropertyAverages, id: impl Into<String>) -> PropertyReport {
        let div = |v: f64, b: f64| v / b;
        let opt = |v: Option<f64>, b: Option<f64>| match (v, b) {
            (Some(v), Some(b)) => Some(v / b),
            _ => None,
        };
        PropertyReport {
            classes: self
                .classes
                .iter()
                .map(|c| ClassProperties {
                    consistency: div(c.consistency, baseline.consistency),
                    separability: div(c.separability, baseline.separability),
                    diversity: opt(c.diversity, baseline.diversity),
                    quality_mean: opt(c.quality_mean, baseline.quality_mean),
                    ..c.clone()
                })
                .collect(),
            averages: PropertyAverages {
                consistency: div(self.averages.consistency, baseline.consistency),
                separability: div(self.averages.separability, baseline.separability),
                diversity: opt(self.averages.diversity, baseline.diversity),
                quality_mean: opt(self.averages.quality_mean, baseline.quality_mean),
            },
            baseline: Some(id.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn set(rows: &[Vec<f64>], labels: &[usize]) -> LabeledEmbeddingSet {
        LabeledEmbeddingSet::with_inferred_classes(Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    fn random_set(k: usize, per: usize, d: usize, seed: u64) -> LabeledEmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..k * per).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..k * per).map(|i| i / per).collect();
        set(&rows, &labels)
    }

    fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn consistency_locked_values() {
        let s = set(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 0]);
        assert_eq!(class_consistency(&s, 0).unwrap(), 0.5);
        let s = set(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]], &[0, 0, 0]);
        assert!((class_consistency(&s, 0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn consistency_matches_double_loop() {
        let s = random_set(3, 7, 5, 8);
        for k in 0..3 {
            let m = s.class_members(k).unwrap();
            let mut acc = 0.0;
            for &i in &m {
                for &j in &m {
                    acc += naive_cos(s.matrix().row(i), s.matrix().row(j));
                }
            }
            assert!((class_consistency(&s, k).unwrap() - acc / 49.0).abs() < 1e-12);
        }
    }

    #[test]
    fn separability_examples() {
        let c = ClassCenterSet::from_centers(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
            vec![1, 1, 1],
        )
        .unwrap();
        assert_eq!(separability_all(&c).unwrap(), vec![1.0, 1.0, 1.0]);
        let same = ClassCenterSet::from_centers(Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(), vec![1, 1])
            .unwrap();
        assert!(class_separability(&same, 0).unwrap().abs() < 1e-15);
        let one = ClassCenterSet::from_centers(Matrix::from_rows(&[vec![1.0]]).unwrap(), vec![1]).unwrap();
        assert!(matches!(class_separability(&one, 0), Err(Error::SingleClass)));
    }

    #[test]
    fn diversity_examples() {
        let s = set(&[vec![1.0], vec![1.0], vec![1.0]], &[0, 0, 0]);
        let q = QualityScoreSet::new(vec![0.4, 0.4, 0.4]).unwrap();
        assert_eq!(class_diversity(&q, &s, 0).unwrap().1, 0.0);
        let s = set(&[vec![1.0], vec![1.0]], &[0, 0]);
        let q = QualityScoreSet::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(class_diversity(&q, &s, 0).unwrap(), (0.5, 0.25));
        assert!(matches!(QualityScoreSet::new(vec![1.2]), Err(Error::QualityOutOfRange { index: 0, .. })));
        let short = QualityScoreSet::new(vec![0.1]).unwrap();
        assert!(matches!(class_diversity(&short, &s, 0), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn minmax_examples() {
        let bank = PrototypeBank::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 2, 0).unwrap();
        let raw = prototype_similarity_matrix(&bank, false).unwrap();
        assert_eq!(raw.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(prototype_similarity_matrix(&bank, true).unwrap(), raw);
        let mut constant = Matrix::new(2, 2, vec![0.3; 4]).unwrap();
        minmax_in_place(&mut constant);
        assert_eq!(constant.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn minmax_preserves_extremes() {
        let bank = PrototypeBank::random(5, 3, 6, 4).unwrap();
        let raw = prototype_similarity_matrix(&bank, false).unwrap();
        let mm = prototype_similarity_matrix(&bank, true).unwrap();
        let arg = |m: &Matrix, better: fn(f64, f64) -> bool| {
            let mut best = 0;
            for i in 1..m.as_slice().len() {
                if better(m.as_slice()[i], m.as_slice()[best]) {
                    best = i;
                }
            }
            best
        };
        assert!(mm.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(arg(&raw, |a, b| a > b), arg(&mm, |a, b| a > b));
        assert_eq!(arg(&raw, |a, b| a < b), arg(&mm, |a, b| a < b));
    }

    #[test]
    fn distributions_orthogonal_singletons() {
        let s = set(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let d = similarity_distributions(&s, 10, None, 0).unwrap();
        assert_eq!(d.positive.total(), 0);
        assert_eq!(d.negative_centers.total(), 1);
        assert_eq!(d.negative_centers.counts()[d.negative_centers.bin_of(0.0)], 1);
        assert_eq!(d.negative_members.counts()[5], 1);
        let (l, r) = d.negative_centers.bin_bounds(5);
        assert_eq!(l, 0.0);
        assert!((r - 0.2).abs() < 1e-15);
    }

    #[test]
    fn distributions_identical_members_fill_top_bin() {
        let s = set(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 1.0]], &[0, 0, 0, 1]);
        let d = similarity_distributions(&s, 8, None, 0).unwrap();
        assert_eq!(d.positive.total(), 3);
        assert_eq!(d.positive.counts()[7], 3);
    }

    #[test]
    fn distributions_respect_cap_and_counts() {
        let s = random_set(4, 6, 3, 2);
        let full = similarity_distributions(&s, 20, None, 1).unwrap();
        assert_eq!(full.positive.total(), 4 * 15);
        assert_eq!(full.negative_members.total(), (24 * 23 / 2 - 4 * 15) as u64);
        assert_eq!(full.negative_centers.total(), 6);
        let capped = similarity_distributions(&s, 20, Some(5), 1).unwrap();
        assert_eq!(capped.positive.total(), 20);
        // classes 0..2 have more than 5 negative pairs; class 3 has none.
        assert_eq!(capped.negative_members.total(), 15);
        assert_eq!(capped, similarity_distributions(&s, 20, Some(5), 1).unwrap());
        assert!(matches!(similarity_distributions(&random_set(1, 3, 2, 0), 4, None, 0), Err(Error::SingleClass)));
    }

    #[test]
    fn triangular_decode_is_exhaustive() {
        let n = 6;
        let mut seen = Vec::new();
        for t in 0..n * (n - 1) / 2 {
            seen.push(triangular_pair(n, t));
        }
        let want: Vec<_> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        assert_eq!(seen, want);
    }

    #[test]
    fn orthogonality_examples() {
        assert_eq!(orthogonality_expectation(1.0, 10), 0.0);
        assert!((orthogonality_expectation(16f64.exp(), 16) - 1.0).abs() < 1e-12);
        let v = orthogonality_expectation(1e8, 512);
        assert!((v - (1e8f64.ln() / 512.0).sqrt()).abs() < 1e-15);
        assert!((v - 0.1897).abs() < 5e-5);
    }

    #[test]
    fn report_without_scores() {
        let s = random_set(3, 4, 5, 3);
        let r = property_report(&s, None).unwrap();
        assert_eq!(r.classes.len(), 3);
        assert!(r.averages.diversity.is_none());
        for c in &r.classes {
            assert!((c.consistency - class_consistency(&s, c.class).unwrap()).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&c.consistency));
            assert!((0.0..=2.0).contains(&c.separability));
        }
        let norm = r.normalized_by(&r.averages, "self");
        assert!((norm.averages.consistency - 1.0).abs() < 1e-12);
        assert_eq!(norm.baseline.as_deref(), Some("self"));
    }

    proptest! {
        #[test]
        fn consistency_ignores_positive_rescaling(seed in 0u64..500, scales in proptest::collection::vec(0.01f64..100.0, 5)) {
            let s = random_set(1, 5, 4, seed);
            let mut m = s.matrix().clone();
            for (i, f) in scales.iter().enumerate() {
                m.row_mut(i).iter_mut().for_each(|x| *x *= f);
            }
            let scaled = LabeledEmbeddingSet::new(m, s.labels().to_vec(), 1).unwrap();
            prop_assert!((class_consistency(&s, 0).unwrap() - class_consistency(&scaled, 0).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn diversity_ignores_member_order(scores in proptest::collection::vec(0.0f64..=1.0, 2..12), rot in 0usize..12) {
            let n = scores.len();
            let s = LabeledEmbeddingSet::new(Matrix::new(n, 1, vec![1.0; n]).unwrap(), vec![0; n], 1).unwrap();
            let mut rotated = scores.clone();
            rotated.rotate_left(rot % n);
            let a = class_diversity(&QualityScoreSet::new(scores.clone()).unwrap(), &s, 0).unwrap();
            let b = class_diversity(&QualityScoreSet::new(rotated).unwrap(), &s, 0).unwrap();
            prop_assert!((a.1 - b.1).abs() < 1e-15);
            let mean = scores.iter().sum::<f64>() / n as f64;
            let var = scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!((a.1 - var).abs() < 1e-15);
        }

        #[test]
        fn swapping_labels_permutes_separability(seed in 0u64..500) {
            let s = random_set(4, 3, 5, seed);
            let swapped: Vec<usize> = s.labels().iter().map(|&l| match l { 0 => 2, 2 => 0, x => x }).collect();
            let t = LabeledEmbeddingSet::new(s.matrix().clone(), swapped, 4).unwrap();
            let a = separability_all(&class_centers(&s).unwrap()).unwrap();
            let b = separability_all(&class_centers(&t).unwrap()).unwrap();
            prop_assert!((a[0] - b[2]).abs() < 1e-12 && (a[2] - b[0]).abs() < 1e-12);
            prop_assert!((a[1] - b[1]).abs() < 1e-12 && (a[3] - b[3]).abs() < 1e-12);
        }

        #[test]
        fn minmax_preserves_order(seed in 0u64..500) {
            let bank = PrototypeBank::random(4, 2, 3, seed).unwrap();
            let raw = prototype_similarity_matrix(&bank, false).unwrap();
            let mm = prototype_similarity_matrix(&bank, true).unwrap();
            let (r, m) = (raw.as_slice(), mm.as_slice());
            for i in 0..r.len() {
                for j in 0..r.len() {
                    // Rescaling is monotone; rounding may merge near-equal values.
                    if r[i] < r[j] {
                        prop_assert!(m[i] <= m[j]);
                    }
                    if r[i] == r[j] {
                        prop_assert_eq!(m[i], m[j]);
                    }
                }
            }
        }
    }
}
