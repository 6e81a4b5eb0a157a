//! Surrogate "generated image" embeddings sampled around prototypes, so the
//! metric and leakage pipeline can run without an image generator.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{norm, LabeledEmbeddingSet, Matrix};
use crate::error::{Error, Result};
use crate::trainer::PrototypeBank;

/// Which rows of a prototype bank to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Real,
    Virtual,
    Both,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Real => "real",
            Partition::Virtual => "virtual",
            Partition::Both => "both",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Partition::Real),
            "virtual" => Ok(Partition::Virtual),
            "both" => Ok(Partition::Both),
            other => Err(Error::ConfigInvalid(format!("unknown partition {other:?} (real|virtual|both)"))),
        }
    }
}

impl Partition {
    /// Bank row range covered by the partition.
    pub fn rows(self, bank: &PrototypeBank) -> std::ops::Range<usize> {
        match self {
            Partition::Real => 0..bank.n_real(),
            Partition::Virtual => bank.n_real()..bank.len(),
            Partition::Both => 0..bank.len(),
        }
    }

    /// The selected prototype rows as a matrix.
    pub fn select(self, bank: &PrototypeBank) -> Result<Matrix> {
        let rows: Vec<usize> = self.rows(bank).collect();
        if rows.is_empty() {
            return Err(Error::EmptyPartition(self));
        }
        Ok(bank.matrix().select_rows(&rows))
    }
}

/// Noise scale, shared by every dimension or given per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Spread {
    Scalar(f64),
    PerDim(Vec<f64>),
}

impl Spread {
    fn at(&self, d: usize) -> f64 {
        match self {
            Spread::Scalar(s) => *s,
            Spread::PerDim(v) => v[d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub per_class: usize,
    pub spread: Spread,
    /// Multiplies the prototype before noise is added, in `(0, 1]`.
    pub tightness: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig { per_class: 20, spread: Spread::Scalar(0.05), tightness: 1.0, seed: 0 }
    }
}

impl SurrogateConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::ConfigInvalid("per_class must be at least 1".into()));
        }
        if !(self.tightness > 0.0 && self.tightness <= 1.0) {
            return Err(Error::ConfigInvalid(format!("tightness {} must lie in (0, 1]", self.tightness)));
        }
        let ok = |s: f64| s.is_finite() && s >= 0.0;
        match &self.spread {
            Spread::Scalar(s) if !ok(*s) => Err(Error::ConfigInvalid(format!("spread {s} must be finite and nonnegative"))),
            Spread::PerDim(v) if v.len() != dim => Err(Error::DimensionMismatch { expected: dim, found: v.len() }),
            Spread::PerDim(v) if !v.iter().all(|&s| ok(s)) => {
                Err(Error::ConfigInvalid("per-dimension spread must be finite and nonnegative".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Samples `per_class` unit embeddings `normalize(tightness·w_j + ε ⊙ spread)`
/// for every prototype `w_j` in the partition. Labels are row indices within
/// the partition. Each class draws from its own seeded stream.
pub fn sample_surrogate_dataset(bank: &PrototypeBank, which: Partition, cfg: &SurrogateConfig) -> Result<LabeledEmbeddingSet> {
    let protos = which.select(bank)?;
    let d = bank.dim();
    cfg.validate(d)?;
    let k = protos.rows();
    let n = cfg.per_class;
    let blocks: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (j as u64).wrapping_mul(0xd1b5_4a32_d192_ed03));
            let w = protos.row(j);
            let mut out = Vec::with_capacity(n * d);
            let mut v = vec![0.0; d];
            for _ in 0..n {
                for (c, slot) in v.iter_mut().enumerate() {
                    let eps: f64 = rng.sample(StandardNormal);
                    *slot = cfg.tightness * w[c] + eps * cfg.spread.at(c);
                }
                let len = norm(&v);
                if !(len > 1e-12) {
                    return Err(Error::ZeroNormRow { row: j, norm: len });
                }
                out.extend(v.iter().map(|x| x / len));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = blocks.concat();
    let labels = (0..k).flat_map(|j| std::iter::repeat(j).take(n)).collect();
    LabeledEmbeddingSet::new(Matrix::new(k * n, d, data)?, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{class_centers, normalize_rows};
    use crate::metrics::class_consistency;

    #[test]
    fn zero_spread_reproduces_normalized_prototypes() {
        let bank = PrototypeBank::random(3, 4, 6, 1).unwrap();
        let cfg = SurrogateConfig { per_class: 5, spread: Spread::Scalar(0.0), tightness: 1.0, seed: 3 };
        let s = sample_surrogate_dataset(&bank, Partition::Virtual, &cfg).unwrap();
        assert_eq!(s.class_count(), 4);
        assert_eq!(s.len(), 20);
        let want = normalize_rows(&bank.virtual_prototypes()).unwrap();
        let c = class_centers(&s).unwrap();
        for (a, b) in c.centers().as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for k in 0..4 {
            assert!((class_consistency(&s, k).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_spread_approaches_random_pairs() {
        let bank = PrototypeBank::random(4, 0, 64, 2).unwrap();
        let cfg = SurrogateConfig { per_class: 30, spread: Spread::Scalar(100.0), tightness: 1.0, seed: 3 };
        let s = sample_surrogate_dataset(&bank, Partition::Real, &cfg).unwrap();
        for k in 0..4 {
            // Self-pairs alone contribute 1/N.
            assert!(class_consistency(&s, k).unwrap() < 1.0 / 30.0 + 0.02);
        }
    }

    #[test]
    fn consistency_falls_as_spread_grows() {
        let bank = PrototypeBank::random(5, 5, 32, 7).unwrap();
        let mut last = f64::INFINITY;
        for spread in [0.0, 0.02, 0.05, 0.1, 0.2, 0.5] {
            let cfg = SurrogateConfig { per_class: 10, spread: Spread::Scalar(spread), tightness: 1.0, seed: 11 };
            let s = sample_surrogate_dataset(&bank, Partition::Both, &cfg).unwrap();
            let mean = (0..s.class_count()).map(|k| class_consistency(&s, k).unwrap()).sum::<f64>() / 10.0;
            assert!(mean <= last + 1e-12, "{mean} > {last} at spread {spread}");
            last = mean;
        }
    }

    #[test]
    fn labels_partition_rows_and_runs_are_deterministic() {
        let bank = PrototypeBank::random(2, 3, 4, 5).unwrap();
        let cfg = SurrogateConfig { per_class: 4, ..SurrogateConfig::default() };
        let a = sample_surrogate_dataset(&bank, Partition::Both, &cfg).unwrap();
        assert_eq!(a.labels(), &[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4]);
        assert_eq!(a, sample_surrogate_dataset(&bank, Partition::Both, &cfg).unwrap());
    }

    #[test]
    fn empty_partition_and_bad_config() {
        let bank = PrototypeBank::random(2, 0, 4, 5).unwrap();
        assert!(matches!(
            sample_surrogate_dataset(&bank, Partition::Virtual, &SurrogateConfig::default()),
            Err(Error::EmptyPartition(Partition::Virtual))
        ));
        let cfg = SurrogateConfig { spread: Spread::PerDim(vec![0.1; 3]), ..SurrogateConfig::default() };
        assert!(sample_surrogate_dataset(&bank, Partition::Real, &cfg).is_err());
        let cfg = SurrogateConfig { tightness: 0.0, ..SurrogateConfig::default() };
        assert!(sample_surrogate_dataset(&bank, Partition::Real, &cfg).is_err());
    }
}
