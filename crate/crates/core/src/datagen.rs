//! Synthetic identity clusters used as fixed real embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedding::{norm, LabeledEmbeddingSet, Matrix};
use crate::error::{Error, Result};

/// A direction drawn uniformly from the unit sphere in `dim` dimensions.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// `count` uniform random unit vectors.
pub fn random_unit_vectors(count: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        data.extend(random_unit_vector(&mut rng, dim));
    }
    Matrix::new(count, dim, data).expect("shape is consistent")
}

/// `n_ids` identities with a uniform random mean direction each and
/// `per_id` members `normalize(mean + jitter·N(0, I))`, stored class by class.
pub fn generate_synthetic_clusters(
    n_ids: usize,
    per_id: usize,
    dim: usize,
    jitter: f64,
    seed: u64,
) -> Result<LabeledEmbeddingSet> {
    if n_ids == 0 || per_id == 0 || dim == 0 {
        return Err(Error::ConfigInvalid("n_ids, per_id and dim must all be at least 1".into()));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::ConfigInvalid(format!("jitter {jitter} must be finite and nonnegative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_ids * per_id * dim);
    let mut labels = Vec::with_capacity(n_ids * per_id);
    for id in 0..n_ids {
        let mean = random_unit_vector(&mut rng, dim);
        for _ in 0..per_id {
            let mut v: Vec<f64> = mean.iter().map(|&m| m + jitter * rng.sample::<f64, _>(StandardNormal)).collect();
            let n = norm(&v);
            if n > 1e-12 {
                v.iter_mut().for_each(|x| *x /= n);
            } else {
                v.copy_from_slice(&mean);
            }
            data.extend(v);
            labels.push(id);
        }
    }
    LabeledEmbeddingSet::new(Matrix::new(n_ids * per_id, dim, data)?, labels, n_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::class_consistency;

    #[test]
    fn zero_jitter_members_are_identical() {
        let s = generate_synthetic_clusters(3, 4, 5, 0.0, 1).unwrap();
        for k in 0..3 {
            let m = s.class_members(k).unwrap();
            for &i in &m[1..] {
                assert_eq!(s.matrix().row(i), s.matrix().row(m[0]));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic_clusters(4, 3, 6, 0.2, 9).unwrap();
        let b = generate_synthetic_clusters(4, 3, 6, 0.2, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_clusters(4, 3, 6, 0.2, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn clusters_are_tighter_than_cross_class_pairs() {
        let s = generate_synthetic_clusters(10, 8, 64, 0.1, 3).unwrap();
        let mean_c: f64 = (0..10).map(|k| class_consistency(&s, k).unwrap()).sum::<f64>() / 10.0;
        let mut cross = 0.0;
        let mut n = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s.labels()[i] != s.labels()[j] {
                    cross += crate::kernel::dot(s.matrix().row(i), s.matrix().row(j));
                    n += 1.0;
                }
            }
        }
        let cross = cross / n;
        assert!(mean_c > 0.5 && cross.abs() < 0.1, "{mean_c} vs {cross}");
    }

    #[test]
    fn rejects_zero_counts() {
        assert!(generate_synthetic_clusters(0, 1, 1, 0.0, 0).is_err());
        assert!(generate_synthetic_clusters(1, 1, 1, -1.0, 0).is_err());
    }
}
