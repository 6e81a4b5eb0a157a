//! Central-difference verification of the analytic margin-loss gradients.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{arcface_forward_backward, ArcFaceConfig};
use crate::embedding::Matrix;
use crate::error::{Error, Result};

/// Most coordinates compared in a single check.
pub const MAX_CHECKED_COORDS: usize = 32;

/// A small random loss problem.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub prototypes: Matrix,
    pub mask: Vec<bool>,
    /// Seeds the choice of coordinates to perturb.
    pub seed: u64,
}

impl GradCheckInstance {
    /// Random directions with norms in `[0.5, 2]`, every embedding row unmasked.
    pub fn random(dim: usize, classes: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = |n: usize, rng: &mut ChaCha8Rng| {
            let mut m = Matrix::zeros(n, dim);
            for r in 0..n {
                let row = m.row_mut(r);
                row.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
                let len = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let target = rng.random_range(0.5..2.0);
                row.iter_mut().for_each(|x| *x *= target / len);
            }
            m
        };
        let embeddings = rows(batch, &mut rng);
        let prototypes = rows(classes, &mut rng);
        let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        GradCheckInstance { embeddings, labels, prototypes, mask: vec![true; batch], seed }
    }

    fn loss(&self, e: &Matrix, w: &Matrix, cfg: &ArcFaceConfig) -> Result<f64> {
        Ok(arcface_forward_backward(e, &self.labels, w, cfg, &self.mask)?.loss)
    }
}

/// Largest `|analytic − numeric| / max(1, |numeric|)` over at most
/// [`MAX_CHECKED_COORDS`] sampled prototype and unmasked embedding coordinates.
pub fn gradient_check(cfg: &ArcFaceConfig, instance: &GradCheckInstance, step: f64) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&step) {
        return Err(Error::ConfigInvalid(format!("finite-difference step {step} outside [1e-7, 1e-4]")));
    }
    let analytic = arcface_forward_backward(
        &instance.embeddings,
        &instance.labels,
        &instance.prototypes,
        cfg,
        &instance.mask,
    )?;
    if !analytic.loss.is_finite() {
        return Err(Error::NonFiniteInput { what: "loss" });
    }

    // (is_prototype, flat index) candidates; masked embedding rows are excluded.
    let d = instance.embeddings.cols();
    let mut candidates: Vec<(bool, usize)> = (0..instance.prototypes.as_slice().len()).map(|i| (true, i)).collect();
    for (r, &on) in instance.mask.iter().enumerate() {
        if on {
            candidates.extend((r * d..(r + 1) * d).map(|i| (false, i)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(instance.seed ^ 0x9e37_79b9_7f4a_7c15);
    let take = candidates.len().min(MAX_CHECKED_COORDS);
    let mut picked: Vec<(bool, usize)> =
        index::sample(&mut rng, candidates.len(), take).into_iter().map(|i| candidates[i]).collect();
    picked.sort_unstable();

    let mut worst = 0.0f64;
    for (is_proto, idx) in picked {
        let grad = if is_proto { analytic.grad_prototypes.as_slice()[idx] } else { analytic.grad_embeddings.as_slice()[idx] };
        let perturbed = |delta: f64| -> Result<f64> {
            let mut e = instance.embeddings.clone();
            let mut w = instance.prototypes.clone();
            let slot = if is_proto { &mut w.as_mut_slice()[idx] } else { &mut e.as_mut_slice()[idx] };
            *slot += delta;
            instance.loss(&e, &w, cfg)
        };
        let (plus, minus) = (perturbed(step)?, perturbed(-step)?);
        let numeric = (plus - minus) / (2.0 * step);
        if !numeric.is_finite() || !grad.is_finite() {
            return Err(Error::NonFiniteInput { what: "gradient" });
        }
        worst = worst.max((grad - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instance_with_margin() {
        let inst = GradCheckInstance::random(4, 3, 5, 17);
        let err = gradient_check(&ArcFaceConfig::new(0.3, 10.0).unwrap(), &inst, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn small_instance_without_margin() {
        let inst = GradCheckInstance::random(4, 3, 5, 17);
        let err = gradient_check(&ArcFaceConfig::new(0.0, 1.0).unwrap(), &inst, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn masked_rows_are_skipped_and_zero() {
        let mut inst = GradCheckInstance::random(4, 3, 4, 5);
        inst.mask = vec![true, false, true, false];
        let cfg = ArcFaceConfig::new(0.3, 10.0).unwrap();
        assert!(gradient_check(&cfg, &inst, 1e-5).unwrap() < 1e-5);
        let r = arcface_forward_backward(&inst.embeddings, &inst.labels, &inst.prototypes, &cfg, &inst.mask).unwrap();
        assert!(r.grad_embeddings.row(1).iter().chain(r.grad_embeddings.row(3)).all(|&v| v == 0.0));
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let inst = GradCheckInstance::random(2, 2, 1, 0);
        assert!(gradient_check(&ArcFaceConfig::default(), &inst, 1e-3).is_err());
    }
}
