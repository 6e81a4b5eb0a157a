//! Additive angular margin softmax loss with analytic gradients.
//!
//! For a batch row with unit embedding `u` and unit prototypes `ŵ_j`, the
//! logits are `s·cos θ_j` for non-target classes and `s·φ(cos θ_y)` for the
//! target, where `φ(c) = cos(acos(c) + m)` while `θ_y + m ≤ π` and
//! `φ(c) = c − m·sin m` past that point. The loss is the batch mean of the
//! softmax cross-entropy over those logits.

pub mod gradcheck;

use crate::embedding::{inverse_row_norms, Matrix};
use crate::error::{Error, Result};
use crate::kernel;

/// Bound on |cos θ| used inside the angle computation.
const COS_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArcFaceConfig {
    /// Additive angular margin, radians.
    pub margin: f64,
    pub scale: f64,
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        ArcFaceConfig { margin: 0.5, scale: 30.0 }
    }
}

impl ArcFaceConfig {
    pub fn new(margin: f64, scale: f64) -> Result<Self> {
        let cfg = ArcFaceConfig { margin, scale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin < std::f64::consts::FRAC_PI_2) {
            return Err(Error::ConfigInvalid(format!("margin {} must lie in [0, pi/2)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::ConfigInvalid(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    /// Target-logit cosine and its derivative with respect to `cos θ_y`.
    #[inline]
    pub fn margin_target(&self, cos: f64) -> (f64, f64) {
        let m = self.margin;
        let (sin_m, cos_m) = m.sin_cos();
        let c = cos.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS);
        if c >= -cos_m {
            let sine = (1.0 - c * c).sqrt();
            let phi = cos * cos_m - sine * sin_m;
            let dphi = if c == cos { cos_m + sin_m * c / sine } else { cos_m };
            (phi, dphi)
        } else {
            (cos - m * sin_m, 1.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossResult {
    /// Mean loss over the batch.
    pub loss: f64,
    pub grad_prototypes: Matrix,
    /// Zero on rows whose mask entry is false.
    pub grad_embeddings: Matrix,
    /// Scaled logits after the margin is applied.
    pub logits: Matrix,
}

/// Loss and gradients for a batch of raw (unnormalized) embeddings against
/// raw prototype rows.
pub fn arcface_forward_backward(
    embeddings: &Matrix,
    labels: &[usize],
    prototypes: &Matrix,
    cfg: &ArcFaceConfig,
    embedding_grad_mask: &[bool],
) -> Result<LossResult> {
    cfg.validate()?;
    let (b, d, c) = (embeddings.rows(), embeddings.cols(), prototypes.rows());
    if prototypes.cols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: prototypes.cols() });
    }
    if labels.len() != b {
        return Err(Error::LengthMismatch { expected: b, found: labels.len() });
    }
    if embedding_grad_mask.len() != b {
        return Err(Error::LengthMismatch { expected: b, found: embedding_grad_mask.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label: bad, limit: c });
    }
    if !embeddings.is_finite() {
        return Err(Error::NonFiniteInput { what: "embeddings" });
    }
    if !prototypes.is_finite() {
        return Err(Error::NonFiniteInput { what: "prototypes" });
    }

    let inv_e = inverse_row_norms(embeddings)?;
    let inv_w = inverse_row_norms(prototypes)?;
    let mut u = embeddings.clone();
    for (i, row) in (0..b).zip(u.as_mut_slice().chunks_exact_mut(d.max(1))) {
        row.iter_mut().for_each(|x| *x *= inv_e[i]);
    }
    let mut w = prototypes.clone();
    for (j, row) in (0..c).zip(w.as_mut_slice().chunks_exact_mut(d.max(1))) {
        row.iter_mut().for_each(|x| *x *= inv_w[j]);
    }

    let mut cos = Matrix::zeros(b, c);
    if b > 0 && c > 0 {
        kernel::dot_block(u.as_slice(), b, w.as_slice(), c, d, cos.as_mut_slice());
    }
    cos.as_mut_slice().iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));

    // dL/dcos for every (row, class), already divided by the batch size.
    let mut g = Matrix::zeros(b, c);
    let mut logits = Matrix::zeros(b, c);
    let mut total = 0.0;
    let s = cfg.scale;
    let inv_b = if b > 0 { 1.0 / b as f64 } else { 0.0 };
    for i in 0..b {
        let y = labels[i];
        let (phi, dphi) = cfg.margin_target(cos.get(i, y));
        let z = logits.row_mut(i);
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = s * if j == y { phi } else { cos.get(i, j) };
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - z[y];
        let gi = g.row_mut(i);
        for j in 0..c {
            let p = (logits.get(i, j) - lse).exp();
            gi[j] = if j == y { (p - 1.0) * s * dphi } else { p * s } * inv_b;
        }
    }
    let loss = (total * inv_b).max(0.0);

    // d cos_ij / d e_i = (ŵ_j − cos_ij u_i) / |e_i|, and symmetrically for w_j.
    let mut grad_e = Matrix::zeros(b, d);
    for i in 0..b {
        if !embedding_grad_mask[i] {
            continue;
        }
        let gi = g.row(i);
        let radial: f64 = gi.iter().zip(cos.row(i)).map(|(a, b)| a * b).sum();
        let out = grad_e.row_mut(i);
        for (j, &gij) in gi.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(w.row(j)) {
                *o += gij * wv;
            }
        }
        for (o, &uv) in out.iter_mut().zip(u.row(i)) {
            *o = (*o - radial * uv) * inv_e[i];
        }
    }

    let mut grad_w = Matrix::zeros(c, d);
    let mut radial_w = vec![0.0; c];
    for i in 0..b {
        let gi = g.row(i);
        let ci = cos.row(i);
        let ui = u.row(i);
        for j in 0..c {
            let gij = gi[j];
            radial_w[j] += gij * ci[j];
            for (o, &uv) in grad_w.row_mut(j).iter_mut().zip(ui) {
                *o += gij * uv;
            }
        }
    }
    for j in 0..c {
        let wj = w.row(j).to_vec();
        for (o, wv) in grad_w.row_mut(j).iter_mut().zip(wj) {
            *o = (*o - radial_w[j] * wv) * inv_w[j];
        }
    }

    Ok(LossResult { loss, grad_prototypes: grad_w, grad_embeddings: grad_e, logits })
}
