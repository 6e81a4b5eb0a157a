//! Joint training of real and virtual identity prototypes.
//!
//! Real rows of the prototype bank are trained from fixed real embeddings.
//! Virtual rows have no data of their own: each step synthesizes virtual
//! embeddings `w_v + ε ⊙ σ`, where `σ` tracks the per-dimension spread of
//! real embeddings around their prototypes, and both sets go through the
//! same margin loss. Gradients with respect to the synthesized embeddings are
//! masked out, as they would never reach an encoder.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::arcface::{arcface_forward_backward, ArcFaceConfig};
use crate::embedding::{cosine_block, LabeledEmbeddingSet, Matrix, DEFAULT_BLOCK, MIN_NORM};
use crate::embedding::norm;
use crate::error::{Error, Result};

/// EMA weight on the current batch statistic.
pub const DEFAULT_EMA_ALPHA: f64 = 0.9;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Prototype matrix whose first `n_real` rows are real identities and
/// remaining `k_virtual` rows are virtual identities.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    matrix: Matrix,
    n_real: usize,
    k_virtual: usize,
}

impl PrototypeBank {
    pub fn new(matrix: Matrix, n_real: usize, k_virtual: usize) -> Result<Self> {
        if matrix.rows() != n_real + k_virtual {
            return Err(Error::LengthMismatch { expected: n_real + k_virtual, found: matrix.rows() });
        }
        if matrix.rows() > 0 && matrix.cols() == 0 {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        if !matrix.is_finite() {
            return Err(Error::NonFiniteInput { what: "prototype bank" });
        }
        for (i, r) in matrix.iter_rows().enumerate() {
            let n = norm(r);
            if n <= MIN_NORM {
                return Err(Error::ZeroNormRow { row: i, norm: n });
            }
        }
        Ok(PrototypeBank { matrix, n_real, k_virtual })
    }

    /// Rows drawn from an isotropic normal scaled by `1/sqrt(dim)`.
    pub fn random(n_real: usize, k_virtual: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ConfigInvalid("prototype dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let data = (0..(n_real + k_virtual) * dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        Self::new(Matrix::new(n_real + k_virtual, dim, data)?, n_real, k_virtual)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn k_virtual(&self) -> usize {
        self.k_virtual
    }

    pub fn len(&self) -> usize {
        self.n_real + self.k_virtual
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn real_row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    /// Row of virtual identity `j` (`0..k_virtual`).
    pub fn virtual_row(&self, j: usize) -> &[f64] {
        self.matrix.row(self.n_real + j)
    }

    pub fn real_prototypes(&self) -> Matrix {
        self.matrix.select_rows(&(0..self.n_real).collect::<Vec<_>>())
    }

    pub fn virtual_prototypes(&self) -> Matrix {
        self.matrix.select_rows(&(self.n_real..self.len()).collect::<Vec<_>>())
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }
}

/// Per-dimension residual standard deviation with EMA smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaTracker {
    sigma: Vec<f64>,
    alpha: f64,
    iteration: u64,
}

impl SigmaTracker {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        Self::from_parts(vec![0.0; dim], alpha, 0)
    }

    pub fn from_parts(sigma: Vec<f64>, alpha: f64, iteration: u64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::ConfigInvalid(format!("EMA alpha {alpha} must lie in (0, 1]")));
        }
        if !sigma.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(Error::NonFiniteInput { what: "sigma" });
        }
        Ok(SigmaTracker { sigma, alpha, iteration })
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_initialized(&self) -> bool {
        self.iteration > 0
    }

    /// In-place form of [`ema_update`].
    pub fn update(&mut self, batch_sigma: &[f64]) -> Result<()> {
        if batch_sigma.len() != self.sigma.len() {
            return Err(Error::DimensionMismatch { expected: self.sigma.len(), found: batch_sigma.len() });
        }
        if !batch_sigma.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(Error::NonFiniteInput { what: "batch sigma" });
        }
        if self.iteration == 0 {
            self.sigma.copy_from_slice(batch_sigma);
        } else {
            let a = self.alpha;
            let keep = decimal_complement(a);
            for (s, &b) in self.sigma.iter_mut().zip(batch_sigma) {
                *s = a * b + keep * *s;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

/// `1 − a`, evaluated on the shortest decimal form of `a` so that a
/// configured 0.9 keeps exactly the double nearest 0.1 rather than
/// `1.0 - 0.9 = 0.09999999999999998`.
fn decimal_complement(a: f64) -> f64 {
    let text = a.to_string();
    if let Some(frac) = text.strip_prefix("0.") {
        if frac.len() <= 18 && frac.bytes().all(|c| c.is_ascii_digit()) {
            let scale = 10u64.pow(frac.len() as u32);
            let digits: u64 = frac.parse().expect("digits checked");
            return format!("0.{:0width$}", scale - digits, width = frac.len()).parse().expect("valid decimal");
        }
    }
    1.0 - a
}

/// `α·batch + (1 − α)·previous`; the first update takes the batch value as is.
pub fn ema_update(tracker: &SigmaTracker, batch_sigma: &[f64]) -> Result<SigmaTracker> {
    let mut next = tracker.clone();
    next.update(batch_sigma)?;
    Ok(next)
}

/// Virtual rows per step so that real and virtual prototypes see the same
/// number of samples per identity on average: `round(k·b_r/n)`, at least 1
/// when `k > 0`.
pub fn virtual_batch_size(n: usize, k: usize, b_r: usize) -> usize {
    if k == 0 || n == 0 {
        return 0;
    }
    let exact = (k as u128 * b_r as u128) as f64 / n as f64;
    (exact.round() as usize).max(1)
}

/// `σ_d = sqrt(mean_i (e_i,d − w_{y_i},d)²)` over a batch of real embeddings.
pub fn batch_residual_sigma(embeddings: &Matrix, labels: &[usize], bank: &PrototypeBank) -> Result<Vec<f64>> {
    let (b, d) = (embeddings.rows(), embeddings.cols());
    if labels.len() != b {
        return Err(Error::LengthMismatch { expected: b, found: labels.len() });
    }
    if b == 0 {
        return Err(Error::ConfigInvalid("residual sigma needs at least one embedding".into()));
    }
    if d != bank.dim() {
        return Err(Error::DimensionMismatch { expected: bank.dim(), found: d });
    }
    let mut acc = vec![0.0; d];
    for (row, &y) in embeddings.iter_rows().zip(labels) {
        if y >= bank.n_real() {
            return Err(Error::LabelOutOfRange { label: y, limit: bank.n_real() });
        }
        for ((a, &e), &w) in acc.iter_mut().zip(row).zip(bank.real_row(y)) {
            let r = e - w;
            *a += r * r;
        }
    }
    let inv = 1.0 / b as f64;
    Ok(acc.into_iter().map(|a| (a * inv).sqrt()).collect())
}

/// Row `i` is `w_v[ids[i]] + ε ⊙ σ` with standard normal `ε`.
pub fn synth_virtual_embeddings(
    bank: &PrototypeBank,
    tracker: &SigmaTracker,
    virtual_ids: &[usize],
    rng_seed: u64,
) -> Result<Matrix> {
    if !tracker.is_initialized() {
        return Err(Error::TrackerUninitialized);
    }
    let d = bank.dim();
    if tracker.sigma().len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: tracker.sigma().len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Matrix::zeros(virtual_ids.len(), d);
    for (i, &id) in virtual_ids.iter().enumerate() {
        if id >= bank.k_virtual() {
            return Err(Error::LabelOutOfRange { label: id, limit: bank.k_virtual() });
        }
        let proto = bank.virtual_row(id);
        for ((o, &w), &s) in out.row_mut(i).iter_mut().zip(proto).zip(tracker.sigma()) {
            let eps: f64 = rng.sample(StandardNormal);
            *o = w + eps * s;
        }
    }
    Ok(out)
}

/// Stage-1 hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    /// Number of virtual identities `k`.
    pub virtual_ids: usize,
    /// Real embeddings per step `b_r`.
    pub batch_real: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Iterations at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_at: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub margin: f64,
    pub scale: f64,
    pub ema_alpha: f64,
    /// Virtual embeddings equal their prototypes exactly (σ forced to 0).
    pub ablation_no_virtual_noise: bool,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            virtual_ids: 20,
            batch_real: 128,
            iterations: 2000,
            learning_rate: 0.1,
            lr_decay_at: vec![1200, 1500, 1800],
            lr_decay_factor: 0.1,
            momentum: DEFAULT_MOMENTUM,
            margin: 0.5,
            scale: 30.0,
            ema_alpha: DEFAULT_EMA_ALPHA,
            ablation_no_virtual_noise: false,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn arcface(&self) -> ArcFaceConfig {
        ArcFaceConfig { margin: self.margin, scale: self.scale }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        self.arcface().validate()?;
        if self.batch_real == 0 {
            return bad("batch_real must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.lr_decay_at.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_at must be strictly increasing".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor {} must lie in (0, 1)", self.lr_decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return bad(format!("ema_alpha {} must lie in (0, 1]", self.ema_alpha));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based iteration.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let drops = self.lr_decay_at.iter().filter(|&&t| iteration >= t).count();
        self.learning_rate * self.lr_decay_factor.powi(drops as i32)
    }
}

/// Mutable training state: bank, σ tracker and the momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1State {
    pub bank: PrototypeBank,
    pub tracker: SigmaTracker,
    velocity: Matrix,
}

impl Stage1State {
    pub fn new(bank: PrototypeBank, tracker: SigmaTracker) -> Result<Self> {
        if tracker.sigma().len() != bank.dim() {
            return Err(Error::DimensionMismatch { expected: bank.dim(), found: tracker.sigma().len() });
        }
        let velocity = Matrix::zeros(bank.len(), bank.dim());
        Ok(Stage1State { bank, tracker, velocity })
    }

    pub fn velocity(&self) -> &Matrix {
        &self.velocity
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    /// Virtual identities sampled this step, `0..k`.
    pub virtual_ids: Vec<usize>,
    pub grad_prototypes: Matrix,
    /// Real rows first, then virtual rows (always zero).
    pub grad_embeddings: Matrix,
}

/// One optimization step on a real batch plus synthesized virtual rows.
///
/// `lr` is the learning rate for this step; the schedule is applied by the
/// caller. `rng_seed` drives virtual-identity sampling and the noise.
pub fn stage1_step(
    state: &mut Stage1State,
    embeddings: &Matrix,
    labels: &[usize],
    cfg: &TrainRunConfig,
    lr: f64,
    rng_seed: u64,
) -> Result<StepOutcome> {
    let bank = &state.bank;
    if embeddings.cols() != bank.dim() {
        return Err(Error::DimensionMismatch { expected: bank.dim(), found: embeddings.cols() });
    }
    let batch_sigma = batch_residual_sigma(embeddings, labels, bank)?;
    state.tracker.update(&batch_sigma)?;

    let (n, k) = (bank.n_real(), bank.k_virtual());
    let b_v = virtual_batch_size(n, k, embeddings.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let virtual_ids: Vec<usize> = if b_v <= k {
        index::sample(&mut rng, k, b_v).into_vec()
    } else {
        (0..b_v).map(|_| rng.random_range(0..k)).collect()
    };
    let noise_seed = rng.next_u64();

    let virtual_rows = if cfg.ablation_no_virtual_noise {
        bank.matrix().select_rows(&virtual_ids.iter().map(|&j| n + j).collect::<Vec<_>>())
    } else {
        synth_virtual_embeddings(bank, &state.tracker, &virtual_ids, noise_seed)?
    };
    let batch = embeddings.vstack(&virtual_rows)?;
    let mut all_labels = labels.to_vec();
    all_labels.extend(virtual_ids.iter().map(|&j| n + j));
    let mut mask = vec![true; labels.len()];
    mask.resize(all_labels.len(), false);

    let res = arcface_forward_backward(&batch, &all_labels, bank.matrix(), &cfg.arcface(), &mask)?;

    let mu = cfg.momentum;
    let mut next = bank.matrix().clone();
    for ((w, v), &g) in next
        .as_mut_slice()
        .iter_mut()
        .zip(state.velocity.as_mut_slice())
        .zip(res.grad_prototypes.as_slice())
    {
        *v = mu * *v + g;
        *w -= lr * *v;
    }
    if !next.is_finite() {
        return Err(Error::NonFiniteInput { what: "updated prototypes" });
    }
    state.bank = PrototypeBank::new(next, n, k)?;

    Ok(StepOutcome {
        loss: res.loss,
        virtual_ids,
        grad_prototypes: res.grad_prototypes,
        grad_embeddings: res.grad_embeddings,
    })
}

/// Mean and max of off-diagonal prototype cosines within one block pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub mean: f64,
    pub max: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimilaritySummary {
    pub real_real: Option<PairStats>,
    pub real_virtual: Option<PairStats>,
    pub virtual_virtual: Option<PairStats>,
}

impl SimilaritySummary {
    pub fn of(bank: &PrototypeBank) -> Result<Self> {
        let m = bank.matrix();
        if m.rows() == 0 {
            return Ok(SimilaritySummary::default());
        }
        let cos = cosine_block(m, m, DEFAULT_BLOCK)?;
        let n = bank.n_real();
        let total = bank.len();
        let stats = |pairs: &mut dyn Iterator<Item = (usize, usize)>| {
            let (mut sum, mut max, mut count) = (0.0, f64::NEG_INFINITY, 0usize);
            for (i, j) in pairs {
                let c = cos.get(i, j);
                sum += c;
                max = max.max(c);
                count += 1;
            }
            (count > 0).then(|| PairStats { mean: sum / count as f64, max, pairs: count })
        };
        Ok(SimilaritySummary {
            real_real: stats(&mut (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)))),
            real_virtual: stats(&mut (0..n).flat_map(|i| (n..total).map(move |j| (i, j)))),
            virtual_virtual: stats(&mut (n..total).flat_map(|i| (i + 1..total).map(move |j| (i, j)))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainCheckpoint {
    pub iteration: usize,
    /// Mean step loss since the previous checkpoint; `None` before training.
    pub loss: Option<f64>,
    pub learning_rate: f64,
    pub summary: SimilaritySummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoints: Vec<TrainCheckpoint>,
    pub bank: PrototypeBank,
    pub tracker: SigmaTracker,
}

/// Trains a freshly initialized bank with `n_real = data.class_count()`.
pub fn train_stage1(data: &LabeledEmbeddingSet, cfg: &TrainRunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bank = PrototypeBank::random(data.class_count(), cfg.virtual_ids, data.dim(), master.next_u64())?;
    let tracker = SigmaTracker::new(data.dim(), cfg.ema_alpha)?;
    train_stage1_from(Stage1State::new(bank, tracker)?, data, cfg, &mut master)
}

/// Continues training from a saved bank and sigma tracker with a fresh
/// learning-rate schedule and zero momentum, seeded by `cfg.seed`.
pub fn resume_stage1(state: Stage1State, data: &LabeledEmbeddingSet, cfg: &TrainRunConfig) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    train_stage1_from(state, data, cfg, &mut rng)
}

/// Continues training from an existing state, drawing all randomness from `rng`.
pub fn train_stage1_from(
    mut state: Stage1State,
    data: &LabeledEmbeddingSet,
    cfg: &TrainRunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.dim() != state.bank.dim() {
        return Err(Error::DimensionMismatch { expected: state.bank.dim(), found: data.dim() });
    }
    if data.class_count() > state.bank.n_real() {
        return Err(Error::LabelOutOfRange { label: data.class_count() - 1, limit: state.bank.n_real() });
    }
    if data.is_empty() && cfg.iterations > 0 {
        return Err(Error::ConfigInvalid("training data is empty".into()));
    }

    let mut checkpoints = vec![TrainCheckpoint {
        iteration: 0,
        loss: None,
        learning_rate: cfg.learning_rate_at(0),
        summary: SimilaritySummary::of(&state.bank)?,
    }];

    let m = data.len();
    let b_r = cfg.batch_real.min(m.max(1));
    let mut order: Vec<usize> = (0..m).collect();
    let mut cursor = m;
    let mut batch_idx = Vec::with_capacity(b_r);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;

    for it in 0..cfg.iterations {
        batch_idx.clear();
        while batch_idx.len() < b_r {
            if cursor == m {
                shuffle(&mut order, rng);
                cursor = 0;
            }
            let take = (b_r - batch_idx.len()).min(m - cursor);
            batch_idx.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let emb = data.matrix().select_rows(&batch_idx);
        let labels: Vec<usize> = batch_idx.iter().map(|&i| data.labels()[i]).collect();
        let lr = cfg.learning_rate_at(it);
        let step_seed = rng.next_u64();
        let out = stage1_step(&mut state, &emb, &labels, cfg, lr, step_seed)?;
        loss_sum += out.loss;
        loss_count += 1;

        let done = it + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.iterations {
            checkpoints.push(TrainCheckpoint {
                iteration: done,
                loss: Some(loss_sum / loss_count as f64),
                learning_rate: lr,
                summary: SimilaritySummary::of(&state.bank)?,
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }

    Ok(TrainReport { checkpoints, bank: state.bank, tracker: state.tracker })
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}
