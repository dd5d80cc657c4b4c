//! Adam training of [`SaeModel`] over all patches of a corpus.
//!
//! Each step splits its batch into fixed-size row chunks, computes gradient
//! sums per chunk (in parallel when a rayon pool has more than one thread)
//! and reduces them in chunk order. The chunking does not depend on the
//! thread count, so runs are bitwise reproducible for a given seed.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::sae::{GradientSums, SaeModel};
use crate::store::{flatten_patches, PatchFeatureSet};

/// Rows per gradient chunk. Fixed so the reduction order is independent of
/// the worker count.
const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `h = expansion_factor * d`.
    pub expansion_factor: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Rescale decoder columns to unit norm after every step. Off by default.
    #[serde(default)]
    pub normalize_decoder: bool,
}

impl Default for TrainConfig {
    /// The large-scale recipe: expansion 8, lr 3e-4, lambda 3e-5, batch 4096,
    /// 200 epochs.
    fn default() -> Self {
        TrainConfig {
            expansion_factor: 8,
            lambda: 3e-5,
            learning_rate: 3e-4,
            batch_size: 4096,
            epochs: 200,
            seed: 0,
            normalize_decoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expansion_factor == 0 {
            return arg_err("expansion factor must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return arg_err(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return arg_err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return arg_err("batch size must be positive");
        }
        Ok(())
    }
}

/// Per-epoch means over all patches, measured before each step's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub sparsity: f64,
    /// Mean count of nonzero latents per patch.
    pub l0: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], hp: &AdamParams) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
}

fn step_matrix(state: &mut AdamState, params: &mut Array2<f64>, grads: &Array2<f64>, hp: &AdamParams) {
    let p = params.as_slice_mut().expect("weights are contiguous");
    let g = grads.as_slice().expect("gradients are contiguous");
    state.step(p, g, hp);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Seeded uniform initialization: encoder entries in `±sqrt(1/d)`, decoder
/// entries in `±sqrt(1/h)`.
pub fn init_model(d: usize, h: usize, rng: &mut impl Rng) -> Result<SaeModel> {
    let be = (1.0 / d as f64).sqrt();
    let bd = (1.0 / h as f64).sqrt();
    let w_enc = Array2::from_shape_simple_fn((h, d), || rng.random_range(-be..be));
    let w_dec = Array2::from_shape_simple_fn((d, h), || rng.random_range(-bd..bd));
    SaeModel::new(w_enc, w_dec)
}

pub fn train_sae(ds: &PatchFeatureSet, cfg: &TrainConfig) -> Result<(SaeModel, TrainLog)> {
    train_sae_with(ds, cfg, |_| {})
}

/// Like [`train_sae`], calling `on_epoch` after each epoch.
pub fn train_sae_with(
    ds: &PatchFeatureSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(SaeModel, TrainLog)> {
    cfg.validate()?;
    if ds.is_empty() {
        return arg_err("cannot train on an empty dataset");
    }
    let d = ds.d;
    let h = cfg.expansion_factor * d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(d, h, &mut rng)?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }

    let x = flatten_patches(ds);
    let n = x.nrows();
    let hp = AdamParams::with_lr(cfg.learning_rate);
    let mut enc_state = AdamState::new(h * d);
    let mut dec_state = AdamState::new(d * h);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut totals = GradientSums::zeros(0, 0);
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch = x.select(Axis(0), batch_idx);
            let sums = chunked_gradient_sums(&model, &batch, cfg.lambda)?;
            let rows = sums.rows as f64;
            let batch_loss = (sums.recon + cfg.lambda * sums.sparsity) / rows;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite batch loss {batch_loss}"),
                });
            }
            totals.recon += sums.recon;
            totals.sparsity += sums.sparsity;
            totals.active += sums.active;
            totals.rows += sums.rows;

            let grads = sums.into_mean(cfg.lambda);
            step_matrix(&mut enc_state, &mut model.w_enc, &grads.w_enc, &hp);
            step_matrix(&mut dec_state, &mut model.w_dec, &grads.w_dec, &hp);
            if cfg.normalize_decoder {
                model.normalize_decoder_columns();
            }
        }
        let rows = totals.rows as f64;
        let recon = totals.recon / rows;
        let sparsity = totals.sparsity / rows;
        let record = EpochRecord {
            epoch,
            total: recon + cfg.lambda * sparsity,
            recon,
            sparsity,
            l0: totals.active as f64 / rows,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok((model, log))
}

fn chunked_gradient_sums(model: &SaeModel, batch: &Array2<f64>, lambda: f64) -> Result<GradientSums> {
    let chunks: Vec<GradientSums> = batch
        .axis_chunks_iter(Axis(0), CHUNK_ROWS)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|chunk| model.gradient_sums(chunk, lambda))
        .collect::<Result<_>>()?;
    let mut it = chunks.into_iter();
    let mut acc = it.next().expect("batch is nonempty");
    for c in it {
        acc.accumulate(&c);
    }
    Ok(acc)
}

/// Mean per-patch loss terms and L0 of `model` over a corpus, without training.
pub fn evaluate_loss(model: &SaeModel, ds: &PatchFeatureSet, lambda: f64) -> Result<EpochRecord> {
    let x = flatten_patches(ds);
    if x.nrows() == 0 {
        return arg_err("cannot evaluate on an empty dataset");
    }
    let sums = chunked_gradient_sums(model, &x, lambda)?;
    let rows = sums.rows as f64;
    let recon = sums.recon / rows;
    let sparsity = sums.sparsity / rows;
    Ok(EpochRecord {
        epoch: 0,
        total: recon + lambda * sparsity,
        recon,
        sparsity,
        l0: sums.active as f64 / rows,
        seconds: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::FeatureGrid;

    #[test]
    fn default_is_large_scale_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.expansion_factor, c.batch_size, c.epochs), (8, 4096, 200));
        assert_eq!((c.learning_rate, c.lambda), (3e-4, 3e-5));
        assert_eq!(2048 * c.expansion_factor, 16384);
        assert!(!c.normalize_decoder);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut st = AdamState::new(3);
        for _ in 0..10 {
            st.step(&mut p, &[0.0; 3], &AdamParams::with_lr(0.1));
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn adam_first_step_matches_hand_value() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps)
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        st.step(&mut p, &[1.0], &AdamParams::with_lr(0.1));
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {}", p[0], expected);
    }

    fn toy_corpus(images: usize) -> PatchFeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ds = PatchFeatureSet::empty(4, 2, 2, 8, 8);
        for i in 0..images {
            let patches = Array2::from_shape_simple_fn((4, 4), || rng.random_range(-1.0..1.0));
            ds.images.push(FeatureGrid { image_id: i.to_string(), label: (i % 2) as u8, gt_boxes: vec![], patches });
        }
        ds
    }

    fn toy_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            expansion_factor: 2,
            lambda: 1e-3,
            learning_rate: 1e-2,
            batch_size: 16,
            epochs,
            seed: 5,
            normalize_decoder: false,
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let ds = toy_corpus(4);
        let (m, log) = train_sae(&ds, &toy_cfg(0)).unwrap();
        assert!(log.epochs.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(m, init_model(4, 8, &mut rng).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_reduces_recon() {
        let ds = toy_corpus(8);
        let (a, log_a) = train_sae(&ds, &toy_cfg(30)).unwrap();
        let (b, _) = train_sae(&ds, &toy_cfg(30)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.h(), 8);
        let first = log_a.epochs.first().unwrap().recon;
        let last = log_a.epochs.last().unwrap().recon;
        assert!(last <= first, "{last} > {first}");
    }

    #[test]
    fn empty_dataset_and_bad_config_rejected() {
        let ds = PatchFeatureSet::empty(4, 2, 2, 8, 8);
        assert!(matches!(train_sae(&ds, &toy_cfg(1)), Err(Error::Argument(_))));
        let mut cfg = toy_cfg(1);
        cfg.batch_size = 0;
        assert!(matches!(train_sae(&toy_corpus(2), &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut cfg = toy_cfg(3);
        cfg.learning_rate = 1e300;
        let mut ds = toy_corpus(4);
        for g in &mut ds.images {
            g.patches.mapv_inplace(|v| v * 1e150);
        }
        match train_sae(&ds, &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn log_serializes_as_array() {
        let (_, log) = train_sae(&toy_corpus(2), &toy_cfg(2)).unwrap();
        let json = serde_json::to_value(&log).unwrap();
        assert_eq!(json.as_array().unwrap().len(), 2);
        assert!(json[0].get("recon").is_some());
    }
}
