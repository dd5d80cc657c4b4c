//! Downstream binary classifier: global average pooling of the patch grid,
//! then one linear layer with a sigmoid.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::store::{FeatureGrid, PatchFeatureSet};

/// Initial weights are drawn from `±HEAD_INIT_SCALE`.
const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub d: usize,
    pub w: Vec<f64>,
    pub b: f64,
}

/// Elementwise mean over the grid's patch vectors.
pub fn pool(grid: &FeatureGrid) -> Array1<f64> {
    grid.patches
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(grid.patches.ncols()))
}

/// Pooled vectors for every image, one row each.
pub fn pool_dataset(ds: &PatchFeatureSet) -> Array2<f64> {
    let mut out = Array2::zeros((ds.len(), ds.d));
    for (mut row, g) in out.axis_iter_mut(Axis(0)).zip(&ds.images) {
        row.assign(&pool(g));
    }
    out
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Largest double below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

impl LinearHead {
    pub fn new(w: Vec<f64>, b: f64) -> Result<Self> {
        if w.iter().chain([&b]).any(|v| !v.is_finite()) {
            return Err(Error::Validation("head parameters must be finite".into()));
        }
        Ok(LinearHead { d: w.len(), w, b })
    }

    /// `w . x + b`.
    pub fn logit(&self, pooled: ArrayView1<'_, f64>) -> Result<f64> {
        if pooled.len() != self.w.len() {
            return arg_err(format!("input has length {}, head expects {}", pooled.len(), self.w.len()));
        }
        Ok(pooled.iter().zip(&self.w).map(|(x, w)| x * w).sum::<f64>() + self.b)
    }

    /// `sigmoid(w . x + b)`, kept strictly inside `(0, 1)`.
    pub fn predict(&self, pooled: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(sigmoid(self.logit(pooled)?).clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let head: LinearHead = serde_json::from_slice(&fs::read(path)?)?;
        if head.d != head.w.len() {
            return Err(Error::Validation(format!("head declares d = {} but has {} weights", head.d, head.w.len())));
        }
        LinearHead::new(head.w, head.b)
    }
}

/// One logit per image of `ds`.
pub fn image_logits(head: &LinearHead, ds: &PatchFeatureSet) -> Result<Vec<f64>> {
    ds.images.iter().map(|g| head.logit(pool(g).view())).collect()
}

/// Mean binary cross-entropy of the head on pooled rows.
pub fn bce_loss(head: &LinearHead, pooled: &Array2<f64>, labels: &[u8]) -> f64 {
    let w = Array1::from(head.w.clone());
    let logits = pooled.dot(&w) + head.b;
    let n = labels.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        // log(1 + e^s) - y s, evaluated stably
        .map(|(&s, &y)| s.max(0.0) + (-s.abs()).exp().ln_1p() - y as f64 * s)
        .sum::<f64>()
        / n
}

/// Logistic regression on pooled features by full-batch gradient descent.
pub fn train_head(ds: &PatchFeatureSet, epochs: usize, lr: f64, seed: u64) -> Result<LinearHead> {
    train_head_with(ds, epochs, lr, seed, |_, _| {})
}

/// [`train_head`] with a callback receiving `(epoch, loss before the step)`.
pub fn train_head_with(
    ds: &PatchFeatureSet,
    epochs: usize,
    lr: f64,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<LinearHead> {
    for class in 0..2u8 {
        if ds.class_count(class) == 0 {
            return arg_err(format!("head training needs both classes; class {class} is absent"));
        }
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return arg_err(format!("learning rate must be positive, got {lr}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Array1<f64> = (0..ds.d).map(|_| rng.random_range(-HEAD_INIT_SCALE..HEAD_INIT_SCALE)).collect();
    let mut b = 0.0;

    let x = pool_dataset(ds);
    let labels = ds.labels();
    let y: Array1<f64> = labels.iter().map(|&l| l as f64).collect();
    let n = ds.len() as f64;
    for epoch in 0..epochs {
        let logits = x.dot(&w) + b;
        let err = logits.mapv(sigmoid) - &y;
        let grad_w = x.t().dot(&err) / n;
        let grad_b = err.sum() / n;
        let current = LinearHead { d: ds.d, w: w.to_vec(), b };
        on_epoch(epoch, bce_loss(&current, &x, &labels));
        w.scaled_add(-lr, &grad_w);
        b -= lr * grad_b;
    }
    LinearHead::new(w.to_vec(), b)
}
