//! Top-k latent interventions.
//!
//! A mask marks the union of the top-k neurons of both classes. In
//! [`MaskMode::Activated`] only masked latents survive (`z * m`); in
//! [`MaskMode::Deactivated`] exactly those latents are zeroed
//! (`z * (1 - m)`). Interventions apply at every spatial position and the
//! result is decoded, pooled, and scored by the head.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::head::{pool, LinearHead};
use crate::metrics::auc;
use crate::probe::{top_k_sets, LatentSummary};
use crate::sae::{grid_meta, SaeModel};
use crate::store::{FeatureGrid, PatchFeatureSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Keep only the masked latents.
    Activated,
    /// Zero the masked latents, keep the rest.
    Deactivated,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Activated => "activated",
            MaskMode::Deactivated => "deactivated",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activated" => Ok(MaskMode::Activated),
            "deactivated" => Ok(MaskMode::Deactivated),
            other => arg_err(format!("unknown intervention mode {other:?} (expected activated|deactivated)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionMask {
    /// `m[i]` is true iff neuron `i` is in the top-k union.
    pub m: Vec<bool>,
    pub k: usize,
    pub mode: MaskMode,
}

impl InterventionMask {
    pub fn h(&self) -> usize {
        self.m.len()
    }

    pub fn popcount(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }

    /// Whether latent `i` survives the intervention.
    fn keeps(&self, i: usize) -> bool {
        match self.mode {
            MaskMode::Activated => self.m[i],
            MaskMode::Deactivated => !self.m[i],
        }
    }
}

/// Mask over `h` latents marking `t0 ∪ t1`. `k` is recorded as the larger
/// set size.
pub fn build_mask(t0: &BTreeSet<usize>, t1: &BTreeSet<usize>, h: usize, mode: MaskMode) -> Result<InterventionMask> {
    let mut m = vec![false; h];
    for &i in t0.iter().chain(t1) {
        if i >= h {
            return arg_err(format!("neuron index {i} out of range for h = {h}"));
        }
        m[i] = true;
    }
    Ok(InterventionMask { m, k: t0.len().max(t1.len()), mode })
}

/// Mask from the top-k neurons of both class rankings.
pub fn top_k_mask(summary: &LatentSummary, k: usize, mode: MaskMode) -> Result<InterventionMask> {
    let (t0, t1) = top_k_sets(summary, k)?;
    let mut mask = build_mask(&t0, &t1, summary.h(), mode)?;
    mask.k = k;
    Ok(mask)
}

pub fn apply_mask(z: ArrayView1<'_, f64>, mask: &InterventionMask) -> Result<Array1<f64>> {
    if z.len() != mask.h() {
        return arg_err(format!("latent has length {}, mask covers {}", z.len(), mask.h()));
    }
    Ok(z.iter().enumerate().map(|(i, &v)| if mask.keeps(i) { v } else { 0.0 }).collect())
}

/// Applies the mask to every row of an `n x h` latent matrix.
pub fn apply_mask_rows(z: &Array2<f64>, mask: &InterventionMask) -> Result<Array2<f64>> {
    if z.ncols() != mask.h() {
        return arg_err(format!("latents have width {}, mask covers {}", z.ncols(), mask.h()));
    }
    let keep: Array1<bool> = (0..mask.h()).map(|i| mask.keeps(i)).collect();
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        Zip::from(&mut row).and(&keep).for_each(|v, &k| {
            if !k {
                *v = 0.0;
            }
        });
    }
    Ok(out)
}

/// Each patch becomes `decode(apply_mask(encode(x)))`; labels and boxes are
/// carried over.
pub fn intervened_forward(model: &SaeModel, grid: &FeatureGrid, mask: &InterventionMask) -> Result<FeatureGrid> {
    if mask.h() != model.h() {
        return arg_err(format!("mask covers {} latents, model has h = {}", mask.h(), model.h()));
    }
    let z = model.encode_batch(grid.patches.view())?;
    let z = apply_mask_rows(&z, mask)?;
    Ok(FeatureGrid { patches: model.decode_batch(z.view())?, ..grid_meta(grid) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub auc: f64,
}

/// AUC-ROC of `head` after intervening with the top-k mask, for each `k` in
/// order.
pub fn sweep_k(
    model: &SaeModel,
    ds: &PatchFeatureSet,
    head: &LinearHead,
    summary: &LatentSummary,
    ks: &[usize],
    mode: MaskMode,
) -> Result<Vec<CurvePoint>> {
    if head.d != model.d() || ds.d != model.d() {
        return arg_err(format!(
            "dimension mismatch: head d = {}, data d = {}, model d = {}",
            head.d,
            ds.d,
            model.d()
        ));
    }
    if summary.h() != model.h() {
        return arg_err(format!("summary covers {} latents, model has h = {}", summary.h(), model.h()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > model.h()) {
        return arg_err(format!("k = {k} exceeds latent width {}", model.h()));
    }
    let latents: Vec<Array2<f64>> = ds
        .images
        .par_iter()
        .map(|g| model.encode_batch(g.patches.view()))
        .collect::<Result<_>>()?;
    let labels = ds.labels();

    ks.iter()
        .map(|&k| {
            let mask = top_k_mask(summary, k, mode)?;
            let logits: Vec<f64> = latents
                .par_iter()
                .map(|z| -> Result<f64> {
                    let decoded = model.decode_batch(apply_mask_rows(z, &mask)?.view())?;
                    let pooled = pool(&FeatureGrid {
                        image_id: String::new(),
                        label: 0,
                        gt_boxes: vec![],
                        patches: decoded,
                    });
                    head.logit(pooled.view())
                })
                .collect::<Result<_>>()?;
            Ok(CurvePoint { k, auc: auc(&logits, &labels)? })
        })
        .collect()
}
