//! Class-wise mean latent activations and neuron rankings.
//!
//! For class `c`, the mean latent vector averages `relu(W_enc x)` over every
//! patch of every image labelled `c`. A neuron's relevance score for a class
//! is simply its entry in that class's mean vector.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::render::{self, Rgb};
use crate::sae::SaeModel;
use crate::store::PatchFeatureSet;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSummary {
    pub mean_c0: Vec<f64>,
    pub mean_c1: Vec<f64>,
    /// Neuron indices by descending `mean_c0`, ties by ascending index.
    pub ranking_c0: Vec<usize>,
    pub ranking_c1: Vec<usize>,
    pub count_c0: usize,
    pub count_c1: usize,
}

/// Indices of `scores` sorted by descending score, ties broken by ascending
/// index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

impl LatentSummary {
    /// Builds a summary from the two mean vectors, deriving both rankings.
    pub fn from_means(mean_c0: Vec<f64>, mean_c1: Vec<f64>, count_c0: usize, count_c1: usize) -> Result<Self> {
        if mean_c0.len() != mean_c1.len() {
            return arg_err(format!(
                "class mean vectors differ in length ({} vs {})",
                mean_c0.len(),
                mean_c1.len()
            ));
        }
        if let Some(v) = mean_c0.iter().chain(&mean_c1).find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Validation(format!("class means must be finite and >= 0, found {v}")));
        }
        Ok(LatentSummary {
            ranking_c0: rank_descending(&mean_c0),
            ranking_c1: rank_descending(&mean_c1),
            mean_c0,
            mean_c1,
            count_c0,
            count_c1,
        })
    }

    pub fn h(&self) -> usize {
        self.mean_c0.len()
    }

    pub fn mean(&self, class: u8) -> &[f64] {
        if class == 0 { &self.mean_c0 } else { &self.mean_c1 }
    }

    pub fn ranking(&self, class: u8) -> &[usize] {
        if class == 0 { &self.ranking_c0 } else { &self.ranking_c1 }
    }
}

/// Mean latent vector per class over `ds`, plus the derived rankings.
///
/// Per-image sums are accumulated in `image_id` order, so the result does not
/// depend on the order of images in the corpus.
pub fn class_mean_latents(model: &SaeModel, ds: &PatchFeatureSet) -> Result<LatentSummary> {
    if ds.d != model.d() {
        return arg_err(format!("dataset has d = {}, model expects {}", ds.d, model.d()));
    }
    for class in 0..2u8 {
        if ds.class_count(class) == 0 {
            return arg_err(format!("class {class} has no images in the probe corpus"));
        }
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| ds.images[a].image_id.cmp(&ds.images[b].image_id));

    let h = model.h();
    let mut sums = [Array1::<f64>::zeros(h), Array1::<f64>::zeros(h)];
    for i in order {
        let g = &ds.images[i];
        let z = model.encode_batch(g.patches.view())?;
        sums[g.label as usize] += &z.sum_axis(Axis(0));
    }
    let n = ds.patches_per_image() as f64;
    let (c0, c1) = (ds.class_count(0), ds.class_count(1));
    let [s0, s1] = sums;
    let mean_c0 = (s0 / (c0 as f64 * n)).to_vec();
    let mean_c1 = (s1 / (c1 as f64 * n)).to_vec();
    LatentSummary::from_means(mean_c0, mean_c1, c0, c1)
}

/// The first `k` neurons of each class ranking.
pub fn top_k_sets(summary: &LatentSummary, k: usize) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    if k > summary.h() {
        return arg_err(format!("k = {k} exceeds latent width {}", summary.h()));
    }
    Ok((
        summary.ranking_c0[..k].iter().copied().collect(),
        summary.ranking_c1[..k].iter().copied().collect(),
    ))
}

// ---------------------------------------------------------------------------
// JSON forms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub c0: usize,
    pub c1: usize,
}

/// On-disk summary. Rankings are truncated for readability; loading
/// recomputes the full rankings from the mean vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryFile {
    pub h: usize,
    pub counts: ClassCounts,
    pub mean_c0: Vec<f64>,
    pub mean_c1: Vec<f64>,
    pub ranking_c0: Vec<usize>,
    pub ranking_c1: Vec<usize>,
}

impl SummaryFile {
    pub fn from_summary(s: &LatentSummary, top: usize) -> Self {
        let top = top.min(s.h());
        SummaryFile {
            h: s.h(),
            counts: ClassCounts { c0: s.count_c0, c1: s.count_c1 },
            mean_c0: s.mean_c0.clone(),
            mean_c1: s.mean_c1.clone(),
            ranking_c0: s.ranking_c0[..top].to_vec(),
            ranking_c1: s.ranking_c1[..top].to_vec(),
        }
    }

    pub fn into_summary(self) -> Result<LatentSummary> {
        if self.mean_c0.len() != self.h {
            return Err(Error::Validation(format!(
                "summary declares h = {} but carries {} means",
                self.h,
                self.mean_c0.len()
            )));
        }
        let s = LatentSummary::from_means(self.mean_c0, self.mean_c1, self.counts.c0, self.counts.c1)?;
        if s.ranking_c0[..self.ranking_c0.len().min(s.h())] != self.ranking_c0[..]
            || s.ranking_c1[..self.ranking_c1.len().min(s.h())] != self.ranking_c1[..]
        {
            return Err(Error::Validation("stored rankings disagree with the mean vectors".into()));
        }
        Ok(s)
    }
}

pub fn save_summary(s: &LatentSummary, top: usize, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(&SummaryFile::from_summary(s, top))?)?;
    Ok(())
}

pub fn load_summary(path: impl AsRef<Path>) -> Result<LatentSummary> {
    let file: SummaryFile = serde_json::from_slice(&fs::read(path)?)?;
    file.into_summary()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeanRecord {
    pub neuron_id: usize,
    pub mean_c0: f64,
    pub mean_c1: f64,
}

pub fn class_mean_records(s: &LatentSummary) -> Vec<ClassMeanRecord> {
    s.mean_c0
        .iter()
        .zip(&s.mean_c1)
        .enumerate()
        .map(|(neuron_id, (&mean_c0, &mean_c1))| ClassMeanRecord { neuron_id, mean_c0, mean_c1 })
        .collect()
}

/// Number of neurons shown in the class-mean bar plot.
pub const BAR_PLOT_NEURONS: usize = 50;

/// Writes one JSON record per neuron and, if `plot_path` is given, a bar plot
/// of the top neurons by `max(mean_c0, mean_c1)`.
pub fn export_class_means(
    s: &LatentSummary,
    json_path: impl AsRef<Path>,
    plot_path: Option<&Path>,
) -> Result<()> {
    fs::write(json_path, serde_json::to_vec_pretty(&class_mean_records(s))?)?;
    if let Some(p) = plot_path {
        let peak: Vec<f64> = s.mean_c0.iter().zip(&s.mean_c1).map(|(a, b)| a.max(*b)).collect();
        let top: Vec<usize> = rank_descending(&peak).into_iter().take(BAR_PLOT_NEURONS).collect();
        let series = [
            (top.iter().map(|&t| s.mean_c0[t]).collect::<Vec<_>>(), Rgb(70, 110, 220)),
            (top.iter().map(|&t| s.mean_c1[t]).collect::<Vec<_>>(), Rgb(220, 60, 50)),
        ];
        render::bar_plot(&series, 640, 320).write_ppm(p)?;
    }
    Ok(())
}
