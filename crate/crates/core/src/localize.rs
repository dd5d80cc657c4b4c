//! Spatial alignment of latent neurons with ground-truth concept boxes.
//!
//! A neuron's heatmap is its activation at every grid cell of one image.
//! Cells at or above the heatmap's own percentile (linear interpolation
//! between order statistics) are kept, each 4-connected component becomes a
//! box scaled to pixel coordinates, and the box is scored by the component's
//! peak activation. Boxes from all images are then ranked and matched to the
//! ground truth to get a detection-style average precision per neuron.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::probe::LatentSummary;
use crate::render::{normalize_to_u8, upsample_bilinear, GrayImage};
use crate::sae::SaeModel;
use crate::store::{FeatureGrid, PatchFeatureSet, Rect};

pub const DEFAULT_PERCENTILE: f64 = 95.0;
pub const DEFAULT_IOU: f64 = 0.25;
pub const DEFAULT_TOP_NEURONS: usize = 10;

/// One neuron's activation over an image's feature grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub neuron_id: usize,
    pub image_id: String,
}

impl Heatmap {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(flatten)]
    pub rect: Rect,
    pub score: f64,
}

pub fn neuron_heatmap(model: &SaeModel, grid: &FeatureGrid, rows: usize, cols: usize, t: usize) -> Result<Heatmap> {
    if t >= model.h() {
        return arg_err(format!("neuron {t} out of range for h = {}", model.h()));
    }
    if grid.num_patches() != rows * cols {
        return arg_err(format!("grid has {} patches, expected {rows}x{cols}", grid.num_patches()));
    }
    let z = model.encode_batch(grid.patches.view())?;
    Ok(heatmap_from_latents(&z, rows, cols, t, &grid.image_id))
}

fn heatmap_from_latents(z: &Array2<f64>, rows: usize, cols: usize, t: usize, image_id: &str) -> Heatmap {
    Heatmap { rows, cols, values: z.column(t).to_vec(), neuron_id: t, image_id: image_id.to_string() }
}

/// Percentile `p` (0..=100) with linear interpolation between order
/// statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Cells kept by thresholding: at or above the percentile and strictly above
/// the heatmap minimum.
pub fn threshold_mask(hm: &Heatmap, pct: f64) -> Vec<bool> {
    if hm.values.is_empty() {
        return vec![];
    }
    let thr = percentile(&hm.values, pct);
    let floor = hm.values.iter().cloned().fold(f64::INFINITY, f64::min);
    hm.values.iter().map(|&v| v >= thr && v > floor).collect()
}

/// Boxes around the 4-connected components of the thresholded heatmap, in
/// pixel coordinates, scored by their peak activation. Components are
/// emitted in row-major order of their first cell.
pub fn threshold_boxes(hm: &Heatmap, pct: f64, image_w: usize, image_h: usize) -> Vec<ScoredBox> {
    let mask = threshold_mask(hm, pct);
    let (rows, cols) = (hm.rows, hm.cols);
    let mut seen = vec![false; mask.len()];
    let mut boxes = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        let mut peak = f64::NEG_INFINITY;
        while let Some(cell) = queue.pop_front() {
            let (r, c) = (cell / cols, cell % cols);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            peak = peak.max(hm.values[cell]);
            let mut visit = |nr: usize, nc: usize| {
                let n = nr * cols + nc;
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < rows {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < cols {
                visit(r, c + 1);
            }
        }
        let sx = |c: usize| (c * image_w) as f64 / cols as f64;
        let sy = |r: usize| (r * image_h) as f64 / rows as f64;
        boxes.push(ScoredBox { rect: Rect::new(sx(c0), sy(r0), sx(c1 + 1), sy(r1 + 1)), score: peak });
    }
    boxes
}

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

/// Detection-style average precision over a corpus.
///
/// `predictions[i]` and `ground_truth[i]` belong to image `i`. Predictions
/// from all images are ranked by descending score (ties keep image order,
/// then box order); each is matched to the unmatched ground-truth box of its
/// image with the highest IoU, counting as a true positive iff that IoU is at
/// least `iou_thr`. AP is the area under the all-point interpolated
/// precision-recall curve.
pub fn average_precision(predictions: &[Vec<ScoredBox>], ground_truth: &[Vec<Rect>], iou_thr: f64) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return arg_err(format!(
            "{} prediction lists for {} images",
            predictions.len(),
            ground_truth.len()
        ));
    }
    let total_gt: usize = ground_truth.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return arg_err("average precision needs at least one ground-truth box");
    }
    let mut ranked: Vec<(usize, &ScoredBox)> =
        predictions.iter().enumerate().flat_map(|(i, ps)| ps.iter().map(move |p| (i, p))).collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut taken: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (n, (img, pred)) in ranked.iter().enumerate() {
        let best = ground_truth[*img]
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[*img][*g])
            .map(|(g, gt)| (g, iou(&pred.rect, gt)))
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((g, v)) = best {
            if v >= iou_thr {
                taken[*img][g] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (n + 1) as f64));
    }
    Ok(interpolated_area(&curve))
}

/// Area under the all-point interpolated PR curve given `(recall, precision)`
/// points in rank order.
fn interpolated_area(curve: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (&(recall, _), &p) in curve.iter().zip(&envelope) {
        area += (recall - prev_recall) * p;
        prev_recall = recall;
    }
    area
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub boxes: Vec<ScoredBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronLocalization {
    /// 1-based position in the class-1 ranking.
    pub rank: usize,
    pub neuron_id: usize,
    pub ap: f64,
    pub detections: Vec<ImageDetections>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub iou_threshold: f64,
    pub percentile: f64,
    pub neurons: Vec<NeuronLocalization>,
}

impl LocalizationReport {
    pub fn ap_values(&self) -> Vec<f64> {
        self.neurons.iter().map(|n| n.ap).collect()
    }
}

/// Per-neuron AP for the `n_top` highest-ranked class-1 neurons, evaluated
/// over the class-1 images of `ds`.
pub fn map_top_neurons(
    model: &SaeModel,
    ds: &PatchFeatureSet,
    summary: &LatentSummary,
    n_top: usize,
    pct: f64,
    iou_thr: f64,
) -> Result<LocalizationReport> {
    if summary.h() != model.h() {
        return arg_err(format!("summary covers {} latents, model has h = {}", summary.h(), model.h()));
    }
    if n_top > model.h() {
        return arg_err(format!("cannot take the top {n_top} of {} neurons", model.h()));
    }
    let positives: Vec<&FeatureGrid> = ds.images.iter().filter(|g| g.label == 1).collect();
    let ground_truth: Vec<Vec<Rect>> = positives.iter().map(|g| g.gt_boxes.clone()).collect();
    if ground_truth.iter().all(Vec::is_empty) {
        return arg_err("no ground-truth boxes on class-1 images");
    }
    let latents: Vec<Array2<f64>> =
        positives.iter().map(|g| model.encode_batch(g.patches.view())).collect::<Result<_>>()?;

    let mut neurons = Vec::with_capacity(n_top);
    for (rank, &t) in summary.ranking_c1[..n_top].iter().enumerate() {
        let detections: Vec<ImageDetections> = positives
            .iter()
            .zip(&latents)
            .map(|(g, z)| {
                let hm = heatmap_from_latents(z, ds.grid_h, ds.grid_w, t, &g.image_id);
                ImageDetections {
                    image_id: g.image_id.clone(),
                    boxes: threshold_boxes(&hm, pct, ds.image_w, ds.image_h),
                }
            })
            .collect();
        let preds: Vec<Vec<ScoredBox>> = detections.iter().map(|d| d.boxes.clone()).collect();
        let ap = average_precision(&preds, &ground_truth, iou_thr)?;
        neurons.push(NeuronLocalization { rank: rank + 1, neuron_id: t, ap, detections });
    }
    Ok(LocalizationReport { iou_threshold: iou_thr, percentile: pct, neurons })
}

/// Heatmap upsampled to image resolution, scaled to 0..=255 per image, with
/// ground-truth boxes outlined at full intensity.
pub fn heatmap_image(hm: &Heatmap, image_w: usize, image_h: usize, gt_boxes: &[Rect]) -> GrayImage {
    let up = upsample_bilinear(&hm.values, hm.rows, hm.cols, image_h, image_w);
    let mut img = GrayImage { width: image_w, height: image_h, pixels: normalize_to_u8(&up) };
    for b in gt_boxes {
        let clamp_x = |v: f64| (v.max(0.0) as usize).min(image_w.saturating_sub(1));
        let clamp_y = |v: f64| (v.max(0.0) as usize).min(image_h.saturating_sub(1));
        let (x0, y0) = (clamp_x(b.x_min.floor()), clamp_y(b.y_min.floor()));
        let (x1, y1) = (clamp_x(b.x_max.ceil() - 1.0), clamp_y(b.y_max.ceil() - 1.0));
        img.outline(x0, y0, x1.max(x0), y1.max(y0), 255);
    }
    img
}

pub fn render_heatmap(
    hm: &Heatmap,
    image_w: usize,
    image_h: usize,
    gt_boxes: &[Rect],
    out_path: impl AsRef<Path>,
) -> Result<()> {
    heatmap_image(hm, image_w, image_h, gt_boxes).write_pgm(out_path)
}
