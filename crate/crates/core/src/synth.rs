//! Planted-dictionary feature corpora with known concept atoms and lesion
//! boxes.
//!
//! Every patch is a positive combination of `atoms_per_patch` background
//! atoms plus Gaussian noise. Class-1 images additionally carry one
//! rectangular lesion, snapped to grid cells. Each lesion patch adds concept
//! atom 0 (the anchor) and, with probability 1/2, one other concept atom,
//! all with boosted coefficients. Concept atoms never occur
//! anywhere else, so the concept neurons and their locations are known
//! exactly.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::store::{FeatureGrid, PatchFeatureSet, Rect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub n_atoms: usize,
    pub n_concept_atoms: usize,
    pub n_images_per_class: usize,
    pub noise_std: f64,
    pub atoms_per_patch: usize,
    pub seed: u64,
    /// Lesion side lengths, in grid cells, are drawn from this inclusive range.
    pub lesion_cells: (usize, usize),
    /// Concept coefficients are this multiple of a background-scale draw.
    /// Must be at least 3.
    pub lesion_boost: f64,
    /// Use this constant for every coefficient instead of `|N(0,1)| + 0.5`.
    pub fixed_coefficient: Option<f64>,
    /// Round features to `f32` precision so the in-memory corpus equals its
    /// on-disk form.
    pub quantize: bool,
}

impl SynthConfig {
    /// The desk-scale preset: d = 64, 8x8 grid, 256x256 images, 32 atoms of
    /// which 4 are concept atoms, 200 images per class, 3 atoms per patch,
    /// noise 0.02.
    pub fn desk(seed: u64) -> Self {
        SynthConfig {
            d: 64,
            grid_h: 8,
            grid_w: 8,
            image_h: 256,
            image_w: 256,
            n_atoms: 32,
            n_concept_atoms: 4,
            n_images_per_class: 200,
            noise_std: 0.02,
            atoms_per_patch: 3,
            seed,
            lesion_cells: (2, 3),
            lesion_boost: 8.0,
            fixed_coefficient: None,
            quantize: true,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(SynthConfig::desk(seed)),
            other => arg_err(format!("unknown synthetic preset {other:?} (available: desk)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("n_atoms", self.n_atoms),
            ("n_concept_atoms", self.n_concept_atoms),
            ("n_images_per_class", self.n_images_per_class),
            ("atoms_per_patch", self.atoms_per_patch),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return arg_err(format!("{name} must be positive"));
        }
        if self.n_concept_atoms >= self.n_atoms {
            return arg_err("n_concept_atoms must be smaller than n_atoms");
        }
        if self.atoms_per_patch > self.n_atoms - self.n_concept_atoms {
            return arg_err("atoms_per_patch exceeds the number of background atoms");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return arg_err("noise_std must be finite and >= 0");
        }
        let (lo, hi) = self.lesion_cells;
        if lo == 0 || lo > hi || hi > self.grid_h.min(self.grid_w) {
            return arg_err(format!("lesion size range {lo}..={hi} does not fit the grid"));
        }
        if !(self.lesion_boost >= 3.0 && self.lesion_boost.is_finite()) {
            return arg_err("lesion_boost must be at least 3");
        }
        if let Some(c) = self.fixed_coefficient {
            if !(c > 0.0 && c.is_finite()) {
                return arg_err("fixed_coefficient must be positive");
            }
        }
        Ok(())
    }
}

/// Ground truth behind a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOracle {
    /// `n_atoms` unit-norm rows of length `d`.
    pub dictionary: Vec<Vec<f64>>,
    pub concept_atom_ids: Vec<usize>,
    /// Planted lesion box per image (`None` for class 0).
    pub lesion_boxes: Vec<Option<Rect>>,
    /// Whether the dictionary is exactly orthonormal (`n_atoms <= d`).
    pub orthonormal: bool,
}

impl SynthOracle {
    pub fn atom(&self, i: usize) -> Array1<f64> {
        Array1::from(self.dictionary[i].clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Orthonormal rows by Gram-Schmidt when `n <= d`; otherwise random unit
/// vectors, resampled (bounded attempts) until concept atoms have `|cos| < 0.3`
/// against every other atom.
fn make_dictionary(n: usize, d: usize, n_concept: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, bool) {
    let gaussian_unit = |rng: &mut ChaCha8Rng| -> Array1<f64> {
        let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        v / norm
    };
    let mut dict = Array2::zeros((n, d));
    if n <= d {
        let mut i = 0;
        while i < n {
            let mut v = gaussian_unit(rng);
            for j in 0..i {
                let a = dict.row(j);
                let proj = a.dot(&v);
                v.scaled_add(-proj, &a);
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-6 {
                continue;
            }
            dict.row_mut(i).assign(&(v / norm));
            i += 1;
        }
        return (dict, true);
    }
    for i in 0..n {
        let mut best = gaussian_unit(rng);
        for _ in 0..1000 {
            let ok = (0..i).all(|j| {
                (i >= n_concept && j >= n_concept) || dict.row(j).dot(&best).abs() < 0.3
            });
            if ok {
                break;
            }
            best = gaussian_unit(rng);
        }
        dict.row_mut(i).assign(&best);
    }
    (dict, false)
}

/// Generates a corpus (class-0 images first, then class-1) and its oracle.
pub fn generate(cfg: &SynthConfig) -> Result<(PatchFeatureSet, SynthOracle)> {
    cfg.validate()?;
    if cfg.d < cfg.n_atoms {
        eprintln!(
            "warning: d = {} < n_atoms = {}; atoms are only approximately orthogonal",
            cfg.d, cfg.n_atoms
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dict, orthonormal) = make_dictionary(cfg.n_atoms, cfg.d, cfg.n_concept_atoms, &mut rng);
    let concept: Vec<usize> = (0..cfg.n_concept_atoms).collect();
    let n_background = cfg.n_atoms - cfg.n_concept_atoms;
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("validated noise scale");
    let coef = |rng: &mut ChaCha8Rng| -> f64 {
        match cfg.fixed_coefficient {
            Some(c) => c,
            None => {
                let g: f64 = StandardNormal.sample(rng);
                g.abs() + 0.5
            }
        }
    };

    let n_patches = cfg.grid_h * cfg.grid_w;
    let mut ds = PatchFeatureSet::empty(cfg.d, cfg.grid_h, cfg.grid_w, cfg.image_h, cfg.image_w);
    ds.layer_tag = format!("synthetic:seed={}", cfg.seed);
    let mut lesion_boxes = Vec::with_capacity(2 * cfg.n_images_per_class);

    for label in 0..2u8 {
        for i in 0..cfg.n_images_per_class {
            let mut patches = Array2::<f64>::zeros((n_patches, cfg.d));
            for j in 0..n_patches {
                let mut row = patches.row_mut(j);
                for a in sample(&mut rng, n_background, cfg.atoms_per_patch) {
                    row.scaled_add(coef(&mut rng), &dict.row(cfg.n_concept_atoms + a));
                }
            }

            let lesion = if label == 1 {
                let (lo, hi) = cfg.lesion_cells;
                let lh = rng.random_range(lo..=hi);
                let lw = rng.random_range(lo..=hi);
                let r0 = rng.random_range(0..=cfg.grid_h - lh);
                let c0 = rng.random_range(0..=cfg.grid_w - lw);
                for r in r0..r0 + lh {
                    for c in c0..c0 + lw {
                        let mut row = patches.row_mut(r * cfg.grid_w + c);
                        // anchor atom everywhere, a second concept atom half the time
                        let mut atoms = vec![concept[0]];
                        if cfg.n_concept_atoms > 1 && rng.random_bool(0.5) {
                            atoms.push(concept[rng.random_range(1..cfg.n_concept_atoms)]);
                        }
                        for a in atoms {
                            row.scaled_add(cfg.lesion_boost * coef(&mut rng), &dict.row(a));
                        }
                    }
                }
                let sx = |c: usize| (c * cfg.image_w) as f64 / cfg.grid_w as f64;
                let sy = |r: usize| (r * cfg.image_h) as f64 / cfg.grid_h as f64;
                Some(Rect::new(sx(c0), sy(r0), sx(c0 + lw), sy(r0 + lh)))
            } else {
                None
            };

            if cfg.noise_std > 0.0 {
                patches.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
            if cfg.quantize {
                patches.mapv_inplace(|v| v as f32 as f64);
            }
            ds.images.push(FeatureGrid {
                image_id: format!("synth-c{label}-{i:04}"),
                label,
                gt_boxes: lesion.into_iter().collect(),
                patches,
            });
            lesion_boxes.push(lesion);
        }
    }
    ds.validate()?;
    let oracle = SynthOracle {
        dictionary: dict.rows().into_iter().map(|r| r.to_vec()).collect(),
        concept_atom_ids: concept,
        lesion_boxes,
        orthonormal,
    };
    Ok((ds, oracle))
}
