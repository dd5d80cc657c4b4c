//! Patch-feature corpora: in-memory model, the `MSAE` binary container, the
//! box CSV sidecar, and dataset-level helpers (splitting, flattening).
//!
//! `MSAE` layout (all integers little-endian `u32`, all floats little-endian `f32`):
//!
//! ```text
//! magic "MSAE" | version | image_count | d | grid_h | grid_w | image_h | image_w
//! layer_tag (u32 byte length + UTF-8)
//! per image:
//!   image_id (u32 byte length + UTF-8) | label (u8) | box_count
//!   box_count x (x_min, y_min, x_max, y_max) | grid_h*grid_w*d patch values
//! ```
//!
//! Patch values are widened to `f64` on load and narrowed to `f32` on save.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{put_str, put_u32, to_u32, ByteReader};
use crate::error::{arg_err, Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MSAE";
pub const DATASET_VERSION: u32 = 1;

/// Axis-aligned rectangle in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Rect { x_min, y_min, x_max, y_max }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    fn is_valid_within(&self, image_w: usize, image_h: usize) -> bool {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        coords.iter().all(|c| c.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= image_w as f64
            && self.y_max <= image_h as f64
    }
}

/// One image's spatial feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub image_id: String,
    /// Binary concept label, 0 or 1.
    pub label: u8,
    pub gt_boxes: Vec<Rect>,
    /// `grid_h * grid_w` rows of length `d`, row-major over the grid.
    pub patches: Array2<f64>,
}

impl FeatureGrid {
    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn patch(&self, j: usize) -> ArrayView1<'_, f64> {
        self.patches.row(j)
    }
}

/// A corpus of per-image feature grids sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureSet {
    pub d: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub layer_tag: String,
    pub images: Vec<FeatureGrid>,
}

impl PatchFeatureSet {
    /// An empty corpus with the given geometry.
    pub fn empty(d: usize, grid_h: usize, grid_w: usize, image_h: usize, image_w: usize) -> Self {
        PatchFeatureSet {
            d,
            grid_h,
            grid_w,
            image_h,
            image_w,
            layer_tag: String::new(),
            images: Vec::new(),
        }
    }

    /// Patches per image (`grid_h * grid_w`).
    pub fn patches_per_image(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.images.iter().map(|g| g.label).collect()
    }

    pub fn class_count(&self, class: u8) -> usize {
        self.images.iter().filter(|g| g.label == class).count()
    }

    /// Same geometry and tag, different images.
    pub fn with_images(&self, images: Vec<FeatureGrid>) -> Self {
        PatchFeatureSet {
            d: self.d,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            image_h: self.image_h,
            image_w: self.image_w,
            layer_tag: self.layer_tag.clone(),
            images,
        }
    }

    /// Checks every structural and numeric invariant of the corpus.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Validation(format!(
                "d, grid_h and grid_w must be positive (got {}, {}, {})",
                self.d, self.grid_h, self.grid_w
            )));
        }
        let n = self.patches_per_image();
        for g in &self.images {
            if g.patches.dim() != (n, self.d) {
                return Err(Error::Validation(format!(
                    "image {:?}: patch matrix is {:?}, expected ({n}, {})",
                    g.image_id,
                    g.patches.dim(),
                    self.d
                )));
            }
            if g.label > 1 {
                return Err(Error::Validation(format!(
                    "image {:?}: label {} is not binary",
                    g.image_id, g.label
                )));
            }
            if let Some(v) = g.patches.iter().find(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "image {:?}: non-finite feature value {v}",
                    g.image_id
                )));
            }
            for b in &g.gt_boxes {
                if !b.is_valid_within(self.image_w, self.image_h) {
                    return Err(Error::Validation(format!(
                        "image {:?}: box {b:?} is degenerate or outside the {}x{} image",
                        g.image_id, self.image_w, self.image_h
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

/// Serializes a corpus to `MSAE` bytes.
pub fn encode_dataset(ds: &PatchFeatureSet) -> Result<Vec<u8>> {
    ds.validate()?;
    let n = ds.patches_per_image();
    let mut buf = Vec::with_capacity(64 + ds.images.len() * (n * ds.d * 4 + 32));
    buf.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut buf, DATASET_VERSION);
    put_u32(&mut buf, to_u32("image count", ds.images.len())?);
    put_u32(&mut buf, to_u32("d", ds.d)?);
    put_u32(&mut buf, to_u32("grid_h", ds.grid_h)?);
    put_u32(&mut buf, to_u32("grid_w", ds.grid_w)?);
    put_u32(&mut buf, to_u32("image_h", ds.image_h)?);
    put_u32(&mut buf, to_u32("image_w", ds.image_w)?);
    put_str(&mut buf, &ds.layer_tag)?;
    for g in &ds.images {
        put_str(&mut buf, &g.image_id)?;
        buf.push(g.label);
        put_u32(&mut buf, to_u32("box count", g.gt_boxes.len())?);
        for b in &g.gt_boxes {
            for c in [b.x_min, b.y_min, b.x_max, b.y_max] {
                buf.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
        for &v in g.patches.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

/// Parses `MSAE` bytes into a validated corpus.
pub fn decode_dataset(bytes: &[u8]) -> Result<PatchFeatureSet> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("missing MSAE magic".into()));
    }
    let mut r = ByteReader::new(bytes, 4);
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported MSAE version {version}")));
    }
    let count = r.u32("image count")? as usize;
    let d = r.u32("d")? as usize;
    let grid_h = r.u32("grid_h")? as usize;
    let grid_w = r.u32("grid_w")? as usize;
    let image_h = r.u32("image_h")? as usize;
    let image_w = r.u32("image_w")? as usize;
    let layer_tag = r.string("layer tag")?;
    let n = grid_h
        .checked_mul(grid_w)
        .and_then(|n| n.checked_mul(d))
        .ok_or_else(|| Error::Corruption("grid geometry overflows".into()))?;

    let mut images = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let image_id = r.string("image id")?;
        let label = r.u8("label")?;
        let box_count = r.u32("box count")? as usize;
        let mut gt_boxes = Vec::with_capacity(box_count.min(1024));
        for _ in 0..box_count {
            let x_min = r.f32("box")? as f64;
            let y_min = r.f32("box")? as f64;
            let x_max = r.f32("box")? as f64;
            let y_max = r.f32("box")? as f64;
            gt_boxes.push(Rect { x_min, y_min, x_max, y_max });
        }
        let payload = r.take(n * 4, &format!("patch payload of image {i}"))?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let patches = Array2::from_shape_vec((grid_h * grid_w, d), values)
            .map_err(|e| Error::Corruption(e.to_string()))?;
        images.push(FeatureGrid { image_id, label, gt_boxes, patches });
    }
    if r.remaining() != 0 {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after the declared {count} images",
            r.remaining()
        )));
    }
    let ds = PatchFeatureSet { d, grid_h, grid_w, image_h, image_w, layer_tag, images };
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PatchFeatureSet> {
    decode_dataset(&fs::read(path)?)
}

pub fn save_dataset(ds: &PatchFeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Box CSV sidecar
// ---------------------------------------------------------------------------

#[derive(serde::Deserialize)]
struct BoxRow {
    image_id: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

/// Reads `image_id,x_min,y_min,x_max,y_max` rows (header required).
pub fn read_box_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<Rect>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["image_id", "x_min", "y_min", "x_max", "y_max"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!(
            "box CSV header must be {}, found {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out: BTreeMap<String, Vec<Rect>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: BoxRow = row?;
        out.entry(row.image_id)
            .or_default()
            .push(Rect::new(row.x_min, row.y_min, row.x_max, row.y_max));
    }
    Ok(out)
}

/// Replaces each image's ground-truth boxes with those listed in `boxes`.
///
/// Images absent from the map end up with no boxes; ids in the map that match
/// no image are rejected.
pub fn attach_boxes(ds: &mut PatchFeatureSet, boxes: &BTreeMap<String, Vec<Rect>>) -> Result<()> {
    let known: std::collections::HashSet<&str> =
        ds.images.iter().map(|g| g.image_id.as_str()).collect();
    if let Some(unknown) = boxes.keys().find(|id| !known.contains(id.as_str())) {
        return Err(Error::Validation(format!("box CSV names unknown image {unknown:?}")));
    }
    for g in &mut ds.images {
        g.gt_boxes = boxes.get(&g.image_id).cloned().unwrap_or_default();
    }
    ds.validate()
}

// ---------------------------------------------------------------------------
// Dataset helpers
// ---------------------------------------------------------------------------

/// Seeded train/test split at image granularity, stratified by label when
/// both classes are present. Both halves keep the original image order.
pub fn split_dataset(
    ds: &PatchFeatureSet,
    train_fraction: f64,
    seed: u64,
) -> Result<(PatchFeatureSet, PatchFeatureSet)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return arg_err(format!("train fraction must lie in (0, 1), got {train_fraction}"));
    }
    if ds.len() < 2 {
        return arg_err(format!("need at least 2 images to split, got {}", ds.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stratified = ds.class_count(0) > 0 && ds.class_count(1) > 0;
    let strata: Vec<Vec<usize>> = if stratified {
        (0..2u8)
            .map(|c| (0..ds.len()).filter(|&i| ds.images[i].label == c).collect())
            .collect()
    } else {
        vec![(0..ds.len()).collect()]
    };

    let mut in_train = vec![false; ds.len()];
    for mut idx in strata {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut n_train = (n as f64 * train_fraction).round() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        }
        for &i in &idx[..n_train.min(n)] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) =
        ds.images.iter().cloned().zip(in_train).partition(|(_, t)| *t);
    Ok((
        ds.with_images(train.into_iter().map(|(g, _)| g).collect()),
        ds.with_images(test.into_iter().map(|(g, _)| g).collect()),
    ))
}

/// Stacks all patches into one `(images * N) x d` matrix, image-major.
pub fn flatten_patches(ds: &PatchFeatureSet) -> Array2<f64> {
    let n = ds.patches_per_image();
    let mut out = Array2::zeros((ds.images.len() * n, ds.d));
    for (i, g) in ds.images.iter().enumerate() {
        out.slice_mut(s![i * n..(i + 1) * n, ..]).assign(&g.patches);
    }
    out
}
