//! Bias-free ReLU sparse autoencoder over patch feature vectors.
//!
//! For a patch `x` the model computes `z = relu(W_enc x)` and reconstructs
//! `x_hat = W_dec z`. The per-patch objective is
//! `||x_hat - x||^2 + lambda * ||z||_1`.
//!
//! Weights are stored in applied orientation: `w_enc` is `h x d` and `w_dec`
//! is `d x h`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::codec::{put_u32, to_u32, ByteReader};
use crate::error::{arg_err, Error, Result};
use crate::store::{FeatureGrid, PatchFeatureSet};

pub const MODEL_MAGIC: &[u8; 4] = b"MSAW";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    /// Encoder, `h x d`.
    pub w_enc: Array2<f64>,
    /// Decoder, `d x h`.
    pub w_dec: Array2<f64>,
}

/// The three terms of the objective for one patch (or a batch mean).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub sparsity: f64,
}

/// Gradients of the batch-mean objective.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w_enc: Array2<f64>,
    pub w_dec: Array2<f64>,
    pub mean_loss: LossTerms,
}

/// Unnormalized batch sums; [`SaeModel::gradients`] divides them by the row
/// count. Kept separate so the trainer can reduce row chunks in a fixed order.
#[derive(Debug, Clone)]
pub struct GradientSums {
    pub w_enc: Array2<f64>,
    pub w_dec: Array2<f64>,
    pub recon: f64,
    pub sparsity: f64,
    /// Number of strictly positive latents summed over rows.
    pub active: usize,
    pub rows: usize,
}

impl GradientSums {
    pub fn zeros(d: usize, h: usize) -> Self {
        GradientSums {
            w_enc: Array2::zeros((h, d)),
            w_dec: Array2::zeros((d, h)),
            recon: 0.0,
            sparsity: 0.0,
            active: 0,
            rows: 0,
        }
    }

    pub fn accumulate(&mut self, other: &GradientSums) {
        self.w_enc += &other.w_enc;
        self.w_dec += &other.w_dec;
        self.recon += other.recon;
        self.sparsity += other.sparsity;
        self.active += other.active;
        self.rows += other.rows;
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

impl SaeModel {
    pub fn new(w_enc: Array2<f64>, w_dec: Array2<f64>) -> Result<Self> {
        let (h, d) = w_enc.dim();
        if w_dec.dim() != (d, h) {
            return arg_err(format!(
                "decoder is {:?} but encoder {:?} requires ({d}, {h})",
                w_dec.dim(),
                w_enc.dim()
            ));
        }
        if d == 0 || h < d {
            return arg_err(format!("latent width h = {h} must be at least d = {d} >= 1"));
        }
        if w_enc.iter().chain(w_dec.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("model weights must be finite".into()));
        }
        Ok(SaeModel { w_enc, w_dec })
    }

    /// Input feature width.
    pub fn d(&self) -> usize {
        self.w_enc.ncols()
    }

    /// Latent width.
    pub fn h(&self) -> usize {
        self.w_enc.nrows()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.d() {
            return arg_err(format!("input has length {len}, model expects d = {}", self.d()));
        }
        Ok(())
    }

    pub fn encode(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_input(x.len())?;
        Ok(self.w_enc.dot(&x).mapv_into(|v| if v > 0.0 { v } else { 0.0 }))
    }

    pub fn decode(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if z.len() != self.h() {
            return arg_err(format!("latent has length {}, model expects h = {}", z.len(), self.h()));
        }
        Ok(self.w_dec.dot(&z))
    }

    /// Latents for every row of `x` (`n x d` in, `n x h` out).
    pub fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut z = x.dot(&self.w_enc.t());
        relu_inplace(&mut z);
        Ok(z)
    }

    /// Decodes every row of `z` (`n x h` in, `n x d` out).
    pub fn decode_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.h() {
            return arg_err(format!("latent has width {}, model expects h = {}", z.ncols(), self.h()));
        }
        Ok(z.dot(&self.w_dec.t()))
    }

    pub fn loss(&self, x: ArrayView1<'_, f64>, lambda: f64) -> Result<LossTerms> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Validation(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("input contains non-finite values".into()));
        }
        let z = self.encode(x)?;
        let x_hat = self.decode(z.view())?;
        let recon = x_hat.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let sparsity = z.sum();
        Ok(LossTerms { total: recon + lambda * sparsity, recon, sparsity })
    }

    /// Summed (not averaged) loss terms and weight gradients over the rows of
    /// `batch`. Subgradients of ReLU and of `|.|` at zero are taken as zero.
    pub fn gradient_sums(&self, batch: ArrayView2<'_, f64>, lambda: f64) -> Result<GradientSums> {
        self.check_input(batch.ncols())?;
        let pre = batch.dot(&self.w_enc.t());
        let mut z = pre;
        relu_inplace(&mut z);
        let mut resid = z.dot(&self.w_dec.t());
        resid -= &batch;

        let recon = resid.iter().map(|v| v * v).sum::<f64>();
        let sparsity = z.sum();
        let active = z.iter().filter(|&&v| v > 0.0).count();

        // d/dW_dec = 2 R^T Z
        let mut g_dec = resid.t().dot(&z);
        g_dec *= 2.0;

        // d/dpre = (2 R W_dec + lambda) masked by the active set
        let mut g_pre = resid.dot(&self.w_dec);
        Zip::from(&mut g_pre).and(&z).for_each(|g, &zv| {
            *g = if zv > 0.0 { 2.0 * *g + lambda } else { 0.0 };
        });
        let g_enc = g_pre.t().dot(&batch);

        Ok(GradientSums { w_enc: g_enc, w_dec: g_dec, recon, sparsity, active, rows: batch.nrows() })
    }

    /// Gradients of the batch-mean objective with respect to both weight
    /// matrices.
    pub fn gradients(&self, batch: ArrayView2<'_, f64>, lambda: f64) -> Result<Gradients> {
        if batch.nrows() == 0 {
            return arg_err("gradient batch must contain at least one row");
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Validation(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("batch contains non-finite values".into()));
        }
        let sums = self.gradient_sums(batch, lambda)?;
        Ok(sums.into_mean(lambda))
    }

    /// Rescales every decoder column to unit norm (zero columns are left alone).
    pub fn normalize_decoder_columns(&mut self) {
        for mut col in self.w_dec.axis_iter_mut(Axis(1)) {
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 {
                col /= norm;
            }
        }
    }

    /// Replaces each patch with its reconstruction `decode(encode(x))`.
    pub fn reconstruct_grid(&self, grid: &FeatureGrid) -> Result<FeatureGrid> {
        let z = self.encode_batch(grid.patches.view())?;
        Ok(FeatureGrid { patches: self.decode_batch(z.view())?, ..grid_meta(grid) })
    }

    pub fn reconstruct_dataset(&self, ds: &PatchFeatureSet) -> Result<PatchFeatureSet> {
        if ds.d != self.d() {
            return arg_err(format!("dataset has d = {}, model expects {}", ds.d, self.d()));
        }
        let images = ds.images.iter().map(|g| self.reconstruct_grid(g)).collect::<Result<Vec<_>>>()?;
        Ok(ds.with_images(images))
    }

    // -- checkpoint ----------------------------------------------------------

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (d, h) = (self.d(), self.h());
        let mut buf = Vec::with_capacity(16 + 16 * d * h);
        buf.extend_from_slice(MODEL_MAGIC);
        put_u32(&mut buf, MODEL_VERSION);
        put_u32(&mut buf, to_u32("d", d)?);
        put_u32(&mut buf, to_u32("h", h)?);
        for v in self.w_enc.iter().chain(self.w_dec.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Format("missing MSAW magic".into()));
        }
        let mut r = ByteReader::new(bytes, 4);
        let version = r.u32("version")?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported MSAW version {version}")));
        }
        let d = r.u32("d")? as usize;
        let h = r.u32("h")? as usize;
        let count = d
            .checked_mul(h)
            .ok_or_else(|| Error::Corruption("model shape overflows".into()))?;
        let mut read_matrix = |rows: usize, cols: usize, what: &str| -> Result<Array2<f64>> {
            let raw = r.take(count * 8, what)?;
            let vals = raw
                .chunks_exact(8)
                .map(|c| {
                    let mut a = [0u8; 8];
                    a.copy_from_slice(c);
                    f64::from_le_bytes(a)
                })
                .collect();
            Array2::from_shape_vec((rows, cols), vals).map_err(|e| Error::Corruption(e.to_string()))
        };
        let w_enc = read_matrix(h, d, "encoder weights")?;
        let w_dec = read_matrix(d, h, "decoder weights")?;
        if r.remaining() != 0 {
            return Err(Error::Corruption(format!("{} trailing bytes in MSAW file", r.remaining())));
        }
        SaeModel::new(w_enc, w_dec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        SaeModel::from_bytes(&fs::read(path)?)
    }
}

impl GradientSums {
    /// Converts sums to batch means.
    pub fn into_mean(self, lambda: f64) -> Gradients {
        let n = self.rows.max(1) as f64;
        let recon = self.recon / n;
        let sparsity = self.sparsity / n;
        Gradients {
            w_enc: self.w_enc / n,
            w_dec: self.w_dec / n,
            mean_loss: LossTerms { total: recon + lambda * sparsity, recon, sparsity },
        }
    }
}

/// Copy of a grid's metadata with an empty patch matrix.
pub(crate) fn grid_meta(grid: &FeatureGrid) -> FeatureGrid {
    FeatureGrid {
        image_id: grid.image_id.clone(),
        label: grid.label,
        gt_boxes: grid.gt_boxes.clone(),
        patches: Array2::zeros((0, 0)),
    }
}
