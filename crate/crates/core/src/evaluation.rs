//! Batch inference and Fréchet-distance metrics over pluggable feature
//! extractors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use paca_autograd::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, CHANNELS};
use crate::error::{PacaError, Result};
use crate::losses::{ms_ssim, rmse, SsimConfig};
use crate::networks::GeneratorNet;

/// Added to both covariances before the matrix square root.
pub const COV_EPS: f64 = 1e-6;

pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, img: &ImageTensor) -> Vec<f64>;

    fn extract_all(&self, imgs: &[ImageTensor]) -> Vec<Vec<f64>> {
        imgs.iter().map(|i| self.extract(i)).collect()
    }
}

/// Area-averaged `grid x grid` thumbnail, flattened channel-major.
#[derive(Clone, Debug)]
pub struct PixelFeatures {
    pub grid: usize,
}

impl Default for PixelFeatures {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

/// Overlap of pixel `[p, p + 1)` with `[lo, hi)`.
fn overlap(p: usize, lo: f64, hi: f64) -> f64 {
    let a = (p as f64).max(lo);
    let b = ((p + 1) as f64).min(hi);
    (b - a).max(0.0)
}

impl FeatureExtractor for PixelFeatures {
    fn name(&self) -> &str {
        "pixel-area"
    }

    fn dim(&self) -> usize {
        CHANNELS * self.grid * self.grid
    }

    fn extract(&self, img: &ImageTensor) -> Vec<f64> {
        let s = img.side();
        let cell = s as f64 / self.grid as f64;
        let d = img.data();
        let mut out = Vec::with_capacity(self.dim());
        for c in 0..CHANNELS {
            for gy in 0..self.grid {
                let (y0, y1) = (gy as f64 * cell, (gy + 1) as f64 * cell);
                for gx in 0..self.grid {
                    let (x0, x1) = (gx as f64 * cell, (gx + 1) as f64 * cell);
                    let mut acc = 0.0;
                    for y in (y0.floor() as usize)..(y1.ceil() as usize).min(s) {
                        let wy = overlap(y, y0, y1);
                        for x in (x0.floor() as usize)..(x1.ceil() as usize).min(s) {
                            acc += wy * overlap(x, x0, x1) * f64::from(d[(c * s + y) * s + x]);
                        }
                    }
                    out.push(acc / (cell * cell));
                }
            }
        }
        out
    }
}

/// Fixed random convolutional features with global average pooling.
#[derive(Clone, Debug)]
pub struct ConvFeatures {
    weights: Vec<(Tensor<f32>, Tensor<f32>)>,
    dim: usize,
}

impl ConvFeatures {
    pub const DEFAULT_SEED: u64 = 0x0f1d;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [CHANNELS, 16, 32, 64];
        let weights = widths
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let std = (2.0 / (cin * 16) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid normal");
                let data = (0..cout * cin * 16).map(|_| dist.sample(&mut rng) as f32).collect();
                (Tensor::from_vec(&[cout, cin, 4, 4], data), Tensor::zeros(&[cout]))
            })
            .collect();
        Self { weights, dim: 64 }
    }
}

impl Default for ConvFeatures {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl FeatureExtractor for ConvFeatures {
    fn name(&self) -> &str {
        "random-conv-gap"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, img: &ImageTensor) -> Vec<f64> {
        let mut tape = Tape::<f32>::new();
        let mut x = tape.constant(img.to_tensor().reshape(&[1, CHANNELS, img.side(), img.side()]));
        for (w, b) in &self.weights {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            x = tape.conv2d(x, wv, Some(bv), 2, 1);
            x = tape.leaky_relu(x, 0.2);
        }
        let pooled = tape.mean_spatial(x);
        tape.value(pooled).data().iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Sample mean and unbiased covariance.
pub fn fit_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(PacaError::Dataset(format!("insufficient data: need at least 2 feature vectors, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(PacaError::Contract("feature vectors have differing dimensions".into()));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mean, cov, n })
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `|mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2))` with `S = cov + eps I`.
/// The square-root trace is taken via the symmetric product
/// `sqrt(S_p) S_q sqrt(S_p)`.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d || p.cov.len() != d * d || q.cov.len() != d * d {
        return Err(PacaError::Contract(format!("stat dimensions differ: {} vs {}", d, q.dim())));
    }
    let eye = DMatrix::<f64>::identity(d, d) * COV_EPS;
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    let sp = sym(p.cov_matrix()) + &eye;
    let sq = sym(q.cov_matrix()) + &eye;
    let root_p = sym_sqrt(&sp);
    let inner = sym(&root_p * &sq * &root_p);
    let eig = SymmetricEigen::new(inner).eigenvalues;
    if eig.iter().any(|l| !l.is_finite()) {
        return Err(PacaError::Numerical("matrix square root failed".into()));
    }
    let tr_root: f64 = eig.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = DVector::from_column_slice(&p.mean) - DVector::from_column_slice(&q.mean);
    let value = diff.norm_squared() + sp.trace() + sq.trace() - 2.0 * tr_root;
    if !value.is_finite() {
        return Err(PacaError::Numerical("non-finite Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

/// Applies `gen` to each input independently, preserving order.
pub fn infer_batch(gen: &GeneratorNet, inputs: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    inputs.iter().map(|x| gen.forward(x)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub fid_extractor: String,
    pub fpd_extractor: String,
    pub fid_a: f64,
    pub fpd_a: f64,
    pub fid_b_prime: f64,
    pub fpd_b_prime: f64,
    pub ms_ssim_b_prime: f64,
    pub rmse_b_prime: f64,
    pub n_fused: usize,
}

/// Reference sets and settings shared by every evaluated method.
pub struct EvalRefs<'a> {
    pub a: &'a [ImageTensor],
    pub b_prime: &'a [ImageTensor],
    /// The transfer target.
    pub target: &'a ImageTensor,
    pub fid: &'a dyn FeatureExtractor,
    pub fpd: &'a dyn FeatureExtractor,
    pub ssim: &'a SsimConfig,
}

/// Metrics of an already generated set of fused images.
pub fn evaluate_fused(method: &str, fused: &[ImageTensor], refs: &EvalRefs) -> Result<MetricReport> {
    if fused.is_empty() || refs.a.is_empty() || refs.b_prime.is_empty() {
        return Err(PacaError::Dataset("evaluation needs non-empty fused and reference sets".into()));
    }
    let stats = |ex: &dyn FeatureExtractor, imgs: &[ImageTensor]| fit_stats(&ex.extract_all(imgs));
    let fid_f = stats(refs.fid, fused)?;
    let fpd_f = stats(refs.fpd, fused)?;
    let mut ssim_sum = 0.0;
    let mut rmse_sum = 0.0;
    for f in fused {
        ssim_sum += ms_ssim(f, refs.target, refs.ssim)?;
        rmse_sum += rmse(f, refs.target)?;
    }
    let n = fused.len() as f64;
    Ok(MetricReport {
        method: method.to_string(),
        fid_extractor: refs.fid.name().to_string(),
        fpd_extractor: refs.fpd.name().to_string(),
        fid_a: frechet_distance(&fid_f, &stats(refs.fid, refs.a)?)?,
        fpd_a: frechet_distance(&fpd_f, &stats(refs.fpd, refs.a)?)?,
        fid_b_prime: frechet_distance(&fid_f, &stats(refs.fid, refs.b_prime)?)?,
        fpd_b_prime: frechet_distance(&fpd_f, &stats(refs.fpd, refs.b_prime)?)?,
        ms_ssim_b_prime: ssim_sum / n,
        rmse_b_prime: rmse_sum / n,
        n_fused: fused.len(),
    })
}

/// Runs `gen` on `inputs` and scores the fused set.
pub fn evaluate_run(
    method: &str,
    gen: &GeneratorNet,
    inputs: &[ImageTensor],
    refs: &EvalRefs,
) -> Result<(MetricReport, Vec<ImageTensor>)> {
    let fused = infer_batch(gen, inputs)?;
    let report = evaluate_fused(method, &fused, refs)?;
    Ok((report, fused))
}

/// Method rows in table order.
pub const METHODS: [&str; 4] = ["naïve", "+OSL", "+OSL+PF", "+OSL+PF+REG"];
pub const METRIC_COLUMNS: [&str; 4] = ["FID_A", "FPD_A", "FID_B′", "FPD_B′"];

pub fn metric_cells(r: &MetricReport) -> [f64; 4] {
    [r.fid_a, r.fpd_a, r.fid_b_prime, r.fpd_b_prime]
}

/// Markdown rendering: the Fréchet table, then per-image similarity to the target.
pub fn render_table(rows: &[MetricReport]) -> String {
    let mut s = String::new();
    s.push_str(&format!("| Method | {} |\n", METRIC_COLUMNS.join(" | ")));
    s.push_str(&format!("|---|{}\n", "---|".repeat(METRIC_COLUMNS.len())));
    for r in rows {
        let cells: Vec<String> = metric_cells(r).iter().map(|v| format!("{v:.4}")).collect();
        s.push_str(&format!("| {} | {} |\n", r.method, cells.join(" | ")));
    }
    if let Some(r) = rows.first() {
        s.push_str(&format!("\nFID columns use `{}`; FPD columns use `{}`.\n", r.fid_extractor, r.fpd_extractor));
    }
    s.push_str("\n| Method | MS-SSIM vs b′ | RMSE vs b′ |\n|---|---|---|\n");
    for r in rows {
        s.push_str(&format!("| {} | {:.4} | {:.4} |\n", r.method, r.ms_ssim_b_prime, r.rmse_b_prime));
    }
    s
}
