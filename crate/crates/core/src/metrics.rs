//! PSNR and SSIM.

use thiserror::Error;

/// Returned by [`psnr`] when the inputs are identical.
pub const PSNR_CAP_DB: f64 = 300.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall(usize, usize),
    #[error("data range must be > 0")]
    BadRange,
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::ShapeMismatch(vec![a.len()], vec![b.len()]));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(range² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64, MetricsError> {
    if !(data_range > 0.0) {
        return Err(MetricsError::BadRange);
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / err).log10()).min(PSNR_CAP_DB))
}

/// `max − min` of the reference data.
pub fn data_range(reference: &[f64]) -> f64 {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *x = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|x| x / total)
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(img: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let out_w = width - SSIM_WINDOW + 1;
    let out_h = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; out_w * height];
    for y in 0..height {
        let line = &img[y * width..(y + 1) * width];
        for x in 0..out_w {
            rows[y * out_w + x] = (0..SSIM_WINDOW).map(|t| w[t] * line[x + t]).sum();
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            out[y * out_w + x] = (0..SSIM_WINDOW).map(|t| w[t] * rows[(y + t) * out_w + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two row-major `width × height` images, Gaussian window
/// (11×11, σ = 1.5), averaged over the valid region.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, data_range: f64) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.len() != width * height {
        return Err(MetricsError::ShapeMismatch(vec![a.len()], vec![b.len(), width, height]));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(width, height));
    }
    if !(data_range > 0.0) {
        return Err(MetricsError::BadRange);
    }
    let w = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, width, height, &w);
    let mu_b = filter_valid(b, width, height, &w);
    let e_aa = filter_valid(&aa, width, height, &w);
    let e_bb = filter_valid(&bb, width, height, &w);
    let e_ab = filter_valid(&ab, width, height, &w);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean of the axial (constant-z) slice SSIMs of two x-fastest volumes.
pub fn ssim_volume(a: &[f64], b: &[f64], dims: [usize; 3], data_range: f64) -> Result<f64, MetricsError> {
    let n = dims[0] * dims[1] * dims[2];
    if a.len() != n || b.len() != n {
        return Err(MetricsError::ShapeMismatch(vec![a.len()], vec![b.len(), dims[0], dims[1], dims[2]]));
    }
    let slice = dims[0] * dims[1];
    let mut total = 0.0;
    for z in 0..dims[2] {
        let range = z * slice..(z + 1) * slice;
        total += ssim(&a[range.clone()], &b[range], dims[0], dims[1], data_range)?;
    }
    Ok(total / dims[2] as f64)
}
