//! Classical reconstructions used as attenuation priors.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::geometry::detector_uv;
use crate::projector::{apply_a, apply_at, ProjectionSet, ProjectorError};
use crate::volume::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum ReconError {
    #[error("projection set is empty")]
    EmptyProjections,
    #[error("iteration count must be >= 1")]
    ZeroIterations,
    #[error("non-finite value at CGLS iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdkOptions {
    /// Samples per ray for the backprojection.
    pub samples_per_ray: usize,
    pub clamp_non_negative: bool,
}

/// Feldkamp–Davis–Kress: cosine weighting, Ram–Lak row filtering and
/// distance-weighted backprojection, clamped to ρ ≥ 0.
pub fn fdk(proj: &ProjectionSet, m: usize) -> Result<Volume, ReconError> {
    fdk_with(
        proj,
        FdkOptions {
            samples_per_ray: m,
            clamp_non_negative: true,
        },
    )
}

pub fn fdk_with(proj: &ProjectionSet, opts: FdkOptions) -> Result<Volume, ReconError> {
    let geom = &proj.geom;
    if geom.num_views() == 0 || proj.images.is_empty() {
        return Err(ReconError::EmptyProjections);
    }
    let (rows, cols) = (geom.det_rows, geom.det_cols);
    let dsd = geom.dsd;
    let dso = geom.dso;

    // Ramp filtering happens on the virtual detector through the rotation
    // axis, where the pixel pitch is demagnified by dso / dsd.
    let pitch = geom.det_spacing_u * dso / dsd;
    let filter = RampFilter::new(cols, pitch);

    let voxel_volume: f64 = geom.vol_spacing.iter().product();
    let angular = angular_weight(&geom.angles);
    // Ray-driven backprojection deposits dist·dsd / (U² · du · dv) per unit
    // volume, where U is the depth along the central ray; the voxel-driven
    // formula wants dso² / U². This per-pixel factor converts one into the other.
    let pixel_area = geom.det_spacing_u * geom.det_spacing_v;
    let mut post = vec![0.0; rows * cols];
    let mut cosine = vec![0.0; rows * cols];
    for row in 0..rows {
        for col in 0..cols {
            let (u, v) = detector_uv(row, col, geom).expect("index in range");
            let dist = (dsd * dsd + u * u + v * v).sqrt();
            cosine[row * cols + col] = dsd / dist;
            post[row * cols + col] = angular * dso * dso * pixel_area / (voxel_volume * dist * dsd);
        }
    }

    let per_view = rows * cols;
    let mut filtered = proj.images.clone();
    filtered.par_chunks_mut(cols).enumerate().for_each(|(line, data)| {
        let row = line % rows;
        let weights = &cosine[row * cols..(row + 1) * cols];
        for (x, w) in data.iter_mut().zip(weights) {
            *x *= w;
        }
        filter.apply(data);
        for (x, w) in data.iter_mut().zip(&post[row * cols..(row + 1) * cols]) {
            *x *= w;
        }
    });
    debug_assert_eq!(filtered.len(), per_view * geom.num_views());

    let mut vol = apply_at(&filtered, geom, opts.samples_per_ray)?;
    if opts.clamp_non_negative {
        vol.clamp_non_negative();
    }
    Ok(vol)
}

/// Δα times the scan factor: ½ for a full rotation, 1 for a short scan,
/// which doubles the weight of the half-turn instead of Parker weighting.
fn angular_weight(angles: &[f64]) -> f64 {
    let n = angles.len();
    let (lo, hi) = angles
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    let step = if n > 1 && hi > lo { (hi - lo) / (n - 1) as f64 } else { PI };
    let coverage = step * n as f64;
    let factor = if coverage >= 1.5 * PI { 0.5 } else { 1.0 };
    step * factor
}

/// Ram–Lak filter applied by zero-padded FFT convolution.
struct RampFilter {
    len: usize,
    padded: usize,
    kernel: Vec<Complex<f64>>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl RampFilter {
    fn new(len: usize, pitch: f64) -> Self {
        let padded = (2 * len).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);
        // Spatial Ram–Lak taps, scaled by the pitch for the convolution sum.
        let mut kernel = vec![Complex::new(0.0, 0.0); padded];
        let tap = |n: i64| -> f64 {
            if n == 0 {
                1.0 / (4.0 * pitch * pitch)
            } else if n % 2 == 0 {
                0.0
            } else {
                -1.0 / ((n * n) as f64 * PI * PI * pitch * pitch)
            }
        };
        for n in 0..len as i64 {
            kernel[n as usize].re = tap(n) * pitch;
            if n > 0 {
                kernel[padded - n as usize].re = tap(-n) * pitch;
            }
        }
        fft.process(&mut kernel);
        RampFilter {
            len,
            padded,
            kernel,
            fft,
            ifft,
        }
    }

    fn apply(&self, data: &mut [f64]) {
        debug_assert_eq!(data.len(), self.len);
        let mut buf: Vec<Complex<f64>> = data
            .iter()
            .map(|&x| Complex::new(x, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.padded)
            .collect();
        self.fft.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel) {
            *b *= k;
        }
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.padded as f64;
        for (x, b) in data.iter_mut().zip(&buf) {
            *x = b.re * scale;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CglsOptions {
    pub samples_per_ray: usize,
    pub iterations: usize,
    /// Stop once ‖b − Ax‖ / ‖b‖ falls to this value.
    pub tol: f64,
    pub clamp_non_negative: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CglsResult {
    pub volume: Volume,
    /// ‖b − Ax‖ after each iteration.
    pub residuals: Vec<f64>,
    pub rhs_norm: f64,
}

impl CglsResult {
    pub fn relative_residual(&self) -> f64 {
        match self.residuals.last() {
            Some(r) if self.rhs_norm > 0.0 => r / self.rhs_norm,
            _ => 0.0,
        }
    }
}

pub fn cgls(proj: &ProjectionSet, m: usize, iters: usize, tol: f64) -> Result<CglsResult, ReconError> {
    cgls_with(
        proj,
        CglsOptions {
            samples_per_ray: m,
            iterations: iters,
            tol,
            clamp_non_negative: true,
        },
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients on `AᵀA x = Aᵀb`, starting from zero.
pub fn cgls_with(proj: &ProjectionSet, opts: CglsOptions) -> Result<CglsResult, ReconError> {
    if opts.iterations == 0 {
        return Err(ReconError::ZeroIterations);
    }
    if proj.geom.num_views() == 0 {
        return Err(ReconError::EmptyProjections);
    }
    let geom = &proj.geom;
    let m = opts.samples_per_ray;
    let mut x = Volume::for_geometry(geom);
    let mut r = proj.images.clone();
    let rhs_norm = dot(&r, &r).sqrt();
    let mut s = apply_at(&r, geom, m)?;
    let mut p = s.data.clone();
    let mut gamma = dot(&s.data, &s.data);
    let mut residuals = Vec::with_capacity(opts.iterations);

    for iter in 0..opts.iterations {
        if gamma == 0.0 {
            break;
        }
        let dir = Volume {
            data: p.clone(),
            ..x.clone()
        };
        let q = apply_a(&dir, geom, m)?;
        let qq = dot(&q, &q);
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        for (xi, pi) in x.data.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        let res = dot(&r, &r).sqrt();
        if !res.is_finite() || !alpha.is_finite() {
            return Err(ReconError::NonFinite(iter));
        }
        residuals.push(res);
        if rhs_norm == 0.0 || res <= opts.tol * rhs_norm {
            break;
        }
        s = apply_at(&r, geom, m)?;
        let gamma_next = dot(&s.data, &s.data);
        let beta = gamma_next / gamma;
        gamma = gamma_next;
        for (pi, si) in p.iter_mut().zip(&s.data) {
            *pi = si + beta * *pi;
        }
    }

    if opts.clamp_non_negative {
        x.clamp_non_negative();
    }
    Ok(CglsResult {
        volume: x,
        residuals,
        rhs_norm,
    })
}
