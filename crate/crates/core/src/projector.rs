//! Ray-driven forward projection and its exact adjoint.
//!
//! Every detector pixel casts one ray, clipped to the volume box and split
//! into `m` equal bins. The forward operator gathers trilinear samples at the
//! bin midpoints and multiplies by the bin length; the adjoint scatters with
//! the same stencils and weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Ray, ScanGeometry, Vec3};
use crate::volume::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectorError {
    #[error("sample count must be >= 1")]
    ZeroSamples,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Midpoint,
    Stratified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub points: Vec<Vec3>,
    pub t_values: Vec<f64>,
    pub delta_t: f64,
}

/// Split `[t_near, t_far]` into `m` bins and place one sample per bin.
/// Midpoint mode never touches `rng`.
pub fn sample_ray<R: Rng + ?Sized>(
    ray: &Ray,
    m: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<RaySamples, ProjectorError> {
    if m == 0 {
        return Err(ProjectorError::ZeroSamples);
    }
    let delta_t = ray.length() / m as f64;
    let t_values: Vec<f64> = (0..m)
        .map(|j| {
            let offset = match mode {
                SampleMode::Midpoint => 0.5,
                SampleMode::Stratified => rng.random::<f64>(),
            };
            ray.t_near + (j as f64 + offset) * delta_t
        })
        .collect();
    let points = t_values.iter().map(|&t| ray.at(t)).collect();
    Ok(RaySamples {
        points,
        t_values,
        delta_t,
    })
}

/// Line-integral images for a list of views.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub geom: ScanGeometry,
    /// View-major, then row-major within a view.
    pub images: Vec<f64>,
}

impl ProjectionSet {
    pub fn zeros(geom: ScanGeometry) -> Self {
        let n = geom.num_views() * geom.pixels_per_view();
        ProjectionSet {
            geom,
            images: vec![0.0; n],
        }
    }

    pub fn angles(&self) -> &[f64] {
        &self.geom.angles
    }

    pub fn num_views(&self) -> usize {
        self.geom.num_views()
    }

    pub fn view(&self, v: usize) -> &[f64] {
        let n = self.geom.pixels_per_view();
        &self.images[v * n..(v + 1) * n]
    }

    pub fn pixel(&self, view: usize, row: usize, col: usize) -> f64 {
        self.images[(view * self.geom.det_rows + row) * self.geom.det_cols + col]
    }

    pub fn max_value(&self) -> f64 {
        self.images.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Keep only the listed views, in the order given.
    pub fn select_views(&self, views: &[usize]) -> ProjectionSet {
        let angles = views.iter().map(|&v| self.geom.angles[v]).collect();
        let images = views.iter().flat_map(|&v| self.view(v).iter().copied()).collect();
        ProjectionSet {
            geom: self.geom.with_angles(angles),
            images,
        }
    }

    /// Interleaved split: even view indices first, odd second.
    pub fn split_even_odd(&self) -> (ProjectionSet, ProjectionSet) {
        let even: Vec<usize> = (0..self.num_views()).step_by(2).collect();
        let odd: Vec<usize> = (1..self.num_views()).step_by(2).collect();
        (self.select_views(&even), self.select_views(&odd))
    }
}

fn check_volume(vol: &Volume, geom: &ScanGeometry) -> Result<(), ProjectorError> {
    if vol.dims != geom.vol_dims || vol.spacing != geom.vol_spacing {
        return Err(ProjectorError::DimensionMismatch(format!(
            "volume {:?}/{:?} vs geometry {:?}/{:?}",
            vol.dims, vol.spacing, geom.vol_dims, geom.vol_spacing
        )));
    }
    Ok(())
}

#[inline]
fn midpoints(ray: &Ray, m: usize) -> (f64, impl Iterator<Item = Vec3> + '_) {
    let dt = ray.length() / m as f64;
    (dt, (0..m).map(move |j| ray.at(ray.t_near + (j as f64 + 0.5) * dt)))
}

fn project_view(vol: &Volume, geom: &ScanGeometry, view: usize, m: usize, out: &mut [f64]) {
    for row in 0..geom.det_rows {
        for col in 0..geom.det_cols {
            let Some(ray) = geom.pixel_ray(view, row, col) else {
                out[row * geom.det_cols + col] = 0.0;
                continue;
            };
            let (dt, points) = midpoints(&ray, m);
            let mut sum = 0.0;
            for p in points {
                if let Some(s) = vol.trilinear_stencil(&p) {
                    for c in 0..8 {
                        sum += s.weight[c] * vol.data[s.index[c]];
                    }
                }
            }
            out[row * geom.det_cols + col] = sum * dt;
        }
    }
}

/// `A x`: flattened projections of `vol` (view-major, row-major).
pub fn apply_a(vol: &Volume, geom: &ScanGeometry, m: usize) -> Result<Vec<f64>, ProjectorError> {
    if m == 0 {
        return Err(ProjectorError::ZeroSamples);
    }
    check_volume(vol, geom)?;
    let per_view = geom.pixels_per_view();
    let mut out = vec![0.0; per_view * geom.num_views()];
    out.par_chunks_mut(per_view)
        .enumerate()
        .for_each(|(view, chunk)| project_view(vol, geom, view, m, chunk));
    Ok(out)
}

/// Number of private accumulators used by the adjoint, independent of the
/// thread count so results do not depend on the machine.
const SCATTER_CHUNKS: usize = 8;

/// `Aᵀ y`: scatter projection values back along their rays.
pub fn apply_at(proj: &[f64], geom: &ScanGeometry, m: usize) -> Result<Volume, ProjectorError> {
    if m == 0 {
        return Err(ProjectorError::ZeroSamples);
    }
    let per_view = geom.pixels_per_view();
    let views = geom.num_views();
    if proj.len() != per_view * views {
        return Err(ProjectorError::DimensionMismatch(format!(
            "projection vector has {} entries, geometry needs {}",
            proj.len(),
            per_view * views
        )));
    }
    let mut out = Volume::for_geometry(geom);
    if views == 0 {
        return Ok(out);
    }
    let views_per_chunk = views.div_ceil(SCATTER_CHUNKS);
    let partials: Vec<Vec<f64>> = (0..views)
        .step_by(views_per_chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|first| {
            let mut acc = vec![0.0; out.len()];
            for view in first..(first + views_per_chunk).min(views) {
                for row in 0..geom.det_rows {
                    for col in 0..geom.det_cols {
                        let value = proj[view * per_view + row * geom.det_cols + col];
                        if value == 0.0 {
                            continue;
                        }
                        let Some(ray) = geom.pixel_ray(view, row, col) else {
                            continue;
                        };
                        let (dt, points) = midpoints(&ray, m);
                        let scaled = value * dt;
                        for p in points {
                            if let Some(s) = out.trilinear_stencil(&p) {
                                for c in 0..8 {
                                    acc[s.index[c]] += s.weight[c] * scaled;
                                }
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();
    for part in partials {
        for (o, p) in out.data.iter_mut().zip(part) {
            *o += p;
        }
    }
    Ok(out)
}

/// Noiseless simulation of every view in `geom`.
pub fn forward_project(vol: &Volume, geom: &ScanGeometry, m: usize) -> Result<ProjectionSet, ProjectorError> {
    Ok(ProjectionSet {
        geom: geom.clone(),
        images: apply_a(vol, geom, m)?,
    })
}

/// Additive Gaussian noise with σ = `level` × max projection value.
pub fn add_noise<R: Rng + ?Sized>(proj: &ProjectionSet, level: f64, rng: &mut R) -> ProjectionSet {
    let mut out = proj.clone();
    let sigma = level * proj.max_value();
    if level == 0.0 || !(sigma > 0.0) {
        return out;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    for v in &mut out.images {
        *v += normal.sample(rng);
    }
    out
}
