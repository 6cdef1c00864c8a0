//! Circular-orbit cone-beam acquisition geometry.
//!
//! World frame: the object sits at the origin, the source orbits in the
//! `z = 0` plane at radius `dso`, and the flat detector faces the source at
//! distance `dsd` from it. Detector pixel `(row, col)` maps to local `(u, v)`
//! with `(0, 0)` at the orthogonal projection of the source.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    Invalid(String),
    #[error("detector index ({row}, {col}) out of range for {rows}x{cols} detector")]
    PixelOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    /// Source to rotation axis (mm).
    pub dso: f64,
    /// Source to detector plane (mm).
    pub dsd: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_spacing_u: f64,
    pub det_spacing_v: f64,
    pub vol_dims: [usize; 3],
    pub vol_spacing: [f64; 3],
    /// Rotation angles in radians; repeated views are allowed.
    pub angles: Vec<f64>,
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: &str| Err(GeometryError::Invalid(msg.to_string()));
        if !(self.dso.is_finite() && self.dsd.is_finite()) {
            return bad("distances must be finite");
        }
        if !(self.dso > 0.0 && self.dsd > self.dso) {
            return bad("require dsd > dso > 0");
        }
        if self.det_rows == 0 || self.det_cols == 0 || self.vol_dims.contains(&0) {
            return bad("all counts must be >= 1");
        }
        let spacings = [self.det_spacing_u, self.det_spacing_v];
        if spacings
            .iter()
            .chain(self.vol_spacing.iter())
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return bad("all spacings must be finite and > 0");
        }
        if self.angles.iter().any(|a| !a.is_finite()) {
            return bad("angles must be finite");
        }
        Ok(())
    }

    /// Half the physical size of the volume box along each axis.
    pub fn half_extent(&self) -> Vec3 {
        [0, 1, 2].map(|i| 0.5 * self.vol_dims[i] as f64 * self.vol_spacing[i])
    }

    pub fn num_views(&self) -> usize {
        self.angles.len()
    }

    pub fn pixels_per_view(&self) -> usize {
        self.det_rows * self.det_cols
    }

    /// Same detector and volume, different set of views.
    pub fn with_angles(&self, angles: Vec<f64>) -> Self {
        ScanGeometry {
            angles,
            ..self.clone()
        }
    }

    /// Ray through the center of detector pixel `(row, col)` for view `view`,
    /// clipped to the volume box.
    pub fn pixel_ray(&self, view: usize, row: usize, col: usize) -> Option<Ray> {
        let (u, v) = detector_uv(row, col, self).ok()?;
        clip_to_volume(&ray_for_pixel(self.angles[view], u, v, self), self)
    }
}

/// `origin + t * direction`, valid between `t_near` and `t_far`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [0, 1, 2].map(|i| self.origin[i] + t * self.direction[i])
    }

    pub fn length(&self) -> f64 {
        self.t_far - self.t_near
    }
}

pub fn source_position(alpha: f64, geom: &ScanGeometry) -> Vec3 {
    [geom.dso * alpha.cos(), geom.dso * alpha.sin(), 0.0]
}

/// `[[cos, sin, 0], [-sin, cos, 0], [0, 0, 1]]`.
pub fn rotation_matrix(alpha: f64) -> Mat3 {
    let (s, c) = alpha.sin_cos();
    [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [m[0][i], m[1][i], m[2][i]])
}

/// Physical `(u, v)` of a pixel center. `u` follows columns, `v` follows rows.
pub fn detector_uv(row: usize, col: usize, geom: &ScanGeometry) -> Result<(f64, f64), GeometryError> {
    if row >= geom.det_rows || col >= geom.det_cols {
        return Err(GeometryError::PixelOutOfRange {
            row,
            col,
            rows: geom.det_rows,
            cols: geom.det_cols,
        });
    }
    let center_col = (geom.det_cols as f64 - 1.0) / 2.0;
    let center_row = (geom.det_rows as f64 - 1.0) / 2.0;
    Ok((
        (col as f64 - center_col) * geom.det_spacing_u,
        (row as f64 - center_row) * geom.det_spacing_v,
    ))
}

/// Unclipped ray from the source through detector point `(u, v)`.
///
/// The local direction is `(-dsd, u, -v)` normalized. It is carried into the
/// world frame by the source-frame basis, which is the transpose of
/// [`rotation_matrix`]; this keeps the central ray pointed at the origin for
/// every angle. The returned limits span source to detector plane.
pub fn ray_for_pixel(alpha: f64, u: f64, v: f64, geom: &ScanGeometry) -> Ray {
    let norm = (u * u + v * v + geom.dsd * geom.dsd).sqrt();
    let local = [-geom.dsd / norm, u / norm, -v / norm];
    let direction = mat_vec(&transpose(&rotation_matrix(alpha)), &local);
    Ray {
        origin: source_position(alpha, geom),
        direction,
        t_near: 0.0,
        t_far: norm,
    }
}

/// Slab intersection with the origin-centered volume box. `None` on a miss.
pub fn clip_to_volume(ray: &Ray, geom: &ScanGeometry) -> Option<Ray> {
    let half = geom.half_extent();
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let o = ray.origin[axis];
        let d = ray.direction[axis];
        if d == 0.0 {
            if o < -half[axis] || o > half[axis] {
                return None;
            }
            continue;
        }
        let t1 = (-half[axis] - o) / d;
        let t2 = (half[axis] - o) / d;
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    // Corner and edge tangents can come out inverted by a few ulps.
    let slack = 1e-9 * t_near.abs().max(1.0);
    if t_near > t_far + slack || t_far < 0.0 {
        return None;
    }
    let t_near = t_near.max(0.0);
    Some(Ray {
        t_near,
        t_far: t_far.max(t_near),
        ..*ray
    })
}
