//! Voxel volumes, the Shepp–Logan phantom and point sampling of priors.
//!
//! Voxel `(i, j, k)` is stored at `i + nx * (j + ny * k)` and its center sits
//! at `origin + (i, j, k) * spacing`. The volume box extends half a voxel
//! beyond the outermost centers; inside that shell, samples replicate the
//! edge voxels, and anything outside the box reads as zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{ScanGeometry, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    /// World position of the center of voxel (0, 0, 0).
    pub origin: Vec3,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    Nearest,
    Mean,
    Trilinear,
}

impl PriorMode {
    pub const ALL: [PriorMode; 3] = [PriorMode::Nearest, PriorMode::Mean, PriorMode::Trilinear];

    pub fn name(self) -> &'static str {
        match self {
            PriorMode::Nearest => "nearest",
            PriorMode::Mean => "mean",
            PriorMode::Trilinear => "trilinear",
        }
    }
}

impl std::str::FromStr for PriorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(PriorMode::Nearest),
            "mean" => Ok(PriorMode::Mean),
            "trilinear" => Ok(PriorMode::Trilinear),
            other => Err(format!("unknown interpolation mode '{other}'")),
        }
    }
}

/// Eight voxel indices and blend weights around a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

impl Volume {
    /// Zero volume whose box is centered on the world origin.
    pub fn zeros(dims: [usize; 3], spacing: Vec3) -> Self {
        let origin = [0, 1, 2].map(|i| -0.5 * (dims[i] as f64 - 1.0) * spacing[i]);
        Volume {
            dims,
            spacing,
            origin,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn for_geometry(geom: &ScanGeometry) -> Self {
        Self::zeros(geom.vol_dims, geom.vol_spacing)
    }

    pub fn filled(dims: [usize; 3], spacing: Vec3, value: f64) -> Self {
        let mut v = Self::zeros(dims, spacing);
        v.data.fill(value);
        v
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = value;
    }

    /// Same grid layout as `other` (dims, spacing, origin).
    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    pub fn world_to_voxel(&self, p: &Vec3) -> Vec3 {
        [0, 1, 2].map(|i| (p[i] - self.origin[i]) / self.spacing[i])
    }

    pub fn voxel_to_world(&self, c: &Vec3) -> Vec3 {
        [0, 1, 2].map(|i| self.origin[i] + c[i] * self.spacing[i])
    }

    /// Lower corner and size of the volume box.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let lo = [0, 1, 2].map(|i| self.origin[i] - 0.5 * self.spacing[i]);
        let size = [0, 1, 2].map(|i| self.dims[i] as f64 * self.spacing[i]);
        (lo, size)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Voxel coordinates clamped onto the lattice, or `None` outside the box.
    fn lattice_coords(&self, p: &Vec3) -> Option<Vec3> {
        let c = self.world_to_voxel(p);
        let mut out = [0.0; 3];
        for axis in 0..3 {
            let n = self.dims[axis] as f64;
            if !(c[axis] >= -0.5 && c[axis] <= n - 0.5) {
                return None;
            }
            out[axis] = c[axis].clamp(0.0, n - 1.0);
        }
        Some(out)
    }

    /// Trilinear stencil shared by gathering and scattering projectors.
    #[inline]
    pub fn trilinear_stencil(&self, p: &Vec3) -> Option<Stencil> {
        let c = self.lattice_coords(p)?;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0; 3];
        for axis in 0..3 {
            let n = self.dims[axis];
            let base = (c[axis].floor() as usize).min(n.saturating_sub(2));
            lo[axis] = base;
            hi[axis] = (base + 1).min(n - 1);
            frac[axis] = if hi[axis] == base { 0.0 } else { c[axis] - base as f64 };
        }
        let mut index = [0usize; 8];
        let mut weight = [0.0; 8];
        for corner in 0..8 {
            let pick = |axis: usize| (corner >> axis) & 1 == 1;
            let i = if pick(0) { hi[0] } else { lo[0] };
            let j = if pick(1) { hi[1] } else { lo[1] };
            let k = if pick(2) { hi[2] } else { lo[2] };
            let wx = if pick(0) { frac[0] } else { 1.0 - frac[0] };
            let wy = if pick(1) { frac[1] } else { 1.0 - frac[1] };
            let wz = if pick(2) { frac[2] } else { 1.0 - frac[2] };
            index[corner] = self.index(i, j, k);
            weight[corner] = wx * wy * wz;
        }
        Some(Stencil { index, weight })
    }

    pub fn trilinear(&self, p: &Vec3) -> f64 {
        match self.trilinear_stencil(p) {
            Some(s) => (0..8).map(|c| s.weight[c] * self.data[s.index[c]]).sum(),
            None => 0.0,
        }
    }

    /// Prior value ρ₀ at `p` from the 8 lattice vertices around it.
    ///
    /// The cell is spanned by `floor` and `ceil` of the voxel coordinate, so a
    /// point on a vertex (or face) collapses onto that vertex (or face).
    /// Nearest breaks distance ties toward the lower index on each axis.
    pub fn sample_prior(&self, p: &Vec3, mode: PriorMode) -> f64 {
        let Some(c) = self.lattice_coords(p) else {
            return 0.0;
        };
        let lo = c.map(|x| x.floor() as usize);
        let hi = c.map(|x| x.ceil() as usize);
        let frac = [0, 1, 2].map(|a| c[a] - lo[a] as f64);
        match mode {
            PriorMode::Nearest => {
                let pick = [0, 1, 2].map(|a| if frac[a] <= 0.5 { lo[a] } else { hi[a] });
                self.get(pick[0], pick[1], pick[2])
            }
            PriorMode::Mean => {
                // Collapsed axes contribute one distinct vertex, not two copies.
                let n = [0, 1, 2].map(|a| if hi[a] == lo[a] { 1 } else { 2 });
                let mut sum = 0.0;
                for &k in &[lo[2], hi[2]][..n[2]] {
                    for &j in &[lo[1], hi[1]][..n[1]] {
                        for &i in &[lo[0], hi[0]][..n[0]] {
                            sum += self.get(i, j, k);
                        }
                    }
                }
                sum / (n[0] * n[1] * n[2]) as f64
            }
            PriorMode::Trilinear => {
                let mut sum = 0.0;
                for (k, wz) in [(lo[2], 1.0 - frac[2]), (hi[2], frac[2])] {
                    for (j, wy) in [(lo[1], 1.0 - frac[1]), (hi[1], frac[1])] {
                        for (i, wx) in [(lo[0], 1.0 - frac[0]), (hi[0], frac[0])] {
                            sum += wx * wy * wz * self.get(i, j, k);
                        }
                    }
                }
                sum
            }
        }
    }

    pub fn clamp_non_negative(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// One ellipsoid of the phantom in normalized `[-1, 1]^3` coordinates,
/// rotated by `phi` (degrees) about the z axis.
#[derive(Debug, Clone, Copy)]
pub struct Ellipsoid {
    pub intensity: f64,
    pub axes: Vec3,
    pub center: Vec3,
    pub phi_deg: f64,
}

impl Ellipsoid {
    /// Map a normalized point into the unit-sphere frame of the ellipsoid.
    pub fn to_unit_frame(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let x = c * d[0] + s * d[1];
        let y = -s * d[0] + c * d[1];
        [x / self.axes[0], y / self.axes[1], d[2] / self.axes[2]]
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let q = self.to_unit_frame(p);
        q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0
    }
}

/// Ellipsoids of the 3D Shepp–Logan head with the high-contrast
/// (non-negative) intensities.
pub const SHEPP_LOGAN: [Ellipsoid; 10] = [
    ell(1.0, [0.69, 0.92, 0.81], [0.0, 0.0, 0.0], 0.0),
    ell(-0.8, [0.6624, 0.874, 0.78], [0.0, -0.0184, 0.0], 0.0),
    ell(-0.2, [0.11, 0.31, 0.22], [0.22, 0.0, 0.0], -18.0),
    ell(-0.2, [0.16, 0.41, 0.28], [-0.22, 0.0, 0.0], 18.0),
    ell(0.1, [0.21, 0.25, 0.41], [0.0, 0.35, -0.15], 0.0),
    ell(0.1, [0.046, 0.046, 0.05], [0.0, 0.1, 0.25], 0.0),
    ell(0.1, [0.046, 0.046, 0.05], [0.0, -0.1, 0.25], 0.0),
    ell(0.1, [0.046, 0.023, 0.05], [-0.08, -0.605, 0.0], 0.0),
    ell(0.1, [0.023, 0.023, 0.02], [0.0, -0.606, 0.0], 0.0),
    ell(0.1, [0.023, 0.046, 0.02], [0.06, -0.605, 0.0], 0.0),
];

const fn ell(intensity: f64, axes: Vec3, center: Vec3, phi_deg: f64) -> Ellipsoid {
    Ellipsoid {
        intensity,
        axes,
        center,
        phi_deg,
    }
}

/// Continuous phantom value at a normalized point.
pub fn shepp_logan_value(p: &Vec3) -> f64 {
    let sum: f64 = SHEPP_LOGAN
        .iter()
        .filter(|e| e.contains(p))
        .map(|e| e.intensity)
        .sum();
    // 1 - 0.8 - 0.2 rounds to -5.6e-17 inside the ventricles.
    sum.max(0.0)
}

/// Sub-voxel samples per axis for voxels cut by an ellipsoid surface.
pub const PHANTOM_SUPERSAMPLING: usize = 16;

/// Shepp–Logan phantom filling the volume box. Each voxel holds the
/// intensity-weighted volume fraction of every ellipsoid; fractions are
/// exact 0 or 1 away from a surface and estimated from
/// `PHANTOM_SUPERSAMPLING³` point samples on it.
pub fn shepp_logan_3d(dims: [usize; 3], spacing: Vec3) -> Volume {
    shepp_logan_supersampled(dims, spacing, PHANTOM_SUPERSAMPLING)
}

/// As [`shepp_logan_3d`] with `ss³` samples per surface voxel.
pub fn shepp_logan_supersampled(dims: [usize; 3], spacing: Vec3, ss: usize) -> Volume {
    let mut vol = Volume::zeros(dims, spacing);
    let ss = ss.max(1);
    let offsets: Vec<f64> = (0..ss).map(|s| (s as f64 + 0.5) / ss as f64 - 0.5).collect();
    // Voxel half-extent in normalized coordinates, and its half-diagonal.
    let half = dims.map(|n| 1.0 / n as f64);
    let half_diag = (half[0] * half[0] + half[1] * half[1] + half[2] * half[2]).sqrt();
    let inv = 1.0 / (ss * ss * ss) as f64;
    let [nx, ny, _] = dims;
    vol.data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
        for j in 0..ny {
            for i in 0..nx {
                let c = [
                    (2 * i + 1) as f64 * half[0] - 1.0,
                    (2 * j + 1) as f64 * half[1] - 1.0,
                    (2 * k + 1) as f64 * half[2] - 1.0,
                ];
                let mut value = 0.0;
                for e in &SHEPP_LOGAN {
                    let q = e.to_unit_frame(&c);
                    let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                    let reach = half_diag / e.axes.iter().copied().fold(f64::INFINITY, f64::min);
                    let fraction = if r + reach <= 1.0 {
                        1.0
                    } else if r - reach >= 1.0 {
                        0.0
                    } else {
                        let mut hits = 0usize;
                        for &oz in &offsets {
                            for &oy in &offsets {
                                for &ox in &offsets {
                                    let p = [
                                        c[0] + 2.0 * ox * half[0],
                                        c[1] + 2.0 * oy * half[1],
                                        c[2] + 2.0 * oz * half[2],
                                    ];
                                    hits += e.contains(&p) as usize;
                                }
                            }
                        }
                        hits as f64 * inv
                    };
                    value += e.intensity * fraction;
                }
                slice[i + nx * j] = value.max(0.0);
            }
        }
    });
    vol
}
