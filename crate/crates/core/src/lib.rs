//! Cone-beam CT simulation and reconstruction with prior-conditioned neural
//! attenuation fields.
//!
//! The pipeline runs: build a [`geometry::ScanGeometry`], simulate
//! projections of a [`volume::Volume`] with [`projector`], compute a
//! classical prior with [`recon`] (FDK or CGLS), then fit a
//! [`field::FieldModel`] mapping `(x, y, z, ρ₀) → ρ` to the measured
//! projections with [`trainer`].

pub mod field;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod projector;
pub mod recon;
pub mod trainer;
pub mod volume;
