//! Self-supervised fitting of a field to measured projections.
//!
//! Each step draws a batch of detector pixels, renders their rays through
//! the field with stratified sampling, and takes one Adam step on the mean
//! squared projection error. Rays are split into a fixed number of chunks
//! whose gradients are summed in chunk order, so results depend only on the
//! inputs and the seed.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{adam_step, AdamConfig, AdamState, FieldConfig, FieldError, FieldModel, SampleCache};
use crate::geometry::{Ray, ScanGeometry, Vec3};
use crate::metrics;
use crate::projector::{sample_ray, ProjectionSet, SampleMode};
use crate::volume::{PriorMode, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    Fdk,
    Cgls,
    None,
}

impl PriorSource {
    pub fn name(self) -> &'static str {
        match self {
            PriorSource::Fdk => "fdk",
            PriorSource::Cgls => "cgls",
            PriorSource::None => "none",
        }
    }
}

fn default_batch_rays() -> usize {
    1024
}
fn default_samples_per_ray() -> usize {
    192
}
fn default_lr_initial() -> f64 {
    1e-3
}
fn default_lr_final() -> f64 {
    1e-4
}
fn default_lr_switch() -> f64 {
    0.5
}
fn default_prior_mode() -> PriorMode {
    PriorMode::Nearest
}
fn default_prior_source() -> PriorSource {
    PriorSource::None
}

/// `max_steps` has no default on purpose; every run states its budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_rays")]
    pub batch_rays: usize,
    #[serde(default = "default_samples_per_ray")]
    pub samples_per_ray: usize,
    pub max_steps: usize,
    #[serde(default = "default_lr_initial")]
    pub lr_initial: f64,
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    #[serde(default = "default_lr_switch")]
    pub lr_switch_fraction: f64,
    #[serde(default = "default_prior_mode")]
    pub prior_mode: PriorMode,
    #[serde(default = "default_prior_source")]
    pub prior_source: PriorSource,
    #[serde(default)]
    pub seed: u64,
    /// Held-out evaluation period in steps; 0 disables it.
    #[serde(default)]
    pub eval_every: usize,
    /// Wall-clock timings make logs differ run to run, so they are opt-in.
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl TrainConfig {
    pub fn new(max_steps: usize) -> Self {
        TrainConfig {
            batch_rays: default_batch_rays(),
            samples_per_ray: default_samples_per_ray(),
            max_steps,
            lr_initial: default_lr_initial(),
            lr_final: default_lr_final(),
            lr_switch_fraction: default_lr_switch(),
            prior_mode: default_prior_mode(),
            prior_source: default_prior_source(),
            seed: 0,
            eval_every: 0,
            record_wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_rays == 0 || self.samples_per_ray == 0 {
            return bad("batch_rays and samples_per_ray must be >= 1");
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(0.0..=1.0).contains(&self.lr_switch_fraction) {
            return bad("lr_switch_fraction must be in [0, 1]");
        }
        Ok(())
    }

    /// First step that uses `lr_final`.
    pub fn lr_switch_step(&self) -> usize {
        (self.lr_switch_fraction * self.max_steps as f64).floor() as usize
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.lr_switch_step() {
            self.lr_initial
        } else {
            self.lr_final
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("projection set is empty")]
    EmptyProjections,
    #[error("no detector ray intersects the volume")]
    NoIntersectingRays,
    #[error("prior source {0} requested but no prior volume given")]
    MissingPrior(&'static str),
    #[error("loss diverged at step {step}")]
    Diverged { step: usize, last_good: Box<FieldModel> },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Rays drawn for one optimization step.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<f64>,
    /// Per-ray seeds for stratified jitter.
    pub seeds: Vec<u64>,
    pub misses: usize,
}

const MISS_STREAK_CHECK: usize = 10_000;

fn any_ray_hits(geom: &ScanGeometry) -> bool {
    (0..geom.num_views())
        .any(|v| (0..geom.det_rows).any(|r| (0..geom.det_cols).any(|c| geom.pixel_ray(v, r, c).is_some())))
}

/// Draw `batch_rays` pixels uniformly with replacement over all views,
/// redrawing pixels whose rays miss the volume.
pub fn make_ray_batch<R: Rng + ?Sized>(
    proj: &ProjectionSet,
    batch_rays: usize,
    rng: &mut R,
) -> Result<RayBatch, TrainError> {
    let geom = &proj.geom;
    if geom.num_views() == 0 || proj.images.is_empty() {
        return Err(TrainError::EmptyProjections);
    }
    let mut batch = RayBatch {
        rays: Vec::with_capacity(batch_rays),
        targets: Vec::with_capacity(batch_rays),
        seeds: Vec::with_capacity(batch_rays),
        misses: 0,
    };
    let mut streak = 0;
    let mut checked = false;
    while batch.rays.len() < batch_rays {
        let view = rng.random_range(0..geom.num_views());
        let row = rng.random_range(0..geom.det_rows);
        let col = rng.random_range(0..geom.det_cols);
        match geom.pixel_ray(view, row, col) {
            Some(ray) => {
                streak = 0;
                batch.rays.push(ray);
                batch.targets.push(proj.pixel(view, row, col));
                batch.seeds.push(rng.random());
            }
            None => {
                batch.misses += 1;
                streak += 1;
                if streak >= MISS_STREAK_CHECK && !checked {
                    if !any_ray_hits(geom) {
                        return Err(TrainError::NoIntersectingRays);
                    }
                    checked = true;
                }
            }
        }
    }
    Ok(batch)
}

/// Everything needed to turn a ray into a predicted line integral.
#[derive(Debug, Clone, Copy)]
pub struct Renderer<'a> {
    pub model: &'a FieldModel,
    pub prior: Option<&'a Volume>,
    pub prior_mode: PriorMode,
    box_lo: Vec3,
    box_size: Vec3,
}

impl<'a> Renderer<'a> {
    pub fn new(model: &'a FieldModel, prior: Option<&'a Volume>, prior_mode: PriorMode, geom: &ScanGeometry) -> Self {
        let half = geom.half_extent();
        Renderer {
            model,
            prior,
            prior_mode,
            box_lo: half.map(|h| -h),
            box_size: half.map(|h| 2.0 * h),
        }
    }

    /// World point to the unit cube spanned by the volume box.
    pub fn normalize(&self, p: &Vec3) -> Vec3 {
        [0, 1, 2].map(|i| (p[i] - self.box_lo[i]) / self.box_size[i])
    }

    pub fn prior_at(&self, p: &Vec3) -> f64 {
        self.prior.map_or(0.0, |v| v.sample_prior(p, self.prior_mode))
    }

    pub fn density(&self, p: &Vec3) -> Result<f64, FieldError> {
        self.model.evaluate(&self.normalize(p), self.prior_at(p))
    }

    /// Predicted line integral; fills `caches` for a later [`Self::backward`].
    /// Returns the prediction and the bin length.
    pub fn render_cached<R: Rng + ?Sized>(
        &self,
        ray: &Ray,
        m: usize,
        mode: SampleMode,
        rng: &mut R,
        caches: &mut [SampleCache],
    ) -> Result<(f64, f64), FieldError> {
        let samples = sample_ray(ray, m, mode, rng).map_err(|e| FieldError::ShapeMismatch(e.to_string()))?;
        let mut total = 0.0;
        for (p, cache) in samples.points.iter().zip(caches.iter_mut()) {
            total += self.model.forward(&self.normalize(p), self.prior_at(p), cache)?;
        }
        let value = total * samples.delta_t;
        if !value.is_finite() {
            return Err(FieldError::NonFinite);
        }
        Ok((value, samples.delta_t))
    }

    /// Backpropagate `dL/dÎ` through the cached samples of one ray.
    pub fn backward(&self, upstream: f64, delta_t: f64, caches: &mut [SampleCache], grads: &mut [f64]) -> Result<(), FieldError> {
        let per_sample = upstream * delta_t;
        for cache in caches.iter_mut() {
            self.model.backward(per_sample, cache, grads)?;
        }
        Ok(())
    }

    pub fn render<R: Rng + ?Sized>(&self, ray: &Ray, m: usize, mode: SampleMode, rng: &mut R) -> Result<f64, FieldError> {
        let mut caches = vec![self.model.new_cache(); m];
        self.render_cached(ray, m, mode, rng, &mut caches).map(|(v, _)| v)
    }
}

/// `Î(r) = Σ ρ(p_j, ρ₀(p_j)) Δt` with ρ₀ read from `prior` (or 0).
pub fn render_ray<R: Rng + ?Sized>(
    ray: &Ray,
    model: &FieldModel,
    prior: Option<&Volume>,
    prior_mode: PriorMode,
    geom: &ScanGeometry,
    m: usize,
    rng: &mut R,
) -> Result<f64, FieldError> {
    Renderer::new(model, prior, prior_mode, geom).render(ray, m, SampleMode::Stratified, rng)
}

/// Deterministic (midpoint) rendering of every pixel of every view in `geom`.
pub fn render_projections(
    model: &FieldModel,
    prior: Option<&Volume>,
    prior_mode: PriorMode,
    geom: &ScanGeometry,
    m: usize,
) -> Result<ProjectionSet, FieldError> {
    let renderer = Renderer::new(model, prior, prior_mode, geom);
    let per_view = geom.pixels_per_view();
    let mut out = ProjectionSet::zeros(geom.clone());
    out.images
        .par_chunks_mut(per_view)
        .enumerate()
        .try_for_each(|(view, img)| -> Result<(), FieldError> {
            let mut caches = vec![model.new_cache(); m];
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for row in 0..geom.det_rows {
                for col in 0..geom.det_cols {
                    if let Some(ray) = geom.pixel_ray(view, row, col) {
                        let (v, _) = renderer.render_cached(&ray, m, SampleMode::Midpoint, &mut rng, &mut caches)?;
                        img[row * geom.det_cols + col] = v;
                    }
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Evaluate the field at every voxel center of the geometry's grid.
pub fn extract_volume(
    model: &FieldModel,
    prior: Option<&Volume>,
    prior_mode: PriorMode,
    geom: &ScanGeometry,
) -> Result<Volume, FieldError> {
    let renderer = Renderer::new(model, prior, prior_mode, geom);
    let mut vol = Volume::for_geometry(geom);
    let [nx, ny, _] = vol.dims;
    let grid = vol.clone();
    vol.data
        .par_chunks_mut(nx * ny)
        .enumerate()
        .try_for_each(|(k, slice)| -> Result<(), FieldError> {
            let mut cache = model.new_cache();
            for j in 0..ny {
                for i in 0..nx {
                    let p = grid.voxel_to_world(&[i as f64, j as f64, k as f64]);
                    slice[i + nx * j] = model.forward(&renderer.normalize(&p), renderer.prior_at(&p), &mut cache)?;
                }
            }
            Ok(())
        })?;
    Ok(vol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub rays_drawn: usize,
    pub rays_missed: usize,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean loss over the last `window` steps.
    pub fn smoothed_final_loss(&self, window: usize) -> Option<f64> {
        let n = self.steps.len();
        if n == 0 || window == 0 {
            return None;
        }
        let tail = &self.steps[n.saturating_sub(window)..];
        Some(tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64)
    }

    pub fn miss_rate(&self) -> f64 {
        let total = self.rays_drawn + self.rays_missed;
        if total == 0 {
            0.0
        } else {
            self.rays_missed as f64 / total as f64
        }
    }

    /// `step,loss,lr,eval_psnr,eval_ssim,wall_ms`: one row per step, and one
    /// row per evaluation right after the step it follows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr,eval_psnr,eval_ssim,wall_ms\n");
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            out.push_str(&format!("{},{},{},,,{}\n", s.step, s.loss, s.lr, s.wall_ms));
            while let Some(e) = evals.next_if(|e| e.step == s.step) {
                out.push_str(&format!("{},,,{},{},\n", e.step, e.psnr, e.ssim));
            }
        }
        for e in evals {
            out.push_str(&format!("{},,,{},{},\n", e.step, e.psnr, e.ssim));
        }
        out
    }
}

/// Mean PSNR and SSIM over views, each view scored against its own range.
pub fn projection_metrics(reference: &ProjectionSet, predicted: &ProjectionSet) -> Result<Vec<(f64, f64)>, metrics::MetricsError> {
    let g = &reference.geom;
    (0..reference.num_views())
        .map(|v| {
            let truth = reference.view(v);
            let pred = predicted.view(v);
            let range = metrics::data_range(truth).max(f64::MIN_POSITIVE);
            Ok((
                metrics::psnr(truth, pred, range)?,
                metrics::ssim(truth, pred, g.det_cols, g.det_rows, range)?,
            ))
        })
        .collect()
}

/// Fixed split of a batch into private gradient buffers.
const GRADIENT_CHUNKS: usize = 4;

/// Stream of the main seed that feeds batch sampling.
const BATCH_STREAM: u64 = 1;

/// Generator `train` draws its ray batches from.
pub fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BATCH_STREAM);
    rng
}

pub struct TrainOutcome {
    pub model: FieldModel,
    pub log: TrainLog,
}

/// Fit a freshly initialized field to `proj`. `eval` (held-out views) is
/// rendered every `cfg.eval_every` steps.
pub fn train(
    proj: &ProjectionSet,
    prior: Option<&Volume>,
    field_cfg: &FieldConfig,
    cfg: &TrainConfig,
    eval: Option<&ProjectionSet>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if proj.num_views() == 0 {
        return Err(TrainError::EmptyProjections);
    }
    let prior = match cfg.prior_source {
        PriorSource::None => None,
        source => Some(prior.ok_or(TrainError::MissingPrior(source.name()))?),
    };
    let mut model = FieldModel::new(field_cfg.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.num_params());
    let mut rng = batch_rng(cfg.seed);
    let mut log = TrainLog::default();
    let m = cfg.samples_per_ray;

    for step in 0..cfg.max_steps {
        let started = Instant::now();
        let batch = make_ray_batch(proj, cfg.batch_rays, &mut rng)?;
        log.rays_drawn += batch.rays.len();
        log.rays_missed += batch.misses;

        let (loss, grads) = match batch_gradient(&model, prior, cfg, &proj.geom, &batch) {
            Ok(r) if r.0.is_finite() => r,
            _ => {
                return Err(TrainError::Diverged {
                    step,
                    last_good: Box::new(model),
                })
            }
        };
        let lr = cfg.learning_rate(step);
        let before = model.params.clone();
        adam_step(&mut model.params, &grads, &mut adam, lr, AdamConfig::default());
        if model.params.iter().any(|p| !p.is_finite()) {
            model.params = before;
            return Err(TrainError::Diverged {
                step,
                last_good: Box::new(model),
            });
        }
        let wall_ms = if cfg.record_wall_clock {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        log.steps.push(StepRecord { step, loss, lr, wall_ms });

        if let Some(test) = eval {
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                let rendered = render_projections(&model, prior, cfg.prior_mode, &test.geom, m)?;
                let scores = projection_metrics(test, &rendered).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
                let n = scores.len().max(1) as f64;
                log.evals.push(EvalRecord {
                    step,
                    psnr: scores.iter().map(|s| s.0).sum::<f64>() / n,
                    ssim: scores.iter().map(|s| s.1).sum::<f64>() / n,
                });
            }
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Mean squared error over the batch and its gradient.
fn batch_gradient(
    model: &FieldModel,
    prior: Option<&Volume>,
    cfg: &TrainConfig,
    geom: &ScanGeometry,
    batch: &RayBatch,
) -> Result<(f64, Vec<f64>), FieldError> {
    let renderer = Renderer::new(model, prior, cfg.prior_mode, geom);
    let m = cfg.samples_per_ray;
    let n = batch.rays.len();
    let scale = 2.0 / n as f64;
    let chunk = n.div_ceil(GRADIENT_CHUNKS);
    let partials: Vec<(f64, Vec<f64>)> = (0..n)
        .step_by(chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| -> Result<(f64, Vec<f64>), FieldError> {
            let mut grads = vec![0.0; model.num_params()];
            let mut caches = vec![model.new_cache(); m];
            let mut sq = 0.0;
            for r in start..(start + chunk).min(n) {
                let mut rng = ChaCha8Rng::seed_from_u64(batch.seeds[r]);
                let (pred, dt) = renderer.render_cached(&batch.rays[r], m, SampleMode::Stratified, &mut rng, &mut caches)?;
                let residual = pred - batch.targets[r];
                sq += residual * residual;
                renderer.backward(scale * residual, dt, &mut caches, &mut grads)?;
            }
            Ok((sq, grads))
        })
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    let mut grads = vec![0.0; model.num_params()];
    for (sq, g) in partials {
        total += sq;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total / n as f64, grads))
}
