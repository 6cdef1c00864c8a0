//! One function per subcommand. Inputs not given explicitly are looked up in
//! the config's `paths` block and then under their standard names in the
//! output directory, so a bare `phantom → project → recon → train → eval`
//! sequence chains through one directory.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhotomo::io::{self, Checkpoint};
use rhotomo::metrics;
use rhotomo::projector::{add_noise, forward_project, ProjectionSet};
use rhotomo::recon::{cgls, fdk};
use rhotomo::trainer::{self, PriorSource, TrainConfig, TrainError, TrainLog};
use rhotomo::volume::{shepp_logan_3d, PriorMode, Volume};

use crate::config::{Algorithm, RunConfig, Split};
use crate::CliError;

pub const PHANTOM_FILE: &str = "phantom.hdr";
pub const PROJECTIONS_FILE: &str = "projections.hdr";
pub const TRAIN_FILE: &str = "train.hdr";
pub const TEST_FILE: &str = "test.hdr";
pub const CHECKPOINT_FILE: &str = "checkpoint.hdr";
pub const DIVERGED_CHECKPOINT_FILE: &str = "checkpoint_diverged.hdr";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const FIELD_VOLUME_FILE: &str = "field_volume.hdr";
pub const EVAL_VIEWS_FILE: &str = "eval_views.csv";
pub const EVAL_VOLUME_FILE: &str = "eval_volume.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const CGLS_RESIDUALS_FILE: &str = "cgls_residuals.csv";

pub fn recon_file(algo: Algorithm) -> String {
    format!("recon_{}.hdr", algo.name())
}

pub fn recon_metrics_file(algo: Algorithm) -> String {
    format!("recon_{}_metrics.csv", algo.name())
}

fn algorithm_for(source: PriorSource) -> Option<Algorithm> {
    match source {
        PriorSource::Fdk => Some(Algorithm::Fdk),
        PriorSource::Cgls => Some(Algorithm::Cgls),
        PriorSource::None => None,
    }
}

fn source_for(algo: Algorithm) -> PriorSource {
    match algo {
        Algorithm::Fdk => PriorSource::Fdk,
        Algorithm::Cgls => PriorSource::Cgls,
    }
}

/// First of: explicit argument, config path, standard file in `out`.
fn resolve(explicit: Option<&Path>, configured: &Option<PathBuf>, out: &Path, standard: &str) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| configured.clone())
        .unwrap_or_else(|| out.join(standard))
}

fn training_projections_path(cfg: &RunConfig, out: &Path, explicit: Option<&Path>) -> PathBuf {
    let standard = match cfg.simulation.split {
        Split::EvenOdd => TRAIN_FILE,
        Split::None => PROJECTIONS_FILE,
    };
    resolve(explicit, &cfg.paths.train_projections, out, standard)
}

fn truth_path(cfg: &RunConfig, out: &Path, explicit: Option<&Path>) -> PathBuf {
    resolve(explicit, &cfg.paths.volume, out, PHANTOM_FILE)
}

fn prior_path(cfg: &RunConfig, out: &Path, explicit: Option<&Path>, algo: Algorithm) -> PathBuf {
    resolve(explicit, &cfg.paths.prior, out, &recon_file(algo))
}

struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header).expect("in-memory write");
        Table { writer }
    }

    fn row(&mut self, fields: &[String]) {
        self.writer.write_record(fields).expect("in-memory write");
    }

    fn save(self, path: &Path) -> Result<(), CliError> {
        let bytes = self.writer.into_inner().map_err(|e| CliError::Validation(e.to_string()))?;
        write_file(path, &bytes)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn case_name(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("case").to_string()
}

/// PSNR and mean axial SSIM of `vol` against `truth`, range from `truth`.
pub fn volume_scores(truth: &Volume, vol: &Volume) -> Result<(f64, f64), CliError> {
    if !truth.same_grid(vol) {
        return Err(CliError::Validation(format!(
            "volume grids differ: {:?} vs {:?}",
            truth.dims, vol.dims
        )));
    }
    let range = metrics::data_range(&truth.data);
    if !(range > 0.0) {
        return Err(CliError::Validation("ground truth is constant".into()));
    }
    Ok((
        metrics::psnr(&truth.data, &vol.data, range)?,
        metrics::ssim_volume(&truth.data, &vol.data, truth.dims, range)?,
    ))
}

/// Write the Shepp–Logan phantom on the configured grid.
pub fn phantom(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    let vol = shepp_logan_3d(cfg.geometry.vol_dims, cfg.geometry.vol_spacing);
    let path = out.join(PHANTOM_FILE);
    io::write_volume(&path, &vol)?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct ProjectOutputs {
    pub all: PathBuf,
    pub split: Option<(PathBuf, PathBuf)>,
}

/// Forward-project a volume over the configured views, add noise, and
/// optionally split into even (train) and odd (test) views.
pub fn project(cfg: &RunConfig, out: &Path, volume: Option<&Path>) -> Result<ProjectOutputs, CliError> {
    let vol = io::read_volume(&truth_path(cfg, out, volume))?;
    let geom = cfg.scan_geometry();
    let mut proj = forward_project(&vol, &geom, cfg.simulation.samples_per_ray)?;
    if cfg.simulation.noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.simulation.seed);
        proj = add_noise(&proj, cfg.simulation.noise_level, &mut rng);
    }
    let all = out.join(PROJECTIONS_FILE);
    io::write_projections(&all, &proj)?;
    let split = match cfg.simulation.split {
        Split::None => None,
        Split::EvenOdd => {
            let (even, odd) = proj.split_even_odd();
            let (train, test) = (out.join(TRAIN_FILE), out.join(TEST_FILE));
            io::write_projections(&train, &even)?;
            io::write_projections(&test, &odd)?;
            Some((train, test))
        }
    };
    Ok(ProjectOutputs { all, split })
}

#[derive(Debug, Clone)]
pub struct ReconOutputs {
    pub volume: PathBuf,
    /// PSNR and SSIM when a ground truth was available.
    pub scores: Option<(f64, f64)>,
    pub residuals: Option<Vec<f64>>,
}

pub fn reconstruct(cfg: &RunConfig, proj: &ProjectionSet, algo: Algorithm) -> Result<(Volume, Option<Vec<f64>>), CliError> {
    let m = cfg.recon_samples();
    Ok(match algo {
        Algorithm::Fdk => (fdk(proj, m)?, None),
        Algorithm::Cgls => {
            let r = cgls(proj, m, cfg.prior.iterations, cfg.prior.tol)?;
            (r.volume, Some(r.residuals))
        }
    })
}

/// Classical reconstruction. Scores it against the ground truth when one is
/// given or found.
pub fn recon(
    cfg: &RunConfig,
    out: &Path,
    algo: Algorithm,
    projections: Option<&Path>,
    truth: Option<&Path>,
) -> Result<ReconOutputs, CliError> {
    let proj_path = training_projections_path(cfg, out, projections);
    let proj = io::read_projections(&proj_path)?;
    let (vol, residuals) = reconstruct(cfg, &proj, algo)?;
    let path = out.join(recon_file(algo));
    io::write_volume(&path, &vol)?;

    if let Some(res) = &residuals {
        let rhs = proj.images.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut t = Table::new(&["iteration", "residual", "relative_residual"]);
        for (i, r) in res.iter().enumerate() {
            let rel = if rhs > 0.0 { r / rhs } else { 0.0 };
            t.row(&[(i + 1).to_string(), r.to_string(), rel.to_string()]);
        }
        t.save(&out.join(CGLS_RESIDUALS_FILE))?;
    }

    let truth_file = truth_path(cfg, out, truth);
    let scores = if truth.is_some() || truth_file.exists() {
        let gt = io::read_volume(&truth_file)?;
        let (psnr, ssim) = volume_scores(&gt, &vol)?;
        let mut t = Table::new(&["case", "algo", "psnr", "ssim"]);
        t.row(&[case_name(&proj_path), algo.name().into(), psnr.to_string(), ssim.to_string()]);
        t.save(&out.join(recon_metrics_file(algo)))?;
        Some((psnr, ssim))
    } else {
        None
    };
    Ok(ReconOutputs {
        volume: path,
        scores,
        residuals,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub train_log: TrainLog,
}

/// Fit the field to the training projections and write checkpoint and log.
/// On divergence the last finite model is saved before failing.
pub fn train(
    cfg: &RunConfig,
    out: &Path,
    projections: Option<&Path>,
    prior: Option<&Path>,
    test: Option<&Path>,
) -> Result<TrainOutputs, CliError> {
    let proj = io::read_projections(&training_projections_path(cfg, out, projections))?;
    let prior_vol = match algorithm_for(cfg.training.prior_source) {
        Some(algo) => Some(io::read_volume(&prior_path(cfg, out, prior, algo))?),
        None => None,
    };
    let test_set = if cfg.training.eval_every > 0 {
        let path = resolve(test, &cfg.paths.test_projections, out, TEST_FILE);
        if test.is_some() || cfg.paths.test_projections.is_some() || path.exists() {
            Some(io::read_projections(&path)?)
        } else {
            None
        }
    } else {
        None
    };
    let checkpoint_for = |model| Checkpoint {
        model,
        vol_dims: proj.geom.vol_dims,
        vol_spacing: proj.geom.vol_spacing,
        prior_source: cfg.training.prior_source,
        prior_mode: cfg.training.prior_mode,
    };
    let outcome = match trainer::train(&proj, prior_vol.as_ref(), &cfg.field, &cfg.training, test_set.as_ref()) {
        Ok(o) => o,
        Err(TrainError::Diverged { step, last_good }) => {
            io::write_checkpoint(&out.join(DIVERGED_CHECKPOINT_FILE), &checkpoint_for(*last_good))?;
            return Err(CliError::Numeric(format!(
                "training diverged at step {step}; last finite model saved to {DIVERGED_CHECKPOINT_FILE}"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    io::write_checkpoint(&checkpoint, &checkpoint_for(outcome.model))?;
    let log = out.join(TRAIN_LOG_FILE);
    write_file(&log, outcome.log.to_csv().as_bytes())?;
    Ok(TrainOutputs {
        checkpoint,
        log,
        train_log: outcome.log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewScore {
    pub view: usize,
    pub angle: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub views: Vec<ViewScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Reconstruction PSNR and SSIM when a ground truth was available.
    pub volume_scores: Option<(f64, f64)>,
    pub field_volume: PathBuf,
    pub slices: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalInputs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub projections: Option<&'a Path>,
    pub truth: Option<&'a Path>,
    pub prior: Option<&'a Path>,
    pub slices: bool,
}

/// Render held-out views, extract the volume and score both.
pub fn eval(cfg: &RunConfig, out: &Path, inputs: &EvalInputs) -> Result<EvalOutputs, CliError> {
    let ckpt = io::read_checkpoint(&resolve(inputs.checkpoint, &cfg.paths.checkpoint, out, CHECKPOINT_FILE))?;
    let test_path = resolve(inputs.projections, &cfg.paths.test_projections, out, TEST_FILE);
    let test = io::read_projections(&test_path)?;
    if !ckpt.matches(&test.geom) {
        return Err(CliError::Validation(format!(
            "checkpoint volume {:?}/{:?} does not match projections {:?}/{:?}",
            ckpt.vol_dims, ckpt.vol_spacing, test.geom.vol_dims, test.geom.vol_spacing
        )));
    }
    let prior = match algorithm_for(ckpt.prior_source) {
        Some(algo) => Some(io::read_volume(&prior_path(cfg, out, inputs.prior, algo))?),
        None => None,
    };
    let m = cfg.training.samples_per_ray;
    let rendered = trainer::render_projections(&ckpt.model, prior.as_ref(), ckpt.prior_mode, &test.geom, m)?;
    let scores = trainer::projection_metrics(&test, &rendered)?;
    let views: Vec<ViewScore> = scores
        .iter()
        .enumerate()
        .map(|(view, &(psnr, ssim))| ViewScore {
            view,
            angle: test.geom.angles[view],
            psnr,
            ssim,
        })
        .collect();
    let n = views.len().max(1) as f64;
    let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
    let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
    let mut t = Table::new(&["view", "angle", "psnr", "ssim"]);
    for v in &views {
        t.row(&[v.view.to_string(), v.angle.to_string(), v.psnr.to_string(), v.ssim.to_string()]);
    }
    t.row(&["mean".into(), String::new(), mean_psnr.to_string(), mean_ssim.to_string()]);
    t.save(&out.join(EVAL_VIEWS_FILE))?;

    let vol = trainer::extract_volume(&ckpt.model, prior.as_ref(), ckpt.prior_mode, &test.geom)?;
    let field_volume = out.join(FIELD_VOLUME_FILE);
    io::write_volume(&field_volume, &vol)?;
    let truth_file = truth_path(cfg, out, inputs.truth);
    let truth = if inputs.truth.is_some() || truth_file.exists() {
        Some(io::read_volume(&truth_file)?)
    } else {
        None
    };
    let volume_scores = match &truth {
        Some(gt) => {
            let (psnr, ssim) = volume_scores(gt, &vol)?;
            let mut t = Table::new(&["case", "algo", "psnr", "ssim"]);
            let algo = format!("field-{}-{}", ckpt.prior_source.name(), ckpt.prior_mode.name());
            t.row(&[case_name(&test_path), algo, psnr.to_string(), ssim.to_string()]);
            t.save(&out.join(EVAL_VOLUME_FILE))?;
            Some((psnr, ssim))
        }
        None => None,
    };
    let slices = if inputs.slices {
        let range = truth.as_ref().unwrap_or(&vol).min_max();
        write_slices(&vol, range, &out.join("slices"))?
    } else {
        Vec::new()
    };
    Ok(EvalOutputs {
        views,
        mean_psnr,
        mean_ssim,
        volume_scores,
        field_volume,
        slices,
    })
}

/// Axial slices at a quarter, half and three quarters of the depth as
/// 8-bit grayscale, mapping `range` to black..white.
pub fn write_slices(vol: &Volume, range: (f64, f64), dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let [nx, ny, nz] = vol.dims;
    let (lo, hi) = range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut ks = vec![nz / 4, nz / 2, (3 * nz) / 4];
    ks.dedup();
    let mut paths = Vec::new();
    for k in ks {
        let img = GrayImage::from_fn(nx as u32, ny as u32, |x, y| {
            let v = vol.get(x as usize, y as usize, k);
            Luma([(((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let path = dir.join(format!("axial_{k:03}.png"));
        std::fs::create_dir_all(dir).map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?;
        img.save(&path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub prior: Algorithm,
    pub interpolation: PriorMode,
    pub psnr: f64,
    pub ssim: f64,
    pub final_loss: f64,
}

/// Window for the smoothed final loss in sweep tables.
pub const LOSS_WINDOW: usize = 100;

/// Train one field per prior algorithm and interpolation mode and score the
/// extracted volumes against the ground truth.
pub fn ablate(cfg: &RunConfig, out: &Path, projections: Option<&Path>, truth: Option<&Path>) -> Result<Vec<AblationRow>, CliError> {
    let proj = io::read_projections(&training_projections_path(cfg, out, projections))?;
    let gt = io::read_volume(&truth_path(cfg, out, truth))?;
    let mut rows = Vec::new();
    for algo in [Algorithm::Fdk, Algorithm::Cgls] {
        let (prior, _) = reconstruct(cfg, &proj, algo)?;
        for mode in PriorMode::ALL {
            let tc = TrainConfig {
                prior_source: source_for(algo),
                prior_mode: mode,
                ..cfg.training.clone()
            };
            let outcome = trainer::train(&proj, Some(&prior), &cfg.field, &tc, None)?;
            let vol = trainer::extract_volume(&outcome.model, Some(&prior), mode, &proj.geom)?;
            let (psnr, ssim) = volume_scores(&gt, &vol)?;
            rows.push(AblationRow {
                prior: algo,
                interpolation: mode,
                psnr,
                ssim,
                final_loss: outcome.log.smoothed_final_loss(LOSS_WINDOW).unwrap_or(f64::NAN),
            });
        }
    }
    let mut t = Table::new(&["prior", "interpolation", "psnr", "ssim", "final_loss"]);
    for r in &rows {
        t.row(&[
            r.prior.name().into(),
            r.interpolation.name().into(),
            r.psnr.to_string(),
            r.ssim.to_string(),
            r.final_loss.to_string(),
        ]);
    }
    t.save(&out.join(ABLATION_FILE))?;
    Ok(rows)
}
