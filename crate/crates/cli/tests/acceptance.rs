//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line and
//! then asserts, so the summary is visible even when a check fails.
//!
//! The two training studies (the prior trend and the prior ablation)
//! take tens of minutes on a single core.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rhotomo::field::{FieldConfig, FieldModel, OutputMap};
use rhotomo::geometry::{ScanGeometry, Vec3};
use rhotomo::metrics;
use rhotomo::projector::{add_noise, apply_a, apply_at, forward_project, ProjectionSet, SampleMode};
use rhotomo::recon::{cgls_with, fdk, CglsOptions};
use rhotomo::trainer::{extract_volume, train, PriorSource, Renderer, TrainConfig};
use rhotomo::volume::{shepp_logan_3d, PriorMode, Volume, SHEPP_LOGAN};

fn report(id: u32, name: &str, passed: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "[criterion {id}] {} {name} ({:.1} s): {detail}\n",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    // Bypass the test harness's output capture.
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn cone_geometry(n: usize, det: usize, pitch: f64, views: usize, arc: f64) -> ScanGeometry {
    ScanGeometry {
        dso: 4.0 * n as f64,
        dsd: 8.0 * n as f64,
        det_rows: det,
        det_cols: det,
        det_spacing_u: pitch,
        det_spacing_v: pitch,
        vol_dims: [n; 3],
        vol_spacing: [1.0; 3],
        angles: (0..views).map(|i| i as f64 * arc / views as f64).collect(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

const ADJOINT_TOL: f64 = 1e-10;
const ADJOINT_PAIRS: usize = 20;
const ADJOINT_LIMIT: Duration = Duration::from_secs(10);

#[test]
fn criterion_1_adjointness() {
    let start = Instant::now();
    let g = cone_geometry(16, 24, 2.4, 8, std::f64::consts::TAU);
    let m = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..ADJOINT_PAIRS {
        let mut x = Volume::for_geometry(&g);
        x.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..g.num_views() * g.pixels_per_view()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ax = apply_a(&x, &g, m).unwrap();
        let aty = apply_at(&y, &g, m).unwrap();
        let rel = (dot(&ax, &y) - dot(&x.data, &aty.data)).abs() / (norm(&ax) * norm(&y));
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    let passed = worst < ADJOINT_TOL && elapsed < ADJOINT_LIMIT;
    report(1, "adjointness", passed, elapsed, &format!("worst relative mismatch {worst:.2e} over {ADJOINT_PAIRS} pairs (tol {ADJOINT_TOL:.0e})"));
    assert!(passed);
}

const GRAD_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-5;
const GRAD_LIMIT: Duration = Duration::from_secs(60);

fn toy_field() -> FieldConfig {
    FieldConfig {
        levels: 3,
        table_size_log2: 6,
        features_per_level: 2,
        base_resolution: 2,
        per_level_scale: 2.0,
        prior_width: 3,
        hidden_layers: 2,
        hidden_width: 6,
        output_map: OutputMap::Softplus,
        output_bias_init: -0.5,
        prior_init_scale: 1.0,
    }
}

fn randomized(cfg: FieldConfig, seed: u64) -> FieldModel {
    let mut model = FieldModel::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    model.params.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
    model
}

/// Worst relative gap between analytic and central-difference gradients,
/// per parameter tensor.
fn gradient_gaps(model: &FieldModel, value: &dyn Fn(&FieldModel) -> f64, analytic: &[f64]) -> Vec<(String, f64)> {
    model
        .layout()
        .iter()
        .filter(|s| !s.is_empty())
        .map(|slot| {
            let mut worst: f64 = 0.0;
            for idx in slot.range() {
                let mut plus = model.clone();
                plus.params[idx] += GRAD_STEP;
                let mut minus = model.clone();
                minus.params[idx] -= GRAD_STEP;
                let fd = (value(&plus) - value(&minus)) / (2.0 * GRAD_STEP);
                let scale = fd.abs().max(analytic[idx].abs());
                if scale > 1e-7 {
                    worst = worst.max((fd - analytic[idx]).abs() / scale);
                }
            }
            (slot.name.clone(), worst)
        })
        .collect()
}

#[test]
fn criterion_2_gradients() {
    let start = Instant::now();
    let mut gaps = Vec::new();

    // Pointwise field: ρ(p, ρ₀).
    for seed in 0..3 {
        let model = randomized(toy_field(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let p: Vec3 = [rng.random(), rng.random(), rng.random()];
        let rho0: f64 = rng.random_range(0.0..1.0);
        let mut cache = model.new_cache();
        model.forward(&p, rho0, &mut cache).unwrap();
        let mut grads = vec![0.0; model.num_params()];
        model.backward(1.0, &mut cache, &mut grads).unwrap();
        let value = |m: &FieldModel| m.evaluate(&p, rho0).unwrap();
        gaps.extend(gradient_gaps(&model, &value, &grads));
    }

    // Full render path: stratified samples, prior lookup and the Δt sum.
    let g = cone_geometry(8, 12, 2.0, 3, std::f64::consts::PI);
    let prior = shepp_logan_3d([8; 3], [1.0; 3]);
    let model = randomized(toy_field(), 7);
    let ray = g.pixel_ray(1, 6, 5).unwrap();
    let m = 12;
    let render = |md: &FieldModel| {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        Renderer::new(md, Some(&prior), PriorMode::Trilinear, &g)
            .render(&ray, m, SampleMode::Stratified, &mut rng)
            .unwrap()
    };
    let renderer = Renderer::new(&model, Some(&prior), PriorMode::Trilinear, &g);
    let mut caches = vec![model.new_cache(); m];
    let (_, dt) = renderer
        .render_cached(&ray, m, SampleMode::Stratified, &mut ChaCha8Rng::seed_from_u64(55), &mut caches)
        .unwrap();
    let mut grads = vec![0.0; model.num_params()];
    renderer.backward(1.0, dt, &mut caches, &mut grads).unwrap();
    gaps.extend(
        gradient_gaps(&model, &render, &grads)
            .into_iter()
            .map(|(n, v)| (format!("render:{n}"), v)),
    );

    let elapsed = start.elapsed();
    let (worst_name, worst) = gaps.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let classes = ["hash.tables", "prior.weight", "prior.bias", "mlp.0.weight", "mlp.1.weight", "mlp.2.weight", "render:hash.tables"];
    let covered = classes.iter().all(|c| gaps.iter().any(|(n, _)| n == c));
    let passed = covered && worst < GRAD_TOL && elapsed < GRAD_LIMIT;
    report(
        2,
        "gradient correctness",
        passed,
        elapsed,
        &format!("{} tensor checks, worst relative gap {worst:.2e} in {worst_name} (tol {GRAD_TOL:.0e})", gaps.len()),
    );
    assert!(passed);
}

const CUBE_TOL: f64 = 0.01;
const SHEPP_TOL: f64 = 0.02;
const PROJECTOR_LIMIT: Duration = Duration::from_secs(5);

/// Length of the segment of `o + t·d` (t ≥ 0) inside an ellipsoid, computed
/// from the table entry in normalized coordinates scaled by `half`.
fn ellipsoid_chord(o: Vec3, d: Vec3, half: f64, axes: Vec3, center: Vec3, phi_deg: f64) -> f64 {
    let (s, c) = phi_deg.to_radians().sin_cos();
    let local = |v: Vec3, shift: bool| -> Vec3 {
        let v = if shift {
            [v[0] / half - center[0], v[1] / half - center[1], v[2] / half - center[2]]
        } else {
            [v[0] / half, v[1] / half, v[2] / half]
        };
        [(c * v[0] + s * v[1]) / axes[0], (-s * v[0] + c * v[1]) / axes[1], v[2] / axes[2]]
    };
    let (lo, ld) = (local(o, true), local(d, false));
    let a = dot(&ld, &ld);
    let b = 2.0 * dot(&lo, &ld);
    let cc = dot(&lo, &lo) - 1.0;
    let disc = b * b - 4.0 * a * cc;
    if disc <= 0.0 {
        return 0.0;
    }
    let root = disc.sqrt();
    let t0 = ((-b - root) / (2.0 * a)).max(0.0);
    let t1 = ((-b + root) / (2.0 * a)).max(0.0);
    (t1 - t0) * norm(&d)
}

#[test]
fn criterion_3_projector_oracles() {
    let start = Instant::now();
    let n = 32;
    let m = 4 * n;
    // Odd detector so a pixel sits exactly on the central ray.
    let g = cone_geometry(n, 33, 2.0, 1, 0.0);
    let centre = (g.det_rows / 2, g.det_cols / 2);

    let cube = Volume::filled([n; 3], [1.0; 3], 1.0);
    let p = forward_project(&cube, &g, m).unwrap();
    let cube_value = p.pixel(0, centre.0, centre.1);
    let cube_expect = n as f64;
    let cube_err = (cube_value - cube_expect).abs() / cube_expect;

    let phantom = shepp_logan_3d([n; 3], [1.0; 3]);
    let p = forward_project(&phantom, &g, m).unwrap();
    let shepp_value = p.pixel(0, centre.0, centre.1);
    let ray = g.pixel_ray(0, centre.0, centre.1).unwrap();
    let d = [ray.direction[0], ray.direction[1], ray.direction[2]];
    let half = n as f64 / 2.0;
    let shepp_expect: f64 = SHEPP_LOGAN
        .iter()
        .map(|e| e.intensity * ellipsoid_chord(ray.origin, d, half, e.axes, e.center, e.phi_deg))
        .sum();
    let shepp_err = (shepp_value - shepp_expect).abs() / shepp_expect;

    let elapsed = start.elapsed();
    let passed = cube_err < CUBE_TOL && shepp_err < SHEPP_TOL && elapsed < PROJECTOR_LIMIT;
    report(
        3,
        "projector oracles",
        passed,
        elapsed,
        &format!(
            "cube chord {cube_value:.4} vs {cube_expect} (err {:.3}%, tol 1%); Shepp-Logan chord {shepp_value:.4} vs {shepp_expect:.4} (err {:.3}%, tol 2%)",
            100.0 * cube_err,
            100.0 * shepp_err
        ),
    );
    assert!(passed);
}

const CGLS_TOL: f64 = 1e-6;
const CGLS_MAX_ITERS: usize = 200;
const CGLS_LIMIT: Duration = Duration::from_secs(30);

#[test]
fn criterion_4_cgls_convergence() {
    let start = Instant::now();
    // 256 rays against 512 unknowns: the system is underdetermined, so a
    // consistent right-hand side can be matched exactly.
    let g = cone_geometry(8, 8, 3.0, 4, std::f64::consts::PI);
    let m = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x_true = Volume::for_geometry(&g);
    x_true.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    let b = ProjectionSet {
        images: apply_a(&x_true, &g, m).unwrap(),
        geom: g.clone(),
    };
    let res = cgls_with(
        &b,
        CglsOptions {
            samples_per_ray: m,
            iterations: CGLS_MAX_ITERS,
            tol: CGLS_TOL,
            clamp_non_negative: false,
        },
    )
    .unwrap();
    let rel = res.relative_residual();
    let monotone = res.residuals.windows(2).all(|w| w[1] <= w[0]);
    let elapsed = start.elapsed();
    let passed = rel < CGLS_TOL && res.residuals.len() <= CGLS_MAX_ITERS && monotone && elapsed < CGLS_LIMIT;
    report(
        4,
        "CGLS convergence",
        passed,
        elapsed,
        &format!(
            "relative residual {rel:.2e} after {} iterations (tol {CGLS_TOL:.0e}), non-increasing: {monotone}",
            res.residuals.len()
        ),
    );
    assert!(passed);
}

const FDK_GAIN_DB: f64 = 3.0;
const FDK_NOISE_LEVEL: f64 = 0.03;
const FDK_NOISE_SEED: u64 = 5;
/// Regression floors, a quarter decibel under the first run of this check
/// (26.35 dB dense, 23.23 dB sparse).
const FDK_DENSE_FLOOR_DB: f64 = 26.1;
const FDK_SPARSE_FLOOR_DB: f64 = 23.0;
const FDK_LIMIT: Duration = Duration::from_secs(300);

#[test]
fn criterion_5_fdk_sanity() {
    let start = Instant::now();
    let n = 64;
    let truth = shepp_logan_3d([n; 3], [1.0; 3]);
    let range = metrics::data_range(&truth.data);
    // Scores with and without the standard 3% acquisition noise. The skull
    // edge blur of the interpolating projector pair caps even the dense scan
    // near 26.5 dB, so the noise-free gap is reported but not judged.
    let score = |views: usize| {
        let g = cone_geometry(n, 128, 1.8, views, std::f64::consts::TAU);
        let clean = forward_project(&truth, &g, 2 * n).unwrap();
        let noisy = add_noise(&clean, FDK_NOISE_LEVEL, &mut ChaCha8Rng::seed_from_u64(FDK_NOISE_SEED));
        let psnr = |p: &ProjectionSet| {
            let vol = fdk(p, 2 * n).unwrap();
            metrics::psnr(&truth.data, &vol.data, range).unwrap()
        };
        (psnr(&noisy), psnr(&clean))
    };
    let (dense, dense_clean) = score(360);
    let (sparse, sparse_clean) = score(25);
    let elapsed = start.elapsed();
    let passed = dense - sparse >= FDK_GAIN_DB
        && dense > FDK_DENSE_FLOOR_DB
        && sparse > FDK_SPARSE_FLOOR_DB
        && elapsed < FDK_LIMIT;
    report(
        5,
        "FDK sanity",
        passed,
        elapsed,
        &format!(
            "3% noise: 360 views {dense:.2} dB (floor {FDK_DENSE_FLOOR_DB}), 25 views {sparse:.2} dB (floor {FDK_SPARSE_FLOOR_DB}), gain {:.2} dB (need {FDK_GAIN_DB}); noise-free gain {:.2} dB",
            dense - sparse,
            dense_clean - sparse_clean
        ),
    );
    assert!(passed);
}

const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const TREND_STEPS: usize = 3000;
const TREND_VIEWS: usize = 25;
const TREND_NOISE: f64 = 0.03;
const TREND_NOISE_SEED: u64 = 7;
const TREND_LOSS_WINDOW: usize = 100;
const TREND_MIN_WINS: usize = 2;
const TREND_LIMIT: Duration = Duration::from_secs(90 * 60);

fn trend_field() -> FieldConfig {
    FieldConfig {
        levels: 8,
        table_size_log2: 15,
        base_resolution: 4,
        per_level_scale: 1.5,
        hidden_layers: 2,
        hidden_width: 32,
        prior_width: 16,
        ..FieldConfig::default()
    }
}

/// Sparse-view study: the same field trained with and without the FDK prior
/// on 25 noisy half-turn views of a 32³ phantom.
#[test]
fn criterion_6_prior_trend() {
    let start = Instant::now();
    let n = 32;
    let geom = ScanGeometry {
        dso: 128.0,
        dsd: 256.0,
        det_rows: 48,
        det_cols: 48,
        det_spacing_u: 2.4,
        det_spacing_v: 2.4,
        vol_dims: [n; 3],
        vol_spacing: [1.0; 3],
        angles: (0..TREND_VIEWS).map(|i| i as f64 * std::f64::consts::PI / TREND_VIEWS as f64).collect(),
    };
    let truth = shepp_logan_3d([n; 3], [1.0; 3]);
    let range = metrics::data_range(&truth.data);
    let clean = forward_project(&truth, &geom, 4 * n).unwrap();
    let proj = add_noise(&clean, TREND_NOISE, &mut ChaCha8Rng::seed_from_u64(TREND_NOISE_SEED));
    let prior = fdk(&proj, 2 * n).unwrap();
    let field = trend_field();

    let run = |source: PriorSource, seed: u64| {
        let cfg = TrainConfig {
            batch_rays: 256,
            samples_per_ray: 48,
            lr_initial: 1e-3,
            lr_final: 1e-4,
            prior_source: source,
            prior_mode: PriorMode::Nearest,
            seed,
            ..TrainConfig::new(TREND_STEPS)
        };
        let out = train(&proj, Some(&prior), &field, &cfg, None).unwrap();
        let used = (source != PriorSource::None).then_some(&prior);
        let vol = extract_volume(&out.model, used, PriorMode::Nearest, &geom).unwrap();
        let psnr = metrics::psnr(&truth.data, &vol.data, range).unwrap();
        (psnr, out.log.smoothed_final_loss(TREND_LOSS_WINDOW).unwrap(), out.log.losses()[100])
    };

    let mut psnr_wins = 0;
    let mut loss_wins = 0;
    let mut lines = Vec::new();
    for seed in TREND_SEEDS {
        let (bp, bl, b100) = run(PriorSource::None, seed);
        let (rp, rl, r100) = run(PriorSource::Fdk, seed);
        psnr_wins += usize::from(rp >= bp);
        loss_wins += usize::from(rl <= bl);
        lines.push(format!(
            "seed {seed}: psnr {rp:.2} vs {bp:.2} dB, loss {rl:.4} vs {bl:.4} (step 100: {r100:.3} vs {b100:.3})"
        ));
    }
    let elapsed = start.elapsed();
    let passed = psnr_wins >= TREND_MIN_WINS && loss_wins >= TREND_MIN_WINS && elapsed < TREND_LIMIT;
    report(
        6,
        "prior trend",
        passed,
        elapsed,
        &format!(
            "FDK prior vs none, PSNR wins {psnr_wins}/3, loss wins {loss_wins}/3 (need {TREND_MIN_WINS}); {}",
            lines.join("; ")
        ),
    );
    assert!(passed);
}

const ABLATION_MAX_SPREAD_DB: f64 = 6.0;
const ABLATION_LIMIT: Duration = Duration::from_secs(4 * 3600);

const ABLATION_CONFIG: &str = r#"
[geometry]
dso = 128.0
dsd = 256.0
det_rows = 48
det_cols = 48
det_spacing_u = 2.4
det_spacing_v = 2.4
vol_dims = [32, 32, 32]
vol_spacing = [1.0, 1.0, 1.0]

[simulation]
views = 50
noise_level = 0.03
seed = 7
samples_per_ray = 128

[prior]
iterations = 30

[field]
levels = 8
table_size_log2 = 15
base_resolution = 4
per_level_scale = 1.5
hidden_layers = 2
hidden_width = 32
prior_width = 16

[training]
max_steps = 1000
batch_rays = 128
samples_per_ray = 32
seed = 0
"#;

#[test]
fn criterion_7_ablation_harness() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("ablation.toml");
    std::fs::write(&config, ABLATION_CONFIG).unwrap();
    for args in [&["phantom"][..], &["project"], &["ablate"]] {
        let out = Command::new(env!("CARGO_BIN_EXE_rhotomo"))
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(dir.path())
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut reader = csv::Reader::from_path(dir.path().join("ablation.csv")).unwrap();
    let mut cases = Vec::new();
    let mut psnrs = Vec::new();
    for record in reader.records() {
        let record = record.unwrap();
        cases.push(format!("{}/{}", &record[0], &record[1]));
        psnrs.push(record[2].parse::<f64>().unwrap());
    }
    let expected: Vec<String> = ["fdk", "cgls"]
        .iter()
        .flat_map(|p| ["nearest", "mean", "trilinear"].map(|m| format!("{p}/{m}")))
        .collect();
    let lo = psnrs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = psnrs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let elapsed = start.elapsed();
    let passed = cases == expected && hi - lo <= ABLATION_MAX_SPREAD_DB && elapsed < ABLATION_LIMIT;
    let table: Vec<String> = cases.iter().zip(&psnrs).map(|(c, p)| format!("{c} {p:.2}")).collect();
    report(
        7,
        "ablation harness",
        passed,
        elapsed,
        &format!(
            "{} rows, PSNR spread {:.2} dB (limit {ABLATION_MAX_SPREAD_DB}): {}",
            cases.len(),
            hi - lo,
            table.join(", ")
        ),
    );
    assert!(passed);
}

const PSNR_MSE_TOL: f64 = 1e-10;
const METRICS_LIMIT: Duration = Duration::from_secs(5);

#[test]
fn criterion_8_metrics_self_tests() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (w, h) = (48, 40);
    let a: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
    let ssim_self = metrics::ssim(&a, &a, w, h, 1.0).unwrap();

    let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
    let mut sq = 0.0;
    for i in 0..a.len() {
        sq += (a[i] - b[i]).powi(2);
    }
    let hand = 10.0 * (1.0 / (sq / a.len() as f64)).log10();
    let psnr_gap = (metrics::psnr(&a, &b, 1.0).unwrap() - hand).abs();

    let mut last = f64::INFINITY;
    let mut monotone = true;
    for level in [0.005, 0.01, 0.02, 0.05, 0.1] {
        let normal = Normal::new(0.0, level).unwrap();
        let noisy: Vec<f64> = a.iter().map(|x| x + normal.sample(&mut rng)).collect();
        let p = metrics::psnr(&a, &noisy, 1.0).unwrap();
        monotone &= p < last;
        last = p;
    }
    let elapsed = start.elapsed();
    let passed = ssim_self == 1.0 && psnr_gap < PSNR_MSE_TOL && monotone && elapsed < METRICS_LIMIT;
    report(
        8,
        "metrics self-tests",
        passed,
        elapsed,
        &format!("SSIM(a,a) = {ssim_self}, PSNR vs hand MSE gap {psnr_gap:.1e} (tol {PSNR_MSE_TOL:.0e}), monotone under noise: {monotone}"),
    );
    assert!(passed);
}

const PIPELINE_CONFIG: &str = r#"
[geometry]
dso = 64.0
dsd = 128.0
det_rows = 24
det_cols = 24
det_spacing_u = 2.4
det_spacing_v = 2.4
vol_dims = [16, 16, 16]
vol_spacing = [1.0, 1.0, 1.0]

[simulation]
views = 20
noise_level = 0.03
seed = 3
samples_per_ray = 64

[prior]
algorithm = "fdk"

[field]
levels = 4
table_size_log2 = 12
base_resolution = 4
per_level_scale = 1.5
prior_width = 4
hidden_layers = 1
hidden_width = 16

[training]
max_steps = 40
batch_rays = 128
samples_per_ray = 24
prior_source = "fdk"
eval_every = 20
seed = 5
"#;

fn run_pipeline(dir: &Path) {
    let config = dir.join("run.toml");
    std::fs::write(&config, PIPELINE_CONFIG).unwrap();
    for args in [
        &["phantom"][..],
        &["project"],
        &["recon", "--algorithm", "fdk"],
        &["recon", "--algorithm", "cgls"],
        &["train"],
        &["eval", "--slices"],
    ] {
        let status = Command::new(env!("CARGO_BIN_EXE_rhotomo"))
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(dir)
            .args(args)
            .output()
            .unwrap();
        assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
    }
}

fn list_files(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(list_files(&path).into_iter().map(|f| format!("{}/{f}", path.file_name().unwrap().to_string_lossy())));
        } else {
            out.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path());
    run_pipeline(b.path());
    let files = list_files(a.path());
    let same_listing = files == list_files(b.path());
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    let kinds = ["phantom.raw", "projections.raw", "recon_fdk.raw", "checkpoint.raw", "train_log.csv", "eval_views.csv", "field_volume.raw"];
    let complete = kinds.iter().all(|k| files.iter().any(|f| f == k));
    let elapsed = start.elapsed();
    let passed = same_listing && complete && differing.is_empty();
    report(
        9,
        "determinism",
        passed,
        elapsed,
        &format!("{} output files compared byte for byte, {} differ", files.len(), differing.len()),
    );
    assert!(passed, "{differing:?}");
}
