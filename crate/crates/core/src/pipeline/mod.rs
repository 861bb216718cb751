//! Subcommand drivers. Each `cmd_*` function reads its inputs below the
//! configured root, writes its outputs there and returns a summary.
//!
//! Bundle layout (all names configurable):
//!
//! ```text
//! trajectory.txt  intrinsics.txt  manifest.txt
//! flow/KKKK-JJJJ.flo        flow_exact/KKKK-JJJJ.flo
//! depth_gt/KKKK.pfm         image/KKKK.pgm
//! ```

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::{MotionKind, RunConfig, SynthConfig, ENV_PREFIX, KEYS};

use crate::geometry::Intrinsics;
use crate::metrics::{self, Correlation, MetricReport, SweepRow};
use crate::rasterio::{self, FlowField, PgmDepth, Raster, Trajectory};
use crate::refine::{self, ConfidenceInputs, RefineConfig, RefineResult};
use crate::select::{self, Selection};
use crate::synth::{self, NoiseModel, SyntheticScene};
use crate::triangulate::{self, InitialDepth, TriangulationInput};
use crate::{Error, Result};

/// Iteration counts evaluated by [`cmd_ablate`].
pub const ABLATION_ITERATIONS: [usize; 6] = [0, 1, 3, 5, 7, 9];

/// Share of pixels kept when reporting the lowest-σ retention metrics.
pub const RETAIN_FRACTION: f64 = 0.9;

pub fn flow_name(key: usize, k: usize) -> String {
    format!("{key:04}-{k:04}.flo")
}

pub fn frame_name(key: usize, ext: &str) -> String {
    format!("{key:04}.{ext}")
}

pub fn keyframe_dir(key: usize) -> String {
    format!("kf{key:04}")
}

/// Noise seed used for the flow from `key` to `k` (splitmix64 of the base
/// seed and the frame pair).
pub fn flow_seed(base: u64, key: usize, k: usize) -> u64 {
    let mut z = base ^ ((key as u64) << 32 | k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `f` on a rayon pool with `workers` threads (0: rayon's default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

// ---------------------------------------------------------------------------
// synth

/// One written file of a synthetic bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    /// Path relative to the root.
    pub path: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub keyframes: Vec<usize>,
    pub artifacts: Vec<Artifact>,
}

impl SynthSummary {
    pub fn manifest(&self) -> String {
        let mut s = String::from("# path seed\n");
        let _ = writeln!(
            s,
            "# keyframes {}",
            self.keyframes.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        );
        for a in &self.artifacts {
            let _ = writeln!(s, "{} {}", a.path.display(), a.seed);
        }
        s
    }
}

/// In-memory synthetic keyframe: ground truth plus exact and corrupted flow
/// to every other frame of the trajectory.
#[derive(Debug, Clone)]
pub struct SynthKeyframe {
    pub key: usize,
    pub scene: SyntheticScene,
    /// `(frame, exact flow, corrupted flow, noise seed)`.
    pub flows: Vec<(usize, FlowField, FlowField, u64)>,
}

pub fn synth_intrinsics(cfg: &SynthConfig) -> Result<Intrinsics> {
    Intrinsics::centered(cfg.focal, cfg.scene.width, cfg.scene.height)
}

pub fn synth_trajectory(cfg: &SynthConfig) -> Result<Trajectory> {
    synth::make_trajectory(&cfg.trajectory_kind(), cfg.frames, cfg.frame_interval)
}

/// Renders one keyframe of a synthetic bundle without touching the disk.
pub fn synth_keyframe(
    cfg: &SynthConfig,
    noise: &NoiseModel,
    intrinsics: &Intrinsics,
    traj: &Trajectory,
    key: usize,
) -> Result<SynthKeyframe> {
    if key >= traj.len() {
        return Err(Error::Config(format!("keyframe {key} outside a {}-frame sequence", traj.len())));
    }
    let scene = SyntheticScene::generate(&cfg.scene)?;
    let mut flows = Vec::with_capacity(traj.len().saturating_sub(1));
    for k in (0..traj.len()).filter(|&k| k != key) {
        let exact = synth::render_flow(&scene, intrinsics, &traj.relative_pose(key, k))?;
        let seed = flow_seed(noise.seed, key, k);
        let noisy = synth::corrupt_flow(&exact, &NoiseModel { seed, ..*noise })?;
        flows.push((k, exact, noisy, seed));
    }
    Ok(SynthKeyframe { key, scene, flows })
}

/// Writes a synthetic bundle and its manifest.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    let s = &cfg.synth;
    if s.frames < 2 {
        return Err(Error::Config("a synthetic sequence needs at least 2 frames".into()));
    }
    let intrinsics = synth_intrinsics(s).map_err(|e| Error::Config(e.to_string()))?;
    let traj = synth_trajectory(s)?;
    let keyframes = cfg.keyframes_for(traj.len());
    let exact_dir = PathBuf::from(format!("{}_exact", cfg.flow_dir.display()));
    for d in [&cfg.flow_dir, &exact_dir, &cfg.gt_dir, &cfg.image_dir] {
        create_dir(&cfg.path(d))?;
    }
    let seed = s.scene.seed;
    let mut artifacts = Vec::new();
    rasterio::write_trajectory(&traj, cfg.path(&cfg.trajectory))?;
    artifacts.push(Artifact { path: cfg.trajectory.clone(), seed });
    rasterio::write_intrinsics(&intrinsics, cfg.path(&cfg.intrinsics))?;
    artifacts.push(Artifact { path: cfg.intrinsics.clone(), seed });

    let rendered = with_workers(cfg.workers, || {
        keyframes
            .iter()
            .map(|&key| synth_keyframe(s, &cfg.noise, &intrinsics, &traj, key))
            .collect::<Result<Vec<_>>>()
    })??;
    for kf in &rendered {
        let key = kf.key;
        let gt = cfg.gt_dir.join(frame_name(key, "pfm"));
        rasterio::write_pfm(&kf.scene.depth_map(), cfg.path(&gt))?;
        artifacts.push(Artifact { path: gt, seed });
        let image = cfg.image_dir.join(frame_name(key, "pgm"));
        rasterio::write_pgm(kf.scene.texture(), PgmDepth::Sixteen, cfg.path(&image))?;
        artifacts.push(Artifact { path: image, seed });
        for (k, exact, noisy, flow_seed) in &kf.flows {
            let p = exact_dir.join(flow_name(key, *k));
            rasterio::write_flow(exact, cfg.path(&p))?;
            artifacts.push(Artifact { path: p, seed });
            let p = cfg.flow_dir.join(flow_name(key, *k));
            rasterio::write_flow(noisy, cfg.path(&p))?;
            artifacts.push(Artifact { path: p, seed: *flow_seed });
        }
    }
    let summary = SynthSummary { keyframes, artifacts };
    write_text(&cfg.root.join("manifest.txt"), &summary.manifest())?;
    log::info!("synth: wrote {} artifacts", summary.artifacts.len());
    Ok(summary)
}

// ---------------------------------------------------------------------------
// select / triangulate / refine

pub fn cmd_select(cfg: &RunConfig) -> Result<Vec<(usize, Selection)>> {
    cfg.validate()?;
    let traj = rasterio::read_trajectory(cfg.path(&cfg.trajectory))?;
    cfg.keyframes_for(traj.len())
        .into_iter()
        .map(|key| Ok((key, select::select_frames(&traj, key, &cfg.selection)?)))
        .collect()
}

/// Reads the selected flows and relative poses for one keyframe.
pub fn load_input(
    cfg: &RunConfig,
    intrinsics: Intrinsics,
    traj: &Trajectory,
    key: usize,
    selection: &Selection,
) -> Result<TriangulationInput> {
    let frames = selection
        .indices
        .iter()
        .map(|&k| {
            let flow = rasterio::read_flow(cfg.path(&cfg.flow_dir.join(flow_name(key, k))))?;
            Ok((flow, traj.relative_pose(key, k)))
        })
        .collect::<Result<Vec<_>>>()?;
    TriangulationInput::new(intrinsics, frames)
}

/// Triangulation of one keyframe with its frame selection.
#[derive(Debug, Clone)]
pub struct Triangulated {
    pub key: usize,
    pub selection: Selection,
    pub init: InitialDepth,
    pub warnings: Vec<String>,
}

fn triangulate_keyframe(
    cfg: &RunConfig,
    intrinsics: Intrinsics,
    traj: &Trajectory,
    key: usize,
) -> Result<Triangulated> {
    let selection = select::select_frames(traj, key, &cfg.selection)?;
    let mut warnings = Vec::new();
    if selection.indices.is_empty() {
        return Err(Error::input(format!("keyframe {key}: no adjacent frames selected")));
    }
    if selection.shortfall {
        warnings.push(format!(
            "keyframe {key}: only {} of {} adjacent frames available",
            selection.indices.len(),
            cfg.selection.n_frames - 1
        ));
    }
    let input = load_input(cfg, intrinsics, traj, key, &selection)?;
    let init = triangulate::triangulate_map(&input, &cfg.triangulation);
    if init.valid_count() == 0 {
        return Err(Error::Numerical(format!("keyframe {key}: every pixel is degenerate")));
    }
    Ok(Triangulated {
        key,
        selection,
        init,
        warnings,
    })
}

fn load_bundle(cfg: &RunConfig) -> Result<(Intrinsics, Trajectory)> {
    let intrinsics = rasterio::read_intrinsics(cfg.path(&cfg.intrinsics))?;
    let traj = rasterio::read_trajectory(cfg.path(&cfg.trajectory))?;
    Ok((intrinsics, traj))
}

fn write_initial(dir: &Path, init: &InitialDepth) -> Result<()> {
    rasterio::write_pfm(&init.depth, dir.join("depth_init.pfm"))?;
    rasterio::write_pfm(&init.conf_h, dir.join("conf_h.pfm"))?;
    rasterio::write_pfm(&init.conf_r, dir.join("conf_r.pfm"))
}

pub fn cmd_triangulate(cfg: &RunConfig) -> Result<Vec<Triangulated>> {
    cfg.validate()?;
    let (intrinsics, traj) = load_bundle(cfg)?;
    let keys = cfg.keyframes_for(traj.len());
    with_workers(cfg.workers, || {
        keys.iter()
            .map(|&key| {
                let t = triangulate_keyframe(cfg, intrinsics, &traj, key)?;
                let dir = cfg.path(&cfg.output_dir.join(keyframe_dir(key)));
                create_dir(&dir)?;
                write_initial(&dir, &t.init)?;
                Ok(t)
            })
            .collect()
    })?
}

/// Keyframe intensity, or a constant image (with a warning) when missing.
fn load_intensity(cfg: &RunConfig, key: usize, width: usize, height: usize, warnings: &mut Vec<String>) -> Result<Raster<1>> {
    let path = cfg.path(&cfg.image_dir.join(frame_name(key, "pgm")));
    if !path.exists() {
        warnings.push(format!("keyframe {key}: no image at {}, smoothing is unweighted", path.display()));
        return Ok(Raster::filled(width, height, 0.0));
    }
    let img = rasterio::read_image(&path)?;
    if img.width() != width || img.height() != height {
        return Err(Error::input(format!(
            "{}: image is {}x{}, depth is {width}x{height}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

fn load_gt(cfg: &RunConfig, key: usize, width: usize, height: usize) -> Result<Option<Vec<f64>>> {
    let path = cfg.path(&cfg.gt_dir.join(frame_name(key, "pfm")));
    if !path.exists() {
        return Ok(None);
    }
    let gt = rasterio::read_pfm_gray(&path)?;
    if gt.width() != width || gt.height() != height {
        return Err(Error::input(format!("{}: ground truth size mismatch", path.display())));
    }
    Ok(Some(gt.to_f64()))
}

fn refine_with(init: &InitialDepth, intensity: &Raster<1>, cfg: &RefineConfig) -> Result<RefineResult> {
    let weights = refine::build_weights(init, intensity, cfg)?;
    refine::refine(init, &weights, cfg)
}

fn write_refined(dir: &Path, r: &RefineResult) -> Result<()> {
    rasterio::write_pfm(&r.refined_raster(), dir.join("depth_refined.pfm"))?;
    rasterio::write_pfm(&r.uncertainty_raster(), dir.join("sigma.pfm"))?;
    write_text(&dir.join("objective.txt"), &r.objective_log())
}

pub fn cmd_refine(cfg: &RunConfig) -> Result<Vec<(usize, RefineResult)>> {
    cfg.validate()?;
    let traj = rasterio::read_trajectory(cfg.path(&cfg.trajectory))?;
    let keys = cfg.keyframes_for(traj.len());
    let init_root = cfg.init_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    with_workers(cfg.workers, || {
        keys.iter()
            .map(|&key| {
                let src = cfg.path(&init_root.join(keyframe_dir(key)));
                let init = InitialDepth::from_channels(
                    rasterio::read_pfm_gray(src.join("depth_init.pfm"))?,
                    rasterio::read_pfm_gray(src.join("conf_h.pfm"))?,
                    rasterio::read_pfm_gray(src.join("conf_r.pfm"))?,
                )?;
                let mut warnings = Vec::new();
                let intensity = load_intensity(cfg, key, init.width(), init.height(), &mut warnings)?;
                for w in &warnings {
                    log::warn!("{w}");
                }
                let r = refine_with(&init, &intensity, &cfg.refine)?;
                let dir = cfg.path(&cfg.output_dir.join(keyframe_dir(key)));
                create_dir(&dir)?;
                write_refined(&dir, &r)?;
                Ok((key, r))
            })
            .collect()
    })?
}

// ---------------------------------------------------------------------------
// estimate

/// Ground-truth comparison of one keyframe. Initial and refined maps are
/// scored on the same pixels: those with a valid triangulated depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub initial: MetricReport,
    pub refined: MetricReport,
    pub sweep: Vec<SweepRow>,
    pub retained: SweepRow,
    pub correlation: Option<Correlation>,
}

#[derive(Debug, Clone)]
pub struct KeyframeEstimate {
    pub key: usize,
    pub selection: Selection,
    pub init: InitialDepth,
    pub refined: RefineResult,
    pub evaluation: Option<Evaluation>,
    pub warnings: Vec<String>,
}

impl KeyframeEstimate {
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "keyframe {}", self.key);
        let _ = writeln!(
            s,
            "frames {}",
            self.selection.indices.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
        );
        let n = self.init.depth.pixel_count();
        let _ = writeln!(s, "valid {} of {}", self.init.valid_count(), n);
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        if let Some(e) = &self.evaluation {
            let _ = write!(s, "[initial]\n{}", e.initial);
            let _ = write!(s, "[refined]\n{}", e.refined);
            let _ = writeln!(s, "[uncertainty]");
            match &e.correlation {
                Some(c) if c.defined => {
                    let _ = writeln!(s, "spearman  {:.6} ({} pixels)", c.rho, c.samples);
                }
                _ => {
                    let _ = writeln!(s, "spearman  undefined");
                }
            }
            if let Some(r) = &e.retained.report {
                let _ = writeln!(
                    s,
                    "retain    {:.1}% rmse {:.6} (sigma < {:.6})",
                    e.retained.coverage_percent, r.rmse, e.retained.sigma_threshold
                );
            }
        }
        s
    }

    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "keyframe={}", self.key);
        let _ = writeln!(
            s,
            "frames={}",
            self.selection.indices.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(s, "shortfall={}", self.selection.shortfall);
        let _ = writeln!(s, "valid={}", self.init.valid_count());
        let _ = writeln!(s, "warnings={}", self.warnings.len());
        if let Some(e) = &self.evaluation {
            s.push_str(&e.initial.to_key_value("initial"));
            s.push_str(&e.refined.to_key_value("refined"));
            if let Some(c) = &e.correlation {
                let _ = writeln!(s, "spearman.rho={}", c.rho);
                let _ = writeln!(s, "spearman.defined={}", c.defined);
            }
            let _ = writeln!(s, "retain.coverage={}", e.retained.coverage_percent);
            if let Some(r) = &e.retained.report {
                s.push_str(&r.to_key_value("retain"));
            }
        }
        s
    }
}

/// Scores initial and refined depth against ground truth.
pub fn evaluate_keyframe(
    init: &InitialDepth,
    refined: &RefineResult,
    gt: &[f64],
    thresholds: &[f64],
) -> Result<Evaluation> {
    let mask = init.valid_mask();
    let d0 = init.depth.to_f64();
    let d = refined.refined();
    let initial = metrics::evaluate(&d0, gt, Some(&mask))?;
    let refined_report = metrics::evaluate(d, gt, Some(&mask))?;
    // The sweep and correlation use the same pixels as the reports.
    let masked = |v: &[f64]| -> Vec<f64> {
        v.iter().zip(&mask).map(|(&x, &m)| if m { x } else { f64::NAN }).collect()
    };
    let pred = masked(d);
    let sweep = metrics::uncertainty_sweep(&pred, &refined.uncertainty, gt, thresholds)?;
    let retained = metrics::retain_lowest_sigma(&pred, &refined.uncertainty, gt, RETAIN_FRACTION)?;
    let correlation = match metrics::error_uncertainty_correlation(&pred, &refined.uncertainty, gt, None) {
        Ok(c) => Some(c),
        Err(Error::Input(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        initial,
        refined: refined_report,
        sweep,
        retained,
        correlation,
    })
}

/// Full pipeline for one keyframe, reading from and writing to disk.
pub fn estimate_keyframe(cfg: &RunConfig, intrinsics: Intrinsics, traj: &Trajectory, key: usize) -> Result<KeyframeEstimate> {
    let Triangulated {
        selection,
        init,
        mut warnings,
        ..
    } = triangulate_keyframe(cfg, intrinsics, traj, key)?;
    let (w, h) = (init.width(), init.height());
    let intensity = load_intensity(cfg, key, w, h, &mut warnings)?;
    let refined = refine_with(&init, &intensity, &cfg.refine)?;
    let gt = load_gt(cfg, key, w, h)?;
    if gt.is_none() {
        warnings.push(format!("keyframe {key}: no ground truth, metrics skipped"));
    }
    let evaluation = gt
        .map(|gt| evaluate_keyframe(&init, &refined, &gt, &cfg.sweep_thresholds))
        .transpose()?;
    let est = KeyframeEstimate {
        key,
        selection,
        init,
        refined,
        evaluation,
        warnings,
    };
    let dir = cfg.path(&cfg.output_dir.join(keyframe_dir(key)));
    create_dir(&dir)?;
    write_initial(&dir, &est.init)?;
    write_refined(&dir, &est.refined)?;
    write_text(&dir.join("report.txt"), &est.report())?;
    write_text(&dir.join("metrics.kv"), &est.key_values())?;
    if let Some(e) = &est.evaluation {
        write_text(&dir.join("sweep.csv"), &metrics::sweep_csv(&e.sweep))?;
    }
    for w in &est.warnings {
        log::warn!("{w}");
    }
    Ok(est)
}

/// Runs the pipeline over every configured keyframe, in parallel across
/// keyframes on a pool of `cfg.workers` threads.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<Vec<KeyframeEstimate>> {
    cfg.validate()?;
    let (intrinsics, traj) = load_bundle(cfg)?;
    let keys = cfg.keyframes_for(traj.len());
    if let Some(&k) = keys.iter().find(|&&k| k >= traj.len()) {
        return Err(Error::Config(format!("keyframe {k} outside a {}-frame trajectory", traj.len())));
    }
    create_dir(&cfg.path(&cfg.output_dir))?;
    write_text(&cfg.path(&cfg.output_dir.join("config.txt")), &cfg.to_text())?;
    with_workers(cfg.workers, || {
        keys.par_iter()
            .map(|&key| estimate_keyframe(cfg, intrinsics, &traj, key))
            .collect::<Result<Vec<_>>>()
    })?
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// `initial`, `iterations` or `confidence`.
    pub group: &'static str,
    pub confidence: ConfidenceInputs,
    pub iterations: usize,
    pub report: MetricReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("group,confidence,iterations");
    if let Some(r) = rows.first() {
        for (k, _) in r.report.fields() {
            let _ = write!(s, ",{k}");
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.group, r.confidence, r.iterations);
        for (_, v) in r.report.fields() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Refinement ablations on the first configured keyframe: iteration count
/// with full confidences, then each confidence variant at the configured
/// iteration count.
pub fn ablate(init: &InitialDepth, intensity: &Raster<1>, gt: &[f64], base: &RefineConfig) -> Result<Vec<AblationRow>> {
    let mask = init.valid_mask();
    let mut rows = vec![AblationRow {
        group: "initial",
        confidence: base.confidence,
        iterations: 0,
        report: metrics::evaluate(&init.depth.to_f64(), gt, Some(&mask))?,
    }];
    let full = RefineConfig {
        confidence: ConfidenceInputs::Full,
        iterations: *ABLATION_ITERATIONS.iter().max().expect("non-empty"),
        ..*base
    };
    // One long run yields every shorter iteration count.
    let long = refine_with(init, intensity, &full)?;
    for k in ABLATION_ITERATIONS {
        rows.push(AblationRow {
            group: "iterations",
            confidence: ConfidenceInputs::Full,
            iterations: k,
            report: metrics::evaluate(&long.iterates[k], gt, Some(&mask))?,
        });
    }
    for variant in ConfidenceInputs::ALL {
        let cfg = RefineConfig {
            confidence: variant,
            ..*base
        };
        let r = refine_with(init, intensity, &cfg)?;
        rows.push(AblationRow {
            group: "confidence",
            confidence: variant,
            iterations: cfg.iterations,
            report: metrics::evaluate(r.refined(), gt, Some(&mask))?,
        });
    }
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let (intrinsics, traj) = load_bundle(cfg)?;
    let key = cfg.keyframes_for(traj.len())[0];
    let rows = with_workers(cfg.workers, || -> Result<Vec<AblationRow>> {
        let t = triangulate_keyframe(cfg, intrinsics, &traj, key)?;
        let (w, h) = (t.init.width(), t.init.height());
        let mut warnings = t.warnings;
        let intensity = load_intensity(cfg, key, w, h, &mut warnings)?;
        let gt = load_gt(cfg, key, w, h)?
            .ok_or_else(|| Error::input(format!("keyframe {key}: ablation needs ground truth")))?;
        ablate(&t.init, &intensity, &gt, &cfg.refine)
    })??;
    let dir = cfg.path(&cfg.output_dir);
    create_dir(&dir)?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub report: MetricReport,
    pub sweep: Option<Vec<SweepRow>>,
    pub correlation: Option<Correlation>,
}

/// Scores an arbitrary prediction against ground truth, optionally with a σ
/// map.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    let need = |p: &Option<PathBuf>, key: &str| {
        p.as_ref()
            .map(|p| cfg.path(p))
            .ok_or_else(|| Error::Config(format!("eval needs `{key}`")))
    };
    let pred = rasterio::read_pfm_gray(need(&cfg.pred, "pred")?)?;
    let gt = rasterio::read_pfm_gray(need(&cfg.gt, "gt")?)?;
    if !pred.same_size(&gt) {
        return Err(Error::input("prediction and ground truth differ in size"));
    }
    let (pred, gt) = (pred.to_f64(), gt.to_f64());
    let report = metrics::evaluate(&pred, &gt, None)?;
    let (mut sweep, mut correlation) = (None, None);
    if let Some(p) = &cfg.sigma {
        let sigma = rasterio::read_pfm_gray(cfg.path(p))?.to_f64();
        if sigma.len() != pred.len() {
            return Err(Error::input("sigma and prediction differ in size"));
        }
        sweep = Some(metrics::uncertainty_sweep(&pred, &sigma, &gt, &cfg.sweep_thresholds)?);
        correlation = metrics::error_uncertainty_correlation(&pred, &sigma, &gt, None).ok();
    }
    let dir = cfg.path(&cfg.output_dir);
    create_dir(&dir)?;
    let mut kv = report.to_key_value("eval");
    if let Some(c) = &correlation {
        let _ = writeln!(kv, "spearman.rho={}", c.rho);
    }
    write_text(&dir.join("eval.kv"), &kv)?;
    write_text(&dir.join("eval.txt"), &report.to_string())?;
    if let Some(rows) = &sweep {
        write_text(&dir.join("sweep.csv"), &metrics::sweep_csv(rows))?;
    }
    Ok(EvalSummary {
        report,
        sweep,
        correlation,
    })
}
