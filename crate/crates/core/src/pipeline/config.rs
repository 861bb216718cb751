//! Run configuration: `key = value` files, `TRIAD_*` environment variables
//! and command-line overrides, applied in that order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;

use crate::refine::RefineConfig;
use crate::select::SelectionPolicy;
use crate::synth::{NoiseModel, SceneParams, TrajectoryKind};
use crate::triangulate::TriangulationConfig;
use crate::{Error, Result};

/// Prefix of environment variables that override configuration keys.
pub const ENV_PREFIX: &str = "TRIAD_";

/// Environment variables with the prefix that are not configuration keys.
const ENV_RESERVED: [&str; 3] = ["ROOT", "CONFIG", "LOG"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MotionKind {
    #[default]
    ConstantVelocity,
    StopAndGo,
    Orbit,
}

impl FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant-velocity" => Ok(Self::ConstantVelocity),
            "stop-and-go" => Ok(Self::StopAndGo),
            "orbit" => Ok(Self::Orbit),
            _ => Err(Error::Config(format!("unknown motion {s:?}"))),
        }
    }
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ConstantVelocity => "constant-velocity",
            Self::StopAndGo => "stop-and-go",
            Self::Orbit => "orbit",
        })
    }
}

/// Parameters of a synthetic bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub scene: SceneParams,
    pub focal: f64,
    /// Sequence length.
    pub frames: usize,
    pub frame_interval: f64,
    pub motion: MotionKind,
    /// Lateral (x) speed, meters per frame.
    pub speed: f64,
    /// Yaw rate for constant-velocity motion, radians per frame.
    pub yaw_rate: f64,
    pub move_frames: usize,
    pub dwell_frames: usize,
    pub phase: usize,
    pub orbit_radius: f64,
    pub orbit_steps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: SceneParams::default(),
            focal: 300.0,
            frames: 21,
            frame_interval: 1.0 / 30.0,
            motion: MotionKind::ConstantVelocity,
            speed: 0.01,
            yaw_rate: 0.0,
            move_frames: 1,
            dwell_frames: 4,
            phase: 0,
            orbit_radius: 2.0,
            orbit_steps: 360,
        }
    }
}

impl SynthConfig {
    pub fn trajectory_kind(&self) -> TrajectoryKind {
        let velocity = Vector3::new(self.speed, 0.0, 0.0);
        match self.motion {
            MotionKind::ConstantVelocity => TrajectoryKind::ConstantVelocity {
                velocity,
                angular_velocity: Vector3::new(0.0, self.yaw_rate, 0.0),
            },
            MotionKind::StopAndGo => TrajectoryKind::StopAndGo {
                velocity,
                move_frames: self.move_frames,
                dwell_frames: self.dwell_frames,
                phase: self.phase,
            },
            MotionKind::Orbit => TrajectoryKind::Orbit {
                center: Vector3::new(0.0, 0.0, self.orbit_radius),
                radius: self.orbit_radius,
                steps: self.orbit_steps,
            },
        }
    }
}

/// Everything a subcommand needs. Paths are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub root: PathBuf,
    pub trajectory: PathBuf,
    pub intrinsics: PathBuf,
    pub flow_dir: PathBuf,
    pub image_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Where `refine` finds triangulated maps; defaults to `output_dir`.
    pub init_dir: Option<PathBuf>,
    /// Inputs of `eval`.
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub sigma: Option<PathBuf>,
    /// Keyframes to process; empty means the middle frame.
    pub keyframes: Vec<usize>,
    pub selection: SelectionPolicy,
    pub triangulation: TriangulationConfig,
    pub refine: RefineConfig,
    pub noise: NoiseModel,
    pub synth: SynthConfig,
    pub sweep_thresholds: Vec<f64>,
    /// Rayon worker count; 0 uses the rayon default.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("."),
            trajectory: "trajectory.txt".into(),
            intrinsics: "intrinsics.txt".into(),
            flow_dir: "flow".into(),
            image_dir: "image".into(),
            gt_dir: "depth_gt".into(),
            output_dir: "out".into(),
            init_dir: None,
            pred: None,
            gt: None,
            sigma: None,
            keyframes: Vec::new(),
            selection: SelectionPolicy::default(),
            triangulation: TriangulationConfig::default(),
            refine: RefineConfig::default(),
            noise: NoiseModel::default(),
            synth: SynthConfig::default(),
            sweep_thresholds: crate::metrics::SWEEP_THRESHOLDS.to_vec(),
            workers: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Every key accepted by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "trajectory", "intrinsics", "flow_dir", "image_dir", "gt_dir", "output_dir", "init_dir",
    "pred", "gt", "sigma", "keyframe", "mode", "n_frames", "fixed_step", "theta_min", "t_min",
    "anchor", "h_eps", "d_max", "iterations", "mu", "kappa", "omega", "tau", "w_max",
    "sigma_min", "beta", "sigma_cap", "confidence", "sigma_flow", "outlier_rate",
    "outlier_span", "noise_seed", "seed", "width", "height", "focal", "frames",
    "frame_interval", "motion", "speed", "yaw_rate", "move_frames", "dwell_frames", "phase",
    "orbit_radius", "orbit_steps", "base_depth", "plane_slope", "bumps", "max_amplitude", "sweep", "workers",
];

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = || Ok::<PathBuf, Error>(PathBuf::from(v));
        match key.trim() {
            "trajectory" => self.trajectory = path()?,
            "intrinsics" => self.intrinsics = path()?,
            "flow_dir" => self.flow_dir = path()?,
            "image_dir" => self.image_dir = path()?,
            "gt_dir" => self.gt_dir = path()?,
            "output_dir" => self.output_dir = path()?,
            "init_dir" => self.init_dir = Some(path()?),
            "pred" => self.pred = Some(path()?),
            "gt" => self.gt = Some(path()?),
            "sigma" => self.sigma = Some(path()?),
            "keyframe" => self.keyframes = parse_list(key, v)?,
            "mode" => self.selection.mode = v.parse()?,
            "n_frames" => self.selection.n_frames = parse(key, v)?,
            "fixed_step" => self.selection.fixed_step = parse(key, v)?,
            "theta_min" => self.selection.theta_min = parse(key, v)?,
            "t_min" => self.selection.t_min = parse(key, v)?,
            "anchor" => self.selection.anchor = v.parse()?,
            "h_eps" => self.triangulation.h_eps = parse(key, v)?,
            "d_max" => self.triangulation.d_max = parse(key, v)?,
            "iterations" => self.refine.iterations = parse(key, v)?,
            "mu" => self.refine.mu = parse(key, v)?,
            "kappa" => self.refine.kappa = parse(key, v)?,
            "omega" => self.refine.omega = parse(key, v)?,
            "tau" => self.refine.tau = parse(key, v)?,
            "w_max" => self.refine.w_max = parse(key, v)?,
            "sigma_min" => self.refine.sigma_min = parse(key, v)?,
            "beta" => self.refine.beta = parse(key, v)?,
            "sigma_cap" => self.refine.sigma_cap = parse(key, v)?,
            "confidence" => self.refine.confidence = v.parse()?,
            "sigma_flow" => self.noise.sigma_flow = parse(key, v)?,
            "outlier_rate" => self.noise.outlier_rate = parse(key, v)?,
            "outlier_span" => self.noise.outlier_span = parse(key, v)?,
            "noise_seed" => self.noise.seed = parse(key, v)?,
            "seed" => self.synth.scene.seed = parse(key, v)?,
            "width" => self.synth.scene.width = parse(key, v)?,
            "height" => self.synth.scene.height = parse(key, v)?,
            "focal" => self.synth.focal = parse(key, v)?,
            "frames" => self.synth.frames = parse(key, v)?,
            "frame_interval" => self.synth.frame_interval = parse(key, v)?,
            "motion" => self.synth.motion = v.parse()?,
            "speed" => self.synth.speed = parse(key, v)?,
            "yaw_rate" => self.synth.yaw_rate = parse(key, v)?,
            "move_frames" => self.synth.move_frames = parse(key, v)?,
            "dwell_frames" => self.synth.dwell_frames = parse(key, v)?,
            "phase" => self.synth.phase = parse(key, v)?,
            "orbit_radius" => self.synth.orbit_radius = parse(key, v)?,
            "orbit_steps" => self.synth.orbit_steps = parse(key, v)?,
            "base_depth" => self.synth.scene.base_depth = parse(key, v)?,
            "plane_slope" => {
                let xy: Vec<f64> = parse_list(key, v)?;
                self.synth.scene.plane_slope = xy
                    .try_into()
                    .map_err(|_| Error::Config("plane_slope takes two values".into()))?;
            }
            "bumps" => self.synth.scene.bumps = parse(key, v)?,
            "max_amplitude" => self.synth.scene.max_amplitude = parse(key, v)?,
            "sweep" => self.sweep_thresholds = parse_list(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `TRIAD_<KEY>` variables; `TRIAD_N_FRAMES=7` sets `n_frames`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let name = k.as_ref().strip_prefix(ENV_PREFIX)?;
                (!ENV_RESERVED.contains(&name)).then(|| (name.to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        pairs.sort();
        for (k, v) in pairs {
            self.set(&k, &v)
                .map_err(|e| Error::Config(format!("{ENV_PREFIX}{}: {e}", k.to_ascii_uppercase())))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.refine.validate()?;
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.triangulation.h_eps >= 0.0) || !(self.triangulation.d_max > 0.0) {
            return Err(Error::Config("h_eps must be >= 0 and d_max > 0".into()));
        }
        if self.sweep_thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("sweep thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Resolves `p` against the root.
    pub fn path(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn keyframes_for(&self, sequence_len: usize) -> Vec<usize> {
        if self.keyframes.is_empty() {
            vec![sequence_len / 2]
        } else {
            self.keyframes.clone()
        }
    }

    /// The effective configuration as a `key = value` document.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let p = |p: &Path| p.display().to_string();
        kv("trajectory", p(&self.trajectory));
        kv("intrinsics", p(&self.intrinsics));
        kv("flow_dir", p(&self.flow_dir));
        kv("image_dir", p(&self.image_dir));
        kv("gt_dir", p(&self.gt_dir));
        kv("output_dir", p(&self.output_dir));
        if !self.keyframes.is_empty() {
            kv("keyframe", join(&self.keyframes));
        }
        kv("mode", self.selection.mode.to_string());
        kv("n_frames", self.selection.n_frames.to_string());
        kv("fixed_step", self.selection.fixed_step.to_string());
        kv("theta_min", self.selection.theta_min.to_string());
        kv("t_min", self.selection.t_min.to_string());
        kv("anchor", self.selection.anchor.to_string());
        kv("h_eps", self.triangulation.h_eps.to_string());
        kv("d_max", self.triangulation.d_max.to_string());
        kv("iterations", self.refine.iterations.to_string());
        kv("mu", self.refine.mu.to_string());
        kv("kappa", self.refine.kappa.to_string());
        kv("omega", self.refine.omega.to_string());
        kv("tau", self.refine.tau.to_string());
        kv("w_max", self.refine.w_max.to_string());
        kv("sigma_min", self.refine.sigma_min.to_string());
        kv("beta", self.refine.beta.to_string());
        kv("sigma_cap", self.refine.sigma_cap.to_string());
        kv("confidence", self.refine.confidence.to_string());
        kv("sigma_flow", self.noise.sigma_flow.to_string());
        kv("outlier_rate", self.noise.outlier_rate.to_string());
        kv("outlier_span", self.noise.outlier_span.to_string());
        kv("noise_seed", self.noise.seed.to_string());
        kv("seed", self.synth.scene.seed.to_string());
        kv("width", self.synth.scene.width.to_string());
        kv("height", self.synth.scene.height.to_string());
        kv("focal", self.synth.focal.to_string());
        kv("frames", self.synth.frames.to_string());
        kv("motion", self.synth.motion.to_string());
        kv("speed", self.synth.speed.to_string());
        kv("base_depth", self.synth.scene.base_depth.to_string());
        kv("plane_slope", join(&self.synth.scene.plane_slope));
        kv("sweep", join(&self.sweep_thresholds));
        s
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
