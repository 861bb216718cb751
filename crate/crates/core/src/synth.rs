//! Synthetic ground truth: scenes, exact flow, flow corruption and analytic
//! camera trajectories.
//!
//! A scene is a depth function over keyframe pixels (a gently sloped plane
//! carrying Gaussian bumps) plus a band-limited intensity texture. Flow is
//! rendered by back-projecting each keyframe pixel with its true depth,
//! moving it into the adjacent frame and projecting again. Occlusion between
//! bumps is not modeled.

use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::geometry::{Intrinsics, RelativePose};
use crate::rasterio::{FlowField, Raster, Trajectory};
use crate::{Error, Result};

/// Points closer than this to the image plane of the target frame are
/// invalid.
pub const Z_EPS: f64 = 1e-6;

const BORDER_EPS: f64 = 1e-9;

/// A Gaussian bump added to the base plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    /// Center in pixels.
    pub center: [f64; 2],
    /// Standard deviation in pixels.
    pub sigma: f64,
    /// Signed height in meters (negative bumps come toward the camera).
    pub amplitude: f64,
}

/// Knobs for [`SyntheticScene::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Plane depth at the image center, meters.
    pub base_depth: f64,
    /// Depth change across the full image width and height, meters.
    pub plane_slope: [f64; 2],
    pub bumps: usize,
    /// Largest absolute bump amplitude, meters.
    pub max_amplitude: f64,
    /// Bump sigma range as a fraction of the smaller image side.
    pub bump_sigma: [f64; 2],
    /// Number of sinusoids summed into the texture.
    pub texture_waves: usize,
    /// Texture wavelength range, pixels.
    pub texture_wavelength: [f64; 2],
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            base_depth: 2.0,
            plane_slope: [0.3, -0.2],
            bumps: 6,
            max_amplitude: 0.35,
            bump_sigma: [0.05, 0.15],
            texture_waves: 12,
            texture_wavelength: [12.0, 80.0],
            seed: 0,
        }
    }
}

/// Ground-truth scene seen from the keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    width: usize,
    height: usize,
    base_depth: f64,
    plane_slope: [f64; 2],
    bumps: Vec<Bump>,
    texture: Raster<1>,
    seed: u64,
}

impl SyntheticScene {
    /// Draws a scene from `params`. Identical seeds give identical scenes.
    pub fn generate(params: &SceneParams) -> Result<Self> {
        let SceneParams {
            width,
            height,
            base_depth,
            plane_slope,
            ..
        } = *params;
        if width < 2 || height < 2 {
            return Err(Error::input("scene must be at least 2x2 pixels"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let side = width.min(height) as f64;
        let bumps = (0..params.bumps)
            .map(|_| Bump {
                center: [
                    rng.random_range(0.0..width as f64),
                    rng.random_range(0.0..height as f64),
                ],
                sigma: side * rng.random_range(params.bump_sigma[0]..=params.bump_sigma[1]),
                amplitude: rng.random_range(-params.max_amplitude..=params.max_amplitude),
            })
            .collect();
        let texture = band_limited_texture(
            width,
            height,
            params.texture_waves,
            params.texture_wavelength,
            &mut rng,
        );
        let scene = Self {
            width,
            height,
            base_depth,
            plane_slope,
            bumps,
            texture,
            seed: params.seed,
        };
        let (lo, _) = scene.depth_bounds();
        if !(lo > 0.0) {
            return Err(Error::input(format!(
                "scene parameters allow non-positive depth (lower bound {lo})"
            )));
        }
        Ok(scene)
    }

    /// A fronto-parallel plane at `depth` with a flat mid-gray texture.
    pub fn plane(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            base_depth: depth,
            plane_slope: [0.0, 0.0],
            bumps: Vec::new(),
            texture: Raster::filled(width, height, 0.5),
            seed: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bumps(&self) -> &[Bump] {
        &self.bumps
    }

    pub fn texture(&self) -> &Raster<1> {
        &self.texture
    }

    /// Conservative `[d_min, d_max]` enclosing every depth of the scene.
    pub fn depth_bounds(&self) -> (f64, f64) {
        let slope = 0.5 * (self.plane_slope[0].abs() + self.plane_slope[1].abs());
        let down: f64 = self.bumps.iter().map(|b| b.amplitude.min(0.0)).sum();
        let up: f64 = self.bumps.iter().map(|b| b.amplitude.max(0.0)).sum();
        (self.base_depth - slope + down, self.base_depth + slope + up)
    }

    /// True depth (z) at pixel position `(x, y)`.
    pub fn depth_at(&self, x: f64, y: f64) -> f64 {
        let fx = x / (self.width - 1) as f64 - 0.5;
        let fy = y / (self.height - 1) as f64 - 0.5;
        let plane = self.base_depth + self.plane_slope[0] * fx + self.plane_slope[1] * fy;
        self.bumps.iter().fold(plane, |d, b| {
            let dx = x - b.center[0];
            let dy = y - b.center[1];
            d + b.amplitude * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp()
        })
    }

    pub fn depth_map(&self) -> Raster<1> {
        let data = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| self.depth_at(x as f64, y as f64) as f32)
            .collect();
        Raster::new(self.width, self.height, data).expect("dimensions match")
    }

    /// Exact flow of keyframe pixel `(x, y)` under `pose` (keyframe to frame
    /// `k`), or `None` when the point falls behind the camera or outside the
    /// image of frame `k`.
    pub fn flow_vector(&self, k: &Intrinsics, pose: &RelativePose, x: usize, y: usize) -> Option<Vector2<f64>> {
        let u = Vector2::new(x as f64, y as f64);
        let point = k.normalize(&u) * self.depth_at(u.x, u.y);
        let target = k.project(&pose.transform_point(&point), Z_EPS)?;
        // Border pixels can round-trip a hair outside the image.
        let inside = target.x >= -BORDER_EPS
            && target.y >= -BORDER_EPS
            && target.x <= (k.width() - 1) as f64 + BORDER_EPS
            && target.y <= (k.height() - 1) as f64 + BORDER_EPS;
        inside.then(|| target - u)
    }
}

fn band_limited_texture(
    width: usize,
    height: usize,
    waves: usize,
    wavelength: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Raster<1> {
    struct Wave {
        kx: f64,
        ky: f64,
        phase: f64,
        amp: f64,
    }
    let waves: Vec<Wave> = (0..waves.max(1))
        .map(|_| {
            let theta = rng.random_range(0.0..TAU);
            let lambda = rng.random_range(wavelength[0]..=wavelength[1]);
            Wave {
                kx: TAU / lambda * theta.cos(),
                ky: TAU / lambda * theta.sin(),
                phase: rng.random_range(0.0..TAU),
                amp: rng.random_range(0.2..1.0),
            }
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.amp).sum();
    let data = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x as f64, y as f64)))
        .map(|(x, y)| {
            let s: f64 = waves
                .iter()
                .map(|w| w.amp * (w.kx * x + w.ky * y + w.phase).sin())
                .sum();
            (0.5 + 0.5 * s / total).clamp(0.0, 1.0) as f32
        })
        .collect();
    Raster::new(width, height, data).expect("dimensions match")
}

/// Renders the exact flow from the keyframe to the frame at `pose`.
pub fn render_flow(scene: &SyntheticScene, k: &Intrinsics, pose: &RelativePose) -> Result<FlowField> {
    if scene.width != k.width() || scene.height != k.height() {
        return Err(Error::input(format!(
            "scene is {}x{} but intrinsics describe {}x{}",
            scene.width,
            scene.height,
            k.width(),
            k.height()
        )));
    }
    let w = scene.width;
    let mut data = vec![0f32; w * scene.height * 2];
    data.par_chunks_mut(2 * w).enumerate().for_each(|(y, row)| {
        for (x, px) in row.chunks_exact_mut(2).enumerate() {
            match scene.flow_vector(k, pose, x, y) {
                Some(f) => {
                    px[0] = f.x as f32;
                    px[1] = f.y as f32;
                }
                None => px.fill(crate::rasterio::INVALID_FLOW),
            }
        }
    });
    Ok(FlowField::new(Raster::new(w, scene.height, data)?))
}

/// Flow corruption: Gaussian jitter plus uniformly drawn outliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Per-component standard deviation, pixels.
    pub sigma_flow: f64,
    /// Probability that a valid pixel is replaced by an outlier.
    pub outlier_rate: f64,
    /// Outlier components are uniform in `[-outlier_span, outlier_span]`.
    pub outlier_span: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_flow: 0.0,
            outlier_rate: 0.0,
            outlier_span: 20.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_flow >= 0.0 && self.sigma_flow.is_finite()) {
            return Err(Error::input(format!("sigma_flow must be >= 0, got {}", self.sigma_flow)));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::input(format!(
                "outlier_rate must lie in [0, 1], got {}",
                self.outlier_rate
            )));
        }
        if !(self.outlier_span >= 0.0 && self.outlier_span.is_finite()) {
            return Err(Error::input(format!(
                "outlier_span must be >= 0, got {}",
                self.outlier_span
            )));
        }
        Ok(())
    }

    pub fn is_noise_free(&self) -> bool {
        self.sigma_flow == 0.0 && self.outlier_rate == 0.0
    }
}

/// Corrupts every valid flow vector according to `model`.
///
/// Pixels are visited in row-major order from a single seeded stream, so the
/// output depends only on the input and the seed. Invalid pixels are left
/// untouched.
pub fn corrupt_flow(flow: &FlowField, model: &NoiseModel) -> Result<FlowField> {
    model.validate()?;
    let mut out = flow.clone();
    if model.is_noise_free() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let normal = Normal::new(0.0, model.sigma_flow).map_err(|e| Error::input(e.to_string()))?;
    let span = model.outlier_span;
    for i in 0..flow.width() * flow.height() {
        let Some((u, v)) = flow.vector(i) else {
            continue;
        };
        let outlier = model.outlier_rate > 0.0 && rng.random::<f64>() < model.outlier_rate;
        if outlier {
            let ou = if span > 0.0 { rng.random_range(-span..=span) } else { 0.0 };
            let ov = if span > 0.0 { rng.random_range(-span..=span) } else { 0.0 };
            out.set(i, ou as f32, ov as f32);
        } else if model.sigma_flow > 0.0 {
            let du = normal.sample(&mut rng);
            let dv = normal.sample(&mut rng);
            out.set(i, (f64::from(u) + du) as f32, (f64::from(v) + dv) as f32);
        }
    }
    Ok(out)
}

/// Analytic camera paths. Motions are per frame.
#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryKind {
    /// Translation `velocity` and rotation vector `angular_velocity` (axis
    /// times angle) applied every frame.
    ConstantVelocity {
        velocity: Vector3<f64>,
        angular_velocity: Vector3<f64>,
    },
    /// Moves with `velocity` for `move_frames` frames, then holds the pose for
    /// `dwell_frames` frames, repeating. `phase` shifts the pattern.
    StopAndGo {
        velocity: Vector3<f64>,
        move_frames: usize,
        dwell_frames: usize,
        phase: usize,
    },
    /// Camera on a horizontal circle of `radius` around `center`, looking at
    /// the center, advancing `2π / steps` per frame.
    Orbit {
        center: Vector3<f64>,
        radius: f64,
        steps: usize,
    },
}

/// Camera-to-world trajectory of `n_frames` poses spaced `frame_interval`
/// seconds apart.
pub fn make_trajectory(kind: &TrajectoryKind, n_frames: usize, frame_interval: f64) -> Result<Trajectory> {
    if !(frame_interval > 0.0) {
        return Err(Error::input("frame_interval must be positive"));
    }
    let pose_at = |j: usize| -> RelativePose {
        match kind {
            TrajectoryKind::ConstantVelocity {
                velocity,
                angular_velocity,
            } => {
                let n = j as f64;
                RelativePose::from_axis_angle(
                    angular_velocity,
                    angular_velocity.norm() * n,
                    velocity * n,
                )
            }
            TrajectoryKind::StopAndGo {
                velocity,
                move_frames,
                dwell_frames,
                phase,
            } => {
                let period = move_frames + dwell_frames;
                let moves = if period == 0 {
                    0
                } else {
                    (0..j).filter(|t| (t + phase) % period < *move_frames).count()
                };
                RelativePose::from_translation(velocity * moves as f64)
            }
            TrajectoryKind::Orbit {
                center,
                radius,
                steps,
            } => {
                let angle = TAU * j as f64 / (*steps).max(1) as f64;
                let look = RelativePose::from_axis_angle(&Vector3::y(), angle, Vector3::zeros());
                let position = center + look.rotation() * Vector3::new(0.0, 0.0, -radius);
                RelativePose::from_axis_angle(&Vector3::y(), angle, position)
            }
        }
    };
    let entries = (0..n_frames)
        .map(|j| (j as f64 * frame_interval, pose_at(j)))
        .collect();
    Trajectory::new(entries)
}
