//! Per-pixel depth from flow correspondences by linear least squares.
//!
//! For a keyframe ray `m = [x', y', 1]` and observations `(ŝ_k, R_k, p_k)`
//! (unit ray in frame `k`, keyframe-to-frame-`k` pose), the depth minimizes
//!
//! ```text
//! cost(d) = Σ_k ‖ŝ_k × (R_k m d + p_k)‖² = H d² + 2 β d + γ
//! ```
//!
//! with `a_k = ŝ_k × R_k m`, `b_k = ŝ_k × p_k`, `H = Σ a_kᵀa_k` and
//! `β = Σ a_kᵀb_k`. The minimizer is `d̄ = -β / H`; `√H` and the residual
//! norm `√cost(d̄)` are the two confidence channels handed to refinement.
//!
//! [`triangulate_map`] stores both channels in pixel units (scaled by the
//! focal length `f = √(fx·fy)`), so `conf_h²` is the inverse variance of `d̄`
//! under one pixel of correspondence noise and `conf_r` is comparable to
//! flow error in pixels.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::geometry::{Intrinsics, RelativePose};
use crate::rasterio::{FlowField, Raster};
use crate::{Error, Result};

/// Thresholds for accepting a triangulated depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulationConfig {
    /// Smallest Hessian treated as informative.
    pub h_eps: f64,
    /// Largest accepted depth, meters.
    pub d_max: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            h_eps: 1e-12,
            d_max: 100.0,
        }
    }
}

/// Why a pixel could not be triangulated.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum Degenerate {
    #[error("no observations")]
    NoObservations,
    #[error("Hessian {0:e} below threshold")]
    LowHessian(f64),
    #[error("depth {0} is not positive")]
    Cheirality(f64),
    #[error("depth {0} exceeds the maximum")]
    TooFar(f64),
}

/// One correspondence: the unit viewing ray in frame `k` and the pose mapping
/// keyframe coordinates into frame `k`.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub ray: Vector3<f64>,
    pub pose: &'a RelativePose,
}

/// Least-squares solution for one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelEstimate {
    pub depth: f64,
    pub hessian: f64,
    pub residual: f64,
}

/// Triangulates one keyframe ray. `m` is in normalized coordinates; each
/// observation ray is normalized to unit length here.
pub fn triangulate_pixel(
    m: &Vector3<f64>,
    obs: &[Observation<'_>],
    cfg: &TriangulationConfig,
) -> Result<PixelEstimate, Degenerate> {
    if obs.is_empty() {
        return Err(Degenerate::NoObservations);
    }
    let terms = obs.iter().map(|o| {
        let s = o.ray.normalize();
        (s.cross(&(o.pose.rotation() * m)), s.cross(o.pose.translation()))
    });
    let (mut h, mut beta) = (0.0, 0.0);
    for (a, b) in terms.clone() {
        h += a.dot(&a);
        beta += a.dot(&b);
    }
    if !(h >= cfg.h_eps) {
        return Err(Degenerate::LowHessian(h));
    }
    let depth = -beta / h;
    if !(depth > 0.0) {
        return Err(Degenerate::Cheirality(depth));
    }
    if depth > cfg.d_max {
        return Err(Degenerate::TooFar(depth));
    }
    // Evaluated directly rather than as γ - β²/H to avoid cancellation.
    let cost: f64 = terms.map(|(a, b)| (a * depth + b).norm_squared()).sum();
    Ok(PixelEstimate {
        depth,
        hessian: h,
        residual: cost.max(0.0).sqrt(),
    })
}

/// Keyframe intrinsics plus the flow and pose of every adjacent frame.
#[derive(Debug, Clone)]
pub struct TriangulationInput {
    pub intrinsics: Intrinsics,
    pub frames: Vec<(FlowField, RelativePose)>,
}

impl TriangulationInput {
    pub fn new(intrinsics: Intrinsics, frames: Vec<(FlowField, RelativePose)>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::input("triangulation needs at least one adjacent frame"));
        }
        for (j, (flow, _)) in frames.iter().enumerate() {
            if flow.width() != intrinsics.width() || flow.height() != intrinsics.height() {
                return Err(Error::input(format!(
                    "flow {j} is {}x{} but the keyframe is {}x{}",
                    flow.width(),
                    flow.height(),
                    intrinsics.width(),
                    intrinsics.height()
                )));
            }
        }
        Ok(Self { intrinsics, frames })
    }
}

/// Triangulated depth with its confidence channels. Invalid pixels are NaN
/// in every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDepth {
    pub depth: Raster<1>,
    /// `√H` per pixel.
    pub conf_h: Raster<1>,
    /// Residual norm per pixel.
    pub conf_r: Raster<1>,
}

impl InitialDepth {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.depth.data()[i].is_finite()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.depth.data().iter().map(|d| d.is_finite()).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.depth.data().iter().filter(|d| d.is_finite()).count()
    }

    /// Rebuilds from stored channels, re-deriving the mask from the depth.
    pub fn from_channels(depth: Raster<1>, conf_h: Raster<1>, conf_r: Raster<1>) -> Result<Self> {
        if !depth.same_size(&conf_h) || !depth.same_size(&conf_r) {
            return Err(Error::input("depth and confidence rasters differ in size"));
        }
        let mut out = Self {
            depth,
            conf_h,
            conf_r,
        };
        for i in 0..out.depth.pixel_count() {
            let ok = out.depth.data()[i].is_finite()
                && out.depth.data()[i] > 0.0
                && out.conf_h.data()[i].is_finite()
                && out.conf_h.data()[i] > 0.0
                && out.conf_r.data()[i].is_finite()
                && out.conf_r.data()[i] >= 0.0;
            if !ok {
                out.depth.data_mut()[i] = f32::NAN;
                out.conf_h.data_mut()[i] = f32::NAN;
                out.conf_r.data_mut()[i] = f32::NAN;
            }
        }
        Ok(out)
    }
}

/// Triangulates every keyframe pixel from all adjacent frames whose flow is
/// valid there. Confidences are in pixel units: `conf_h = f·√H`,
/// `conf_r = f·residual`. Runs in parallel over rows on the current rayon pool; the
/// result does not depend on the number of workers.
pub fn triangulate_map(input: &TriangulationInput, cfg: &TriangulationConfig) -> InitialDepth {
    let k = &input.intrinsics;
    let (w, h) = (k.width(), k.height());
    let focal = (k.fx() * k.fy()).sqrt();
    let mut depth = vec![f32::NAN; w * h];
    let mut conf_h = vec![f32::NAN; w * h];
    let mut conf_r = vec![f32::NAN; w * h];
    depth
        .par_chunks_mut(w)
        .zip(conf_h.par_chunks_mut(w))
        .zip(conf_r.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((drow, hrow), rrow))| {
            let mut obs = Vec::with_capacity(input.frames.len());
            for x in 0..w {
                let i = y * w + x;
                let u = Vector2::new(x as f64, y as f64);
                obs.clear();
                for (flow, pose) in &input.frames {
                    if let Some((du, dv)) = flow.vector(i) {
                        let target = Vector2::new(u.x + f64::from(du), u.y + f64::from(dv));
                        obs.push(Observation {
                            ray: k.normalize(&target),
                            pose,
                        });
                    }
                }
                if let Ok(est) = triangulate_pixel(&k.normalize(&u), &obs, cfg) {
                    drow[x] = est.depth as f32;
                    hrow[x] = (focal * est.hessian.sqrt()) as f32;
                    rrow[x] = (focal * est.residual) as f32;
                }
            }
        });
    let raster = |data| Raster::new(w, h, data).expect("dimensions match");
    InitialDepth {
        depth: raster(depth),
        conf_h: raster(conf_h),
        conf_r: raster(conf_r),
    }
}

/// Two-view triangulation cost evaluated at the true depth.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarLoss {
    pub total: f64,
    /// Per-pixel contribution; NaN where flow or ground truth is missing.
    pub per_pixel: Raster<1>,
    pub pixels: usize,
}

/// `Σ_i ‖ŝ_i × (R m_i d_i* + p)‖²` over pixels with valid flow and positive
/// finite ground truth, summed in row-major order.
pub fn epipolar_loss(
    flow: &FlowField,
    pose: &RelativePose,
    gt_depth: &Raster<1>,
    k: &Intrinsics,
) -> Result<EpipolarLoss> {
    let (w, h) = (k.width(), k.height());
    if flow.width() != w || flow.height() != h || gt_depth.width() != w || gt_depth.height() != h {
        return Err(Error::input("flow, depth and intrinsics disagree on image size"));
    }
    let mut per_pixel = vec![f32::NAN; w * h];
    let mut terms = vec![f64::NAN; w * h];
    terms
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, t) in row.iter_mut().enumerate() {
                let i = y * w + x;
                let d = f64::from(gt_depth.data()[i]);
                let Some((du, dv)) = flow.vector(i) else {
                    continue;
                };
                if !(d.is_finite() && d > 0.0) {
                    continue;
                }
                let u = Vector2::new(x as f64, y as f64);
                let target = Vector2::new(u.x + f64::from(du), u.y + f64::from(dv));
                let s = k.normalize(&target).normalize();
                let point = pose.rotation() * k.normalize(&u) * d + pose.translation();
                *t = s.cross(&point).norm_squared();
            }
        });
    let mut total = 0.0;
    let mut pixels = 0;
    for (t, out) in terms.iter().zip(per_pixel.iter_mut()) {
        if t.is_finite() {
            total += t;
            pixels += 1;
            *out = *t as f32;
        }
    }
    Ok(EpipolarLoss {
        total,
        per_pixel: Raster::new(w, h, per_pixel)?,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{corrupt_flow, render_flow, NoiseModel, SceneParams, SyntheticScene};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Golden-section minimizer of a unimodal scalar function on `[lo, hi]`.
    fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = hi - g * (hi - lo);
        let mut d = lo + g * (hi - lo);
        let (mut fc, mut fd) = (f(c), f(d));
        for _ in 0..200 {
            if fc < fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - g * (hi - lo);
                fc = f(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + g * (hi - lo);
                fd = f(d);
            }
        }
        0.5 * (lo + hi)
    }

    fn cost(m: &Vector3<f64>, obs: &[(Vector3<f64>, RelativePose)], d: f64) -> f64 {
        obs.iter()
            .map(|(s, p)| s.normalize().cross(&(p.rotation() * m * d + p.translation())).norm_squared())
            .sum()
    }

    fn random_instance(rng: &mut ChaCha8Rng, n_obs: usize) -> (Vector3<f64>, Vec<(Vector3<f64>, RelativePose)>) {
        let m = Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.45..0.45), 1.0);
        let depth = rng.random_range(0.5..20.0);
        let point = m * depth;
        let obs = (0..n_obs)
            .map(|_| {
                let axis = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let pose = RelativePose::from_axis_angle(
                    &axis,
                    rng.random_range(0.0..0.2),
                    Vector3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.2..0.2),
                    ),
                );
                let q = pose.transform_point(&point);
                let noise = Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), 0.0);
                (q / q.z + noise, pose)
            })
            .collect();
        (m, obs)
    }

    fn observations(obs: &[(Vector3<f64>, RelativePose)]) -> Vec<Observation<'_>> {
        obs.iter().map(|(s, p)| Observation { ray: *s, pose: p }).collect()
    }

    #[test]
    fn exact_two_view_case() {
        let pose = RelativePose::from_translation(Vector3::new(-1.0, 0.0, 0.0));
        let obs = [Observation {
            ray: Vector3::new(-0.5, 0.0, 1.0),
            pose: &pose,
        }];
        let est = triangulate_pixel(&Vector3::new(0.0, 0.0, 1.0), &obs, &TriangulationConfig::default()).unwrap();
        assert!((est.depth - 2.0).abs() < 1e-15);
        assert!(est.residual < 1e-15);
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let pose = RelativePose::identity();
        let m = Vector3::new(0.1, -0.2, 1.0);
        let obs = [Observation { ray: m, pose: &pose }];
        assert!(matches!(
            triangulate_pixel(&m, &obs, &TriangulationConfig::default()),
            Err(Degenerate::LowHessian(_))
        ));
    }

    #[test]
    fn point_behind_camera_is_degenerate() {
        let pose = RelativePose::from_translation(Vector3::new(-1.0, 0.0, 0.0));
        // Ray bending the wrong way triangulates to negative depth.
        let obs = [Observation {
            ray: Vector3::new(0.5, 0.0, 1.0),
            pose: &pose,
        }];
        assert!(matches!(
            triangulate_pixel(&Vector3::new(0.0, 0.0, 1.0), &obs, &TriangulationConfig::default()),
            Err(Degenerate::Cheirality(_))
        ));
    }

    #[test]
    fn far_point_is_degenerate() {
        let pose = RelativePose::from_translation(Vector3::new(-1.0, 0.0, 0.0));
        let obs = [Observation {
            ray: Vector3::new(-0.001, 0.0, 1.0),
            pose: &pose,
        }];
        assert!(matches!(
            triangulate_pixel(&Vector3::new(0.0, 0.0, 1.0), &obs, &TriangulationConfig::default()),
            Err(Degenerate::TooFar(_))
        ));
    }

    #[test]
    fn closed_form_matches_golden_section() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = TriangulationConfig::default();
        for trial in 0..400 {
            let n = 1 + trial % 5;
            let (m, obs) = random_instance(&mut rng, n);
            let Ok(est) = triangulate_pixel(&m, &observations(&obs), &cfg) else {
                continue;
            };
            let oracle = golden_section(|d| cost(&m, &obs, d), 1e-9, 100.0);
            assert!((est.depth - oracle).abs() <= 1e-6 * est.depth, "{} vs {oracle}", est.depth);
            assert!((est.residual - cost(&m, &obs, est.depth).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_translations_scales_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = TriangulationConfig::default();
        for _ in 0..100 {
            let (m, obs) = random_instance(&mut rng, 4);
            let Ok(base) = triangulate_pixel(&m, &observations(&obs), &cfg) else {
                continue;
            };
            let s = 3.0;
            let scaled: Vec<_> = obs
                .iter()
                .map(|(r, p)| (*r, RelativePose::new(*p.rotation(), p.translation() * s).unwrap()))
                .collect();
            let est = triangulate_pixel(&m, &observations(&scaled), &TriangulationConfig { d_max: 1e4, ..cfg }).unwrap();
            assert!((est.depth - s * base.depth).abs() <= 1e-12 * est.depth);
            assert!((est.residual - s * base.residual).abs() <= 1e-9 * (1.0 + est.residual));
            assert!((est.hessian - base.hessian).abs() <= 1e-15 * base.hessian.max(1.0));
        }
    }

    #[test]
    fn adding_observations_never_lowers_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = TriangulationConfig {
            d_max: f64::INFINITY,
            ..TriangulationConfig::default()
        };
        for _ in 0..100 {
            let (m, obs) = random_instance(&mut rng, 6);
            let mut last = 0.0;
            for n in 1..=6 {
                let h: f64 = obs[..n]
                    .iter()
                    .map(|(s, p)| s.normalize().cross(&(p.rotation() * m)).norm_squared())
                    .sum();
                assert!(h >= last);
                last = h;
                if let Ok(est) = triangulate_pixel(&m, &observations(&obs[..n]), &cfg) {
                    assert!((est.hessian - h).abs() <= 1e-15 * h.max(1.0));
                }
            }
        }
    }

    fn k() -> Intrinsics {
        Intrinsics::new(400.0, 400.0, 80.0, 60.0, 160, 120).unwrap()
    }

    fn poses() -> Vec<RelativePose> {
        [(-0.08, 0.01, 0.02), (-0.04, -0.01, 0.0), (0.04, 0.0, -0.01), (0.08, 0.02, 0.01)]
            .iter()
            .enumerate()
            .map(|(i, &(x, y, z))| {
                RelativePose::from_axis_angle(&Vector3::new(0.1, 1.0, -0.2), 0.004 * (i as f64 - 1.5), Vector3::new(x, y, z))
            })
            .collect()
    }

    fn scene() -> SyntheticScene {
        SyntheticScene::generate(&SceneParams {
            width: 160,
            height: 120,
            seed: 2,
            ..SceneParams::default()
        })
        .unwrap()
    }

    #[test]
    fn noise_free_flow_recovers_depth() {
        let scene = scene();
        let frames = poses()
            .into_iter()
            .map(|p| (render_flow(&scene, &k(), &p).unwrap(), p))
            .collect();
        let input = TriangulationInput::new(k(), frames).unwrap();
        let init = triangulate_map(&input, &TriangulationConfig::default());
        let gt = scene.depth_map();
        let mut n = 0;
        for i in 0..gt.pixel_count() {
            if init.is_valid(i) {
                n += 1;
                let rel = (init.depth.data()[i] - gt.data()[i]).abs() / gt.data()[i];
                assert!(rel < 1e-6, "pixel {i}: rel err {rel}");
                assert!(init.conf_h.data()[i] > 0.0);
                assert!(init.conf_r.data()[i] >= 0.0);
            } else {
                assert!(init.conf_h.data()[i].is_nan() && init.conf_r.data()[i].is_nan());
            }
        }
        assert!(n > gt.pixel_count() * 9 / 10);
    }

    #[test]
    fn invalid_flow_gives_invalid_map() {
        let frames = poses()
            .into_iter()
            .map(|p| (FlowField::invalid(160, 120), p))
            .collect();
        let init = triangulate_map(&TriangulationInput::new(k(), frames).unwrap(), &TriangulationConfig::default());
        assert_eq!(init.valid_count(), 0);
    }

    #[test]
    fn identity_pose_is_fully_degenerate() {
        let p = RelativePose::identity();
        let flow = render_flow(&scene(), &k(), &p).unwrap();
        let init = triangulate_map(&TriangulationInput::new(k(), vec![(flow, p)]).unwrap(), &TriangulationConfig::default());
        assert_eq!(init.valid_count(), 0);
    }

    #[test]
    fn mismatched_flow_size_is_an_input_error() {
        let frames = vec![(FlowField::zeros(10, 10), RelativePose::identity())];
        assert!(matches!(TriangulationInput::new(k(), frames), Err(Error::Input(_))));
        assert!(matches!(TriangulationInput::new(k(), Vec::new()), Err(Error::Input(_))));
    }

    #[test]
    fn epipolar_loss_vanishes_on_exact_flow() {
        let scene = scene();
        let pose = poses()[0];
        let flow = render_flow(&scene, &k(), &pose).unwrap();
        let loss = epipolar_loss(&flow, &pose, &scene.depth_map(), &k()).unwrap();
        assert!(loss.total < 1e-12 * (160.0 * 120.0), "{}", loss.total);
        assert_eq!(loss.pixels, flow.valid_count());
    }

    #[test]
    fn epipolar_loss_matches_direct_evaluation() {
        let scene = scene();
        let k = k();
        let pose = poses()[3];
        let flow = corrupt_flow(
            &render_flow(&scene, &k, &pose).unwrap(),
            &NoiseModel {
                sigma_flow: 0.7,
                outlier_rate: 0.02,
                outlier_span: 15.0,
                seed: 3,
            },
        )
        .unwrap();
        let gt = scene.depth_map();
        let loss = epipolar_loss(&flow, &pose, &gt, &k).unwrap();
        let mut expected = 0.0;
        for y in 0..120 {
            for x in 0..160 {
                let i = y * 160 + x;
                let Some((du, dv)) = flow.vector(i) else { continue };
                let d = f64::from(gt.data()[i]);
                let m = Vector3::new((x as f64 - 80.0) / 400.0, (y as f64 - 60.0) / 400.0, 1.0);
                let t = Vector3::new(
                    (x as f64 + f64::from(du) - 80.0) / 400.0,
                    (y as f64 + f64::from(dv) - 60.0) / 400.0,
                    1.0,
                );
                let s = t / t.norm();
                let q = pose.rotation() * m * d + pose.translation();
                let c = Vector3::new(s.y * q.z - s.z * q.y, s.z * q.x - s.x * q.z, s.x * q.y - s.y * q.x);
                expected += c.x * c.x + c.y * c.y + c.z * c.z;
            }
        }
        assert!(loss.total >= 0.0);
        assert!((loss.total - expected).abs() <= 1e-12 * expected.max(1.0), "{} vs {expected}", loss.total);
    }
}
