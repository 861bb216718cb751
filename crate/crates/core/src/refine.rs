//! Confidence-weighted refinement of the triangulated depth map.
//!
//! The refined map minimizes
//!
//! ```text
//! C(d) = Σ_i w_i (d_i - d̄_i)² + μ Σ_{(i,j) ∈ N4} g_ij (d_i - d_j)²
//! ```
//!
//! where `d̄` is the triangulated depth, `w` a per-pixel data weight built
//! from the triangulation confidences, and `g` an edge-aware weight on each
//! undirected 4-neighbor edge. Each pair is counted once. Minimization runs a
//! fixed number of damped Jacobi sweeps on the normal equations; every sweep
//! is a convex combination of the current neighborhood and the data term, so
//! the objective never increases for `omega <= 1`.
//!
//! The per-pixel uncertainty is a Laplacian scale derived from the diagonal
//! curvature of `C`: `σ_i = max(sigma_min, beta / √(w_i + μ Σ_j g_ij))`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::rasterio::Raster;
use crate::triangulate::InitialDepth;
use crate::{Error, Result};

/// Damping of the per-iteration terms in the Laplacian NLL.
pub const NLL_LAMBDA: f64 = 0.83;
/// Iteration count used with [`NLL_LAMBDA`] in training.
pub const NLL_ITERATIONS: usize = 5;

/// Which triangulation confidences enter the data weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfidenceInputs {
    /// Hessian and residual.
    #[default]
    Full,
    /// Hessian only; the residual term reduces to `tau²`.
    HessianOnly,
    /// Residual only; the Hessian is set to 1.
    ResidualOnly,
    /// Neither: a constant weight on every valid pixel.
    DepthOnly,
}

impl ConfidenceInputs {
    pub const ALL: [ConfidenceInputs; 4] = [
        ConfidenceInputs::DepthOnly,
        ConfidenceInputs::ResidualOnly,
        ConfidenceInputs::HessianOnly,
        ConfidenceInputs::Full,
    ];
}

impl FromStr for ConfidenceInputs {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "hessian" => Ok(Self::HessianOnly),
            "residual" => Ok(Self::ResidualOnly),
            "depth" => Ok(Self::DepthOnly),
            _ => Err(Error::Config(format!("unknown confidence inputs {s:?}"))),
        }
    }
}

impl fmt::Display for ConfidenceInputs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::HessianOnly => "hessian",
            Self::ResidualOnly => "residual",
            Self::DepthOnly => "depth",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Number of Jacobi sweeps.
    pub iterations: usize,
    /// Smoothness strength.
    pub mu: f64,
    /// Intensity scale of the edge-aware smoothness weights.
    pub kappa: f64,
    /// Jacobi damping in `(0, 1]`.
    pub omega: f64,
    /// Residual floor in the data weight.
    pub tau: f64,
    /// Data weight ceiling.
    pub w_max: f64,
    /// Uncertainty floor, meters.
    pub sigma_min: f64,
    /// Uncertainty calibration factor.
    pub beta: f64,
    /// Uncertainty assigned to pixels with no curvature at all.
    pub sigma_cap: f64,
    pub confidence: ConfidenceInputs,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 7,
            mu: 1.0,
            kappa: 0.1,
            omega: 0.9,
            tau: 0.1,
            w_max: 1e4,
            sigma_min: 0.01,
            beta: 1.0,
            sigma_cap: 100.0,
            confidence: ConfidenceInputs::Full,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} out of range: {v}")));
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu", self.mu);
        }
        if !(self.kappa > 0.0) {
            return bad("kappa", self.kappa);
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return bad("omega", self.omega);
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad("tau", self.tau);
        }
        if !(self.w_max > 0.0) {
            return bad("w_max", self.w_max);
        }
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return bad("sigma_min", self.sigma_min);
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", self.beta);
        }
        if !(self.sigma_cap > 0.0 && self.sigma_cap.is_finite()) {
            return bad("sigma_cap", self.sigma_cap);
        }
        Ok(())
    }
}

/// Data weights per pixel and smoothness weights per grid edge.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMaps {
    width: usize,
    height: usize,
    data: Vec<f64>,
    /// Edge `(x, y)-(x+1, y)` at `y * (width - 1) + x`.
    horizontal: Vec<f64>,
    /// Edge `(x, y)-(x, y+1)` at `y * width + x`.
    vertical: Vec<f64>,
}

impl WeightMaps {
    /// Assembles weight maps directly. Data weights must be finite and
    /// non-negative; edge weights must lie in `(0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f64>, horizontal: Vec<f64>, vertical: Vec<f64>) -> Result<Self> {
        if data.len() != width * height
            || horizontal.len() != width.saturating_sub(1) * height
            || vertical.len() != width * height.saturating_sub(1)
        {
            return Err(Error::input("weight map sizes do not match the grid"));
        }
        if data.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::input("data weights must be finite and non-negative"));
        }
        if horizontal.iter().chain(&vertical).any(|g| !(*g > 0.0 && *g <= 1.0)) {
            return Err(Error::input("edge weights must lie in (0, 1]"));
        }
        Ok(Self {
            width,
            height,
            data,
            horizontal,
            vertical,
        })
    }

    /// Uniform edge weights of 1 with the given data weights.
    pub fn with_unit_edges(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let h = vec![1.0; width.saturating_sub(1) * height];
        let v = vec![1.0; width * height.saturating_sub(1)];
        Self::new(width, height, data, h, v)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn horizontal(&self) -> &[f64] {
        &self.horizontal
    }

    pub fn vertical(&self) -> &[f64] {
        &self.vertical
    }

    /// Weight of the edge between pixel `i` and its neighbor `j`, if they are
    /// 4-neighbors. Symmetric in `i, j`.
    pub fn edge(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = (i.min(j), i.max(j));
        let (ax, ay) = (a % self.width, a / self.width);
        if b == a + 1 && ax + 1 < self.width {
            Some(self.horizontal[ay * (self.width - 1) + ax])
        } else if b == a + self.width {
            Some(self.vertical[a])
        } else {
            None
        }
    }

    /// Calls `f(j, g_ij)` for every 4-neighbor `j` of pixel `(x, y)`.
    #[inline]
    fn for_each_neighbor(&self, x: usize, y: usize, mut f: impl FnMut(usize, f64)) {
        let w = self.width;
        let i = y * w + x;
        if x > 0 {
            f(i - 1, self.horizontal[y * (w - 1) + x - 1]);
        }
        if x + 1 < w {
            f(i + 1, self.horizontal[y * (w - 1) + x]);
        }
        if y > 0 {
            f(i - w, self.vertical[i - w]);
        }
        if y + 1 < self.height {
            f(i + w, self.vertical[i]);
        }
    }

    /// `Σ_j g_ij` for pixel `i`.
    pub fn degree(&self, i: usize) -> f64 {
        let mut s = 0.0;
        self.for_each_neighbor(i % self.width, i / self.width, |_, g| s += g);
        s
    }
}

/// Builds data and smoothness weights from the triangulation confidences and
/// the keyframe intensity.
///
/// `w_i = min(w_max, H_i / (c_r,i² + tau²))` on valid pixels and 0 elsewhere,
/// with `H = conf_h²`. `g_ij = exp(-|I_i - I_j| / kappa)`.
pub fn build_weights(init: &InitialDepth, intensity: &Raster<1>, cfg: &RefineConfig) -> Result<WeightMaps> {
    cfg.validate()?;
    let (width, height) = (init.width(), init.height());
    if !init.depth.same_size(intensity) {
        return Err(Error::input(format!(
            "intensity is {}x{} but the depth map is {width}x{height}",
            intensity.width(),
            intensity.height()
        )));
    }
    let tau2 = cfg.tau * cfg.tau;
    let data = (0..width * height)
        .map(|i| {
            if !init.is_valid(i) {
                return 0.0;
            }
            let c_h = f64::from(init.conf_h.data()[i]);
            let c_r = f64::from(init.conf_r.data()[i]);
            let (hessian, r2) = match cfg.confidence {
                ConfidenceInputs::Full => (c_h * c_h, c_r * c_r),
                ConfidenceInputs::HessianOnly => (c_h * c_h, 0.0),
                ConfidenceInputs::ResidualOnly => (1.0, c_r * c_r),
                ConfidenceInputs::DepthOnly => (1.0, 0.0),
            };
            let denom = r2 + tau2;
            if denom > 0.0 {
                (hessian / denom).min(cfg.w_max)
            } else {
                cfg.w_max
            }
        })
        .collect();
    let img = intensity.data();
    let edge = |a: usize, b: usize| {
        let diff = (f64::from(img[a]) - f64::from(img[b])).abs();
        let g = (-diff / cfg.kappa).exp();
        if g.is_finite() {
            g.max(f64::MIN_POSITIVE)
        } else {
            f64::MIN_POSITIVE
        }
    };
    let mut horizontal = Vec::with_capacity(width.saturating_sub(1) * height);
    for y in 0..height {
        for x in 0..width.saturating_sub(1) {
            horizontal.push(edge(y * width + x, y * width + x + 1));
        }
    }
    let vertical = (0..width * height.saturating_sub(1))
        .map(|i| edge(i, i + width))
        .collect();
    WeightMaps::new(width, height, data, horizontal, vertical)
}

/// Outcome of [`refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    width: usize,
    height: usize,
    /// Depth after each sweep; entry 0 is the initialization.
    pub iterates: Vec<Vec<f64>>,
    /// Laplacian scale per pixel, meters.
    pub uncertainty: Vec<f64>,
    /// `C(d⁽ᵏ⁾)` for every iterate.
    pub objective: Vec<f64>,
    /// Value given to pixels without a valid triangulated depth.
    pub fill_depth: f64,
}

impl RefineResult {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn refined(&self) -> &[f64] {
        self.iterates.last().expect("at least the initialization")
    }

    pub fn refined_raster(&self) -> Raster<1> {
        Raster::from_f64(self.width, self.height, self.refined()).expect("dimensions match")
    }

    pub fn uncertainty_raster(&self) -> Raster<1> {
        Raster::from_f64(self.width, self.height, &self.uncertainty).expect("dimensions match")
    }

    /// One `k C(k)` line per iterate.
    pub fn objective_log(&self) -> String {
        self.objective
            .iter()
            .enumerate()
            .map(|(k, c)| format!("{k} {c:e}\n"))
            .collect()
    }

    /// True when `C⁽ᵏ⁺¹⁾ <= C⁽ᵏ⁾ + tol` for every `k`.
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.objective.windows(2).all(|w| w[1] <= w[0] + tol)
    }
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Evaluates the refinement objective for depth `d`.
///
/// Row partial sums are formed in parallel and added in row order, so the
/// value does not depend on the worker count.
pub fn objective(d: &[f64], target: &[f64], weights: &WeightMaps, mu: f64) -> f64 {
    let w = weights.width;
    let h = weights.height;
    let rows: Vec<f64> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut s = 0.0;
            for x in 0..w {
                let i = y * w + x;
                let wi = weights.data[i];
                if wi > 0.0 {
                    let r = d[i] - target[i];
                    s += wi * r * r;
                }
                if x + 1 < w {
                    let r = d[i] - d[i + 1];
                    s += mu * weights.horizontal[y * (w - 1) + x] * r * r;
                }
                if y + 1 < h {
                    let r = d[i] - d[i + w];
                    s += mu * weights.vertical[i] * r * r;
                }
            }
            s
        })
        .collect();
    rows.iter().sum()
}

/// Runs `cfg.iterations` damped Jacobi sweeps on the refinement objective.
///
/// Invalid pixels start from the median of the valid triangulated depths
/// (1 m when there are none) and are inpainted by the smoothness term.
/// Sweeps are parallel across rows with a double buffer; results are
/// identical for any worker count.
pub fn refine(init: &InitialDepth, weights: &WeightMaps, cfg: &RefineConfig) -> Result<RefineResult> {
    cfg.validate()?;
    let (w, h) = (init.width(), init.height());
    if weights.width != w || weights.height != h {
        return Err(Error::input("weight maps do not match the depth map"));
    }
    let n = w * h;
    let target: Vec<f64> = init
        .depth
        .data()
        .iter()
        .map(|&v| if v.is_finite() { f64::from(v) } else { 0.0 })
        .collect();
    let valid = init.valid_mask();
    if let Some(i) = (0..n).find(|&i| !valid[i] && weights.data[i] != 0.0) {
        return Err(Error::input(format!("pixel {i} is invalid but has a non-zero data weight")));
    }
    let fill = median((0..n).filter(|&i| valid[i]).map(|i| target[i]).collect()).unwrap_or(1.0);
    let start: Vec<f64> = (0..n).map(|i| if valid[i] { target[i] } else { fill }).collect();

    let diag: Vec<f64> = (0..n)
        .map(|i| weights.data[i] + cfg.mu * weights.degree(i))
        .collect();
    let uncertainty = diag
        .iter()
        .map(|&c| {
            if c > 0.0 {
                (cfg.beta / c.sqrt()).max(cfg.sigma_min)
            } else {
                cfg.sigma_cap
            }
        })
        .collect();

    let mut iterates = Vec::with_capacity(cfg.iterations + 1);
    let mut objectives = Vec::with_capacity(cfg.iterations + 1);
    objectives.push(objective(&start, &target, weights, cfg.mu));
    iterates.push(start);
    for _ in 0..cfg.iterations {
        let cur = iterates.last().expect("non-empty");
        let mut next = vec![0.0; n];
        next.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate() {
                let i = y * w + x;
                if diag[i] > 0.0 {
                    let mut acc = weights.data[i] * target[i];
                    let mut smooth = 0.0;
                    weights.for_each_neighbor(x, y, |j, g| smooth += g * cur[j]);
                    acc += cfg.mu * smooth;
                    *out = (1.0 - cfg.omega) * cur[i] + cfg.omega * acc / diag[i];
                } else {
                    *out = cur[i];
                }
            }
        });
        objectives.push(objective(&next, &target, weights, cfg.mu));
        iterates.push(next);
    }
    Ok(RefineResult {
        width: w,
        height: h,
        iterates,
        uncertainty,
        objective: objectives,
        fill_depth: fill,
    })
}

/// Laplacian negative log-likelihood accumulated over refinement iterates:
///
/// `Σ_{k=0..K} λ^{K-k} Σ_i ( |d_i⁽ᵏ⁾ - d_i*| / σ_i⁽ᵏ⁾ + ln σ_i⁽ᵏ⁾ )`
///
/// over pixels with a positive finite ground truth and a finite estimate,
/// summed in row-major order.
pub fn laplacian_nll(depths: &[&[f64]], sigmas: &[&[f64]], gt: &[f64], lambda: f64, iterations: usize) -> Result<f64> {
    if depths.len() != iterations + 1 || sigmas.len() != iterations + 1 {
        return Err(Error::input(format!(
            "expected {} depth and sigma maps, got {} and {}",
            iterations + 1,
            depths.len(),
            sigmas.len()
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::input(format!("lambda must be positive, got {lambda}")));
    }
    let mut total = 0.0;
    for (k, (d, s)) in depths.iter().zip(sigmas).enumerate() {
        if d.len() != gt.len() || s.len() != gt.len() {
            return Err(Error::input(format!("iterate {k} does not match the ground-truth size")));
        }
        let mut inner = 0.0;
        for i in 0..gt.len() {
            if !(gt[i].is_finite() && gt[i] > 0.0 && d[i].is_finite()) {
                continue;
            }
            if !(s[i] > 0.0 && s[i].is_finite()) {
                return Err(Error::input(format!(
                    "non-positive sigma {} at pixel {i}, iterate {k}",
                    s[i]
                )));
            }
            inner += (d[i] - gt[i]).abs() / s[i] + s[i].ln();
        }
        total += lambda.powi((iterations - k) as i32) * inner;
    }
    Ok(total)
}
