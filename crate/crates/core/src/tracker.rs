//! Frame-to-model camera tracking.
//!
//! The current camera pose is `T = T_prev · T_rel`. Each Gauss-Newton
//! iteration linearizes the SDF term `r = μ/σ` (σ held constant) and the
//! photometric term around `T_rel` and applies the update on the left,
//! `T_rel ← exp(Δ)·T_rel`, so point Jacobians are `∂(T_rel p)/∂Δ = (T_rel p)^⊙`.

use nalgebra::{Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::field::{GradientKind, SdfField};
use crate::geometry::{bilinear_sample, odot, project, projection_jacobian, DepthRange, Image, Intrinsics, Pose, RgbdFrame, Twist};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// Residual `μ/σ` with the decoded σ.
    #[default]
    Probabilistic,
    /// Ablation: σ fixed at 1.
    ConstantOne,
}

impl std::str::FromStr for SigmaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probabilistic" => Ok(SigmaMode::Probabilistic),
            "constant_one" | "constant-one" => Ok(SigmaMode::ConstantOne),
            other => Err(format!("unknown sigma mode '{other}' (probabilistic | constant_one)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingConfig {
    /// Weight of the intensity term.
    pub w_int: f64,
    /// Huber threshold on the normalized SDF residual.
    pub huber_delta: f64,
    pub max_iters: usize,
    /// Stop when `‖Δ‖` falls below this.
    pub convergence_eps: f64,
    /// Uniform subsample of depth points for the SDF term.
    pub max_points: usize,
    /// Fewer usable SDF points than this is a tracking failure.
    pub min_points: usize,
    pub sigma_mode: SigmaMode,
    /// Pixels kept for the intensity term (highest gradient magnitude).
    pub intensity_pixels: usize,
    /// Use every valid pixel for the intensity term instead of the mask.
    pub intensity_full_domain: bool,
    /// Gaussian pre-blur of both intensity images, in pixels (0 = off).
    pub intensity_blur: f64,
    /// Pixels whose 4-neighbour depth jumps by more than this fraction of
    /// their own depth are left out of the intensity term.
    pub depth_edge: f64,
    /// Start from the previous relative motion instead of identity.
    pub constant_velocity: bool,
    /// Normal matrices with `λ_max/λ_min` above this are degenerate.
    pub max_condition: f64,
    pub depth_range: DepthRange,
    pub seed: u64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            w_int: 1000.0,
            huber_delta: 1.345,
            max_iters: 10,
            convergence_eps: 1e-5,
            max_points: 10_000,
            min_points: 50,
            sigma_mode: SigmaMode::Probabilistic,
            intensity_pixels: 4000,
            intensity_full_domain: false,
            intensity_blur: 1.0,
            depth_edge: 0.05,
            constant_velocity: false,
            max_condition: 1e12,
            depth_range: DepthRange::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackError {
    #[error("degenerate tracking: {usable} usable points, at least {required} required")]
    TooFewPoints { usable: usize, required: usize },
    #[error("tracking configuration: {0}")]
    InvalidConfig(String),
}

/// Set when the solve could not proceed; the returned pose is the
/// previous one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrackingFailure {
    DegenerateSystem { condition: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingResult {
    pub pose: Pose,
    pub relative: Pose,
    pub iterations: usize,
    pub converged: bool,
    /// Total robust cost at the last linearization point.
    pub cost: f64,
    pub sdf_cost: f64,
    pub intensity_cost: f64,
    /// Fraction of SDF points that landed in allocated voxels.
    pub inlier_fraction: f64,
    pub sdf_points: usize,
    pub intensity_pixels: usize,
    pub failure: Option<TrackingFailure>,
}

/// One linearized residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualRow {
    pub r: f64,
    pub j: Vector6<f64>,
    /// Robust (IRLS) weight.
    pub w: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SdfTerm {
    pub rows: Vec<ResidualRow>,
    /// Points outside the allocated map.
    pub skipped: usize,
    /// `Σ ρ_huber(r)`.
    pub cost: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntensityTerm {
    pub rows: Vec<ResidualRow>,
    /// Warps that left the image.
    pub dropped: usize,
    /// `½ Σ r²` (unweighted by `w_int`).
    pub cost: f64,
}

/// IRLS weight of the Huber loss.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

pub fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn sigma_of(mode: SigmaMode, sigma: f64) -> f64 {
    match mode {
        SigmaMode::Probabilistic => sigma,
        SigmaMode::ConstantOne => 1.0,
    }
}

/// SDF residuals of camera-frame `points` under `T_prev · T_rel`.
pub fn sdf_residuals(
    points: &[Vector3<f64>],
    prev_pose: &Pose,
    relative: &Pose,
    field: &dyn SdfField,
    cfg: &TrackingConfig,
) -> Result<SdfTerm, TrackError> {
    let local: Vec<Vector3<f64>> = points.iter().map(|p| relative.transform_point(p)).collect();
    let world: Vec<Vector3<f64>> = local.iter().map(|q| prev_pose.transform_point(q)).collect();
    let samples = field.query(&world, GradientKind::Mu);
    let r_prev = prev_pose.rotation_matrix();
    let mut term = SdfTerm::default();
    for (q, s) in local.iter().zip(samples) {
        let Some(s) = s else {
            term.skipped += 1;
            continue;
        };
        let sigma = sigma_of(cfg.sigma_mode, s.sigma);
        let r = s.mu / sigma;
        let g = (r_prev.transpose() * s.dmu_dx) / sigma;
        let j = (g.transpose() * odot(q)).transpose();
        term.cost += huber_cost(r, cfg.huber_delta);
        term.rows.push(ResidualRow {
            r,
            j,
            w: huber_weight(r, cfg.huber_delta),
        });
    }
    if term.rows.len() < cfg.min_points {
        return Err(TrackError::TooFewPoints {
            usable: term.rows.len(),
            required: cfg.min_points,
        });
    }
    Ok(term)
}

/// Pixels of the current frame used by the photometric term: back-projected
/// point and intensity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntensityObservations {
    pub points: Vec<Vector3<f64>>,
    pub values: Vec<f64>,
}

/// Picks valid-depth pixels with the largest intensity gradient (or all of
/// them in full-domain mode).
pub fn select_intensity_pixels(frame: &RgbdFrame, cfg: &TrackingConfig) -> IntensityObservations {
    let k = &frame.intrinsics;
    let img = &frame.intensity;
    let mut candidates: Vec<(f64, usize, usize, f64)> = Vec::new();
    for v in 1..k.height.saturating_sub(1) {
        for u in 1..k.width.saturating_sub(1) {
            let Some(d) = frame.valid_depth(u, v, &cfg.depth_range) else {
                continue;
            };
            if near_depth_edge(frame, u, v, d, cfg.depth_edge) {
                continue;
            }
            let gu = 0.5 * (img.get(u + 1, v) - img.get(u - 1, v)) as f64;
            let gv = 0.5 * (img.get(u, v + 1) - img.get(u, v - 1)) as f64;
            let mag = gu * gu + gv * gv;
            if cfg.intensity_full_domain || mag > 0.0 {
                candidates.push((mag, u, v, d));
            }
        }
    }
    if !cfg.intensity_full_domain && candidates.len() > cfg.intensity_pixels {
        // stable order: magnitude descending, then raster order
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
        candidates.truncate(cfg.intensity_pixels);
        candidates.sort_by_key(|c| (c.2, c.1));
    }
    let mut obs = IntensityObservations::default();
    for (_, u, v, d) in candidates {
        obs.points.push(k.unproject(u as f64, v as f64, d));
        obs.values.push(img.get(u, v) as f64);
    }
    obs
}

fn near_depth_edge(frame: &RgbdFrame, u: usize, v: usize, d: f64, ratio: f64) -> bool {
    if !(ratio > 0.0) {
        return false;
    }
    [(u - 1, v), (u + 1, v), (u, v - 1), (u, v + 1)]
        .iter()
        .any(|&(x, y)| (frame.depth.get(x, y) as f64 - d).abs() > ratio * d)
}

/// Separable Gaussian blur with clamped borders; `sigma <= 0` copies.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if !(sigma > 0.0) {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (w, h) = (image.width as isize, image.height as isize);
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(src.width, src.height, |u, v| {
            let mut acc = 0.0;
            for (k, i) in kernel.iter().zip(-radius..=radius) {
                let (x, y) = if horizontal {
                    ((u as isize + i).clamp(0, w - 1), v as isize)
                } else {
                    (u as isize, (v as isize + i).clamp(0, h - 1))
                };
                acc += k * src.get(x as usize, y as usize) as f64;
            }
            (acc / norm) as f32
        })
    };
    pass(&pass(image, true), false)
}

/// Photometric residuals `I_t[u] − I_{t−1}[π(T_rel p)]` with Jacobians.
pub fn intensity_rows(
    obs: &IntensityObservations,
    prev_intensity: &Image,
    intrinsics: &Intrinsics,
    relative: &Pose,
) -> IntensityTerm {
    let mut term = IntensityTerm::default();
    for (p, value) in obs.points.iter().zip(&obs.values) {
        let q = relative.transform_point(p);
        let Ok(proj) = project(&q, intrinsics) else {
            term.dropped += 1;
            continue;
        };
        let Ok((sampled, grad)) = bilinear_sample(prev_intensity, &proj.uv) else {
            term.dropped += 1;
            continue;
        };
        let r = value - sampled;
        let j_img: Vector2<f64> = grad;
        let j = -(j_img.transpose() * projection_jacobian(&q, intrinsics) * odot(&q)).transpose();
        term.cost += 0.5 * r * r;
        term.rows.push(ResidualRow { r, j, w: 1.0 });
    }
    term
}

/// Photometric residuals between two frames sharing intrinsics.
pub fn intensity_residuals(frame: &RgbdFrame, prev: &RgbdFrame, relative: &Pose, cfg: &TrackingConfig) -> IntensityTerm {
    let obs = select_intensity_pixels(frame, cfg);
    intensity_rows(&obs, &prev.intensity, &frame.intrinsics, relative)
}

/// Normal equations `H = Σ wJᵀJ`, `b = Σ wJᵀr`, accumulated in row order.
fn accumulate(h: &mut Matrix6<f64>, b: &mut Vector6<f64>, rows: &[ResidualRow], scale: f64) {
    for row in rows {
        let w = row.w * scale;
        *h += row.j * row.j.transpose() * w;
        *b += row.j * (row.r * w);
    }
}

/// Input to the photometric term.
pub struct IntensityInput<'a> {
    pub observations: &'a IntensityObservations,
    pub prev_intensity: &'a Image,
    pub intrinsics: &'a Intrinsics,
}

/// Gauss-Newton over the relative motion from camera-frame points.
pub fn track_points(
    points: &[Vector3<f64>],
    intensity: Option<IntensityInput<'_>>,
    prev_pose: &Pose,
    field: &dyn SdfField,
    cfg: &TrackingConfig,
    initial: Pose,
) -> Result<TrackingResult, TrackError> {
    if cfg.max_iters == 0 {
        return Err(TrackError::InvalidConfig("max_iters must be at least 1".into()));
    }
    let mut rel = initial;
    let mut result = TrackingResult {
        pose: prev_pose.compose(&rel),
        relative: rel,
        iterations: 0,
        converged: false,
        cost: 0.0,
        sdf_cost: 0.0,
        intensity_cost: 0.0,
        inlier_fraction: 0.0,
        sdf_points: 0,
        intensity_pixels: 0,
        failure: None,
    };
    let use_intensity = cfg.w_int > 0.0;
    for _ in 0..cfg.max_iters {
        let sdf = sdf_residuals(points, prev_pose, &rel, field, cfg)?;
        let mut h = Matrix6::zeros();
        let mut b = Vector6::zeros();
        accumulate(&mut h, &mut b, &sdf.rows, 1.0);
        result.sdf_cost = sdf.cost;
        result.sdf_points = sdf.rows.len();
        result.inlier_fraction = sdf.rows.len() as f64 / points.len().max(1) as f64;
        result.intensity_cost = 0.0;
        result.intensity_pixels = 0;
        if let (true, Some(inp)) = (use_intensity, intensity.as_ref()) {
            let term = intensity_rows(inp.observations, inp.prev_intensity, inp.intrinsics, &rel);
            accumulate(&mut h, &mut b, &term.rows, cfg.w_int);
            result.intensity_cost = term.cost;
            result.intensity_pixels = term.rows.len();
        }
        result.cost = result.sdf_cost + cfg.w_int * result.intensity_cost;

        let eig = SymmetricEigen::new(h);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        debug_assert!(min >= -1e-9 * max.abs().max(1.0), "normal matrix not PSD: {min}");
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= cfg.max_condition) {
            log::warn!("degenerate normal matrix (condition {condition:e}); holding previous pose");
            result.failure = Some(TrackingFailure::DegenerateSystem { condition });
            result.pose = *prev_pose;
            result.relative = Pose::identity();
            return Ok(result);
        }
        let Some(chol) = h.cholesky() else {
            result.failure = Some(TrackingFailure::DegenerateSystem { condition });
            result.pose = *prev_pose;
            result.relative = Pose::identity();
            return Ok(result);
        };
        let delta = -chol.solve(&b);
        rel = Twist::from_slice(delta.as_slice()).exp().compose(&rel);
        result.iterations += 1;
        if delta.norm() < cfg.convergence_eps {
            result.converged = true;
            break;
        }
    }
    result.relative = rel;
    result.pose = prev_pose.compose(&rel);
    Ok(result)
}

/// Uniform subsample of valid depth points with a seed derived from the
/// frame timestamp.
pub fn sample_depth_points(frame: &RgbdFrame, cfg: &TrackingConfig) -> Vec<Vector3<f64>> {
    let k = &frame.intrinsics;
    let mut all = Vec::new();
    for v in 0..k.height {
        for u in 0..k.width {
            if let Some(d) = frame.valid_depth(u, v, &cfg.depth_range) {
                all.push(k.unproject(u as f64, v as f64, d));
            }
        }
    }
    if all.len() <= cfg.max_points {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ frame.timestamp.to_bits());
    let mut idx = rand::seq::index::sample(&mut rng, all.len(), cfg.max_points).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i]).collect()
}

/// Tracks `frame` against the map, starting from `initial` relative motion
/// (identity when `None`). `prev` enables the photometric term.
pub fn track(
    frame: &RgbdFrame,
    prev: Option<&RgbdFrame>,
    prev_pose: &Pose,
    field: &dyn SdfField,
    cfg: &TrackingConfig,
    initial: Option<Pose>,
) -> Result<TrackingResult, TrackError> {
    let points = sample_depth_points(frame, cfg);
    let blurred = match prev {
        Some(p) if cfg.w_int > 0.0 => {
            let mut cur = frame.clone();
            cur.intensity = gaussian_blur(&frame.intensity, cfg.intensity_blur);
            Some((select_intensity_pixels(&cur, cfg), gaussian_blur(&p.intensity, cfg.intensity_blur)))
        }
        _ => None,
    };
    let intensity = match blurred.as_ref() {
        Some((o, prev_intensity)) => Some(IntensityInput {
            observations: o,
            prev_intensity,
            intrinsics: &frame.intrinsics,
        }),
        _ => None,
    };
    track_points(&points, intensity, prev_pose, field, cfg, initial.unwrap_or_else(Pose::identity))
}

/// `(1/N) Σ ½ (μ/σ)²` over the points that land in the map.
pub fn sdf_mean_cost(
    points: &[Vector3<f64>],
    prev_pose: &Pose,
    relative: &Pose,
    field: &dyn SdfField,
    mode: SigmaMode,
) -> Option<f64> {
    let world: Vec<Vector3<f64>> = points.iter().map(|p| prev_pose.transform_point(&relative.transform_point(p))).collect();
    let samples: Vec<_> = field.query(&world, GradientKind::None).into_iter().flatten().collect();
    if samples.is_empty() {
        return None;
    }
    let sum: f64 = samples
        .iter()
        .map(|s| {
            let r = s.mu / sigma_of(mode, s.sigma);
            0.5 * r * r
        })
        .sum();
    Some(sum / samples.len() as f64)
}

/// One gradient-descent step `−α ∇E` on the mean SDF cost, using the exact
/// gradient of `μ/σ` (σ included). Validation baseline only.
pub fn gd_reference_step(
    points: &[Vector3<f64>],
    prev_pose: &Pose,
    relative: &Pose,
    field: &dyn SdfField,
    alpha: f64,
    mode: SigmaMode,
) -> Twist {
    let local: Vec<Vector3<f64>> = points.iter().map(|p| relative.transform_point(p)).collect();
    let world: Vec<Vector3<f64>> = local.iter().map(|q| prev_pose.transform_point(q)).collect();
    let r_prev_t = prev_pose.rotation_matrix().transpose();
    let mut grad = Vector6::zeros();
    let mut n = 0usize;
    for (q, s) in local.iter().zip(field.query(&world, GradientKind::MuAndSigma)) {
        let Some(s) = s else { continue };
        let (sigma, dsigma) = match mode {
            SigmaMode::Probabilistic => (s.sigma, s.dsigma_dx),
            SigmaMode::ConstantOne => (1.0, Vector3::zeros()),
        };
        let r = s.mu / sigma;
        let dr_dx = s.dmu_dx / sigma - dsigma * (s.mu / (sigma * sigma));
        let j = ((r_prev_t * dr_dx).transpose() * odot(q)).transpose();
        grad += j * r;
        n += 1;
    }
    if n == 0 {
        return Twist::zero();
    }
    let step = grad * (-alpha / n as f64);
    Twist::from_slice(step.as_slice())
}
