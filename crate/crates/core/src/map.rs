//! Latent-space integration of depth frames into the voxel map.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{backproject_with, BackprojectOptions, GeometryError, OrientedPointCloud, Pose, RgbdFrame};
use crate::grid::{FusionMode, LocalPoint, VoxelGrid, VoxelIndex, DEFAULT_ALLOCATION_THRESHOLD};
use crate::net::{DecoderBatch, NetError, NetWeights};
use crate::shapes::Shape;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("integration configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrationConfig {
    /// Integrate every N-th frame.
    pub every_n: usize,
    pub fusion_mode: FusionMode,
    pub allocation_threshold: usize,
    pub backproject: BackprojectOptions,
    /// Keep colored world points for mesh texturing.
    pub retain_color: bool,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            every_n: 5,
            fusion_mode: FusionMode::Mean,
            allocation_threshold: DEFAULT_ALLOCATION_THRESHOLD,
            backproject: BackprojectOptions::default(),
            retain_color: false,
        }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<(), MapError> {
        if self.every_n == 0 {
            return Err(MapError::InvalidConfig("every_n must be at least 1".into()));
        }
        if self.allocation_threshold == 0 {
            return Err(MapError::InvalidConfig("allocation_threshold must be at least 1".into()));
        }
        Ok(())
    }

    pub fn should_integrate(&self, frame_index: usize) -> bool {
        frame_index % self.every_n == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub points: usize,
    pub accepted_points: usize,
    pub withheld_points: usize,
    pub voxels_updated: usize,
    pub voxels_allocated: usize,
}

/// World-frame colored points retained for texturing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColorCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
}

impl ColorCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vector3<f64>, c: [u8; 3]) {
        self.points.push(p);
        self.colors.push(c);
    }
}

/// Encodes a world-frame cloud bucket by bucket and fuses the latents.
pub fn integrate_cloud(cloud: &OrientedPointCloud, grid: &mut VoxelGrid, net: &NetWeights, mode: FusionMode) -> Result<IntegrationStats, MapError> {
    let buckets = grid.bucket_points(cloud);
    let accepted: Vec<(VoxelIndex, Vec<_>)> = buckets.accepted.into_iter().collect();
    let encoded: Vec<(VoxelIndex, Vec<f64>, u32)> = accepted
        .par_iter()
        .map(|(k, pts)| Ok((*k, net.encode_points(pts)?, pts.len() as u32)))
        .collect::<Result<_, NetError>>()?;
    let mut stats = IntegrationStats {
        points: cloud.len(),
        withheld_points: buckets.withheld.values().sum(),
        ..Default::default()
    };
    for (k, latent, w) in encoded {
        if !grid.contains(&k) {
            stats.voxels_allocated += 1;
        }
        grid.fuse(k, &latent, w, mode);
        stats.voxels_updated += 1;
        stats.accepted_points += w as usize;
    }
    Ok(stats)
}

/// Back-projects `frame`, moves it to the world with `pose` and fuses it.
/// A frame without usable depth is a no-op.
pub fn integrate(
    frame: &RgbdFrame,
    pose: &Pose,
    grid: &mut VoxelGrid,
    net: &NetWeights,
    cfg: &IntegrationConfig,
    colors: Option<&mut ColorCloud>,
) -> Result<IntegrationStats, MapError> {
    cfg.validate()?;
    let pc = match backproject_with(frame, &cfg.backproject) {
        Ok(pc) => pc,
        Err(GeometryError::EmptyCloud) => return Ok(IntegrationStats::default()),
        Err(e) => return Err(e.into()),
    };
    let world = pc.cloud.transformed(pose);
    if let (true, Some(out), Some(rgb)) = (cfg.retain_color, colors, frame.color.as_ref()) {
        let w = frame.intrinsics.width;
        for (p, (u, v)) in world.points.iter().zip(&pc.pixels) {
            out.push(*p, rgb[v * w + u]);
        }
    }
    grid.allocation_threshold = cfg.allocation_threshold;
    integrate_cloud(&world, grid, net, cfg.fusion_mode)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    /// Levenberg-Marquardt iterations per voxel.
    pub steps: usize,
    /// Initial damping.
    pub damping: f64,
    /// Supervision samples per voxel over the doubled domain, half of them
    /// near the surface.
    pub samples: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            damping: 1e-3,
            samples: 512,
            seed: 0,
        }
    }
}

/// Builds a map of an analytic shape: every voxel within one voxel of the
/// surface inside `[lo, hi]` gets a latent optimized, with the decoder
/// frozen and the encoder output as starting point, so that `μ` matches the true distance over the doubled domain.
pub fn fit_shape_map(
    shape: &Shape,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    voxel_size: f64,
    net: &NetWeights,
    cfg: &FitConfig,
) -> Result<VoxelGrid, MapError> {
    let mut grid = VoxelGrid::new(voxel_size, Vector3::zeros(), net.latent_dim()).map_err(|e| MapError::InvalidConfig(e.to_string()))?;
    let kmin = grid.voxel_index(&lo);
    let kmax = grid.voxel_index(&hi);
    let mut keys = Vec::new();
    for i in kmin.0[0]..=kmax.0[0] {
        for j in kmin.0[1]..=kmax.0[1] {
            for k in kmin.0[2]..=kmax.0[2] {
                let key = VoxelIndex([i, j, k]);
                if shape.sdf(&grid.centroid(key)).abs() < voxel_size {
                    keys.push(key);
                }
            }
        }
    }
    let fitted: Vec<(VoxelIndex, Vec<f32>)> = keys
        .par_iter()
        .map(|&key| {
            let seed = cfg.seed ^ (key.0[0] as u64).wrapping_mul(0x9e37_79b9) ^ (key.0[1] as u64).wrapping_mul(0x85eb_ca6b) ^ (key.0[2] as u64).wrapping_mul(0xc2b2_ae35);
            (key, fit_voxel(shape, grid.centroid(key), voxel_size, net, cfg, seed))
        })
        .collect();
    for (key, latent) in fitted {
        grid.insert(key, latent, 1).map_err(|e| MapError::InvalidConfig(e.to_string()))?;
    }
    Ok(grid)
}

fn fit_voxel(shape: &Shape, center: Vector3<f64>, a: f64, net: &NetWeights, cfg: &FitConfig, seed: u64) -> Vec<f32> {
    let dim = net.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cube = |half: f64| Vector3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half));
    let mut surface = Vec::new();
    let mut near = Vec::new();
    for _ in 0..4 * cfg.samples {
        if near.len() >= cfg.samples / 2 {
            break;
        }
        let Some(x) = shape.project_to_surface(&(center + cube(1.0) * a)) else { continue };
        let y = (x - center) / a;
        if y.amax() <= 0.5 && surface.len() < 128 {
            surface.push(LocalPoint { y, n: shape.gradient(&x) });
        }
        let jittered = y + cube(0.05);
        if jittered.amax() <= 1.0 {
            near.push(jittered);
        }
    }
    let uniform = cfg.samples - near.len();
    let samples: Vec<(Vector3<f64>, f64)> = near
        .into_iter()
        .chain((0..uniform).map(|_| cube(1.0)))
        .map(|y| (y, shape.sdf(&(center + y * a)) / a))
        .collect();

    let mut latent = if surface.is_empty() {
        vec![0.0; dim]
    } else {
        net.encode_points(&surface).unwrap_or_else(|_| vec![0.0; dim])
    };
    let width = 3 + dim;
    let n = samples.len();
    let residuals = |latent: &[f64]| -> (Vec<f64>, crate::net::Trace) {
        let mut batch = DecoderBatch::with_capacity(dim, n);
        for (y, _) in &samples {
            batch.push(y, latent);
        }
        let trace = net.decoder.forward_traced(batch.inputs().to_vec(), n);
        let r = trace.output().chunks_exact(2).zip(&samples).map(|(o, (_, s))| o[0] - s).collect();
        (r, trace)
    };
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let (mut r, mut trace) = residuals(&latent);
    let mut current = cost(&r);
    let mut lambda = cfg.damping;
    for _ in 0..cfg.steps {
        let mut seed_grad = vec![0.0; 2 * n];
        seed_grad.iter_mut().step_by(2).for_each(|v| *v = 1.0);
        let jac = net.decoder.backward(&trace, seed_grad, None);
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for (row, rj) in jac.chunks_exact(width).zip(&r) {
            let j = DVector::from_column_slice(&row[3..]);
            h.ger(1.0, &j, &j, 1.0);
            g.axpy(*rj, &j, 1.0);
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = h.clone();
            for i in 0..dim {
                damped[(i, i)] += lambda * (h[(i, i)] + 1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let trial: Vec<f64> = latent.iter().zip(step.iter()).map(|(l, d)| l + d).collect();
            let (r_trial, trace_trial) = residuals(&trial);
            let c = cost(&r_trial);
            if c < current {
                latent = trial;
                r = r_trial;
                trace = trace_trial;
                improved = current - c > 1e-12 * current;
                current = c;
                lambda = (lambda / 3.0).max(1e-12);
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    latent.into_iter().map(|l| l as f32).collect()
}
