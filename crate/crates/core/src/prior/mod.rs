//! Training the shared encoder/decoder prior on a procedural shape corpus.

mod adam;
mod calibration;
mod corpus;
mod train;

use std::path::PathBuf;

use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid::LocalPoint;
use crate::net::{LossKind, NetError, NetWeights, TrainItem, HALF_LN_TWO_PI};
use crate::shapes::Shape;

pub use adam::{read_checkpoint, write_checkpoint, Adam};
pub use calibration::{calibration_report, coverage_table, CalibrationReport, CoverageRow};
pub use corpus::{procedural_shape, ShapeCorpus};
pub use train::{train, train_from, write_loss_curve, EpochStats, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("voxel does not meet the surface: {0}")]
    NoSurface(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("held-out set is empty")]
    EmptyHeldOut,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Latent norm regularizer weight.
    pub delta: f64,
    /// Initial learning rate.
    pub lr: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Voxels per optimizer step.
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Decoder samples per voxel.
    pub n_d: usize,
    /// Inclusive range for the number of encoder points per voxel.
    pub n_s: (usize, usize),
    /// Voxel edge length in corpus units.
    pub voxel_size: f64,
    /// Half-width of the cube decoder samples are drawn from, in voxel
    /// units. 0.5 is the voxel itself, 1.0 the doubled meshing domain.
    pub decoder_domain: f64,
    /// Std of the near-surface perturbations, voxel units.
    pub near_sigmas: [f64; 2],
    /// Std of encoder position jitter, voxel units.
    pub position_jitter: f64,
    /// Maximum encoder normal perturbation in degrees.
    pub normal_perturbation_deg: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 1e-2,
            lr: 1e-3,
            lr_decay: 1.0,
            batch: 8,
            epochs: 20,
            steps_per_epoch: 25,
            n_d: 4096,
            n_s: (16, 128),
            voxel_size: 1.0,
            decoder_domain: 0.5,
            near_sigmas: [0.05, 0.01],
            position_jitter: 0.01,
            normal_perturbation_deg: 5.0,
            loss: LossKind::GaussianNll,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PriorError> {
        let mut bad = Vec::new();
        if !(self.delta > 0.0) {
            bad.push(format!("delta = {}", self.delta));
        }
        if !(self.lr >= 0.0) {
            bad.push(format!("lr = {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            bad.push(format!("lr_decay = {}", self.lr_decay));
        }
        if self.batch == 0 {
            bad.push("batch = 0".to_string());
        }
        if self.n_d == 0 {
            bad.push("n_d = 0".to_string());
        }
        if self.n_s.0 == 0 || self.n_s.0 > self.n_s.1 {
            bad.push(format!("n_s = {:?}", self.n_s));
        }
        if !(self.voxel_size > 0.0) {
            bad.push(format!("voxel_size = {}", self.voxel_size));
        }
        if !(self.decoder_domain >= 0.5) {
            bad.push(format!("decoder_domain = {}", self.decoder_domain));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(PriorError::InvalidConfig(bad.join(", ")))
        }
    }
}

/// Encoder context and decoder targets for one voxel, in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainVoxelSample {
    pub surface: Vec<LocalPoint>,
    pub samples: Vec<(Vector3<f64>, f64)>,
}

impl TrainVoxelSample {
    pub fn as_item(&self) -> TrainItem<'_> {
        TrainItem {
            surface: &self.surface,
            samples: &self.samples,
        }
    }
}

/// Surface points of `shape` inside the cube of half-width `half` (voxel
/// units) around `center`, as local coordinates with outward normals.
fn surface_points(
    shape: &Shape,
    center: &Vector3<f64>,
    a: f64,
    half: f64,
    want: usize,
    rng: &mut impl Rng,
) -> Vec<LocalPoint> {
    let mut out = Vec::with_capacity(want);
    let budget = 64 * want.max(16);
    for _ in 0..budget {
        if out.len() == want {
            break;
        }
        let y0 = uniform_cube(rng, half);
        let Some(x) = shape.project_to_surface(&(center + y0 * a)) else {
            continue;
        };
        let y = (x - center) / a;
        if y.amax() > half {
            continue;
        }
        let g = shape.gradient(&x);
        if (g.norm() - 1.0).abs() > 1e-6 {
            continue;
        }
        out.push(LocalPoint { y, n: g });
    }
    out
}

fn uniform_cube(rng: &mut impl Rng, half: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

fn gaussian3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

/// Rotates `n` by a random angle in `[0, max_rad]` about a random axis
/// perpendicular to it.
fn perturb_normal(n: &Vector3<f64>, max_rad: f64, rng: &mut impl Rng) -> Vector3<f64> {
    if max_rad <= 0.0 {
        return *n;
    }
    let axis = gaussian3(rng);
    let perp = axis - n * n.dot(&axis);
    if perp.norm() < 1e-9 {
        return *n;
    }
    let angle = rng.random_range(0.0..max_rad);
    UnitQuaternion::from_axis_angle(&Unit::new_normalize(perp), angle) * n
}

/// Draws the encoder set and decoder set for the voxel centred at
/// `center` with edge `cfg.voxel_size`.
pub fn sample_voxel(
    shape: &Shape,
    center: &Vector3<f64>,
    n_s: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainVoxelSample, PriorError> {
    let a = cfg.voxel_size;
    let d0 = shape.sdf(center);
    if d0.abs() >= a {
        return Err(PriorError::NoSurface(format!("|sdf(centroid)| = {} ≥ a", d0.abs())));
    }
    let exact = surface_points(shape, center, a, 0.5, n_s, rng);
    if exact.len() < cfg.n_s.0.min(n_s) {
        return Err(PriorError::NoSurface(format!("only {} surface points inside the voxel", exact.len())));
    }
    let max_rad = cfg.normal_perturbation_deg.to_radians();
    let surface = exact
        .iter()
        .map(|p| LocalPoint {
            y: p.y + gaussian3(rng) * cfg.position_jitter,
            n: perturb_normal(&p.n, max_rad, rng),
        })
        .collect();

    let half = cfg.decoder_domain;
    let pool = if half > 0.5 {
        let wider = surface_points(shape, center, a, half, 256, rng);
        if wider.is_empty() {
            exact.clone()
        } else {
            wider
        }
    } else {
        exact.clone()
    };
    let n_near = (cfg.n_d * 45) / 100;
    let mut samples = Vec::with_capacity(cfg.n_d);
    for i in 0..cfg.n_d {
        let y = if i < 2 * n_near {
            let sigma = cfg.near_sigmas[if i < n_near { 0 } else { 1 }];
            loop {
                let base = pool[rng.random_range(0..pool.len())].y;
                let y = base + gaussian3(rng) * sigma;
                if y.amax() <= half {
                    break y;
                }
            }
        } else {
            uniform_cube(rng, half)
        };
        let s = shape.sdf(&(center + y * a)) / a;
        samples.push((y, s));
    }
    Ok(TrainVoxelSample { surface, samples })
}

/// Picks a random voxel of a randomly offset grid that contains a surface
/// point of `shape`, and samples it.
pub fn sample_random_voxel(
    shape: &Shape,
    extent: f64,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainVoxelSample, PriorError> {
    let a = cfg.voxel_size;
    for _ in 0..100 {
        let Some(x) = shape.project_to_surface(&uniform_cube(rng, extent)) else {
            continue;
        };
        if x.amax() > extent {
            continue;
        }
        let offset = uniform_cube(rng, 0.5) * a;
        let center = ((x - offset) / a).map(|c| c.floor() + 0.5) * a + offset;
        let n_s = rng.random_range(cfg.n_s.0..=cfg.n_s.1);
        match sample_voxel(shape, &center, n_s, cfg, rng) {
            Ok(s) => return Ok(s),
            Err(PriorError::NoSurface(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(PriorError::NoSurface("no surface voxel found after 100 attempts".into()))
}

/// Per-voxel loss: Gaussian NLL summed over the decoder set plus `δ‖l‖²`.
pub fn cnp_loss(sample: &TrainVoxelSample, weights: &NetWeights, delta: f64) -> Result<f64, PriorError> {
    let latent = weights.encode_points(&sample.surface)?;
    let mut batch = crate::net::DecoderBatch::with_capacity(latent.len(), sample.samples.len());
    for (y, _) in &sample.samples {
        batch.push(y, &latent);
    }
    let decoded = weights.decode_batch(&batch);
    let nll: f64 = decoded
        .iter()
        .zip(&sample.samples)
        .map(|(d, (_, s))| gaussian_nll(d.mu, d.sigma, *s))
        .sum();
    Ok(nll + delta * latent.iter().map(|l| l * l).sum::<f64>())
}

pub fn gaussian_nll(mu: f64, sigma: f64, s: f64) -> f64 {
    let e = s - mu;
    HALF_LN_TWO_PI + sigma.ln() + e * e / (2.0 * sigma * sigma)
}
