//! The online loop: track each frame against the map, integrate every
//! N-th frame, extract a mesh on demand.
//!
//! Configuration is `key = value` text (`#` comments); the same keys are
//! accepted as overrides. Unknown keys and bad values are all reported at
//! once.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::bench::{load_tum_sequence, render_frame, BenchError, SyntheticScene, Trajectory};
use crate::field::NeuralField;
use crate::geometry::{Pose, RgbdFrame};
use crate::grid::{FusionMode, GridError, VoxelGrid, DEFAULT_LATENT_DIM, DEFAULT_VOXEL_SIZE};
use crate::map::{integrate, ColorCloud, IntegrationConfig, MapError};
use crate::mesh::{colorize_mesh, extract_mesh, write_ply, MeshIoError, MeshRequest, TriangleMesh, DEFAULT_SIGMA_THRESHOLD};
use crate::net::{bundled_prior, load_weights, NetError, NetWeights};
use crate::tracker::{track, SigmaMode, TrackError, TrackingConfig, TrackingFailure};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("weights: {0}")]
    Weights(#[from] NetError),
    #[error("input: {0}")]
    Input(#[from] BenchError),
    #[error("map: {0}")]
    Map(#[from] MapError),
    #[error("snapshot: {0}")]
    Snapshot(#[from] GridError),
    #[error("mesh: {0}")]
    Mesh(#[from] MeshIoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoseSource {
    #[default]
    Track,
    /// Use the ground-truth trajectory (mapping-only runs).
    Groundtruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub voxel_size: f64,
    pub latent_dim: usize,
    /// Latent regularizer weight used when training.
    pub delta: f64,
    pub tracking: TrackingConfig,
    pub integration: IntegrationConfig,
    pub pose_source: PoseSource,
    pub mesh_resolution: usize,
    pub sigma_threshold: f64,
    pub write_mesh: bool,
    pub color_mesh: bool,
    pub weights: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub max_frames: Option<usize>,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            voxel_size: DEFAULT_VOXEL_SIZE,
            latent_dim: DEFAULT_LATENT_DIM,
            delta: 1e-2,
            tracking: TrackingConfig::default(),
            integration: IntegrationConfig::default(),
            pose_source: PoseSource::Track,
            mesh_resolution: 8,
            sigma_threshold: DEFAULT_SIGMA_THRESHOLD,
            write_mesh: true,
            color_mesh: false,
            weights: None,
            input: None,
            scene: None,
            out: None,
            max_frames: None,
            seed: 0,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true|false, found '{v}'")),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("invalid value '{v}'"))
}

impl EngineConfig {
    /// Every key accepted by [`EngineConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "voxel_size",
        "latent_dim",
        "delta",
        "allocation_threshold",
        "every_n",
        "fusion_mode",
        "w_int",
        "huber_delta",
        "max_iters",
        "convergence_eps",
        "max_points",
        "min_points",
        "sigma_mode",
        "intensity_pixels",
        "intensity_full_domain",
        "intensity_blur",
        "depth_edge",
        "constant_velocity",
        "max_condition",
        "depth_min",
        "depth_max",
        "pose_source",
        "mesh_resolution",
        "sigma_threshold",
        "write_mesh",
        "color_mesh",
        "weights",
        "input",
        "scene",
        "out",
        "max_frames",
        "seed",
    ];

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let t = &mut self.tracking;
        match key {
            "voxel_size" => self.voxel_size = num(v)?,
            "latent_dim" => self.latent_dim = num(v)?,
            "delta" => self.delta = num(v)?,
            "allocation_threshold" => self.integration.allocation_threshold = num(v)?,
            "every_n" => self.integration.every_n = num(v)?,
            "fusion_mode" => self.integration.fusion_mode = v.parse::<FusionMode>()?,
            "w_int" => t.w_int = num(v)?,
            "huber_delta" => t.huber_delta = num(v)?,
            "max_iters" => t.max_iters = num(v)?,
            "convergence_eps" => t.convergence_eps = num(v)?,
            "max_points" => t.max_points = num(v)?,
            "min_points" => t.min_points = num(v)?,
            "sigma_mode" => t.sigma_mode = v.parse::<SigmaMode>()?,
            "intensity_pixels" => t.intensity_pixels = num(v)?,
            "intensity_full_domain" => t.intensity_full_domain = parse_bool(v)?,
            "intensity_blur" => t.intensity_blur = num(v)?,
            "depth_edge" => t.depth_edge = num(v)?,
            "constant_velocity" => t.constant_velocity = parse_bool(v)?,
            "max_condition" => t.max_condition = num(v)?,
            "depth_min" => {
                t.depth_range.min = num(v)?;
                self.integration.backproject.range.min = t.depth_range.min;
            }
            "depth_max" => {
                t.depth_range.max = num(v)?;
                self.integration.backproject.range.max = t.depth_range.max;
            }
            "pose_source" => {
                self.pose_source = match v {
                    "track" => PoseSource::Track,
                    "groundtruth" => PoseSource::Groundtruth,
                    _ => return Err(format!("expected track|groundtruth, found '{v}'")),
                }
            }
            "mesh_resolution" => self.mesh_resolution = num(v)?,
            "sigma_threshold" => self.sigma_threshold = num(v)?,
            "write_mesh" => self.write_mesh = parse_bool(v)?,
            "color_mesh" => {
                self.color_mesh = parse_bool(v)?;
                self.integration.retain_color = self.color_mesh;
            }
            "weights" => self.weights = Some(PathBuf::from(v)),
            "input" => self.input = Some(PathBuf::from(v)),
            "scene" => self.scene = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "max_frames" => self.max_frames = Some(num(v)?),
            "seed" => {
                self.seed = num(v)?;
                t.seed = self.seed;
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Applies `key = value` lines (or `key=value` overrides) on top of
    /// `self`, then validates. Every problem is reported.
    pub fn apply<'a>(mut self, lines: impl IntoIterator<Item = &'a str>) -> Result<Self, EngineError> {
        let mut errors = Vec::new();
        for (i, raw) in lines.into_iter().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected 'key = value'", i + 1));
                continue;
            };
            let k = k.trim();
            if let Err(e) = self.set(k, v) {
                errors.push(format!("{k}: {e}"));
            }
        }
        if let Err(EngineError::Config(more)) = self.validate() {
            errors.extend(more);
        }
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(EngineError::Config(errors))
        }
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().chain(overrides.iter().map(String::as_str)).collect();
        Self::default().apply(lines)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let mut bad = Vec::new();
        let t = &self.tracking;
        if !(self.voxel_size > 0.0) {
            bad.push(format!("voxel_size: must be positive, got {}", self.voxel_size));
        }
        if self.latent_dim == 0 {
            bad.push("latent_dim: must be positive".into());
        }
        if !(self.delta >= 0.0) {
            bad.push(format!("delta: must be non-negative, got {}", self.delta));
        }
        if self.integration.every_n == 0 {
            bad.push("every_n: must be at least 1".into());
        }
        if self.integration.allocation_threshold == 0 {
            bad.push("allocation_threshold: must be at least 1".into());
        }
        if !(t.w_int >= 0.0) {
            bad.push(format!("w_int: must be non-negative, got {}", t.w_int));
        }
        if !(t.huber_delta > 0.0) {
            bad.push(format!("huber_delta: must be positive, got {}", t.huber_delta));
        }
        if t.max_iters == 0 {
            bad.push("max_iters: must be at least 1".into());
        }
        if !(t.convergence_eps >= 0.0) {
            bad.push(format!("convergence_eps: must be non-negative, got {}", t.convergence_eps));
        }
        if !(t.intensity_blur >= 0.0) {
            bad.push(format!("intensity_blur: must be non-negative, got {}", t.intensity_blur));
        }
        if !(t.depth_edge >= 0.0) {
            bad.push(format!("depth_edge: must be non-negative, got {}", t.depth_edge));
        }
        if t.max_points == 0 {
            bad.push("max_points: must be at least 1".into());
        }
        if !(t.max_condition > 1.0) {
            bad.push(format!("max_condition: must exceed 1, got {}", t.max_condition));
        }
        if !(t.depth_range.min >= 0.0 && t.depth_range.max > t.depth_range.min) {
            bad.push(format!("depth_min/depth_max: invalid window [{}, {}]", t.depth_range.min, t.depth_range.max));
        }
        if self.mesh_resolution < 2 {
            bad.push(format!("mesh_resolution: must be at least 2, got {}", self.mesh_resolution));
        }
        if !(self.sigma_threshold >= 0.0) {
            bad.push(format!("sigma_threshold: must be non-negative, got {}", self.sigma_threshold));
        }
        if self.input.is_some() && self.scene.is_some() {
            bad.push("input/scene: give one frame source, not both".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Config(bad))
        }
    }

    /// Text form accepted by [`EngineConfig::apply`].
    pub fn to_text(&self) -> String {
        let t = &self.tracking;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("voxel_size", self.voxel_size.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("delta", self.delta.to_string());
        kv("allocation_threshold", self.integration.allocation_threshold.to_string());
        kv("every_n", self.integration.every_n.to_string());
        kv(
            "fusion_mode",
            match self.integration.fusion_mode {
                FusionMode::Mean => "mean",
                FusionMode::Max => "max",
            }
            .into(),
        );
        kv("w_int", t.w_int.to_string());
        kv("huber_delta", t.huber_delta.to_string());
        kv("max_iters", t.max_iters.to_string());
        kv("convergence_eps", t.convergence_eps.to_string());
        kv("max_points", t.max_points.to_string());
        kv("min_points", t.min_points.to_string());
        kv(
            "sigma_mode",
            match t.sigma_mode {
                SigmaMode::Probabilistic => "probabilistic",
                SigmaMode::ConstantOne => "constant_one",
            }
            .into(),
        );
        kv("intensity_pixels", t.intensity_pixels.to_string());
        kv("intensity_full_domain", t.intensity_full_domain.to_string());
        kv("intensity_blur", t.intensity_blur.to_string());
        kv("depth_edge", t.depth_edge.to_string());
        kv("constant_velocity", t.constant_velocity.to_string());
        kv("max_condition", t.max_condition.to_string());
        kv("depth_min", t.depth_range.min.to_string());
        kv("depth_max", t.depth_range.max.to_string());
        kv(
            "pose_source",
            match self.pose_source {
                PoseSource::Track => "track",
                PoseSource::Groundtruth => "groundtruth",
            }
            .into(),
        );
        kv("mesh_resolution", self.mesh_resolution.to_string());
        kv("sigma_threshold", self.sigma_threshold.to_string());
        kv("write_mesh", self.write_mesh.to_string());
        kv("color_mesh", self.color_mesh.to_string());
        for (k, p) in [("weights", &self.weights), ("input", &self.input), ("scene", &self.scene), ("out", &self.out)] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        if let Some(m) = self.max_frames {
            kv("max_frames", m.to_string());
        }
        kv("seed", self.seed.to_string());
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub track_ms: f64,
    pub integrate_ms: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Why the frame held the previous pose, if it did.
    pub failure: Option<String>,
    pub integrated: bool,
    pub voxels: usize,
}

#[derive(Clone, Debug)]
pub struct FusionOutcome {
    pub trajectory: Trajectory,
    pub grid: VoxelGrid,
    pub frames: Vec<FrameRecord>,
    pub mesh: Option<TriangleMesh>,
    pub colors: ColorCloud,
}

impl FusionOutcome {
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("frame,timestamp,track_ms,integrate_ms,iterations,converged,integrated,voxels,failure\n");
        for r in &self.frames {
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.3},{},{},{},{},{}",
                r.index,
                r.timestamp,
                r.track_ms,
                r.integrate_ms,
                r.iterations,
                r.converged,
                r.integrated,
                r.voxels,
                r.failure.as_deref().unwrap_or("")
            );
        }
        out
    }
}

/// Runs the loop over in-memory or streamed frames. `groundtruth` is only
/// read with `pose_source = groundtruth`; poses are then expressed relative
/// to its first entry so both modes share the first camera as world frame.
pub fn run_on_frames(
    cfg: &EngineConfig,
    net: &NetWeights,
    frames: impl IntoIterator<Item = RgbdFrame>,
    groundtruth: Option<&Trajectory>,
) -> Result<FusionOutcome, EngineError> {
    cfg.validate()?;
    if net.latent_dim() != cfg.latent_dim {
        return Err(EngineError::Config(vec![format!(
            "latent_dim: config says {} but the weights use {}",
            cfg.latent_dim,
            net.latent_dim()
        )]));
    }
    let gt_poses: Option<Vec<Pose>> = match (cfg.pose_source, groundtruth) {
        (PoseSource::Groundtruth, Some(gt)) if !gt.is_empty() => {
            let anchor = gt.poses[0].1.inverse();
            Some(gt.poses.iter().map(|(_, p)| anchor.compose(p)).collect())
        }
        (PoseSource::Groundtruth, _) => return Err(EngineError::Config(vec!["pose_source: groundtruth requested but no ground truth available".into()])),
        _ => None,
    };
    let mut grid = VoxelGrid::new(cfg.voxel_size, nalgebra::Vector3::zeros(), cfg.latent_dim)?;
    grid.allocation_threshold = cfg.integration.allocation_threshold;
    let mut colors = ColorCloud::default();
    let mut poses = Vec::new();
    let mut records = Vec::new();
    let mut prev: Option<RgbdFrame> = None;
    let mut prev_pose = Pose::identity();
    let mut velocity = Pose::identity();

    for (index, frame) in frames.into_iter().enumerate() {
        if cfg.max_frames.is_some_and(|m| index >= m) {
            break;
        }
        let mut record = FrameRecord {
            index,
            timestamp: frame.timestamp,
            track_ms: 0.0,
            integrate_ms: 0.0,
            iterations: 0,
            converged: true,
            failure: None,
            integrated: false,
            voxels: 0,
        };
        let start = Instant::now();
        let pose = if let Some(gt) = &gt_poses {
            match gt.get(index) {
                Some(p) => *p,
                None => {
                    log::warn!("frame {index}: no ground-truth pose; stopping");
                    break;
                }
            }
        } else if index == 0 {
            Pose::identity()
        } else {
            let field = NeuralField::new(&grid, net);
            let init = cfg.tracking.constant_velocity.then_some(velocity);
            match track(&frame, prev.as_ref(), &prev_pose, &field, &cfg.tracking, init) {
                Ok(r) => {
                    record.iterations = r.iterations;
                    record.converged = r.converged;
                    if let Some(TrackingFailure::DegenerateSystem { condition }) = r.failure {
                        record.failure = Some(format!("degenerate (condition {condition:.3e})"));
                    }
                    r.pose
                }
                Err(e @ TrackError::TooFewPoints { .. }) => {
                    record.failure = Some(e.to_string());
                    prev_pose
                }
                Err(e) => return Err(EngineError::Config(vec![e.to_string()])),
            }
        };
        record.track_ms = start.elapsed().as_secs_f64() * 1e3;
        if let Some(f) = &record.failure {
            log::warn!("frame {index}: {f}; holding previous pose");
        }
        if record.failure.is_none() && cfg.integration.should_integrate(index) {
            let t0 = Instant::now();
            integrate(&frame, &pose, &mut grid, net, &cfg.integration, Some(&mut colors))?;
            record.integrate_ms = t0.elapsed().as_secs_f64() * 1e3;
            record.integrated = true;
        }
        record.voxels = grid.len();
        log::info!(
            "frame {index}: {} iters, {:.1} ms track, {} voxels",
            record.iterations,
            record.track_ms,
            record.voxels
        );
        velocity = prev_pose.inverse().compose(&pose);
        poses.push((frame.timestamp, pose));
        prev_pose = pose;
        prev = Some(frame);
        records.push(record);
    }
    let trajectory = Trajectory::new(poses)?;
    let mesh = cfg.write_mesh.then(|| {
        let m = extract_mesh(&grid, net, &MeshRequest {
            resolution: cfg.mesh_resolution,
            iso: 0.0,
        });
        if cfg.color_mesh && !colors.is_empty() {
            colorize_mesh(&m, &colors, 4, cfg.voxel_size / 2.0)
        } else {
            m
        }
    });
    Ok(FusionOutcome {
        trajectory,
        grid,
        frames: records,
        mesh,
        colors,
    })
}

/// Loads the configured weights (the bundled prior if none) and frame source, runs the loop and
/// writes `trajectory.txt`, `map.pliv`, `timing.csv` and `mesh.ply` under
/// `out`.
pub fn run_fusion(cfg: &EngineConfig) -> Result<FusionOutcome, EngineError> {
    cfg.validate()?;
    if cfg.input.is_none() && cfg.scene.is_none() {
        return Err(EngineError::Config(vec!["input/scene: one frame source is required".into()]));
    }
    let net = match &cfg.weights {
        Some(path) => load_weights(path, Some(cfg.latent_dim))?,
        None => bundled_prior(),
    };
    let outcome = if let Some(dir) = &cfg.input {
        let seq = load_tum_sequence(dir)?;
        let gt = seq.groundtruth.clone();
        run_on_frames(cfg, &net, seq.frames(), gt.as_ref())?
    } else {
        let path = cfg.scene.as_ref().unwrap();
        let scene: SyntheticScene = std::fs::read_to_string(path)?.parse()?;
        let traj = scene
            .path
            .ok_or_else(|| EngineError::Config(vec![format!("scene: {} has no camera path", path.display())]))?
            .trajectory();
        let frames = traj.poses.iter().enumerate().map(|(i, (t, p))| render_frame(&scene, p, *t, i));
        run_on_frames(cfg, &net, frames, Some(&traj))?
    };
    if let Some(out) = &cfg.out {
        write_outputs(out, &outcome)?;
    }
    Ok(outcome)
}

pub fn write_outputs(out: &Path, outcome: &FusionOutcome) -> Result<(), EngineError> {
    std::fs::create_dir_all(out)?;
    outcome.trajectory.save(&out.join("trajectory.txt"))?;
    outcome.grid.save(&out.join("map.pliv"))?;
    let tmp = out.join("timing.csv.tmp");
    std::fs::write(&tmp, outcome.timing_csv())?;
    std::fs::rename(tmp, out.join("timing.csv"))?;
    if let Some(mesh) = &outcome.mesh {
        write_ply(mesh, &out.join("mesh.ply"))?;
    }
    Ok(())
}
