//! Sphere-traced RGB-D rendering of analytic scenes.
//!
//! Scene files are line based; `#` starts a comment:
//!
//! ```text
//! shape (complement (cuboid 2 1.6 1.25 :at 0 0 1.25))   # repeated lines are unioned
//! light 0.3 0.4 -1          # direction the light travels, world frame
//! ambient 0.35
//! texture 9 0.35            # spatial frequency (rad/m), amplitude
//! color 0.9 0.8 0.7
//! intrinsics 160 160 79.5 59.5 160 120
//! orbit 0 0 1.3  0.25  0 90  1.5 -0.5  60 30
//! noise 0.005 0.0 7         # k (σ = k·d²), dropout, seed
//! quantize true
//! ```
//!
//! `orbit cx cy cz radius start_deg sweep_deg look_dist look_dz frames fps`
//! places the camera on a horizontal circle around `c` (z up) looking
//! outward at a point `look_dist` meters away (inward when negative),
//! `look_dz` below eye height.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::tum::{intensity_from_rgb, quantize_depth};
use super::{BenchError, Trajectory};
use crate::geometry::{Image, Intrinsics, Pose, RgbdFrame};
use crate::shapes::Shape;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    /// Radians per meter.
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Depth noise standard deviation is `k·d²`.
    pub depth_k: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Round depth to the 1/5000 m grid of 16-bit PNG storage.
    pub quantize: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            depth_k: 0.0,
            dropout: 0.0,
            seed: 0,
            quantize: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CameraPath {
    Orbit {
        center: Vector3<f64>,
        radius: f64,
        start_deg: f64,
        sweep_deg: f64,
        look_dist: f64,
        look_dz: f64,
        frames: usize,
        fps: f64,
    },
}

impl CameraPath {
    pub fn trajectory(&self) -> Trajectory {
        match *self {
            CameraPath::Orbit {
                center,
                radius,
                start_deg,
                sweep_deg,
                look_dist,
                look_dz,
                frames,
                fps,
            } => {
                let poses = (0..frames)
                    .map(|i| {
                        let s = if frames > 1 { i as f64 / (frames - 1) as f64 } else { 0.0 };
                        let theta = (start_deg + s * sweep_deg).to_radians();
                        let dir = Vector3::new(theta.cos(), theta.sin(), 0.0);
                        let eye = center + dir * radius;
                        let target = eye + dir * look_dist + Vector3::new(0.0, 0.0, look_dz);
                        (i as f64 / fps, look_at(&eye, &target, &Vector3::z()))
                    })
                    .collect();
                Trajectory { poses }
            }
        }
    }
}

/// Camera-to-world pose at `eye` looking at `target` (camera x right,
/// y down, z forward).
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let x = z.cross(up).normalize();
    let y = z.cross(&x);
    Pose::from_matrix(&Matrix3::from_columns(&[x, y, z]), *eye)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub shape: Shape,
    /// Direction the light travels.
    pub light: Vector3<f64>,
    pub ambient: f64,
    pub texture: Texture,
    pub color: [f64; 3],
    pub intrinsics: Intrinsics,
    pub path: Option<CameraPath>,
    pub noise: NoiseModel,
    pub max_depth: f64,
    pub max_steps: usize,
    /// Hit tolerance in meters.
    pub epsilon: f64,
}

impl SyntheticScene {
    pub fn new(shape: Shape, intrinsics: Intrinsics) -> Self {
        Self {
            shape,
            light: Vector3::new(0.3, 0.4, -1.0),
            ambient: 0.35,
            texture: Texture {
                frequency: 9.0,
                amplitude: 0.35,
            },
            color: [0.9, 0.8, 0.7],
            intrinsics,
            path: None,
            noise: NoiseModel::default(),
            max_depth: 10.0,
            max_steps: 64,
            epsilon: 1e-4,
        }
    }

    /// A box room (4 × 3.2 × 2.5 m) with a cluster of objects near its
    /// middle, circled at 1.1 m with the camera looking at the cluster.
    pub fn room(intrinsics: Intrinsics, frames: usize) -> Self {
        let text = format!(
            "shape (complement (cuboid 2 1.6 1.25 :at 0 0 1.25))\n\
             shape (cuboid 0.3 0.25 0.35 :at 0.2 -0.25 0.35)\n\
             shape (sphere 0.25 :at -0.35 0.25 0.25)\n\
             shape (torus 0.3 0.08 :at 0.3 0.45 0.08)\n\
             shape (sphere 0.15 :at 0.15 -0.2 0.85)\n\
             orbit 0 0 1.2 1.1 200 45 -1.1 -0.8 {frames} 30\n"
        );
        let mut s: SyntheticScene = text.parse().expect("built-in room scene parses");
        s.intrinsics = intrinsics;
        s
    }

    /// A lone sphere of radius 0.4 m circled from 1.2 m.
    pub fn sphere(intrinsics: Intrinsics, frames: usize) -> Self {
        let text = format!(
            "shape (sphere 0.4 :at 0 0 0.4)\n\
             orbit 0 0 0.4 1.2 180 360 -1.2 0 {frames} 30\n"
        );
        let mut s: SyntheticScene = text.parse().expect("built-in sphere scene parses");
        s.intrinsics = intrinsics;
        s
    }

    fn albedo(&self, x: &Vector3<f64>) -> f64 {
        let f = self.texture.frequency;
        let t = ((f * x.x).sin() + (f * x.y).sin() + (f * x.z).sin()) / 3.0;
        (0.6 + self.texture.amplitude * t).clamp(0.0, 1.0)
    }

    fn normal(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-5;
        let mut g = Vector3::zeros();
        for d in 0..3 {
            let mut e = Vector3::zeros();
            e[d] = h;
            g[d] = self.shape.sdf(&(x + e)) - self.shape.sdf(&(x - e));
        }
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            Vector3::z()
        }
    }

    /// Ray parameter of the first hit along a unit direction.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..self.max_steps {
            let d = self.shape.sdf(&(origin + dir * t));
            if d.abs() < self.epsilon {
                return Some(t);
            }
            t += d;
            if t > self.max_depth || t < 0.0 {
                return None;
            }
        }
        None
    }
}

/// Renders one noiseless frame plus the noise of `noise` seeded by
/// `frame_index`.
pub fn render_frame(scene: &SyntheticScene, pose: &Pose, timestamp: f64, frame_index: usize) -> RgbdFrame {
    let k = scene.intrinsics;
    let r = pose.rotation_matrix();
    let origin = pose.translation;
    let light = scene.light.normalize();
    let pixels: Vec<(f32, [u8; 3])> = (0..k.width * k.height)
        .into_par_iter()
        .map(|idx| {
            let (u, v) = (idx % k.width, idx / k.width);
            let cam = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0).normalize();
            let dir = r * cam;
            match scene.trace(&origin, &dir) {
                Some(t) => {
                    let x = origin + dir * t;
                    let n = scene.normal(&x);
                    let shade = scene.ambient + (1.0 - scene.ambient) * (-n.dot(&light)).max(0.0);
                    let a = scene.albedo(&x) * shade;
                    let rgb = scene.color.map(|c| (c * a * 255.0).round().clamp(0.0, 255.0) as u8);
                    ((t * cam.z) as f32, rgb)
                }
                None => (0.0, [0, 0, 0]),
            }
        })
        .collect();
    let mut depth = Image::from_fn(k.width, k.height, |u, v| pixels[v * k.width + u].0);
    let noise = &scene.noise;
    if noise.depth_k > 0.0 || noise.dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ frame_index as u64);
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        for d in depth.data.iter_mut() {
            // draw both numbers for every pixel so the stream does not
            // depend on which pixels are valid
            let z: f64 = std.sample(&mut rng);
            let drop = rng.random_bool(noise.dropout.clamp(0.0, 1.0));
            if *d > 0.0 {
                let dd = *d as f64;
                *d = if drop { 0.0 } else { (dd + noise.depth_k * dd * dd * z).max(0.0) as f32 };
            }
        }
    }
    if noise.quantize {
        depth.data.iter_mut().for_each(|d| *d = quantize_depth(*d));
    }
    let color: Vec<[u8; 3]> = pixels.iter().map(|p| p.1).collect();
    let intensity = Image::from_fn(k.width, k.height, |u, v| intensity_from_rgb(color[v * k.width + u]));
    RgbdFrame {
        intensity,
        depth,
        color: Some(color),
        intrinsics: k,
        timestamp,
    }
}

pub fn render_synthetic(scene: &SyntheticScene, trajectory: &Trajectory) -> Result<Vec<RgbdFrame>, BenchError> {
    if trajectory.is_empty() {
        return Err(BenchError::Invalid("empty trajectory".into()));
    }
    Ok(trajectory
        .poses
        .iter()
        .enumerate()
        .map(|(i, (t, p))| render_frame(scene, p, *t, i))
        .collect())
}

impl FromStr for SyntheticScene {
    type Err = BenchError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let default_k = Intrinsics::new(160.0, 160.0, 79.5, 59.5, 160, 120).expect("valid");
        let mut scene = SyntheticScene::new(Shape::Union(Vec::new()), default_k);
        let mut shapes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| BenchError::Parse {
                path: "scene".into(),
                line: i + 1,
                message,
            };
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let nums = || -> Result<Vec<f64>, BenchError> {
                rest.split_whitespace()
                    .map(|w| w.parse::<f64>().map_err(|_| err(format!("not a number: '{w}'"))))
                    .collect()
            };
            let want = |n: usize| -> Result<Vec<f64>, BenchError> {
                let v = nums()?;
                if v.len() == n {
                    Ok(v)
                } else {
                    Err(err(format!("'{key}' takes {n} values, found {}", v.len())))
                }
            };
            match key {
                "shape" => shapes.push(rest.trim().parse::<Shape>().map_err(|e| err(e.to_string()))?),
                "light" => {
                    let v = want(3)?;
                    scene.light = Vector3::new(v[0], v[1], v[2]);
                    if scene.light.norm() == 0.0 {
                        return Err(err("light direction is zero".into()));
                    }
                }
                "ambient" => scene.ambient = want(1)?[0],
                "texture" => {
                    let v = want(2)?;
                    scene.texture = Texture {
                        frequency: v[0],
                        amplitude: v[1],
                    };
                }
                "color" => {
                    let v = want(3)?;
                    scene.color = [v[0], v[1], v[2]];
                }
                "max_depth" => scene.max_depth = want(1)?[0],
                "max_steps" => scene.max_steps = want(1)?[0] as usize,
                "epsilon" => scene.epsilon = want(1)?[0],
                "intrinsics" => {
                    let v = want(6)?;
                    scene.intrinsics = Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize).map_err(|e| err(e.to_string()))?;
                }
                "orbit" => {
                    let v = want(10)?;
                    if v[8] < 1.0 || v[9] <= 0.0 {
                        return Err(err("orbit needs at least one frame and a positive fps".into()));
                    }
                    scene.path = Some(CameraPath::Orbit {
                        center: Vector3::new(v[0], v[1], v[2]),
                        radius: v[3],
                        start_deg: v[4],
                        sweep_deg: v[5],
                        look_dist: v[6],
                        look_dz: v[7],
                        frames: v[8] as usize,
                        fps: v[9],
                    });
                }
                "noise" => {
                    let v = want(3)?;
                    scene.noise.depth_k = v[0];
                    scene.noise.dropout = v[1];
                    scene.noise.seed = v[2] as u64;
                }
                "quantize" => {
                    scene.noise.quantize = match rest.trim() {
                        "true" => true,
                        "false" => false,
                        other => return Err(err(format!("expected true|false, found '{other}'"))),
                    }
                }
                other => return Err(err(format!("unknown key '{other}'"))),
            }
        }
        if shapes.is_empty() {
            return Err(BenchError::Invalid("scene has no shape".into()));
        }
        scene.shape = if shapes.len() == 1 { shapes.pop().unwrap() } else { Shape::Union(shapes) };
        Ok(scene)
    }
}

impl fmt::Display for SyntheticScene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.shape {
            Shape::Union(parts) => {
                for p in parts {
                    writeln!(f, "shape {p}")?;
                }
            }
            s => writeln!(f, "shape {s}")?,
        }
        let l = self.light;
        writeln!(f, "light {} {} {}", l.x, l.y, l.z)?;
        writeln!(f, "ambient {}", self.ambient)?;
        writeln!(f, "texture {} {}", self.texture.frequency, self.texture.amplitude)?;
        writeln!(f, "color {} {} {}", self.color[0], self.color[1], self.color[2])?;
        writeln!(f, "max_depth {}", self.max_depth)?;
        writeln!(f, "max_steps {}", self.max_steps)?;
        writeln!(f, "epsilon {}", self.epsilon)?;
        let k = self.intrinsics;
        writeln!(f, "intrinsics {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height)?;
        if let Some(CameraPath::Orbit {
            center,
            radius,
            start_deg,
            sweep_deg,
            look_dist,
            look_dz,
            frames,
            fps,
        }) = self.path
        {
            writeln!(
                f,
                "orbit {} {} {} {radius} {start_deg} {sweep_deg} {look_dist} {look_dz} {frames} {fps}",
                center.x, center.y, center.z
            )?;
        }
        let n = self.noise;
        writeln!(f, "noise {} {} {}", n.depth_k, n.dropout, n.seed)?;
        writeln!(f, "quantize {}", n.quantize)
    }
}
