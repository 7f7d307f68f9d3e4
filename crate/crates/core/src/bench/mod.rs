//! Dataset IO, synthetic rendering and evaluation metrics.

mod eval;
mod render;
mod tum;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::Pose;

pub use eval::{evaluate_ate, evaluate_surface, hausdorff_to_shape, umeyama_rigid, AteReport, GroundTruth, SurfaceReport};
pub use render::{render_frame, render_synthetic, CameraPath, NoiseModel, SyntheticScene, Texture};
pub use tum::{load_tum_sequence, write_tum_sequence, TumSequence, DEPTH_SCALE};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("missing association file in {0}")]
    MissingAssociations(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("too few associated poses: {found} (need at least {required})")]
    TooFewAssociations { found: usize, required: usize },
    #[error("empty mesh after sigma filtering")]
    EmptyMesh,
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Timestamped camera-to-world poses, timestamps strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(f64, Pose)>) -> Result<Self, BenchError> {
        if let Some(w) = poses.windows(2).find(|w| !(w[1].0 > w[0].0)) {
            return Err(BenchError::Invalid(format!("timestamps not strictly increasing at {} -> {}", w[0].0, w[1].0)));
        }
        Ok(Self { poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// TUM text: `timestamp tx ty tz qx qy qz qw`, shortest round-trip
    /// float formatting.
    pub fn to_tum(&self) -> String {
        let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for (t, p) in &self.poses {
            let q = p.quaternion_xyzw();
            let tr = p.translation;
            let _ = writeln!(out, "{t} {} {} {} {} {} {} {}", tr.x, tr.y, tr.z, q[0], q[1], q[2], q[3]);
        }
        out
    }

    pub fn parse_tum(text: &str, source: &str) -> Result<Self, BenchError> {
        let mut poses = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| BenchError::Parse {
                path: source.to_string(),
                line: i + 1,
                message,
            };
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|w| w.parse::<f64>().map_err(|_| err(format!("not a number: '{w}'"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != 8 {
                return Err(err(format!("expected 8 fields, found {}", vals.len())));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(err("non-finite value".into()));
            }
            let q = [vals[4], vals[5], vals[6], vals[7]];
            if q.iter().map(|c| c * c).sum::<f64>() < 1e-12 {
                return Err(err("zero quaternion".into()));
            }
            poses.push((vals[0], Pose::from_quaternion_xyzw(q, Vector3::new(vals[1], vals[2], vals[3]))));
        }
        Self::new(poses)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        Self::parse_tum(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_tum())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    #[test]
    fn identity_line() {
        let t = Trajectory::parse_tum("0 0 0 0 0 0 0 1\n", "t").unwrap();
        assert_eq!(t.poses, vec![(0.0, Pose::identity())]);
    }

    #[test]
    fn tum_text_round_trip_is_exact() {
        let poses = (0..20)
            .map(|i| {
                let f = i as f64;
                let q = UnitQuaternion::from_euler_angles(0.1 * f, -0.03 * f, 0.7 / (f + 1.0));
                (1305031102.175304 + f / 30.0, Pose::new(q, Vector3::new(f.sin(), 1.0 / 3.0, -f * 1e-7)))
            })
            .collect();
        let t = Trajectory::new(poses).unwrap();
        assert_eq!(Trajectory::parse_tum(&t.to_tum(), "t").unwrap(), t);
    }

    #[test]
    fn parse_errors_report_lines() {
        let e = Trajectory::parse_tum("# c\n0 0 0 0 0 0 0 1\n1 0 0 x 0 0 0 1\n", "gt.txt").unwrap_err();
        assert!(matches!(e, BenchError::Parse { line: 3, .. }), "{e}");
        assert!(e.to_string().starts_with("gt.txt:3:"));
        let e = Trajectory::parse_tum("0 0 0 0 0 0 1\n", "t").unwrap_err();
        assert!(matches!(e, BenchError::Parse { line: 1, .. }));
        assert!(Trajectory::parse_tum("1 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n", "t").is_err());
    }
}
