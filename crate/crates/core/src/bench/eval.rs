//! Trajectory and surface accuracy metrics.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::{BenchError, Trajectory};
use crate::geometry::Pose;
use crate::mesh::{TriangleIndex, TriangleMesh};
use crate::shapes::Shape;

/// Maximum timestamp difference for associating poses.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;
const MAX_SURFACE_SAMPLES: usize = 200_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// `(estimate timestamp, translational error)` per associated pair.
    pub errors: Vec<(f64, f64)>,
    /// Maps the estimate onto the ground truth.
    pub alignment: Pose,
}

impl AteReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp,error_m\n");
        for (t, e) in &self.errors {
            out += &format!("{t},{e}\n");
        }
        out
    }
}

impl fmt::Display for AteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pairs  {}", self.errors.len())?;
        writeln!(f, "rmse   {:.6} m", self.rmse)?;
        writeln!(f, "mean   {:.6} m", self.mean)?;
        writeln!(f, "median {:.6} m", self.median)?;
        write!(f, "max    {:.6} m", self.max)
    }
}

/// Rigid transform `(R, t)` minimizing `Σ‖y − (R x + t)‖²`.
pub fn umeyama_rigid(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Pose {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        cov += (b - my) * (a - mx).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    Pose::from_matrix(&r, my - r * mx)
}

/// Pairs each estimate with the nearest unused ground-truth timestamp
/// within the tolerance, closest pairs first.
fn associate(est: &Trajectory, gt: &Trajectory) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, (t, _)) in est.poses.iter().enumerate() {
        let j = gt.poses.partition_point(|(g, _)| *g < *t);
        for jj in [j.wrapping_sub(1), j] {
            if let Some((g, _)) = gt.poses.get(jj) {
                let dt = (g - t).abs();
                if dt <= ASSOCIATION_TOLERANCE {
                    candidates.push((dt, i, jj));
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; est.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

pub fn evaluate_ate(est: &Trajectory, gt: &Trajectory) -> Result<AteReport, BenchError> {
    let pairs = associate(est, gt);
    if pairs.len() < 3 {
        return Err(BenchError::TooFewAssociations {
            found: pairs.len(),
            required: 3,
        });
    }
    let xs: Vec<_> = pairs.iter().map(|&(i, _)| est.poses[i].1.translation).collect();
    let ys: Vec<_> = pairs.iter().map(|&(_, j)| gt.poses[j].1.translation).collect();
    let align = umeyama_rigid(&xs, &ys);
    let errors: Vec<(f64, f64)> = pairs
        .iter()
        .zip(xs.iter().zip(&ys))
        .map(|(&(i, _), (x, y))| (est.poses[i].0, (align.transform_point(x) - y).norm()))
        .collect();
    let n = errors.len() as f64;
    let mut sorted: Vec<f64> = errors.iter().map(|e| e.1).collect();
    sorted.sort_by(f64::total_cmp);
    Ok(AteReport {
        rmse: (sorted.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: sorted.iter().sum::<f64>() / n,
        median: median_sorted(&sorted),
        max: *sorted.last().unwrap(),
        errors,
        alignment: align,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub enum GroundTruth<'a> {
    Analytic(&'a Shape),
    Mesh(&'a TriangleMesh),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceReport {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub samples: usize,
}

impl fmt::Display for SurfaceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples {}", self.samples)?;
        writeln!(f, "mean    {:.6} m", self.mean)?;
        writeln!(f, "median  {:.6} m", self.median)?;
        write!(f, "max     {:.6} m", self.max)
    }
}

/// Mean distance from mesh vertices (at most 200k, evenly strided) to
/// the ground-truth surface.
pub fn evaluate_surface(mesh: &TriangleMesh, gt: &GroundTruth<'_>) -> Result<SurfaceReport, BenchError> {
    if mesh.vertices.is_empty() {
        return Err(BenchError::EmptyMesh);
    }
    let stride = mesh.vertices.len().div_ceil(MAX_SURFACE_SAMPLES);
    let pts: Vec<_> = mesh.vertices.iter().step_by(stride).copied().collect();
    let mut d: Vec<f64> = match gt {
        GroundTruth::Analytic(shape) => pts.par_iter().map(|p| shape.sdf(p).abs()).collect(),
        GroundTruth::Mesh(reference) => {
            if reference.triangles.is_empty() {
                return Err(BenchError::Invalid("reference mesh has no triangles".into()));
            }
            let index = TriangleIndex::new(reference, mean_edge(reference).max(1e-6));
            pts.par_iter().map(|p| index.distance(p, f64::INFINITY).unwrap_or(f64::INFINITY)).collect()
        }
    };
    let n = d.len();
    let mean = d.iter().sum::<f64>() / n as f64;
    d.sort_by(f64::total_cmp);
    Ok(SurfaceReport {
        mean,
        median: median_sorted(&d),
        max: d[n - 1],
        samples: n,
    })
}

fn mean_edge(mesh: &TriangleMesh) -> f64 {
    let total: f64 = mesh
        .triangles
        .iter()
        .map(|t| (mesh.vertices[t[0] as usize] - mesh.vertices[t[1] as usize]).norm())
        .sum();
    total / mesh.triangles.len() as f64
}

/// Symmetric Hausdorff distance between a mesh and an analytic surface,
/// the latter represented by `surface_samples` lying on it.
pub fn hausdorff_to_shape(mesh: &TriangleMesh, shape: &Shape, surface_samples: &[Vector3<f64>]) -> f64 {
    if mesh.triangles.is_empty() {
        return f64::INFINITY;
    }
    let forward = mesh.vertices.iter().map(|v| shape.sdf(v).abs()).fold(0.0, f64::max);
    let index = TriangleIndex::new(mesh, mean_edge(mesh).max(1e-6));
    let backward = surface_samples
        .par_iter()
        .map(|s| index.distance(s, f64::INFINITY).unwrap_or(f64::INFINITY))
        .reduce(|| 0.0, f64::max);
    forward.max(backward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn wiggle(n: usize) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|i| {
                    let s = i as f64 * 0.1;
                    (i as f64 / 30.0, Pose::new(UnitQuaternion::from_euler_angles(0.1 * s, s, 0.0), Vector3::new(s.sin(), s.cos(), 0.3 * s)))
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_trajectories() {
        let t = wiggle(50);
        assert!(evaluate_ate(&t, &t).unwrap().rmse < 1e-12);
    }

    #[test]
    fn rigid_offset_is_aligned_away() {
        let gt = wiggle(60);
        let g = Pose::new(UnitQuaternion::from_euler_angles(0.3, -1.2, 2.0), Vector3::new(4.0, -2.0, 1.0));
        let est = Trajectory::new(gt.poses.iter().map(|(t, p)| (*t, g.compose(p))).collect()).unwrap();
        assert!(evaluate_ate(&est, &gt).unwrap().rmse < 1e-9);
    }

    #[test]
    fn gaussian_noise_rmse() {
        let gt = wiggle(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.0, 0.01).unwrap();
        let est = Trajectory::new(
            gt.poses
                .iter()
                .map(|(t, p)| {
                    let d = Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                    (*t, Pose::new(p.rotation, p.translation + d))
                })
                .collect(),
        )
        .unwrap();
        let r = evaluate_ate(&est, &gt).unwrap();
        // three axes of σ = 1 cm give an expected norm RMSE of √3 cm
        let expected = 0.01 * 3f64.sqrt();
        assert!((r.rmse - expected).abs() / expected < 0.15, "{}", r.rmse);
    }

    #[test]
    fn association_tolerance() {
        let gt = wiggle(10);
        let shifted = Trajectory::new(gt.poses.iter().map(|(t, p)| (t + 0.015, *p)).collect()).unwrap();
        assert_eq!(evaluate_ate(&shifted, &gt).unwrap().errors.len(), 10);
        let far = Trajectory::new(gt.poses.iter().map(|(t, p)| (t + 100.0, *p)).collect()).unwrap();
        assert!(matches!(evaluate_ate(&far, &gt), Err(BenchError::TooFewAssociations { found: 0, .. })));
    }

    fn grid_mesh(z: f64) -> TriangleMesh {
        let mut m = TriangleMesh::default();
        let n = 10;
        for i in 0..=n {
            for j in 0..=n {
                m.vertices.push(Vector3::new(i as f64 * 0.1, j as f64 * 0.1, z));
            }
        }
        for i in 0..n {
            for j in 0..n {
                let a = (i * (n + 1) + j) as u32;
                let b = a + (n + 1) as u32;
                m.triangles.push([a, b, a + 1]);
                m.triangles.push([a + 1, b, b + 1]);
            }
        }
        m
    }

    #[test]
    fn surface_error_oracles() {
        let plane = Shape::plane(Vector3::z(), 0.0);
        let shifted = grid_mesh(0.01);
        let r = evaluate_surface(&shifted, &GroundTruth::Analytic(&plane)).unwrap();
        assert!((r.mean - 0.01).abs() < 1e-4);
        let same = grid_mesh(0.0);
        assert!(evaluate_surface(&same, &GroundTruth::Mesh(&same)).unwrap().mean < 1e-9);
        assert!(matches!(evaluate_surface(&TriangleMesh::default(), &GroundTruth::Analytic(&plane)), Err(BenchError::EmptyMesh)));
    }

    #[test]
    fn umeyama_recovers_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<_> = (0..30).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let g = Pose::new(UnitQuaternion::from_euler_angles(0.5, 0.2, -0.7), Vector3::new(1.0, 2.0, 3.0));
        let ys: Vec<_> = xs.iter().map(|x| g.transform_point(x)).collect();
        let est = umeyama_rigid(&xs, &ys);
        let (dt, da) = est.distance(&g);
        assert!(dt < 1e-9 && da < 1e-9);
    }
}
