//! Batched signed-distance queries against a map.
//!
//! Values are in voxel units; gradients are per meter, so `∂μ/∂x` of a
//! neural map is `(1/a)·∂μ/∂y`.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::grid::{VoxelGrid, VoxelIndex};
use crate::net::{DecoderBatch, NetWeights, SdfDistribution};
use crate::shapes::Shape;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub mu: f64,
    pub sigma: f64,
    /// `∂μ/∂x` in voxel units per meter.
    pub dmu_dx: Vector3<f64>,
    /// `∂σ/∂x`; zero unless requested with full gradients.
    pub dsigma_dx: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientKind {
    None,
    Mu,
    MuAndSigma,
}

/// A queryable signed distance map. `None` marks points outside the
/// observed region.
pub trait SdfField: Sync {
    fn voxel_size(&self) -> f64;

    fn query(&self, points: &[Vector3<f64>], gradients: GradientKind) -> Vec<Option<FieldSample>>;
}

/// The neural map: a voxel grid decoded by the shared decoder.
pub struct NeuralField<'a> {
    grid: &'a VoxelGrid,
    net: &'a NetWeights,
    latents: HashMap<VoxelIndex, Vec<f64>>,
}

impl<'a> NeuralField<'a> {
    pub fn new(grid: &'a VoxelGrid, net: &'a NetWeights) -> Self {
        let latents = grid.iter_sorted().into_iter().map(|(k, v)| (k, v.latent_f64())).collect();
        Self { grid, net, latents }
    }

    pub fn grid(&self) -> &VoxelGrid {
        self.grid
    }

    pub fn latent(&self, k: &VoxelIndex) -> Option<&[f64]> {
        self.latents.get(k).map(Vec::as_slice)
    }

    /// Decodes `y` (local coordinates, possibly outside the voxel) against
    /// the latent of voxel `k`.
    pub fn decode_in(&self, queries: &[(VoxelIndex, Vector3<f64>)]) -> Vec<Option<SdfDistribution>> {
        let mut batch = DecoderBatch::with_capacity(self.grid.latent_dim(), queries.len());
        let mut slots = Vec::with_capacity(queries.len());
        for (k, y) in queries {
            match self.latents.get(k) {
                Some(l) => {
                    slots.push(true);
                    batch.push(y, l);
                }
                None => slots.push(false),
            }
        }
        let mut decoded = self.net.decode_batch(&batch).into_iter();
        slots.into_iter().map(|s| if s { decoded.next() } else { None }).collect()
    }
}

impl SdfField for NeuralField<'_> {
    fn voxel_size(&self) -> f64 {
        self.grid.voxel_size()
    }

    fn query(&self, points: &[Vector3<f64>], gradients: GradientKind) -> Vec<Option<FieldSample>> {
        let inv_a = 1.0 / self.grid.voxel_size();
        let mut batch = DecoderBatch::with_capacity(self.grid.latent_dim(), points.len());
        let mut slots = Vec::with_capacity(points.len());
        for x in points {
            let k = self.grid.voxel_index(x);
            match self.latents.get(&k) {
                Some(l) => {
                    let y = (x - self.grid.centroid(k)) * inv_a;
                    batch.push(&y, l);
                    slots.push(true);
                }
                None => slots.push(false),
            }
        }
        let samples: Vec<FieldSample> = match gradients {
            GradientKind::None => self
                .net
                .decode_batch(&batch)
                .into_iter()
                .map(|d| FieldSample {
                    mu: d.mu,
                    sigma: d.sigma,
                    dmu_dx: Vector3::zeros(),
                    dsigma_dx: Vector3::zeros(),
                })
                .collect(),
            GradientKind::Mu | GradientKind::MuAndSigma => {
                let decoded = if gradients == GradientKind::Mu {
                    self.net.decode_batch_with_gradient(&batch)
                } else {
                    self.net.decode_batch_full_gradient(&batch)
                };
                decoded
                    .into_iter()
                    .map(|d| FieldSample {
                        mu: d.dist.mu,
                        sigma: d.dist.sigma,
                        dmu_dx: d.dmu_dy * inv_a,
                        dsigma_dx: d.dsigma_dy * inv_a,
                    })
                    .collect()
            }
        };
        let mut it = samples.into_iter();
        slots.into_iter().map(|s| if s { it.next() } else { None }).collect()
    }
}

/// An analytic shape seen as a map with constant σ, defined everywhere.
#[derive(Clone, Debug)]
pub struct AnalyticField {
    pub shape: Shape,
    pub voxel_size: f64,
    pub sigma: f64,
}

impl SdfField for AnalyticField {
    fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    fn query(&self, points: &[Vector3<f64>], _gradients: GradientKind) -> Vec<Option<FieldSample>> {
        let inv_a = 1.0 / self.voxel_size;
        points
            .iter()
            .map(|x| {
                let (d, g) = self.shape.sdf_and_gradient(x);
                Some(FieldSample {
                    mu: d * inv_a,
                    sigma: self.sigma,
                    dmu_dx: g * inv_a,
                    dsigma_dx: Vector3::zeros(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn neural_field_matches_direct_decoding() {
        let net = NetWeights::init(3);
        let mut grid = VoxelGrid::new(0.1, Vector3::zeros(), 29).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for k in [[0, 0, 0], [1, 0, 0], [-1, 2, 3]] {
            let l: Vec<f32> = (0..29).map(|_| rng.random_range(-1.0..1.0)).collect();
            grid.insert(VoxelIndex(k), l, 20).unwrap();
        }
        let field = NeuralField::new(&grid, &net);
        let pts = vec![
            Vector3::new(0.05, 0.02, 0.07),
            Vector3::new(0.5, 0.5, 0.5),
            Vector3::new(0.13, 0.01, 0.09),
            Vector3::new(-0.04, 0.21, 0.33),
        ];
        let out = field.query(&pts, GradientKind::Mu);
        assert!(out[1].is_none());
        for (x, s) in pts.iter().zip(&out) {
            let Some(s) = s else { continue };
            let k = grid.voxel_index(x);
            let y = (x - grid.centroid(k)) / 0.1;
            let latent = grid.get(&k).unwrap().latent_f64();
            let d = net.decode(&y, &latent);
            assert!((s.mu - d.mu).abs() < 1e-12 && (s.sigma - d.sigma).abs() < 1e-12);
            let g = net.decode_spatial_gradient(&y, &latent) / 0.1;
            assert!((s.dmu_dx - g).norm() < 1e-12);
        }
    }
}
