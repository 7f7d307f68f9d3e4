//! Mesh extraction from the neural map, σ filtering and vertex texturing.
//!
//! The map is sampled on one global lattice of spacing `a/r` whose points
//! sit at `origin + (g + ½)·a/r`, so every voxel owns exactly `r³` of them.
//! A lattice point is defined when the voxel containing it is allocated.
//! Its value blends the decodings of all allocated voxels whose doubled
//! domain covers it, with trilinear weights over voxel centers renormalized
//! to the allocated ones.

mod io;
mod tables;

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::field::NeuralField;
use crate::grid::{VoxelGrid, VoxelIndex};
use crate::map::ColorCloud;
use crate::net::{NetWeights, SdfDistribution};

pub use io::{read_ply, write_obj, write_ply, MeshIoError};
use tables::{EDGE_TABLE, TRIANGLE_TABLE};

pub const DEFAULT_SIGMA_THRESHOLD: f64 = 0.06;
pub const SENTINEL_GRAY: [u8; 3] = [128, 128, 128];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshRequest {
    /// Lattice samples per voxel edge.
    pub resolution: usize,
    pub iso: f64,
}

impl Default for MeshRequest {
    fn default() -> Self {
        Self { resolution: 8, iso: 0.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    /// World coordinates in meters.
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
    /// Blended σ per vertex, in voxel units.
    pub sigma: Option<Vec<f32>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Checks index ranges, attribute lengths and finiteness.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.vertices.len();
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(format!("triangle {t:?} references a vertex beyond {n}"));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err("non-finite vertex".into());
        }
        if self.colors.as_ref().is_some_and(|c| c.len() != n) {
            return Err("color count differs from vertex count".into());
        }
        if self.sigma.as_ref().is_some_and(|s| s.len() != n) {
            return Err("sigma count differs from vertex count".into());
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }
}

/// The trilinearly blended field of a neural map.
pub struct BlendedField<'a> {
    field: NeuralField<'a>,
}

impl<'a> BlendedField<'a> {
    pub fn new(grid: &'a VoxelGrid, net: &'a NetWeights) -> Self {
        Self {
            field: NeuralField::new(grid, net),
        }
    }

    pub fn grid(&self) -> &VoxelGrid {
        self.field.grid()
    }

    /// Blended `(μ, σ)` in voxel units; `None` where the containing voxel
    /// is unallocated.
    pub fn query(&self, points: &[Vector3<f64>]) -> Vec<Option<SdfDistribution>> {
        let grid = self.field.grid();
        let a = grid.voxel_size();
        let origin = grid.origin();
        let mut queries = Vec::new();
        let mut spans: Vec<Option<(usize, Vec<f64>)>> = Vec::with_capacity(points.len());
        for x in points {
            if self.field.latent(&grid.voxel_index(x)).is_none() {
                spans.push(None);
                continue;
            }
            let t = (x - origin) / a - Vector3::repeat(0.5);
            let base = t.map(f64::floor);
            let frac = t - base;
            let start = queries.len();
            let mut weights = Vec::with_capacity(8);
            for corner in 0..8 {
                let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let mut w = 1.0;
                let mut idx = [0i32; 3];
                for d in 0..3 {
                    w *= if off[d] == 1 { frac[d] } else { 1.0 - frac[d] };
                    idx[d] = base[d] as i32 + off[d] as i32;
                }
                let k = VoxelIndex(idx);
                if w > 0.0 && self.field.latent(&k).is_some() {
                    queries.push((k, (x - grid.centroid(k)) / a));
                    weights.push(w);
                }
            }
            debug_assert!(queries.len() > start);
            spans.push(Some((start, weights)));
        }
        let decoded = self.field.decode_in(&queries);
        spans
            .into_iter()
            .map(|span| {
                let (start, weights) = span?;
                let total: f64 = weights.iter().sum();
                let (mut mu, mut sigma) = (0.0, 0.0);
                for (i, w) in weights.iter().enumerate() {
                    let d = decoded[start + i].expect("allocated voxel decodes");
                    mu += w * d.mu;
                    sigma += w * d.sigma;
                }
                Some(SdfDistribution {
                    mu: mu / total,
                    sigma: sigma / total,
                })
            })
            .collect()
    }
}

type Lattice = [i64; 3];

fn lattice_point(origin: &Vector3<f64>, h: f64, g: &Lattice) -> Vector3<f64> {
    origin + Vector3::new(g[0] as f64 + 0.5, g[1] as f64 + 0.5, g[2] as f64 + 0.5) * h
}

/// Corner offsets and edge endpoints in Bourke numbering.
const CORNERS: [[i64; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const EDGES: [[usize; 2]; 12] = [[0, 1], [1, 2], [3, 2], [0, 3], [4, 5], [5, 6], [7, 6], [4, 7], [0, 4], [1, 5], [2, 6], [3, 7]];

/// Marching cubes over the blended lattice. Triangles with area below
/// `1e-12 m²` are dropped.
pub fn extract_mesh(grid: &VoxelGrid, net: &NetWeights, req: &MeshRequest) -> TriangleMesh {
    assert!(req.resolution >= 2, "mesh resolution must be at least 2");
    if grid.is_empty() {
        return TriangleMesh::default();
    }
    let r = req.resolution as i64;
    let h = grid.voxel_size() / r as f64;
    let origin = grid.origin();
    let blended = BlendedField::new(grid, net);
    let voxels: Vec<VoxelIndex> = grid.iter_sorted().into_iter().map(|(k, _)| k).collect();

    let per_voxel: Vec<Vec<(Lattice, SdfDistribution)>> = voxels
        .par_iter()
        .map(|k| {
            let mut lattice = Vec::with_capacity((r * r * r) as usize);
            for i in 0..r {
                for j in 0..r {
                    for l in 0..r {
                        lattice.push([k.0[0] as i64 * r + i, k.0[1] as i64 * r + j, k.0[2] as i64 * r + l]);
                    }
                }
            }
            let pts: Vec<_> = lattice.iter().map(|g| lattice_point(&origin, h, g)).collect();
            lattice
                .into_iter()
                .zip(blended.query(&pts))
                .map(|(g, d)| (g, d.expect("lattice point lies in its own voxel")))
                .collect()
        })
        .collect();
    let mut values: HashMap<Lattice, SdfDistribution> = HashMap::with_capacity(per_voxel.iter().map(Vec::len).sum());
    let mut order = Vec::new();
    for (g, d) in per_voxel.into_iter().flatten() {
        values.insert(g, d);
        order.push(g);
    }

    let mut mesh = TriangleMesh {
        sigma: Some(Vec::new()),
        ..Default::default()
    };
    let mut edge_vertex: HashMap<(Lattice, u8), u32> = HashMap::new();
    for g in &order {
        let mut corner_vals = [SdfDistribution { mu: 0.0, sigma: 0.0 }; 8];
        let mut complete = true;
        for (c, off) in CORNERS.iter().enumerate() {
            match values.get(&[g[0] + off[0], g[1] + off[1], g[2] + off[2]]) {
                Some(d) => corner_vals[c] = *d,
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            continue;
        }
        let mut case = 0usize;
        for (c, d) in corner_vals.iter().enumerate() {
            if d.mu < req.iso {
                case |= 1 << c;
            }
        }
        let crossed = EDGE_TABLE[case];
        if crossed == 0 {
            continue;
        }
        let mut edge_ids = [u32::MAX; 12];
        for (e, &[c0, c1]) in EDGES.iter().enumerate() {
            if crossed & (1 << e) == 0 {
                continue;
            }
            let lo = CORNERS[c0];
            let axis = (0..3).find(|&d| CORNERS[c1][d] != lo[d]).unwrap() as u8;
            let key = ([g[0] + lo[0], g[1] + lo[1], g[2] + lo[2]], axis);
            let id = *edge_vertex.entry(key).or_insert_with(|| {
                let (d0, d1) = (corner_vals[c0], corner_vals[c1]);
                let t = ((req.iso - d0.mu) / (d1.mu - d0.mu)).clamp(0.0, 1.0);
                let p0 = lattice_point(&origin, h, &key.0);
                let mut p1 = p0;
                p1[axis as usize] += h;
                mesh.vertices.push(p0 + (p1 - p0) * t);
                mesh.sigma.as_mut().unwrap().push((d0.sigma + (d1.sigma - d0.sigma) * t) as f32);
                (mesh.vertices.len() - 1) as u32
            });
            edge_ids[e] = id;
        }
        for tri in TRIANGLE_TABLE[case].chunks_exact(3) {
            if tri[0] < 0 {
                break;
            }
            let t = [edge_ids[tri[0] as usize], edge_ids[tri[1] as usize], edge_ids[tri[2] as usize]];
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] || mesh.triangle_area(&t) <= 1e-12 {
                continue;
            }
            mesh.triangles.push(t);
        }
    }
    compact(mesh)
}

/// Drops vertices no triangle uses, keeping relative order.
fn compact(mut mesh: TriangleMesh) -> TriangleMesh {
    let keep: Vec<bool> = {
        let mut used = vec![false; mesh.vertices.len()];
        for t in &mesh.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        used
    };
    retain_vertices(&mut mesh, &keep);
    mesh
}

fn retain_vertices(mesh: &mut TriangleMesh, keep: &[bool]) {
    let mut remap = vec![u32::MAX; keep.len()];
    let mut next = 0u32;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            remap[i] = next;
            next += 1;
        }
    }
    let filter = |v: &mut Vec<_>| {
        let mut i = 0;
        v.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    };
    filter(&mut mesh.vertices);
    if let Some(c) = mesh.colors.as_mut() {
        let mut i = 0;
        c.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }
    if let Some(s) = mesh.sigma.as_mut() {
        let mut i = 0;
        s.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }
    mesh.triangles.retain(|t| t.iter().all(|&i| keep[i as usize]));
    for t in &mut mesh.triangles {
        for i in t.iter_mut() {
            *i = remap[*i as usize];
        }
    }
}

/// Removes vertices with σ above `threshold` and every triangle touching
/// them. A mesh without σ is returned unchanged.
pub fn sigma_filter(mesh: &TriangleMesh, threshold: f64) -> TriangleMesh {
    let Some(sigma) = &mesh.sigma else {
        log::warn!("mesh carries no sigma; filter skipped");
        return mesh.clone();
    };
    let keep: Vec<bool> = sigma.iter().map(|&s| (s as f64) <= threshold).collect();
    let mut out = mesh.clone();
    retain_vertices(&mut out, &keep);
    compact(out)
}

/// Colors each vertex with the mean of its `k` nearest colored points
/// within `radius`. Ties in distance break on coordinates and color so the
/// result does not depend on point order.
pub fn colorize_mesh(mesh: &TriangleMesh, points: &ColorCloud, k: usize, radius: f64) -> TriangleMesh {
    let cell = |p: &Vector3<f64>| -> [i64; 3] { [(p.x / radius).floor() as i64, (p.y / radius).floor() as i64, (p.z / radius).floor() as i64] };
    let mut hash: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.points.iter().enumerate() {
        hash.entry(cell(p)).or_default().push(i);
    }
    let colors = mesh
        .vertices
        .par_iter()
        .map(|v| {
            let c = cell(v);
            let mut near: Vec<(f64, usize)> = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(ids) = hash.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &i in ids {
                                let d = (points.points[i] - v).norm_squared();
                                if d <= radius * radius {
                                    near.push((d, i));
                                }
                            }
                        }
                    }
                }
            }
            nearest_mean(&mut near, points, k)
        })
        .collect();
    TriangleMesh {
        colors: Some(colors),
        ..mesh.clone()
    }
}

fn nearest_mean(near: &mut [(f64, usize)], points: &ColorCloud, k: usize) -> [u8; 3] {
    if near.is_empty() || k == 0 {
        return SENTINEL_GRAY;
    }
    let key = |&(d, i): &(f64, usize)| {
        let p = points.points[i];
        (d, p.x, p.y, p.z, points.colors[i])
    };
    near.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal));
    let take = &near[..k.min(near.len())];
    let mut sum = [0.0f64; 3];
    for &(_, i) in take {
        for (s, c) in sum.iter_mut().zip(points.colors[i]) {
            *s += c as f64;
        }
    }
    sum.map(|s| (s / take.len() as f64).round() as u8)
}

/// Distance from `p` to triangle `abc`.
pub fn point_triangle_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    (p - closest_point_on_triangle(p, a, b, c)).norm()
}

fn closest_point_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Nearest-triangle queries over a mesh through a uniform hash grid.
pub struct TriangleIndex<'a> {
    mesh: &'a TriangleMesh,
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<u32>>,
    bounds: Option<[[i64; 3]; 2]>,
}

impl<'a> TriangleIndex<'a> {
    pub fn new(mesh: &'a TriangleMesh, cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let vs = t.map(|i| mesh.vertices[i as usize]);
            let lo = vs[0].inf(&vs[1]).inf(&vs[2]);
            let hi = vs[0].sup(&vs[1]).sup(&vs[2]);
            let clo = lo.map(|c| (c / cell).floor() as i64);
            let chi = hi.map(|c| (c / cell).floor() as i64);
            for x in clo.x..=chi.x {
                for y in clo.y..=chi.y {
                    for z in clo.z..=chi.z {
                        buckets.entry([x, y, z]).or_default().push(ti as u32);
                    }
                }
            }
        }
        let bounds = buckets.keys().fold(None, |acc: Option<[[i64; 3]; 2]>, k| {
            Some(match acc {
                None => [*k, *k],
                Some([lo, hi]) => [std::array::from_fn(|d| lo[d].min(k[d])), std::array::from_fn(|d| hi[d].max(k[d]))],
            })
        });
        Self { mesh, cell, buckets, bounds }
    }

    /// Distance to the nearest triangle, searching outward shell by shell
    /// up to `max_distance`.
    pub fn distance(&self, p: &Vector3<f64>, max_distance: f64) -> Option<f64> {
        let c = p.map(|v| (v / self.cell).floor() as i64);
        let [lo, hi] = self.bounds?;
        let mut enclosing = 0;
        for d in 0..3 {
            enclosing = enclosing.max((c[d] - lo[d]).abs()).max((hi[d] - c[d]).abs());
        }
        let max_ring = if max_distance.is_finite() {
            ((max_distance / self.cell).ceil() as i64 + 1).min(enclosing)
        } else {
            enclosing
        };
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for x in -ring..=ring {
                for y in -ring..=ring {
                    for z in -ring..=ring {
                        if x.abs().max(y.abs()).max(z.abs()) != ring {
                            continue;
                        }
                        if let Some(ts) = self.buckets.get(&[c.x + x, c.y + y, c.z + z]) {
                            for &ti in ts {
                                let [a, b, cc] = self.mesh.triangles[ti as usize].map(|i| self.mesh.vertices[i as usize]);
                                best = best.min(point_triangle_distance(p, &a, &b, &cc));
                            }
                        }
                    }
                }
            }
            // everything beyond this ring is at least `ring·cell` away
            if best <= ring as f64 * self.cell {
                break;
            }
        }
        (best <= max_distance).then_some(best)
    }
}
