//! Sparse grid of probabilistic local implicit voxels.
//!
//! Voxel `k` spans `[origin + k·a, origin + (k+1)·a)` with its centroid at
//! `origin + (k + ½)·a`. Indexing uses `floor`, so points on a shared face
//! belong to the voxel on the positive side.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::OrientedPointCloud;

pub const DEFAULT_LATENT_DIM: usize = 29;
pub const DEFAULT_VOXEL_SIZE: f64 = 0.10;
pub const DEFAULT_ALLOCATION_THRESHOLD: usize = 16;

const SNAPSHOT_MAGIC: &[u8; 4] = b"PLIV";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a map snapshot (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported map snapshot version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("snapshot truncated: {0}")]
    Truncated(String),
    #[error("latent dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid grid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex(pub [i32; 3]);

impl VoxelIndex {
    pub fn offset(&self, d: [i32; 3]) -> VoxelIndex {
        VoxelIndex([self.0[0] + d[0], self.0[1] + d[1], self.0[2] + d[2]])
    }
}

/// Surface sample in voxel-local coordinates, `y ∈ [−½, ½]³` in voxel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalPoint {
    pub y: Vector3<f64>,
    pub n: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PliVoxel {
    pub centroid: Vector3<f64>,
    pub latent: Vec<f32>,
    pub weight: u32,
}

impl PliVoxel {
    pub fn empty(centroid: Vector3<f64>, latent_dim: usize) -> Self {
        Self {
            centroid,
            latent: vec![0.0; latent_dim],
            weight: 0,
        }
    }

    pub fn is_observed(&self) -> bool {
        self.weight > 0
    }

    pub fn latent_f64(&self) -> Vec<f64> {
        self.latent.iter().map(|&v| v as f64).collect()
    }
}

/// Weighted running mean of latents. A `cap` bounds the stored weight.
pub fn fuse_latent(voxel: &PliVoxel, l_obs: &[f64], w_obs: u32, cap: Option<u32>) -> PliVoxel {
    debug_assert!(w_obs >= 1);
    debug_assert_eq!(voxel.latent.len(), l_obs.len());
    let w_old = cap.map_or(voxel.weight, |c| voxel.weight.min(c)) as f64;
    let w_new = w_obs as f64;
    let total = w_old + w_new;
    let latent = voxel
        .latent
        .iter()
        .zip(l_obs)
        .map(|(&l, &o)| ((l as f64 * w_old + o * w_new) / total) as f32)
        .collect();
    let weight = voxel.weight.saturating_add(w_obs);
    PliVoxel {
        centroid: voxel.centroid,
        latent,
        weight: cap.map_or(weight, |c| weight.min(c)),
    }
}

/// Elementwise max fusion. An unobserved voxel takes the observation as is.
pub fn fuse_latent_max(voxel: &PliVoxel, l_obs: &[f64], w_obs: u32, cap: Option<u32>) -> PliVoxel {
    let latent = if voxel.is_observed() {
        voxel
            .latent
            .iter()
            .zip(l_obs)
            .map(|(&l, &o)| l.max(o as f32))
            .collect()
    } else {
        l_obs.iter().map(|&o| o as f32).collect()
    };
    let weight = voxel.weight.saturating_add(w_obs);
    PliVoxel {
        centroid: voxel.centroid,
        latent,
        weight: cap.map_or(weight, |c| weight.min(c)),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(FusionMode::Mean),
            "max" => Ok(FusionMode::Max),
            other => Err(format!("unknown fusion mode '{other}' (expected mean|max)")),
        }
    }
}

/// Result of partitioning a cloud over voxels.
#[derive(Clone, Debug, Default)]
pub struct Buckets {
    /// Buckets eligible for fusion: already-allocated voxels, or fresh
    /// voxels that meet the allocation threshold.
    pub accepted: BTreeMap<VoxelIndex, Vec<LocalPoint>>,
    /// Point counts of sub-threshold buckets in unallocated voxels.
    pub withheld: BTreeMap<VoxelIndex, usize>,
}

impl Buckets {
    pub fn accepted_points(&self) -> usize {
        self.accepted.values().map(Vec::len).sum()
    }

    pub fn withheld_points(&self) -> usize {
        self.withheld.values().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    voxel_size: f64,
    origin: Vector3<f64>,
    latent_dim: usize,
    pub allocation_threshold: usize,
    pub weight_cap: Option<u32>,
    table: HashMap<VoxelIndex, PliVoxel>,
}

impl VoxelGrid {
    pub fn new(voxel_size: f64, origin: Vector3<f64>, latent_dim: usize) -> Result<Self, GridError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(GridError::InvalidParameter(format!("voxel size must be positive, got {voxel_size}")));
        }
        if latent_dim == 0 {
            return Err(GridError::InvalidParameter("latent dimension must be positive".into()));
        }
        Ok(Self {
            voxel_size,
            origin,
            latent_dim,
            allocation_threshold: DEFAULT_ALLOCATION_THRESHOLD,
            weight_cap: None,
            table: HashMap::new(),
        })
    }

    pub fn with_defaults() -> Self {
        Self::new(DEFAULT_VOXEL_SIZE, Vector3::zeros(), DEFAULT_LATENT_DIM).expect("valid defaults")
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn voxel_index(&self, x: &Vector3<f64>) -> VoxelIndex {
        let g = (x - self.origin) / self.voxel_size;
        VoxelIndex([g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32])
    }

    pub fn centroid(&self, k: VoxelIndex) -> Vector3<f64> {
        let [i, j, l] = k.0;
        self.origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, l as f64 + 0.5) * self.voxel_size
    }

    /// Voxel index and local coordinate of a world point.
    pub fn to_local(&self, x: &Vector3<f64>, n: &Vector3<f64>) -> (VoxelIndex, LocalPoint) {
        let k = self.voxel_index(x);
        let y = (x - self.centroid(k)) / self.voxel_size;
        (k, LocalPoint { y, n: *n })
    }

    pub fn to_world(&self, k: VoxelIndex, y: &Vector3<f64>) -> Vector3<f64> {
        self.centroid(k) + y * self.voxel_size
    }

    pub fn get(&self, k: &VoxelIndex) -> Option<&PliVoxel> {
        self.table.get(k)
    }

    pub fn contains(&self, k: &VoxelIndex) -> bool {
        self.table.contains_key(k)
    }

    /// Allocated voxels in index order.
    pub fn iter_sorted(&self) -> Vec<(VoxelIndex, &PliVoxel)> {
        let mut v: Vec<_> = self.table.iter().map(|(k, vox)| (*k, vox)).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    pub fn indices(&self) -> impl Iterator<Item = &VoxelIndex> {
        self.table.keys()
    }

    /// Partitions the cloud by voxel. Fresh voxels with fewer points than
    /// the allocation threshold are withheld.
    pub fn bucket_points(&self, cloud: &OrientedPointCloud) -> Buckets {
        let mut all: BTreeMap<VoxelIndex, Vec<LocalPoint>> = BTreeMap::new();
        for (x, n) in cloud.points.iter().zip(&cloud.normals) {
            let (k, lp) = self.to_local(x, n);
            all.entry(k).or_default().push(lp);
        }
        let mut out = Buckets::default();
        for (k, pts) in all {
            if self.contains(&k) || pts.len() >= self.allocation_threshold {
                out.accepted.insert(k, pts);
            } else {
                out.withheld.insert(k, pts.len());
            }
        }
        if !out.withheld.is_empty() {
            log::debug!(
                "withheld {} points in {} sub-threshold voxels",
                out.withheld_points(),
                out.withheld.len()
            );
        }
        out
    }

    /// Fuses an observation latent into voxel `k`, allocating it if needed.
    pub fn fuse(&mut self, k: VoxelIndex, l_obs: &[f64], w_obs: u32, mode: FusionMode) {
        assert_eq!(l_obs.len(), self.latent_dim, "observation latent has wrong dimension");
        let centroid = self.centroid(k);
        let dim = self.latent_dim;
        let cap = self.weight_cap;
        let voxel = self.table.entry(k).or_insert_with(|| PliVoxel::empty(centroid, dim));
        *voxel = match mode {
            FusionMode::Mean => fuse_latent(voxel, l_obs, w_obs, cap),
            FusionMode::Max => fuse_latent_max(voxel, l_obs, w_obs, cap),
        };
    }

    /// Inserts a voxel record directly (used by snapshot loading and tests).
    pub fn insert(&mut self, k: VoxelIndex, latent: Vec<f32>, weight: u32) -> Result<(), GridError> {
        if latent.len() != self.latent_dim {
            return Err(GridError::DimensionMismatch {
                expected: self.latent_dim,
                found: latent.len(),
            });
        }
        let centroid = self.centroid(k);
        self.table.insert(
            k,
            PliVoxel {
                centroid,
                latent,
                weight,
            },
        );
        Ok(())
    }

    /// Writes the versioned binary snapshot.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_f64::<LittleEndian>(self.voxel_size)?;
        for c in self.origin.iter() {
            w.write_f64::<LittleEndian>(*c)?;
        }
        w.write_u32::<LittleEndian>(self.latent_dim as u32)?;
        w.write_u64::<LittleEndian>(self.table.len() as u64)?;
        for (k, vox) in self.iter_sorted() {
            for c in k.0 {
                w.write_i32::<LittleEndian>(c)?;
            }
            w.write_u32::<LittleEndian>(vox.weight)?;
            for &l in &vox.latent {
                w.write_f32::<LittleEndian>(l)?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self, GridError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| truncated(e, "header"))?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(GridError::BadMagic(magic));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| truncated(e, "version"))?;
        if version != SNAPSHOT_VERSION {
            return Err(GridError::VersionMismatch {
                found: version,
                expected: SNAPSHOT_VERSION,
            });
        }
        let voxel_size = r.read_f64::<LittleEndian>().map_err(|e| truncated(e, "voxel size"))?;
        let mut origin = Vector3::zeros();
        for c in origin.iter_mut() {
            *c = r.read_f64::<LittleEndian>().map_err(|e| truncated(e, "origin"))?;
        }
        let latent_dim = r.read_u32::<LittleEndian>().map_err(|e| truncated(e, "latent dim"))? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(|e| truncated(e, "record count"))?;
        let mut grid = VoxelGrid::new(voxel_size, origin, latent_dim)?;
        for rec in 0..count {
            let mut idx = [0i32; 3];
            for c in idx.iter_mut() {
                *c = r
                    .read_i32::<LittleEndian>()
                    .map_err(|e| truncated(e, &format!("record {rec}")))?;
            }
            let weight = r
                .read_u32::<LittleEndian>()
                .map_err(|e| truncated(e, &format!("record {rec}")))?;
            let mut latent = vec![0f32; latent_dim];
            r.read_f32_into::<LittleEndian>(&mut latent)
                .map_err(|e| truncated(e, &format!("record {rec}")))?;
            grid.insert(VoxelIndex(idx), latent, weight)?;
        }
        Ok(grid)
    }

    /// Writes the snapshot atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), GridError> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_snapshot(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GridError> {
        Self::read_snapshot(BufReader::new(File::open(path)?))
    }
}

fn truncated(e: std::io::Error, what: &str) -> GridError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        GridError::Truncated(what.to_string())
    } else {
        GridError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid() -> VoxelGrid {
        VoxelGrid::new(1.0, Vector3::zeros(), 2).unwrap()
    }

    #[test]
    fn voxel_index_examples() {
        assert_eq!(unit_grid().voxel_index(&Vector3::new(0.5, 0.5, 0.5)), VoxelIndex([0, 0, 0]));
        let g = VoxelGrid::new(0.1, Vector3::zeros(), 2).unwrap();
        assert_eq!(g.voxel_index(&Vector3::new(0.25, -0.05, 0.0)), VoxelIndex([2, -1, 0]));
        assert_eq!(g.voxel_index(&Vector3::new(0.1, 0.0, 0.0)), VoxelIndex([1, 0, 0]));
    }

    #[test]
    fn local_coordinates() {
        let g = VoxelGrid::new(0.1, Vector3::new(0.01, -0.02, 0.03), 2).unwrap();
        let k = VoxelIndex([3, -2, 7]);
        let c = g.centroid(k);
        let n = Vector3::z();
        let (k2, lp) = g.to_local(&c, &n);
        assert_eq!(k2, k);
        assert!(lp.y.norm() < 1e-12);
        let corner = c - Vector3::repeat(0.05 - 1e-9);
        let (k3, lp) = g.to_local(&corner, &n);
        assert_eq!(k3, k);
        assert!((lp.y - Vector3::repeat(-0.5)).norm() < 1e-6);
        assert_eq!(lp.n, n);
    }

    #[test]
    fn fuse_equal_weights() {
        let v = PliVoxel {
            centroid: Vector3::zeros(),
            latent: vec![1.0; 4],
            weight: 2,
        };
        let f = fuse_latent(&v, &[3.0; 4], 2, None);
        assert_eq!(f.latent, vec![2.0; 4]);
        assert_eq!(f.weight, 4);
    }

    #[test]
    fn fuse_into_fresh_voxel() {
        let v = PliVoxel::empty(Vector3::zeros(), 3);
        let f = fuse_latent(&v, &[0.25, -1.5, 7.0], 9, None);
        assert_eq!(f.latent, vec![0.25, -1.5, 7.0]);
        assert_eq!(f.weight, 9);
    }

    #[test]
    fn weight_cap_bounds_weight() {
        let mut v = PliVoxel::empty(Vector3::zeros(), 1);
        for _ in 0..10 {
            v = fuse_latent(&v, &[1.0], 10, Some(25));
        }
        assert_eq!(v.weight, 25);
        let late = fuse_latent(&v, &[26.0], 25, Some(25));
        assert_eq!(late.latent, vec![13.5]);
    }

    #[test]
    fn max_fusion_examples() {
        let v = PliVoxel {
            centroid: Vector3::zeros(),
            latent: vec![1.0, -1.0],
            weight: 1,
        };
        let f = fuse_latent_max(&v, &[0.0, 2.0], 3, None);
        assert_eq!(f.latent, vec![1.0, 2.0]);
        assert_eq!(f.weight, 4);
        let same = fuse_latent_max(&v, &[1.0, -1.0], 1, None);
        assert_eq!(same.latent, v.latent);
    }

    #[test]
    fn bucket_threshold() {
        let mut grid = VoxelGrid::new(1.0, Vector3::zeros(), 2).unwrap();
        let mut cloud = OrientedPointCloud::default();
        for i in 0..15 {
            cloud.push(Vector3::new(0.1 + 0.05 * i as f64, 0.5, 0.5), Vector3::z());
        }
        let b = grid.bucket_points(&cloud);
        assert!(b.accepted.is_empty());
        assert_eq!(b.withheld.get(&VoxelIndex([0, 0, 0])), Some(&15));
        cloud.push(Vector3::new(0.9, 0.9, 0.9), Vector3::z());
        let b = grid.bucket_points(&cloud);
        assert_eq!(b.accepted[&VoxelIndex([0, 0, 0])].len(), 16);
        // already allocated voxels accept any count
        grid.fuse(VoxelIndex([1, 0, 0]), &[0.0, 0.0], 20, FusionMode::Mean);
        let mut few = OrientedPointCloud::default();
        few.push(Vector3::new(1.5, 0.5, 0.5), Vector3::z());
        let b = grid.bucket_points(&few);
        assert_eq!(b.accepted[&VoxelIndex([1, 0, 0])].len(), 1);
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let mut grid = VoxelGrid::new(0.1, Vector3::new(0.5, -0.25, 1.0), 3).unwrap();
        grid.fuse(VoxelIndex([1, -2, 3]), &[0.1, 0.2, -0.3], 17, FusionMode::Mean);
        grid.fuse(VoxelIndex([-7, 0, 0]), &[1e-8, 3.0, f64::MIN_POSITIVE], 40, FusionMode::Mean);
        let mut bytes = Vec::new();
        grid.write_snapshot(&mut bytes).unwrap();
        let back = VoxelGrid::read_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(back, grid);
        let mut again = Vec::new();
        back.write_snapshot(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn snapshot_errors() {
        let grid = unit_grid();
        let mut bytes = Vec::new();
        grid.write_snapshot(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(VoxelGrid::read_snapshot(bad.as_slice()), Err(GridError::BadMagic(_))));
        let mut old = bytes.clone();
        old[4] = 9;
        assert!(matches!(
            VoxelGrid::read_snapshot(old.as_slice()),
            Err(GridError::VersionMismatch { found: 9, .. })
        ));
        assert!(matches!(
            VoxelGrid::read_snapshot(&bytes[..bytes.len() - 3]),
            Err(GridError::Truncated(_))
        ));
    }
}
