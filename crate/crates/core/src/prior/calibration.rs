//! Empirical coverage of the predicted σ on held-out voxels.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_random_voxel, PriorError, ShapeCorpus, TrainConfig};
use crate::net::{DecoderBatch, NetWeights};

/// Two-sided Gaussian mass within k standard deviations, k = 1, 2, 3.
const NOMINAL: [(f64, f64); 3] = [(1.0, 0.682_689_492), (2.0, 0.954_499_736), (3.0, 0.997_300_204)];

/// Deviation from the k = 1 nominal that raises a flag.
const FLAG_MARGIN: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverageRow {
    pub k: f64,
    pub coverage: f64,
    pub nominal: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub rows: Vec<CoverageRow>,
    pub samples: usize,
    /// σ too large: far more than the nominal mass within 1σ.
    pub over_conservative: bool,
    /// σ too small.
    pub over_confident: bool,
}

impl CalibrationReport {
    pub fn coverage(&self, k: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.coverage)
    }
}

impl fmt::Display for CalibrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "k  coverage  nominal  ({} samples)", self.samples)?;
        for r in &self.rows {
            writeln!(f, "{}  {:7.3}%  {:6.1}%", r.k, 100.0 * r.coverage, 100.0 * r.nominal)?;
        }
        if self.over_conservative {
            writeln!(f, "flag: over-conservative (σ too large)")?;
        }
        if self.over_confident {
            writeln!(f, "flag: over-confident (σ too small)")?;
        }
        Ok(())
    }
}

/// Coverage of `|s − μ| ≤ kσ` over `(|s − μ|, σ)` pairs.
pub fn coverage_table(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<CalibrationReport, PriorError> {
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for (err, sigma) in pairs {
        n += 1;
        for (h, (k, _)) in hits.iter_mut().zip(NOMINAL) {
            if err.abs() <= k * sigma {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(PriorError::EmptyHeldOut);
    }
    let rows: Vec<CoverageRow> = hits
        .iter()
        .zip(NOMINAL)
        .map(|(&h, (k, nominal))| CoverageRow {
            k,
            coverage: h as f64 / n as f64,
            nominal,
        })
        .collect();
    Ok(CalibrationReport {
        over_conservative: rows[0].coverage > rows[0].nominal + FLAG_MARGIN,
        over_confident: rows[0].coverage < rows[0].nominal - FLAG_MARGIN,
        rows,
        samples: n,
    })
}

/// Samples `voxels` surface voxels from `held_out` and measures coverage
/// over their decoder sets.
pub fn calibration_report(
    weights: &NetWeights,
    held_out: &ShapeCorpus,
    cfg: &TrainConfig,
    voxels: usize,
    seed: u64,
) -> Result<CalibrationReport, PriorError> {
    if held_out.is_empty() || voxels == 0 {
        return Err(PriorError::EmptyHeldOut);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(voxels * cfg.n_d);
    for i in 0..voxels {
        let shape = &held_out.shapes[i % held_out.len()];
        let sample = sample_random_voxel(shape, held_out.extent, cfg, &mut rng)?;
        let latent = weights.encode_points(&sample.surface)?;
        let mut batch = DecoderBatch::with_capacity(latent.len(), sample.samples.len());
        for (y, _) in &sample.samples {
            batch.push(y, &latent);
        }
        for (d, (_, s)) in weights.decode_batch(&batch).iter().zip(&sample.samples) {
            pairs.push(((s - d.mu).abs(), d.sigma));
        }
    }
    coverage_table(pairs)
}
