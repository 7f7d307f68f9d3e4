use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{sample_random_voxel, Adam, PriorError, ShapeCorpus, TrainConfig, TrainVoxelSample};
use crate::net::{backprop_params, LossBreakdown, NetWeights};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-voxel loss (data term plus regularizer).
    pub mean_loss: f64,
    /// Mean per-sample data term.
    pub mean_nll: f64,
    /// Mean per-voxel regularizer.
    pub mean_reg: f64,
    /// Mean per-sample `|s − μ|`.
    pub mean_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: NetWeights,
    pub curve: Vec<EpochStats>,
    pub optimizer: Adam,
}

fn draw_batch(corpus: &ShapeCorpus, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TrainVoxelSample>, PriorError> {
    let seeds: Vec<u64> = (0..cfg.batch).map(|_| rng.random()).collect();
    seeds
        .into_par_iter()
        .map(|seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut last = None;
            // a shape without reachable surface is replaced by another draw
            for _ in 0..10 {
                let shape = &corpus.shapes[r.random_range(0..corpus.len())];
                match sample_random_voxel(shape, corpus.extent, cfg, &mut r) {
                    Err(PriorError::NoSurface(e)) => last = Some(e),
                    other => return other,
                }
            }
            Err(PriorError::NoSurface(last.unwrap_or_default()))
        })
        .collect()
}

/// Trains from `NetWeights::init(cfg.seed)`.
pub fn train(corpus: &ShapeCorpus, cfg: &TrainConfig) -> Result<TrainOutcome, PriorError> {
    train_from(corpus, cfg, NetWeights::init(cfg.seed))
}

/// Adam on the mean per-voxel loss, one fresh batch of surface voxels per
/// step. Deterministic for a given config, corpus and initialization.
pub fn train_from(corpus: &ShapeCorpus, cfg: &TrainConfig, init: NetWeights) -> Result<TrainOutcome, PriorError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(PriorError::EmptyCorpus);
    }
    init.validate()?;
    let mut weights = init;
    let mut adam = Adam::new(weights.param_count(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut curve = Vec::with_capacity(cfg.epochs);
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 1..=cfg.epochs {
        let mut totals = LossBreakdown::default();
        let mut voxels = 0usize;
        for step in 0..cfg.steps_per_epoch {
            let batch = draw_batch(corpus, cfg, &mut rng)?;
            let parts: Vec<(LossBreakdown, NetWeights)> = batch
                .par_iter()
                .map(|s| backprop_params(&weights, &[s.as_item()], cfg.loss, cfg.delta))
                .collect();
            let mut grads = weights.zeros_like();
            let mut loss = LossBreakdown::default();
            for (l, g) in &parts {
                loss.add(l);
                for (a, b) in grads.encoder.params_mut().zip(g.encoder.params()) {
                    *a += b;
                }
                for (a, b) in grads.decoder.params_mut().zip(g.decoder.params()) {
                    *a += b;
                }
            }
            if !loss.total.is_finite() || !grads.encoder.is_finite() || !grads.decoder.is_finite() {
                return Err(PriorError::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!(
                        "data {} reg {} over {} voxels; weights finite: {}",
                        loss.data,
                        loss.reg,
                        batch.len(),
                        weights.validate().is_ok()
                    ),
                });
            }
            let scale = 1.0 / batch.len() as f64;
            grads.encoder.params_mut().chain(grads.decoder.params_mut()).for_each(|g| *g *= scale);
            adam.update(&mut weights, &grads);
            totals.add(&loss);
            voxels += batch.len();
        }
        let samples = totals.samples.max(1) as f64;
        let v = voxels.max(1) as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: totals.total / v,
            mean_nll: totals.data / samples,
            mean_reg: totals.reg / v,
            mean_abs_err: totals.abs_err / samples,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} nll/sample {:.4} reg {:.5} |err| {:.4}",
            stats.mean_loss,
            stats.mean_nll,
            stats.mean_reg,
            stats.mean_abs_err
        );
        curve.push(stats);
        adam.lr *= cfg.lr_decay;
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                super::write_checkpoint(&dir.join(format!("epoch_{epoch:04}")), &weights, &adam)?;
            }
        }
    }
    Ok(TrainOutcome {
        weights,
        curve,
        optimizer: adam,
    })
}

pub fn write_loss_curve(path: &Path, curve: &[EpochStats]) -> std::io::Result<()> {
    let mut out = String::from("epoch,mean_loss,mean_nll,mean_reg\n");
    for s in curve {
        let _ = writeln!(out, "{},{},{},{}", s.epoch, s.mean_loss, s.mean_nll, s.mean_reg);
    }
    std::fs::write(path, out)
}
