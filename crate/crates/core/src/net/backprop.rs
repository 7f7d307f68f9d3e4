//! Parameter gradients of the per-voxel training loss, through the decoder,
//! the pooled latent and the encoder.

use nalgebra::Vector3;

use super::{mean_pool, raw_to_dist, sigmoid, NetWeights};
use crate::grid::LocalPoint;

pub const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    /// `½ln(2πσ²) + (s − μ)²/(2σ²)` per decoder sample.
    #[default]
    GaussianNll,
    /// `(s − μ)²`; σ receives no gradient.
    SquaredError,
}

/// One training voxel: encoder context and decoder targets.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub surface: &'a [LocalPoint],
    /// `(y, s_gt)` pairs in voxel units.
    pub samples: &'a [(Vector3<f64>, f64)],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Data term plus latent regularizer, summed over items.
    pub total: f64,
    /// Sum of per-sample data losses.
    pub data: f64,
    /// Sum of `δ‖l‖²`.
    pub reg: f64,
    pub samples: usize,
    /// Sum of `|s_gt − μ|`, for monitoring.
    pub abs_err: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.data += other.data;
        self.reg += other.reg;
        self.samples += other.samples;
        self.abs_err += other.abs_err;
    }
}

/// Loss and exact reverse-mode gradients for every encoder and decoder
/// parameter. Items are processed in order and their gradients summed, so
/// the batch gradient equals the in-order sum of per-item gradients.
pub fn backprop_params(
    weights: &NetWeights,
    items: &[TrainItem<'_>],
    kind: LossKind,
    delta: f64,
) -> (LossBreakdown, NetWeights) {
    let mut grads = weights.zeros_like();
    let mut total = LossBreakdown::default();
    for item in items {
        let mut item_grads = weights.zeros_like();
        let loss = item_backprop(weights, item, kind, delta, &mut item_grads);
        accumulate(&mut grads, &item_grads);
        total.add(&loss);
    }
    (total, grads)
}

fn accumulate(into: &mut NetWeights, from: &NetWeights) {
    for (a, b) in into.encoder.params_mut().zip(from.encoder.params()) {
        *a += b;
    }
    for (a, b) in into.decoder.params_mut().zip(from.decoder.params()) {
        *a += b;
    }
}

fn item_backprop(
    weights: &NetWeights,
    item: &TrainItem<'_>,
    kind: LossKind,
    delta: f64,
    grads: &mut NetWeights,
) -> LossBreakdown {
    let dim = weights.latent_dim();
    let n_s = item.surface.len();
    let n_d = item.samples.len();
    if n_s == 0 {
        return LossBreakdown::default();
    }
    let enc_in = NetWeights::encoder_input(item.surface);
    let enc_trace = weights.encoder.forward_traced(enc_in, n_s);
    let latent = mean_pool(enc_trace.output(), dim, n_s);

    let width = 3 + dim;
    let mut dec_in = Vec::with_capacity(width * n_d);
    for (y, _) in item.samples {
        dec_in.extend_from_slice(y.as_slice());
        dec_in.extend_from_slice(&latent);
    }
    let dec_trace = weights.decoder.forward_traced(dec_in, n_d);
    let out = dec_trace.output();

    let mut loss = LossBreakdown {
        samples: n_d,
        ..Default::default()
    };
    let mut seed = vec![0.0; 2 * n_d];
    for (j, (_, s)) in item.samples.iter().enumerate() {
        let raw_sigma = out[2 * j + 1];
        let dist = raw_to_dist(out[2 * j], raw_sigma);
        let err = s - dist.mu;
        loss.abs_err += err.abs();
        match kind {
            LossKind::GaussianNll => {
                let var = dist.sigma * dist.sigma;
                loss.data += HALF_LN_TWO_PI + dist.sigma.ln() + err * err / (2.0 * var);
                seed[2 * j] = -err / var;
                let dsigma = 1.0 / dist.sigma - err * err / (var * dist.sigma);
                seed[2 * j + 1] = dsigma * sigmoid(raw_sigma);
            }
            LossKind::SquaredError => {
                loss.data += err * err;
                seed[2 * j] = -2.0 * err;
            }
        }
    }
    loss.reg = delta * latent.iter().map(|l| l * l).sum::<f64>();
    loss.total = loss.data + loss.reg;

    let dec_grad_in = weights.decoder.backward(&dec_trace, seed, Some(&mut grads.decoder));
    let mut dlatent: Vec<f64> = latent.iter().map(|l| 2.0 * delta * l).collect();
    for col in dec_grad_in.chunks_exact(width) {
        for (d, g) in dlatent.iter_mut().zip(&col[3..]) {
            *d += g;
        }
    }
    let inv = 1.0 / n_s as f64;
    let mut enc_seed = Vec::with_capacity(dim * n_s);
    for _ in 0..n_s {
        enc_seed.extend(dlatent.iter().map(|d| d * inv));
    }
    weights.encoder.backward(&enc_trace, enc_seed, Some(&mut grads.encoder));
    loss
}
