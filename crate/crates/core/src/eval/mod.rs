//! Loss evaluation and post-training analyses.

mod calibrate;
mod gradnorm;
mod leakage;
mod scaling;

pub use calibrate::{calibrate, CachedLogits, CalibrationConfig, CalibrationResult};
pub use gradnorm::{grad_norm_study, group_gradients, GradNormRow, GradNormSummary};
pub use leakage::{leakage, LeakageReport};
pub use scaling::{compute_penalty, fit_power_law, fit_scaling, PowerLaw, ScalingFit};

use serde::{Deserialize, Serialize};

use crate::data::TestSets;
use crate::error::Result;
use crate::model::{forward, lm_loss, ForwardOptions, ModelConfig, ParamSet, TokenBatch, IGNORE};
use crate::tensor::Float;

pub const EVAL_BATCH: usize = 32;

/// Token-weighted mean next-token loss over `seqs`.
pub fn mean_loss<T: Float>(config: &ModelConfig, params: &ParamSet<T>, seqs: &[Vec<u32>]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in seqs.chunks(EVAL_BATCH) {
        let batch = TokenBatch::from_sequences(chunk)?;
        let k = batch.n_targets();
        if k == 0 {
            continue;
        }
        sum += lm_loss(config, params, &batch, ForwardOptions::default())? * k as f64;
        n += k;
    }
    if n == 0 {
        return Err(crate::Error::contract("evaluation set has no target positions"));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLosses {
    pub forget: f64,
    pub retain: f64,
    pub related: f64,
}

pub fn eval_losses<T: Float>(config: &ModelConfig, params: &ParamSet<T>, test: &TestSets) -> Result<EvalLosses> {
    Ok(EvalLosses {
        forget: mean_loss(config, params, &test.forget)?,
        retain: mean_loss(config, params, &test.retain)?,
        related: mean_loss(config, params, &test.related)?,
    })
}

/// Logits of every target position with the matching targets.
pub fn collect_logits<T: Float>(config: &ModelConfig, params: &ParamSet<T>, seqs: &[Vec<u32>]) -> Result<CachedLogits> {
    let v = config.vocab_size;
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for chunk in seqs.chunks(EVAL_BATCH) {
        let batch = TokenBatch::from_sequences(chunk)?;
        let pass = forward(config, params, &batch, ForwardOptions::default())?;
        let z = pass.logits_value().expect("full forward has logits");
        for (row, &t) in batch.targets().iter().enumerate() {
            if t != IGNORE {
                logits.extend(z.data()[row * v..(row + 1) * v].iter().map(|x| x.as_f64() as f32));
                targets.push(t as u32);
            }
        }
    }
    CachedLogits::new(v, logits, targets)
}

/// Per-position losses, optionally with a logit bias added.
pub fn per_token_losses(cache: &CachedLogits, bias: Option<&[f64]>) -> Vec<f64> {
    (0..cache.len()).map(|i| cache.row_loss(i, bias)).collect()
}

/// `bins` uniform bins over `[0, ln V + 1]`; values above the range go to
/// the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

pub fn loss_histogram(losses: &[f64], vocab_size: usize, bins: usize) -> Histogram {
    let (lo, hi) = (0.0, (vocab_size as f64).ln() + 1.0);
    let mut counts = vec![0u64; bins];
    for &l in losses {
        let b = (((l - lo) / (hi - lo)) * bins as f64).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    Histogram { lo, hi, counts }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
