use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TestSets;
use crate::error::{Error, Result};
use crate::eval::eval_losses;
use crate::model::{forward, standard_normal, ForwardOptions, ModelConfig, ParamGrads, ParamSet, TokenBatch, PAD};
use crate::tensor::{Float, Tensor};

use super::{AdamWConfig, MetricRow, OptimizerState, RunRecord, RunStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmuPlan {
    pub steps: usize,
    /// Weight of the retain term.
    pub alpha: f64,
    pub steering_coefficient: f64,
    /// Block whose output is steered; defaults to the last block.
    #[serde(default)]
    pub unlearn_layer: Option<usize>,
    /// Blocks whose MLP weights and biases are updated; defaults to the
    /// three blocks ending at `unlearn_layer`.
    #[serde(default)]
    pub update_layers: Option<Vec<usize>>,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for RmuPlan {
    fn default() -> Self {
        RmuPlan {
            steps: 250,
            alpha: 100.0,
            steering_coefficient: 20.0,
            unlearn_layer: None,
            update_layers: None,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            eval_every: 50,
        }
    }
}

impl RmuPlan {
    pub fn layers(&self, config: &ModelConfig) -> Result<(usize, Vec<usize>)> {
        let ul = self.unlearn_layer.unwrap_or(config.n_layers - 1);
        if ul >= config.n_layers {
            return Err(Error::config(format!("unlearn_layer {ul} out of range for {} layers", config.n_layers)));
        }
        let update = self
            .update_layers
            .clone()
            .unwrap_or_else(|| (ul.saturating_sub(2)..=ul).collect());
        if update.is_empty() || update.iter().any(|&l| l > ul) {
            return Err(Error::config("update_layers must be non-empty and at or below unlearn_layer"));
        }
        Ok((ul, update))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmuStep {
    pub step: usize,
    pub forget_term: f64,
    pub retain_term: f64,
}

/// Mean squared distance between block outputs and `target` over non-pad
/// positions, with its gradient. Pad rows of the target copy the current
/// activations so they contribute nothing.
fn steer_loss<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    batch: &TokenBatch,
    layer: usize,
    target: impl Fn(usize) -> Option<Vec<T>>,
) -> Result<(f64, ParamGrads<T>)> {
    let opts = ForwardOptions { stop_after_layer: Some(layer), requires_grad: true, ..Default::default() };
    let mut pass = forward(config, params, batch, opts)?;
    let h = pass.block_outputs[layer];
    let d = config.d_model;
    let mut t = pass.graph.value(h).clone();
    let mut live = 0;
    for (row, &tok) in batch.ids.iter().enumerate() {
        if tok == PAD {
            continue;
        }
        if let Some(v) = target(row) {
            t.data_mut()[row * d..(row + 1) * d].copy_from_slice(&v);
            live += 1;
        }
    }
    if live == 0 {
        return Err(Error::contract("steering batch has no tokens"));
    }
    let tv = pass.graph.constant(t);
    let mse = pass.graph.mse(h, tv)?;
    let rows = batch.ids.len() as f64;
    let loss = pass.graph.scale(mse, T::lit(rows / live as f64));
    let value = pass.graph.value(loss).item().as_f64();
    Ok((value, pass.param_grads(loss)?))
}

fn block_output<T: Float>(config: &ModelConfig, params: &ParamSet<T>, batch: &TokenBatch, layer: usize) -> Result<Tensor<T>> {
    let opts = ForwardOptions { stop_after_layer: Some(layer), ..Default::default() };
    let pass = forward(config, params, batch, opts)?;
    Ok(pass.graph.value(pass.block_outputs[layer]).clone())
}

/// Steers the unlearn layer's activations on forget data towards
/// `c * u` for a fixed random unit vector `u`, while matching a frozen copy
/// of the model on retain data. Only MLP weights and biases of the update
/// layers change.
pub fn run_rmu<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    plan: &RmuPlan,
    forget: &[Vec<u32>],
    retain: &[Vec<u32>],
    test: &TestSets,
) -> Result<(ParamSet<T>, RunRecord, Vec<RmuStep>)> {
    let (ul, update) = plan.layers(config)?;
    if forget.is_empty() || retain.is_empty() || plan.batch_size == 0 || plan.eval_every == 0 {
        return Err(Error::config("RMU needs forget and retain data, a positive batch size and eval interval"));
    }
    let frozen = params.clone();
    let mut model = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let d = config.d_model;
    let u: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let control: Vec<T> = u.iter().map(|x| T::lit(plan.steering_coefficient * x / norm)).collect();

    let trainable: Vec<bool> = model
        .iter()
        .map(|p| {
            update.iter().any(|l| {
                ["mlp.w_1", "mlp.b_1", "mlp.w_2", "mlp.b_2"]
                    .iter()
                    .any(|n| p.path == format!("blocks.{l}.{n}"))
            })
        })
        .collect();
    let mut opt = OptimizerState::new(&model, None, AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    opt.freeze(trainable.iter().map(|t| !t).collect());

    let n_params = config.n_params();
    let mut record = RunRecord {
        method: "rmu".into(),
        n_params,
        steps: plan.steps,
        metrics: Vec::new(),
        undiscovered_forget_tokens: 0,
        status: RunStatus::Completed,
    };
    let (mut tok_f, mut tok_r) = (0u64, 0u64);
    let eval = |step, tok_f, tok_r, model: &ParamSet<T>, record: &mut RunRecord| -> Result<()> {
        let l = eval_losses(config, model, test)?;
        record.metrics.push(MetricRow {
            step,
            tokens_retain: tok_r,
            tokens_forget: tok_f,
            flops: 6.0 * n_params as f64 * (tok_f + tok_r) as f64,
            loss_retain_test: l.retain,
            loss_forget_test: l.forget,
            loss_related_test: l.related,
        });
        Ok(())
    };
    eval(0, 0, 0, &model, &mut record)?;
    let mut trace = Vec::with_capacity(plan.steps);
    let draw = |pool: &[Vec<u32>], rng: &mut ChaCha8Rng| -> Result<TokenBatch> {
        let seqs: Vec<&[u32]> = (0..plan.batch_size).map(|_| pool[rng.gen_range(0..pool.len())].as_slice()).collect();
        TokenBatch::from_sequences(&seqs)
    };
    for step in 0..plan.steps {
        let fb = draw(forget, &mut rng)?;
        let rb = draw(retain, &mut rng)?;
        let (lf, gf) = steer_loss(config, &model, &fb, ul, |_| Some(control.clone()))?;
        let reference = block_output(config, &frozen, &rb, ul)?;
        let (lr_, gr) = steer_loss(config, &model, &rb, ul, |row| Some(reference.data()[row * d..(row + 1) * d].to_vec()))?;
        if !(lf.is_finite() && lr_.is_finite()) {
            record.status = RunStatus::Diverged { step, reason: "non-finite RMU loss".into() };
            break;
        }
        let mut g = gf;
        for (a, b) in g.grads.iter_mut().zip(&gr.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += T::lit(plan.alpha) * *y;
            }
        }
        opt.step(&mut model, &g, plan.lr, None);
        tok_f += fb.non_pad_tokens() as u64;
        tok_r += rb.non_pad_tokens() as u64;
        trace.push(RmuStep { step, forget_term: lf, retain_term: lr_ });
        if (step + 1) % plan.eval_every == 0 || step + 1 == plan.steps {
            eval(step + 1, tok_f, tok_r, &model, &mut record)?;
        }
    }
    Ok((model, record, trace))
}
