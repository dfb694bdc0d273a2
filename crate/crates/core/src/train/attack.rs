use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::mean_loss;
use crate::model::{loss_and_grads, ForwardOptions, ModelConfig, ParamSet, TokenBatch};
use crate::tensor::Float;

use super::{AdamWConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetunePlan {
    /// Give up after this many steps.
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of each batch drawn from forget data.
    pub mix: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// The baseline counts as reached once the forget loss is within this
    /// many nats of it.
    pub tolerance: f64,
}

impl Default for FinetunePlan {
    fn default() -> Self {
        FinetunePlan { max_steps: 500, batch_size: 16, lr: 1e-3, mix: 0.5, seed: 0, eval_every: 5, tolerance: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPoint {
    pub step: usize,
    pub forget_tokens: u64,
    pub forget_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub baseline_forget_loss: f64,
    pub curve: Vec<AttackPoint>,
    /// First evaluated step at which the baseline was reached; `None` if
    /// `max_steps` ran out first.
    pub steps_to_baseline: Option<usize>,
}

/// Full-parameter fine-tuning on mixed forget/retain batches with no
/// interventions, at a constant learning rate, until the forget test loss
/// reaches `baseline_forget_loss + tolerance`.
pub fn finetune_attack<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    plan: &FinetunePlan,
    forget: &[Vec<u32>],
    retain: &[Vec<u32>],
    forget_test: &[Vec<u32>],
    baseline_forget_loss: f64,
) -> Result<(ParamSet<T>, AttackReport)> {
    if forget.is_empty() || retain.is_empty() || plan.batch_size == 0 || plan.eval_every == 0 {
        return Err(Error::config("fine-tuning needs data, a positive batch size and eval interval"));
    }
    if !(0.0..=1.0).contains(&plan.mix) {
        return Err(Error::config("mix must lie in [0, 1]"));
    }
    let mut model = params.clone();
    let mut opt = OptimizerState::new(&model, None, AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let n_forget = (plan.batch_size as f64 * plan.mix).round() as usize;
    let target = baseline_forget_loss + plan.tolerance;
    let mut curve = Vec::new();
    let mut tokens = 0u64;
    let mut reached = None;
    let mut step = 0;
    loop {
        if step % plan.eval_every == 0 || step == plan.max_steps {
            let loss = mean_loss(config, &model, forget_test)?;
            curve.push(AttackPoint { step, forget_tokens: tokens, forget_loss: loss });
            if loss <= target {
                reached = Some(step);
                break;
            }
        }
        if step == plan.max_steps {
            break;
        }
        let mut seqs: Vec<&[u32]> = Vec::with_capacity(plan.batch_size);
        for k in 0..plan.batch_size {
            let pool = if k < n_forget { forget } else { retain };
            seqs.push(&pool[rng.gen_range(0..pool.len())]);
        }
        tokens += seqs[..n_forget].iter().map(|s| s.len() as u64).sum::<u64>();
        let batch = TokenBatch::from_sequences(&seqs)?;
        let (loss, g) = loss_and_grads(config, &model, &batch, ForwardOptions::default())?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, reason: "non-finite fine-tuning loss".into() });
        }
        opt.step(&mut model, &g, plan.lr, None);
        step += 1;
    }
    Ok((model, AttackReport { baseline_forget_loss, curve, steps_to_baseline: reached }))
}
