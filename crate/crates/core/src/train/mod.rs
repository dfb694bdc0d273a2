//! Training loop, optimizer, RMU and the fine-tuning attack.

mod attack;
mod optim;
mod rmu;

pub use attack::{finetune_attack, AttackPoint, AttackReport, FinetunePlan};
pub use optim::{cosine_lr, AdamWConfig, OptimizerState};
pub use rmu::{run_rmu, RmuPlan, RmuStep};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset, Domain, TestSets};
use crate::error::{Error, Result};
use crate::eval::eval_losses;
use crate::interventions::{BatchLabel, InterventionPlan};
use crate::model::{loss_and_grads, ForwardOptions, ModelConfig, ParamSet};
use crate::partition::{ablate, build_designation, PartitionSpec};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    /// Labeled training with one of the routing variants; evaluated after
    /// ablation.
    Sgtm(PartitionSpec),
    /// Drops every example labeled FORGET.
    FilterWeak,
    /// Trains on everything.
    FilterNone,
    /// Drops every forget-domain example by ground truth.
    FilterPerfect,
}

impl TrainMethod {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMethod::Sgtm(spec) => spec.variant.name(),
            TrainMethod::FilterWeak => "filter_weak",
            TrainMethod::FilterNone => "filter_none",
            TrainMethod::FilterPerfect => "filter_perfect",
        }
    }

    /// The examples this method trains on.
    pub fn view(&self, dataset: &Dataset) -> Dataset {
        match self {
            TrainMethod::Sgtm(_) | TrainMethod::FilterNone => dataset.clone(),
            TrainMethod::FilterWeak => dataset.without_flagged(),
            TrainMethod::FilterPerfect => dataset.filter(|e| e.domain == Domain::Retain),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub method: TrainMethod,
    /// Optimizer steps; `None` runs one epoch over the method's data.
    #[serde(default)]
    pub steps: Option<usize>,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    pub seed: u64,
    /// Evaluate (and optionally keep a checkpoint) every this many steps.
    pub eval_every: usize,
    /// Skip masked groups entirely in the optimizer on FORGET batches.
    /// `false` only masks gradients, which lets moments and weight decay
    /// still move retain parameters.
    #[serde(default = "yes")]
    pub skip_masked: bool,
    #[serde(default)]
    pub keep_checkpoints: bool,
}

fn yes() -> bool {
    true
}

impl TrainPlan {
    pub fn new(method: TrainMethod, seed: u64) -> Self {
        TrainPlan {
            method,
            steps: None,
            warmup_steps: 20,
            batch_size: 16,
            peak_lr: 5e-3,
            adamw: AdamWConfig::default(),
            seed,
            eval_every: 50,
            skip_masked: true,
            keep_checkpoints: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub tokens_retain: u64,
    pub tokens_forget: u64,
    pub flops: f64,
    pub loss_retain_test: f64,
    pub loss_forget_test: f64,
    pub loss_related_test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub n_params: usize,
    pub steps: usize,
    pub metrics: Vec<MetricRow>,
    /// Forget-domain tokens trained on without a FORGET label.
    pub undiscovered_forget_tokens: u64,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn last(&self) -> &MetricRow {
        self.metrics.last().expect("a run records at least its initial evaluation")
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.status {
            RunStatus::Completed => Ok(self),
            RunStatus::Diverged { step, reason } => Err(Error::Diverged { step: *step, reason: reason.clone() }),
        }
    }
}

/// What the training loop did at one step, for instrumentation.
#[derive(Clone, Debug)]
pub struct StepInfo<'a> {
    pub step: usize,
    pub label: BatchLabel,
    pub examples: &'a [usize],
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutput<T> {
    /// Final parameters before any ablation.
    pub params: ParamSet<T>,
    pub record: RunRecord,
    /// `(step, params)` at every evaluation when `keep_checkpoints` is set.
    pub checkpoints: Vec<(usize, ParamSet<T>)>,
}

/// Total optimizer steps of a plan on a dataset.
pub fn resolve_steps(plan: &TrainPlan, dataset: &Dataset) -> usize {
    plan.steps.unwrap_or_else(|| {
        let view = plan.method.view(dataset);
        BatchLabel::ALL
            .iter()
            .map(|&l| view.indices(l).len().div_ceil(plan.batch_size.max(1)))
            .sum()
    })
}

pub fn train<T: Float>(
    config: &ModelConfig,
    plan: &TrainPlan,
    dataset: &Dataset,
    test: &TestSets,
    init: ParamSet<T>,
    mut hook: Option<&mut dyn FnMut(&StepInfo<'_>)>,
) -> Result<TrainOutput<T>> {
    config.validate()?;
    init.check_layout(config)?;
    if plan.batch_size == 0 || plan.eval_every == 0 {
        return Err(Error::config("batch_size and eval_every must be positive"));
    }
    let view = plan.method.view(dataset);
    if view.is_empty() {
        return Err(Error::config("the method's data view is empty"));
    }
    let total = resolve_steps(plan, dataset);
    if plan.warmup_steps >= total {
        return Err(Error::config(format!(
            "warmup_steps {} must be below the {} training steps",
            plan.warmup_steps, total
        )));
    }
    let interventions = match &plan.method {
        TrainMethod::Sgtm(spec) => Some(InterventionPlan::new(build_designation(config, spec)?)),
        _ => None,
    };
    let desig = interventions.as_ref().map(InterventionPlan::designation);
    let mut params = init;
    let mut opt = OptimizerState::new(&params, desig, plan.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(0x5eed);
    let n_params = config.n_params();

    let mut record = RunRecord {
        method: plan.method.name().to_string(),
        n_params,
        steps: total,
        metrics: Vec::new(),
        undiscovered_forget_tokens: 0,
        status: RunStatus::Completed,
    };
    let mut checkpoints = Vec::new();
    let (mut tok_r, mut tok_f) = (0u64, 0u64);
    let mut evaluate = |step: usize, tok_r: u64, tok_f: u64, params: &ParamSet<T>, record: &mut RunRecord| -> Result<()> {
        let losses = match desig {
            Some(d) => eval_losses(config, &ablate(params, d)?, test)?,
            None => eval_losses(config, params, test)?,
        };
        record.metrics.push(MetricRow {
            step,
            tokens_retain: tok_r,
            tokens_forget: tok_f,
            flops: 6.0 * n_params as f64 * (tok_r + tok_f) as f64,
            loss_retain_test: losses.retain,
            loss_forget_test: losses.forget,
            loss_related_test: losses.related,
        });
        if plan.keep_checkpoints {
            checkpoints.push((step, params.clone()));
        }
        Ok(())
    };
    evaluate(0, 0, 0, &params, &mut record)?;

    let mut queue = Vec::new();
    for step in 0..total {
        if queue.is_empty() {
            queue = epoch_batches(&view, plan.batch_size, &mut rng);
            queue.reverse();
        }
        let (label, idx) = queue.pop().expect("non-empty dataset gives batches");
        let batch = view.batch(&idx)?;
        let opts = match &interventions {
            Some(iv) => iv.forward_options(label, true),
            None => ForwardOptions { requires_grad: true, ..Default::default() },
        };
        let (loss, grads) = loss_and_grads(config, &params, &batch, opts)?;
        if !loss.is_finite() || !grads.is_finite() {
            record.status = RunStatus::Diverged { step, reason: format!("non-finite loss {loss} or gradient") };
            break;
        }
        let (grads, skip) = match &interventions {
            Some(iv) => {
                let skip = if plan.skip_masked { iv.actions(label).skip } else { None };
                (iv.mask_gradients(grads, label), skip)
            }
            None => (grads, None),
        };
        let lr = cosine_lr(step, plan.warmup_steps, total, plan.peak_lr);
        opt.step(&mut params, &grads, lr, skip);

        for &i in &idx {
            let e = &view.examples[i];
            let n = e.tokens.len() as u64;
            match e.domain {
                Domain::Forget => {
                    tok_f += n;
                    if e.label != BatchLabel::Forget {
                        record.undiscovered_forget_tokens += n;
                    }
                }
                Domain::Retain => tok_r += n,
            }
        }
        if let Some(h) = hook.as_mut() {
            h(&StepInfo { step, label, examples: &idx, lr, loss });
        }
        let done = step + 1;
        if done % plan.eval_every == 0 || done == total {
            evaluate(done, tok_r, tok_f, &params, &mut record)?;
        }
    }
    Ok(TrainOutput { params, record, checkpoints })
}
