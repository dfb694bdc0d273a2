use serde::{Deserialize, Serialize};

use crate::model::{ParamGrads, ParamSet};
use crate::partition::{ParamDesignation, Tag};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

const TAGS: [Tag; 3] = [Tag::Forget, Tag::Retain, Tag::Joint];

fn tag_index(t: Tag) -> usize {
    match t {
        Tag::Forget => 0,
        Tag::Retain => 1,
        Tag::Joint => 2,
    }
}

/// AdamW moments plus one step counter per designation group, so that a
/// group skipped on some batches keeps its own bias correction.
///
/// Weight decay is decoupled and applies to matrices only (parameters with
/// two axes); biases, gains and vectors are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: [u64; 3],
    /// Per parameter `(start, end, tag)`; without a designation every
    /// element is joint.
    ranges: Vec<Vec<(usize, usize, Tag)>>,
    frozen: Vec<bool>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, desig: Option<&ParamDesignation>, config: AdamWConfig) -> Self {
        let ranges = params
            .iter()
            .enumerate()
            .map(|(i, p)| match desig {
                Some(d) => d.ranges(i).iter().map(|r| (r.0, r.1, r.2)).collect(),
                None => vec![(0, p.value.numel(), Tag::Joint)],
            })
            .collect();
        OptimizerState {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            steps: [0; 3],
            ranges,
            frozen: vec![false; params.len()],
        }
    }

    /// Excludes parameters from every update.
    pub fn freeze(&mut self, frozen: Vec<bool>) {
        assert_eq!(frozen.len(), self.frozen.len(), "one flag per parameter");
        self.frozen = frozen;
    }

    pub fn step_count(&self, tag: Tag) -> u64 {
        self.steps[tag_index(tag)]
    }

    /// One AdamW update at learning rate `lr`. Elements of group `skip` get
    /// no moment update, no decay and no step increment.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>, lr: f64, skip: Option<Tag>) {
        let c = self.config;
        for t in TAGS {
            if Some(t) != skip {
                self.steps[tag_index(t)] += 1;
            }
        }
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let eps = T::lit(c.eps);
        for (i, ranges) in self.ranges.iter().enumerate() {
            if self.frozen[i] {
                continue;
            }
            let p = params.get_mut(i);
            let decay = if p.value.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let shrink = T::lit(1.0 - lr * decay);
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads.get(i).data());
            let x = p.value.data_mut();
            for &(s, e, tag) in ranges {
                if Some(tag) == skip {
                    continue;
                }
                let n = self.steps[tag_index(tag)] as i32;
                let bc1 = T::lit(1.0 - c.beta1.powi(n));
                let bc2 = T::lit(1.0 - c.beta2.powi(n));
                let lr_t = T::lit(lr);
                for j in s..e {
                    m[j] = b1 * m[j] + one_b1 * g[j];
                    v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    x[j] = x[j] * shrink - lr_t * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero
/// at `total`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}
