//! Forget / retain / joint designation of every parameter element, and
//! ablation of the forget set.
//!
//! Forget heads and MLP units are always the leading ones: heads
//! `0..h_forget` and hidden units `0..d_forget` of each routed block.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Forget,
    Retain,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sgtm,
    SgtmJointProjection,
    SgtmJointAttention,
    GradientRouting,
    ActivationMasking,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Sgtm,
        Variant::SgtmJointProjection,
        Variant::SgtmJointAttention,
        Variant::GradientRouting,
        Variant::ActivationMasking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sgtm => "sgtm",
            Variant::SgtmJointProjection => "sgtm_joint_projection",
            Variant::SgtmJointAttention => "sgtm_joint_attention",
            Variant::GradientRouting => "gradient_routing",
            Variant::ActivationMasking => "activation_masking",
        }
    }

    /// Down projections (`W_2`, `b_2`, `W_O`, `b_O`) are updated by every batch.
    fn joint_down_projection(self) -> bool {
        !matches!(self, Variant::Sgtm)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub h_forget: usize,
    pub d_forget: usize,
    pub variant: Variant,
    #[serde(default = "yes")]
    pub embeddings_joint: bool,
    /// Blocks that carry forget/retain splits; all others are entirely
    /// joint. `None` means every block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routed_layers: Option<Vec<usize>>,
}

fn yes() -> bool {
    true
}

impl PartitionSpec {
    pub fn new(h_forget: usize, d_forget: usize, variant: Variant) -> Self {
        PartitionSpec { h_forget, d_forget, variant, embeddings_joint: true, routed_layers: None }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.h_forget > config.n_heads {
            return Err(Error::contract(format!(
                "h_forget {} exceeds n_heads {}",
                self.h_forget, config.n_heads
            )));
        }
        if self.d_forget > config.d_mlp {
            return Err(Error::contract(format!(
                "d_forget {} exceeds d_mlp {}",
                self.d_forget, config.d_mlp
            )));
        }
        if let Some(bad) = self.routed_layers.iter().flatten().find(|&&l| l >= config.n_layers) {
            return Err(Error::contract(format!("routed layer {bad} out of range")));
        }
        Ok(())
    }

    pub fn is_routed(&self, layer: usize) -> bool {
        self.routed_layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }
}

/// Half-open element range `[start, end)` of a flattened parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRange(pub usize, pub usize, pub Tag);

impl TagRange {
    pub fn range(&self) -> Range<usize> {
        self.0..self.1
    }

    pub fn len(&self) -> usize {
        self.1 - self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == self.1
    }
}

/// Per-parameter element ranges, aligned with the parameter declaration order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ElementMask {
    ranges: Vec<Vec<Range<usize>>>,
}

impl ElementMask {
    pub fn ranges(&self, param: usize) -> Option<&[Range<usize>]> {
        self.ranges.get(param).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.iter().all(Vec::is_empty)
    }

    pub fn count(&self) -> usize {
        self.ranges.iter().flatten().map(|r| r.len()).sum()
    }
}

/// Hidden activations of one block selected by a [`UnitMask`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerUnits {
    pub heads: Vec<bool>,
    pub units: Vec<bool>,
}

impl LayerUnits {
    /// Expands per-head flags to the `d_model` columns of concatenated heads.
    pub fn head_columns(&self, d_head: usize) -> Vec<bool> {
        self.heads.iter().flat_map(|&k| std::iter::repeat_n(k, d_head)).collect()
    }
}

/// Per-block selection of MLP hidden units and attention heads. `true`
/// marks the activations that are kept; blocks mapped to `None` are left
/// untouched.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct UnitMask {
    layers: Vec<Option<LayerUnits>>,
}

impl UnitMask {
    pub fn layer(&self, l: usize) -> Option<&LayerUnits> {
        self.layers.get(l).and_then(Option::as_ref)
    }

    /// Masks every block, keeping nothing.
    pub fn all_blocked(config: &ModelConfig) -> Self {
        UnitMask {
            layers: (0..config.n_layers)
                .map(|_| {
                    Some(LayerUnits {
                        heads: vec![false; config.n_heads],
                        units: vec![false; config.d_mlp],
                    })
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDesignation {
    config: ModelConfig,
    spec: PartitionSpec,
    paths: Vec<String>,
    ranges: Vec<Vec<TagRange>>,
}

/// Splits `[0, n)` into a leading `[0, k)` part and the rest, dropping empty pieces.
fn split(n: usize, k: usize, head: Tag, tail: Tag) -> Vec<TagRange> {
    [TagRange(0, k, head), TagRange(k, n, tail)]
        .into_iter()
        .filter(|r| !r.is_empty())
        .collect()
}

pub fn build_designation(config: &ModelConfig, spec: &PartitionSpec) -> Result<ParamDesignation> {
    config.validate()?;
    spec.validate(config)?;
    use Tag::*;
    let (d, dh) = (config.d_model, config.d_head());
    let hf_rows = spec.h_forget * dh;
    let emb = if spec.embeddings_joint { Joint } else { Retain };
    let down = if spec.variant.joint_down_projection() { Joint } else { Retain };
    let mut paths = Vec::new();
    let mut ranges = Vec::new();
    for (path, shape) in config.param_layout() {
        let n: usize = shape.iter().product();
        let whole = |tag| vec![TagRange(0, n, tag)];
        let rs = if path == "tok_emb" || path == "unembed" {
            whole(emb)
        } else if path == "pos_emb" {
            whole(Retain)
        } else if path.contains("ln_") {
            whole(Joint)
        } else {
            let layer: usize = path
                .split('.')
                .nth(1)
                .and_then(|s| s.parse().ok())
                .expect("block parameters are named blocks.<layer>.*");
            let name = path.splitn(3, '.').nth(2).unwrap_or_default();
            if !spec.is_routed(layer) {
                whole(Joint)
            } else {
                match name {
                    "attn.w_qkv" if spec.variant == Variant::SgtmJointAttention => whole(Joint),
                    "attn.w_qkv" => (0..3)
                        .flat_map(|s| {
                            split(d * d, hf_rows * d, Forget, Retain)
                                .into_iter()
                                .map(move |r| TagRange(r.0 + s * d * d, r.1 + s * d * d, r.2))
                        })
                        .collect(),
                    "attn.w_o" => match spec.variant {
                        Variant::Sgtm => split(n, hf_rows * d, Forget, Retain),
                        Variant::SgtmJointProjection | Variant::SgtmJointAttention => whole(Joint),
                        Variant::GradientRouting | Variant::ActivationMasking => {
                            split(n, hf_rows * d, Forget, Joint)
                        }
                    },
                    "attn.b_o" | "mlp.b_2" => whole(down),
                    "mlp.w_1" => split(n, spec.d_forget * d, Forget, Retain),
                    "mlp.b_1" => split(n, spec.d_forget, Forget, Retain),
                    "mlp.w_2" => match spec.variant {
                        Variant::Sgtm => split(n, spec.d_forget * d, Forget, Retain),
                        Variant::SgtmJointProjection | Variant::SgtmJointAttention => whole(Joint),
                        Variant::GradientRouting | Variant::ActivationMasking => {
                            split(n, spec.d_forget * d, Forget, Joint)
                        }
                    },
                    other => unreachable!("unknown block parameter {other}"),
                }
            }
        };
        paths.push(path);
        ranges.push(rs);
    }
    Ok(ParamDesignation { config: config.clone(), spec: spec.clone(), paths, ranges })
}

impl ParamDesignation {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn spec(&self) -> &PartitionSpec {
        &self.spec
    }

    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    /// Ranges of parameter `i` in declaration order.
    pub fn ranges(&self, i: usize) -> &[TagRange] {
        &self.ranges[i]
    }

    pub fn ranges_for(&self, path: &str) -> Option<&[TagRange]> {
        self.paths.iter().position(|p| p == path).map(|i| self.ranges[i].as_slice())
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.ranges.iter().flatten().filter(|r| r.2 == tag).map(TagRange::len).sum()
    }

    pub fn total(&self) -> usize {
        self.ranges.iter().flatten().map(TagRange::len).sum()
    }

    /// Elements carrying `tag`, per parameter.
    pub fn element_mask(&self, tag: Tag) -> ElementMask {
        ElementMask {
            ranges: self
                .ranges
                .iter()
                .map(|rs| rs.iter().filter(|r| r.2 == tag).map(TagRange::range).collect())
                .collect(),
        }
    }

    /// Activation selection keeping only forget heads and units in routed blocks.
    pub fn forget_units(&self) -> UnitMask {
        let c = &self.config;
        UnitMask {
            layers: (0..c.n_layers)
                .map(|l| {
                    self.spec.is_routed(l).then(|| LayerUnits {
                        heads: (0..c.n_heads).map(|h| h < self.spec.h_forget).collect(),
                        units: (0..c.d_mlp).map(|u| u < self.spec.d_forget).collect(),
                    })
                })
                .collect(),
        }
    }

    /// `path -> [[start, end, tag], ...]`.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, &Vec<TagRange>> =
            self.paths.iter().map(String::as_str).zip(&self.ranges).collect();
        serde_json::to_value(map).expect("designation is serializable")
    }

    /// Rebuilds the designation from `(config, spec)` and checks it against
    /// a serialized map.
    pub fn from_json(config: &ModelConfig, spec: &PartitionSpec, value: &serde_json::Value) -> Result<Self> {
        let stored: BTreeMap<String, Vec<TagRange>> = serde_json::from_value(value.clone())?;
        let built = build_designation(config, spec)?;
        let rebuilt: BTreeMap<String, Vec<TagRange>> =
            built.paths.iter().cloned().zip(built.ranges.iter().cloned()).collect();
        if stored != rebuilt {
            return Err(Error::Schema(
                "stored designation does not match the one implied by the partition spec".into(),
            ));
        }
        Ok(built)
    }

    fn check<T: Float>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.len() != self.paths.len() {
            return Err(Error::contract("designation does not match parameter set"));
        }
        for (p, (path, rs)) in params.iter().zip(self.paths.iter().zip(&self.ranges)) {
            let n = rs.last().map_or(0, |r| r.1);
            if p.path != *path || p.value.numel() != n {
                return Err(Error::contract(format!(
                    "parameter {} ({} elements) does not match designation {path} ({n})",
                    p.path,
                    p.value.numel()
                )));
            }
        }
        Ok(())
    }

    /// Zeroes every element of `tag` in place.
    pub fn zero_in_place<T: Float>(&self, params: &mut ParamSet<T>, tag: Tag) -> Result<()> {
        self.check(params)?;
        for (p, rs) in params.iter_mut().zip(&self.ranges) {
            for r in rs.iter().filter(|r| r.2 == tag) {
                p.value.data_mut()[r.range()].fill(T::zero());
            }
        }
        Ok(())
    }

    /// Squared L2 norm of the elements carrying `tag`.
    pub fn sum_sq<T: Float>(&self, params: &ParamSet<T>, tag: Tag) -> Result<f64> {
        self.check(params)?;
        Ok(params
            .iter()
            .zip(&self.ranges)
            .flat_map(|(p, rs)| {
                rs.iter()
                    .filter(move |r| r.2 == tag)
                    .flat_map(move |r| p.value.data()[r.range()].iter())
            })
            .map(|&x| x.as_f64() * x.as_f64())
            .sum())
    }
}

/// Copy of `params` with every forget element set to zero.
pub fn ablate<T: Float>(params: &ParamSet<T>, desig: &ParamDesignation) -> Result<ParamSet<T>> {
    let mut out = params.clone();
    desig.zero_in_place(&mut out, Tag::Forget)?;
    Ok(out)
}
