//! Per-label training interventions for SGTM and the other routing variants.
//!
//! | variant                 | FORGET batch                        | RETAIN batch          |
//! |-------------------------|-------------------------------------|-----------------------|
//! | SGTM (all three)        | zero retain parameter gradients     | zero forget params    |
//! | gradient routing        | zero gradients into retain units    | none                  |
//! | activation masking      | zero retain units in the forward    | none                  |
//!
//! UNLABELED batches are never intervened on. On FORGET batches the optimizer
//! additionally skips every retain-designated element.

use serde::{Deserialize, Serialize};

use crate::model::{ForwardOptions, ParamGrads};
use crate::partition::{ElementMask, ParamDesignation, Tag, UnitMask, Variant};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchLabel {
    Forget,
    Retain,
    Unlabeled,
}

impl BatchLabel {
    pub const ALL: [BatchLabel; 3] = [BatchLabel::Forget, BatchLabel::Retain, BatchLabel::Unlabeled];

    pub fn name(self) -> &'static str {
        match self {
            BatchLabel::Forget => "forget",
            BatchLabel::Retain => "retain",
            BatchLabel::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMask {
    None,
    /// Forget-designated parameter elements read as zero.
    ZeroForgetParams,
    /// Retain heads and MLP units output zero.
    ZeroRetainActivations,
}

/// What happens to one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelActions {
    pub forward: ForwardMask,
    /// Zero gradients of retain-designated parameter elements.
    pub mask_retain_grads: bool,
    /// Zero gradients flowing back through retain heads and MLP units.
    pub route_activation_grads: bool,
    /// Designation group the optimizer leaves untouched.
    pub skip: Option<Tag>,
}

const NOTHING: LabelActions = LabelActions {
    forward: ForwardMask::None,
    mask_retain_grads: false,
    route_activation_grads: false,
    skip: None,
};

pub fn apply_forward_mask(variant: Variant, label: BatchLabel) -> ForwardMask {
    use BatchLabel::*;
    match (variant, label) {
        (Variant::Sgtm | Variant::SgtmJointProjection | Variant::SgtmJointAttention, Retain) => {
            ForwardMask::ZeroForgetParams
        }
        (Variant::ActivationMasking, Forget) => ForwardMask::ZeroRetainActivations,
        _ => ForwardMask::None,
    }
}

pub fn label_actions(variant: Variant, label: BatchLabel) -> LabelActions {
    let forward = apply_forward_mask(variant, label);
    if label != BatchLabel::Forget {
        return LabelActions { forward, ..NOTHING };
    }
    LabelActions {
        forward,
        mask_retain_grads: matches!(
            variant,
            Variant::Sgtm | Variant::SgtmJointProjection | Variant::SgtmJointAttention
        ),
        route_activation_grads: variant == Variant::GradientRouting,
        skip: Some(Tag::Retain),
    }
}

/// Zeroes the gradients of retain-designated elements on FORGET batches of
/// the SGTM variants; returns the map unchanged otherwise.
pub fn apply_gradient_mask<T: Float>(
    mut grads: ParamGrads<T>,
    desig: &ParamDesignation,
    label: BatchLabel,
) -> ParamGrads<T> {
    if label_actions(desig.spec().variant, label).mask_retain_grads {
        zero_tag(&mut grads, desig, Tag::Retain);
    }
    grads
}

pub(crate) fn zero_tag<T: Float>(grads: &mut ParamGrads<T>, desig: &ParamDesignation, tag: Tag) {
    for (i, g) in grads.grads.iter_mut().enumerate() {
        for r in desig.ranges(i).iter().filter(|r| r.2 == tag) {
            g.data_mut()[r.range()].fill(T::zero());
        }
    }
}

/// Interventions of one variant with their masks precomputed.
#[derive(Clone, Debug)]
pub struct InterventionPlan {
    desig: ParamDesignation,
    forget_params: ElementMask,
    forget_units: UnitMask,
}

impl InterventionPlan {
    pub fn new(desig: ParamDesignation) -> Self {
        InterventionPlan {
            forget_params: desig.element_mask(Tag::Forget),
            forget_units: desig.forget_units(),
            desig,
        }
    }

    pub fn designation(&self) -> &ParamDesignation {
        &self.desig
    }

    pub fn variant(&self) -> Variant {
        self.desig.spec().variant
    }

    pub fn actions(&self, label: BatchLabel) -> LabelActions {
        label_actions(self.variant(), label)
    }

    /// Forward options realizing the label's forward mask and activation routing.
    pub fn forward_options(&self, label: BatchLabel, requires_grad: bool) -> ForwardOptions<'_> {
        let a = self.actions(label);
        ForwardOptions {
            zero_params: (a.forward == ForwardMask::ZeroForgetParams).then_some(&self.forget_params),
            zero_activations: (a.forward == ForwardMask::ZeroRetainActivations)
                .then_some(&self.forget_units),
            route_gradients: a.route_activation_grads.then_some(&self.forget_units),
            stop_after_layer: None,
            requires_grad,
        }
    }

    pub fn mask_gradients<T: Float>(&self, grads: ParamGrads<T>, label: BatchLabel) -> ParamGrads<T> {
        apply_gradient_mask(grads, &self.desig, label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, loss_and_grads, lm_loss, ModelConfig, ParamSet, TokenBatch};
    use crate::partition::{ablate, build_designation, PartitionSpec};

    fn toy(layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers: layers,
            d_model: 8,
            d_mlp: 12,
            n_heads: 2,
            vocab_size: 16,
            context_len: 8,
            tie_embeddings: true,
        }
    }

    fn batch() -> TokenBatch {
        TokenBatch::from_sequences(&[vec![1u32, 4, 9, 3, 7, 2], vec![1, 5, 5, 8, 2]]).unwrap()
    }

    fn plan(cfg: &ModelConfig, v: Variant) -> InterventionPlan {
        InterventionPlan::new(build_designation(cfg, &PartitionSpec::new(1, 4, v)).unwrap())
    }

    fn grads(cfg: &ModelConfig, p: &ParamSet<f64>, plan: &InterventionPlan, label: BatchLabel) -> ParamGrads<f64> {
        let (_, g) = loss_and_grads(cfg, p, &batch(), plan.forward_options(label, true)).unwrap();
        plan.mask_gradients(g, label)
    }

    fn tag_norm(plan: &InterventionPlan, g: &ParamGrads<f64>, path: &str, tag: Tag) -> f64 {
        let d = plan.designation();
        let i = d.paths().iter().position(|p| p == path).unwrap();
        d.ranges(i)
            .iter()
            .filter(|r| r.2 == tag)
            .flat_map(|r| g.get(i).data()[r.range()].iter())
            .map(|x| x * x)
            .sum()
    }

    #[test]
    fn table_for_sgtm() {
        let f = label_actions(Variant::Sgtm, BatchLabel::Forget);
        assert!(f.mask_retain_grads && f.forward == ForwardMask::None && f.skip == Some(Tag::Retain));
        let r = label_actions(Variant::Sgtm, BatchLabel::Retain);
        assert_eq!(r.forward, ForwardMask::ZeroForgetParams);
        assert!(!r.mask_retain_grads && r.skip.is_none());
        assert_eq!(label_actions(Variant::Sgtm, BatchLabel::Unlabeled), NOTHING);
        for v in Variant::ALL {
            assert_eq!(apply_forward_mask(v, BatchLabel::Unlabeled), ForwardMask::None);
        }
    }

    #[test]
    fn forget_batch_zeroes_retain_grads_exactly() {
        let cfg = toy(2);
        let p = ParamSet::<f64>::init(&cfg, 5);
        let plan = plan(&cfg, Variant::Sgtm);
        let g = grads(&cfg, &p, &plan, BatchLabel::Forget);
        let d = plan.designation();
        let mut retain = 0.0;
        let mut forget = 0.0;
        for i in 0..d.paths().len() {
            for r in d.ranges(i) {
                let s: f64 = g.get(i).data()[r.range()].iter().map(|x| x * x).sum();
                match r.2 {
                    Tag::Retain => retain += s,
                    Tag::Forget => forget += s,
                    Tag::Joint => {}
                }
            }
        }
        assert_eq!(retain, 0.0);
        assert!(forget > 0.0);
    }

    #[test]
    fn unlabeled_grads_pass_through_bit_identical() {
        let cfg = toy(1);
        let p = ParamSet::<f64>::init(&cfg, 6);
        let plan = plan(&cfg, Variant::Sgtm);
        let (_, raw) = loss_and_grads(&cfg, &p, &batch(), ForwardOptions::default()).unwrap();
        assert_eq!(plan.mask_gradients(raw.clone(), BatchLabel::Unlabeled), raw);
    }

    #[test]
    fn retain_loss_equals_ablated_loss_and_ignores_forget_values() {
        let cfg = toy(2);
        let p = ParamSet::<f32>::init(&cfg, 7);
        let plan = plan(&cfg, Variant::Sgtm);
        let masked = lm_loss(&cfg, &p, &batch(), plan.forward_options(BatchLabel::Retain, false)).unwrap();
        let ablated = ablate(&p, plan.designation()).unwrap();
        let plain = lm_loss(&cfg, &ablated, &batch(), ForwardOptions::default()).unwrap();
        assert_eq!(masked.to_bits(), plain.to_bits());

        let mut perturbed = p.clone();
        plan.designation().zero_in_place(&mut perturbed, Tag::Forget).unwrap();
        let mut noisy = ParamSet::<f32>::init(&cfg, 99);
        plan.designation().zero_in_place(&mut noisy, Tag::Retain).unwrap();
        plan.designation().zero_in_place(&mut noisy, Tag::Joint).unwrap();
        for (a, b) in perturbed.iter_mut().zip(noisy.iter()) {
            for (x, y) in a.value.data_mut().iter_mut().zip(b.value.data()) {
                *x += 100.0 * y;
            }
        }
        let again =
            lm_loss(&cfg, &perturbed, &batch(), plan.forward_options(BatchLabel::Retain, false)).unwrap();
        assert_eq!(again.to_bits(), masked.to_bits());
    }

    #[test]
    fn masking_already_zero_forget_is_identity() {
        let cfg = toy(2);
        let plan = plan(&cfg, Variant::Sgtm);
        let p = ablate(&ParamSet::<f32>::init(&cfg, 8), plan.designation()).unwrap();
        let a = forward(&cfg, &p, &batch(), plan.forward_options(BatchLabel::Retain, false)).unwrap();
        let b = forward(&cfg, &p, &batch(), ForwardOptions::default()).unwrap();
        assert_eq!(a.logits_value(), b.logits_value());
    }

    #[test]
    fn masked_forward_never_mutates_params() {
        let cfg = toy(1);
        let plan = plan(&cfg, Variant::Sgtm);
        let p = ParamSet::<f32>::init(&cfg, 9);
        let before = p.clone();
        loss_and_grads(&cfg, &p, &batch(), plan.forward_options(BatchLabel::Retain, true)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn activation_masking_leaves_only_forget_activations() {
        let cfg = toy(2);
        let plan = plan(&cfg, Variant::ActivationMasking);
        let p = ParamSet::<f64>::init(&cfg, 10);
        let pass = forward(&cfg, &p, &batch(), plan.forward_options(BatchLabel::Forget, false)).unwrap();
        let dh = cfg.d_head();
        for l in 0..cfg.n_layers {
            let z = pass.graph.value(pass.head_outputs[l]);
            for row in z.data().chunks(cfg.d_model) {
                assert!(row[dh..].iter().all(|&x| x == 0.0));
                assert!(row[..dh].iter().any(|&x| x != 0.0));
            }
            let h = pass.graph.value(pass.mlp_hidden[l]);
            for row in h.data().chunks(cfg.d_mlp) {
                assert!(row[4..].iter().all(|&x| x == 0.0));
                assert!(row[..4].iter().any(|&x| x != 0.0));
            }
        }
    }

    #[test]
    fn gradient_routing_blocks_retain_upstream_but_not_down_projection() {
        let cfg = toy(1);
        let plan = plan(&cfg, Variant::GradientRouting);
        let p = ParamSet::<f64>::init(&cfg, 11);
        let g = grads(&cfg, &p, &plan, BatchLabel::Forget);
        assert_eq!(tag_norm(&plan, &g, "blocks.0.mlp.w_1", Tag::Retain), 0.0);
        assert_eq!(tag_norm(&plan, &g, "blocks.0.mlp.b_1", Tag::Retain), 0.0);
        assert_eq!(tag_norm(&plan, &g, "blocks.0.attn.w_qkv", Tag::Retain), 0.0);
        assert!(tag_norm(&plan, &g, "blocks.0.mlp.w_2", Tag::Forget) > 0.0);
        assert!(tag_norm(&plan, &g, "blocks.0.mlp.w_2", Tag::Joint) > 0.0);
        assert!(tag_norm(&plan, &g, "blocks.0.mlp.w_1", Tag::Forget) > 0.0);
    }

    /// Hand chain rule for W_2 on one row: dL/dW_2[u, :] = sum_rows h[row, u] * dY[row, :],
    /// which does not depend on the gradient mask applied to h.
    #[test]
    fn routed_w2_gradient_matches_unrouted_chain_rule() {
        let cfg = toy(1);
        let plan = plan(&cfg, Variant::GradientRouting);
        let p = ParamSet::<f64>::init(&cfg, 12);
        let routed = grads(&cfg, &p, &plan, BatchLabel::Forget);
        let (_, plain) = loss_and_grads(&cfg, &p, &batch(), ForwardOptions::default()).unwrap();
        let i = p.position("blocks.0.mlp.w_2").unwrap();
        assert_eq!(routed.get(i), plain.get(i));
        let i = p.position("blocks.0.mlp.w_1").unwrap();
        let d = cfg.d_model;
        assert_eq!(&routed.get(i).data()[..4 * d], &plain.get(i).data()[..4 * d]);
    }

    #[test]
    fn blocking_every_activation_kills_upstream_grads() {
        let cfg = toy(1);
        let p = ParamSet::<f64>::init(&cfg, 13);
        let all = UnitMask::all_blocked(&cfg);
        let opts = ForwardOptions { route_gradients: Some(&all), ..Default::default() };
        let (_, g) = loss_and_grads(&cfg, &p, &batch(), opts).unwrap();
        for path in ["blocks.0.mlp.w_1", "blocks.0.mlp.b_1", "blocks.0.attn.w_qkv"] {
            assert!(g.get(p.position(path).unwrap()).data().iter().all(|&x| x == 0.0), "{path}");
        }
    }

    #[test]
    fn gradient_routing_updates_rows_sgtm_blocks() {
        let cfg = toy(2);
        let p = ParamSet::<f64>::init(&cfg, 14);
        let sgtm = plan(&cfg, Variant::Sgtm);
        let gr = plan(&cfg, Variant::GradientRouting);
        let jp = plan(&cfg, Variant::SgtmJointProjection);
        let gs = grads(&cfg, &p, &sgtm, BatchLabel::Forget);
        let gg = grads(&cfg, &p, &gr, BatchLabel::Forget);
        let gj = grads(&cfg, &p, &jp, BatchLabel::Forget);
        let i = p.position("blocks.1.mlp.w_2").unwrap();
        let retain_rows = 4 * cfg.d_model..;
        let nz = |g: &ParamGrads<f64>| g.get(i).data()[retain_rows.clone()].iter().map(|&x| x != 0.0).collect::<Vec<_>>();
        assert!(gs.get(i).data()[retain_rows.clone()].iter().all(|&x| x == 0.0));
        assert!(nz(&gg).iter().any(|&b| b));
        assert_eq!(nz(&gg), nz(&gj));
    }
}
