use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::model::{loss_and_grads, ForwardOptions, ModelConfig, ParamGrads, ParamSet, TokenBatch};
use crate::partition::{ParamDesignation, Tag};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormRow {
    pub domain: Domain,
    pub example: usize,
    /// `|grad theta_forget| / |theta_forget|`.
    pub forget: f64,
    /// `|grad theta_retain| / |theta_retain|`.
    pub retain: f64,
}

/// Means of the four distributions (parameter group x example domain).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormSummary {
    pub forget_params_forget_data: f64,
    pub forget_params_retain_data: f64,
    pub retain_params_forget_data: f64,
    pub retain_params_retain_data: f64,
}

impl GradNormSummary {
    pub fn from_rows(rows: &[GradNormRow]) -> Self {
        let mean = |d: Domain, f: fn(&GradNormRow) -> f64| {
            let xs: Vec<f64> = rows.iter().filter(|r| r.domain == d).map(f).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        GradNormSummary {
            forget_params_forget_data: mean(Domain::Forget, |r| r.forget),
            forget_params_retain_data: mean(Domain::Retain, |r| r.forget),
            retain_params_forget_data: mean(Domain::Forget, |r| r.retain),
            retain_params_retain_data: mean(Domain::Retain, |r| r.retain),
        }
    }
}

fn group_norm<T: Float>(desig: &ParamDesignation, values: impl Fn(usize) -> Vec<T>, tag: Tag) -> f64 {
    let mut s = 0.0;
    for i in 0..desig.paths().len() {
        let v = values(i);
        for r in desig.ranges(i).iter().filter(|r| r.2 == tag) {
            s += v[r.range()].iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
    }
    s.sqrt()
}

/// Gradient of one example's loss restricted to the forget and retain
/// elements, each in designation order. No interventions are applied.
pub fn group_gradients<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    desig: &ParamDesignation,
    seq: &[u32],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let batch = TokenBatch::from_sequences(&[seq])?;
    let (_, g): (f64, ParamGrads<T>) = loss_and_grads(config, params, &batch, ForwardOptions::default())?;
    let (mut forget, mut retain) = (Vec::new(), Vec::new());
    for i in 0..desig.paths().len() {
        let v = g.get(i).data();
        for r in desig.ranges(i) {
            let out = match r.2 {
                Tag::Forget => &mut forget,
                Tag::Retain => &mut retain,
                Tag::Joint => continue,
            };
            out.extend(v[r.range()].iter().map(|x| x.as_f64()));
        }
    }
    Ok((forget, retain))
}

/// Per-example relative gradient norms with no interventions: every
/// example is treated as unlabeled.
pub fn grad_norm_study<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    desig: &ParamDesignation,
    examples: &[(Domain, Vec<u32>)],
) -> Result<Vec<GradNormRow>> {
    let pnorm = |tag| group_norm(desig, |i| params.get(i).value.data().to_vec(), tag);
    let (pf, pr) = (pnorm(Tag::Forget), pnorm(Tag::Retain));
    if pf == 0.0 || pr == 0.0 {
        return Err(Error::contract(
            "relative gradient norm undefined: a parameter group is all zero (use a checkpoint from before ablation)",
        ));
    }
    examples
        .iter()
        .enumerate()
        .map(|(k, (domain, seq))| {
            let batch = TokenBatch::from_sequences(&[seq.as_slice()])?;
            let (_, g): (f64, ParamGrads<T>) = loss_and_grads(config, params, &batch, ForwardOptions::default())?;
            let gnorm = |tag| group_norm(desig, |i| g.get(i).data().to_vec(), tag);
            Ok(GradNormRow { domain: *domain, example: k, forget: gnorm(Tag::Forget) / pf, retain: gnorm(Tag::Retain) / pr })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{ablate, build_designation, PartitionSpec, Variant};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_mlp: 16,
            n_heads: 2,
            vocab_size: 12,
            context_len: 10,
            tie_embeddings: true,
        }
    }

    #[test]
    fn ablated_model_is_rejected() {
        let c = cfg();
        let d = build_designation(&c, &PartitionSpec::new(1, 4, Variant::Sgtm)).unwrap();
        let p = ablate(&ParamSet::<f64>::init(&c, 0), &d).unwrap();
        let ex = vec![(Domain::Forget, vec![1, 4, 5, 2])];
        assert!(matches!(grad_norm_study(&c, &p, &d, &ex), Err(Error::Contract(_))));
    }

    #[test]
    fn rows_and_summary() {
        let c = cfg();
        let d = build_designation(&c, &PartitionSpec::new(1, 4, Variant::Sgtm)).unwrap();
        let p = ParamSet::<f64>::init(&c, 1);
        let ex = vec![(Domain::Forget, vec![1, 4, 5, 2]), (Domain::Retain, vec![1, 7, 8, 9, 2])];
        let rows = grad_norm_study(&c, &p, &d, &ex).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.forget > 0.0 && r.retain > 0.0));
        let s = GradNormSummary::from_rows(&rows);
        assert_eq!(s.forget_params_forget_data, rows[0].forget);
        assert_eq!(s.retain_params_retain_data, rows[1].retain);

        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (gf, gr) = group_gradients(&c, &p, &d, &ex[0].1).unwrap();
        assert_eq!((gf.len(), gr.len()), (d.count(Tag::Forget), d.count(Tag::Retain)));
        let pf = group_norm(&d, |i| p.get(i).value.data().to_vec(), Tag::Forget);
        assert!((norm(&gf) / pf - rows[0].forget).abs() < 1e-12);
    }
}
