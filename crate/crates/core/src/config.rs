//! Experiment configuration: one versioned TOML file per experiment.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataSpec, LabelNoiseSpec};
use crate::error::{Error, Result};
use crate::eval::CalibrationConfig;
use crate::model::ModelConfig;
use crate::partition::{PartitionSpec, Variant};
use crate::train::{AdamWConfig, FinetunePlan, RmuPlan, TrainMethod, TrainPlan};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the config seed.
pub const ENV_SEED: &str = "SGTM_SEED";
/// Environment variable overriding the output root.
pub const ENV_OUT: &str = "SGTM_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    /// Trains with the `[partition]` section's variant.
    Sgtm,
    FilterWeak,
    FilterNone,
    FilterPerfect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub method: MethodName,
    /// Optimizer steps; absent means one epoch over the method's data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    pub eval_every: usize,
    #[serde(default = "yes")]
    pub skip_masked: bool,
    #[serde(default)]
    pub keep_checkpoints: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisToggles {
    /// Report calibrated losses next to raw ones.
    pub calibrate: bool,
    /// Also write every example's raw per-group gradients in the
    /// gradient-norm report.
    pub raw_gradients: bool,
    pub calibration: CalibrationConfig,
    /// Forget-token fractions of the standard runs forming a leakage curve.
    pub leakage_grid: Vec<f64>,
    pub histogram_bins: usize,
    /// Test examples per domain in the gradient-norm study.
    pub gradnorm_examples: usize,
}

impl Default for AnalysisToggles {
    fn default() -> Self {
        AnalysisToggles {
            calibrate: true,
            raw_gradients: false,
            calibration: CalibrationConfig::default(),
            leakage_grid: vec![0.0, 0.0025, 0.01, 0.04, 0.16, 1.0],
            histogram_bins: 100,
            gradnorm_examples: 100,
        }
    }
}

/// One model size of a `model_size` sweep; vocabulary and context come from
/// `[model]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSize {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub undiscovered_rates: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub model_sizes: Vec<ModelSize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            undiscovered_rates: vec![0.0, 0.01, 0.05, 0.2],
            tpr: vec![1.0, 0.99, 0.95, 0.8],
            fpr: vec![0.0, 0.01, 0.05],
            model_sizes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub finetune: FinetunePlan,
    pub rmu: RmuPlan,
}

/// Everything that determines a run, given its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Drives initialization and batch order.
    #[serde(default)]
    pub seed: u64,
    /// Drives grammar and corpus generation.
    #[serde(default)]
    pub corpus_seed: u64,
    pub model: ModelConfig,
    /// Required when `train.method = "sgtm"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    pub train: TrainSection,
    pub data: DataSpec,
    pub labels: LabelNoiseSpec,
    #[serde(default)]
    pub analysis: AnalysisToggles,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub attack: AttackSection,
}

impl ExperimentConfig {
    /// The shipped desk configuration: a 29k-parameter model trained for
    /// one epoch on a 64-token two-domain corpus at 1% undiscovered forget
    /// data. Trains in well under a minute on one core.
    pub fn desk() -> Self {
        let model = ModelConfig {
            n_layers: 2,
            d_model: 32,
            d_mlp: 128,
            n_heads: 8,
            vocab_size: 64,
            context_len: 64,
            tie_embeddings: true,
        };
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            corpus_seed: 11,
            partition: Some(PartitionSpec::new(1, 16, Variant::Sgtm)),
            train: TrainSection {
                method: MethodName::Sgtm,
                steps: None,
                warmup_steps: 20,
                batch_size: 16,
                peak_lr: 5e-3,
                adamw: AdamWConfig::default(),
                eval_every: 100,
                skip_masked: true,
                keep_checkpoints: true,
            },
            data: DataSpec {
                vocab_size: 64,
                overlap_fraction: 0.25,
                branching: 4,
                zipf: 1.0,
                stop_prob: 0.03,
                context_len: 64,
                train_tokens_per_domain: 100_000,
                test_tokens_per_domain: 4_000,
            },
            labels: LabelNoiseSpec { tpr: 0.99, ..LabelNoiseSpec::default() },
            model,
            analysis: AnalysisToggles::default(),
            sweep: SweepSpec {
                model_sizes: [32, 48, 64]
                    .into_iter()
                    .map(|d| ModelSize { n_layers: 2, d_model: d, d_mlp: 4 * d, n_heads: 8 })
                    .collect(),
                ..SweepSpec::default()
            },
            attack: AttackSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let version = value.get("schema_version").and_then(toml::Value::as_integer);
        if version != Some(SCHEMA_VERSION as i64) {
            return Err(Error::Schema(format!(
                "schema_version is {}, this build reads {SCHEMA_VERSION}",
                version.map_or("missing".to_string(), |v| v.to_string())
            )));
        }
        let config: ExperimentConfig = value.clone().try_into().map_err(|e: toml::de::Error| {
            let diff = schema_diff(&value);
            Error::Schema(if diff.is_empty() { e.to_string() } else { format!("{e}\n{}", diff.join("\n")) })
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable in TOML")
    }

    /// Applies `SGTM_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(ENV_SEED) {
            self.seed = s.parse().map_err(|_| Error::config(format!("{ENV_SEED}={s} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!("schema_version {} is not {SCHEMA_VERSION}", self.schema_version)));
        }
        self.model.validate()?;
        self.data.validate()?;
        self.labels.validate()?;
        if self.model.vocab_size != self.data.vocab_size {
            return Err(Error::config("model.vocab_size and data.vocab_size differ"));
        }
        if self.model.context_len < self.data.context_len {
            return Err(Error::config("model.context_len is shorter than data.context_len"));
        }
        match (&self.train.method, &self.partition) {
            (MethodName::Sgtm, None) => return Err(Error::config("method sgtm needs a [partition] section")),
            (MethodName::Sgtm, Some(p)) => p.validate(&self.model)?,
            _ => {}
        }
        Ok(())
    }

    pub fn method(&self) -> Result<TrainMethod> {
        Ok(match self.train.method {
            MethodName::Sgtm => TrainMethod::Sgtm(
                self.partition.clone().ok_or_else(|| Error::config("method sgtm needs a [partition] section"))?,
            ),
            MethodName::FilterWeak => TrainMethod::FilterWeak,
            MethodName::FilterNone => TrainMethod::FilterNone,
            MethodName::FilterPerfect => TrainMethod::FilterPerfect,
        })
    }

    pub fn train_plan(&self) -> Result<TrainPlan> {
        let t = &self.train;
        Ok(TrainPlan {
            method: self.method()?,
            steps: t.steps,
            warmup_steps: t.warmup_steps,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            adamw: t.adamw,
            seed: self.seed,
            eval_every: t.eval_every,
            skip_masked: t.skip_masked,
            keep_checkpoints: t.keep_checkpoints,
        })
    }

    /// Hex SHA-256 of the canonical JSON form with the seed cleared; runs
    /// are addressed by this hash plus the seed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let canonical = serde_json::to_vec(&serde_json::to_value(&c).expect("config serializes")).expect("json");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn key_paths(prefix: &str, v: &toml::Value, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.insert(p.clone());
            key_paths(&p, child, out);
        }
    }
}

/// Keys the file has that the schema lacks (`+`) and schema keys the file
/// lacks (`-`), against the fully populated desk config.
pub fn schema_diff(user: &toml::Value) -> Vec<String> {
    let reference = toml::Value::try_from(ExperimentConfig::desk()).expect("desk config serializes");
    let (mut have, mut want) = (BTreeSet::new(), BTreeSet::new());
    key_paths("", user, &mut have);
    key_paths("", &reference, &mut want);
    // array-of-table contents and optional keys are not part of the diff
    let top = |p: &String| !p.starts_with("sweep.model_sizes.");
    let mut out: Vec<String> = have.difference(&want).filter(|p| top(p)).map(|p| format!("+ {p} (unknown)")).collect();
    out.extend(want.difference(&have).filter(|p| top(p)).map(|p| format!("- {p}")));
    out
}

/// Field-by-field differences between two serializable values, as
/// `path: left != right` lines.
pub fn json_diff(left: &serde_json::Value, right: &serde_json::Value) -> Vec<String> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value::Object;
        match (a, b) {
            (Object(x), Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    let null = serde_json::Value::Null;
                    walk(&p, x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), out);
                }
            }
            _ if a != b => out.push(format!("{path}: {a} != {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", left, right, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_is_the_desk_config() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::desk());
    }

    #[test]
    fn desk_round_trips_through_toml() {
        let c = ExperimentConfig::desk();
        c.validate().unwrap();
        let text = c.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn schema_problems_are_refused_with_a_diff() {
        let text = ExperimentConfig::desk().to_toml_string();
        let bumped = text.replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(ExperimentConfig::from_toml_str(&bumped), Err(Error::Schema(_))));
        let extra = text.replace("[model]", "[model]\nd_modle = 3");
        match ExperimentConfig::from_toml_str(&extra) {
            Err(Error::Schema(msg)) => assert!(msg.contains("+ model.d_modle"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = ExperimentConfig::desk();
        let b = ExperimentConfig { seed: 9, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.labels.tpr = 0.8;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(json_diff(&serde_json::to_value(&a).unwrap(), &serde_json::to_value(&c).unwrap()), vec![
            "labels.tpr: 0.99 != 0.8".to_string()
        ]);
    }

    #[test]
    fn sgtm_needs_partition() {
        let c = ExperimentConfig { partition: None, ..ExperimentConfig::desk() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let f = ExperimentConfig {
            partition: None,
            train: TrainSection { method: MethodName::FilterNone, ..ExperimentConfig::desk().train },
            ..ExperimentConfig::desk()
        };
        f.validate().unwrap();
    }
}
