//! Experiment configuration file (TOML). Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::evaluation::{MetricKind, Variant};
use crate::losses::{KernelSpec, LossWeights};
use crate::report::JsonVal;
use crate::training::{KernelPolicy, Scenario, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub source: String,
    pub target: String,
}

/// Training hyperparameters as they appear in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub n_labeled: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub distill_temperature: f64,
    pub confusion_temperature: f64,
    /// Explicit kernel bandwidths; when absent the median heuristic is
    /// applied per batch.
    pub kernel_bandwidths: Option<Vec<f64>>,
    /// Kernel weights paired with explicit bandwidths (default: equal).
    pub kernel_weights: Option<Vec<f64>>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        TrainSettings {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_epsilon: t.adam_epsilon,
            n_labeled: t.n_labeled,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            distill_temperature: w.distill_temperature,
            confusion_temperature: w.confusion_temperature,
            kernel_bandwidths: None,
            kernel_weights: None,
        }
    }
}

/// Whole experiment sweep: datasets, scenarios, variants, seeds, and
/// training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub metric: MetricKind,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    pub scenarios: Vec<Scenario>,
    pub synth: Option<SynthSpec>,
    pub data: Option<DataPaths>,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            metric: MetricKind::Accuracy,
            seeds: vec![1, 2, 3, 4, 5],
            variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            scenarios: vec![Scenario::Uda],
            synth: Some(SynthSpec::default()),
            data: None,
            train: TrainSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.variants.is_empty() || self.scenarios.is_empty() {
            return Err(Error::Config(
                "variants and scenarios must not be empty".into(),
            ));
        }
        for v in &self.variants {
            Variant::parse(v)?;
        }
        if let Some(spec) = &self.synth {
            spec.validate()?;
        }
        self.kernel_policy()?;
        // surface bad hyperparameters before any training starts
        self.train_config(self.scenarios[0], Variant::Sdda, self.seeds[0])
            .validate()
    }

    pub fn kernel_policy(&self) -> Result<KernelPolicy> {
        match (&self.train.kernel_bandwidths, &self.train.kernel_weights) {
            (None, None) => Ok(KernelPolicy::MedianHeuristic),
            (None, Some(_)) => Err(Error::Config(
                "kernel_weights given without kernel_bandwidths".into(),
            )),
            (Some(bw), weights) => {
                let w = match weights {
                    Some(w) => w.clone(),
                    None => vec![1.0 / bw.len() as f64; bw.len()],
                };
                Ok(KernelPolicy::Fixed(KernelSpec::new(bw.clone(), w)?))
            }
        }
    }

    /// Concrete training config for one sweep cell, with the variant mask
    /// applied to the trade-off weights.
    pub fn train_config(&self, scenario: Scenario, variant: Variant, seed: u64) -> TrainConfig {
        let (ma, mb, mc) = variant.mask();
        TrainConfig {
            scenario,
            weights: LossWeights {
                alpha: self.train.alpha * ma,
                beta: self.train.beta * mb,
                gamma: self.train.gamma * mc,
                distill_temperature: self.train.distill_temperature,
                confusion_temperature: self.train.confusion_temperature,
            },
            kernel: self
                .kernel_policy()
                .expect("validated at load time"),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            adam_epsilon: self.train.adam_epsilon,
            seed,
            n_labeled: self.train.n_labeled,
            metric: self.metric,
        }
    }

    /// Canonical snapshot for the report.
    pub fn to_json(&self) -> JsonVal {
        let synth = match &self.synth {
            None => JsonVal::Null,
            Some(s) => JsonVal::obj(vec![
                ("source_channels", JsonVal::UInt(s.source_channels as u64)),
                ("common_channels", JsonVal::UInt(s.common_channels as u64)),
                ("samples", JsonVal::UInt(s.samples as u64)),
                ("classes", JsonVal::UInt(s.classes as u64)),
                ("trials_per_class", JsonVal::UInt(s.trials_per_class as u64)),
                (
                    "sessions_per_domain",
                    JsonVal::UInt(s.sessions_per_domain as u64),
                ),
                ("snr", JsonVal::Num(s.snr)),
                ("session_jitter", JsonVal::Num(s.session_jitter)),
                ("domain_shift", JsonVal::Num(s.domain_shift)),
                ("class_imbalance", JsonVal::Num(s.class_imbalance)),
                ("sampling_rate", JsonVal::UInt(s.sampling_rate as u64)),
                ("seed", JsonVal::UInt(s.seed)),
            ]),
        };
        let data = match &self.data {
            None => JsonVal::Null,
            Some(d) => JsonVal::obj(vec![
                ("source", JsonVal::Str(d.source.clone())),
                ("target", JsonVal::Str(d.target.clone())),
            ]),
        };
        let t = &self.train;
        let train = JsonVal::obj(vec![
            ("epochs", JsonVal::UInt(t.epochs as u64)),
            ("batch_size", JsonVal::UInt(t.batch_size as u64)),
            ("learning_rate", JsonVal::Num(t.learning_rate)),
            ("adam_beta1", JsonVal::Num(t.adam_beta1)),
            ("adam_beta2", JsonVal::Num(t.adam_beta2)),
            ("adam_epsilon", JsonVal::Num(t.adam_epsilon)),
            ("n_labeled", JsonVal::UInt(t.n_labeled as u64)),
            ("alpha", JsonVal::Num(t.alpha)),
            ("beta", JsonVal::Num(t.beta)),
            ("gamma", JsonVal::Num(t.gamma)),
            ("distill_temperature", JsonVal::Num(t.distill_temperature)),
            ("confusion_temperature", JsonVal::Num(t.confusion_temperature)),
            (
                "kernel_bandwidths",
                t.kernel_bandwidths
                    .as_ref()
                    .map(|b| JsonVal::Arr(b.iter().map(|&x| JsonVal::Num(x)).collect()))
                    .unwrap_or(JsonVal::Null),
            ),
            (
                "kernel_weights",
                t.kernel_weights
                    .as_ref()
                    .map(|b| JsonVal::Arr(b.iter().map(|&x| JsonVal::Num(x)).collect()))
                    .unwrap_or(JsonVal::Null),
            ),
        ]);
        JsonVal::obj(vec![
            ("metric", JsonVal::Str(self.metric.name().into())),
            (
                "seeds",
                JsonVal::Arr(self.seeds.iter().map(|&s| JsonVal::UInt(s)).collect()),
            ),
            (
                "variants",
                JsonVal::Arr(
                    self.variants
                        .iter()
                        .map(|v| JsonVal::Str(v.clone()))
                        .collect(),
                ),
            ),
            (
                "scenarios",
                JsonVal::Arr(
                    self.scenarios
                        .iter()
                        .map(|&s| {
                            JsonVal::Str(
                                match s {
                                    Scenario::Uda => "uda",
                                    Scenario::Sda => "sda",
                                }
                                .into(),
                            )
                        })
                        .collect(),
                ),
            ),
            ("synth", synth),
            ("data", data),
            ("train", train),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let config = RunConfig::from_toml(
            r#"
            seeds = [1]
            variants = ["ce", "sdda"]
            scenarios = ["uda"]
            [synth]
            trials_per_class = 2
            samples = 64
            "#,
        )
        .unwrap();
        assert_eq!(config.train.batch_size, 32);
        assert_eq!(config.train.learning_rate, 1e-3);
        assert_eq!(config.synth.as_ref().unwrap().trials_per_class, 2);
        assert_eq!(config.synth.as_ref().unwrap().source_channels, 8);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("bogus_key = 1").unwrap_err();
        assert!(err.to_string().contains("bogus"), "got: {err}");
        let err = RunConfig::from_toml(
            r#"
            [train]
            learning_rte = 0.1
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "got: {err}");
    }

    #[test]
    fn bad_variant_rejected() {
        let err = RunConfig::from_toml(
            r#"
            variants = ["ce", "everything"]
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("everything"));
    }

    #[test]
    fn variant_mask_applies_to_weights() {
        let config = RunConfig::default();
        let ce = config.train_config(Scenario::Uda, Variant::Ce, 1);
        assert_eq!(
            (ce.weights.alpha, ce.weights.beta, ce.weights.gamma),
            (0.0, 0.0, 0.0)
        );
        let ma_cl = config.train_config(Scenario::Uda, Variant::CeMaCl, 1);
        assert_eq!(
            (ma_cl.weights.alpha, ma_cl.weights.beta, ma_cl.weights.gamma),
            (0.0, 1.0, 1.0)
        );
    }

    #[test]
    fn fixed_kernel_policy_parses() {
        let config = RunConfig::from_toml(
            r#"
            [train]
            kernel_bandwidths = [0.5, 1.0]
            "#,
        )
        .unwrap();
        match config.kernel_policy().unwrap() {
            KernelPolicy::Fixed(spec) => {
                assert_eq!(spec.bandwidths(), &[0.5, 1.0]);
                assert_eq!(spec.weights(), &[0.5, 0.5]);
            }
            _ => panic!("expected fixed kernel policy"),
        }
    }
}
