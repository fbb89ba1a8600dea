//! Experiment configuration: one JSON document drives every subcommand.
//! Unknown keys are rejected, `--set key=value` overrides are applied by
//! dotted path, and the fully-resolved config is written back into the run
//! directory.

use serde::{Deserialize, Serialize};

use crate::data::NoiseMode;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::groupnet::GroupConfig;
use crate::learner::{MarginConfig, SgdConfig};
use crate::noise::EstimatorConfig;
use crate::nroll::{LabelConfig, NrollConfig, OpenSetParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        per_class: usize,
        input_dim: usize,
        intra_spread: f64,
    },
    Csv {
        path: String,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        // the standard desk-scale benchmark
        DatasetSpec::Synthetic {
            classes: 50,
            per_class: 60,
            input_dim: 32,
            intra_spread: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub rate: f64,
    pub mode: NoiseMode,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            rate: 0.5,
            mode: NoiseMode::Symmetric,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// S+1: one labelled part plus S unlabelled parts.
    pub parts: usize,
    /// Restrict the labelled part to half the identities.
    pub open_set: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            parts: 5,
            open_set: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The multi-agent engine.
    Groupnet,
    /// A single agent trained with Arc-softmax on full batches.
    Baseline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            embedding_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub noise: NoiseSpec,
    pub split: SplitSpec,
    /// Held-out fraction carved per class before noise injection.
    pub test_fraction: f64,
    pub method: Method,
    pub model: ModelSpec,
    pub group: GroupConfig,
    pub margin: MarginConfig,
    pub sgd: SgdConfig,
    pub label: LabelConfig,
    pub estimator: EstimatorConfig,
    pub eval: EvalConfig,
    /// Iterations for the `train` subcommand.
    pub train_iterations: usize,
    /// Pretraining iterations for the learn-label loop.
    pub pretrain_iterations: usize,
    /// Retraining iterations per loop.
    pub loop_iterations: usize,
    /// Noise-rate percent assumed before any estimate; `null` estimates it
    /// right after warmup.
    pub initial_noise_rate: Option<f64>,
    /// New-identity prototypes for open-set labelling.
    pub open_set_prototypes: Option<OpenSetParams>,
    /// Checkpoint consumed by `evaluate` and optionally by `estimate-noise`.
    pub checkpoint: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "experiment".into(),
            seed: 0,
            dataset: DatasetSpec::default(),
            noise: NoiseSpec::default(),
            split: SplitSpec::default(),
            test_fraction: 0.2,
            method: Method::Groupnet,
            model: ModelSpec::default(),
            group: GroupConfig::default(),
            margin: MarginConfig::default(),
            sgd: SgdConfig::default(),
            label: LabelConfig::default(),
            estimator: EstimatorConfig::default(),
            eval: EvalConfig::default(),
            train_iterations: 1500,
            pretrain_iterations: 1200,
            loop_iterations: 600,
            initial_noise_rate: None,
            open_set_prototypes: None,
            checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() || self.run_name.contains('/') {
            return Err(Error::InvalidConfig(
                "run name must be a non-empty path component".into(),
            ));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                per_class,
                input_dim,
                intra_spread,
            } => {
                if *classes < 2 || *per_class < 2 || *input_dim < 2 {
                    return Err(Error::InvalidConfig(
                        "synthetic dataset needs classes >= 2, per_class >= 2, input_dim >= 2"
                            .into(),
                    ));
                }
                if !(intra_spread.is_finite() && *intra_spread >= 0.0) {
                    return Err(Error::InvalidConfig("intra_spread must be >= 0".into()));
                }
            }
            DatasetSpec::Csv { path } => {
                if path.is_empty() {
                    return Err(Error::InvalidConfig("csv path must not be empty".into()));
                }
            }
        }
        if !(0.0..1.0).contains(&self.noise.rate) {
            return Err(Error::InvalidConfig("noise rate must be in [0,1)".into()));
        }
        if self.split.parts == 0 {
            return Err(Error::InvalidConfig("split parts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidConfig("test fraction must be in [0,1)".into()));
        }
        if self.method == Method::Groupnet {
            self.group.validate()?;
        }
        self.margin.validate()?;
        self.sgd.validate()?;
        self.label.validate()?;
        if let Some(r) = self.initial_noise_rate {
            if !(0.0..100.0).contains(&r) {
                return Err(Error::InvalidConfig(
                    "initial noise rate percent must be in [0,100)".into(),
                ));
            }
        }
        if self.model.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding dim must be positive".into()));
        }
        if self.train_iterations == 0 || self.pretrain_iterations == 0 {
            return Err(Error::InvalidConfig("iteration counts must be positive".into()));
        }
        Ok(())
    }

    /// Assembles the loop configuration from the experiment document.
    pub fn nroll_config(&self) -> NrollConfig {
        let mut group = self.group.clone();
        group.seed = self.seed;
        NrollConfig {
            group,
            margin: self.margin,
            sgd: self.sgd.clone(),
            label: self.label.clone(),
            estimator: self.estimator.clone(),
            eval: self.eval.clone(),
            hidden_dims: self.model.hidden_dims.clone(),
            embedding_dim: self.model.embedding_dim,
            pretrain_iterations: self.pretrain_iterations,
            loop_iterations: self.loop_iterations,
            initial_noise_rate: self.initial_noise_rate,
            open_set: self.open_set_prototypes.clone(),
            seed: self.seed,
        }
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.model.hidden_dims);
        dims.push(self.model.embedding_dim);
        dims
    }
}

/// Loads a config document, applies `--set` overrides by dotted path, and
/// deserializes with unknown-key rejection.
pub fn load_config(path: Option<&std::path::Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?
        }
        None => serde_json::to_value(ExperimentConfig::default())?,
    };
    // overrides apply on top of the document merged over defaults, so
    // partial configs stay valid
    let defaults = serde_json::to_value(ExperimentConfig::default())?;
    value = merge_over(defaults, value);
    for item in overrides {
        apply_override(&mut value, item)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| Error::InvalidConfig(format!("config schema: {e}")))?;
    Ok(cfg)
}

fn merge_over(mut base: serde_json::Value, patch: serde_json::Value) -> serde_json::Value {
    match (&mut base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                let slot = b.remove(&k);
                let merged = match slot {
                    Some(existing) => merge_over(existing, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            base
        }
        (_, p) => p,
    }
}

/// Applies `a.b.c=value` to the document. The value parses as JSON when
/// possible and falls back to a string.
pub fn apply_override(doc: &mut serde_json::Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {item:?} is not key=value")))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::InvalidConfig(format!("empty segment in {path:?}")));
        }
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{path:?} traverses a non-object")))?;
        if i + 1 == segments.len() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        cursor = obj
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"run_name":"x","definitely_not_a_key":1}"#).unwrap();
        let err = load_config(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("definitely_not_a_key"), "{err}");
    }

    #[test]
    fn partial_configs_merge_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"run_name":"partial","group":{"agents":5},"noise":{"rate":0.3}}"#,
        )
        .unwrap();
        let cfg = load_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.run_name, "partial");
        assert_eq!(cfg.group.agents, 5);
        assert_eq!(cfg.group.exchange_degree, 3); // default survives
        assert!((cfg.noise.rate - 0.3).abs() < 1e-12);
    }

    #[test]
    fn overrides_apply_by_dotted_path() {
        let cfg = load_config(
            None,
            &[
                "group.agents=2".into(),
                "group.exchange_degree=1".into(),
                "label.threshold=0.6".into(),
                "run_name=swept".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.group.agents, 2);
        assert_eq!(cfg.group.exchange_degree, 1);
        assert!((cfg.label.threshold - 0.6).abs() < 1e-12);
        assert_eq!(cfg.run_name, "swept");
    }

    #[test]
    fn groupnet_requires_two_agents() {
        let cfg = load_config(None, &["group.agents=1".into()]).unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg2 = cfg;
        cfg2.method = Method::Baseline;
        cfg2.validate().unwrap(); // the baseline ignores the group shape
    }

    #[test]
    fn bad_override_shapes_error() {
        let mut doc = serde_json::to_value(ExperimentConfig::default()).unwrap();
        assert!(apply_override(&mut doc, "no_equals_sign").is_err());
        assert!(apply_override(&mut doc, "run_name.sub=1").is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }
}
