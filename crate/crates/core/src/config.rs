//! Run configuration: every hyperparameter and path of an experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TgmnError};
use crate::model::{Bptt, ModelConfig, Variant};
use crate::pretrain::PretrainConfig;
use crate::tgm::Readout;

/// Scalar type used for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Initial features for key pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyInput {
    #[default]
    Onehot,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_k: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub window: usize,
    pub gamma: f64,
    pub tau: f64,
    pub mask_quantile: f64,
    pub gcn_layers: usize,
    pub gru_layers: usize,
    pub dropout: f64,
    pub sigma_init: f64,
    pub readout: Readout,
    pub bptt: Bptt,
    pub variant: Variant,
    /// Ablation variants without status encoding get no answer input.
    pub answer_blind_ablation: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation AUC improvement.
    pub patience: Option<usize>,
    pub folds: usize,
    /// Run only the first `max_folds` folds.
    pub max_folds: Option<usize>,
    pub seeds: Vec<u64>,
    pub validation_fraction: f64,
    /// Average metrics per student instead of pooling interactions.
    pub macro_metrics: bool,
    pub precision: Precision,
    pub key_input: KeyInput,
    /// Run hop-regression pretraining; otherwise keys are the encoder's
    /// initial forward pass.
    pub pretrain_keys: bool,
    pub pretrain: PretrainConfig,
    pub data: Option<PathBuf>,
    pub question_vectors: Option<PathBuf>,
    pub kc_vectors: Option<PathBuf>,
    /// Load keys from here instead of pretraining.
    pub keys_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_k: 512,
            d_v: 512,
            d_q: 512,
            window: 15,
            gamma: 0.02,
            tau: 1.0,
            mask_quantile: 0.25,
            gcn_layers: 2,
            gru_layers: 2,
            dropout: 0.2,
            sigma_init: 0.1,
            readout: Readout::Flatten,
            bptt: Bptt::Window,
            variant: Variant::Tgmn,
            answer_blind_ablation: false,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            patience: None,
            folds: 5,
            max_folds: None,
            seeds: vec![0],
            validation_fraction: 0.05,
            macro_metrics: false,
            precision: Precision::F32,
            key_input: KeyInput::Onehot,
            pretrain_keys: true,
            pretrain: PretrainConfig::default(),
            data: None,
            question_vectors: None,
            kc_vectors: None,
            keys_dir: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TgmnError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Top-level fields absent from a JSON config text.
    pub fn absent_fields(text: &str) -> Result<Vec<String>> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let present = value.as_object().cloned().unwrap_or_default();
        let all = serde_json::to_value(RunConfig::default())?;
        Ok(all
            .as_object()
            .expect("struct serializes to an object")
            .keys()
            .filter(|k| !present.contains_key(*k))
            .cloned()
            .collect())
    }

    /// FNV-1a of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_v: self.d_v,
            window: self.window,
            gamma: self.gamma,
            tau: self.tau,
            mask_quantile: self.mask_quantile,
            gcn_layers: self.gcn_layers,
            gru_layers: self.gru_layers,
            dropout: self.dropout,
            sigma_init: self.sigma_init,
            readout: self.readout,
            bptt: self.bptt,
            variant: self.variant,
            answer_blind_ablation: self.answer_blind_ablation,
        }
    }

    /// Pretraining settings with the run's key width.
    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            d_k: self.d_k,
            seed,
            ..self.pretrain.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TgmnError::Argument(m));
        if self.d_q != self.d_k {
            return bad(format!("d_q ({}) must equal d_k ({})", self.d_q, self.d_k));
        }
        if self.d_k == 0 {
            return bad("d_k must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction must lie in (0, 1), got {}", self.validation_fraction));
        }
        if self.key_input == KeyInput::Text && (self.question_vectors.is_none() || self.kc_vectors.is_none()) {
            return bad("text key input needs question_vectors and kc_vectors".into());
        }
        self.model_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = RunConfig::default();
        assert_eq!((c.d_k, c.d_v, c.d_q, c.window), (512, 512, 512, 15));
        assert_eq!((c.gcn_layers, c.gru_layers), (2, 2));
        assert_eq!((c.gamma, c.dropout, c.folds), (0.02, 0.2, 5));
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_absent_fields() {
        let text = r#"{"epochs": 3, "variant": "TGMN-SC"}"#;
        let c = RunConfig::from_json(text).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.variant, Variant::TgmnSc);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let absent = RunConfig::absent_fields(text).unwrap();
        assert!(absent.contains(&"d_k".to_string()));
        assert!(!absent.contains(&"epochs".to_string()));
        assert!(RunConfig::from_json(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let c = RunConfig {
            epochs: 0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            d_q: 8,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            key_input: KeyInput::Text,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
