//! `key = value` training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::encoder::Vocab;
use crate::evidence::Combiner;
use crate::model::ModelConfig;
use crate::predictors::SignGating;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value `{value}` for `{key}`: {reason}")]
    BadValue { line: usize, key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_size: usize,
    pub encoder_layers: usize,
    pub max_len: usize,
    pub min_count: usize,
    pub reasoning_steps: usize,
    pub lambda_sentence: f64,
    pub lambda_clause: f64,
    /// Encoder parameter group.
    pub lr_model: f64,
    /// Everything else.
    pub lr_other: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub max_expr_terms: usize,
    pub expression_cap: usize,
    pub combiner: Combiner,
    pub use_graph: bool,
    pub use_evidence: bool,
    pub sign_gating: SignGating,
    /// Gate with the distant labels instead of detector outputs while training.
    pub gold_evidence_forcing: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            encoder_layers: 2,
            max_len: 256,
            min_count: 2,
            reasoning_steps: 3,
            lambda_sentence: 0.2,
            lambda_clause: 0.4,
            lr_model: 5e-5,
            lr_other: 5e-4,
            weight_decay: 5e-4,
            epochs: 12,
            batch_size: 16,
            warmup_fraction: 0.06,
            grad_clip: 5.0,
            seed: 42,
            max_expr_terms: 3,
            expression_cap: 64,
            combiner: Combiner::Mean,
            use_graph: true,
            use_evidence: true,
            sign_gating: SignGating::Multiply,
            gold_evidence_forcing: false,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    /// Parse over the defaults; every key must be a field name.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let Value::Object(mut fields) = serde_json::to_value(Self::default()).expect("config serializes") else {
            unreachable!()
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax { line, text: raw.to_string() });
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |reason: &str| ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
                reason: reason.to_string(),
            };
            let parsed = match fields.get(key) {
                None => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
                Some(Value::Bool(_)) => Value::Bool(value.parse().map_err(|_| bad("expected true or false"))?),
                Some(Value::Number(n)) if n.is_f64() => {
                    let v: f64 = value.parse().map_err(|_| bad("expected a number"))?;
                    Value::from(v)
                }
                Some(Value::Number(_)) => Value::from(value.parse::<u64>().map_err(|_| bad("expected a non-negative integer"))?),
                Some(_) => Value::String(value.to_string()),
            };
            fields.insert(key.to_string(), parsed);
        }
        let cfg: Self = serde_json::from_value(Value::Object(fields)).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("hidden_size", self.hidden_size as f64),
            ("encoder_layers", self.encoder_layers as f64),
            ("max_len", self.max_len as f64),
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("max_expr_terms", self.max_expr_terms as f64),
            ("expression_cap", self.expression_cap as f64),
            ("grad_clip", self.grad_clip),
        ];
        for (k, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(ConfigError::Invalid(format!("{k} must be positive")));
            }
        }
        let non_negative = [
            ("lambda_sentence", self.lambda_sentence),
            ("lambda_clause", self.lambda_clause),
            ("lr_model", self.lr_model),
            ("lr_other", self.lr_other),
            ("weight_decay", self.weight_decay),
        ];
        for (k, v) in non_negative {
            if v.is_nan() || v < 0.0 {
                return Err(ConfigError::Invalid(format!("{k} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(ConfigError::Invalid("warmup_fraction must lie in [0, 1)".into()));
        }
        if !self.hidden_size.is_multiple_of(2) {
            return Err(ConfigError::Invalid("hidden_size must be even (bidirectional halves)".into()));
        }
        Ok(())
    }

    /// The resolved configuration in the same `key = value` format.
    pub fn to_text(&self) -> String {
        let Value::Object(fields) = serde_json::to_value(self).expect("config serializes") else { unreachable!() };
        render(&fields)
    }

    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            hidden_size: self.hidden_size,
            max_len: self.max_len,
            encoder_layers: self.encoder_layers,
            reasoning_steps: self.reasoning_steps,
            combiner: self.combiner,
            use_graph: self.use_graph,
            use_evidence: self.use_evidence,
            sign_gating: self.sign_gating,
        }
    }
}

fn render(fields: &Map<String, Value>) -> String {
    let mut out = String::new();
    for (k, v) in fields {
        let v = match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}
