use serde::{Deserialize, Serialize};

use crate::error::{CedError, Result};
use crate::fusion_model::ModelConfig;
use crate::kv::{fmt_f64, parse_value, KvConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub use_senti_rev: bool,
    pub use_senti_inv: bool,
    pub use_adaptive_weights: bool,
    pub use_contrastive: bool,
    pub denominator_includes_positive: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_frac: 0.1,
            batch_size: 32,
            epochs: 10,
            lambda: 0.8,
            temperature: 0.07,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 1,
            use_senti_rev: true,
            use_senti_inv: true,
            use_adaptive_weights: true,
            use_contrastive: true,
            denominator_includes_positive: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for a pretrained-encoder-sized model: learning rate 2e-5,
    /// 12 heads, 768 hidden units.
    pub fn paper_scale(vocab_size: usize, d_img: usize) -> Self {
        TrainConfig {
            lr: 2e-5,
            model: ModelConfig::paper_scale(vocab_size, d_img),
            ..TrainConfig::default()
        }
    }

    pub fn uses_counterfactuals(&self) -> bool {
        self.use_senti_rev || self.use_senti_inv
    }
}

impl KvConfig for TrainConfig {
    fn write_pairs(&self, out: &mut Vec<(String, String)>) {
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("lr", fmt_f64(self.lr));
        put("warmup_frac", fmt_f64(self.warmup_frac));
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("lambda", fmt_f64(self.lambda));
        put("temperature", fmt_f64(self.temperature));
        put("weight_decay", fmt_f64(self.weight_decay));
        put("beta1", fmt_f64(self.beta1));
        put("beta2", fmt_f64(self.beta2));
        put("adam_eps", fmt_f64(self.adam_eps));
        put("seed", self.seed.to_string());
        put("use_senti_rev", self.use_senti_rev.to_string());
        put("use_senti_inv", self.use_senti_inv.to_string());
        put("use_adaptive_weights", self.use_adaptive_weights.to_string());
        put("use_contrastive", self.use_contrastive.to_string());
        put(
            "denominator_includes_positive",
            self.denominator_includes_positive.to_string(),
        );
        self.model.write_pairs_prefixed("model.", out);
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(model_key) = key.strip_prefix("model.") {
            return if self.model.set_key(model_key, value)? {
                Ok(())
            } else {
                Err(CedError::config(key, "unknown key"))
            };
        }
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "warmup_frac" => self.warmup_frac = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "use_senti_rev" => self.use_senti_rev = parse_value(key, value)?,
            "use_senti_inv" => self.use_senti_inv = parse_value(key, value)?,
            "use_adaptive_weights" => self.use_adaptive_weights = parse_value(key, value)?,
            "use_contrastive" => self.use_contrastive = parse_value(key, value)?,
            "denominator_includes_positive" => {
                self.denominator_includes_positive = parse_value(key, value)?
            }
            _ => return Err(CedError::config(key, "unknown key")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let err = |f: &str, m: &str| Err(CedError::config(f, m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return err("warmup_frac", "must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return err("batch_size", "must be at least 2");
        }
        if self.epochs == 0 {
            return err("epochs", "must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err("lambda", "must be finite and non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return err("temperature", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return err("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return err("beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return err("adam_eps", "must be positive");
        }
        self.model.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    #[test]
    fn kv_round_trip_and_errors() {
        let cfg = TrainConfig {
            lambda: 0.3,
            use_senti_inv: false,
            ..TrainConfig::default()
        };
        let text = cfg.to_kv_string();
        assert!(text.starts_with("version = 1\n"));
        assert!(text.contains("model.d_model = 32\n"));
        assert_eq!(TrainConfig::from_kv_str(&text, Path::new("c")).unwrap(), cfg);

        let bad = text.replace("warmup_frac = 0.1", "warmup_frac = 1.0");
        assert!(matches!(
            TrainConfig::from_kv_str(&bad, Path::new("c")),
            Err(CedError::Config { field, .. }) if field == "warmup_frac"
        ));
        assert!(TrainConfig::from_kv_str("lr = 0.1\n", Path::new("c")).is_err());
        assert!(TrainConfig::from_kv_str("version = 1\nmodel.width = 3\n", Path::new("c")).is_err());
    }
}
