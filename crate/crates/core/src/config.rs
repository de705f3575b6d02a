use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sign applied to the mini-batch dispersion term of the adaptation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DivSign {
    /// Mean squared distance added as written; minimizing it pulls
    /// predictions together.
    Literal,
    /// Negated mean squared distance; minimizing it pushes predictions apart.
    #[default]
    Negated,
}

/// Every hyperparameter and ablation switch of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub use_attention: bool,
    /// `false` swaps the fixed ETF for a trainable linear classifier.
    pub use_etf: bool,
    pub neighbors: usize,
    /// Weight of the dispersion term; `None` means `0.1 * neighbors`.
    pub alpha: Option<f64>,
    pub logit_scale: f64,
    pub label_smoothing: f64,
    pub lr_source: f64,
    pub lr_adapt: f64,
    pub epochs_source: usize,
    pub epochs_adapt: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub div_sign: DivSign,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            feature_dim: 64,
            image_size: 32,
            widths: vec![16, 32, 64],
            use_attention: true,
            use_etf: true,
            neighbors: 4,
            alpha: None,
            logit_scale: 16.0,
            label_smoothing: 0.1,
            lr_source: 0.01,
            lr_adapt: 0.001,
            epochs_source: 50,
            epochs_adapt: 20,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
            div_sign: DivSign::Negated,
        }
    }
}

impl RunConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(0.1 * self.neighbors as f64)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.feature_dim < self.classes {
            return fail(format!(
                "feature_dim {} must be at least the class count {}",
                self.feature_dim, self.classes
            ));
        }
        if self.neighbors < 1 {
            return fail("neighbors must be >= 1".into());
        }
        if !(self.alpha() >= 0.0 && self.alpha().is_finite()) {
            return fail(format!("alpha must be >= 0, got {}", self.alpha()));
        }
        for (name, v) in [
            ("lr_source", self.lr_source),
            ("lr_adapt", self.lr_adapt),
            ("logit_scale", self.logit_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail("momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail("widths must be a non-empty list of positive channel counts".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2".into());
        }
        // Two pooled blocks bring the map down by 4; the size must divide.
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return fail(format!("image_size must be a positive multiple of 4, got {}", self.image_size));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert!((c.alpha() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn alpha_follows_neighbors_unless_set() {
        let mut c = RunConfig {
            neighbors: 6,
            ..RunConfig::default()
        };
        assert!((c.alpha() - 0.6).abs() < 1e-15);
        c.alpha = Some(0.0);
        assert_eq!(c.alpha(), 0.0);
    }

    #[test]
    fn rejects_dim_below_classes() {
        let c = RunConfig {
            classes: 10,
            feature_dim: 8,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"neighbors": 2, "div_sign": "literal"}"#).unwrap();
        assert_eq!(c.neighbors, 2);
        assert_eq!(c.div_sign, DivSign::Literal);
        assert_eq!(c.widths, vec![16, 32, 64]);
    }
}
