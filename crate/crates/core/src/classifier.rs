//! Classifier head: the fixed ETF or, for ablations, a trainable linear map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::etf::{argmax_rows, build_etf, EtfClassifier};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Trainable `d × K` weight applied to unit-norm features, scaled by `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub logit_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Classifier {
    Etf(EtfClassifier),
    Linear(LinearClassifier),
}

/// A classifier placed on a tape. `weight` is trainable only for the
/// linear head during source training.
#[derive(Clone, Copy, Debug)]
pub struct BoundClassifier {
    pub weight: Var,
    pub trainable: bool,
}

impl Classifier {
    pub fn from_config(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.use_etf {
            let etf = build_etf(cfg.classes, cfg.feature_dim, seed)?.with_logit_scale(cfg.logit_scale)?;
            Ok(Classifier::Etf(etf))
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bound = (3.0 / cfg.feature_dim as f64).sqrt();
            Ok(Classifier::Linear(LinearClassifier {
                weight: Tensor::uniform(&[cfg.feature_dim, cfg.classes], bound, &mut rng),
                logit_scale: cfg.logit_scale,
            }))
        }
    }

    pub fn from_matrix(matrix: Tensor, etf: bool, seed: u64, logit_scale: f64) -> Result<Self> {
        if etf {
            Ok(Classifier::Etf(EtfClassifier::from_parts(matrix, seed, logit_scale)?))
        } else {
            if matrix.shape().len() != 2 {
                return Err(Error::Dimension(format!(
                    "classifier weight must be 2-D, got {:?}",
                    matrix.shape()
                )));
            }
            Ok(Classifier::Linear(LinearClassifier {
                weight: matrix,
                logit_scale,
            }))
        }
    }

    pub fn is_etf(&self) -> bool {
        matches!(self, Classifier::Etf(_))
    }

    /// The `d × K` prototype or weight matrix.
    pub fn matrix(&self) -> &Tensor {
        match self {
            Classifier::Etf(e) => e.prototypes(),
            Classifier::Linear(l) => &l.weight,
        }
    }

    pub fn matrix_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Classifier::Etf(_) => None,
            Classifier::Linear(l) => Some(&mut l.weight),
        }
    }

    pub fn classes(&self) -> usize {
        self.matrix().shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.matrix().shape()[0]
    }

    pub fn logit_scale(&self) -> f64 {
        match self {
            Classifier::Etf(e) => e.logit_scale(),
            Classifier::Linear(l) => l.logit_scale,
        }
    }

    /// Places the classifier on `tape`. The ETF is always a constant.
    pub fn bind(&self, tape: &mut Tape, train_linear: bool) -> BoundClassifier {
        match self {
            Classifier::Etf(e) => BoundClassifier {
                weight: tape.constant(e.prototypes().clone()),
                trainable: false,
            },
            Classifier::Linear(l) if train_linear => BoundClassifier {
                weight: tape.param(l.weight.clone()),
                trainable: true,
            },
            Classifier::Linear(l) => BoundClassifier {
                weight: tape.constant(l.weight.clone()),
                trainable: false,
            },
        }
    }

    /// `s · normalize(features) · W`; for the ETF this is the scaled cosine.
    pub fn logits_on(&self, tape: &mut Tape, bound: &BoundClassifier, features: Var) -> Result<Var> {
        let fshape = tape.value(features).shape();
        if fshape.len() != 2 || fshape[1] != self.dim() {
            return Err(Error::Dimension(format!(
                "features must be [B, {}], got {fshape:?}",
                self.dim()
            )));
        }
        let unit = tape.l2_normalize(features, 1)?;
        let raw = tape.matmul(unit, bound.weight)?;
        Ok(tape.scale(raw, self.logit_scale()))
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        match self {
            Classifier::Etf(e) => e.logits(features),
            Classifier::Linear(_) => {
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape, false);
                let f = tape.constant(features.clone());
                let out = self.logits_on(&mut tape, &bound, f)?;
                Ok(tape.value(out).clone())
            }
        }
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(features)?))
    }

    /// Unit-norm direction of class `i` (prototype or normalized weight column).
    pub fn class_direction(&self, i: usize) -> Vec<f64> {
        let m = self.matrix();
        let col: Vec<f64> = (0..m.shape()[0]).map(|r| m.at(r, i)).collect();
        let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            col
        } else {
            col.iter().map(|v| v / n).collect()
        }
    }
}
