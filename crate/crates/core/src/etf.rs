//! Fixed simplex equiangular tight frame (ETF) classifier.
//!
//! The prototype matrix is
//!
//! ```text
//! E = sqrt(K / (K - 1)) · U · (I_K - 1_K 1_Kᵀ / K)
//! ```
//!
//! with `U` a `d × K` matrix of orthonormal columns. Every column of `E` has
//! unit norm and every pair of distinct columns has inner product
//! `-1 / (K - 1)`. The matrix is never trained.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{orthonormal_columns, Tape, Tensor, Var};

/// Default multiplier applied to cosine logits.
pub const DEFAULT_LOGIT_SCALE: f64 = 16.0;
/// Default tolerance for [`validate_etf`].
pub const DEFAULT_ETF_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct EtfClassifier {
    prototypes: Tensor,
    classes: usize,
    dim: usize,
    seed: u64,
    logit_scale: f64,
}

/// Outcome of checking the norm and equiangularity properties.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EtfValidationReport {
    pub max_norm_deviation: f64,
    pub max_offdiag_deviation: f64,
    pub passed: bool,
}

/// Builds the ETF for `classes` prototypes in `dim` dimensions.
pub fn build_etf(classes: usize, dim: usize, seed: u64) -> Result<EtfClassifier> {
    if classes < 2 {
        return Err(Error::Contract(format!(
            "an ETF needs at least two classes, got {classes}"
        )));
    }
    if classes > dim {
        return Err(Error::dim(format!(
            "feature dimension {dim} is smaller than the class count {classes}"
        )));
    }
    let rotation = orthonormal_columns(dim, classes, seed)?;
    let prototypes = etf_from_rotation(&rotation)?;
    Ok(EtfClassifier {
        prototypes,
        classes,
        dim,
        seed,
        logit_scale: DEFAULT_LOGIT_SCALE,
    })
}

/// Applies the centring-and-scaling map to an orthonormal `d × K` factor.
pub fn etf_from_rotation(rotation: &Tensor) -> Result<Tensor> {
    let shape = rotation.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::dim(format!("rotation must be d x K with K >= 2, got {shape:?}")));
    }
    let k = shape[1];
    let kf = k as f64;
    let mut centring = Tensor::full(&[k, k], -1.0 / kf);
    for i in 0..k {
        centring.data_mut()[i * k + i] += 1.0;
    }
    let mut e = rotation.matmul(&centring)?;
    let scale = (kf / (kf - 1.0)).sqrt();
    e.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(e)
}

impl EtfClassifier {
    /// Wraps an existing prototype matrix (e.g. loaded from a checkpoint).
    pub fn from_parts(prototypes: Tensor, seed: u64, logit_scale: f64) -> Result<Self> {
        let shape = prototypes.shape();
        if shape.len() != 2 || shape[1] < 2 || shape[0] < shape[1] {
            return Err(Error::dim(format!(
                "prototype matrix must be d x K with 2 <= K <= d, got {shape:?}"
            )));
        }
        if !(logit_scale > 0.0 && logit_scale.is_finite()) {
            return Err(Error::Config(format!("logit scale must be positive, got {logit_scale}")));
        }
        Ok(Self {
            classes: shape[1],
            dim: shape[0],
            prototypes,
            seed,
            logit_scale,
        })
    }

    pub fn with_logit_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("logit scale must be positive, got {scale}")));
        }
        self.logit_scale = scale;
        Ok(self)
    }

    /// `d × K` matrix whose columns are the class prototypes.
    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    /// Prototype of class `i` as a vector.
    pub fn prototype(&self, i: usize) -> Vec<f64> {
        (0..self.dim).map(|r| self.prototypes.at(r, i)).collect()
    }

    /// Scaled cosine logits `s · cos(f_b, u_i)` recorded on `tape`.
    ///
    /// Rows of `features` with zero norm produce all-zero logits. The
    /// prototypes enter the tape as a constant, so they never receive a
    /// gradient.
    pub fn logits_on(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let fshape = tape.value(features).shape();
        if fshape.len() != 2 || fshape[1] != self.dim {
            return Err(Error::dim(format!(
                "features must be [B, {}], got {fshape:?}",
                self.dim
            )));
        }
        let unit = tape.l2_normalize(features, 1)?;
        let protos = tape.constant(self.prototypes.clone());
        let cos = tape.matmul(unit, protos)?;
        Ok(tape.scale(cos, self.logit_scale))
    }

    /// Untracked logits for `features` `[B, d]`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let out = self.logits_on(&mut tape, f)?;
        Ok(tape.value(out).clone())
    }

    /// Index of the most similar prototype for each row; ties go to the
    /// lowest index.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let cos = self.logits(features)?;
        Ok(argmax_rows(&cos))
    }
}

/// Row-wise argmax with lowest-index tie breaking.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let rows = scores.shape()[0];
    (0..rows)
        .map(|r| {
            let mut best = 0;
            for (i, &v) in scores.row(r).iter().enumerate() {
                if v > scores.row(r)[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Checks unit column norms and `-1/(K-1)` pairwise inner products.
pub fn validate_etf(classifier: &EtfClassifier, tolerance: f64) -> EtfValidationReport {
    validate_prototypes(classifier.prototypes(), tolerance)
}

pub fn validate_prototypes(e: &Tensor, tolerance: f64) -> EtfValidationReport {
    let k = e.shape()[1];
    let gram = e.transpose2().matmul(e).expect("square gram");
    let target = -1.0 / (k as f64 - 1.0);
    let mut max_norm_deviation: f64 = 0.0;
    let mut max_offdiag_deviation: f64 = 0.0;
    for i in 0..k {
        max_norm_deviation = max_norm_deviation.max((gram.at(i, i).sqrt() - 1.0).abs());
        for j in 0..k {
            if i != j {
                max_offdiag_deviation = max_offdiag_deviation.max((gram.at(i, j) - target).abs());
            }
        }
    }
    EtfValidationReport {
        max_norm_deviation,
        max_offdiag_deviation,
        passed: max_norm_deviation <= tolerance && max_offdiag_deviation <= tolerance,
    }
}
