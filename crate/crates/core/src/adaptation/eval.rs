//! Untracked batched inference.

use rayon::prelude::*;

use crate::classifier::Classifier;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::{softmax_along, Tensor};

/// Images per forward pass during inference.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct Embeddings {
    /// Unit-norm features `[N, d]`.
    pub features: Tensor,
    /// Softmax of the classifier logits `[N, K]`.
    pub probabilities: Tensor,
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(EVAL_CHUNK).map(|s| (s, (s + EVAL_CHUNK).min(n))).collect()
}

fn stack(parts: Vec<Tensor>, cols: usize) -> Tensor {
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    let rows = data.len() / cols;
    let mut t = Tensor::zeros(&[rows, cols]);
    t.data_mut().copy_from_slice(&data);
    t
}

/// Features for every image, computed in chunks on up to `threads` workers.
/// Results do not depend on the thread count.
pub fn features(model: &EncoderModel, images: &Tensor, threads: usize) -> Result<Tensor> {
    let n = images.shape().first().copied().unwrap_or(0);
    let ranges = chunk_ranges(n);
    let run = |&(s, e): &(usize, usize)| {
        let ids: Vec<usize> = (s..e).collect();
        model.features(&images.select_leading(&ids))
    };
    let parts: Result<Vec<Tensor>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
        pool.install(|| ranges.par_iter().map(run).collect())
    } else {
        ranges.iter().map(run).collect()
    };
    Ok(stack(parts?, model.feature_dim()))
}

pub fn embed(model: &EncoderModel, classifier: &Classifier, images: &Tensor, threads: usize) -> Result<Embeddings> {
    let features = features(model, images, threads)?;
    let logits = classifier.logits(&features)?;
    let probabilities = softmax_along(&logits, 1, false);
    Ok(Embeddings { features, probabilities })
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
