//! Neural-collapse statistics of a feature set.
//!
//! * `nc1_variability`: mean within-class variance divided by the variance
//!   of the class means around the global mean (a ratio proxy for the trace
//!   form, which is ill-conditioned when classes outnumber useful
//!   directions).
//! * `nc2_angle_spread`: standard deviation of the pairwise cosines of the
//!   centred, normalized class means; zero for a simplex ETF.
//! * `nc3_self_duality`: mean cosine between each class mean and its
//!   classifier direction.
//! * `nc4_agreement`: fraction of samples whose nearest class mean (in
//!   Euclidean distance) gives the same class as the classifier.

use serde::{Deserialize, Serialize};

use crate::adaptation::features;
use crate::classifier::Classifier;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const VARIANCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    pub nc1_variability: f64,
    pub nc2_angle_spread: f64,
    pub nc3_self_duality: f64,
    pub nc4_agreement: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// NC statistics of `features` `[N, d]` with zero-based `labels`.
pub fn nc_from_features(features: &Tensor, labels: &[usize], classifier: &Classifier) -> Result<NcReport> {
    let k = classifier.classes();
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != classifier.dim() {
        return Err(Error::Dimension(format!(
            "features {shape:?} for {} labels and a {}-dimensional classifier",
            labels.len(),
            classifier.dim()
        )));
    }
    let d = shape[1];
    let mut counts = vec![0usize; k];
    let mut means = vec![vec![0.0; d]; k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Data(format!("label {l} outside [0, {k})")));
        }
        counts[l] += 1;
        for (m, &f) in means[l].iter_mut().zip(features.row(i)) {
            *m += f;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::Data(format!(
            "class {c} has {} samples; every class needs at least 2",
            counts[c]
        )));
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let global: Vec<f64> = (0..d).map(|j| means.iter().map(|m| m[j]).sum::<f64>() / k as f64).collect();

    let mut within = vec![0.0; k];
    for (i, &l) in labels.iter().enumerate() {
        within[l] += sq_dist(features.row(i), &means[l]);
    }
    let within = within.iter().zip(&counts).map(|(w, &n)| w / n as f64).sum::<f64>() / k as f64;
    let between = means.iter().map(|m| sq_dist(m, &global)).sum::<f64>() / k as f64;

    let centred: Vec<Vec<f64>> = means
        .iter()
        .map(|m| m.iter().zip(&global).map(|(a, g)| a - g).collect())
        .collect();
    let mut cosines = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            cosines.push(cosine(&centred[i], &centred[j]));
        }
    }
    let mean_cos = cosines.iter().sum::<f64>() / cosines.len() as f64;
    let spread = (cosines.iter().map(|c| (c - mean_cos).powi(2)).sum::<f64>() / cosines.len() as f64).sqrt();

    let duality = (0..k).map(|i| cosine(&means[i], &classifier.class_direction(i))).sum::<f64>() / k as f64;

    let predicted = classifier.predict(features)?;
    let agree = (0..labels.len())
        .filter(|&i| {
            let f = features.row(i);
            let mut best = 0;
            for c in 1..k {
                if sq_dist(f, &means[c]) < sq_dist(f, &means[best]) {
                    best = c;
                }
            }
            best == predicted[i]
        })
        .count();

    let report = NcReport {
        nc1_variability: within / (between + VARIANCE_EPS),
        nc2_angle_spread: spread,
        nc3_self_duality: duality,
        nc4_agreement: agree as f64 / labels.len() as f64,
    };
    let all = [report.nc1_variability, report.nc2_angle_spread, report.nc3_self_duality, report.nc4_agreement];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite collapse statistics {report:?}")));
    }
    Ok(report)
}

/// Runs `model` over `images` and measures collapse against `labels`.
pub fn measure_nc(
    model: &EncoderModel,
    classifier: &Classifier,
    images: &Tensor,
    labels: &[usize],
    threads: usize,
) -> Result<NcReport> {
    let f = features(model, images, threads)?;
    nc_from_features(&f, labels, classifier)
}
