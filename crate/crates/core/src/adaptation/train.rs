//! Single optimization steps for source training and target adaptation.

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::config::DivSign;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::etf::argmax_rows;
use crate::tensor::{Tape, Tensor, Var};

use super::bank::{find_neighbors, FeatureBank};
use super::losses::{batch_diversity_on, kl_on, smoothed_cross_entropy_on};
use super::optim::Sgd;

/// Outcome of one supervised step, measured before the update.
#[derive(Clone, Debug)]
pub struct SourceStep {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub features: Tensor,
}

/// Batch means of the adaptation losses, measured before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptStepReport {
    pub l_sim: f64,
    pub l_div: f64,
    pub l_t: f64,
    pub neighbor_ids: Vec<Vec<usize>>,
}

/// Gradient slots for source training: every encoder parameter, then the
/// linear head's weight when there is one.
pub fn source_slots(encoder: &EncoderModel, classifier: &Classifier) -> usize {
    encoder.parameters().len() + usize::from(!classifier.is_etf())
}

fn collect_grads(tape: &mut Tape, loss: Var, vars: &[Option<Var>]) -> Result<Vec<Option<Tensor>>> {
    let mut grads = tape.backward(loss)?;
    Ok(vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect())
}

/// One smoothed cross-entropy step on a labelled source batch. Updates the
/// encoder and, for the linear head, the classifier weight.
pub fn source_train_step(
    encoder: &mut EncoderModel,
    classifier: &mut Classifier,
    optimizer: &mut Sgd,
    images: &Tensor,
    labels: &[usize],
    label_smoothing: f64,
) -> Result<SourceStep> {
    let k = classifier.classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside [0, {k})")));
    }
    let mut tape = Tape::new();
    let vars = encoder.bind(&mut tape, true);
    let head = classifier.bind(&mut tape, true);
    let x = tape.constant(images.clone());
    let f = encoder.forward_on(&mut tape, &vars, x)?;
    let logits = classifier.logits_on(&mut tape, &head, f)?;
    let loss = smoothed_cross_entropy_on(&mut tape, logits, labels, label_smoothing)?;

    let step = SourceStep {
        loss: tape.value(loss).item(),
        predictions: argmax_rows(tape.value(logits)),
        features: tape.value(f).clone(),
    };
    let mut slots = vars.aligned();
    if head.trainable {
        slots.push(Some(head.weight));
    }
    let grads = collect_grads(&mut tape, loss, &slots)?;
    let mut params = encoder.parameters_mut();
    if let Some(w) = classifier.matrix_mut() {
        params.push(w);
    }
    optimizer.step(params, &grads)?;
    Ok(step)
}

/// Hyperparameters of the neighbourhood objective.
#[derive(Clone, Copy, Debug)]
pub struct AdaptObjective {
    pub neighbors: usize,
    pub alpha: f64,
    pub div_sign: DivSign,
}

/// One label-free adaptation step on target samples `ids`, whose images
/// are `images`. The classifier stays frozen; only the encoder (attention
/// included) is updated. The batch's bank rows are refreshed before
/// neighbours are retrieved.
pub fn adapt_step(
    encoder: &mut EncoderModel,
    classifier: &Classifier,
    bank: &mut FeatureBank,
    optimizer: &mut Sgd,
    ids: &[usize],
    images: &Tensor,
    objective: &AdaptObjective,
) -> Result<AdaptStepReport> {
    if images.shape().first() != Some(&ids.len()) {
        return Err(Error::Dimension(format!(
            "{} sample ids for images {:?}",
            ids.len(),
            images.shape()
        )));
    }
    let mut tape = Tape::new();
    let vars = encoder.bind(&mut tape, true);
    let head = classifier.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let f = encoder.forward_on(&mut tape, &vars, x)?;
    let logits = classifier.logits_on(&mut tape, &head, f)?;
    let probs = tape.softmax(logits, 1)?;

    bank.refresh(ids, tape.value(f), tape.value(probs))?;
    let neighbor_ids = find_neighbors(bank, ids, objective.neighbors)?;
    let k = classifier.classes();
    let mut targets = Tensor::zeros(&[ids.len(), k]);
    for (row, nbrs) in neighbor_ids.iter().enumerate() {
        let out = targets.row_mut(row);
        for &j in nbrs {
            for (o, &p) in out.iter_mut().zip(bank.predictions().row(j)) {
                *o += p;
            }
        }
        out.iter_mut().for_each(|o| *o /= nbrs.len() as f64);
    }
    let targets = tape.constant(targets);
    let sim_total = kl_on(&mut tape, probs, targets)?;
    let l_sim = tape.scale(sim_total, 1.0 / ids.len() as f64);
    let l_div = batch_diversity_on(&mut tape, probs, objective.div_sign)?;
    let weighted = tape.scale(l_div, objective.alpha);
    let l_t = tape.add(l_sim, weighted)?;

    let report = AdaptStepReport {
        l_sim: tape.value(l_sim).item(),
        l_div: tape.value(l_div).item(),
        l_t: tape.value(l_t).item(),
        neighbor_ids,
    };
    let grads = collect_grads(&mut tape, l_t, &vars.aligned())?;
    optimizer.step(encoder.parameters_mut(), &grads)?;
    Ok(report)
}
