//! Whole-run drivers: source training, adaptation and evaluation.
//!
//! Both training loops report one record per epoch through a callback.
//! Source records start at epoch 0, measured on the freshly initialized
//! model; for later epochs, loss, train accuracy and the NC statistics come
//! from the features seen during that epoch's training pass, and test
//! accuracy from a separate pass over the held-out split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    adapt_step, build_bank, embed, features, smoothed_cross_entropy, source_train_step, AdaptObjective, Sgd,
};
use crate::checkpoint::{Checkpoint, Phase};
use crate::classifier::Classifier;
use crate::config::RunConfig;
use crate::data::DomainDataset;
use crate::encoder::{init_encoder, EncoderModel};
use crate::error::{Error, Result};
use crate::etf::argmax_rows;
use crate::nc::nc_from_features;
use crate::tensor::Tensor;

/// Version stamped on every metrics record.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

const SHUFFLE_SOURCE: u64 = 1;
const SHUFFLE_ADAPT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEpochRecord {
    pub schema: u32,
    pub phase: Phase,
    pub epoch: usize,
    pub ce_loss: f64,
    pub source_train_acc: f64,
    pub source_test_acc: f64,
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub nc4: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpochRecord {
    pub schema: u32,
    pub phase: Phase,
    pub epoch: usize,
    pub l_sim: f64,
    pub l_div: f64,
    pub l_t: f64,
    pub target_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
}

fn shuffler(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for the classifier, kept apart from the encoder's.
fn classifier_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

pub fn evaluate(
    encoder: &EncoderModel,
    classifier: &Classifier,
    images: &Tensor,
    labels: &[usize],
    threads: usize,
) -> Result<EvalReport> {
    let f = features(encoder, images, threads)?;
    let pred = classifier.predict(&f)?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(EvalReport {
        samples: labels.len(),
        correct,
        accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
    })
}

fn check_data(cfg: &RunConfig, data: &DomainDataset) -> Result<()> {
    if data.classes() != cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, config expects {}",
            data.classes(),
            cfg.classes
        )));
    }
    if data.image_size() != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {} px, config expects {}",
            data.image_size(),
            cfg.image_size
        )));
    }
    Ok(())
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

/// Trains encoder and classifier on the labelled source domain, holding out
/// every fifth sample of each class for testing.
pub fn train_source(
    cfg: &RunConfig,
    data: &DomainDataset,
    threads: usize,
    mut on_record: impl FnMut(&SourceEpochRecord) -> Result<()>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let (train_ids, test_ids) = data.holdout_split();
    let train = data.subset(&train_ids);
    let test = data.subset(&test_ids);

    let mut encoder = init_encoder(cfg, cfg.seed)?;
    let mut classifier = Classifier::from_config(cfg, classifier_seed(cfg.seed))?;
    let mut optimizer = Sgd::new(cfg.lr_source, cfg.momentum, cfg.weight_decay);
    let mut rng = shuffler(cfg.seed, SHUFFLE_SOURCE);

    let initial = embed(&encoder, &classifier, train.images(), threads)?;
    let logits = classifier.logits(&initial.features)?;
    let pred = argmax_rows(&logits);
    emit_source(
        &mut on_record,
        0,
        smoothed_cross_entropy(&logits, train.labels(), cfg.label_smoothing)?,
        &pred,
        &initial.features,
        &train,
        (&encoder, &classifier, &test),
        threads,
    )?;

    let n = train.len();
    let d = cfg.feature_dim;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs_source {
        order.shuffle(&mut rng);
        let mut seen = Tensor::zeros(&[n, d]);
        let mut pred = vec![0; n];
        let mut loss_sum = 0.0;
        for batch in batches(&order, cfg.batch_size) {
            let images = train.images().select_leading(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let step = source_train_step(
                &mut encoder,
                &mut classifier,
                &mut optimizer,
                &images,
                &labels,
                cfg.label_smoothing,
            )?;
            if !step.loss.is_finite() {
                return Err(Error::Contract(format!("source loss diverged at epoch {epoch}")));
            }
            loss_sum += step.loss * batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                seen.row_mut(i).copy_from_slice(step.features.row(r));
                pred[i] = step.predictions[r];
            }
        }
        emit_source(
            &mut on_record,
            epoch,
            loss_sum / n as f64,
            &pred,
            &seen,
            &train,
            (&encoder, &classifier, &test),
            threads,
        )?;
    }

    Ok(Checkpoint {
        config: cfg.clone(),
        phase: Phase::Source,
        epoch: cfg.epochs_source,
        encoder,
        classifier,
        momentum: optimizer.buffers().to_vec(),
    })
}

#[allow(clippy::too_many_arguments)]
fn emit_source(
    on_record: &mut impl FnMut(&SourceEpochRecord) -> Result<()>,
    epoch: usize,
    ce_loss: f64,
    pred: &[usize],
    feats: &Tensor,
    train: &DomainDataset,
    (encoder, classifier, test): (&EncoderModel, &Classifier, &DomainDataset),
    threads: usize,
) -> Result<()> {
    let hits = pred.iter().zip(train.labels()).filter(|(p, l)| p == l).count();
    let nc = nc_from_features(feats, train.labels(), classifier)?;
    let test_acc = evaluate(encoder, classifier, test.images(), test.labels(), threads)?.accuracy;
    on_record(&SourceEpochRecord {
        schema: METRICS_SCHEMA_VERSION,
        phase: Phase::Source,
        epoch,
        ce_loss,
        source_train_acc: hits as f64 / train.len() as f64,
        source_test_acc: test_acc,
        nc1: nc.nc1_variability,
        nc2: nc.nc2_angle_spread,
        nc3: nc.nc3_self_duality,
        nc4: nc.nc4_agreement,
    })
}

/// Fails unless `cfg` describes the same model as the checkpoint's config.
pub fn check_compatible(saved: &RunConfig, cfg: &RunConfig) -> Result<()> {
    let same = saved.classes == cfg.classes
        && saved.feature_dim == cfg.feature_dim
        && saved.image_size == cfg.image_size
        && saved.widths == cfg.widths
        && saved.use_attention == cfg.use_attention
        && saved.use_etf == cfg.use_etf;
    if same {
        Ok(())
    } else {
        Err(Error::Config(
            "config describes a different model than the checkpoint (classes, feature_dim, image_size, widths, use_attention and use_etf must match)".into(),
        ))
    }
}

/// Adapts a source checkpoint to unlabelled target `images`.
///
/// Labels never enter this function: `target_accuracy` is an opaque
/// evaluator called once per epoch for reporting only.
pub fn adapt(
    source: &Checkpoint,
    cfg: &RunConfig,
    images: &Tensor,
    threads: usize,
    mut target_accuracy: impl FnMut(&EncoderModel, &Classifier) -> Result<f64>,
    mut on_record: impl FnMut(&AdaptEpochRecord) -> Result<()>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    check_compatible(&source.config, cfg)?;
    let s = cfg.image_size;
    if images.shape().len() != 4 || images.shape()[1..] != [3, s, s] {
        return Err(Error::Config(format!(
            "target images {:?} do not fit a {s} px model",
            images.shape()
        )));
    }
    let n = images.shape()[0];
    if cfg.neighbors >= n {
        return Err(Error::Config(format!(
            "{} neighbours requested from {n} target samples",
            cfg.neighbors
        )));
    }

    let mut encoder = source.encoder.clone();
    let classifier = &source.classifier;
    let mut bank = build_bank(&encoder, classifier, images, threads)?;
    let mut optimizer = Sgd::new(cfg.lr_adapt, cfg.momentum, cfg.weight_decay);
    let objective = AdaptObjective {
        neighbors: cfg.neighbors,
        alpha: cfg.alpha(),
        div_sign: cfg.div_sign,
    };
    let mut rng = shuffler(cfg.seed, SHUFFLE_ADAPT);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.epochs_adapt {
        order.shuffle(&mut rng);
        let (mut sim, mut div, mut total) = (0.0, 0.0, 0.0);
        for batch in batches(&order, cfg.batch_size) {
            let x = images.select_leading(batch);
            let r = adapt_step(&mut encoder, classifier, &mut bank, &mut optimizer, batch, &x, &objective)?;
            if !r.l_t.is_finite() {
                return Err(Error::Contract(format!("adaptation loss diverged at epoch {epoch}")));
            }
            let w = batch.len() as f64;
            sim += r.l_sim * w;
            div += r.l_div * w;
            total += r.l_t * w;
        }
        on_record(&AdaptEpochRecord {
            schema: METRICS_SCHEMA_VERSION,
            phase: Phase::Adapt,
            epoch,
            l_sim: sim / n as f64,
            l_div: div / n as f64,
            l_t: total / n as f64,
            target_acc: target_accuracy(&encoder, classifier)?,
        })?;
    }

    Ok(Checkpoint {
        config: cfg.clone(),
        phase: Phase::Adapt,
        epoch: cfg.epochs_adapt,
        encoder,
        classifier: classifier.clone(),
        momentum: optimizer.buffers().to_vec(),
    })
}
