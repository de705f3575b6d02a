use eianet_core::adaptation::{
    batch_diversity_on, diversity_loss_on, similarity_loss_on, smoothed_cross_entropy_on,
};
use eianet_core::attention::{attention_forward, AttentionLayer, AttentionVars};
use eianet_core::encoder::EncoderVars;
use eianet_core::tensor::gradcheck::max_relative_error;
use eianet_core::{init_encoder, Classifier, DivSign, RunConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SAMPLES: usize = 120;

#[test]
fn attention_block_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut layer = AttentionLayer::init(8, &mut rng);
    layer.gamma = Tensor::scalar(0.7);
    let x = Tensor::randn(&[2, 8, 3, 3], &mut rng);
    let probe = Tensor::randn(&[2, 8, 3, 3], &mut rng);
    let params = vec![layer.wq.clone(), layer.wk.clone(), layer.wv.clone(), layer.gamma.clone(), x];
    let err = max_relative_error(
        &params,
        |tape, v| {
            let vars = AttentionVars { wq: v[0], wk: v[1], wv: v[2], gamma: v[3] };
            let out = attention_forward(tape, &vars, v[4]).unwrap();
            let p = tape.constant(probe.clone());
            let weighted = tape.mul(out, p).unwrap();
            tape.sum(weighted)
        },
        SAMPLES,
        2,
    );
    assert!(err < TOL, "attention max relative error {err}");
}

#[test]
fn encoder_to_loss_gradients() {
    let cfg = RunConfig {
        classes: 4,
        feature_dim: 6,
        image_size: 8,
        widths: vec![3, 4, 8],
        ..RunConfig::default()
    };
    let mut model = init_encoder(&cfg, 3).unwrap();
    model.attention.gamma = Tensor::scalar(0.5);
    let classifier = Classifier::from_config(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut images = Tensor::uniform(&[3, 3, 8, 8], 0.5, &mut rng);
    images.data_mut().iter_mut().for_each(|v| *v += 0.5);
    let labels = [0, 3, 1];
    let params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
    let err = max_relative_error(
        &params,
        |tape, v| {
            let vars = EncoderVars::from_handles(&model, v).unwrap();
            let x = tape.constant(images.clone());
            let f = model.forward_on(tape, &vars, x).unwrap();
            let head = classifier.bind(tape, false);
            let logits = classifier.logits_on(tape, &head, f).unwrap();
            smoothed_cross_entropy_on(tape, logits, &labels, 0.1).unwrap()
        },
        SAMPLES,
        6,
    );
    assert!(err < TOL, "encoder max relative error {err}");
}

#[test]
fn smoothed_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = Tensor::randn(&[12, 10], &mut rng);
    let labels: Vec<usize> = (0..12).map(|i| (i * 7) % 10).collect();
    let err = max_relative_error(
        &[logits],
        |tape, v| smoothed_cross_entropy_on(tape, v[0], &labels, 0.1).unwrap(),
        SAMPLES,
        8,
    );
    assert!(err < TOL, "cross-entropy max relative error {err}");
}

#[test]
fn similarity_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Logits feed a softmax so the prediction stays a distribution.
    let logits = Tensor::randn(&[10, 12], &mut rng);
    let neighbors = probabilities(4, 12, &mut rng);
    let err = max_relative_error(
        &[logits],
        |tape, v| {
            let p = tape.softmax(v[0], 1).unwrap();
            let n = tape.constant(neighbors.clone());
            let mut total = None;
            for r in 0..10 {
                let row = tape.row(p, r).unwrap();
                let l = similarity_loss_on(tape, row, n).unwrap();
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l).unwrap(),
                });
            }
            total.unwrap()
        },
        SAMPLES,
        10,
    );
    assert!(err < TOL, "similarity max relative error {err}");
}

#[test]
fn diversity_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = Tensor::randn(&[12, 10], &mut rng);
    for sign in [DivSign::Negated, DivSign::Literal] {
        let err = max_relative_error(
            std::slice::from_ref(&logits),
            |tape, v| {
                let p = tape.softmax(v[0], 1).unwrap();
                let first = tape.row(p, 0).unwrap();
                let single = diversity_loss_on(tape, first, p, sign).unwrap();
                let batch = batch_diversity_on(tape, p, sign).unwrap();
                tape.add(single, batch).unwrap()
            },
            SAMPLES,
            12,
        );
        assert!(err < TOL, "diversity ({sign:?}) max relative error {err}");
    }
}

/// Rows of positive entries summing to one.
fn probabilities(rows: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(&[rows, k]);
    for r in 0..rows {
        let row = t.row_mut(r);
        row.iter_mut().for_each(|v| *v = rng.random_range(0.05..1.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}
