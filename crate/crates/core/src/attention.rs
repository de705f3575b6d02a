//! Spatial self-attention over a `[B, C, H, W]` feature map.
//!
//! Queries and keys are 1×1 projections to `C_r = max(1, C / 8)` channels,
//! values keep all `C` channels. Every spatial position attends over all
//! positions with weights `softmax(q · k / sqrt(C_r))`, and the attended
//! values are added back through a learnable gate:
//! `out = x + gamma · attended`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub gamma: Tensor,
}

/// Tape handles for one bound [`AttentionLayer`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub gamma: Var,
}

pub fn reduced_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

impl AttentionLayer {
    /// Fan-in scaled uniform projections with the gate closed (`gamma = 0`).
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let cr = reduced_channels(channels);
        let bound = 1.0 / (channels as f64).sqrt();
        Self {
            wq: Tensor::uniform(&[cr, channels, 1, 1], bound, rng),
            wk: Tensor::uniform(&[cr, channels, 1, 1], bound, rng),
            wv: Tensor::uniform(&[channels, channels, 1, 1], bound, rng),
            gamma: Tensor::scalar(0.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.wv.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AttentionVars {
            wq: put(&self.wq),
            wk: put(&self.wk),
            wv: put(&self.wv),
            gamma: put(&self.gamma),
        }
    }

    /// Untracked forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = attention_forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Attention weights `[B, HW, HW]`; row `i` holds the weights query
    /// position `i` assigns to every key position.
    pub fn attention_map(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let parts = project(&mut tape, &vars, xv)?;
        Ok(tape.value(parts.attn).clone())
    }
}

struct Projected {
    attn: Var,
    value: Var,
}

fn project(tape: &mut Tape, vars: &AttentionVars, x: Var) -> Result<Projected> {
    let shape = tape.value(x).shape().to_vec();
    let channels = tape.value(vars.wv).shape()[0];
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::Dimension(format!(
            "attention over {channels} channels got input {shape:?}"
        )));
    }
    let (b, c, n) = (shape[0], shape[1], shape[2] * shape[3]);
    let cr = tape.value(vars.wq).shape()[0];

    let q = tape.conv2d(x, vars.wq, 1, 0)?;
    let q = tape.reshape(q, &[b, cr, n])?;
    let k = tape.conv2d(x, vars.wk, 1, 0)?;
    let k = tape.reshape(k, &[b, cr, n])?;
    let v = tape.conv2d(x, vars.wv, 1, 0)?;
    let value = tape.reshape(v, &[b, c, n])?;

    // scores[i, j] = q_i · k_j
    let scores = tape.bmm_t(q, k, true, false)?;
    let scores = tape.scale(scores, 1.0 / (cr as f64).sqrt());
    let attn = tape.softmax(scores, 2)?;
    Ok(Projected { attn, value })
}

/// Records the gated self-attention block on `tape`.
pub fn attention_forward(tape: &mut Tape, vars: &AttentionVars, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let Projected { attn, value } = project(tape, vars, x)?;
    // attended[c, i] = sum_j V[c, j] A[i, j]
    let attended = tape.bmm_t(value, attn, false, true)?;
    let attended = tape.reshape(attended, &shape)?;
    let gated = tape.scale_by(attended, vars.gamma)?;
    tape.add(x, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(c: usize, gamma: f64, seed: u64) -> AttentionLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = AttentionLayer::init(c, &mut rng);
        l.gamma = Tensor::scalar(gamma);
        l
    }

    #[test]
    fn closed_gate_is_identity() {
        let l = layer(8, 0.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 8, 3, 3], &mut rng);
        assert_eq!(l.forward(&x).unwrap(), x);
    }

    #[test]
    fn single_position_reduces_to_value_projection() {
        let l = layer(8, 0.7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 8, 1, 1], &mut rng);
        let out = l.forward(&x).unwrap();
        for c in 0..8 {
            let wv: f64 = (0..8).map(|j| l.wv.data()[c * 8 + j] * x.data()[j]).sum();
            assert!((out.data()[c] - (x.data()[c] + 0.7 * wv)).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let l = layer(16, 0.5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[2, 16, 4, 3], &mut rng);
        let a = l.attention_map(&x).unwrap();
        for row in a.data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let l = layer(8, 0.0, 0);
        let x = Tensor::zeros(&[1, 4, 2, 2]);
        assert!(matches!(l.forward(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn reduced_channel_floor() {
        assert_eq!(reduced_channels(4), 1);
        assert_eq!(reduced_channels(64), 8);
    }
}
