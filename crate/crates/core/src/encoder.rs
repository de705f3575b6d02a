//! Small convolutional encoder producing unit-norm features.
//!
//! Per-image standardization → `conv(3x3) + ReLU` blocks (the first two followed by 2×2 max pooling) → optional
//! self-attention → global average pooling → linear projection → L2
//! normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_forward, AttentionLayer, AttentionVars};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Variance floor for standardizing a flat image.
const STD_EPS: f64 = 1e-6;

/// Shifts and scales every image to zero mean and unit variance over all
/// of its pixels and channels. Images are inputs, so no gradient flows here.
pub fn standardize(images: &Tensor) -> Tensor {
    let mut out = images.clone();
    let per: usize = images.shape()[1..].iter().product();
    for img in out.data_mut().chunks_mut(per) {
        let n = img.len() as f64;
        let mean = img.iter().sum::<f64>() / n;
        let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + STD_EPS).sqrt();
        img.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// Number of leading blocks whose output is pooled down by 2.
const DOWNSAMPLING_BLOCKS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub blocks: Vec<ConvBlock>,
    pub attention: AttentionLayer,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub use_attention: bool,
    pub image_size: usize,
}

/// Tape handles for one bound [`EncoderModel`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    blocks: Vec<(Var, Var)>,
    attention: Option<AttentionVars>,
    proj_weight: Var,
    proj_bias: Var,
}

impl EncoderVars {
    /// Rebuilds handles from a list aligned with [`EncoderModel::parameters`].
    pub fn from_handles(model: &EncoderModel, handles: &[Var]) -> Result<Self> {
        let n = model.parameters().len();
        if handles.len() != n {
            return Err(Error::Contract(format!("expected {n} parameter handles, got {}", handles.len())));
        }
        let nb = model.blocks.len();
        let a = &handles[2 * nb..2 * nb + 4];
        Ok(Self {
            blocks: handles[..2 * nb].chunks(2).map(|c| (c[0], c[1])).collect(),
            attention: model.use_attention.then_some(AttentionVars {
                wq: a[0],
                wk: a[1],
                wv: a[2],
                gamma: a[3],
            }),
            proj_weight: handles[n - 2],
            proj_bias: handles[n - 1],
        })
    }

    /// Handles aligned with [`EncoderModel::parameters`]; `None` marks a
    /// parameter that is not part of the computation (bypassed attention).
    pub fn aligned(&self) -> Vec<Option<Var>> {
        let mut out: Vec<Option<Var>> = Vec::new();
        for &(w, b) in &self.blocks {
            out.extend([Some(w), Some(b)]);
        }
        match self.attention {
            Some(a) => out.extend([Some(a.wq), Some(a.wk), Some(a.wv), Some(a.gamma)]),
            None => out.extend([None; 4]),
        }
        out.extend([Some(self.proj_weight), Some(self.proj_bias)]);
        out
    }
}

pub fn init_encoder(cfg: &RunConfig, seed: u64) -> Result<EncoderModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(cfg.widths.len());
    let mut in_ch = 3;
    for (i, &out_ch) in cfg.widths.iter().enumerate() {
        let fan_in = in_ch * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        blocks.push(ConvBlock {
            weight: Tensor::uniform(&[out_ch, in_ch, 3, 3], bound, &mut rng),
            bias: Tensor::zeros(&[out_ch]),
            pool: i < DOWNSAMPLING_BLOCKS,
        });
        in_ch = out_ch;
    }
    let attention = AttentionLayer::init(in_ch, &mut rng);
    let bound = (3.0 / in_ch as f64).sqrt();
    Ok(EncoderModel {
        blocks,
        attention,
        proj_weight: Tensor::uniform(&[in_ch, cfg.feature_dim], bound, &mut rng),
        proj_bias: Tensor::zeros(&[cfg.feature_dim]),
        use_attention: cfg.use_attention,
        image_size: cfg.image_size,
    })
}

impl EncoderModel {
    pub fn feature_dim(&self) -> usize {
        self.proj_weight.shape()[1]
    }

    /// Spatial size of the map the attention block sees.
    pub fn attention_map_size(&self) -> usize {
        self.blocks
            .iter()
            .fold(self.image_size, |s, b| if b.pool { s / 2 } else { s })
    }

    /// All parameters in checkpoint order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for b in &self.blocks {
            out.extend([&b.weight, &b.bias]);
        }
        let a = &self.attention;
        out.extend([&a.wq, &a.wk, &a.wv, &a.gamma]);
        out.extend([&self.proj_weight, &self.proj_bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.weight, &mut b.bias]);
        }
        let a = &mut self.attention;
        out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.gamma]);
        out.extend([&mut self.proj_weight, &mut self.proj_bias]);
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let put = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| (put(tape, &b.weight), put(tape, &b.bias)))
            .collect();
        let attention = self
            .use_attention
            .then(|| self.attention.bind(tape, trainable));
        EncoderVars {
            blocks,
            attention,
            proj_weight: put(tape, &self.proj_weight),
            proj_bias: put(tape, &self.proj_bias),
        }
    }

    /// Records the forward pass for `images` `[B, 3, H, W]`, returning
    /// unit-norm features `[B, d]`.
    pub fn forward_on(&self, tape: &mut Tape, vars: &EncoderVars, images: Var) -> Result<Var> {
        let shape = tape.value(images).shape();
        let s = self.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Dimension(format!(
                "encoder expects images [B, 3, {s}, {s}], got {shape:?}"
            )));
        }
        let mut h = tape.constant(standardize(tape.value(images)));
        for (block, &(w, b)) in self.blocks.iter().zip(&vars.blocks) {
            h = tape.conv2d(h, w, 1, 1)?;
            h = tape.add_bias(h, b, 1)?;
            h = tape.relu(h);
            if block.pool {
                h = tape.max_pool2(h)?;
            }
        }
        if let Some(att) = &vars.attention {
            h = attention_forward(tape, att, h)?;
        }
        let pooled = tape.global_average_pool(h)?;
        let proj = tape.matmul(pooled, vars.proj_weight)?;
        let proj = tape.add_bias(proj, vars.proj_bias, 1)?;
        tape.l2_normalize(proj, 1)
    }

    /// Untracked features for a batch of images.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let f = self.forward_on(&mut tape, &vars, x)?;
        Ok(tape.value(f).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        RunConfig {
            classes: 4,
            feature_dim: 8,
            image_size: 16,
            widths: vec![4, 8, 8],
            ..RunConfig::default()
        }
    }

    fn images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::uniform(&[n, 3, size, size], 0.5, &mut rng);
        t.data_mut().iter_mut().for_each(|v| *v += 0.5);
        t
    }

    #[test]
    fn default_architecture() {
        let m = init_encoder(&RunConfig::default(), 0).unwrap();
        let widths: Vec<usize> = m.blocks.iter().map(|b| b.weight.shape()[0]).collect();
        assert_eq!(widths, vec![16, 32, 64]);
        assert_eq!(m.feature_dim(), 64);
        assert_eq!(m.attention_map_size(), 8);
        assert_eq!(m.attention.gamma.item(), 0.0);
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let cfg = small_cfg();
        assert_eq!(init_encoder(&cfg, 3).unwrap(), init_encoder(&cfg, 3).unwrap());
        let bad = RunConfig {
            classes: 10,
            feature_dim: 8,
            ..RunConfig::default()
        };
        assert!(matches!(init_encoder(&bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn features_are_unit_norm() {
        let m = init_encoder(&small_cfg(), 1).unwrap();
        let f = m.features(&images(5, 16, 2)).unwrap();
        for r in 0..5 {
            let n: f64 = f.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bypass_equals_closed_gate() {
        let mut m = init_encoder(&small_cfg(), 4).unwrap();
        let x = images(3, 16, 5);
        let with_closed_gate = m.features(&x).unwrap();
        m.use_attention = false;
        assert_eq!(m.features(&x).unwrap(), with_closed_gate);
    }

    #[test]
    fn duplicate_images_give_duplicate_features() {
        let m = init_encoder(&small_cfg(), 6).unwrap();
        let one = images(1, 16, 7);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::new(&[2, 3, 16, 16], data).unwrap();
        let f = m.features(&two).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn standardized_images_have_zero_mean_unit_variance() {
        let s = standardize(&images(2, 4, 8));
        for img in s.data().chunks(48) {
            let mean = img.iter().sum::<f64>() / 48.0;
            let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(standardize(&Tensor::full(&[1, 3, 2, 2], 0.3)).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let m = init_encoder(&small_cfg(), 0).unwrap();
        assert!(matches!(m.features(&images(1, 8, 0)), Err(Error::Dimension(_))));
    }
}
