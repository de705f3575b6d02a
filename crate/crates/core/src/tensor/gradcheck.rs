//! Finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-6;

/// Worst relative error between tape gradients and central differences
/// over `samples` randomly chosen entries of `params`.
///
/// `build` records a scalar loss from handles to `params`; it is called
/// once with trainable leaves and twice per sample with constants.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_relative_error<F>(params: &[Tensor], build: F, samples: usize, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };

    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= params[which].numel() {
            flat -= params[which].numel();
            which += 1;
        }
        let mut shifted = params.to_vec();
        shifted[which].data_mut()[flat] += STEP;
        let up = eval(&shifted);
        shifted[which].data_mut()[flat] = params[which].data()[flat] - STEP;
        let down = eval(&shifted);
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[which].data()[flat];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_enough() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = max_relative_error(
            &[x],
            |tape, v| {
                let sq = tape.mul(v[0], v[0]).unwrap();
                tape.sum(sq)
            },
            30,
            0,
        );
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly 0 has a one-sided derivative that differences miss.
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = max_relative_error(&[x], |tape, v| {
            let r = tape.relu(v[0]);
            tape.sum(r)
        }, 1, 0);
        assert!(err > 0.1);
    }
}
