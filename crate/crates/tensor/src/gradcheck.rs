//! Central finite-difference gradient checking in f64.
//!
//! The function under test may return any shape; it is reduced to a scalar
//! by a dot product with a fixed random projection so that every output
//! element contributes to the check.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Inputs with more elements are checked on this many random coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub coords: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked
    /// coordinates; 0 when both are zero.
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }
}

/// L2 relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares reverse-mode gradients of `f` wrt every tensor in `inputs` with
/// central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let tape = Tape::<f64>::new();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&leaves)?;
    let projection = Tensor::<f64>::uniform(out.shape().to_vec(), -1.0, 1.0, &mut rng);
    let proj = tape.constant(projection.clone());
    let loss = out.mul(&proj)?.sum_all()?;
    let grads = tape.backward(&loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::<f64>::no_grad();
        let vars: Vec<Var<f64>> = values.iter().map(|v| t.constant(v.clone())).collect();
        let y = f(&vars)?;
        Ok(y.value().data().iter().zip(projection.data()).map(|(a, b)| a * b).sum())
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic_full = grads.get_or_zeros(leaf);
        let numel = inputs[i].numel();
        let coords: Vec<usize> = if numel <= opts.max_coords {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * opts.step));
            analytic.push(analytic_full.data()[j]);
        }
        reports.push(InputReport {
            coords: coords.len(),
            rel_err: relative_error(&analytic, &numeric),
        });
    }
    Ok(GradCheckReport { inputs: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_gradient_matches() {
        let a = Tensor::from_f64(vec![2], &[0.3, -1.2]).unwrap();
        let b = Tensor::from_f64(vec![2], &[2.0, 5.0]).unwrap();
        let r = check_gradients(&[a, b], |v| v[0].mul(&v[1]), GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err() < 1e-8, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides x from the tape: analytic gradient is zero, numeric is not
        let x = Tensor::from_f64(vec![3], &[0.1, 0.2, 0.3]).unwrap();
        let r = check_gradients(&[x], |v| v[0].detach().mul(&v[0]), GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err() > 0.1);
    }

    #[test]
    fn relative_error_of_zero_vectors() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }
}
