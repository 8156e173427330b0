use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{OpKind, Var};
use crate::tensor::Tensor;

/// Per-channel statistics of one training batch. `var` is the unbiased
/// estimate used for the running average.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn update_running<T: Real>(running: &mut Tensor<T>, batch: &Tensor<T>, momentum: f64) {
    let m = T::from_f64(momentum);
    for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = (T::one() - m) * *r + m * b;
    }
}

impl<T: Real> Var<T> {
    /// `y = γ·(x − μ)/√(σ² + eps) + β` per channel of an NCHW input.
    ///
    /// In training mode μ, σ² are the biased batch statistics and the batch
    /// statistics are returned for the caller to fold into its running
    /// averages; otherwise the running statistics are used.
    pub fn batch_norm2d(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
        training: bool,
    ) -> Result<(Var<T>, Option<BatchStats<T>>)> {
        let &[n, c, h, w] = self.shape() else {
            return shape_err("batch_norm2d", format!("expected 4-D input, got {:?}", self.shape()));
        };
        for (name, s) in [
            ("gamma", gamma.shape()),
            ("beta", beta.shape()),
            ("running_mean", running_mean.shape()),
            ("running_var", running_var.shape()),
        ] {
            if s != [c] {
                return shape_err("batch_norm2d", format!("{name} has shape {s:?}, expected [{c}]"));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let xd = self.value().data();
        let eps_t = T::from_f64(eps);

        let (mean, var_biased) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_m = T::one() / T::from_f64(m as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mu = s * inv_m;
                let mut v = T::zero();
                for b in 0..n {
                    for &x in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        v += (x - mu) * (x - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = v * inv_m;
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };

        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let s = (b * c + ch) * hw;
                for i in s..s + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }

        let stats = training.then(|| {
            let correction = if m > 1 {
                T::from_f64(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            BatchStats {
                mean: Tensor::new(vec![c], mean.clone()).unwrap(),
                var: Tensor::new(vec![c], var_biased.iter().map(|&v| v * correction).collect()).unwrap(),
            }
        });

        let shape = self.shape().to_vec();
        let need = [self.requires_grad(), gamma.requires_grad(), beta.requires_grad()];
        let gamma_v = gd.to_vec();
        let out = Tensor::new(shape.clone(), out)?;
        let var = self.tape().record(
            OpKind::BatchNorm2d { training },
            &[self, gamma, beta],
            out,
            move |g| {
                let gy = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let s = (b * c + ch) * hw;
                        for i in s..s + hw {
                            dgamma[ch] += gy[i] * xhat[i];
                            dbeta[ch] += gy[i];
                        }
                    }
                }
                let dx = need[0].then(|| {
                    let mut dx = vec![T::zero(); gy.len()];
                    let mf = T::from_f64(m as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let s = (b * c + ch) * hw;
                            for i in s..s + hw {
                                dx[i] = if training {
                                    // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                                    gamma_v[ch] * inv_std[ch] / mf
                                        * (mf * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gamma_v[ch] * inv_std[ch] * gy[i]
                                };
                            }
                        }
                    }
                    Tensor::new(shape.clone(), dx).unwrap()
                });
                vec![
                    dx,
                    need[1].then(|| Tensor::new(vec![c], dgamma).unwrap()),
                    need[2].then(|| Tensor::new(vec![c], dbeta).unwrap()),
                ]
            },
        );
        Ok((var, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;
    use rand::SeedableRng;

    fn params(tape: &Tape<f64>, c: usize, gamma: f64, beta: f64) -> (Var<f64>, Var<f64>) {
        (
            tape.constant(Tensor::full(vec![c], gamma)),
            tape.constant(Tensor::full(vec![c], beta)),
        )
    }

    #[test]
    fn inference_with_unit_stats_is_identity() {
        let tape = Tape::<f64>::no_grad();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(vec![2, 3, 4, 4], -2.0, 2.0, &mut rng);
        let xv = tape.constant(x.clone());
        let (g, b) = params(&tape, 3, 1.0, 0.0);
        let (y, stats) = xv
            .batch_norm2d(&g, &b, &Tensor::zeros(vec![3]), &Tensor::ones(vec![3]), 1e-5, false)
            .unwrap();
        assert!(stats.is_none());
        assert!(y.value().rel_err(&x) < 1e-4);
    }

    #[test]
    fn training_on_constant_input_gives_beta() {
        let tape = Tape::<f64>::no_grad();
        let xv = tape.constant(Tensor::full(vec![1, 2, 3, 3], 7.0));
        let (g, b) = params(&tape, 2, 1.3, 0.25);
        let (y, stats) = xv
            .batch_norm2d(&g, &b, &Tensor::zeros(vec![2]), &Tensor::ones(vec![2]), 1e-3, true)
            .unwrap();
        assert!(y.value().data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert_eq!(stats.unwrap().mean.data(), &[7.0, 7.0]);
    }

    #[test]
    fn single_element_batch_is_permitted() {
        let tape = Tape::<f64>::no_grad();
        let xv = tape.constant(Tensor::full(vec![1, 1, 1, 1], 3.0));
        let (g, b) = params(&tape, 1, 1.0, 0.5);
        let (y, stats) = xv
            .batch_norm2d(&g, &b, &Tensor::zeros(vec![1]), &Tensor::ones(vec![1]), 1e-3, true)
            .unwrap();
        assert!(y.value().is_finite());
        assert_eq!(stats.unwrap().var.data(), &[0.0]);
    }

    #[test]
    fn running_average_update() {
        let mut r = Tensor::<f64>::full(vec![2], 1.0);
        update_running(&mut r, &Tensor::full(vec![2], 2.0), 0.03);
        assert!((r.data()[0] - 1.03).abs() < 1e-12);
    }

    #[test]
    fn wrong_parameter_length() {
        let tape = Tape::<f64>::no_grad();
        let xv = tape.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let (g, b) = params(&tape, 3, 1.0, 0.0);
        assert!(xv
            .batch_norm2d(&g, &b, &Tensor::zeros(vec![3]), &Tensor::ones(vec![3]), 1e-3, false)
            .is_err());
    }
}
