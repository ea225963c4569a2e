//! Batch normalization (train and eval modes) and channel layer norm.

use crate::error::{CoreError, Result};

use super::{Tape, Tensor, TensorId};

const BN_EPS: f64 = 1e-5;

fn nc_inner(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(CoreError::shape(format!("norm input must be [N,C,...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tape {
    /// Training-mode batch norm over all dims except the channel dim.
    ///
    /// Returns the output plus the batch mean/variance per channel (biased
    /// variance, as used in the normalization) so callers can maintain
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = nc_inner(&shape)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(CoreError::shape(format!(
                "batch_norm affine params must be [{c}], got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let m = (n * inner) as f64;
        if m < 1.0 {
            return Err(CoreError::shape("batch_norm needs at least one element"));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                mean[ci] += xv[base..base + inner].iter().sum::<f64>();
            }
        }
        for mu in mean.iter_mut() {
            *mu /= m;
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                var[ci] += xv[base..base + inner].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }

        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                let inv = 1.0 / (var[ci] + BN_EPS).sqrt();
                for i in 0..inner {
                    out[base + i] = gv[ci] * (xv[base + i] - mean[ci]) * inv + bv[ci];
                }
            }
        }

        let mean_c = mean.clone();
        let var_c = var.clone();
        let id = self.record(
            Tensor::new(shape, out),
            &[x, gamma, beta],
            Box::new(move |vals, g| {
                let xv = vals[x.0].data();
                let gv = vals[gamma.0].data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ci in 0..c {
                    let inv = 1.0 / (var_c[ci] + BN_EPS).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * inner;
                        for i in 0..inner {
                            let xh = (xv[base + i] - mean_c[ci]) * inv;
                            sum_g += g[base + i];
                            sum_gx += g[base + i] * xh;
                        }
                    }
                    dbeta[ci] = sum_g;
                    dgamma[ci] = sum_gx;
                    for ni in 0..n {
                        let base = (ni * c + ci) * inner;
                        for i in 0..inner {
                            let xh = (xv[base + i] - mean_c[ci]) * inv;
                            dx[base + i] =
                                gv[ci] * inv * (g[base + i] - sum_g / m - xh * sum_gx / m);
                        }
                    }
                }
                vec![(x.0, dx), (gamma.0, dgamma), (beta.0, dbeta)]
            }),
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batch norm against fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = nc_inner(&shape)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(CoreError::shape("batch_norm_eval running stats"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mu = running_mean.to_vec();
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for i in 0..inner {
                    out[base + i] = gv[ci] * (xv[base + i] - mu[ci]) * inv[ci] + bv[ci];
                }
            }
        }
        let inv_b = inv.clone();
        let mu_b = mu.clone();
        Ok(self.record(
            Tensor::new(shape, out),
            &[x, gamma, beta],
            Box::new(move |vals, g| {
                let xv = vals[x.0].data();
                let gv = vals[gamma.0].data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[base + i] * gv[ci] * inv_b[ci];
                            dgamma[ci] += g[base + i] * (xv[base + i] - mu_b[ci]) * inv_b[ci];
                            dbeta[ci] += g[base + i];
                        }
                    }
                }
                vec![(x.0, dx), (gamma.0, dgamma), (beta.0, dbeta)]
            }),
        ))
    }

    /// Layer norm over the channel dim at each spatial location
    /// (channels-first convention).
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = nc_inner(&shape)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(CoreError::shape("layer_norm affine params"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        let mut means = vec![0.0; n * inner];
        let mut invs = vec![0.0; n * inner];
        for ni in 0..n {
            for l in 0..inner {
                let mut mu = 0.0;
                for ci in 0..c {
                    mu += xv[(ni * c + ci) * inner + l];
                }
                mu /= c as f64;
                let mut v = 0.0;
                for ci in 0..c {
                    v += (xv[(ni * c + ci) * inner + l] - mu).powi(2);
                }
                v /= c as f64;
                let inv = 1.0 / (v + BN_EPS).sqrt();
                means[ni * inner + l] = mu;
                invs[ni * inner + l] = inv;
                for ci in 0..c {
                    let idx = (ni * c + ci) * inner + l;
                    out[idx] = gv[ci] * (xv[idx] - mu) * inv + bv[ci];
                }
            }
        }
        Ok(self.record(
            Tensor::new(shape, out),
            &[x, gamma, beta],
            Box::new(move |vals, g| {
                let xv = vals[x.0].data();
                let gv = vals[gamma.0].data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for l in 0..inner {
                        let mu = means[ni * inner + l];
                        let inv = invs[ni * inner + l];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for ci in 0..c {
                            let idx = (ni * c + ci) * inner + l;
                            let xh = (xv[idx] - mu) * inv;
                            let dxh = g[idx] * gv[ci];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                            dgamma[ci] += g[idx] * xh;
                            dbeta[ci] += g[idx];
                        }
                        for ci in 0..c {
                            let idx = (ni * c + ci) * inner + l;
                            let xh = (xv[idx] - mu) * inv;
                            let dxh = g[idx] * gv[ci];
                            dx[idx] =
                                inv * (dxh - sum_dxh / c as f64 - xh * sum_dxh_xh / c as f64);
                        }
                    }
                }
                vec![(x.0, dx), (gamma.0, dgamma), (beta.0, dbeta)]
            }),
        ))
    }
}
