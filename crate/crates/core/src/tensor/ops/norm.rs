use crate::scalar::Scalar;
use crate::tensor::tape::Op;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Statistics source for batch normalization.
pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics and fold them into the running
    /// estimates: `running = (1 - momentum) * running + momentum * batch`.
    /// The running variance uses the unbiased batch variance.
    Train {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
        momentum: T,
    },
    /// Normalize with fixed running estimates.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over axis 1 of `x[B, C, ...]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        if s.len() < 2 || s[1] == 0 {
            return Err(TensorError::dim("batch_norm", format!("input {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::dim(
                "batch_norm",
                format!("affine params must be [{c}]"),
            ));
        }
        let batch = s[0];
        let inner: usize = s[2..].iter().product();
        let n = batch * inner;
        let vx = self.value(x);
        let data = vx.data();
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Train {
                running_mean,
                running_var,
                momentum,
            } => {
                if n < 2 {
                    return Err(TensorError::dim(
                        "batch_norm",
                        "training mode needs more than one value per channel",
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for b in 0..batch {
                    for ch in 0..c {
                        let slab = &data[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                        mean[ch] += slab.iter().copied().sum::<T>();
                    }
                }
                let nf = T::lit(n as f64);
                for m in mean.iter_mut() {
                    *m /= nf;
                }
                for b in 0..batch {
                    for ch in 0..c {
                        let slab = &data[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                        let m = mean[ch];
                        var[ch] += slab.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                }
                for v in var.iter_mut() {
                    *v /= nf;
                }
                let unbias = nf / T::lit((n - 1) as f64);
                for ch in 0..c {
                    running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * mean[ch];
                    running_var[ch] =
                        (T::one() - momentum) * running_var[ch] + momentum * var[ch] * unbias;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => (running_mean.to_vec(), running_var.to_vec(), false),
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = Tensor::zeros(&s);
        let od = out.data_mut();
        for b in 0..batch {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                let (m, is, ga, be) = (mean[ch], invstd[ch], gm[ch], bt[ch]);
                for i in r {
                    let h = (data[i] - m) * is;
                    xhat[i] = h;
                    od[i] = h * ga + be;
                }
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                batch_stats,
            },
        )
    }

    /// Layer normalization over the last axis of `x[..., D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        let d = *s.last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::dim("layer_norm", format!("input {s:?}")));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::dim("layer_norm", format!("affine params must be [{d}]")));
        }
        let vx = self.value(x);
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.numel() / d;
        let df = T::lit(d as f64);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut invstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(&s);
        for (r, row) in vx.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            invstd[r] = is;
            let xh = &mut xhat[r * d..(r + 1) * d];
            let o = &mut out.data_mut()[r * d..(r + 1) * d];
            for i in 0..d {
                xh[i] = (row[i] - mean) * is;
                o[i] = xh[i] * gm[i] + bt[i];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            },
        )
    }
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    g: &Tensor<T>,
    gamma: &Tensor<T>,
    xhat: &[T],
    invstd: &[T],
    batch_stats: bool,
    want_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let s = g.shape();
    let (batch, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let gd = g.data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..batch {
        for ch in 0..c {
            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
            for i in r {
                sum_g[ch] += gd[i];
                sum_gx[ch] += gd[i] * xhat[i];
            }
        }
    }
    let gx = want_x.then(|| {
        let mut gx = Tensor::zeros(s);
        let n = T::lit((batch * inner) as f64);
        let gm = gamma.data();
        let dst = gx.data_mut();
        for b in 0..batch {
            for ch in 0..c {
                let k = gm[ch] * invstd[ch];
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                if batch_stats {
                    let (mg, mgx) = (sum_g[ch] / n, sum_gx[ch] / n);
                    for i in r {
                        dst[i] = k * (gd[i] - mg - xhat[i] * mgx);
                    }
                } else {
                    for i in r {
                        dst[i] = k * gd[i];
                    }
                }
            }
        }
        gx
    });
    let gg = Tensor::new(&[c], sum_gx).expect("shape");
    let gb = Tensor::new(&[c], sum_g).expect("shape");
    (gx, gg, gb)
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    g: &Tensor<T>,
    gamma: &Tensor<T>,
    xhat: &[T],
    invstd: &[T],
    want_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let gm = gamma.data();
    let mut gg = Tensor::zeros(&[d]);
    let mut gb = Tensor::zeros(&[d]);
    for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
        for i in 0..d {
            gg.data_mut()[i] += gr[i] * xr[i];
            gb.data_mut()[i] += gr[i];
        }
    }
    let gx = want_x.then(|| {
        let mut gx = Tensor::zeros(g.shape());
        let df = T::lit(d as f64);
        for (r, (gr, xr)) in g.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
            let mut mean_gh = T::zero();
            let mut mean_ghx = T::zero();
            for i in 0..d {
                let gh = gr[i] * gm[i];
                mean_gh += gh;
                mean_ghx += gh * xr[i];
            }
            mean_gh /= df;
            mean_ghx /= df;
            let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
            for i in 0..d {
                dst[i] = invstd[r] * (gr[i] * gm[i] - mean_gh - xr[i] * mean_ghx);
            }
        }
        gx
    });
    (gx, gg, gb)
}
