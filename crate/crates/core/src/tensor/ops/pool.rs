use crate::scalar::Scalar;
use crate::tensor::tape::Op;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

fn pool_dims(op: &'static str, shape: &[usize], k: usize, stride: usize) -> Result<(usize, usize)> {
    if shape.len() != 4 {
        return Err(TensorError::dim(op, format!("expected [B, C, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if k == 0 || stride == 0 || h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0 {
        return Err(TensorError::dim(
            op,
            format!("{h}x{w} not divisible by window {k} / stride {stride}"),
        ));
    }
    Ok(((h - k) / stride + 1, (w - k) / stride + 1))
}

impl<T: Scalar> Tape<T> {
    /// Max pooling; gradient flows to the first maximal element (row-major).
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        let (oh, ow) = pool_dims("max_pool2d", vx.shape(), k, stride)?;
        let (planes, h, w) = (vx.shape()[0] * vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let mut out = Tensor::zeros(&[vx.shape()[0], vx.shape()[1], oh, ow]);
        let mut argmax = Vec::with_capacity(out.numel());
        let src = vx.data();
        let dst = out.data_mut();
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (oy * stride) * w + ox * stride;
                    for ki in 0..k {
                        for kj in 0..k {
                            let idx = (oy * stride + ki) * w + ox * stride + kj;
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                    }
                    dst[(p * oh + oy) * ow + ox] = plane[best];
                    argmax.push((p * h * w + best) as u32);
                }
            }
        }
        self.push(out, Op::MaxPool { x, argmax })
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        let (oh, ow) = pool_dims("avg_pool2d", vx.shape(), k, stride)?;
        let (planes, h, w) = (vx.shape()[0] * vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let mut out = Tensor::zeros(&[vx.shape()[0], vx.shape()[1], oh, ow]);
        let inv = T::one() / T::lit((k * k) as f64);
        let src = vx.data();
        let dst = out.data_mut();
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ki in 0..k {
                        for kj in 0..k {
                            acc += plane[(oy * stride + ki) * w + ox * stride + kj];
                        }
                    }
                    dst[(p * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        self.push(out, Op::AvgPool { x, k, stride })
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(TensorError::dim("global_avg_pool", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::lit(hw as f64);
        let data = vx
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[s[0], s[1]], data)?;
        self.push(out, Op::GlobalAvgPool(x))
    }
}

pub(crate) fn max_pool_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], argmax: &[u32]) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_shape);
    let dst = gx.data_mut();
    for (&idx, &v) in argmax.iter().zip(g.data()) {
        dst[idx as usize] += v;
    }
    gx
}

pub(crate) fn avg_pool_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], k: usize, stride: usize) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_shape);
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let inv = T::one() / T::lit((k * k) as f64);
    let planes = in_shape[0] * in_shape[1];
    let dst = gx.data_mut();
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g.data()[(p * oh + oy) * ow + ox] * inv;
                for ki in 0..k {
                    for kj in 0..k {
                        dst[p * h * w + (oy * stride + ki) * w + ox * stride + kj] += v;
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let hw = in_shape[2] * in_shape[3];
    let inv = T::one() / T::lit(hw as f64);
    let mut gx = Tensor::zeros(in_shape);
    for (plane, &v) in gx.data_mut().chunks_mut(hw).zip(g.data()) {
        plane.fill(v * inv);
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_largest() {
        let mut tape = Tape::<f64>::training(0);
        let x = tape.leaf(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap(), true);
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_first_element() {
        let mut tape = Tape::<f64>::training(0);
        let x = tape.leaf(Tensor::from_f64(&[1, 1, 2, 2], &[5., 5., 5., 5.]).unwrap(), true);
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 4], 2.5));
        let y = tape.avg_pool2d(x, 2, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
        let z = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(z), &[2, 3]);
        assert!(tape.value(z).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn three_halvings_take_40_to_5() {
        let mut tape = Tape::<f32>::inference();
        let mut x = tape.constant(Tensor::zeros(&[1, 1, 40, 40]));
        let mut sizes = Vec::new();
        for _ in 0..3 {
            x = tape.max_pool2d(x, 2, 2).unwrap();
            sizes.push(tape.shape(x)[2]);
        }
        assert_eq!(sizes, vec![20, 10, 5]);
        assert!(matches!(
            tape.max_pool2d(x, 2, 2),
            Err(TensorError::Dimension { op: "max_pool2d", .. })
        ));
    }
}
