use crate::scalar::{gemm, Scalar};
use crate::tensor::tape::Op;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Stride, symmetric zero padding and grouping of a 2-D convolution.
///
/// Only dense (`groups == 1`) and depthwise (`groups == channels`) layouts are
/// supported. Output size is `(H + 2*pad - k) / stride + 1` with floor division.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn depthwise(stride: usize, pad: usize, channels: usize) -> Self {
        Self {
            stride,
            pad,
            groups: channels,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            None
        } else {
            Some((padded - kernel) / self.stride + 1)
        }
    }
}

struct Dims {
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn dims(x: &[usize], k: &[usize], geom: &ConvGeometry) -> Result<Dims> {
    if x.len() != 4 || k.len() != 4 {
        return Err(TensorError::dim("conv2d", format!("input {x:?}, kernel {k:?}")));
    }
    let (batch, c, h, w) = (x[0], x[1], x[2], x[3]);
    let (o, kc, kh, kw) = (k[0], k[1], k[2], k[3]);
    if geom.groups == 1 {
        if kc != c {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c}"),
            ));
        }
    } else if geom.groups != c || o != c || kc != 1 {
        return Err(TensorError::dim(
            "conv2d",
            format!("depthwise needs kernel [{c}, 1, kh, kw] and groups = {c}; got {k:?}, groups {}", geom.groups),
        ));
    }
    let (Some(oh), Some(ow)) = (geom.output_size(h, kh), geom.output_size(w, kw)) else {
        return Err(TensorError::dim(
            "conv2d",
            format!("kernel {kh}x{kw} (stride {}, pad {}) does not fit {h}x{w}", geom.stride, geom.pad),
        ));
    };
    Ok(Dims {
        batch,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
    })
}

impl<T: Scalar> Tape<T> {
    /// 2-D cross-correlation of `x[B, C, H, W]` with `k[O, C/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(k));
        let d = dims(vx.shape(), vk.shape(), &geom)?;
        if let Some(b) = b {
            if self.shape(b) != [d.o] {
                return Err(TensorError::dim(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), d.o),
                ));
            }
        }
        let vx = self.value(x);
        let vk = self.value(k);
        let mut out = Tensor::zeros(&[d.batch, d.o, d.oh, d.ow]);
        let macs;
        if geom.groups == 1 {
            dense_forward(vx.data(), vk.data(), out.data_mut(), &d, &geom);
            macs = d.batch * d.o * d.c * d.kh * d.kw * d.oh * d.ow;
        } else {
            depthwise_forward(vx.data(), vk.data(), out.data_mut(), &d, &geom);
            macs = d.batch * d.c * d.kh * d.kw * d.oh * d.ow;
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            let plane = d.oh * d.ow;
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let bv = bias[i % d.o];
                for v in chunk {
                    *v += bv;
                }
            }
        }
        self.add_macs(macs as u64);
        self.push(out, Op::Conv2d { x, w: k, b, geom })
    }
}

fn is_pointwise(d: &Dims, geom: &ConvGeometry) -> bool {
    d.kh == 1 && d.kw == 1 && geom.stride == 1 && geom.pad == 0
}

/// Unfolds one sample `[C, H, W]` into columns `[C*kh*kw, oh*ow]`.
fn im2col<T: Scalar>(x: &[T], cols: &mut [T], d: &Dims, geom: &ConvGeometry) {
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    let plane = d.oh * d.ow;
    let mut row = 0;
    for c in 0..d.c {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ki as isize - p;
                    let line = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adds columns back onto one sample's input gradient (adjoint of `im2col`).
fn col2im<T: Scalar>(cols: &[T], gx: &mut [T], d: &Dims, geom: &ConvGeometry) {
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    let plane = d.oh * d.ow;
    let mut row = 0;
    for c in 0..d.c {
        let gc = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut gc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn dense_forward<T: Scalar>(x: &[T], k: &[T], out: &mut [T], d: &Dims, geom: &ConvGeometry) {
    let ckk = d.c * d.kh * d.kw;
    let plane = d.oh * d.ow;
    let in_sz = d.c * d.h * d.w;
    let out_sz = d.o * plane;
    let pointwise = is_pointwise(d, geom);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for b in 0..d.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, &mut cols, d, geom);
            &cols
        };
        gemm(false, false, d.o, ckk, plane, T::one(), k, src, T::zero(), ob);
    }
}

/// Output indices `lo..hi` whose input tap `o * stride + k - pad` lies in `0..len`.
fn valid_range(len: usize, out: usize, k: usize, geom: &ConvGeometry) -> (usize, usize) {
    let (s, p, k) = (geom.stride as isize, geom.pad as isize, k as isize);
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let hi = (len as isize - 1 + p - k).div_euclid(s) + 1;
    (lo as usize, hi.clamp(0, out as isize).max(lo) as usize)
}

fn depthwise_forward<T: Scalar>(x: &[T], k: &[T], out: &mut [T], d: &Dims, geom: &ConvGeometry) {
    let (s, p) = (geom.stride, geom.pad);
    let kk = d.kh * d.kw;
    let (hw, ohw) = (d.h * d.w, d.oh * d.ow);
    let ry: Vec<_> = (0..d.kh).map(|ki| valid_range(d.h, d.oh, ki, geom)).collect();
    let rx: Vec<_> = (0..d.kw).map(|kj| valid_range(d.w, d.ow, kj, geom)).collect();
    for bc in 0..d.batch * d.c {
        let xc = &x[bc * hw..(bc + 1) * hw];
        let kc = &k[(bc % d.c) * kk..(bc % d.c + 1) * kk];
        let oc = &mut out[bc * ohw..(bc + 1) * ohw];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let wv = kc[ki * d.kw + kj];
                let (xlo, xhi) = rx[kj];
                for oy in ry[ki].0..ry[ki].1 {
                    let iy = oy * s + ki - p;
                    let row = &xc[iy * d.w..(iy + 1) * d.w];
                    let dst = &mut oc[oy * d.ow..(oy + 1) * d.ow];
                    if s == 1 {
                        let off = xlo + kj - p;
                        for (o, &v) in dst[xlo..xhi].iter_mut().zip(&row[off..off + xhi - xlo]) {
                            *o += wv * v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] += wv * row[ox * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    k: &Tensor<T>,
    geom: &ConvGeometry,
    want_x: bool,
    want_k: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let d = dims(x.shape(), k.shape(), geom).expect("validated in forward");
    let plane = d.oh * d.ow;
    let mut gb = Tensor::zeros(&[d.o]);
    for (i, chunk) in g.data().chunks(plane.max(1)).enumerate() {
        gb.data_mut()[i % d.o] += chunk.iter().copied().sum();
    }
    let mut gx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut gk = want_k.then(|| Tensor::zeros(k.shape()));
    if geom.groups == 1 {
        dense_backward(g.data(), x.data(), k.data(), gx.as_mut(), gk.as_mut(), &d, geom);
    } else {
        depthwise_backward(g.data(), x.data(), k.data(), gx.as_mut(), gk.as_mut(), &d, geom);
    }
    (gx, gk, gb)
}

fn dense_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    k: &[T],
    mut gx: Option<&mut Tensor<T>>,
    mut gk: Option<&mut Tensor<T>>,
    d: &Dims,
    geom: &ConvGeometry,
) {
    let ckk = d.c * d.kh * d.kw;
    let plane = d.oh * d.ow;
    let in_sz = d.c * d.h * d.w;
    let out_sz = d.o * plane;
    let pointwise = is_pointwise(d, geom);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * plane] };
    let mut dcols = if pointwise || gx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * plane]
    };
    for b in 0..d.batch {
        let gb = &g[b * out_sz..(b + 1) * out_sz];
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        if let Some(gk) = gk.as_deref_mut() {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, &mut cols, d, geom);
                &cols
            };
            // dK[O, CKK] += g[O, P] * cols[CKK, P]^T
            gemm(false, true, d.o, plane, ckk, T::one(), gb, src, T::one(), gk.data_mut());
        }
        if let Some(gx) = gx.as_deref_mut() {
            let dst = &mut gx.data_mut()[b * in_sz..(b + 1) * in_sz];
            if pointwise {
                gemm(true, false, ckk, d.o, plane, T::one(), k, gb, T::zero(), dst);
            } else {
                gemm(true, false, ckk, d.o, plane, T::one(), k, gb, T::zero(), &mut dcols);
                col2im(&dcols, dst, d, geom);
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    k: &[T],
    mut gx: Option<&mut Tensor<T>>,
    mut gk: Option<&mut Tensor<T>>,
    d: &Dims,
    geom: &ConvGeometry,
) {
    let (s, p) = (geom.stride, geom.pad);
    let kk = d.kh * d.kw;
    let (hw, ohw) = (d.h * d.w, d.oh * d.ow);
    let ry: Vec<_> = (0..d.kh).map(|ki| valid_range(d.h, d.oh, ki, geom)).collect();
    let rx: Vec<_> = (0..d.kw).map(|kj| valid_range(d.w, d.ow, kj, geom)).collect();
    for bc in 0..d.batch * d.c {
        let c = bc % d.c;
        let xc = &x[bc * hw..(bc + 1) * hw];
        let gc = &g[bc * ohw..(bc + 1) * ohw];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let (xlo, xhi) = rx[kj];
                let (ylo, yhi) = ry[ki];
                if let Some(gk) = gk.as_deref_mut() {
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let row = &xc[(oy * s + ki - p) * d.w..];
                        let go = &gc[oy * d.ow..(oy + 1) * d.ow];
                        if s == 1 {
                            let off = xlo + kj - p;
                            acc += go[xlo..xhi].iter().zip(&row[off..off + xhi - xlo]).map(|(&a, &b)| a * b).sum::<T>();
                        } else {
                            for ox in xlo..xhi {
                                acc += go[ox] * row[ox * s + kj - p];
                            }
                        }
                    }
                    gk.data_mut()[c * kk + ki * d.kw + kj] += acc;
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let wv = k[c * kk + ki * d.kw + kj];
                    let gxc = &mut gx.data_mut()[bc * hw..(bc + 1) * hw];
                    for oy in ylo..yhi {
                        let row = &mut gxc[(oy * s + ki - p) * d.w..];
                        let go = &gc[oy * d.ow..(oy + 1) * d.ow];
                        if s == 1 {
                            let off = xlo + kj - p;
                            for (r, &gv) in row[off..off + xhi - xlo].iter_mut().zip(&go[xlo..xhi]) {
                                *r += wv * gv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                row[ox * s + kj - p] += wv * go[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_leaves_input_unchanged() {
        let mut tape = Tape::<f64>::inference();
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 3, 3], &data).unwrap());
        let k = tape.constant(Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap());
        let y = tape.conv2d(x, k, None, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn delta_input_reproduces_kernel() {
        // Cross-correlation with a centred delta yields the kernel flipped in
        // both axes; the flip is the sole difference from true convolution.
        let mut tape = Tape::<f64>::inference();
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        let kern: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 5, 5], &img).unwrap());
        let k = tape.constant(Tensor::from_f64(&[1, 1, 3, 3], &kern).unwrap());
        let y = tape.conv2d(x, k, None, ConvGeometry::new(1, 1)).unwrap();
        let out = tape.value(y).data();
        for di in 0..3 {
            for dj in 0..3 {
                let (r, c) = (1 + di, 1 + dj);
                assert_eq!(out[r * 5 + c], kern[(2 - di) * 3 + (2 - dj)]);
            }
        }
        assert_eq!(out.iter().filter(|v| **v != 0.0).count(), 9);
    }

    #[test]
    fn floor_output_size_and_fit_error() {
        let g = ConvGeometry::new(2, 0);
        assert_eq!(g.output_size(40, 1), Some(20));
        assert_eq!(ConvGeometry::new(2, 1).output_size(40, 3), Some(20));
        assert_eq!(g.output_size(5, 2), Some(2));

        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, None, ConvGeometry::new(1, 0)),
            Err(TensorError::Dimension { op: "conv2d", .. })
        ));
    }

    #[test]
    fn depthwise_matches_per_channel_dense() {
        let mut tape = Tape::<f64>::inference();
        let xs: Vec<f64> = (0..2 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let ks: Vec<f64> = (0..2 * 9).map(|i| (i as f64 * 0.91).cos()).collect();
        let x = tape.constant(Tensor::from_f64(&[1, 2, 4, 4], &xs).unwrap());
        let k = tape.constant(Tensor::from_f64(&[2, 1, 3, 3], &ks).unwrap());
        let y = tape.conv2d(x, k, None, ConvGeometry::depthwise(1, 1, 2)).unwrap();
        let y = tape.value(y).clone();
        for c in 0..2 {
            let xc = tape.constant(Tensor::from_f64(&[1, 1, 4, 4], &xs[c * 16..(c + 1) * 16]).unwrap());
            let kc = tape.constant(Tensor::from_f64(&[1, 1, 3, 3], &ks[c * 9..(c + 1) * 9]).unwrap());
            let yc = tape.conv2d(xc, kc, None, ConvGeometry::new(1, 1)).unwrap();
            for (a, b) in tape.value(yc).data().iter().zip(&y.data()[c * 16..(c + 1) * 16]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
