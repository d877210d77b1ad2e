use crate::scalar::Scalar;
use crate::tensor::tape::Op;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::dim(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add(a, b))
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let nb = vb.ndim();
        if nb > vx.ndim() || vx.shape()[vx.ndim() - nb..] != *vb.shape() {
            return Err(TensorError::dim(
                "add_broadcast",
                format!("{:?} cannot broadcast onto {:?}", vb.shape(), vx.shape()),
            ));
        }
        let mut out = vx.clone();
        let inner = vb.numel();
        if inner > 0 {
            for chunk in out.data_mut().chunks_mut(inner) {
                for (o, &v) in chunk.iter_mut().zip(vb.data()) {
                    *o += v;
                }
            }
        }
        self.push(out, Op::AddTrailing { x, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::dim(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = hadamard(va, vb);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Multiplies each `[b, c, ...]` slab of `x` by `gate[b, c]`.
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gate));
        if vx.ndim() < 2 || vg.shape() != &vx.shape()[..2] {
            return Err(TensorError::dim(
                "channel_gate",
                format!("gate {:?} for input {:?}", vg.shape(), vx.shape()),
            ));
        }
        let inner: usize = vx.shape()[2..].iter().product();
        let mut out = vx.clone();
        if inner > 0 {
            for (slab, &s) in out.data_mut().chunks_mut(inner).zip(vg.data()) {
                for v in slab {
                    *v *= s;
                }
            }
        }
        self.push(out, Op::ChannelGate { x, gate })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(TensorError::dim("mean", "empty tensor"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let lead = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(x, &[lead, rest])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut seen = vec![false; v.ndim()];
        if perm.len() != v.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::dim(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", v.ndim()),
            ));
        }
        let (data, shape) = permute_data(v.data(), v.shape(), perm);
        let out = Tensor::new(&shape, data)?;
        self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::dim("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::dim(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let t = self.value(*v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::dim(
                "slice",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        self.push(out, Op::Slice { x, axis, start })
    }
}

pub(crate) fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Sums `g` over its leading blocks down to `shape` (the trailing dims).
pub(crate) fn reduce_leading<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let inner = out.numel();
    if inner > 0 {
        for chunk in g.data().chunks(inner) {
            for (o, &v) in out.data_mut().iter_mut().zip(chunk) {
                *o += v;
            }
        }
    }
    out
}

/// Multiplies each leading-axis slab of `g` by `scales[i]`.
pub(crate) fn scale_leading<T: Scalar>(g: &Tensor<T>, scales: &[T]) -> Tensor<T> {
    let mut out = g.clone();
    let inner = g.numel() / scales.len().max(1);
    if inner > 0 {
        for (slab, &s) in out.data_mut().chunks_mut(inner).zip(scales) {
            for v in slab {
                *v *= s;
            }
        }
    }
    out
}

pub(crate) fn channel_gate_backward<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    gate: &Tensor<T>,
    want_x: bool,
    want_gate: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let inner: usize = x.shape()[2..].iter().product();
    let gx = want_x.then(|| scale_leading_flat(g, gate.data(), inner));
    let gg = want_gate.then(|| {
        let mut out = Tensor::zeros(gate.shape());
        if inner > 0 {
            for ((o, gs), xs) in out
                .data_mut()
                .iter_mut()
                .zip(g.data().chunks(inner))
                .zip(x.data().chunks(inner))
            {
                *o = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
            }
        }
        out
    });
    (gx, gg)
}

fn scale_leading_flat<T: Scalar>(g: &Tensor<T>, scales: &[T], inner: usize) -> Tensor<T> {
    let mut out = g.clone();
    if inner > 0 {
        for (slab, &s) in out.data_mut().chunks_mut(inner).zip(scales) {
            for v in slab {
                *v *= s;
            }
        }
    }
    out
}

pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = data.len();
    if nd == 0 || n == 0 {
        return (data.to_vec(), out_shape);
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let last = nd - 1;
    let (run, run_stride) = (out_shape[last], strides[last]);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    while out.len() < n {
        for j in 0..run {
            out.push(data[off + j * run_stride]);
        }
        // Advance the multi-index over all but the innermost axis.
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn permute_inverse<T: Scalar>(g: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let (data, shape) = permute_data(g.data(), g.shape(), &inv);
    Tensor::new(&shape, data).expect("permute")
}

pub(crate) fn split_axis<T: Scalar>(g: &Tensor<T>, axis: usize, sizes: &[usize]) -> Vec<Tensor<T>> {
    let shape = g.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total = shape[axis];
    let mut parts: Vec<Vec<T>> = sizes
        .iter()
        .map(|&s| Vec::with_capacity(outer * s * inner))
        .collect();
    for o in 0..outer {
        let mut start = o * total * inner;
        for (part, &s) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&g.data()[start..start + s * inner]);
            start += s * inner;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(data, &s)| {
            let mut sh = shape.to_vec();
            sh[axis] = s;
            Tensor::new(&sh, data).expect("split")
        })
        .collect()
}

pub(crate) fn slice_backward<T: Scalar>(
    g: &Tensor<T>,
    in_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(in_shape);
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let full = in_shape[axis] * inner;
    let len = g.shape()[axis];
    for o in 0..outer {
        let dst = o * full + start * inner;
        let src = o * len * inner;
        out.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (out, sh) = permute_data(&data, &shape, &[2, 0, 1]);
        assert_eq!(sh, vec![4, 2, 3]);
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], data[(i * 3 + j) * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut tape = Tape::<f64>::inference();
        let a = tape.constant(Tensor::from_f64(&[2, 1, 2], &[1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]
        );
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(TensorError::Dimension { .. })));
    }
}
