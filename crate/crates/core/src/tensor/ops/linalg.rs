use crate::scalar::{gemm, Scalar};
use crate::tensor::tape::Op;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

impl<T: Scalar> Tape<T> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(false, false, m, k, n, T::one(), va.data(), vb.data(), T::zero(), out.data_mut());
        self.add_macs((m * k * n) as u64);
        self.push(out, Op::MatMul { a, b })
    }

    /// Batched matmul: `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(TensorError::dim(
                "bmm",
                format!("{sa:?} x {sb:?} (trans_b = {trans_b})"),
            ));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = Tensor::zeros(&[batch, m, n]);
        for i in 0..batch {
            gemm(
                false,
                trans_b,
                m,
                k,
                n,
                T::one(),
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        self.add_macs((batch * m * k * n) as u64);
        self.push(out, Op::Bmm { a, b, trans_b })
    }

    /// Fully connected layer over the last axis: `x[..., I] * w[I, O] + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(TensorError::dim("linear", format!("{sx:?} x {sw:?}")));
        }
        let (i_dim, o_dim) = (sw[0], sw[1]);
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [o_dim] {
                return Err(TensorError::dim("linear", format!("bias {sb:?} for {o_dim} outputs")));
            }
        }
        let rows = vx.numel() / i_dim.max(1);
        let mut shape = sx.to_vec();
        *shape.last_mut().expect("non-empty") = o_dim;
        let mut out = Tensor::zeros(&shape);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.data_mut().chunks_mut(o_dim) {
                row.copy_from_slice(bias);
            }
        }
        let vx = self.value(x);
        let vw = self.value(w);
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(false, false, rows, i_dim, o_dim, T::one(), vx.data(), vw.data(), beta, out.data_mut());
        self.add_macs((rows * i_dim * o_dim) as u64);
        self.push(out, Op::Linear { x, w, b })
    }
}

pub(crate) fn matmul_backward<T: Scalar>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let ga = want_a.then(|| {
        let mut t = Tensor::zeros(a.shape());
        gemm(false, true, m, n, k, T::one(), g.data(), b.data(), T::zero(), t.data_mut());
        t
    });
    let gb = want_b.then(|| {
        let mut t = Tensor::zeros(b.shape());
        gemm(true, false, k, m, n, T::one(), a.data(), g.data(), T::zero(), t.data_mut());
        t
    });
    (ga, gb)
}

pub(crate) fn bmm_backward<T: Scalar>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = g.shape()[2];
    let mut ga = want_a.then(|| Tensor::zeros(a.shape()));
    let mut gb = want_b.then(|| Tensor::zeros(b.shape()));
    for i in 0..batch {
        let gi = &g.data()[i * m * n..(i + 1) * m * n];
        let ai = &a.data()[i * m * k..(i + 1) * m * k];
        let bi = &b.data()[i * k * n..(i + 1) * k * n];
        if let Some(ga) = ga.as_mut() {
            let dst = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
            // trans_b: b stored [n, k] so dA = g * b; else dA = g * b^T.
            gemm(false, !trans_b, m, n, k, T::one(), gi, bi, T::zero(), dst);
        }
        if let Some(gb) = gb.as_mut() {
            let dst = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
            if trans_b {
                gemm(true, false, n, m, k, T::one(), gi, ai, T::zero(), dst);
            } else {
                gemm(true, false, k, m, n, T::one(), ai, gi, T::zero(), dst);
            }
        }
    }
    (ga, gb)
}

pub(crate) fn linear_backward<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (i_dim, o_dim) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / i_dim.max(1);
    let gx = want_x.then(|| {
        let mut t = Tensor::zeros(x.shape());
        gemm(false, true, rows, o_dim, i_dim, T::one(), g.data(), w.data(), T::zero(), t.data_mut());
        t
    });
    let gw = want_w.then(|| {
        let mut t = Tensor::zeros(w.shape());
        gemm(true, false, i_dim, rows, o_dim, T::one(), x.data(), g.data(), T::zero(), t.data_mut());
        t
    });
    let mut gb = Tensor::zeros(&[o_dim]);
    if o_dim > 0 {
        for row in g.data().chunks(o_dim) {
            for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2.]);

        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1., 1.]).unwrap());
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::from_f64(&[2], &[3., 4.]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 4.]);
    }

    #[test]
    fn linear_rejects_inner_mismatch() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            tape.linear(x, w, None),
            Err(TensorError::Dimension { op: "linear", .. })
        ));
    }

    #[test]
    fn bmm_transposed_matches_explicit() {
        let mut tape = Tape::<f64>::inference();
        let a = tape.constant(Tensor::from_f64(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        // b^T stored as [N=2, K=3]
        let bt = tape.constant(Tensor::from_f64(&[1, 2, 3], &[1., 0., 1., 0., 1., 0.]).unwrap());
        let y = tape.bmm(a, bt, true).unwrap();
        assert_eq!(tape.value(y).data(), &[4., 2., 10., 5.]);
    }
}
