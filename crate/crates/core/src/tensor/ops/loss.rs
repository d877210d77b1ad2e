use rand::RngExt;

use crate::scalar::Scalar;
use crate::tensor::tape::Op;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

fn check_rate(op: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Config(format!("{op} rate must be in [0, 1), got {p}")));
    }
    Ok(())
}

fn softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (row, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let cols = *v
            .shape()
            .last()
            .ok_or_else(|| TensorError::dim("softmax", "0-d input"))?;
        if cols == 0 {
            return Err(TensorError::dim("softmax", "empty last axis"));
        }
        let out = Tensor::new(v.shape(), softmax_rows(v.data(), cols))?;
        self.push(out, Op::Softmax(x))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(TensorError::dim(
                "cross_entropy",
                format!("logits {s:?} for {} labels", labels.len()),
            ));
        }
        let classes = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut loss = T::zero();
        for (row, &l) in v.data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[l];
        }
        loss /= T::lit(labels.len() as f64);
        let probs = softmax_rows(v.data(), classes);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Inverted dropout; identity on inference tapes or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        check_rate("dropout", p)?;
        if !self.is_training() || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let keep = T::lit(1.0 / (1.0 - p));
        let rng = self.rng();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(out, Op::Mask { x, mask })
    }

    /// Stochastic depth: zeroes the whole residual branch of a sample
    /// (leading axis) with probability `p`, scaling survivors by `1/(1-p)`.
    pub fn drop_path(&mut self, x: Var, p: f64) -> Result<Var> {
        check_rate("drop_path", p)?;
        if !self.is_training() || p == 0.0 {
            return Ok(x);
        }
        let batch = self.shape(x).first().copied().unwrap_or(1);
        let keep_scale = T::lit(1.0 / (1.0 - p));
        let rng = self.rng();
        let keep: Vec<T> = (0..batch)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep_scale })
            .collect();
        let out = super::basic::scale_leading(self.value(x), &keep);
        self.push(out, Op::DropPath { x, keep })
    }
}

pub(crate) fn softmax_backward<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let cols = *y.shape().last().expect("softmax output");
    let mut gx = Tensor::zeros(y.shape());
    for ((gr, yr), dst) in g
        .data()
        .chunks(cols)
        .zip(y.data().chunks(cols))
        .zip(gx.data_mut().chunks_mut(cols))
    {
        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for i in 0..cols {
            dst[i] = yr[i] * (gr[i] - dot);
        }
    }
    gx
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    g: &Tensor<T>,
    shape: &[usize],
    labels: &[usize],
    probs: &[T],
) -> Tensor<T> {
    let classes = shape[1];
    let scale = g.data()[0] / T::lit(labels.len() as f64);
    let mut gx = Tensor::new(shape, probs.to_vec()).expect("shape");
    for (row, &l) in gx.data_mut().chunks_mut(classes).zip(labels) {
        row[l] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let mut tape = Tape::<f64>::inference();
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let l = tape.cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let mut tape = Tape::<f32>::inference();
        let z = tape.constant(Tensor::from_f64(&[1, 2], &[1e4, -1e4]).unwrap());
        let l = tape.cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_a_data_error() {
        let mut tape = Tape::<f32>::inference();
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.cross_entropy(z, &[3]), Err(TensorError::Data(_))));
    }

    #[test]
    fn dropout_rate_validation_and_identities() {
        let mut tape = Tape::<f32>::training(1);
        let x = tape.constant(Tensor::ones(&[4]));
        assert!(matches!(tape.dropout(x, 1.0), Err(TensorError::Config(_))));
        assert_eq!(tape.dropout(x, 0.0).unwrap(), x);
        let mut eval = Tape::<f32>::inference();
        let x = eval.constant(Tensor::ones(&[4]));
        assert_eq!(eval.dropout(x, 0.7).unwrap(), x);
        assert_eq!(eval.drop_path(x, 0.7).unwrap(), x);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::<f64>::inference();
        let z = tape.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., -5., 0., 40.]).unwrap());
        let y = tape.softmax(z).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
