//! Central finite-difference checks for tape gradients.

use rand::RngExt;

use super::{Result, Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`, worst case.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `<build(inputs), R>` for a random
/// projection `R` against central differences with step `h`.
///
/// `training` selects a training tape seeded with `seed`, so dropout masks
/// repeat across evaluations. At most `max_per_input` coordinates of each
/// input are probed, spread evenly over the tensor.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, seed: u64, training: bool, h: f64, max_per_input: usize) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape_for = || if training { Tape::training(seed) } else { Tape::inference() };
    let mut projection: Option<Tensor<f64>> = None;
    let mut eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = tape_for();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grads)).collect();
        let out = build(&mut tape, &vars)?;
        let r = projection
            .get_or_insert_with(|| {
                let mut g = rng::stream(seed, &[u64::MAX]);
                let shape = tape.shape(out).to_vec();
                let n = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| g.random_range(-1.0..1.0)).collect()).expect("shape matches")
            })
            .clone();
        let rv = tape.constant(r);
        let prod = tape.mul(out, rv)?;
        let loss = tape.sum(prod)?;
        let value = tape.value(loss).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.take_grad(v)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let zeros = Tensor::zeros(x.shape());
        let g = analytic[k].as_ref().unwrap_or(&zeros);
        let step = n.div_ceil(max_per_input.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let (plus, _) = eval(&probe, false)?;
            probe[k].data_mut()[i] = orig - h;
            let (minus, _) = eval(&probe, false)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel_error: worst,
        checked,
    })
}
