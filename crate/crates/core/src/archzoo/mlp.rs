use super::layers::{Ctx, Linear};
use super::Resolved;
use crate::params::{Init, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::{Result, Var};

pub(crate) const INPUT: usize = 4800;
/// Hidden widths after the 4800-wide flattened input.
pub(crate) const HIDDEN: [usize; 3] = [1500, 800, 600];

/// Flatten, input dropout, then tanh layers with hidden dropout.
pub(crate) struct MlpPath {
    layers: Vec<Linear>,
    input_dropout: f64,
    hidden_dropout: f64,
}

impl MlpPath {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, prefix: &str, r: &Resolved) -> Result<Self> {
        let mut layers = Vec::new();
        let mut i = INPUT;
        for (k, &o) in HIDDEN.iter().enumerate() {
            let init = Init::XavierUniform { fan_in: i, fan_out: o };
            layers.push(Linear::new(pb, &format!("{prefix}.fc{}", k + 1), i, o, init)?);
            i = o;
        }
        Ok(Self {
            layers,
            input_dropout: r.input_dropout,
            hidden_dropout: r.hidden_dropout,
        })
    }

    /// `x` is the (already dropped-out) image batch.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = cx.tape.flatten(x)?;
        for l in &self.layers {
            h = l.forward(cx, h)?;
            h = cx.tape.tanh(h)?;
            h = cx.tape.dropout(h, self.hidden_dropout)?;
        }
        Ok(h)
    }
}

pub(crate) struct Mlp {
    path: MlpPath,
    head: Linear,
}

impl Mlp {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, r: &Resolved, classes: usize) -> Result<Self> {
        let path = MlpPath::build(pb, "mlp", r)?;
        let d = HIDDEN[HIDDEN.len() - 1];
        let head = Linear::new(pb, "head", d, classes, Init::XavierUniform { fan_in: d, fan_out: classes })?;
        Ok(Self { path, head })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        cx.scope("mlp.input");
        let x = cx.tape.dropout(x, self.path.input_dropout)?;
        let f = self.path.forward(cx, x)?;
        let logits = self.head.forward(cx, f)?;
        Ok((f, logits))
    }
}
