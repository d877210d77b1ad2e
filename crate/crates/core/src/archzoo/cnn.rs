use super::layers::{Conv, Ctx, Linear};
use super::{expect_chain, spatial_chain, Resolved};
use crate::params::{Init, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Result, Var};

const CHANNELS: [usize; 4] = [48, 64, 128, 128];

/// Flatten 3200 -> 512 -> 256 with tanh and hidden dropout, shared by the
/// convolutional families.
pub(crate) struct FcStack {
    fc1: Linear,
    fc2: Linear,
    dropout: f64,
}

impl FcStack {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, prefix: &str, dropout: f64) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(pb, &format!("{prefix}.fc1"), 3200, 512, Init::XavierUniform { fan_in: 3200, fan_out: 512 })?,
            fc2: Linear::new(pb, &format!("{prefix}.fc2"), 512, 256, Init::XavierUniform { fan_in: 512, fan_out: 256 })?,
            dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = cx.tape.flatten(x)?;
        for l in [&self.fc1, &self.fc2] {
            h = l.forward(cx, h)?;
            h = cx.tape.tanh(h)?;
            h = cx.tape.dropout(h, self.dropout)?;
        }
        Ok(h)
    }
}

pub(crate) fn head<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize, classes: usize) -> Result<Linear> {
    Linear::new(pb, "head", d, classes, Init::XavierUniform { fan_in: d, fan_out: classes })
}

pub(crate) struct Cnn {
    convs: Vec<Conv>,
    fc: FcStack,
    head: Linear,
    input_dropout: f64,
    conv_dropout: f64,
}

impl Cnn {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, r: &Resolved, classes: usize) -> Result<Self> {
        // Pooling after the first three blocks: 3200 = 128 * 5 * 5.
        let chain = spatial_chain(40, &[(3, 1, 1), (2, 2, 0), (3, 1, 1), (2, 2, 0), (3, 1, 1), (2, 2, 0), (3, 1, 1)])
            .map(|v| v.into_iter().step_by(2).collect());
        expect_chain("CNN", chain, &[40, 20, 10, 5])?;
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in CHANNELS.iter().enumerate() {
            let init = Init::KaimingUniform { fan_in: cin * 9 };
            convs.push(Conv::new(pb, &format!("conv{}", i + 1), cin, c, 3, ConvGeometry::new(1, 1), true, init)?);
            cin = c;
        }
        Ok(Self {
            convs,
            fc: FcStack::build(pb, "fc", r.hidden_dropout)?,
            head: head(pb, 256, classes)?,
            input_dropout: r.input_dropout,
            conv_dropout: r.conv_dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        cx.scope("input");
        let mut h = cx.tape.dropout(x, self.input_dropout)?;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(cx, h)?;
            h = cx.tape.relu(h)?;
            cx.spatial(&conv.name, h);
            if i < 3 {
                h = cx.tape.max_pool2d(h, 2, 2)?;
            }
            h = cx.tape.dropout(h, self.conv_dropout)?;
        }
        let f = self.fc.forward(cx, h)?;
        let logits = self.head.forward(cx, f)?;
        Ok((f, logits))
    }
}
