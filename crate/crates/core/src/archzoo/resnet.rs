use super::cnn::{head, FcStack};
use super::layers::{Conv, Ctx, Linear, SqueezeExcite};
use super::mlp::{MlpPath, HIDDEN};
use super::{expect_chain, spatial_chain, Resolved};
use crate::params::{Init, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::{Activation, ConvGeometry, Result, Var};

/// Two 3x3 convolutions with ReLU and an identity skip.
struct Unit {
    conv1: Conv,
    conv2: Conv,
    /// SE applied to the branch after the second convolution.
    inner_se: Option<SqueezeExcite>,
}

impl Unit {
    fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let init = Init::KaimingUniform { fan_in: c * 9 };
        Ok(Self {
            conv1: Conv::new(pb, &format!("{name}.conv1"), c, c, 3, ConvGeometry::new(1, 1), true, init)?,
            conv2: Conv::new(pb, &format!("{name}.conv2"), c, c, 3, ConvGeometry::new(1, 1), true, init)?,
            inner_se: None,
        })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = cx.tape.relu(h)?;
        let h = cx.tape.dropout(h, dropout)?;
        let mut h = self.conv2.forward(cx, h)?;
        if let Some(se) = &self.inner_se {
            h = se.forward(cx, h)?;
        }
        let h = cx.tape.add(h, x)?;
        let h = cx.tape.relu(h)?;
        cx.tape.dropout(h, dropout)
    }
}

/// Stride-2 1x1 projection between blocks.
struct Transition {
    conv: Conv,
    se: Option<SqueezeExcite>,
}

/// Convolutional trunk of ResNet-D4: stem 3->24, blocks at 24/48/64/128,
/// input RGB concatenated after block 1, output `[B, 128, 5, 5]`.
pub(crate) struct Trunk {
    stem: Conv,
    units: Vec<Unit>,
    transitions: Vec<Transition>,
    /// SE after the residual addition of blocks 3 and 4.
    block_se: Vec<Option<SqueezeExcite>>,
    conv_dropout: f64,
}

const WIDTHS: [usize; 4] = [24, 48, 64, 128];

impl Trunk {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, prefix: &str, r: &Resolved, se: bool) -> Result<Self> {
        let chain = spatial_chain(40, &[(1, 2, 0), (1, 2, 0), (1, 2, 0)]);
        expect_chain(prefix, chain, &[40, 20, 10, 5])?;
        let stem = Conv::new(pb, &format!("{prefix}.stem"), 3, WIDTHS[0], 3, ConvGeometry::new(1, 1), true, Init::KaimingUniform { fan_in: 27 })?;
        let mut units = vec![Unit::build(pb, &format!("{prefix}.block1"), WIDTHS[0])?];
        let mut transitions = Vec::new();
        let mut block_se = vec![None];
        let mut cin = WIDTHS[0] + 3;
        for b in 1..4 {
            let c = WIDTHS[b];
            let conv = Conv::new(
                pb,
                &format!("{prefix}.transition{}", b + 1),
                cin,
                c,
                1,
                ConvGeometry::new(2, 0),
                true,
                Init::KaimingUniform { fan_in: cin },
            )?;
            let make_se = |pb: &mut ParamBuilder<'_, T>, name: String| {
                SqueezeExcite::new(pb, &name, c, c / 2, Activation::Relu, r.se_dropout)
            };
            let t_se = if se && b >= 2 {
                Some(make_se(pb, format!("{prefix}.transition{}.se", b + 1))?)
            } else {
                None
            };
            transitions.push(Transition { conv, se: t_se });
            let mut unit = Unit::build(pb, &format!("{prefix}.block{}", b + 1), c)?;
            if se && b == 3 {
                unit.inner_se = Some(make_se(pb, format!("{prefix}.block4.final_conv.se"))?);
            }
            units.push(unit);
            block_se.push(if se && b >= 2 {
                Some(make_se(pb, format!("{prefix}.block{}.se", b + 1))?)
            } else {
                None
            });
            cin = c;
        }
        Ok(Self {
            stem,
            units,
            transitions,
            block_se,
            conv_dropout: r.conv_dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.stem.forward(cx, x)?;
        let h = cx.tape.relu(h)?;
        let mut h = self.units[0].forward(cx, h, self.conv_dropout)?;
        cx.spatial(&self.stem.name, h);
        cx.scope("concat_rgb");
        h = cx.tape.concat(&[h, x], 1)?;
        for b in 1..4 {
            let t = &self.transitions[b - 1];
            h = t.conv.forward(cx, h)?;
            h = cx.tape.relu(h)?;
            if let Some(se) = &t.se {
                h = se.forward(cx, h)?;
            }
            h = self.units[b].forward(cx, h, self.conv_dropout)?;
            if let Some(se) = &self.block_se[b] {
                h = se.forward(cx, h)?;
            }
            cx.spatial(&t.conv.name, h);
        }
        Ok(h)
    }
}

/// ResNet-D4, or SE-ResNet-D4 when built with squeeze-and-excitation.
pub(crate) struct ResNet {
    trunk: Trunk,
    fc: FcStack,
    head: Linear,
    input_dropout: f64,
}

impl ResNet {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, r: &Resolved, classes: usize, se: bool) -> Result<Self> {
        Ok(Self {
            trunk: Trunk::build(pb, "resnet", r, se)?,
            fc: FcStack::build(pb, "resnet", r.hidden_dropout)?,
            head: head(pb, 256, classes)?,
            input_dropout: r.input_dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        cx.scope("input");
        let x = cx.tape.dropout(x, self.input_dropout)?;
        let h = self.trunk.forward(cx, x)?;
        let f = self.fc.forward(cx, h)?;
        let logits = self.head.forward(cx, f)?;
        Ok((f, logits))
    }
}

/// ResNet-D4 pathway (256 features) alongside the MLP pathway (600 features).
pub(crate) struct Nin {
    trunk: Trunk,
    fc: FcStack,
    mlp: MlpPath,
    head: Linear,
    input_dropout: f64,
}

impl Nin {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, r: &Resolved, classes: usize) -> Result<Self> {
        Ok(Self {
            trunk: Trunk::build(pb, "resnet", r, false)?,
            fc: FcStack::build(pb, "resnet", r.hidden_dropout)?,
            mlp: MlpPath::build(pb, "mlp", r)?,
            head: head(pb, 256 + HIDDEN[HIDDEN.len() - 1], classes)?,
            input_dropout: r.input_dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        cx.scope("input");
        let x = cx.tape.dropout(x, self.input_dropout)?;
        let h = self.trunk.forward(cx, x)?;
        let a = self.fc.forward(cx, h)?;
        let b = self.mlp.forward(cx, x)?;
        cx.scope("concat_paths");
        let f = cx.tape.concat(&[a, b], 1)?;
        let logits = self.head.forward(cx, f)?;
        Ok((f, logits))
    }
}
