use super::cnn::head;
use super::layers::{BatchNorm, Conv, Ctx, Linear, SqueezeExcite};
use super::Resolved;
use crate::params::{Init, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::{Activation, ConvGeometry, Result, Var};

/// `[expansion, out channels, blocks, stride]` per stage.
const STAGES: [[usize; 4]; 7] = [
    [1, 16, 1, 1],
    [6, 24, 2, 2],
    [6, 40, 2, 2],
    [6, 80, 3, 2],
    [6, 112, 3, 1],
    [6, 192, 4, 2],
    [6, 320, 1, 1],
];
const STEM: usize = 32;
pub(crate) const HEAD_CHANNELS: usize = 1280;
const SE_RATIO: f64 = 0.25;

/// Convolution without bias, batch norm, optional SiLU.
struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
    act: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeometry,
        act: bool,
    ) -> Result<Self> {
        let fan_in = if geom.groups == 1 { cin * k * k } else { k * k };
        Ok(Self {
            conv: Conv::new(pb, &format!("{name}.conv"), cin, cout, k, geom, false, Init::KaimingUniform { fan_in })?,
            bn: BatchNorm::new(pb, &format!("{name}.bn"), cout)?,
            act,
        })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(cx, x)?;
        let h = self.bn.forward(cx, h)?;
        if self.act {
            cx.tape.silu(h)
        } else {
            Ok(h)
        }
    }
}

struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: SqueezeExcite,
    project: ConvBn,
    residual: bool,
}

impl MbConv {
    fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        expansion: usize,
        stride: usize,
        se_dropout: f64,
    ) -> Result<Self> {
        let mid = cin * expansion;
        let expand = if expansion != 1 {
            Some(ConvBn::build(pb, &format!("{name}.expand"), cin, mid, 1, ConvGeometry::new(1, 0), true)?)
        } else {
            None
        };
        let depthwise = ConvBn::build(pb, &format!("{name}.dw"), mid, mid, 3, ConvGeometry::depthwise(stride, 1, mid), true)?;
        // Squeeze width follows the block input, as in the reference B0.
        let squeezed = ((cin as f64 * SE_RATIO) as usize).max(1);
        let se = SqueezeExcite::new(pb, &format!("{name}.se"), mid, squeezed, Activation::Silu, se_dropout)?;
        let project = ConvBn::build(pb, &format!("{name}.project"), mid, cout, 1, ConvGeometry::new(1, 0), false)?;
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            residual: stride == 1 && cin == cout,
        })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(e) = &self.expand {
            h = e.forward(cx, h)?;
        }
        h = self.depthwise.forward(cx, h)?;
        h = self.se.forward(cx, h)?;
        h = self.project.forward(cx, h)?;
        if self.residual {
            h = cx.tape.add(h, x)?;
        }
        Ok(h)
    }
}

pub(crate) struct EfficientNet {
    stem: ConvBn,
    blocks: Vec<MbConv>,
    top: ConvBn,
    head: Linear,
}

impl EfficientNet {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, r: &Resolved, classes: usize) -> Result<Self> {
        let stem = ConvBn::build(pb, "stem", 3, STEM, 3, ConvGeometry::new(1, 1), true)?;
        let mut blocks = Vec::new();
        let mut cin = STEM;
        for (s, &[e, c, n, stride]) in STAGES.iter().enumerate() {
            for i in 0..n {
                let st = if i == 0 { stride } else { 1 };
                blocks.push(MbConv::build(pb, &format!("stage{}.{}", s + 1, i), cin, c, e, st, r.se_dropout)?);
                cin = c;
            }
        }
        let top = ConvBn::build(pb, "top", cin, HEAD_CHANNELS, 1, ConvGeometry::new(1, 0), true)?;
        Ok(Self {
            stem,
            blocks,
            top,
            head: head(pb, HEAD_CHANNELS, classes)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let mut h = self.stem.forward(cx, x)?;
        for b in &self.blocks {
            h = b.forward(cx, h)?;
            cx.spatial(&b.depthwise.conv.name, h);
        }
        h = self.top.forward(cx, h)?;
        cx.scope("pool");
        let f = cx.tape.global_avg_pool(h)?;
        let logits = self.head.forward(cx, f)?;
        Ok((f, logits))
    }
}
