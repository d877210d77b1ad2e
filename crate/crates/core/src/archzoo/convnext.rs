use super::layers::{Conv, Ctx, LayerNorm, Linear};
use super::Resolved;
use crate::params::{Init, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Result, Var};

const DEPTHS: [usize; 4] = [2, 2, 6, 2];
pub(crate) const DIMS: [usize; 4] = [48, 96, 192, 384];
const LN_EPS: f64 = 1e-6;
const TN: Init = Init::TruncNormal { std: 0.02 };

/// LN -> 5x5 depthwise -> LN -> 1x1 expand -> GELU -> 1x1 project, plus skip.
struct Block {
    norm1: LayerNorm,
    dw: Conv,
    norm2: LayerNorm,
    pw1: Linear,
    pw2: Linear,
    drop_path: f64,
}

impl Block {
    fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d: usize, drop_path: f64) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(pb, &format!("{name}.norm1"), d, LN_EPS)?,
            dw: Conv::new(pb, &format!("{name}.dwconv"), d, d, 5, ConvGeometry::depthwise(1, 2, d), true, TN)?,
            norm2: LayerNorm::new(pb, &format!("{name}.norm2"), d, LN_EPS)?,
            pw1: Linear::new(pb, &format!("{name}.pwconv1"), d, 4 * d, TN)?,
            pw2: Linear::new(pb, &format!("{name}.pwconv2"), 4 * d, d, TN)?,
            drop_path,
        })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward_channels(cx, x)?;
        let h = self.dw.forward(cx, h)?;
        // Pointwise layers act on channels-last.
        let h = cx.tape.permute(h, &[0, 2, 3, 1])?;
        let h = self.norm2.forward(cx, h)?;
        let h = self.pw1.forward(cx, h)?;
        let h = cx.tape.gelu(h)?;
        let h = self.pw2.forward(cx, h)?;
        let h = cx.tape.permute(h, &[0, 3, 1, 2])?;
        let h = cx.tape.drop_path(h, self.drop_path)?;
        cx.tape.add(x, h)
    }
}

struct Stage {
    down: Option<(LayerNorm, Conv)>,
    blocks: Vec<Block>,
}

pub(crate) struct ConvNeXt {
    stem: Conv,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
    norm: LayerNorm,
    head: Linear,
}

impl ConvNeXt {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, r: &Resolved, classes: usize) -> Result<Self> {
        let stem = Conv::new(pb, "stem.conv", 3, DIMS[0], 2, ConvGeometry::new(2, 0), true, TN)?;
        let stem_norm = LayerNorm::new(pb, "stem.norm", DIMS[0], LN_EPS)?;
        let total: usize = DEPTHS.iter().sum();
        let mut k = 0;
        let mut stages = Vec::new();
        for s in 0..4 {
            let down = if s > 0 {
                let name = format!("downsample{s}");
                Some((
                    LayerNorm::new(pb, &format!("{name}.norm"), DIMS[s - 1], LN_EPS)?,
                    Conv::new(pb, &format!("{name}.conv"), DIMS[s - 1], DIMS[s], 2, ConvGeometry::new(2, 0), true, TN)?,
                ))
            } else {
                None
            };
            let mut blocks = Vec::new();
            for i in 0..DEPTHS[s] {
                // Stochastic depth grows linearly to the configured rate.
                let rate = r.drop_path * k as f64 / (total - 1) as f64;
                blocks.push(Block::build(pb, &format!("stage{}.{i}", s + 1), DIMS[s], rate)?);
                k += 1;
            }
            stages.push(Stage { down, blocks });
        }
        Ok(Self {
            stem,
            stem_norm,
            stages,
            norm: LayerNorm::new(pb, "norm", DIMS[3], LN_EPS)?,
            head: Linear::new(pb, "head", DIMS[3], classes, TN)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let h = self.stem.forward(cx, x)?;
        let mut h = self.stem_norm.forward_channels(cx, h)?;
        cx.spatial("stem", h);
        for (s, st) in self.stages.iter().enumerate() {
            if let Some((norm, conv)) = &st.down {
                h = norm.forward_channels(cx, h)?;
                h = conv.forward(cx, h)?;
            }
            for b in &st.blocks {
                h = b.forward(cx, h)?;
            }
            cx.spatial(&format!("stage{}", s + 1), h);
        }
        cx.scope("pool");
        let f = cx.tape.global_avg_pool(h)?;
        let f = self.norm.forward(cx, f)?;
        let logits = self.head.forward(cx, f)?;
        Ok((f, logits))
    }
}
