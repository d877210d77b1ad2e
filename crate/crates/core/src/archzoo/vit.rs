use super::layers::{Conv, Ctx, LayerNorm, Linear};
use super::Resolved;
use crate::params::{Init, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::{multi_head_attention, AttentionParams, ConvGeometry, Result, Var};

pub(crate) const EMBED: usize = 160;
pub(crate) const HEADS: usize = 4;
const PATCH: usize = 8;
const MLP_HIDDEN: usize = 4 * EMBED;
/// 25 patches plus the class token.
pub(crate) const TOKENS: usize = (40 / PATCH) * (40 / PATCH) + 1;
const LN_EPS: f64 = 1e-5;
const TN: Init = Init::TruncNormal { std: 0.02 };

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    dropout: f64,
}

impl Block {
    fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dropout: f64) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(pb, &format!("{name}.norm1"), EMBED, LN_EPS)?,
            qkv: Linear::new(pb, &format!("{name}.attn.qkv"), EMBED, 3 * EMBED, TN)?,
            proj: Linear::new(pb, &format!("{name}.attn.proj"), EMBED, EMBED, TN)?,
            norm2: LayerNorm::new(pb, &format!("{name}.norm2"), EMBED, LN_EPS)?,
            fc1: Linear::new(pb, &format!("{name}.mlp.fc1"), EMBED, MLP_HIDDEN, TN)?,
            fc2: Linear::new(pb, &format!("{name}.mlp.fc2"), MLP_HIDDEN, EMBED, TN)?,
            dropout,
        })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(cx, x)?;
        let p = AttentionParams {
            qkv_w: cx.p(self.qkv.w),
            qkv_b: cx.p(self.qkv.b),
            proj_w: cx.p(self.proj.w),
            proj_b: cx.p(self.proj.b),
        };
        cx.scope(&self.qkv.name);
        let a = multi_head_attention(cx.tape, h, HEADS, &p)?;
        cx.trace.attention.push(a.weights);
        let h = cx.tape.dropout(a.out, self.dropout)?;
        let x = cx.tape.add(x, h)?;
        let h = self.norm2.forward(cx, x)?;
        let h = self.fc1.forward(cx, h)?;
        let h = cx.tape.gelu(h)?;
        let h = self.fc2.forward(cx, h)?;
        let h = cx.tape.dropout(h, self.dropout)?;
        cx.tape.add(x, h)
    }
}

pub(crate) struct Vit {
    patch: Conv,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl Vit {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, r: &Resolved, classes: usize) -> Result<Self> {
        let patch = Conv::new(pb, "patch_embed", 3, EMBED, PATCH, ConvGeometry::new(PATCH, 0), true, TN)?;
        let cls = pb.param("cls_token", &[1, 1, EMBED], TN)?;
        let pos = pb.param("pos_embed", &[TOKENS, EMBED], TN)?;
        let blocks = (0..r.vit_depth)
            .map(|i| Block::build(pb, &format!("blocks.{i}"), r.vit_dropout))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch,
            cls,
            pos,
            blocks,
            norm: LayerNorm::new(pb, "norm", EMBED, LN_EPS)?,
            head: Linear::new(pb, "head", EMBED, classes, TN)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let b = cx.tape.shape(x)[0];
        let h = self.patch.forward(cx, x)?;
        cx.spatial("patch_embed", h);
        let h = cx.tape.reshape(h, &[b, EMBED, TOKENS - 1])?;
        let tokens = cx.tape.permute(h, &[0, 2, 1])?;
        cx.scope("embed");
        let cls = cx.p(self.cls);
        let cls = cx.tape.concat(&vec![cls; b], 0)?;
        let seq = cx.tape.concat(&[cls, tokens], 1)?;
        let pos = cx.p(self.pos);
        let mut h = cx.tape.add_broadcast(seq, pos)?;
        for blk in &self.blocks {
            h = blk.forward(cx, h)?;
        }
        let h = self.norm.forward(cx, h)?;
        cx.scope("cls");
        let f = cx.tape.slice(h, 1, 0, 1)?;
        let f = cx.tape.reshape(f, &[b, EMBED])?;
        let logits = self.head.forward(cx, f)?;
        Ok((f, logits))
    }
}
