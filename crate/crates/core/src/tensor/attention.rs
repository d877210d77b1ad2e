use super::{Result, Tape, TensorError, Var};
use crate::scalar::Scalar;

/// Tape handles for the projections of one self-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// `[D, 3D]` fused query/key/value projection.
    pub qkv_w: Var,
    pub qkv_b: Var,
    /// `[D, D]` output projection.
    pub proj_w: Var,
    pub proj_b: Var,
}

pub struct AttentionOutput {
    /// `[B, T, D]`.
    pub out: Var,
    /// `[B, heads, T, T]`, rows sum to one.
    pub weights: Var,
}

/// Multi-head scaled dot-product self-attention over `x[B, T, D]`.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    heads: usize,
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(TensorError::dim("attention", format!("expected [B, T, D], got {s:?}")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!(
            "embedding dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let qkv = tape.linear(x, p.qkv_w, Some(p.qkv_b))?;
    let qkv = tape.reshape(qkv, &[b, t, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = tape.reshape(qkv, &[3, b * heads, t, dh])?;
    let mut parts = [x; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let sl = tape.slice(qkv, 0, i, 1)?;
        *part = tape.reshape(sl, &[b * heads, t, dh])?;
    }
    let [q, k, v] = parts;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, T::one() / T::lit(dh as f64).sqrt())?;
    let attn = tape.softmax(scores)?;
    let ctx = tape.bmm(attn, v, false)?;
    let ctx = tape.reshape(ctx, &[b, heads, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, d])?;
    let out = tape.linear(ctx, p.proj_w, Some(p.proj_b))?;
    let weights = tape.reshape(attn, &[b, heads, t, t])?;
    Ok(AttentionOutput { out, weights })
}
