use rand::Rng;

use crate::numerics::{Float, Graph, NumericsError, ParamId, Var};

use super::{EncoderLayout, ModelConfig};

/// Shape information shared by both contextualizers for one batch.
pub(crate) struct EncoderInput<'a> {
    pub cfg: &'a ModelConfig,
    pub vars: &'a [Var],
    pub rows: usize,
    pub len: usize,
    /// Real (non-pad) length of each row; attention ignores later keys.
    pub key_len: &'a [usize],
    pub train: bool,
}

/// Post-norm Transformer encoder over `h: [rows·len × d]`.
pub(crate) fn encode<T: Float, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    inp: &EncoderInput<'_>,
    enc: &EncoderLayout,
    h: Var,
    rng: &mut R,
) -> Result<Var, NumericsError> {
    let cfg = inp.cfg;
    let v = |id: ParamId| inp.vars[id.0];
    let (rows, len, heads) = (inp.rows, inp.len, cfg.n_heads);
    let p = cfg.dropout;
    let group_len: Vec<usize> = inp.key_len.iter().flat_map(|&l| std::iter::repeat_n(l, heads)).collect();
    let q_scale = T::cst(1.0 / (cfg.head_dim() as f64).sqrt());

    let mut h = g.layer_norm(h, v(enc.input_gamma), v(enc.input_beta), cfg.layer_norm_eps)?;
    h = g.dropout(h, p, inp.train, rng);
    for l in &enc.layers {
        let affine = |g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId| -> Result<Var, NumericsError> {
            let y = g.matmul(x, v(w))?;
            g.add_bias(y, v(b))
        };
        let q = affine(g, h, l.wq, l.bq)?;
        let q = g.scale(q, q_scale);
        let k = affine(g, h, l.wk, l.bk)?;
        let val = affine(g, h, l.wv, l.bv)?;
        let q = g.split_heads(q, rows, len, heads)?;
        let k = g.split_heads(k, rows, len, heads)?;
        let val = g.split_heads(val, rows, len, heads)?;
        let scores = g.bmm(q, k, true)?;
        let attn = g.masked_softmax(scores, group_len.clone(), len)?;
        let attn = g.dropout(attn, p, inp.train, rng);
        let ctx = g.bmm(attn, val, false)?;
        let ctx = g.merge_heads(ctx, rows, len, heads)?;
        let out = affine(g, ctx, l.wo, l.bo)?;
        let out = g.dropout(out, p, inp.train, rng);
        let res = g.add(h, out)?;
        h = g.layer_norm(res, v(l.ln1_gamma), v(l.ln1_beta), cfg.layer_norm_eps)?;

        let f = affine(g, h, l.w1, l.b1)?;
        let f = g.gelu(f);
        let f = affine(g, f, l.w2, l.b2)?;
        let f = g.dropout(f, p, inp.train, rng);
        let res = g.add(h, f)?;
        h = g.layer_norm(res, v(l.ln2_gamma), v(l.ln2_beta), cfg.layer_norm_eps)?;
    }
    Ok(h)
}
