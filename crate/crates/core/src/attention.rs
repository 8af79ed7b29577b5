//! Multi-head attention blocks used for local self-attention over a segment
//! and for the two cross-attention updates (segment ← latent, latent ← keys).
//!
//! Every block is pre-norm: `h = x + W_o·MHA(LN(x), LN(kv))` followed by
//! `out = h + FFN(LN(h))`, with a GELU feed-forward of inner width `h_ff`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::BoolMask;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::filled(1, d, 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(1, d)),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm_rows(x, bound[self.gamma], bound[self.beta], LAYER_NORM_EPS)
    }
}

/// Parameters of one attention block. `norm_kv` is present only for
/// cross-attention, where keys/values come from a second input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub d: usize,
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub norm_q: NormParams,
    pub norm_kv: Option<NormParams>,
    pub norm_ff: NormParams,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        d: usize,
        h_ff: usize,
        heads: usize,
        cross: bool,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("embedding size {d} is not divisible by {heads} heads")));
        }
        let w_q = store.add(format!("{prefix}.w_q"), init.xavier(d, d));
        let w_k = store.add(format!("{prefix}.w_k"), init.xavier(d, d));
        let w_v = store.add(format!("{prefix}.w_v"), init.xavier(d, d));
        let w_o = store.add(format!("{prefix}.w_o"), init.xavier(d, d));
        let norm_q = NormParams::new(store, &format!("{prefix}.norm_q"), d);
        let norm_kv = cross.then(|| NormParams::new(store, &format!("{prefix}.norm_kv"), d));
        let norm_ff = NormParams::new(store, &format!("{prefix}.norm_ff"), d);
        let ffn_in = store.add(format!("{prefix}.ffn_in"), init.xavier(d, h_ff));
        let ffn_in_bias = store.add(format!("{prefix}.ffn_in_bias"), Tensor::zeros(1, h_ff));
        let ffn_out = store.add(format!("{prefix}.ffn_out"), init.xavier(h_ff, d));
        let ffn_out_bias = store.add(format!("{prefix}.ffn_out_bias"), Tensor::zeros(1, d));
        Ok(Self {
            d,
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
            norm_q,
            norm_kv,
            norm_ff,
            ffn_in,
            ffn_in_bias,
            ffn_out,
            ffn_out_bias,
        })
    }

    /// Scalar parameter count of one block:
    /// `4d² + 2d·h_ff + h_ff + d` plus `2d` per layer norm (2 for self, 3 for cross).
    pub fn scalar_count(d: usize, h_ff: usize, cross: bool) -> usize {
        let norms = if cross { 3 } else { 2 };
        4 * d * d + 2 * d * h_ff + h_ff + d + norms * 2 * d
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    /// The attention node; its saved weights are available through
    /// [`Tape::attention_weights`].
    pub attention: Var,
}

/// Runs one pre-norm block. `kv = None` means self-attention.
pub fn attention_block(
    tape: &mut Tape,
    bound: &Bound,
    p: &AttentionParams,
    x: Var,
    kv: Option<Var>,
    mask: &BoolMask,
) -> Result<BlockOutput> {
    let xn = p.norm_q.apply(tape, bound, x)?;
    let kvn = match (kv, &p.norm_kv) {
        (None, _) => xn,
        (Some(kv), Some(norm)) => {
            let (qc, kc) = (tape.value(x).cols(), tape.value(kv).cols());
            if qc != kc {
                return Err(Error::Dimension {
                    op: "cross attention",
                    lhs: tape.value(x).shape().to_vec(),
                    rhs: tape.value(kv).shape().to_vec(),
                });
            }
            norm.apply(tape, bound, kv)?
        }
        (Some(_), None) => return Err(Error::Config("self-attention parameters used for cross-attention".into())),
    };
    let q = tape.matmul(xn, bound[p.w_q])?;
    let k = tape.matmul(kvn, bound[p.w_k])?;
    let v = tape.matmul(kvn, bound[p.w_v])?;
    let attention = tape.attention(q, k, v, p.heads, mask)?;
    let projected = tape.matmul(attention, bound[p.w_o])?;
    let h = tape.add(x, projected)?;

    let hn = p.norm_ff.apply(tape, bound, h)?;
    let inner = tape.matmul(hn, bound[p.ffn_in])?;
    let inner = tape.add_row(inner, bound[p.ffn_in_bias])?;
    let inner = tape.gelu(inner);
    let ff = tape.matmul(inner, bound[p.ffn_out])?;
    let ff = tape.add_row(ff, bound[p.ffn_out_bias])?;
    let out = tape.add(h, ff)?;
    Ok(BlockOutput { out, attention })
}

/// Local self-attention over one segment (`mask` is `t × t`).
pub fn theta_self(tape: &mut Tape, bound: &Bound, p: &AttentionParams, x: Var, mask: &BoolMask) -> Result<Var> {
    Ok(attention_block(tape, bound, p, x, None, mask)?.out)
}

/// Segment rows query the latent block (or any key set `kv`).
pub fn theta_cross_x(
    tape: &mut Tape,
    bound: &Bound,
    p: &AttentionParams,
    x: Var,
    kv: Var,
    kv_valid: &[bool],
) -> Result<Var> {
    let mask = BoolMask::keys(tape.value(x).rows(), kv_valid.to_vec());
    Ok(attention_block(tape, bound, p, x, Some(kv), &mask)?.out)
}

/// Latent rows query a key set built from segment encodings.
pub fn theta_cross_l(
    tape: &mut Tape,
    bound: &Bound,
    p: &AttentionParams,
    latent: Var,
    kv: Var,
    kv_valid: &[bool],
) -> Result<Var> {
    let mask = BoolMask::keys(tape.value(latent).rows(), kv_valid.to_vec());
    Ok(attention_block(tape, bound, p, latent, Some(kv), &mask)?.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(d: usize, heads: usize, cross: bool) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let p = AttentionParams::new(&mut store, &mut init, "blk", d, 2 * d, heads, cross).unwrap();
        (store, p)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let err = AttentionParams::new(&mut store, &mut Init::new(0), "b", 6, 8, 4, false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn scalar_count_matches_store() {
        for cross in [false, true] {
            let (store, _) = setup(8, 2, cross);
            assert_eq!(store.scalar_count(), AttentionParams::scalar_count(8, 16, cross));
        }
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (store, p) = setup(4, 2, true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Init::new(9).xavier(3, 4));
        let kv = tape.leaf(Init::new(10).xavier(1, 4));
        let mask = BoolMask::all(3, 1);
        let blk = attention_block(&mut tape, &bound, &p, x, Some(kv), &mask).unwrap();
        assert!(tape.attention_weights(blk.attention).unwrap().data().iter().all(|&w| w == 1.0));
        assert_eq!(tape.value(blk.out).shape(), &[3, 4]);
    }

    #[test]
    fn cross_rejects_column_mismatch() {
        let (store, p) = setup(4, 2, true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(2, 4));
        let kv = tape.leaf(Tensor::zeros(2, 3));
        let err = theta_cross_x(&mut tape, &bound, &p, x, kv, &[true, true]).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "cross attention", .. }));
    }
}
