//! Dual-stream and single-stream transformer blocks.
//!
//! Every block sublayer follows the same pattern: adaLN-modulate the
//! normalized tokens with scale/shift projected from the conditioning
//! vector, run the sublayer, multiply its contribution by the projected
//! gate, and add the residual. Dual blocks keep separate parameter sets per
//! modality but share one joint attention over [txt; img].

use std::rc::Rc;

use crate::error::Result;
use crate::graph::{scaled_dot_attention, Graph, Var};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::{shared, SharedTensor, Tensor};

use super::config::DiTConfig;
use super::model::Mode;
use super::moe::{MoeLayer, RouterDecision};

/// adaLN projection + attention projections + MoE for one token stream.
pub struct StreamParams<T: Scalar> {
    pub ada_w: SharedTensor<T>,
    pub ada_b: SharedTensor<T>,
    pub wq: SharedTensor<T>,
    pub bq: SharedTensor<T>,
    pub wk: SharedTensor<T>,
    pub bk: SharedTensor<T>,
    pub wv: SharedTensor<T>,
    pub bv: SharedTensor<T>,
    pub wo: SharedTensor<T>,
    pub bo: SharedTensor<T>,
    pub q_gain: SharedTensor<T>,
    pub k_gain: SharedTensor<T>,
    pub moe: MoeLayer<T>,
}

impl<T: Scalar> StreamParams<T> {
    pub fn new(cfg: &DiTConfig, rng: &mut Rng64) -> Result<Self> {
        let d = cfg.d;
        let std = 1.0 / (d as f64).sqrt();
        let lin = |rng: &mut Rng64| shared(Tensor::randn(vec![d, d], std, rng));
        Ok(StreamParams {
            // adaLN zero-init: blocks are the identity at initialization
            ada_w: shared(Tensor::zeros(vec![d, 6 * d])),
            ada_b: shared(Tensor::zeros(vec![1, 6 * d])),
            wq: lin(rng),
            bq: shared(Tensor::zeros(vec![1, d])),
            wk: lin(rng),
            bk: shared(Tensor::zeros(vec![1, d])),
            wv: lin(rng),
            bv: shared(Tensor::zeros(vec![1, d])),
            wo: lin(rng),
            bo: shared(Tensor::zeros(vec![1, d])),
            q_gain: shared(Tensor::ones(vec![cfg.n_heads])),
            k_gain: shared(Tensor::ones(vec![cfg.n_heads])),
            moe: MoeLayer::new(
                d,
                cfg.expert_hidden,
                cfg.n_experts,
                cfg.top_k,
                cfg.shared_expert,
                rng,
            )?,
        })
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, SharedTensor<T>)>) {
        for (tag, p) in [
            ("ada_w", &self.ada_w),
            ("ada_b", &self.ada_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("q_gain", &self.q_gain),
            ("k_gain", &self.k_gain),
        ] {
            out.push((format!("{prefix}.{tag}"), p.clone()));
        }
        self.moe.named(&format!("{prefix}.moe"), out);
    }
}

/// The six modulation rows projected from the conditioning vector, in
/// (shift, scale, gate) order for the attention then FFN sublayers.
/// Scales are stored as 1+scale, ready to multiply.
pub struct Modulation<'g, T: Scalar> {
    pub shift_attn: Var<'g, T>,
    pub scale1p_attn: Var<'g, T>,
    pub gate_attn: Var<'g, T>,
    pub shift_ffn: Var<'g, T>,
    pub scale1p_ffn: Var<'g, T>,
    pub gate_ffn: Var<'g, T>,
}

pub fn modulation<'g, T: Scalar>(
    g: &'g Graph<T>,
    cond: Var<'g, T>,
    sp: &StreamParams<T>,
    d: usize,
    mode: Mode,
) -> Result<Modulation<'g, T>> {
    let m = cond
        .matmul(mode.leaf(g, &sp.ada_w)?)?
        .add_row(mode.leaf(g, &sp.ada_b)?)?
        .reshape(vec![6, d])?;
    let ones = g.constant(Tensor::ones(vec![1, d]))?;
    Ok(Modulation {
        shift_attn: m.slice_rows(0, 1)?,
        scale1p_attn: m.slice_rows(1, 1)?.add(ones)?,
        gate_attn: m.slice_rows(2, 1)?,
        shift_ffn: m.slice_rows(3, 1)?,
        scale1p_ffn: m.slice_rows(4, 1)?.add(ones)?,
        gate_ffn: m.slice_rows(5, 1)?,
    })
}

fn modulate<'g, T: Scalar>(
    x: Var<'g, T>,
    shift: Var<'g, T>,
    scale1p: Var<'g, T>,
    eps: f64,
) -> Result<Var<'g, T>> {
    x.layer_norm(eps)?.mul_row(scale1p)?.add_row(shift)
}

/// Project tokens through an attention matrix; for Q/K additionally
/// RMS-normalize each head vector and apply the per-head gain.
fn project<'g, T: Scalar>(
    g: &'g Graph<T>,
    x: Var<'g, T>,
    w: &SharedTensor<T>,
    b: &SharedTensor<T>,
    gain: Option<&SharedTensor<T>>,
    cfg: &DiTConfig,
    mode: Mode,
) -> Result<Var<'g, T>> {
    let y = x.matmul(mode.leaf(g, w)?)?.add_row(mode.leaf(g, b)?)?;
    let Some(gain) = gain else {
        return Ok(y);
    };
    let n = y.shape()[0];
    let heads = cfg.n_heads;
    let dh = cfg.d_head();
    let head_rows: Rc<Vec<usize>> = Rc::new((0..n).flat_map(|_| 0..heads).collect());
    let gains = mode
        .leaf(g, gain)?
        .reshape(vec![heads, 1])?
        .gather_rows(head_rows)?;
    y.reshape(vec![n * heads, dh])?
        .rms_norm(cfg.norm_eps)?
        .row_scale(gains)?
        .reshape(vec![n, cfg.d])
}

struct QkvIn<'g, T: Scalar> {
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    n: usize,
}

fn qkv<'g, T: Scalar>(
    g: &'g Graph<T>,
    x_mod: Var<'g, T>,
    sp: &StreamParams<T>,
    cfg: &DiTConfig,
    mode: Mode,
) -> Result<QkvIn<'g, T>> {
    Ok(QkvIn {
        q: project(g, x_mod, &sp.wq, &sp.bq, Some(&sp.q_gain), cfg, mode)?,
        k: project(g, x_mod, &sp.wk, &sp.bk, Some(&sp.k_gain), cfg, mode)?,
        v: project(g, x_mod, &sp.wv, &sp.bv, None, cfg, mode)?,
        n: x_mod.shape()[0],
    })
}

/// Joint attention over concatenated parts; returns per-part outputs.
fn joint_attention<'g, T: Scalar>(
    parts: &[QkvIn<'g, T>],
    heads: usize,
) -> Result<Vec<Var<'g, T>>> {
    let cat = |f: fn(&QkvIn<'g, T>) -> Var<'g, T>| -> Result<Var<'g, T>> {
        let mut it = parts.iter().map(f);
        let first = it.next().expect("nonempty parts");
        it.try_fold(first, |acc, v| acc.concat_rows(v))
    };
    let q = cat(|p| p.q)?.split_heads(heads)?;
    let k = cat(|p| p.k)?.split_heads(heads)?;
    let v = cat(|p| p.v)?.split_heads(heads)?;
    let a = scaled_dot_attention(q, k, v)?.merge_heads()?;
    let mut outs = Vec::with_capacity(parts.len());
    let mut off = 0;
    for p in parts {
        outs.push(a.slice_rows(off, p.n)?);
        off += p.n;
    }
    Ok(outs)
}

fn attn_residual<'g, T: Scalar>(
    g: &'g Graph<T>,
    x: Var<'g, T>,
    attn_out: Var<'g, T>,
    sp: &StreamParams<T>,
    m: &Modulation<'g, T>,
    mode: Mode,
) -> Result<Var<'g, T>> {
    let o = attn_out
        .matmul(mode.leaf(g, &sp.wo)?)?
        .add_row(mode.leaf(g, &sp.bo)?)?
        .mul_row(m.gate_attn)?;
    x.add(o)
}

fn ffn_residual<'g, T: Scalar>(
    g: &'g Graph<T>,
    x: Var<'g, T>,
    sp: &StreamParams<T>,
    m: &Modulation<'g, T>,
    cfg: &DiTConfig,
    mode: Mode,
) -> Result<(Var<'g, T>, Var<'g, T>, RouterDecision)> {
    let xm = modulate(x, m.shift_ffn, m.scale1p_ffn, cfg.norm_eps)?;
    let (y, aux, dec) = sp.moe.forward(g, xm, mode, cfg.load_balance)?;
    let out = x.add(y.mul_row(m.gate_ffn)?)?;
    Ok((out, aux, dec))
}

pub struct DualBlock<T: Scalar> {
    pub txt: StreamParams<T>,
    pub img: StreamParams<T>,
}

impl<T: Scalar> DualBlock<T> {
    pub fn new(cfg: &DiTConfig, rng: &mut Rng64) -> Result<Self> {
        Ok(DualBlock {
            txt: StreamParams::new(cfg, rng)?,
            img: StreamParams::new(cfg, rng)?,
        })
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, SharedTensor<T>)>) {
        self.txt.named(&format!("{prefix}.txt"), out);
        self.img.named(&format!("{prefix}.img"), out);
    }

    /// Returns (txt', img', aux loss, routing decisions [txt, img]).
    #[allow(clippy::type_complexity)]
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        txt: Var<'g, T>,
        img: Var<'g, T>,
        cond: Var<'g, T>,
        cfg: &DiTConfig,
        mode: Mode,
    ) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>, Vec<RouterDecision>)> {
        let mt = modulation(g, cond, &self.txt, cfg.d, mode)?;
        let mi = modulation(g, cond, &self.img, cfg.d, mode)?;
        let xt = modulate(txt, mt.shift_attn, mt.scale1p_attn, cfg.norm_eps)?;
        let xi = modulate(img, mi.shift_attn, mi.scale1p_attn, cfg.norm_eps)?;
        let parts = [
            qkv(g, xt, &self.txt, cfg, mode)?,
            qkv(g, xi, &self.img, cfg, mode)?,
        ];
        let outs = joint_attention(&parts, cfg.n_heads)?;
        let txt1 = attn_residual(g, txt, outs[0], &self.txt, &mt, mode)?;
        let img1 = attn_residual(g, img, outs[1], &self.img, &mi, mode)?;
        let (txt2, aux_t, dec_t) = ffn_residual(g, txt1, &self.txt, &mt, cfg, mode)?;
        let (img2, aux_i, dec_i) = ffn_residual(g, img1, &self.img, &mi, cfg, mode)?;
        Ok((txt2, img2, aux_t.add(aux_i)?, vec![dec_t, dec_i]))
    }
}

pub struct SingleBlock<T: Scalar> {
    pub all: StreamParams<T>,
}

impl<T: Scalar> SingleBlock<T> {
    pub fn new(cfg: &DiTConfig, rng: &mut Rng64) -> Result<Self> {
        Ok(SingleBlock {
            all: StreamParams::new(cfg, rng)?,
        })
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, SharedTensor<T>)>) {
        self.all.named(prefix, out);
    }

    #[allow(clippy::type_complexity)]
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        tokens: Var<'g, T>,
        cond: Var<'g, T>,
        cfg: &DiTConfig,
        mode: Mode,
    ) -> Result<(Var<'g, T>, Var<'g, T>, Vec<RouterDecision>)> {
        let m = modulation(g, cond, &self.all, cfg.d, mode)?;
        let xm = modulate(tokens, m.shift_attn, m.scale1p_attn, cfg.norm_eps)?;
        let part = qkv(g, xm, &self.all, cfg, mode)?;
        let outs = joint_attention(std::slice::from_ref(&part), cfg.n_heads)?;
        let x1 = attn_residual(g, tokens, outs[0], &self.all, &m, mode)?;
        let (x2, aux, dec) = ffn_residual(g, x1, &self.all, &m, cfg, mode)?;
        Ok((x2, aux, vec![dec]))
    }
}
