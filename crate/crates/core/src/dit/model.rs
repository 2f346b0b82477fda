//! Full backbone assembly: patch embedding, dual then single blocks, final
//! modulated head, plus feature taps for downstream consumers.

use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::{shared, SharedTensor, Tensor};

use super::block::{DualBlock, SingleBlock};
use super::config::DiTConfig;
use super::embed::{pos_embed_1d, pos_embed_2d, timestep_features};
use super::moe::RouterDecision;

/// How parameters enter a graph: `Train` watches them so backward writes
/// gradients; `Frozen` records plain constants (gradients still flow
/// *through* them to earlier tape nodes, but are never written back).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Frozen,
}

impl Mode {
    pub fn leaf<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        p: &SharedTensor<T>,
    ) -> Result<Var<'g, T>> {
        match self {
            Mode::Train => g.param(p),
            Mode::Frozen => g.frozen(p),
        }
    }
}

pub struct ForwardOut<'g, T: Scalar> {
    /// predicted velocity, same shape as the input latent
    pub velocity: Var<'g, T>,
    /// β-weighted load-balance loss summed over every MoE invocation
    pub aux_loss: Var<'g, T>,
    /// image-token features after each block (dual then single), for
    /// discriminator taps
    pub taps: Vec<Var<'g, T>>,
    pub decisions: Vec<RouterDecision>,
    /// hash of all discrete routing choices this forward made
    pub decision_sig: u64,
}

pub struct SparseDiT<T: Scalar> {
    pub cfg: DiTConfig,
    pub patch_w: SharedTensor<T>,
    pub patch_b: SharedTensor<T>,
    pub t_w1: SharedTensor<T>,
    pub t_b1: SharedTensor<T>,
    pub t_w2: SharedTensor<T>,
    pub t_b2: SharedTensor<T>,
    pub dual: Vec<DualBlock<T>>,
    pub single: Vec<SingleBlock<T>>,
    pub final_ada_w: SharedTensor<T>,
    pub final_ada_b: SharedTensor<T>,
    pub head_w: SharedTensor<T>,
    pub head_b: SharedTensor<T>,
}

impl<T: Scalar> SparseDiT<T> {
    pub fn new(cfg: DiTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng64::new(seed);
        let d = cfg.d;
        let pd = cfg.patch_dim();
        let model = SparseDiT {
            patch_w: shared(Tensor::randn(vec![pd, d], 1.0 / (pd as f64).sqrt(), &mut rng)),
            patch_b: shared(Tensor::zeros(vec![1, d])),
            t_w1: shared(Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng)),
            t_b1: shared(Tensor::zeros(vec![1, d])),
            t_w2: shared(Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng)),
            t_b2: shared(Tensor::zeros(vec![1, d])),
            dual: (0..cfg.l_dual)
                .map(|_| DualBlock::new(&cfg, &mut rng))
                .collect::<Result<_>>()?,
            single: (0..cfg.l_single)
                .map(|_| SingleBlock::new(&cfg, &mut rng))
                .collect::<Result<_>>()?,
            // zero-init final modulation and head: output ≡ 0 at init
            final_ada_w: shared(Tensor::zeros(vec![d, 2 * d])),
            final_ada_b: shared(Tensor::zeros(vec![1, 2 * d])),
            head_w: shared(Tensor::zeros(vec![d, pd])),
            head_b: shared(Tensor::zeros(vec![1, pd])),
            cfg,
        };
        Ok(model)
    }

    /// Stable-order parameter list; the checkpoint format and optimizers
    /// rely on this ordering.
    pub fn named_params(&self) -> Vec<(String, SharedTensor<T>)> {
        let mut out = Vec::new();
        for (tag, p) in [
            ("patch.w", &self.patch_w),
            ("patch.b", &self.patch_b),
            ("tmlp.w1", &self.t_w1),
            ("tmlp.b1", &self.t_b1),
            ("tmlp.w2", &self.t_w2),
            ("tmlp.b2", &self.t_b2),
        ] {
            out.push((tag.to_string(), p.clone()));
        }
        for (i, b) in self.dual.iter().enumerate() {
            b.named(&format!("dual{i}"), &mut out);
        }
        for (i, b) in self.single.iter().enumerate() {
            b.named(&format!("single{i}"), &mut out);
        }
        for (tag, p) in [
            ("final.ada_w", &self.final_ada_w),
            ("final.ada_b", &self.final_ada_b),
            ("head.w", &self.head_w),
            ("head.b", &self.head_b),
        ] {
            out.push((tag.to_string(), p.clone()));
        }
        out
    }

    /// Independent deep copy (same config, fresh parameter storage).
    pub fn clone_model(&self) -> Result<Self> {
        let copy = SparseDiT::new(self.cfg.clone(), 0)?;
        for ((_, src), (_, dst)) in self.named_params().iter().zip(copy.named_params().iter()) {
            dst.borrow_mut()
                .data_mut()
                .copy_from_slice(src.borrow().data());
        }
        Ok(copy)
    }

    /// Record a forward pass on the given graph. `x` is a [C,H,W] latent
    /// already on the tape (constant for plain training, or the head of a
    /// longer differentiable chain).
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        x: Var<'g, T>,
        bundle: &ConditioningBundle<T>,
        t: f64,
        mode: Mode,
    ) -> Result<ForwardOut<'g, T>> {
        let cfg = &self.cfg;
        let d = cfg.d;
        let p = cfg.patch;
        let xs = x.shape();
        if xs.len() != 3 || xs[0] != cfg.in_channels {
            return Err(Error::shape(format!(
                "latent must be [{}, H, W], got {xs:?}",
                cfg.in_channels
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "patch {p} does not divide latent {h}x{w}"
            )));
        }
        if bundle.sequence.shape()[1] != d || bundle.pooled.shape() != [1, d] {
            return Err(Error::shape(format!(
                "conditioning width {} does not match model width {d}",
                bundle.sequence.shape()[1]
            )));
        }
        let n_txt = bundle.sequence.shape()[0];
        let n_img = cfg.img_tokens(h, w);

        // conditioning vector: pooled text + embedded timestep
        let tf = g.constant(timestep_features::<T>(t, d))?;
        let t_emb = tf
            .matmul(mode.leaf(g, &self.t_w1)?)?
            .add_row(mode.leaf(g, &self.t_b1)?)?
            .silu()?
            .matmul(mode.leaf(g, &self.t_w2)?)?
            .add_row(mode.leaf(g, &self.t_b2)?)?;
        let cond = g.constant(bundle.pooled.clone())?.add(t_emb)?;

        // token streams with fixed positional embeddings
        let mut img = x
            .patchify(p)?
            .matmul(mode.leaf(g, &self.patch_w)?)?
            .add_row(mode.leaf(g, &self.patch_b)?)?
            .add(g.constant(pos_embed_2d::<T>(h / p, w / p, d))?)?;
        let mut txt = g
            .constant(bundle.sequence.clone())?
            .add(g.constant(pos_embed_1d::<T>(n_txt, d))?)?;

        let mut aux: Option<Var<'g, T>> = None;
        let mut decisions = Vec::new();
        let mut taps = Vec::new();
        let add_aux = |a: Var<'g, T>, aux: &mut Option<Var<'g, T>>| -> Result<()> {
            *aux = Some(match aux.take() {
                Some(acc) => acc.add(a)?,
                None => a,
            });
            Ok(())
        };

        for block in &self.dual {
            let (t2, i2, a, dec) = block.forward(g, txt, img, cond, cfg, mode)?;
            txt = t2;
            img = i2;
            add_aux(a, &mut aux)?;
            decisions.extend(dec);
            taps.push(img);
        }
        let mut all = txt.concat_rows(img)?;
        for block in &self.single {
            let (a2, a, dec) = block.forward(g, all, cond, cfg, mode)?;
            all = a2;
            add_aux(a, &mut aux)?;
            decisions.extend(dec);
            taps.push(all.slice_rows(n_txt, n_img)?);
        }

        // final modulated head on the image tokens only
        let fm = cond
            .matmul(mode.leaf(g, &self.final_ada_w)?)?
            .add_row(mode.leaf(g, &self.final_ada_b)?)?
            .reshape(vec![2, d])?;
        let ones = g.constant(Tensor::ones(vec![1, d]))?;
        let shift = fm.slice_rows(0, 1)?;
        let scale1p = fm.slice_rows(1, 1)?.add(ones)?;
        let img_final = all.slice_rows(n_txt, n_img)?;
        let velocity = img_final
            .layer_norm(cfg.norm_eps)?
            .mul_row(scale1p)?
            .add_row(shift)?
            .matmul(mode.leaf(g, &self.head_w)?)?
            .add_row(mode.leaf(g, &self.head_b)?)?
            .unpatchify(c, h, w, p)?;

        let aux_loss = match aux {
            Some(a) => a,
            None => g.constant(Tensor::scalar(T::zero()))?,
        };
        let decision_sig = decisions.iter().fold(0u64, |s, d| d.fold_signature(s));
        Ok(ForwardOut {
            velocity,
            aux_loss,
            taps,
            decisions,
            decision_sig,
        })
    }

    /// Inference convenience: fresh graph, frozen weights, plain tensors.
    pub fn eval_velocity(
        &self,
        x: &Tensor<T>,
        bundle: &ConditioningBundle<T>,
        t: f64,
    ) -> Result<Tensor<T>> {
        let g = Graph::new();
        let xv = g.constant(x.clone())?;
        let out = self.forward(&g, xv, bundle, t, Mode::Frozen)?;
        Ok(out.velocity.value())
    }
}
