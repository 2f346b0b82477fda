//! Adversarial head over frozen-teacher features.
//!
//! The discriminator never sees pixels directly: samples are pushed through
//! the frozen teacher backbone at a fixed small timestep with null
//! conditioning, the image-token features at the configured tap blocks are
//! mean-pooled and concatenated, and a small MLP with a zero-initialized
//! final layer maps them to one logit. Zero init makes the initial
//! discriminator exactly uninformative: D = 0.5, both GAN losses = ln 2.

use crate::conditioning::ConditioningBundle;
use crate::dit::{Mode, SparseDiT};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::{shared, SharedTensor, Tensor};

pub struct Discriminator<T: Scalar> {
    pub w1: SharedTensor<T>,
    pub b1: SharedTensor<T>,
    pub w2: SharedTensor<T>,
    pub b2: SharedTensor<T>,
    pub n_taps: usize,
    pub d: usize,
    pub hidden: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(n_taps: usize, d: usize, hidden: usize, rng: &mut Rng64) -> Result<Self> {
        if n_taps == 0 || d == 0 || hidden == 0 {
            return Err(Error::config("discriminator dimensions must be positive"));
        }
        let din = n_taps * d;
        Ok(Discriminator {
            w1: shared(Tensor::randn(
                vec![din, hidden],
                1.0 / (din as f64).sqrt(),
                rng,
            )),
            b1: shared(Tensor::zeros(vec![1, hidden])),
            // zero-init head: logit ≡ 0 before training
            w2: shared(Tensor::zeros(vec![hidden, 1])),
            b2: shared(Tensor::zeros(vec![1, 1])),
            n_taps,
            d,
            hidden,
        })
    }

    pub fn named_params(&self) -> Vec<(String, SharedTensor<T>)> {
        vec![
            ("disc.w1".to_string(), self.w1.clone()),
            ("disc.b1".to_string(), self.b1.clone()),
            ("disc.w2".to_string(), self.w2.clone()),
            ("disc.b2".to_string(), self.b2.clone()),
        ]
    }

    /// Scalar logit [1,1] from per-tap token features (each [n_i, d]).
    pub fn logit<'g>(
        &self,
        g: &'g Graph<T>,
        taps: &[Var<'g, T>],
        mode: Mode,
    ) -> Result<Var<'g, T>> {
        if taps.len() != self.n_taps {
            return Err(Error::shape(format!(
                "discriminator built for {} taps, got {}",
                self.n_taps,
                taps.len()
            )));
        }
        // mean-pool each tap over tokens, then concatenate along features
        let mut cols: Option<Var<'g, T>> = None;
        for tap in taps {
            let n = tap.shape()[0];
            if tap.shape()[1] != self.d {
                return Err(Error::shape(format!(
                    "tap width {} != discriminator width {}",
                    tap.shape()[1],
                    self.d
                )));
            }
            let pool_w = g.constant(Tensor::full(vec![1, n], T::from_f64(1.0 / n as f64)))?;
            let pooled = pool_w.matmul(*tap)?.reshape(vec![self.d, 1])?;
            cols = Some(match cols {
                Some(acc) => acc.concat_rows(pooled)?,
                None => pooled,
            });
        }
        let x = cols.unwrap().reshape(vec![1, self.n_taps * self.d])?;
        x.matmul(mode.leaf(g, &self.w1)?)?
            .add_row(mode.leaf(g, &self.b1)?)?
            .silu()?
            .matmul(mode.leaf(g, &self.w2)?)?
            .add_row(mode.leaf(g, &self.b2)?)
    }
}

/// Frozen-teacher tap features for a latent already on the graph. The
/// teacher enters as constants, so gradients flow through the activations
/// to `x` but never into teacher weights.
pub fn teacher_tap_features<'g, T: Scalar>(
    g: &'g Graph<T>,
    teacher: &SparseDiT<T>,
    x: Var<'g, T>,
    null_bundle: &ConditioningBundle<T>,
    tap_indices: &[usize],
    t_feat: f64,
) -> Result<Vec<Var<'g, T>>> {
    let out = teacher.forward(g, x, null_bundle, t_feat, Mode::Frozen)?;
    let mut taps = Vec::with_capacity(tap_indices.len());
    for &i in tap_indices {
        let tap = out.taps.get(i).ok_or_else(|| {
            Error::config(format!(
                "feature tap {i} out of range (model has {} blocks)",
                out.taps.len()
            ))
        })?;
        taps.push(*tap);
    }
    Ok(taps)
}

/// Non-saturating generator loss: softplus(−logit), i.e. −log D(fake).
pub fn gen_loss<'g, T: Scalar>(logit: Var<'g, T>) -> Result<Var<'g, T>> {
    logit.neg()?.softplus()?.mean()
}

/// Logistic discriminator loss, averaged over the real/fake pair:
/// ½·softplus(−logit_real) + ½·softplus(logit_fake).
pub fn disc_loss<'g, T: Scalar>(
    logit_real: Var<'g, T>,
    logit_fake: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let half = T::from_f64(0.5);
    let lr = logit_real.neg()?.softplus()?.mean()?.scale(half)?;
    let lf = logit_fake.softplus()?.mean()?.scale(half)?;
    lr.add(lf)
}
