//! Distribution-matching distillation pieces: the student's differentiable
//! few-step sampling chain and the DMD surrogate loss.

use crate::conditioning::ConditioningBundle;
use crate::dit::{Mode, SparseDiT};
use crate::error::Result;
use crate::flow::cfg_velocity;
use crate::graph::{Graph, Var};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Run the student's few-step Euler chain with every forward recorded on
/// the tape, so gradients reach student weights through the whole
/// trajectory. Uses plain conditional evaluation (no guidance): guidance is
/// what distillation bakes into the student.
pub fn student_chain<'g, T: Scalar>(
    g: &'g Graph<T>,
    student: &SparseDiT<T>,
    noise: Tensor<T>,
    bundle: &ConditioningBundle<T>,
    steps: usize,
    mode: Mode,
) -> Result<Var<'g, T>> {
    let dt = T::from_f64(1.0 / steps as f64);
    let mut x = g.constant(noise)?;
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let out = student.forward(g, x, bundle, t, mode)?;
        x = x.add(out.velocity.scale(dt)?)?;
    }
    Ok(x)
}

/// Both teacher and the fake model are evaluated through the same guided
/// combination, so tied weights give an exactly zero difference.
pub fn guided_velocity<T: Scalar>(
    model: &SparseDiT<T>,
    x: &Tensor<T>,
    cond: &ConditioningBundle<T>,
    null: &ConditioningBundle<T>,
    t: f64,
    g_scale: f64,
) -> Result<Tensor<T>> {
    let u_cond = model.eval_velocity(x, cond, t)?;
    if g_scale == 1.0 {
        return Ok(u_cond);
    }
    let u_uncond = model.eval_velocity(x, null, t)?;
    cfg_velocity(&u_cond, &u_uncond, g_scale)
}

pub struct DmdTerm<'g, T: Scalar> {
    /// surrogate whose gradient w.r.t. the student matches the DMD update
    pub loss: Var<'g, T>,
    /// ‖u_fake − u_teacher‖ mean magnitude, for logging
    pub diff_mean_abs: f64,
    pub t_prime: f64,
}

/// Build the DMD term for one student output `x1` already on the tape:
/// renoise it to a random interior t′, evaluate teacher and fake guided
/// velocities off-tape, and contract the (constant) difference against the
/// renoised point. d(loss)/d(x̂_t′) = diff/N, which the tape carries back
/// through the path map into the student chain.
pub fn dmd_term<'g, T: Scalar>(
    g: &'g Graph<T>,
    x1: Var<'g, T>,
    teacher: &SparseDiT<T>,
    fake: &SparseDiT<T>,
    cond: &ConditioningBundle<T>,
    null: &ConditioningBundle<T>,
    g_teacher: f64,
    rng: &mut Rng64,
) -> Result<DmdTerm<'g, T>> {
    let t_prime = rng.range(0.02, 0.98);
    let eps = Tensor::<T>::randn(x1.shape(), 1.0, rng);
    let xt = x1
        .scale(T::from_f64(t_prime))?
        .add(g.constant(eps.scale(T::from_f64(1.0 - t_prime)))?)?;
    let xt_val = xt.value();
    let u_teacher = guided_velocity(teacher, &xt_val, cond, null, t_prime, g_teacher)?;
    let u_fake = guided_velocity(fake, &xt_val, cond, null, t_prime, g_teacher)?;
    let diff = u_fake.sub(&u_teacher)?;
    let diff_mean_abs =
        diff.data().iter().map(|v| v.to_f64().abs()).sum::<f64>() / diff.numel() as f64;
    let loss = g.constant(diff)?.mul(xt)?.mean()?;
    Ok(DmdTerm {
        loss,
        diff_mean_abs,
        t_prime,
    })
}
