//! Left-endpoint Euler integration of a learned velocity field, with
//! classifier-free guidance.

use crate::conditioning::ConditioningBundle;
use crate::dit::SparseDiT;
use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guided velocity: `u_uncond + g·(u_cond − u_uncond)`. The endpoints
/// g=1 → u_cond and g=0 → u_uncond are returned exactly.
pub fn cfg_velocity<T: Scalar>(
    u_cond: &Tensor<T>,
    u_uncond: &Tensor<T>,
    g: f64,
) -> Result<Tensor<T>> {
    if u_cond.shape() != u_uncond.shape() {
        return Err(Error::shape(format!(
            "guidance branch shapes differ: {:?} vs {:?}",
            u_cond.shape(),
            u_uncond.shape()
        )));
    }
    if g < 0.0 {
        return Err(Error::usage(format!("guidance scale must be >= 0, got {g}")));
    }
    if g == 1.0 {
        return Ok(u_cond.clone());
    }
    if g == 0.0 {
        return Ok(u_uncond.clone());
    }
    let gt = T::from_f64(g);
    u_cond.zip(u_uncond, |c, u| u + gt * (c - u))
}

/// A velocity field the sampler can query; tracks how many underlying
/// model evaluations it made.
pub trait VelocityField<T: Scalar> {
    fn velocity(&mut self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>>;
    fn evals(&self) -> u64;
}

/// A trained model queried under classifier-free guidance. With g=1 the
/// null branch is skipped entirely (one model evaluation per step).
pub struct ModelField<'a, T: Scalar> {
    model: &'a SparseDiT<T>,
    cond: ConditioningBundle<T>,
    null: ConditioningBundle<T>,
    g: f64,
    evals: u64,
}

impl<'a, T: Scalar> ModelField<'a, T> {
    pub fn new(
        model: &'a SparseDiT<T>,
        cond: ConditioningBundle<T>,
        null: ConditioningBundle<T>,
        g: f64,
    ) -> Self {
        ModelField {
            model,
            cond,
            null,
            g,
            evals: 0,
        }
    }
}

impl<T: Scalar> VelocityField<T> for ModelField<'_, T> {
    fn velocity(&mut self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        let u_cond = self.model.eval_velocity(x, &self.cond, t)?;
        self.evals += 1;
        if self.g == 1.0 {
            return Ok(u_cond);
        }
        let u_uncond = self.model.eval_velocity(x, &self.null, t)?;
        self.evals += 1;
        cfg_velocity(&u_cond, &u_uncond, self.g)
    }
    fn evals(&self) -> u64 {
        self.evals
    }
}

/// Integrate `dx/dt = field(x, t)` from the given start with `steps`
/// uniform left-endpoint Euler steps over [0,1]. After every step the hook
/// may inspect or rewrite the state (used to clamp known-clean regions).
pub fn euler_integrate<T: Scalar>(
    field: &mut dyn VelocityField<T>,
    start: Tensor<T>,
    steps: usize,
    hook: &mut dyn FnMut(usize, &mut Tensor<T>) -> Result<()>,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::usage("euler integration needs at least one step"));
    }
    let dt = T::from_f64(1.0 / steps as f64);
    let mut x = start;
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let v = field.velocity(&x, t)?;
        x = x.zip(&v, |xi, vi| xi + dt * vi)?;
        x.check_finite("euler_step")?;
        hook(i, &mut x)?;
    }
    Ok(x)
}

/// Draw a standard-normal start and integrate it to a data sample.
pub fn euler_sample<T: Scalar>(
    field: &mut dyn VelocityField<T>,
    shape: &[usize],
    steps: usize,
    rng: &mut Rng64,
) -> Result<Tensor<T>> {
    let start = Tensor::randn(shape.to_vec(), 1.0, rng);
    euler_integrate(field, start, steps, &mut |_, _| Ok(()))
}
