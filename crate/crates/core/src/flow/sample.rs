//! Flow-matching training samples on the straight noise→data path.

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Timestep distribution for training.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TSampler {
    Uniform,
    /// t = sigmoid(mean + std·z), z ~ N(0,1): concentrates samples near
    /// mid-path where the regression problem is hardest.
    LogitNormal { mean: f64, std: f64 },
}

impl Default for TSampler {
    fn default() -> Self {
        TSampler::Uniform
    }
}

impl TSampler {
    pub fn draw(&self, rng: &mut Rng64) -> f64 {
        match self {
            TSampler::Uniform => rng.uniform(),
            TSampler::LogitNormal { mean, std } => {
                let z = rng.normal();
                let x = mean + std * z;
                1.0 / (1.0 + (-x).exp())
            }
        }
    }
}

impl std::str::FromStr for TSampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TSampler::Uniform),
            "logit-normal" => Ok(TSampler::LogitNormal {
                mean: 0.0,
                std: 1.0,
            }),
            other => Err(Error::config(format!(
                "unknown t-sampler `{other}` (expected uniform or logit-normal)"
            ))),
        }
    }
}

/// One point on the linear interpolation path between a fresh standard
/// normal draw `x0` and a data latent `x1`:
/// `xt = (1−t)·x0 + t·x1`, with constant velocity target `v = x1 − x0`.
pub struct FlowSample<T: Scalar> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: f64,
    pub xt: Tensor<T>,
    pub v_target: Tensor<T>,
}

pub fn make_flow_sample<T: Scalar>(
    x1: Tensor<T>,
    rng: &mut Rng64,
    t_sampler: TSampler,
) -> FlowSample<T> {
    let x0 = Tensor::randn(x1.shape().to_vec(), 1.0, rng);
    let t = t_sampler.draw(rng);
    let tt = T::from_f64(t);
    let omt = T::from_f64(1.0 - t);
    let xt = x0.zip(&x1, |a, b| omt * a + tt * b).expect("same shape");
    let v_target = x1.zip(&x0, |b, a| b - a).expect("same shape");
    FlowSample {
        x0,
        x1,
        t,
        xt,
        v_target,
    }
}

/// Mean squared error between predicted and target velocity.
pub fn fm_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "velocity shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).to_f64();
            d * d
        })
        .sum();
    Ok(sum / n)
}
