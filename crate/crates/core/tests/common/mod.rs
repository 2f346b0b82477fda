//! Helpers shared across the integration suites: tiny configurations, model
//! randomization, Monte-Carlo sampling utilities, and a Wasserstein-1
//! estimator against an analytic Gaussian.

#![allow(dead_code)]

use flowmoe::conditioning::{EncoderStub, EncoderStubConfig};
use flowmoe::dit::{DiTConfig, SparseDiT};
use flowmoe::flow::{euler_sample, train_loop, ModelField, ToyDataset, TrainOptions, TrainOutcome, TrainSchedule};
use flowmoe::rng::Rng64;
use flowmoe::scalar::Scalar;

/// Small backbone with both block kinds, two experts, and the shared
/// expert on — every architectural path stays exercised. top_k = 2 keeps
/// the routed set dense so finite-difference probes never flip a routing
/// decision.
pub fn tiny_dit_cfg(d: usize, hw: usize) -> DiTConfig {
    DiTConfig {
        d,
        n_heads: 2,
        l_dual: 1,
        l_single: 1,
        patch: 2,
        in_channels: 1,
        height: hw,
        width: hw,
        n_experts: 2,
        top_k: 2,
        shared_expert: true,
        expert_hidden: 2 * d,
        load_balance: 0.01,
        norm_eps: 1e-6,
    }
}

pub fn tiny_encoder_cfg(d: usize) -> EncoderStubConfig {
    EncoderStubConfig {
        d_seq: 8,
        d_llm: 8,
        d,
        m_seq: 2,
        m_llm: 2,
        layers: 1,
        seed: 7,
    }
}

/// Overwrite every parameter with fresh noise so all gradients are live
/// (the zero-initialized head otherwise blocks gradient flow upstream).
pub fn randomize_model<T: Scalar>(model: &SparseDiT<T>, scale: f64, seed: u64) {
    let mut rng = Rng64::new(seed);
    for (_, p) in model.named_params() {
        for v in p.borrow_mut().data_mut().iter_mut() {
            *v = T::from_f64(scale * rng.normal());
        }
    }
}

/// Inverse standard-normal CDF via the standard rational approximation
/// (relative error below 1e-8 — far under the tolerances used here).
pub fn inv_norm_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -inv_norm_cdf(1.0 - p)
    }
}

/// Wasserstein-1 distance between an empirical sample and N(mu, sigma²),
/// computed by matching sorted samples against analytic quantiles.
pub fn w1_to_gaussian(samples: &[f64], mu: f64, sigma: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let q = mu + sigma * inv_norm_cdf((i as f64 + 0.5) / n as f64);
            (x - q).abs()
        })
        .sum::<f64>()
        / n as f64
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Draw `count` latents from the model and pool every pixel into one flat
/// vector — the per-pixel marginal the Gaussian toy tasks make uniform
/// across positions.
pub fn pooled_pixels<T: Scalar>(
    model: &SparseDiT<T>,
    encoder: &EncoderStub<T>,
    prompt_id: u64,
    count: usize,
    steps: usize,
    g_scale: f64,
    shape: Vec<usize>,
    seed: u64,
) -> Vec<f64> {
    let mut rng = Rng64::new(seed);
    let mut out = Vec::new();
    for _ in 0..count {
        let mut field = ModelField::new(model, encoder.encode(prompt_id), encoder.null(), g_scale);
        let x = euler_sample(&mut field, &shape, steps, &mut rng).unwrap();
        out.extend(x.data().iter().map(|v| v.to_f64()));
    }
    out
}

/// Per-sample sums (total pixel mass), used as the class discriminant on
/// the shapes dataset.
pub fn sample_masses<T: Scalar>(
    model: &SparseDiT<T>,
    encoder: &EncoderStub<T>,
    prompt_id: u64,
    count: usize,
    steps: usize,
    g_scale: f64,
    shape: Vec<usize>,
    seed: u64,
) -> Vec<f64> {
    let mut rng = Rng64::new(seed);
    let mut out = Vec::new();
    for _ in 0..count {
        let mut field = ModelField::new(model, encoder.encode(prompt_id), encoder.null(), g_scale);
        let x = euler_sample(&mut field, &shape, steps, &mut rng).unwrap();
        out.push(x.data().iter().map(|v| v.to_f64()).sum());
    }
    out
}

pub struct TrainedToy {
    pub model: SparseDiT<f64>,
    pub encoder: EncoderStub<f64>,
    pub outcome: TrainOutcome,
}

/// Train the tiny model on a toy dataset from scratch; the workhorse for
/// the learned-flow suites.
pub fn train_toy(
    dataset: &ToyDataset,
    d: usize,
    hw: usize,
    steps: u64,
    batch: usize,
    lr: f64,
    seed: u64,
) -> TrainedToy {
    let model = SparseDiT::<f64>::new(tiny_dit_cfg(d, hw), seed).unwrap();
    let encoder = EncoderStub::new(tiny_encoder_cfg(d)).unwrap();
    let schedule = TrainSchedule {
        stages: vec![flowmoe::flow::StageConfig {
            resolution: hw,
            steps,
            batch_size: batch,
        }],
        lr,
        warmup_steps: 50.min(steps / 10),
    };
    let outcome = train_loop(
        &model,
        &encoder,
        dataset,
        &schedule,
        &TrainOptions::default(),
        &mut Rng64::new(seed ^ 0xABCD),
    )
    .unwrap();
    TrainedToy {
        model,
        encoder,
        outcome,
    }
}
