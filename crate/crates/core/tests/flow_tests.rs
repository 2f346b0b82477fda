//! Learned-flow behavior on toy distributions: training convergence, the
//! closed-form Gaussian velocity oracle, Monte-Carlo marginal statistics,
//! Euler step refinement, and class-conditional generation with guidance.

mod common;

use common::{mean_std, pooled_pixels, sample_masses, train_toy, w1_to_gaussian};
use flowmoe::flow::{euler_sample, ModelField, ToyDataset};
use flowmoe::rng::Rng64;
use flowmoe::tensor::Tensor;

const MU: f64 = 0.8;
const SIGMA: f64 = 0.3;

/// E[X1 − X0 | Xt = x] for X0 ~ N(0,1), X1 ~ N(mu, sigma²) independent,
/// Xt = (1−t)X0 + tX1 — joint Gaussianity gives the conditional mean in
/// closed form. This is the pointwise optimum of the velocity regression.
fn gaussian_oracle_velocity(x: f64, t: f64, mu: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let var = (1.0 - t) * (1.0 - t) + t * t * s2;
    mu + (t * s2 - (1.0 - t)) / var * (x - t * mu)
}

#[test]
fn gaussian_flow_learns_target_marginals() {
    let trained = train_toy(
        &ToyDataset::Gaussian {
            mean: MU,
            std: SIGMA,
        },
        16,
        8,
        1500,
        8,
        2e-3,
        60,
    );
    let (head, tail) = trained.outcome.loss_drop(50);
    println!("loss head {head:.4} tail {tail:.4}");
    assert!(
        tail < 0.5 * head,
        "training loss fell only {head:.4} -> {tail:.4}"
    );

    // the learned field should approximate the closed-form conditional
    // mean on in-distribution states
    let mut rng = Rng64::new(61);
    let bundle = trained.encoder.encode(1);
    let mut err_sum = 0.0;
    let mut err_n = 0usize;
    for &t in &[0.2, 0.5, 0.8] {
        for _ in 0..8 {
            let x0 = Tensor::<f64>::randn(vec![1, 8, 8], 1.0, &mut rng);
            let x1 = Tensor::<f64>::randn(vec![1, 8, 8], SIGMA, &mut rng).map(|v| v + MU);
            let xt = x0.zip(&x1, |a, b| (1.0 - t) * a + t * b).unwrap();
            let v = trained.model.eval_velocity(&xt, &bundle, t).unwrap();
            for (i, &x) in xt.data().iter().enumerate() {
                let oracle = gaussian_oracle_velocity(x, t, MU, SIGMA);
                err_sum += (v.data()[i] - oracle).abs();
                err_n += 1;
            }
        }
    }
    let mean_err = err_sum / err_n as f64;
    println!("mean |u - oracle| = {mean_err:.4}");
    assert!(
        mean_err < 0.25,
        "velocity field far from the Gaussian oracle: {mean_err}"
    );

    // Monte-Carlo marginals at 50 steps
    let pixels = pooled_pixels(
        &trained.model,
        &trained.encoder,
        1,
        128,
        50,
        1.0,
        vec![1, 8, 8],
        62,
    );
    let (mean, std) = mean_std(&pixels);
    println!("sampled mean {mean:.4} std {std:.4}");
    assert!((mean - MU).abs() < 0.1, "mean {mean}");
    assert!((std - SIGMA).abs() < 0.1, "std {std}");

    // step refinement: more integrator steps must not hurt the marginal
    // W1 distance beyond the 10% tolerance
    let few = pooled_pixels(
        &trained.model,
        &trained.encoder,
        1,
        128,
        4,
        1.0,
        vec![1, 8, 8],
        63,
    );
    let w1_few = w1_to_gaussian(&few, MU, SIGMA);
    let w1_many = w1_to_gaussian(&pixels, MU, SIGMA);
    println!("w1 4-step {w1_few:.4}, 50-step {w1_many:.4}");
    assert!(
        w1_many <= 1.1 * w1_few,
        "refinement worsened W1: {w1_few} -> {w1_many}"
    );

    // null-condition path: trained with p_drop > 0, the unconditional
    // field is finite and the g=0 sampler runs without a prompt
    let null = trained.encoder.null();
    let x = Tensor::<f64>::randn(vec![1, 8, 8], 1.0, &mut Rng64::new(64));
    let u = trained.model.eval_velocity(&x, &null, 0.5).unwrap();
    assert!(u.data().iter().all(|v| v.is_finite()));
    let mut field = ModelField::new(
        &trained.model,
        trained.encoder.encode(1),
        trained.encoder.null(),
        0.0,
    );
    let s = euler_sample(&mut field, &[1, 8, 8], 8, &mut Rng64::new(65)).unwrap();
    assert!(s.data().iter().all(|v| v.is_finite()));
}

#[test]
fn shapes_conditioning_separates_classes() {
    // prompt 1 = discs filled +0.8, prompt 2 = rectangles filled −0.8; the
    // total pixel mass discriminates the classes
    let trained = train_toy(&ToyDataset::Shapes, 16, 8, 1600, 8, 2e-3, 66);
    let per_class = 25;
    let g_scale = 2.0;
    let disc = sample_masses(
        &trained.model,
        &trained.encoder,
        1,
        per_class,
        30,
        g_scale,
        vec![1, 8, 8],
        67,
    );
    let rect = sample_masses(
        &trained.model,
        &trained.encoder,
        2,
        per_class,
        30,
        g_scale,
        vec![1, 8, 8],
        68,
    );
    let disc_pos = disc.iter().filter(|&&m| m > 0.0).count();
    let rect_neg = rect.iter().filter(|&&m| m < 0.0).count();
    println!(
        "disc mass>0: {disc_pos}/{per_class}, rect mass<0: {rect_neg}/{per_class}"
    );
    let acc = (disc_pos + rect_neg) as f64 / (2 * per_class) as f64;
    assert!(acc >= 0.8, "class separation only {acc}");
}
