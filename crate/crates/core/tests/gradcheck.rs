//! End-to-end finite-difference verification of the full training loss:
//! model forward (patch embed, dual + single blocks, MoE routing, adaLN,
//! head) composed with the velocity regression loss and the load-balance
//! term, checked element by element against central differences.

mod common;

use common::{randomize_model, tiny_dit_cfg, tiny_encoder_cfg};
use flowmoe::conditioning::EncoderStub;
use flowmoe::dit::{Mode, SparseDiT};
use flowmoe::error::Result;
use flowmoe::fdcheck::{check_gradients, FdConfig, FdReport};
use flowmoe::graph::{mse, Graph};
use flowmoe::rng::Rng64;
use flowmoe::scalar::Scalar;
use flowmoe::tensor::Tensor;

fn full_model_report<T: Scalar>(top_k: usize, scale: f64, seed: u64) -> Result<FdReport> {
    let mut cfg = tiny_dit_cfg(16, 4);
    cfg.top_k = top_k;
    let model = SparseDiT::<T>::new(cfg, seed)?;
    randomize_model(&model, scale, seed ^ 0x9999);
    let encoder = EncoderStub::<T>::new(tiny_encoder_cfg(16))?;
    let bundle = encoder.encode(3);

    let mut rng = Rng64::new(seed ^ 0x1234);
    let xt = Tensor::<T>::randn(vec![1, 4, 4], 1.0, &mut rng);
    let target = Tensor::<T>::randn(vec![1, 4, 4], 1.0, &mut rng);
    let t = 0.37;

    let params = model.named_params();
    let mut eval = |with_grad: bool| -> Result<(f64, u64)> {
        let g = Graph::new();
        let x = g.constant(xt.clone())?;
        let mode = if with_grad { Mode::Train } else { Mode::Frozen };
        let out = model.forward(&g, x, &bundle, t, mode)?;
        let fm = mse(out.velocity, g.constant(target.clone())?)?;
        let total = fm.add(out.aux_loss)?;
        let loss = total.item().to_f64();
        if with_grad {
            g.backward(total)?;
        }
        Ok((loss, out.decision_sig))
    };
    let fd_cfg = FdConfig::for_precision(T::PRECISION);
    check_gradients(&params, &mut eval, &fd_cfg, &mut Rng64::new(seed))
}

#[test]
fn every_parameter_gradient_matches_f64() {
    // top_k = n_experts: the routed set is always both experts, so no
    // perturbation can flip a discrete decision and every element counts
    let report = full_model_report::<f64>(2, 0.3, 11).unwrap();
    assert!(
        report.pass(),
        "worst {} / {} failures, e.g. {:?}",
        report.worst,
        report.failures.len(),
        report.failures.first()
    );
    assert_eq!(report.skipped, 0);
    assert!(report.checked > 20_000, "checked {}", report.checked);
    assert!(
        report.max_rel_err < 1e-5,
        "max rel err {}",
        report.max_rel_err
    );
}

#[test]
fn every_parameter_gradient_matches_f32() {
    // smaller weight scale: third derivatives through softmax/silu set the
    // finite-difference truncation error, which 32-bit noise cannot average
    // away; gentler activations keep the quotient trustworthy
    let report = full_model_report::<f32>(2, 0.15, 12).unwrap();
    assert!(
        report.pass(),
        "worst {} / {} failures, e.g. {:?}",
        report.worst,
        report.failures.len(),
        report.failures.first()
    );
    assert!(
        report.max_rel_err < 1e-3,
        "max rel err {}",
        report.max_rel_err
    );
}

#[test]
fn sparse_routing_gradients_match_with_decision_skips() {
    // top_k = 1 of 2: the gather/scatter dispatch path carries gradients,
    // and probes that flip the routed expert are skipped, not failed
    let report = full_model_report::<f64>(1, 0.3, 13).unwrap();
    assert!(
        report.pass(),
        "worst {} / {} failures, e.g. {:?}",
        report.worst,
        report.failures.len(),
        report.failures.first()
    );
    assert!(report.checked > 10_000, "checked {}", report.checked);
}
