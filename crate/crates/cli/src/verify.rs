//! Self-verification: fast oracle and gradient checks over the numerical
//! core, runnable on any checkout. Each check prints one stable log line;
//! the command exits nonzero if any check fails.

use std::collections::BTreeMap;

use flowmoe::conditioning::{EncoderStub, EncoderStubConfig};
use flowmoe::datapipe::{
    brute_force_groups, dedup_run, extract_features, group_pairs, DedupOptions, FeatureExtractor,
    ImageRecord, FEATURE_DIM,
};
use flowmoe::dit::{DiTConfig, Mode, MoeLayer, SparseDiT};
use flowmoe::error::Result;
use flowmoe::fdcheck::{check_gradients, FdConfig};
use flowmoe::flow::{euler_integrate, make_flow_sample, TSampler, VelocityField};
use flowmoe::graph::{mse, Graph};
use flowmoe::rng::Rng64;
use flowmoe::scalar::Precision;
use flowmoe::tensor::Tensor;

fn tiny_cfg(d: usize, hw: usize) -> DiTConfig {
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

fn enc_cfg(d: usize) -> EncoderStubConfig {
    EncoderStubConfig {
        d_seq: d,
        d_llm: d,
        d,
        m_seq: 2,
        m_llm: 2,
        layers: 1,
        seed: 7,
    }
}

fn check_flow_paths() -> (bool, String) {
    let mut rng = Rng64::new(11);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let x1 = Tensor::<f64>::randn(vec![1, 4, 4], 0.7, &mut rng);
        let fs = make_flow_sample(x1, &mut rng, TSampler::Uniform);
        for i in 0..fs.xt.numel() {
            let xt = (1.0 - fs.t) * fs.x0.data()[i] + fs.t * fs.x1.data()[i];
            let v = fs.x1.data()[i] - fs.x0.data()[i];
            worst = worst
                .max((xt - fs.xt.data()[i]).abs())
                .max((v - fs.v_target.data()[i]).abs());
        }
    }
    (worst == 0.0, format!("max_dev={worst:e}"))
}

struct ConstField {
    v: Tensor<f64>,
    evals: u64,
}

impl VelocityField<f64> for ConstField {
    fn velocity(&mut self, _x: &Tensor<f64>, _t: f64) -> Result<Tensor<f64>> {
        self.evals += 1;
        Ok(self.v.clone())
    }
    fn evals(&self) -> u64 {
        self.evals
    }
}

fn check_euler_oracle() -> (bool, String) {
    let mut rng = Rng64::new(12);
    let mut worst = 0.0f64;
    for &steps in &[1usize, 7, 50] {
        let x0 = Tensor::<f64>::randn(vec![1, 4, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(vec![1, 4, 4], 1.0, &mut rng);
        let mut field = ConstField {
            v: v.clone(),
            evals: 0,
        };
        let end =
            euler_integrate(&mut field, x0.clone(), steps, &mut |_, _| Ok(())).expect("integrates");
        for i in 0..end.numel() {
            let expect = x0.data()[i] + v.data()[i];
            worst = worst.max((end.data()[i] - expect).abs());
        }
    }
    (worst < 1e-6, format!("max_err={worst:e}"))
}

fn check_routing() -> (bool, String) {
    let mut rng = Rng64::new(13);
    let layer = MoeLayer::<f64>::new(16, 32, 4, 2, true, &mut rng).expect("layer builds");
    let g = Graph::new();
    let x = g
        .constant(Tensor::randn(vec![500, 16], 1.0, &mut rng))
        .expect("constant");
    let (_, _, decision) = layer.forward(&g, x, Mode::Frozen, 0.01).expect("forward");
    let mut ok = true;
    let mut detail = String::from("tokens=500 top_k=2");
    for (idx, gates) in decision.indices.iter().zip(&decision.gates) {
        let mut uniq = idx.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let sum: f64 = gates.iter().sum();
        if idx.len() != 2 || uniq.len() != 2 || (sum - 1.0).abs() > 1e-6 || gates.iter().any(|&p| p < 0.0)
        {
            ok = false;
            detail = format!("violation idx={idx:?} gates={gates:?}");
            break;
        }
    }
    (ok, detail)
}

fn check_init_identity() -> (bool, String) {
    let model = SparseDiT::<f64>::new(tiny_cfg(16, 4), 14).expect("model builds");
    let encoder = EncoderStub::<f64>::new(enc_cfg(16)).expect("encoder builds");
    let bundle = encoder.encode(3);
    let mut rng = Rng64::new(15);
    for _ in 0..10 {
        let x = Tensor::<f64>::randn(vec![1, 4, 4], 1.0, &mut rng);
        let v = model.eval_velocity(&x, &bundle, 0.4).expect("eval");
        if v.data().iter().any(|&o| o != 0.0) {
            return (false, "nonzero output at init".to_string());
        }
    }
    (true, "inputs=10 all_zero=true".to_string())
}

fn check_gradients_small() -> (bool, String) {
    let model = SparseDiT::<f64>::new(tiny_cfg(8, 4), 16).expect("model builds");
    let mut rng = Rng64::new(17);
    let params = model.named_params();
    for (_, p) in &params {
        let mut t = p.borrow_mut();
        for v in t.data_mut() {
            *v = 0.3 * rng.normal();
        }
    }
    let encoder = EncoderStub::<f64>::new(enc_cfg(8)).expect("encoder builds");
    let bundle = encoder.encode(3);
    let xt = Tensor::<f64>::randn(vec![1, 4, 4], 1.0, &mut rng);
    let target = Tensor::<f64>::randn(vec![1, 4, 4], 1.0, &mut rng);
    let mut eval = |with_grad: bool| -> Result<(f64, u64)> {
        let g = Graph::new();
        let x = g.constant(xt.clone())?;
        let out = model.forward(
            &g,
            x,
            &bundle,
            0.37,
            if with_grad { Mode::Train } else { Mode::Frozen },
        )?;
        let tgt = g.constant(target.clone())?;
        let loss = mse(out.velocity, tgt)?.add(out.aux_loss)?;
        if with_grad {
            g.backward(loss)?;
        }
        Ok((loss.item(), out.decision_sig))
    };
    let cfg = FdConfig {
        samples_per_tensor: Some(40),
        ..FdConfig::for_precision(Precision::F64)
    };
    let report = check_gradients(&params, &mut eval, &cfg, &mut rng).expect("fd check runs");
    (
        report.pass(),
        format!(
            "checked={} skipped={} max_rel_err={:.2e}",
            report.checked, report.skipped, report.max_rel_err
        ),
    )
}

fn check_dedup_oracle() -> (bool, String) {
    let mut rng = Rng64::new(18);
    let mut map = BTreeMap::new();
    let mut records: Vec<ImageRecord<f64>> = Vec::new();
    let mut id = 0u64;
    for _ in 0..15 {
        let base: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.normal()).collect();
        let norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
        let noise = 0.1 / (FEATURE_DIM as f64).sqrt();
        for _ in 0..2 {
            let member: Vec<f64> = base.iter().map(|&b| b / norm + noise * rng.normal()).collect();
            map.insert(id, member);
            records.push(ImageRecord::new(id, Tensor::zeros(vec![1, 1, 1])));
            id += 1;
        }
    }
    for _ in 0..90 {
        map.insert(id, (0..FEATURE_DIM).map(|_| rng.normal()).collect());
        records.push(ImageRecord::new(id, Tensor::zeros(vec![1, 1, 1])));
        id += 1;
    }
    let extractor = FeatureExtractor::External(map);
    let opts = DedupOptions {
        k: 1,
        theta: 0.95,
        ..Default::default()
    };
    let (index, _) = dedup_run(&records, &extractor, &opts).expect("dedup runs");
    let mut ids = Vec::new();
    let mut feats = Vec::new();
    for r in &records {
        ids.push(r.id);
        feats.push(extract_features(r.id, &r.pixels, &extractor).expect("features").v);
    }
    let bf = brute_force_groups(&ids, &feats, 0.95).expect("brute force runs");
    let ok = index.groups == bf;
    (
        ok,
        format!(
            "groups={} pairs={} brute_force_match={ok}",
            index.groups.len(),
            group_pairs(&index.groups).len()
        ),
    )
}

/// Run every check; returns true iff all pass.
pub fn run_all() -> bool {
    let checks: Vec<(&str, fn() -> (bool, String))> = vec![
        ("flow-path-identities", check_flow_paths),
        ("euler-constant-field", check_euler_oracle),
        ("moe-routing", check_routing),
        ("init-identity", check_init_identity),
        ("gradient-finite-difference", check_gradients_small),
        ("dedup-brute-force-oracle", check_dedup_oracle),
    ];
    let mut all = true;
    for (name, f) in checks {
        let (ok, detail) = f();
        println!(
            "check={name} status={} {detail}",
            if ok { "pass" } else { "fail" }
        );
        all &= ok;
    }
    println!("event=verify status={}", if all { "pass" } else { "fail" });
    all
}
