//! Central finite-difference gradient verification.
//!
//! The checker owns no model knowledge: callers hand it the named parameter
//! list and a closure that (re)evaluates the loss from the current parameter
//! values. The closure also reports a "decision signature" — a hash of any
//! discrete choices made during the forward pass (e.g. expert routing). If a
//! perturbation flips a decision, the loss is not differentiable across that
//! point and the element is skipped rather than reported as a failure.

use crate::error::Result;
use crate::rng::Rng64;
use crate::scalar::{Precision, Scalar};
use crate::tensor::SharedTensor;

#[derive(Debug, Clone)]
pub struct FdConfig {
    /// relative tolerance in |analytic − fd| ≤ atol + rtol·max(|analytic|,|fd|)
    pub rtol: f64,
    pub atol: f64,
    /// base step; the per-element step is scaled by max(1, |x|)
    pub step: f64,
    /// gradient magnitude above which the difference quotient outresolves
    /// rounding noise; `max_rel_err` is tracked only there
    pub rel_floor: f64,
    /// how many elements to probe per tensor; None = every element
    pub samples_per_tensor: Option<usize>,
}

impl FdConfig {
    pub fn for_precision(p: Precision) -> Self {
        // atol sits a safe factor above the observed difference-quotient
        // noise (loss rounding / 2h) for deep-graph losses of magnitude ~10
        match p {
            Precision::F32 => FdConfig {
                rtol: 1e-3,
                atol: 5e-4,
                step: 1e-2,
                rel_floor: 0.5,
                samples_per_tensor: None,
            },
            Precision::F64 => FdConfig {
                rtol: 1e-5,
                atol: 1e-9,
                step: 1e-5,
                rel_floor: 1e-3,
                samples_per_tensor: None,
            },
        }
    }
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// elements skipped because the perturbation changed a discrete decision
    pub skipped: usize,
    pub max_abs_diff: f64,
    /// max relative error over elements with a meaningfully sized gradient
    pub max_rel_err: f64,
    pub worst: String,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `eval(true)` must zero nothing itself: it rebuilds the computation from
/// the current shared parameter values, runs backward, and leaves gradients
/// accumulated on the parameters. `eval(false)` computes the loss only.
/// Both return (loss, decision_signature).
pub fn check_gradients<T: Scalar>(
    params: &[(String, SharedTensor<T>)],
    eval: &mut dyn FnMut(bool) -> Result<(f64, u64)>,
    cfg: &FdConfig,
    rng: &mut Rng64,
) -> Result<FdReport> {
    for (_, p) in params {
        p.borrow_mut().zero_grad();
    }
    let (_, sig0) = eval(true)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| {
            let t = p.borrow();
            match &t.grad {
                Some(g) => g.iter().map(|v| v.to_f64()).collect(),
                None => vec![0.0; t.numel()],
            }
        })
        .collect();

    let mut report = FdReport::default();
    for (pi, (name, p)) in params.iter().enumerate() {
        let n = p.borrow().numel();
        let indices: Vec<usize> = match cfg.samples_per_tensor {
            Some(s) if s < n => {
                let mut picked = Vec::with_capacity(s);
                while picked.len() < s {
                    let i = rng.below(n);
                    if !picked.contains(&i) {
                        picked.push(i);
                    }
                }
                picked
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let x0 = p.borrow().data()[idx].to_f64();
            let h = cfg.step * x0.abs().max(1.0);
            let set = |v: f64| {
                p.borrow_mut().data_mut()[idx] = T::from_f64(v);
            };
            set(x0 + h);
            let (lp, sig_p) = eval(false)?;
            set(x0 - h);
            let (lm, sig_m) = eval(false)?;
            set(x0);
            if sig_p != sig0 || sig_m != sig0 {
                report.skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[pi][idx];
            let diff = (a - fd).abs();
            let mag = a.abs().max(fd.abs());
            report.checked += 1;
            if diff > report.max_abs_diff {
                report.max_abs_diff = diff;
            }
            if mag > cfg.rel_floor {
                let rel = diff / mag;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = format!("{name}[{idx}]: analytic={a:.6e} fd={fd:.6e}");
                }
            }
            if diff > cfg.atol + cfg.rtol * mag {
                report.failures.push(format!(
                    "{name}[{idx}]: analytic={a:.6e} fd={fd:.6e} diff={diff:.3e}"
                ));
            }
        }
    }
    Ok(report)
}
