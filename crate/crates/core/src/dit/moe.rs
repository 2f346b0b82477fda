//! Sparse mixture-of-experts feed-forward with a top-k router and an
//! optional unconditional shared expert.
//!
//! Routing is truly sparse: only selected experts run, so compute follows
//! top_k while parameters follow the expert count. The router softmax and
//! gate renormalization stay on the autodiff tape; the top-k index choice is
//! the one discrete (non-differentiable) decision and is exposed both in the
//! returned `RouterDecision` and in a hashable signature.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{swiglu, Graph, Var};
use crate::rng::{hash_words, Rng64};
use crate::scalar::Scalar;
use crate::tensor::{shared, SharedTensor, Tensor};

use super::model::Mode;

pub struct Expert<T: Scalar> {
    pub w_gate: SharedTensor<T>,
    pub w_up: SharedTensor<T>,
    pub w_down: SharedTensor<T>,
}

impl<T: Scalar> Expert<T> {
    pub fn new(d: usize, hidden: usize, rng: &mut Rng64) -> Self {
        let in_std = 1.0 / (d as f64).sqrt();
        let out_std = 1.0 / (hidden as f64).sqrt();
        Expert {
            w_gate: shared(Tensor::randn(vec![d, hidden], in_std, rng)),
            w_up: shared(Tensor::randn(vec![d, hidden], in_std, rng)),
            w_down: shared(Tensor::randn(vec![hidden, d], out_std, rng)),
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, SharedTensor<T>)>) {
        out.push((format!("{prefix}.w_gate"), self.w_gate.clone()));
        out.push((format!("{prefix}.w_up"), self.w_up.clone()));
        out.push((format!("{prefix}.w_down"), self.w_down.clone()));
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        x: Var<'g, T>,
        mode: Mode,
    ) -> Result<Var<'g, T>> {
        swiglu(
            x,
            mode.leaf(g, &self.w_gate)?,
            mode.leaf(g, &self.w_up)?,
            mode.leaf(g, &self.w_down)?,
        )
    }
}

/// Per-token routing outcome for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct RouterDecision {
    /// selected expert indices per token, in descending-probability order
    pub indices: Vec<Vec<usize>>,
    /// renormalized gates aligned with `indices`
    pub gates: Vec<Vec<f64>>,
    /// full pre-selection softmax, flattened [n · n_experts]
    pub probs: Vec<f64>,
    pub n_experts: usize,
}

impl RouterDecision {
    /// Mix the discrete choices into a running signature hash.
    pub fn fold_signature(&self, sig: u64) -> u64 {
        let mut s = sig;
        for (t, idx) in self.indices.iter().enumerate() {
            for &e in idx {
                s = hash_words(&[s, t as u64, e as u64]);
            }
        }
        s
    }
}

pub struct MoeLayer<T: Scalar> {
    pub router: SharedTensor<T>,
    pub experts: Vec<Expert<T>>,
    pub shared_expert: Option<Expert<T>>,
    pub top_k: usize,
}

impl<T: Scalar> MoeLayer<T> {
    pub fn new(
        d: usize,
        hidden: usize,
        n_experts: usize,
        top_k: usize,
        shared_expert: bool,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if top_k == 0 || top_k > n_experts {
            return Err(Error::config(format!(
                "top_k {top_k} outside 1..={n_experts}"
            )));
        }
        Ok(MoeLayer {
            router: shared(Tensor::randn(
                vec![d, n_experts],
                1.0 / (d as f64).sqrt(),
                rng,
            )),
            experts: (0..n_experts).map(|_| Expert::new(d, hidden, rng)).collect(),
            shared_expert: shared_expert.then(|| Expert::new(d, hidden, rng)),
            top_k,
        })
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, SharedTensor<T>)>) {
        out.push((format!("{prefix}.router"), self.router.clone()));
        for (i, e) in self.experts.iter().enumerate() {
            e.named(&format!("{prefix}.expert{i}"), out);
        }
        if let Some(s) = &self.shared_expert {
            s.named(&format!("{prefix}.shared"), out);
        }
    }

    /// Top-k selection by probability, ties broken toward the lower index.
    fn select(&self, probs_row: &[f64]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..probs_row.len()).collect();
        order.sort_by(|&a, &b| {
            probs_row[b]
                .partial_cmp(&probs_row[a])
                .expect("finite probs")
                .then(a.cmp(&b))
        });
        order.truncate(self.top_k);
        order
    }

    /// Returns (output tokens, β-weighted load-balance loss, decision).
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        x: Var<'g, T>,
        mode: Mode,
        beta: f64,
    ) -> Result<(Var<'g, T>, Var<'g, T>, RouterDecision)> {
        let shape = x.shape();
        let (n, _d) = (shape[0], shape[1]);
        let e_cnt = self.experts.len();
        let k = self.top_k;

        let probs = x.matmul(mode.leaf(g, &self.router)?)?.softmax()?;
        let probs_val = probs.value();
        let indices: Vec<Vec<usize>> = probs_val
            .data()
            .chunks_exact(e_cnt)
            .map(|row| {
                let row_f: Vec<f64> = row.iter().map(|v| v.to_f64()).collect();
                self.select(&row_f)
            })
            .collect();

        // renormalize the selected gates on-tape: gather → row-normalize
        let pairs: Rc<Vec<(usize, usize)>> = Rc::new(
            indices
                .iter()
                .enumerate()
                .flat_map(|(t, idx)| idx.iter().map(move |&e| (t, e)))
                .collect(),
        );
        let picked = probs.gather_elems(pairs)?.reshape(vec![n, k])?;
        let inv = picked.row_sum()?.recip()?;
        let gates = picked.row_scale(inv)?;

        // dispatch: run each expert on its token subset and scatter back
        let mut acc: Option<Var<'g, T>> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let mut tok = Vec::new();
            let mut slot_pairs = Vec::new();
            for (t, idx) in indices.iter().enumerate() {
                if let Some(slot) = idx.iter().position(|&x| x == e) {
                    tok.push(t);
                    slot_pairs.push((t, slot));
                }
            }
            if tok.is_empty() {
                continue;
            }
            let tok = Rc::new(tok);
            let xe = x.gather_rows(tok.clone())?;
            let ye = expert.forward(g, xe, mode)?;
            let ge = gates.gather_elems(Rc::new(slot_pairs))?;
            let contrib = ye.row_scale(ge)?.scatter_rows(tok, n)?;
            acc = Some(match acc {
                Some(a) => a.add(contrib)?,
                None => contrib,
            });
        }
        let mut out = match acc {
            Some(a) => a,
            None => g.constant(Tensor::zeros(shape.clone()))?,
        };
        if let Some(sh) = &self.shared_expert {
            out = out.add(sh.forward(g, x, mode)?)?;
        }

        // switch-style load balance: β·E·Σ_e fraction_e · mean_prob_e,
        // with the token fractions treated as constants
        let aux = if beta > 0.0 {
            let mut counts = vec![0usize; e_cnt];
            for idx in &indices {
                for &e in idx {
                    counts[e] += 1;
                }
            }
            let fvec: Vec<T> = counts
                .iter()
                .map(|&c| T::from_f64(beta * e_cnt as f64 * c as f64 / n as f64))
                .collect();
            let ones = g.constant(Tensor::full(vec![1, n], T::from_f64(1.0 / n as f64)))?;
            let mean_probs = ones.matmul(probs)?;
            let f_const = g.constant(Tensor::new(vec![1, e_cnt], fvec)?)?;
            mean_probs.mul(f_const)?.sum()?
        } else {
            g.constant(Tensor::scalar(T::zero()))?
        };

        let decision = RouterDecision {
            gates: gates
                .value()
                .data()
                .chunks_exact(k)
                .map(|row| row.iter().map(|v| v.to_f64()).collect())
                .collect(),
            indices,
            probs: probs_val.data().iter().map(|v| v.to_f64()).collect(),
            n_experts: e_cnt,
        };
        Ok((out, aux, decision))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(vec![n, d], 1.0, &mut Rng64::new(seed))
    }

    #[test]
    fn gates_on_simplex() {
        let mut rng = Rng64::new(11);
        let layer = MoeLayer::<f64>::new(8, 16, 4, 2, true, &mut rng).unwrap();
        let g = Graph::new();
        let x = g.constant(tokens(32, 8, 1)).unwrap();
        let (_, _, dec) = layer.forward(&g, x, Mode::Frozen, 0.01).unwrap();
        for (idx, gates) in dec.indices.iter().zip(&dec.gates) {
            assert_eq!(idx.len(), 2);
            let mut seen = idx.clone();
            seen.dedup();
            assert_eq!(seen.len(), 2, "distinct experts");
            let s: f64 = gates.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(gates.iter().all(|&g| g >= 0.0));
        }
    }

    #[test]
    fn degenerate_single_expert_is_dense() {
        // E=1, k=1, no shared expert → output must equal the expert alone
        let mut rng = Rng64::new(3);
        let layer = MoeLayer::<f64>::new(8, 16, 1, 1, false, &mut rng).unwrap();
        let g = Graph::new();
        let x = g.constant(tokens(16, 8, 2)).unwrap();
        let (out, _, dec) = layer.forward(&g, x, Mode::Frozen, 0.0).unwrap();
        let dense = layer.experts[0].forward(&g, x, Mode::Frozen).unwrap();
        let (a, b) = (out.value(), dense.value());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        for gate in &dec.gates {
            assert_eq!(gate, &vec![1.0]);
        }
    }

    #[test]
    fn matches_dense_oracle_with_renormalized_gates() {
        // explicit dense computation over the selected experts
        let mut rng = Rng64::new(7);
        let d = 8;
        let layer = MoeLayer::<f64>::new(d, 16, 4, 2, false, &mut rng).unwrap();
        let g = Graph::new();
        let xt = tokens(8, d, 5);
        let x = g.constant(xt.clone()).unwrap();
        let (out, _, dec) = layer.forward(&g, x, Mode::Frozen, 0.0).unwrap();
        let ov = out.value();
        for t in 0..8 {
            let xrow = g
                .constant(Tensor::new(vec![1, d], xt.data()[t * d..(t + 1) * d].to_vec()).unwrap())
                .unwrap();
            let mut expect = vec![0.0; d];
            let denom: f64 = dec.indices[t]
                .iter()
                .map(|&e| dec.probs[t * 4 + e])
                .sum();
            for &e in &dec.indices[t] {
                let y = layer.experts[e].forward(&g, xrow, Mode::Frozen).unwrap();
                let gate = dec.probs[t * 4 + e] / denom;
                for (acc, v) in expect.iter_mut().zip(y.value().data()) {
                    *acc += gate * v;
                }
            }
            for j in 0..d {
                assert!(
                    (ov.data()[t * d + j] - expect[j]).abs() < 1e-9,
                    "token {t} dim {j}"
                );
            }
        }
    }

    #[test]
    fn shared_expert_adds_exactly_its_output() {
        let mut rng = Rng64::new(9);
        let with = MoeLayer::<f64>::new(8, 16, 3, 2, true, &mut rng).unwrap();
        // clone routing/experts into a shared-free layer
        let without = MoeLayer {
            router: with.router.clone(),
            experts: with
                .experts
                .iter()
                .map(|e| Expert {
                    w_gate: e.w_gate.clone(),
                    w_up: e.w_up.clone(),
                    w_down: e.w_down.clone(),
                })
                .collect(),
            shared_expert: None,
            top_k: 2,
        };
        let g = Graph::new();
        let x = g.constant(tokens(10, 8, 4)).unwrap();
        let (a, _, _) = with.forward(&g, x, Mode::Frozen, 0.0).unwrap();
        let (b, _, _) = without.forward(&g, x, Mode::Frozen, 0.0).unwrap();
        let s = with
            .shared_expert
            .as_ref()
            .unwrap()
            .forward(&g, x, Mode::Frozen)
            .unwrap();
        let (av, bv, sv) = (a.value(), b.value(), s.value());
        for i in 0..av.numel() {
            assert!((av.data()[i] - (bv.data()[i] + sv.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn router_topk_invariant_under_positive_input_scaling() {
        // scaling the router input scales logits uniformly per token only if
        // the input direction is preserved — here we scale the token vector,
        // which scales every logit by the same factor, keeping the ranking
        let mut rng = Rng64::new(13);
        let layer = MoeLayer::<f64>::new(8, 16, 4, 2, false, &mut rng).unwrap();
        let g = Graph::new();
        let xt = tokens(20, 8, 6);
        let x1 = g.constant(xt.clone()).unwrap();
        let x2 = g.constant(xt.scale(3.5)).unwrap();
        let (_, _, d1) = layer.forward(&g, x1, Mode::Frozen, 0.0).unwrap();
        let (_, _, d2) = layer.forward(&g, x2, Mode::Frozen, 0.0).unwrap();
        for (a, b) in d1.indices.iter().zip(&d2.indices) {
            let (mut sa, mut sb) = (a.clone(), b.clone());
            sa.sort_unstable();
            sb.sort_unstable();
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn tie_break_prefers_lower_index() {
        // zero router weights → all logits equal → uniform probs → ties
        let mut rng = Rng64::new(1);
        let mut layer = MoeLayer::<f64>::new(4, 8, 4, 2, false, &mut rng).unwrap();
        layer.router = shared(Tensor::zeros(vec![4, 4]));
        let g = Graph::new();
        let x = g.constant(tokens(5, 4, 8)).unwrap();
        let (_, _, dec) = layer.forward(&g, x, Mode::Frozen, 0.0).unwrap();
        for idx in &dec.indices {
            assert_eq!(idx, &vec![0, 1]);
        }
    }

    #[test]
    fn aux_loss_value_at_uniform_routing() {
        // uniform probs: frac_e = k/E, mean_prob = 1/E → β·E·E·(k/E)·(1/E) = β·k
        let mut rng = Rng64::new(2);
        let mut layer = MoeLayer::<f64>::new(4, 8, 4, 2, false, &mut rng).unwrap();
        layer.router = shared(Tensor::zeros(vec![4, 4]));
        let g = Graph::new();
        let x = g.constant(tokens(12, 4, 3)).unwrap();
        let (_, aux, _) = layer.forward(&g, x, Mode::Frozen, 0.01).unwrap();
        assert!((aux.item() - 0.01 * 2.0).abs() < 1e-9);
    }
}
