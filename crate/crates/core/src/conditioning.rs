//! Synthetic text-conditioning stubs.
//!
//! Real encoder stacks are out of scope; instead a prompt is just an integer
//! id, and deterministic hash-derived pseudo-embeddings stand in for encoder
//! features: a pooled global vector plus a token sequence assembled from a
//! "sequence encoder" role and a "multi-layer decoder" role whose per-token
//! layer features are fused along the feature axis before projection. The
//! projection matrices are frozen and derived from the config seed, so a
//! bundle is a pure function of (prompt_id, config).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{hash_words, normal_from_hash, Rng64};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const ROLE_SEQ: u64 = 1;
const ROLE_LLM: u64 = 2;
const ROLE_POOL: u64 = 3;

/// Prompt id 0 is reserved for the null (unconditional) bundle.
pub const NULL_PROMPT: u64 = 0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderStubConfig {
    /// raw width of the sequence-encoder role
    pub d_seq: usize,
    /// raw per-layer width of the decoder-LLM role
    pub d_llm: usize,
    /// model width everything is projected to
    pub d: usize,
    /// token counts contributed by each role
    pub m_seq: usize,
    pub m_llm: usize,
    /// number of decoder layers tapped
    pub layers: usize,
    pub seed: u64,
}

impl Default for EncoderStubConfig {
    fn default() -> Self {
        EncoderStubConfig {
            d_seq: 24,
            d_llm: 16,
            d: 64,
            m_seq: 4,
            m_llm: 6,
            layers: 2,
            seed: 7,
        }
    }
}

impl EncoderStubConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_seq", self.d_seq),
            ("d_llm", self.d_llm),
            ("d", self.d),
            ("m_seq", self.m_seq),
            ("m_llm", self.m_llm),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return Err(Error::config(format!("encoder {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Total conditioning sequence length.
    pub fn n_tokens(&self) -> usize {
        self.m_seq + self.m_llm
    }
}

#[derive(Debug, Clone)]
pub struct ConditioningBundle<T: Scalar> {
    /// [1, d], unit L2 norm (all-zero for the null bundle)
    pub pooled: Tensor<T>,
    /// [m_seq + m_llm, d]
    pub sequence: Tensor<T>,
    pub prompt_id: u64,
}

impl<T: Scalar> ConditioningBundle<T> {
    pub fn is_null(&self) -> bool {
        self.prompt_id == NULL_PROMPT
    }
}

/// Frozen pseudo-encoder. Projections stand in for the (frozen) upstream
/// encoder heads and are generated from the config seed; they are not
/// trained and are reconstructed identically from the config.
pub struct EncoderStub<T: Scalar> {
    pub cfg: EncoderStubConfig,
    proj_seq: Vec<T>,  // [d_seq × d]
    proj_llm: Vec<T>,  // [layers·d_llm × d]
    proj_pool: Vec<T>, // [d × d]
}

impl<T: Scalar> EncoderStub<T> {
    pub fn new(cfg: EncoderStubConfig) -> Result<Self> {
        cfg.validate()?;
        let mk = |tag: u64, rows: usize, cols: usize| -> Vec<T> {
            let mut rng = Rng64::new(cfg.seed).fork(tag);
            let std = 1.0 / (rows as f64).sqrt();
            (0..rows * cols)
                .map(|_| T::from_f64(rng.normal() * std))
                .collect()
        };
        Ok(EncoderStub {
            proj_seq: mk(ROLE_SEQ, cfg.d_seq, cfg.d),
            proj_llm: mk(ROLE_LLM, cfg.layers * cfg.d_llm, cfg.d),
            proj_pool: mk(ROLE_POOL, cfg.d, cfg.d),
            cfg,
        })
    }

    /// One pseudo-feature: a unit-variance normal derived from the prompt,
    /// role, token position, layer, and component index.
    fn feature(&self, prompt_id: u64, role: u64, pos: u64, layer: u64, idx: u64) -> f64 {
        normal_from_hash(hash_words(&[self.cfg.seed, prompt_id, role, pos, layer, idx]))
    }

    /// All-zero bundle used for unconditional prediction and guidance.
    pub fn null(&self) -> ConditioningBundle<T> {
        let d = self.cfg.d;
        ConditioningBundle {
            pooled: Tensor::zeros(vec![1, d]),
            sequence: Tensor::zeros(vec![self.cfg.n_tokens(), d]),
            prompt_id: NULL_PROMPT,
        }
    }

    /// Deterministic bundle for a prompt id; id 0 yields the null bundle.
    pub fn encode(&self, prompt_id: u64) -> ConditioningBundle<T> {
        if prompt_id == NULL_PROMPT {
            return self.null();
        }
        let cfg = &self.cfg;
        let d = cfg.d;

        let mut sequence = Vec::with_capacity(cfg.n_tokens() * d);
        // sequence-encoder tokens: raw [d_seq] → project to d
        for pos in 0..cfg.m_seq {
            let raw: Vec<f64> = (0..cfg.d_seq)
                .map(|i| self.feature(prompt_id, ROLE_SEQ, pos as u64, 0, i as u64))
                .collect();
            sequence.extend(project(&raw, &self.proj_seq, d));
        }
        // decoder tokens: per-layer raw features fused along the feature
        // axis ([layers·d_llm]) → project to d
        for pos in 0..cfg.m_llm {
            let mut raw = Vec::with_capacity(cfg.layers * cfg.d_llm);
            for layer in 0..cfg.layers {
                for i in 0..cfg.d_llm {
                    raw.push(self.feature(prompt_id, ROLE_LLM, pos as u64, layer as u64, i as u64));
                }
            }
            sequence.extend(project(&raw, &self.proj_llm, d));
        }

        // pooled vector: raw [d] → project → unit L2 norm
        let raw: Vec<f64> = (0..d)
            .map(|i| self.feature(prompt_id, ROLE_POOL, 0, 0, i as u64))
            .collect();
        let mut pooled = project::<T>(&raw, &self.proj_pool, d);
        let norm = pooled
            .iter()
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            let inv = T::from_f64(1.0 / norm);
            for v in pooled.iter_mut() {
                *v *= inv;
            }
        }

        ConditioningBundle {
            pooled: Tensor::new(vec![1, d], pooled).expect("pooled shape"),
            sequence: Tensor::new(vec![cfg.n_tokens(), d], sequence).expect("sequence shape"),
            prompt_id,
        }
    }
}

fn project<T: Scalar>(raw: &[f64], w: &[T], d: usize) -> Vec<T> {
    let k = raw.len();
    let mut out = vec![T::zero(); d];
    for (i, &x) in raw.iter().enumerate() {
        let xv = T::from_f64(x);
        let row = &w[i * d..(i + 1) * d];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
    debug_assert_eq!(w.len(), k * d);
    out
}
