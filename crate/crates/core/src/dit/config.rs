//! Backbone configuration plus analytic parameter and FLOP counters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiTConfig {
    /// model width
    pub d: usize,
    pub n_heads: usize,
    pub l_dual: usize,
    pub l_single: usize,
    /// patch edge length
    pub patch: usize,
    pub in_channels: usize,
    /// latent height/width used by default for sampling; forward accepts
    /// any latent whose dims the patch size divides
    pub height: usize,
    pub width: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub shared_expert: bool,
    pub expert_hidden: usize,
    /// load-balance auxiliary loss coefficient (0 disables)
    pub load_balance: f64,
    pub norm_eps: f64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            d: 64,
            n_heads: 4,
            l_dual: 2,
            l_single: 2,
            patch: 2,
            in_channels: 1,
            height: 16,
            width: 16,
            n_experts: 4,
            top_k: 2,
            shared_expert: true,
            expert_hidden: 128,
            load_balance: 0.01,
            norm_eps: 1e-6,
        }
    }
}

/// FLOP estimate split by term so scaling behavior can be asserted:
/// expert compute depends on top_k, not the expert count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub embed: u64,
    pub attention: u64,
    pub projections: u64,
    pub router: u64,
    pub experts: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.embed + self.attention + self.projections + self.router + self.experts
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.patch == 0 || self.in_channels == 0 {
            return Err(Error::config("model dims must be positive"));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.d % 4 != 0 {
            return Err(Error::config(
                "width must be divisible by 4 (2D positional features split sin/cos per axis)",
            ));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::config(format!(
                "top_k {} outside 1..={} experts",
                self.top_k, self.n_experts
            )));
        }
        if self.expert_hidden == 0 {
            return Err(Error::config("expert_hidden must be positive"));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "patch {} does not divide latent {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.load_balance < 0.0 {
            return Err(Error::config("load_balance must be ≥ 0"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    pub fn img_tokens(&self, h: usize, w: usize) -> usize {
        (h / self.patch) * (w / self.patch)
    }

    fn stream_param_count(&self) -> usize {
        let d = self.d;
        let h = self.expert_hidden;
        let expert = 3 * d * h;
        let mut n = 6 * d * d + 6 * d; // adaLN projection
        n += 4 * (d * d + d); // q,k,v,o
        n += 2 * self.n_heads; // qk gains
        n += d * self.n_experts; // router
        n += self.n_experts * expert;
        if self.shared_expert {
            n += expert;
        }
        n
    }

    /// Exact trainable-parameter count; verified against the model in tests.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let pd = self.patch_dim();
        let streams = 2 * self.l_dual + self.l_single;
        (pd * d + d)                    // patch embed
            + 2 * (d * d + d)           // timestep MLP
            + streams * self.stream_param_count()
            + (2 * d * d + 2 * d)       // final adaLN (scale/shift)
            + (d * pd + pd) // output head
    }

    /// Analytic forward-pass FLOPs (2 per multiply-add) for one latent of
    /// size h×w with n_txt conditioning tokens.
    pub fn flops_forward(&self, n_txt: usize, h: usize, w: usize) -> FlopBreakdown {
        let d = self.d as u64;
        let he = self.expert_hidden as u64;
        let e = self.n_experts as u64;
        let n_img = self.img_tokens(h, w) as u64;
        let n_txt = n_txt as u64;
        let n_all = n_img + n_txt;
        let pd = self.patch_dim() as u64;

        let embed = 2 * n_img * pd * d + 2 * 2 * d * d + 2 * n_img * d * pd;

        // per-stream token cost, excluding joint attention
        let stream = |n: u64| -> (u64, u64, u64) {
            let proj = 2 * d * 6 * d + 4 * 2 * n * d * d + 4 * n * d;
            let router = 2 * n * d * e;
            let routed = self.top_k as u64 + if self.shared_expert { 1 } else { 0 };
            let experts = n * routed * 6 * d * he;
            (proj, router, experts)
        };

        let mut projections = 2 * 2 * d * d; // final adaLN
        let mut router = 0;
        let mut experts = 0;
        let mut attention = 0;
        for _ in 0..self.l_dual {
            let (p1, r1, x1) = stream(n_img);
            let (p2, r2, x2) = stream(n_txt);
            projections += p1 + p2;
            router += r1 + r2;
            experts += x1 + x2;
            attention += 4 * n_all * n_all * d;
        }
        for _ in 0..self.l_single {
            let (p, r, x) = stream(n_all);
            projections += p;
            router += r;
            experts += x;
            attention += 4 * n_all * n_all * d;
        }

        FlopBreakdown {
            embed,
            attention,
            projections,
            router,
            experts,
        }
    }
}
