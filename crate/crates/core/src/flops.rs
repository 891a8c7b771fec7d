//! Analytic per-sample FLOP estimate: forward pass plus the backward work
//! the tape actually does, which skips weight gradients of frozen layers
//! and every layer upstream of the first trainable parameter.

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, Role, TrainMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub forward: u64,
    pub backward: u64,
}

impl FlopEstimate {
    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }
}

struct Counter {
    mode: TrainMode,
    /// Whether the running activation carries gradient.
    flowing: bool,
    est: FlopEstimate,
}

// per-element costs of the non-matmul ops, counted as arithmetic operations
const GELU_FWD: u64 = 10;
const GELU_BWD: u64 = 16;
const LN_FWD: u64 = 8;
const LN_BWD: u64 = 12;

impl Counter {
    fn trainable(&self, role: Role) -> bool {
        self.mode.is_trainable(role)
    }

    /// `[m×k]·[k×n]` plus bias.
    fn linear(&mut self, m: u64, k: u64, n: u64, role: Role) {
        let mm = 2 * m * k * n;
        self.est.forward += mm + m * n;
        let w = self.trainable(role);
        if self.flowing {
            self.est.backward += mm;
        }
        if w {
            self.est.backward += mm + m * n;
        }
        self.flowing |= w;
    }

    fn elementwise(&mut self, n: u64, fwd: u64, bwd: u64) {
        self.est.forward += n * fwd;
        if self.flowing {
            self.est.backward += n * bwd;
        }
    }

    fn norm(&mut self, rows: u64, d: u64, role: Role) {
        self.elementwise(rows * d, LN_FWD, LN_BWD);
        let w = self.trainable(role);
        if w {
            self.est.backward += 2 * rows * d;
        }
        self.flowing |= w;
    }

    fn attention(&mut self, n: u64, d: u64, heads: u64) {
        // scores and weighted values; softmax is exp, sum and divide per score
        let mm = 2 * n * n * d;
        self.est.forward += 2 * mm + 4 * heads * n * n;
        if self.flowing {
            self.est.backward += 4 * mm + 6 * heads * n * n;
        }
    }

    fn add(&mut self, n: u64) {
        self.elementwise(n, 1, 1);
    }
}

/// down → ReLU → up, then the residual add.
fn adapter(c: &mut Counter, n: u64, d: u64, a: u64) {
    let input = c.flowing;
    c.linear(n, d, a, Role::Adapter);
    c.elementwise(n * a, 1, 1);
    c.linear(n, a, d, Role::Adapter);
    c.flowing |= input;
    c.add(n * d);
}

/// FLOPs for one training sample under `mode`.
pub fn estimate_flops(cfg: &ModelConfig, with_adapters: bool, mode: TrainMode) -> FlopEstimate {
    let mut c = Counter {
        mode,
        flowing: false,
        est: FlopEstimate::default(),
    };
    let n = cfg.tokens() as u64;
    let d = cfg.embed_dim as u64;
    let hidden = 4 * d;
    let a = cfg.adapter_dim as u64;
    let h = cfg.heads as u64;

    c.linear(n, cfg.patch_dim() as u64, d, Role::Encoder);
    c.flowing |= c.trainable(Role::Encoder);
    c.add(n * d);
    for _ in 0..cfg.depth {
        let x_flow = c.flowing;
        c.norm(n, d, Role::Encoder);
        let h_flow = c.flowing;
        let mut qkv_flow = false;
        for _ in 0..3 {
            c.flowing = h_flow;
            c.linear(n, d, d, Role::Encoder);
            qkv_flow |= c.flowing;
        }
        c.flowing = qkv_flow;
        c.attention(n, d, h);
        c.linear(n, d, d, Role::Encoder);
        c.flowing |= x_flow;
        c.add(n * d);
        if with_adapters {
            adapter(&mut c, n, d, a);
        }

        let x_flow = c.flowing;
        c.norm(n, d, Role::Encoder);
        let h_flow = c.flowing;
        c.linear(n, d, hidden, Role::Encoder);
        c.elementwise(n * hidden, GELU_FWD, GELU_BWD);
        c.linear(n, hidden, d, Role::Encoder);
        let mut out = c.flowing | x_flow;
        c.add(n * d);
        if with_adapters {
            // parallel branch from the same normalized input
            c.flowing = h_flow;
            adapter(&mut c, n, d, a);
            out |= c.flowing;
        }
        c.flowing = out;
    }
    c.norm(n, d, Role::Encoder);

    let dc = cfg.decoder_dim as u64;
    let mut rows = n;
    let stages = cfg.upsample_stages();
    if stages == 0 {
        c.linear(rows, d, dc, Role::Decoder);
    }
    for s in 0..stages {
        let fan_in = if s == 0 { d } else { dc };
        c.linear(rows, fan_in, 4 * dc, Role::Decoder);
        c.elementwise(rows * 4 * dc, GELU_FWD, GELU_BWD);
        rows *= 4;
    }
    let stream = c.flowing;
    c.linear(rows, dc, dc, Role::Decoder);
    c.elementwise(rows * dc, GELU_FWD, GELU_BWD);
    c.linear(rows, dc, dc, Role::Decoder);
    c.flowing |= stream;
    c.add(rows * dc);
    c.linear(rows, dc, cfg.num_classes as u64, Role::Head);
    // loss: stable BCE per logit
    c.est.forward += rows * cfg.num_classes as u64 * 6;
    c.est.backward += rows * cfg.num_classes as u64 * 4;
    c.est
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn adapter_mode_is_cheaper() {
        for variant in [Variant::MiniB, Variant::MiniL] {
            let cfg = ModelConfig::for_variant(variant, 2);
            let full = estimate_flops(&cfg, false, TrainMode::FullFineTune);
            let adapter = estimate_flops(&cfg, true, TrainMode::AdapterDecoder);
            assert!(adapter.total() < full.total(), "{variant:?}: {adapter:?} vs {full:?}");
            // forward work is nearly the same; the saving is all in backward
            assert!(adapter.forward >= full.forward);
            assert!(adapter.backward < full.backward);
        }
    }

    #[test]
    fn full_backward_is_about_twice_forward() {
        let cfg = ModelConfig::default();
        let full = estimate_flops(&cfg, false, TrainMode::FullFineTune);
        let r = full.backward as f64 / full.forward as f64;
        assert!((1.6..2.4).contains(&r), "{r}");
    }
}
