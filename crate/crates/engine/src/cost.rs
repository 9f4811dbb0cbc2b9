//! Compute-cost model standing in for GPU work.

use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Prefill of `t` tokens costs `a*t + b*t^2` nanoseconds; each decode step
/// costs `decode_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub a_ns: f64,
    pub b_ns: f64,
    pub decode_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            a_ns: 20_000.0,
            b_ns: 2.0,
            decode_ns: 20_000_000,
        }
    }
}

impl CostModel {
    pub fn new(a_ns: f64, b_ns: f64, decode_ns: u64) -> Self {
        Self {
            a_ns,
            b_ns,
            decode_ns,
        }
    }

    /// Full prefill of `tokens` tokens, in nanoseconds.
    pub fn prefill_ns(&self, tokens: usize) -> u64 {
        let t = tokens as f64;
        (self.a_ns * t + self.b_ns * t * t).round() as u64
    }

    /// Prefill of tokens `[from, to)` with `[0, from)` already cached:
    /// `a*(to-from) + b*(to^2-from^2)`. The new tokens still attend over the
    /// cached ones, so this is the full cost minus the cached part's.
    pub fn suffix_ns(&self, from: usize, to: usize) -> u64 {
        if to <= from {
            return 0;
        }
        let (f, t) = (from as f64, to as f64);
        let v = self.a_ns * (t - f) + self.b_ns * (t * t - f * f);
        // at least 1ns so every computed token costs something
        (v.round() as u64).max(1)
    }

    /// Share of `total_ns` for `layer` of `layers`. Shares sum to `total_ns`.
    pub fn layer_share(total_ns: u64, layer: usize, layers: usize) -> u64 {
        let layers = layers as u64;
        let base = total_ns / layers;
        let extra = total_ns % layers;
        base + u64::from((layer as u64) < extra)
    }

    pub fn decode_step(&self) -> Duration {
        Duration::from_nanos(self.decode_ns)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.a_ns.is_nan()
            || self.a_ns <= 0.0
            || self.b_ns < 0.0
            || !self.b_ns.is_finite()
            || self.decode_ns == 0
        {
            return Err("cost coefficients must be positive (b may be zero)".into());
        }
        Ok(())
    }
}
