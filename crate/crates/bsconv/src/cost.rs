//! Compute and storage cost accounting.
//!
//! Binary multiply-accumulates count as BOPs, everything else as FLOPs,
//! and the combined figure is `ops = bops/64 + flops` — 64 binary
//! operations cost one word-wide instruction.  Storage counts a binary
//! parameter as 1/32 of a real one.
//!
//! Counting is data-dependent: convolution work is proportional to the
//! kernel-map pair counts of an actual sample, so a report carries the
//! sample's input site count for comparability.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub bops: f64,
    pub flops: f64,
    pub ops: f64,
    pub params_real: u64,
    pub params_binary: u64,
    pub storage_m: f64,
    pub input_sites: usize,
}

/// Accumulates per-layer work during a structure walk.
#[derive(Debug, Default, Clone)]
pub struct CostRecorder {
    bops: f64,
    flops: f64,
}

impl CostRecorder {
    pub fn new() -> Self {
        CostRecorder::default()
    }

    /// One (possibly grouped) convolution: 2 × pairs × in × out
    /// multiply-accumulate operations, binary or real.
    pub fn conv(&mut self, pairs: usize, in_c: usize, out_c: usize, binary: bool) {
        let macs = 2.0 * pairs as f64 * in_c as f64 * out_c as f64;
        if binary {
            self.bops += macs;
        } else {
            self.flops += macs;
        }
    }

    /// Dense per-site linear map: 2 × sites × in × out real operations.
    pub fn dense(&mut self, sites: usize, in_c: usize, out_c: usize) {
        self.flops += 2.0 * sites as f64 * in_c as f64 * out_c as f64;
    }

    /// Normalization: 2 FLOPs per element (scale and shift).
    pub fn batch_norm(&mut self, sites: usize, channels: usize) {
        self.flops += 2.0 * sites as f64 * channels as f64;
    }

    /// Parametric ReLU: 1 FLOP per element.
    pub fn prelu(&mut self, sites: usize, channels: usize) {
        self.flops += (sites * channels) as f64;
    }

    /// Elementwise addition (skip joins, bias, score fusion): 1 FLOP per
    /// element.
    pub fn add(&mut self, sites: usize, channels: usize) {
        self.flops += (sites * channels) as f64;
    }

    /// Average pooling: one add per gathered pair plus one divide per
    /// parent site, per channel.
    pub fn avg_pool(&mut self, pairs: usize, parents: usize, channels: usize) {
        self.flops += ((pairs + parents) * channels) as f64;
    }

    pub fn bops(&self) -> f64 {
        self.bops
    }

    pub fn flops(&self) -> f64 {
        self.flops
    }

    pub fn finish(self, params_real: u64, params_binary: u64, input_sites: usize) -> CostReport {
        let ops = self.bops / 64.0 + self.flops;
        let storage = params_real as f64 + params_binary as f64 / 32.0;
        CostReport {
            bops: self.bops,
            flops: self.flops,
            ops,
            params_real,
            params_binary,
            storage_m: storage / 1e6,
            input_sites,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn combined_ops_formula() {
        let mut rec = CostRecorder::new();
        rec.conv(50_000, 32, 32, true); // 6.4e9 / 6.25e4... scaled below
        let report = rec.finish(0, 0, 1);
        assert_eq!(report.ops, report.bops / 64.0 + report.flops);

        // worked example: bops 6.4e9, flops 1.0e7 → ops 1.1e8
        let mut rec = CostRecorder::new();
        rec.conv(3_125_000, 32, 32, true); // 2·3.125e6·1024 = 6.4e9
        assert_eq!(rec.bops(), 6.4e9);
        rec.dense(156_250, 8, 4); // 2·156250·32 = 1.0e7
        assert_eq!(rec.flops(), 1.0e7);
        let report = rec.finish(0, 0, 1);
        assert_eq!(report.ops, 1.1e8);
    }

    #[test]
    fn storage_counts_binary_at_one_thirty_second() {
        let report = CostRecorder::new().finish(100_000, 3_200_000, 7);
        assert_eq!(report.storage_m, 0.2);
        assert_eq!(report.input_sites, 7);
    }

    #[test]
    fn identity_holds_for_random_accumulations() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for _ in 0..100 {
            let mut rec = CostRecorder::new();
            for _ in 0..10 {
                match rng.random_range(0..5) {
                    0 => rec.conv(
                        rng.random_range(1..1000),
                        rng.random_range(1..64),
                        rng.random_range(1..64),
                        rng.random(),
                    ),
                    1 => rec.dense(rng.random_range(1..500), 8, 16),
                    2 => rec.batch_norm(rng.random_range(1..500), 32),
                    3 => rec.prelu(rng.random_range(1..500), 32),
                    _ => rec.avg_pool(rng.random_range(1..200), rng.random_range(1..50), 16),
                }
            }
            let r = rec.finish(rng.random_range(0..1_000_000), rng.random_range(0..1_000_000), 1);
            assert_eq!(r.ops - r.bops / 64.0 - r.flops, 0.0);
            assert!(r.bops >= 0.0 && r.flops >= 0.0);
        }
    }

    #[test]
    fn report_serializes_with_fixed_keys() {
        let report = CostRecorder::new().finish(10, 64, 3);
        let json = serde_json::to_string(&report).unwrap();
        for key in ["bops", "flops", "ops", "params_real", "params_binary", "storage_m"] {
            assert!(json.contains(&format!("\"{key}\"")), "missing {key} in {json}");
        }
        assert!(!json.contains('\n'));
        let back: CostReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
