//! Compute and memory-traffic accounting for one attention layer, cache-size
//! accounting, roofline prediction and a wall-clock benchmark harness.
//!
//! Counts cover one attention layer for one decode step over the whole batch
//! of `B` inputs with `x` live lanes each, attending to `n` input states.
//! [`CONVENTIONS`] lists the counting rules; every report repeats them.
//!
//! With `hk = h·d_k`, the per-group counts (values, before `bytes_per_value`) are:
//!
//! | group | mode | MACs | reads | writes |
//! |---|---|---|---|---|
//! | ① | MHA, when computed | `B·n·d_m·2hk` | `B·n·d_m + 2·d_m·hk + 2hk` | `2·B·n·hk` |
//! | ① | EL | 0 | 0 | 0 |
//! | ② | MHA | `2·B·x·d_m·hk` | `B·x·(d_m + hk) + 2·d_m·hk + hk + d_m` | `B·x·(hk + d_m)` |
//! | ② | EL | `4·B·x·d_m·hk + B·x·hk` | see [`op_group_profile`] | see [`op_group_profile`] |
//! | ③ | MHA | `2·B·x·n·hk` | `B·x·(2·n·hk + hk + 2·h·n)` | `B·x·(hk + 2·h·n)` |
//! | ③ | EL | `2·B·x·h·n·d_m` | `B·(2·n·d_m + x·h·(d_m + 2n + 1))` | `B·x·h·(d_m + 2n)` |
//!
//! Group ① runs at every step without a cache and only at the first step with
//! one. The folded EL output bias `bo + Σ bv_i·Wo_i` is a per-model constant
//! and is not counted.

pub mod bench;
pub mod report;
pub mod trace;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Architecture, AttentionMode};

pub const GIB: f64 = (1u64 << 30) as f64;

/// Counting rules shared by the analytic model and the instrumented kernels.
pub const CONVENTIONS: &[&str] = &[
    "counts are per attention layer per decode step for the whole batch",
    "flops = 2 x multiply-adds; bias adds, scaling and softmax exponentials count 0 flops",
    "each kernel reads every operand element once and writes every output element once",
    "weights and biases are read once per kernel regardless of batch size",
    "score matrices are counted on write, on re-read by softmax, on probability write and on re-read by the weighted sum",
    "bytes = (values read + values written) x bytes_per_value; GiB = 2^30 bytes",
    "MHA K/V projection (group 1) is one fused kernel over all inputs; EL never projects K/V",
    "EL keeps one hidden-state tensor per input shared by all heads and lanes; MHA keys/values are read once per lane",
];

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("invalid hardware spec: {0}")]
    Hardware(String),
    #[error("invalid benchmark parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Decode(#[from] crate::decoding::DecodeError),
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, PerfError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n: usize,
    pub d_m: usize,
    pub h: usize,
    pub d_k: usize,
    /// Beam size.
    pub x: usize,
    pub batch: usize,
    pub layers: usize,
    pub bytes_per_value: usize,
    pub architecture: Architecture,
    pub mode: AttentionMode,
}

impl WorkloadSpec {
    /// Large-model dimensions: 12 layers, `d_m = 1024`, 16 heads, beam 4, fp16.
    pub fn large(n: usize, batch: usize, mode: AttentionMode) -> Self {
        Self {
            n,
            d_m: 1024,
            h: 16,
            d_k: 64,
            x: 4,
            batch,
            layers: 12,
            bytes_per_value: 2,
            architecture: Architecture::EncoderDecoder,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n", self.n),
            ("d_m", self.d_m),
            ("h", self.h),
            ("d_k", self.d_k),
            ("x", self.x),
            ("batch", self.batch),
            ("L", self.layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(PerfError::Workload(format!("{name} must be positive")));
        }
        if ![2, 4, 8].contains(&self.bytes_per_value) {
            return Err(PerfError::Workload(format!(
                "bytes_per_value must be 2, 4 or 8, got {}",
                self.bytes_per_value
            )));
        }
        Ok(())
    }

    fn hk(&self) -> u64 {
        (self.h * self.d_k) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    First,
    Subsequent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCost {
    pub flops: u64,
    pub bytes: u64,
}

impl GroupCost {
    /// Arithmetic intensity in flops per byte; 0 when nothing moves.
    pub fn ai(&self) -> f64 {
        if self.bytes == 0 {
            0.0
        } else {
            self.flops as f64 / self.bytes as f64
        }
    }
}

impl std::ops::Add for GroupCost {
    type Output = GroupCost;

    fn add(self, other: GroupCost) -> GroupCost {
        GroupCost {
            flops: self.flops + other.flops,
            bytes: self.bytes + other.bytes,
        }
    }
}

/// Costs of group ① (build K/V), ② (build query and output) and ③ (attention).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpGroupProfile {
    pub groups: [GroupCost; 3],
}

impl OpGroupProfile {
    pub fn build_kv(&self) -> GroupCost {
        self.groups[0]
    }

    pub fn query_output(&self) -> GroupCost {
        self.groups[1]
    }

    pub fn attention(&self) -> GroupCost {
        self.groups[2]
    }

    pub fn total(&self) -> GroupCost {
        self.groups.iter().fold(GroupCost::default(), |a, &g| a + g)
    }
}

/// MACs, values read and values written of one group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub macs: u64,
    pub reads: u64,
    pub writes: u64,
}

impl GroupCounts {
    pub fn cost(&self, bytes_per_value: usize) -> GroupCost {
        GroupCost {
            flops: 2 * self.macs,
            bytes: (self.reads + self.writes) * bytes_per_value as u64,
        }
    }
}

/// Exact per-group counts in values, see the module table.
pub fn op_group_counts(spec: &WorkloadSpec, step: Step) -> Result<[GroupCounts; 3]> {
    spec.validate()?;
    let (b, x, n, d_m, h) = (
        spec.batch as u64,
        spec.x as u64,
        spec.n as u64,
        spec.d_m as u64,
        spec.h as u64,
    );
    let hk = spec.hk();
    let lanes = b * x;

    let build_kv = match (spec.mode, step) {
        (AttentionMode::MhaNoCache, _) | (AttentionMode::MhaCached, Step::First) => GroupCounts {
            macs: b * n * d_m * 2 * hk,
            reads: b * n * d_m + 2 * d_m * hk + 2 * hk,
            writes: 2 * b * n * hk,
        },
        _ => GroupCounts::default(),
    };

    let q_proj = GroupCounts {
        macs: lanes * d_m * hk,
        reads: lanes * d_m + d_m * hk + hk,
        writes: lanes * hk,
    };
    let out_proj = GroupCounts {
        macs: lanes * hk * d_m,
        reads: lanes * hk + hk * d_m + d_m,
        writes: lanes * d_m,
    };

    let (query_output, attention) = match spec.mode {
        AttentionMode::El => {
            let expand = GroupCounts {
                macs: lanes * hk * d_m,
                reads: lanes * hk + hk * d_m,
                writes: lanes * h * d_m,
            };
            let key_bias = GroupCounts {
                macs: lanes * hk,
                reads: lanes * hk + hk,
                writes: lanes * h,
            };
            let value_proj = GroupCounts {
                macs: lanes * d_m * hk,
                reads: lanes * h * d_m + d_m * hk,
                writes: lanes * hk,
            };
            let rows = lanes * h;
            let attention = GroupCounts {
                macs: 2 * rows * n * d_m,
                reads: b * 2 * n * d_m + rows * (d_m + 2 * n + 1),
                writes: rows * (d_m + 2 * n),
            };
            (
                sum_counts(&[q_proj, expand, key_bias, value_proj, out_proj]),
                attention,
            )
        }
        AttentionMode::MhaCached | AttentionMode::MhaNoCache => {
            let attention = GroupCounts {
                macs: 2 * lanes * n * hk,
                reads: lanes * (2 * n * hk + hk + 2 * h * n),
                writes: lanes * (hk + 2 * h * n),
            };
            (sum_counts(&[q_proj, out_proj]), attention)
        }
    };
    Ok([build_kv, query_output, attention])
}

fn sum_counts(parts: &[GroupCounts]) -> GroupCounts {
    parts
        .iter()
        .fold(GroupCounts::default(), |a, p| GroupCounts {
            macs: a.macs + p.macs,
            reads: a.reads + p.reads,
            writes: a.writes + p.writes,
        })
}

/// Flops and bytes per group for one decode step.
pub fn op_group_profile(spec: &WorkloadSpec, step: Step) -> Result<OpGroupProfile> {
    let counts = op_group_counts(spec, step)?;
    Ok(OpGroupProfile {
        groups: counts.map(|c| c.cost(spec.bytes_per_value)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheBytes {
    pub mha: u64,
    pub el: u64,
}

impl CacheBytes {
    pub fn ratio(&self) -> f64 {
        self.mha as f64 / self.el as f64
    }
}

/// Bytes held for input-related state across the batch.
///
/// Encoder-decoder: MHA keeps K and V per layer per lane
/// (`2·L·B·x·n·h·d_k`), EL keeps the encoder output once (`B·n·d_m`).
/// Decoder-only: MHA keeps per-lane prefix K and V per layer, EL keeps one
/// per-layer prefix hidden state shared by all lanes (`L·B·n·d_m`).
pub fn cache_bytes(spec: &WorkloadSpec) -> Result<CacheBytes> {
    spec.validate()?;
    let bpv = spec.bytes_per_value as u64;
    let (l, b, x, n, d_m) = (
        spec.layers as u64,
        spec.batch as u64,
        spec.x as u64,
        spec.n as u64,
        spec.d_m as u64,
    );
    let mha = 2 * l * b * x * n * spec.hk() * bpv;
    let el = match spec.architecture {
        Architecture::EncoderDecoder => b * n * d_m * bpv,
        Architecture::DecoderOnly => l * b * n * d_m * bpv,
    };
    Ok(CacheBytes { mha, el })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RooflineSpec {
    pub peak_gflops: f64,
    pub peak_gbs: f64,
}

impl RooflineSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("peak GFLOP/s", self.peak_gflops),
            ("peak GB/s", self.peak_gbs),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(PerfError::Hardware(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Attainable GFLOP/s at arithmetic intensity `ai`.
    pub fn attainable_gflops(&self, ai: f64) -> f64 {
        self.peak_gflops.min(self.peak_gbs * ai)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RooflinePrediction {
    pub group_seconds: [f64; 3],
    pub total_seconds: f64,
}

/// Seconds per group under the roofline bound. Groups without flops are
/// charged their bytes at peak bandwidth.
pub fn roofline_predict(profile: &OpGroupProfile, hw: &RooflineSpec) -> Result<RooflinePrediction> {
    hw.validate()?;
    let group_seconds = profile.groups.map(|g| {
        if g.flops == 0 {
            g.bytes as f64 / (hw.peak_gbs * 1e9)
        } else if g.bytes == 0 {
            g.flops as f64 / (hw.peak_gflops * 1e9)
        } else {
            g.flops as f64 / (hw.attainable_gflops(g.ai()) * 1e9)
        }
    });
    Ok(RooflinePrediction {
        total_seconds: group_seconds.iter().sum(),
        group_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: AttentionMode) -> WorkloadSpec {
        WorkloadSpec {
            n: 6,
            d_m: 16,
            h: 2,
            d_k: 4,
            x: 3,
            batch: 2,
            layers: 1,
            bytes_per_value: 8,
            architecture: Architecture::EncoderDecoder,
            mode,
        }
    }

    #[test]
    fn el_build_kv_is_zero() {
        for step in [Step::First, Step::Subsequent] {
            let p = op_group_profile(&spec(AttentionMode::El), step).unwrap();
            assert_eq!(p.build_kv(), GroupCost::default());
        }
        let cached = op_group_profile(&spec(AttentionMode::MhaCached), Step::Subsequent).unwrap();
        assert_eq!(cached.build_kv().flops, 0);
        let first = op_group_profile(&spec(AttentionMode::MhaCached), Step::First).unwrap();
        let nocache = op_group_profile(&spec(AttentionMode::MhaNoCache), Step::Subsequent).unwrap();
        assert_eq!(first.build_kv(), nocache.build_kv());
    }

    #[test]
    fn build_kv_flops_per_input() {
        let s = WorkloadSpec {
            batch: 1,
            ..spec(AttentionMode::MhaNoCache)
        };
        let p = op_group_profile(&s, Step::Subsequent).unwrap();
        assert_eq!(p.build_kv().flops, 4 * 6 * 16 * 8);
    }

    #[test]
    fn invalid_workload() {
        let s = WorkloadSpec {
            bytes_per_value: 3,
            ..spec(AttentionMode::El)
        };
        assert!(matches!(
            op_group_profile(&s, Step::First),
            Err(PerfError::Workload(_))
        ));
        let s = WorkloadSpec {
            n: 0,
            ..spec(AttentionMode::El)
        };
        assert!(matches!(cache_bytes(&s), Err(PerfError::Workload(_))));
    }

    #[test]
    fn roofline_branches() {
        let hw = RooflineSpec {
            peak_gflops: 100.0,
            peak_gbs: 10.0,
        };
        let low = OpGroupProfile {
            groups: [
                GroupCost {
                    flops: 10,
                    bytes: 1_000_000,
                },
                GroupCost::default(),
                GroupCost::default(),
            ],
        };
        let p = roofline_predict(&low, &hw).unwrap();
        assert!((p.group_seconds[0] - 1_000_000.0 / 1e10).abs() < 1e-18);
        let high = OpGroupProfile {
            groups: [
                GroupCost {
                    flops: 1_000_000_000,
                    bytes: 8,
                },
                GroupCost::default(),
                GroupCost::default(),
            ],
        };
        let p = roofline_predict(&high, &hw).unwrap();
        assert!((p.total_seconds - 1e9 / 1e11).abs() < 1e-15);
        let zero = RooflineSpec {
            peak_gflops: 0.0,
            peak_gbs: 1.0,
        };
        assert!(matches!(
            roofline_predict(&high, &zero),
            Err(PerfError::Hardware(_))
        ));
    }

    #[test]
    fn cache_ratio_is_two_l_x() {
        for (l, x) in [(1, 1), (12, 4), (6, 8)] {
            let s = WorkloadSpec {
                layers: l,
                x,
                d_k: 8,
                ..spec(AttentionMode::El)
            };
            let c = cache_bytes(&s).unwrap();
            assert_eq!(c.mha, 2 * (l * x) as u64 * c.el);
        }
    }
}
