//! Wall-clock measurement: attention-level sweeps over sequence length and
//! beam size, and model-level generation timing.
//!
//! Every measurement runs single-threaded, discards one warm-up pass and
//! reports the median of the timed repeats.

use std::hint::black_box;
use std::time::Instant;

use crate::attention::{
    el_attention_rows, mha_over_cache, multi_head_attention, AttentionParams, KvCache,
};
use crate::decoding::{run_search, GenConfig};
use crate::model::{AttentionMode, Model};
use crate::tensor::{seeded_uniform, Rng, Scalar, Tensor};

use super::report::{BenchReport, BenchRow, RowKind};
use super::{
    op_group_profile, roofline_predict, GroupCost, PerfError, Result, RooflineSpec, Step,
    WorkloadSpec,
};

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Median wall-clock seconds of `repeats` calls after one warm-up call.
pub fn time_median<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        // floor at one nanosecond so a measured value is always positive
        samples.push(start.elapsed().as_secs_f64().max(1e-9));
    }
    Ok(median(samples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub d_m: usize,
    pub h: usize,
    pub d_k: usize,
    /// Target `n·x·batch`; batch is `max(1, budget / (n·x))`.
    pub budget: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            d_m: 32,
            h: 4,
            d_k: 8,
            budget: 8192,
            repeats: 3,
            seed: 0,
        }
    }
}

/// Synthetic inputs of one sweep cell.
struct SweepCase<T> {
    params: AttentionParams<T>,
    hidden: Vec<Tensor<T>>,
    queries: Vec<Tensor<T>>,
}

fn sweep_case<T: Scalar>(
    cfg: &SweepConfig,
    n: usize,
    x: usize,
    batch: usize,
) -> Result<SweepCase<T>> {
    let mut rng = Rng::new(cfg.seed);
    let params =
        AttentionParams::<f64>::random(cfg.h, cfg.d_m, cfg.d_k, &mut rng, -0.1, 0.1)?.cast();
    let hidden = (0..batch)
        .map(|_| seeded_uniform(&[n, cfg.d_m], &mut rng, -1.0, 1.0))
        .collect::<std::result::Result<_, _>>()?;
    let queries = (0..batch)
        .map(|_| seeded_uniform(&[x, cfg.d_m], &mut rng, -1.0, 1.0))
        .collect::<std::result::Result<_, _>>()?;
    Ok(SweepCase {
        params,
        hidden,
        queries,
    })
}

/// Time one attention decode step for every `(n, x, mode)` cell and attach
/// the modeled counts and roofline prediction.
pub fn sweep<T: Scalar>(
    cfg: &SweepConfig,
    ns: &[usize],
    xs: &[usize],
    modes: &[AttentionMode],
    hw: &RooflineSpec,
) -> Result<BenchReport> {
    hw.validate()?;
    if ns.is_empty() || xs.is_empty() || modes.is_empty() {
        return Err(PerfError::Parameter("sweep lists must be non-empty".into()));
    }
    if cfg.repeats < 1 {
        return Err(PerfError::Parameter("repeats must be >= 1".into()));
    }
    let mut report = BenchReport::new(*hw);
    let meta = [
        ("seed", cfg.seed.to_string()),
        ("d_m", cfg.d_m.to_string()),
        ("h", cfg.h.to_string()),
        ("d_k", cfg.d_k.to_string()),
        ("budget", cfg.budget.to_string()),
        ("repeats", cfg.repeats.to_string()),
        ("bytes_per_value", T::BYTES.to_string()),
    ];
    report
        .provenance
        .extend(meta.into_iter().map(|(k, v)| (k.to_string(), v)));
    for &n in ns {
        for &x in xs {
            if n == 0 || x == 0 {
                return Err(PerfError::Parameter("sweep values must be positive".into()));
            }
            let batch = (cfg.budget / (n * x)).max(1);
            let case = sweep_case::<T>(cfg, n, x, batch)?;
            for &mode in modes {
                let spec = WorkloadSpec {
                    n,
                    d_m: cfg.d_m,
                    h: cfg.h,
                    d_k: cfg.d_k,
                    x,
                    batch,
                    layers: 1,
                    bytes_per_value: T::BYTES,
                    architecture: crate::model::Architecture::EncoderDecoder,
                    mode,
                };
                let measured = time_attention_step(&case, mode, cfg.repeats)?;
                let profile = op_group_profile(&spec, Step::Subsequent)?;
                let predicted = roofline_predict(&profile, hw)?;
                let total = profile.total();
                report.rows.push(BenchRow {
                    kind: RowKind::Attention,
                    mode,
                    n,
                    x,
                    batch,
                    out_len: 1,
                    measured_s_per_sample: measured / batch as f64,
                    predicted_s_per_sample: predicted.total_seconds / batch as f64,
                    flops: total.flops,
                    bytes: total.bytes,
                    ai: total.ai(),
                    attention_bytes: profile.attention().bytes,
                });
            }
        }
    }
    Ok(report)
}

fn time_attention_step<T: Scalar>(
    case: &SweepCase<T>,
    mode: AttentionMode,
    repeats: usize,
) -> Result<f64> {
    let p = &case.params;
    match mode {
        AttentionMode::El => time_median(repeats, || {
            for (q, hidden) in case.queries.iter().zip(&case.hidden) {
                black_box(el_attention_rows(q, hidden, p)?);
            }
            Ok(())
        }),
        AttentionMode::MhaCached => {
            let caches = case
                .hidden
                .iter()
                .map(|hidden| KvCache::from_hidden(hidden, p))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            time_median(repeats, || {
                for (q, cache) in case.queries.iter().zip(&caches) {
                    black_box(mha_over_cache(q, cache, p)?);
                }
                Ok(())
            })
        }
        AttentionMode::MhaNoCache => time_median(repeats, || {
            for (q, hidden) in case.queries.iter().zip(&case.hidden) {
                black_box(multi_head_attention(q, hidden, p)?);
            }
            Ok(())
        }),
    }
}

/// Result of timing full generation over an input set.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub row: BenchRow,
    /// Best hypothesis tokens per input, from the last timed pass.
    pub outputs: Vec<Vec<u32>>,
}

/// Time generation of every input under `mode` and model the input-attention
/// cost: one first step and `max_out_len - 1` subsequent steps per layer.
pub fn measure<T: Scalar>(
    model: &Model<T>,
    inputs: &[Vec<u32>],
    cfg: &GenConfig,
    mode: AttentionMode,
    repeats: usize,
    hw: &RooflineSpec,
) -> Result<Measurement> {
    if inputs.is_empty() {
        return Err(PerfError::Parameter("input set is empty".into()));
    }
    if repeats < 3 {
        return Err(PerfError::Parameter(format!(
            "repeats must be >= 3, got {repeats}"
        )));
    }
    hw.validate()?;
    let mut outputs = Vec::new();
    let seconds = time_median(repeats, || {
        outputs = inputs
            .iter()
            .map(|input| {
                let hyps = run_search(model, input, cfg, mode)?;
                Ok(hyps
                    .into_iter()
                    .next()
                    .map(|h| h.tokens)
                    .unwrap_or_default())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    })?;

    let c = &model.config;
    let spec = WorkloadSpec {
        n: inputs.iter().map(Vec::len).max().unwrap_or(1),
        d_m: c.d_m,
        h: c.h,
        d_k: c.d_k,
        x: cfg.beam,
        batch: inputs.len(),
        layers: c.decoder_layers,
        bytes_per_value: T::BYTES,
        architecture: c.architecture,
        mode,
    };
    let first = op_group_profile(&spec, Step::First)?;
    let later = op_group_profile(&spec, Step::Subsequent)?;
    let steps = cfg.max_out_len as u64;
    let layers = spec.layers as u64;
    let scale = |a: GroupCost, b: GroupCost| GroupCost {
        flops: layers * (a.flops + (steps - 1) * b.flops),
        bytes: layers * (a.bytes + (steps - 1) * b.bytes),
    };
    let total = scale(first.total(), later.total());
    let attention = scale(first.attention(), later.attention());
    let predicted = layers as f64
        * (roofline_predict(&first, hw)?.total_seconds
            + (steps - 1) as f64 * roofline_predict(&later, hw)?.total_seconds);
    Ok(Measurement {
        row: BenchRow {
            kind: RowKind::Generation,
            mode,
            n: spec.n,
            x: spec.x,
            batch: spec.batch,
            out_len: cfg.max_out_len,
            measured_s_per_sample: seconds / inputs.len() as f64,
            predicted_s_per_sample: predicted / inputs.len() as f64,
            flops: total.flops,
            bytes: total.bytes,
            ai: total.ai(),
            attention_bytes: attention.bytes,
        },
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sweep_row_count_and_batch_scaling() {
        let cfg = SweepConfig {
            budget: 512,
            repeats: 1,
            ..Default::default()
        };
        let hw = RooflineSpec {
            peak_gflops: 50.0,
            peak_gbs: 20.0,
        };
        let report = sweep::<f64>(&cfg, &[8, 16], &[1, 4], &AttentionMode::ALL, &hw).unwrap();
        assert_eq!(report.rows.len(), 12);
        for row in &report.rows {
            assert_eq!(row.batch, (512 / (row.n * row.x)).max(1));
            assert!(row.measured_s_per_sample > 0.0);
            assert!(row.predicted_s_per_sample > 0.0);
        }
        assert!(matches!(
            sweep::<f64>(&cfg, &[], &[1], &AttentionMode::ALL, &hw),
            Err(PerfError::Parameter(_))
        ));
    }
}
