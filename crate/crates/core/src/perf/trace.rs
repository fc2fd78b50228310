//! Instrumented attention kernels that compute real outputs while tallying
//! every multiply-add, every value read and every value written per group.
//!
//! The kernels follow [`super::CONVENTIONS`]: each kernel call reads its
//! operands once and writes its output once. Rearranging rows between kernels
//! (slicing heads, stacking lanes) is free. Every tensor a kernel produces is
//! recorded in an allocation log so tests can check which intermediates exist.

use std::collections::BTreeMap;

use crate::attention::AttentionParams;
use crate::model::AttentionMode;
use crate::tensor::{seeded_uniform, Rng, Tensor};

use super::{GroupCounts, Result, Step, WorkloadSpec};

pub const BUILD_KV: usize = 0;
pub const QUERY_OUTPUT: usize = 1;
pub const ATTENTION: usize = 2;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tally {
    pub groups: [GroupCounts; 3],
    /// Values read per operand label, summed over all kernels.
    pub reads_by_label: BTreeMap<String, u64>,
    /// Label and shape of every kernel output.
    pub allocations: Vec<(String, Vec<usize>)>,
}

impl Tally {
    fn read(&mut self, group: usize, label: &str, t: &Tensor) {
        let len = t.len() as u64;
        self.groups[group].reads += len;
        *self.reads_by_label.entry(label.to_string()).or_default() += len;
    }

    fn write(&mut self, group: usize, label: &str, t: &Tensor) {
        self.groups[group].writes += t.len() as u64;
        self.allocations
            .push((label.to_string(), t.shape().to_vec()));
    }

    /// `a·b (+ bias)` for `a: [m x k]`, `b: [k x p]`.
    fn linear(
        &mut self,
        group: usize,
        out: &str,
        a: (&str, &Tensor),
        b: (&str, &Tensor),
        bias: Option<(&str, &Tensor)>,
    ) -> Tensor {
        let (m, k, p) = (a.1.rows(), a.1.cols(), b.1.cols());
        assert_eq!(k, b.1.rows(), "{} x {} inner dimension", a.0, b.0);
        self.read(group, a.0, a.1);
        self.read(group, b.0, b.1);
        let mut data = vec![0.0; m * p];
        for i in 0..m {
            for kk in 0..k {
                let av = a.1.data()[i * k + kk];
                for j in 0..p {
                    data[i * p + j] += av * b.1.data()[kk * p + j];
                    self.groups[group].macs += 1;
                }
            }
        }
        if let Some((label, bias)) = bias {
            self.read(group, label, bias);
            for row in data.chunks_mut(p) {
                row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
            }
        }
        let t = Tensor::new(vec![m, p], data).expect("finite kernel output");
        self.write(group, out, &t);
        t
    }

    /// `a·bᵀ` for `a: [m x k]`, `b: [p x k]`.
    fn linear_nt(
        &mut self,
        group: usize,
        out: &str,
        a: (&str, &Tensor),
        b: (&str, &Tensor),
    ) -> Tensor {
        let (m, k, p) = (a.1.rows(), a.1.cols(), b.1.rows());
        assert_eq!(k, b.1.cols(), "{} x {}ᵀ inner dimension", a.0, b.0);
        self.read(group, a.0, a.1);
        self.read(group, b.0, b.1);
        let mut data = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.1.data()[i * k + kk] * b.1.data()[j * k + kk];
                    self.groups[group].macs += 1;
                }
                data[i * p + j] = acc;
            }
        }
        let t = Tensor::new(vec![m, p], data).expect("finite kernel output");
        self.write(group, out, &t);
        t
    }

    /// Row softmax of `(scores + row_bias) / sqrt(d)`.
    fn softmax(
        &mut self,
        group: usize,
        scores: (&str, &Tensor),
        row_bias: Option<(&str, &Tensor)>,
        d: usize,
    ) -> Tensor {
        self.read(group, scores.0, scores.1);
        if let Some((label, b)) = row_bias {
            self.read(group, label, b);
        }
        let inv = 1.0 / (d as f64).sqrt();
        let n = scores.1.cols();
        let mut data = scores.1.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let shift = row_bias.map_or(0.0, |(_, b)| b.data()[r]);
            row.iter_mut().for_each(|v| *v = (*v + shift) * inv);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let t = Tensor::new(scores.1.shape().to_vec(), data).expect("finite probabilities");
        self.write(group, "probs", &t);
        t
    }
}

/// Inputs of one traced decode step: `batch` hidden-state tensors `[n x d_m]`
/// and `batch·x` query rows, lanes of input `b` at rows `b·x..(b+1)·x`.
#[derive(Debug, Clone)]
pub struct TraceCase {
    pub spec: WorkloadSpec,
    pub params: AttentionParams,
    pub hidden: Vec<Tensor>,
    pub queries: Tensor,
}

impl TraceCase {
    pub fn random(spec: &WorkloadSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let params = AttentionParams::random(spec.h, spec.d_m, spec.d_k, &mut rng, -0.5, 0.5)?;
        let hidden = (0..spec.batch)
            .map(|_| seeded_uniform(&[spec.n, spec.d_m], &mut rng, -1.0, 1.0))
            .collect::<std::result::Result<_, _>>()?;
        let queries = seeded_uniform(&[spec.batch * spec.x, spec.d_m], &mut rng, -1.0, 1.0)?;
        Ok(Self {
            spec: *spec,
            params,
            hidden,
            queries,
        })
    }
}

/// Columns `lo..hi` of a matrix.
fn columns(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let data = (0..t.rows())
        .flat_map(|r| t.row(r)[lo..hi].to_vec())
        .collect();
    Tensor::new(vec![t.rows(), hi - lo], data).expect("column slice")
}

fn stack_columns(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let data = (0..rows)
        .flat_map(|r| parts.iter().flat_map(move |p| p.row(r).to_vec()))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("column stack")
}

fn stack_rows(parts: &[&Tensor]) -> Tensor {
    Tensor::concat_rows(parts).expect("same width")
}

fn stack_vectors(parts: &[Tensor]) -> Tensor {
    let data = parts
        .iter()
        .flat_map(|p| p.data().to_vec())
        .collect::<Vec<_>>();
    Tensor::new(vec![1, data.len()], data).expect("vector stack")
}

/// One multi-head attention step. At [`Step::Subsequent`] in cached mode the
/// K/V projections happen outside the tally, as they would be read from cache.
fn trace_mha(case: &TraceCase, step: Step, cached: bool) -> (Tensor, Tally) {
    let (p, spec) = (&case.params, &case.spec);
    let (h, d_k, n, x) = (spec.h, spec.d_k, spec.n, spec.x);
    let mut tally = Tally::default();
    let mut scratch = Tally::default();

    let w_kv = stack_columns(&p.wk.iter().chain(&p.wv).collect::<Vec<_>>());
    let b_kv = stack_vectors(&p.bk.iter().chain(&p.bv).cloned().collect::<Vec<_>>());
    let all_hidden = stack_rows(&case.hidden.iter().collect::<Vec<_>>());
    let kv_tally = if cached && step == Step::Subsequent {
        &mut scratch
    } else {
        &mut tally
    };
    let kv = kv_tally.linear(
        BUILD_KV,
        "kv",
        ("H", &all_hidden),
        ("W_kv", &w_kv),
        Some(("b_kv", &b_kv)),
    );

    let w_q = stack_columns(&p.wq.iter().collect::<Vec<_>>());
    let b_q = stack_vectors(&p.bq);
    let q = tally.linear(
        QUERY_OUTPUT,
        "q",
        ("x", &case.queries),
        ("W_q", &w_q),
        Some(("b_q", &b_q)),
    );

    let mut heads_out = Vec::with_capacity(case.queries.rows());
    for lane in 0..case.queries.rows() {
        let b = lane / x;
        let kv_b = kv.slice_rows(b * n, (b + 1) * n).expect("input rows");
        let mut row = Vec::with_capacity(h * d_k);
        for i in 0..h {
            let q_i = columns(
                &q.slice_rows(lane, lane + 1).expect("lane"),
                i * d_k,
                (i + 1) * d_k,
            );
            let k_i = columns(&kv_b, i * d_k, (i + 1) * d_k);
            let v_i = columns(&kv_b, (h + i) * d_k, (h + i + 1) * d_k);
            let scores = tally.linear_nt(ATTENTION, "scores", ("q", &q_i), ("K", &k_i));
            let probs = tally.softmax(ATTENTION, ("scores", &scores), None, d_k);
            let out = tally.linear(ATTENTION, "head_out", ("probs", &probs), ("V", &v_i), None);
            row.extend_from_slice(out.data());
        }
        heads_out.push(Tensor::new(vec![1, h * d_k], row).expect("head row"));
    }
    let heads = stack_rows(&heads_out.iter().collect::<Vec<_>>());
    let w_o = stack_rows(&p.wo.iter().collect::<Vec<_>>());
    let out = tally.linear(
        QUERY_OUTPUT,
        "out",
        ("heads", &heads),
        ("W_o", &w_o),
        Some(("b_o", &p.bo)),
    );
    (out, tally)
}

/// EL query construction shared by the folded and unfolded variants:
/// returns per-head expanded queries `[lanes x d_m]` and key-bias scalars `[lanes x 1]`.
fn el_queries(case: &TraceCase, tally: &mut Tally) -> (Vec<Tensor>, Vec<Tensor>) {
    let (p, d_k) = (&case.params, case.spec.d_k);
    let w_q = stack_columns(&p.wq.iter().collect::<Vec<_>>());
    let b_q = stack_vectors(&p.bq);
    let q = tally.linear(
        QUERY_OUTPUT,
        "q",
        ("x", &case.queries),
        ("W_q", &w_q),
        Some(("b_q", &b_q)),
    );
    let mut expanded = Vec::with_capacity(case.spec.h);
    let mut key_bias = Vec::with_capacity(case.spec.h);
    for i in 0..case.spec.h {
        let q_i = columns(&q, i * d_k, (i + 1) * d_k);
        expanded.push(tally.linear_nt(QUERY_OUTPUT, "el_q", ("q", &q_i), ("W_k", &p.wk[i])));
        let bk = Tensor::new(vec![1, d_k], p.bk[i].data().to_vec()).expect("bias row");
        key_bias.push(tally.linear_nt(QUERY_OUTPUT, "key_bias", ("q", &q_i), ("b_k", &bk)));
    }
    (expanded, key_bias)
}

/// Per-head value and output projections of EL weighted sums
/// `weighted[lane][head]: [1 x d_m]`.
fn el_project(case: &TraceCase, tally: &mut Tally, weighted: &[Vec<Tensor>]) -> Tensor {
    let p = &case.params;
    let mut projected = Vec::with_capacity(case.spec.h);
    for i in 0..case.spec.h {
        let rows = stack_rows(&weighted.iter().map(|lane| &lane[i]).collect::<Vec<_>>());
        projected.push(tally.linear(
            QUERY_OUTPUT,
            "head_out",
            ("weighted", &rows),
            ("W_v", &p.wv[i]),
            None,
        ));
    }
    let heads = stack_columns(&projected.iter().collect::<Vec<_>>());
    let w_o = stack_rows(&p.wo.iter().collect::<Vec<_>>());
    let bias = p.el_output_bias().expect("consistent parameters");
    tally.linear(
        QUERY_OUTPUT,
        "out",
        ("heads", &heads),
        ("W_o", &w_o),
        Some(("b_out", &bias)),
    )
}

/// One EL step with all heads and lanes of an input folded into a single
/// score product and a single weighted sum against that input's `H`.
fn trace_el(case: &TraceCase) -> (Tensor, Tally) {
    let (h, x) = (case.spec.h, case.spec.x);
    let mut tally = Tally::default();
    let (expanded, key_bias) = el_queries(case, &mut tally);
    let mut weighted = Vec::with_capacity(case.queries.rows());
    for (b, hidden) in case.hidden.iter().enumerate() {
        let mut rows = Vec::with_capacity(x * h);
        let mut bias = Vec::with_capacity(x * h);
        for lane in b * x..(b + 1) * x {
            for i in 0..h {
                rows.push(expanded[i].slice_rows(lane, lane + 1).expect("lane"));
                bias.push(key_bias[i].data()[lane]);
            }
        }
        let folded = stack_rows(&rows.iter().collect::<Vec<_>>());
        let bias = Tensor::new(vec![x * h, 1], bias).expect("bias column");
        let scores = tally.linear_nt(ATTENTION, "scores", ("el_q", &folded), ("H", hidden));
        let probs = tally.softmax(
            ATTENTION,
            ("scores", &scores),
            Some(("key_bias", &bias)),
            case.spec.d_k,
        );
        let sums = tally.linear(
            ATTENTION,
            "weighted",
            ("probs", &probs),
            ("H", hidden),
            None,
        );
        for lane in 0..x {
            weighted.push(
                (0..h)
                    .map(|i| {
                        sums.slice_rows(lane * h + i, lane * h + i + 1)
                            .expect("row")
                    })
                    .collect(),
            );
        }
    }
    let out = el_project(case, &mut tally, &weighted);
    (out, tally)
}

/// EL without folding: one score product and one weighted sum per lane and
/// head, each reading that input's `H` again.
pub fn trace_el_unfolded(case: &TraceCase) -> (Tensor, Tally) {
    let (h, x) = (case.spec.h, case.spec.x);
    let mut tally = Tally::default();
    let (expanded, key_bias) = el_queries(case, &mut tally);
    let mut weighted = Vec::with_capacity(case.queries.rows());
    for lane in 0..case.queries.rows() {
        let hidden = &case.hidden[lane / x];
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let q = expanded[i].slice_rows(lane, lane + 1).expect("lane");
            let bias = Tensor::new(vec![1, 1], vec![key_bias[i].data()[lane]]).expect("scalar");
            let scores = tally.linear_nt(ATTENTION, "scores", ("el_q", &q), ("H", hidden));
            let probs = tally.softmax(
                ATTENTION,
                ("scores", &scores),
                Some(("key_bias", &bias)),
                case.spec.d_k,
            );
            heads.push(tally.linear(
                ATTENTION,
                "weighted",
                ("probs", &probs),
                ("H", hidden),
                None,
            ));
        }
        weighted.push(heads);
    }
    let out = el_project(case, &mut tally, &weighted);
    (out, tally)
}

/// Run one decode step of `case.spec.mode` and return its output
/// `[batch·x x d_m]` with the tally.
pub fn trace_attention_step(case: &TraceCase, step: Step) -> (Tensor, Tally) {
    match case.spec.mode {
        AttentionMode::MhaNoCache => trace_mha(case, step, false),
        AttentionMode::MhaCached => trace_mha(case, step, true),
        AttentionMode::El => trace_el(case),
    }
}
