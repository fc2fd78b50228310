//! Scaled dot-product attention, multi-head attention (with and without an
//! incremental key/value cache) and EL-attention.
//!
//! EL-attention never projects the hidden state into per-head keys or values.
//! Each head's query is expanded back to model width,
//! `EL-Q_i = (q·Wq_i + bq_i)·Wk_iᵀ`, scored directly against the raw hidden
//! state `H`, and the weighted sum `Prob_i·H` is pushed through
//! `Wv_i·Wo_i` afterwards. The key bias contributes the per-row constant
//! `s_i = (q·Wq_i + bq_i)·bk_iᵀ` to the scores and the value bias contributes
//! `bv_i·Wo_i` to the output, which makes the result identical to multi-head
//! attention with biases.

use thiserror::Error;

use crate::tensor::{
    matmul, matmul_nt, scaled_softmax_rows, seeded_uniform, softmax_in_place, Rng, Scalar, Tensor,
    TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("attention context is empty")]
    EmptyContext,
    #[error("prefix hidden state is empty")]
    EmptyPrefix,
    #[error("{0}")]
    Shape(String),
    #[error("cache does not match attention parameters: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Weights and biases of one attention sub-layer.
///
/// Per-head matrices are stored separately: `wq[i]`, `wk[i]`, `wv[i]` are
/// `d_m x d_k`, `wo[i]` is `d_k x d_m`, per-head biases have length `d_k`
/// and `bo` (length `d_m`) is added once after summing the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = f64> {
    pub h: usize,
    pub d_m: usize,
    pub d_k: usize,
    pub wq: Vec<Tensor<T>>,
    pub wk: Vec<Tensor<T>>,
    pub wv: Vec<Tensor<T>>,
    pub wo: Vec<Tensor<T>>,
    pub bq: Vec<Tensor<T>>,
    pub bk: Vec<Tensor<T>>,
    pub bv: Vec<Tensor<T>>,
    pub bo: Tensor<T>,
    pub include_key_bias: bool,
    pub include_value_bias: bool,
}

impl<T: Scalar> AttentionParams<T> {
    /// Draw every weight from `U[lo, hi)` in the order
    /// `wq[..], wk[..], wv[..], wo[..], bq[..], bk[..], bv[..], bo`.
    pub fn random(
        h: usize,
        d_m: usize,
        d_k: usize,
        rng: &mut Rng,
        lo: f64,
        hi: f64,
    ) -> Result<Self> {
        let mut draw = |shape: &[usize]| seeded_uniform::<T>(shape, rng, lo, hi);
        let mut heads = |shape: &[usize]| -> Result<Vec<Tensor<T>>> {
            (0..h).map(|_| draw(shape).map_err(Into::into)).collect()
        };
        let wq = heads(&[d_m, d_k])?;
        let wk = heads(&[d_m, d_k])?;
        let wv = heads(&[d_m, d_k])?;
        let wo = heads(&[d_k, d_m])?;
        let bq = heads(&[d_k])?;
        let bk = heads(&[d_k])?;
        let bv = heads(&[d_k])?;
        let bo = seeded_uniform(&[d_m], rng, lo, hi)?;
        let params = Self {
            h,
            d_m,
            d_k,
            wq,
            wk,
            wv,
            wo,
            bq,
            bk,
            bv,
            bo,
            include_key_bias: true,
            include_value_bias: true,
        };
        params.validate()?;
        Ok(params)
    }

    /// All tensors in their fixed traversal order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::with_capacity(7 * self.h + 1);
        for group in [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.bq, &self.bk, &self.bv,
        ] {
            out.extend(group.iter());
        }
        out.push(&self.bo);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(7 * self.h + 1);
        for group in [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bq,
            &mut self.bk,
            &mut self.bv,
        ] {
            out.extend(group.iter_mut());
        }
        out.push(&mut self.bo);
        out
    }

    /// Shapes in traversal order for the given dimensions.
    pub fn tensor_shapes(h: usize, d_m: usize, d_k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for shape in [
            vec![d_m, d_k],
            vec![d_m, d_k],
            vec![d_m, d_k],
            vec![d_k, d_m],
            vec![d_k],
            vec![d_k],
            vec![d_k],
        ] {
            out.extend(std::iter::repeat_n(shape, h));
        }
        out.push(vec![d_m]);
        out
    }

    pub fn parameter_count(h: usize, d_m: usize, d_k: usize) -> usize {
        4 * h * d_m * d_k + 3 * h * d_k + d_m
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.d_m == 0 || self.d_k == 0 {
            return Err(AttentionError::Shape(
                "h, d_m and d_k must be positive".into(),
            ));
        }
        let expected = Self::tensor_shapes(self.h, self.d_m, self.d_k);
        let tensors = self.tensors();
        if tensors.len() != expected.len() {
            return Err(AttentionError::Shape(format!(
                "expected {} tensors for h={}, got {}",
                expected.len(),
                self.h,
                tensors.len()
            )));
        }
        for (t, shape) in tensors.iter().zip(&expected) {
            if t.shape() != &shape[..] {
                return Err(AttentionError::Shape(format!(
                    "weight shape {:?} does not match expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AttentionParams<U> {
        let c = |v: &Vec<Tensor<T>>| v.iter().map(Tensor::cast).collect();
        AttentionParams {
            h: self.h,
            d_m: self.d_m,
            d_k: self.d_k,
            wq: c(&self.wq),
            wk: c(&self.wk),
            wv: c(&self.wv),
            wo: c(&self.wo),
            bq: c(&self.bq),
            bk: c(&self.bk),
            bv: c(&self.bv),
            bo: self.bo.cast(),
            include_key_bias: self.include_key_bias,
            include_value_bias: self.include_value_bias,
        }
    }

    fn check_width(&self, t: &Tensor<T>, what: &str) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != self.d_m {
            return Err(AttentionError::Shape(format!(
                "{what} has shape {:?}, expected [_, {}]",
                t.shape(),
                self.d_m
            )));
        }
        Ok(())
    }

    /// `x·Wq_i + bq_i` for every row of `x`.
    pub fn project_query(&self, x: &Tensor<T>, head: usize) -> Result<Tensor<T>> {
        Ok(matmul(x, &self.wq[head])?.add_row(&self.bq[head])?)
    }

    /// `x·Wk_i (+ bk_i)`.
    pub fn project_key(&self, x: &Tensor<T>, head: usize) -> Result<Tensor<T>> {
        let k = matmul(x, &self.wk[head])?;
        Ok(if self.include_key_bias {
            k.add_row(&self.bk[head])?
        } else {
            k
        })
    }

    /// `x·Wv_i (+ bv_i)`.
    pub fn project_value(&self, x: &Tensor<T>, head: usize) -> Result<Tensor<T>> {
        let v = matmul(x, &self.wv[head])?;
        Ok(if self.include_value_bias {
            v.add_row(&self.bv[head])?
        } else {
            v
        })
    }

    /// `bo + Σ_i bv_i·Wo_i` (the value-bias part only when enabled): the
    /// query-independent output term of EL-attention.
    pub fn el_output_bias(&self) -> Result<Tensor<T>> {
        let mut bias = self.bo.reshape(&[1, self.d_m])?;
        if self.include_value_bias {
            for i in 0..self.h {
                let bv = self.bv[i].reshape(&[1, self.d_k])?;
                bias = bias.add(&matmul(&bv, &self.wo[i])?)?;
            }
        }
        Ok(bias)
    }
}

/// `softmax(q·Kᵀ / sqrt(d_norm))·V`.
pub fn single_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    d_norm: usize,
) -> Result<Tensor<T>> {
    if k.rows() == 0 || v.rows() == 0 {
        return Err(AttentionError::EmptyContext);
    }
    if k.rows() != v.rows() {
        return Err(AttentionError::Shape(format!(
            "key rows {} != value rows {}",
            k.rows(),
            v.rows()
        )));
    }
    let probs = scaled_softmax_rows(&matmul_nt(q, k)?, d_norm)?;
    Ok(matmul(&probs, v)?)
}

/// Multi-head attention with `K = V = H`. Every row of `q` is an independent
/// query; the result has one output row per query row.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    hidden: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    params.check_width(q, "query")?;
    params.check_width(hidden, "hidden state")?;
    if hidden.rows() == 0 {
        return Err(AttentionError::EmptyContext);
    }
    let mut out = Tensor::zeros(&[q.rows(), params.d_m]);
    for i in 0..params.h {
        let qi = params.project_query(q, i)?;
        let ki = params.project_key(hidden, i)?;
        let vi = params.project_value(hidden, i)?;
        let head = single_head_attention(&qi, &ki, &vi, params.d_k)?;
        out = out.add(&matmul(&head, &params.wo[i])?)?;
    }
    Ok(out.add_row(&params.bo)?)
}

/// Causal self-attention over all rows of `x`: row `r` attends to rows `0..=r`.
/// Keys and values are projected once for the whole sequence.
pub fn causal_multi_head_attention<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    params.check_width(x, "hidden state")?;
    let n = x.rows();
    if n == 0 {
        return Err(AttentionError::EmptyContext);
    }
    let mut out = Tensor::zeros(&[n, params.d_m]);
    for i in 0..params.h {
        let qi = params.project_query(x, i)?;
        let ki = params.project_key(x, i)?;
        let vi = params.project_value(x, i)?;
        let mut heads = Vec::with_capacity(n * params.d_k);
        for r in 0..n {
            let q_row = qi.slice_rows(r, r + 1)?;
            let att = single_head_attention(
                &q_row,
                &ki.slice_rows(0, r + 1)?,
                &vi.slice_rows(0, r + 1)?,
                params.d_k,
            )?;
            heads.extend_from_slice(att.data());
        }
        let heads = Tensor::new(vec![n, params.d_k], heads)?;
        out = out.add(&matmul(&heads, &params.wo[i])?)?;
    }
    Ok(out.add_row(&params.bo)?)
}

/// Per-head projected keys and values of the positions seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T = f64> {
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
    d_k: usize,
    projected_rows: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(h: usize, d_k: usize) -> Self {
        Self {
            keys: (0..h).map(|_| Tensor::zeros(&[0, d_k])).collect(),
            values: (0..h).map(|_| Tensor::zeros(&[0, d_k])).collect(),
            d_k,
            projected_rows: 0,
        }
    }

    /// Cache holding the projections of every row of `hidden`.
    pub fn from_hidden(hidden: &Tensor<T>, params: &AttentionParams<T>) -> Result<Self> {
        let mut cache = Self::new(params.h, params.d_k);
        cache.append(hidden, params)?;
        Ok(cache)
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn heads(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, head: usize) -> &Tensor<T> {
        &self.keys[head]
    }

    pub fn values(&self, head: usize) -> &Tensor<T> {
        &self.values[head]
    }

    /// How many hidden rows have been projected into this cache in total.
    pub fn projected_rows(&self) -> usize {
        self.projected_rows
    }

    pub fn byte_size(&self) -> usize {
        self.keys
            .iter()
            .chain(&self.values)
            .map(Tensor::byte_size)
            .sum()
    }

    fn check(&self, params: &AttentionParams<T>) -> Result<()> {
        if self.heads() != params.h || self.d_k != params.d_k {
            return Err(AttentionError::State(format!(
                "cache has {} heads of width {}, params have {} heads of width {}",
                self.heads(),
                self.d_k,
                params.h,
                params.d_k
            )));
        }
        Ok(())
    }

    /// Project the rows of `hidden` and append them.
    pub fn append(&mut self, hidden: &Tensor<T>, params: &AttentionParams<T>) -> Result<()> {
        self.check(params)?;
        params.check_width(hidden, "hidden state")?;
        for i in 0..params.h {
            let k = params.project_key(hidden, i)?;
            let v = params.project_value(hidden, i)?;
            for r in 0..hidden.rows() {
                self.keys[i].push_row(k.row(r))?;
                self.values[i].push_row(v.row(r))?;
            }
        }
        self.projected_rows += hidden.rows();
        Ok(())
    }
}

/// Multi-head attention of `q` over the positions already in `cache`.
pub fn mha_over_cache<T: Scalar>(
    q: &Tensor<T>,
    cache: &KvCache<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    cache.check(params)?;
    params.check_width(q, "query")?;
    if cache.is_empty() {
        return Err(AttentionError::EmptyContext);
    }
    let mut out = Tensor::zeros(&[q.rows(), params.d_m]);
    for i in 0..params.h {
        let qi = params.project_query(q, i)?;
        let head = single_head_attention(&qi, cache.keys(i), cache.values(i), params.d_k)?;
        out = out.add(&matmul(&head, &params.wo[i])?)?;
    }
    Ok(out.add_row(&params.bo)?)
}

/// One incremental decoding step: project `new_hidden` into the cache, then
/// attend over every cached position.
pub fn mha_incremental_step<T: Scalar>(
    q: &Tensor<T>,
    new_hidden: &Tensor<T>,
    cache: &mut KvCache<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    cache.append(new_hidden, params)?;
    mha_over_cache(q, cache, params)
}

/// Raw hidden states used as both key and value by EL-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenCache<T = f64> {
    hidden: Tensor<T>,
}

impl<T: Scalar> HiddenCache<T> {
    pub fn new(hidden: Tensor<T>) -> Self {
        Self { hidden }
    }

    pub fn hidden(&self) -> &Tensor<T> {
        &self.hidden
    }

    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_size(&self) -> usize {
        self.hidden.byte_size()
    }
}

/// Expanded queries for `g` query rows: `queries` is `[(g·h) x d_m]`, head-major
/// within each logical query, and `key_bias` holds the matching `s_i` scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ElQuery<T = f64> {
    pub queries: Tensor<T>,
    pub key_bias: Tensor<T>,
}

/// Build `EL-Q_i = (q·Wq_i + bq_i)·Wk_iᵀ` and `s_i = (q·Wq_i + bq_i)·bk_iᵀ`
/// for every row of `q`.
pub fn build_el_query<T: Scalar>(q: &Tensor<T>, params: &AttentionParams<T>) -> Result<ElQuery<T>> {
    params.check_width(q, "query")?;
    let g = q.rows();
    let (h, d_m) = (params.h, params.d_m);
    let mut queries = vec![T::zero(); g * h * d_m];
    let mut key_bias = vec![T::zero(); g * h];
    for i in 0..h {
        let qi = params.project_query(q, i)?;
        let expanded = matmul_nt(&qi, &params.wk[i])?;
        for r in 0..g {
            let dst = (r * h + i) * d_m;
            queries[dst..dst + d_m].copy_from_slice(expanded.row(r));
            if params.include_key_bias {
                key_bias[r * h + i] = qi
                    .row(r)
                    .iter()
                    .zip(params.bk[i].data())
                    .map(|(&a, &b)| a * b)
                    .sum();
            }
        }
    }
    Ok(ElQuery {
        queries: Tensor::new(vec![g * h, d_m], queries)?,
        key_bias: Tensor::new(vec![g * h], key_bias)?,
    })
}

/// Per-head attention probabilities of EL-attention for one query row:
/// `softmax((EL-Q_i·Hᵀ + s_i) / sqrt(d_k))`, returned as `[h x n]`.
pub fn el_probabilities<T: Scalar>(
    q: &Tensor<T>,
    hidden: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    if hidden.rows() == 0 {
        return Err(AttentionError::EmptyContext);
    }
    params.check_width(hidden, "hidden state")?;
    let elq = build_el_query(&q.slice_rows(0, 1)?, params)?;
    let n = hidden.rows();
    let inv = T::one() / T::from_f64(params.d_k as f64).sqrt();
    let mut data = matmul_nt(&elq.queries, hidden)?.into_data();
    for (row, &s) in data.chunks_mut(n).zip(elq.key_bias.data()) {
        row.iter_mut().for_each(|v| *v = *v + s);
        softmax_in_place(row, inv);
    }
    Ok(Tensor::new(vec![params.h, n], data)?)
}

/// EL-attention of a single query row over `hidden`, head by head.
pub fn el_attention<T: Scalar>(
    q: &Tensor<T>,
    hidden: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    params.check_width(q, "query")?;
    if q.rows() != 1 {
        return Err(AttentionError::Shape(format!(
            "el_attention takes one query row, got {}",
            q.rows()
        )));
    }
    let probs = el_probabilities(q, hidden, params)?;
    let mut out = params.el_output_bias()?;
    for i in 0..params.h {
        let weighted = matmul(&probs.slice_rows(i, i + 1)?, hidden)?;
        let head = matmul(&matmul(&weighted, &params.wv[i])?, &params.wo[i])?;
        out = out.add(&head)?;
    }
    Ok(out)
}

/// EL-attention for `g` logical queries sharing one hidden state.
///
/// `queries` holds the `g·h` expanded query rows (head-major within each
/// logical query, logical queries outermost) and `bias_scalars` the matching
/// `s_i`. All score rows come from one product against `H` and all weighted
/// sums from a second one, so `H` is read twice per call regardless of `g`
/// and `h`. Returns `[g x d_m]`.
pub fn el_attention_folded<T: Scalar>(
    queries: &Tensor<T>,
    hidden: &Tensor<T>,
    bias_scalars: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    params.check_width(queries, "expanded queries")?;
    params.check_width(hidden, "hidden state")?;
    let rows = queries.rows();
    if !rows.is_multiple_of(params.h) {
        return Err(AttentionError::Shape(format!(
            "{rows} expanded query rows are not divisible by h={}",
            params.h
        )));
    }
    if bias_scalars.len() != rows {
        return Err(AttentionError::Shape(format!(
            "{} key-bias scalars for {rows} query rows",
            bias_scalars.len()
        )));
    }
    let n = hidden.rows();
    if n == 0 {
        return Err(AttentionError::EmptyContext);
    }
    let g = rows / params.h;
    let inv = T::one() / T::from_f64(params.d_k as f64).sqrt();
    let mut scores = matmul_nt(queries, hidden)?.into_data();
    for (row, &s) in scores.chunks_mut(n).zip(bias_scalars.data()) {
        row.iter_mut().for_each(|v| *v = *v + s);
        softmax_in_place(row, inv);
    }
    let probs = Tensor::new(vec![rows, n], scores)?;
    let weighted = matmul(&probs, hidden)?;

    let bias = params.el_output_bias()?;
    let mut out = Vec::with_capacity(g * params.d_m);
    for lane in 0..g {
        let mut acc = bias.clone();
        for i in 0..params.h {
            let r = lane * params.h + i;
            let x = weighted.slice_rows(r, r + 1)?;
            acc = acc.add(&matmul(&matmul(&x, &params.wv[i])?, &params.wo[i])?)?;
        }
        out.extend_from_slice(acc.data());
    }
    Ok(Tensor::new(vec![g, params.d_m], out)?)
}

/// EL-attention of every row of `q` via the folded kernel.
pub fn el_attention_rows<T: Scalar>(
    q: &Tensor<T>,
    hidden: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    let elq = build_el_query(q, params)?;
    el_attention_folded(&elq.queries, hidden, &elq.key_bias, params)
}

/// Self-attention of a decoder-only model where the prefix is kept as raw
/// hidden states and generated positions live in a key/value cache.
///
/// Prefix scores come from the expanded query, generated-position scores from
/// the projected query and cached keys. Both parts share one softmax, then the
/// prefix part is summed over `H` and mapped through `Wv_i·Wo_i` while the
/// generated part uses the cached values and `Wo_i`.
pub fn mixed_self_attention<T: Scalar>(
    q: &Tensor<T>,
    prefix: &HiddenCache<T>,
    generated: &KvCache<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    params.check_width(q, "query")?;
    generated.check(params)?;
    if prefix.is_empty() {
        return Err(AttentionError::EmptyPrefix);
    }
    if q.rows() != 1 {
        return Err(AttentionError::Shape(format!(
            "mixed_self_attention takes one query row, got {}",
            q.rows()
        )));
    }
    let hidden = prefix.hidden();
    params.check_width(hidden, "prefix hidden state")?;
    let (t_in, t_out) = (hidden.rows(), generated.len());
    let elq = build_el_query(q, params)?;
    let prefix_scores = matmul_nt(&elq.queries, hidden)?;
    let inv = T::one() / T::from_f64(params.d_k as f64).sqrt();

    let mut out = params.bo.reshape(&[1, params.d_m])?;
    for i in 0..params.h {
        let mut row: Vec<T> = prefix_scores
            .row(i)
            .iter()
            .map(|&v| v + elq.key_bias.data()[i])
            .collect();
        if t_out > 0 {
            let qi = params.project_query(q, i)?;
            row.extend_from_slice(matmul_nt(&qi, generated.keys(i))?.data());
        }
        softmax_in_place(&mut row, inv);
        let p_in = Tensor::row_vector(row[..t_in].to_vec())?;
        let mut head = matmul(
            &matmul(&matmul(&p_in, hidden)?, &params.wv[i])?,
            &params.wo[i],
        )?;
        if params.include_value_bias {
            let mass: T = row[..t_in].iter().copied().sum();
            let bias = params.bv[i].reshape(&[1, params.d_k])?.scale(mass)?;
            head = head.add(&matmul(&bias, &params.wo[i])?)?;
        }
        if t_out > 0 {
            let p_out = Tensor::row_vector(row[t_in..].to_vec())?;
            head = head.add(&matmul(
                &matmul(&p_out, generated.values(i))?,
                &params.wo[i],
            )?)?;
        }
        out = out.add(&head)?;
    }
    Ok(out)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn identity_params(d_m: usize) -> AttentionParams {
        let eye = Tensor::eye(d_m);
        let zero = Tensor::zeros(&[d_m]);
        AttentionParams {
            h: 1,
            d_m,
            d_k: d_m,
            wq: vec![eye.clone()],
            wk: vec![eye.clone()],
            wv: vec![eye.clone()],
            wo: vec![eye],
            bq: vec![zero.clone()],
            bk: vec![zero.clone()],
            bv: vec![zero.clone()],
            bo: zero,
            include_key_bias: true,
            include_value_bias: true,
        }
    }

    fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
        seeded_uniform(shape, rng, -1.0, 1.0).unwrap()
    }

    fn row_mean(h: &Tensor) -> Vec<f64> {
        (0..h.cols())
            .map(|j| (0..h.rows()).map(|r| h.row(r)[j]).sum::<f64>() / h.rows() as f64)
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn single_head_cases() {
        let mut rng = Rng::new(1);
        let v = rand(&[4, 8], &mut rng);
        let k = rand(&[4, 8], &mut rng);
        let zero_q = Tensor::zeros(&[1, 8]);
        let out = single_head_attention(&zero_q, &k, &v, 8).unwrap();
        assert_close(out.data(), &row_mean(&v), 1e-15);

        let one = single_head_attention(
            &zero_q,
            &k.slice_rows(0, 1).unwrap(),
            &v.slice_rows(0, 1).unwrap(),
            8,
        )
        .unwrap();
        assert_eq!(one.data(), v.row(0));

        let q = rand(&[1, 8], &mut rng);
        let scores: Vec<f64> = (0..4)
            .map(|r| {
                q.row(0)
                    .iter()
                    .zip(k.row(r))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / 8f64.sqrt()
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let expect: Vec<f64> = (0..8)
            .map(|j| (0..4).map(|r| scores[r].exp() / z * v.row(r)[j]).sum())
            .collect();
        assert_close(
            single_head_attention(&q, &k, &v, 8).unwrap().data(),
            &expect,
            1e-12,
        );

        let empty = Tensor::zeros(&[0, 8]);
        assert_eq!(
            single_head_attention(&q, &empty, &empty, 8).unwrap_err(),
            AttentionError::EmptyContext
        );
    }

    #[test]
    fn mha_identity_and_zero_value_path() {
        let mut rng = Rng::new(2);
        let h = rand(&[5, 6], &mut rng);
        let out = multi_head_attention(&Tensor::zeros(&[1, 6]), &h, &identity_params(6)).unwrap();
        assert_close(out.data(), &row_mean(&h), 1e-15);

        let mut p = AttentionParams::<f64>::random(2, 6, 3, &mut rng, -0.5, 0.5).unwrap();
        for i in 0..2 {
            p.wv[i] = Tensor::zeros(&[6, 3]);
            p.bv[i] = Tensor::zeros(&[3]);
        }
        let q = rand(&[1, 6], &mut rng);
        assert_close(
            multi_head_attention(&q, &h, &p).unwrap().data(),
            p.bo.data(),
            1e-15,
        );
    }

    #[test]
    fn mha_matches_per_head_loop() {
        let mut rng = Rng::new(3);
        let (heads, d_m, n) = (4, 16, 7);
        let p = AttentionParams::<f64>::random(heads, d_m, 4, &mut rng, -0.5, 0.5).unwrap();
        let q = rand(&[1, d_m], &mut rng);
        let hid = rand(&[n, d_m], &mut rng);
        let mut expect = p.bo.data().to_vec();
        for i in 0..heads {
            let proj = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
                (0..4)
                    .map(|c| {
                        (0..d_m).map(|t| x[t] * w.data()[t * 4 + c]).sum::<f64>() + b.data()[c]
                    })
                    .collect()
            };
            let qi = proj(q.row(0), &p.wq[i], &p.bq[i]);
            let ks: Vec<Vec<f64>> = (0..n)
                .map(|r| proj(hid.row(r), &p.wk[i], &p.bk[i]))
                .collect();
            let vs: Vec<Vec<f64>> = (0..n)
                .map(|r| proj(hid.row(r), &p.wv[i], &p.bv[i]))
                .collect();
            let s: Vec<f64> = ks
                .iter()
                .map(|k| k.iter().zip(&qi).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            let att: Vec<f64> = (0..4)
                .map(|c| (0..n).map(|r| (s[r] - m).exp() / z * vs[r][c]).sum())
                .collect();
            for j in 0..d_m {
                expect[j] += (0..4)
                    .map(|c| att[c] * p.wo[i].data()[c * d_m + j])
                    .sum::<f64>();
            }
        }
        assert_close(
            multi_head_attention(&q, &hid, &p).unwrap().data(),
            &expect,
            1e-12,
        );
    }

    #[test]
    fn incremental_matches_from_scratch() {
        let mut rng = Rng::new(4);
        let p = AttentionParams::<f64>::random(2, 8, 4, &mut rng, -0.5, 0.5).unwrap();
        let history = rand(&[5, 8], &mut rng);
        let mut cache = KvCache::new(2, 4);
        for t in 0..5 {
            let q = rand(&[1, 8], &mut rng);
            let step =
                mha_incremental_step(&q, &history.slice_rows(t, t + 1).unwrap(), &mut cache, &p)
                    .unwrap();
            let full =
                multi_head_attention(&q, &history.slice_rows(0, t + 1).unwrap(), &p).unwrap();
            if t == 0 {
                assert_eq!(step, full);
            }
            assert!(step.max_abs_diff(&full) <= 1e-12);
            assert_eq!(cache.len(), t + 1);
        }
        // each position projected exactly once
        assert_eq!(cache.projected_rows(), 5);
    }

    #[test]
    fn cache_param_mismatch_is_state_error() {
        let mut rng = Rng::new(5);
        let p = AttentionParams::<f64>::random(2, 8, 4, &mut rng, -0.5, 0.5).unwrap();
        let mut cache = KvCache::new(3, 4);
        let x = rand(&[1, 8], &mut rng);
        assert!(matches!(
            mha_incremental_step(&x, &x, &mut cache, &p),
            Err(AttentionError::State(_))
        ));
    }

    #[test]
    fn el_query_cases() {
        let q = Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap();
        let elq = build_el_query(&q, &identity_params(3)).unwrap();
        assert_eq!(elq.queries, q);
        assert_eq!(elq.key_bias.data(), &[0.0]);

        let mut rng = Rng::new(6);
        let mut p = AttentionParams::<f64>::random(2, 4, 2, &mut rng, -0.5, 0.5).unwrap();
        for i in 0..2 {
            p.bq[i] = Tensor::zeros(&[2]);
        }
        let elq = build_el_query(&Tensor::zeros(&[1, 4]), &p).unwrap();
        assert!(elq.queries.data().iter().all(|&v| v == 0.0));
        assert!(elq.key_bias.data().iter().all(|&v| v == 0.0));

        let p = AttentionParams::<f64>::random(3, 5, 2, &mut rng, -0.5, 0.5).unwrap();
        let q = rand(&[1, 5], &mut rng);
        let elq = build_el_query(&q, &p).unwrap();
        for i in 0..3 {
            let qi: Vec<f64> = (0..2)
                .map(|c| {
                    (0..5)
                        .map(|t| q.row(0)[t] * p.wq[i].data()[t * 2 + c])
                        .sum::<f64>()
                        + p.bq[i].data()[c]
                })
                .collect();
            let expect: Vec<f64> = (0..5)
                .map(|j| (0..2).map(|c| qi[c] * p.wk[i].data()[j * 2 + c]).sum())
                .collect();
            assert_close(elq.queries.row(i), &expect, 1e-12);
            let s: f64 = (0..2).map(|c| qi[c] * p.bk[i].data()[c]).sum();
            assert!((elq.key_bias.data()[i] - s).abs() <= 1e-12);
        }
    }

    #[test]
    fn el_matches_mha_and_identity_case() {
        let mut rng = Rng::new(7);
        let hid = rand(&[6, 8], &mut rng);
        let out = el_attention(&Tensor::zeros(&[1, 8]), &hid, &identity_params(8)).unwrap();
        assert_close(out.data(), &row_mean(&hid), 1e-15);

        for (h, d_m, d_k, n) in [(1, 8, 8, 1), (2, 8, 3, 4), (4, 16, 4, 9), (8, 16, 3, 2)] {
            let p = AttentionParams::<f64>::random(h, d_m, d_k, &mut rng, -1.0, 1.0).unwrap();
            let q = rand(&[1, d_m], &mut rng);
            let hid = rand(&[n, d_m], &mut rng);
            let el = el_attention(&q, &hid, &p).unwrap();
            let mha = multi_head_attention(&q, &hid, &p).unwrap();
            assert!(el.max_abs_diff(&mha) <= 1e-10);
        }
    }

    #[test]
    fn key_bias_does_not_change_probabilities() {
        let mut rng = Rng::new(8);
        let mut p = AttentionParams::<f64>::random(4, 8, 2, &mut rng, -1.0, 1.0).unwrap();
        let q = rand(&[1, 8], &mut rng);
        let hid = rand(&[5, 8], &mut rng);
        let with = el_probabilities(&q, &hid, &p).unwrap();
        let el_with = el_attention(&q, &hid, &p).unwrap();
        p.include_key_bias = false;
        let without = el_probabilities(&q, &hid, &p).unwrap();
        assert!(with.max_abs_diff(&without) <= 1e-12);
        // consistent flags on both paths still agree
        let el_without = el_attention(&q, &hid, &p).unwrap();
        assert!(el_without.max_abs_diff(&multi_head_attention(&q, &hid, &p).unwrap()) <= 1e-10);
        assert!(el_without.max_abs_diff(&el_with) <= 1e-12);
    }

    #[test]
    fn value_bias_flag_is_consistent_across_paths() {
        let mut rng = Rng::new(9);
        let mut p = AttentionParams::<f64>::random(2, 6, 3, &mut rng, -1.0, 1.0).unwrap();
        p.include_value_bias = false;
        let q = rand(&[1, 6], &mut rng);
        let hid = rand(&[4, 6], &mut rng);
        assert!(
            el_attention(&q, &hid, &p)
                .unwrap()
                .max_abs_diff(&multi_head_attention(&q, &hid, &p).unwrap())
                <= 1e-10
        );
    }

    #[test]
    fn el_empty_context_errors() {
        let p = identity_params(4);
        assert_eq!(
            el_attention(&Tensor::zeros(&[1, 4]), &Tensor::zeros(&[0, 4]), &p).unwrap_err(),
            AttentionError::EmptyContext
        );
    }

    #[test]
    fn folded_matches_per_query() {
        let mut rng = Rng::new(10);
        let p = AttentionParams::<f64>::random(4, 8, 2, &mut rng, -1.0, 1.0).unwrap();
        let hid = rand(&[7, 8], &mut rng);
        for g in [1, 4] {
            let qs = rand(&[g, 8], &mut rng);
            let elq = build_el_query(&qs, &p).unwrap();
            let folded = el_attention_folded(&elq.queries, &hid, &elq.key_bias, &p).unwrap();
            for r in 0..g {
                let single = el_attention(&qs.slice_rows(r, r + 1).unwrap(), &hid, &p).unwrap();
                assert_close(folded.row(r), single.data(), 1e-12);
            }
        }
        let bad = rand(&[3, 8], &mut rng);
        assert!(matches!(
            el_attention_folded(&bad, &hid, &Tensor::zeros(&[3]), &p),
            Err(AttentionError::Shape(_))
        ));
    }

    #[test]
    fn mixed_attention_cases() {
        let mut rng = Rng::new(11);
        let p = AttentionParams::<f64>::random(4, 8, 3, &mut rng, -1.0, 1.0).unwrap();
        let prefix = rand(&[5, 8], &mut rng);
        let generated = rand(&[3, 8], &mut rng);
        let q = rand(&[1, 8], &mut rng);
        let hc = HiddenCache::new(prefix.clone());

        let empty = KvCache::new(4, 3);
        let only_prefix = mixed_self_attention(&q, &hc, &empty, &p).unwrap();
        assert!(only_prefix.max_abs_diff(&el_attention(&q, &prefix, &p).unwrap()) <= 1e-12);

        let cache = KvCache::from_hidden(&generated, &p).unwrap();
        let mixed = mixed_self_attention(&q, &hc, &cache, &p).unwrap();
        let all = Tensor::concat_rows(&[&prefix, &generated]).unwrap();
        assert!(mixed.max_abs_diff(&multi_head_attention(&q, &all, &p).unwrap()) <= 1e-10);

        assert_eq!(
            mixed_self_attention(&q, &HiddenCache::new(Tensor::zeros(&[0, 8])), &cache, &p)
                .unwrap_err(),
            AttentionError::EmptyPrefix
        );
    }

    #[test]
    fn mixed_attention_two_positions_by_hand() {
        let p = identity_params(2);
        let x0 = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let x1 = Tensor::from_f64(&[1, 2], &[0.0, 2.0]).unwrap();
        let q = Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        let cache = KvCache::from_hidden(&x1, &p).unwrap();
        let out = mixed_self_attention(&q, &HiddenCache::new(x0), &cache, &p).unwrap();
        // scores 0.5 and 1.0, scaled by 1/sqrt(2)
        let (s0, s1) = (0.5 / 2f64.sqrt(), 1.0 / 2f64.sqrt());
        let w0 = s0.exp() / (s0.exp() + s1.exp());
        let w1 = 1.0 - w0;
        assert_close(out.data(), &[w0, 2.0 * w1], 1e-14);
    }
}
