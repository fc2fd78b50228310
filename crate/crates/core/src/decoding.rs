//! Greedy, beam and diverse beam search over [`Model::decoder_step`].
//!
//! All strategies share one loop. Live hypotheses are split into `G` groups
//! of `beam / G` lanes; group `g` is expanded after groups `0..g` and every
//! candidate token pays `λ` per earlier-group selection of the same token at
//! this step. Within a group the top `beam / G` candidates by accumulated
//! log-probability are kept; ties go to the lower token id, then the lower
//! lane. A kept candidate ending in eos, or reaching `max_out_len`, moves to
//! the group's finished pool with score `logprob_sum / len^α`, where `len`
//! counts the eos token. A group stops once its live set is empty, or its
//! pool is full and the worst pooled score is at least the best score any
//! live hypothesis could still reach. Beam search is `G = 1`; greedy search
//! is beam search with one lane.
//!
//! Reserved ids: pad and bos are never generated, and eos is banned while
//! fewer than `min_out_len` tokens have been produced.

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::{
    Architecture, AttentionMode, DecoderInput, DecoderState, Model, ModelError, BOS, EOS, PAD,
};
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid search parameter: {0}")]
    Parameter(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("beam state error: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub beam: usize,
    pub max_out_len: usize,
    pub min_out_len: usize,
    pub length_penalty: f64,
    /// 0 disables blocking.
    pub no_repeat_ngram: usize,
    pub diverse_groups: usize,
    pub diverse_strength: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            max_out_len: 20,
            min_out_len: 0,
            length_penalty: 1.0,
            no_repeat_ngram: 0,
            diverse_groups: 1,
            diverse_strength: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DecodeError::Parameter(msg));
        if self.beam < 1 {
            return fail("beam must be >= 1".into());
        }
        if self.max_out_len < 1 {
            return fail("max_out_len must be >= 1".into());
        }
        if self.min_out_len >= self.max_out_len {
            return fail(format!(
                "min_out_len {} must be below max_out_len {}",
                self.min_out_len, self.max_out_len
            ));
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return fail(format!(
                "length penalty must be finite and >= 0, got {}",
                self.length_penalty
            ));
        }
        if self.diverse_groups < 1 {
            return fail("diverse_groups must be >= 1".into());
        }
        if !self.beam.is_multiple_of(self.diverse_groups) {
            return fail(format!(
                "diverse_groups {} does not divide beam {}",
                self.diverse_groups, self.beam
            ));
        }
        if !self.diverse_strength.is_finite() || self.diverse_strength < 0.0 {
            return fail(format!(
                "diverse strength must be finite and >= 0, got {}",
                self.diverse_strength
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, excluding bos and including a final eos if produced.
    pub tokens: Vec<u32>,
    pub logprob_sum: f64,
    pub finished: bool,
    /// `logprob_sum / len^α`, meaningful once finished.
    pub score: f64,
}

impl Hypothesis {
    fn root() -> Self {
        Self {
            tokens: Vec::new(),
            logprob_sum: 0.0,
            finished: false,
            score: 0.0,
        }
    }
}

/// Final score of a hypothesis: `logprob_sum / length^α`.
pub fn length_penalty_score(logprob_sum: f64, length: usize, alpha: f64) -> Result<f64> {
    if length == 0 {
        return Err(DecodeError::Parameter("length must be >= 1".into()));
    }
    Ok(logprob_sum / (length as f64).powf(alpha))
}

/// Set to `-inf` every token that would complete an `n`-gram already present
/// in `history`.
pub fn apply_no_repeat_ngram(logits: &mut [f64], history: &[u32], n: usize) {
    if n == 0 || history.len() + 1 < n {
        return;
    }
    let key = &history[history.len() + 1 - n..];
    for start in 0..=history.len() - (n - 1) {
        let end = start + n - 1;
        if end < history.len() && &history[start..end] == key {
            if let Some(v) = logits.get_mut(history[end] as usize) {
                *v = f64::NEG_INFINITY;
            }
        }
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - log_z).collect()
}

/// Live hypotheses, their decoder lanes (same order) and the finished pool.
#[derive(Debug, Clone)]
pub struct BeamState<T = f64> {
    pub decoder: DecoderState<T>,
    pub live: Vec<Hypothesis>,
    pub finished: Vec<Hypothesis>,
}

impl<T: Scalar> BeamState<T> {
    pub fn new(decoder: DecoderState<T>, live: Vec<Hypothesis>) -> Result<Self> {
        if decoder.lanes() != live.len() {
            return Err(DecodeError::State(format!(
                "{} hypotheses for {} decoder lanes",
                live.len(),
                decoder.lanes()
            )));
        }
        Ok(Self {
            decoder,
            live,
            finished: Vec::new(),
        })
    }
}

/// Permute beam lanes: lane `i` afterwards holds what lane `perm[i]` held.
/// Per-lane caches move; shared hidden states are left in place.
pub fn reorder_cache<T: Scalar>(state: &mut BeamState<T>, perm: &[usize]) -> Result<()> {
    let n = state.live.len();
    let mut seen = vec![false; n];
    let valid = perm.len() == n
        && perm
            .iter()
            .all(|&p| p < n && !std::mem::replace(&mut seen[p], true));
    if !valid {
        return Err(DecodeError::Parameter(format!(
            "{perm:?} is not a permutation of {n} lanes"
        )));
    }
    state.decoder.select_lanes(perm)?;
    state.live = perm.iter().map(|&p| state.live[p].clone()).collect();
    Ok(())
}

/// Drop lanes whose `keep` flag is false, preserving the order of the rest.
pub fn prune_finished<T: Scalar>(state: &mut BeamState<T>, keep: &[bool]) -> Result<()> {
    if keep.len() != state.live.len() {
        return Err(DecodeError::Parameter(format!(
            "mask of {} entries for {} lanes",
            keep.len(),
            state.live.len()
        )));
    }
    let kept: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    if kept.is_empty() {
        return Err(DecodeError::State("cannot prune every lane".into()));
    }
    state.decoder.select_lanes(&kept)?;
    state.live = kept.iter().map(|&i| state.live[i].clone()).collect();
    Ok(())
}

/// Decoder state for `input` tokens: encoded first for encoder-decoder
/// models, used as the prefix for decoder-only models.
pub fn init_state<T: Scalar>(
    model: &Model<T>,
    input: &[u32],
    mode: AttentionMode,
    lanes: usize,
) -> Result<DecoderState<T>> {
    if input.is_empty() {
        return Err(DecodeError::Input("input sequence is empty".into()));
    }
    Ok(match model.config.architecture {
        Architecture::EncoderDecoder => {
            let enc = model.encode(input)?;
            model.init_decoder_state(DecoderInput::Encoded(&enc), mode, lanes)?
        }
        Architecture::DecoderOnly => {
            model.init_decoder_state(DecoderInput::Prefix(input), mode, lanes)?
        }
    })
}

/// Step every lane once, feeding bos to empty hypotheses, and return
/// per-lane log-probabilities with reserved, too-early and repeat tokens banned.
fn step_log_probs<T: Scalar>(
    model: &Model<T>,
    state: &mut BeamState<T>,
    cfg: &GenConfig,
    mode: AttentionMode,
) -> Result<Vec<Vec<f64>>> {
    let feed: Vec<u32> = state
        .live
        .iter()
        .map(|h| h.tokens.last().copied().unwrap_or(BOS))
        .collect();
    let logits = model.decoder_step(&mut state.decoder, &feed, mode)?;
    Ok(state
        .live
        .iter()
        .enumerate()
        .map(|(lane, hyp)| {
            let row: Vec<f64> = logits
                .row(lane)
                .iter()
                .map(|&v| Scalar::to_f64(v))
                .collect();
            let mut lp = log_softmax(&row);
            lp[PAD as usize] = f64::NEG_INFINITY;
            lp[BOS as usize] = f64::NEG_INFINITY;
            if hyp.tokens.len() < cfg.min_out_len {
                lp[EOS as usize] = f64::NEG_INFINITY;
            }
            apply_no_repeat_ngram(&mut lp, &hyp.tokens, cfg.no_repeat_ngram);
            lp
        })
        .collect())
}

struct Candidate {
    lane: usize,
    token: u32,
    sum: f64,
}

fn rank_candidates(a: &Candidate, b: &Candidate) -> Ordering {
    b.sum
        .partial_cmp(&a.sum)
        .unwrap_or(Ordering::Equal)
        .then(a.token.cmp(&b.token))
        .then(a.lane.cmp(&b.lane))
}

fn rank_finished(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Group {
    /// Live hypotheses of this group occupy lanes `lanes.0..lanes.1`.
    lanes: (usize, usize),
    pool: Vec<Hypothesis>,
    done: bool,
}

fn search<T: Scalar>(
    model: &Model<T>,
    input: &[u32],
    cfg: &GenConfig,
    mode: AttentionMode,
) -> Result<Vec<Vec<Hypothesis>>> {
    cfg.validate()?;
    if cfg.beam > model.config.vocab {
        return Err(DecodeError::Parameter(format!(
            "beam {} exceeds vocab {}",
            cfg.beam, model.config.vocab
        )));
    }
    let groups = cfg.diverse_groups;
    let size = cfg.beam / groups;
    let decoder = init_state(model, input, mode, groups)?;
    let mut state = BeamState::new(decoder, vec![Hypothesis::root(); groups])?;
    let mut meta: Vec<Group> = (0..groups)
        .map(|g| Group {
            lanes: (g, g + 1),
            pool: Vec::new(),
            done: false,
        })
        .collect();
    let vocab = model.config.vocab;
    let max_len_factor = (cfg.max_out_len as f64).powf(cfg.length_penalty);

    while meta.iter().any(|g| !g.done) {
        let log_probs = step_log_probs(model, &mut state, cfg, mode)?;
        let mut chosen_counts = vec![0usize; vocab];
        let mut next_live = Vec::new();
        let mut next_lanes = Vec::new();
        for group in meta.iter_mut() {
            if group.done {
                continue;
            }
            let (lo, hi) = group.lanes;
            let mut cands = Vec::with_capacity((hi - lo) * vocab);
            for (lane, row) in log_probs.iter().enumerate().take(hi).skip(lo) {
                let base = state.live[lane].logprob_sum;
                for (tok, &lp) in row.iter().enumerate() {
                    if lp == f64::NEG_INFINITY {
                        continue;
                    }
                    let penalty = cfg.diverse_strength * chosen_counts[tok] as f64;
                    cands.push(Candidate {
                        lane,
                        token: tok as u32,
                        sum: base + lp - penalty,
                    });
                }
            }
            cands.sort_by(rank_candidates);
            cands.truncate(size);

            let start = next_live.len();
            for c in &cands {
                chosen_counts[c.token as usize] += 1;
                let mut tokens = state.live[c.lane].tokens.clone();
                tokens.push(c.token);
                let finished = c.token == EOS || tokens.len() >= cfg.max_out_len;
                if finished {
                    let score = length_penalty_score(c.sum, tokens.len(), cfg.length_penalty)?;
                    group.pool.push(Hypothesis {
                        tokens,
                        logprob_sum: c.sum,
                        finished: true,
                        score,
                    });
                } else {
                    next_live.push(Hypothesis {
                        score: length_penalty_score(c.sum, tokens.len(), cfg.length_penalty)?,
                        tokens,
                        logprob_sum: c.sum,
                        finished: false,
                    });
                    next_lanes.push(c.lane);
                }
            }
            let best_before = group.pool.first().map(|h| h.score);
            group.pool.sort_by(rank_finished);
            group.pool.truncate(size);
            debug_assert!(best_before.is_none_or(|b| group.pool[0].score >= b));

            let live = &next_live[start..];
            // log-probabilities are <= 0, so the longest allowed length is the
            // most favourable one for a live hypothesis
            let best_live = live
                .iter()
                .map(|h| h.logprob_sum / max_len_factor)
                .fold(f64::NEG_INFINITY, f64::max);
            let pool_full_and_unbeatable =
                group.pool.len() >= size && group.pool.last().is_some_and(|w| w.score >= best_live);
            if live.is_empty() || pool_full_and_unbeatable {
                if live.is_empty() && group.pool.is_empty() {
                    return Err(DecodeError::Input("no admissible continuation".into()));
                }
                group.done = true;
                next_live.truncate(start);
                next_lanes.truncate(start);
            }
            group.lanes = (start, next_live.len());
        }
        if next_live.is_empty() {
            break;
        }
        state.decoder.select_lanes(&next_lanes)?;
        state.live = next_live;
    }
    Ok(meta.into_iter().map(|g| g.pool).collect())
}

/// Argmax rollout; `cfg.beam` and the diversity settings are ignored.
pub fn greedy_search<T: Scalar>(
    model: &Model<T>,
    input: &[u32],
    cfg: &GenConfig,
    mode: AttentionMode,
) -> Result<Hypothesis> {
    let cfg = GenConfig {
        beam: 1,
        diverse_groups: 1,
        diverse_strength: 0.0,
        ..cfg.clone()
    };
    let mut pools = search(model, input, &cfg, mode)?;
    Ok(pools.remove(0).remove(0))
}

/// Beam search; returns up to `beam` finished hypotheses, best first.
/// Diversity settings are ignored.
pub fn beam_search<T: Scalar>(
    model: &Model<T>,
    input: &[u32],
    cfg: &GenConfig,
    mode: AttentionMode,
) -> Result<Vec<Hypothesis>> {
    let cfg = GenConfig {
        diverse_groups: 1,
        diverse_strength: 0.0,
        ..cfg.clone()
    };
    let mut pools = search(model, input, &cfg, mode)?;
    Ok(pools.remove(0))
}

/// Diverse beam search; returns every group's finished hypotheses merged,
/// best first.
pub fn diverse_beam_search<T: Scalar>(
    model: &Model<T>,
    input: &[u32],
    cfg: &GenConfig,
    mode: AttentionMode,
) -> Result<Vec<Hypothesis>> {
    let mut all: Vec<Hypothesis> = diverse_beam_groups(model, input, cfg, mode)?
        .into_iter()
        .flatten()
        .collect();
    all.sort_by(rank_finished);
    Ok(all)
}

/// Diverse beam search keeping each group's pool separate, in group order.
pub fn diverse_beam_groups<T: Scalar>(
    model: &Model<T>,
    input: &[u32],
    cfg: &GenConfig,
    mode: AttentionMode,
) -> Result<Vec<Vec<Hypothesis>>> {
    search(model, input, cfg, mode)
}

/// Dispatch on `cfg`: diverse beam search when `diverse_groups > 1`, greedy
/// search when `beam == 1`, beam search otherwise.
pub fn run_search<T: Scalar>(
    model: &Model<T>,
    input: &[u32],
    cfg: &GenConfig,
    mode: AttentionMode,
) -> Result<Vec<Hypothesis>> {
    if cfg.diverse_groups > 1 {
        diverse_beam_search(model, input, cfg, mode)
    } else if cfg.beam == 1 {
        Ok(vec![greedy_search(model, input, cfg, mode)?])
    } else {
        beam_search(model, input, cfg, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy(arch: Architecture, seed: u64) -> Model {
        Model::init(&ModelConfig::desk(arch, seed)).unwrap()
    }

    #[test]
    fn length_penalty_cases() {
        assert_eq!(length_penalty_score(-3.5, 7, 0.0).unwrap(), -3.5);
        assert_eq!(length_penalty_score(-4.0, 2, 1.0).unwrap(), -2.0);
        assert_eq!(length_penalty_score(-8.0, 2, 2.0).unwrap(), -2.0);
        assert!(matches!(
            length_penalty_score(-1.0, 0, 1.0),
            Err(DecodeError::Parameter(_))
        ));
    }

    #[test]
    fn no_repeat_ngram_cases() {
        let (a, b, c) = (5u32, 6u32, 7u32);
        let mut logits = vec![0.0; 10];
        apply_no_repeat_ngram(&mut logits, &[a, b, c, a, b], 3);
        assert_eq!(logits[c as usize], f64::NEG_INFINITY);
        assert_eq!(logits.iter().filter(|v| v.is_infinite()).count(), 1);

        let mut logits = vec![0.0; 10];
        apply_no_repeat_ngram(&mut logits, &[a], 3);
        assert!(logits.iter().all(|v| *v == 0.0));
        apply_no_repeat_ngram(&mut logits, &[a, a, a], 0);
        assert!(logits.iter().all(|v| *v == 0.0));

        let mut logits = vec![0.0; 10];
        apply_no_repeat_ngram(&mut logits, &[a, b], 1);
        assert!(logits[a as usize].is_infinite() && logits[b as usize].is_infinite());
    }

    #[test]
    fn config_validation() {
        let bad = [
            GenConfig {
                beam: 0,
                ..Default::default()
            },
            GenConfig {
                diverse_groups: 3,
                beam: 4,
                ..Default::default()
            },
            GenConfig {
                length_penalty: -1.0,
                ..Default::default()
            },
            GenConfig {
                min_out_len: 20,
                max_out_len: 20,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(cfg.validate(), Err(DecodeError::Parameter(_))),
                "{cfg:?}"
            );
        }
        let m = toy(Architecture::EncoderDecoder, 1);
        let cfg = GenConfig {
            beam: 102,
            ..Default::default()
        };
        assert!(matches!(
            beam_search(&m, &[5, 6], &cfg, AttentionMode::El),
            Err(DecodeError::Parameter(_))
        ));
        assert!(matches!(
            greedy_search(&m, &[], &GenConfig::default(), AttentionMode::El),
            Err(DecodeError::Input(_))
        ));
    }

    #[test]
    fn beam_one_equals_greedy() {
        let m = toy(Architecture::EncoderDecoder, 2);
        let cfg = GenConfig {
            beam: 1,
            max_out_len: 12,
            ..Default::default()
        };
        let g = greedy_search(&m, &[9, 8, 7], &cfg, AttentionMode::El).unwrap();
        let b = beam_search(&m, &[9, 8, 7], &cfg, AttentionMode::El).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(g, b[0]);
    }

    #[test]
    fn min_len_blocks_early_eos() {
        let m = toy(Architecture::DecoderOnly, 3);
        for seed in 0..5u32 {
            let cfg = GenConfig {
                min_out_len: 5,
                max_out_len: 9,
                beam: 3,
                ..Default::default()
            };
            for hyp in beam_search(&m, &[10 + seed, 20, 30], &cfg, AttentionMode::El).unwrap() {
                let eos_at = hyp.tokens.iter().position(|&t| t == EOS);
                assert!(eos_at.is_none_or(|p| p >= 5), "{:?}", hyp.tokens);
                assert!(!hyp.tokens.contains(&PAD) && !hyp.tokens.contains(&BOS));
            }
        }
    }

    #[test]
    fn reorder_validation_and_swap() {
        let m = toy(Architecture::EncoderDecoder, 4);
        let dec = init_state(&m, &[5, 6, 7], AttentionMode::MhaCached, 3).unwrap();
        let live: Vec<Hypothesis> = (0..3)
            .map(|i| Hypothesis {
                tokens: vec![10 + i],
                ..Hypothesis::root()
            })
            .collect();
        let mut st = BeamState::new(dec, live.clone()).unwrap();
        assert!(matches!(
            reorder_cache(&mut st, &[0, 0, 1]),
            Err(DecodeError::Parameter(_))
        ));
        assert!(matches!(
            reorder_cache(&mut st, &[0, 1]),
            Err(DecodeError::Parameter(_))
        ));
        reorder_cache(&mut st, &[1, 0, 2]).unwrap();
        assert_eq!(st.live[0].tokens, vec![11]);
        reorder_cache(&mut st, &[1, 0, 2]).unwrap();
        assert_eq!(st.live, live);
        assert!(matches!(
            prune_finished(&mut st, &[false, false, false]),
            Err(DecodeError::State(_))
        ));
    }
}
