use std::collections::HashSet;

use elattn::decoding::{
    beam_search, diverse_beam_groups, diverse_beam_search, greedy_search, init_state, log_softmax,
    prune_finished, reorder_cache, BeamState, GenConfig, Hypothesis,
};
use elattn::model::{Architecture, AttentionMode, Model, ModelConfig, BOS, EOS};
use elattn::{Rng, Tensor};

fn tiny(seed: u64, arch: Architecture) -> Model {
    Model::init(&ModelConfig {
        architecture: arch,
        encoder_layers: 1,
        decoder_layers: 1,
        d_m: 8,
        h: 2,
        d_k: 4,
        d_ff: 16,
        vocab: 5,
        max_positions: 16,
        seed,
    })
    .unwrap()
}

fn desk(seed: u64, arch: Architecture) -> Model {
    Model::init(&ModelConfig::desk(arch, seed)).unwrap()
}

/// Best sequence over tokens {eos, 3, 4} of length <= `max_len`, scored by
/// summed log-probabilities from non-incremental forwards.
fn exhaustive_best(m: &Model, input: &[u32], max_len: usize) -> (Vec<u32>, f64) {
    let enc = m.encode(input).unwrap();
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![(Vec::<u32>::new(), 0.0)];
    while let Some((prefix, sum)) = stack.pop() {
        let mut fed = vec![BOS];
        fed.extend_from_slice(&prefix);
        let logits = m.decode_full(&enc, &fed).unwrap();
        let lp = log_softmax(logits.row(logits.rows() - 1));
        for tok in [EOS, 3, 4] {
            let mut seq = prefix.clone();
            seq.push(tok);
            let s = sum + lp[tok as usize];
            if tok == EOS || seq.len() == max_len {
                if s > best.1 {
                    best = (seq, s);
                }
            } else {
                stack.push((seq, s));
            }
        }
    }
    best
}

#[test]
fn beam_matches_exhaustive_search() {
    for seed in 0..20 {
        let m = tiny(seed, Architecture::EncoderDecoder);
        let input: Vec<u32> = (0..4).map(|i| 3 + ((seed + i) % 2) as u32).collect();
        let cfg = GenConfig {
            beam: 4,
            max_out_len: 3,
            length_penalty: 0.0,
            ..Default::default()
        };
        let (tokens, sum) = exhaustive_best(&m, &input, 3);
        let top = &beam_search(&m, &input, &cfg, AttentionMode::El).unwrap()[0];
        assert_eq!(top.tokens, tokens, "seed {seed}");
        assert!((top.logprob_sum - sum).abs() <= 1e-12);
    }
}

fn cfgs() -> Vec<GenConfig> {
    let base = GenConfig {
        max_out_len: 10,
        ..Default::default()
    };
    vec![
        GenConfig {
            beam: 1,
            ..base.clone()
        },
        GenConfig {
            beam: 4,
            length_penalty: 1.0,
            ..base.clone()
        },
        GenConfig {
            beam: 4,
            length_penalty: 2.0,
            no_repeat_ngram: 3,
            ..base.clone()
        },
        GenConfig {
            beam: 4,
            diverse_groups: 4,
            diverse_strength: 0.2,
            ..base
        },
    ]
}

#[test]
fn outputs_identical_across_modes() {
    let mut rng = Rng::new(99);
    for arch in [Architecture::EncoderDecoder, Architecture::DecoderOnly] {
        let m = desk(5, arch);
        for _ in 0..4 {
            let input: Vec<u32> = (0..1 + rng.below(8))
                .map(|_| 3 + rng.below(98) as u32)
                .collect();
            for cfg in cfgs() {
                let run = |mode| {
                    let hyps = if cfg.diverse_groups > 1 {
                        diverse_beam_search(&m, &input, &cfg, mode).unwrap()
                    } else {
                        beam_search(&m, &input, &cfg, mode).unwrap()
                    };
                    hyps.into_iter().map(|h| h.tokens).collect::<Vec<_>>()
                };
                let reference = run(AttentionMode::MhaCached);
                assert_eq!(run(AttentionMode::El), reference);
                assert_eq!(run(AttentionMode::MhaNoCache), reference);
            }
        }
    }
}

#[test]
fn greedy_identical_across_modes_and_respects_min_len() {
    let m = desk(6, Architecture::EncoderDecoder);
    let cfg = GenConfig {
        min_out_len: 5,
        max_out_len: 12,
        ..Default::default()
    };
    let outs: Vec<Hypothesis> = AttentionMode::ALL
        .iter()
        .map(|&mode| greedy_search(&m, &[4, 5, 6], &cfg, mode).unwrap())
        .collect();
    assert!(outs.iter().all(|h| h.tokens == outs[0].tokens));
    assert!(outs[0]
        .tokens
        .iter()
        .position(|&t| t == EOS)
        .is_none_or(|p| p >= 5));
}

#[test]
fn zero_strength_groups_each_reproduce_greedy() {
    let m = desk(7, Architecture::EncoderDecoder);
    let cfg = GenConfig {
        beam: 4,
        diverse_groups: 4,
        diverse_strength: 0.0,
        max_out_len: 8,
        ..Default::default()
    };
    let greedy = greedy_search(&m, &[8, 9, 10], &cfg, AttentionMode::El).unwrap();
    for pool in diverse_beam_groups(&m, &[8, 9, 10], &cfg, AttentionMode::El).unwrap() {
        assert_eq!(pool[0].tokens, greedy.tokens);
    }
}

#[test]
fn strong_diversity_changes_second_group_first_token() {
    let m = desk(8, Architecture::DecoderOnly);
    let cfg = GenConfig {
        beam: 2,
        diverse_groups: 2,
        diverse_strength: 1e6,
        max_out_len: 4,
        ..Default::default()
    };
    let pools = diverse_beam_groups(&m, &[11, 12, 13], &cfg, AttentionMode::MhaCached).unwrap();
    assert_ne!(pools[0][0].tokens[0], pools[1][0].tokens[0]);
}

#[test]
fn no_repeated_trigram_in_rollouts() {
    let m = desk(9, Architecture::EncoderDecoder);
    let cfg = GenConfig {
        beam: 4,
        no_repeat_ngram: 3,
        max_out_len: 40,
        min_out_len: 39,
        ..Default::default()
    };
    for input in [[5u32, 6, 7], [20, 21, 22]] {
        for hyp in beam_search(&m, &input, &cfg, AttentionMode::El).unwrap() {
            let mut seen = HashSet::new();
            for w in hyp.tokens.windows(3) {
                assert!(
                    seen.insert(w.to_vec()),
                    "repeated trigram {w:?} in {:?}",
                    hyp.tokens
                );
            }
        }
    }
}

#[test]
fn finished_scores_use_length_penalty() {
    let m = desk(10, Architecture::EncoderDecoder);
    let cfg = GenConfig {
        beam: 3,
        length_penalty: 2.0,
        max_out_len: 6,
        ..Default::default()
    };
    let hyps = beam_search(&m, &[3, 4], &cfg, AttentionMode::El).unwrap();
    for w in hyps.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for h in &hyps {
        assert!(h.finished);
        let expect = h.logprob_sum / (h.tokens.len() as f64).powi(2);
        assert!((h.score - expect).abs() <= 1e-15);
    }
}

/// Beam state with three lanes that have each consumed bos and one distinct token.
fn warmed_state(m: &Model, mode: AttentionMode) -> BeamState {
    let decoder = init_state(m, &[14, 15, 16, 17], mode, 3).unwrap();
    let live = (0..3)
        .map(|i| Hypothesis {
            tokens: vec![20 + i],
            logprob_sum: 0.0,
            finished: false,
            score: 0.0,
        })
        .collect();
    let mut state = BeamState::new(decoder, live).unwrap();
    m.decoder_step(&mut state.decoder, &[BOS; 3], mode).unwrap();
    m.decoder_step(&mut state.decoder, &[20, 21, 22], mode)
        .unwrap();
    state
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    t.gather_rows(perm).unwrap()
}

#[test]
fn reorder_commutes_with_step() {
    for arch in [Architecture::EncoderDecoder, Architecture::DecoderOnly] {
        let m = desk(11, arch);
        for mode in AttentionMode::ALL {
            let tokens = [30u32, 31, 32];
            let perm = [2usize, 0, 1];

            let mut a = warmed_state(&m, mode);
            reorder_cache(&mut a, &perm).unwrap();
            let permuted_tokens: Vec<u32> = perm.iter().map(|&p| tokens[p]).collect();
            let la = m
                .decoder_step(&mut a.decoder, &permuted_tokens, mode)
                .unwrap();

            let mut b = warmed_state(&m, mode);
            let lb = m.decoder_step(&mut b.decoder, &tokens, mode).unwrap();
            assert!(
                la.max_abs_diff(&permute_rows(&lb, &perm)) <= 1e-12,
                "{arch} {mode}"
            );

            let mut c = warmed_state(&m, mode);
            let before = c.live.clone();
            reorder_cache(&mut c, &[1, 0, 2]).unwrap();
            reorder_cache(&mut c, &[1, 0, 2]).unwrap();
            assert_eq!(c.live, before);
            let lc = m.decoder_step(&mut c.decoder, &tokens, mode).unwrap();
            assert!(lc.max_abs_diff(&lb) == 0.0);

            let mut d = warmed_state(&m, mode);
            reorder_cache(&mut d, &[0, 1, 2]).unwrap();
            let ld = m.decoder_step(&mut d.decoder, &tokens, mode).unwrap();
            assert!(ld.max_abs_diff(&lb) == 0.0);
        }
    }
}

#[test]
fn pruned_lanes_continue_like_unpruned_run() {
    for arch in [Architecture::EncoderDecoder, Architecture::DecoderOnly] {
        let m = desk(12, arch);
        for mode in AttentionMode::ALL {
            let mut full = warmed_state(&m, mode);
            let mut pruned = full.clone();
            let bytes_before = pruned.decoder.total_state_bytes();
            prune_finished(&mut pruned, &[true, false, true]).unwrap();
            if mode != AttentionMode::MhaNoCache {
                assert!(
                    pruned.decoder.total_state_bytes() < bytes_before,
                    "{arch} {mode}"
                );
            }
            assert!(
                pruned.decoder.shares_input_with(&full.decoder) || mode == AttentionMode::MhaCached
            );
            for step in 0..3u32 {
                let lf = m
                    .decoder_step(&mut full.decoder, &[40 + step, 50, 60 + step], mode)
                    .unwrap();
                let lp = m
                    .decoder_step(&mut pruned.decoder, &[40 + step, 60 + step], mode)
                    .unwrap();
                assert!(lp.max_abs_diff(&permute_rows(&lf, &[0, 2])) <= 1e-12);
            }

            let mut same = warmed_state(&m, mode);
            prune_finished(&mut same, &[true, true, true]).unwrap();
            assert_eq!(same.live, warmed_state(&m, mode).live);
        }
    }
}
