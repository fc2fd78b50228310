use elattn::attention::{
    build_el_query, el_attention, el_attention_folded, multi_head_attention, AttentionParams,
};
use elattn::decoding::{apply_no_repeat_ngram, log_softmax};
use elattn::tensor::{matmul, scaled_softmax_rows, seeded_uniform};
use elattn::{Rng, Tensor};
use proptest::prelude::*;

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    seeded_uniform(&[rows, cols], rng, -1.0, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (a, b, c) = (random_matrix(8, 8, &mut rng), random_matrix(8, 8, &mut rng), random_matrix(8, 8, &mut rng));
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..20, d in 1usize..64) {
        let mut rng = Rng::new(seed);
        let x = seeded_uniform::<f64>(&[rows, cols], &mut rng, -30.0, 30.0).unwrap();
        let p = scaled_softmax_rows(&x, d).unwrap();
        for r in 0..rows {
            let sum: f64 = p.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(seed in any::<u64>(), cols in 1usize..20, shift in -100.0f64..100.0) {
        let mut rng = Rng::new(seed);
        let x = seeded_uniform::<f64>(&[3, cols], &mut rng, -5.0, 5.0).unwrap();
        let shifted = x.map("shift", |v| v + shift).unwrap();
        let a = scaled_softmax_rows(&x, 4).unwrap();
        let b = scaled_softmax_rows(&shifted, 4).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn el_equals_multi_head(seed in any::<u64>(), h_pow in 0u32..4, d_m_pow in 3u32..7, square in any::<bool>(), n in 1usize..40) {
        let h = 1usize << h_pow;
        let d_m = 1usize << d_m_pow;
        let d_k = if square { (d_m / h).max(1) } else { 3 };
        let mut rng = Rng::new(seed);
        let params = AttentionParams::random(h, d_m, d_k, &mut rng, -0.5, 0.5).unwrap();
        let q = random_matrix(1, d_m, &mut rng);
        let hidden = random_matrix(n, d_m, &mut rng);
        let el = el_attention(&q, &hidden, &params).unwrap();
        let mha = multi_head_attention(&q, &hidden, &params).unwrap();
        prop_assert!(el.max_abs_diff(&mha) <= 1e-10);
    }

    #[test]
    fn folding_equals_per_query(seed in any::<u64>(), g in 1usize..6, n in 1usize..12) {
        let (h, d_m, d_k) = (2, 8, 4);
        let mut rng = Rng::new(seed);
        let params = AttentionParams::random(h, d_m, d_k, &mut rng, -0.5, 0.5).unwrap();
        let queries = random_matrix(g, d_m, &mut rng);
        let hidden = random_matrix(n, d_m, &mut rng);
        let elq = build_el_query(&queries, &params).unwrap();
        let folded = el_attention_folded(&elq.queries, &hidden, &elq.key_bias, &params).unwrap();
        for r in 0..g {
            let single = el_attention(&queries.slice_rows(r, r + 1).unwrap(), &hidden, &params).unwrap();
            prop_assert!(folded.slice_rows(r, r + 1).unwrap().max_abs_diff(&single) <= 1e-12);
        }
    }

    #[test]
    fn log_softmax_exponentiates_to_distribution(values in prop::collection::vec(-50.0f64..50.0, 1..30)) {
        let lp = log_softmax(&values);
        let sum: f64 = lp.iter().map(|v| v.exp()).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(lp.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn no_repeat_ngram_bans_exactly_completions(history in prop::collection::vec(0u32..6, 0..20), n in 1usize..5) {
        let mut logits = vec![0.0; 6];
        apply_no_repeat_ngram(&mut logits, &history, n);
        for tok in 0..6u32 {
            let mut extended = history.clone();
            extended.push(tok);
            let repeats = extended.len() >= n && {
                let last = &extended[extended.len() - n..];
                extended.windows(n).take(extended.len() - n).any(|w| w == last)
            };
            prop_assert_eq!(logits[tok as usize].is_infinite(), repeats, "token {} history {:?}", tok, &history);
        }
    }
}
