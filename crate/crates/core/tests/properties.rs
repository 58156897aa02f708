use gqakit::attention::{attention_forward_traced, model_forward, AttentionConfig, Checkpoint, LayerWeights};
use gqakit::convert::{convert_checkpoint, ConversionMethod};
use gqakit::costmodel::{kv_cache_bytes, predict_step_time, replication_waste, HardwareSpec};
use gqakit::decoder::{argmax, generate};
use gqakit::tensor::{matmul, mean_over, softmax_in_place, Precision, Rng, Tensor};
use proptest::prelude::*;

fn config_strategy() -> impl Strategy<Value = AttentionConfig> {
    (0usize..4, 0usize..4, 1usize..5, 1usize..3, 2usize..12, any::<bool>()).prop_map(|(hp, gp, hd, layers, vocab, causal)| {
        let h = 1 << hp;
        let g = 1 << gp.min(hp);
        AttentionConfig::new(h, g, hd, layers, vocab, causal).unwrap()
    })
}

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[rows, cols], 1.0, &mut Rng::new(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let a = tensor(m, k, seed);
        let b = tensor(k, n, seed ^ 1);
        let c = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.get(i, p) * b.get(p, j)).sum();
                prop_assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(values in prop::collection::vec(-20.0f64..20.0, 1..16), shift in -50.0f64..50.0) {
        let mut a = values.clone();
        let mut b: Vec<f64> = values.iter().map(|v| v + shift).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_over_ignores_order(n in 1usize..7, seed in any::<u64>(), rot in 0usize..7) {
        let items: Vec<Tensor<f64>> = (0..n).map(|i| tensor(3, 2, seed.wrapping_add(i as u64))).collect();
        let mut refs: Vec<&Tensor<f64>> = items.iter().collect();
        let a = mean_over(&refs).unwrap();
        refs.rotate_left(rot % n);
        refs.reverse();
        prop_assert_eq!(a, mean_over(&refs).unwrap());
    }

    #[test]
    fn causal_outputs_ignore_the_future(cfg in config_strategy(), seed in any::<u64>(), len in 2usize..10, cut in 1usize..9) {
        let cfg = AttentionConfig { causal: true, ..cfg };
        let ck = Checkpoint::<f64>::init(cfg, seed).unwrap();
        let mut rng = Rng::new(seed);
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(cfg.vocab)).collect();
        let cut = cut.min(len - 1);
        let mut altered = tokens.clone();
        for t in altered.iter_mut().skip(cut) {
            *t = (*t + 1) % cfg.vocab;
        }
        let a = model_forward(&ck, &tokens).unwrap();
        let b = model_forward(&ck, &altered).unwrap();
        for i in 0..cut {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn kv_projection_of_one_group_only_moves_its_heads(cfg in config_strategy(), seed in any::<u64>(), t in 1usize..8) {
        let mut rng = Rng::new(seed);
        let w = LayerWeights::<f64>::random(&cfg, &mut rng);
        let x = Tensor::randn(&[t, cfg.d_model], 1.0, &mut rng);
        let g = rng.below(cfg.n_kv_groups);
        let mut w2 = w.clone();
        let hd = cfg.head_dim;
        for m in [&mut w2.wk, &mut w2.wv] {
            let block = Tensor::randn(&[cfg.d_model, hd], 1.0, &mut rng);
            m.set_col_block(g * hd, &block).unwrap();
        }
        let a = attention_forward_traced(&cfg, &w, &x).unwrap();
        let b = attention_forward_traced(&cfg, &w2, &x).unwrap();
        let per = cfg.heads_per_group();
        for h in 0..cfg.n_heads {
            if h / per != g {
                prop_assert_eq!(a.heads.col_block(h * hd, hd).unwrap(), b.heads.col_block(h * hd, hd).unwrap());
            }
        }
    }

    #[test]
    fn permuting_queries_within_a_group_permutes_heads(cfg in config_strategy(), seed in any::<u64>(), t in 1usize..8) {
        let mut rng = Rng::new(seed);
        let w = LayerWeights::<f64>::random(&cfg, &mut rng);
        let x = Tensor::randn(&[t, cfg.d_model], 1.0, &mut rng);
        let (hd, per) = (cfg.head_dim, cfg.heads_per_group());
        // Reverse query-head order inside every group, moving Wo rows to match.
        let perm: Vec<usize> = (0..cfg.n_heads).map(|h| (h / per) * per + (per - 1 - h % per)).collect();
        let mut w2 = w.clone();
        let wo_t = w.wo.transpose().unwrap();
        let mut wo2_t = wo_t.clone();
        for (h, &src) in perm.iter().enumerate() {
            w2.wq.set_col_block(h * hd, &w.wq.col_block(src * hd, hd).unwrap()).unwrap();
            wo2_t.set_col_block(h * hd, &wo_t.col_block(src * hd, hd).unwrap()).unwrap();
        }
        w2.wo = wo2_t.transpose().unwrap();
        let a = attention_forward_traced(&cfg, &w, &x).unwrap();
        let b = attention_forward_traced(&cfg, &w2, &x).unwrap();
        for (h, &src) in perm.iter().enumerate() {
            prop_assert_eq!(b.heads.col_block(h * hd, hd).unwrap(), a.heads.col_block(src * hd, hd).unwrap());
        }
        prop_assert!(a.out.max_abs_diff(&b.out).unwrap() < 1e-12);
    }

    #[test]
    fn conversion_touches_only_kv(cfg in config_strategy(), seed in any::<u64>(), which in 0usize..3, tgt in 0usize..4) {
        let ck = Checkpoint::<f64>::init(cfg, seed).unwrap();
        let divisors: Vec<usize> = (1..=cfg.n_kv_groups).filter(|d| cfg.n_kv_groups % d == 0).collect();
        let target = divisors[tgt % divisors.len()];
        let method = [ConversionMethod::MeanPool, ConversionMethod::FirstHead, ConversionMethod::RandomInit { seed }][which];
        let out = convert_checkpoint(&ck, target, method).unwrap();
        prop_assert_eq!(out.config.n_kv_groups, target);
        prop_assert_eq!(&out.embedding, &ck.embedding);
        prop_assert_eq!(&out.unembedding, &ck.unembedding);
        for (a, b) in out.layers.iter().zip(&ck.layers) {
            prop_assert_eq!(&a.wq, &b.wq);
            prop_assert_eq!(&a.wo, &b.wo);
            prop_assert_eq!(a.wk.shape(), &[cfg.d_model, target * cfg.head_dim][..]);
        }
        prop_assert_eq!(out.clone(), convert_checkpoint(&ck, target, method).unwrap());
        if method == ConversionMethod::FirstHead {
            let (hd, per) = (cfg.head_dim, cfg.n_kv_groups / target);
            for (a, b) in out.layers.iter().zip(&ck.layers) {
                for g in 0..target {
                    prop_assert_eq!(a.wk.col_block(g * hd, hd).unwrap(), b.wk.col_block(g * per * hd, hd).unwrap());
                }
            }
        }
    }

    #[test]
    fn mean_pooling_composes(seed in any::<u64>()) {
        let cfg = AttentionConfig::new(8, 8, 2, 1, 5, true).unwrap();
        let ck = Checkpoint::<f64>::init(cfg, seed).unwrap();
        let direct = convert_checkpoint(&ck, 2, ConversionMethod::MeanPool).unwrap();
        let staged = convert_checkpoint(&convert_checkpoint(&ck, 4, ConversionMethod::MeanPool).unwrap(), 2, ConversionMethod::MeanPool).unwrap();
        for (a, b) in direct.layers.iter().zip(&staged.layers) {
            prop_assert!(a.wk.max_abs_diff(&b.wk).unwrap() < 1e-12);
            prop_assert!(a.wv.max_abs_diff(&b.wv).unwrap() < 1e-12);
        }
    }
}

#[test]
fn cost_model_is_monotone() {
    let hw = HardwareSpec::desk();
    for h in [1usize, 2, 4, 8, 16] {
        let groups: Vec<usize> = (1..=h).filter(|g| h % g == 0).collect();
        let mut prev_time = 0.0;
        let mut prev_bytes = 0;
        for &g in &groups {
            let cfg = AttentionConfig::new(h, g, 8, 2, 10, true).unwrap();
            let r = predict_step_time(&cfg, &hw, 128, 1, Precision::F32).unwrap();
            assert!(r.predicted_time_s >= prev_time);
            assert!(r.kv_bytes_per_step >= prev_bytes);
            prev_time = r.predicted_time_s;
            prev_bytes = r.kv_bytes_per_step;
            let mut last = 0;
            for t in [1, 8, 64, 512] {
                let b = kv_cache_bytes(&cfg, t, 2, Precision::F64);
                assert!(b > last);
                assert_eq!(b, 2 * kv_cache_bytes(&cfg, t, 1, Precision::F64));
                assert_eq!(b, 2 * kv_cache_bytes(&cfg, t, 2, Precision::F32));
                last = b;
            }
        }
    }
}

#[test]
fn replication_waste_factor() {
    for p in [1usize, 2, 4, 8, 16] {
        for g in [1usize, 2, 3, 4, 6, 8, 16, 64] {
            let w = replication_waste(g, p);
            assert!(w >= 1.0);
            if g % p == 0 {
                assert_eq!(w, 1.0, "G={g} P={p}");
            }
        }
        assert_eq!(replication_waste(1, p), p as f64);
    }
}

/// Greedy decoding by recomputing the full forward pass each step.
fn greedy_oracle(ck: &Checkpoint<f64>, prompt: &[usize], steps: usize) -> Vec<usize> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..steps {
        let logits = model_forward(ck, &seq).unwrap();
        let next = argmax(logits.row(seq.len() - 1));
        out.push(next);
        seq.push(next);
    }
    out
}

#[test]
fn cached_generation_matches_recompute() {
    let mut rng = Rng::new(77);
    for (i, (h, g)) in [(8, 8), (8, 2), (8, 1), (4, 2), (2, 1), (1, 1)].into_iter().enumerate() {
        for steps in [16, 32] {
            let cfg = AttentionConfig::new(h, g, 3, 2, 23, true).unwrap();
            let ck = Checkpoint::<f64>::init(cfg, i as u64 * 100 + steps as u64).unwrap();
            let prompt: Vec<usize> = (0..5).map(|_| rng.below(23)).collect();
            let trace = generate(&ck, &prompt, steps, prompt.len() + steps).unwrap();
            assert_eq!(trace.tokens, greedy_oracle(&ck, &prompt, steps), "H={h} G={g} steps={steps}");
            let per_pos = kv_cache_bytes(&cfg, 1, 1, Precision::F64);
            for (s, &bytes) in trace.step_cache_bytes.iter().enumerate() {
                assert_eq!(bytes, per_pos * (prompt.len() + s + 1) as u64);
            }
        }
    }
}

#[test]
fn generation_past_capacity_fails_before_work() {
    let cfg = AttentionConfig::new(2, 1, 2, 1, 5, true).unwrap();
    let ck = Checkpoint::<f32>::init(cfg, 0).unwrap();
    let err = generate(&ck, &[1, 2, 3], 5, 7).unwrap_err();
    assert_eq!(err.kind(), "capacity");
}
