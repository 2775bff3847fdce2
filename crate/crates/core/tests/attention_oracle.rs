//! Brute-force oracle for the pruned-attention kernel.
//!
//! The oracle materializes the full T x T score matrix per head, applies the
//! window and Top-K masks, softmaxes the dense rows and multiplies by V --
//! a completely separate computational path from the gather-based kernel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use raseformer::attention::{
    attend_values, attention_core, AttentionConfig, Variant,
};
use raseformer::{Graph, Tensor};

fn head_slice<'a>(t: &'a Tensor<f64>, row: usize, h: usize, dh: usize) -> &'a [f64] {
    let d = t.shape()[1];
    &t.data()[row * d + h * dh..row * d + (h + 1) * dh]
}

/// Dense reference: full score matrix + window/Top-K masking + row softmax.
fn dense_masked_reference(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    mask: &[bool],
    cfg: &AttentionConfig,
) -> Tensor<f64> {
    let t = q.shape()[0];
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let half = cfg.window / 2;
    let m = cfg.top_m();
    let mut out = Tensor::zeros(&[t, d]);

    for h in 0..heads {
        // full T x T score matrix for this head
        let mut scores = vec![f64::NEG_INFINITY; t * t];
        for i in 0..t {
            for j in 0..t {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += head_slice(q, i, h, dh)[c] * head_slice(k, j, h, dh)[c];
                }
                scores[i * t + j] = dot * scale;
            }
        }
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            // window + validity mask
            let in_window = |j: usize| -> bool {
                mask[j] && j + half >= i && j <= i + half
            };
            let window: Vec<usize> = (0..t).filter(|&j| in_window(j)).collect();

            // Top-K mask: rank window tokens by the selection criterion
            let keep: Vec<usize> = if m >= window.len() || cfg.variant == Variant::DenseLocal {
                window.clone()
            } else {
                let crit: Vec<f64> = window
                    .iter()
                    .map(|&j| match cfg.variant {
                        Variant::StaticKeyNorm => head_slice(k, j, h, dh)
                            .iter()
                            .map(|x| x * x)
                            .sum::<f64>()
                            .sqrt(),
                        Variant::HeadSharedTopK => {
                            let mut acc = 0.0;
                            for hh in 0..heads {
                                let mut dot = 0.0;
                                for c in 0..dh {
                                    dot += head_slice(q, i, hh, dh)[c]
                                        * head_slice(k, j, hh, dh)[c];
                                }
                                acc += dot * scale;
                            }
                            acc / heads as f64
                        }
                        _ => scores[i * t + j],
                    })
                    .collect();
                let mut idx: Vec<usize> = (0..window.len())
                    .filter(|&p| window[p] != i)
                    .collect();
                idx.sort_by(|&a, &b| {
                    crit[b]
                        .partial_cmp(&crit[a])
                        .unwrap()
                        .then_with(|| {
                            window[a].abs_diff(i).cmp(&window[b].abs_diff(i))
                        })
                        .then_with(|| window[a].cmp(&window[b]))
                });
                let mut kept: Vec<usize> =
                    idx.into_iter().take(m - 1).map(|p| window[p]).collect();
                kept.push(i);
                kept.sort_unstable();
                kept
            };

            // dense masked softmax over the kept entries
            let mut mx = f64::NEG_INFINITY;
            for &j in &keep {
                mx = mx.max(scores[i * t + j]);
            }
            let mut row = vec![0.0; t];
            let mut denom = 0.0;
            for &j in &keep {
                let e = (scores[i * t + j] - mx).exp();
                row[j] = e;
                denom += e;
            }
            // dense weighted matvec over all T (zeros elsewhere)
            for j in 0..t {
                if row[j] == 0.0 {
                    continue;
                }
                let w = row[j] / denom;
                for c in 0..dh {
                    out.data_mut()[i * d + h * dh + c] += w * head_slice(v, j, h, dh)[c];
                }
            }
        }
    }
    out
}

fn random_qkv(
    t: usize,
    d: usize,
    seed: u64,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::randn(&[t, d], 1.0, &mut rng),
        Tensor::randn(&[t, d], 1.0, &mut rng),
        Tensor::randn(&[t, d], 1.0, &mut rng),
    )
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn pruned_attention_matches_dense_masked_oracle() {
    let cfg = AttentionConfig {
        d_model: 32,
        heads: 4,
        window: 9,
        keep_ratio: 0.5,
        variant: Variant::PerHeadTopK,
        qkv_conv_width: 3,
    };
    for seed in 0..20 {
        let (q, k, v) = random_qkv(32, 32, seed);
        let mask = vec![true; 32];
        let (out, _, _) = attend_values(&q, &k, &v, &mask, &cfg).unwrap();
        let oracle = dense_masked_reference(&q, &k, &v, &mask, &cfg);
        let diff = max_abs_diff(&out, &oracle);
        assert!(diff < 1e-10, "seed {seed}: max abs diff {diff}");
    }
}

#[test]
fn all_variants_match_oracle_with_partial_mask() {
    for variant in Variant::ALL {
        let cfg = AttentionConfig {
            d_model: 24,
            heads: 3,
            window: 7,
            keep_ratio: 0.4,
            variant,
            qkv_conv_width: 3,
        };
        for seed in 0..5 {
            let (q, k, v) = random_qkv(20, 24, 1000 + seed);
            let mut mask = vec![true; 20];
            mask[15..].fill(false);
            mask[3] = false;
            let (out, _, _) = attend_values(&q, &k, &v, &mask, &cfg).unwrap();
            let oracle = dense_masked_reference(&q, &k, &v, &mask, &cfg);
            let diff = max_abs_diff(&out, &oracle);
            assert!(diff < 1e-10, "{variant} seed {seed}: diff {diff}");
        }
    }
}

#[test]
fn keep_ratio_one_equals_dense_bit_for_bit() {
    for variant in Variant::ALL {
        let mut cfg = AttentionConfig {
            d_model: 32,
            heads: 4,
            window: 9,
            keep_ratio: 1.0,
            variant,
            qkv_conv_width: 3,
        };
        let (q, k, v) = random_qkv(32, 32, 42);
        let mask = vec![true; 32];
        let (out, _, _) = attend_values(&q, &k, &v, &mask, &cfg).unwrap();
        cfg.variant = Variant::DenseLocal;
        let (dense, _, _) = attend_values(&q, &k, &v, &mask, &cfg).unwrap();
        assert_eq!(
            out.data(),
            dense.data(),
            "{variant} at keep_ratio=1 is not bit-identical to dense"
        );
    }
}

#[test]
fn dense_variant_ignores_keep_ratio() {
    let mk = |ratio: f64| AttentionConfig {
        d_model: 16,
        heads: 2,
        window: 5,
        keep_ratio: ratio,
        variant: Variant::DenseLocal,
        qkv_conv_width: 3,
    };
    let (q, k, v) = random_qkv(12, 16, 7);
    let mask = vec![true; 12];
    let (a, _, _) = attend_values(&q, &k, &v, &mask, &mk(0.2)).unwrap();
    let (b, _, _) = attend_values(&q, &k, &v, &mask, &mk(1.0)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn single_head_collapses_per_head_and_head_shared() {
    let mk = |variant| AttentionConfig {
        d_model: 16,
        heads: 1,
        window: 7,
        keep_ratio: 0.5,
        variant,
        qkv_conv_width: 3,
    };
    let (q, k, v) = random_qkv(24, 16, 5);
    let mask = vec![true; 24];
    let (a, sel_a, _) = attend_values(&q, &k, &v, &mask, &mk(Variant::PerHeadTopK)).unwrap();
    let (b, sel_b, _) =
        attend_values(&q, &k, &v, &mask, &mk(Variant::HeadSharedTopK)).unwrap();
    assert_eq!(sel_a, sel_b);
    assert_eq!(a.data(), b.data());
}

#[test]
fn singleton_sequence_weights_are_one() {
    let cfg = AttentionConfig {
        d_model: 8,
        heads: 2,
        window: 9,
        keep_ratio: 0.5,
        variant: Variant::PerHeadTopK,
        qkv_conv_width: 3,
    };
    let (q, k, v) = random_qkv(1, 8, 3);
    let (out, sel, w) = attend_values(&q, &k, &v, &[true], &cfg).unwrap();
    for h in 0..2 {
        assert_eq!(sel.retained[h][0], vec![0]);
        assert_eq!(w[h][0], vec![1.0]);
    }
    // output equals V at the single position
    assert_eq!(out.data(), v.data());
}

#[test]
fn attention_weights_sum_to_one() {
    let cfg = AttentionConfig {
        d_model: 32,
        heads: 4,
        window: 9,
        keep_ratio: 0.5,
        variant: Variant::PerHeadTopK,
        qkv_conv_width: 3,
    };
    for seed in 0..10 {
        let (q, k, v) = random_qkv(40, 32, 300 + seed);
        let mut mask = vec![true; 40];
        mask[0] = false;
        mask[33] = false;
        let (_, sel, weights) = attend_values(&q, &k, &v, &mask, &cfg).unwrap();
        for h in 0..4 {
            for i in 0..40 {
                if !mask[i] {
                    assert!(sel.retained[h][i].is_empty());
                    continue;
                }
                let s: f64 = weights[h][i].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "weights sum {s} at h={h} i={i}");
                // every retained index lies in the window, is unmasked,
                // unique and sorted; center always present
                let r = &sel.retained[h][i];
                assert!(r.windows(2).all(|w| w[0] < w[1]));
                assert!(r.contains(&i));
                for &j in r {
                    assert!(mask[j]);
                    assert!(j.abs_diff(i) <= cfg.window / 2);
                }
            }
        }
    }
}

#[test]
fn selection_is_deterministic() {
    let cfg = AttentionConfig {
        d_model: 16,
        heads: 2,
        window: 9,
        keep_ratio: 0.5,
        variant: Variant::PerHeadTopK,
        qkv_conv_width: 3,
    };
    let (q, k, v) = random_qkv(30, 16, 77);
    let mask = vec![true; 30];
    let (out1, sel1, _) = attend_values(&q, &k, &v, &mask, &cfg).unwrap();
    let (out2, sel2, _) = attend_values(&q, &k, &v, &mask, &cfg).unwrap();
    assert_eq!(sel1, sel2);
    assert_eq!(out1.data(), out2.data());
}

#[test]
fn fully_masked_input_is_an_error() {
    let cfg = AttentionConfig {
        d_model: 8,
        heads: 2,
        window: 5,
        keep_ratio: 0.5,
        variant: Variant::PerHeadTopK,
        qkv_conv_width: 3,
    };
    let (q, k, v) = random_qkv(4, 8, 1);
    assert!(attend_values(&q, &k, &v, &[false; 4], &cfg).is_err());
}

#[test]
fn locality_radius_of_attention_core() {
    // single core layer (no conv): perturbing x at j changes output at i
    // only if |i - j| <= W/2
    let cfg = AttentionConfig {
        d_model: 8,
        heads: 2,
        window: 5,
        keep_ratio: 1.0,
        variant: Variant::PerHeadTopK,
        qkv_conv_width: 1,
    };
    let (q, k, v) = random_qkv(16, 8, 123);
    let mask = vec![true; 16];
    let (base, _, _) = attend_values(&q, &k, &v, &mask, &cfg).unwrap();
    let j = 8;
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for c in 0..8 {
        k2.data_mut()[j * 8 + c] += 0.5;
        v2.data_mut()[j * 8 + c] -= 0.3;
    }
    let (probed, _, _) = attend_values(&q, &k2, &v2, &mask, &cfg).unwrap();
    for i in 0..16 {
        let changed = (0..8).any(|c| (base.at2(i, c) - probed.at2(i, c)).abs() > 1e-12);
        if i.abs_diff(j) <= 2 {
            assert!(changed, "position {i} should see the perturbation at {j}");
        } else {
            assert!(!changed, "position {i} leaked beyond the window");
        }
    }
}

#[test]
fn attention_core_gradients_match_finite_differences() {
    use raseformer::gradcheck::{grad_check, DEFAULT_H};
    use raseformer::params::ParamStore;

    for (variant, seed) in [
        (Variant::PerHeadTopK, 2u64),
        (Variant::HeadSharedTopK, 3),
        (Variant::StaticKeyNorm, 4),
        (Variant::DenseLocal, 5),
    ] {
        let cfg = AttentionConfig {
            d_model: 8,
            heads: 2,
            window: 5,
            keep_ratio: 0.5,
            variant,
            qkv_conv_width: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.register("q", Tensor::<f64>::randn(&[10, 8], 1.0, &mut rng), true);
        store.register("k", Tensor::<f64>::randn(&[10, 8], 1.0, &mut rng), true);
        store.register("v", Tensor::<f64>::randn(&[10, 8], 1.0, &mut rng), true);
        let weights = Tensor::<f64>::randn(&[10, 8], 1.0, &mut rng);
        let mask = vec![true; 10];
        let report = grad_check(&store, DEFAULT_H, |g, b| {
            let q = b.var(store.id_by_name("q").unwrap());
            let k = b.var(store.id_by_name("k").unwrap());
            let v = b.var(store.id_by_name("v").unwrap());
            let (out, _) = attention_core(g, q, k, v, &mask, &cfg)?;
            let w = g.constant(weights.clone());
            let weighted = g.mul(out, w)?;
            Ok(g.sum(weighted))
        })
        .unwrap();
        assert!(
            report.worst_rel_err < 1e-5,
            "{variant}: {} at {:?}",
            report.worst_rel_err,
            report.worst_at
        );
    }
}

#[test]
fn graph_attention_matches_value_level_run() {
    let cfg = AttentionConfig {
        d_model: 16,
        heads: 4,
        window: 7,
        keep_ratio: 0.5,
        variant: Variant::PerHeadTopK,
        qkv_conv_width: 3,
    };
    let (q, k, v) = random_qkv(18, 16, 88);
    let mask = vec![true; 18];
    let (expected, _, _) = attend_values(&q, &k, &v, &mask, &cfg).unwrap();
    let mut g: Graph<f64> = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let (out, _) = attention_core(&mut g, qv, kv, vv, &mask, &cfg).unwrap();
    assert_eq!(g.value(out).data(), expected.data());
}
