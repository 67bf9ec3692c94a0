mod common;

use proptest::prelude::*;
use rrvq::codebook::Codebook;
use rrvq::features::{features_from_bytes, features_to_bytes, FeatureSet, FeatureSource};
use rrvq::rng;
use rrvq::tokens::TokenStream;
use rrvq::{dequantize, nearest_neighbour, perplexity, si_sdr, Matrix};

use common::{brute_nearest, gaussian_matrix, naive_tokens, random_stack, MODES};

fn finite(lo: f32, hi: f32) -> impl Strategy<Value = f32> {
    lo..hi
}

fn codebook_and_query() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<f64>)> {
    (1usize..40, 1usize..12).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(finite(-4.0, 4.0), d), n),
            prop::collection::vec(-4.0f64..4.0, d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nearest_matches_exhaustive_scan((words, x) in codebook_and_query()) {
        let cb = Codebook::new(Matrix::from_rows(&words).unwrap(), "p", true, 0).unwrap();
        let got = nearest_neighbour(&x, &cb, false).unwrap();
        let (i, d) = brute_nearest(&x, &words, 1.0);
        prop_assert_eq!(got.index, i);
        prop_assert!((got.distance_sq - d).abs() <= 1e-9);
        prop_assert_eq!(got.codeword, &words[i][..]);
    }

    #[test]
    fn normalized_search_is_scale_free((words, x) in codebook_and_query(), k in 0.01f64..100.0) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let cb = Codebook::new(Matrix::from_rows(&words).unwrap(), "p", true, 0).unwrap();
        let a = nearest_neighbour(&x, &cb, true).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * k).collect();
        let b = nearest_neighbour(&scaled, &cb, true).unwrap();
        prop_assert!(a.index == b.index || (a.distance_sq - b.distance_sq).abs() < 1e-9);
        prop_assert_eq!(a.codeword, cb.codeword(a.index));
    }

    #[test]
    fn cascade_telescopes_and_prefixes_are_stable(seed in any::<u64>(), mode in 0usize..3) {
        let mut r = rng::from_seed(seed);
        let stack = random_stack(&mut r, MODES[mode]);
        let frames = gaussian_matrix(12, stack.dim(), &mut r);
        let full = stack.quantize_sequence(&frames).unwrap();
        for fq in &full.frames {
            let rec = dequantize(fq);
            for ((a, b), c) in rec.iter().zip(fq.final_residual()).zip(fq.input()) {
                prop_assert!((a + b - c).abs() <= 1e-9 * (1.0 + c.abs()));
            }
        }
        let n = stack.stages().len();
        for k in 0..=n {
            let short = stack.truncated(k).unwrap().quantize_sequence(&frames).unwrap();
            for (f, s) in full.frames.iter().zip(&short.frames) {
                prop_assert_eq!(&f.tokens[..k], &s.tokens[..]);
            }
        }
    }

    #[test]
    fn cascade_matches_naive_loop(seed in any::<u64>(), mode in 0usize..3) {
        let mut r = rng::from_seed(seed);
        let stack = random_stack(&mut r, MODES[mode]);
        let frames = gaussian_matrix(8, stack.dim(), &mut r);
        let got: Vec<Vec<(u32, Option<u32>)>> = stack
            .quantize_sequence(&frames)
            .unwrap()
            .frames
            .iter()
            .map(|f| f.tokens.iter().map(|t| (t.position, t.big_index)).collect())
            .collect();
        prop_assert_eq!(got, naive_tokens(&stack, &frames));
    }

    #[test]
    fn perplexity_ignores_order_and_scale(counts in prop::collection::vec(0u64..50, 1..40), k in 1u64..20, rot in 0usize..40) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let base = perplexity(&counts).unwrap();
        let mut rotated = counts.clone();
        rotated.rotate_left(rot % counts.len());
        let scaled: Vec<u64> = counts.iter().map(|c| c * k).collect();
        prop_assert!((perplexity(&rotated).unwrap() - base).abs() < 1e-9);
        prop_assert!((perplexity(&scaled).unwrap() - base).abs() < 1e-9);
        let used = counts.iter().filter(|&&c| c > 0).count() as f64;
        prop_assert!(base >= 1.0 - 1e-12 && base <= used + 1e-9);
    }

    #[test]
    fn si_sdr_is_scale_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -1.0f64..1.0), 2..64),
        k in prop_oneof![-50.0f64..-0.02, 0.02f64..50.0],
    ) {
        let reference: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        prop_assume!(reference.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let estimate: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
        let a = si_sdr(&estimate, &reference).unwrap();
        let scaled: Vec<f64> = estimate.iter().map(|v| v * k).collect();
        let b = si_sdr(&scaled, &reference).unwrap();
        prop_assume!(a.is_finite());
        prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
    }

    #[test]
    fn feature_file_round_trips(t in 1usize..30, d in 1usize..10, sr in prop::option::of(8000u32..96000), seed in any::<u64>()) {
        let mut r = rng::from_seed(seed);
        let fs = FeatureSet {
            frames: gaussian_matrix(t, d, &mut r),
            sample_rate_hz: sr,
            source: if sr.is_some() { FeatureSource::Audio } else { FeatureSource::Synthetic },
            metadata: serde_json::json!({"seed": seed}).as_object().unwrap().clone(),
        };
        let back = features_from_bytes(&features_to_bytes(&fs).unwrap()).unwrap();
        prop_assert_eq!(back.frames.as_slice(), fs.frames.as_slice());
        prop_assert_eq!(back.sample_rate_hz, sr);
        prop_assert_eq!(back.source, fs.source);
        prop_assert_eq!(back.metadata, fs.metadata);
    }

    #[test]
    fn token_file_round_trips(seed in any::<u64>(), mode in 0usize..3) {
        let mut r = rng::from_seed(seed);
        let stack = random_stack(&mut r, MODES[mode]);
        let frames = gaussian_matrix(5, stack.dim(), &mut r);
        let ts = stack.quantize_sequence(&frames).unwrap().token_stream();
        let back = TokenStream::from_bytes(&ts.to_bytes()).unwrap();
        prop_assert_eq!(back, ts);
    }
}
