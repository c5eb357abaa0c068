use std::path::Path;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scve_core::codec::{fit_codebooks, residual_energies, rvq_decode, rvq_encode};
use scve_core::metrics::{f0_gross_pitch_error, f0_voiced_error, word_error_rate, F0Track, GPE_DELTA};
use scve_core::nn::{softmax_sample, Tensor2};
use scve_core::style::scale_tokens;
use scve_core::tokenizer::{detokenize, tokenize};
use scve_core::{CodebookSet, ControlVector, FrameConfig, FrameMatrix, QuantizedTokenGrid, RunConfig};

fn hangul() -> impl Strategy<Value = char> {
    (0xAC00u32..=0xD7A3).prop_map(|c| char::from_u32(c).unwrap())
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::collection::vec(hangul(), 1..6), 1..5).prop_map(|words| {
        words
            .iter()
            .map(|w| w.iter().collect::<String>())
            .collect::<Vec<_>>()
            .join(" ")
    })
}

fn frames(rows: usize, data: Vec<f64>) -> FrameMatrix {
    let fc = FrameConfig::default();
    FrameMatrix {
        frames: Tensor2::from_vec(rows, fc.bands, data).unwrap(),
        hop: fc.hop,
        frame_size: fc.frame_size,
    }
}

fn books() -> &'static CodebookSet {
    static BOOKS: OnceLock<CodebookSet> = OnceLock::new();
    BOOKS.get_or_init(|| {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 600;
        let data = (0..n * 40).map(|_| rng.random_range(-6.0..2.0)).collect();
        fit_codebooks(&[frames(n, data)], &FrameConfig::default(), 16, 2).unwrap()
    })
}

fn words(max: usize) -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..max)
}

proptest! {
    #[test]
    fn tokenizer_round_trips(s in text()) {
        let seq = tokenize(&s).unwrap();
        let syllables = s.chars().filter(|c| *c != ' ').count();
        prop_assert!(seq.len() >= 2 * syllables + s.matches(' ').count());
        prop_assert!(seq.len() <= 3 * syllables + s.matches(' ').count());
        prop_assert_eq!(detokenize(&seq).unwrap(), s);
    }

    #[test]
    fn ones_scaling_is_bitwise_identity(rows in 1usize..12, cols in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor2::<f32>::from_fn(rows, cols, |_, _| rng.random_range(-3.0..3.0));
        let k = scale_tokens(&s, &ControlVector::ones(rows)).unwrap();
        prop_assert!(k.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn scaling_multiplies_rows(c in prop::collection::vec(0.5f64..=2.5, 1..8), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor2::<f64>::from_fn(c.len(), 4, |_, _| rng.random_range(-3.0..3.0));
        let k = scale_tokens(&s, &ControlVector::new(c.clone())).unwrap();
        for (i, ci) in c.iter().enumerate() {
            for j in 0..4 {
                prop_assert_eq!(k.get(i, j), ci * s.get(i, j));
            }
        }
    }

    #[test]
    fn control_range_is_closed_interval(v in prop::collection::vec(-1.0f64..4.0, 1..12)) {
        let inside = v.iter().all(|x| (0.5..=2.5).contains(x));
        prop_assert_eq!(ControlVector::new(v.clone()).validate(v.len()).is_ok(), inside);
        prop_assert!(ControlVector::new(v.clone()).validate(v.len() + 1).is_err());
    }

    #[test]
    fn residuals_never_grow_after_stage_one(data in prop::collection::vec(-8.0f64..4.0, 40..=400)) {
        let rows = data.len() / 40;
        let f = frames(rows, data[..rows * 40].to_vec());
        for e in residual_energies(&f, books()).unwrap() {
            for w in e[1..].windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn more_stages_reconstruct_no_worse(data in prop::collection::vec(-8.0f64..4.0, 40..=200)) {
        let rows = data.len() / 40;
        let f = frames(rows, data[..rows * 40].to_vec());
        let grid = rvq_encode(&f, books()).unwrap();
        let err = |stages| {
            let back = rvq_decode(&grid, books(), stages).unwrap();
            f.frames.data().iter().zip(back.frames.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let errs: Vec<f64> = (1..=8).map(err).collect();
        for w in errs.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn code_grid_text_round_trips(len in 0usize..20, k in 1usize..50, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = (0..8).map(|_| (0..len).map(|_| rng.random_range(0..k as u32)).collect()).collect();
        let g = QuantizedTokenGrid::new(codes, k).unwrap();
        prop_assert_eq!(QuantizedTokenGrid::parse(&g.to_text(), Path::new("mem")).unwrap(), g);
    }

    #[test]
    fn wer_breakdown_is_consistent(r in words(9), h in words(9)) {
        prop_assume!(!r.is_empty());
        let (rs, hs) = (r.join(" "), h.join(" "));
        let w = word_error_rate(&rs, &hs).unwrap();
        prop_assert_eq!(w.reference_words, r.len());
        prop_assert_eq!(r.len() + w.insertions, h.len() + w.deletions);
        prop_assert!(w.errors() >= r.len().abs_diff(h.len()));
        prop_assert!(w.errors() <= r.len().max(h.len()));
        prop_assert_eq!(word_error_rate(&rs, &rs).unwrap().errors(), 0);
        // Edit distance is symmetric even though the rate is not.
        if !h.is_empty() {
            prop_assert_eq!(word_error_rate(&hs, &rs).unwrap().errors(), w.errors());
        }
    }

    #[test]
    fn pitch_errors_are_bounded(a in prop::collection::vec(60.0f64..400.0, 1..40), scale in 0.5f64..2.0) {
        let f = F0Track::voiced(&a, 0.01);
        let g = F0Track::voiced(&a.iter().map(|x| x * scale).collect::<Vec<_>>(), 0.01);
        let fve = f0_voiced_error(&f, &g).unwrap();
        prop_assert!(fve >= 0.0);
        prop_assert!((fve - f0_voiced_error(&g, &f).unwrap()).abs() < 1e-9);
        let gpe = f0_gross_pitch_error(&f, &g, GPE_DELTA).unwrap();
        prop_assert!((0.0..=100.0).contains(&gpe));
        prop_assert_eq!(f0_voiced_error(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn config_text_round_trips(lr in 1e-5f64..1e-2, seed in any::<u64>(), batch in 1usize..64, tokens in 1usize..16) {
        let mut cfg = RunConfig::desk();
        cfg.set("lr", &lr.to_string()).unwrap();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("batch_size", &batch.to_string()).unwrap();
        cfg.set("style_tokens", &tokens.to_string()).unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn sampling_is_seeded_and_in_range(logits in prop::collection::vec(-5.0f32..5.0, 1..30), t in 0.05f64..3.0, seed in any::<u64>()) {
        let a = softmax_sample(&logits, t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = softmax_sample(&logits, t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a < logits.len());
    }
}
