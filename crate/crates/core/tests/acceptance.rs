//! End-to-end acceptance run. Every criterion prints one PASS/FAIL line on
//! stdout (written past the test harness capture) and the test fails if any
//! criterion does.
//!
//! Criterion 8 trains the desk model for up to an hour.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use unicode_normalization::UnicodeNormalization;

use scve_core::checkpoint::Checkpoint;
use scve_core::codec::{
    fit_codebooks, residual_energies, rvq_decode, rvq_encode, FilterBank, FrameConfig, FrameMatrix,
};
use scve_core::config::RunConfig;
use scve_core::corpus::{corpus_to_training_set, generate_corpus, CorpusConfig, TrainingItem};
use scve_core::metrics::{
    extract_f0, f0_gross_pitch_error, f0_voiced_error, median, word_error_rate, F0Config, F0Track,
    GPE_DELTA,
};
use scve_core::model::synth::{synthesize, synthesize_bypassed, SynthesisRequest};
use scve_core::model::train::{evaluate, Models};
use scve_core::model::ModelConfig;
use scve_core::nn::gradcheck::{input_grad_error, param_grad_error, random_tensor, GradCheck};
use scve_core::nn::loss::cross_entropy;
use scve_core::nn::{
    AdaptiveLayerNorm, AttnMask, Block, Embedding, FeedForward, LayerNorm, MultiHeadAttention,
    ParamStore, Tensor2,
};
use scve_core::pipeline::{self, SynthesisJob};
use scve_core::style::{scale_tokens, StyleConfig, StyleKeys, StyleNetwork};
use scve_core::tokenizer::{self, FINAL_BASE, INITIAL_BASE, MEDIAL_BASE};
use scve_core::{AudioBuffer, CodebookSet, ControlVector, Error, QuantizedTokenGrid};

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run(n: usize, title: &str, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        check(false, format!("panicked: {msg}"))
    });
    say(&format!(
        "criterion {n:>2} {}  {title}: {} [{:.1}s]",
        if r.pass { "PASS" } else { "FAIL" },
        r.detail,
        t.elapsed().as_secs_f64()
    ));
    r.pass
}

fn dot(a: &Tensor2<f64>, b: &Tensor2<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn randomize(ps: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for v in ps.values_mut() {
        *v = random_tensor(v.rows(), v.cols(), rng);
    }
}

fn random_grid(len: usize, k: u32, rng: &mut ChaCha8Rng) -> QuantizedTokenGrid {
    let codes = (0..8).map(|_| (0..len).map(|_| rng.random_range(0..k)).collect()).collect();
    QuantizedTokenGrid::new(codes, k as usize).unwrap()
}

fn analyze_all(audio: &[&AudioBuffer], fc: &FrameConfig) -> Vec<FrameMatrix> {
    let bank = FilterBank::new(fc).unwrap();
    audio.iter().map(|a| bank.analyze(a).unwrap()).collect()
}

// ---------------------------------------------------------------- 1

/// Token id of a conjoining jamo as produced by NFD.
fn jamo_id(j: char) -> u32 {
    let c = j as u32;
    match c {
        0x1100..=0x1112 => INITIAL_BASE + (c - 0x1100),
        0x1161..=0x1175 => MEDIAL_BASE + (c - 0x1161),
        0x11A8..=0x11C2 => FINAL_BASE + (c - 0x11A7),
        _ => panic!("not a conjoining jamo: U+{c:04X}"),
    }
}

fn jamo_char(id: u32) -> char {
    let c = if id >= FINAL_BASE {
        0x11A7 + (id - FINAL_BASE)
    } else if id >= MEDIAL_BASE {
        0x1161 + (id - MEDIAL_BASE)
    } else {
        0x1100 + (id - INITIAL_BASE)
    };
    char::from_u32(c).unwrap()
}

fn c1_tokenizer() -> Check {
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut count = 0;
    for cp in 0xAC00u32..=0xD7A3 {
        let s = char::from_u32(cp).unwrap().to_string();
        let want: Vec<u32> = s.nfd().map(jamo_id).collect();
        let seq = tokenizer::tokenize(&s).unwrap();
        let recomposed: String = seq.tokens.iter().map(|&id| jamo_char(id)).collect::<String>().nfc().collect();
        let back = tokenizer::detokenize(&seq).unwrap();
        if seq.tokens != want || back != s || recomposed != s {
            failures.push(s);
        }
        count += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        failures.is_empty() && count == 11_172 && secs < 1.0,
        format!("{count} syllables, {} mismatches against NFD/NFC, {secs:.3}s (< 1s)", failures.len()),
    )
}

// ---------------------------------------------------------------- 2

fn grad_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, GradCheck)> {
    let mut out = Vec::new();

    for _ in 0..5 {
        let lq = rng.random_range(2..6);
        let heads = rng.random_range(1..3);
        let mask = match rng.random_range(0..3) {
            0 => AttnMask::None,
            1 => AttnMask::Causal { prefix: 0 },
            _ => AttnMask::Causal { prefix: rng.random_range(1..lq) },
        };
        let lk = if matches!(mask, AttnMask::None) { rng.random_range(1..6) } else { lq };
        let (dq, dk, dv, dout) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6));
        let inner = heads * rng.random_range(1..4);
        let mut ps = ParamStore::<f64>::new();
        let att = MultiHeadAttention::new(&mut ps, "a", dq, dk, dv, inner, dout, heads, 1.0, rng).unwrap();
        randomize(&mut ps, rng);
        let (q, k, v) = (random_tensor(lq, dq, rng), random_tensor(lk, dk, rng), random_tensor(lk, dv, rng));
        let w = random_tensor(lq, dout, rng);
        let loss = |ps: &ParamStore<f64>, q: &Tensor2<f64>, k: &Tensor2<f64>, v: &Tensor2<f64>| {
            dot(&att.forward(ps, q, k, v, mask).unwrap().0, &w)
        };
        let (_, cache) = att.forward(&ps, &q, &k, &v, mask).unwrap();
        let mut g = ps.zero_grads();
        let (gq, gk, gv) = att.backward(&ps, &cache, &w, &mut g);
        let r = param_grad_error(&ps, &g, |p| loss(p, &q, &k, &v))
            .merge(input_grad_error(&q, &gq, |x| loss(&ps, x, &k, &v)))
            .merge(input_grad_error(&k, &gk, |x| loss(&ps, &q, x, &v)))
            .merge(input_grad_error(&v, &gv, |x| loss(&ps, &q, &k, x)));
        out.push(("attention", r));
    }

    for _ in 0..2 {
        let (l, d) = (rng.random_range(1..5), rng.random_range(2..7));
        let mut ps = ParamStore::<f64>::new();
        let norm = LayerNorm::new(&mut ps, "n", d);
        randomize(&mut ps, rng);
        let (x, w) = (random_tensor(l, d, rng), random_tensor(l, d, rng));
        let loss = |ps: &ParamStore<f64>, x: &Tensor2<f64>| dot(&norm.forward(ps, x).unwrap().0, &w);
        let (_, cache) = norm.forward(&ps, &x).unwrap();
        let mut g = ps.zero_grads();
        let dx = norm.backward(&ps, &cache, &w, &mut g);
        let r = param_grad_error(&ps, &g, |p| loss(p, &x)).merge(input_grad_error(&x, &dx, |x| loss(&ps, x)));
        out.push(("layer norm", r));
    }

    for _ in 0..3 {
        let (l, d, c) = (rng.random_range(1..5), rng.random_range(2..7), rng.random_range(1..5));
        let mut ps = ParamStore::<f64>::new();
        let norm = AdaptiveLayerNorm::new(&mut ps, "n", c, d);
        randomize(&mut ps, rng);
        let (x, cond, w) = (random_tensor(l, d, rng), random_tensor(1, c, rng), random_tensor(l, d, rng));
        let loss = |ps: &ParamStore<f64>, x: &Tensor2<f64>, c: &Tensor2<f64>| dot(&norm.forward(ps, x, c).unwrap().0, &w);
        let (_, cache) = norm.forward(&ps, &x, &cond).unwrap();
        let mut g = ps.zero_grads();
        let (dx, dc) = norm.backward(&ps, &cache, &w, &mut g);
        let r = param_grad_error(&ps, &g, |p| loss(p, &x, &cond))
            .merge(input_grad_error(&x, &dx, |x| loss(&ps, x, &cond)))
            .merge(input_grad_error(&cond, &dc, |c| loss(&ps, &x, c)));
        out.push(("adaptive layer norm", r));
    }

    for _ in 0..3 {
        let (l, d, h) = (rng.random_range(1..5), rng.random_range(2..6), rng.random_range(2..9));
        let mut ps = ParamStore::<f64>::new();
        let ff = FeedForward::new(&mut ps, "ff", d, h, 1.0, rng);
        randomize(&mut ps, rng);
        let (x, w) = (random_tensor(l, d, rng), random_tensor(l, d, rng));
        let loss = |ps: &ParamStore<f64>, x: &Tensor2<f64>| dot(&ff.forward(ps, x).unwrap().0, &w);
        let (_, cache) = ff.forward(&ps, &x).unwrap();
        let mut g = ps.zero_grads();
        let dx = ff.backward(&ps, &cache, &w, &mut g);
        let r = param_grad_error(&ps, &g, |p| loss(p, &x)).merge(input_grad_error(&x, &dx, |x| loss(&ps, x)));
        out.push(("feed forward", r));
    }

    for _ in 0..2 {
        let (vocab, d) = (rng.random_range(2..8), rng.random_range(1..6));
        let ids: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..vocab)).collect();
        let mut ps = ParamStore::<f64>::new();
        let emb = Embedding::new(&mut ps, "e", vocab, d, 1.0, rng);
        let w = random_tensor(ids.len(), d, rng);
        let mut g = ps.zero_grads();
        emb.backward(&ids, &w, &mut g);
        let r = param_grad_error(&ps, &g, |p| dot(&emb.forward(p, &ids).unwrap(), &w));
        out.push(("embedding", r));
    }

    for cond_dim in [None, Some(3), Some(2)] {
        let (l, heads) = (rng.random_range(2..5), 2);
        let d = heads * rng.random_range(1..3);
        let mut ps = ParamStore::<f64>::new();
        let b = Block::new(&mut ps, "b", d, heads, rng.random_range(2..7), cond_dim, 1.0, rng).unwrap();
        randomize(&mut ps, rng);
        let (x, w) = (random_tensor(l, d, rng), random_tensor(l, d, rng));
        let c = random_tensor(1, cond_dim.unwrap_or(1), rng);
        let cond = cond_dim.map(|_| &c);
        let mask = AttnMask::Causal { prefix: 1 };
        let loss = |ps: &ParamStore<f64>, x: &Tensor2<f64>, c: Option<&Tensor2<f64>>| {
            dot(&b.forward(ps, x, c, mask).unwrap().0, &w)
        };
        let (_, cache) = b.forward(&ps, &x, cond, mask).unwrap();
        let mut g = ps.zero_grads();
        let (dx, dc) = b.backward(&ps, &cache, &w, &mut g);
        let mut r = param_grad_error(&ps, &g, |p| loss(p, &x, cond)).merge(input_grad_error(&x, &dx, |x| loss(&ps, x, cond)));
        if let Some(dc) = dc {
            r = r.merge(input_grad_error(&c, &dc, |c| loss(&ps, &x, Some(c))));
        }
        out.push(("block", r));
    }

    for _ in 0..4 {
        let heads = rng.random_range(1..3);
        let cfg = StyleConfig {
            d_model: rng.random_range(2..6),
            d_style: heads * rng.random_range(1..3),
            tokens: rng.random_range(2..5),
            heads,
            codebook_size: 5,
        };
        let c = ControlVector::new((0..cfg.tokens).map(|_| rng.random_range(0.5..2.5)).collect());
        let len = rng.random_range(2..6);
        let (prompt, d) = (rng.random_range(0..len), rng.random_range(2..9));
        let mut ps = ParamStore::<f64>::new();
        let net = StyleNetwork::new(&mut ps, "s", &cfg, 1.0, rng).unwrap();
        randomize(&mut ps, rng);
        let grid = random_grid(len, 5, rng);
        let w = random_tensor(len, cfg.d_model, rng);
        let keys = StyleKeys::Scaled(&c);
        let (_, cache) = net.forward(&ps, &grid, prompt, d, keys).unwrap();
        let mut g = ps.zero_grads();
        net.backward(&ps, &cache, &w, &mut g);
        let r = param_grad_error(&ps, &g, |p| dot(&net.forward(p, &grid, prompt, d, keys).unwrap().0, &w));
        out.push(("style network with scale_tokens", r));
    }

    let tiny = ModelConfig {
        d_model: 4,
        d_style: 4,
        style_tokens: 3,
        style_heads: 2,
        heads: 2,
        ff_hidden: 6,
        ar_blocks: 1,
        nar_blocks: 1,
        codebook_size: 4,
    };
    let m = Models::<f64>::new(&tiny, 8).unwrap();
    let mut ar_ps = m.ar_ps.clone();
    randomize(&mut ar_ps, rng);
    let (text, prompt, target) = ([70, 89, 3], [1, 2], [3, 0, 2]);
    let labels = m.ar.labels(&target);
    let (logits, cache) = m.ar.forward(&ar_ps, &text, &prompt, &target).unwrap();
    let (_, dl, _) = cross_entropy(&logits, &labels);
    let mut g = ar_ps.zero_grads();
    m.ar.backward(&ar_ps, &cache, &dl, &mut g);
    let r = param_grad_error(&ar_ps, &g, |p| cross_entropy(&m.ar.forward(p, &text, &prompt, &target).unwrap().0, &labels).0);
    out.push(("AR decoder", r));

    let mut nar_ps = m.nar_ps.clone();
    randomize(&mut nar_ps, rng);
    let grid = random_grid(5, 4, rng);
    let c = ControlVector::new(vec![0.6, 1.9, 2.4]);
    let keys = StyleKeys::Scaled(&c);
    let labels: Vec<usize> = grid.stage(4)[2..].iter().map(|&v| v as usize).collect();
    let (logits, cache) = m.nar.forward(&nar_ps, &[71, 3], &grid, 2, 5, keys).unwrap();
    let (_, dl, _) = cross_entropy(&logits, &labels);
    let mut g = nar_ps.zero_grads();
    m.nar.backward(&nar_ps, &cache, &dl, &mut g);
    let r = param_grad_error(&nar_ps, &g, |p| {
        cross_entropy(&m.nar.forward(p, &[71, 3], &grid, 2, 5, keys).unwrap().0, &labels).0
    });
    out.push(("NAR decoder", r));
    out
}

fn c2_gradients() -> Check {
    let t = Instant::now();
    let cases = grad_cases(&mut ChaCha8Rng::seed_from_u64(2));
    let secs = t.elapsed().as_secs_f64();
    let worst = cases.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let checked: usize = cases.iter().map(|(_, r)| r.checked).sum();
    let failing: Vec<&str> = cases.iter().filter(|(_, r)| r.max_rel_err >= 1e-4).map(|(n, _)| *n).collect();
    let mut kinds: Vec<&str> = cases.iter().map(|(n, _)| *n).collect();
    kinds.dedup();
    check(
        failing.is_empty() && cases.len() >= 20 && secs < 120.0,
        format!(
            "{} shapes ({}), {checked} entries, max rel err {worst:.2e} (< 1e-4), {secs:.1}s (< 120s){}",
            cases.len(),
            kinds.join(", "),
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 3

fn small_books(n: usize, seed: u64) -> (CodebookSet, Vec<AudioBuffer>) {
    let fc = FrameConfig::default();
    let corpus = generate_corpus(n, seed, &CorpusConfig::desk()).unwrap();
    let audio: Vec<AudioBuffer> = corpus.into_iter().map(|u| u.audio).collect();
    let frames = analyze_all(&audio.iter().collect::<Vec<_>>(), &fc);
    (fit_codebooks(&frames, &fc, 64, 3).unwrap(), audio)
}

fn c3_identity() -> Check {
    let m = Models::<f32>::new(&ModelConfig::desk(), 3).unwrap();
    let s = m.nar_ps.get(m.nar.style.bank);
    let ones = ControlVector::ones(m.cfg.style_tokens);
    let k = scale_tokens(s, &ones).unwrap();
    let tokens_same = k.shape() == s.shape() && k.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let (books, audio) = small_books(8, 5);
    let bank = FilterBank::new(&books.frame).unwrap();
    let prompt = rvq_encode(&bank.analyze(&audio[0]).unwrap(), &books).unwrap().slice(0, 50);
    let (mut compared, mut differing) = (0, 0);
    for seed in 0..16 {
        let mut req = SynthesisRequest::new("가나다라", prompt.clone(), ones.clone(), seed);
        req.max_len = Some(80);
        match (synthesize(&m, &books, &req), synthesize_bypassed(&m, &books, &req)) {
            (Ok(a), Ok(b)) => {
                compared += 1;
                let audio_same = a.audio.samples.len() == b.audio.samples.len()
                    && a.audio.samples.iter().zip(&b.audio.samples).all(|(x, y)| x.to_bits() == y.to_bits());
                if a.grid != b.grid || !audio_same {
                    differing += 1;
                }
            }
            (Err(a), Err(b)) if a.to_string() == b.to_string() => {}
            _ => differing += 1,
        }
    }
    check(
        tokens_same && compared > 0 && differing == 0,
        format!(
            "scale_tokens(S, 1) {} S; {compared} syntheses with c = 1 vs scaling bypassed, {differing} differ",
            if tokens_same { "==" } else { "!=" }
        ),
    )
}

// ---------------------------------------------------------------- 4

fn c4_linearity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Models::<f64>::new(&ModelConfig::desk(), 4).unwrap();
    let n = m.cfg.style_tokens;
    let net = &m.nar.style;
    let grid = random_grid(30, 64, &mut rng);
    let base_value = 0.6;
    let mut worst: f64 = 0.0;
    let mut others_moved = 0;
    for k in 0..n {
        let mut c = vec![1.0; n];
        c[k] = base_value;
        let base = net.scores(&m.nar_ps, &grid, 10, 4, StyleKeys::Scaled(&ControlVector::new(c.clone()))).unwrap();
        for alpha in [1.5, 2.5, 4.0] {
            c[k] = alpha * base_value;
            let scaled = net.scores(&m.nar_ps, &grid, 10, 4, StyleKeys::Scaled(&ControlVector::new(c.clone()))).unwrap();
            for (h0, h1) in base.iter().zip(&scaled) {
                for t in 0..h0.rows() {
                    for i in 0..n {
                        if i == k {
                            let want = alpha * h0.get(t, i);
                            let err = (h1.get(t, i) - want).abs();
                            worst = worst.max(if want == 0.0 { err } else { err / want.abs() });
                        } else if h1.get(t, i) != h0.get(t, i) {
                            others_moved += 1;
                        }
                    }
                }
            }
        }
    }

    let mut rejected = 0;
    let bad = [2.6, 0.4, 2.5000001, f64::NAN];
    for &v in &bad {
        let mut c = vec![1.0; n];
        c[3] = v;
        let c = ControlVector::new(c);
        let scored = net.scores(&m.nar_ps, &grid, 10, 4, StyleKeys::Scaled(&c));
        let req = SynthesisRequest::new("가", grid.slice(0, 10), c.clone(), 0);
        let books = CodebookSet {
            books: vec![Tensor2::zeros(64, 40); 8],
            frame: FrameConfig::default(),
        };
        let synth = synthesize(&m, &books, &req);
        if matches!(scored, Err(Error::ControlOutOfRange { index: 3, .. }))
            && matches!(synth, Err(Error::ControlOutOfRange { index: 3, .. }))
        {
            rejected += 1;
        }
    }
    let edges_ok = [0.5, 2.5].iter().all(|&v| ControlVector::single(n, 0, v).validate(n).is_ok());
    check(
        worst <= 1e-10 && others_moved == 0 && rejected == bad.len() && edges_ok,
        format!(
            "max rel err of score(a*c_k) vs a*score(c_k) {worst:.1e} (<= 1e-10), other columns moved {others_moved}; \
             {rejected}/{} out-of-range vectors (2.6, 0.4, ...) rejected, 0.5 and 2.5 accepted: {edges_ok}",
            bad.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn c5_rvq() -> Check {
    let fc = FrameConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random_frames = |n: usize, rng: &mut ChaCha8Rng| FrameMatrix {
        frames: Tensor2::from_fn(n, fc.bands, |_, _| rng.random_range(-6.0..2.0)),
        hop: fc.hop,
        frame_size: fc.frame_size,
    };
    let fit_set = random_frames(2000, &mut rng);
    let books = fit_codebooks(&[fit_set], &fc, 64, 5).unwrap();
    let pinned = books.books[1..].iter().all(|b| b.row(0).iter().all(|&v| v == 0.0));
    let probe = random_frames(1000, &mut rng);
    let energies = residual_energies(&probe, &books).unwrap();
    // Entry 0 is the frame itself; stage 1 has no zero row to fall back on.
    let increases = energies.iter().filter(|e| e[1..].windows(2).any(|w| w[1] > w[0])).count();

    let (cb, audio) = small_books_split();
    let bank = FilterBank::new(&fc).unwrap();
    let mse = |stages: usize| {
        let (mut sum, mut count) = (0.0, 0usize);
        for a in &audio {
            let frames = bank.analyze(a).unwrap();
            let back = rvq_decode(&rvq_encode(&frames, &cb).unwrap(), &cb, stages).unwrap();
            for (x, y) in frames.frames.data().iter().zip(back.frames.data()) {
                sum += (x - y) * (x - y);
                count += 1;
            }
        }
        sum / count as f64
    };
    let (mse1, mse8) = (mse(1), mse(8));

    let frames = bank.analyze(&audio[0]).unwrap();
    let g1 = rvq_encode(&frames, &cb).unwrap();
    let g2 = rvq_encode(&frames, &cb).unwrap();
    let d1 = rvq_decode(&g1, &cb, 8).unwrap();
    let d2 = rvq_decode(&g2, &cb, 8).unwrap();
    let deterministic = g1 == g2
        && d1.frames.data().iter().zip(d2.frames.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        && cb == small_books_split().0;
    check(
        pinned && increases == 0 && mse8 < mse1 && deterministic,
        format!(
            "zero rows pinned: {pinned}; {increases}/1000 random frames with a residual rising between stages 1..8; \
             held-out MSE 8 stages {mse8:.4} < 1 stage {mse1:.4}; encode/decode/fit deterministic: {deterministic}"
        ),
    )
}

/// Codebooks fit on the first 32 utterances (8 voices); the audio of the
/// last 8 (2 unseen voices) is returned for evaluation.
fn small_books_split() -> (CodebookSet, Vec<AudioBuffer>) {
    let fc = FrameConfig::default();
    let corpus = generate_corpus(40, 21, &CorpusConfig::desk()).unwrap();
    let (fit, held) = corpus.split_at(32);
    let frames = analyze_all(&fit.iter().map(|u| &u.audio).collect::<Vec<_>>(), &fc);
    let books = fit_codebooks(&frames, &fc, 64, 7).unwrap();
    (books, held.iter().map(|u| u.audio.clone()).collect())
}

// ---------------------------------------------------------------- 6

/// Minimal edit count by trying every edit script.
fn edit_oracle(r: &[u8], h: &[u8]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((a, rr)), Some((b, hh))) => {
            let sub = edit_oracle(rr, hh) + usize::from(a != b);
            let del = edit_oracle(rr, h) + 1;
            let ins = edit_oracle(r, hh) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn words(len: usize, mut index: usize) -> Vec<u8> {
    (0..len)
        .map(|_| {
            let w = b"abc"[index % 3];
            index /= 3;
            w
        })
        .collect()
}

fn c6_metrics() -> Check {
    let mut pairs = 0usize;
    let mut wrong = 0usize;
    for total in 1..=8usize {
        for rl in 1..=total {
            let hl = total - rl;
            for ri in 0..3usize.pow(rl as u32) {
                let r = words(rl, ri);
                let rs: Vec<String> = r.iter().map(|&b| (b as char).to_string()).collect();
                let rs = rs.join(" ");
                for hi in 0..3usize.pow(hl as u32) {
                    let h = words(hl, hi);
                    let hs: Vec<String> = h.iter().map(|&b| (b as char).to_string()).collect();
                    let w = word_error_rate(&rs, &hs.join(" ")).unwrap();
                    let best = edit_oracle(&r, &h);
                    let consistent = w.reference_words == rl
                        && rl + w.insertions == hl + w.deletions
                        && (w.wer() - best as f64 / rl as f64).abs() < 1e-15;
                    if w.errors() != best || !consistent {
                        wrong += 1;
                    }
                    pairs += 1;
                }
            }
        }
    }
    let empty_ref = matches!(word_error_rate("", "a"), Err(Error::EmptyReference));

    let hop = 0.01;
    let flat = |v: f64| F0Track::voiced(&[v; 50], hop);
    let fve_id = f0_voiced_error(&flat(100.0), &flat(100.0)).unwrap();
    let fve_10 = f0_voiced_error(&flat(100.0), &flat(110.0)).unwrap();
    let gpe = |syn: f64| f0_gross_pitch_error(&flat(100.0), &flat(syn), GPE_DELTA).unwrap();
    let (g_up, g_down, g_up25, g_down25) = (gpe(120.0), gpe(80.0), gpe(125.0), gpe(75.0));
    let metric_ok = fve_id == 0.0
        && (fve_10 - 10.0).abs() < 1e-9
        && g_up == 0.0
        && g_down == 0.0
        && g_up25 == 100.0
        && g_down25 == 100.0;
    check(
        wrong == 0 && empty_ref && metric_ok,
        format!(
            "WER vs exhaustive edit scripts: {wrong} mismatches over {pairs} pairs (up to 8 words in total); \
             FVE identity {fve_id}, 100 vs 110 Hz {fve_10:.6}; F0GPE at +-20% {g_up}%/{g_down}%, at +-25% {g_up25}%/{g_down25}%"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn c7_f0() -> Check {
    let sr = 16_000;
    let samples: Vec<f32> = (0..sr)
        .map(|i| (0.5 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / sr as f64).sin()) as f32)
        .collect();
    let track = extract_f0(&AudioBuffer::new(samples, sr as u32).unwrap(), &F0Config::default()).unwrap();
    let voiced = track.voiced_values();
    let med = median(&voiced).unwrap_or(0.0);
    let frac = voiced.len() as f64 / track.len() as f64;
    let octave_down = voiced.iter().filter(|&&f| f < 165.0).count();
    check(
        (med - 220.0).abs() <= 2.0 && frac >= 0.95 && octave_down == 0,
        format!("median {med:.2} Hz (220 +- 2), voiced {:.1}% (>= 95%), octave-down frames {octave_down}", 100.0 * frac),
    )
}

// ---------------------------------------------------------------- 8

const CORPUS_SIZE: usize = 2000;
const CORPUS_SEED: u64 = 1;
const STEP_LIMIT: usize = 20_000;
const TIME_LIMIT: Duration = Duration::from_secs(60 * 60);
const EVAL_EVERY: usize = 1000;

struct Trained {
    _dir: TempDir,
    root: PathBuf,
    run: PathBuf,
    books: CodebookSet,
    cfg: RunConfig,
    items: Vec<TrainingItem>,
    heldout: Vec<TrainingItem>,
    /// Audio of the held-out utterances, by id.
    heldout_audio: Vec<(String, AudioBuffer)>,
}

impl Trained {
    fn books_path(&self) -> PathBuf {
        self.root.join("books.bin")
    }

    /// The first short held-out utterance's text, and a prompt wav cropped
    /// from another utterance of the same voice to the longest training
    /// prompt.
    fn prompt_case(&self) -> (String, PathBuf) {
        let sibling_of = |t: &TrainingItem| {
            self.heldout.iter().find(|it| it.voice == t.voice && it.id != t.id)
        };
        let target = self
            .heldout
            .iter()
            .find(|t| t.grid.len() <= 200 && sibling_of(t).is_some())
            .unwrap_or(&self.heldout[0]);
        let sibling = sibling_of(target).unwrap_or(target);
        let audio = &self.heldout_audio.iter().find(|(id, _)| *id == sibling.id).unwrap().1;
        let frame = &self.cfg.frame;
        let keep = (self.cfg.sampling.prompt_max * frame.hop + frame.frame_size).min(audio.len());
        let wav = self.root.join(format!("prompt_{}.wav", sibling.id));
        AudioBuffer::new(audio.samples[..keep].to_vec(), audio.sample_rate)
            .unwrap()
            .write_wav(&wav)
            .unwrap();
        (tokenizer::detokenize(&target.tokens).unwrap(), wav)
    }
}

fn c8_training(trained: &mut Option<Trained>) -> Check {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = RunConfig::desk();
    let corpus = generate_corpus(CORPUS_SIZE, CORPUS_SEED, &CorpusConfig::desk()).unwrap();
    let frames = analyze_all(&corpus.iter().map(|u| &u.audio).collect::<Vec<_>>(), &cfg.frame);
    let books = fit_codebooks(&frames, &cfg.frame, cfg.model.codebook_size, cfg.seed).unwrap();
    drop(frames);
    books.write(root.join("books.bin")).unwrap();
    let items = corpus_to_training_set(&corpus, &books).unwrap();
    let prep = t0.elapsed().as_secs_f64();

    let run = root.join("run");
    let mut step = 0;
    let mut sec_per_step = 1.0;
    let mut eval_secs = 60.0;
    let mut history = Vec::new();
    let mut last = None;
    let mut heldout = Vec::new();
    loop {
        let left = TIME_LIMIT.as_secs_f64() - t0.elapsed().as_secs_f64() - eval_secs;
        let affordable = (left / sec_per_step).floor().max(0.0) as usize;
        let chunk = EVAL_EVERY.min(affordable).min(STEP_LIMIT - step);
        if chunk == 0 {
            break;
        }
        let t = Instant::now();
        let out = pipeline::train(&cfg, &items, &run, Some(step + chunk), |_| {}).unwrap();
        sec_per_step = t.elapsed().as_secs_f64() / chunk as f64;
        step = out.trainer.step;
        heldout = out.heldout;
        let te = Instant::now();
        let r = evaluate(&out.trainer.models, &heldout, &cfg.sampling, cfg.seed).unwrap();
        eval_secs = te.elapsed().as_secs_f64();
        history.push(format!("{step}:{:.3}/{:.3}", r.ar_accuracy, r.min_nar_accuracy()));
        let done = r.ar_accuracy >= 0.90 && r.min_nar_accuracy() >= 0.80;
        last = Some(r);
        if done {
            break;
        }
    }
    let elapsed = t0.elapsed();
    let heldout_audio = corpus
        .iter()
        .filter(|u| heldout.iter().any(|h| h.id == u.spec.id))
        .map(|u| (u.spec.id.clone(), u.audio.clone()))
        .collect();
    *trained = Some(Trained {
        _dir: dir,
        root,
        run,
        books,
        cfg,
        items,
        heldout: heldout.clone(),
        heldout_audio,
    });
    let Some(r) = last else {
        return check(false, "no training step fitted in the time budget");
    };
    let nar: Vec<String> = r.nar_accuracy.iter().map(|a| format!("{a:.3}")).collect();
    let pass = r.ar_accuracy >= 0.90 && r.min_nar_accuracy() >= 0.80 && step <= STEP_LIMIT && elapsed < TIME_LIMIT;
    check(
        pass,
        format!(
            "{} held-out utterances after {step} steps (<= {STEP_LIMIT}) in {:.1} min (< 60, prep {prep:.0}s, \
             {:.2} s/step, {} thread(s)): AR acc {:.4} (>= 0.90), NAR acc per stage [{}] (>= 0.80); \
             history step:ar/min_nar {}",
            heldout.len(),
            elapsed.as_secs_f64() / 60.0,
            sec_per_step,
            rayon::current_num_threads(),
            r.ar_accuracy,
            nar.join(", "),
            history.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_sweep(trained: &Option<Trained>) -> Check {
    let Some(tr) = trained else {
        return check(false, "no trained model");
    };
    let (_, models) = Checkpoint::read(&tr.run.join(pipeline::LATEST)).unwrap().models().unwrap();
    let (text, wav) = tr.prompt_case();
    let prompt = pipeline::encode_prompt(&AudioBuffer::read_wav(&wav).unwrap(), &tr.books).unwrap();
    let values = [0.5, 1.5, 2.5];
    let n = models.cfg.style_tokens;
    let mut lines = Vec::new();
    let mut best: (f64, usize, &str) = (0.0, 0, "");
    let mut seed = None;
    for s in 0..8 {
        let mut req = SynthesisRequest::new(text.clone(), prompt.clone(), ControlVector::ones(n), s);
        req.temperature = tr.cfg.temperature;
        if synthesize(&models, &tr.books, &req).is_ok() {
            seed = Some(s);
            break;
        }
    }
    let Some(seed) = seed else {
        return check(false, "no seed in 0..8 produced a non-empty generation");
    };
    for k in 1..=n {
        let mut req = SynthesisRequest::new(text.clone(), prompt.clone(), ControlVector::ones(n), seed);
        req.temperature = tr.cfg.temperature;
        let runs = pipeline::run_sweep(&models, &tr.books, &req, k, &values).unwrap();
        pipeline::write_sweep(&tr.root.join(format!("sweep_k{k}")), &runs, &format!("token {k}")).unwrap();
        let (a, b) = (&runs[0].summary, &runs[runs.len() - 1].summary);
        let changes = pipeline::sweep_extreme_changes(&runs);
        let signed = [b.mean_f0 - a.mean_f0, b.total_duration - a.total_duration, b.rms - a.rms];
        let mut parts = Vec::new();
        for ((name, rel), delta) in changes.iter().zip(signed) {
            let arrow = if delta > 0.0 { "+" } else if delta < 0.0 { "-" } else { "=" };
            parts.push(format!("{name} {arrow}{:.1}%", 100.0 * rel));
            if *rel > best.0 {
                best = (*rel, k, name);
            }
        }
        lines.push(format!("k={k}: {}", parts.join(" ")));
    }
    check(
        best.0 >= 0.10,
        format!(
            "seed {seed}, c_k 0.5 -> 2.5, largest change {:.1}% ({} at k={}) (>= 10%); per token {}",
            100.0 * best.0,
            best.2,
            best.1,
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 10

fn c10_determinism(trained: &Option<Trained>) -> Check {
    let Some(tr) = trained else {
        return check(false, "no trained model");
    };
    let ckpt_path = tr.run.join(pipeline::LATEST);
    let (text, wav) = tr.prompt_case();
    let n = tr.cfg.model.style_tokens;
    let mut control = vec![1.0; n];
    control[0] = 2.5;
    control[n - 1] = 0.5;
    let job = SynthesisJob {
        checkpoint: ckpt_path.clone(),
        books: tr.books_path(),
        text,
        prompt_wav: wav,
        control: Some(control),
        seed: 0,
        temperature: None,
        max_len: None,
    };
    let first = tr.root.join("replay_a.wav");
    let second = tr.root.join("replay_b.wav");
    let replay_ok = match pipeline::synthesize_job(&job, &first) {
        Ok(_) => {
            pipeline::replay(&pipeline::sidecar_path(&first), &second).unwrap();
            std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap()
        }
        Err(e) => panic!("synthesis failed: {e}"),
    };

    let bytes = std::fs::read(&ckpt_path).unwrap();
    let ck = Checkpoint::read(&ckpt_path).unwrap();
    let restored = ck.restore(&tr.cfg).unwrap();
    let ckpt_ok = Checkpoint::from_trainer(&restored, &tr.cfg).to_bytes() == bytes;

    let resume_ok = resume_matches(&tr.root, &tr.cfg, &tr.items[..240]);
    check(
        replay_ok && ckpt_ok && resume_ok,
        format!(
            "replay from sidecar byte-identical: {replay_ok}; checkpoint save/load bit-exact: {ckpt_ok}; \
             resume at step 10 equals an uninterrupted 20-step run: {resume_ok}"
        ),
    )
}

fn resume_matches(root: &Path, base: &RunConfig, items: &[TrainingItem]) -> bool {
    let mut cfg = base.clone();
    cfg.steps = 20;
    cfg.adam.total_steps = 20;
    cfg.checkpoint_every = 10;
    let whole = root.join("resume_whole");
    let split = root.join("resume_split");
    pipeline::train(&cfg, items, &whole, None, |_| {}).unwrap();
    pipeline::train(&cfg, items, &split, Some(10), |_| {}).unwrap();
    let resumed = pipeline::train(&cfg, items, &split, None, |_| {}).unwrap();
    let same = |name: &str| std::fs::read(whole.join(name)).unwrap() == std::fs::read(split.join(name)).unwrap();
    resumed.resumed_from == Some(10) && same(pipeline::LATEST) && same("loss.csv")
}

// ---------------------------------------------------------------- 11

fn c11_statement() -> Check {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = std::fs::read_to_string(&readme).unwrap_or_default();
    let needed = ["not reproduced", "GST", "VAE-Tacotron", "CMOS", "SMOS", "Whisper", "human raters"];
    let missing: Vec<&str> = needed.iter().copied().filter(|w| !text.contains(w)).collect();
    // The shipped substitutes are the metric functions and the sweep harness.
    let _harness = (word_error_rate, f0_voiced_error, f0_gross_pitch_error, pipeline::run_sweep::<f32>);
    check(
        missing.is_empty(),
        if missing.is_empty() {
            "README states that the WER/FVE/F0GPE comparison against GST/VAE-Tacotron and the CMOS/SMOS \
             listening tests are not reproduced (full Korean corpus, human raters and Whisper needed); \
             metric implementations (criterion 6) and sweep harness (criterion 9) ship instead"
                .to_string()
        } else {
            format!("README is missing {missing:?}")
        },
    )
}

#[test]
fn acceptance_criteria() {
    let mut trained = None;
    let results = [
        run(1, "tokenizer exhaustive round trip", c1_tokenizer),
        run(2, "gradient validation", c2_gradients),
        run(3, "style identity with c = 1", c3_identity),
        run(4, "control linearity and range", c4_linearity),
        run(5, "RVQ properties", c5_rvq),
        run(6, "metric oracles", c6_metrics),
        run(7, "F0 extractor on a 220 Hz sine", c7_f0),
        run(8, "desk-scale training", || c8_training(&mut trained)),
        run(9, "style-sweep sensitivity", || c9_sweep(&trained)),
        run(10, "determinism and replay", || c10_determinism(&trained)),
        run(11, "non-reproducibility statement", c11_statement),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    say(&format!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    ));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
