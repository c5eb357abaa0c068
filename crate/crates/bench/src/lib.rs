//! Shared fixtures for the benchmarks.

use scve_core::codec::{fit_codebooks, FilterBank, FrameConfig};
use scve_core::corpus::{corpus_to_training_set, generate_corpus, CorpusConfig, TrainingItem, Utterance};
use scve_core::CodebookSet;

pub struct Fixture {
    pub corpus: Vec<Utterance>,
    pub books: CodebookSet,
    pub items: Vec<TrainingItem>,
}

/// A small rendered corpus with desk-size codebooks, fitted on itself.
pub fn fixture(n: usize) -> Fixture {
    let corpus = generate_corpus(n, 7, &CorpusConfig::default()).expect("corpus");
    let fc = FrameConfig::default();
    let bank = FilterBank::new(&fc).expect("filter bank");
    let frames: Vec<_> = corpus.iter().map(|u| bank.analyze(&u.audio).expect("frames")).collect();
    let books = fit_codebooks(&frames, &fc, 64, 1).expect("codebooks");
    let items = corpus_to_training_set(&corpus, &books).expect("training set");
    Fixture { corpus, books, items }
}
