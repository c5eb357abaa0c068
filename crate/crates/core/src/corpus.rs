//! Deterministic synthetic corpus: random Hangul strings rendered as chains
//! of harmonic tones, one tone per jamo.
//!
//! Utterances come in voices: consecutive groups of `utterances_per_voice`
//! share the four attributes (pitch, tempo, amplitude, vibrato), so any
//! utterance can serve as an enrollment prompt for its siblings.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{rvq_encode, AudioBuffer, CodebookSet, FilterBank, QuantizedTokenGrid};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tokenizer::{
    self, PhonemeSequence, FINAL_BASE, INITIAL_BASE, MEDIAL_BASE, SYLLABLE_COUNT,
};

pub const SAMPLE_RATE: u32 = 16_000;
pub const POOL_SIZE: usize = 200;
pub const GAP_SECONDS: f64 = 0.020;
pub const VIBRATO_HZ: f64 = 5.0;
const FADE_SECONDS: f64 = 0.005;
const HARMONICS: [f64; 3] = [1.0, 0.5, 0.25];
const POOL_SEED: u64 = 0x5C7E_2023;

/// Distribution of one attribute.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrDist {
    Uniform(f64, f64),
    Choice(Vec<f64>),
}

impl AttrDist {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            AttrDist::Uniform(lo, hi) if lo == hi => *lo,
            AttrDist::Uniform(lo, hi) => rng.random_range(*lo..*hi),
            AttrDist::Choice(v) => v[rng.random_range(0..v.len())],
        }
    }

    fn within(&self, lo: f64, hi: f64) -> bool {
        match self {
            AttrDist::Uniform(a, b) => lo <= *a && a <= b && *b <= hi,
            AttrDist::Choice(v) => !v.is_empty() && v.iter().all(|x| (lo..=hi).contains(x)),
        }
    }

    /// `lo..hi` for a uniform range, `a|b|c` for a choice.
    pub fn parse(s: &str) -> Option<Self> {
        if let Some((a, b)) = s.split_once("..") {
            return Some(AttrDist::Uniform(a.trim().parse().ok()?, b.trim().parse().ok()?));
        }
        let v: Option<Vec<f64>> = s.split('|').map(|x| x.trim().parse().ok()).collect();
        v.filter(|v| !v.is_empty()).map(AttrDist::Choice)
    }
}

impl std::fmt::Display for AttrDist {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttrDist::Uniform(a, b) => write!(f, "{a}..{b}"),
            AttrDist::Choice(v) => {
                let s: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "{}", s.join("|"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub utterances_per_voice: usize,
    pub min_syllables: usize,
    pub max_syllables: usize,
    pub base_f0: AttrDist,
    pub tempo: AttrDist,
    pub amplitude: AttrDist,
    pub vibrato_depth: AttrDist,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            utterances_per_voice: 4,
            min_syllables: 3,
            max_syllables: 10,
            base_f0: AttrDist::Uniform(80.0, 400.0),
            tempo: AttrDist::Uniform(2.0, 8.0),
            amplitude: AttrDist::Uniform(0.1, 1.0),
            vibrato_depth: AttrDist::Uniform(0.0, 20.0),
        }
    }
}

impl CorpusConfig {
    /// Training corpus for the desk model: attributes on a small grid and
    /// segment lengths that are whole numbers of 10 ms hops (13, 14, 15 or
    /// 16), without vibrato.
    pub fn desk() -> Self {
        Self {
            base_f0: AttrDist::Choice(vec![100.0, 150.0, 200.0, 250.0, 300.0]),
            tempo: AttrDist::Choice([13.0, 14.0, 15.0, 16.0].iter().map(|k| 100.0 / k).collect()),
            amplitude: AttrDist::Choice(vec![0.3, 0.6, 0.9]),
            vibrato_depth: AttrDist::Uniform(0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("base_f0", &self.base_f0, 80.0, 400.0),
            ("tempo", &self.tempo, 2.0, 8.0),
            ("amplitude", &self.amplitude, 0.1, 1.0),
            ("vibrato_depth", &self.vibrato_depth, 0.0, 20.0),
        ];
        for (name, d, lo, hi) in checks {
            if !d.within(lo, hi) {
                return Err(Error::Config(format!("{name} distribution {d} outside [{lo}, {hi}]")));
            }
        }
        if self.utterances_per_voice == 0
            || self.min_syllables == 0
            || self.min_syllables > self.max_syllables
        {
            return Err(Error::Config("bad corpus shape".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceSpec {
    pub id: String,
    pub voice: usize,
    pub text: String,
    pub base_f0: f64,
    pub tempo: f64,
    pub amplitude: f64,
    pub vibrato_depth: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub spec: UtteranceSpec,
    pub audio: AudioBuffer,
}

impl Utterance {
    pub fn transcript(&self) -> &str {
        &self.spec.text
    }
}

/// The fixed 200-syllable pool texts are drawn from.
pub fn syllable_pool() -> Vec<char> {
    let mut all: Vec<u32> = (0..SYLLABLE_COUNT).collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(POOL_SEED));
    all[..POOL_SIZE]
        .iter()
        .map(|&i| char::from_u32(0xAC00 + i).expect("syllable block"))
        .collect()
}

/// Pitch ratio of a jamo token: a semitone offset in `-6..=3`, chosen so that
/// initial ㅇ and medial ㅏ sit at exactly 1.
pub fn jamo_ratio(token: u32) -> f64 {
    let offset = if token >= FINAL_BASE {
        ((token - FINAL_BASE) + 3) % 10
    } else if token >= MEDIAL_BASE {
        ((token - MEDIAL_BASE) + 6) % 10
    } else if token >= INITIAL_BASE {
        ((token - INITIAL_BASE) + 5) % 10
    } else {
        6
    } as f64
        - 6.0;
    2f64.powf(offset / 12.0)
}

/// Render one utterance. Segment `i` starts at `i * (seg + gap)` samples; the
/// vibrato phase runs on absolute time, the carrier phase restarts per tone.
pub fn render(spec: &UtteranceSpec) -> Result<AudioBuffer> {
    let tokens = tokenizer::tokenize(&spec.text)?;
    let sr = SAMPLE_RATE as f64;
    let seg = (sr / spec.tempo).round() as usize;
    let gap = (GAP_SECONDS * sr).round() as usize;
    let fade = (FADE_SECONDS * sr).round() as usize;
    let n = tokens.len();
    let total = n * seg + n.saturating_sub(1) * gap;
    let mut out = vec![0.0f32; total];
    let norm: f64 = HARMONICS.iter().sum();
    for (i, &tok) in tokens.tokens.iter().enumerate() {
        let start = i * (seg + gap);
        let f_seg = spec.base_f0 * jamo_ratio(tok);
        let mut phase = 0.0f64;
        for k in 0..seg {
            let t = (start + k) as f64 / sr;
            let f = f_seg + spec.vibrato_depth * (2.0 * PI * VIBRATO_HZ * t).sin();
            let env = if k < fade {
                0.5 - 0.5 * (PI * k as f64 / fade as f64).cos()
            } else if seg - 1 - k < fade {
                0.5 - 0.5 * (PI * (seg - 1 - k) as f64 / fade as f64).cos()
            } else {
                1.0
            };
            let s: f64 = HARMONICS
                .iter()
                .enumerate()
                .map(|(h, w)| w * ((h + 1) as f64 * phase).sin())
                .sum();
            out[start + k] = (spec.amplitude * env * s / norm) as f32;
            phase += 2.0 * PI * f / sr;
        }
    }
    Ok(AudioBuffer::new(out, SAMPLE_RATE)?.quantized_pcm16())
}

fn voice_attributes(cfg: &CorpusConfig, seed: u64, voice: usize) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("voice/{voice}")));
    [
        cfg.base_f0.sample(&mut rng),
        cfg.tempo.sample(&mut rng),
        cfg.amplitude.sample(&mut rng),
        cfg.vibrato_depth.sample(&mut rng),
    ]
}

pub fn utterance_spec(cfg: &CorpusConfig, seed: u64, index: usize, pool: &[char]) -> UtteranceSpec {
    let voice = index / cfg.utterances_per_voice;
    let [base_f0, tempo, amplitude, vibrato_depth] = voice_attributes(cfg, seed, voice);
    let utt_seed = derive_seed(seed, &format!("utterance/{index}"));
    let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
    let len = rng.random_range(cfg.min_syllables..=cfg.max_syllables);
    let text = (0..len).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    UtteranceSpec {
        id: format!("utt{index:05}"),
        voice,
        text,
        base_f0,
        tempo,
        amplitude,
        vibrato_depth,
        seed: utt_seed,
    }
}

pub fn generate_corpus(n: usize, seed: u64, cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus needs at least one utterance".into()));
    }
    let pool = syllable_pool();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let spec = utterance_spec(cfg, seed, i, &pool);
            let audio = render(&spec)?;
            Ok(Utterance { spec, audio })
        })
        .collect()
}

pub const MANIFEST_HEADER: &str =
    "id,wav_path,transcript,base_f0,tempo,amplitude,vibrato_depth,seed,voice";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub spec: UtteranceSpec,
    /// Relative to the manifest's directory.
    pub wav_path: PathBuf,
}

/// Write `wavs/<id>.wav` under `dir` plus `manifest.csv`.
pub fn write_corpus(dir: &Path, corpus: &[Utterance]) -> Result<PathBuf> {
    let wavs = dir.join("wavs");
    std::fs::create_dir_all(&wavs).map_err(|e| Error::io(&wavs, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    corpus
        .par_iter()
        .map(|u| u.audio.write_wav(wavs.join(format!("{}.wav", u.spec.id))))
        .collect::<Result<Vec<()>>>()?;
    for u in corpus {
        let s = &u.spec;
        writeln!(
            manifest,
            "{},wavs/{}.wav,{},{},{},{},{},{},{}",
            s.id, s.id, s.text, s.base_f0, s.tempo, s.amplitude, s.vibrato_depth, s.seed, s.voice
        )
        .expect("write to string");
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::format(path, "unexpected manifest header"));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::format(path, format!("row {}: {} fields", n + 1, f.len())));
        }
        let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", n + 1));
        let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
        out.push(ManifestEntry {
            spec: UtteranceSpec {
                id: f[0].to_string(),
                voice: f[8].parse().map_err(|_| bad("voice"))?,
                text: f[2].to_string(),
                base_f0: num(3, "base_f0")?,
                tempo: num(4, "tempo")?,
                amplitude: num(5, "amplitude")?,
                vibrato_depth: num(6, "vibrato_depth")?,
                seed: f[7].parse().map_err(|_| bad("seed"))?,
            },
            wav_path: PathBuf::from(f[1]),
        });
    }
    if out.is_empty() {
        return Err(Error::InsufficientData(format!("{} lists no utterances", path.display())));
    }
    Ok(out)
}

/// Load every utterance a manifest lists.
pub fn load_corpus(manifest: &Path) -> Result<Vec<Utterance>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_par_iter()
        .map(|e| {
            let audio = AudioBuffer::read_wav(dir.join(&e.wav_path))?;
            Ok(Utterance {
                spec: e.spec,
                audio,
            })
        })
        .collect()
}

/// One training example: tokens plus codes, tagged with its voice.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub id: String,
    pub voice: usize,
    pub tokens: PhonemeSequence,
    pub grid: QuantizedTokenGrid,
}

pub fn corpus_to_training_set(
    corpus: &[Utterance],
    books: &CodebookSet,
) -> Result<Vec<TrainingItem>> {
    let bank = FilterBank::new(&books.frame)?;
    corpus
        .par_iter()
        .map(|u| {
            Ok(TrainingItem {
                id: u.spec.id.clone(),
                voice: u.spec.voice,
                tokens: tokenizer::tokenize(&u.spec.text)?,
                grid: rvq_encode(&bank.analyze(&u.audio)?, books)?,
            })
        })
        .collect()
}

/// Persist a training set as `<id>.codes` files plus `tokens.txt`, one line
/// per item: `id voice tok tok ...`.
pub fn write_training_set(dir: &Path, items: &[TrainingItem]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for it in items {
        it.grid.write(dir.join(format!("{}.codes", it.id)))?;
        write!(lines, "{} {}", it.id, it.voice).expect("write to string");
        for t in &it.tokens.tokens {
            write!(lines, " {t}").expect("write to string");
        }
        lines.push('\n');
    }
    let path = dir.join("tokens.txt");
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))
}

pub fn read_training_set(dir: &Path) -> Result<Vec<TrainingItem>> {
    let path = dir.join("tokens.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut f = line.split_whitespace();
            let id = f.next().expect("non-empty line").to_string();
            let voice = f
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(&path, format!("bad voice for {id}")))?;
            let tokens: Vec<u32> = f
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(&path, format!("bad token for {id}")))?;
            Ok(TrainingItem {
                grid: QuantizedTokenGrid::read(dir.join(format!("{id}.codes")))?,
                id,
                voice,
                tokens: PhonemeSequence::new(tokens)?,
            })
        })
        .collect()
}
