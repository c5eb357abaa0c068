//! Command-level workflows: training runs on disk, replayable synthesis,
//! the style sweep and evaluation reports.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::codec::{rvq_encode, AudioBuffer, CodebookSet, FilterBank, QuantizedTokenGrid};
use crate::config::RunConfig;
use crate::corpus::{corpus_to_training_set, load_corpus, TrainingItem};
use crate::error::{Error, Result};
use crate::metrics::{
    acoustic_summary, f0_gross_pitch_error, f0_voiced_error, mel_to_csv, word_error_rate, write_text,
    AcousticSummary, F0Config, F0Track, WerBreakdown, GPE_DELTA,
};
use crate::model::synth::{synthesize, Synthesis, SynthesisRequest};
use crate::model::train::{split_by_voice, Models, StepStats, Trainer, VoiceIndex};
use crate::style::ControlVector;

pub const LOSS_HEADER: &str = "step,ar_loss,nar_loss";
pub const LATEST: &str = "latest.ckpt";
pub const LOCK: &str = "train.lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Read a corpus manifest and encode every utterance with `books`.
pub fn load_training_set(manifest: &Path, books: &CodebookSet) -> Result<Vec<TrainingItem>> {
    corpus_to_training_set(&load_corpus(manifest)?, books)
}

/// Exclusive claim on a training directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "pid {}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt-{step:06}.ckpt")
}

/// What [`train`] did.
#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub resumed_from: Option<usize>,
    pub train_items: usize,
    pub heldout: Vec<TrainingItem>,
}

/// Run (or resume) training in `out_dir` until `stop_at` updates have been
/// made, `cfg.steps` at most.
///
/// Writes `config.txt`, `loss.csv` (one row per update), a checkpoint every
/// `cfg.checkpoint_every` updates plus `latest.ckpt` at the end. An existing
/// `latest.ckpt` is resumed from, and must carry this config's hash. A
/// numeric fault leaves `fault.txt` behind.
pub fn train(
    cfg: &RunConfig,
    items: &[TrainingItem],
    out_dir: &Path,
    stop_at: Option<usize>,
    mut progress: impl FnMut(&StepStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let _lock = DirLock::acquire(out_dir)?;
    let stop = stop_at.unwrap_or(cfg.steps).min(cfg.steps);

    let (train_items, heldout) = split_by_voice(items, cfg.heldout_fraction);
    if train_items.is_empty() {
        return Err(Error::InsufficientData("no training items after the held-out split".into()));
    }
    let voices = VoiceIndex::new(&train_items);

    let latest = out_dir.join(LATEST);
    let loss_path = out_dir.join("loss.csv");
    let (mut trainer, resumed_from) = if latest.exists() {
        let tr = Checkpoint::read(&latest)?.restore(cfg)?;
        truncate_loss_log(&loss_path, tr.step)?;
        let step = tr.step;
        (tr, Some(step))
    } else {
        write_text(&loss_path, &format!("{LOSS_HEADER}\n"))?;
        (Trainer::new(&cfg.model, cfg.adam.clone(), cfg.sampling.clone(), cfg.seed)?, None)
    };
    write_text(out_dir.join("config.txt"), &cfg.to_text())?;

    let mut log = OpenOptions::new()
        .append(true)
        .open(&loss_path)
        .map_err(|e| Error::io(&loss_path, e))?;
    let mut last: Option<StepStats> = None;
    while trainer.step < stop {
        let stats = match trainer.step(&train_items, &voices) {
            Ok(s) => s,
            Err(e @ Error::NumericFault(_)) => {
                write_fault(out_dir, &trainer, last.as_ref(), &e)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{},{},{}", stats.step, stats.ar_loss, stats.nar_loss)
            .map_err(|e| Error::io(&loss_path, e))?;
        progress(&stats);
        last = Some(stats);
        if trainer.step % cfg.checkpoint_every == 0 {
            let ck = Checkpoint::from_trainer(&trainer, cfg);
            ck.write(&out_dir.join(checkpoint_name(trainer.step)))?;
            ck.write(&latest)?;
        }
    }
    log.flush().map_err(|e| Error::io(&loss_path, e))?;
    Checkpoint::from_trainer(&trainer, cfg).write(&latest)?;
    Ok(TrainOutcome {
        trainer,
        resumed_from,
        train_items: train_items.len(),
        heldout,
    })
}

/// Drop log rows at or after `step`, left over from updates the checkpoint
/// does not include.
fn truncate_loss_log(path: &Path, step: usize) -> Result<()> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{LOSS_HEADER}\n");
    for line in text.lines().skip(1) {
        let row_step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
        if matches!(row_step, Some(s) if s < step) {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_text(path, &out)
}

fn write_fault(out_dir: &Path, tr: &Trainer, last: Option<&StepStats>, err: &Error) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "error: {err}").expect("write to string");
    writeln!(s, "step: {}", tr.step).expect("write to string");
    match last {
        Some(st) => writeln!(s, "last good step: {st:?}").expect("write to string"),
        None => writeln!(s, "last good step: none").expect("write to string"),
    }
    writeln!(s, "parameter,max_abs,finite").expect("write to string");
    for ps in [&tr.models.ar_ps, &tr.models.nar_ps] {
        for (name, t) in ps.iter() {
            let max = t.data().iter().fold(0f32, |m, v| m.max(v.abs()));
            let finite = t.data().iter().all(|v| v.is_finite());
            writeln!(s, "{name},{max},{finite}").expect("write to string");
        }
    }
    write_text(out_dir.join("fault.txt"), &s)
}

/// Prompt audio to codes; the sample rate must match the codebooks.
pub fn encode_prompt(audio: &AudioBuffer, books: &CodebookSet) -> Result<QuantizedTokenGrid> {
    if audio.sample_rate != books.frame.sample_rate {
        return Err(Error::DimensionMismatch {
            expected: books.frame.sample_rate as usize,
            got: audio.sample_rate as usize,
        });
    }
    rvq_encode(&FilterBank::new(&books.frame)?.analyze(audio)?, books)
}

/// Everything needed to rerun one synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub text: String,
    pub prompt_wav: PathBuf,
    pub prompt_sha256: String,
    pub checkpoint: PathBuf,
    pub checkpoint_step: u64,
    pub checkpoint_sha256: String,
    pub books: PathBuf,
    pub config_hash: String,
    /// Master seed of the training run.
    pub run_seed: u64,
    /// Sampling seed of this synthesis.
    pub seed: u64,
    pub temperature: f64,
    pub max_len: usize,
    pub control: Vec<f64>,
    pub baseline: bool,
    pub frames: usize,
    pub truncated: bool,
    pub output_sha256: String,
}

#[derive(Debug, Clone)]
pub struct SynthesisJob {
    pub checkpoint: PathBuf,
    pub books: PathBuf,
    pub text: String,
    pub prompt_wav: PathBuf,
    /// `None` runs the baseline, `c = 1`.
    pub control: Option<Vec<f64>>,
    pub seed: u64,
    pub temperature: Option<f64>,
    pub max_len: Option<usize>,
}

pub fn sidecar_path(wav: &Path) -> PathBuf {
    wav.with_extension("json")
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Synthesize to `out_wav` and write the metadata sidecar next to it.
pub fn synthesize_job(job: &SynthesisJob, out_wav: &Path) -> Result<(Synthesis, SynthesisRecord)> {
    let ck = Checkpoint::read(&job.checkpoint)?;
    let (cfg, models) = ck.models()?;
    let books = CodebookSet::read(&job.books)?;
    let prompt_audio = AudioBuffer::read_wav(&job.prompt_wav)?;
    let prompt = encode_prompt(&prompt_audio, &books)?;
    let n = cfg.model.style_tokens;
    let control = match &job.control {
        Some(v) => ControlVector::new(v.clone()),
        None => ControlVector::ones(n),
    };
    let mut req = SynthesisRequest::new(job.text.clone(), prompt, control, job.seed);
    req.temperature = job.temperature.unwrap_or(cfg.temperature);
    req.max_len = job.max_len;
    let out = synthesize(&models, &books, &req)?;
    out.audio.write_wav(out_wav)?;
    let record = SynthesisRecord {
        text: job.text.clone(),
        prompt_wav: absolute(&job.prompt_wav),
        prompt_sha256: file_sha256(&job.prompt_wav)?,
        checkpoint: absolute(&job.checkpoint),
        checkpoint_step: ck.step,
        checkpoint_sha256: file_sha256(&job.checkpoint)?,
        books: absolute(&job.books),
        config_hash: ck.config_hash.clone(),
        run_seed: cfg.seed,
        seed: job.seed,
        temperature: req.temperature,
        max_len: req.max_len(),
        control: req.control.values().to_vec(),
        baseline: job.control.is_none(),
        frames: out.grid.len(),
        truncated: out.truncated,
        output_sha256: file_sha256(out_wav)?,
    };
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    write_text(sidecar_path(out_wav), &(json + "\n"))?;
    Ok((out, record))
}

pub fn read_sidecar(path: &Path) -> Result<SynthesisRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Rerun the synthesis a sidecar describes, writing to `out_wav`. Inputs
/// whose contents no longer match the recorded hashes are rejected.
pub fn replay(sidecar: &Path, out_wav: &Path) -> Result<SynthesisRecord> {
    let rec = read_sidecar(sidecar)?;
    for (path, want) in [
        (&rec.prompt_wav, &rec.prompt_sha256),
        (&rec.checkpoint, &rec.checkpoint_sha256),
    ] {
        if &file_sha256(path)? != want {
            return Err(Error::format(path, "contents differ from the recorded hash"));
        }
    }
    let job = SynthesisJob {
        checkpoint: rec.checkpoint.clone(),
        books: rec.books.clone(),
        text: rec.text.clone(),
        prompt_wav: rec.prompt_wav.clone(),
        control: (!rec.baseline).then(|| rec.control.clone()),
        seed: rec.seed,
        temperature: Some(rec.temperature),
        max_len: Some(rec.max_len),
    };
    Ok(synthesize_job(&job, out_wav)?.1)
}

/// One point of a style sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub value: f64,
    pub control: ControlVector,
    pub synthesis: Synthesis,
    pub summary: AcousticSummary,
}

pub const SWEEP_HEADER: &str = "value,mean_f0,duration,rms,voiced_fraction";

/// Synthesize once per value with `c_k = value` (k is 1-based) and every
/// other entry 1, all at the request's seed.
pub fn run_sweep<T: crate::nn::Scalar>(
    m: &Models<T>,
    books: &CodebookSet,
    base: &SynthesisRequest,
    k: usize,
    values: &[f64],
) -> Result<Vec<SweepRun>> {
    let n = m.cfg.style_tokens;
    if k == 0 || k > n {
        return Err(Error::IndexOutOfRange { index: k, size: n });
    }
    let bank = FilterBank::new(&books.frame)?;
    values
        .iter()
        .map(|&v| {
            let control = ControlVector::single(n, k - 1, v);
            let req = SynthesisRequest {
                control: control.clone(),
                ..base.clone()
            };
            let synthesis = synthesize(m, books, &req)?;
            let summary = acoustic_summary(&synthesis.audio, &F0Config::default(), &bank)?;
            Ok(SweepRun {
                value: v,
                control,
                synthesis,
                summary,
            })
        })
        .collect()
}

/// The comparison table, one row per value.
pub fn sweep_table(runs: &[SweepRun]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in runs {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.value,
            r.summary.mean_f0,
            r.summary.total_duration,
            r.summary.rms,
            r.summary.voiced_fraction()
        )
        .expect("write to string");
    }
    s
}

/// Head-averaged style attention for every NAR stage as
/// `stage,frame,token1..tokenN`.
pub fn attention_csv(s: &Synthesis) -> String {
    let mut out = String::from("stage,frame");
    let n = s.attention.first().map_or(0, |a| a.cols());
    for t in 1..=n {
        write!(out, ",token{t}").expect("write to string");
    }
    out.push('\n');
    for (i, a) in s.attention.iter().enumerate() {
        for r in 0..a.rows() {
            write!(out, "{},{r}", i + 2).expect("write to string");
            for v in a.row(r) {
                write!(out, ",{v:.6}").expect("write to string");
            }
            out.push('\n');
        }
    }
    out
}

/// Write each run's audio, F0 track, mel frames and attention, plus
/// `summary.csv` and `sweep.txt` (provenance).
pub fn write_sweep(dir: &Path, runs: &[SweepRun], provenance: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in runs {
        let stem = format!("c_{}", r.value);
        r.synthesis.audio.write_wav(dir.join(format!("{stem}.wav")))?;
        write_text(dir.join(format!("{stem}.f0.csv")), &r.summary.f0.to_csv())?;
        write_text(dir.join(format!("{stem}.mel.csv")), &mel_to_csv(&r.summary.mel))?;
        write_text(dir.join(format!("{stem}.attention.csv")), &attention_csv(&r.synthesis))?;
        write_text(dir.join(format!("{stem}.stats.csv")), &r.summary.to_csv())?;
    }
    write_text(dir.join("summary.csv"), &sweep_table(runs))?;
    write_text(dir.join("sweep.txt"), provenance)
}

/// Largest relative change of mean F0, duration and RMS between the first
/// and last run, as `(statistic, change)`.
pub fn sweep_extreme_changes(runs: &[SweepRun]) -> Vec<(&'static str, f64)> {
    let (Some(a), Some(b)) = (runs.first(), runs.last()) else {
        return Vec::new();
    };
    let rel = |x: f64, y: f64| {
        let base = x.abs().max(y.abs());
        if base == 0.0 {
            0.0
        } else {
            (x - y).abs() / base
        }
    };
    vec![
        ("mean_f0", rel(a.summary.mean_f0, b.summary.mean_f0)),
        ("duration", rel(a.summary.total_duration, b.summary.total_duration)),
        ("rms", rel(a.summary.rms, b.summary.rms)),
    ]
}

/// FVE and F0GPE between two recordings over their common frames.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Report {
    pub fve: f64,
    pub gpe: f64,
    pub frames: usize,
}

impl F0Report {
    pub fn line(&self) -> String {
        format!("FVE={:.4}Hz F0GPE={:.4}% frames={}", self.fve, self.gpe, self.frames)
    }

    pub fn to_csv(&self) -> String {
        format!("fve_hz,f0gpe_percent,frames\n{:.6},{:.6},{}\n", self.fve, self.gpe, self.frames)
    }
}

fn prefix(track: &F0Track, n: usize) -> F0Track {
    F0Track {
        frames: track.frames[..n].to_vec(),
        hop: track.hop,
    }
}

pub fn f0_report(reference: &AudioBuffer, synthesized: &AudioBuffer) -> Result<F0Report> {
    let cfg = F0Config::default();
    let f = crate::metrics::extract_f0(reference, &cfg)?;
    let g = crate::metrics::extract_f0(synthesized, &cfg)?;
    let n = f.len().min(g.len());
    let (f, g) = (prefix(&f, n), prefix(&g, n));
    Ok(F0Report {
        fve: f0_voiced_error(&f, &g)?,
        gpe: f0_gross_pitch_error(&f, &g, GPE_DELTA)?,
        frames: n,
    })
}

/// Line-paired WER over two transcript files: blank reference lines are
/// skipped, and the total is errors over reference words.
pub fn wer_report(reference: &str, hypothesis: &str) -> Result<(WerBreakdown, Vec<WerBreakdown>)> {
    let hyp: Vec<&str> = hypothesis.lines().collect();
    let mut rows = Vec::new();
    for (i, r) in reference.lines().enumerate() {
        if r.trim().is_empty() {
            continue;
        }
        rows.push(word_error_rate(r, hyp.get(i).copied().unwrap_or(""))?);
    }
    if rows.is_empty() {
        return Err(Error::EmptyReference);
    }
    let total = rows.iter().fold(
        WerBreakdown {
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            reference_words: 0,
        },
        |a, b| WerBreakdown {
            substitutions: a.substitutions + b.substitutions,
            deletions: a.deletions + b.deletions,
            insertions: a.insertions + b.insertions,
            reference_words: a.reference_words + b.reference_words,
        },
    );
    Ok((total, rows))
}
