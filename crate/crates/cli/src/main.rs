use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scve_core::checkpoint::Checkpoint;
use scve_core::codec::{fit_codebooks, rvq_decode, AudioBuffer, CodebookSet, FilterBank, QuantizedTokenGrid, STAGES};
use scve_core::config::{Preset, RunConfig};
use scve_core::corpus::{generate_corpus, load_corpus, write_corpus, AttrDist, CorpusConfig};
use scve_core::metrics::{acoustic_summary, write_text, F0Config};
use scve_core::model::synth::SynthesisRequest;
use scve_core::model::train::evaluate;
use scve_core::pipeline::{self, SynthesisJob};
use scve_core::style::ControlVector;
use scve_core::{tokenizer, Error, ErrorKind, Result};

#[derive(Parser, Debug)]
#[command(name = "scve", version, about = "Style-controllable codec language model TTS toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Text to jamo token ids
    Tokenize(TokenizeArgs),
    /// Filter-bank RVQ codec
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Synthetic corpus
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train (or resume) the AR and NAR decoders
    Train(TrainArgs),
    /// Synthesize one utterance, writing a WAV and a JSON sidecar
    Synthesize(SynthesizeArgs),
    /// Sweep one style-control entry and compare acoustic statistics
    StyleSweep(SweepArgs),
    /// Objective metrics
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args, Debug)]
struct TokenizeArgs {
    /// Text to tokenize
    #[arg(long, conflicts_with_all = ["input", "dump_vocab"])]
    text: Option<String>,
    /// File to tokenize, one output line per input line
    #[arg(long = "in", conflicts_with = "dump_vocab")]
    input: Option<PathBuf>,
    /// Print `id<TAB>class<TAB>glyph` for the whole vocabulary
    #[arg(long)]
    dump_vocab: bool,
}

#[derive(Subcommand, Debug)]
enum CodecCommand {
    /// Fit codebooks on a corpus directory (containing manifest.csv)
    Fit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        codebook_size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// WAV to `.codes`
    Encode {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        books: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// `.codes` to WAV
    Decode {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long, default_value = "books.bin")]
        books: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of RVQ stages to sum
        #[arg(long, default_value_t = STAGES)]
        stages: usize,
    },
}

#[derive(Subcommand, Debug)]
enum CorpusCommand {
    /// Render a corpus: `wavs/` plus `manifest.csv`
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// `full` (continuous attribute ranges) or `desk` (the training grid)
        #[arg(long, default_value = "full")]
        preset: String,
        #[arg(long)]
        utterances_per_voice: Option<usize>,
        /// `lo..hi` or `a|b|c`
        #[arg(long)]
        f0: Option<String>,
        #[arg(long)]
        tempo: Option<String>,
        #[arg(long)]
        amplitude: Option<String>,
        #[arg(long)]
        vibrato: Option<String>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` config file; defaults to the desk preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Extra `key=value` overrides, applied last
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    books: PathBuf,
    /// Stop after this many updates in total (the schedule still follows
    /// the config's `steps`)
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Held-out items to evaluate at the end (0 skips evaluation)
    #[arg(long, default_value_t = 200)]
    eval_items: usize,
    /// Print a progress line every this many updates
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    /// Rerun the synthesis recorded in this sidecar
    #[arg(long, conflicts_with_all = ["checkpoint", "books", "text", "prompt_wav", "control", "baseline"])]
    replay: Option<PathBuf>,
    #[arg(long, required_unless_present = "replay")]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "replay")]
    books: Option<PathBuf>,
    #[arg(long, required_unless_present = "replay")]
    text: Option<String>,
    #[arg(long, required_unless_present = "replay")]
    prompt_wav: Option<PathBuf>,
    /// One value in [0.5, 2.5] per style token
    #[arg(long, num_args = 1.., allow_negative_numbers = true, conflicts_with = "baseline")]
    control: Option<Vec<f64>>,
    /// All-ones control
    #[arg(long)]
    baseline: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the checkpoint config's temperature
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    books: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    prompt_wav: PathBuf,
    /// Style token index, 1-based
    #[arg(long)]
    token: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1.5,2.5")]
    values: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Line-paired word error rate
    Wer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// F0 voiced error and gross pitch error over the common frames
    F0 {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        syn: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Mean F0, durations, RMS and voiced fraction of one recording
    Summary {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SCVE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Tokenize(a) => tokenize(a),
        Command::Codec(c) => codec(c),
        Command::Corpus(c) => corpus(c),
        Command::Train(a) => train(a),
        Command::Synthesize(a) => synthesize(a),
        Command::StyleSweep(a) => sweep(a),
        Command::Eval(c) => eval(c),
    }
}

fn token_line(text: &str) -> Result<String> {
    let ids: Vec<String> = tokenizer::tokenize(text)?.tokens.iter().map(u32::to_string).collect();
    Ok(ids.join(" "))
}

fn tokenize(a: TokenizeArgs) -> Result<()> {
    if a.dump_vocab {
        for (id, class, glyph) in tokenizer::vocabulary() {
            println!("{id}\t{}\t{glyph}", class.name());
        }
    } else if let Some(text) = a.text {
        println!("{}", token_line(&text)?);
    } else if let Some(path) = a.input {
        let f = std::fs::File::open(&path).map_err(|e| io_err(&path, e))?;
        for line in std::io::BufReader::new(f).lines() {
            println!("{}", token_line(&line.map_err(|e| io_err(&path, e))?)?);
        }
    } else {
        return Err(Error::Config("tokenize needs --text, --in or --dump-vocab".into()));
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn codec(c: CodecCommand) -> Result<()> {
    match c {
        CodecCommand::Fit {
            corpus,
            out,
            codebook_size,
            seed,
        } => {
            let utts = load_corpus(&corpus.join("manifest.csv"))?;
            let frame = scve_core::codec::FrameConfig::default();
            let bank = FilterBank::new(&frame)?;
            let frames = utts
                .iter()
                .map(|u| bank.analyze(&u.audio))
                .collect::<Result<Vec<_>>>()?;
            let books = fit_codebooks(&frames, &frame, codebook_size, seed)?;
            books.write(&out)?;
            eprintln!("fitted {} stages x {codebook_size} codes on {} utterances", STAGES, utts.len());
        }
        CodecCommand::Encode { wav, books, out } => {
            let books = CodebookSet::read(&books)?;
            pipeline::encode_prompt(&AudioBuffer::read_wav(&wav)?, &books)?.write(&out)?;
        }
        CodecCommand::Decode {
            codes,
            books,
            out,
            stages,
        } => {
            let books = CodebookSet::read(&books)?;
            let grid = QuantizedTokenGrid::read(&codes)?;
            let frames = rvq_decode(&grid, &books, stages)?;
            FilterBank::new(&books.frame)?.synthesize(&frames)?.write_wav(&out)?;
        }
    }
    Ok(())
}

fn dist(name: &str, v: Option<String>, slot: &mut AttrDist) -> Result<()> {
    if let Some(s) = v {
        *slot = AttrDist::parse(&s).ok_or_else(|| Error::Config(format!("bad --{name} distribution {s:?}")))?;
    }
    Ok(())
}

fn corpus(c: CorpusCommand) -> Result<()> {
    let CorpusCommand::Generate {
        n,
        seed,
        out,
        preset,
        utterances_per_voice,
        f0,
        tempo,
        amplitude,
        vibrato,
    } = c;
    let mut cfg = match preset.as_str() {
        "full" => CorpusConfig::default(),
        "desk" => CorpusConfig::desk(),
        other => return Err(Error::Config(format!("unknown corpus preset {other:?}"))),
    };
    if let Some(u) = utterances_per_voice {
        cfg.utterances_per_voice = u;
    }
    dist("f0", f0, &mut cfg.base_f0)?;
    dist("tempo", tempo, &mut cfg.tempo)?;
    dist("amplitude", amplitude, &mut cfg.amplitude)?;
    dist("vibrato", vibrato, &mut cfg.vibrato_depth)?;
    let corpus = generate_corpus(n, seed, &cfg)?;
    let manifest = write_corpus(&out, &corpus)?;
    eprintln!("wrote {} utterances, {}", corpus.len(), manifest.display());
    Ok(())
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::preset(Preset::parse(&a.preset)?),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = run_config(&a)?;
    let books = CodebookSet::read(&a.books)?;
    if books.size() != cfg.model.codebook_size {
        return Err(Error::DimensionMismatch {
            expected: cfg.model.codebook_size,
            got: books.size(),
        });
    }
    let items = pipeline::load_training_set(&a.manifest, &books)?;
    eprintln!("config {} ({} items)", cfg.hash(), items.len());
    let every = a.log_every.max(1);
    let outcome = pipeline::train(&cfg, &items, &a.out, a.steps, |s| {
        if (s.step + 1) % every == 0 {
            eprintln!(
                "step {} ar {:.4} ({:.3}) nar {:.4} ({:.3})",
                s.step + 1,
                s.ar_loss,
                s.ar_accuracy,
                s.nar_loss,
                s.nar_accuracy
            );
        }
    })?;
    if let Some(from) = outcome.resumed_from {
        eprintln!("resumed from step {from}");
    }
    let tr = &outcome.trainer;
    println!("trained to step {} ({} training items)", tr.step, outcome.train_items);
    if a.eval_items > 0 && !outcome.heldout.is_empty() {
        let n = a.eval_items.min(outcome.heldout.len());
        let r = evaluate(&tr.models, &outcome.heldout[..n], &cfg.sampling, cfg.seed)?;
        let stages: Vec<String> = r.nar_accuracy.iter().map(|v| format!("{v:.4}")).collect();
        println!("held-out ({n} items): ar_accuracy={:.4} nar_accuracy=[{}]", r.ar_accuracy, stages.join(" "));
        let mut csv = String::from("model,stage,accuracy,loss\n");
        csv += &format!("ar,1,{:.6},{:.6}\n", r.ar_accuracy, r.ar_loss);
        for (i, (acc, loss)) in r.nar_accuracy.iter().zip(&r.nar_loss).enumerate() {
            csv += &format!("nar,{},{acc:.6},{loss:.6}\n", i + 2);
        }
        write_text(a.out.join("eval.csv"), &csv)?;
    }
    Ok(())
}

fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let record = match a.replay {
        Some(sidecar) => pipeline::replay(&sidecar, &a.out)?,
        None => {
            let job = SynthesisJob {
                checkpoint: a.checkpoint.expect("required by clap"),
                books: a.books.expect("required by clap"),
                text: a.text.expect("required by clap"),
                prompt_wav: a.prompt_wav.expect("required by clap"),
                control: if a.baseline { None } else { a.control },
                seed: a.seed,
                temperature: a.temperature,
                max_len: a.max_len,
            };
            pipeline::synthesize_job(&job, &a.out)?.1
        }
    };
    println!(
        "{}: {} frames{}, sha256 {}",
        a.out.display(),
        record.frames,
        if record.truncated { " (truncated)" } else { "" },
        record.output_sha256
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let ck = Checkpoint::read(&a.checkpoint)?;
    let (cfg, models) = ck.models()?;
    let books = CodebookSet::read(&a.books)?;
    let prompt = pipeline::encode_prompt(&AudioBuffer::read_wav(&a.prompt_wav)?, &books)?;
    let mut req = SynthesisRequest::new(a.text.clone(), prompt, ControlVector::ones(cfg.model.style_tokens), a.seed);
    req.temperature = cfg.temperature;
    let runs = pipeline::run_sweep(&models, &books, &req, a.token, &a.values)?;
    let provenance = format!(
        "config_hash = {}\nrun_seed = {}\ncheckpoint = {}\ncheckpoint_step = {}\ntext = {}\nprompt_wav = {}\ntoken = {}\nseed = {}\ntemperature = {}\n",
        ck.config_hash,
        cfg.seed,
        a.checkpoint.display(),
        ck.step,
        a.text,
        a.prompt_wav.display(),
        a.token,
        a.seed,
        req.temperature
    );
    pipeline::write_sweep(&a.out, &runs, &provenance)?;
    print!("{}", pipeline::sweep_table(&runs));
    for (name, change) in pipeline::sweep_extreme_changes(&runs) {
        println!("{name}: {:.1}% between extremes", 100.0 * change);
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn eval(c: EvalCommand) -> Result<()> {
    match c {
        EvalCommand::Wer { reference, hyp, csv } => {
            let (total, rows) = pipeline::wer_report(&read_text(&reference)?, &read_text(&hyp)?)?;
            println!(
                "WER={:.4} S={} D={} I={} N={}",
                total.wer(),
                total.substitutions,
                total.deletions,
                total.insertions,
                total.reference_words
            );
            if let Some(p) = csv {
                let mut s = String::from("line,substitutions,deletions,insertions,reference_words,wer\n");
                for (i, r) in rows.iter().enumerate() {
                    s += &format!(
                        "{},{},{},{},{},{:.6}\n",
                        i + 1,
                        r.substitutions,
                        r.deletions,
                        r.insertions,
                        r.reference_words,
                        r.wer()
                    );
                }
                write_text(p, &s)?;
            }
        }
        EvalCommand::F0 { reference, syn, csv } => {
            let r = pipeline::f0_report(&AudioBuffer::read_wav(&reference)?, &AudioBuffer::read_wav(&syn)?)?;
            println!("{}", r.line());
            if let Some(p) = csv {
                write_text(p, &r.to_csv())?;
            }
        }
        EvalCommand::Summary { wav, out } => {
            let audio = AudioBuffer::read_wav(&wav)?;
            let frame = scve_core::codec::FrameConfig {
                sample_rate: audio.sample_rate,
                ..Default::default()
            };
            let s = acoustic_summary(&audio, &F0Config::default(), &FilterBank::new(&frame)?)?;
            write_text(&out, &s.to_csv())?;
            print!("{}", s.to_csv());
        }
    }
    Ok(())
}
