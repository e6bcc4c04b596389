//! Command-line front end.
//!
//! Every invocation resolves a [`RunConfig`] (built-in defaults, then
//! `--config`, then `--set key=value` and the dedicated flags), writes its
//! artifacts under the output directory and appends a reproducibility record
//! to `runs.jsonl` there. Failures print one JSON line on stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{count_params, load_checkpoint, save_checkpoint, CheckpointMeta, ModelKind, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::data::{
    load_corpus, make_synthetic_corpus_with, symbols_to_ids, write_corpus, write_mel, read_mel, Dataset,
    MelSpectrogram, SyntheticSpec, CORPUS_FORMAT_VERSION,
};
use crate::distill::{
    generate_parallel_pairs, load_pairs, train_student, train_teacher, write_pairs, TrainLog, PAIRS_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::eval::{
    eval_items, evaluate, export_embeddings, format_sweep, measure_rtf, sigma_sweep, ModelSynthesizer,
    SyntheticTranscriber,
};
use crate::io_util;
use crate::model::{DurationSource, StubEmbedder};
use crate::rng::{stream, Stream};

/// Overrides the output directory of every subcommand.
pub const OUT_DIR_ENV: &str = "TINYCLONE_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "tinyclone", version, about = "Zero-shot TTS acoustic model with two-stage self-distillation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set sigma=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Output directory. Falls back to $TINYCLONE_OUT_DIR, then `paths.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-speaker corpus.
    MakeCorpus {
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 8)]
        utts: usize,
        /// Also write the last N speakers as a separate `<name>-test` corpus.
        #[arg(long, default_value_t = 0)]
        held_out: usize,
        #[arg(long, default_value = "corpus")]
        name: String,
    },
    /// Train the teacher on ground-truth data.
    TrainTeacher {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Synthesise time-aligned cross-speaker pairs with a teacher.
    GenPairs {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train a student on a mix of real and teacher-synthesised content input.
    TrainStudent {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Synthesise one mel.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt mel file.
        #[arg(long)]
        prompt: PathBuf,
        /// Phoneme symbol string.
        #[arg(long)]
        text: String,
        /// Comma-separated frame count per phoneme; predicted when omitted.
        #[arg(long, value_delimiter = ',')]
        durations: Option<Vec<usize>>,
        #[arg(long, default_value = "synth.mel")]
        output: PathBuf,
    },
    /// SIM, CER and RTF of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus whose annotations fit the transcriber; the evaluated corpus when omitted.
        #[arg(long)]
        fit_corpus: Option<PathBuf>,
    },
    /// Train and evaluate one student per mixing ratio.
    SweepSigma {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.8,1")]
        sigmas: Vec<f64>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Median real-time factor of synthesis.
    BenchRtf {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Number of trainable scalars in a checkpoint.
    CountParams {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeCorpus { .. } => "make-corpus",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::GenPairs { .. } => "gen-pairs",
            Command::TrainStudent { .. } => "train-student",
            Command::Synth { .. } => "synth",
            Command::Eval { .. } => "eval",
            Command::SweepSigma { .. } => "sweep-sigma",
            Command::BenchRtf { .. } => "bench-rtf",
            Command::CountParams { .. } => "count-params",
        }
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
}

fn error_line(kind: &str, message: impl std::fmt::Display) -> String {
    serde_json::to_string(&ErrorLine {
        error: kind,
        message: message.to_string().replace('\n', " "),
    })
    .expect("error line serialises")
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match dispatch(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e));
            1
        }
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.seeds.seed = s;
    }
    let env_out = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty());
    if let Some(out) = common.out.clone().or(env_out.map(PathBuf::from)) {
        cfg.paths.out_dir = out;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    subcommand: &'a str,
    argv: Vec<String>,
    package_version: &'a str,
    checkpoint_format: u32,
    corpus_format: u32,
    pairs_format: u32,
    seed: u64,
    pair_seed: u64,
    eval_embedder_seed: u64,
    config: &'a RunConfig,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    io_util::write_atomic(path, text.as_bytes())
}

/// Prints a one-line JSON summary on stdout.
fn report<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("value serialises"));
}

fn with_steps(cfg: &RunConfig, steps: Option<u64>) -> RunConfig {
    let mut c = cfg.clone();
    if let Some(s) = steps {
        c.optim.steps = s;
    }
    c
}

fn check_corpus_dims(data: &Dataset, cfg: &RunConfig) -> Result<()> {
    data.validate(Some(cfg.model.vocab_size))?;
    if let Some(u) = data.iter().find(|u| u.mel.n_mels() != cfg.model.n_mels) {
        return Err(Error::Config(format!(
            "corpus has {} mel bins (entry {}), config n_mels is {}",
            u.mel.n_mels(),
            u.id,
            cfg.model.n_mels
        )));
    }
    Ok(())
}

fn dispatch(cli: &Cli, argv: &[OsString]) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let out = cfg.paths.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let name = cli.command.name();
    let record = RunRecord {
        subcommand: name,
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        package_version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: CHECKPOINT_VERSION,
        corpus_format: CORPUS_FORMAT_VERSION,
        pairs_format: PAIRS_FORMAT_VERSION,
        seed: cfg.seeds.seed,
        pair_seed: cfg.distill.pair_seed,
        eval_embedder_seed: cfg.eval.eval_embedder_seed,
        config: &cfg,
    };
    append_line(&out.join("runs.jsonl"), &serde_json::to_string(&record).expect("record serialises"))?;

    match &cli.command {
        Command::MakeCorpus {
            speakers,
            utts,
            held_out,
            name,
        } => {
            if held_out >= speakers {
                return Err(Error::InvalidArgument(format!(
                    "held_out ({held_out}) must be smaller than speakers ({speakers})"
                )));
            }
            let spec = SyntheticSpec {
                n_mels: cfg.model.n_mels,
                vocab_size: cfg.model.vocab_size,
                ..SyntheticSpec::default()
            };
            let all = make_synthetic_corpus_with(&spec, *speakers, *utts, cfg.seeds.seed)?;
            let speakers_list: Vec<String> = all.speakers().into_iter().map(String::from).collect();
            let test_spk: Vec<&str> = speakers_list[speakers - held_out..].iter().map(String::as_str).collect();
            let (train, test) = all.split_speakers(&test_spk);
            let manifest = write_corpus(&train, &out.join(name))?;
            let test_manifest = if *held_out > 0 {
                Some(write_corpus(&test, &out.join(format!("{name}-test")))?)
            } else {
                None
            };
            report(&serde_json::json!({
                "manifest": manifest,
                "test_manifest": test_manifest,
                "utterances": train.len(),
            }));
        }
        Command::TrainTeacher { corpus, steps } => {
            let cfg = with_steps(&cfg, *steps);
            let data = load_corpus(corpus)?;
            check_corpus_dims(&data, &cfg)?;
            let log = TrainLog {
                path: Some(out.join("teacher.log.jsonl")),
            };
            let outcome = train_teacher::<f32>(&cfg, &data, &log)?;
            let path = out.join("teacher.ckpt");
            save_checkpoint(
                &path,
                &outcome.trainer.model,
                &CheckpointMeta {
                    kind: ModelKind::Teacher,
                    step: outcome.trainer.step,
                    seed: cfg.seeds.seed,
                    model: cfg.model.clone(),
                },
            )?;
            report(&serde_json::json!({ "checkpoint": path, "steps": outcome.history.len(), "final": outcome.history.last() }));
        }
        Command::GenPairs { teacher, corpus } => {
            let (model, meta) = load_checkpoint::<f32>(teacher)?;
            let data = load_corpus(corpus)?;
            let mut c = cfg.clone();
            c.model = meta.model;
            check_corpus_dims(&data, &c)?;
            let pairs = generate_parallel_pairs(&model, &data, &c)?;
            let path = write_pairs(&pairs, &out.join("pairs"))?;
            report(&serde_json::json!({ "pairs": path, "count": pairs.len() }));
        }
        Command::TrainStudent {
            corpus,
            pairs,
            steps,
            sigma,
        } => {
            let mut cfg = with_steps(&cfg, *steps);
            if let Some(s) = sigma {
                cfg.set("sigma", &s.to_string())?;
            }
            let data = load_corpus(corpus)?;
            check_corpus_dims(&data, &cfg)?;
            let pairs = load_pairs(pairs)?;
            let log = TrainLog {
                path: Some(out.join("student.log.jsonl")),
            };
            let outcome = train_student::<f32>(&cfg, &data, &pairs, &log)?;
            let path = out.join("student.ckpt");
            save_checkpoint(
                &path,
                &outcome.trainer.model,
                &CheckpointMeta {
                    kind: ModelKind::Student,
                    step: outcome.trainer.step,
                    seed: cfg.seeds.seed,
                    model: cfg.model.clone(),
                },
            )?;
            report(&serde_json::json!({ "checkpoint": path, "steps": outcome.history.len(), "final": outcome.history.last() }));
        }
        Command::Synth {
            checkpoint,
            prompt,
            text,
            durations,
            output,
        } => {
            let (model, _) = load_checkpoint::<f32>(checkpoint)?;
            let prompt = read_mel(prompt)?;
            let ids: Vec<usize> = symbols_to_ids(text).into_iter().map(|i| i as usize).collect();
            if ids.len() != text.chars().count() {
                return Err(Error::InvalidArgument(format!("text {text:?} contains unknown symbols")));
            }
            let source = match durations {
                Some(d) => DurationSource::Forced(d.clone()),
                None => DurationSource::Predicted,
            };
            let syn = model.synthesize(
                &ids,
                &prompt,
                &source,
                cfg.eval.synth_noise_scale,
                &mut stream(cfg.seeds.seed, Stream::Synthesis, 0),
            )?;
            let mel = MelSpectrogram::from_tensor(&syn.mel, prompt.hop_length, prompt.sample_rate)?;
            let path = if output.is_absolute() { output.clone() } else { out.join(output) };
            write_mel(&path, &mel)?;
            report(&serde_json::json!({ "mel": path, "frames": mel.n_frames(), "durations": syn.durations }));
        }
        Command::Eval {
            checkpoint,
            corpus,
            fit_corpus,
        } => {
            let (model, _) = load_checkpoint::<f32>(checkpoint)?;
            let data = load_corpus(corpus)?;
            let fit = match fit_corpus {
                Some(p) => load_corpus(p)?,
                None => data.clone(),
            };
            let transcriber = SyntheticTranscriber::fit(&fit, model.cfg.vocab_size)?;
            let embedder = StubEmbedder::new(cfg.eval.eval_embedder_seed, model.cfg.n_mels, model.cfg.d_raw);
            let synth = ModelSynthesizer {
                model: &model,
                noise_scale: cfg.eval.synth_noise_scale,
                seed: cfg.eval.synth_seed,
            };
            let ev = evaluate(
                &synth,
                &eval_items(&data),
                &embedder,
                &transcriber,
                cfg.eval.rtf_repeats,
                cfg.eval.rtf_warmup,
            )?;
            write_json(&out.join("eval.json"), &ev.report)?;
            export_embeddings(&ev.embeddings, &out.join("embeddings.txt"))?;
            report(&ev.report);
        }
        Command::SweepSigma {
            corpus,
            pairs,
            test,
            sigmas,
            steps,
        } => {
            let cfg = with_steps(&cfg, *steps);
            let train = load_corpus(corpus)?;
            check_corpus_dims(&train, &cfg)?;
            let test = load_corpus(test)?;
            let pairs = load_pairs(pairs)?;
            let transcriber = SyntheticTranscriber::fit(&train, cfg.model.vocab_size)?;
            let rows = sigma_sweep(&cfg, &train, &pairs, &test, &transcriber, sigmas)?;
            let path = out.join("sweep.tsv");
            io_util::write_atomic(&path, format_sweep(&rows).as_bytes())?;
            report(&serde_json::json!({ "table": path, "rows": rows }));
        }
        Command::BenchRtf { checkpoint, corpus } => {
            let (model, _) = load_checkpoint::<f32>(checkpoint)?;
            let data = load_corpus(corpus)?;
            let synth = ModelSynthesizer {
                model: &model,
                noise_scale: cfg.eval.synth_noise_scale,
                seed: cfg.eval.synth_seed,
            };
            let rtf = measure_rtf(&synth, &eval_items(&data), cfg.eval.rtf_repeats, cfg.eval.rtf_warmup)?;
            write_json(&out.join("rtf.json"), &rtf)?;
            report(&rtf);
        }
        Command::CountParams { checkpoint } => {
            let n = count_params(checkpoint)?;
            report(&serde_json::json!({ "params": n }));
        }
    }
    Ok(())
}
