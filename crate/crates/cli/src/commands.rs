use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cmcd::corpus::{
    assemble_corpus, read_jsonl, write_corpus, AlignedUtterance, CorpusManifest, LoadedCorpus, ToyCorpus, ToySpec,
};
use cmcd::dsp::{read_wav, FeatureExtractor};
use cmcd::metrics::{build_report, det_csv, det_curve, evaluate, export_affinity, score_pairs};
use cmcd::model::{forward, ModelParams};
use cmcd::text::{g2p, Dictionary};
use cmcd::train::{initial_params, train_with, write_metrics_csv};

use crate::config::{require, Config};
use crate::{Command, Common};

const DEFAULT_EVAL_FRACTION: f64 = 0.2;
const DEFAULT_TOY_KEYWORDS: usize = 8;
const DEFAULT_TOY_SAMPLES: usize = 10;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const REPORT_FILE: &str = "report.json";
pub const DET_FILE: &str = "det.csv";

/// Runs one subcommand and returns its summary line.
pub fn run(command: Command) -> Result<String> {
    match command {
        Command::BuildCorpus { common, out } => build_corpus(&common, out),
        Command::SynthCorpus { common, out } => synth_corpus(&common, out),
        Command::Train {
            common,
            corpus,
            out,
            checkpoint,
        } => train(&common, corpus, out, checkpoint),
        Command::Eval {
            common,
            checkpoint,
            corpus,
            out,
        } => eval(&common, &checkpoint, corpus, out),
        Command::InspectAffinity {
            common,
            checkpoint,
            audio,
            text,
            dictionary,
            out,
        } => inspect_affinity(&common, &checkpoint, &audio, &text, dictionary, out),
    }
}

/// Config with `--seed` and `--threads` applied on top.
fn settings(common: &Common) -> Result<Config> {
    let mut cfg = Config::load_opt(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    if !path.is_file() {
        bail!("checkpoint not found: {}", path.display());
    }
    Ok(ModelParams::load(path)?)
}

fn build_corpus(common: &Common, out: Option<PathBuf>) -> Result<String> {
    let cfg = settings(common)?;
    let out = require(out, &cfg.out, "out")?;
    let alignments = require(None, &cfg.alignments, "alignments")?;
    let dict_path = require(None, &cfg.dictionary, "dictionary")?;
    let audio_root = match &cfg.audio_root {
        Some(r) => r.clone(),
        None => alignments.parent().unwrap_or(Path::new("")).to_path_buf(),
    };
    let audio_root = std::path::absolute(&audio_root)?;
    let dict = Dictionary::load(&dict_path)?;
    let utterances: Vec<AlignedUtterance> = read_jsonl(&alignments)?;
    let eval_fraction = cfg.eval_fraction.unwrap_or(DEFAULT_EVAL_FRACTION);
    let rounds = cfg.episode_rounds.unwrap_or(1);
    let built = assemble_corpus(
        &utterances,
        &dict,
        cfg.episode_spec()?,
        eval_fraction,
        rounds,
        cfg.seed.unwrap_or(0),
    )?;
    let manifest = CorpusManifest::new(audio_root, cfg.noise.clone(), Some(std::path::absolute(&dict_path)?));
    write_corpus(&out, &manifest, &built.phrases, &built.train, &built.eval)?;
    Ok(format!(
        "build-corpus: {} utterances, {} phrases, {} train pairs, {} eval episodes, {} anchors skipped -> {}",
        utterances.len(),
        built.phrases.len(),
        built.train.len(),
        built.eval.len(),
        built.skipped_anchors,
        out.display()
    ))
}

fn synth_corpus(common: &Common, out: Option<PathBuf>) -> Result<String> {
    let cfg = settings(common)?;
    let out = require(out, &cfg.out, "out")?;
    let spec = ToySpec::new(
        cfg.n_keywords.unwrap_or(DEFAULT_TOY_KEYWORDS),
        cfg.n_samples_per.unwrap_or(DEFAULT_TOY_SAMPLES),
        cfg.seed.unwrap_or(0),
    );
    let toy = ToyCorpus::build(spec)?;
    create_dir(&out)?;
    toy.write(&out)?;
    Ok(format!(
        "synth-corpus: {} keywords, {} train recordings, {} train pairs, {} eval episodes -> {}",
        toy.keywords.len(),
        toy.train_recordings.len(),
        toy.train.len(),
        toy.eval.len(),
        out.display()
    ))
}

fn train(
    common: &Common,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> Result<String> {
    let cfg = settings(common)?;
    let corpus = require(corpus, &cfg.corpus, "corpus")?;
    let out = require(out, &cfg.out, "out")?;
    let train_cfg = cfg.train_config()?;
    let data = LoadedCorpus::load(&corpus)?;
    create_dir(&out)?;

    let threads = train_cfg.threads;
    let eval = &data.eval;
    let outcome = train_with(
        &data.train,
        &data.noise,
        &train_cfg,
        initial_params(&train_cfg),
        |step, params| {
            if !eval.is_empty() {
                let r = evaluate(params, eval, threads)?;
                log::info!("step {step}: eer {:.4} auc {:.4}", r.eer, r.auc);
            }
            Ok(())
        },
    )?;

    let ckpt = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    if let Some(parent) = ckpt.parent() {
        create_dir(parent)?;
    }
    outcome.params.save(&ckpt)?;
    write_metrics_csv(&out.join(METRICS_FILE), &outcome.log)?;
    let cfg_path = out.join(TRAIN_CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(&train_cfg)? + "\n")
        .with_context(|| format!("writing {}", cfg_path.display()))?;

    let (first, last) = outcome.loss_trend(0.1);
    Ok(format!(
        "train: {} steps on {} pairs, loss {first:.4} -> {last:.4}, checkpoint {}",
        train_cfg.steps,
        data.train.len(),
        ckpt.display()
    ))
}

fn eval(common: &Common, checkpoint: &Path, corpus: Option<PathBuf>, out: Option<PathBuf>) -> Result<String> {
    let params = load_checkpoint(checkpoint)?;
    let cfg = settings(common)?;
    let corpus = require(corpus, &cfg.corpus, "corpus")?;
    let out = require(out, &cfg.out, "out")?;
    let data = LoadedCorpus::load(&corpus)?;
    if data.eval.is_empty() {
        bail!("corpus {} has no eval episodes", corpus.display());
    }
    let scored = score_pairs(&params, &data.eval, cfg.threads.unwrap_or(1))?;
    let report = build_report(&data.eval, &scored)?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<u8> = data.eval.iter().map(|p| p.label).collect();

    create_dir(&out)?;
    report.write_json(&out.join(REPORT_FILE))?;
    let det_path = out.join(DET_FILE);
    fs::write(&det_path, det_csv(&det_curve(&scores, &labels)?))
        .with_context(|| format!("writing {}", det_path.display()))?;
    Ok(format!(
        "eval: eer {:.4} auc {:.4} over {} positive / {} negative pairs -> {}",
        report.eer,
        report.auc,
        report.n_pos,
        report.n_neg,
        out.display()
    ))
}

fn inspect_affinity(
    common: &Common,
    checkpoint: &Path,
    audio: &Path,
    text: &str,
    dictionary: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<String> {
    let params = load_checkpoint(checkpoint)?;
    let cfg = settings(common)?;
    let dict = match dictionary.or(cfg.dictionary) {
        Some(p) => Dictionary::load(&p)?,
        None => Dictionary::default(),
    };
    let stem = out.unwrap_or_else(|| PathBuf::from("affinity"));
    let seq = g2p(text, &dict)?;
    let wav = read_wav(audio)?;
    let features = FeatureExtractor::new(wav.sample_rate)?.log_mel(&wav)?;
    let result = forward(&features, &seq, &params)?;
    if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let files = export_affinity(&result.affinity, &stem)?;
    let (t_t, t_a) = result.affinity.dims2()?;
    Ok(format!(
        "inspect-affinity: p={:.6} for {:?} [{}] ({t_t} phonemes x {t_a} frames) -> {}, {}",
        result.prob,
        seq.source_text,
        seq.symbol_string(),
        files.csv.display(),
        files.pgm.display()
    ))
}
