//! `rln`: featurize audio, synthesize corpora, train, evaluate and sweep.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rln::config::RunConfig;
use rln::data::{load_dataset, save_dataset, Dataset, FoldingTable, SequenceExample, SynthSpec};
use rln::features::{extract_features, normalize, normalize_per_utterance, read_wav, FeatureParams, FeatureStats};
use rln::ladder::DecoderKind;
use rln::tensor::{DType, Element};
use rln::trainer::{
    checkpoint_dtype, load_checkpoint, supervised_subset, train, Evaluation, TrainOutcome, CHECKPOINT_FILE,
    METRICS_FILE, METRICS_HEADER,
};
use rln::{Error, Result};

const DEFAULT_FOLDING: &str = include_str!("../data/timit_61_to_39.txt");
const RUN_HEADER_FILE: &str = "run_header.cfg";

#[derive(Parser)]
#[command(name = "rln", version, about = "Recurrent ladder network for frame-level phone recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a directory of WAV files and transcripts into a dataset.
    Featurize(FeaturizeArgs),
    /// Write a synthetic labelled corpus.
    Synth(SynthArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Report the phone error rate of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train one run per noise level, label fraction and seed.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct FeaturizeArgs {
    /// Directory of 16-bit mono `<id>.wav` files.
    #[arg(long)]
    wav_dir: PathBuf,
    /// Directory of transcript files with lines `id phone phone…`. Without
    /// it, examples are unlabelled.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// Folding table (`source target` per line); defaults to the built-in
    /// 61 to 39 phone table.
    #[arg(long)]
    folding: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Apply stored normalization statistics instead of fitting them.
    #[arg(long, conflicts_with_all = ["stats_out", "per_utterance"])]
    stats_in: Option<PathBuf>,
    /// Where to write the fitted normalization statistics.
    #[arg(long)]
    stats_out: Option<PathBuf>,
    /// Normalize every utterance with its own statistics.
    #[arg(long, conflicts_with = "stats_out")]
    per_utterance: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 2000)]
    sequences: usize,
    #[arg(long, default_value_t = 20)]
    min_len: usize,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
    #[arg(long, default_value_t = 39)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, required_unless_present = "dump_defaults")]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "dump_defaults")]
    out_dir: Option<PathBuf>,
    /// Print the default config and exit.
    #[arg(long)]
    dump_defaults: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Global noise levels, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sigmas: Vec<f64>,
    /// Label fractions, comma separated; defaults to the config's.
    #[arg(long, value_delimiter = ',')]
    fractions: Vec<f64>,
    /// Seeds, comma separated; defaults to the config's.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Decoders (ND, RD, FFD), comma separated; defaults to the config's.
    #[arg(long, value_delimiter = ',')]
    decoders: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Featurize(a) => featurize(&a),
        Command::Synth(a) => synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => eval(&a),
        Command::Sweep(a) => sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Config { .. } | Error::Argument(_) => 1,
        _ => 2,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Files with the given extension directly inside `dir`, sorted by name.
fn list_files(dir: &Path, ext: Option<&str>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && ext.is_none_or(|x| path.extension().is_some_and(|e| e == x)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every transcript file in `dir`; each line is `id phone phone…`.
fn read_transcripts(dir: &Path) -> Result<HashMap<String, Vec<String>>> {
    let mut map = HashMap::new();
    for path in list_files(dir, None)? {
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(id) = parts.next() else { continue };
            let phones: Vec<String> = parts.map(str::to_string).collect();
            if map.insert(id.to_string(), phones).is_some() {
                return Err(Error::Data(format!(
                    "{}:{}: transcript for `{id}` given twice",
                    path.display(),
                    i + 1
                )));
            }
        }
    }
    Ok(map)
}

fn featurize(a: &FeaturizeArgs) -> Result<()> {
    let folding = match &a.folding {
        Some(p) => FoldingTable::from_file(p)?,
        None => FoldingTable::parse(DEFAULT_FOLDING)?,
    };
    let transcripts = a.transcripts.as_deref().map(read_transcripts).transpose()?;
    let wavs = list_files(&a.wav_dir, Some("wav"))?;
    if wavs.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", a.wav_dir.display())));
    }
    let params = FeatureParams::default();
    let mut ids = Vec::with_capacity(wavs.len());
    let mut labels = Vec::with_capacity(wavs.len());
    let mut feats = Vec::with_capacity(wavs.len());
    let mut sample_rate = None;
    for path in &wavs {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let w = read_wav(path)?;
        if *sample_rate.get_or_insert(w.sample_rate) != w.sample_rate {
            return Err(Error::Data(format!("{}: sample rate differs from the other files", path.display())));
        }
        labels.push(match &transcripts {
            Some(t) => {
                let phones = t.get(&id).ok_or_else(|| Error::Data(format!("no transcript for `{id}`")))?;
                Some(folding.fold_to_indices(phones)?)
            }
            None => None,
        });
        feats.push(extract_features(&w, &params)?);
        ids.push(id);
    }
    if let Some(t) = &transcripts {
        let mut orphans: Vec<&String> = t.keys().filter(|k| !ids.contains(k)).collect();
        orphans.sort();
        if let Some(o) = orphans.first() {
            return Err(Error::Data(format!("transcript `{o}` has no matching wav file")));
        }
    }
    let mut metadata = params.to_metadata(sample_rate.unwrap_or(0));
    let normalized = if a.per_utterance {
        metadata.push(("features.normalization".into(), "per-utterance".into()));
        normalize_per_utterance(&feats)?
    } else {
        let stored = a.stats_in.as_deref().map(FeatureStats::load).transpose()?;
        metadata.push((
            "features.normalization".into(),
            if stored.is_some() { "applied" } else { "fitted" }.into(),
        ));
        let (out, stats) = normalize(&feats, stored.as_ref())?;
        if let Some(p) = &a.stats_out {
            stats.save(p)?;
        }
        out
    };
    let examples = ids
        .into_iter()
        .zip(labels)
        .zip(normalized)
        .map(|((id, labels), f)| SequenceExample {
            id,
            features: f.cast(),
            labels,
        })
        .collect();
    let d = Dataset {
        examples,
        class_names: folding.targets().to_vec(),
        metadata,
    };
    save_dataset(&d, &a.out)?;
    println!("wrote {} examples of width {} to {}", d.len(), params.feature_dim(), a.out.display());
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: a.classes,
        sequences: a.sequences,
        min_len: a.min_len,
        max_len: a.max_len,
        dim: a.dim,
        noise: a.noise,
        seed: a.seed,
    };
    let d = spec.generate()?.dataset;
    save_dataset(&d, &a.out)?;
    println!("wrote {} synthetic sequences to {}", d.len(), a.out.display());
    Ok(())
}

struct RunSummary {
    supervised: usize,
    best_epoch: usize,
    best_per: f64,
    epochs: usize,
}

/// Loads the config's datasets, trains, and writes the run header,
/// metrics file and best checkpoint into `out_dir`.
fn run(cfg: &RunConfig, out_dir: &Path, quiet: bool) -> Result<RunSummary> {
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config {
            line: 0,
            msg: "data.train is not set".into(),
        })?;
    let full = load_dataset(train_path)?;
    let valid = cfg.data.valid.as_ref().map(load_dataset).transpose()?;
    let sup = supervised_subset(cfg, &full)?;

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut header = cfg.to_text();
    let _ = write!(
        header,
        "\n# supervised_sequences = {}\n# unsupervised_sequences = {}\n# validation_sequences = {}\n# metrics = {METRICS_HEADER}\n",
        sup.len(),
        full.len(),
        valid.as_ref().map_or(sup.len(), Dataset::len),
    );
    let header_path = out_dir.join(RUN_HEADER_FILE);
    std::fs::write(&header_path, header).map_err(io_err(&header_path))?;

    fn go<T: Element>(
        cfg: &RunConfig,
        sup: &Dataset,
        full: &Dataset,
        valid: Option<&Dataset>,
        out_dir: &Path,
        quiet: bool,
    ) -> Result<(usize, f64, usize)> {
        let out: TrainOutcome<T> = train(cfg, sup, full, valid, Some(out_dir), |m| {
            if !quiet {
                eprintln!(
                    "epoch {:>4}  c_sup {:.4}  c_dae {:.4}  total {:.4}  valid_per {:.4}",
                    m.epoch, m.c_sup, m.c_dae, m.total, m.valid_per
                );
            }
        })?;
        Ok((out.best.epoch, out.best.best_per, out.metrics.len()))
    }
    let (best_epoch, best_per, epochs) = match cfg.train.precision {
        DType::F32 => go::<f32>(cfg, &sup, &full, valid.as_ref(), out_dir, quiet)?,
        DType::F64 => go::<f64>(cfg, &sup, &full, valid.as_ref(), out_dir, quiet)?,
    };
    Ok(RunSummary {
        supervised: sup.len(),
        best_epoch,
        best_per,
        epochs,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.dump_defaults {
        print!("{}", RunConfig::default().to_text());
        return Ok(());
    }
    let (Some(config), Some(out_dir)) = (&a.config, &a.out_dir) else {
        unreachable!("clap enforces --config and --out-dir")
    };
    let cfg = RunConfig::from_file(config)?;
    let s = run(&cfg, out_dir, a.quiet)?;
    println!(
        "trained {} epochs on {} supervised sequences; best valid PER {} at epoch {}",
        s.epochs, s.supervised, s.best_per, s.best_epoch
    );
    println!(
        "wrote {}, {} and {} in {}",
        RUN_HEADER_FILE,
        METRICS_FILE,
        CHECKPOINT_FILE,
        out_dir.display()
    );
    Ok(())
}

fn report(e: &Evaluation, d: &Dataset) -> String {
    let mut s = format!(
        "per = {}\nedits = {}\nreference_length = {}\n",
        e.per,
        e.distances.iter().sum::<usize>(),
        e.reference_length
    );
    for (ex, dist) in d.examples.iter().zip(&e.distances) {
        let _ = writeln!(s, "{} {}", ex.id, dist);
    }
    s
}

fn eval(a: &EvalArgs) -> Result<()> {
    let d = load_dataset(&a.data)?;
    let e = match checkpoint_dtype(&a.checkpoint)? {
        DType::F32 => load_checkpoint::<f32>(&a.checkpoint)?.evaluate(&d)?,
        DType::F64 => load_checkpoint::<f64>(&a.checkpoint)?.evaluate(&d)?,
    };
    println!("PER {}", e.per);
    if let Some(out) = &a.out {
        std::fs::write(out, report(&e, &d)).map_err(io_err(out))?;
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let base = RunConfig::from_file(&a.config)?;
    let fractions = if a.fractions.is_empty() { vec![base.data.label_fraction] } else { a.fractions.clone() };
    let seeds = if a.seeds.is_empty() { vec![base.train.seed] } else { a.seeds.clone() };
    let decoders = if a.decoders.is_empty() {
        vec![base.model.decoder]
    } else {
        a.decoders
            .iter()
            .map(|d| DecoderKind::parse(d).ok_or_else(|| Error::Argument(format!("unknown decoder `{d}`"))))
            .collect::<Result<_>>()?
    };
    std::fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    let mut summary = String::from("decoder,sigma,fraction,seed,supervised,epochs,best_epoch,best_per,run_dir\n");
    for &decoder in &decoders {
        for &sigma in &a.sigmas {
            for &fraction in &fractions {
                for &seed in &seeds {
                    let mut cfg = base.clone();
                    cfg.model.decoder = decoder;
                    if decoder == DecoderKind::None {
                        cfg.model.lambdas = [0.0; 3];
                    } else if base.model.decoder == DecoderKind::None {
                        cfg.model.lambdas = RunConfig::default().model.lambdas;
                    }
                    cfg.model.noise.sigma = sigma;
                    cfg.data.label_fraction = fraction;
                    if !a.fractions.is_empty() {
                        cfg.data.label_count = None;
                    }
                    cfg.train.seed = seed;
                    cfg.validate()?;
                    let name = format!("{}_sigma{sigma}_frac{fraction}_seed{seed}", decoder.name());
                    let dir = a.out_dir.join(&name);
                    let s = run(&cfg, &dir, a.quiet)?;
                    println!("{name}: best valid PER {} at epoch {}", s.best_per, s.best_epoch);
                    let _ = writeln!(
                        summary,
                        "{},{sigma},{fraction},{seed},{},{},{},{},{name}",
                        decoder.name(),
                        s.supervised,
                        s.epochs,
                        s.best_epoch,
                        s.best_per
                    );
                    let path = a.out_dir.join("summary.csv");
                    std::fs::write(&path, &summary).map_err(io_err(&path))?;
                }
            }
        }
    }
    Ok(())
}
