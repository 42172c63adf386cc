//! `mcsae`: feature extraction, training, embedding extraction, scoring,
//! metrics and self-verification.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcsae_core::backbone::Model;
use mcsae_core::config::{parse_pairs, RunConfig};
use mcsae_core::evaluation::{
    evaluate, format_scores, format_sweep, load_embeddings, parse_scores, parse_trials, save_embeddings, score_trials, sweep,
    EmbeddingStore,
};
use mcsae_core::frontend::{cmvn_sliding, fix_length, log_mel, read_wav, FeatureMatrix};
use mcsae_core::selftest::run_suites;
use mcsae_core::training::{fit, gen_synthetic, load_training_data, SynthSpec};
use mcsae_core::Error;
use rand_chacha::ChaCha8Rng;
use walkdir::WalkDir;

const CMVN_WINDOW: usize = 300;

#[derive(Parser, Debug)]
#[command(name = "mcsae", version, about = "Masked cross self-attentive speaker embeddings")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable); wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    /// Worker threads for feature extraction, embedding extraction and scoring.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Log-mel features (CMVN applied) for every .wav under INPUT, or a
    /// synthetic corpus with --synthetic.
    Features {
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write train/, heldout/ and trials.txt from the synthetic generator.
        #[arg(long)]
        synthetic: bool,
        /// Held-out utterances per speaker for --synthetic.
        #[arg(long, default_value_t = 10)]
        heldout: usize,
    },
    /// Train a model; writes a checkpoint and the per-epoch report.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Embeddings for every .mcf under INPUT, keyed by relative path.
    Extract {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine scores for a trial list.
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER and minDCF from a score file.
    Eval {
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export every sweep point.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Run the verification suites.
    Selftest {
        /// Only suites whose name contains this.
        #[arg(long)]
        suite: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut layers = Vec::new();
    if let Some(path) = &cli.config {
        let text = read_text(path)?;
        layers.push(parse_pairs(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?);
    }
    let mut set = Vec::new();
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        set.push((k.trim().to_string(), v.trim().to_string()));
    }
    layers.push(set);
    Ok(RunConfig::from_layers(&layers)?)
}

fn files_with_extension(root: &Path, ext: &str) -> Outcome<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Failure::Runtime(format!("{}: not a directory", root.display())));
    }
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn utterance_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path).with_extension("");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Applies `f` to every item on `jobs` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Outcome<R> + Sync) -> Outcome<Vec<R>> {
    if jobs <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Outcome<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Failure::Runtime("worker panicked".into()))??);
        }
        Ok(out)
    })
}

fn save_feature(path: &Path, f: &FeatureMatrix) -> Outcome<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    Ok(f.save(path)?)
}

fn cmd_features(cli: &Cli, input: Option<&Path>, out: &Path, synthetic: bool, heldout: usize) -> Outcome<()> {
    let cfg = load_config(cli)?;
    if synthetic {
        let per_speaker = cfg.data.utterances_per_speaker;
        let data = gen_synthetic(&SynthSpec {
            speakers: cfg.model.speakers,
            utterances: per_speaker + heldout,
            bins: cfg.model.mel_bins,
            frames: cfg.model.frames,
            bands: 3,
            noise: cfg.data.noise,
            seed: cli.seed,
        })?;
        let (train, held) = data.split_per_speaker(per_speaker);
        for (part, name) in [(&train, "train"), (&held, "heldout")] {
            for (f, id) in part.features.iter().zip(&part.ids) {
                save_feature(&out.join(name).join(format!("{id}.mcf")), f)?;
            }
        }
        let mut trials = String::new();
        for i in 0..held.len() {
            for j in i + 1..held.len() {
                let target = u8::from(held.labels[i] == held.labels[j]);
                trials.push_str(&format!("{target} {} {}\n", held.ids[i], held.ids[j]));
            }
        }
        write_text(&out.join("trials.txt"), &trials)?;
        println!("wrote {} training and {} held-out utterances to {}", train.len(), held.len(), out.display());
        return Ok(());
    }
    let input = input.ok_or_else(|| Failure::Usage("features needs an input directory or --synthetic".into()))?;
    let wavs = files_with_extension(input, "wav")?;
    if wavs.is_empty() {
        return Err(Failure::Runtime(format!("{}: no .wav files found", input.display())));
    }
    let bands = cfg.model.mel_bins;
    parallel_map(&wavs, cli.jobs, |wav| {
        let (samples, sr) = read_wav(wav)?;
        let f = cmvn_sliding(&log_mel(&samples, sr, bands).map_err(|e| Failure::Runtime(format!("{}: {e}", wav.display())))?, CMVN_WINDOW);
        save_feature(&out.join(format!("{}.mcf", utterance_id(input, wav))), &f)
    })?;
    println!("wrote {} feature files to {}", wavs.len(), out.display());
    Ok(())
}

fn cmd_train(cli: &Cli, out: &Path, report_path: Option<&Path>) -> Outcome<()> {
    let cfg = load_config(cli)?;
    let data = load_training_data(&cfg, cli.seed)?;
    if data.speakers != cfg.model.speakers {
        return Err(Failure::Usage(format!(
            "model.speakers is {} but {} has {} speakers",
            cfg.model.speakers, cfg.data.source, data.speakers
        )));
    }
    let model = Model::new(cfg.model.clone(), cli.seed)?;
    println!("# epoch lr loss accuracy");
    let report = fit(&model, &data, &cfg, cli.seed, |e| {
        println!("{} {:e} {:.12e} {:.6}", e.epoch, e.lr, e.loss, e.accuracy);
    })?;
    model.save(out)?;
    let report_path = report_path.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("report"));
    write_text(&report_path, &report.to_string())?;
    println!("# stopped: {:?}; checkpoint {}", report.stop, out.display());
    Ok(())
}

fn cmd_extract(cli: &Cli, input: &Path, model_path: &Path, out: &Path) -> Outcome<()> {
    let model = Model::load(model_path)?;
    let files = files_with_extension(input, "mcf")?;
    if files.is_empty() {
        return Err(Failure::Runtime(format!("{}: no .mcf files found", input.display())));
    }
    let frames = model.cfg.frames;
    let embeddings = parallel_map(&files, cli.jobs, |path| {
        let f = FeatureMatrix::load(path)?;
        let f = fix_length(&f, frames, None::<&mut ChaCha8Rng>);
        model
            .extract_embedding(&f)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
    })?;
    let store: EmbeddingStore = files.iter().map(|p| utterance_id(input, p)).zip(embeddings).collect();
    save_embeddings(out, &store)?;
    println!("wrote {} embeddings to {}", store.len(), out.display());
    Ok(())
}

fn cmd_score(cli: &Cli, embeddings: &Path, trials_path: &Path, out: &Path) -> Outcome<()> {
    let store = load_embeddings(embeddings)?;
    let mut trials = parse_trials(&read_text(trials_path)?).map_err(|e| Failure::Runtime(format!("{}: {e}", trials_path.display())))?;
    // Trial lists may name audio files; ids are stored without extensions.
    for t in &mut trials {
        for id in [&mut t.enroll, &mut t.test] {
            if !store.contains_key(id.as_str()) {
                if let Some((stem, _)) = id.rsplit_once('.') {
                    if store.contains_key(stem) {
                        *id = stem.to_string();
                    }
                }
            }
        }
    }
    let scores = score_trials(&trials, &store, cli.jobs).map_err(|e| Failure::Runtime(format!("{}: {e}", trials_path.display())))?;
    write_text(out, &format_scores(&trials, &scores))?;
    println!("scored {} trials into {}", trials.len(), out.display());
    Ok(())
}

fn cmd_eval(scores_path: &Path, out: Option<&Path>, sweep_path: Option<&Path>) -> Outcome<()> {
    let scores = parse_scores(&read_text(scores_path)?).map_err(|e| Failure::Runtime(format!("{}: {e}", scores_path.display())))?;
    let metrics = evaluate(&scores)?;
    print!("{metrics}");
    if let Some(out) = out {
        write_text(out, &metrics.to_string())?;
    }
    if let Some(path) = sweep_path {
        write_text(path, &format_sweep(&sweep(&scores)?))?;
    }
    Ok(())
}

fn cmd_selftest(suite: Option<&str>) -> Outcome<()> {
    let reports = run_suites(suite);
    if reports.is_empty() {
        return Err(Failure::Usage(format!("no suite matches {:?}", suite.unwrap_or(""))));
    }
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<14} {:>6.2}s  {}", r.name, r.seconds, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} suites failed", reports.len())));
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome<()> {
    match &cli.command {
        Command::Features { input, out, synthetic, heldout } => cmd_features(cli, input.as_deref(), out, *synthetic, *heldout),
        Command::Train { out, report } => cmd_train(cli, out, report.as_deref()),
        Command::Extract { input, model, out } => cmd_extract(cli, input, model, out),
        Command::Score { embeddings, trials, out } => cmd_score(cli, embeddings, trials, out),
        Command::Eval { scores, out, sweep } => cmd_eval(scores, out.as_deref(), sweep.as_deref()),
        Command::Selftest { suite } => cmd_selftest(suite.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
