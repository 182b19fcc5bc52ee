mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use envdecode::checkpoint::Checkpoint;
use envdecode::data::{generate_synthetic, Dataset, SignalFile, Split, SyntheticSpec};
use envdecode::gradcheck;
use envdecode::inference::{evaluate_split, infer_eeg, plan_chunks, TailPolicy};
use envdecode::model::DecoderModel;
use envdecode::training::{train, TrainOptions, Trainer};
use envdecode::{Error, Result};
use serde_json::json;

use config::{resolve, Ablation, Preset};

#[derive(Parser, Debug)]
#[command(name = "envdecode", version, about = "Reconstruct speech envelopes from EEG", after_help = config::key_table())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a decoder on the train split of a manifest.
    #[command(after_help = config::key_table())]
    Train(TrainArgs),
    /// Score a checkpoint on one split and print the report as JSON.
    Eval(EvalArgs),
    /// Decode one EEG file into an envelope file.
    Infer(InferArgs),
    /// Finite-difference check of every layer.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    subjects: usize,
    #[arg(long, default_value_t = 2)]
    recordings: usize,
    #[arg(long, default_value_t = 60.0)]
    seconds: f64,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    sample_rate: u32,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 8)]
    fir_len: usize,
    #[arg(long, default_value_t = 1.0)]
    shared_pattern: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest (overrides paths.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for checkpoints and metrics (overrides paths.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// JSON file of dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablation: Vec<Ablation>,
    /// Override one key, e.g. `--set optim.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set optim.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "process_short_tail")]
    tail_policy: TailPolicy,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// EEGR file with the EEG channels.
    #[arg(long)]
    eeg: PathBuf,
    /// Subject id; defaults to the one in the file header.
    #[arg(long)]
    subject: Option<usize>,
    /// Single-channel EEGR output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "process_short_tail")]
    tail_policy: TailPolicy,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Format { .. } | Error::Io { .. } | Error::TooShort { .. } => 4,
        Error::NonFiniteLoss { .. } => 5,
        _ => 3,
    }
}

fn kind(e: &Error) -> &'static str {
    match exit_code(e) {
        4 => "data_format",
        5 => "numeric",
        _ => "config",
    }
}

fn report_error(e: &Error) -> ExitCode {
    let code = exit_code(e);
    let mut body = json!({ "error": kind(e), "message": e.to_string(), "exit_code": code });
    if let Error::NonFiniteLoss { step, lr, loss, history } = e {
        body["step"] = json!(step);
        body["lr"] = json!(lr);
        body["loss"] = json!(loss.to_string());
        body["history"] = json!(history);
    }
    eprintln!("{body}");
    ExitCode::from(code)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_subjects: a.subjects,
        recordings_per_subject: a.recordings,
        duration_seconds: a.seconds,
        channels: a.channels,
        sample_rate_hz: a.sample_rate,
        noise_std: a.noise,
        fir_len: a.fir_len,
        shared_pattern: a.shared_pattern,
        seed: a.seed,
        subject_weights: None,
        subject_firs: None,
    };
    let ds = generate_synthetic(&spec)?;
    let manifest = ds.write(&a.out)?;
    print_json(&json!({
        "out_dir": a.out,
        "manifest": a.out.join("manifest.json"),
        "recordings": manifest.entries.len(),
    }))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut sets = a.sets.clone();
    if let Some(seed) = a.seed {
        sets.push(format!("optim.seed={seed}"));
    }
    let mut cfg = resolve(a.preset, a.config.as_deref(), &a.ablation, &sets)?;
    if let Some(m) = a.manifest {
        cfg.paths.manifest = Some(m);
    }
    if let Some(o) = a.out {
        cfg.paths.out_dir = Some(o);
    }
    if a.dry_run {
        return print_json(&cfg);
    }
    let manifest = cfg
        .paths
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no manifest: pass --manifest or set paths.manifest".into()))?;
    let out_dir = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set paths.out_dir".into()))?;
    let dataset = Dataset::load(&manifest)?;
    let first = dataset
        .recordings
        .first()
        .ok_or_else(|| Error::Config("manifest has no entries".into()))?;
    cfg.model.in_channels = first.0.channels();
    cfg.model.n_subjects = if cfg.model.use_conditioner { dataset.n_subjects() } else { 0 };

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            t.set_epochs(cfg.optim.epochs);
            t
        }
        None => Trainer::new(
            DecoderModel::new(cfg.model.clone(), cfg.optim.seed)?,
            cfg.optim.clone(),
            cfg.loss.clone(),
        )?,
    };
    std::fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
        path: out_dir.clone(),
        source,
    })?;
    write_file(&out_dir.join("run_config.json"), serde_json::to_string_pretty(&cfg)?.as_bytes())?;
    let summary = train(
        &mut trainer,
        &dataset,
        &TrainOptions {
            out_dir: Some(out_dir.clone()),
            tail_policy: cfg.eval.tail_policy,
        },
    )?;
    print_json(&json!({
        "out_dir": out_dir,
        "epochs": trainer.epoch(),
        "steps": summary.steps,
        "final_train_loss": summary.metrics.last().map(|m| m.train_loss),
        "best_val_r": summary.best_val_r,
        "best_epoch": summary.best_epoch,
        "parameters": trainer.model().count_parameters(),
    }))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    let eps = match ck.meta.get("train_state").and_then(|s| s.get("loss")) {
        Some(loss) => serde_json::from_value::<envdecode::objective::LossConfig>(loss.clone())?.epsilon_denominator,
        None => envdecode::objective::LossConfig::default().epsilon_denominator,
    };
    let dataset = Dataset::load(&a.manifest)?;
    let segment = model.config().segment_samples()?;
    let report = evaluate_split(&model, &dataset, a.split, segment, a.tail_policy, eps)?;
    if let Some(out) = &a.out {
        write_file(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    print_json(&report)
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let sig = SignalFile::read(&a.eeg)?;
    let subject = a.subject.unwrap_or(sig.subject_id as usize);
    let plan = plan_chunks(sig.n_samples, model.config().segment_samples()?, a.tail_policy)?;
    let envelope = infer_eeg(&model, &sig.to_time_major(), subject, &plan)?;
    SignalFile::from_time_major(subject as u32, sig.sample_rate_hz, &envelope)?.write(&a.out)?;
    print_json(&json!({ "out": a.out, "samples": envelope.numel(), "subject": subject }))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let rows = gradcheck::suite(a.seed)?;
    println!("{:<20} {:>8} {:>14} {:>8}  result", "layer", "checked", "max rel err", "redraws");
    for r in &rows {
        println!(
            "{:<20} {:>8} {:>14.3e} {:>8}  {}",
            r.name,
            r.checked,
            r.max_relative_error,
            r.redraws,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    Ok(rows.iter().all(|r| r.passed()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let body = json!({ "error": "usage", "message": e.to_string().trim(), "exit_code": 2 });
            eprintln!("{body}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("{}", json!({ "error": "numeric", "message": "gradient check failed", "exit_code": 5 }));
                return ExitCode::from(5);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
