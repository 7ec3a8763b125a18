//! Command-line entry points.
//!
//! Exit codes are a stable contract: 0 success, 1 usage/config errors,
//! 2 data errors, 3 verification failures, 4 numeric failures.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::synth::{
    generate_synthetic, RetrievalDirection, SynthTask, SyntheticSpec,
};
use crate::encoder::checkpoint::{load_checkpoint, save_checkpoint, DynParameters};
use crate::error::{Error, Result};
use crate::eval::{read_report, write_report, ReportFormat};
use crate::gradcache::Model;
use crate::instruction::TaskRegistry;
use crate::pipeline::{evaluate_from_config, run_training};
use crate::tensor::Element;

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Invalid(_) | Error::Shape(_) | Error::Dtype(_) => 1,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 2,
        Error::Verification(_) => 3,
        Error::NonFinite(_) => 4,
    }
}

#[derive(Parser)]
#[command(
    name = "emforge",
    about = "Desk-scale multimodal embedding training and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per the config and write an EMC1 checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Training log (JSONL); defaults to `<out_checkpoint>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's eval manifest.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path; defaults to the config's `eval.report_path`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Strip query-side instructions (the ablation mode).
        #[arg(long)]
        no_instructions: bool,
    },
    /// Generate a synthetic dataset: manifest, image blobs and task registry.
    Synth {
        #[arg(long)]
        meta_task: String,
        #[arg(long)]
        n_train: usize,
        #[arg(long)]
        n_eval: usize,
        #[arg(long, default_value_t = 8)]
        n_candidates: usize,
        #[arg(long, default_value_t = 8)]
        n_classes: usize,
        #[arg(long, default_value_t = 8)]
        image_size: usize,
        #[arg(long)]
        seed: u64,
        /// Generate the out-of-distribution variant (fresh vocabulary and
        /// patterns).
        #[arg(long)]
        ood: bool,
        /// Retrieval direction: t2i or i2t.
        #[arg(long, default_value = "t2i")]
        direction: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Append to an existing manifest/registry instead of overwriting.
        #[arg(long)]
        append: bool,
    },
    /// Verify gradients: finite differences plus cached-vs-direct equivalence.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert a JSON report to json, csv or plotdata.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        format: String,
        /// Output path; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version with success exits
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            out_checkpoint,
            log,
        } => cmd_train(&config, &out_checkpoint, log.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            report,
            no_instructions,
        } => cmd_eval(&config, &checkpoint, report.as_deref(), no_instructions),
        Command::Synth {
            meta_task,
            n_train,
            n_eval,
            n_candidates,
            n_classes,
            image_size,
            seed,
            ood,
            direction,
            out_dir,
            append,
        } => {
            let spec = SyntheticSpec {
                meta_task: parse_meta_task(&meta_task)?,
                n_train,
                n_eval,
                n_candidates,
                n_classes,
                image_size,
                seed,
                ood,
                direction: parse_direction(&direction)?,
            };
            cmd_synth(&spec, &out_dir, append)
        }
        Command::Gradcheck { config } => cmd_gradcheck(&config),
        Command::Report {
            report,
            format,
            out,
        } => cmd_report(&report, &format, out.as_deref()),
    }
}

fn parse_meta_task(s: &str) -> Result<SynthTask> {
    match s {
        "classification" => Ok(SynthTask::Classification),
        "vqa" => Ok(SynthTask::Vqa),
        "retrieval" => Ok(SynthTask::Retrieval),
        "grounding" => Ok(SynthTask::Grounding),
        "ablation" => Ok(SynthTask::Ablation),
        other => Err(Error::invalid(format!(
            "unknown meta task {other} (expected classification, vqa, retrieval, grounding or ablation)"
        ))),
    }
}

fn parse_direction(s: &str) -> Result<RetrievalDirection> {
    match s {
        "t2i" => Ok(RetrievalDirection::T2i),
        "i2t" => Ok(RetrievalDirection::I2t),
        other => Err(Error::invalid(format!(
            "unknown retrieval direction {other} (expected t2i or i2t)"
        ))),
    }
}

pub fn cmd_train(config_path: &Path, out_checkpoint: &Path, log_path: Option<&Path>) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let default_log = out_checkpoint.with_extension("log.jsonl");
    let log_path = log_path.unwrap_or(&default_log);
    if let Some(parent) = log_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut log = std::fs::File::create(log_path)?;
    // wall-clock timing lives only in the header and per-step seconds; the
    // loss/lr sequence is deterministic per (config, seed)
    writeln!(
        log,
        "{}",
        serde_json::json!({
            "header": {
                "config": config_path.display().to_string(),
                "started_unix": std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            }
        })
    )?;
    // f32 is the training dtype; f64 is reserved for verification paths.
    let model = run_training::<f32>(&config, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        let _ = writeln!(log, "{line}");
        log::info!("step {} loss {:.6} lr {:.6}", entry.step, entry.loss, entry.lr);
    })?;
    save_checkpoint(out_checkpoint, &model.params, &model.config)?;
    Ok(())
}

pub fn cmd_eval(
    config_path: &Path,
    checkpoint_path: &Path,
    report_path: Option<&Path>,
    no_instructions: bool,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let (params, ckpt_config) = load_checkpoint(checkpoint_path)?;
    if ckpt_config != config.model {
        return Err(Error::Config(format!(
            "checkpoint model config does not match the run config (checkpoint {:?})",
            ckpt_config
        )));
    }
    let with_instructions = config.eval.with_instructions && !no_instructions;
    let report = match params {
        DynParameters::F32(p) => eval_with::<f32>(p, &ckpt_config, &config, with_instructions)?,
        DynParameters::F64(p) => eval_with::<f64>(p, &ckpt_config, &config, with_instructions)?,
    };
    let out = report_path.unwrap_or(&config.eval.report_path);
    write_report(out, &report, ReportFormat::Json)?;
    Ok(())
}

fn eval_with<T: Element>(
    params: crate::encoder::Parameters<T>,
    model_config: &crate::encoder::ModelConfig,
    config: &RunConfig,
    with_instructions: bool,
) -> Result<crate::eval::EvalReport> {
    params.validate_against(model_config)?;
    let model = Model {
        config: model_config.clone(),
        params,
    };
    evaluate_from_config(&model, config, with_instructions)
}

pub fn cmd_synth(spec: &SyntheticSpec, out_dir: &Path, append: bool) -> Result<()> {
    let out = generate_synthetic(spec)?;
    std::fs::create_dir_all(out_dir)?;
    for (rel, tensor) in &out.blobs {
        crate::tensor_io::write_tensor_file(&out_dir.join(rel), tensor)?;
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    let registry_path = out_dir.join("tasks.json");

    let mut records = Vec::new();
    let mut registry = TaskRegistry::default();
    if append && manifest_path.exists() {
        let existing = TaskRegistry::load(&registry_path)?;
        let dataset = crate::data::load_manifest(
            &manifest_path,
            &existing,
            &crate::data::LoadOptions::default(),
        )?;
        records = dataset.records;
        registry = existing;
    }
    records.extend(out.records.iter().cloned());
    registry.merge(TaskRegistry::from_tasks(out.tasks.clone())?)?;
    crate::data::save_manifest(&manifest_path, &records)?;
    registry.save(&registry_path)?;
    log::info!(
        "wrote {} records, {} blobs, {} tasks to {}",
        records.len(),
        out.blobs.len(),
        registry.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_gradcheck(config_path: &Path) -> Result<()> {
    // the config is validated (usage contract) though the checks themselves
    // run on fixed verification models
    let _config = RunConfig::load(config_path)?;
    let report = crate::gradcheck::run_gradcheck(&crate::gradcheck::GradcheckOptions::default())?;
    print!("{}", report.render_table());
    if !report.passed() {
        return Err(Error::Verification("gradient checks failed".into()));
    }
    Ok(())
}

pub fn cmd_report(report_path: &Path, format: &str, out: Option<&Path>) -> Result<()> {
    let format: ReportFormat = format.parse()?;
    let report = read_report(report_path)?;
    match out {
        Some(path) => write_report(path, &report, format)?,
        None => {
            let body = match format {
                ReportFormat::Json => crate::eval::report_to_json(&report),
                ReportFormat::Csv => crate::eval::report_to_csv(&report),
                ReportFormat::Plotdata => crate::eval::report_to_plotdata(&report),
            };
            print!("{body}");
        }
    }
    Ok(())
}
