use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use overlaydetect::dataset::{self, SyntheticSpec};
use overlaydetect::finetune::{self, ProcessTrainer};
use overlaydetect::fusion::{self, checkpoint, TrainConfig};
use overlaydetect::harness::{
    self, ComparisonReport, ErrorPolicy, EvalOptions, ReportFormat, ReportRow, RunMetadata, Strategy,
};
use overlaydetect::metrics::{confusion, summarize};
use overlaydetect::prompting::{PromptTemplate, StrategyKind, TemplateSet};
use overlaydetect::vlm::{self, EndpointConfig, HttpTransport, MockTransport, Transport, VlmClient};
use overlaydetect::{Manifest, Split};

#[derive(Parser)]
#[command(name = "overlaydetect", version, about = "Artificial text overlay detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus with OCR sidecars and a manifest.
    GenData {
        /// Synthetic corpus spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fusion classifier on the train split of a manifest.
    TrainFusion {
        #[arg(long)]
        manifest: PathBuf,
        /// Training config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one strategy on the eval split of a manifest.
    Eval {
        #[arg(long)]
        strategy: StrategyKind,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of prompt templates; missing files fall back to the built-in defaults.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Fusion checkpoint.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        endpoint_config: Option<PathBuf>,
        /// Scripted mock endpoint (JSON) instead of a real one.
        #[arg(long)]
        mock_script: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Write per-image transcripts next to the report.
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value = "count_as_negative")]
        error_policy: ErrorPolicy,
        /// Row label in tables; defaults to the strategy's display name.
        #[arg(long)]
        name: Option<String>,
        /// Machine-readable report to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge reports over the same dataset into one table.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Text table to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write the merged machine report here.
        #[arg(long)]
        out_machine: Option<PathBuf>,
    },
    /// Write the fine-tuning config and instruction manifest.
    EmitFinetune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_config: PathBuf,
        #[arg(long)]
        out_manifest: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Drive an external trainer process with early stopping.
    RunFinetune {
        #[arg(long)]
        config: PathBuf,
        /// Instruction manifest written by emit-finetune.
        #[arg(long)]
        manifest: PathBuf,
        /// Trainer executable speaking the JSON-lines trainer protocol.
        #[arg(long)]
        trainer: PathBuf,
        #[arg(long = "trainer-arg", allow_hyphen_values = true)]
        trainer_args: Vec<String>,
        #[arg(long, default_value_t = finetune::DEFAULT_PATIENCE)]
        patience: u32,
        /// Run summary (JSON) to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::TrainFusion { manifest, config, out } => train_fusion(&manifest, config.as_deref(), &out),
        Command::Eval {
            strategy,
            manifest,
            templates,
            params,
            endpoint_config,
            mock_script,
            parallelism,
            trace,
            error_policy,
            name,
            out,
        } => eval(EvalArgs {
            strategy,
            manifest,
            templates,
            params,
            endpoint_config,
            mock_script,
            parallelism,
            trace,
            error_policy,
            name,
            out,
        }),
        Command::Compare { reports, out, out_machine } => compare(&reports, &out, out_machine.as_deref()),
        Command::EmitFinetune {
            manifest,
            out_config,
            out_manifest,
            templates,
        } => emit_finetune(&manifest, &out_config, &out_manifest, templates.as_deref()),
        Command::RunFinetune {
            config,
            manifest,
            trainer,
            trainer_args,
            patience,
            out,
        } => run_finetune(&config, &manifest, trainer, trainer_args, patience, out.as_deref()),
    }
}

fn gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SyntheticSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
    let manifest = dataset::generate_synthetic_corpus(&spec, out)?;
    let path = out.join("manifest.jsonl");
    dataset::write_manifest(&manifest, &path)?;
    let (train, eval) = (manifest.counts(Split::Train), manifest.counts(Split::Eval));
    println!(
        "wrote {} samples ({} train, {} eval) and {}",
        manifest.len(),
        train.total(),
        eval.total(),
        path.display()
    );
    Ok(())
}

fn train_fusion(manifest_path: &Path, config_path: Option<&Path>, out: &Path) -> Result<()> {
    let config: TrainConfig = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    let manifest = dataset::load_manifest(manifest_path)?;
    let train = manifest.split(Split::Train);
    if train.is_empty() {
        bail!("{} has no train samples", manifest_path.display());
    }
    let records = fusion::load_records(train.samples(), &config.dims)?;
    info!("training on {} samples for {} epochs", records.len(), config.epochs);
    let report_every = (config.epochs / 10).max(1);
    let outcome = fusion::train_with(&records, &config, |s| {
        if s.epoch % report_every == 0 || s.epoch == 1 || s.epoch == config.epochs {
            info!("epoch {}: loss {:.5}, train accuracy {:.3}", s.epoch, s.loss, s.accuracy);
        }
    })?;
    checkpoint::save(out, &outcome.params, Some(&config))?;
    println!("wrote checkpoint {}", out.display());

    let eval = manifest.split(Split::Eval);
    if !eval.is_empty() {
        let records = fusion::load_records(eval.samples(), &config.dims)?;
        let mut predictions = Vec::new();
        for r in &records {
            predictions.push(fusion::detect_fusion(&outcome.params, &r.tokens, &r.image)?.label);
        }
        let truths: Vec<_> = records.iter().map(|r| r.label).collect();
        let m = summarize(confusion(&predictions, &truths)?)?;
        println!("eval accuracy {:.4} on {} samples", m.accuracy, m.n);
    }
    Ok(())
}

struct EvalArgs {
    strategy: StrategyKind,
    manifest: PathBuf,
    templates: Option<PathBuf>,
    params: Option<PathBuf>,
    endpoint_config: Option<PathBuf>,
    mock_script: Option<PathBuf>,
    parallelism: usize,
    trace: bool,
    error_policy: ErrorPolicy,
    name: Option<String>,
    out: PathBuf,
}

/// `<out stem>.<suffix>` next to `out`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn build_client(args: &EvalArgs, hash_parts: &mut Vec<(String, String)>) -> Result<VlmClient> {
    let (transport, retry, in_flight): (Arc<dyn Transport>, _, _) = match (&args.mock_script, &args.endpoint_config) {
        (Some(_), Some(_)) => bail!("pass either --mock-script or --endpoint-config, not both"),
        (Some(script), None) => {
            let behavior = vlm::load_script(script)?;
            hash_parts.push(("mock_script".into(), harness::sha256_hex(&fs::read(script)?)));
            (
                Arc::new(MockTransport::new(behavior)),
                vlm::RetryPolicy::immediate(2),
                args.parallelism,
            )
        }
        (None, Some(path)) => {
            let config = EndpointConfig::load(path)?;
            hash_parts.push(("endpoint".into(), serde_json::to_string(&config)?));
            let retry = config.retry_policy();
            let in_flight = config.max_in_flight;
            (Arc::new(HttpTransport::new(config)?), retry, in_flight)
        }
        (None, None) => bail!("strategy {} needs --mock-script or --endpoint-config", args.strategy),
    };
    Ok(VlmClient::new(transport, retry, in_flight))
}

fn eval(args: EvalArgs) -> Result<()> {
    let full = dataset::load_manifest(&args.manifest)?;
    let manifest: Manifest = full.split(Split::Eval);
    if manifest.is_empty() {
        bail!("{} has no eval samples", args.manifest.display());
    }
    let fingerprint = harness::fingerprint_file(&args.manifest)?;
    let templates = match &args.templates {
        Some(dir) => TemplateSet::load(dir)?,
        None => TemplateSet::default(),
    };
    let mut hash_parts: Vec<(String, String)> = vec![
        ("strategy".into(), args.strategy.to_string()),
        ("error_policy".into(), serde_json::to_string(&args.error_policy)?),
    ];
    let template_hash = |t: &PromptTemplate| (format!("template:{}", t.name), t.body.clone());

    let client;
    let params;
    let strategy = match args.strategy {
        StrategyKind::Fusion => {
            let path = args.params.as_ref().context("strategy fusion needs --params")?;
            hash_parts.push(("params".into(), harness::sha256_hex(&fs::read(path)?)));
            params = checkpoint::load(path)?.0;
            Strategy::Fusion { params: &params }
        }
        StrategyKind::ZeroShot => {
            client = build_client(&args, &mut hash_parts)?;
            hash_parts.push(template_hash(&templates.zero_shot));
            Strategy::ZeroShot { client: &client, template: &templates.zero_shot }
        }
        StrategyKind::Sequential => {
            client = build_client(&args, &mut hash_parts)?;
            hash_parts.push(template_hash(&templates.stage1));
            hash_parts.push(template_hash(&templates.stage2));
            Strategy::Sequential { client: &client, stage1: &templates.stage1, stage2: &templates.stage2 }
        }
        StrategyKind::Finetuned => {
            client = build_client(&args, &mut hash_parts)?;
            hash_parts.push(template_hash(&templates.finetuned));
            Strategy::Finetuned { client: &client, template: &templates.finetuned }
        }
    };

    let evaluation = harness::evaluate(
        &manifest,
        strategy,
        EvalOptions { parallelism: args.parallelism, trace: args.trace },
    )?;
    let predictions_path = sibling(&args.out, "predictions.jsonl");
    harness::write_predictions(&predictions_path, &evaluation.records)?;
    if let Some(transcripts) = &evaluation.transcripts {
        let trace_path = sibling(&args.out, "trace.jsonl");
        harness::write_transcripts(&trace_path, transcripts)?;
        info!("wrote {}", trace_path.display());
    }
    let metrics = harness::score(&evaluation.records, args.error_policy)?;
    let errors = evaluation.records.iter().filter(|r| r.error.is_some()).count();
    let config_hash = harness::sha256_hex(serde_json::to_string(&hash_parts)?.as_bytes());
    let report = ComparisonReport::new(
        fingerprint,
        vec![ReportRow {
            name: args.name.clone().unwrap_or_else(|| args.strategy.display_name().to_string()),
            strategy: Some(args.strategy),
            metrics,
            metadata: RunMetadata::now(config_hash, args.error_policy, errors),
        }],
    );
    report.save(&args.out)?;
    info!("wrote {} and {}", args.out.display(), predictions_path.display());
    if errors > 0 {
        info!("{errors} of {} samples ended in errors", evaluation.records.len());
    }
    print!("{}", harness::render_report(&report, ReportFormat::TableText));
    Ok(())
}

fn compare(paths: &[PathBuf], out: &Path, out_machine: Option<&Path>) -> Result<()> {
    let reports = paths.iter().map(|p| ComparisonReport::load(p)).collect::<Result<Vec<_>, _>>()?;
    let merged = harness::compare(&reports)?;
    let table = harness::render_report(&merged, ReportFormat::TableText);
    fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = out_machine {
        merged.save(path)?;
    }
    print!("{table}");
    Ok(())
}

fn emit_finetune(manifest_path: &Path, out_config: &Path, out_manifest: &Path, templates: Option<&Path>) -> Result<()> {
    let manifest = dataset::load_manifest(manifest_path)?.split(Split::Train);
    let template = match templates {
        Some(dir) if dir.join("finetune_instruction.txt").is_file() => PromptTemplate::load(dir, "finetune_instruction")?,
        _ => PromptTemplate::new("finetune_instruction", overlaydetect::prompting::defaults::FINETUNE_INSTRUCTION),
    };
    let config = finetune::paper_default_config();
    config.save(out_config)?;
    let records = finetune::emit_training_manifest(&manifest, &template, out_manifest)?;
    let positives = records.iter().filter(|r| r.answer.starts_with("yes")).count();
    println!(
        "wrote {} and {} ({} records, {positives} positive)",
        out_config.display(),
        out_manifest.display(),
        records.len()
    );
    Ok(())
}

fn run_finetune(
    config_path: &Path,
    manifest: &Path,
    program: PathBuf,
    args: Vec<String>,
    patience: u32,
    out: Option<&Path>,
) -> Result<()> {
    let config = finetune::FinetuneConfig::load(config_path)?;
    let mut trainer = ProcessTrainer::new(program, args);
    let summary = finetune::run_finetune(&config, manifest, &mut trainer, patience)?;
    let json = serde_json::to_string_pretty(&summary)?;
    if let Some(path) = out {
        fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{json}");
    Ok(())
}
