use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use irc_core::config::{ConfigOverrides, EncoderShape, TrainingConfig};
use irc_core::corpus::{load_dataset, write_jsonl, Example};
use irc_core::dataset_builder::{attach_retrieved_passages, augment_cna, build_fullwiki_cna, BuildOptions};
use irc_core::evaluator::{evaluate, format_report, MetricReport, OfficialPredictions};
use irc_core::inference::{to_official, Setting};
use irc_core::model::IrcModel;
use irc_core::synthetic::{generate, SyntheticSpec};
use irc_core::trainer::{pretrain_answerer, pretrain_extractor, pretrain_ranker, pretraining_set, train_e2e, TrainingLog};

#[derive(Parser, Debug)]
#[command(name = "irc", version, about = "Interpretable reading comprehension: extract a rationale, then answer from it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-hop corpus as JSON Lines.
    GenSynthetic(GenSyntheticArgs),
    /// Build the Fullwiki+CNA dataset from HotpotQA files.
    BuildDataset(BuildDatasetArgs),
    /// Pre-train the extractor, the answerer and the paragraph ranker.
    Pretrain(PretrainArgs),
    /// Continue training a pre-trained checkpoint end to end.
    TrainE2e(TrainE2eArgs),
    /// Write predictions in the official HotpotQA format.
    Infer(InferArgs),
    /// Score predictions against gold examples.
    Evaluate(EvaluateArgs),
    /// Evaluate a checkpoint over a grid of alpha or beta values.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenSyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    examples: usize,
    #[arg(long, default_value_t = 0.3)]
    cna_fraction: f64,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 80)]
    entity_vocabulary: usize,
    #[arg(long, default_value_t = 4)]
    paragraphs: usize,
    #[arg(long, default_value_t = 3)]
    sentences: usize,
}

#[derive(Args, Debug)]
struct BuildDatasetArgs {
    /// HotpotQA file with gold annotations.
    #[arg(long)]
    input: PathBuf,
    /// HotpotQA-format file with the retrieved (fullwiki) paragraphs.
    #[arg(long)]
    retrieval: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write one negative-sampled CNA example per query to `<out>.cna.jsonl`.
    #[arg(long)]
    augment_cna: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    tfidf_ngram: usize,
    /// Keep examples whose supporting facts do not resolve in the gold context.
    #[arg(long)]
    keep_unresolvable: bool,
}

/// Shared configuration flags: a config file plus `--set key=value` overrides.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat key-value (TOML) file; keys are TrainingConfig / EncoderConfig field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set learning_rate=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<ConfigOverrides>,
}

fn parse_override(s: &str) -> std::result::Result<ConfigOverrides, String> {
    let (key, value) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let key = key.trim();
    let value = value.trim();
    // Bare words are read as strings so that only typed keys need quoting rules.
    let line = format!("{key} = {value}");
    ConfigOverrides::from_toml_str(&line)
        .or_else(|_| ConfigOverrides::from_toml_str(&format!("{key} = {value:?}")))
        .map_err(|e| e.to_string())
}

impl ConfigArgs {
    fn merged(&self) -> Result<ConfigOverrides> {
        let mut merged = match &self.config {
            Some(p) => ConfigOverrides::load(p)?,
            None => ConfigOverrides::default(),
        };
        for o in &self.overrides {
            merged = merged.merge(o);
        }
        Ok(merged)
    }

    fn resolve(&self) -> Result<(TrainingConfig, EncoderShape)> {
        Ok(ConfigOverrides::resolve(None, &self.merged()?)?)
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resume from a partially trained checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainE2eArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SettingArg {
    CnaAware,
    Distractor,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::CnaAware => Setting::CnaAware,
            SettingArg::Distractor => Setting::Distractor,
        }
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SettingArg::CnaAware)]
    setting: SettingArg,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Paragraph pairs kept by the ranker.
    #[arg(long)]
    top_k: Option<usize>,
    /// Upper bound on rationale growth.
    #[arg(long)]
    max_rationales: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Also write the report here; the manifest goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the plain-text tables to stderr.
    #[arg(long)]
    tables: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum SweepParam {
    Alpha,
    Beta,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// `start:end:step`, both ends inclusive.
    #[arg(long, default_value = "0:0.9:0.1", value_parser = parse_range)]
    range: Grid,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SettingArg::CnaAware)]
    setting: SettingArg,
}

#[derive(Clone, Debug)]
struct Grid(Vec<f64>);

fn parse_range(s: &str) -> std::result::Result<Grid, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [start, end, step] = parts[..] else {
        return Err(format!("expected start:end:step, got `{s}`"));
    };
    if !(step > 0.0) || end < start {
        return Err(format!("empty range `{s}`"));
    }
    // Count steps in integers so 0:0.9:0.1 yields exactly ten points.
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok(Grid((0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()))
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    code_version: String,
    wall_clock_seconds: f64,
}

struct Run {
    command: &'static str,
    started: Instant,
}

impl Run {
    fn finish(
        &self,
        manifest_next_to: &Path,
        config: impl Serialize,
        seeds: Vec<u64>,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: std::env::args().collect(),
            config: serde_json::to_value(config)?,
            seeds,
            inputs,
            outputs,
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = manifest_path(manifest_next_to);
        write_json(&path, &manifest)
    }
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn sidecar(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    output.with_file_name(name)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_examples(path: &Path) -> Result<Vec<Example>> {
    let data = load_dataset(path)?;
    if data.is_empty() {
        bail!("{}: no examples", path.display());
    }
    Ok(data)
}

fn log_epochs(log: &TrainingLog) {
    for e in &log.epochs {
        log::info!("{} epoch {}: {} examples, mean loss {:.5}", e.stage.key(), e.epoch, e.examples, e.mean_loss);
    }
}

fn gen_synthetic(run: &Run, args: &GenSyntheticArgs) -> Result<()> {
    let spec = SyntheticSpec {
        examples: args.examples,
        entity_vocabulary: args.entity_vocabulary,
        paragraphs_per_passage: args.paragraphs,
        sentences_per_paragraph: args.sentences,
        cna_fraction: args.cna_fraction,
        seed: args.seed,
        split: args.split.clone(),
        ..SyntheticSpec::default()
    };
    let data = generate(&spec)?;
    write_jsonl(&args.out, &data)?;
    eprintln!("wrote {} examples to {}", data.len(), args.out.display());
    run.finish(&args.out, &spec, vec![spec.seed], vec![], vec![args.out.clone()])
}

fn build_dataset(run: &Run, args: &BuildDatasetArgs) -> Result<()> {
    let gold = load_examples(&args.input)?;
    let retrieved = load_examples(&args.retrieval)?;
    let attached = attach_retrieved_passages(gold.clone(), &retrieved);
    let options = BuildOptions { exclude_unresolvable: !args.keep_unresolvable };
    let (built, stats) = build_fullwiki_cna(attached, options);
    write_jsonl(&args.out, &built)?;
    let stats_path = sidecar(&args.out, ".stats.json");
    write_json(&stats_path, &stats)?;
    let mut outputs = vec![args.out.clone(), stats_path];
    if args.augment_cna {
        let aug_path = sidecar(&args.out, ".cna.jsonl");
        write_jsonl(&aug_path, &augment_cna(&gold, args.tfidf_ngram, args.seed))?;
        outputs.push(aug_path);
    }
    println!("{}", serde_json::to_string_pretty(&stats)?);
    let config = serde_json::json!({
        "augment_cna": args.augment_cna,
        "tfidf_ngram": args.tfidf_ngram,
        "exclude_unresolvable": options.exclude_unresolvable,
    });
    run.finish(&args.out, config, vec![args.seed], vec![args.input.clone(), args.retrieval.clone()], outputs)
}

fn pretrain(run: &Run, args: &PretrainArgs) -> Result<()> {
    let train = load_examples(&args.train)?;
    let mut model = match &args.resume {
        Some(path) => {
            let mut model = IrcModel::load(path)?;
            apply_training_overrides(&mut model, &args.config)?;
            model
        }
        None => {
            let (training, shape) = args.config.resolve()?;
            IrcModel::initialize(&train, training, shape)?
        }
    };
    let set = pretraining_set(&train, model.training.tfidf_ngram, model.training.seed);
    let mut log = pretrain_extractor(&mut model, &set)?;
    for part in [pretrain_answerer(&mut model, &set)?, pretrain_ranker(&mut model, &train)?] {
        log.epochs.extend(part.epochs);
    }
    log_epochs(&log);
    model.save(&args.out)?;
    let log_path = sidecar(&args.out, ".log.json");
    write_json(&log_path, &log)?;
    let mut inputs = vec![args.train.clone()];
    inputs.extend(args.resume.clone());
    run.finish(&args.out, (&model.training, &model.shape), vec![model.training.seed], inputs, vec![args.out.clone(), log_path])
}

/// Applies training-only overrides to a loaded checkpoint; the architecture
/// is fixed by the checkpoint.
fn apply_training_overrides(model: &mut IrcModel, config: &ConfigArgs) -> Result<()> {
    let merged = config.merged()?;
    let mut shape = model.shape;
    merged.apply(&mut model.training, &mut shape);
    if shape != model.shape {
        bail!("encoder shape is fixed by the checkpoint and cannot be overridden");
    }
    model.training.validate()?;
    Ok(())
}

fn train_e2e_cmd(run: &Run, args: &TrainE2eArgs) -> Result<()> {
    let train = load_examples(&args.train)?;
    let mut model = IrcModel::load(&args.checkpoint)?;
    apply_training_overrides(&mut model, &args.config)?;
    let set = pretraining_set(&train, model.training.tfidf_ngram, model.training.seed);
    let log = train_e2e(&mut model, &set)?;
    log_epochs(&log);
    model.save(&args.out)?;
    let log_path = sidecar(&args.out, ".log.json");
    write_json(&log_path, &log)?;
    run.finish(
        &args.out,
        (&model.training, &model.shape),
        vec![model.training.seed],
        vec![args.checkpoint.clone(), args.train.clone()],
        vec![args.out.clone(), log_path],
    )
}

fn infer(run: &Run, args: &InferArgs) -> Result<()> {
    let Some(checkpoint) = &args.checkpoint else {
        bail!("infer needs --checkpoint");
    };
    let model = IrcModel::load(checkpoint)?;
    let data = load_examples(&args.data)?;
    let mut options = model.inference_options(args.setting.into());
    options.alpha = args.alpha.unwrap_or(options.alpha);
    options.beta = args.beta.unwrap_or(options.beta);
    options.top_k_pairs = args.top_k.unwrap_or(options.top_k_pairs);
    options.max_rationales = args.max_rationales.unwrap_or(options.max_rationales);
    let predictions = model.predict_all(&data, &options)?;
    to_official(&data, &predictions).save(&args.out)?;
    let trace_path = sidecar(&args.out, ".trace.json");
    write_json(&trace_path, &predictions)?;
    eprintln!("wrote {} predictions to {}", predictions.len(), args.out.display());
    let config = serde_json::json!({ "alpha": options.alpha, "beta": options.beta, "top_k_pairs": options.top_k_pairs,
        "max_rationales": options.max_rationales, "setting": args.setting });
    run.finish(&args.out, config, vec![model.training.seed], vec![checkpoint.clone(), args.data.clone()], vec![args.out.clone(), trace_path])
}

fn evaluate_cmd(run: &Run, args: &EvaluateArgs) -> Result<()> {
    let gold = load_examples(&args.gold)?;
    let preds = OfficialPredictions::load(&args.pred)?;
    let report = evaluate(&gold, &preds)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if args.tables {
        eprint!("{}", format_report(&report));
    }
    let mut outputs = vec![];
    let anchor = match &args.out {
        Some(out) => {
            write_json(out, &report)?;
            outputs.push(out.clone());
            out.clone()
        }
        None => sidecar(&args.pred, ".evaluate"),
    };
    run.finish(&anchor, serde_json::json!({}), vec![], vec![args.pred.clone(), args.gold.clone()], outputs)
}

#[derive(Serialize)]
struct SweepPoint {
    value: f64,
    report: MetricReport,
}

#[derive(Serialize)]
struct SweepResult {
    param: SweepParam,
    points: Vec<SweepPoint>,
    best_value: f64,
    best_answer_f1: f64,
}

fn sweep(run: &Run, args: &SweepArgs) -> Result<()> {
    let model = IrcModel::load(&args.checkpoint)?;
    let data = load_examples(&args.data)?;
    let setting: Setting = args.setting.into();
    let base_options = model.inference_options(setting);
    // The gate reads stored candidate scores, so a beta sweep reuses one inference pass.
    let base = if args.param == SweepParam::Beta { Some(model.predict_all(&data, &base_options)?) } else { None };
    let mut points = Vec::new();
    for &value in &args.range.0 {
        let predictions = match &base {
            Some(base) => base.iter().map(|p| p.regate(value, setting)).collect::<irc_core::error::Result<Vec<_>>>()?,
            None => model.predict_all(&data, &irc_core::inference::InferenceOptions { alpha: value, ..base_options })?,
        };
        let report = evaluate(&data, &to_official(&data, &predictions))?;
        eprintln!("{:?} = {value}: answer F1 {:.2}", args.param, report.answer_f1);
        points.push(SweepPoint { value, report });
    }
    // Earliest value wins ties.
    let best = points
        .iter()
        .fold(None::<&SweepPoint>, |b, p| match b {
            Some(b) if b.report.answer_f1 >= p.report.answer_f1 => Some(b),
            _ => Some(p),
        })
        .context("empty sweep range")?;
    let result = SweepResult { param: args.param, best_value: best.value, best_answer_f1: best.report.answer_f1, points: vec![] };
    println!("best {:?} = {} (answer F1 {:.2})", args.param, result.best_value, result.best_answer_f1);
    let result = SweepResult { points, ..result };
    write_json(&args.out, &result)?;
    let config = serde_json::json!({ "param": args.param, "range": args.range.0, "setting": args.setting });
    run.finish(&args.out, config, vec![model.training.seed], vec![args.checkpoint.clone(), args.data.clone()], vec![args.out.clone()])
}

fn dispatch(cli: Cli) -> Result<()> {
    let name = match &cli.command {
        Command::GenSynthetic(_) => "gen-synthetic",
        Command::BuildDataset(_) => "build-dataset",
        Command::Pretrain(_) => "pretrain",
        Command::TrainE2e(_) => "train-e2e",
        Command::Infer(_) => "infer",
        Command::Evaluate(_) => "evaluate",
        Command::Sweep(_) => "sweep",
    };
    let run = Run { command: name, started: Instant::now() };
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(&run, a),
        Command::BuildDataset(a) => build_dataset(&run, a),
        Command::Pretrain(a) => pretrain(&run, a),
        Command::TrainE2e(a) => train_e2e_cmd(&run, a),
        Command::Infer(a) => infer(&run, a),
        Command::Evaluate(a) => evaluate_cmd(&run, a),
        Command::Sweep(a) => sweep(&run, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
