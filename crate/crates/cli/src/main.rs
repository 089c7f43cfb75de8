use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use narreval_core::assumptions::{load_pairs, score_pairs};
use narreval_core::explanation::{ground_truth, truncate, ShapTable, DEFAULT_TRUNCATION};
use narreval_core::extraction::ExtractionRecord;
use narreval_core::faithfulness::{classify, confusion_tally, ClassifierVerdict, Label};
use narreval_core::gateway::Gateway;
use narreval_core::pipeline::{
    extract_narrative, generate_narrative, human_narrative, Condition, GenerationRequest, NarrativeRecord, Source,
};
use narreval_core::prompt::{GenerationSpec, PromptStyle};
use narreval_core::report::{self, Format};
use narreval_core::runner::store::{read_json_file, StoredNarrative, AGGREGATES};
use narreval_core::runner::{self, aggregate, CellId, ExperimentConfig, RunStore, DESCRIPTION_FILE};
use narreval_core::similarity::cosine;
use narreval_core::Error;

#[derive(Parser)]
#[command(
    name = "narreval",
    version,
    about = "Evaluate model-written narratives of SHAP explanations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one narrative for one instance file.
    Generate(GenerateArgs),
    /// Extract rank, sign, value and assumption per feature from one narrative.
    Extract(ExtractArgs),
    /// Extract and score one narrative; prints a metrics record.
    Score(ScoreArgs),
    /// Print the manipulated or permuted table for one instance file.
    Manipulate(ManipulateArgs),
    /// Run the full experiment matrix and write reports.
    Experiment(ExperimentArgs),
    /// Aggregate a run into `<run>/aggregates/aggregates.json`.
    Aggregate(RunArgs),
    /// Render Markdown, CSV and JSON reports for a run.
    Report(ReportArgs),
    /// Classify a faulty and a faithful narrative pool; prints a confusion table.
    ValidateExtraction(ValidateArgs),
    /// ΔPPL for a file of (original, manipulated) assumption pairs.
    PplPairs(PplPairsArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (.toml or .json).
    #[arg(long)]
    config: PathBuf,
    /// Response cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Template directory holding long.txt, short.txt and extraction.txt.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Instance JSON file.
    #[arg(long)]
    instance: PathBuf,
    /// Model label; defaults to the first configured model.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value = "long")]
    style: PromptStyle,
    #[arg(long, default_value = "standard")]
    condition: Condition,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    repeat: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Narrative text file.
    #[arg(long)]
    narrative: PathBuf,
    /// Instance JSON file the narrative describes.
    #[arg(long)]
    instance: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    narrative: PathBuf,
    #[arg(long)]
    instance: PathBuf,
    /// Table to score against: original, manipulated or permuted.
    #[arg(long, default_value = "original", value_parser = parse_reference)]
    reference: Condition,
    /// Human narrative for cos(θ); needs an embedding model in the config.
    #[arg(long)]
    human: Option<PathBuf>,
    /// Mark the narrative as human-written.
    #[arg(long)]
    human_source: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ManipulateArgs {
    #[arg(long)]
    instance: PathBuf,
    /// manipulated or permuted.
    #[arg(long, default_value = "manipulated")]
    condition: Condition,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
    n: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Only these model labels.
    #[arg(long = "model")]
    models: Vec<String>,
    #[arg(long = "style")]
    styles: Vec<PromptStyle>,
    #[arg(long = "condition")]
    conditions: Vec<Condition>,
    #[arg(long = "dataset")]
    datasets: Vec<String>,
    /// Only these instance ids.
    #[arg(long = "instance")]
    instances: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
    /// Directory holding run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "md,csv,json")]
    formats: Vec<Format>,
    #[arg(long)]
    allow_partial: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    allow_partial: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory; defaults to `<run>/aggregates`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "md,csv,json")]
    formats: Vec<Format>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Narratives written from permuted tables: `<dataset>/<instance>.txt` files or stored narrative JSON.
    #[arg(long)]
    faulty_pool: PathBuf,
    /// Faithful narratives, in the same layouts.
    #[arg(long)]
    faithful_pool: PathBuf,
    /// Print JSON instead of a Markdown table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PplPairsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// JSON array of {feature, original, manipulated}.
    #[arg(long)]
    pairs: PathBuf,
    /// CSV output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_reference(s: &str) -> Result<Condition, String> {
    match s {
        "original" => Ok(Condition::Standard),
        other => other.parse().map_err(|e: Error| e.to_string()),
    }
}

struct Loaded {
    config: ExperimentConfig,
    gateway: Gateway,
}

fn load(args: &ConfigArgs, tweak: impl FnOnce(&mut ExperimentConfig) -> anyhow::Result<()>) -> anyhow::Result<Loaded> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(t) = &args.templates {
        config.templates_dir = Some(t.clone());
    }
    tweak(&mut config)?;
    config.validate()?;
    eprintln!("effective config: {}", serde_json::to_string(&config)?);
    let gateway = Gateway::from_config(&config.providers, args.cache_dir.clone())?;
    Ok(Loaded { config, gateway })
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::store(path, e))?;
    Ok(text.trim().to_string())
}

fn description_for(instance: &Path) -> String {
    instance
        .parent()
        .and_then(|d| std::fs::read_to_string(d.join(DESCRIPTION_FILE)).ok())
        .map(|t| t.trim().to_string())
        .unwrap_or_default()
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let Loaded { config, gateway } = load(&args.cfg, |c| {
        if let Some(s) = args.seed {
            c.seed = s;
        }
        Ok(())
    })?;
    let model = match &args.model {
        Some(label) => config.models.iter().find(|m| &m.label == label),
        None => config.models.first(),
    }
    .ok_or_else(|| {
        Error::Config(format!(
            "model `{}` is not configured",
            args.model.clone().unwrap_or_default()
        ))
    })?;
    let table = ShapTable::load(&args.instance)?;
    let (given, _) = runner::condition_table(&truncate(&table, config.n)?, args.condition, config.seed)?;
    let spec = GenerationSpec::new(args.style, given.n());
    let target = model.target();
    let description = description_for(&args.instance);
    let req = GenerationRequest {
        table: &given,
        spec: &spec,
        dataset_description: &description,
        target: &target,
        temperature: config.temperature,
        condition: args.condition,
        run_index: args.repeat,
    };
    let narrative = generate_narrative(&gateway, &config.templates()?, &req)?;
    print_json(&narrative)
}

fn extract(args: ExtractArgs) -> anyhow::Result<()> {
    let Loaded { config, gateway } = load(&args.cfg, |_| Ok(()))?;
    let table = ShapTable::load(&args.instance)?;
    let narrative = human_narrative(&table.dataset_id, &table.instance_id, &read_text(&args.narrative)?);
    let (extraction, repairs) = extract_narrative(
        &gateway,
        &config.templates()?,
        &narrative,
        &table.feature_set(),
        config.n,
        &config.extraction,
        config.max_repairs,
    )?;
    print_json(&json!({ "extraction": extraction, "repair_attempts": repairs }))
}

fn score(args: ScoreArgs) -> anyhow::Result<()> {
    let Loaded { config, gateway } = load(&args.cfg, |c| {
        if let Some(s) = args.seed {
            c.seed = s;
        }
        Ok(())
    })?;
    let table = ShapTable::load(&args.instance)?;
    let (reference, _) = runner::condition_table(&truncate(&table, config.n)?, args.reference, config.seed)?;
    let mut narrative = human_narrative(&table.dataset_id, &table.instance_id, &read_text(&args.narrative)?);
    if !args.human_source {
        narrative.source = Source::Llm;
    }
    let cell = CellId {
        model: args
            .narrative
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("narrative")
            .to_string(),
        style: None,
        condition: args.reference,
        repeat: 0,
        dataset: table.dataset_id.clone(),
        instance: table.instance_id.clone(),
    };
    let templates = config.templates()?;
    let mut scored = runner::score_narrative(
        &config,
        &gateway,
        &templates,
        &cell,
        &narrative,
        &reference,
        &reference,
        &table.feature_set(),
    )?;
    if let Some(h) = &args.human {
        let Some(target) = &config.embedding else {
            return Err(Error::Config("--human needs an `embedding` model in the config".into()).into());
        };
        let a = gateway.embed(&narrative.text, &target.provider, &target.model)?;
        let b = gateway.embed(&read_text(h)?, &target.provider, &target.model)?;
        scored.metrics.cos = Some(cosine(&a.values, &b.values)?);
    }
    print_json(&scored.metrics)
}

fn manipulate(args: ManipulateArgs) -> anyhow::Result<()> {
    if args.condition == Condition::Standard {
        bail!(Error::Config("--condition must be manipulated or permuted".into()));
    }
    let table = ShapTable::load(&args.instance)?;
    let (given, provenance) = runner::condition_table(&truncate(&table, args.n)?, args.condition, args.seed)?;
    print_json(&json!({ "table": given, "provenance": provenance }))
}

fn emit_reports(store: &RunStore, out: &Path, formats: &[Format], allow_partial: bool) -> anyhow::Result<()> {
    let config = store.snapshot()?.config;
    let agg = aggregate(store, Some(allow_partial))?;
    for path in report::emit(&agg, &config, out, formats)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn experiment(args: ExperimentArgs) -> anyhow::Result<()> {
    let Loaded { config, gateway } = load(&args.cfg, |c| {
        if !args.models.is_empty() {
            for label in &args.models {
                if !c.models.iter().any(|m| &m.label == label) {
                    bail!(Error::Config(format!("model `{label}` is not configured")));
                }
            }
            c.models.retain(|m| args.models.contains(&m.label));
        }
        if !args.styles.is_empty() {
            c.styles = args.styles.clone();
        }
        if !args.conditions.is_empty() {
            c.conditions = args.conditions.clone();
        }
        if !args.datasets.is_empty() {
            c.datasets = args.datasets.clone();
        }
        if !args.instances.is_empty() {
            c.instances = args.instances.clone();
        }
        if let Some(s) = args.seed {
            c.seed = s;
        }
        if let Some(r) = &args.run_id {
            c.run_id = r.clone();
        }
        c.allow_partial |= args.allow_partial;
        Ok(())
    })?;
    let (store, summary) = runner::run(&config, &gateway, &args.out)?;
    eprintln!(
        "{}: {} cells, {} executed, {} resumed, {} failed",
        store.root().display(),
        summary.cells,
        summary.executed,
        summary.resumed,
        summary.failed
    );
    emit_reports(
        &store,
        &store.root().join(AGGREGATES),
        &args.formats,
        config.allow_partial,
    )
}

fn aggregate_cmd(args: RunArgs) -> anyhow::Result<()> {
    let store = RunStore::open(&args.run)?;
    emit_reports(
        &store,
        &store.root().join(AGGREGATES),
        &[Format::Json],
        args.allow_partial,
    )
}

fn report_cmd(args: ReportArgs) -> anyhow::Result<()> {
    let store = RunStore::open(&args.run.run)?;
    let out = args.out.unwrap_or_else(|| store.root().join(AGGREGATES));
    emit_reports(&store, &out, &args.formats, args.run.allow_partial)
}

/// `(dataset, instance, text)` for every narrative under `dir`.
fn read_pool(dir: &Path) -> anyhow::Result<Vec<(String, String, String)>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::store(dir, e))? {
            let path = entry.map_err(|e| Error::store(dir, e))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for path in files {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") => {
                let dataset = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .and_then(|n| n.to_str())
                    .context("pool text files live under a dataset directory")?;
                let instance = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                out.push((dataset.to_string(), instance.to_string(), read_text(&path)?));
            }
            Some("json") => {
                let stored: StoredNarrative = read_json_file(&path)?;
                let n: NarrativeRecord = stored.narrative;
                out.push((n.dataset_id, n.instance_id, n.text));
            }
            _ => {}
        }
    }
    if out.is_empty() {
        bail!(Error::Input(format!("no narratives under {}", dir.display())));
    }
    Ok(out)
}

fn validate_extraction(args: ValidateArgs) -> anyhow::Result<()> {
    let Loaded { config, gateway } = load(&args.cfg, |_| Ok(()))?;
    let templates = config.templates()?;
    let mut verdicts: Vec<(ClassifierVerdict, Label)> = Vec::new();
    for (dir, label) in [
        (&args.faulty_pool, Label::Faulty),
        (&args.faithful_pool, Label::Faithful),
    ] {
        for (dataset, instance, text) in read_pool(dir)? {
            let table = ShapTable::load(&config.instances_dir.join(&dataset).join(format!("{instance}.json")))?;
            let original = truncate(&table, config.n)?;
            let narrative = human_narrative(&dataset, &instance, &text);
            let (extraction, _): (ExtractionRecord, usize) = extract_narrative(
                &gateway,
                &templates,
                &narrative,
                &table.feature_set(),
                config.n,
                &config.extraction,
                config.max_repairs,
            )?;
            verdicts.push((classify(&extraction, &ground_truth(&original)?), label));
        }
    }
    let confusion = confusion_tally(verdicts.iter().map(|(v, l)| (v, *l)));
    if args.json {
        return print_json(&confusion);
    }
    let [tn, fp, fn_, tp] = confusion.cells();
    println!("| True Neg. | False Pos. | False Neg. | True Pos. |");
    println!("|---|---|---|---|");
    println!("| {tn} | {fp} | {fn_} | {tp} |");
    Ok(())
}

fn ppl_pairs(args: PplPairsArgs) -> anyhow::Result<()> {
    let Loaded { config, gateway } = load(&args.cfg, |_| Ok(()))?;
    let pairs = load_pairs(&read_text(&args.pairs)?)?;
    let deltas = score_pairs(&pairs, &config.perplexity, &gateway)?;
    let bytes = report::pair_deltas_csv(&deltas)?;
    match &args.out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| Error::store(path, e))?,
        None => print!("{}", String::from_utf8(bytes)?),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_provider() => 2,
        Some(Error::Store { .. }) => 3,
        Some(Error::IncompleteSlice { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Extract(a) => extract(a),
        Command::Score(a) => score(a),
        Command::Manipulate(a) => manipulate(a),
        Command::Experiment(a) => experiment(a),
        Command::Aggregate(a) => aggregate_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::ValidateExtraction(a) => validate_extraction(a),
        Command::PplPairs(a) => ppl_pairs(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
