//! Operator entry point: run the generation pipeline, annotate norms, build
//! interventions, analyze a run, judge it, export the dataset, or validate a
//! config file.
//!
//! Exit codes: 0 success, 1 stage/runtime failure, 2 usage or config error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use normforge::gateway::{Backend, Gateway, HttpBackend, MockScript, ScriptedBackend};
use normforge::judge::{self, ComparisonReport, JudgeSettings, VerdictRecord, VerdictTarget};
use normforge::metrics::{self, Corpus, StatsReport};
use normforge::pipeline::{
    export_dataset, CheckpointWriter, Pipeline, PipelineConfig, PipelineError, RunData, Stage,
    StagePlan, MANIFEST_FILE, SCHEMA_VERSION, VERDICTS_FILE,
};

#[derive(Parser)]
#[command(name = "normforge", version, about = "Controlled conflict-dialogue generation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mock script file; replaces the live backend with the scripted one.
    #[arg(long)]
    mock: Option<PathBuf>,
    /// Run seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Run/output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disable Markdown tolerance in the parsers.
    #[arg(long)]
    strict_parse: bool,
    /// Load prompt templates from this directory instead of the embedded set.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated subset of characters,situations,conversations,norms.
    #[arg(long)]
    stages: Option<String>,
    /// Deduplicate situations across all relationships instead of within each.
    #[arg(long)]
    global_dedup: bool,
}

#[derive(Args)]
struct RunDirArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run directory (alias for --out).
    #[arg(long)]
    run: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directory to analyze.
    #[arg(long)]
    run: PathBuf,
    /// Directories of external plain-text corpora (one conversation per
    /// file) to include in the diversity comparison.
    #[arg(long)]
    external: Vec<PathBuf>,
    /// How many mined topic n-grams to show.
    #[arg(long, default_value_t = 15)]
    top_topics: usize,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory to export from.
    #[arg(long)]
    run: PathBuf,
    /// Output file (defaults to <run>/export.jsonl).
    #[arg(long)]
    to: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateConfigArgs {
    /// JSON config file to check.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the generation pipeline with checkpointing and resume.
    Generate(GenerateArgs),
    /// Discover norm violations for accepted conversations in a run.
    Norms(RunDirArgs),
    /// Build intervened conversations for annotated runs.
    Intervene(RunDirArgs),
    /// Print dataset statistics, diversity metrics, and norm profiles.
    Analyze(AnalyzeArgs),
    /// Score a run with a model judge and aggregate the comparison report.
    Judge(RunDirArgs),
    /// Export the final dataset (accepted conversations only).
    Export(ExportArgs),
    /// Check a config file and report every problem found.
    ValidateConfig(ValidateConfigArgs),
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("normforge=info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    match runtime.block_on(dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Failure(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

enum CliError {
    /// Bad flags or config: exit 2.
    Usage(String),
    /// Stage or runtime failure: exit 1.
    Failure(String),
}

impl From<PipelineError> for CliError {
    fn from(err: PipelineError) -> Self {
        match err {
            PipelineError::Config(m) => CliError::Usage(m),
            PipelineError::Template(e) => CliError::Usage(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Failure(err.to_string())
    }
}

async fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(args) => {
            let plan = match &args.stages {
                Some(list) => {
                    let stages = Stage::parse_list(list).map_err(CliError::Usage)?;
                    StagePlan::from_stages(&stages)
                }
                None => StagePlan::from_stages(&Stage::ALL),
            };
            run_pipeline(&args.common, plan).await
        }
        Command::Norms(args) => {
            let common = with_run_dir(args);
            run_pipeline(&common, StagePlan { discover_norms: true, ..StagePlan::none() }).await
        }
        Command::Intervene(args) => {
            let common = with_run_dir(args);
            run_pipeline(&common, StagePlan { intervene: true, ..StagePlan::none() }).await
        }
        Command::Analyze(args) => analyze(&args),
        Command::Judge(args) => {
            let common = with_run_dir(args);
            judge_run(&common).await
        }
        Command::Export(args) => {
            let out = args.to.unwrap_or_else(|| args.run.join("export.jsonl"));
            if out.exists() {
                std::fs::remove_file(&out)?;
            }
            let count = export_dataset(&args.run, &out)?;
            println!("exported {count} accepted conversations to {}", out.display());
            Ok(())
        }
        Command::ValidateConfig(args) => {
            let config = PipelineConfig::load(&args.config).map_err(CliError::Usage)?;
            let problems = config.validate();
            if problems.is_empty() {
                println!("config ok");
                Ok(())
            } else {
                for problem in &problems {
                    eprintln!("config: {problem}");
                }
                Err(CliError::Usage(format!("{} problem(s) found", problems.len())))
            }
        }
    }
}

fn with_run_dir(args: RunDirArgs) -> CommonArgs {
    let mut common = args.common;
    if common.out.is_none() {
        common.out = args.run;
    }
    common
}

fn load_config(common: &CommonArgs) -> Result<PipelineConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path).map_err(CliError::Usage)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if common.strict_parse {
        config.strict_parse = true;
    }
    if let Some(dir) = &common.templates {
        config.templates_dir = Some(dir.clone());
    }
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(CliError::Usage(problems.join("; ")));
    }
    Ok(config)
}

fn build_gateway(
    config: &PipelineConfig,
    mock: &Option<PathBuf>,
) -> Result<Arc<Gateway>, CliError> {
    let backend: Arc<dyn Backend> = match mock {
        Some(path) => {
            let script = MockScript::load(path).map_err(CliError::Usage)?;
            Arc::new(ScriptedBackend::new(script))
        }
        None => Arc::new(HttpBackend::from_config(&config.backend).map_err(|e| CliError::Usage(e.to_string()))?),
    };
    Ok(Arc::new(Gateway::new(backend, config.backend.clone())))
}

async fn run_pipeline(common: &CommonArgs, plan: StagePlan) -> Result<(), CliError> {
    let config = load_config(common)?;
    let gateway = build_gateway(&config, &common.mock)?;
    let pipeline = Pipeline::new(config, gateway.clone())?;
    let manifest = pipeline.run_plan(&plan).await?;
    let stats = gateway.stats();
    println!(
        "run complete: {} pairs, {} situations kept ({} dropped), {} conversations accepted \
         ({} rejected, {} failed), {} violations, {} interventions ({} failed)",
        manifest.counts.pairs,
        manifest.counts.situations_kept,
        manifest.counts.situations_dropped_duplicate + manifest.counts.situations_dropped_topic,
        manifest.counts.conversations_accepted,
        manifest.counts.conversations_rejected,
        manifest.counts.conversations_failed,
        manifest.counts.violations,
        manifest.counts.interventions,
        manifest.counts.interventions_failed,
    );
    println!(
        "backend: {} requests, {} retries, {} failures; manifest at {}",
        stats.requests,
        stats.retries,
        stats.failures,
        pipeline.config().output_dir.join(MANIFEST_FILE).display(),
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct DiversityRow {
    name: String,
    distinct_2: f64,
    distinct_3: f64,
    distinct_4: f64,
    entropy_geomean: Option<f64>,
}

fn diversity_row(name: &str, corpus: &Corpus) -> DiversityRow {
    DiversityRow {
        name: name.to_string(),
        distinct_2: metrics::distinct_n(corpus, 2),
        distinct_3: metrics::distinct_n(corpus, 3),
        distinct_4: metrics::distinct_n(corpus, 4),
        entropy_geomean: metrics::entropy_geomean(corpus).ok(),
    }
}

#[derive(serde::Serialize)]
struct AnalysisReport {
    stats: StatsReport,
    diversity: Vec<DiversityRow>,
    norm_profile: BTreeMap<String, Vec<(String, usize)>>,
    top_topics: Vec<(String, usize)>,
}

fn analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let data = RunData::load(&args.run)?;
    let accepted: Vec<_> = data.accepted_conversations().into_iter().cloned().collect();
    if accepted.is_empty() {
        return Err(CliError::Failure(format!(
            "no accepted conversations under {}",
            args.run.display()
        )));
    }

    let mut violations_by_conv: BTreeMap<String, usize> = BTreeMap::new();
    for norm in data.ok_norms() {
        violations_by_conv.insert(norm.conv_id.clone(), norm.violations.len());
    }
    let stats = metrics::dataset_stats(&accepted, &violations_by_conv)
        .map_err(|e| CliError::Failure(e.to_string()))?;

    let corpus = Corpus::from_conversations(accepted.iter());
    let mut diversity = vec![diversity_row("this run", &corpus)];
    for dir in &args.external {
        let external = Corpus::load_dir(dir)?;
        diversity.push(diversity_row(&dir.display().to_string(), &external));
    }

    let mut norm_records = Vec::new();
    for norm in data.ok_norms() {
        let Some(conversation) = accepted.iter().find(|c| c.conv_id == norm.conv_id) else {
            continue;
        };
        let Some(pair) = data.pair_by_id(&conversation.pair_id) else { continue };
        for violation in &norm.violations {
            norm_records.push((pair.relationship.clone(), violation.norm.clone()));
        }
    }
    let norm_profile = metrics::norm_relationship_profile(
        norm_records.iter().map(|(r, n)| (r.as_str(), n.as_str())),
    );

    let situation_texts: Vec<String> =
        data.situations.iter().map(|r| r.situation.normalized_text.clone()).collect();
    let top_topics = if situation_texts.is_empty() {
        Vec::new()
    } else {
        normforge::dedup::frequent_topic_ngrams(&situation_texts, &[1, 2, 3], args.top_topics.max(1))
    };

    println!("Dataset statistics");
    println!("  Dialogues                          {}", stats.dialogues);
    println!("  Utterances                         {}", stats.utterances);
    println!("  Uttr. per Dialogue (Avg)           {:.1}", stats.avg_uttr_per_dialogue);
    println!("  Token per Dialogue (Avg)           {:.1}", stats.avg_tokens_per_dialogue);
    println!("  Norm Violation per Dialogue (Avg)  {:.1}", stats.avg_violations_per_dialogue);
    println!("  Token per Utterance (Avg)          {:.1}", stats.avg_tokens_per_utterance);
    println!();
    println!("Diversity                       DD-2   DD-3   DD-4   ENTR");
    for row in &diversity {
        println!(
            "  {:<28} {:>5.2}  {:>5.2}  {:>5.2}  {}",
            row.name,
            row.distinct_2,
            row.distinct_3,
            row.distinct_4,
            row.entropy_geomean.map_or("n/a".to_string(), |e| format!("{e:.2}")),
        );
    }
    if norm_profile.values().any(|grams| !grams.is_empty()) {
        println!();
        println!("Norm tri-grams per relationship (count > 5)");
        for (relationship, grams) in &norm_profile {
            if grams.is_empty() {
                continue;
            }
            let rendered: Vec<String> =
                grams.iter().map(|(g, c)| format!("{g} ({c})")).collect();
            println!("  {relationship}: {}", rendered.join(", "));
        }
    }
    if !top_topics.is_empty() {
        println!();
        println!("Top situation topics");
        for (gram, count) in &top_topics {
            println!("  {count:>4}  {gram}");
        }
    }

    let report = AnalysisReport { stats, diversity, norm_profile, top_topics };
    let path = args.run.join("analysis.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    println!();
    println!("report written to {}", path.display());
    Ok(())
}

async fn judge_run(common: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(common)?;
    let run_dir = config.output_dir.clone();
    let gateway = build_gateway(&config, &common.mock)?;
    let pipeline = Pipeline::new(config.clone(), gateway.clone())?;
    let templates = pipeline.templates();
    let settings = JudgeSettings {
        chat_model: config.backend.chat_model.clone(),
        temperature: config.stage_temperatures.judge,
        max_parse_retries: config.max_parse_retries,
    };

    let data = RunData::load(&run_dir)?;
    let accepted = data.accepted_conversations();
    if accepted.is_empty() {
        return Err(CliError::Failure(format!("no accepted conversations under {}", run_dir.display())));
    }

    let mut records: Vec<VerdictRecord> = Vec::new();
    let mut failed = 0usize;
    for conversation in &accepted {
        let relationship = data.pair_by_id(&conversation.pair_id).map(|p| p.relationship.clone());
        match judge::judge_naturalness(&gateway, templates, &settings, conversation, relationship.as_deref())
            .await
        {
            Ok(verdict) => records.push(VerdictRecord {
                schema_version: SCHEMA_VERSION,
                target: VerdictTarget::Original,
                verdict,
            }),
            Err(e) => {
                failed += 1;
                tracing::error!(conv = %conversation.conv_id, %e, "naturalness verdict failed");
            }
        }
        match judge::judge_escalation(&gateway, templates, &settings, conversation).await {
            Ok(verdict) => records.push(VerdictRecord {
                schema_version: SCHEMA_VERSION,
                target: VerdictTarget::Original,
                verdict,
            }),
            Err(e) => {
                failed += 1;
                tracing::error!(conv = %conversation.conv_id, %e, "escalation verdict failed");
            }
        }
    }
    for outcome in data.ok_interventions() {
        let Some(record) = outcome.as_record() else { continue };
        let Some(original) = accepted.iter().find(|c| c.conv_id == record.original_conv_id) else {
            continue;
        };
        match judge::judge_escalation(&gateway, templates, &settings, &record.intervened).await {
            Ok(verdict) => records.push(VerdictRecord {
                schema_version: SCHEMA_VERSION,
                target: VerdictTarget::Intervened,
                verdict,
            }),
            Err(e) => {
                failed += 1;
                tracing::error!(conv = %record.original_conv_id, %e, "intervened escalation failed");
            }
        }
        match judge::judge_intervention_quality(&gateway, templates, &settings, original, &record.intervened)
            .await
        {
            Ok(verdict) => records.push(VerdictRecord {
                schema_version: SCHEMA_VERSION,
                target: VerdictTarget::Both,
                verdict,
            }),
            Err(e) => {
                failed += 1;
                tracing::error!(conv = %record.original_conv_id, %e, "intervention quality failed");
            }
        }
    }

    let verdicts_path = run_dir.join(VERDICTS_FILE);
    if verdicts_path.exists() {
        std::fs::remove_file(&verdicts_path)?;
    }
    let mut writer = CheckpointWriter::open(&verdicts_path)?;
    for record in &records {
        writer.append(record)?;
    }

    print_judge_report(&run_dir, &records, failed)
}

fn print_judge_report(run_dir: &Path, records: &[VerdictRecord], failed: usize) -> Result<(), CliError> {
    let report: ComparisonReport = match judge::comparison_report(records) {
        Ok(report) => report,
        Err(e) => {
            // Still useful without interventions: print what exists.
            let naturalness: Vec<u8> = records
                .iter()
                .filter(|r| r.verdict.kind == judge::VerdictKind::Naturalness)
                .map(|r| r.verdict.rating)
                .collect();
            if !naturalness.is_empty() {
                let mean = naturalness.iter().map(|&v| v as f64).sum::<f64>() / naturalness.len() as f64;
                println!("Naturalness (mean of {}): {mean:.2}", naturalness.len());
            }
            return Err(CliError::Failure(e.to_string()));
        }
    };
    println!("Judge report ({} verdicts, {failed} failed)", records.len());
    if let Some(naturalness) = report.naturalness_mean {
        println!("  Naturalness (mean of {:>3})              {naturalness:.2}", report.naturalness_count);
    }
    println!(
        "  Escalation, original (mean of {:>3})     {:.2}",
        report.original_escalation_count, report.original_escalation_mean
    );
    println!(
        "  Escalation, intervened (mean of {:>3})   {:.2}",
        report.intervened_escalation_count, report.intervened_escalation_mean
    );
    println!(
        "  Information preservation (mean of {:>3}) {:.2}",
        report.information_preservation_count, report.information_preservation_mean
    );
    let path = run_dir.join("judge_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    println!("report written to {}", path.display());
    Ok(())
}
