use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crashlens::analytics::{
    case_factors, cooccurrence, heatmap_html, rule_based_factors, sankey_html, sankey_json, summarize_factors,
    CategoryLexicon, CooccurrenceGraph, FactorPrompt, FactorSummary, GroupingRules, HeatmapConfig,
};
use crashlens::attribution::{attribute_narrative, AttributionConfig, AttributionReport, DisplayConfig, Method, NormalizationConfig};
use crashlens::augment::{augment_batch, AugmentationConfig};
use crashlens::chat::{ChatClient, RefModelClient, RetryPolicy, StubClient};
use crashlens::config::PipelineConfig;
use crashlens::corpus::CorpusCsv;
use crashlens::evalharness::{
    build_sft_dataset, compute_metrics, format_metrics_row, run_eval, sft_record_problems, EvalCase, Exemplars,
    PromptStrategy, StrategyKind, SYSTEM_PROMPT,
};
use crashlens::io::{read_jsonl_file, to_jsonl, write_atomic};
use crashlens::narrator::{default_templates, load_templates, narrate, Lexicon, NarrativePair};
use crashlens::refmodel::{classify, fit_reference, TinyLM, Tokenizer};
use crashlens::schema::{integrate, load_tables, serialize_cases, deserialize_cases, stratified_downsample, LoadOptions, TablePaths};

#[derive(Debug, Parser)]
#[command(name = "crashlens", version, about = "Crash narratives, severity attribution and factor analytics")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Never contact a chat endpoint; use stub or reference-model clients.
    #[arg(long, global = true)]
    offline: bool,
    /// Pipeline configuration (TOML). Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-case stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the four CSV tables and write integrated cases as JSONL.
    Ingest {
        /// Directory with crash.csv, segment.csv, vehicle.csv, person.csv (bundled corpus if omitted).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Majority:minority ratio for downsampling.
        #[arg(long)]
        target_ratio: Option<f64>,
        /// Where to write rejected rows, orphans and warnings.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render descriptive and outcome narratives for every case.
    Narrate {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite descriptive narratives with a chat model and verify them.
    Augment {
        #[arg(long)]
        narratives: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Narratives file with accepted rewrites substituted.
        #[arg(long)]
        narratives_out: Option<PathBuf>,
        /// JSON object mapping case numbers to canned completions (offline).
        #[arg(long)]
        stub_completions: Option<PathBuf>,
    },
    /// Train the reference next-token model on descriptive narratives.
    TrainRef {
        #[arg(long)]
        narratives: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Token attribution for each narrative's predicted label.
    Attribute {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        narratives: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to these case numbers.
        #[arg(long = "case")]
        cases: Vec<String>,
    },
    /// Factor summaries, top factors, grouping and co-occurrence.
    Analyze {
        #[arg(long)]
        attributions: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Write visual exports.
    Export {
        #[command(subcommand)]
        target: ExportTarget,
    },
    /// Run a prompting baseline and score it.
    Eval {
        #[arg(long)]
        strategy: StrategyKind,
        #[arg(long)]
        narratives: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Reference model answering offline prompts.
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long)]
        stub_completions: Option<PathBuf>,
        /// JSON {"minor": ..., "severe": ...} for few-shot prompts.
        #[arg(long)]
        exemplars: Option<PathBuf>,
    },
    /// Build the loss-masked fine-tuning dataset.
    BuildSft {
        #[arg(long)]
        narratives: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum ExportTarget {
    Sankey {
        /// cooccurrence.json from `analyze`.
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "Cross-aspect factor co-occurrence")]
        title: String,
    },
    Heatmap {
        #[arg(long)]
        attributions: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long = "case")]
        cases: Vec<String>,
        #[arg(long)]
        threshold_hi: Option<f64>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] crashlens::config::ConfigError),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Schema(#[from] crashlens::schema::SchemaError),
    #[error(transparent)]
    Narrate(#[from] crashlens::narrator::NarrateError),
    #[error(transparent)]
    Augment(#[from] crashlens::augment::AugmentError),
    #[error(transparent)]
    Model(#[from] crashlens::refmodel::ModelError),
    #[error(transparent)]
    Chat(#[from] crashlens::chat::ChatError),
    #[error(transparent)]
    Eval(#[from] crashlens::evalharness::EvalError),
    #[error(transparent)]
    Analytics(#[from] crashlens::analytics::AnalyticsError),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input { .. } => "input",
            CliError::Write { .. } => "io",
            CliError::Usage(_) => "usage",
            CliError::Schema(_) => "schema",
            CliError::Narrate(_) => "narrate",
            CliError::Augment(_) => "augment",
            CliError::Model(_) => "model",
            CliError::Chat(_) => "chat",
            CliError::Eval(_) => "eval",
            CliError::Analytics(_) => "analytics",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl_file(path).map_err(|e| CliError::Input {
        path: path.into(),
        message: e.to_string(),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input {
        path: path.into(),
        message: e.to_string(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Input {
        path: path.into(),
        message: e.to_string(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).map_err(|source| CliError::Write {
        path: path.into(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable value");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializable value"));
}

struct Ctx {
    cfg: PipelineConfig,
}

impl Ctx {
    fn lexicon(&self) -> Result<Lexicon> {
        Ok(match &self.cfg.lexicon {
            Some(p) => Lexicon::load(p)?,
            None => Lexicon::default(),
        })
    }

    fn categories(&self) -> Result<CategoryLexicon> {
        match &self.cfg.categories {
            Some(p) => Ok(CategoryLexicon::from_toml(&read_text(p)?)?),
            None => Ok(CategoryLexicon::default()),
        }
    }

    fn grouping(&self) -> Result<GroupingRules> {
        match &self.cfg.grouping {
            Some(p) => Ok(GroupingRules::from_toml(&read_text(p)?)?),
            None => Ok(GroupingRules::default()),
        }
    }

    fn attribution(&self) -> AttributionConfig {
        AttributionConfig {
            normalization: NormalizationConfig {
                scale: self.cfg.scale,
                threshold: self.cfg.b,
            },
            display: DisplayConfig {
                scale: self.cfg.display_scale,
            },
            ..AttributionConfig::default()
        }
    }

    /// Stub (offline) or HTTP client.
    fn chat_client(&self, stub_completions: Option<&Path>) -> Result<Box<dyn ChatClient>> {
        if self.cfg.offline {
            return Ok(Box::new(match stub_completions {
                Some(p) => StubClient::table(read_json::<BTreeMap<String, String>>(p)?),
                None => StubClient::Echo,
            }));
        }
        if stub_completions.is_some() {
            return Err(CliError::Usage("--stub-completions requires --offline".into()));
        }
        self.http_client()
    }

    #[cfg(feature = "http")]
    fn http_client(&self) -> Result<Box<dyn ChatClient>> {
        Ok(Box::new(crashlens::chat::HttpClient::from_env(self.cfg.endpoint.as_deref())?))
    }

    #[cfg(not(feature = "http"))]
    fn http_client(&self) -> Result<Box<dyn ChatClient>> {
        Err(CliError::Usage("built without HTTP support; pass --offline".into()))
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input {
        path: path.into(),
        message: e.to_string(),
    })
}

fn load_model(dir: &Path) -> Result<(Tokenizer, TinyLM)> {
    Ok((Tokenizer::load(&dir.join("tokenizer.json"))?, TinyLM::load(&dir.join("model.json"))?))
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.offline {
        cfg.offline = true;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    let ctx = Ctx { cfg };
    let cfg = &ctx.cfg;

    match cli.command {
        Command::Ingest {
            input,
            out,
            target_ratio,
            report,
        } => {
            let tables = match &input {
                Some(dir) => load_tables(&TablePaths::in_dir(dir), &cfg.columns, &LoadOptions::default())?,
                None => CorpusCsv::bundled().load()?,
            };
            let integration = integrate(&tables);
            let mut cases = integration.cases;
            if let Some(r) = target_ratio.or(cfg.target_ratio) {
                cases = stratified_downsample(&cases, r, cfg.seed)?;
            }
            serialize_cases(&cases, &out)?;
            if let Some(path) = report {
                write_json(
                    &path,
                    &serde_json::json!({
                        "rejects": tables.rejects,
                        "orphans": integration.orphans,
                        "warnings": integration.warnings,
                    }),
                )?;
            }
            print_json(&serde_json::json!({
                "cases": cases.len(),
                "rejects": tables.rejects.len(),
                "orphan_vehicles": integration.orphans.vehicles.len(),
                "orphan_persons": integration.orphans.persons.len(),
                "warnings": integration.warnings.len(),
            }));
        }
        Command::Narrate { cases, out } => {
            let cases = deserialize_cases(&cases)?;
            let lexicon = ctx.lexicon()?;
            let templates = match &cfg.templates {
                Some(p) => load_templates(p)?,
                None => default_templates(),
            };
            let mut pairs = Vec::with_capacity(cases.len());
            let mut warnings = 0;
            for case in &cases {
                let (pair, w) = narrate(case, &lexicon, &templates)?;
                for msg in &w {
                    eprintln!("warning: {}: {msg}", pair.caseno);
                }
                warnings += w.len();
                pairs.push(pair);
            }
            write_file(&out, &to_jsonl(&pairs))?;
            print_json(&serde_json::json!({ "narratives": pairs.len(), "warnings": warnings }));
        }
        Command::Augment {
            narratives,
            out,
            narratives_out,
            stub_completions,
        } => {
            let mut pairs: Vec<NarrativePair> = read_records(&narratives)?;
            let client = ctx.chat_client(stub_completions.as_deref())?;
            let acfg = AugmentationConfig {
                temperature: cfg.temperature,
                model_name: cfg.model.clone(),
                endpoint: cfg.endpoint.clone(),
                constraints: crashlens::augment::PreservationConstraint::all(&ctx.lexicon()?.null_markers),
                ..AugmentationConfig::default()
            };
            let records: Vec<(String, String)> = pairs.iter().map(|p| (p.caseno.clone(), p.descriptive.clone())).collect();
            let augmented = augment_batch(&records, client.as_ref(), &acfg, cfg.jobs)?;
            write_file(&out, &to_jsonl(&augmented))?;
            if let Some(path) = narratives_out {
                for (p, a) in pairs.iter_mut().zip(&augmented) {
                    p.descriptive = a.text.clone();
                }
                write_file(&path, &to_jsonl(&pairs))?;
            }
            let flagged = augmented.iter().filter(|a| a.flagged()).count();
            print_json(&serde_json::json!({ "records": augmented.len(), "flagged": flagged }));
        }
        Command::TrainRef {
            narratives,
            out_dir,
            epochs,
        } => {
            let pairs: Vec<NarrativePair> = read_records(&narratives)?;
            let mut train = cfg.train.to_train_config(cfg.seed);
            if let Some(e) = epochs {
                train.epochs = e;
            }
            let labelled: Vec<(String, _)> = pairs.iter().map(|p| (p.descriptive.clone(), p.label)).collect();
            let (tokenizer, model, report) = fit_reference(&labelled, cfg.tokenizer, &train)?;
            let correct = crashlens::par::par_map(&labelled, cfg.jobs, |(text, gold)| classify(&model, &tokenizer, text).label == *gold)
                .into_iter()
                .filter(|ok| *ok)
                .count();
            tokenizer.save(&out_dir.join("tokenizer.json"))?;
            model.save(&out_dir.join("model.json"))?;
            let summary = serde_json::json!({
                "examples": labelled.len(),
                "vocab_size": tokenizer.tokens.len(),
                "epochs": train.epochs,
                "final_loss": report.losses.last().copied().unwrap_or(f64::NAN),
                "train_accuracy": correct as f64 / labelled.len().max(1) as f64,
                "losses": report.losses,
            });
            write_json(&out_dir.join("train_report.json"), &summary)?;
            print_json(&serde_json::json!({
                "examples": labelled.len(),
                "train_accuracy": summary["train_accuracy"],
                "final_loss": summary["final_loss"],
            }));
        }
        Command::Attribute {
            method,
            narratives,
            model_dir,
            out,
            cases,
        } => {
            let pairs: Vec<NarrativePair> = read_records(&narratives)?;
            let selected: Vec<&NarrativePair> = if cases.is_empty() {
                pairs.iter().collect()
            } else {
                let missing: Vec<&String> = cases.iter().filter(|c| !pairs.iter().any(|p| &p.caseno == *c)).collect();
                if !missing.is_empty() {
                    return Err(CliError::Usage(format!("unknown case(s): {missing:?}")));
                }
                pairs.iter().filter(|p| cases.contains(&p.caseno)).collect()
            };
            let (tokenizer, model) = load_model(&model_dir)?;
            let acfg = ctx.attribution();
            let reports: Vec<AttributionReport> = crashlens::par::par_map(&selected, cfg.jobs, |p| {
                attribute_narrative(&model, &tokenizer, &p.caseno, &p.descriptive, method, &acfg)
            });
            write_file(&out, &to_jsonl(&reports))?;
            print_json(&serde_json::json!({ "reports": reports.len(), "method": method }));
        }
        Command::Analyze {
            attributions,
            out_dir,
            top_k,
        } => {
            let reports: Vec<AttributionReport> = read_records(&attributions)?;
            let lexicon = ctx.categories()?;
            let rules = ctx.grouping()?;
            let summaries: Vec<FactorSummary> = if cfg.offline {
                reports.iter().map(|r| rule_based_factors(&r.caseno, &r.words, &lexicon)).collect()
            } else {
                let client = ctx.chat_client(None)?;
                let prompt = FactorPrompt::default();
                let retry = RetryPolicy::default();
                crashlens::par::par_map(&reports, cfg.jobs, |r| {
                    summarize_factors(&r.caseno, &r.annotated, client.as_ref(), &prompt, &lexicon, &cfg.model, &retry)
                })
                .into_iter()
                .collect::<std::result::Result<_, _>>()?
            };
            let k = top_k.unwrap_or(cfg.top_k);
            let per_case: Vec<_> = summaries.iter().map(|s| case_factors(s, k, &rules)).collect();
            let graph = cooccurrence(&per_case);
            #[derive(Serialize)]
            struct CaseFactors<'a> {
                caseno: &'a str,
                factors: &'a [(crashlens::analytics::Aspect, String)],
            }
            let rows: Vec<CaseFactors> = summaries
                .iter()
                .zip(&per_case)
                .map(|(s, f)| CaseFactors {
                    caseno: &s.caseno,
                    factors: f,
                })
                .collect();
            write_file(&out_dir.join("factors.jsonl"), &to_jsonl(&summaries))?;
            write_file(&out_dir.join("case_factors.jsonl"), &to_jsonl(&rows))?;
            write_json(&out_dir.join("cooccurrence.json"), &graph)?;
            print_json(&serde_json::json!({
                "cases": summaries.len(),
                "nodes": graph.nodes.len(),
                "links": graph.links.len(),
            }));
        }
        Command::Export { target } => match target {
            ExportTarget::Sankey { graph, out_dir, title } => {
                let graph: CooccurrenceGraph = read_json(&graph)?;
                let json = sankey_json(&graph);
                crashlens::analytics::validate_sankey(&json)?;
                write_file(&out_dir.join("sankey.json"), json.as_bytes())?;
                write_file(&out_dir.join("sankey.html"), sankey_html(&graph, &title).as_bytes())?;
                print_json(&serde_json::json!({ "nodes": graph.nodes.len(), "links": graph.links.len() }));
            }
            ExportTarget::Heatmap {
                attributions,
                out_dir,
                cases,
                threshold_hi,
            } => {
                let reports: Vec<AttributionReport> = read_records(&attributions)?;
                let hcfg = HeatmapConfig {
                    threshold_hi: threshold_hi.unwrap_or(cfg.threshold_hi),
                };
                let mut written = 0;
                for r in reports.iter().filter(|r| cases.is_empty() || cases.contains(&r.caseno)) {
                    let path = out_dir.join(format!("heatmap-{}.html", safe_name(&r.caseno)));
                    write_file(&path, heatmap_html(&r.caseno, &r.annotated, &hcfg).as_bytes())?;
                    written += 1;
                }
                if written == 0 {
                    return Err(CliError::Usage("no matching attribution reports".into()));
                }
                print_json(&serde_json::json!({ "heatmaps": written }));
            }
        },
        Command::Eval {
            strategy,
            narratives,
            out_dir,
            model_dir,
            stub_completions,
            exemplars,
        } => {
            let pairs: Vec<NarrativePair> = read_records(&narratives)?;
            let mut cases: Vec<EvalCase> = pairs
                .iter()
                .map(|p| EvalCase {
                    caseno: p.caseno.clone(),
                    narrative: p.descriptive.clone(),
                    gold: p.label,
                })
                .collect();
            let prompt_strategy = match strategy {
                StrategyKind::ZeroShot => PromptStrategy::zero_shot(),
                StrategyKind::ZeroShotCot => PromptStrategy::zero_shot_cot(),
                StrategyKind::FewShot => {
                    let ex = match &exemplars {
                        Some(p) => read_json::<Exemplars>(p)?,
                        None => {
                            // First case of each label; both are left out of scoring.
                            let pick = |s| cases.iter().position(|c| c.gold == s);
                            let (Some(mi), Some(si)) = (
                                pick(crashlens::schema::Severity::NoApparentOrMinor),
                                pick(crashlens::schema::Severity::SeriousOrFatal),
                            ) else {
                                return Err(CliError::Usage("few-shot needs one case of each label or --exemplars".into()));
                            };
                            let ex = Exemplars {
                                minor: cases[mi].narrative.clone(),
                                severe: cases[si].narrative.clone(),
                            };
                            let (a, b) = (mi.max(si), mi.min(si));
                            cases.remove(a);
                            cases.remove(b);
                            ex
                        }
                    };
                    PromptStrategy::few_shot(ex)
                }
            };
            let retry = RetryPolicy::default();
            let predictions = match (&model_dir, cfg.offline) {
                (Some(dir), true) => {
                    let (tokenizer, model) = load_model(dir)?;
                    let client = RefModelClient {
                        model: &model,
                        tokenizer: &tokenizer,
                    };
                    run_eval(&cases, &prompt_strategy, &client, &cfg.model, &retry, cfg.jobs)?
                }
                (Some(_), false) => return Err(CliError::Usage("--model-dir requires --offline".into())),
                (None, true) if stub_completions.is_none() => {
                    return Err(CliError::Usage("offline eval needs --model-dir or --stub-completions".into()))
                }
                (None, _) => {
                    let client = ctx.chat_client(stub_completions.as_deref())?;
                    run_eval(&cases, &prompt_strategy, client.as_ref(), &cfg.model, &retry, cfg.jobs)?
                }
            };
            let golds: Vec<_> = cases.iter().map(|c| c.gold).collect();
            let metrics = compute_metrics(&predictions, &golds)?;
            write_file(&out_dir.join("predictions.jsonl"), &to_jsonl(&predictions))?;
            write_json(&out_dir.join("metrics.json"), &metrics)?;
            let name = match strategy {
                StrategyKind::ZeroShot => "ZS",
                StrategyKind::ZeroShotCot => "ZS-CoT",
                StrategyKind::FewShot => "FS",
            };
            println!("{}", format_metrics_row(name, &metrics));
        }
        Command::BuildSft { narratives, out } => {
            let pairs: Vec<NarrativePair> = read_records(&narratives)?;
            let records = build_sft_dataset(&pairs, SYSTEM_PROMPT);
            for r in &records {
                let problems = sft_record_problems(r);
                if !problems.is_empty() {
                    return Err(CliError::Usage(format!("record {}: {}", r.caseno, problems.join("; "))));
                }
            }
            write_file(&out, &to_jsonl(&records))?;
            print_json(&serde_json::json!({ "records": records.len() }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
