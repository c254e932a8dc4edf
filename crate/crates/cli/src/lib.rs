//! `delphi` command-line driver.
//!
//! Subcommands:
//!
//! * `run` — execute every repeat of a config, one run directory each
//! * `resume` — continue a run directory from its last checkpoint
//! * `analyze` — topic matrix, rating trajectories and divergence report
//! * `validate` — check a config and list every violation
//! * `init` — scaffold a default config (or the 2×2 grid), persona catalog
//!   and topic lexicon
//!
//! Progress and warnings go to stderr; stdout carries only result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use delphi_core::analysis::{
    aggregate_discrepancies, build_occurrence_matrix, cross_run_divergence, default_lexicon,
    default_lexicon_json, rating_trajectories, run_label, trajectories_svg, AnalysisError,
    TopicLexicon,
};
use delphi_core::model::{default_initial_questions, BackendSelector, StudyConfig, StudyResult};
use delphi_core::orchestrator::{backend_for, load_checkpoint, resume_study, run_study_in};
use delphi_core::persistence::{
    read_transcript, to_canonical_json, write_atomic, PROVIDER_LOG_FILE, TRANSCRIPT_FILE,
};
use delphi_core::persona::{default_catalog, default_catalog_json};
use futures::StreamExt;
use serde_json::{json, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "delphi", version, about = "Run Delphi studies with language-model agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every repeat of a study config.
    Run(RunArgs),
    /// Continue an interrupted run from its checkpoint.
    Resume {
        /// Run directory (contains checkpoint.json).
        run_dir: PathBuf,
    },
    /// Analyze finished transcripts.
    Analyze(AnalyzeArgs),
    /// Check a config file and list every problem.
    Validate(ConfigArgs),
    /// Write a default config, persona catalog and topic lexicon.
    Init(InitArgs),
}

/// Flags that override fields of the config file.
#[derive(Debug, Args, Default, Clone)]
pub struct ConfigArgs {
    /// Study config (JSON, field-for-field StudyConfig).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `rng_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `num_repeats`.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Overrides `backend_selector` (`mock` or `http`).
    #[arg(long)]
    pub backend: Option<BackendSelector>,
    /// Overrides `parallel_runs`.
    #[arg(long)]
    pub parallel_runs: Option<usize>,
    /// Overrides `parallelism` (requests in flight per batch).
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Overrides `num_rounds`.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Persona catalog JSON; replaces `panel_distributions`.
    #[arg(long)]
    pub persona_catalog: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory; repeat k is written to `<out>/run_<k>`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run directories, transcript files, or directories containing them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Topic lexicon JSON (defaults to the bundled 15-topic lexicon).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Where to write the reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Also compute the cross-run divergence report.
    #[arg(long)]
    pub divergence: bool,
    /// Also write one SVG trajectory plot per run.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Directory to write into.
    pub dir: PathBuf,
    /// Write the four agents-by-questions grid configs (a, q ∈ {5, 15},
    /// three repeats each) instead of a single config.
    #[arg(long)]
    pub grid: bool,
    /// Replace existing files.
    #[arg(long)]
    pub force: bool,
}

/// Parses arguments and runs the command, returning the process exit code.
pub async fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(cli).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILED
        }
    }
}

async fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run(args) => cmd_run(&args).await,
        Command::Resume { run_dir } => cmd_resume(&run_dir).await,
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Validate(args) => cmd_validate(&args),
        Command::Init(args) => cmd_init(&args),
    }
}

/// The effective config: file contents with flag overrides applied, before
/// validation. A file without `panel_distributions` gets the persona
/// catalog (or the bundled default).
pub fn effective_config(args: &ConfigArgs) -> Result<StudyConfig> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    let obj = value
        .as_object_mut()
        .with_context(|| format!("{} is not a JSON object", args.config.display()))?;
    obj.retain(|k, _| !k.starts_with('_'));
    if let Some(path) = &args.persona_catalog {
        let catalog: Value = serde_json::from_str(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?;
        obj.insert("panel_distributions".into(), catalog);
    } else if !obj.contains_key("panel_distributions") {
        obj.insert(
            "panel_distributions".into(),
            serde_json::to_value(default_catalog())?,
        );
    }
    let overrides = [
        ("rng_seed", args.seed.map(|v| json!(v))),
        ("num_repeats", args.repeats.map(|v| json!(v))),
        ("backend_selector", args.backend.map(|v| serde_json::to_value(v).unwrap())),
        ("parallel_runs", args.parallel_runs.map(|v| json!(v))),
        ("parallelism", args.parallelism.map(|v| json!(v))),
        ("num_rounds", args.rounds.map(|v| json!(v))),
    ];
    for (key, v) in overrides {
        if let Some(v) = v {
            obj.insert(key.into(), v);
        }
    }
    serde_json::from_value(value).with_context(|| format!("reading {}", args.config.display()))
}

fn print_violations(config: &Path, err: &delphi_core::model::ConfigError) {
    eprintln!(
        "{}: {} violation(s)",
        config.display(),
        err.violations.len()
    );
    for v in &err.violations {
        eprintln!("  - {v}");
    }
}

pub fn cmd_validate(args: &ConfigArgs) -> Result<i32> {
    let config = effective_config(args)?;
    match config.validate() {
        Ok(_) => {
            println!("{}: ok", args.config.display());
            Ok(EXIT_OK)
        }
        Err(e) => {
            print_violations(&args.config, &e);
            Ok(EXIT_INVALID)
        }
    }
}

/// One line of the completion table.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_index: usize,
    pub run_dir: PathBuf,
    pub result: Result<StudyResult, String>,
}

pub fn run_dir_for(out: &Path, run_index: usize) -> PathBuf {
    out.join(format!("run_{run_index}"))
}

async fn run_one(config: StudyConfig, run_index: usize, out: PathBuf) -> RunOutcome {
    let run_dir = run_dir_for(&out, run_index);
    let result = async {
        fs::create_dir_all(&run_dir)
            .with_context(|| format!("creating {}", run_dir.display()))?;
        let _ = fs::remove_file(run_dir.join(PROVIDER_LOG_FILE));
        let backend = backend_for(&config, run_index, Some(&run_dir))?;
        eprintln!("[run {run_index}] started in {}", run_dir.display());
        let result = run_study_in(config, run_index, backend.as_ref(), &run_dir).await?;
        eprintln!("[run {run_index}] done");
        anyhow::Ok(result)
    }
    .await
    .map_err(|e| {
        eprintln!("[run {run_index}] failed: {e:#}");
        format!("{e:#}")
    });
    RunOutcome {
        run_index,
        run_dir,
        result,
    }
}

pub fn completion_table(outcomes: &[RunOutcome]) -> String {
    let mut out = format!(
        "{:<5}  {:<6}  {:>6}  {:>6}  {}\n",
        "run", "status", "rounds", "asked", "transcript"
    );
    for o in outcomes {
        match &o.result {
            Ok(r) => {
                let asked: usize = r
                    .rounds
                    .iter()
                    .map(|x| x.open_questions.len() + x.closed_questions.len())
                    .sum();
                writeln!(
                    out,
                    "{:<5}  {:<6}  {:>6}  {:>6}  {}",
                    o.run_index,
                    "ok",
                    r.rounds.len(),
                    asked,
                    o.run_dir.join(TRANSCRIPT_FILE).display()
                )
                .unwrap();
            }
            Err(e) => {
                writeln!(
                    out,
                    "{:<5}  {:<6}  {:>6}  {:>6}  {}",
                    o.run_index, "failed", "-", "-", e
                )
                .unwrap();
            }
        }
    }
    out
}

pub async fn cmd_run(args: &RunArgs) -> Result<i32> {
    let config = match effective_config(&args.config)?.validate() {
        Ok(c) => c,
        Err(e) => {
            print_violations(&args.config.config, &e);
            return Ok(EXIT_INVALID);
        }
    };
    let repeats = config.num_repeats;
    let concurrent = config.parallel_runs.max(1);
    eprintln!(
        "running {repeats} repeat(s) of \"{}\" (a={}, q={}, {} rounds, backend {}, {concurrent} at a time)",
        config.topic,
        config.num_agents,
        config.questions_per_agent,
        config.num_rounds,
        serde_json::to_value(config.backend_selector)?.as_str().unwrap_or_default()
    );
    let mut outcomes: Vec<RunOutcome> = futures::stream::iter(0..repeats)
        .map(|k| run_one(config.clone(), k, args.out.clone()))
        .buffer_unordered(concurrent)
        .collect()
        .await;
    outcomes.sort_by_key(|o| o.run_index);
    print!("{}", completion_table(&outcomes));
    Ok(if outcomes.iter().all(|o| o.result.is_ok()) {
        EXIT_OK
    } else {
        EXIT_FAILED
    })
}

pub async fn cmd_resume(run_dir: &Path) -> Result<i32> {
    let checkpoint = match load_checkpoint(run_dir) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_FAILED);
        }
    };
    let state = &checkpoint.state;
    eprintln!(
        "resuming run {} at round {}, {}",
        state.run_index,
        state.round_number(),
        state.phase
    );
    let backend = backend_for(&state.config, state.run_index, Some(run_dir))?;
    match resume_study(run_dir, backend.as_ref()).await {
        Ok(result) => {
            let outcome = RunOutcome {
                run_index: result.run_index,
                run_dir: run_dir.to_path_buf(),
                result: Ok(result),
            };
            print!("{}", completion_table(&[outcome]));
            Ok(EXIT_OK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(EXIT_FAILED)
        }
    }
}

/// Transcript files under `inputs`, in argument order; directories are
/// searched recursively in lexicographic order.
pub fn collect_transcripts(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let own = dir.join(TRANSCRIPT_FILE);
        if own.is_file() {
            out.push(own);
            return Ok(());
        }
        let mut children: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        children.sort();
        for child in children {
            walk(&child, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    for input in inputs {
        if input.is_file() {
            out.push(input.clone());
        } else if input.is_dir() {
            walk(input, &mut out)?;
        } else {
            bail!("{} does not exist", input.display());
        }
    }
    Ok(out)
}

fn trajectories_csv(results: &[StudyResult]) -> String {
    let mut out = String::from("run,round,question_id,produced_in_round,mean,count,text\n");
    for r in results {
        let label = run_label(r);
        for p in rating_trajectories(r) {
            let mean = p.mean.map(|m| m.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{label},{},{},{},{mean},{},\"{}\"",
                p.round,
                p.question_id.0,
                p.produced_in_round,
                p.count,
                p.text.replace('"', "\"\"")
            )
            .unwrap();
        }
    }
    out
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<i32> {
    let lexicon = match &args.lexicon {
        Some(path) => TopicLexicon::from_json(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("loading lexicon {}", path.display()))?,
        None => default_lexicon(),
    };
    let paths = collect_transcripts(&args.inputs)?;
    if paths.is_empty() {
        bail!("no transcripts found");
    }
    let results = paths
        .iter()
        .map(|p| read_transcript(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    eprintln!("analyzing {} transcript(s) with {} topics", results.len(), lexicon.len());

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let matrix = build_occurrence_matrix(&results, &lexicon);
    write_atomic(&args.out.join("topics.csv"), &matrix.to_csv())?;
    write_atomic(&args.out.join("topics.txt"), &matrix.to_text())?;
    write_atomic(&args.out.join("trajectories.csv"), &trajectories_csv(&results))?;
    print!("{}", matrix.to_text());

    for r in &results {
        for problem in aggregate_discrepancies(r, 1e-12) {
            eprintln!("warning: {}: {problem}", run_label(r));
        }
    }

    if args.svg {
        let dir = args.out.join("trajectories");
        for r in &results {
            write_atomic(&dir.join(format!("{}.svg", run_label(r))), &trajectories_svg(r))?;
        }
    }

    if args.divergence {
        match cross_run_divergence(&results, &lexicon) {
            Ok(report) => {
                write_atomic(&args.out.join("divergence.json"), &to_canonical_json(&report)?)?;
            }
            Err(e @ (AnalysisError::ConfigMismatch { .. } | AnalysisError::TooFewResults(_))) => {
                eprintln!("warning: divergence report skipped: {e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(EXIT_OK)
}

/// A default config for one grid cell, with a `_comment` explaining the
/// fields (keys starting with `_` are ignored when loading).
pub fn scaffold_config(agents: usize, questions: usize, repeats: usize) -> Result<String> {
    let mut config = StudyConfig::for_grid(
        "future of GenAI",
        default_initial_questions(),
        agents,
        questions,
        default_catalog(),
        42,
    );
    config.num_repeats = repeats;
    let mut value = serde_json::to_value(&config)?;
    value.as_object_mut().expect("config is an object").insert(
        "_comment".into(),
        json!([
            "num_agents / questions_per_agent: panel size and open questions answered per round.",
            "max_open_questions / max_closed_questions: retention caps after similarity filtering.",
            "duplicate_threshold: candidates more similar than this to a kept one are dropped.",
            "backend_selector: 'mock' (offline, deterministic) or 'http' (needs DELPHI_API_KEY).",
            "rng_seed drives persona sampling and the mock; repeat k derives its own seed.",
            "panel_distributions may be omitted to use the bundled persona catalog."
        ]),
    );
    Ok(to_canonical_json(&value)?)
}

pub const GRID: [(usize, usize); 4] = [(5, 5), (5, 15), (15, 5), (15, 15)];

pub fn grid_file_name(agents: usize, questions: usize) -> String {
    format!("a{agents:02}_q{questions:02}.json")
}

pub fn cmd_init(args: &InitArgs) -> Result<i32> {
    let mut files: Vec<(PathBuf, String)> = vec![
        (
            args.dir.join("persona_catalog.json"),
            default_catalog_json().to_string(),
        ),
        (
            args.dir.join("topic_lexicon.json"),
            default_lexicon_json().to_string(),
        ),
    ];
    if args.grid {
        for (a, q) in GRID {
            files.push((args.dir.join(grid_file_name(a, q)), scaffold_config(a, q, 3)?));
        }
    } else {
        files.push((args.dir.join("config.json"), scaffold_config(5, 5, 3)?));
    }
    if !args.force {
        if let Some((p, _)) = files.iter().find(|(p, _)| p.exists()) {
            eprintln!("error: {} exists (use --force to overwrite)", p.display());
            return Ok(EXIT_FAILED);
        }
    }
    for (path, contents) in &files {
        write_atomic(path, contents)?;
        println!("{}", path.display());
    }
    Ok(EXIT_OK)
}
