//! Command-line entry point wiring the modules into reproducible runs.

use std::fs;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::agents::AgentDescriptor;
use crate::benchmark;
use crate::config::{ConfigError, RunConfig, DEFAULT_MAX_WORDS};
use crate::engine::{EngineError, SearchEngine};
use crate::eval::{
    evaluate_params, mcnemar, online_macro_utility, personalization_divergence, sweep_batch_size,
    sweep_csv, sweep_iterations, EvalError, MetricReport, SweepRow,
};
use crate::reranker::{RerankerError, RerankerParams};
use crate::serve::{run_stdio, run_tcp, ServerState};
use crate::training::{offline_train, online_serve_train, OnlineConfig, SessionError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Reranker(#[from] RerankerError),
    #[error(transparent)]
    Index(#[from] crate::index::IndexError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Parser)]
#[command(
    name = "unisearch",
    about = "Unified search engine for retrieval-augmented agents"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark (corpus, query sets, agent roster)
    GenBenchmark {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and snapshot the inverted index for a corpus
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_WORDS)]
        max_words: usize,
    },
    /// Run offline iterative training and write per-iteration checkpoints
    TrainOffline {
        #[arg(long)]
        config: PathBuf,
        /// Force all task/model IDs to "unk" (the non-personalized ablation)
        #[arg(long)]
        non_personalized: bool,
    },
    /// Run per-agent online sessions over the test streams
    RunOnline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the configured online batch size
        #[arg(long)]
        b: Option<usize>,
    },
    /// Evaluate a checkpoint on the test sets
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint; adds a McNemar test over pooled outcomes
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Evaluate with IDs forced to "unk"
        #[arg(long)]
        non_personalized: bool,
    },
    /// Cross-agent list similarity under a checkpoint
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Non-personalized checkpoint to compare against
        #[arg(long)]
        np_checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        depth: usize,
        #[arg(long, default_value_t = 8)]
        queries_per_task: usize,
    },
    /// Evaluate every offline iteration checkpoint (CSV)
    SweepIterations {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        non_personalized: bool,
    },
    /// Online utility across batch sizes (CSV)
    SweepBatchSize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8,32,64,128")]
        b_values: Vec<usize>,
        /// Oracle feedback noise applied during the sweep sessions only
        #[arg(long, default_value_t = 0.0)]
        feedback_noise: f64,
    },
    /// Serve sessions over TCP or stdio
    Serve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        /// Serve a single session over standard input/output
        #[arg(long)]
        stdio: bool,
        #[arg(long, default_value_t = 256)]
        b: usize,
        #[arg(long, default_value_t = 2)]
        epochs: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_WORDS)]
        max_words: usize,
    },
}

pub fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    dispatch(cli.command)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenBenchmark { seed, out } => cmd_gen_benchmark(seed, &out),
        Command::BuildIndex {
            corpus,
            out,
            max_words,
        } => cmd_build_index(&corpus, &out, max_words),
        Command::TrainOffline {
            config,
            non_personalized,
        } => cmd_train_offline(&config, non_personalized),
        Command::RunOnline {
            config,
            checkpoint,
            b,
        } => cmd_run_online(&config, &checkpoint, b),
        Command::Evaluate {
            config,
            checkpoint,
            baseline,
            non_personalized,
        } => cmd_evaluate(&config, &checkpoint, baseline.as_deref(), non_personalized),
        Command::Analyze {
            config,
            checkpoint,
            np_checkpoint,
            depth,
            queries_per_task,
        } => cmd_analyze(
            &config,
            &checkpoint,
            np_checkpoint.as_deref(),
            depth,
            queries_per_task,
        ),
        Command::SweepIterations {
            config,
            non_personalized,
        } => cmd_sweep_iterations(&config, non_personalized),
        Command::SweepBatchSize {
            config,
            checkpoint,
            b_values,
            feedback_noise,
        } => cmd_sweep_batch_size(&config, &checkpoint, &b_values, feedback_noise),
        Command::Serve {
            corpus,
            checkpoint,
            port,
            stdio,
            b,
            epochs,
            seed,
            max_words,
        } => cmd_serve(
            &corpus,
            &checkpoint,
            port,
            stdio,
            b,
            epochs,
            seed,
            max_words,
        ),
    }
}

pub fn cmd_gen_benchmark(seed: u64, out: &std::path::Path) -> Result<(), CliError> {
    let bench = benchmark::generate(seed);
    benchmark::write_benchmark(&bench, out)?;
    let manifest = serde_json::json!({"command": "gen-benchmark", "seed": seed});
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("serializable") + "\n",
    )?;
    println!(
        "benchmark written to {}: {} documents, {} agents, {} tasks",
        out.display(),
        bench.documents.len(),
        bench.roster.len(),
        bench.train_sets.len()
    );
    Ok(())
}

pub fn cmd_build_index(
    corpus: &std::path::Path,
    out: &std::path::Path,
    max_words: usize,
) -> Result<(), CliError> {
    let engine = SearchEngine::open(corpus, max_words)?;
    engine.index().save_snapshot(out)?;
    println!(
        "index over {} passages written to {}",
        engine.store().len(),
        out.display()
    );
    Ok(())
}

fn load_run(
    config_path: &std::path::Path,
) -> Result<(RunConfig, SearchEngine, Vec<AgentDescriptor>), CliError> {
    let config = RunConfig::load(config_path)?;
    let engine = config.load_engine()?;
    let roster = config.load_roster()?;
    Ok((config, engine, roster))
}

fn write_report_csv(config: &RunConfig, name: &str, report: &MetricReport) -> Result<(), CliError> {
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join(name), report.per_agent_csv())?;
    Ok(())
}

pub fn cmd_train_offline(
    config_path: &std::path::Path,
    non_personalized: bool,
) -> Result<(), CliError> {
    let (mut config, engine, roster) = load_run(config_path)?;
    if non_personalized {
        config.offline.personalized = false;
    }
    let train_sets = config.load_query_sets(&roster, "train")?;
    config.write_manifest("train-offline")?;

    let run = offline_train(
        &engine,
        RerankerParams::zeros(),
        &roster,
        &train_sets,
        &config.offline,
    )?;

    let dir = config.output_dir.join("checkpoints");
    fs::create_dir_all(&dir)?;
    RerankerParams::zeros().save_checkpoint(dir.join("theta_0.json"))?;
    for (t, params) in run.checkpoints.iter().enumerate() {
        params.save_checkpoint(dir.join(format!("theta_{}.json", t + 1)))?;
    }
    let metrics: Vec<serde_json::Value> = run
        .metrics
        .iter()
        .map(|m| {
            serde_json::json!({
                "params_iteration": m.params_iteration,
                "mean_positive_rate": m.mean_positive_rate,
                "per_agent_positive_rate": m.per_agent_positive_rate,
            })
        })
        .collect();
    fs::write(
        config.output_dir.join("offline_metrics.json"),
        serde_json::to_string_pretty(&metrics).expect("serializable") + "\n",
    )?;
    for m in &run.metrics {
        println!(
            "iteration {} positive rate {:.4}",
            m.params_iteration, m.mean_positive_rate
        );
    }
    println!("checkpoints written to {}", dir.display());
    Ok(())
}

pub fn cmd_run_online(
    config_path: &std::path::Path,
    checkpoint: &std::path::Path,
    b: Option<usize>,
) -> Result<(), CliError> {
    let (mut config, engine, roster) = load_run(config_path)?;
    if let Some(b) = b {
        config.online.batch_queries = b;
    }
    let test_sets = config.load_query_sets(&roster, "test")?;
    let params = RerankerParams::load_checkpoint(checkpoint)?;
    config.write_manifest("run-online")?;

    let snapshot_dir = config.output_dir.join("online");
    fs::create_dir_all(&snapshot_dir)?;
    let mut outcomes = std::collections::BTreeMap::new();
    for agent in &roster {
        let queries = &test_sets[&agent.tid];
        let (served, session) = online_serve_train(
            &engine,
            agent,
            params.clone(),
            queries,
            config.online.clone(),
        )?;
        let lists: Vec<_> = served.into_iter().map(|(_, docs)| docs).collect();
        let (_, agent_outcomes) = crate::eval::downstream_utility(&engine, agent, queries, &lists);
        outcomes.insert(agent.agent_id.clone(), agent_outcomes);
        session
            .params
            .save_checkpoint(snapshot_dir.join(format!("{}.json", agent.agent_id)))?;
    }
    let report = MetricReport::from_outcomes(outcomes);
    write_report_csv(&config, "online_per_agent.csv", &report)?;
    println!("online macro utility {:.6}", report.macro_average);
    Ok(())
}

pub fn cmd_evaluate(
    config_path: &std::path::Path,
    checkpoint: &std::path::Path,
    baseline: Option<&std::path::Path>,
    non_personalized: bool,
) -> Result<(), CliError> {
    let (config, engine, roster) = load_run(config_path)?;
    let test_sets = config.load_query_sets(&roster, "test")?;
    let params = RerankerParams::load_checkpoint(checkpoint)?;
    config.write_manifest("evaluate")?;

    let report = evaluate_params(
        &engine,
        &params,
        &roster,
        &test_sets,
        config.offline.first_stage_n,
        !non_personalized,
    )?;
    write_report_csv(&config, "per_agent.csv", &report)?;
    println!("macro utility {:.6}", report.macro_average);

    if let Some(baseline_path) = baseline {
        let baseline_params = RerankerParams::load_checkpoint(baseline_path)?;
        let baseline_report = evaluate_params(
            &engine,
            &baseline_params,
            &roster,
            &test_sets,
            config.offline.first_stage_n,
            !non_personalized,
        )?;
        let pooled_a: Vec<u8> = report.outcomes.values().flatten().copied().collect();
        let pooled_b: Vec<u8> = baseline_report
            .outcomes
            .values()
            .flatten()
            .copied()
            .collect();
        let test = mcnemar(&pooled_a, &pooled_b)?;
        println!(
            "baseline macro utility {:.6}; McNemar statistic {:.4}, p {:.6} ({:?}, n01={}, n10={})",
            baseline_report.macro_average,
            test.statistic,
            test.p_value,
            test.method,
            test.n01,
            test.n10
        );
        let out = serde_json::json!({
            "macro_utility": report.macro_average,
            "baseline_macro_utility": baseline_report.macro_average,
            "mcnemar": test,
        });
        fs::write(
            config.output_dir.join("significance.json"),
            serde_json::to_string_pretty(&out).expect("serializable") + "\n",
        )?;
    }
    Ok(())
}

pub fn cmd_analyze(
    config_path: &std::path::Path,
    checkpoint: &std::path::Path,
    np_checkpoint: Option<&std::path::Path>,
    depth: usize,
    queries_per_task: usize,
) -> Result<(), CliError> {
    let (config, engine, roster) = load_run(config_path)?;
    let test_sets = config.load_query_sets(&roster, "test")?;
    let params = RerankerParams::load_checkpoint(checkpoint)?;
    config.write_manifest("analyze")?;

    let shared: Vec<_> = test_sets
        .values()
        .flat_map(|qs| qs.iter().take(queries_per_task).cloned())
        .collect();
    let report = personalization_divergence(
        &engine,
        &params,
        &roster,
        &shared,
        depth,
        config.offline.first_stage_n,
        true,
    )?;
    fs::create_dir_all(&config.output_dir)?;
    fs::write(
        config.output_dir.join("jaccard_matrix.csv"),
        &report.jaccard_matrix_csv,
    )?;
    println!(
        "personalized: mean jaccard {:.4}, tau same-model {:.4}, tau cross-model {:.4}",
        report.mean_jaccard, report.mean_tau_same_mid, report.mean_tau_cross_mid
    );
    let mut summary = serde_json::json!({
        "mean_jaccard": report.mean_jaccard,
        "mean_tau_same_mid": report.mean_tau_same_mid,
        "mean_tau_cross_mid": report.mean_tau_cross_mid,
    });
    if let Some(np_path) = np_checkpoint {
        let np = RerankerParams::load_checkpoint(np_path)?;
        let np_report = personalization_divergence(
            &engine,
            &np,
            &roster,
            &shared,
            depth,
            config.offline.first_stage_n,
            false,
        )?;
        println!(
            "non-personalized: mean jaccard {:.4}",
            np_report.mean_jaccard
        );
        summary["non_personalized_mean_jaccard"] = serde_json::json!(np_report.mean_jaccard);
    }
    fs::write(
        config.output_dir.join("divergence.json"),
        serde_json::to_string_pretty(&summary).expect("serializable") + "\n",
    )?;
    Ok(())
}

pub fn cmd_sweep_iterations(
    config_path: &std::path::Path,
    non_personalized: bool,
) -> Result<(), CliError> {
    let (mut config, engine, roster) = load_run(config_path)?;
    if non_personalized {
        config.offline.personalized = false;
    }
    let train_sets = config.load_query_sets(&roster, "train")?;
    let test_sets = config.load_query_sets(&roster, "test")?;
    config.write_manifest("sweep-iterations")?;

    let (rows, checkpoints) =
        sweep_iterations(&engine, &roster, &train_sets, &test_sets, &config.offline)?;
    fs::create_dir_all(&config.output_dir)?;
    fs::write(
        config.output_dir.join("sweep_iterations.csv"),
        sweep_csv("iteration", &rows),
    )?;
    let dir = config.output_dir.join("checkpoints");
    fs::create_dir_all(&dir)?;
    for (t, params) in checkpoints.iter().enumerate() {
        params.save_checkpoint(dir.join(format!("theta_{t}.json")))?;
    }
    for r in &rows {
        println!("iteration {} macro utility {:.6}", r.point, r.macro_utility);
    }
    Ok(())
}

pub fn cmd_sweep_batch_size(
    config_path: &std::path::Path,
    checkpoint: &std::path::Path,
    b_values: &[usize],
    feedback_noise: f64,
) -> Result<(), CliError> {
    if b_values.is_empty() {
        return Err(CliError::Invalid(
            "b_values: at least one batch size required".into(),
        ));
    }
    if !(0.0..0.5).contains(&feedback_noise) {
        return Err(CliError::Invalid(
            "feedback_noise: must lie in [0, 0.5) so feedback stays informative".into(),
        ));
    }
    let (config, engine, mut roster) = load_run(config_path)?;
    let test_sets = config.load_query_sets(&roster, "test")?;
    let params = RerankerParams::load_checkpoint(checkpoint)?;
    config.write_manifest("sweep-batch-size")?;
    for agent in &mut roster {
        agent.oracle.noise_rate = feedback_noise;
    }

    // no-update reference: batch larger than any stream
    let frozen = online_macro_utility(
        &engine,
        &roster,
        &params,
        &test_sets,
        &OnlineConfig {
            batch_queries: usize::MAX,
            ..config.online.clone()
        },
    )?;
    let mut rows = vec![SweepRow {
        point: "no_update".into(),
        macro_utility: frozen.macro_average,
    }];
    rows.extend(sweep_batch_size(
        &engine,
        &roster,
        &params,
        &test_sets,
        &config.online,
        b_values,
    )?);
    fs::create_dir_all(&config.output_dir)?;
    fs::write(
        config.output_dir.join("sweep_batch_size.csv"),
        sweep_csv("batch_size", &rows),
    )?;
    for r in &rows {
        println!("b {} macro utility {:.6}", r.point, r.macro_utility);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_serve(
    corpus: &std::path::Path,
    checkpoint: &std::path::Path,
    port: Option<u16>,
    stdio: bool,
    b: usize,
    epochs: u32,
    seed: u64,
    max_words: usize,
) -> Result<(), CliError> {
    if stdio == port.is_some() {
        return Err(CliError::Invalid(
            "serve needs exactly one of --port or --stdio".into(),
        ));
    }
    let engine = SearchEngine::open(corpus, max_words)?;
    let params = RerankerParams::load_checkpoint(checkpoint)?;
    let state = ServerState {
        engine: Arc::new(engine),
        checkpoint: params,
        config: OnlineConfig {
            batch_queries: b,
            epochs,
            seed,
            ..Default::default()
        },
    };
    if stdio {
        run_stdio(&state)?;
    } else {
        let listener = TcpListener::bind(("127.0.0.1", port.expect("checked above")))?;
        eprintln!("listening on {}", listener.local_addr()?);
        run_tcp(Arc::new(state), listener)?;
    }
    Ok(())
}
