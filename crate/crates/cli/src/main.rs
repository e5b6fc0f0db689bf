use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use jitrisk::dataset::{
    label_defective_lines, load_commits, load_fix_links, save_commits, save_fix_links,
    split_commits, CommitRecord,
};
use jitrisk::explain::{rank_commits, RankedCommit};
use jitrisk::forest::ForestModel;
use jitrisk::pipeline::{evaluate_model, explain_all, train_model, RunConfig};
use jitrisk::synth::{generate, SynthConfig};
use log::{info, warn};
use serde::Serialize;

mod settings;

use settings::Settings;

#[derive(Parser, Debug)]
#[command(
    name = "jitrisk",
    version,
    about = "Just-in-time defect prediction and line-level risk ranking"
)]
struct Cli {
    /// Worker threads; defaults to all cores
    #[arg(long, global = true, env = "JITRISK_THREADS")]
    threads: Option<usize>,
    /// Flat JSON settings file; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a dataset, apply fix links and write the labelled dataset
    Ingest {
        #[command(flatten)]
        settings: Settings,
    },
    /// Generate a planted-signal corpus
    Synth {
        #[arg(long, default_value_t = 2000)]
        commits: usize,
        #[arg(long, default_value_t = 0.10)]
        defect_ratio: f64,
        #[arg(long, default_value_t = 2000)]
        vocabulary_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune SMOTE, train the forest and write the model
    Train {
        #[command(flatten)]
        settings: Settings,
    },
    /// Rank test commits by predicted defect density
    Predict {
        #[command(flatten)]
        settings: Settings,
        /// Model file; defaults to model.json in the output directory
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Rank the added lines of selected commits by risk
    Explain {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Commit to explain; repeatable
        #[arg(long = "commit")]
        commits: Vec<String>,
        /// Explain every test commit predicted defective
        #[arg(long)]
        all_predicted: bool,
        /// Explain commits even when they are predicted clean
        #[arg(long)]
        force: bool,
    },
    /// Write commit- and line-level evaluation reports for the test set
    Evaluate {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    match cli.command {
        Command::Synth {
            commits,
            defect_ratio,
            vocabulary_size,
            seed,
            out,
        } => synth(
            &SynthConfig {
                commits,
                defect_ratio,
                vocabulary_size,
                seed,
            },
            &out,
        ),
        Command::Ingest { settings } => ingest(&settings.over(&file).run_config()?),
        Command::Train { settings } => train(&settings.over(&file).run_config()?),
        Command::Predict { settings, model } => predict(&settings.over(&file).run_config()?, model),
        Command::Explain {
            settings,
            model,
            commits,
            all_predicted,
            force,
        } => explain(
            &settings.over(&file).run_config()?,
            model,
            &commits,
            all_predicted,
            force,
        ),
        Command::Evaluate { settings, model } => {
            evaluate(&settings.over(&file).run_config()?, model)
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg
        .out
        .as_deref()
        .context("no output directory given (--out)")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    fs::write(path, body + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_labelled(cfg: &RunConfig) -> Result<Vec<CommitRecord>> {
    let mut commits = load_commits(cfg.dataset_path()?)?;
    if let Some(links) = &cfg.fix_links {
        commits = label_defective_lines(commits, &load_fix_links(links)?)?;
    }
    Ok(commits)
}

/// Test partition of the dataset; an empty dataset has an empty test set.
fn test_commits(cfg: &RunConfig) -> Result<Vec<CommitRecord>> {
    let commits = load_labelled(cfg)?;
    if commits.is_empty() {
        return Ok(Vec::new());
    }
    Ok(split_commits(commits, cfg.train_fraction)?.test)
}

fn load_model(cfg: &RunConfig, model: Option<PathBuf>) -> Result<ForestModel> {
    let path = match model {
        Some(p) => p,
        None => cfg
            .out
            .as_ref()
            .map(|d| d.join("model.json"))
            .context("no model given (--model or --out)")?,
    };
    ForestModel::load(&path).with_context(|| format!("loading model {}", path.display()))
}

fn synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let corpus = generate(cfg)?;
    save_commits(out.join("dataset.jsonl"), &corpus.commits)?;
    save_fix_links(out.join("fixlinks.jsonl"), &corpus.fix_links)?;
    info!(
        "wrote {} commits ({} defect-introducing) to {}",
        corpus.commits.len(),
        corpus.fix_links.len(),
        out.display()
    );
    Ok(())
}

fn ingest(cfg: &RunConfig) -> Result<()> {
    let commits = load_labelled(cfg)?;
    let dir = out_dir(cfg)?;
    let defective = commits.iter().filter(|c| c.label).count();
    let lines: usize = commits
        .iter()
        .filter_map(|c| c.defective_line_keys.as_ref().map(|k| k.len()))
        .sum();
    save_commits(dir.join("dataset.jsonl"), &commits)?;
    info!(
        "ingested {} commits, {defective} defect-introducing, {lines} defective lines",
        commits.len()
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let split = split_commits(load_labelled(cfg)?, cfg.train_fraction)?;
    let dir = out_dir(cfg)?;
    let started = Instant::now();
    let (model, tuning) = train_model(&split.train, cfg)?;
    info!(
        "trained {} trees on {} commits in {:.2}s",
        model.n_trees(),
        split.train.len(),
        started.elapsed().as_secs_f64()
    );
    model.save(dir.join("model.json"))?;
    write_json(&dir.join("vocabulary.json"), &model.vocabulary)?;
    write_json(&dir.join("tuning.json"), &tuning)?;
    Ok(())
}

fn write_ranking(path: &Path, ranking: &[RankedCommit]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    writer.write_record(["commit_id", "probability", "churn", "density", "rank"])?;
    for (i, r) in ranking.iter().enumerate() {
        writer.write_record([
            r.commit_id.clone(),
            r.probability.to_string(),
            r.churn_loc.to_string(),
            r.density.to_string(),
            (i + 1).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn predict(cfg: &RunConfig, model: Option<PathBuf>) -> Result<()> {
    let model = load_model(cfg, model)?;
    let test = test_commits(cfg)?;
    let dir = out_dir(cfg)?;
    let ranking = rank_commits(&model, &test)?;
    write_ranking(&dir.join("ranking.csv"), &ranking)?;
    info!("ranked {} commits", ranking.len());
    Ok(())
}

fn file_name(commit_id: &str) -> String {
    commit_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn explain(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    ids: &[String],
    all_predicted: bool,
    force: bool,
) -> Result<()> {
    if ids.is_empty() && !all_predicted {
        bail!("name commits with --commit or pass --all-predicted");
    }
    let model = load_model(cfg, model)?;
    let commits = load_labelled(cfg)?;
    let mut chosen: Vec<&CommitRecord> = Vec::new();
    for id in ids {
        let commit = commits
            .iter()
            .find(|c| &c.commit_id == id)
            .ok_or_else(|| jitrisk::Error::UnknownCommit(id.clone()))?;
        if !chosen.iter().any(|c| &c.commit_id == id) {
            chosen.push(commit);
        }
    }
    if all_predicted {
        let test: Vec<CommitRecord> = if commits.is_empty() {
            Vec::new()
        } else {
            split_commits(commits.clone(), cfg.train_fraction)?.test
        };
        for r in rank_commits(&model, &test)? {
            if r.probability >= cfg.threshold && !chosen.iter().any(|c| c.commit_id == r.commit_id)
            {
                chosen.push(
                    commits
                        .iter()
                        .find(|c| c.commit_id == r.commit_id)
                        .expect("ranked commit exists"),
                );
            }
        }
    }
    if !force {
        let mut kept = Vec::with_capacity(chosen.len());
        for c in chosen {
            let p = model.predict_proba(&jitrisk::features::feature_row(c, &model.vocabulary)?)?;
            if p >= cfg.threshold {
                kept.push(c);
            } else {
                warn!(
                    "skipping {}: predicted clean (p={p:.3}); use --force to explain it",
                    c.commit_id
                );
            }
        }
        chosen = kept;
    }
    let dir = out_dir(cfg)?.join("explanations");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for e in explain_all(&model, &chosen, &cfg.surrogate)? {
        write_json(&dir.join(format!("{}.json", file_name(&e.commit_id))), &e)?;
    }
    info!("wrote {} explanations to {}", chosen.len(), dir.display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, model: Option<PathBuf>) -> Result<()> {
    let model = load_model(cfg, model)?;
    let test = test_commits(cfg)?;
    let dir = out_dir(cfg)?;
    let report = evaluate_model(&model, &test, cfg)?;
    report.write_json(dir.join("eval_report.json"))?;
    report.write_csv(dir.join("eval_report.csv"))?;
    for (name, value) in report.flat_rows() {
        info!("{name} = {value:.4}");
    }
    Ok(())
}
