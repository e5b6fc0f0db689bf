//! Flat run settings read from a JSON file and overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use jitrisk::evaluate::Top10Denominator;
use jitrisk::pipeline::RunConfig;
use serde::Deserialize;

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// JSON-lines commit dataset
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// JSON-lines fix links used to label defective lines
    #[arg(long)]
    pub fix_links: Option<PathBuf>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub n_trees: Option<usize>,
    #[arg(long)]
    pub min_token_count: Option<usize>,
    /// Probability at or above which a commit is predicted defective
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Initial SMOTE neighbour count (tuning replaces it)
    #[arg(long)]
    pub smote_k: Option<usize>,
    #[arg(long)]
    pub smote_ratio: Option<f64>,
    #[arg(long)]
    pub minkowski_power: Option<f64>,
    /// Fraction of majority rows kept before oversampling
    #[arg(long)]
    pub majority_undersample: Option<f64>,
    #[arg(long)]
    pub de_population: Option<usize>,
    #[arg(long)]
    pub de_mutation: Option<f64>,
    #[arg(long)]
    pub de_crossover: Option<f64>,
    #[arg(long)]
    pub de_generations: Option<usize>,
    #[arg(long)]
    pub k_lower: Option<u32>,
    #[arg(long)]
    pub k_upper: Option<u32>,
    /// Perturbed samples per explained commit
    #[arg(long)]
    pub lime_samples: Option<usize>,
    #[arg(long)]
    pub kernel_width: Option<f64>,
    /// Tokens kept by forward selection in explanations
    #[arg(long)]
    pub top_k_features: Option<usize>,
    /// Count a token once per occurrence when scoring lines
    #[arg(long)]
    pub occurrence_weighted: Option<bool>,
    /// `truth` or `capped_truth`
    #[arg(long, value_parser = parse_denominator)]
    pub top10_denominator: Option<Top10Denominator>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving every output file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_denominator(s: &str) -> Result<Top10Denominator, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("expected `truth` or `capped_truth`, got `{s}`"))
}

macro_rules! merge {
    ($flags:expr, $file:expr, $($field:ident),* $(,)?) => {
        Settings { $($field: $flags.$field.clone().or_else(|| $file.$field.clone()),)* }
    };
}

impl Settings {
    /// Flag values win over values from the config file.
    pub fn over(&self, file: &Settings) -> Settings {
        merge!(
            self,
            file,
            dataset,
            fix_links,
            train_fraction,
            n_trees,
            min_token_count,
            threshold,
            smote_k,
            smote_ratio,
            minkowski_power,
            majority_undersample,
            de_population,
            de_mutation,
            de_crossover,
            de_generations,
            k_lower,
            k_upper,
            lime_samples,
            kernel_width,
            top_k_features,
            occurrence_weighted,
            top10_denominator,
            seed,
            out,
        )
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&body).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default().with_seed(self.seed.unwrap_or(0));
        cfg.dataset = self.dataset.clone();
        cfg.fix_links = self.fix_links.clone();
        cfg.out = self.out.clone();
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src.clone() { cfg.$($dst).+ = v; })*
            };
        }
        set!(
            train_fraction => train_fraction,
            n_trees => n_trees,
            min_token_count => min_token_count,
            threshold => threshold,
            smote_k => smote.k_neighbors,
            smote_ratio => smote.target_ratio,
            minkowski_power => smote.minkowski_power,
            de_population => de.population_size,
            de_mutation => de.mutation_factor,
            de_crossover => de.crossover_probability,
            de_generations => de.generations,
            k_lower => de.lower,
            k_upper => de.upper,
            lime_samples => surrogate.num_samples,
            kernel_width => surrogate.kernel_width,
            occurrence_weighted => surrogate.occurrence_weighted,
            top10_denominator => top10_denominator,
        );
        cfg.smote.majority_undersample = self.majority_undersample;
        cfg.surrogate.top_k_features = self.top_k_features;
        cfg.validate()?;
        Ok(cfg)
    }
}
