//! End-to-end orchestration shared by the command line and the test suites.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    label_defective_lines, load_commits, load_fix_links, split_commits, CommitRecord, Split,
};
use crate::error::{Error, Result};
use crate::evaluate::{
    auc, confusion_metrics, effort_at_recall, pci_at_effort, popt, CommitLineMetrics, EffortItem,
    EvalReport, LineReport, Top10Denominator,
};
use crate::explain::{
    explain_commit, line_metrics, rank_commits, LineExplanation, RankedCommit, SurrogateConfig,
};
use crate::features::{assemble_feature_matrix, LabeledMatrix, Vocabulary};
use crate::forest::{fit_forest, ForestModel, DEFAULT_TREES};
use crate::rebalance::{tune_and_rebalance, DeConfig, SmoteConfig, TuningReport};

/// Every setting of a run. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub fix_links: Option<PathBuf>,
    pub train_fraction: f64,
    pub n_trees: usize,
    /// Tokens seen fewer times than this in training are dropped.
    pub min_token_count: usize,
    pub threshold: f64,
    pub smote: SmoteConfig,
    pub de: DeConfig,
    pub surrogate: SurrogateConfig,
    pub top10_denominator: Top10Denominator,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            fix_links: None,
            train_fraction: 0.8,
            n_trees: DEFAULT_TREES,
            min_token_count: 1,
            threshold: 0.5,
            smote: SmoteConfig::default(),
            de: DeConfig::default(),
            surrogate: SurrogateConfig::default(),
            top10_denominator: Top10Denominator::default(),
            seed: 0,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&body).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Propagates the run seed into the seeded sub-configurations.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.de.seed = seed;
        self.surrogate.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.n_trees == 0 {
            return Err(Error::InvalidInput("n_trees must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidInput(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        self.smote.validate()?;
        self.de.validate()?;
        self.surrogate.validate()
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("no dataset given".into()))
    }
}

/// Loads the dataset, applies fix links when given, and splits it.
pub fn load_split(cfg: &RunConfig) -> Result<Split> {
    let mut commits = load_commits(cfg.dataset_path()?)?;
    if let Some(links) = &cfg.fix_links {
        commits = label_defective_lines(commits, &load_fix_links(links)?)?;
    }
    split_commits(commits, cfg.train_fraction)
}

/// Builds the vocabulary, tunes and applies SMOTE, and fits the forest.
///
/// `train` must be in chronological order.
pub fn train_model(train: &[CommitRecord], cfg: &RunConfig) -> Result<(ForestModel, TuningReport)> {
    cfg.validate()?;
    let vocabulary = Vocabulary::build(train, cfg.min_token_count);
    info!(
        "vocabulary: {} tokens from {} commits",
        vocabulary.len(),
        train.len()
    );
    let features = assemble_feature_matrix(train, &vocabulary)?;
    let labels = train.iter().map(|c| c.label).collect();
    let data = LabeledMatrix::new(features, labels)?;
    let (rebalanced, smote, tuning) = tune_and_rebalance(&data, &cfg.smote, &cfg.de, cfg.seed)?;
    info!(
        "SMOTE k={} (validation AUC {:.4}); {} rows after rebalancing",
        tuning.chosen_k,
        tuning.validation_auc,
        rebalanced.len()
    );
    let forest = fit_forest(&rebalanced, cfg.n_trees, cfg.seed)?;
    Ok((
        ForestModel::new(vocabulary, forest, cfg.seed, smote)?,
        tuning,
    ))
}

/// Explains each commit in order; explanations are computed in parallel.
pub fn explain_all(
    model: &ForestModel,
    commits: &[&CommitRecord],
    cfg: &SurrogateConfig,
) -> Result<Vec<LineExplanation>> {
    commits
        .par_iter()
        .map(|c| explain_commit(model, c, cfg))
        .collect()
}

/// Commit-level measures on a labelled test set plus, where line ground truth
/// exists, line measures over the actual defect-introducing commits.
pub fn evaluate_model(
    model: &ForestModel,
    test: &[CommitRecord],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let ranking = rank_commits(model, test)?;
    let by_id: BTreeMap<&str, &CommitRecord> =
        test.iter().map(|c| (c.commit_id.as_str(), c)).collect();
    let probability: BTreeMap<&str, f64> = ranking
        .iter()
        .map(|r| (r.commit_id.as_str(), r.probability))
        .collect();
    let scores: Vec<f64> = test
        .iter()
        .map(|c| probability[c.commit_id.as_str()])
        .collect();
    let labels: Vec<bool> = test.iter().map(|c| c.label).collect();
    let effort = effort_items(&ranking, &by_id);

    let confusion = confusion_metrics(&scores, &labels, cfg.threshold)?;
    let commit_metrics = BTreeMap::from([
        ("auc".to_string(), auc(&scores, &labels)?),
        ("precision".to_string(), confusion.precision),
        ("recall".to_string(), confusion.recall),
        ("f1".to_string(), confusion.f1),
        ("far".to_string(), confusion.far),
        ("d2h".to_string(), confusion.d2h),
        ("pci_at_20_loc".to_string(), pci_at_effort(&effort, 0.2)?),
        (
            "effort_at_20_recall".to_string(),
            effort_at_recall(&effort, 0.2)?,
        ),
        ("popt".to_string(), popt(&effort)?),
    ]);

    let line_metrics = if test.iter().all(|c| c.defective_line_keys.is_none()) {
        warn!("no line-level ground truth; reporting commit-level measures only");
        None
    } else {
        let targets: Vec<&CommitRecord> = test
            .iter()
            .filter(|c| {
                c.label
                    && c.defective_line_keys
                        .as_ref()
                        .is_some_and(|k| !k.is_empty())
            })
            .collect();
        let explanations = explain_all(model, &targets, &cfg.surrogate)?;
        let rows = targets
            .iter()
            .zip(&explanations)
            .filter_map(|(c, e)| {
                line_metrics(e, c.defective_line_keys.as_ref()?, cfg.top10_denominator).map(
                    |metrics| CommitLineMetrics {
                        commit_id: c.commit_id.clone(),
                        metrics,
                    },
                )
            })
            .collect();
        Some(LineReport::from_rows(rows))
    };
    Ok(EvalReport {
        commit_metrics,
        line_metrics,
    })
}

/// Ranked commits paired with their actual labels and churn.
pub fn effort_items(
    ranking: &[RankedCommit],
    commits: &BTreeMap<&str, &CommitRecord>,
) -> Vec<EffortItem> {
    ranking
        .iter()
        .map(|r| EffortItem {
            churn: r.churn_loc,
            defective: commits[r.commit_id.as_str()].label,
        })
        .collect()
}
