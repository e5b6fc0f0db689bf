//! Effort-aware commit ranking and line-level explanations.
//!
//! A commit's added lines are ranked by summing per-token importance scores.
//! Scores come from a local linear surrogate fitted to the forest's outputs
//! on perturbed copies of the commit in which random subsets of its tokens
//! are removed.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CommitRecord, LineKey};
use crate::error::{Error, Result};
use crate::evaluate::{line_metrics_from_flags, LineMetrics, Top10Denominator};
use crate::features::{
    extract_bag_of_tokens, feature_row, metrics_array, tokenize_line, FeatureRow, SparseRow,
};
use crate::forest::ForestModel;

/// Predicted probability per changed line; zero churn counts as one line.
pub fn defect_density(probability: f64, churn_loc: usize) -> f64 {
    probability / churn_loc.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCommit {
    pub commit_id: String,
    pub probability: f64,
    pub churn_loc: usize,
    pub density: f64,
}

impl RankedCommit {
    pub fn new(commit_id: impl Into<String>, probability: f64, churn_loc: usize) -> Self {
        Self {
            commit_id: commit_id.into(),
            probability,
            churn_loc,
            density: defect_density(probability, churn_loc),
        }
    }
}

/// Sorts by density descending, ties by commit id.
pub fn sort_by_density(ranking: &mut [RankedCommit]) {
    ranking.sort_by(|a, b| {
        b.density
            .total_cmp(&a.density)
            .then_with(|| a.commit_id.cmp(&b.commit_id))
    });
}

/// Scores and density-ranks the given commits.
pub fn rank_commits(model: &ForestModel, commits: &[CommitRecord]) -> Result<Vec<RankedCommit>> {
    let mut ranking = commits
        .par_iter()
        .map(|c| {
            let row = feature_row(c, &model.vocabulary)?;
            Ok(RankedCommit::new(
                c.commit_id.clone(),
                model.predict_proba(&row)?,
                c.churn_loc,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    sort_by_density(&mut ranking);
    Ok(ranking)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub num_samples: usize,
    pub kernel_width: f64,
    /// Tokens kept by forward selection; `None` keeps every token of the commit.
    #[serde(default)]
    pub top_k_features: Option<usize>,
    pub seed: u64,
    /// Sum a token's score once per occurrence in a line instead of once.
    #[serde(default)]
    pub occurrence_weighted: bool,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            num_samples: 5000,
            kernel_width: 25.0,
            top_k_features: None,
            seed: 0,
            occurrence_weighted: false,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 10 {
            return Err(Error::InvalidInput(format!(
                "surrogate needs at least 10 samples, got {}",
                self.num_samples
            )));
        }
        if self.kernel_width.is_nan() || self.kernel_width <= 0.0 {
            return Err(Error::InvalidInput("kernel width must be positive".into()));
        }
        if self.top_k_features == Some(0) {
            return Err(Error::InvalidInput(
                "top_k_features must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Keep-masks over a commit's tokens; the first mask keeps everything.
///
/// Every later mask removes a uniformly chosen number `z` in `1..=tokens` of
/// tokens, picked as a random `z`-subset.
pub fn perturb_samples(token_count: usize, n: usize, seed: u64) -> Result<Vec<Vec<bool>>> {
    if token_count == 0 {
        return Err(Error::InvalidInput(
            "nothing to explain: commit has no tokens".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(n.max(1));
    masks.push(vec![true; token_count]);
    for _ in 1..n {
        let removed = rng.gen_range(1..=token_count);
        let mut mask = vec![true; token_count];
        for i in sample(&mut rng, token_count, removed).iter() {
            mask[i] = false;
        }
        masks.push(mask);
    }
    Ok(masks)
}

/// `exp(-d^2 / width^2)` with `d` the cosine distance between the masks.
///
/// An all-dropped mask is at distance 1.
pub fn kernel_weight(original: &[bool], perturbed: &[bool], width: f64) -> Result<f64> {
    if original.len() != perturbed.len() {
        return Err(Error::DimensionMismatch {
            expected: original.len(),
            actual: perturbed.len(),
        });
    }
    let dot = original
        .iter()
        .zip(perturbed)
        .filter(|(a, b)| **a && **b)
        .count() as f64;
    let na = original.iter().filter(|&&a| a).count() as f64;
    let nb = perturbed.iter().filter(|&&b| b).count() as f64;
    let distance = if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na.sqrt() * nb.sqrt())
    };
    Ok((-(distance * distance) / (width * width)).exp())
}

/// Ridge penalty of the surrogate regression.
pub const SURROGATE_RIDGE: f64 = 1e-3;

struct WeightedDesign {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    yy: f64,
}

impl WeightedDesign {
    /// Weighted, centred normal equations over `columns` of the masks.
    fn new(masks: &[Vec<bool>], targets: &[f64], weights: &[f64], columns: &[usize]) -> Self {
        let n = masks.len();
        let d = columns.len();
        let total: f64 = weights.iter().sum();
        let mut means = vec![0.0; d];
        let mut y_mean = 0.0;
        for i in 0..n {
            for (c, &j) in columns.iter().enumerate() {
                if masks[i][j] {
                    means[c] += weights[i];
                }
            }
            y_mean += weights[i] * targets[i];
        }
        means.iter_mut().for_each(|m| *m /= total);
        y_mean /= total;
        let mut xw = DMatrix::<f64>::zeros(n, d);
        let mut yw = DVector::<f64>::zeros(n);
        for i in 0..n {
            let s = weights[i].sqrt();
            for (c, &j) in columns.iter().enumerate() {
                let x = if masks[i][j] { 1.0 } else { 0.0 };
                xw[(i, c)] = s * (x - means[c]);
            }
            yw[i] = s * (targets[i] - y_mean);
        }
        Self {
            gram: xw.tr_mul(&xw),
            rhs: xw.tr_mul(&yw),
            yy: yw.dot(&yw),
        }
    }

    /// Ridge solution and weighted residual sum of squares on a column subset.
    fn fit(&self, subset: &[usize]) -> (DVector<f64>, f64) {
        let s = subset.len();
        let mut a = DMatrix::<f64>::zeros(s, s);
        let mut b = DVector::<f64>::zeros(s);
        for (p, &i) in subset.iter().enumerate() {
            b[p] = self.rhs[i];
            for (q, &j) in subset.iter().enumerate() {
                a[(p, q)] = self.gram[(i, j)];
            }
            a[(p, p)] += SURROGATE_RIDGE;
        }
        let beta = a
            .clone()
            .cholesky()
            .map(|c| c.solve(&b))
            .unwrap_or_else(|| {
                a.clone()
                    .lu()
                    .solve(&b)
                    .unwrap_or_else(|| DVector::zeros(s))
            });
        let rss = self.yy - 2.0 * beta.dot(&b) + beta.dot(&(&a * &beta))
            - SURROGATE_RIDGE * beta.dot(&beta);
        (beta, rss)
    }
}

/// Sparse local surrogate: forward selection of `k` features, then a weighted
/// ridge fit on them.
///
/// Returns one coefficient per mask column; unselected and never-varied
/// columns get 0, and constant targets give all zeros.
pub fn k_lasso(
    masks: &[Vec<bool>],
    targets: &[f64],
    weights: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    if masks.len() != targets.len() || masks.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: masks.len(),
            actual: targets.len().min(weights.len()),
        });
    }
    let distinct: BTreeSet<&Vec<bool>> = masks.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidInput(
            "surrogate needs at least two distinct samples".into(),
        ));
    }
    let d = masks[0].len();
    let mut coefficients = vec![0.0; d];
    let (lo, hi) = targets
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
            (lo.min(t), hi.max(t))
        });
    if lo == hi {
        return Ok(coefficients);
    }
    let varied: Vec<usize> = (0..d)
        .filter(|&j| masks.iter().any(|m| m[j] != masks[0][j]))
        .collect();
    if varied.is_empty() {
        return Ok(coefficients);
    }
    let design = WeightedDesign::new(masks, targets, weights, &varied);
    let all: Vec<usize> = (0..varied.len()).collect();
    let selected = if k >= varied.len() {
        all
    } else {
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for _ in 0..k {
            let mut best: Option<(f64, usize)> = None;
            for &c in all.iter().filter(|c| !chosen.contains(c)) {
                let mut trial = chosen.clone();
                trial.push(c);
                let (_, rss) = design.fit(&trial);
                if best.is_none_or(|(b, _)| rss < b) {
                    best = Some((rss, c));
                }
            }
            chosen.push(best.expect("candidates remain").1);
        }
        chosen.sort_unstable();
        chosen
    };
    let (beta, _) = design.fit(&selected);
    for (p, &c) in selected.iter().enumerate() {
        coefficients[varied[c]] = beta[p];
    }
    Ok(coefficients)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedLine {
    pub file: String,
    pub index: usize,
    pub text: String,
    pub score: f64,
}

/// Token importances for one commit and the resulting risk order of its added lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineExplanation {
    pub commit_id: String,
    pub probability: f64,
    pub density: f64,
    pub token_scores: BTreeMap<String, f64>,
    pub ranked_lines: Vec<RankedLine>,
}

/// Ranks a commit's added lines by the summed scores of their tokens.
///
/// Each distinct token counts once per line unless `occurrence_weighted`.
/// Ties keep (file, index) order.
pub fn rank_lines(
    commit: &CommitRecord,
    token_scores: &BTreeMap<String, f64>,
    occurrence_weighted: bool,
) -> Vec<RankedLine> {
    let mut lines: Vec<RankedLine> = commit
        .added_lines()
        .map(|(key, line)| {
            let mut tokens = tokenize_line(&line.text);
            if !occurrence_weighted {
                tokens.sort();
                tokens.dedup();
            }
            let score = tokens.iter().filter_map(|t| token_scores.get(t)).sum();
            RankedLine {
                file: key.path,
                index: key.index,
                text: line.text.clone(),
                score,
            }
        })
        .collect();
    lines.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.file.cmp(&b.file))
            .then_with(|| a.index.cmp(&b.index))
    });
    lines
}

/// Line measures of an explanation against the commit's true defective lines.
///
/// Returns `None` when the commit has no defective line.
pub fn line_metrics(
    explanation: &LineExplanation,
    truth: &BTreeSet<LineKey>,
    denominator: Top10Denominator,
) -> Option<LineMetrics> {
    let flags: Vec<bool> = explanation
        .ranked_lines
        .iter()
        .map(|l| truth.contains(&LineKey::new(l.file.clone(), l.index)))
        .collect();
    line_metrics_from_flags(&flags, denominator)
}

/// Explains a commit's prediction and ranks its added lines by risk.
pub fn explain_commit(
    model: &ForestModel,
    commit: &CommitRecord,
    cfg: &SurrogateConfig,
) -> Result<LineExplanation> {
    cfg.validate()?;
    if commit.added_line_count() == 0 {
        return Err(Error::InvalidInput(format!(
            "commit {} has no added lines to rank",
            commit.commit_id
        )));
    }
    let metrics = metrics_array(commit)?;
    // local token space: distinct in-vocabulary tokens of the commit
    let local: Vec<(String, u32, f64)> = extract_bag_of_tokens(commit)
        .into_iter()
        .filter_map(|(token, count)| {
            model
                .vocabulary
                .index_of(&token)
                .map(|col| (token, col as u32, count as f64))
        })
        .collect();
    if local.is_empty() {
        return Err(Error::NothingToExplain(commit.commit_id.clone()));
    }
    let masks = perturb_samples(local.len(), cfg.num_samples, cfg.seed)?;
    let targets: Vec<f64> = masks
        .par_iter()
        .map(|mask| {
            let pairs = local
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .map(|((_, col, count), _)| (*col, *count))
                .collect();
            let row = FeatureRow {
                tokens: SparseRow::from_pairs(pairs),
                metrics,
            };
            model.forest.predict_proba(&row)
        })
        .collect();
    let weights = masks
        .iter()
        .map(|m| kernel_weight(&masks[0], m, cfg.kernel_width))
        .collect::<Result<Vec<_>>>()?;
    let k = cfg.top_k_features.unwrap_or(local.len());
    let coefficients = if masks.iter().collect::<BTreeSet<_>>().len() < 2 {
        vec![0.0; local.len()]
    } else {
        k_lasso(&masks, &targets, &weights, k)?
    };
    let token_scores: BTreeMap<String, f64> = local
        .iter()
        .map(|(t, _, _)| t.clone())
        .zip(coefficients)
        .collect();
    let probability = targets[0];
    Ok(LineExplanation {
        commit_id: commit.commit_id.clone(),
        probability,
        density: defect_density(probability, commit.churn_loc),
        ranked_lines: rank_lines(commit, &token_scores, cfg.occurrence_weighted),
        token_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DiffLine, FileChange, METRIC_COUNT};
    use proptest::prelude::*;

    fn commit(lines: &[(&str, &str)]) -> CommitRecord {
        let mut files: Vec<FileChange> = Vec::new();
        for (path, text) in lines {
            if files.last().is_none_or(|f| f.path != *path) {
                files.push(FileChange::new(*path));
            }
            let f = files.last_mut().unwrap();
            let index = f.added_lines.len();
            f.added_lines.push(DiffLine {
                index,
                text: text.to_string(),
            });
        }
        CommitRecord::new("c", 1, files, vec![0.0; METRIC_COUNT], true)
    }

    #[test]
    fn density_examples() {
        assert_eq!(defect_density(0.8, 4), 0.2);
        assert_eq!(defect_density(0.0, 17), 0.0);
        assert_eq!(defect_density(0.6, 0), 0.6);
    }

    #[test]
    fn density_ordering_and_ties() {
        let mut r = vec![
            RankedCommit::new("big", 0.9, 100),
            RankedCommit::new("small", 0.5, 2),
        ];
        sort_by_density(&mut r);
        assert_eq!(r[0].commit_id, "small");
        let mut tie = vec![
            RankedCommit::new("b", 0.4, 2),
            RankedCommit::new("a", 0.2, 1),
        ];
        sort_by_density(&mut tie);
        assert_eq!(tie[0].commit_id, "a");
    }

    #[test]
    fn perturbation_shapes() {
        let one = perturb_samples(1, 20, 3).unwrap();
        assert_eq!(one[0], vec![true]);
        assert!(one[1..].iter().all(|m| m == &vec![false]));
        assert_eq!(perturb_samples(5, 1, 0).unwrap(), vec![vec![true; 5]]);
        assert_eq!(
            perturb_samples(6, 50, 9).unwrap(),
            perturb_samples(6, 50, 9).unwrap()
        );
        assert!(perturb_samples(0, 10, 0).is_err());
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(
            kernel_weight(&[true, true], &[true, true], 25.0).unwrap(),
            1.0
        );
        // cosine of (1,1) and (1,0) is 1/sqrt(2)
        let d: f64 = 1.0 - 1.0 / 2f64.sqrt();
        let expected = (-(d * d) / 625.0).exp();
        assert!(
            (kernel_weight(&[true, true], &[true, false], 25.0).unwrap() - expected).abs() < 1e-15
        );
        let dropped = kernel_weight(&[true, true], &[false, false], 25.0).unwrap();
        assert_eq!(dropped, (-1.0f64 / 625.0).exp());
    }

    /// Independent closed-form weighted least squares with intercept, via
    /// Gaussian elimination on the augmented normal equations.
    fn wls_oracle(masks: &[Vec<bool>], y: &[f64], w: &[f64]) -> Vec<f64> {
        let d = masks[0].len() + 1;
        let mut a = vec![vec![0.0; d + 1]; d];
        for ((m, &yi), &wi) in masks.iter().zip(y).zip(w) {
            let x: Vec<f64> = std::iter::once(1.0)
                .chain(m.iter().map(|&b| if b { 1.0 } else { 0.0 }))
                .collect();
            for p in 0..d {
                for q in 0..d {
                    a[p][q] += wi * x[p] * x[q];
                }
                a[p][d] += wi * x[p] * yi;
            }
        }
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, pivot);
            for row in 0..d {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    let pivot_row = a[col].clone();
                    for (x, p) in a[row].iter_mut().zip(&pivot_row).skip(col) {
                        *x -= f * p;
                    }
                }
            }
        }
        (1..d).map(|i| a[i][d] / a[i][i]).collect()
    }

    #[test]
    fn recovers_signs_of_a_planted_linear_rule() {
        let masks = perturb_samples(3, 400, 5).unwrap();
        let targets: Vec<f64> = masks
            .iter()
            .map(|m| 0.7 * f64::from(u8::from(m[0])) - 0.3 * f64::from(u8::from(m[1])))
            .collect();
        let weights: Vec<f64> = masks
            .iter()
            .map(|m| kernel_weight(&masks[0], m, 25.0).unwrap())
            .collect();
        let coef = k_lasso(&masks, &targets, &weights, 3).unwrap();
        let oracle = wls_oracle(&masks, &targets, &weights);
        assert!(coef[0] > 0.0 && coef[1] < 0.0);
        for (c, o) in coef.iter().zip(&oracle) {
            assert!((c - o).abs() < 1e-3, "{coef:?} vs {oracle:?}");
        }
        // forward selection with k=1 keeps the strongest token only
        let top1 = k_lasso(&masks, &targets, &weights, 1).unwrap();
        assert!(top1[0] > 0.0 && top1[1] == 0.0 && top1[2] == 0.0);
    }

    #[test]
    fn unvaried_token_and_constant_targets_get_zero() {
        let masks = vec![
            vec![true, true],
            vec![true, false],
            vec![true, true],
            vec![true, false],
        ];
        let w = vec![1.0; 4];
        let coef = k_lasso(&masks, &[0.9, 0.1, 0.8, 0.2], &w, 2).unwrap();
        assert_eq!(coef[0], 0.0);
        assert!(coef[1] > 0.0);
        assert_eq!(k_lasso(&masks, &[0.4; 4], &w, 2).unwrap(), vec![0.0, 0.0]);
        assert!(k_lasso(&[vec![true], vec![true]], &[0.1, 0.2], &[1.0, 1.0], 1).is_err());
    }

    #[test]
    fn line_scores_sum_distinct_tokens() {
        let c = commit(&[("f", "a c a"), ("f", "b")]);
        let scores = BTreeMap::from([("a".into(), 0.5), ("b".into(), -0.2), ("c".into(), 0.1)]);
        let ranked = rank_lines(&c, &scores, false);
        assert_eq!((ranked[0].index, ranked[0].score), (0, 0.6));
        assert_eq!((ranked[1].index, ranked[1].score), (1, -0.2));
        let weighted = rank_lines(&c, &scores, true);
        assert!((weighted[0].score - 1.1).abs() < 1e-12);
    }

    #[test]
    fn ties_fall_back_to_file_and_index() {
        let c = commit(&[("b.rs", "x"), ("a.rs", "y"), ("a.rs", "x")]);
        let ranked = rank_lines(&c, &BTreeMap::new(), false);
        let order: Vec<_> = ranked.iter().map(|l| (l.file.as_str(), l.index)).collect();
        assert_eq!(order, [("a.rs", 0), ("a.rs", 1), ("b.rs", 0)]);
    }

    proptest! {
        #[test]
        fn ranking_is_a_permutation_and_scale_free(
            lines in prop::collection::vec("[a-e ]{0,10}", 1..12),
            scores in prop::collection::vec(-8i32..8, 5),
            shift in -3i32..4,
        ) {
            let owned: Vec<(&str, &str)> = lines.iter().map(|l| ("f", l.as_str())).collect();
            let c = commit(&owned);
            let tokens = ["a", "b", "c", "d", "e"];
            let base: BTreeMap<String, f64> =
                tokens.iter().zip(&scores).map(|(t, &s)| (t.to_string(), s as f64 / 4.0)).collect();
            let scale = 2f64.powi(shift);
            let scaled: BTreeMap<String, f64> = base.iter().map(|(t, s)| (t.clone(), s * scale)).collect();
            let a = rank_lines(&c, &base, false);
            let b = rank_lines(&c, &scaled, false);
            let keys = |r: &[RankedLine]| r.iter().map(|l| (l.file.clone(), l.index)).collect::<Vec<_>>();
            prop_assert_eq!(keys(&a), keys(&b));
            let mut sorted = keys(&a);
            sorted.sort();
            prop_assert_eq!(sorted, (0..lines.len()).map(|i| ("f".to_string(), i)).collect::<Vec<_>>());
        }

        #[test]
        fn kernel_is_monotone_and_peaks_at_identity(
            masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 2..10),
        ) {
            let original = vec![true; 6];
            let identity = kernel_weight(&original, &original, 25.0).unwrap();
            let mut by_kept: Vec<(usize, f64)> = masks.iter()
                .map(|m| (m.iter().filter(|&&b| b).count(), kernel_weight(&original, m, 25.0).unwrap()))
                .collect();
            by_kept.sort_by_key(|p| p.0);
            for w in by_kept.windows(2) {
                // more kept tokens means smaller cosine distance
                prop_assert!(w[0].1 <= w[1].1);
            }
            prop_assert!(by_kept.iter().all(|p| p.1 <= identity));
        }
    }
}
