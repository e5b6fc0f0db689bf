//! Commit-level, effort-aware and line-level evaluation measures, plus the
//! paired statistics used to compare line rankers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Smallest count `m` with `m >= fraction * n`, tolerant of float noise
/// (20% of 15 is 3, not 4).
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    (exact - 1e-9).ceil().max(0.0) as usize
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

/// Area under the ROC curve in its Mann-Whitney form, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidInput("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // rank sum of positives with average ranks for ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Root mean square of `1 - recall` and the false alarm rate.
pub fn distance_to_heaven(recall: f64, far: f64) -> f64 {
    (((1.0 - recall).powi(2) + far.powi(2)) / 2.0).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub far: f64,
    pub d2h: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Threshold-based measures; a probability `>= threshold` predicts defective.
///
/// Zero denominators yield 0.
pub fn confusion_metrics(
    probabilities: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ConfusionMetrics> {
    check_lengths(probabilities.len(), labels.len())?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &actual) in probabilities.iter().zip(labels) {
        match (p >= threshold, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let far = ratio(fp, fp + tn);
    Ok(ConfusionMetrics {
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        precision,
        recall,
        f1: f1_score(precision, recall),
        far,
        d2h: distance_to_heaven(recall, far),
    })
}

/// A commit as seen by the effort-aware measures, in inspection order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffortItem {
    pub churn: usize,
    pub defective: bool,
}

fn effort_totals(ranking: &[EffortItem]) -> Result<(usize, usize)> {
    let churn: usize = ranking.iter().map(|c| c.churn).sum();
    let defects = ranking.iter().filter(|c| c.defective).count();
    if defects == 0 {
        return Err(Error::InvalidInput(
            "effort-aware measures need at least one defect-introducing commit".into(),
        ));
    }
    if churn == 0 {
        return Err(Error::InvalidInput("total churn is zero".into()));
    }
    Ok((churn, defects))
}

/// Share of defect-introducing commits found within `budget_fraction` of total churn.
///
/// The commit whose churn would cross the budget is not inspected, and the
/// walk stops there.
pub fn pci_at_effort(ranking: &[EffortItem], budget_fraction: f64) -> Result<f64> {
    let (total, defects) = effort_totals(ranking)?;
    let budget = budget_fraction * total as f64;
    let mut spent = 0usize;
    let mut found = 0usize;
    for item in ranking {
        if (spent + item.churn) as f64 > budget {
            break;
        }
        spent += item.churn;
        found += usize::from(item.defective);
    }
    Ok(found as f64 / defects as f64)
}

/// Churn share inspected until `ceil(recall_target * defects)` defects are found.
pub fn effort_at_recall(ranking: &[EffortItem], recall_target: f64) -> Result<f64> {
    let (total, defects) = effort_totals(ranking)?;
    let needed = ceil_count(recall_target, defects);
    if needed == 0 {
        return Ok(0.0);
    }
    let mut spent = 0usize;
    let mut found = 0usize;
    for item in ranking {
        spent += item.churn;
        found += usize::from(item.defective);
        if found >= needed {
            break;
        }
    }
    Ok(spent as f64 / total as f64)
}

/// Twice the lift-chart area, scaled by total churn and defect count so that
/// it is an exact integer.
fn scaled_lift_area(ranking: &[EffortItem]) -> i128 {
    let mut area = 0i128;
    let mut found = 0i128;
    for item in ranking {
        let next = found + i128::from(item.defective);
        area += item.churn as i128 * (found + next);
        found = next;
    }
    area
}

fn actual_density(item: &EffortItem) -> f64 {
    if item.defective {
        1.0 / item.churn.max(1) as f64
    } else {
        0.0
    }
}

/// Normalized effort-aware lift: 1 for the optimal ranking, 0 for the worst.
///
/// The optimal ranking orders by actual defect density descending (smaller
/// churn first on ties), the worst ascending (larger churn first on ties).
/// Areas are trapezoids over (cumulative churn share, cumulative defect
/// share), computed in exact integer arithmetic.
pub fn popt(ranking: &[EffortItem]) -> Result<f64> {
    effort_totals(ranking)?;
    let mut optimal = ranking.to_vec();
    optimal.sort_by(|a, b| {
        actual_density(b)
            .total_cmp(&actual_density(a))
            .then(a.churn.cmp(&b.churn))
    });
    let mut worst = ranking.to_vec();
    worst.sort_by(|a, b| {
        actual_density(a)
            .total_cmp(&actual_density(b))
            .then(b.churn.cmp(&a.churn))
    });
    let (opt, ours, bad) = (
        scaled_lift_area(&optimal),
        scaled_lift_area(ranking),
        scaled_lift_area(&worst),
    );
    if opt == bad {
        return Ok(1.0);
    }
    Ok(1.0 - (opt - ours) as f64 / (opt - bad) as f64)
}

/// Denominator used by top-10 accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Top10Denominator {
    /// Number of actual defective lines.
    #[default]
    Truth,
    /// `min(10, number of actual defective lines)`.
    CappedTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineMetrics {
    pub top10_accuracy: f64,
    pub recall_at_20_loc: f64,
    pub effort_at_20_recall_line: f64,
    pub ifa: usize,
}

/// Line measures over a ranking given as defective flags in rank order.
///
/// Returns `None` when no line is defective.
pub fn line_metrics_from_flags(
    ranked: &[bool],
    denominator: Top10Denominator,
) -> Option<LineMetrics> {
    let lines = ranked.len();
    let truth = ranked.iter().filter(|&&d| d).count();
    if truth == 0 {
        return None;
    }
    let hits = |n: usize| ranked.iter().take(n).filter(|&&d| d).count();
    let top10_den = match denominator {
        Top10Denominator::Truth => truth,
        Top10Denominator::CappedTruth => truth.min(10),
    };
    let needed = ceil_count(0.2, truth).max(1);
    let mut seen = 0;
    let mut position = lines;
    for (i, &d) in ranked.iter().enumerate() {
        seen += usize::from(d);
        if seen >= needed {
            position = i + 1;
            break;
        }
    }
    Some(LineMetrics {
        top10_accuracy: hits(10) as f64 / top10_den as f64,
        recall_at_20_loc: hits(ceil_count(0.2, lines)) as f64 / truth as f64,
        effort_at_20_recall_line: position as f64 / lines as f64,
        ifa: ranked.iter().position(|&d| d).unwrap_or(lines),
    })
}

/// Median of the values; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

/// Largest sample size that uses the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Two-sided Wilcoxon signed-rank p-value for paired samples.
///
/// Zero differences are dropped and tied magnitudes get average ranks. Up to
/// [`WILCOXON_EXACT_MAX`] pairs the exact permutation distribution is used,
/// above it a normal approximation with tie correction.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len())?;
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::InvalidInput(format!(
            "Wilcoxon test needs at least 5 non-zero differences, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    // doubled ranks stay integral under averaging
    let mut doubled = vec![0usize; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        for &k in &order[i..=j] {
            doubled[k] = i + j + 2;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus2: usize = (0..n).filter(|&k| diffs[k] > 0.0).map(|k| doubled[k]).sum();

    if n <= WILCOXON_EXACT_MAX {
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let total = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w_plus2].iter().sum::<f64>() / total;
        let upper: f64 = counts[w_plus2..].iter().sum::<f64>() / total;
        return Ok((2.0 * lower.min(upper)).min(1.0));
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (w_plus2 as f64 / 2.0 - mean) / var.sqrt();
    Ok(erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectMagnitude {
    Negligible,
    Small,
    Medium,
    Large,
}

impl EffectMagnitude {
    pub fn from_delta(delta: f64) -> Self {
        match delta.abs() {
            d if d < 0.147 => Self::Negligible,
            d if d < 0.33 => Self::Small,
            d if d < 0.474 => Self::Medium,
            _ => Self::Large,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliffsDelta {
    pub delta: f64,
    pub magnitude: EffectMagnitude,
}

/// `(#{x > y} - #{x < y}) / (|x| |y|)` over all cross pairs.
pub fn cliffs_delta(x: &[f64], y: &[f64]) -> Result<CliffsDelta> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidInput(
            "Cliff's delta needs two non-empty samples".into(),
        ));
    }
    let mut sorted_y = y.to_vec();
    sorted_y.sort_by(f64::total_cmp);
    let mut dominance: i64 = 0;
    for &a in x {
        let below = sorted_y.partition_point(|&b| b < a) as i64;
        let not_above = sorted_y.partition_point(|&b| b <= a) as i64;
        let above = sorted_y.len() as i64 - not_above;
        dominance += below - above;
    }
    let delta = dominance as f64 / (x.len() * y.len()) as f64;
    Ok(CliffsDelta {
        delta,
        magnitude: EffectMagnitude::from_delta(delta),
    })
}

/// Per-commit line measures for one explained commit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitLineMetrics {
    pub commit_id: String,
    #[serde(flatten)]
    pub metrics: LineMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineReport {
    pub commits: usize,
    pub median: BTreeMap<String, f64>,
    pub per_commit: Vec<CommitLineMetrics>,
}

impl LineReport {
    pub fn from_rows(per_commit: Vec<CommitLineMetrics>) -> Self {
        let column = |f: fn(&LineMetrics) -> f64| -> f64 {
            let values: Vec<f64> = per_commit.iter().map(|r| f(&r.metrics)).collect();
            median(&values).unwrap_or(f64::NAN)
        };
        let median = BTreeMap::from([
            ("top10_accuracy".to_string(), column(|m| m.top10_accuracy)),
            (
                "recall_at_20_loc".to_string(),
                column(|m| m.recall_at_20_loc),
            ),
            (
                "effort_at_20_recall_line".to_string(),
                column(|m| m.effort_at_20_recall_line),
            ),
            ("ifa".to_string(), column(|m| m.ifa as f64)),
        ]);
        Self {
            commits: per_commit.len(),
            median,
            per_commit,
        }
    }
}

/// All evaluation measures for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub commit_metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_metrics: Option<LineReport>,
}

impl EvalReport {
    /// Flat `(metric, value)` rows: commit measures then line medians.
    pub fn flat_rows(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .commit_metrics
            .iter()
            .map(|(k, v)| (format!("commit.{k}"), *v))
            .collect();
        if let Some(lines) = &self.line_metrics {
            rows.push(("line.commits".into(), lines.commits as f64));
            rows.extend(
                lines
                    .median
                    .iter()
                    .map(|(k, v)| (format!("line.median.{k}"), *v)),
            );
        }
        rows
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        writer
            .write_record(["metric", "value"])
            .map_err(|e| csv_error(path, e))?;
        for (name, value) in self.flat_rows() {
            writer
                .write_record([name, value.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(layout: &[(usize, bool)]) -> Vec<EffortItem> {
        layout.iter()
            .map(|&(churn, defective)| EffortItem { churn, defective })
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(auc(&[0.3, 0.3], &[true, false]).unwrap(), 0.5);
        // pairs (0.9,0.2)>, (0.9,0.8)>, (0.1,0.2)<, (0.1,0.8)< → 2/4
        assert_eq!(
            auc(&[0.9, 0.2, 0.8, 0.1], &[true, false, false, true]).unwrap(),
            0.5
        );
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn paper_spot_values() {
        assert!((f1_score(0.27, 0.70) - 0.39).abs() <= 0.005);
        assert!((distance_to_heaven(0.96, 0.63) - 0.45).abs() <= 0.005);
        assert_eq!(distance_to_heaven(1.0, 0.0), 0.0);
    }

    #[test]
    fn confusion_conventions() {
        let m = confusion_metrics(&[0.1, 0.2, 0.3], &[true, false, false], 0.5).unwrap();
        assert_eq!((m.precision, m.f1, m.far), (0.0, 0.0, 0.0));
        assert_eq!(m.recall, 0.0);
        let m = confusion_metrics(&[0.5, 0.4], &[true, false], 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.far, m.d2h), (1.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn pci_examples() {
        assert_eq!(
            pci_at_effort(&items(&[(10, true), (90, false)]), 0.2).unwrap(),
            1.0
        );
        assert_eq!(
            pci_at_effort(&items(&[(90, false), (10, true)]), 0.2).unwrap(),
            0.0
        );
        // crossing commit stops the walk even if later ones would fit
        assert_eq!(
            pci_at_effort(&items(&[(30, true), (5, true), (65, false)]), 0.2).unwrap(),
            0.0
        );
        assert!(pci_at_effort(&items(&[(3, false)]), 0.2).is_err());
    }

    #[test]
    fn effort_examples() {
        let mut r = items(&[(5, true)]);
        r.extend(items(&[(19, false); 5]));
        assert_eq!(effort_at_recall(&r, 0.2).unwrap(), 0.05);
        let worst = items(&[(10, false), (10, false), (10, false), (10, true)]);
        assert_eq!(effort_at_recall(&worst, 0.2).unwrap(), 1.0);
        let uniform = items(&[(4, true); 10]);
        assert!((effort_at_recall(&uniform, 0.2).unwrap() - 0.2).abs() < 1e-12);
        // 20% of 15 defects is 3 commits
        let fifteen = items(&[(1, true); 15]);
        assert!((effort_at_recall(&fifteen, 0.2).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn popt_hand_instance() {
        // optimal: d1, d3, c2 → points (1/6,.5) (4/6,1) (1,1), area 0.75
        // reversed: c2, d3, d1 → (2/6,0) (5/6,.5) (1,1), area 0.25 = worst
        let optimal = items(&[(1, true), (3, true), (2, false)]);
        let reversed = items(&[(2, false), (3, true), (1, true)]);
        assert_eq!(popt(&optimal).unwrap(), 1.0);
        assert_eq!(popt(&reversed).unwrap(), 0.0);
        // middle: d3, d1, c2 → (3/6,.5) (4/6,1) (1,1), area 0.125+0.125+0.333.. = 7/12
        let middle = items(&[(3, true), (1, true), (2, false)]);
        let expected = 2.0 / 3.0;
        assert!((popt(&middle).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn popt_degenerate_is_one() {
        assert_eq!(popt(&items(&[(2, true), (2, true)])).unwrap(), 1.0);
    }

    #[test]
    fn line_metric_examples() {
        let m = line_metrics_from_flags(&[true, false, false], Top10Denominator::Truth).unwrap();
        assert_eq!(m.ifa, 0);
        let m = line_metrics_from_flags(&[false, false, true], Top10Denominator::Truth).unwrap();
        assert_eq!(m.ifa, 2);
        let mut flags = vec![false; 10];
        flags[1] = true;
        flags[7] = true;
        let m = line_metrics_from_flags(&flags, Top10Denominator::Truth).unwrap();
        assert_eq!(m.recall_at_20_loc, 0.5);
        assert_eq!(m.effort_at_20_recall_line, 0.2);
        assert_eq!(m.top10_accuracy, 1.0);
        assert!(line_metrics_from_flags(&[false, false], Top10Denominator::Truth).is_none());
    }

    #[test]
    fn capped_top10_denominator() {
        let mut flags = vec![true; 12];
        flags.extend([false; 8]);
        let literal = line_metrics_from_flags(&flags, Top10Denominator::Truth).unwrap();
        let capped = line_metrics_from_flags(&flags, Top10Denominator::CappedTruth).unwrap();
        assert_eq!(literal.top10_accuracy, 10.0 / 12.0);
        assert_eq!(capped.top10_accuracy, 1.0);
    }

    #[test]
    fn wilcoxon_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(wilcoxon_signed_rank(&x, &x).unwrap(), 1.0);
        let a = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let b = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5];
        assert!((wilcoxon_signed_rank(&a, &b).unwrap() - 0.03125).abs() < 1e-15);
        let sym_x = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        assert_eq!(wilcoxon_signed_rank(&sym_x, &[0.0; 6]).unwrap(), 1.0);
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration() {
        // independent oracle: enumerate all sign assignments
        let d = [0.5, -1.5, 2.0, 2.0, 3.5, -4.0, 5.0, 6.0];
        let ranks = [1.0, 2.0, 3.5, 3.5, 5.0, 6.0, 7.0, 8.0];
        let observed: f64 = d
            .iter()
            .zip(&ranks)
            .filter(|(x, _)| **x > 0.0)
            .map(|(_, r)| r)
            .sum();
        let (mut le, mut ge) = (0u32, 0u32);
        for mask in 0u32..256 {
            let w: f64 = (0..8)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| ranks[i])
                .sum();
            le += u32::from(w <= observed);
            ge += u32::from(w >= observed);
        }
        let expected = (2.0 * le.min(ge) as f64 / 256.0).min(1.0);
        let p = wilcoxon_signed_rank(&d, &[0.0; 8]).unwrap();
        assert!((p - expected).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_normal_approximation_is_significant_for_shift() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 + 1.0).collect();
        let y: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert!(wilcoxon_signed_rank(&x, &y).unwrap() < 1e-6);
    }

    #[test]
    fn cliffs_examples() {
        let all_greater = cliffs_delta(&[5.0, 6.0], &[1.0, 2.0]).unwrap();
        assert_eq!(
            (all_greater.delta, all_greater.magnitude),
            (1.0, EffectMagnitude::Large)
        );
        let same = cliffs_delta(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(
            (same.delta, same.magnitude),
            (0.0, EffectMagnitude::Negligible)
        );
        let small = cliffs_delta(&[1.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_eq!(
            (small.delta, small.magnitude),
            (-0.25, EffectMagnitude::Small)
        );
        assert!(cliffs_delta(&[], &[1.0]).is_err());
    }

    #[test]
    fn magnitude_boundaries() {
        assert_eq!(
            EffectMagnitude::from_delta(0.146),
            EffectMagnitude::Negligible
        );
        assert_eq!(EffectMagnitude::from_delta(0.147), EffectMagnitude::Small);
        assert_eq!(EffectMagnitude::from_delta(-0.33), EffectMagnitude::Medium);
        assert_eq!(EffectMagnitude::from_delta(0.474), EffectMagnitude::Large);
    }

    #[test]
    fn report_flattens_to_csv() {
        let report = EvalReport {
            commit_metrics: BTreeMap::from([("auc".into(), 0.75)]),
            line_metrics: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report.write_csv(&path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "metric,value\ncommit.auc,0.75\n"
        );
    }

    proptest! {
        #[test]
        fn auc_flips_under_negation(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..20),
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auc(&scores, &labels).unwrap();
            prop_assert!((a + auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pci_grows_with_budget(
            layout in prop::collection::vec((1usize..30, any::<bool>()), 1..10),
            lo in 0.0f64..1.0, extra in 0.0f64..1.0,
        ) {
            let ranking = items(&layout);
            prop_assume!(layout.iter().any(|s| s.1));
            let hi = (lo + extra).min(1.0);
            prop_assert!(pci_at_effort(&ranking, lo).unwrap() <= pci_at_effort(&ranking, hi).unwrap());
        }

        #[test]
        fn line_bounds(flags in prop::collection::vec(any::<bool>(), 1..20)) {
            let truth = flags.iter().filter(|&&f| f).count();
            prop_assume!(truth > 0);
            let m = line_metrics_from_flags(&flags, Top10Denominator::Truth).unwrap();
            prop_assert!(m.ifa <= flags.len() - truth);
            prop_assert!(m.effort_at_20_recall_line > 0.0 && m.effort_at_20_recall_line <= 1.0);
            prop_assert!((0.0..=1.0).contains(&m.top10_accuracy));
            prop_assert!((0.0..=1.0).contains(&m.recall_at_20_loc));
        }
    }
}
