//! Commit ingestion, line-level ground truth and train/test partitioning.
//!
//! A dataset file is JSON lines, one commit per line:
//!
//! ```json
//! {"commit_id": "c1", "timestamp": 1500000000, "diff": "--- a/x\n...", "metrics": [14 numbers], "label": 1}
//! ```
//!
//! Optional fields: `churn` (checked against the diff), `split` (`"train"` or
//! `"test"`), and `defective_lines` (array of `[path, added_index]`).
//! Fix links live in a separate JSON-lines file with `introducing`, `fixing`
//! and `touched` fields.

mod diff;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use diff::{parse_unified_diff, render_unified_diff, DiffLine, FileChange};

/// Number of commit-level metrics carried by every commit.
pub const METRIC_COUNT: usize = 14;

/// Commit-level change metrics, in dataset column order.
pub const METRIC_NAMES: [&str; METRIC_COUNT] = [
    "ns", "nd", "nf", "entropy", "la", "ld", "lt", "fix", "ndev", "age", "nuc", "exp", "rexp",
    "sexp",
];

/// Address of an added line: file path plus its added-line index.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(String, usize)", into = "(String, usize)")]
pub struct LineKey {
    pub path: String,
    pub index: usize,
}

impl LineKey {
    pub fn new(path: impl Into<String>, index: usize) -> Self {
        Self {
            path: path.into(),
            index,
        }
    }
}

impl From<(String, usize)> for LineKey {
    fn from((path, index): (String, usize)) -> Self {
        Self { path, index }
    }
}

impl From<LineKey> for (String, usize) {
    fn from(key: LineKey) -> Self {
        (key.path, key.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Test,
}

/// A single commit with its changed lines, metrics and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CommitRecord {
    pub commit_id: String,
    pub timestamp: i64,
    pub files: Vec<FileChange>,
    pub churn_loc: usize,
    pub metrics: Vec<f64>,
    pub label: bool,
    pub defective_line_keys: Option<BTreeSet<LineKey>>,
    pub declared_split: Option<SplitRole>,
}

impl CommitRecord {
    /// Builds a record from parsed file changes, deriving `churn_loc`.
    pub fn new(
        commit_id: impl Into<String>,
        timestamp: i64,
        files: Vec<FileChange>,
        metrics: Vec<f64>,
        label: bool,
    ) -> Self {
        let churn_loc = files.iter().map(FileChange::churn).sum();
        Self {
            commit_id: commit_id.into(),
            timestamp,
            files,
            churn_loc,
            metrics,
            label,
            defective_line_keys: None,
            declared_split: None,
        }
    }

    /// All added lines with their keys, in file then index order.
    pub fn added_lines(&self) -> impl Iterator<Item = (LineKey, &DiffLine)> + '_ {
        self.files.iter().flat_map(|file| {
            file.added_lines
                .iter()
                .map(move |line| (LineKey::new(file.path.clone(), line.index), line))
        })
    }

    pub fn added_line_keys(&self) -> BTreeSet<LineKey> {
        self.added_lines().map(|(key, _)| key).collect()
    }

    pub fn added_line_count(&self) -> usize {
        self.files.iter().map(|f| f.added_lines.len()).sum()
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<()> {
        if self.timestamp <= 0 {
            return Err(Error::Validation(format!(
                "commit {}: timestamp must be positive, got {}",
                self.commit_id, self.timestamp
            )));
        }
        let churn: usize = self.files.iter().map(FileChange::churn).sum();
        if churn != self.churn_loc {
            return Err(Error::Validation(format!(
                "commit {}: churn {} does not match {} changed lines in the diff",
                self.commit_id, self.churn_loc, churn
            )));
        }
        for file in &self.files {
            for lines in [&file.added_lines, &file.removed_lines] {
                if lines.windows(2).any(|w| w[0].index >= w[1].index) {
                    return Err(Error::Validation(format!(
                        "commit {}: line indices in {} are not strictly ascending",
                        self.commit_id, file.path
                    )));
                }
            }
        }
        if let Some(keys) = &self.defective_line_keys {
            let added = self.added_line_keys();
            if let Some(stray) = keys.iter().find(|k| !added.contains(k)) {
                return Err(Error::Validation(format!(
                    "commit {}: defective line {}:{} is not an added line",
                    self.commit_id, stray.path, stray.index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CommitLine {
    commit_id: String,
    timestamp: i64,
    diff: String,
    metrics: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    churn: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<SplitRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    defective_lines: Option<Vec<LineKey>>,
}

impl From<&CommitRecord> for CommitLine {
    fn from(record: &CommitRecord) -> Self {
        CommitLine {
            commit_id: record.commit_id.clone(),
            timestamp: record.timestamp,
            diff: render_unified_diff(&record.files),
            metrics: record.metrics.clone(),
            label: Some(u8::from(record.label)),
            churn: Some(record.churn_loc),
            split: record.declared_split,
            defective_lines: record
                .defective_line_keys
                .as_ref()
                .map(|keys| keys.iter().cloned().collect()),
        }
    }
}

fn record_from_line(line: CommitLine) -> Result<CommitRecord> {
    let label = match line.label {
        Some(0) => false,
        Some(1) => true,
        Some(other) => {
            return Err(Error::Validation(format!(
                "commit {}: label must be 0 or 1, got {other}",
                line.commit_id
            )))
        }
        None => {
            return Err(Error::Validation(format!(
                "commit {}: missing label",
                line.commit_id
            )))
        }
    };
    let files = parse_unified_diff(&line.diff)?;
    let mut record = CommitRecord::new(line.commit_id, line.timestamp, files, line.metrics, label);
    if let Some(declared) = line.churn {
        if declared != record.churn_loc {
            return Err(Error::Validation(format!(
                "commit {}: declared churn {declared} but diff has {} changed lines",
                record.commit_id, record.churn_loc
            )));
        }
    }
    record.declared_split = line.split;
    record.defective_line_keys = line.defective_lines.map(|keys| keys.into_iter().collect());
    record.validate()?;
    Ok(record)
}

fn json_lines<T, F>(path: &Path, mut each: F) -> Result<()>
where
    T: serde::de::DeserializeOwned,
    F: FnMut(usize, T) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let value: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        each(lineno, value)?;
    }
    Ok(())
}

/// Reads a JSON-lines dataset, one [`CommitRecord`] per non-blank line.
pub fn load_commits(path: impl AsRef<Path>) -> Result<Vec<CommitRecord>> {
    let path = path.as_ref();
    let mut commits = Vec::new();
    let mut seen = HashSet::new();
    json_lines(path, |lineno, line: CommitLine| {
        let record = record_from_line(line).map_err(|e| match e {
            Error::Diff { line, message } => Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("diff line {line}: {message}"),
            },
            Error::Validation(message) => {
                Error::Validation(format!("{}:{lineno}: {message}", path.display()))
            }
            other => other,
        })?;
        if !seen.insert(record.commit_id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{lineno}: duplicate commit id {}",
                path.display(),
                record.commit_id
            )));
        }
        commits.push(record);
        Ok(())
    })?;
    Ok(commits)
}

/// Writes commits in the dataset format read by [`load_commits`].
pub fn save_commits(path: impl AsRef<Path>, commits: &[CommitRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in commits {
        serde_json::to_writer(&mut out, &CommitLine::from(record))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// A fixing commit's link back to the commit that introduced the defect.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixLink {
    #[serde(rename = "introducing")]
    pub introducing_commit_id: String,
    #[serde(rename = "fixing")]
    pub fixing_commit_id: String,
    #[serde(rename = "touched")]
    pub touched_keys: BTreeSet<LineKey>,
}

pub fn load_fix_links(path: impl AsRef<Path>) -> Result<Vec<FixLink>> {
    let path = path.as_ref();
    let mut links = Vec::new();
    json_lines(path, |lineno, link: FixLink| {
        if link.touched_keys.is_empty() {
            return Err(Error::Validation(format!(
                "{}:{lineno}: fix link {} -> {} touches no lines",
                path.display(),
                link.fixing_commit_id,
                link.introducing_commit_id
            )));
        }
        links.push(link);
        Ok(())
    })?;
    Ok(links)
}

pub fn save_fix_links(path: impl AsRef<Path>, links: &[FixLink]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for link in links {
        serde_json::to_writer(&mut out, link)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Marks the added lines that later fixing commits modified or deleted.
///
/// Every commit gets `Some(..)`: the union of its links' touched keys that are
/// added lines of the commit, or the empty set when nothing links to it.
pub fn label_defective_lines(
    mut commits: Vec<CommitRecord>,
    links: &[FixLink],
) -> Result<Vec<CommitRecord>> {
    let mut touched: BTreeMap<&str, BTreeSet<&LineKey>> = BTreeMap::new();
    for link in links {
        touched
            .entry(link.introducing_commit_id.as_str())
            .or_default()
            .extend(link.touched_keys.iter());
    }
    let known: HashSet<&str> = commits.iter().map(|c| c.commit_id.as_str()).collect();
    if let Some(dangling) = touched.keys().find(|id| !known.contains(*id)) {
        return Err(Error::Validation(format!(
            "fix link references unknown introducing commit {dangling}"
        )));
    }
    for commit in &mut commits {
        let added = commit.added_line_keys();
        let keys = touched
            .get(commit.commit_id.as_str())
            .map(|keys| {
                keys.iter()
                    .filter(|k| added.contains(**k))
                    .map(|k| (*k).clone())
                    .collect()
            })
            .unwrap_or_default();
        commit.defective_line_keys = Some(keys);
    }
    Ok(commits)
}

/// Disjoint train and test partitions.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<CommitRecord>,
    pub test: Vec<CommitRecord>,
}

fn chronological(commits: &mut [CommitRecord]) {
    commits.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.commit_id.cmp(&b.commit_id))
    });
}

/// Splits chronologically: the first `ceil(n * train_fraction)` commits train.
pub fn time_split(mut commits: Vec<CommitRecord>, train_fraction: f64) -> Result<Split> {
    if commits.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    chronological(&mut commits);
    let n_train = ((commits.len() as f64) * train_fraction).ceil() as usize;
    let test = commits.split_off(n_train.min(commits.len()));
    Ok(Split {
        train: commits,
        test,
    })
}

/// Uses the dataset's declared partition when present, else [`time_split`].
///
/// Both partitions come back in chronological order. A dataset where only
/// some records declare a split is rejected.
pub fn split_commits(commits: Vec<CommitRecord>, train_fraction: f64) -> Result<Split> {
    let declared = commits
        .iter()
        .filter(|c| c.declared_split.is_some())
        .count();
    if declared == 0 {
        return time_split(commits, train_fraction);
    }
    if declared != commits.len() {
        return Err(Error::Validation(format!(
            "{declared} of {} commits declare a split; declare it for all or none",
            commits.len()
        )));
    }
    let (mut train, mut test): (Vec<_>, Vec<_>) = commits
        .into_iter()
        .partition(|c| c.declared_split == Some(SplitRole::Train));
    chronological(&mut train);
    chronological(&mut test);
    Ok(Split { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn commit(id: &str, ts: i64, added: &[&str], removed: &[&str]) -> CommitRecord {
        let mut file = FileChange::new("f");
        for (i, t) in added.iter().enumerate() {
            file.added_lines.push(DiffLine {
                index: i,
                text: t.to_string(),
            });
        }
        for (i, t) in removed.iter().enumerate() {
            file.removed_lines.push(DiffLine {
                index: i,
                text: t.to_string(),
            });
        }
        CommitRecord::new(id, ts, vec![file], vec![0.0; METRIC_COUNT], false)
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn record_json(id: &str, churn: Option<usize>) -> String {
        let mut v = serde_json::json!({
            "commit_id": id,
            "timestamp": 100,
            "diff": "--- a/f\n+++ b/f\n@@ -1 +1,2 @@\n-x\n+y\n+z\n",
            "metrics": vec![1.0; 14],
            "label": 1,
        });
        if let Some(c) = churn {
            v["churn"] = c.into();
        }
        v.to_string()
    }

    #[test]
    fn loads_records_in_file_order() {
        let f = write_lines(&[
            record_json("a", None),
            record_json("b", Some(3)),
            record_json("c", None),
        ]);
        let commits = load_commits(f.path()).unwrap();
        let ids: Vec<_> = commits.iter().map(|c| c.commit_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(commits[0].churn_loc, 3);
        assert!(commits[0].label);
    }

    #[test]
    fn empty_file_gives_no_commits() {
        let f = write_lines(&[]);
        assert!(load_commits(f.path()).unwrap().is_empty());
    }

    #[test]
    fn churn_mismatch_is_a_validation_error() {
        let f = write_lines(&[record_json("a", Some(7))]);
        assert!(matches!(load_commits(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_record_names_its_line() {
        let f = write_lines(&[record_json("a", None), "{not json".into()]);
        match load_commits(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_label_is_a_validation_error() {
        let line = serde_json::json!({
            "commit_id": "a", "timestamp": 5, "diff": "", "metrics": vec![0.0; 14]
        });
        let f = write_lines(&[line.to_string()]);
        assert!(matches!(load_commits(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn non_positive_timestamp_is_rejected() {
        let line = serde_json::json!({
            "commit_id": "a", "timestamp": 0, "diff": "", "metrics": vec![0.0; 14], "label": 0
        });
        let f = write_lines(&[line.to_string()]);
        assert!(matches!(load_commits(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn labels_only_touched_added_lines() {
        let c = commit("c", 1, &["a", "b"], &[]);
        let link = FixLink {
            introducing_commit_id: "c".into(),
            fixing_commit_id: "fix".into(),
            touched_keys: [LineKey::new("f", 1), LineKey::new("f", 9)].into(),
        };
        let out = label_defective_lines(vec![c], &[link]).unwrap();
        assert_eq!(
            out[0].defective_line_keys,
            Some([LineKey::new("f", 1)].into())
        );
    }

    #[test]
    fn unlinked_commit_gets_empty_truth() {
        let out = label_defective_lines(vec![commit("c", 1, &["a"], &[])], &[]).unwrap();
        assert_eq!(out[0].defective_line_keys, Some(BTreeSet::new()));
    }

    #[test]
    fn links_are_unioned() {
        let c = commit("c", 1, &["a", "b"], &[]);
        let links: Vec<FixLink> = (0..2)
            .map(|i| FixLink {
                introducing_commit_id: "c".into(),
                fixing_commit_id: format!("fix{i}"),
                touched_keys: [LineKey::new("f", i)].into(),
            })
            .collect();
        let out = label_defective_lines(vec![c], &links).unwrap();
        assert_eq!(
            out[0].defective_line_keys,
            Some([LineKey::new("f", 0), LineKey::new("f", 1)].into())
        );
    }

    #[test]
    fn dangling_link_is_rejected() {
        let link = FixLink {
            introducing_commit_id: "ghost".into(),
            fixing_commit_id: "fix".into(),
            touched_keys: [LineKey::new("f", 0)].into(),
        };
        assert!(label_defective_lines(vec![commit("c", 1, &["a"], &[])], &[link]).is_err());
    }

    #[test]
    fn time_split_takes_ceiling_of_train_share() {
        let commits: Vec<_> = (0..10)
            .rev()
            .map(|i| commit(&format!("c{i}"), 100 + i, &["a"], &[]))
            .collect();
        let split = time_split(commits, 0.8).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (8, 2));
        let last_train = split.train.iter().map(|c| c.timestamp).max().unwrap();
        assert!(split.test.iter().all(|c| c.timestamp >= last_train));

        let one = time_split(vec![commit("x", 1, &[], &[])], 0.5).unwrap();
        assert_eq!((one.train.len(), one.test.len()), (1, 0));
    }

    #[test]
    fn time_split_breaks_ties_by_id() {
        let commits = vec![
            commit("b", 5, &[], &[]),
            commit("a", 5, &[], &[]),
            commit("c", 5, &[], &[]),
        ];
        let split = time_split(commits, 0.5).unwrap();
        let ids: Vec<_> = split.train.iter().map(|c| c.commit_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn declared_split_wins() {
        let mut early = commit("early", 1, &[], &[]);
        early.declared_split = Some(SplitRole::Test);
        let mut late = commit("late", 9, &[], &[]);
        late.declared_split = Some(SplitRole::Train);
        let split = split_commits(vec![early, late], 0.5).unwrap();
        assert_eq!(split.train[0].commit_id, "late");
        assert_eq!(split.test[0].commit_id, "early");
    }

    fn arb_lines() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[ -~]{0,12}", 0..5)
    }

    proptest! {
        #[test]
        fn records_round_trip_through_the_dataset_format(
            added in arb_lines(),
            removed in arb_lines(),
            ts in 1i64..2_000_000_000,
            label: bool,
            truth_mask in prop::collection::vec(any::<bool>(), 5),
        ) {
            let a: Vec<&str> = added.iter().map(String::as_str).collect();
            let r: Vec<&str> = removed.iter().map(String::as_str).collect();
            let mut c = commit("rt", ts, &a, &r);
            c.label = label;
            c.metrics = (0..14).map(|i| i as f64 * 0.25 - 1.0).collect();
            c.defective_line_keys = Some(
                (0..added.len()).filter(|&i| truth_mask[i]).map(|i| LineKey::new("f", i)).collect(),
            );
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.jsonl");
            save_commits(&path, std::slice::from_ref(&c)).unwrap();
            let back = load_commits(&path).unwrap();
            prop_assert_eq!(back, vec![c]);
        }

        #[test]
        fn one_sided_diffs_stay_one_sided(lines in prop::collection::vec("[a-z ]{0,8}", 1..6)) {
            let mut file = FileChange::new("p");
            for (i, t) in lines.iter().enumerate() {
                file.added_lines.push(DiffLine { index: i, text: t.clone() });
            }
            let parsed = parse_unified_diff(&render_unified_diff(&[file.clone()])).unwrap();
            prop_assert!(parsed[0].removed_lines.is_empty());
            prop_assert_eq!(parsed[0].added_lines.len(), lines.len());

            std::mem::swap(&mut file.added_lines, &mut file.removed_lines);
            let parsed = parse_unified_diff(&render_unified_diff(&[file])).unwrap();
            prop_assert!(parsed[0].added_lines.is_empty());
        }

        #[test]
        fn labelling_is_idempotent_and_order_free(
            picks in prop::collection::vec(prop::collection::btree_set(0usize..6, 1..4), 1..5),
        ) {
            let c = commit("c", 1, &["a", "b", "c", "d"], &[]);
            let links: Vec<FixLink> = picks.iter().enumerate().map(|(i, set)| FixLink {
                introducing_commit_id: "c".into(),
                fixing_commit_id: format!("f{i}"),
                touched_keys: set.iter().map(|&j| LineKey::new("f", j)).collect(),
            }).collect();
            let once = label_defective_lines(vec![c], &links).unwrap();
            let twice = label_defective_lines(once.clone(), &links).unwrap();
            let mut reversed = links.clone();
            reversed.reverse();
            let rev = label_defective_lines(once.clone(), &reversed).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(&once, &rev);
        }

        #[test]
        fn test_never_precedes_train(
            stamps in prop::collection::vec(1i64..50, 1..30),
            frac in 0.05f64..0.95,
        ) {
            let commits: Vec<_> = stamps.iter().enumerate()
                .map(|(i, &t)| commit(&format!("c{i:02}"), t, &[], &[]))
                .collect();
            let split = time_split(commits, frac).unwrap();
            let max_train = split.train.iter().map(|c| c.timestamp).max().unwrap();
            prop_assert!(split.test.iter().all(|c| c.timestamp >= max_train));
        }
    }
}
