//! Bag-of-tokens featurization.
//!
//! Changed lines are tokenized with string and numeric literals collapsed to
//! `<STR>` and `<NUM>`, counted per commit, and mapped through a vocabulary
//! frozen on the training commits. Column layout of a feature row: token
//! columns `0..vocab.len()` followed by the commit metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CommitRecord, METRIC_COUNT};
use crate::error::{Error, Result};

pub const STR_TOKEN: &str = "<STR>";
pub const NUM_TOKEN: &str = "<NUM>";

fn is_word(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Consumes a numeric literal starting at `start`, returning the end offset.
///
/// Accepts hex (`0x1F`), integers, decimals (`1.5`, `.5`) and exponent
/// forms; a trailing type suffix (`10L`, `1.0f`, `3u8`) is swallowed.
fn numeric_end(chars: &[char], start: usize) -> usize {
    let mut i = start;
    let digits = |i: &mut usize, hex: bool| {
        while *i < chars.len()
            && (chars[*i].is_ascii_digit()
                || chars[*i] == '_'
                || (hex && chars[*i].is_ascii_hexdigit()))
        {
            *i += 1;
        }
    };
    if chars[i] == '0' && i + 1 < chars.len() && matches!(chars[i + 1], 'x' | 'X') {
        i += 2;
        digits(&mut i, true);
    } else {
        digits(&mut i, false);
        if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
            i += 1;
            digits(&mut i, false);
        }
        if i < chars.len() && matches!(chars[i], 'e' | 'E') {
            let mut j = i + 1;
            if j < chars.len() && matches!(chars[j], '+' | '-') {
                j += 1;
            }
            if j < chars.len() && chars[j].is_ascii_digit() {
                i = j;
                digits(&mut i, false);
            }
        }
    }
    while i < chars.len() && is_word(chars[i]) {
        i += 1;
    }
    i
}

/// Finds the closing quote of a literal opened at `start`, honouring escapes.
fn literal_end(chars: &[char], start: usize) -> Option<usize> {
    let quote = chars[start];
    let mut i = start + 1;
    while i < chars.len() {
        match chars[i] {
            '\\' => i += 2,
            c if c == quote => return Some(i + 1),
            _ => i += 1,
        }
    }
    None
}

/// Splits one source line into code tokens.
///
/// Quoted spans become `<STR>`, numeric literals become `<NUM>`, and the
/// rest is split on every character outside `[A-Za-z0-9_]`. Case is kept.
pub fn tokenize_line(line: &str) -> Vec<String> {
    let chars: Vec<char> = line.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '"' || c == '\'' {
            if let Some(end) = literal_end(&chars, i) {
                tokens.push(STR_TOKEN.to_string());
                i = end;
                continue;
            }
            // unterminated quote: drop it like any other punctuation
            i += 1;
        } else if c.is_ascii_digit()
            || (c == '.' && i + 1 < chars.len() && chars[i + 1].is_ascii_digit())
        {
            // a leading `.` only starts a number when not a member access
            if c == '.' && i > 0 && is_word(chars[i - 1]) {
                i += 1;
                continue;
            }
            i = numeric_end(&chars, i);
            tokens.push(NUM_TOKEN.to_string());
        } else if is_word(c) {
            let start = i;
            while i < chars.len() && is_word(chars[i]) {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
        } else {
            i += 1;
        }
    }
    tokens
}

/// Token counts over every added and removed line of a commit.
pub fn extract_bag_of_tokens(commit: &CommitRecord) -> BTreeMap<String, usize> {
    let mut bag = BTreeMap::new();
    for file in &commit.files {
        for line in file.added_lines.iter().chain(&file.removed_lines) {
            for token in tokenize_line(&line.text) {
                *bag.entry(token).or_insert(0) += 1;
            }
        }
    }
    bag
}

/// Token-to-column map, frozen on training data.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    token_to_index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens whose total training count reaches `min_count`.
    ///
    /// Columns are assigned in lexicographic token order.
    pub fn build(train: &[CommitRecord], min_count: usize) -> Self {
        let mut totals: BTreeMap<String, usize> = BTreeMap::new();
        for bag in train
            .par_iter()
            .map(extract_bag_of_tokens)
            .collect::<Vec<_>>()
        {
            for (token, count) in bag {
                *totals.entry(token).or_insert(0) += count;
            }
        }
        let token_to_index = totals
            .into_iter()
            .filter(|&(_, count)| count >= min_count.max(1))
            .map(|(token, _)| token)
            .enumerate()
            .map(|(i, token)| (token, i))
            .collect();
        Self { token_to_index }
    }

    pub fn from_tokens<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Self {
        let mut sorted: Vec<String> = tokens.into_iter().map(Into::into).collect();
        sorted.sort();
        sorted.dedup();
        Self {
            token_to_index: sorted
                .into_iter()
                .enumerate()
                .map(|(i, t)| (t, i))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.token_to_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_index.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_index.contains_key(token)
    }

    /// Tokens in column order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.token_to_index.keys().map(String::as_str)
    }

    /// Checks that columns form a bijection onto `0..len`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (token, &idx) in &self.token_to_index {
            if idx >= seen.len() || std::mem::replace(&mut seen[idx], true) {
                return Err(Error::ModelFormat(format!(
                    "vocabulary column {idx} for `{token}` is out of range or repeated"
                )));
            }
        }
        Ok(())
    }
}

/// Sparse token counts: column indices strictly ascending, values non-zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl SparseRow {
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_by_key(|&(c, _)| c);
        pairs.retain(|&(_, v)| v != 0.0);
        let (cols, vals) = pairs.into_iter().unzip();
        Self { cols, vals }
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn get(&self, col: u32) -> f64 {
        match self.cols.binary_search(&col) {
            Ok(pos) => self.vals[pos],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.cols.iter().copied().zip(self.vals.iter().copied())
    }

    pub fn sum(&self) -> f64 {
        self.vals.iter().sum()
    }
}

/// One commit's full feature vector: token counts plus metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub tokens: SparseRow,
    pub metrics: [f64; METRIC_COUNT],
}

impl FeatureRow {
    /// Value of feature `index` in the combined token + metric layout.
    pub fn value(&self, index: usize, token_columns: usize) -> f64 {
        if index < token_columns {
            self.tokens.get(index as u32)
        } else {
            self.metrics[index - token_columns]
        }
    }

    /// Dense copy of the combined vector.
    pub fn to_dense(&self, token_columns: usize) -> Vec<f64> {
        let mut out = vec![0.0; token_columns + METRIC_COUNT];
        for (c, v) in self.tokens.iter() {
            out[c as usize] = v;
        }
        out[token_columns..].copy_from_slice(&self.metrics);
        out
    }
}

/// Rows of commit features over a fixed vocabulary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureMatrix {
    pub token_columns: usize,
    pub rows: Vec<FeatureRow>,
    pub row_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn empty(token_columns: usize) -> Self {
        Self {
            token_columns,
            rows: Vec::new(),
            row_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Total number of feature columns.
    pub fn feature_count(&self) -> usize {
        self.token_columns + METRIC_COUNT
    }

    pub fn push(&mut self, id: impl Into<String>, row: FeatureRow) {
        self.rows.push(row);
        self.row_ids.push(id.into());
    }

    /// Rows at the given positions, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            token_columns: self.token_columns,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            row_ids: indices.iter().map(|&i| self.row_ids[i].clone()).collect(),
        }
    }
}

/// Feature rows paired with their defect labels (`true` = defect-introducing).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledMatrix {
    pub features: FeatureMatrix,
    pub labels: Vec<bool>,
}

impl LabeledMatrix {
    pub fn new(features: FeatureMatrix, labels: Vec<bool>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                actual: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of (clean, defective) rows.
    pub fn class_counts(&self) -> (usize, usize) {
        let defective = self.labels.iter().filter(|&&l| l).count();
        (self.labels.len() - defective, defective)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub(crate) fn metrics_array(commit: &CommitRecord) -> Result<[f64; METRIC_COUNT]> {
    commit.metrics.as_slice().try_into().map_err(|_| {
        Error::Validation(format!(
            "commit {}: expected {METRIC_COUNT} metrics, got {}",
            commit.commit_id,
            commit.metrics.len()
        ))
    })
}

/// Projects a token bag onto the vocabulary, dropping unknown tokens.
pub fn vectorize_bag(bag: &BTreeMap<String, usize>, vocab: &Vocabulary) -> SparseRow {
    SparseRow::from_pairs(
        bag.iter()
            .filter_map(|(token, &count)| vocab.index_of(token).map(|i| (i as u32, count as f64)))
            .collect(),
    )
}

/// Featurizes one commit.
pub fn feature_row(commit: &CommitRecord, vocab: &Vocabulary) -> Result<FeatureRow> {
    Ok(FeatureRow {
        metrics: metrics_array(commit)?,
        tokens: vectorize_bag(&extract_bag_of_tokens(commit), vocab),
    })
}

/// Featurizes commits in order; rows are computed in parallel.
pub fn assemble_feature_matrix(
    commits: &[CommitRecord],
    vocab: &Vocabulary,
) -> Result<FeatureMatrix> {
    let rows = commits
        .par_iter()
        .map(|c| feature_row(c, vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMatrix {
        token_columns: vocab.len(),
        rows,
        row_ids: commits.iter().map(|c| c.commit_id.clone()).collect(),
    })
}
