//! Random forest of CART trees grown on Gini impurity.
//!
//! Trees are stored as flat node arrays with the root at index 0. Rows reach
//! the left child when `value <= threshold`. Token columns are sparse, so a
//! node gathers a candidate feature either by scanning the column's non-zeros
//! or by looking the value up in each of its rows, whichever is cheaper.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::METRIC_COUNT;
use crate::error::{Error, Result};
use crate::features::{FeatureRow, LabeledMatrix, Vocabulary};
use crate::rebalance::SmoteConfig;

/// Trees in a production forest.
pub const DEFAULT_TREES: usize = 300;

/// Gains at or below this are treated as no improvement.
const MIN_GAIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        #[serde(rename = "f")]
        feature: u32,
        #[serde(rename = "t")]
        threshold: f64,
        #[serde(rename = "l")]
        left: u32,
        #[serde(rename = "r")]
        right: u32,
    },
    /// Weighted `[clean, defective]` training counts.
    Leaf {
        #[serde(rename = "n")]
        class_counts: [f64; 2],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// Leaf reached by `row`.
    pub fn leaf_counts(&self, row: &FeatureRow, token_columns: usize) -> [f64; 2] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { class_counts } => return *class_counts,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row.value(*feature as usize, token_columns) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    /// Defective fraction of the leaf reached by `row`.
    pub fn leaf_fraction(&self, row: &FeatureRow, token_columns: usize) -> f64 {
        let [clean, defective] = self.leaf_counts(row, token_columns);
        defective / (clean + defective)
    }

    fn validate(&self, feature_count: usize) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::ModelFormat("empty tree".into()));
        }
        for node in &self.nodes {
            match node {
                TreeNode::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    if *feature as usize >= feature_count
                        || *left as usize >= n
                        || *right as usize >= n
                    {
                        return Err(Error::ModelFormat("tree node out of range".into()));
                    }
                }
                TreeNode::Leaf { class_counts } => {
                    let total = class_counts[0] + class_counts[1];
                    if total.is_nan() || total <= 0.0 {
                        return Err(Error::ModelFormat("empty leaf".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Column-major view of the token block: `(row, value)` pairs per column.
struct ColumnIndex {
    columns: Vec<Vec<(u32, f64)>>,
}

impl ColumnIndex {
    fn build(data: &LabeledMatrix) -> Self {
        let mut columns = vec![Vec::new(); data.features.token_columns];
        for (r, row) in data.features.rows.iter().enumerate() {
            for (c, v) in row.tokens.iter() {
                columns[c as usize].push((r as u32, v));
            }
        }
        Self { columns }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn gini(clean: f64, defective: f64) -> f64 {
    let total = clean + defective;
    if total <= 0.0 {
        return 0.0;
    }
    let (p0, p1) = (clean / total, defective / total);
    1.0 - p0 * p0 - p1 * p1
}

struct Grower<'a> {
    data: &'a LabeledMatrix,
    index: &'a ColumnIndex,
    weights: &'a [f64],
    max_features: usize,
    // stamp[row] == node id marks membership in the node being split
    stamp: Vec<u32>,
    scratch: Vec<(f64, f64, f64)>,
    nodes: Vec<TreeNode>,
}

impl<'a> Grower<'a> {
    fn class_weights(&self, rows: &[u32]) -> [f64; 2] {
        let mut w = [0.0; 2];
        for &r in rows {
            w[usize::from(self.data.labels[r as usize])] += self.weights[r as usize];
        }
        w
    }

    /// Fills `scratch` with `(value, clean_w, defective_w)` for every row in the node.
    fn gather(&mut self, feature: usize, rows: &[u32], node_id: u32, totals: [f64; 2]) {
        self.scratch.clear();
        let token_columns = self.data.features.token_columns;
        let feats = &self.data.features.rows;
        let labels = &self.data.labels;
        let weights = self.weights;
        let entry = |r: u32, v: f64| {
            let w = weights[r as usize];
            if labels[r as usize] {
                (v, 0.0, w)
            } else {
                (v, w, 0.0)
            }
        };
        if feature >= token_columns {
            let m = feature - token_columns;
            for &r in rows {
                self.scratch.push(entry(r, feats[r as usize].metrics[m]));
            }
            return;
        }
        let column = &self.index.columns[feature];
        let lookup_cost = rows.len() * (usize::BITS - rows.len().leading_zeros()).max(1) as usize;
        if lookup_cost < column.len() {
            for &r in rows {
                let v = feats[r as usize].tokens.get(feature as u32);
                if v != 0.0 {
                    self.scratch.push(entry(r, v));
                }
            }
        } else {
            for &(r, v) in column {
                if self.stamp[r as usize] == node_id {
                    self.scratch.push(entry(r, v));
                }
            }
        }
        // implicit zeros, aggregated into one entry
        let (mut c0, mut c1) = (0.0, 0.0);
        for &(_, a, b) in &self.scratch {
            c0 += a;
            c1 += b;
        }
        let zero = (0.0, totals[0] - c0, totals[1] - c1);
        if zero.1 > 0.0 || zero.2 > 0.0 {
            self.scratch.push(zero);
        }
    }

    fn best_threshold(&mut self, totals: [f64; 2]) -> Option<(f64, f64)> {
        let entries = &mut self.scratch;
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total = totals[0] + totals[1];
        let parent = gini(totals[0], totals[1]);
        let (mut l0, mut l1) = (0.0, 0.0);
        let mut best: Option<(f64, f64)> = None;
        for i in 0..entries.len() - 1 {
            l0 += entries[i].1;
            l1 += entries[i].2;
            let (lo, hi) = (entries[i].0, entries[i + 1].0);
            if lo == hi {
                continue;
            }
            let (r0, r1) = (totals[0] - l0, totals[1] - l1);
            let wl = (l0 + l1) / total;
            let wr = (r0 + r1) / total;
            let gain = parent - wl * gini(l0, l1) - wr * gini(r0, r1);
            if best.is_none_or(|(g, _)| gain > g) {
                let mid = lo + (hi - lo) / 2.0;
                let threshold = if mid < hi { mid } else { lo };
                best = Some((gain, threshold));
            }
        }
        best
    }

    fn find_split<R: Rng>(
        &mut self,
        rows: &[u32],
        node_id: u32,
        totals: [f64; 2],
        rng: &mut R,
    ) -> Option<Candidate> {
        let feature_count = self.data.features.feature_count();
        for &r in rows {
            self.stamp[r as usize] = node_id;
        }
        let candidates = sample(
            rng,
            feature_count,
            self.max_features.clamp(1, feature_count),
        );
        let mut best: Option<Candidate> = None;
        for feature in candidates.iter() {
            self.gather(feature, rows, node_id, totals);
            if let Some((gain, threshold)) = self.best_threshold(totals) {
                if best.is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        feature,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best.filter(|b| b.gain > MIN_GAIN)
    }

    fn grow<R: Rng>(mut self, roots: Vec<u32>, rng: &mut R) -> DecisionTree {
        let token_columns = self.data.features.token_columns;
        let mut stack = vec![(0usize, roots)];
        self.nodes.push(TreeNode::Leaf {
            class_counts: [0.0; 2],
        });
        while let Some((slot, rows)) = stack.pop() {
            let totals = self.class_weights(&rows);
            let pure = totals[0] == 0.0 || totals[1] == 0.0;
            let split = if pure || rows.len() < 2 {
                None
            } else {
                self.find_split(&rows, slot as u32 + 1, totals, rng)
            };
            let Some(split) = split else {
                self.nodes[slot] = TreeNode::Leaf {
                    class_counts: totals,
                };
                continue;
            };
            let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| {
                self.data.features.rows[r as usize].value(split.feature, token_columns)
                    <= split.threshold
            });
            let left = self.nodes.len();
            let right = left + 1;
            let placeholder = TreeNode::Leaf {
                class_counts: [0.0; 2],
            };
            self.nodes.push(placeholder.clone());
            self.nodes.push(placeholder);
            self.nodes[slot] = TreeNode::Split {
                feature: split.feature as u32,
                threshold: split.threshold,
                left: left as u32,
                right: right as u32,
            };
            stack.push((right, right_rows));
            stack.push((left, left_rows));
        }
        DecisionTree { nodes: self.nodes }
    }
}

/// Default candidate-feature count per node: `ceil(sqrt(feature_count))`.
pub fn default_max_features(feature_count: usize) -> usize {
    ((feature_count as f64).sqrt().ceil() as usize).max(1)
}

fn grow_tree<R: Rng>(
    data: &LabeledMatrix,
    index: &ColumnIndex,
    weights: &[f64],
    rng: &mut R,
    max_features: usize,
) -> DecisionTree {
    let roots: Vec<u32> = (0..data.len() as u32)
        .filter(|&r| weights[r as usize] > 0.0)
        .collect();
    let grower = Grower {
        data,
        index,
        weights,
        max_features,
        stamp: vec![0; data.len()],
        scratch: Vec::new(),
        nodes: Vec::new(),
    };
    grower.grow(roots, rng)
}

/// Grows one tree with per-row multiplicities (bootstrap counts).
pub fn fit_tree_weighted<R: Rng>(
    data: &LabeledMatrix,
    weights: &[f64],
    rng: &mut R,
    max_features: usize,
) -> Result<DecisionTree> {
    if weights.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            actual: weights.len(),
        });
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::InvalidInput(
            "tree needs at least one weighted row".into(),
        ));
    }
    Ok(grow_tree(
        data,
        &ColumnIndex::build(data),
        weights,
        rng,
        max_features,
    ))
}

/// Grows one tree on every row with unit weight.
pub fn fit_tree<R: Rng>(
    data: &LabeledMatrix,
    rng: &mut R,
    max_features: usize,
) -> Result<DecisionTree> {
    fit_tree_weighted(data, &vec![1.0; data.len()], rng, max_features)
}

/// Bootstrap multiplicities: `n` draws with replacement.
pub fn bootstrap_weights<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut weights = vec![0.0; n];
    for _ in 0..n {
        weights[rng.gen_range(0..n)] += 1.0;
    }
    weights
}

/// RNG for tree `tree_index` of a forest seeded with `seed`.
pub fn tree_rng(seed: u64, tree_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tree_index as u64)
}

/// A fitted ensemble of decision trees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub token_columns: usize,
    pub trees: Vec<DecisionTree>,
}

impl RandomForest {
    pub fn feature_count(&self) -> usize {
        self.token_columns + METRIC_COUNT
    }

    /// Mean defective fraction over the trees' leaves.
    pub fn predict_proba(&self, row: &FeatureRow) -> f64 {
        let sum: f64 = self
            .trees
            .iter()
            .map(|t| t.leaf_fraction(row, self.token_columns))
            .sum();
        sum / self.trees.len() as f64
    }

    pub fn predict_many(&self, rows: &[FeatureRow]) -> Vec<f64> {
        rows.par_iter().map(|r| self.predict_proba(r)).collect()
    }
}

/// Fits `n_trees` trees, each on its own bootstrap sample.
///
/// Tree `i` draws its bootstrap and feature samples from `tree_rng(seed, i)`,
/// so the result does not depend on how trees are scheduled across threads.
pub fn fit_forest(data: &LabeledMatrix, n_trees: usize, seed: u64) -> Result<RandomForest> {
    let (clean, defective) = data.class_counts();
    if clean == 0 || defective == 0 {
        return Err(Error::InvalidInput(
            "random forest needs both clean and defective rows".into(),
        ));
    }
    if n_trees == 0 {
        return Err(Error::InvalidInput(
            "random forest needs at least one tree".into(),
        ));
    }
    let index = ColumnIndex::build(data);
    let max_features = default_max_features(data.features.feature_count());
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree_rng(seed, i);
            let weights = bootstrap_weights(data.len(), &mut rng);
            grow_tree(data, &index, &weights, &mut rng, max_features)
        })
        .collect();
    Ok(RandomForest {
        token_columns: data.features.token_columns,
        trees,
    })
}

const MODEL_MAGIC: &str = "JITRISK-MODEL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained forest bundled with everything needed to score new commits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub vocabulary: Vocabulary,
    pub feature_count: usize,
    pub seed: u64,
    pub smote: SmoteConfig,
    pub forest: RandomForest,
}

impl ForestModel {
    pub fn new(
        vocabulary: Vocabulary,
        forest: RandomForest,
        seed: u64,
        smote: SmoteConfig,
    ) -> Result<Self> {
        let model = Self {
            feature_count: vocabulary.len() + METRIC_COUNT,
            vocabulary,
            seed,
            smote,
            forest,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocabulary.validate()?;
        if self.feature_count != self.vocabulary.len() + METRIC_COUNT
            || self.forest.feature_count() != self.feature_count
        {
            return Err(Error::ModelFormat(format!(
                "feature count {} does not match vocabulary size {} plus {METRIC_COUNT} metrics",
                self.feature_count,
                self.vocabulary.len()
            )));
        }
        if self.forest.trees.is_empty() {
            return Err(Error::ModelFormat("model has no trees".into()));
        }
        for tree in &self.forest.trees {
            tree.validate(self.feature_count)?;
        }
        Ok(())
    }

    pub fn n_trees(&self) -> usize {
        self.forest.trees.len()
    }

    /// Probability that `row` is defect-introducing.
    pub fn predict_proba(&self, row: &FeatureRow) -> Result<f64> {
        let dim = self.vocabulary.len();
        if let Some(&last) = row.tokens.cols.last() {
            if last as usize >= dim {
                return Err(Error::DimensionMismatch {
                    expected: self.feature_count,
                    actual: last as usize + METRIC_COUNT + 1,
                });
            }
        }
        Ok(self.forest.predict_proba(row))
    }

    /// `predict_proba >= threshold`.
    pub fn classify(&self, row: &FeatureRow, threshold: f64) -> Result<bool> {
        Ok(self.predict_proba(row)? >= threshold)
    }

    /// Writes the magic header line followed by the JSON body.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{MODEL_MAGIC} {MODEL_FORMAT_VERSION}").map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader
            .read_line(&mut header)
            .map_err(|e| Error::io(path, e))?;
        let version = header
            .trim_end()
            .strip_prefix(MODEL_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::ModelFormat(format!("{} is not a model file", path.display())))?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "model format version {version} is not supported (expected {MODEL_FORMAT_VERSION})"
            )));
        }
        let model: ForestModel = serde_json::from_reader(reader)?;
        model.validate()?;
        Ok(model)
    }
}
