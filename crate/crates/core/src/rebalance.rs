//! Class rebalancing with SMOTE, with the neighbour count tuned by
//! differential evolution against validation AUC.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::auc;
use crate::features::{FeatureRow, LabeledMatrix, SparseRow};
use crate::forest::fit_forest;

/// Upper bound of the neighbour-count search range.
pub const MAX_NEIGHBORS: usize = 20;

/// Trees in the forests used to score candidate neighbour counts.
pub const SURROGATE_TREES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoteConfig {
    pub k_neighbors: usize,
    /// Minority rows are synthesized up to `target_ratio * majority`.
    pub target_ratio: f64,
    pub minkowski_power: f64,
    /// Fraction of majority rows kept before oversampling; `None` keeps all.
    #[serde(default)]
    pub majority_undersample: Option<f64>,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            target_ratio: 1.0,
            minkowski_power: 2.0,
            majority_undersample: None,
        }
    }
}

impl SmoteConfig {
    pub fn with_k(&self, k_neighbors: usize) -> Self {
        Self {
            k_neighbors,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_NEIGHBORS).contains(&self.k_neighbors) {
            return Err(Error::InvalidInput(format!(
                "k_neighbors must be in 1..={MAX_NEIGHBORS}, got {}",
                self.k_neighbors
            )));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "target_ratio must be in (0, 1], got {}",
                self.target_ratio
            )));
        }
        if self.minkowski_power.is_nan() || self.minkowski_power < 1.0 {
            return Err(Error::InvalidInput(format!(
                "minkowski power must be >= 1, got {}",
                self.minkowski_power
            )));
        }
        if let Some(f) = self.majority_undersample {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "majority undersample fraction must be in (0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }

    /// Synthetic rows created per minority row (`m`), on average.
    pub fn per_sample_synthetics(&self, minority: usize, majority: usize) -> f64 {
        if minority == 0 {
            return 0.0;
        }
        synthetic_deficit(self.target_ratio, minority, majority) as f64 / minority as f64
    }
}

fn synthetic_deficit(target_ratio: f64, minority: usize, majority: usize) -> usize {
    let target = (target_ratio * majority as f64).round() as usize;
    target.saturating_sub(minority)
}

/// `(sum |a_i - b_i|^r)^(1/r)`.
pub fn minkowski_distance(a: &[f64], b: &[f64], r: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(r)).sum();
    Ok(sum.powf(1.0 / r))
}

fn pow_term(d: f64, r: f64) -> f64 {
    if r == 2.0 {
        d * d
    } else if r == 1.0 {
        d.abs()
    } else {
        d.abs().powf(r)
    }
}

/// Minkowski distance between two feature rows, walking the sparse blocks in step.
pub fn row_distance(a: &FeatureRow, b: &FeatureRow, r: f64) -> f64 {
    let mut sum = 0.0;
    let (ac, av) = (&a.tokens.cols, &a.tokens.vals);
    let (bc, bv) = (&b.tokens.cols, &b.tokens.vals);
    let (mut i, mut j) = (0, 0);
    while i < ac.len() || j < bc.len() {
        if j >= bc.len() || (i < ac.len() && ac[i] < bc[j]) {
            sum += pow_term(av[i], r);
            i += 1;
        } else if i >= ac.len() || bc[j] < ac[i] {
            sum += pow_term(bv[j], r);
            j += 1;
        } else {
            sum += pow_term(av[i] - bv[j], r);
            i += 1;
            j += 1;
        }
    }
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        sum += pow_term(x - y, r);
    }
    if r == 1.0 {
        sum
    } else if r == 2.0 {
        sum.sqrt()
    } else {
        sum.powf(1.0 / r)
    }
}

fn lerp(a: f64, b: f64, gap: f64) -> f64 {
    let v = a + gap * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// The point `base + gap * (neighbor - base)`.
pub fn interpolate(base: &FeatureRow, neighbor: &FeatureRow, gap: f64) -> FeatureRow {
    let mut pairs = Vec::with_capacity(base.tokens.nnz() + neighbor.tokens.nnz());
    let (ac, bc) = (&base.tokens.cols, &neighbor.tokens.cols);
    let (mut i, mut j) = (0, 0);
    while i < ac.len() || j < bc.len() {
        let (col, a, b) = if j >= bc.len() || (i < ac.len() && ac[i] < bc[j]) {
            i += 1;
            (ac[i - 1], base.tokens.vals[i - 1], 0.0)
        } else if i >= ac.len() || bc[j] < ac[i] {
            j += 1;
            (bc[j - 1], 0.0, neighbor.tokens.vals[j - 1])
        } else {
            i += 1;
            j += 1;
            (
                ac[i - 1],
                base.tokens.vals[i - 1],
                neighbor.tokens.vals[j - 1],
            )
        };
        pairs.push((col, lerp(a, b, gap)));
    }
    let mut metrics = base.metrics;
    for (m, n) in metrics.iter_mut().zip(&neighbor.metrics) {
        *m = lerp(*m, *n, gap);
    }
    FeatureRow {
        tokens: SparseRow::from_pairs(pairs),
        metrics,
    }
}

/// Training data after undersampling, with minority neighbour lists computed once.
pub(crate) struct PreparedSmote {
    data: LabeledMatrix,
    minority: Vec<usize>,
    // neighbours of each minority row (positions into `minority`), nearest first
    neighbors: Vec<Vec<usize>>,
    deficit: usize,
    rng: ChaCha8Rng,
}

impl PreparedSmote {
    pub(crate) fn new(train: &LabeledMatrix, cfg: &SmoteConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (clean, defective) = train.class_counts();
        if clean == defective {
            return Ok(Self::noop(train.clone(), rng));
        }
        let minority_label = defective < clean;
        let mut data = train.clone();
        if let Some(frac) = cfg.majority_undersample {
            let majority: Vec<usize> = (0..data.len())
                .filter(|&i| data.labels[i] != minority_label)
                .collect();
            let minority_n = data.len() - majority.len();
            let keep = ((frac * majority.len() as f64).round() as usize)
                .clamp(minority_n.min(majority.len()), majority.len());
            let mut kept: Vec<usize> = sample(&mut rng, majority.len(), keep)
                .into_iter()
                .map(|i| majority[i])
                .collect();
            kept.extend((0..data.len()).filter(|&i| data.labels[i] == minority_label));
            kept.sort_unstable();
            data = data.select(&kept);
        }
        let minority: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels[i] == minority_label)
            .collect();
        let majority_n = data.len() - minority.len();
        let deficit = synthetic_deficit(cfg.target_ratio, minority.len(), majority_n);
        if deficit == 0 {
            return Ok(Self::noop(data, rng));
        }
        if minority.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "SMOTE needs at least 2 minority rows, got {}",
                minority.len()
            )));
        }
        let keep = MAX_NEIGHBORS.min(minority.len() - 1);
        let rows = &data.features.rows;
        let r = cfg.minkowski_power;
        let neighbors = minority
            .par_iter()
            .enumerate()
            .map(|(a, &ra)| {
                let mut dists: Vec<(f64, usize)> = minority
                    .iter()
                    .enumerate()
                    .filter(|&(b, _)| b != a)
                    .map(|(b, &rb)| (row_distance(&rows[ra], &rows[rb], r), b))
                    .collect();
                dists.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                dists.truncate(keep);
                dists.into_iter().map(|(_, b)| b).collect()
            })
            .collect();
        Ok(Self {
            data,
            minority,
            neighbors,
            deficit,
            rng,
        })
    }

    fn noop(data: LabeledMatrix, rng: ChaCha8Rng) -> Self {
        Self {
            data,
            minority: Vec::new(),
            neighbors: Vec::new(),
            deficit: 0,
            rng,
        }
    }

    pub(crate) fn effective_k(&self, k: usize) -> usize {
        if self.deficit == 0 {
            return k;
        }
        k.min(self.minority.len() - 1)
    }

    /// Appends synthetic minority rows using `k` neighbours and gaps from `gap`.
    pub(crate) fn generate_with<G>(&self, k: usize, mut gap: G) -> LabeledMatrix
    where
        G: FnMut(&mut ChaCha8Rng) -> f64,
    {
        let mut out = self.data.clone();
        if self.deficit == 0 {
            return out;
        }
        let k = self.effective_k(k).max(1);
        let mut rng = self.rng.clone();
        let label = self.data.labels[self.minority[0]];
        out.features.rows.reserve(self.deficit);
        for s in 0..self.deficit {
            let base = rng.gen_range(0..self.minority.len());
            let nb = self.neighbors[base][rng.gen_range(0..k)];
            let g = gap(&mut rng);
            let rows = &self.data.features.rows;
            let row = interpolate(&rows[self.minority[base]], &rows[self.minority[nb]], g);
            out.features.push(format!("synthetic-{s}"), row);
            out.labels.push(label);
        }
        out
    }

    pub(crate) fn generate(&self, k: usize) -> LabeledMatrix {
        self.generate_with(k, |rng| rng.gen::<f64>())
    }
}

/// Oversamples the minority class by interpolating toward its nearest minority neighbours.
///
/// Original rows are kept in place and synthetic rows appended. When `k` is
/// not below the minority count it is clamped to `minority - 1`.
pub fn smote_oversample(
    train: &LabeledMatrix,
    cfg: &SmoteConfig,
    seed: u64,
) -> Result<LabeledMatrix> {
    let prepared = PreparedSmote::new(train, cfg, seed)?;
    let k = prepared.effective_k(cfg.k_neighbors);
    if k != cfg.k_neighbors {
        log::warn!(
            "SMOTE k={} exceeds the {} available minority neighbours; using k={k}",
            cfg.k_neighbors,
            prepared.minority.len().saturating_sub(1)
        );
    }
    Ok(prepared.generate(k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub population_size: usize,
    pub mutation_factor: f64,
    pub crossover_probability: f64,
    pub generations: usize,
    pub lower: u32,
    pub upper: u32,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            population_size: 10,
            mutation_factor: 0.7,
            crossover_probability: 0.3,
            generations: 10,
            lower: 1,
            upper: MAX_NEIGHBORS as u32,
            seed: 0,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 4 {
            return Err(Error::InvalidInput(
                "differential evolution needs a population of at least 4".into(),
            ));
        }
        if !(self.mutation_factor > 0.0 && self.mutation_factor < 2.0) {
            return Err(Error::InvalidInput(format!(
                "mutation factor must be in (0, 2), got {}",
                self.mutation_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover_probability) {
            return Err(Error::InvalidInput(format!(
                "crossover probability must be in [0, 1], got {}",
                self.crossover_probability
            )));
        }
        if self.lower > self.upper {
            return Err(Error::InvalidInput("empty search bounds".into()));
        }
        Ok(())
    }
}

/// One fitness evaluation; generation 0 is the initial population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeEvaluation {
    pub generation: usize,
    pub candidate: usize,
    pub k: u32,
    pub fitness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeOutcome {
    pub best_k: u32,
    pub best_fitness: f64,
    pub trace: Vec<DeEvaluation>,
}

/// Maximizes an integer fitness with DE/rand/1/bin.
///
/// The search variable is real-valued within the bounds and rounded to the
/// nearest integer at evaluation. Each integer is evaluated at most once;
/// evaluations within a generation run in parallel and are reduced in
/// candidate order. The returned optimum is the first best seen.
pub fn de_optimize<F>(fitness: F, cfg: &DeConfig) -> Result<DeOutcome>
where
    F: Fn(u32) -> f64 + Sync,
{
    cfg.validate()?;
    const DIMS: usize = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = (cfg.lower as f64, cfg.upper as f64);
    let to_k = |x: &[f64; DIMS]| x[0].clamp(lo, hi).round() as u32;
    let np = cfg.population_size;

    // latin hypercube initialisation
    let mut strata: Vec<usize> = (0..np).collect();
    strata.shuffle(&mut rng);
    let mut population: Vec<[f64; DIMS]> = strata
        .iter()
        .map(|&s| [lo + (s as f64 + rng.gen::<f64>()) / np as f64 * (hi - lo)])
        .collect();

    let mut cache: HashMap<u32, f64> = HashMap::new();
    let mut trace = Vec::new();
    let mut best: Option<(u32, f64)> = None;
    let mut evaluate =
        |generation: usize, candidates: &[[f64; DIMS]], trace: &mut Vec<DeEvaluation>| {
            let mut fresh: Vec<u32> = candidates
                .iter()
                .map(to_k)
                .filter(|k| !cache.contains_key(k))
                .collect();
            fresh.sort_unstable();
            fresh.dedup();
            let scored: Vec<(u32, f64)> = fresh
                .par_iter()
                .map(|&k| {
                    let f = fitness(k);
                    (k, if f.is_nan() { f64::NEG_INFINITY } else { f })
                })
                .collect();
            cache.extend(scored);
            candidates
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let k = to_k(x);
                    let f = cache[&k];
                    trace.push(DeEvaluation {
                        generation,
                        candidate: i,
                        k,
                        fitness: f,
                    });
                    if best.is_none_or(|(_, b)| f > b) {
                        best = Some((k, f));
                    }
                    f
                })
                .collect::<Vec<f64>>()
        };

    let mut scores = evaluate(0, &population, &mut trace);
    for generation in 1..=cfg.generations {
        let trials: Vec<[f64; DIMS]> = (0..np)
            .map(|i| {
                let mut picks = [0usize; 3];
                for p in 0..3 {
                    picks[p] = loop {
                        let c = rng.gen_range(0..np);
                        if c != i && !picks[..p].contains(&c) {
                            break c;
                        }
                    };
                }
                let [a, b, c] = picks.map(|p| population[p]);
                let j_rand = rng.gen_range(0..DIMS);
                let mut trial = population[i];
                for j in 0..DIMS {
                    if rng.gen::<f64>() < cfg.crossover_probability || j == j_rand {
                        trial[j] = (a[j] + cfg.mutation_factor * (b[j] - c[j])).clamp(lo, hi);
                    }
                }
                trial
            })
            .collect();
        let trial_scores = evaluate(generation, &trials, &mut trace);
        for i in 0..np {
            if trial_scores[i] >= scores[i] {
                population[i] = trials[i];
                scores[i] = trial_scores[i];
            }
        }
    }
    let (best_k, best_fitness) = best.expect("population is non-empty");
    Ok(DeOutcome {
        best_k,
        best_fitness,
        trace,
    })
}

/// Partition of the training rows used to score neighbour counts.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerSplit {
    pub inner_train: Vec<usize>,
    pub validation: Vec<usize>,
    /// `true` when the chronological split lacked a class and a stratified one was used.
    pub stratified_fallback: bool,
}

fn has_both(labels: &[bool], idx: &[usize]) -> bool {
    idx.iter().any(|&i| labels[i]) && idx.iter().any(|&i| !labels[i])
}

/// Chronological 80/20 split of the (time-ordered) training rows.
///
/// Falls back to a seeded stratified 80/20 split when either side lacks a class.
pub fn inner_validation_split(labels: &[bool], seed: u64) -> Result<InnerSplit> {
    let n = labels.len();
    let cut = ((n as f64) * 0.8).ceil() as usize;
    let inner_train: Vec<usize> = (0..cut).collect();
    let validation: Vec<usize> = (cut..n).collect();
    if has_both(labels, &inner_train) && has_both(labels, &validation) {
        return Ok(InnerSplit {
            inner_train,
            validation,
            stratified_fallback: false,
        });
    }
    log::warn!("chronological validation split lacks a class; using a stratified random split");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inner_train = Vec::new();
    let mut validation = Vec::new();
    for class in [false, true] {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        // keep at least one row of each class on both sides when possible
        let take = (((members.len() as f64) * 0.8).ceil() as usize)
            .min(members.len().saturating_sub(1))
            .max(members.len().min(1));
        validation.extend_from_slice(&members[take..]);
        members.truncate(take);
        inner_train.extend(members);
    }
    inner_train.sort_unstable();
    validation.sort_unstable();
    if !has_both(labels, &inner_train) || !has_both(labels, &validation) {
        return Err(Error::InvalidInput(
            "too few rows of each class to form a validation split".into(),
        ));
    }
    Ok(InnerSplit {
        inner_train,
        validation,
        stratified_fallback: true,
    })
}

/// Outcome of neighbour-count tuning, emitted as the JSON tuning report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub chosen_k: u32,
    pub validation_auc: f64,
    pub inner_train_rows: usize,
    pub validation_rows: usize,
    pub stratified_fallback: bool,
    pub surrogate_trees: usize,
    pub smote: SmoteConfig,
    pub de: DeConfig,
    pub trace: Vec<DeEvaluation>,
}

/// Validation AUC of a surrogate forest trained on `SMOTE(inner, k)`.
pub(crate) fn surrogate_fitness(
    prepared: &PreparedSmote,
    validation: &LabeledMatrix,
    k: usize,
    trees: usize,
    seed: u64,
) -> Result<f64> {
    let resampled = prepared.generate(k);
    let forest = fit_forest(&resampled, trees, seed)?;
    let scores = forest.predict_many(&validation.features.rows);
    auc(&scores, &validation.labels)
}

/// Tunes SMOTE's `k` by DE on an inner split, then rebalances the full training set.
///
/// `train` must be in chronological order.
pub fn tune_and_rebalance(
    train: &LabeledMatrix,
    smote: &SmoteConfig,
    de: &DeConfig,
    seed: u64,
) -> Result<(LabeledMatrix, SmoteConfig, TuningReport)> {
    let (clean, defective) = train.class_counts();
    if clean == 0 || defective == 0 {
        return Err(Error::InvalidInput(
            "training data needs both clean and defective commits".into(),
        ));
    }
    let split = inner_validation_split(&train.labels, seed)?;
    let inner = train.select(&split.inner_train);
    let validation = train.select(&split.validation);
    let prepared = PreparedSmote::new(&inner, smote, seed)?;

    let failure = std::sync::Mutex::new(None);
    let outcome = de_optimize(
        |k| match surrogate_fitness(&prepared, &validation, k as usize, SURROGATE_TREES, seed) {
            Ok(v) => v,
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
                f64::NEG_INFINITY
            }
        },
        de,
    )?;
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }

    let chosen = smote.with_k(outcome.best_k as usize);
    let rebalanced = smote_oversample(train, &chosen, seed)?;
    let report = TuningReport {
        chosen_k: outcome.best_k,
        validation_auc: outcome.best_fitness,
        inner_train_rows: split.inner_train.len(),
        validation_rows: split.validation.len(),
        stratified_fallback: split.stratified_fallback,
        surrogate_trees: SURROGATE_TREES,
        smote: chosen.clone(),
        de: de.clone(),
        trace: outcome.trace,
    };
    Ok((rebalanced, chosen, report))
}
