//! Clustering metrics (CACC, ARI) and classification metrics (ACC, macro Recall, macro
//! Precision, F1).
//!
//! Ground-truth labels are 0-based class indices. Pseudo-labels follow the clustering
//! convention: `-1` marks noise, clusters are numbered from 1. Noise samples are dropped
//! before any clustering metric is computed, so denominators are the clustered count N_C.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cluster::NOISE;
use crate::error::{Error, Result};

/// K x m table of co-occurrence counts between classes (rows) and clusters (columns).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    /// Distinct class labels, ascending. Row `i` corresponds to `classes[i]`.
    pub classes: Vec<usize>,
    /// Distinct cluster ids, ascending. Column `j` corresponds to `clusters[j]`.
    pub clusters: Vec<i32>,
    /// Row-major counts N_ij.
    pub counts: Vec<Vec<u64>>,
}

impl Contingency {
    /// Builds the table from paired labels, skipping noise entries.
    pub fn new(true_labels: &[usize], pseudo_labels: &[i32]) -> Result<Self> {
        if true_labels.len() != pseudo_labels.len() {
            return Err(Error::Shape(format!(
                "{} ground-truth labels vs {} pseudo-labels",
                true_labels.len(),
                pseudo_labels.len()
            )));
        }
        let pairs: Vec<(usize, i32)> = true_labels
            .iter()
            .zip(pseudo_labels)
            .filter(|(_, &p)| p != NOISE)
            .map(|(&y, &p)| (y, p))
            .collect();
        if pairs.is_empty() {
            return Err(Error::Evaluation(
                "clustering metrics are undefined when every sample is noise".into(),
            ));
        }
        let class_ix: BTreeMap<usize, usize> = pairs
            .iter()
            .map(|p| (p.0, 0))
            .collect::<BTreeMap<_, _>>()
            .into_keys()
            .enumerate()
            .map(|(i, c)| (c, i))
            .collect();
        let cluster_ix: BTreeMap<i32, usize> = pairs
            .iter()
            .map(|p| (p.1, 0))
            .collect::<BTreeMap<_, _>>()
            .into_keys()
            .enumerate()
            .map(|(j, c)| (c, j))
            .collect();
        let mut counts = vec![vec![0u64; cluster_ix.len()]; class_ix.len()];
        for (y, p) in &pairs {
            counts[class_ix[y]][cluster_ix[p]] += 1;
        }
        Ok(Self {
            classes: class_ix.into_keys().collect(),
            clusters: cluster_ix.into_keys().collect(),
            counts,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.clusters.len()];
        for row in &self.counts {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        out
    }
}

/// Cluster accuracy: the best fraction of clustered samples that are correct under an
/// injective mapping from clusters to labels. When there are more clusters than classes the
/// unmapped clusters count entirely as errors.
pub fn cacc(true_labels: &[usize], pseudo_labels: &[i32]) -> Result<f64> {
    let table = Contingency::new(true_labels, pseudo_labels)?;
    Ok(cacc_from_contingency(&table))
}

pub fn cacc_from_contingency(table: &Contingency) -> f64 {
    let total = table.total();
    let matched = max_weight_matching(&table.counts);
    matched as f64 / total as f64
}

/// Maximum total weight of a one-to-one assignment of rows to columns of a nonnegative matrix
/// (rectangular allowed; the matrix is zero-padded to square).
pub fn max_weight_matching(weights: &[Vec<u64>]) -> u64 {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return 0;
    }
    let max_w = weights.iter().flatten().copied().max().unwrap_or(0) as i64;
    // Minimisation form: cost = max_w - w, padding cells cost max_w.
    let cost = |i: usize, j: usize| -> i64 {
        let w = if i < rows && j < cols {
            weights[i][j] as i64
        } else {
            0
        };
        max_w - w
    };
    let assignment = hungarian_min(n, cost);
    assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < rows && j < cols)
        .map(|(i, &j)| weights[i][j])
        .sum()
}

/// Kuhn-Munkres with potentials, O(n^3). Returns `assignment[row] = col`.
fn hungarian_min(n: usize, cost: impl Fn(usize, usize) -> i64) -> Vec<usize> {
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays; index 0 is the virtual start column.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn choose2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index over clustered samples.
///
/// When the expected and maximum indices coincide (for example a single class matched by a
/// single cluster) the ratio is 0/0; the partitions are then identical up to relabeling and
/// the value 1 is returned.
pub fn ari(true_labels: &[usize], pseudo_labels: &[i32]) -> Result<f64> {
    let table = Contingency::new(true_labels, pseudo_labels)?;
    Ok(ari_from_contingency(&table))
}

pub fn ari_from_contingency(table: &Contingency) -> f64 {
    let index: f64 = table.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: f64 = table.row_sums().into_iter().map(choose2).sum();
    let sum_b: f64 = table.col_sums().into_iter().map(choose2).sum();
    let pairs = choose2(table.total());
    let expected = if pairs > 0.0 {
        sum_a * sum_b / pairs
    } else {
        0.0
    };
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        return 1.0;
    }
    (index - expected) / denom
}

/// How the reported F1 combines per-class quantities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// Harmonic mean of macro Precision and macro Recall.
    #[default]
    HarmonicOfMacro,
    /// Unweighted mean of per-class F1 scores.
    MeanPerClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// ACC, macro Recall/Precision and F1 over `n_classes` classes.
///
/// A class that is never predicted contributes a precision term of 0; a class absent from
/// the ground truth contributes a recall term of 0.
pub fn classification_metrics(
    true_labels: &[usize],
    predicted: &[usize],
    n_classes: usize,
    mode: F1Mode,
) -> Result<ClassificationMetrics> {
    if true_labels.is_empty() {
        return Err(Error::Evaluation("no samples to evaluate".into()));
    }
    if true_labels.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            true_labels.len(),
            predicted.len()
        )));
    }
    if let Some(bad) = true_labels
        .iter()
        .chain(predicted)
        .find(|&&c| c >= n_classes)
    {
        return Err(Error::Shape(format!(
            "label {bad} outside 0..{n_classes}"
        )));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&y, &p) in true_labels.iter().zip(predicted) {
        confusion[y][p] += 1;
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let correct: u64 = (0..n_classes).map(|q| confusion[q][q]).sum();
    let acc = correct as f64 / true_labels.len() as f64;
    let per_recall: Vec<f64> = (0..n_classes)
        .map(|q| ratio(confusion[q][q], confusion[q].iter().sum()))
        .collect();
    let per_precision: Vec<f64> = (0..n_classes)
        .map(|q| ratio(confusion[q][q], confusion.iter().map(|r| r[q]).sum()))
        .collect();
    let k = n_classes as f64;
    let recall = per_recall.iter().sum::<f64>() / k;
    let precision = per_precision.iter().sum::<f64>() / k;
    let harmonic = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let f1 = match mode {
        F1Mode::HarmonicOfMacro => harmonic(precision, recall),
        F1Mode::MeanPerClass => {
            per_precision
                .iter()
                .zip(&per_recall)
                .map(|(&p, &r)| harmonic(p, r))
                .sum::<f64>()
                / k
        }
    };
    Ok(ClassificationMetrics {
        acc,
        recall,
        precision,
        f1,
        confusion,
    })
}

/// Everything `evaluate` reports. Clustering fields are present only when a pretraining run
/// recorded them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub confusion_matrix: Vec<Vec<u64>>,
    pub cacc: Option<f64>,
    pub ari: Option<f64>,
    pub cluster_contingency: Option<Contingency>,
}

impl MetricsReport {
    pub fn from_parts(
        cls: ClassificationMetrics,
        clustering: Option<(f64, f64, Contingency)>,
    ) -> Self {
        let (cacc, ari, cluster_contingency) = match clustering {
            Some((c, a, t)) => (Some(c), Some(a), Some(t)),
            None => (None, None, None),
        };
        Self {
            acc: cls.acc,
            recall: cls.recall,
            precision: cls.precision,
            f1: cls.f1,
            confusion_matrix: cls.confusion,
            cacc,
            ari,
            cluster_contingency,
        }
    }

    fn scalars(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("acc", Some(self.acc)),
            ("recall", Some(self.recall)),
            ("precision", Some(self.precision)),
            ("f1", Some(self.f1)),
            ("cacc", self.cacc),
            ("ari", self.ari),
        ]
    }

    /// Flat `key = value` text. Missing clustering metrics are written as `nan`.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.scalars() {
            let _ = writeln!(out, "{k} = {}", v.map_or("nan".to_string(), |x| format!("{x}")));
        }
        let k = self.confusion_matrix.len();
        let _ = writeln!(out, "classes = {k}");
        for (i, row) in self.confusion_matrix.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "confusion.{i} = {}", cells.join(","));
        }
        out
    }

    /// Two-column CSV of the scalar metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.scalars() {
            let _ = writeln!(out, "{k},{}", v.map_or(String::new(), |x| format!("{x}")));
        }
        out
    }

    /// Confusion matrix CSV with a header row of predicted classes.
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion_matrix.len();
        let mut out = String::from("true\\pred");
        for q in 0..k {
            let _ = write!(out, ",{q}");
        }
        out.push('\n');
        for (i, row) in self.confusion_matrix.iter().enumerate() {
            let _ = write!(out, "{i}");
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}
