//! Downstream evaluation of learned features: KNN and nearest-centroid
//! classification, k-means with three seedings, the Adjusted Rand Index
//! and wall-clock timing. Euclidean distance throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(invalid(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        check_matrix(&features)?;
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

/// Checks that rows are non-empty and of equal width; returns the width.
fn check_matrix(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    if !rows.is_empty() && d == 0 {
        return Err(invalid("feature rows must be non-empty"));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(invalid(format!("feature row {i} has length {}, expected {d}", rows[i].len())));
    }
    Ok(d)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Label with the most votes, smallest label on ties.
fn majority(labels: impl Iterator<Item = usize>) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut best = (0, 0);
    for (&label, &count) in &counts {
        if count > best.1 {
            best = (label, count);
        }
    }
    best.0
}

/// `k`-nearest-neighbour majority vote. Neighbours at equal distance are
/// ordered by training index; vote ties go to the smallest label.
pub fn knn_classify(train: &LabeledFeatures, test_features: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(invalid("empty training set"));
    }
    if k == 0 || k > train.len() {
        return Err(invalid(format!("k must be in 1..={}, got {k}", train.len())));
    }
    let d = train.dim();
    if let Some(i) = test_features.iter().position(|r| r.len() != d) {
        return Err(invalid(format!("test row {i} has length {}, expected {d}", test_features[i].len())));
    }
    Ok(test_features
        .par_iter()
        .map(|q| {
            let mut dist: Vec<(f64, usize)> = train
                .features
                .iter()
                .enumerate()
                .map(|(i, x)| (sq_dist(q, x), i))
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            majority(dist[..k].iter().map(|&(_, i)| train.labels[i]))
        })
        .collect())
}

/// Assigns each test row the label of the closest class mean.
pub fn nearest_centroid_classify(train: &LabeledFeatures, test_features: &[Vec<f64>]) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(invalid("empty training set"));
    }
    let d = train.dim();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (x, &l) in train.features.iter().zip(&train.labels) {
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; d], 0));
        for (s, v) in e.0.iter_mut().zip(x) {
            *s += v;
        }
        e.1 += 1;
    }
    let centroids: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(l, (s, c))| (l, s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    test_features
        .iter()
        .enumerate()
        .map(|(i, q)| {
            if q.len() != d {
                return Err(invalid(format!("test row {i} has length {}, expected {d}", q.len())));
            }
            let mut best = (f64::INFINITY, 0);
            for (l, c) in &centroids {
                let dist = sq_dist(q, c);
                if dist < best.0 {
                    best = (dist, *l);
                }
            }
            Ok(best.1)
        })
        .collect()
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(invalid(format!(
            "length mismatch: {} predictions, {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(invalid("accuracy of an empty set"));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand Index (Hubert and Arabie) from the contingency table.
///
/// When the index is undefined (both partitions trivial in the same way,
/// e.g. a single cluster against a single class, or fewer than two
/// samples) the value is 0.
pub fn adjusted_rand_index(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(invalid(format!(
            "length mismatch: {} vs {}",
            labels_a.len(),
            labels_b.len()
        )));
    }
    let n = labels_a.len();
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(0.0);
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((index - expected) / denom)
}

/// Runs `op` and returns its result with the elapsed wall time in seconds
/// (monotonic clock, single run).
pub fn timed<R>(op: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let out = op();
    (out, start.elapsed().as_secs_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMeansInit {
    /// D^2 seeding.
    KMeansPlusPlus,
    /// `C` distinct rows drawn uniformly.
    Random,
    /// D^2 seeding in the span of the first `C - 1` principal directions,
    /// seeds lifted back to feature space.
    Pca,
}

impl KMeansInit {
    pub const ALL: [KMeansInit; 3] = [KMeansInit::KMeansPlusPlus, KMeansInit::Random, KMeansInit::Pca];

    pub fn name(self) -> &'static str {
        match self {
            KMeansInit::KMeansPlusPlus => "kmeanspp",
            KMeansInit::Random => "random",
            KMeansInit::Pca => "pca",
        }
    }
}

impl fmt::Display for KMeansInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KMeansInit {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeanspp" | "kmeans++" => Ok(KMeansInit::KMeansPlusPlus),
            "random" => Ok(KMeansInit::Random),
            "pca" => Ok(KMeansInit::Pca),
            other => Err(invalid(format!("unknown k-means init '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansSettings {
    pub init: KMeansInit,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl KMeansSettings {
    pub fn new(init: KMeansInit, seed: u64) -> Self {
        Self {
            init,
            seed,
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub elapsed_seconds: f64,
}

/// D^2 seeding over `rows`; returns the chosen row indices.
fn plus_plus_indices(rows: &[Vec<f64>], c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = rows.len();
    let mut chosen = vec![rng.random_range(0..m)];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &rows[chosen[0]])).collect();
    while chosen.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just below `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            // Every remaining point coincides with a seed.
            (0..m).find(|i| !chosen.contains(i)).expect("c <= m")
        };
        chosen.push(next);
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, &rows[next]));
        }
    }
    chosen
}

/// Mean and the leading `r` principal directions (as columns) of `rows`.
pub fn principal_directions(rows: &[Vec<f64>], r: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = check_matrix(rows)?;
    let m = rows.len();
    if m == 0 {
        return Err(invalid("no rows"));
    }
    let x = DMatrix::from_fn(m, d, |i, j| rows[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        row -= mean.transpose();
    }
    let r = r.min(d).min(m);
    // Eigen-decompose whichever Gram matrix is smaller.
    let dirs = if d <= m {
        let eig = SymmetricEigen::new(xc.transpose() * &xc);
        top_columns(&eig.eigenvalues, &eig.eigenvectors, r)
    } else {
        let eig = SymmetricEigen::new(&xc * xc.transpose());
        let u = top_columns(&eig.eigenvalues, &eig.eigenvectors, r);
        let mut v = xc.transpose() * u;
        for mut col in v.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        v
    };
    Ok((mean, dirs))
}

fn top_columns(values: &DVector<f64>, vectors: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    DMatrix::from_fn(vectors.nrows(), r, |i, j| vectors[(i, idx[j])])
}

fn initial_centroids(rows: &[Vec<f64>], c: usize, settings: &KMeansSettings) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    Ok(match settings.init {
        KMeansInit::KMeansPlusPlus => plus_plus_indices(rows, c, &mut rng).into_iter().map(|i| rows[i].clone()).collect(),
        KMeansInit::Random => sample_indices(&mut rng, rows.len(), c)
            .into_iter()
            .map(|i| rows[i].clone())
            .collect(),
        KMeansInit::Pca => {
            let r = c.saturating_sub(1).max(1);
            let (mean, dirs) = principal_directions(rows, r)?;
            let projected: Vec<Vec<f64>> = rows
                .iter()
                .map(|row| {
                    let centered = DVector::from_column_slice(row) - &mean;
                    (dirs.transpose() * centered).as_slice().to_vec()
                })
                .collect();
            plus_plus_indices(&projected, c, &mut rng)
                .into_iter()
                .map(|i| {
                    let lifted = &mean + &dirs * DVector::from_column_slice(&projected[i]);
                    lifted.as_slice().to_vec()
                })
                .collect()
        }
    })
}

fn assign(rows: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    rows.par_iter()
        .map(|r| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(r, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

/// Lloyd's k-means. Stops when no centroid moves by `tol` or more (Euclidean)
/// or after `max_iters` updates. A cluster that becomes empty is re-seeded
/// at the point farthest from its assigned centroid (lowest index on ties,
/// each point used at most once per update).
pub fn kmeans(rows: &[Vec<f64>], c: usize, settings: &KMeansSettings) -> Result<ClusteringResult> {
    let d = check_matrix(rows)?;
    let m = rows.len();
    if c == 0 {
        return Err(invalid("number of clusters must be positive"));
    }
    if c > m {
        return Err(invalid(format!("{c} clusters requested for {m} points")));
    }
    let (result, elapsed) = timed(|| -> Result<ClusteringResult> {
        let mut centroids = initial_centroids(rows, c, settings)?;
        let mut trace = Vec::new();
        let mut iterations = 0;
        let (mut labels, mut dists) = assign(rows, &centroids);
        trace.push(dists.iter().sum::<f64>());
        while iterations < settings.max_iters {
            iterations += 1;
            let mut sums = vec![vec![0.0; d]; c];
            let mut counts = vec![0usize; c];
            for (r, &l) in rows.iter().zip(&labels) {
                counts[l] += 1;
                for (s, v) in sums[l].iter_mut().zip(r) {
                    *s += v;
                }
            }
            let mut reseeded = Vec::new();
            let mut shift: f64 = 0.0;
            for j in 0..c {
                let next = if counts[j] > 0 {
                    sums[j].iter().map(|s| s / counts[j] as f64).collect()
                } else {
                    let far = (0..m)
                        .filter(|i| !reseeded.contains(i))
                        .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                        .expect("c <= m");
                    reseeded.push(far);
                    rows[far].clone()
                };
                shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
                centroids[j] = next;
            }
            (labels, dists) = assign(rows, &centroids);
            trace.push(dists.iter().sum::<f64>());
            if shift < settings.tol {
                break;
            }
        }
        Ok(ClusteringResult {
            assignments: labels,
            centroids,
            inertia: *trace.last().expect("non-empty"),
            inertia_trace: trace,
            iterations,
            elapsed_seconds: 0.0,
        })
    });
    let mut result = result?;
    result.elapsed_seconds = elapsed;
    Ok(result)
}
