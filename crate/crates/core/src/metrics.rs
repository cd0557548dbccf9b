//! Globalness, verticality and diagonalness of attention heads.
//!
//! For one `T x T` row-stochastic matrix `A`:
//!
//! * globalness `G = (1/T) * sum_q H(A[q])`, the mean row entropy;
//! * verticality `V = -H((1/T) * sum_q A[q])`, the negated entropy of the
//!   mean row;
//! * diagonalness `D = -(1/T^2) * sum_q sum_k |q - k| * A[q, k]`.
//!
//! Entropies are in nats. A head's score is the mean of the per-utterance
//! values over a sample of utterances.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::AttentionDump;

/// Position of a head in the model: `(layer, head)`, both zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (l, h) = s.split_once(':').ok_or_else(|| format!("`{s}` is not `layer:head`"))?;
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("`{s}` is not `layer:head`"));
        Ok(Self::new(num(l)?, num(h)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Global,
    Vertical,
    Diagonal,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Global, Category::Vertical, Category::Diagonal];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Global => "global",
            Category::Vertical => "vertical",
            Category::Diagonal => "diagonal",
        }
    }

    /// This category's raw score for a head; higher means more typical.
    pub fn score_of(self, s: &HeadScores) -> f64 {
        match self {
            Category::Global => s.globalness,
            Category::Vertical => s.verticality,
            Category::Diagonal => s.diagonalness,
        }
    }
}

impl serde::Serialize for HeadId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl serde::Serialize for Category {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "global" => Ok(Category::Global),
            "vertical" => Ok(Category::Vertical),
            "diagonal" => Ok(Category::Diagonal),
            other => Err(format!("unknown category `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadScores {
    pub head: HeadId,
    pub globalness: f64,
    pub verticality: f64,
    pub diagonalness: f64,
    pub utterance_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadCategory {
    pub head: HeadId,
    pub category: Category,
    /// Cross-head z-scores of (globalness, verticality, diagonalness).
    pub z_scores: [f64; 3],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CategoryCounts {
    pub global: usize,
    pub vertical: usize,
    pub diagonal: usize,
}

impl CategoryCounts {
    pub fn get(&self, c: Category) -> usize {
        match c {
            Category::Global => self.global,
            Category::Vertical => self.vertical,
            Category::Diagonal => self.diagonal,
        }
    }

    pub fn total(&self) -> usize {
        self.global + self.vertical + self.diagonal
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn row_entropy(row: ArrayView1<'_, f64>) -> Result<f64> {
    let mut h = 0.0;
    for (index, &p) in row.iter().enumerate() {
        if p < 0.0 || p.is_nan() {
            return Err(Error::NegativeEntry { index, value: p });
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

fn check_square(m: &ArrayView2<'_, f64>) -> Result<usize> {
    let (rows, cols) = m.dim();
    if rows != cols || rows == 0 {
        return Err(Error::NotSquare { rows, cols });
    }
    Ok(rows)
}

/// Mean row entropy of one matrix.
pub fn matrix_globalness(m: ArrayView2<'_, f64>) -> Result<f64> {
    let t = check_square(&m)?;
    let mut total = 0.0;
    for row in m.outer_iter() {
        total += row_entropy(row)?;
    }
    Ok(total / t as f64)
}

/// Negated entropy of the mean row of one matrix.
pub fn matrix_verticality(m: ArrayView2<'_, f64>) -> Result<f64> {
    let t = check_square(&m)?;
    let mean = m.sum_axis(Axis(0)) / t as f64;
    Ok(-row_entropy(mean.view())?)
}

/// Distance-weighted attention mass away from the diagonal, negated and scaled by `1/T^2`.
pub fn matrix_diagonalness(m: ArrayView2<'_, f64>) -> Result<f64> {
    let t = check_square(&m)?;
    let mut total = 0.0;
    for (q, row) in m.outer_iter().enumerate() {
        for (k, &a) in row.iter().enumerate() {
            total += q.abs_diff(k) as f64 * a;
        }
    }
    Ok(-total / (t * t) as f64)
}

fn mean_over<F>(matrices: &[Array2<f64>], f: F) -> Result<f64>
where
    F: Fn(ArrayView2<'_, f64>) -> Result<f64>,
{
    if matrices.is_empty() {
        return Err(Error::EmptyUtteranceSet);
    }
    let mut sum = 0.0;
    for m in matrices {
        sum += f(m.view())?;
    }
    Ok(sum / matrices.len() as f64)
}

/// Globalness of one head averaged over its per-utterance matrices.
pub fn globalness(matrices: &[Array2<f64>]) -> Result<f64> {
    mean_over(matrices, matrix_globalness)
}

pub fn verticality(matrices: &[Array2<f64>]) -> Result<f64> {
    mean_over(matrices, matrix_verticality)
}

pub fn diagonalness(matrices: &[Array2<f64>]) -> Result<f64> {
    mean_over(matrices, matrix_diagonalness)
}

/// Seeded choice of `sample_size` utterance indices out of `available`, in ascending order.
pub fn sample_utterances(available: usize, sample_size: usize, seed: u64) -> Result<Vec<usize>> {
    if sample_size > available {
        return Err(Error::SampleLargerThanDataset { sample: sample_size, available });
    }
    if sample_size == 0 {
        return Err(Error::EmptyUtteranceSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, available, sample_size).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Scores every head over all given dumps, accumulating in the given order.
pub fn score_heads(dumps: &[&AttentionDump]) -> Result<Vec<HeadScores>> {
    let first = dumps.first().ok_or(Error::EmptyUtteranceSet)?;
    let (layers, heads) = (first.num_layers(), first.num_heads());
    for d in dumps {
        if (d.num_layers(), d.num_heads()) != (layers, heads) {
            return Err(Error::MismatchedModelShape {
                utterance: d.utterance_id.clone(),
                expected_layers: layers,
                expected_heads: heads,
                layers: d.num_layers(),
                heads: d.num_heads(),
            });
        }
    }
    let ids: Vec<HeadId> =
        (0..layers).flat_map(|l| (0..heads).map(move |h| HeadId::new(l, h))).collect();
    ids.par_iter()
        .map(|&id| {
            let (mut g, mut v, mut dg) = (0.0, 0.0, 0.0);
            for dump in dumps {
                let m = dump.head_f64(id.layer, id.head);
                g += matrix_globalness(m.view())?;
                v += matrix_verticality(m.view())?;
                dg += matrix_diagonalness(m.view())?;
            }
            let n = dumps.len() as f64;
            Ok(HeadScores {
                head: id,
                globalness: g / n,
                verticality: v / n,
                diagonalness: dg / n,
                utterance_count: dumps.len(),
            })
        })
        .collect()
}

/// Scores every head over a seeded sample of `sample_size` dumps (taken in manifest order).
pub fn score_all(dumps: &[AttentionDump], sample_size: usize, seed: u64) -> Result<Vec<HeadScores>> {
    let picked = sample_utterances(dumps.len(), sample_size, seed)?;
    let chosen: Vec<&AttentionDump> = picked.iter().map(|&i| &dumps[i]).collect();
    score_heads(&chosen)
}

fn z_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > f64::EPSILON * mean.abs().max(1.0)) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Assigns each head the category whose z-score (across heads) is largest.
///
/// Ties go to Diagonal, then Vertical, then Global. A metric with no spread
/// across heads contributes z-scores of zero.
pub fn categorize(scores: &[HeadScores]) -> Result<Vec<HeadCategory>> {
    if scores.len() < 2 {
        return Err(Error::SingleHead);
    }
    let zg = z_scores(&scores.iter().map(|s| s.globalness).collect::<Vec<_>>());
    let zv = z_scores(&scores.iter().map(|s| s.verticality).collect::<Vec<_>>());
    let zd = z_scores(&scores.iter().map(|s| s.diagonalness).collect::<Vec<_>>());
    Ok(scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (g, v, d) = (zg[i], zv[i], zd[i]);
            let category = if d >= v && d >= g {
                Category::Diagonal
            } else if v >= g {
                Category::Vertical
            } else {
                Category::Global
            };
            HeadCategory { head: s.head, category, z_scores: [g, v, d] }
        })
        .collect())
}

pub fn category_counts(categories: &[HeadCategory]) -> CategoryCounts {
    let mut c = CategoryCounts::default();
    for hc in categories {
        match hc.category {
            Category::Global => c.global += 1,
            Category::Vertical => c.vertical += 1,
            Category::Diagonal => c.diagonal += 1,
        }
    }
    c
}
