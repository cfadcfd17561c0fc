//! Contrastive (InfoNCE-style) loss over augmented views and the pointwise
//! ranking cross-entropy, with exact gradients.
//!
//! For a view `i` with positive partner `j` the pair loss is
//!
//! ```text
//! l(i, j) = -log( exp(sim(z_i, z_j)/τ) / Σ_{k≠i} exp(sim(z_i, z_k)/τ) )
//! ```
//!
//! where the positive is part of the denominator. The batch loss sums
//! `m(i, j)·l(i, j)` over the positive mask `m`.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{self, KeyValueConfig};
use crate::error::{Error, Result};

pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLossConfig {
    pub tau: f64,
    pub reduction: Reduction,
    pub similarity: Similarity,
}

impl Default for ContrastiveLossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            reduction: Reduction::Mean,
            similarity: Similarity::Cosine,
        }
    }
}

impl ContrastiveLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Numerical(format!("vector lengths differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numerical("degenerate representation".into()));
    }
    Ok(dot / (na * nb))
}

/// Row-normalized copy of `z` and the row norms.
fn normalize_rows(z: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut u = z.clone();
    let mut norms = Vec::with_capacity(z.nrows());
    for mut row in u.rows_mut() {
        let n = norm(row.view());
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numerical("degenerate representation".into()));
        }
        row /= n;
        norms.push(n);
    }
    Ok((u, norms))
}

fn similarity_matrix(z: &Array2<f64>, similarity: Similarity) -> Result<Array2<f64>> {
    match similarity {
        Similarity::Cosine => {
            let (u, _) = normalize_rows(z)?;
            Ok(u.dot(&u.t()))
        }
        Similarity::Dot => Ok(z.dot(&z.t())),
    }
}

fn check_mask(n: usize, mask: &[Vec<bool>]) -> Result<()> {
    if n < 2 {
        return Err(Error::Config("contrastive loss needs at least 2 views".into()));
    }
    if mask.len() != n || mask.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("positive mask is not {n}x{n}")));
    }
    Ok(())
}

/// Log-softmax over `k != i` of row `i` of `sims / tau`.
fn row_log_probs(sims: &Array2<f64>, i: usize, tau: f64) -> Vec<f64> {
    let row = sims.row(i);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &s)| s / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &s)| (s / tau - max).exp())
        .sum();
    let lse = max + sum.ln();
    row.iter()
        .enumerate()
        .map(|(k, &s)| if k == i { f64::NEG_INFINITY } else { s / tau - lse })
        .collect()
}

/// `l(i, j)` with cosine similarity.
pub fn pair_loss(i: usize, j: usize, z: &Array2<f64>, tau: f64) -> Result<f64> {
    if i == j {
        return Err(Error::Config("pair loss needs distinct views".into()));
    }
    if z.nrows() < 2 || i >= z.nrows() || j >= z.nrows() {
        return Err(Error::Config(format!("view index out of range for {} views", z.nrows())));
    }
    let sims = similarity_matrix(z, Similarity::Cosine)?;
    Ok(-row_log_probs(&sims, i, tau)[j])
}

pub fn batch_loss(z: &Array2<f64>, mask: &[Vec<bool>], config: &ContrastiveLossConfig) -> Result<f64> {
    batch_loss_grad(z, mask, config).map(|(loss, _)| loss)
}

/// Loss and its gradient with respect to every row of `z`.
pub fn batch_loss_grad(
    z: &Array2<f64>,
    mask: &[Vec<bool>],
    config: &ContrastiveLossConfig,
) -> Result<(f64, Array2<f64>)> {
    let n = z.nrows();
    check_mask(n, mask)?;
    config.validate()?;
    let tau = config.tau;
    let (u, norms) = match config.similarity {
        Similarity::Cosine => normalize_rows(z)?,
        Similarity::Dot => (z.clone(), vec![1.0; n]),
    };
    let sims = u.dot(&u.t());
    let scale = match config.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let mut loss = 0.0;
    // gradient with respect to the similarity matrix
    let mut d_sims = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let log_p = row_log_probs(&sims, i, tau);
        let positives: f64 = mask[i].iter().filter(|&&m| m).count() as f64;
        if positives == 0.0 {
            continue;
        }
        for k in 0..n {
            if k == i {
                continue;
            }
            if mask[i][k] {
                loss -= log_p[k];
            }
            let target = if mask[i][k] { 1.0 } else { 0.0 };
            d_sims[[i, k]] = scale * (positives * log_p[k].exp() - target) / tau;
        }
    }
    let loss = loss * scale;
    let sym = &d_sims + &d_sims.t();
    let d_u = sym.dot(&u);
    let grad = match config.similarity {
        Similarity::Dot => d_u,
        Similarity::Cosine => {
            let mut g = d_u;
            for (r, (mut row, &nr)) in g.rows_mut().into_iter().zip(&norms).enumerate() {
                let ur = u.row(r);
                let radial = ur.dot(&row);
                row.scaled_add(-radial, &ur);
                row /= nr;
            }
            g
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numerical("contrastive loss is not finite".into()));
    }
    Ok((loss, grad))
}

/// Fraction of views whose positive partner has the highest similarity among
/// the other `2N-1` views. Ties count fractionally, which equals the expected
/// hit rate under uniform tie-breaking.
pub fn contrastive_accuracy(z: &Array2<f64>, mask: &[Vec<bool>], similarity: Similarity) -> Result<f64> {
    let n = z.nrows();
    check_mask(n, mask)?;
    let sims = similarity_matrix(z, similarity)?;
    let mut hits = 0.0;
    for i in 0..n {
        let best = (0..n)
            .filter(|&k| k != i)
            .map(|k| sims[[i, k]])
            .fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..n)
            .filter(|&k| k != i && (best - sims[[i, k]]).abs() <= 1e-12)
            .collect();
        let positive_hits = tied.iter().filter(|&&k| mask[i][k]).count();
        hits += positive_hits as f64 / tied.len() as f64;
    }
    Ok(hits / n as f64)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_rank_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Config("rank loss over an empty batch".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy with scores clamped away from 0 and 1.
pub fn rank_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_rank_inputs(scores, labels)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
            let y = f64::from(y);
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Gradient of [`rank_loss`] with respect to the pre-logistic activations.
pub fn rank_loss_grad_logits(scores: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    check_rank_inputs(scores, labels)?;
    let n = scores.len() as f64;
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| (s - f64::from(y)) / n)
        .collect())
}

/// Per-column totals as a `1 x n` row, used when reducing bias gradients.
pub(crate) fn column_sums(m: &Array2<f64>) -> Array2<f64> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl KeyValueConfig for ContrastiveLossConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "tau" => self.tau = config::parse(key, value)?,
            "reduction" => {
                self.reduction = match value {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    _ => return Err(Error::Config(format!("reduction must be sum or mean, got {value:?}"))),
                }
            }
            "similarity" => {
                self.similarity = match value {
                    "cosine" => Similarity::Cosine,
                    "dot" => Similarity::Dot,
                    _ => return Err(Error::Config(format!("similarity must be cosine or dot, got {value:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let reduction = match self.reduction {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        };
        let similarity = match self.similarity {
            Similarity::Cosine => "cosine",
            Similarity::Dot => "dot",
        };
        vec![
            ("tau".into(), self.tau.to_string()),
            ("reduction".into(), reduction.into()),
            ("similarity".into(), similarity.into()),
        ]
    }
}
