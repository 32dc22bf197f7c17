//! Similarity-guided collaborative aggregation on the server, plus the
//! size-weighted FedAvg control.
//!
//! Each round the server compares the uploaded low-level adapters pairwise,
//! then solves, for every client `i`, the simplex-constrained problem
//!
//! ```text
//! min_w  sum_j (w_j - m_i)^2 - alpha * sum_j w_j * s_ij    s.t. w >= 0, sum w = 1
//! ```
//!
//! Completing the square turns this into the Euclidean projection of
//! `c_j = m_i + (alpha / 2) * s_ij` onto the simplex.

use serde::{Deserialize, Serialize};

use crate::client::ClientUpdate;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, simplex_project, FlatParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    /// dot product
    Inner,
    /// cosine of the angle, 0 when either side is the zero vector
    Cosine,
    /// negated L1 distance
    L1Based,
    /// negated L2 distance
    L2Based,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 4] = [
        SimilarityMetric::Inner,
        SimilarityMetric::Cosine,
        SimilarityMetric::L1Based,
        SimilarityMetric::L2Based,
    ];

    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            SimilarityMetric::Inner => dot(a, b),
            SimilarityMetric::Cosine => {
                let d = norm(a) * norm(b);
                if d == 0.0 {
                    0.0
                } else {
                    (dot(a, b) / d).clamp(-1.0, 1.0)
                }
            }
            SimilarityMetric::L1Based => -a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>(),
            SimilarityMetric::L2Based => {
                -a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SimilarityMetric::Inner => "inner",
            SimilarityMetric::Cosine => "cosine",
            SimilarityMetric::L1Based => "l1_based",
            SimilarityMetric::L2Based => "l2_based",
        }
    }
}

impl std::str::FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SimilarityMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown similarity metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityNormalization {
    None,
    /// divide row i by max_{j != i} |S_ij|
    MaxAbsRow,
}

/// Which dataset-size prior enters the row problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// `m_i`, constant along the row (the objective as written); note this
    /// makes the prior inert because the projection is shift invariant
    RowConstantMi,
    /// `m_j`, one prior per column
    ColumnMj,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgcaConfig {
    pub alpha: f64,
    pub metric: SimilarityMetric,
    pub similarity_normalization: SimilarityNormalization,
    pub m_mode: PriorMode,
}

impl Default for SgcaConfig {
    fn default() -> Self {
        SgcaConfig {
            alpha: 1.0,
            metric: SimilarityMetric::L2Based,
            similarity_normalization: SimilarityNormalization::MaxAbsRow,
            m_mode: PriorMode::RowConstantMi,
        }
    }
}

impl SgcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Row-stochastic N x N mixing matrix; row i builds client i's broadcast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollaborationMatrix {
    pub round: usize,
    pub rows: Vec<Vec<f64>>,
}

impl CollaborationMatrix {
    /// Checks non-negativity and that rows sum to one within `1e-9`.
    pub fn new(round: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("collaboration matrix needs at least one row"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|&w| !(w >= 0.0)) {
                return Err(Error::invalid(format!("row {i} has a negative or NaN entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("row {i} sums to {sum}")));
            }
        }
        Ok(CollaborationMatrix { round, rows })
    }

    /// Every row equal to `n_j / sum(n)`; broadcasting with it is FedAvg.
    pub fn size_proportional(sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(Error::invalid("total dataset size is zero"));
        }
        let row: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
        CollaborationMatrix::new(0, vec![row; sizes.len()])
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }
}

/// `S_ij = metric(params_i, params_j)`, optionally row-normalized.
pub fn pairwise_similarity(
    params: &[FlatParams],
    metric: SimilarityMetric,
    normalization: SimilarityNormalization,
) -> Result<Vec<Vec<f64>>> {
    let first = params
        .first()
        .ok_or_else(|| Error::invalid("pairwise similarity of an empty set"))?;
    if params.iter().any(|p| !p.same_manifest(first)) {
        return Err(Error::protocol("uploaded parameter manifests differ"));
    }
    let n = params.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = metric.eval(params[i].values(), params[j].values());
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    if normalization == SimilarityNormalization::MaxAbsRow {
        for (i, row) in s.iter_mut().enumerate() {
            let scale = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
            if scale > 0.0 {
                row.iter_mut().for_each(|v| *v /= scale);
            }
        }
    }
    Ok(s)
}

/// Solves one collaboration row: projection of `m + (alpha/2) s` onto the
/// simplex.
pub fn solve_row(m_value: f64, s_row: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha >= 0.0 && alpha.is_finite()) || !m_value.is_finite() {
        return Err(Error::invalid("alpha and m must be finite, alpha >= 0"));
    }
    let c: Vec<f64> = s_row.iter().map(|s| m_value + 0.5 * alpha * s).collect();
    simplex_project(&c)
}

/// Sorts uploads by client id and checks the ids are exactly `0..N` and the
/// rounds agree.
pub(crate) fn ordered_updates(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for (expected, u) in sorted.iter().enumerate() {
        if u.client_id != expected {
            return Err(Error::protocol(format!(
                "client ids must be 0..{} without gaps or duplicates, found {} at position {expected}",
                updates.len(),
                u.client_id
            )));
        }
    }
    if let Some(u) = sorted.iter().find(|u| u.round != sorted[0].round) {
        return Err(Error::protocol(format!(
            "mixed rounds in one aggregation: {} and {}",
            sorted[0].round, u.round
        )));
    }
    Ok(sorted)
}

/// Recomputes the collaboration matrix from this round's uploads.
pub fn update_matrix(updates: &[ClientUpdate], cfg: &SgcaConfig) -> Result<CollaborationMatrix> {
    cfg.validate()?;
    let sorted = ordered_updates(updates)?;
    if sorted.is_empty() {
        return Err(Error::protocol("no client updates"));
    }
    let params: Vec<FlatParams> = sorted.iter().map(|u| u.low_params.clone()).collect();
    let s = pairwise_similarity(&params, cfg.metric, cfg.similarity_normalization)?;
    let total: usize = sorted.iter().map(|u| u.n_i).sum();
    if total == 0 {
        return Err(Error::invalid("total dataset size is zero"));
    }
    let m: Vec<f64> = sorted.iter().map(|u| u.n_i as f64 / total as f64).collect();
    let rows = s
        .iter()
        .enumerate()
        .map(|(i, s_row)| match cfg.m_mode {
            PriorMode::RowConstantMi => solve_row(m[i], s_row, cfg.alpha),
            PriorMode::ColumnMj => {
                let c: Vec<f64> = s_row
                    .iter()
                    .zip(&m)
                    .map(|(s, mj)| mj + 0.5 * cfg.alpha * s)
                    .collect();
                simplex_project(&c)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    CollaborationMatrix::new(sorted[0].round, rows)
}

/// `output_i = sum_j W_ij params_j`.
pub fn aggregate(w: &CollaborationMatrix, params: &[FlatParams]) -> Result<Vec<FlatParams>> {
    if params.len() != w.len() {
        return Err(Error::protocol(format!(
            "{} parameter sets for a {}x{} matrix",
            params.len(),
            w.len(),
            w.len()
        )));
    }
    let first = &params[0];
    if params.iter().any(|p| !p.same_manifest(first)) {
        return Err(Error::protocol("parameter manifests differ"));
    }
    w.rows
        .iter()
        .map(|row| first.with_values(weighted_sum(row, params)))
        .collect()
}

fn weighted_sum(weights: &[f64], params: &[FlatParams]) -> Vec<f64> {
    let mut out = vec![0.0; params[0].len()];
    for (&w, p) in weights.iter().zip(params) {
        if w != 0.0 {
            out.iter_mut().zip(p.values()).for_each(|(o, v)| *o += w * v);
        }
    }
    out
}

/// Dataset-size weighted average, the same for every client.
pub fn fedavg_aggregate(params: &[FlatParams], sizes: &[usize]) -> Result<FlatParams> {
    if params.is_empty() || params.len() != sizes.len() {
        return Err(Error::invalid("need one size per parameter set"));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("total dataset size is zero"));
    }
    if params.iter().any(|p| !p.same_manifest(&params[0])) {
        return Err(Error::protocol("parameter manifests differ"));
    }
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    params[0].with_values(weighted_sum(&weights, params))
}
