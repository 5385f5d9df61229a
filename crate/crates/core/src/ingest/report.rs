//! Interpretation reports over labeled activations: which features make up
//! a token, which tokens most strongly express each of those features, and
//! which tokens sit closest to it in activation space.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationSet, Dictionary};
use crate::solver::infer_coefficients;

/// How "maximally activating" tokens are ranked for a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationRanking {
    /// Inferred coefficient of the feature in each token's decomposition.
    #[default]
    Coefficient,
    /// Raw dot product of each token's activation with the feature vector.
    DotProduct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub row: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub feature: usize,
    pub coefficient: f64,
    pub top_tokens: Vec<TokenScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub query: String,
    pub features: Vec<FeatureEntry>,
}

fn labels_of(x: &ActivationSet) -> Result<&[String]> {
    x.labels()
        .ok_or_else(|| Error::InvalidActivations("reports need labeled activations".into()))
}

fn find_token(labels: &[String], token: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == token)
        .ok_or_else(|| Error::UnknownToken(token.to_string()))
}

/// Descending by value, then ascending by index.
fn by_value_desc(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Decomposes `token`'s activation, keeps its `k_features` largest
/// coefficients, and lists for each of those features the `k_tokens` rows
/// of `x` that express it most strongly.
pub fn feature_report(
    dict: &Dictionary,
    x: &ActivationSet,
    lambda: f64,
    token: &str,
    k_features: usize,
    k_tokens: usize,
    ranking: ActivationRanking,
) -> Result<FeatureReport> {
    let labels = labels_of(x)?;
    let row = find_token(labels, token)?;
    let query = x.select_rows(&[row])?;
    let own = infer_coefficients(&query, dict, lambda)?;
    let mut parts: Vec<(usize, f64)> = own.column(0).to_vec();
    if parts.is_empty() {
        return Err(Error::DegenerateData(format!(
            "token {token:?} decomposes to all-zero coefficients at lambda = {lambda}"
        )));
    }
    parts.sort_by(by_value_desc);
    parts.truncate(k_features);

    let all = match ranking {
        ActivationRanking::Coefficient => Some(infer_coefficients(x, dict, lambda)?),
        ActivationRanking::DotProduct => None,
    };
    let features = parts
        .into_iter()
        .map(|(feature, coefficient)| {
            let mut scored: Vec<(usize, f64)> = match &all {
                Some(coeffs) => coeffs
                    .columns()
                    .enumerate()
                    .filter_map(|(j, col)| col.iter().find(|(i, _)| *i == feature).map(|&(_, v)| (j, v)))
                    .collect(),
                None => {
                    let f = dict.feature(feature);
                    (0..x.n()).map(|j| (j, x.row(j).dot(&f))).collect()
                }
            };
            scored.sort_by(by_value_desc);
            scored.truncate(k_tokens);
            FeatureEntry {
                feature,
                coefficient,
                top_tokens: scored
                    .into_iter()
                    .map(|(row, value)| TokenScore {
                        token: labels[row].clone(),
                        row,
                        value,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(FeatureReport {
        query: token.to_string(),
        features,
    })
}

/// The `k` rows with highest cosine similarity to `token`'s activation,
/// excluding the query row itself. Zero rows have similarity 0.
pub fn nearest_embedding_report(x: &ActivationSet, token: &str, k: usize) -> Result<Vec<TokenScore>> {
    let labels = labels_of(x)?;
    let q = find_token(labels, token)?;
    let query = x.row(q);
    let qnorm = query.dot(&query).sqrt();
    if qnorm == 0.0 {
        return Err(Error::DegenerateData(format!("token {token:?} has a zero activation")));
    }
    let mut scored: Vec<(usize, f64)> = (0..x.n())
        .filter(|&j| j != q)
        .map(|j| {
            let r = x.row(j);
            let norm = r.dot(&r).sqrt();
            let cos = if norm == 0.0 { 0.0 } else { r.dot(&query) / (norm * qnorm) };
            (j, cos)
        })
        .collect();
    scored.sort_by(by_value_desc);
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(row, value)| TokenScore {
            token: labels[row].clone(),
            row,
            value,
        })
        .collect())
}
