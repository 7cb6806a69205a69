//! Accuracy and health-disparity metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ehr::Schema;
use crate::error::{FlmdError, Result};

/// Scores with binary labels (or graded relevances) for one population.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
}

impl ScoredSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn push(&mut self, score: f64, label: f64) {
        self.scores.push(score);
        self.labels.push(label);
    }
}

/// One encounter-level prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient_id: String,
    /// 1-based encounter number.
    pub t: usize,
    pub prob: f64,
    pub y: u8,
    pub group_bits: Vec<u8>,
}

fn check_inputs(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(FlmdError::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(FlmdError::Data("NaN score".into()));
    }
    Ok(())
}

/// Mann–Whitney AUC with ties counted as one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(FlmdError::Data("AUC labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1.0).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(FlmdError::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the statistic, so half-counted ties stay integral
    let mut twice_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// nDCG@k with raw-relevance gain and `1/log₂(rank + 1)` discount. Equal
/// scores keep input order.
pub fn ndcg_at_k(scores: &[f64], relevances: &[f64], k: usize) -> Result<f64> {
    check_inputs(scores, relevances)?;
    if k == 0 {
        return Err(FlmdError::Config("nDCG cutoff must be at least 1".into()));
    }
    if relevances.iter().any(|&r| !r.is_finite() || r < 0.0) {
        return Err(FlmdError::Data(
            "relevances must be finite and nonnegative".into(),
        ));
    }
    let dcg = |gains: &mut dyn Iterator<Item = f64>| -> f64 {
        gains
            .take(k)
            .enumerate()
            .map(|(r, g)| g / ((r + 2) as f64).log2())
            .sum()
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ideal = relevances.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let idcg = dcg(&mut ideal.into_iter());
    if idcg == 0.0 {
        return Err(FlmdError::UndefinedMetric(
            "nDCG needs a positive relevance".into(),
        ));
    }
    Ok(dcg(&mut order.iter().map(|&i| relevances[i])) / idcg)
}

pub fn hd_binary(g1: &ScoredSet, g2: &ScoredSet) -> Result<f64> {
    Ok(disparity(
        auc(&g1.scores, &g1.labels)?,
        auc(&g2.scores, &g2.labels)?,
    ))
}

pub fn hd_multi(g1: &ScoredSet, g2: &ScoredSet, k: usize) -> Result<f64> {
    Ok(disparity(
        ndcg_at_k(&g1.scores, &g1.labels, k)?,
        ndcg_at_k(&g2.scores, &g2.labels, k)?,
    ))
}

/// `|a − b| · 10³`.
pub fn disparity(a: f64, b: f64) -> f64 {
    (a - b).abs() * 1e3
}

/// Splits predictions by the named sensitive bit: G₁ holds bit 0, G₂ bit 1.
pub fn group_split(
    predictions: &[Prediction],
    schema: &Schema,
    attribute: &str,
) -> Result<(ScoredSet, ScoredSet)> {
    let k = schema.sensitive_index(attribute)?;
    let (mut g1, mut g2) = (ScoredSet::default(), ScoredSet::default());
    for p in predictions {
        let target = if p.group_bits[k] == 0 {
            &mut g1
        } else {
            &mut g2
        };
        target.push(p.prob, f64::from(p.y));
    }
    Ok((g1, g2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub attribute: String,
    pub auc_overall: f64,
    pub auc_g1: f64,
    pub auc_g2: f64,
    pub hd_binary: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg_overall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hd_multi: Option<f64>,
    pub cf_gap: f64,
    pub n_total: usize,
    pub n_g1: usize,
    pub n_g2: usize,
}

impl FairnessReport {
    pub const CSV_HEADER: &'static str =
        "attribute,auc_overall,auc_g1,auc_g2,hd_binary,cf_gap,n_total,n_g1,n_g2";

    /// Accuracy and disparity of binary predictions split on `attribute`.
    pub fn evaluate(
        predictions: &[Prediction],
        schema: &Schema,
        attribute: &str,
        cf_gap: f64,
    ) -> Result<Self> {
        let (g1, g2) = group_split(predictions, schema, attribute)?;
        let scores: Vec<f64> = predictions.iter().map(|p| p.prob).collect();
        let labels: Vec<f64> = predictions.iter().map(|p| f64::from(p.y)).collect();
        let auc_g1 =
            auc(&g1.scores, &g1.labels).map_err(|e| e.context(format!("group {attribute}=0")))?;
        let auc_g2 =
            auc(&g2.scores, &g2.labels).map_err(|e| e.context(format!("group {attribute}=1")))?;
        Ok(FairnessReport {
            attribute: attribute.to_string(),
            auc_overall: auc(&scores, &labels)?,
            auc_g1,
            auc_g2,
            hd_binary: disparity(auc_g1, auc_g2),
            ndcg_overall: None,
            hd_multi: None,
            cf_gap,
            n_total: predictions.len(),
            n_g1: g1.len(),
            n_g2: g2.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.attribute,
            self.auc_overall,
            self.auc_g1,
            self.auc_g2,
            self.hd_binary,
            self.cf_gap,
            self.n_total,
            self.n_g1,
            self.n_g2
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_hand_example() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.4, 0.2], &[1.0, 0.0, 1.0, 0.0]).unwrap(),
            0.75
        );
        assert_eq!(
            auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            1.0
        );
        assert_eq!(
            auc(&[0.5; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
            0.5
        );
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[1.0, 1.0]),
            Err(FlmdError::UndefinedMetric(_))
        ));
        assert!(auc(&[0.1], &[1.0, 0.0]).is_err());
        assert!(auc(&[f64::NAN, 0.2], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(
            ndcg_at_k(&[5.0, 4.0, 3.0, 2.0, 1.0], &[1.0, 0.0, 0.0, 0.0, 0.0], 5).unwrap(),
            1.0
        );
        let second = ndcg_at_k(&[5.0, 4.0, 3.0, 2.0, 1.0], &[0.0, 1.0, 0.0, 0.0, 0.0], 5).unwrap();
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((second - 0.6309).abs() < 1e-4);
        assert!(matches!(
            ndcg_at_k(&[1.0, 2.0], &[0.0, 0.0], 5),
            Err(FlmdError::UndefinedMetric(_))
        ));
        assert!(ndcg_at_k(&[1.0], &[1.0], 0).is_err());
    }

    #[test]
    fn disparity_arithmetic() {
        assert!((disparity(0.75, 0.70) - 50.0).abs() < 1e-9);
        assert!((disparity(0.58, 0.52) - 60.0).abs() < 1e-9);
        assert_eq!(disparity(0.3, 0.6), disparity(0.6, 0.3));
    }

    #[test]
    fn group_split_partitions() {
        let schema = Schema {
            num_features: 1,
            sensitive_names: vec!["race".into(), "gender".into()],
            label_name: "y".into(),
            extra_names: vec![],
        };
        let preds: Vec<Prediction> = (0..5)
            .map(|i| Prediction {
                patient_id: format!("p{i}"),
                t: 1,
                prob: 0.1 * i as f64,
                y: (i % 2) as u8,
                group_bits: vec![0, (i % 2) as u8],
            })
            .collect();
        let (g1, g2) = group_split(&preds, &schema, "race").unwrap();
        assert_eq!((g1.len(), g2.len()), (5, 0));
        let (g1, g2) = group_split(&preds, &schema, "gender").unwrap();
        assert_eq!(g1.len() + g2.len(), 5);
        assert!(group_split(&preds, &schema, "age").is_err());
    }
}
