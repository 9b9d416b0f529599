//! Human review protocol: per-annotator correctness, majority validity,
//! Fleiss' kappa and stratified review-set sampling.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::question::SynthesisRecord;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QualityError {
    #[error("no items")]
    Empty,
    #[error("at least two raters are required")]
    TooFewRaters,
    #[error("at least two categories are required")]
    TooFewCategories,
    #[error("item {item} has {sum} ratings, expected {expected}")]
    InconsistentCounts { item: usize, sum: usize, expected: usize },
    #[error("correct count {count} exceeds {n_raters} raters")]
    CountOutOfRange { count: usize, n_raters: usize },
    #[error("requested {requested} items but only {available} are available")]
    TooMany { requested: usize, available: usize },
    #[error("no review item has judgments from exactly {0} annotators")]
    NoCompleteItems(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub record_id: String,
    pub annotator_id: String,
    pub final_answer_ok: bool,
    pub sub_answers_ok: bool,
    pub focus_ok: bool,
    pub submitted_at: DateTime<Utc>,
}

pub fn annotator_correct(j: &Judgment) -> bool {
    j.final_answer_ok && j.sub_answers_ok && j.focus_ok
}

/// Votes needed for a strict majority of `n_raters`.
pub fn majority(n_raters: usize) -> usize {
    n_raters / 2 + 1
}

pub fn item_valid(correct_count: usize, n_raters: usize) -> bool {
    correct_count >= majority(n_raters)
}

/// Share of valid items given a histogram of correct-vote counts.
pub fn validity_rate(histogram: &BTreeMap<usize, usize>, n_raters: usize) -> Result<f64, QualityError> {
    if n_raters < 2 {
        return Err(QualityError::TooFewRaters);
    }
    if let Some((&count, _)) = histogram.iter().find(|(&c, &n)| c > n_raters && n > 0) {
        return Err(QualityError::CountOutOfRange { count, n_raters });
    }
    let total: usize = histogram.values().sum();
    if total == 0 {
        return Err(QualityError::Empty);
    }
    let valid: usize = histogram
        .iter()
        .filter(|(&c, _)| item_valid(c, n_raters))
        .map(|(_, &n)| n)
        .sum();
    Ok(valid as f64 / total as f64)
}

/// Fleiss' kappa over `rows[item][category]` rating counts. When expected
/// agreement is 1 the result is 1.0 if observed agreement is also 1.
pub fn fleiss_kappa(rows: &[Vec<usize>], n_raters: usize) -> Result<f64, QualityError> {
    if rows.is_empty() {
        return Err(QualityError::Empty);
    }
    if n_raters < 2 {
        return Err(QualityError::TooFewRaters);
    }
    let categories = rows[0].len();
    if categories < 2 {
        return Err(QualityError::TooFewCategories);
    }
    let mut totals = vec![0usize; categories];
    let mut agreement_sum = 0.0;
    let n = n_raters as f64;
    for (item, row) in rows.iter().enumerate() {
        let sum: usize = row.iter().sum();
        if row.len() != categories || sum != n_raters {
            return Err(QualityError::InconsistentCounts {
                item,
                sum,
                expected: n_raters,
            });
        }
        let pairs: usize = row.iter().map(|&c| c * c.saturating_sub(1)).sum();
        agreement_sum += pairs as f64 / (n * (n - 1.0));
        for (t, &c) in totals.iter_mut().zip(row) {
            *t += c;
        }
    }
    let items = rows.len() as f64;
    let p_bar = agreement_sum / items;
    let all = items * n;
    let p_e: f64 = totals.iter().map(|&t| (t as f64 / all).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(if (1.0 - p_bar).abs() < 1e-15 { 1.0 } else { 0.0 });
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Review set stratified by path length with largest-remainder quotas.
/// Output is ordered by record id.
pub fn stratified_sample(
    corpus: &[SynthesisRecord],
    n: usize,
    seed: u64,
) -> Result<Vec<SynthesisRecord>, QualityError> {
    let total = corpus.len();
    if n > total {
        return Err(QualityError::TooMany {
            requested: n,
            available: total,
        });
    }
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.iter().enumerate() {
        strata.entry(r.meta.path_length).or_default().push(i);
    }
    let quotas = largest_remainder(&strata.values().map(Vec::len).collect::<Vec<_>>(), n);
    let mut r = rng::seeded(seed);
    let mut picked = Vec::with_capacity(n);
    for (members, quota) in strata.values().zip(quotas) {
        for idx in rng::sample_indices(&mut r, members.len(), quota) {
            picked.push(corpus[members[idx]].clone());
        }
    }
    picked.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(picked)
}

/// Integer quotas proportional to `sizes` summing to `n`. Leftover units go
/// to the largest remainders, ties to the earlier stratum.
pub fn largest_remainder(sizes: &[usize], n: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| s * n / total).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(sizes[i] * n % total), i));
    let left = n - quotas.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        quotas[i] += 1;
    }
    quotas
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n_items: usize,
    pub n_raters: usize,
    pub valid_items: usize,
    /// `None` only in reports with zero complete items.
    pub validity_rate: Option<f64>,
    pub kappa: Option<f64>,
    /// Correct votes per complete item.
    pub correct_counts: BTreeMap<String, usize>,
    pub correct_histogram: BTreeMap<usize, usize>,
    /// Review items excluded for lacking exactly `n_raters` judgments.
    pub incomplete: usize,
    pub incomplete_ids: Vec<String>,
    pub ignored_judgments: usize,
}

impl AgreementReport {
    /// The report for a review set with no complete items.
    pub fn empty(judgments: &[Judgment], review_ids: &[String], n_raters: usize) -> Self {
        let review: BTreeSet<&String> = review_ids.iter().collect();
        let incomplete_ids: Vec<String> = review.iter().map(|s| (*s).clone()).collect();
        Self {
            n_items: 0,
            n_raters,
            valid_items: 0,
            validity_rate: None,
            kappa: None,
            correct_counts: BTreeMap::new(),
            correct_histogram: BTreeMap::new(),
            incomplete: incomplete_ids.len(),
            incomplete_ids,
            ignored_judgments: judgments.iter().filter(|j| !review.contains(&j.record_id)).count(),
        }
    }
}

/// Like [`agreement_report`], but a review set without complete items
/// yields [`AgreementReport::empty`] instead of an error.
pub fn live_report(
    judgments: &[Judgment],
    review_ids: &[String],
    n_raters: usize,
) -> Result<AgreementReport, QualityError> {
    match agreement_report(judgments, review_ids, n_raters) {
        Err(QualityError::NoCompleteItems(_)) => Ok(AgreementReport::empty(judgments, review_ids, n_raters)),
        other => other,
    }
}

/// Latest judgment per (record, annotator): by timestamp, then by position.
pub fn effective_judgments(judgments: &[Judgment]) -> BTreeMap<(String, String), &Judgment> {
    let mut latest: BTreeMap<(String, String), &Judgment> = BTreeMap::new();
    for j in judgments {
        let key = (j.record_id.clone(), j.annotator_id.clone());
        match latest.get(&key) {
            Some(prev) if prev.submitted_at > j.submitted_at => {}
            _ => {
                latest.insert(key, j);
            }
        }
    }
    latest
}

/// Aggregates judgments over the review set. Items without exactly
/// `n_raters` distinct annotators are excluded and listed as incomplete.
pub fn agreement_report(
    judgments: &[Judgment],
    review_ids: &[String],
    n_raters: usize,
) -> Result<AgreementReport, QualityError> {
    if n_raters < 2 {
        return Err(QualityError::TooFewRaters);
    }
    let review: BTreeSet<&String> = review_ids.iter().collect();
    let ignored_judgments = judgments.iter().filter(|j| !review.contains(&j.record_id)).count();
    let mut per_item: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    let effective = effective_judgments(judgments);
    for ((rid, _), j) in &effective {
        if review.contains(rid) {
            per_item.entry(rid.as_str()).or_default().push(annotator_correct(j));
        }
    }
    let mut correct_counts = BTreeMap::new();
    let mut incomplete_ids = Vec::new();
    for id in &review {
        match per_item.get(id.as_str()) {
            Some(votes) if votes.len() == n_raters => {
                correct_counts.insert((*id).clone(), votes.iter().filter(|&&v| v).count());
            }
            _ => incomplete_ids.push((*id).clone()),
        }
    }
    if correct_counts.is_empty() {
        return Err(QualityError::NoCompleteItems(n_raters));
    }
    let mut correct_histogram = BTreeMap::new();
    let mut rows = Vec::with_capacity(correct_counts.len());
    for &c in correct_counts.values() {
        *correct_histogram.entry(c).or_insert(0) += 1;
        rows.push(vec![c, n_raters - c]);
    }
    let valid_items = correct_counts.values().filter(|&&c| item_valid(c, n_raters)).count();
    Ok(AgreementReport {
        n_items: correct_counts.len(),
        n_raters,
        valid_items,
        validity_rate: Some(validity_rate(&correct_histogram, n_raters)?),
        kappa: Some(fleiss_kappa(&rows, n_raters)?),
        correct_counts,
        correct_histogram,
        incomplete: incomplete_ids.len(),
        incomplete_ids,
        ignored_judgments,
    })
}
