use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::graph::EntityId;
use crate::retrieval::ScoredAnswer;

/// 1 when the top-ranked answer is gold, else 0.
pub fn hits_at_1(ranked: &[ScoredAnswer], gold: &BTreeSet<EntityId>) -> f64 {
    match ranked.first() {
        Some(top) if gold.contains(&top.entity) => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn prf1(pred: &BTreeSet<EntityId>, gold: &BTreeSet<EntityId>) -> Result<Prf1, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let hit = pred.intersection(gold).count() as f64;
    let precision = if pred.is_empty() { 0.0 } else { hit / pred.len() as f64 };
    let recall = hit / gold.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf1 { precision, recall, f1 })
}

/// Exact set match.
pub fn accuracy(pred: &BTreeSet<EntityId>, gold: &BTreeSet<EntityId>) -> Result<f64, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    Ok(if pred == gold { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuestionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hits_at_1: f64,
    pub accuracy: f64,
}

impl QuestionMetrics {
    pub fn compute(ranked: &[ScoredAnswer], pred: &BTreeSet<EntityId>, gold: &BTreeSet<EntityId>) -> Result<Self, EvalError> {
        let p = prf1(pred, gold)?;
        Ok(Self {
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            hits_at_1: hits_at_1(ranked, gold),
            accuracy: accuracy(pred, gold)?,
        })
    }
}

/// Macro averages over questions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub questions: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hits_at_1: f64,
    pub accuracy: f64,
}

/// Averages in the given order so the result does not depend on how the
/// rows were computed.
pub fn macro_average(rows: &[QuestionMetrics]) -> EvalMetrics {
    let n = rows.len();
    let mean = |f: fn(&QuestionMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / n as f64
        }
    };
    EvalMetrics {
        questions: n,
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        hits_at_1: mean(|r| r.hits_at_1),
        accuracy: mean(|r| r.accuracy),
    }
}
