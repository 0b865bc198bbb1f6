use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::graph::{KnowledgeGraph, RelationId};

/// A chain rule body `r1 ∧ r2 ∧ … ∧ rl` read from the topic entity outward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicRule {
    pub relations: Vec<RelationId>,
    /// Mined score; a probability in normalized mode.
    pub probability: Option<f64>,
}

impl LogicRule {
    pub fn new(relations: Vec<RelationId>) -> Self {
        Self {
            relations,
            probability: None,
        }
    }

    pub fn scored(relations: Vec<RelationId>, probability: f64) -> Self {
        Self {
            relations,
            probability: Some(probability),
        }
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    /// Human-readable `r1 -> r2` form.
    pub fn display(&self, graph: &KnowledgeGraph) -> String {
        self.relations
            .iter()
            .map(|&r| graph.relation_name(r))
            .collect::<Vec<_>>()
            .join(" -> ")
    }

    /// Probability descending (absent scores last), then relation ids ascending.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        let a = self.probability.unwrap_or(f64::NEG_INFINITY);
        let b = other.probability.unwrap_or(f64::NEG_INFINITY);
        b.total_cmp(&a).then_with(|| self.relations.cmp(&other.relations))
    }
}
