use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{macro_average, EvalMetrics, QuestionMetrics};
use super::{DatasetSplit, EvalError};
use crate::embeddings::ComplexEmbeddings;
use crate::graph::{EntityId, KnowledgeGraph, RelationId};
use crate::llm::{rerank, select_rules, CompletionBackend, CompletionParams, Exemplar};
use crate::mining::{mask_topic, MinedRules};
use crate::retrieval::{retrieve, BeamConfig, ScoredAnswer};
use crate::rule::LogicRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRuleInference,
    NoRerank,
    RandomRule,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoRuleInference, Variant::NoRerank, Variant::RandomRule];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRuleInference => "no_rule_inference",
            Variant::NoRerank => "no_rerank",
            Variant::RandomRule => "random_rule",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected full, no_rule_inference, no_rerank or random_rule)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSettings {
    pub beam: BeamConfig,
    /// Rules kept per question after selection (and drawn by the random
    /// ablations).
    pub rules_per_question: usize,
    /// Answers scoring at least this much form the predicted set.
    pub answer_threshold: f64,
    /// Longest relation sequence drawn when rule inference is ablated.
    pub max_rule_len: usize,
    pub completion: CompletionParams,
    pub seed: u64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            rules_per_question: 3,
            answer_threshold: 0.5,
            max_rule_len: 3,
            completion: CompletionParams::default(),
            seed: 0,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.to_owned()));
        if self.beam.beam_width == 0 {
            return bad("beam width must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.beam.min_step_prob) {
            return bad("min step probability must lie in [0, 1]");
        }
        if self.rules_per_question == 0 {
            return bad("rules per question must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.answer_threshold) {
            return bad("answer threshold must lie in [0, 1]");
        }
        if self.max_rule_len == 0 {
            return bad("max rule length must be at least 1");
        }
        Ok(())
    }
}

/// Everything needed to answer a question end to end.
pub struct Pipeline<'a> {
    graph: &'a KnowledgeGraph,
    embeddings: &'a ComplexEmbeddings<f32>,
    rules: &'a MinedRules,
    backend: &'a dyn CompletionBackend,
    shots: &'a [Exemplar],
    settings: PipelineSettings,
    pool: Vec<LogicRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub entity: EntityId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerOutcome {
    pub rules: Vec<LogicRule>,
    pub rule_fallback: bool,
    pub rerank_fallback: bool,
    /// Every retrieved answer in final order.
    pub ranked: Vec<ScoredAnswer>,
    /// Ranked answers at or above the threshold.
    pub predictions: Vec<Prediction>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        graph: &'a KnowledgeGraph,
        embeddings: &'a ComplexEmbeddings<f32>,
        rules: &'a MinedRules,
        backend: &'a dyn CompletionBackend,
        shots: &'a [Exemplar],
        settings: PipelineSettings,
    ) -> Result<Self, EvalError> {
        settings.validate()?;
        Ok(Self {
            graph,
            embeddings,
            rules,
            backend,
            shots,
            settings,
            pool: rules.pool(),
        })
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        self.graph
    }

    fn question_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.seed);
        rng.set_stream(index);
        rng
    }

    /// `k` distinct relation sequences of length 1..=L, uniform over all of them.
    fn random_sequences(&self, rng: &mut ChaCha8Rng) -> Result<Vec<LogicRule>, EvalError> {
        let r = self.graph.relation_count() as u64;
        if r == 0 {
            return Ok(Vec::new());
        }
        let overflow = || EvalError::InvalidConfig("too many relation sequences to sample from".into());
        let mut sizes = Vec::with_capacity(self.settings.max_rule_len);
        let mut power = 1u64;
        for _ in 0..self.settings.max_rule_len {
            power = power.checked_mul(r).ok_or_else(overflow)?;
            sizes.push(power);
        }
        let total = sizes.iter().try_fold(0u64, |acc, &s| acc.checked_add(s)).ok_or_else(overflow)?;
        let total = usize::try_from(total).map_err(|_| overflow())?;
        let amount = self.settings.rules_per_question.min(total);
        Ok(index::sample(rng, total, amount)
            .into_iter()
            .map(|i| {
                let mut i = i as u64;
                let mut len = 1;
                for &s in &sizes {
                    if i < s {
                        break;
                    }
                    i -= s;
                    len += 1;
                }
                let mut relations = vec![RelationId(0); len];
                for slot in relations.iter_mut().rev() {
                    *slot = RelationId((i % r) as u32);
                    i /= r;
                }
                LogicRule::new(relations)
            })
            .collect())
    }

    fn random_pool_rules(&self, rng: &mut ChaCha8Rng) -> Vec<LogicRule> {
        let amount = self.settings.rules_per_question.min(self.pool.len());
        index::sample(rng, self.pool.len(), amount)
            .into_iter()
            .map(|i| self.pool[i].clone())
            .collect()
    }

    /// Answers one question. `index` seeds the per-question random draws of
    /// the ablations, so results do not depend on evaluation order.
    pub fn answer(
        &self,
        question: &str,
        topic: EntityId,
        topic_surface: &str,
        variant: Variant,
        index: u64,
    ) -> Result<AnswerOutcome, EvalError> {
        self.graph.check_entity(topic)?;
        let mut rng = self.question_rng(index);
        let (rules, rule_fallback) = match variant {
            Variant::Full | Variant::NoRerank => {
                let template = mask_topic(question, topic_surface)?;
                let candidates = self.rules.rules_for(&template);
                if candidates.is_empty() {
                    log::debug!("no mined rules for template `{template}`");
                    (Vec::new(), false)
                } else {
                    let selection = select_rules(
                        self.backend,
                        &self.settings.completion,
                        self.graph,
                        question,
                        candidates,
                        self.shots,
                        self.settings.rules_per_question,
                    )?;
                    (selection.rules, selection.fell_back)
                }
            }
            Variant::RandomRule => (self.random_pool_rules(&mut rng), false),
            Variant::NoRuleInference => (self.random_sequences(&mut rng)?, false),
        };

        let mut ranked = if rules.is_empty() {
            Vec::new()
        } else {
            retrieve(self.graph, self.embeddings, topic, &rules, &self.settings.beam)?
        };
        let mut rerank_fallback = false;
        if variant != Variant::NoRerank && !ranked.is_empty() {
            let reranked = rerank(self.backend, &self.settings.completion, self.graph, question, &ranked)?;
            ranked = reranked.answers;
            rerank_fallback = reranked.fell_back;
        }
        let predictions = ranked
            .iter()
            .filter(|a| a.score >= self.settings.answer_threshold)
            .map(|a| Prediction {
                entity: a.entity,
                score: a.score,
            })
            .collect();
        Ok(AnswerOutcome {
            rules,
            rule_fallback,
            rerank_fallback,
            ranked,
            predictions,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub entity: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub question: String,
    pub topic: String,
    pub gold: Vec<String>,
    pub top_answer: Option<PredictionRecord>,
    pub predictions: Vec<PredictionRecord>,
    pub rules: Vec<String>,
    pub rule_fallback: bool,
    pub rerank_fallback: bool,
    #[serde(flatten)]
    pub metrics: QuestionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub split: String,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
    pub rows: Vec<ReportRow>,
}

/// Runs every question (in parallel) and macro-averages; rows keep the
/// split's order.
pub fn evaluate(pipeline: &Pipeline<'_>, split: &DatasetSplit, variant: Variant) -> Result<EvalReport, EvalError> {
    if split.examples.is_empty() {
        return Err(EvalError::EmptySplit(split.name.clone()));
    }
    let g = pipeline.graph;
    let results: Vec<Result<ReportRow, EvalError>> = split
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let outcome = pipeline.answer(&ex.question, ex.topic, &ex.topic_surface, variant, i as u64)?;
            let gold: BTreeSet<EntityId> = ex.answers.iter().copied().collect();
            let pred: BTreeSet<EntityId> = outcome.predictions.iter().map(|p| p.entity).collect();
            let metrics = QuestionMetrics::compute(&outcome.ranked, &pred, &gold)?;
            let record = |entity: EntityId, score: f64| PredictionRecord {
                entity: g.entity_name(entity).to_owned(),
                score,
            };
            Ok(ReportRow {
                question: ex.question.clone(),
                topic: ex.topic_surface.clone(),
                gold: ex.answers.iter().map(|&e| g.entity_name(e).to_owned()).collect(),
                top_answer: outcome.ranked.first().map(|a| record(a.entity, a.score)),
                predictions: outcome.predictions.iter().map(|p| record(p.entity, p.score)).collect(),
                rules: outcome.rules.iter().map(|r| r.display(g)).collect(),
                rule_fallback: outcome.rule_fallback,
                rerank_fallback: outcome.rerank_fallback,
                metrics,
            })
        })
        .collect();
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let per_question: Vec<QuestionMetrics> = rows.iter().map(|r| r.metrics).collect();
    Ok(EvalReport {
        variant,
        split: split.name.clone(),
        metrics: macro_average(&per_question),
        rows,
    })
}

pub fn run_ablation(
    pipeline: &Pipeline<'_>,
    split: &DatasetSplit,
    variants: &[Variant],
) -> Result<Vec<EvalReport>, EvalError> {
    variants.iter().map(|&v| evaluate(pipeline, split, v)).collect()
}
