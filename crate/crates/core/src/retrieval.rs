//! Rule execution in embedding space.
//!
//! A rule is grounded hop by hop from the topic entity. Each hop keeps the
//! graph neighbors with probability 1 and adds the best embedding-predicted
//! tails; a path scores the product of its step probabilities. Within a rule
//! an entity keeps its best path; across rules scores merge by noisy-OR.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{squash, ComplexEmbeddings, EmbeddingError, Real};
use crate::graph::{EntityId, GraphError, KnowledgeGraph, RelationId};
use crate::rule::LogicRule;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("step probability {0} is outside [0, 1]")]
    StepOutOfRange(f64),
    #[error("rule has no relations")]
    EmptyRule,
    #[error("no rules to retrieve with")]
    NoRules,
    #[error("embeddings cover {emb_entities} entities / {emb_relations} relations but the graph has {entities} / {relations}")]
    DimensionMismatch {
        emb_entities: usize,
        emb_relations: usize,
        entities: usize,
        relations: usize,
    },
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    /// Partial paths kept per depth, not counting graph-certain ones.
    pub beam_width: usize,
    /// Embedding-predicted tails added per expansion.
    pub embedding_fanout: usize,
    pub min_step_prob: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 64,
            embedding_fanout: 128,
            min_step_prob: 0.0,
        }
    }
}

/// A grounding of a rule: `entities[0] --relations[0]--> entities[1] …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub entities: Vec<EntityId>,
    pub relations: Vec<RelationId>,
    pub step_probs: Vec<f64>,
    pub cumulative: f64,
}

impl ReasoningPath {
    pub fn start(topic: EntityId) -> Self {
        Self {
            entities: vec![topic],
            relations: Vec::new(),
            step_probs: Vec::new(),
            cumulative: 1.0,
        }
    }

    pub fn extend(&self, relation: RelationId, tail: EntityId, prob: f64) -> Self {
        let mut next = self.clone();
        next.entities.push(tail);
        next.relations.push(relation);
        next.step_probs.push(prob);
        next.cumulative *= prob;
        next
    }

    pub fn terminal(&self) -> EntityId {
        *self.entities.last().expect("a path always has its start entity")
    }

    /// `a --r--> b --s--> c (p=0.83)`
    pub fn render(&self, graph: &KnowledgeGraph) -> String {
        let mut out = graph.entity_name(self.entities[0]).to_owned();
        for (r, e) in self.relations.iter().zip(&self.entities[1..]) {
            out.push_str(&format!(" --{}--> {}", graph.relation_name(*r), graph.entity_name(*e)));
        }
        out.push_str(&format!(" (p={:.2})", self.cumulative));
        out
    }

    /// Best first, then by relations and entities for a total order.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .cumulative
            .total_cmp(&self.cumulative)
            .then_with(|| self.relations.cmp(&other.relations))
            .then_with(|| self.entities.cmp(&other.entities))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnswer {
    pub entity: EntityId,
    pub score: f64,
    /// Supporting groundings, best first.
    pub paths: Vec<ReasoningPath>,
}

impl ScoredAnswer {
    pub fn best_path(&self) -> Option<&ReasoningPath> {
        self.paths.first()
    }
}

fn answer_cmp(a: &ScoredAnswer, b: &ScoredAnswer) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.entity.cmp(&b.entity))
}

/// Product of the step probabilities; 1 for an empty path.
pub fn path_probability(steps: &[f64]) -> Result<f64, RetrievalError> {
    let mut p = 1.0;
    for &s in steps {
        if !(0.0..=1.0).contains(&s) {
            return Err(RetrievalError::StepOutOfRange(s));
        }
        p *= s;
    }
    Ok(p)
}

fn check_dims<T: Real>(graph: &KnowledgeGraph, emb: &ComplexEmbeddings<T>) -> Result<(), RetrievalError> {
    if emb.entity_count() != graph.entity_count() || emb.relation_count() != graph.relation_count() {
        return Err(RetrievalError::DimensionMismatch {
            emb_entities: emb.entity_count(),
            emb_relations: emb.relation_count(),
            entities: graph.entity_count(),
            relations: graph.relation_count(),
        });
    }
    Ok(())
}

/// Candidate tails of one hop: every graph neighbor at probability 1 plus
/// the `embedding_fanout` best other entities by squashed score, sorted by
/// probability descending then id.
pub fn expand<T: Real>(
    graph: &KnowledgeGraph,
    emb: &ComplexEmbeddings<T>,
    from: EntityId,
    relation: RelationId,
    config: &BeamConfig,
) -> Result<Vec<(EntityId, f64)>, RetrievalError> {
    check_dims(graph, emb)?;
    let neighbors = graph.neighbors(from, relation)?;
    let mut out: Vec<(EntityId, f64)> = neighbors.iter().map(|&t| (t, 1.0)).collect();
    if config.embedding_fanout > 0 {
        let mut predicted: Vec<(EntityId, f64)> = emb
            .score_all_tails(from, relation)
            .into_iter()
            .enumerate()
            .map(|(t, s)| (EntityId(t as u32), squash(s)))
            .filter(|(t, p)| *p >= config.min_step_prob && neighbors.binary_search(t).is_err())
            .collect();
        let by_prob = |a: &(EntityId, f64), b: &(EntityId, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0));
        if predicted.len() > config.embedding_fanout {
            predicted.select_nth_unstable_by(config.embedding_fanout - 1, by_prob);
            predicted.truncate(config.embedding_fanout);
        }
        predicted.sort_by(by_prob);
        out.extend(predicted);
    }
    Ok(out)
}

/// Grounds `rule` from `topic`, keeping the best path per entity at every
/// depth. Intermediate depths keep the `beam_width` best partial paths plus
/// every path that is still certain (all graph edges), so pure-graph
/// answers never depend on the width.
pub fn beam_search<T: Real>(
    graph: &KnowledgeGraph,
    emb: &ComplexEmbeddings<T>,
    topic: EntityId,
    rule: &LogicRule,
    config: &BeamConfig,
) -> Result<Vec<ScoredAnswer>, RetrievalError> {
    if rule.is_empty() {
        return Err(RetrievalError::EmptyRule);
    }
    if config.beam_width == 0 {
        return Err(RetrievalError::ZeroBeam);
    }
    check_dims(graph, emb)?;
    graph.check_entity(topic)?;
    for &r in &rule.relations {
        graph.check_relation(r)?;
    }

    let mut beam = vec![ReasoningPath::start(topic)];
    for (depth, &relation) in rule.relations.iter().enumerate() {
        let mut best: HashMap<EntityId, ReasoningPath> = HashMap::new();
        for path in &beam {
            for (tail, prob) in expand(graph, emb, path.terminal(), relation, config)? {
                let candidate = path.extend(relation, tail, prob);
                match best.get(&tail) {
                    Some(current) if candidate.rank_cmp(current) != Ordering::Less => {}
                    _ => {
                        best.insert(tail, candidate);
                    }
                }
            }
        }
        let mut next: Vec<ReasoningPath> = best.into_values().collect();
        next.sort_by(|a, b| b.cumulative.total_cmp(&a.cumulative).then_with(|| a.terminal().cmp(&b.terminal())));
        if depth + 1 < rule.len() {
            let certain = next.iter().take_while(|p| p.cumulative == 1.0).count();
            next.truncate(config.beam_width.max(certain));
        }
        beam = next;
    }

    Ok(beam
        .into_iter()
        .map(|p| ScoredAnswer {
            entity: p.terminal(),
            score: p.cumulative,
            paths: vec![p],
        })
        .collect())
}

/// Runs every rule and merges per entity with noisy-OR,
/// `1 − Π (1 − best_rule(entity))`.
pub fn retrieve<T: Real>(
    graph: &KnowledgeGraph,
    emb: &ComplexEmbeddings<T>,
    topic: EntityId,
    rules: &[LogicRule],
    config: &BeamConfig,
) -> Result<Vec<ScoredAnswer>, RetrievalError> {
    if rules.is_empty() {
        return Err(RetrievalError::NoRules);
    }
    let mut distinct: Vec<&LogicRule> = Vec::new();
    for rule in rules {
        if !distinct.iter().any(|r| r.relations == rule.relations) {
            distinct.push(rule);
        }
    }

    let mut evidence: BTreeMap<EntityId, (Vec<f64>, Vec<ReasoningPath>)> = BTreeMap::new();
    for rule in distinct {
        for answer in beam_search(graph, emb, topic, rule, config)? {
            let entry = evidence.entry(answer.entity).or_default();
            entry.0.push(answer.score);
            entry.1.extend(answer.paths);
        }
    }

    let mut merged: Vec<ScoredAnswer> = evidence
        .into_iter()
        .map(|(entity, (mut scores, mut paths))| {
            // Fixed multiplication order keeps the merge independent of rule order.
            scores.sort_by(|a, b| b.total_cmp(a));
            let score = noisy_or(&scores);
            paths.sort_by(ReasoningPath::rank_cmp);
            ScoredAnswer { entity, score, paths }
        })
        .collect();
    merged.sort_by(answer_cmp);
    Ok(merged)
}

/// `1 − Π (1 − p)`; a single probability is returned unchanged.
pub fn noisy_or(probs: &[f64]) -> f64 {
    match probs {
        [] => 0.0,
        [p] => *p,
        _ => 1.0 - probs.iter().fold(1.0, |acc, p| acc * (1.0 - p)),
    }
}

/// Line-oriented answer record with surface forms, for downstream stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub entity: String,
    pub score: f64,
    pub paths: Vec<PathRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub step_probs: Vec<f64>,
    pub cumulative: f64,
}

impl AnswerRecord {
    pub fn new(answer: &ScoredAnswer, graph: &KnowledgeGraph) -> Self {
        Self {
            entity: graph.entity_name(answer.entity).to_owned(),
            score: answer.score,
            paths: answer
                .paths
                .iter()
                .map(|p| PathRecord {
                    entities: p.entities.iter().map(|&e| graph.entity_name(e).to_owned()).collect(),
                    relations: p.relations.iter().map(|&r| graph.relation_name(r).to_owned()).collect(),
                    step_probs: p.step_probs.clone(),
                    cumulative: p.cumulative,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_triples;

    const FAMILY: &str = "tom\thasBrother\tbob\nbob\thasChild\tann\nbob\tisMarriedTo\tsue\n";

    fn family() -> (KnowledgeGraph, ComplexEmbeddings<f64>) {
        let g = load_triples(FAMILY.as_bytes()).unwrap();
        let emb = ComplexEmbeddings::<f64>::init(&g, 4, 1).unwrap();
        (g, emb)
    }

    fn kg_only(width: usize) -> BeamConfig {
        BeamConfig {
            beam_width: width,
            embedding_fanout: 0,
            min_step_prob: 0.0,
        }
    }

    fn rule(g: &KnowledgeGraph, names: &[&str]) -> LogicRule {
        LogicRule::new(names.iter().map(|n| g.relation_id(n).unwrap()).collect())
    }

    #[test]
    fn path_probability_cases() {
        assert_eq!(path_probability(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(path_probability(&[0.5, 0.5]).unwrap(), 0.25);
        assert_eq!(path_probability(&[]).unwrap(), 1.0);
        assert!(matches!(path_probability(&[0.5, 1.5]), Err(RetrievalError::StepOutOfRange(_))));
        assert!(path_probability(&[-0.1]).is_err());
    }

    #[test]
    fn expand_graph_only() {
        let (g, emb) = family();
        let tom = g.entity_id("tom").unwrap();
        let bob = g.entity_id("bob").unwrap();
        let brother = g.relation_id("hasBrother").unwrap();
        let child = g.relation_id("hasChild").unwrap();
        assert_eq!(expand(&g, &emb, tom, brother, &kg_only(8)).unwrap(), [(bob, 1.0)]);
        assert!(expand(&g, &emb, tom, child, &kg_only(8)).unwrap().is_empty());
    }

    #[test]
    fn expand_top_fanout_by_enumeration() {
        let g = load_triples("a\tr\tb\nc\ts\td\ne\ts\ta\n".as_bytes()).unwrap();
        let emb = ComplexEmbeddings::<f64>::init_sized(5, 2, 3, 21).unwrap();
        let e = g.entity_id("e").unwrap();
        let r = g.relation_id("r").unwrap();
        let cfg = BeamConfig {
            beam_width: 4,
            embedding_fanout: 2,
            min_step_prob: 0.0,
        };
        let mut all: Vec<(EntityId, f64)> = g
            .entity_ids()
            .map(|t| (t, squash(emb.raw_score(e, r, t).unwrap())))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(2);
        assert_eq!(expand(&g, &emb, e, r, &cfg).unwrap(), all);
    }

    #[test]
    fn expand_respects_min_step_prob() {
        let (g, emb) = family();
        let tom = g.entity_id("tom").unwrap();
        let brother = g.relation_id("hasBrother").unwrap();
        let cfg = BeamConfig {
            beam_width: 4,
            embedding_fanout: 10,
            min_step_prob: 0.9,
        };
        let out = expand(&g, &emb, tom, brother, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1, 1.0);
    }

    #[test]
    fn beam_family() {
        let (g, emb) = family();
        let tom = g.entity_id("tom").unwrap();
        let out = beam_search(&g, &emb, tom, &rule(&g, &["hasBrother", "hasChild"]), &kg_only(10)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(g.entity_name(out[0].entity), "ann");
        assert_eq!(out[0].score, 1.0);
        assert_eq!(out[0].paths[0].render(&g), "tom --hasBrother--> bob --hasChild--> ann (p=1.00)");
        let one_hop = beam_search(&g, &emb, tom, &rule(&g, &["hasBrother"]), &kg_only(1)).unwrap();
        assert_eq!(one_hop.len(), 1);
        assert_eq!((g.entity_name(one_hop[0].entity), one_hop[0].score), ("bob", 1.0));
    }

    #[test]
    fn beam_errors() {
        let (g, emb) = family();
        let tom = g.entity_id("tom").unwrap();
        let bad = LogicRule::new(vec![RelationId(42)]);
        assert!(beam_search(&g, &emb, tom, &bad, &kg_only(4)).is_err());
        assert!(beam_search(&g, &emb, EntityId(42), &rule(&g, &["hasChild"]), &kg_only(4)).is_err());
        assert!(matches!(
            beam_search(&g, &emb, tom, &LogicRule::new(vec![]), &kg_only(4)),
            Err(RetrievalError::EmptyRule)
        ));
        let small = ComplexEmbeddings::<f64>::init_sized(2, 3, 4, 1).unwrap();
        assert!(matches!(
            beam_search(&g, &small, tom, &rule(&g, &["hasChild"]), &kg_only(4)),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn retrieve_merges_with_noisy_or() {
        assert_eq!(noisy_or(&[0.5, 0.5]), 0.75);
        assert_eq!(noisy_or(&[1.0, 0.3]), 1.0);
        assert_eq!(noisy_or(&[0.1]), 0.1);

        // Two parallel relations reach b, so two rules both give it 1.0.
        let g = load_triples("a\tr\tb\na\ts\tb\na\ts\tc\n".as_bytes()).unwrap();
        let emb = ComplexEmbeddings::<f64>::zeros(3, 2, 2).unwrap();
        let a = g.entity_id("a").unwrap();
        let rules = [rule(&g, &["r"]), rule(&g, &["s"])];
        let out = retrieve(&g, &emb, a, &rules, &kg_only(4)).unwrap();
        assert_eq!(out[0].entity, g.entity_id("b").unwrap());
        assert_eq!(out[0].score, 1.0);
        assert_eq!(out[0].paths.len(), 2);
        assert!(matches!(retrieve(&g, &emb, a, &[], &kg_only(4)), Err(RetrievalError::NoRules)));
    }

    #[test]
    fn single_rule_retrieve_equals_beam() {
        let (g, emb) = family();
        let tom = g.entity_id("tom").unwrap();
        let cfg = BeamConfig {
            beam_width: 2,
            embedding_fanout: 3,
            min_step_prob: 0.0,
        };
        let r = rule(&g, &["hasBrother", "hasChild"]);
        let beam = beam_search(&g, &emb, tom, &r, &cfg).unwrap();
        let merged = retrieve(&g, &emb, tom, std::slice::from_ref(&r), &cfg).unwrap();
        assert_eq!(beam, merged);
    }

    #[test]
    fn answer_record_uses_surfaces() {
        let (g, emb) = family();
        let tom = g.entity_id("tom").unwrap();
        let out = beam_search(&g, &emb, tom, &rule(&g, &["hasBrother", "hasChild"]), &kg_only(4)).unwrap();
        let rec = AnswerRecord::new(&out[0], &g);
        assert_eq!(rec.entity, "ann");
        assert_eq!(rec.paths[0].entities, ["tom", "bob", "ann"]);
        assert_eq!(rec.paths[0].relations, ["hasBrother", "hasChild"]);
    }
}
