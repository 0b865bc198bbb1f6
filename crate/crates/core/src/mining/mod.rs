//! Rule mining: cluster training questions by their masked template, collect
//! the relation paths linking each topic entity to each answer, and score
//! every path by how consistently it explains the cluster's answers.

mod walks;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityId, GraphError, KnowledgeGraph};
use crate::rule::LogicRule;

pub use walks::{enumerate_walks, enumerate_walks_capped, sample_walks, RelationPath, WalkSet};

/// Placeholder substituted for the topic entity in question templates.
pub const TOPIC_MASK: &str = "[NE]";

pub const DEFAULT_WALK_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("topic surface must not be empty")]
    EmptyTopic,
    #[error("topic `{topic}` does not occur in question `{question}`")]
    TopicNotInQuestion { question: String, topic: String },
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("walk index does not cover the cluster")]
    IndexMismatch,
    #[error("max walk length must be at least 1")]
    ZeroMaxLen,
    #[error("rules file line {line}: {message}")]
    RulesFormat { line: usize, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A training or evaluation question grounded in the graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub topic: EntityId,
    pub topic_surface: String,
    /// Sorted and deduplicated.
    pub answers: Vec<EntityId>,
}

impl QaExample {
    pub fn new(question: impl Into<String>, topic: EntityId, topic_surface: impl Into<String>, answers: impl IntoIterator<Item = EntityId>) -> Self {
        let mut answers: Vec<EntityId> = answers.into_iter().collect();
        answers.sort_unstable();
        answers.dedup();
        Self {
            question: question.into(),
            topic,
            topic_surface: topic_surface.into(),
            answers,
        }
    }

    pub fn template(&self) -> Result<String, MiningError> {
        mask_topic(&self.question, &self.topic_surface)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionCluster {
    pub template: String,
    pub members: Vec<QaExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbabilityMode {
    /// Indicator divided by the walk-set size; always a probability.
    #[default]
    Normalized,
    /// `|RW|` raised to the indicator, summed over answers. Can exceed 1.
    Literal,
}

impl std::str::FromStr for ProbabilityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "literal" => Ok(Self::Literal),
            other => Err(format!("unknown probability mode `{other}`")),
        }
    }
}

impl std::fmt::Display for ProbabilityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub walks: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub max_len: usize,
    pub mode: ProbabilityMode,
    /// Maximum distinct paths kept per (question, answer) pair.
    pub walk_cap: usize,
    /// When set, paths are found by random walks instead of enumeration.
    pub sampling: Option<SamplingConfig>,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            max_len: 3,
            mode: ProbabilityMode::Normalized,
            walk_cap: DEFAULT_WALK_CAP,
            sampling: None,
        }
    }
}

/// Replaces every occurrence of `topic` in `question` with `[NE]`.
pub fn mask_topic(question: &str, topic: &str) -> Result<String, MiningError> {
    if topic.is_empty() {
        return Err(MiningError::EmptyTopic);
    }
    if !question.contains(topic) {
        return Err(MiningError::TopicNotInQuestion {
            question: question.to_owned(),
            topic: topic.to_owned(),
        });
    }
    Ok(question.replace(topic, TOPIC_MASK))
}

/// Groups examples by exact template, clusters ordered by first appearance.
pub fn cluster_questions(examples: &[QaExample]) -> Result<Vec<QuestionCluster>, MiningError> {
    let mut clusters: Vec<QuestionCluster> = Vec::new();
    let mut position: HashMap<String, usize> = HashMap::new();
    for ex in examples {
        let template = ex.template()?;
        match position.get(&template) {
            Some(&i) => clusters[i].members.push(ex.clone()),
            None => {
                position.insert(template.clone(), clusters.len());
                clusters.push(QuestionCluster {
                    template,
                    members: vec![ex.clone()],
                });
            }
        }
    }
    Ok(clusters)
}

/// `RW(Q_j, v)` for every member `j` of a cluster and every answer `v`,
/// indexed in the cluster's member order.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkIndex {
    walks: Vec<Vec<BTreeSet<RelationPath>>>,
}

impl WalkIndex {
    pub fn build(graph: &KnowledgeGraph, cluster: &QuestionCluster, config: &MiningConfig) -> Result<Self, MiningError> {
        if config.max_len == 0 {
            return Err(MiningError::ZeroMaxLen);
        }
        let mut walks = Vec::with_capacity(cluster.members.len());
        for ex in &cluster.members {
            let mut per_answer = Vec::with_capacity(ex.answers.len());
            for &answer in &ex.answers {
                let paths = match config.sampling {
                    None => {
                        let set = enumerate_walks_capped(graph, ex.topic, answer, config.max_len, config.walk_cap)?;
                        if set.truncated {
                            log::warn!(
                                "walk set for `{}` -> `{}` truncated at {} paths",
                                ex.question,
                                graph.entity_name(answer),
                                config.walk_cap
                            );
                        }
                        set.paths
                    }
                    Some(s) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(s.seed, ex.topic, answer));
                        let mut paths = sample_walks(graph, ex.topic, answer, config.max_len, s.walks, &mut rng)?;
                        if paths.len() > config.walk_cap {
                            log::warn!("sampled walk set truncated at {} paths", config.walk_cap);
                            paths = paths.into_iter().take(config.walk_cap).collect();
                        }
                        paths
                    }
                };
                per_answer.push(paths);
            }
            walks.push(per_answer);
        }
        Ok(Self { walks })
    }

    /// Builds an index from explicit walk sets (member-major, answer-minor).
    pub fn from_sets(walks: Vec<Vec<BTreeSet<RelationPath>>>) -> Self {
        Self { walks }
    }

    pub fn walks(&self, member: usize, answer: usize) -> &BTreeSet<RelationPath> {
        &self.walks[member][answer]
    }

    fn covers(&self, cluster: &QuestionCluster) -> bool {
        self.walks.len() == cluster.members.len()
            && self
                .walks
                .iter()
                .zip(&cluster.members)
                .all(|(w, ex)| w.len() == ex.answers.len())
    }

    /// Union of all walks in the index.
    pub fn candidates(&self) -> BTreeSet<RelationPath> {
        self.walks.iter().flatten().flatten().cloned().collect()
    }
}

fn pair_seed(seed: u64, topic: EntityId, answer: EntityId) -> u64 {
    let key = ((topic.0 as u64) << 32) | answer.0 as u64;
    seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Probability that `path` is a correct rule for `cluster`.
///
/// Per question `Q_j` the score averages over its answers `v`; normalized
/// mode spreads unit mass uniformly over `RW(Q_j, v)`, literal mode takes
/// `|RW(Q_j, v)|` when the path is present and 1 otherwise. The cluster
/// score averages the per-question scores over all members.
pub fn rule_probability(
    path: &[crate::graph::RelationId],
    cluster: &QuestionCluster,
    index: &WalkIndex,
    mode: ProbabilityMode,
) -> Result<f64, MiningError> {
    if cluster.members.is_empty() {
        return Err(MiningError::EmptyCluster);
    }
    if !index.covers(cluster) {
        return Err(MiningError::IndexMismatch);
    }
    let mut total = 0.0;
    for (member, ex) in cluster.members.iter().enumerate() {
        if ex.answers.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for answer in 0..ex.answers.len() {
            let rw = index.walks(member, answer);
            let present = rw.contains(path);
            sum += match mode {
                ProbabilityMode::Normalized if present => 1.0 / rw.len() as f64,
                ProbabilityMode::Normalized => 0.0,
                ProbabilityMode::Literal if present => rw.len() as f64,
                ProbabilityMode::Literal => 1.0,
            };
        }
        total += sum / ex.answers.len() as f64;
    }
    Ok(total / cluster.members.len() as f64)
}

/// Mined rules per cluster template.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MinedRules {
    pub mode: ProbabilityMode,
    pub clusters: BTreeMap<String, Vec<LogicRule>>,
}

impl MinedRules {
    pub fn rules_for(&self, template: &str) -> &[LogicRule] {
        self.clusters.get(template).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every distinct rule across clusters, ordered by relation ids.
    pub fn pool(&self) -> Vec<LogicRule> {
        let mut seen = BTreeSet::new();
        let mut pool = Vec::new();
        for rule in self.clusters.values().flatten() {
            if seen.insert(rule.relations.clone()) {
                pool.push(LogicRule::new(rule.relations.clone()));
            }
        }
        pool.sort_by(|a, b| a.relations.cmp(&b.relations));
        pool
    }

    pub fn rule_count(&self) -> usize {
        self.clusters.values().map(Vec::len).sum()
    }

    /// One JSON record per line: template, relation surfaces, probability, mode.
    pub fn write_to<W: Write>(&self, graph: &KnowledgeGraph, mut out: W) -> Result<(), MiningError> {
        for (template, rules) in &self.clusters {
            for rule in rules {
                let record = RuleRecord {
                    cluster_template: template.clone(),
                    relations: rule.relations.iter().map(|&r| graph.relation_name(r).to_owned()).collect(),
                    probability: rule.probability.unwrap_or(0.0),
                    mode: self.mode,
                };
                let line = serde_json::to_string(&record).map_err(|e| MiningError::RulesFormat {
                    line: 0,
                    message: e.to_string(),
                })?;
                writeln!(out, "{line}")?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(graph: &KnowledgeGraph, source: R) -> Result<Self, MiningError> {
        let mut mined = MinedRules::default();
        let mut mode = None;
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| MiningError::RulesFormat { line: i + 1, message };
            let record: RuleRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if *mode.get_or_insert(record.mode) != record.mode {
                return Err(bad("mixed probability modes".into()));
            }
            let relations = record
                .relations
                .iter()
                .map(|s| graph.relation_id(s).ok_or_else(|| bad(format!("unknown relation `{s}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if relations.is_empty() {
                return Err(bad("empty rule".into()));
            }
            mined
                .clusters
                .entry(record.cluster_template)
                .or_default()
                .push(LogicRule::scored(relations, record.probability));
        }
        mined.mode = mode.unwrap_or_default();
        Ok(mined)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RuleRecord {
    cluster_template: String,
    relations: Vec<String>,
    probability: f64,
    mode: ProbabilityMode,
}

/// Mines rules for every cluster. For each answer of each member the
/// highest-probability walk is retained; retained rules are sorted by
/// probability descending with ties broken by relation ids.
pub fn mine_rules(graph: &KnowledgeGraph, examples: &[QaExample], config: &MiningConfig) -> Result<MinedRules, MiningError> {
    if config.max_len == 0 {
        return Err(MiningError::ZeroMaxLen);
    }
    let clusters = cluster_questions(examples)?;
    let mined: Vec<(String, Vec<LogicRule>)> = clusters
        .into_par_iter()
        .map(|mut cluster| {
            // Canonical member order keeps sums bit-identical under input permutation.
            cluster
                .members
                .sort_by(|a, b| (&a.question, a.topic, &a.answers).cmp(&(&b.question, b.topic, &b.answers)));
            let rules = mine_cluster(graph, &cluster, config)?;
            Ok((cluster.template, rules))
        })
        .collect::<Result<_, MiningError>>()?;
    Ok(MinedRules {
        mode: config.mode,
        clusters: mined.into_iter().collect(),
    })
}

fn mine_cluster(graph: &KnowledgeGraph, cluster: &QuestionCluster, config: &MiningConfig) -> Result<Vec<LogicRule>, MiningError> {
    let index = WalkIndex::build(graph, cluster, config)?;
    let mut scores: HashMap<RelationPath, f64> = HashMap::new();
    for path in index.candidates() {
        let p = rule_probability(&path, cluster, &index, config.mode)?;
        scores.insert(path, p);
    }
    let mut retained: BTreeSet<&RelationPath> = BTreeSet::new();
    for (member, ex) in cluster.members.iter().enumerate() {
        for answer in 0..ex.answers.len() {
            let best = index
                .walks(member, answer)
                .iter()
                .min_by(|a, b| scores[*b].total_cmp(&scores[*a]).then_with(|| a.cmp(b)));
            if let Some(best) = best {
                retained.insert(best);
            }
        }
    }
    let mut rules: Vec<LogicRule> = retained
        .into_iter()
        .map(|p| LogicRule::scored(p.clone(), scores[p]))
        .collect();
    rules.sort_by(LogicRule::rank_cmp);
    Ok(rules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{load_triples, RelationId};

    const FAMILY: &str = "tom\thasBrother\tbob\nbob\thasChild\tann\nbob\tisMarriedTo\tsue\n";

    fn single_cluster(answers: usize) -> QuestionCluster {
        QuestionCluster {
            template: "q [NE]".into(),
            members: vec![QaExample::new("q x", EntityId(0), "x", (1..=answers as u32).map(EntityId))],
        }
    }

    #[test]
    fn masking() {
        assert_eq!(
            mask_topic("Who is the child of Tom's brother?", "Tom").unwrap(),
            "Who is the child of [NE]'s brother?"
        );
        assert_eq!(mask_topic("Tom likes Tom", "Tom").unwrap(), "[NE] likes [NE]");
        assert!(matches!(
            mask_topic("Who directed Inception?", "Tom"),
            Err(MiningError::TopicNotInQuestion { .. })
        ));
        assert!(matches!(mask_topic("anything", ""), Err(MiningError::EmptyTopic)));
    }

    #[test]
    fn clustering() {
        let a = QaExample::new("who is A's brother", EntityId(0), "A", [EntityId(1)]);
        let b = QaExample::new("who is B's brother", EntityId(2), "B", [EntityId(3)]);
        let c = QaExample::new("who married C", EntityId(4), "C", [EntityId(5)]);
        let clusters = cluster_questions(&[a.clone(), c.clone(), b.clone()]).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].template, "who is [NE]'s brother");
        assert_eq!(clusters[0].members, [a, b]);
        assert_eq!(clusters[1].members, [c]);
        assert!(cluster_questions(&[]).unwrap().is_empty());
    }

    #[test]
    fn distinct_templates_are_singletons() {
        let examples: Vec<_> = (0..5)
            .map(|i| QaExample::new(format!("q{i} about T"), EntityId(0), "T", [EntityId(1)]))
            .collect();
        let clusters = cluster_questions(&examples).unwrap();
        assert_eq!(clusters.len(), 5);
        assert!(clusters.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn probability_single_walk() {
        let p = vec![RelationId(0)];
        let idx = WalkIndex::from_sets(vec![vec![BTreeSet::from([p.clone()])]]);
        let c = single_cluster(1);
        assert_eq!(rule_probability(&p, &c, &idx, ProbabilityMode::Normalized).unwrap(), 1.0);
    }

    #[test]
    fn probability_two_walks() {
        let p = vec![RelationId(0)];
        let q = vec![RelationId(1), RelationId(2)];
        let idx = WalkIndex::from_sets(vec![vec![BTreeSet::from([p.clone(), q])]]);
        let c = single_cluster(1);
        assert_eq!(rule_probability(&p, &c, &idx, ProbabilityMode::Normalized).unwrap(), 0.5);
        assert_eq!(rule_probability(&p, &c, &idx, ProbabilityMode::Literal).unwrap(), 2.0);
    }

    #[test]
    fn empty_walk_sets_contribute_nothing() {
        let p = vec![RelationId(0)];
        let idx = WalkIndex::from_sets(vec![vec![BTreeSet::from([p.clone()]), BTreeSet::new()]]);
        let c = single_cluster(2);
        assert_eq!(rule_probability(&p, &c, &idx, ProbabilityMode::Normalized).unwrap(), 0.5);
        assert_eq!(rule_probability(&[RelationId(9)], &c, &idx, ProbabilityMode::Normalized).unwrap(), 0.0);
        // |RW|^0 = 1 for both answers.
        assert_eq!(rule_probability(&[RelationId(9)], &c, &idx, ProbabilityMode::Literal).unwrap(), 1.0);
    }

    #[test]
    fn probability_errors() {
        let empty = QuestionCluster {
            template: "t".into(),
            members: vec![],
        };
        let idx = WalkIndex::from_sets(vec![]);
        assert!(matches!(
            rule_probability(&[RelationId(0)], &empty, &idx, ProbabilityMode::Normalized),
            Err(MiningError::EmptyCluster)
        ));
        assert!(matches!(
            rule_probability(&[RelationId(0)], &single_cluster(1), &idx, ProbabilityMode::Normalized),
            Err(MiningError::IndexMismatch)
        ));
    }

    #[test]
    fn mines_family_rule() {
        let g = load_triples(FAMILY.as_bytes()).unwrap();
        let tom = g.entity_id("tom").unwrap();
        let ann = g.entity_id("ann").unwrap();
        let ex = QaExample::new("Who is the child of tom's brother?", tom, "tom", [ann]);
        let mined = mine_rules(&g, &[ex], &MiningConfig::default()).unwrap();
        let rules = mined.rules_for("Who is the child of [NE]'s brother?");
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].display(&g), "hasBrother -> hasChild");
        assert_eq!(rules[0].probability, Some(1.0));
        assert!(mine_rules(&g, &[], &MiningConfig::default()).unwrap().clusters.is_empty());
    }

    #[test]
    fn ties_ordered_by_relation_ids() {
        // Two questions in one cluster, each explained by a different single edge.
        let g = load_triples("a\ts\tb\nc\tr\td\n".as_bytes()).unwrap();
        let id = |s| g.entity_id(s).unwrap();
        let ex1 = QaExample::new("q a", id("a"), "a", [id("b")]);
        let ex2 = QaExample::new("q c", id("c"), "c", [id("d")]);
        let mined = mine_rules(&g, &[ex1, ex2], &MiningConfig::default()).unwrap();
        let rules = mined.rules_for("q [NE]");
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].probability, rules[1].probability);
        assert!(rules[0].relations < rules[1].relations);
        assert_eq!(rules[0].display(&g), "s");
    }

    #[test]
    fn unanswerable_cluster_has_no_rules() {
        let g = load_triples("a\tr\tb\nc\tr\td\n".as_bytes()).unwrap();
        let id = |s| g.entity_id(s).unwrap();
        let ex = QaExample::new("q a", id("a"), "a", [id("d")]);
        let mined = mine_rules(&g, &[ex], &MiningConfig::default()).unwrap();
        assert!(mined.rules_for("q [NE]").is_empty());
    }

    #[test]
    fn rules_file_round_trip() {
        let g = load_triples(FAMILY.as_bytes()).unwrap().with_inverses().unwrap();
        let tom = g.entity_id("tom").unwrap();
        let ann = g.entity_id("ann").unwrap();
        let ex = QaExample::new("Who is the child of tom's brother?", tom, "tom", [ann]);
        let mined = mine_rules(&g, &[ex], &MiningConfig::default()).unwrap();
        let mut buf = Vec::new();
        mined.write_to(&g, &mut buf).unwrap();
        let back = MinedRules::read_from(&g, buf.as_slice()).unwrap();
        assert_eq!(back, mined);
        assert!(MinedRules::read_from(&g, "{\"bad\":1}\n".as_bytes()).is_err());
    }

    #[test]
    fn zero_length_rejected() {
        let g = load_triples(FAMILY.as_bytes()).unwrap();
        let cfg = MiningConfig {
            max_len: 0,
            ..MiningConfig::default()
        };
        assert!(matches!(mine_rules(&g, &[], &cfg), Err(MiningError::ZeroMaxLen)));
    }
}
