//! Prompting, rule-token parsing and completion backends.

mod backend;
mod prompts;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{KnowledgeGraph, RelationId};
use crate::mining::QaExample;
use crate::retrieval::ScoredAnswer;
use crate::rule::LogicRule;

pub use backend::{
    complete_all, prompt_hash, CompletionBackend, CompletionParams, HttpBackend, HttpConfig, MockBackend, NullBackend,
};
pub use prompts::{
    build_generation_prompt, build_rerank_prompt, build_selection_prompt, load_exemplars, Exemplar, RERANK_MARKER,
};

pub const RULE_START: &str = "<RULE>";
pub const RULE_SEP: &str = "<SEP>";
pub const RULE_END: &str = "</RULE>";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("relation surface `{0}` contains a reserved rule token")]
    ReservedToken(String),
    #[error("cannot serialize an empty rule")]
    EmptyRule,
    #[error("unbalanced rule tokens at byte {offset}: {message}")]
    Unbalanced { offset: usize, message: String },
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("question `{0}` has no gold rules")]
    NoGoldRules(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("fixture: {0}")]
    Fixture(String),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_surface(surface: &str) -> Result<(), LlmError> {
    if [RULE_START, RULE_SEP, RULE_END].iter().any(|t| surface.contains(t)) {
        return Err(LlmError::ReservedToken(surface.to_owned()));
    }
    Ok(())
}

/// `<RULE>r1<SEP>r2</RULE>` over surface forms.
pub fn serialize_surfaces<S: AsRef<str>>(surfaces: &[S]) -> Result<String, LlmError> {
    if surfaces.is_empty() {
        return Err(LlmError::EmptyRule);
    }
    let mut out = String::from(RULE_START);
    for (i, s) in surfaces.iter().enumerate() {
        check_surface(s.as_ref())?;
        if i > 0 {
            out.push_str(RULE_SEP);
        }
        out.push_str(s.as_ref());
    }
    out.push_str(RULE_END);
    Ok(out)
}

pub fn serialize_rule(rule: &LogicRule, graph: &KnowledgeGraph) -> Result<String, LlmError> {
    for &r in &rule.relations {
        graph.check_relation(r)?;
    }
    let names: Vec<&str> = rule.relations.iter().map(|&r| graph.relation_name(r)).collect();
    serialize_surfaces(&names)
}

/// A `<RULE>…</RULE>` span as written, before vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSpan {
    pub offset: usize,
    pub surfaces: Vec<String>,
}

/// Extracts every rule span in order. An opening token without a matching
/// close, or a close or separator outside a span, is an error.
pub fn parse_rule_spans(text: &str) -> Result<Vec<RuleSpan>, LlmError> {
    let mut spans = Vec::new();
    let mut pos = 0;
    loop {
        let rest = &text[pos..];
        let next_start = rest.find(RULE_START);
        let stray = [RULE_END, RULE_SEP]
            .iter()
            .filter_map(|t| rest.find(t).map(|i| (i, *t)))
            .min();
        if let Some((i, token)) = stray {
            if next_start.is_none_or(|s| i < s) {
                return Err(LlmError::Unbalanced {
                    offset: pos + i,
                    message: format!("`{token}` outside a rule"),
                });
            }
        }
        let Some(start) = next_start else { break };
        let body_start = pos + start + RULE_START.len();
        let body = &text[body_start..];
        let end = body.find(RULE_END).ok_or_else(|| LlmError::Unbalanced {
            offset: pos + start,
            message: "rule is never closed".into(),
        })?;
        let inner = &body[..end];
        if let Some(nested) = inner.find(RULE_START) {
            return Err(LlmError::Unbalanced {
                offset: body_start + nested,
                message: "rule opened inside another rule".into(),
            });
        }
        spans.push(RuleSpan {
            offset: pos + start,
            surfaces: inner.split(RULE_SEP).map(|s| s.trim().to_owned()).collect(),
        });
        pos = body_start + end + RULE_END.len();
    }
    Ok(spans)
}

/// One parsed rule; `unknown` lists surfaces missing from the vocabulary,
/// in which case `rule` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRule {
    pub offset: usize,
    pub rule: Option<LogicRule>,
    pub unknown: Vec<String>,
}

pub fn parse_rules(text: &str, graph: &KnowledgeGraph) -> Result<Vec<ParsedRule>, LlmError> {
    Ok(parse_rule_spans(text)?
        .into_iter()
        .map(|span| {
            let mut ids: Vec<RelationId> = Vec::new();
            let mut unknown = Vec::new();
            for s in &span.surfaces {
                match graph.relation_id(s) {
                    Some(id) if !s.is_empty() => ids.push(id),
                    _ => unknown.push(s.clone()),
                }
            }
            ParsedRule {
                offset: span.offset,
                rule: unknown.is_empty().then(|| LogicRule::new(ids)),
                unknown,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub rules: Vec<LogicRule>,
    pub fell_back: bool,
}

/// Asks the backend to pick rules among `candidates`. Anything it names that
/// is not a candidate is dropped; if nothing usable comes back, the `k` most
/// probable candidates are used instead.
#[allow(clippy::too_many_arguments)]
pub fn select_rules(
    backend: &dyn CompletionBackend,
    params: &CompletionParams,
    graph: &KnowledgeGraph,
    question: &str,
    candidates: &[LogicRule],
    shots: &[Exemplar],
    k: usize,
) -> Result<Selection, LlmError> {
    if candidates.is_empty() {
        return Err(LlmError::EmptyInput("candidate rule list"));
    }
    let fallback = || {
        let mut ranked = candidates.to_vec();
        ranked.sort_by(LogicRule::rank_cmp);
        let mut seen = std::collections::BTreeSet::new();
        ranked.retain(|r| seen.insert(r.relations.clone()));
        ranked.truncate(k);
        Selection {
            rules: ranked,
            fell_back: true,
        }
    };
    let serialized: Vec<String> = candidates
        .iter()
        .map(|r| serialize_rule(r, graph))
        .collect::<Result<_, _>>()?;
    let prompt = build_selection_prompt(question, &serialized, shots)?;
    let response = match backend.complete(&prompt, params) {
        Ok(text) => text,
        Err(e) => {
            log::debug!("rule selection fell back: {e}");
            return Ok(fallback());
        }
    };
    let parsed = match parse_rules(&response, graph) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("unparseable selection response: {e}");
            return Ok(fallback());
        }
    };
    let mut chosen: Vec<LogicRule> = Vec::new();
    for rule in parsed.into_iter().filter_map(|p| p.rule) {
        if chosen.iter().any(|c| c.relations == rule.relations) {
            continue;
        }
        if let Some(candidate) = candidates.iter().find(|c| c.relations == rule.relations) {
            chosen.push(candidate.clone());
        }
    }
    chosen.truncate(k);
    if chosen.is_empty() {
        return Ok(fallback());
    }
    Ok(Selection {
        rules: chosen,
        fell_back: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    pub answers: Vec<ScoredAnswer>,
    pub fell_back: bool,
}

/// Entity surfaces after the last marker line, or every line without one.
pub fn parse_rerank_response(text: &str) -> Vec<String> {
    let lines: Vec<&str> = text.lines().collect();
    let body = match lines.iter().rposition(|l| l.trim() == RERANK_MARKER) {
        Some(i) => &lines[i + 1..],
        None => &lines[..],
    };
    body.iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Reorders `answers` by the backend's list. Named candidates come first in
/// the order given, the rest follow in score order.
pub fn rerank(
    backend: &dyn CompletionBackend,
    params: &CompletionParams,
    graph: &KnowledgeGraph,
    question: &str,
    answers: &[ScoredAnswer],
) -> Result<Reranked, LlmError> {
    if answers.is_empty() {
        return Err(LlmError::EmptyInput("answer list"));
    }
    let mut by_score = answers.to_vec();
    by_score.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.entity.cmp(&b.entity)));
    let prompt = build_rerank_prompt(question, answers, graph)?;
    let names = match backend.complete(&prompt, params) {
        Ok(text) => parse_rerank_response(&text),
        Err(e) => {
            log::debug!("rerank fell back: {e}");
            Vec::new()
        }
    };
    let mut taken = vec![false; by_score.len()];
    let mut ordered = Vec::with_capacity(by_score.len());
    for name in &names {
        if let Some(i) = by_score
            .iter()
            .position(|a| graph.entity_name(a.entity) == name.as_str())
        {
            if !taken[i] {
                taken[i] = true;
                ordered.push(by_score[i].clone());
            }
        }
    }
    if ordered.is_empty() {
        return Ok(Reranked {
            answers: by_score,
            fell_back: true,
        });
    }
    ordered.extend(by_score.iter().zip(&taken).filter(|(_, t)| !**t).map(|(a, _)| a.clone()));
    Ok(Reranked {
        answers: ordered,
        fell_back: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    pub output: String,
}

/// One record per (question, gold rule), grouped by question in input order.
/// `gold` is keyed by question text.
pub fn export_instruction_data(
    examples: &[QaExample],
    gold: &BTreeMap<String, Vec<LogicRule>>,
    graph: &KnowledgeGraph,
) -> Result<Vec<InstructionRecord>, LlmError> {
    let mut out = Vec::new();
    for ex in examples {
        let rules = gold
            .get(&ex.question)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| LlmError::NoGoldRules(ex.question.clone()))?;
        let instruction = build_generation_prompt(&ex.question)?;
        for rule in rules {
            out.push(InstructionRecord {
                instruction: instruction.clone(),
                output: serialize_rule(rule, graph)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{load_triples, EntityId};
    use crate::retrieval::ReasoningPath;

    const FAMILY: &str = "tom\thasBrother\tbob\nbob\thasChild\tann\nbob\tisMarriedTo\tsue\n";

    fn graph() -> KnowledgeGraph {
        load_triples(FAMILY.as_bytes()).unwrap()
    }

    fn rule(g: &KnowledgeGraph, names: &[&str], p: f64) -> LogicRule {
        LogicRule::scored(names.iter().map(|n| g.relation_id(n).unwrap()).collect(), p)
    }

    #[test]
    fn serialize_examples() {
        let g = graph();
        assert_eq!(
            serialize_rule(&rule(&g, &["hasBrother", "hasChild"], 1.0), &g).unwrap(),
            "<RULE>hasBrother<SEP>hasChild</RULE>"
        );
        assert_eq!(serialize_surfaces(&["hasChild"]).unwrap(), "<RULE>hasChild</RULE>");
        assert!(matches!(serialize_surfaces(&["a<SEP>b"]), Err(LlmError::ReservedToken(_))));
        assert!(matches!(serialize_surfaces::<&str>(&[]), Err(LlmError::EmptyRule)));
    }

    #[test]
    fn parse_examples() {
        let spans = parse_rule_spans("The correct logic rules are: <RULE>a<SEP>b</RULE> and <RULE>c</RULE>").unwrap();
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].surfaces, ["a", "b"]);
        assert_eq!(spans[1].surfaces, ["c"]);
        assert!(parse_rule_spans("nothing here").unwrap().is_empty());
        match parse_rule_spans("ok <RULE>a<SEP>") {
            Err(LlmError::Unbalanced { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_rule_spans("a</RULE>").is_err());
        assert!(parse_rule_spans("<RULE>a<RULE>b</RULE>").is_err());
    }

    #[test]
    fn parse_reports_unknown_surfaces() {
        let g = graph();
        let parsed = parse_rules("<RULE>hasBrother<SEP>hasUncle</RULE><RULE>hasChild</RULE>", &g).unwrap();
        assert_eq!(parsed[0].rule, None);
        assert_eq!(parsed[0].unknown, ["hasUncle"]);
        assert_eq!(parsed[1].rule, Some(LogicRule::new(vec![g.relation_id("hasChild").unwrap()])));
    }

    #[test]
    fn round_trip() {
        let g = graph().with_inverses().unwrap();
        let r = LogicRule::new(vec![RelationId(0), RelationId(4), RelationId(2)]);
        let text = serialize_rule(&r, &g).unwrap();
        let back = parse_rules(&text, &g).unwrap();
        assert_eq!(back[0].rule.as_ref().unwrap().relations, r.relations);
    }

    #[test]
    fn select_with_mock_null_and_foreign() {
        let g = graph();
        let candidates = [
            rule(&g, &["hasBrother", "hasChild"], 0.9),
            rule(&g, &["hasBrother", "isMarriedTo"], 0.4),
        ];
        let params = CompletionParams::default();
        let q = "Who is the child of tom's brother?";
        let prompt = build_selection_prompt(q, &["<RULE>hasBrother<SEP>hasChild</RULE>".into(), "<RULE>hasBrother<SEP>isMarriedTo</RULE>".into()], &[]).unwrap();
        let mock = MockBackend::from_pairs([(prompt.as_str(), "<RULE>hasBrother<SEP>isMarriedTo</RULE>")]);
        let s = select_rules(&mock, &params, &g, q, &candidates, &[], 3).unwrap();
        assert_eq!(s.rules, [candidates[1].clone()]);
        assert!(!s.fell_back);

        let s = select_rules(&NullBackend, &params, &g, q, &candidates, &[], 1).unwrap();
        assert_eq!(s.rules, [candidates[0].clone()]);
        assert!(s.fell_back);

        let foreign = MockBackend::with_default("<RULE>hasChild</RULE>");
        let s = select_rules(&foreign, &params, &g, q, &candidates, &[], 1).unwrap();
        assert!(s.fell_back);
        assert_eq!(s.rules, [candidates[0].clone()]);
        assert!(select_rules(&NullBackend, &params, &g, q, &[], &[], 1).is_err());
    }

    fn answer(g: &KnowledgeGraph, name: &str, score: f64) -> ScoredAnswer {
        let e = g.entity_id(name).unwrap();
        let mut path = ReasoningPath::start(g.entity_id("tom").unwrap());
        path = path.extend(RelationId(0), e, score);
        ScoredAnswer {
            entity: e,
            score,
            paths: vec![path],
        }
    }

    #[test]
    fn rerank_contracts() {
        let g = graph();
        let params = CompletionParams::default();
        let pool = [answer(&g, "ann", 0.9), answer(&g, "bob", 0.7), answer(&g, "sue", 0.5)];
        let names = |r: &Reranked| r.answers.iter().map(|a| g.entity_name(a.entity).to_owned()).collect::<Vec<_>>();

        let r = rerank(&NullBackend, &params, &g, "q", &pool[..2]).unwrap();
        assert_eq!(names(&r), ["ann", "bob"]);
        assert!(r.fell_back);

        let swap = MockBackend::with_default("Answers:\nbob\nann");
        assert_eq!(names(&rerank(&swap, &params, &g, "q", &pool[..2]).unwrap()), ["bob", "ann"]);

        let only_b = MockBackend::with_default("bob");
        assert_eq!(names(&rerank(&only_b, &params, &g, "q", &pool).unwrap()), ["bob", "ann", "sue"]);

        let outsider = MockBackend::with_default("Answers:\ntom\n");
        let r = rerank(&outsider, &params, &g, "q", &pool).unwrap();
        assert!(r.fell_back);
        assert_eq!(names(&r), ["ann", "bob", "sue"]);
        assert!(rerank(&NullBackend, &params, &g, "q", &[]).is_err());
    }

    #[test]
    fn rerank_response_uses_last_marker() {
        assert_eq!(parse_rerank_response("Answers: maybe\nAnswers:\n a \n\nb"), ["a", "b"]);
        assert_eq!(parse_rerank_response("x\ny"), ["x", "y"]);
    }

    #[test]
    fn export_counts_and_round_trips() {
        let g = graph();
        let q1 = QaExample::new("child of tom's brother", EntityId(0), "tom", vec![EntityId(2)]);
        let q2 = QaExample::new("spouse of tom's brother", EntityId(0), "tom", vec![EntityId(3)]);
        let r1 = rule(&g, &["hasBrother", "hasChild"], 1.0);
        let r2 = rule(&g, &["hasBrother", "isMarriedTo"], 1.0);
        let mut gold = BTreeMap::new();
        gold.insert(q1.question.clone(), vec![r1.clone(), r2.clone()]);
        gold.insert(q2.question.clone(), vec![r2.clone(), r1.clone()]);
        let records = export_instruction_data(&[q1.clone(), q2.clone()], &gold, &g).unwrap();
        assert_eq!(records.len(), 4);
        assert!(records[0].instruction.ends_with(&q1.question));
        assert!(records[2].instruction.ends_with(&q2.question));
        let back = parse_rules(&records[1].output, &g).unwrap();
        assert_eq!(back[0].rule.as_ref().unwrap().relations, r2.relations);

        gold.insert(q2.question.clone(), vec![]);
        assert!(matches!(export_instruction_data(&[q1, q2], &gold, &g), Err(LlmError::NoGoldRules(_))));
    }

    #[test]
    fn rerank_prompt_mentions_each_candidate_once() {
        let g = graph();
        let pool = [answer(&g, "ann", 0.834)];
        let prompt = build_rerank_prompt("q", &pool, &g).unwrap();
        assert_eq!(prompt.matches("-->").count(), 1);
        assert!(prompt.contains("(p=0.83)"));
    }
}
