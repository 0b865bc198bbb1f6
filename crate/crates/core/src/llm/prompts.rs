use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::graph::KnowledgeGraph;
use crate::retrieval::ScoredAnswer;

pub const RERANK_MARKER: &str = "Answers:";

const SELECTION_HEADER: &str =
    "Please select correct logic rules that can be used to answer the following multi-hop question: ";
const GENERATION_HEADER: &str =
    "Please generate a correct, high-quality logic rule that can help answer the following question: ";

/// A worked selection shown to the model before the live question. Rules
/// are kept in their serialized `<RULE>…</RULE>` form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub candidates: Vec<String>,
    pub reason: String,
    pub answer: Vec<String>,
}

/// Reads exemplars from JSON lines; blank lines are skipped.
pub fn load_exemplars<R: BufRead>(source: R) -> Result<Vec<Exemplar>, LlmError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Exemplar =
            serde_json::from_str(&line).map_err(|e| LlmError::Fixture(format!("exemplar line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

fn selection_block(question: &str, candidates: &[String]) -> String {
    let mut out = format!("{SELECTION_HEADER}{question}\nCandidate logic rules:\n");
    for (i, c) in candidates.iter().enumerate() {
        out.push_str(&format!("{}. {c}\n", i + 1));
    }
    out.push_str("Reason:\n");
    out
}

pub fn build_selection_prompt(question: &str, candidates: &[String], shots: &[Exemplar]) -> Result<String, LlmError> {
    if candidates.is_empty() {
        return Err(LlmError::EmptyInput("candidate rule list"));
    }
    let mut out = String::new();
    for shot in shots {
        out.push_str(&selection_block(&shot.question, &shot.candidates));
        out.push_str(&shot.reason);
        out.push_str("\nThe correct logic rules are: ");
        out.push_str(&shot.answer.join(" "));
        out.push_str("\n\n");
    }
    out.push_str(&selection_block(question, candidates));
    out.push_str("The correct logic rules are:");
    Ok(out)
}

pub fn build_generation_prompt(question: &str) -> Result<String, LlmError> {
    if question.is_empty() {
        return Err(LlmError::EmptyInput("question"));
    }
    Ok(format!("{GENERATION_HEADER}{question}"))
}

/// Lists each candidate with its best path, in the given order, and asks
/// for the answers one per line after the marker.
pub fn build_rerank_prompt(question: &str, answers: &[ScoredAnswer], graph: &KnowledgeGraph) -> Result<String, LlmError> {
    if answers.is_empty() {
        return Err(LlmError::EmptyInput("answer list"));
    }
    let mut out = format!("Question: {question}\nCandidate answers with their reasoning paths:\n");
    for (i, a) in answers.iter().enumerate() {
        let path = match a.best_path() {
            Some(p) => p.render(graph),
            None => format!("(no path, p={:.2})", a.score),
        };
        out.push_str(&format!("{}. {}: {path}\n", i + 1, graph.entity_name(a.entity)));
    }
    out.push_str(
        "Using the reasoning paths, list the correct answers to the question, most likely first, \
         one entity per line after the line \"Answers:\".\n",
    );
    out.push_str(RERANK_MARKER);
    Ok(out)
}
