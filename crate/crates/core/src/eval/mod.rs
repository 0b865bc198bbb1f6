//! Datasets, metrics, the end-to-end runner and the synthetic benchmark.

mod metrics;
mod pipeline;
pub mod synthetic;

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::KnowledgeGraph;
use crate::mining::QaExample;

pub use metrics::{accuracy, hits_at_1, macro_average, prf1, EvalMetrics, Prf1, QuestionMetrics};
pub use pipeline::{
    evaluate, run_ablation, AnswerOutcome, EvalReport, Pipeline, PipelineSettings, Prediction, ReportRow, Variant,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("gold answer set is empty")]
    EmptyGold,
    #[error("split `{0}` has no examples")]
    EmptySplit(String),
    #[error("invalid setting: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mining(#[from] crate::mining::MiningError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Llm(#[from] crate::llm::LlmError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub examples: Vec<QaExample>,
}

/// A QA line whose topic or some answers are missing from the graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedLine {
    pub line: usize,
    pub question: String,
    pub unresolved: Vec<String>,
    /// True when nothing usable was left and the line was skipped.
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedQa {
    pub examples: Vec<QaExample>,
    pub flagged: Vec<FlaggedLine>,
}

/// Splits a MetaQA question into its text without brackets and the topic.
pub fn split_topic(question: &str) -> Result<(String, String), String> {
    let open: Vec<usize> = question.match_indices('[').map(|(i, _)| i).collect();
    let close: Vec<usize> = question.match_indices(']').map(|(i, _)| i).collect();
    if open.len() != 1 || close.len() != 1 {
        return Err(format!(
            "expected exactly one [topic] span, found {} `[` and {} `]`",
            open.len(),
            close.len()
        ));
    }
    let (o, c) = (open[0], close[0]);
    if c < o {
        return Err("`]` before `[`".into());
    }
    let topic = question[o + 1..c].trim();
    if topic.is_empty() {
        return Err("empty topic span".into());
    }
    let text = format!("{}{}{}", &question[..o], &question[o + 1..c], &question[c + 1..]);
    Ok((text, topic.to_owned()))
}

/// MetaQA format: `question with one [topic] span<TAB>ans1|ans2|…`.
/// Blank lines are skipped. Surfaces missing from the graph are flagged
/// rather than fatal; a line with an unknown topic or no known answer is
/// dropped.
pub fn load_qa<R: BufRead>(source: R, graph: &KnowledgeGraph) -> Result<LoadedQa, EvalError> {
    let mut examples = Vec::new();
    let mut flagged = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |message: String| EvalError::Format { line: line_no, message };
        let (question, answers) = line
            .split_once('\t')
            .ok_or_else(|| format_err("missing tab between question and answers".into()))?;
        let (text, topic) = split_topic(question).map_err(format_err)?;
        let mut surfaces: Vec<&str> = answers.split('|').map(str::trim).filter(|a| !a.is_empty()).collect();
        surfaces.sort_unstable();
        surfaces.dedup();
        if surfaces.is_empty() {
            return Err(format_err("no answers".into()));
        }

        let mut unresolved = Vec::new();
        let topic_id = graph.entity_id(&topic);
        if topic_id.is_none() {
            unresolved.push(topic.clone());
        }
        let mut ids = Vec::new();
        for s in surfaces {
            match graph.entity_id(s) {
                Some(id) => ids.push(id),
                None => unresolved.push(s.to_owned()),
            }
        }
        let usable = topic_id.is_some() && !ids.is_empty();
        if !unresolved.is_empty() {
            flagged.push(FlaggedLine {
                line: line_no,
                question: text.clone(),
                unresolved,
                dropped: !usable,
            });
        }
        if let (true, Some(topic_id)) = (usable, topic_id) {
            examples.push(QaExample::new(text, topic_id, topic, ids));
        }
    }
    Ok(LoadedQa { examples, flagged })
}

/// Writes examples back in MetaQA format, bracketing the first occurrence
/// of the topic surface.
pub fn format_qa_line(question: &str, topic: &str, answers: &[&str]) -> Result<String, EvalError> {
    let at = question.find(topic).ok_or_else(|| EvalError::Format {
        line: 0,
        message: format!("topic `{topic}` not in question `{question}`"),
    })?;
    Ok(format!(
        "{}[{}]{}\t{}",
        &question[..at],
        topic,
        &question[at + topic.len()..],
        answers.join("|")
    ))
}
