//! Reading-comprehension JSON in the SQuAD v1.1 layout.

use std::path::Path;

use serde_json::Value;

use crate::error::{EndxError, Result};

/// One question with the character offset of its first answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RcQuestion {
    pub id: String,
    pub question: String,
    /// Offset in characters (not bytes) into the passage context.
    pub answer_start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Passage {
    pub context: String,
    pub questions: Vec<RcQuestion>,
}

impl Passage {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

pub fn parse_rc_json(path: &Path) -> Result<Vec<Passage>> {
    let text = std::fs::read_to_string(path).map_err(|e| EndxError::io(path, e))?;
    parse_rc_str(&text, &path.display().to_string())
}

/// Parses a document already in memory; `source` only labels errors.
pub fn parse_rc_str(text: &str, source: &str) -> Result<Vec<Passage>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| EndxError::Parse {
        path: source.to_string(),
        message: format!("malformed JSON: {e}"),
    })?;
    let err = |at: &str, what: &str| EndxError::Parse { path: source.to_string(), message: format!("{at}: {what}") };

    let data = array(&doc, "data").ok_or_else(|| err("data", "missing array"))?;
    let mut out = Vec::new();
    for (i, article) in data.iter().enumerate() {
        let at = format!("data[{i}].paragraphs");
        let paragraphs = array(article, "paragraphs").ok_or_else(|| err(&at, "missing array"))?;
        for (j, para) in paragraphs.iter().enumerate() {
            let at = format!("data[{i}].paragraphs[{j}]");
            let context = string(para, "context").ok_or_else(|| err(&format!("{at}.context"), "missing string"))?;
            let qas = array(para, "qas").ok_or_else(|| err(&format!("{at}.qas"), "missing array"))?;
            let mut questions = Vec::with_capacity(qas.len());
            for (k, qa) in qas.iter().enumerate() {
                let at = format!("{at}.qas[{k}]");
                let id = match qa.get("id") {
                    Some(Value::String(s)) => s.clone(),
                    Some(Value::Number(n)) => n.to_string(),
                    _ => return Err(err(&format!("{at}.id"), "missing id")),
                };
                let question = string(qa, "question").ok_or_else(|| err(&format!("{at}.question"), "missing string"))?;
                let answers = array(qa, "answers").ok_or_else(|| err(&format!("{at}.answers"), "missing array"))?;
                let first = answers.first().ok_or_else(|| err(&format!("{at}.answers"), "no answers"))?;
                let answer_start = first
                    .get("answer_start")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| err(&format!("{at}.answers[0].answer_start"), "missing offset"))?;
                questions.push(RcQuestion { id, question: question.to_string(), answer_start: answer_start as usize });
            }
            out.push(Passage { context: context.to_string(), questions });
        }
    }
    Ok(out)
}

fn array<'a>(v: &'a Value, key: &str) -> Option<&'a Vec<Value>> {
    v.get(key).and_then(Value::as_array)
}

fn string<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}
