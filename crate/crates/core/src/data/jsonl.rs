//! JSON-lines storage: one record per pair, plus candidate-only rows for
//! pool sentences no question points to.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{Answer, Question, RetrievalDataset};
use crate::error::{EndxError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question: Option<String>,
    answer_id: u32,
    answer: String,
}

/// `ds.jsonl` gets its stats next to it as `ds.stats.json`.
pub fn stats_path(path: &Path) -> PathBuf {
    path.with_extension("stats.json")
}

pub fn write_jsonl(ds: &RetrievalDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| EndxError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut linked = vec![false; ds.answers.len()];
    let line = |rec: &Record, w: &mut BufWriter<std::fs::File>| -> Result<()> {
        let s = serde_json::to_string(rec).expect("records always serialize");
        writeln!(w, "{s}").map_err(|e| EndxError::io(path, e))
    };
    for &(q, a) in &ds.pairs {
        linked[a] = true;
        let rec = Record {
            question_id: Some(ds.questions[q].id.clone()),
            question: Some(ds.questions[q].text.clone()),
            answer_id: ds.answers[a].id,
            answer: ds.answers[a].text.clone(),
        };
        line(&rec, &mut w)?;
    }
    for (a, ans) in ds.answers.iter().enumerate() {
        if !linked[a] {
            line(&Record { question_id: None, question: None, answer_id: ans.id, answer: ans.text.clone() }, &mut w)?;
        }
    }
    w.flush().map_err(|e| EndxError::io(path, e))
}

/// Reads a dataset back. Answers come out sorted by id; questions keep
/// their first-appearance order.
pub fn read_jsonl(path: &Path) -> Result<RetrievalDataset> {
    let file = std::fs::File::open(path).map_err(|e| EndxError::io(path, e))?;
    let mut questions: Vec<Question> = Vec::new();
    let mut q_index: HashMap<String, usize> = HashMap::new();
    let mut answer_text: HashMap<u32, String> = HashMap::new();
    let mut links: Vec<(usize, u32)> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EndxError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| EndxError::Parse { path: format!("{}:{}", path.display(), n + 1), message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        match answer_text.get(&rec.answer_id) {
            Some(t) if *t != rec.answer => return Err(parse_err(format!("answer {} has two texts", rec.answer_id))),
            Some(_) => {}
            None => {
                answer_text.insert(rec.answer_id, rec.answer.clone());
            }
        }
        match (rec.question_id, rec.question) {
            (Some(id), Some(text)) => {
                let q = match q_index.get(&id) {
                    Some(&q) if questions[q].text != text => {
                        return Err(parse_err(format!("question {id} has two texts")));
                    }
                    Some(&q) => q,
                    None => {
                        questions.push(Question { id: id.clone(), text });
                        q_index.insert(id, questions.len() - 1);
                        questions.len() - 1
                    }
                };
                links.push((q, rec.answer_id));
            }
            (None, None) => {}
            _ => return Err(parse_err("question_id and question must appear together".into())),
        }
    }
    let mut answers: Vec<Answer> = answer_text.into_iter().map(|(id, text)| Answer { id, text }).collect();
    answers.sort_by_key(|a| a.id);
    let a_index: HashMap<u32, usize> = answers.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
    let pairs = links.into_iter().map(|(q, id)| (q, a_index[&id])).collect();
    RetrievalDataset::new(questions, answers, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_candidates() {
        let ds = RetrievalDataset::new(
            vec![Question { id: "x".into(), text: "why?".into() }, Question { id: "y".into(), text: "how?".into() }],
            vec![Answer { id: 0, text: "because.".into() }, Answer { id: 1, text: "unused.".into() }],
            vec![(0, 0), (1, 0)],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.jsonl");
        write_jsonl(&ds, &p).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), ds);
        assert_eq!(stats_path(&p), dir.path().join("ds.stats.json"));
    }

    #[test]
    fn conflicting_texts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(
            &p,
            "{\"question_id\":\"a\",\"question\":\"q\",\"answer_id\":0,\"answer\":\"x\"}\n{\"question_id\":\"b\",\"question\":\"q2\",\"answer_id\":0,\"answer\":\"y\"}\n",
        )
        .unwrap();
        let e = read_jsonl(&p).unwrap_err().to_string();
        assert!(e.contains(":2"), "{e}");
    }
}
