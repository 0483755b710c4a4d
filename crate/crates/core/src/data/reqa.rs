//! Turning passages with answer offsets into a sentence retrieval dataset.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::dataset::{Answer, Question, RetrievalDataset};
use super::squad::Passage;
use crate::error::Result;

/// Which sentences form the candidate pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CandidatePool {
    /// Only sentences that answer at least one question.
    #[default]
    Answers,
    /// Every sentence of every passage.
    AllSentences,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReqaBuild {
    pub dataset: RetrievalDataset,
    /// Questions whose offset fell outside their passage.
    pub skipped: usize,
}

/// Pairs each question with the sentence containing its answer offset.
/// Identical question strings share one question and identical sentence
/// strings share one answer id, so links are many-to-many.
pub fn build_reqa(
    passages: &[Passage],
    splitter: impl Fn(&str) -> Vec<(String, Range<usize>)>,
    pool: CandidatePool,
) -> Result<ReqaBuild> {
    let mut questions: Vec<Question> = Vec::new();
    let mut answers: Vec<Answer> = Vec::new();
    let mut q_index: HashMap<String, usize> = HashMap::new();
    let mut a_index: HashMap<String, usize> = HashMap::new();
    let mut pairs = Vec::new();
    let mut skipped = 0;

    let mut answer_slot = |text: &str, answers: &mut Vec<Answer>| -> usize {
        *a_index.entry(text.to_string()).or_insert_with(|| {
            answers.push(Answer { id: answers.len() as u32, text: text.to_string() });
            answers.len() - 1
        })
    };

    for (pi, passage) in passages.iter().enumerate() {
        let sentences = splitter(&passage.context);
        if pool == CandidatePool::AllSentences {
            for (s, _) in &sentences {
                answer_slot(s, &mut answers);
            }
        }
        for rq in &passage.questions {
            let Some(byte) = char_to_byte(&passage.context, rq.answer_start) else {
                log::warn!("passage {pi}, question {}: offset {} outside context", rq.id, rq.answer_start);
                skipped += 1;
                continue;
            };
            let Some(sentence) = containing(&sentences, byte) else {
                log::warn!("passage {pi}, question {}: offset {} in trailing whitespace", rq.id, rq.answer_start);
                skipped += 1;
                continue;
            };
            let a = answer_slot(&sentences[sentence].0, &mut answers);
            let q = *q_index.entry(rq.question.clone()).or_insert_with(|| {
                questions.push(Question { id: rq.id.clone(), text: rq.question.clone() });
                questions.len() - 1
            });
            pairs.push((q, a));
        }
    }
    Ok(ReqaBuild { dataset: RetrievalDataset::new(questions, answers, pairs)?, skipped })
}

fn char_to_byte(text: &str, chars: usize) -> Option<usize> {
    text.char_indices().nth(chars).map(|(b, _)| b)
}

/// Sentence whose half-open range holds `byte`; an offset in the gap before
/// a sentence belongs to that sentence.
fn containing(sentences: &[(String, Range<usize>)], byte: usize) -> Option<usize> {
    sentences.iter().position(|(_, r)| byte < r.end)
}
