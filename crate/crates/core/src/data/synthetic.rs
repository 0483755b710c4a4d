//! Seeded one-to-many retrieval data.
//!
//! Every answer describes one entity through a few facts. Its questions ask
//! about those facts with varying wording; the test set asks the same things
//! with wording the training set never used for that answer.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Answer, Question, RetrievalDataset};
use crate::error::{EndxError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub answers: usize,
    pub min_questions: usize,
    pub max_questions: usize,
    pub entities: usize,
    pub values: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { answers: 200, min_questions: 1, max_questions: 8, entities: 80, values: 800, seed: 0 }
    }
}

/// Training pairs and held-out paraphrases over one shared answer pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticData {
    pub train: RetrievalDataset,
    pub test: RetrievalDataset,
}

struct Relation {
    statement: &'static str,
    asks: [&'static str; 4],
}

// `{e}` is the entity, `{v}` the value.
const RELATIONS: [Relation; 12] = [
    Relation {
        statement: "was born in {v}",
        asks: ["where was {e} born", "what is the birthplace of {e}", "in which town was {e} born", "where does {e} come from originally"],
    },
    Relation {
        statement: "founded the {v} society",
        asks: ["what did {e} found", "which society was started by {e}", "what group was established by {e}", "name the society {e} created"],
    },
    Relation {
        statement: "studied {v} at university",
        asks: ["what did {e} study", "which subject did {e} learn at university", "what was the field of {e}", "what discipline did {e} major in"],
    },
    Relation {
        statement: "married {v}",
        asks: ["who did {e} marry", "who was the spouse of {e}", "to whom was {e} wed", "who became the partner of {e}"],
    },
    Relation {
        statement: "wrote the book {v}",
        asks: ["what book did {e} write", "which novel is by {e}", "name a work authored by {e}", "what did {e} publish"],
    },
    Relation {
        statement: "worked as a {v}",
        asks: ["what was the job of {e}", "what did {e} do for a living", "which profession did {e} have", "how did {e} earn money"],
    },
    Relation {
        statement: "died in {v}",
        asks: ["where did {e} die", "what is the place of death of {e}", "in which town did {e} pass away", "where did {e} spend the final days"],
    },
    Relation {
        statement: "owned a {v} farm",
        asks: ["what farm did {e} own", "which kind of farm belonged to {e}", "what did {e} grow on the farm", "what was raised on the land of {e}"],
    },
    Relation {
        statement: "won the {v} prize",
        asks: ["which prize did {e} win", "what award was given to {e}", "what honor did {e} receive", "name the prize awarded to {e}"],
    },
    Relation {
        statement: "played the {v} in a band",
        asks: ["what instrument did {e} play", "which instrument was played by {e}", "what did {e} perform on in the band", "what was the instrument of {e}"],
    },
    Relation {
        statement: "led the {v} army",
        asks: ["which army did {e} lead", "what army was commanded by {e}", "who followed {e} into battle", "what force was under {e}"],
    },
    Relation {
        statement: "built the {v} bridge",
        asks: ["what bridge did {e} build", "which bridge was constructed by {e}", "what did {e} engineer over the river", "name the bridge made by {e}"],
    },
];

const LEADS: [&str; 6] = ["", "", "tell me ", "do you know ", "please say ", "i wonder "];
const FILLERS: [&str; 5] = ["", " according to the old records", " as the village elders say", " long ago", " in the early years"];

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.gen_range(2..=3);
        let w: String = (0..syl).map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap())).collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn fill(template: &str, entity: &str, value: &str) -> String {
    template.replace("{e}", entity).replace("{v}", value)
}

/// Builds the synthetic train and test sets for `cfg`.
pub fn synthetic_one_to_many(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.min_questions == 0 || cfg.min_questions > cfg.max_questions {
        return Err(EndxError::Config("need 1 <= min_questions <= max_questions".into()));
    }
    if cfg.answers > cfg.entities * RELATIONS.len() / 2 || cfg.answers == 0 {
        return Err(EndxError::Config("too few entities for the requested answers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = HashSet::new();
    let entities = pseudo_words(&mut rng, cfg.entities, &mut taken);
    let values = pseudo_words(&mut rng, cfg.values, &mut taken);
    let mut next_value = 0;
    let mut used: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); cfg.entities];

    let mut answers = Vec::with_capacity(cfg.answers);
    let mut train_q = Vec::new();
    let mut test_q = Vec::new();
    let mut train_pairs = Vec::new();
    let mut test_pairs = Vec::new();

    for a in 0..cfg.answers {
        let k = rng.gen_range(cfg.min_questions..=cfg.max_questions);
        let n_facts = k.clamp(2, 4);
        let roomy: Vec<usize> = (0..cfg.entities).filter(|&e| RELATIONS.len() - used[e].len() >= n_facts).collect();
        let Some(&e) = roomy.choose(&mut rng) else {
            return Err(EndxError::Config("too few entities for the requested answers".into()));
        };
        let mut free: Vec<usize> = (0..RELATIONS.len()).filter(|r| !used[e].contains(r)).collect();
        free.shuffle(&mut rng);
        let facts: Vec<(usize, &str)> = free[..n_facts]
            .iter()
            .map(|&r| {
                next_value += 1;
                (r, values[(next_value - 1) % values.len()].as_str())
            })
            .collect();
        for &(r, _) in &facts {
            used[e].insert(r);
        }
        let name = &entities[e];
        let clauses: Vec<String> = facts.iter().map(|&(r, v)| fill(RELATIONS[r].statement, name, v)).collect();
        let text = format!(
            "{name} {}{} .",
            match clauses.len() {
                1 => clauses[0].clone(),
                n => format!("{} and {}", clauses[..n - 1].join(" , "), clauses[n - 1]),
            },
            FILLERS.choose(&mut rng).unwrap()
        );
        answers.push(Answer { id: a as u32, text });

        // each fact gets its forms shuffled; training takes from the front,
        // the test paraphrase from the back
        let forms: Vec<Vec<usize>> = (0..n_facts)
            .map(|_| {
                let mut f = vec![0, 1, 2, 3];
                f.shuffle(&mut rng);
                f
            })
            .collect();
        for j in 0..k {
            let fact = j % n_facts;
            let (r, _) = facts[fact];
            let round = j / n_facts;
            let train_form = forms[fact][round];
            let test_form = forms[fact][3 - round];
            let make = |form: usize, rng: &mut ChaCha8Rng| {
                format!("{}{} ?", LEADS.choose(rng).unwrap(), fill(RELATIONS[r].asks[form], name, ""))
            };
            let tq = make(train_form, &mut rng);
            let hq = make(test_form, &mut rng);
            train_pairs.push((train_q.len(), a));
            train_q.push(Question { id: format!("syn-{a}-{j}"), text: tq });
            test_pairs.push((test_q.len(), a));
            test_q.push(Question { id: format!("syn-{a}-{j}-held"), text: hq });
        }
    }
    Ok(SyntheticData {
        train: RetrievalDataset::new(train_q, answers.clone(), train_pairs)?,
        test: RetrievalDataset::new(test_q, answers, test_pairs)?,
    })
}
