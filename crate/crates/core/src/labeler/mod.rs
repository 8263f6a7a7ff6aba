//! Distant-supervision labeling against knowledge-base facts, plus a
//! synthetic corpus generator with known label noise.

mod synth;

pub use synth::{generate_synthetic, SynthConfig, SyntheticData};

use crate::encoder::{match_entities, Corpus, Sentence, SentenceRef};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qualifier {
    pub name: String,
    pub role: String,
}

/// A relation between two main entities ("values") with optional
/// qualifiers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub relation: String,
    pub main_entities: Vec<String>,
    #[serde(default)]
    pub qualifiers: Vec<Qualifier>,
}

impl Fact {
    pub fn validate(&self) -> Result<()> {
        if self.relation.trim().is_empty() {
            return Err(Error::invalid("fact has an empty relation"));
        }
        if self.main_entities.len() != 2 {
            return Err(Error::invalid(format!(
                "fact `{}` needs exactly two main entities, got {}",
                self.relation,
                self.main_entities.len()
            )));
        }
        if self.main_entities[0].to_lowercase() == self.main_entities[1].to_lowercase() {
            return Err(Error::invalid(format!(
                "fact `{}` repeats main entity `{}`",
                self.relation, self.main_entities[0]
            )));
        }
        if let Some(q) = self.qualifiers.iter().find(|q| q.role.trim().is_empty()) {
            return Err(Error::invalid(format!("qualifier `{}` has an empty role", q.name)));
        }
        if self.entities().count() > 64 {
            return Err(Error::invalid("a fact may name at most 64 entities"));
        }
        Ok(())
    }

    /// Main entities, then qualifiers.
    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.main_entities
            .iter()
            .map(String::as_str)
            .chain(self.qualifiers.iter().map(|q| q.name.as_str()))
    }

    /// Bit `i` is set when the sentence mentions the fact's `i`-th entity.
    pub fn coverage(&self, sentence: &Sentence) -> u64 {
        let mentioned: BTreeSet<String> = sentence
            .mentions
            .iter()
            .map(|m| m.entity_id.to_lowercase())
            .collect();
        self.entities()
            .enumerate()
            .filter(|(_, e)| mentioned.contains(&e.to_lowercase()))
            .fold(0, |acc, (i, _)| acc | (1 << i))
    }

    pub fn all_entities_mask(&self) -> u64 {
        let n = self.entities().count();
        if n == 64 {
            u64::MAX
        } else {
            (1u64 << n) - 1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Weak,
    Strong,
}

/// Sentences aligned to one fact. Every main sentence yields one training
/// instance together with the supplementary sentences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledGroup {
    pub fact_index: usize,
    pub mode: Mode,
    pub main: Vec<SentenceRef>,
    pub supplementary: Vec<SentenceRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_flag: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SkipReport {
    /// Facts with no sentence mentioning both main entities.
    pub facts_without_main: Vec<usize>,
}

pub fn read_facts(path: &Path) -> Result<Vec<Fact>> {
    let facts: Vec<Fact> = crate::jsonl::read(path)?;
    for (i, f) in facts.iter().enumerate() {
        f.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(facts)
}

pub fn read_groups(path: &Path) -> Result<Vec<LabeledGroup>> {
    crate::jsonl::read(path)
}

/// Fills in mentions for sentences that have none, by case-insensitive
/// surface matching of every fact entity name. The canonical name becomes the
/// mention's entity id.
pub fn annotate(corpus: &mut Corpus, facts: &[Fact]) {
    let mut names: Vec<(String, String)> = Vec::new();
    let mut seen = BTreeSet::new();
    for f in facts {
        for e in f.entities() {
            if seen.insert(e.to_lowercase()) {
                names.push((e.to_string(), e.to_string()));
            }
        }
    }
    for doc in &mut corpus.documents {
        for s in &mut doc.sentences {
            if s.mentions.is_empty() {
                s.mentions = match_entities(&s.tokens, &names);
            }
        }
    }
}

fn sref(s: &Sentence) -> SentenceRef {
    SentenceRef(s.doc_id.clone(), s.position)
}

/// Weak rule: a sentence with both main entities is a main sentence; any
/// other sentence with at least one main entity or at least two qualifiers is
/// supplementary. One group per (fact, document) with a main sentence;
/// supplementary sentences come from the same document.
pub fn label_weak(corpus: &Corpus, facts: &[Fact]) -> (Vec<LabeledGroup>, SkipReport) {
    let mut groups = Vec::new();
    let mut report = SkipReport::default();
    for (fi, fact) in facts.iter().enumerate() {
        let main_mask = 0b11u64;
        let mut found = false;
        for doc in &corpus.documents {
            let mut main = Vec::new();
            let mut supp = Vec::new();
            for s in &doc.sentences {
                let cov = fact.coverage(s);
                let mains = (cov & main_mask).count_ones();
                let quals = (cov & !main_mask).count_ones();
                if mains == 2 {
                    main.push(sref(s));
                } else if mains >= 1 || quals >= 2 {
                    supp.push(sref(s));
                }
            }
            if !main.is_empty() {
                found = true;
                groups.push(LabeledGroup {
                    fact_index: fi,
                    mode: Mode::Weak,
                    main,
                    supplementary: supp,
                    clean_flag: None,
                });
            }
        }
        if !found {
            report.facts_without_main.push(fi);
        }
    }
    (groups, report)
}

/// Strong rule: windows of at most `max_span` consecutive sentence positions
/// that jointly mention every fact entity. A window is kept only if no
/// overlapping valid window is shorter.
pub fn label_strong(corpus: &Corpus, facts: &[Fact], max_span: usize) -> Result<Vec<LabeledGroup>> {
    if max_span == 0 {
        return Err(Error::invalid("max_span must be at least 1"));
    }
    let mut groups = Vec::new();
    for (fi, fact) in facts.iter().enumerate() {
        let all = fact.all_entities_mask();
        for doc in &corpus.documents {
            let Some(last) = doc.sentences.last().map(|s| s.position) else {
                continue;
            };
            let first = doc.sentences[0].position;
            let mut valid: Vec<(usize, usize)> = Vec::new();
            for width in 1..=max_span {
                for start in first..=last {
                    let end = start + width;
                    if end > last + 1 {
                        break;
                    }
                    let cov = doc
                        .sentences
                        .iter()
                        .filter(|s| s.position >= start && s.position < end)
                        .fold(0, |acc, s| acc | fact.coverage(s));
                    if cov & all == all {
                        valid.push((start, end));
                    }
                }
            }
            for &(start, end) in &valid {
                let suppressed = valid.iter().any(|&(s, e)| {
                    e - s < end - start && s < end && start < e
                });
                if suppressed {
                    continue;
                }
                let refs: Vec<SentenceRef> = doc
                    .sentences
                    .iter()
                    .filter(|s| s.position >= start && s.position < end)
                    .map(sref)
                    .collect();
                groups.push(LabeledGroup {
                    fact_index: fi,
                    mode: Mode::Strong,
                    main: refs[..1].to_vec(),
                    supplementary: refs[1..].to_vec(),
                    clean_flag: None,
                });
            }
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests;
