//! Sentences, corpora, vocabulary and the word/position sentence encoder.

mod layers;

pub use layers::{EncoderConfig, EncoderParams};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
            continue;
        }
        if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// An entity occurrence over tokens `start..end`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub entity_id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub doc_id: String,
    /// 0-based index of the sentence within its document.
    pub position: usize,
    pub text: String,
    pub tokens: Vec<String>,
    /// Non-overlapping, sorted by start.
    pub mentions: Vec<Mention>,
}

impl Sentence {
    pub fn new(doc_id: impl Into<String>, position: usize, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self {
            doc_id: doc_id.into(),
            position,
            text,
            tokens,
            mentions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Distinct entity ids mentioned, in first-mention order.
    pub fn entities(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for m in &self.mentions {
            if !seen.contains(&m.entity_id.as_str()) {
                seen.push(m.entity_id.as_str());
            }
        }
        seen
    }

    pub fn mentions_entity(&self, entity: &str) -> bool {
        self.mentions.iter().any(|m| m.entity_id == entity)
    }

    /// Checks the mention invariants: spans inside the sentence, non-empty,
    /// sorted and non-overlapping.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for (i, m) in self.mentions.iter().enumerate() {
            if m.start >= m.end || m.end > self.tokens.len() {
                return Err(Error::invalid(format!(
                    "{}#{}: mention {}..{} outside sentence of {} tokens",
                    self.doc_id,
                    self.position,
                    m.start,
                    m.end,
                    self.tokens.len()
                )));
            }
            if i > 0 && m.start < prev_end {
                return Err(Error::invalid(format!(
                    "{}#{}: mentions overlap or are unsorted at {}..{}",
                    self.doc_id, self.position, m.start, m.end
                )));
            }
            prev_end = m.end;
        }
        Ok(())
    }

    /// PCNN segment cuts `(a1 + 1, a2)` where `a1` is the last token of the
    /// first mention and `a2` the first token of the last mention. With a
    /// single mention the other anchor sits at the sentence start, so the
    /// cuts are `(0, start)`.
    pub fn pcnn_cuts(&self) -> Result<(usize, usize)> {
        match self.mentions.as_slice() {
            [] => Err(self.no_mentions()),
            [only] => Ok((0, only.start)),
            [first, .., last] => Ok((first.end, last.start)),
        }
    }

    fn no_mentions(&self) -> Error {
        Error::invalid(format!(
            "{}#{}: sentence has no entity mentions",
            self.doc_id, self.position
        ))
    }

    /// Signed token offsets from each token to the nearest token of the first
    /// and of the last mention, clipped to `±max_dist`.
    pub fn position_distances(&self, max_dist: usize) -> Result<Vec<(i64, i64)>> {
        let first = self.mentions.first().ok_or_else(|| self.no_mentions())?;
        let last = self.mentions.last().expect("non-empty");
        let clip = max_dist as i64;
        let offset = |t: usize, m: &Mention| -> i64 {
            let t = t as i64;
            let d = if t < m.start as i64 {
                t - m.start as i64
            } else if t >= m.end as i64 {
                t - (m.end as i64 - 1)
            } else {
                0
            };
            d.clamp(-clip, clip)
        };
        Ok((0..self.tokens.len())
            .map(|t| (offset(t, first), offset(t, last)))
            .collect())
    }
}

/// Case-insensitive exact surface matching of entity names against tokens.
///
/// `entities` pairs an entity id with its canonical name. Longer names win
/// where matches would overlap; the result is sorted and non-overlapping.
pub fn match_entities(tokens: &[String], entities: &[(String, String)]) -> Vec<Mention> {
    let mut candidates: Vec<(usize, usize, &str)> = Vec::new();
    for (id, name) in entities {
        let pattern = tokenize(name);
        if pattern.is_empty() || pattern.len() > tokens.len() {
            continue;
        }
        for start in 0..=tokens.len() - pattern.len() {
            if tokens[start..start + pattern.len()] == pattern[..] {
                candidates.push((start, start + pattern.len(), id.as_str()));
            }
        }
    }
    // Longest first, then leftmost, then id for determinism.
    candidates.sort_by(|a, b| {
        (b.1 - b.0)
            .cmp(&(a.1 - a.0))
            .then(a.0.cmp(&b.0))
            .then(a.2.cmp(b.2))
    });
    let mut taken = vec![false; tokens.len()];
    let mut mentions = Vec::new();
    for (start, end, id) in candidates {
        if taken[start..end].iter().any(|&t| t) {
            continue;
        }
        taken[start..end].iter_mut().for_each(|t| *t = true);
        mentions.push(Mention { entity_id: id.to_string(), start, end });
    }
    mentions.sort_by_key(|m| m.start);
    mentions
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Sentence>,
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    position: usize,
    text: String,
    #[serde(default)]
    mentions: Vec<Mention>,
}

#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    doc_id: String,
    sentences: Vec<SentenceRecord>,
}

impl Document {
    fn from_record(rec: DocumentRecord) -> Result<Self> {
        let mut sentences = Vec::with_capacity(rec.sentences.len());
        let mut positions = std::collections::HashSet::new();
        for s in rec.sentences {
            if !positions.insert(s.position) {
                return Err(Error::invalid(format!(
                    "document {}: duplicate sentence position {}",
                    rec.doc_id, s.position
                )));
            }
            let mut sentence = Sentence::new(rec.doc_id.clone(), s.position, s.text);
            sentence.mentions = s.mentions;
            sentence.validate()?;
            sentences.push(sentence);
        }
        sentences.sort_by_key(|s| s.position);
        Ok(Self { doc_id: rec.doc_id, sentences })
    }

    fn to_record(&self) -> DocumentRecord {
        DocumentRecord {
            doc_id: self.doc_id.clone(),
            sentences: self
                .sentences
                .iter()
                .map(|s| SentenceRecord {
                    position: s.position,
                    text: s.text.clone(),
                    mentions: s.mentions.clone(),
                })
                .collect(),
        }
    }

    pub fn sentence(&self, position: usize) -> Option<&Sentence> {
        self.sentences
            .binary_search_by_key(&position, |s| s.position)
            .ok()
            .map(|i| &self.sentences[i])
    }
}

/// Documents keyed by id, in file order.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub documents: Vec<Document>,
    index: HashMap<String, usize>,
}

/// `(doc_id, position)`, serialized as a two-element JSON array.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceRef(pub String, pub usize);

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, d) in documents.iter().enumerate() {
            if index.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate document id {}", d.doc_id)));
            }
        }
        Ok(Self { documents, index })
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.index.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn sentence(&self, r: &SentenceRef) -> Option<&Sentence> {
        self.document(&r.0)?.sentence(r.1)
    }

    pub fn resolve(&self, r: &SentenceRef) -> Result<&Sentence> {
        self.sentence(r)
            .ok_or_else(|| Error::invalid(format!("unknown sentence ({}, {})", r.0, r.1)))
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.documents.iter().flat_map(|d| d.sentences.iter())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let records: Vec<DocumentRecord> = crate::jsonl::read(path)?;
        Self::new(
            records
                .into_iter()
                .map(Document::from_record)
                .collect::<Result<_>>()?,
        )
    }

    pub fn read_from<R: std::io::BufRead>(reader: R, name: &str) -> Result<Self> {
        let records: Vec<DocumentRecord> = crate::jsonl::read_from(reader, name)?;
        Self::new(
            records
                .into_iter()
                .map(Document::from_record)
                .collect::<Result<_>>()?,
        )
    }

    pub fn write_to<W: std::io::Write>(&self, w: W) -> Result<()> {
        let records: Vec<_> = self.documents.iter().map(Document::to_record).collect();
        crate::jsonl::write_to(w, &records)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let records: Vec<_> = self.documents.iter().map(Document::to_record).collect();
        crate::jsonl::write(path, &records)
    }
}

pub const UNK: usize = 0;
pub const PAD: usize = 1;

/// Token → index map. Index 0 is the unknown token and 1 is padding; the
/// rest are ordered by descending frequency, then lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a, I>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in &s.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(ordered.into_iter().map(|(t, _)| t.to_string()).collect())
    }

    /// Builds from the ordered non-reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all = vec!["<unk>".to_string(), "<pad>".to_string()];
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Non-reserved tokens in index order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[2..]
    }
}

/// A sentence mapped to the integer inputs of the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub tokens: Vec<usize>,
    /// Position-embedding rows (`distance + max_dist`) relative to the first
    /// and last mention.
    pub dist_first: Vec<usize>,
    pub dist_last: Vec<usize>,
    pub cuts: (usize, usize),
}

impl EncodedSentence {
    pub fn new(sentence: &Sentence, vocab: &Vocabulary, max_dist: usize) -> Result<Self> {
        if sentence.is_empty() {
            return Err(Error::invalid(format!(
                "{}#{}: empty sentence",
                sentence.doc_id, sentence.position
            )));
        }
        let dists = sentence.position_distances(max_dist)?;
        let shift = |d: i64| (d + max_dist as i64) as usize;
        Ok(Self {
            tokens: sentence.tokens.iter().map(|t| vocab.get(t)).collect(),
            dist_first: dists.iter().map(|d| shift(d.0)).collect(),
            dist_last: dists.iter().map(|d| shift(d.1)).collect(),
            cuts: sentence.pcnn_cuts()?,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Alan Turing studied."), toks(&["alan", "turing", "studied", "."]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("PhD in 1938"), toks(&["phd", "in", "1938"]));
    }

    fn sentence_with(n: usize, spans: &[(usize, usize)]) -> Sentence {
        let mut s = Sentence::new("d", 0, vec!["w"; n].join(" "));
        s.mentions = spans
            .iter()
            .enumerate()
            .map(|(i, &(start, end))| Mention { entity_id: format!("e{i}"), start, end })
            .collect();
        s
    }

    #[test]
    fn distance_examples() {
        let s = sentence_with(5, &[(1, 3), (4, 5)]);
        let d = s.position_distances(60).unwrap();
        let first: Vec<i64> = d.iter().map(|x| x.0).collect();
        assert_eq!(first, vec![-1, 0, 0, 1, 2]);
        let last: Vec<i64> = d.iter().map(|x| x.1).collect();
        assert_eq!(last, vec![-4, -3, -2, -1, 0]);
    }

    #[test]
    fn single_entity_distance_columns_coincide() {
        let s = sentence_with(4, &[(2, 3)]);
        for (a, b) in s.position_distances(60).unwrap() {
            assert_eq!(a, b);
        }
        assert_eq!(s.pcnn_cuts().unwrap(), (0, 2));
    }

    #[test]
    fn distances_are_clipped() {
        let s = sentence_with(10, &[(9, 10)]);
        let d = s.position_distances(3).unwrap();
        assert_eq!(d[0].0, -3);
    }

    #[test]
    fn zero_mentions_rejected() {
        let s = sentence_with(3, &[]);
        assert!(s.position_distances(60).is_err());
        assert!(s.pcnn_cuts().is_err());
    }

    #[test]
    fn matching_is_case_insensitive_and_longest_first() {
        let tokens = tokenize("Marie Curie joined the University of Paris in Paris.");
        let ents = vec![
            ("mc".to_string(), "marie curie".to_string()),
            ("up".to_string(), "University of Paris".to_string()),
            ("p".to_string(), "Paris".to_string()),
        ];
        let m = match_entities(&tokens, &ents);
        let ids: Vec<_> = m.iter().map(|m| m.entity_id.as_str()).collect();
        assert_eq!(ids, vec!["mc", "up", "p"]);
        assert_eq!((m[1].start, m[1].end), (4, 7));
    }

    #[test]
    fn vocabulary_order_and_reserved_slots() {
        let mut a = Sentence::new("d", 0, "b a a c b a");
        a.mentions.clear();
        let v = Vocabulary::build([&a]);
        assert_eq!(v.get("a"), 2);
        assert_eq!(v.get("b"), 3);
        assert_eq!(v.get("c"), 4);
        assert_eq!(v.get("zzz"), UNK);
        assert_eq!(v.token(PAD), Some("<pad>"));
    }

    #[test]
    fn corpus_rejects_bad_mentions() {
        let line = r#"{"doc_id":"d","sentences":[{"position":0,"text":"a b","mentions":[{"entity_id":"x","start":1,"end":3}]}]}"#;
        assert!(Corpus::read_from(line.as_bytes(), "mem").is_err());
        let dup = r#"{"doc_id":"d","sentences":[{"position":0,"text":"a"},{"position":0,"text":"b"}]}"#;
        assert!(Corpus::read_from(dup.as_bytes(), "mem").is_err());
    }

    proptest! {
        // Shifting a mention right by one token shifts its distance column
        // by −1 for every token outside the mention.
        #[test]
        fn distances_translate(n in 4usize..20, start in 0usize..10, width in 1usize..3) {
            prop_assume!(start + width + 1 <= n);
            let a = sentence_with(n, &[(start, start + width)]);
            let b = sentence_with(n, &[(start + 1, start + 1 + width)]);
            let da = a.position_distances(100).unwrap();
            let db = b.position_distances(100).unwrap();
            for t in 0..n {
                let outside = (t < start || t >= start + width) && (t < start + 1 || t >= start + 1 + width);
                if outside {
                    prop_assert_eq!(db[t].0, da[t].0 - 1);
                }
            }
        }
    }
}
