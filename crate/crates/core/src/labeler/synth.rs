use super::{annotate, label_weak, Fact, LabeledGroup, Qualifier};
use crate::encoder::{Corpus, Document, Sentence, SentenceRef};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

/// Knobs of the template corpus generator.
///
/// Templates are cue-word sets. The first `relations` templates express the
/// labeled relations; the rest are distractors that borrow a share of one
/// labeled relation's cues. A noisy document keeps its fact's entities and
/// label but is written with a distractor template.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Size of the filler-word pool.
    pub vocab_size: usize,
    pub relations: usize,
    pub facts: usize,
    /// Sentences per generated document (one document per fact).
    pub sentences_per_fact: usize,
    pub noise_rate: f64,
    pub template_pool: usize,
    pub cues_per_template: usize,
    /// Fraction of a distractor's cue words taken from a labeled relation.
    pub cue_overlap: f64,
    /// Probability that a document also carries a far-away supplementary
    /// sentence written with another relation's cues.
    pub irrelevant_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            relations: 4,
            facts: 500,
            sentences_per_fact: 6,
            noise_rate: 0.3,
            template_pool: 8,
            cues_per_template: 6,
            cue_overlap: 0.5,
            irrelevant_rate: 0.5,
            seed: 10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.template_pool < self.relations {
            return bad(format!(
                "template pool ({}) is smaller than the number of relations ({})",
                self.template_pool, self.relations
            ));
        }
        if self.relations < 2 {
            return bad("at least two relations are required".into());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise rate must be in [0, 1), got {}", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.cue_overlap) || !(0.0..=1.0).contains(&self.irrelevant_rate) {
            return bad("cue_overlap and irrelevant_rate must be in [0, 1]".into());
        }
        if self.sentences_per_fact < 2 {
            return bad("sentences_per_fact must be at least 2".into());
        }
        if self.vocab_size < 4 || self.cues_per_template < 2 || self.facts == 0 {
            return bad("vocab_size ≥ 4, cues_per_template ≥ 2 and facts ≥ 1 are required".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub facts: Vec<Fact>,
    pub groups: Vec<LabeledGroup>,
    /// Relation names; index = class id.
    pub relations: Vec<String>,
    /// Template id used to write each entity-bearing sentence.
    pub templates: BTreeMap<SentenceRef, usize>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Distinct pronounceable word for every index.
fn pseudo_word(index: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut n = index + base;
    let mut syllables = Vec::new();
    while n > 0 {
        let s = n % base;
        syllables.push(CONSONANTS[s / VOWELS.len()] as char);
        syllables.push(VOWELS[s % VOWELS.len()] as char);
        n /= base;
    }
    syllables.into_iter().collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Lexicon {
    filler: Vec<String>,
    cues: Vec<Vec<String>>,
    first_names: Vec<String>,
    last_names: Vec<String>,
    qualifiers: Vec<String>,
}

impl Lexicon {
    fn new(cfg: &SynthConfig) -> Self {
        let mut next = 0;
        let mut take = |n: usize| {
            let words: Vec<String> = (next..next + n).map(pseudo_word).collect();
            next += n;
            words
        };
        let filler = take(cfg.vocab_size);
        let mut cues: Vec<Vec<String>> = (0..cfg.relations).map(|_| take(cfg.cues_per_template)).collect();
        let shared = ((cfg.cue_overlap * cfg.cues_per_template as f64).round() as usize).min(cfg.cues_per_template);
        for d in cfg.relations..cfg.template_pool {
            let host = (d - cfg.relations) % cfg.relations;
            let mut set = cues[host][..shared].to_vec();
            set.extend(take(cfg.cues_per_template - shared));
            cues.push(set);
        }
        let side = ((2 * cfg.facts) as f64).sqrt().ceil() as usize + 8;
        let first_names = take(side);
        let last_names = take(side);
        let qualifiers = take(60);
        Self { filler, cues, first_names, last_names, qualifiers }
    }

    /// The labeled relation whose cues a distractor borrows.
    fn host(&self, template: usize, relations: usize) -> Option<usize> {
        (template >= relations).then(|| (template - relations) % relations)
    }
}

struct Writer<'a> {
    lex: &'a Lexicon,
    rng: &'a mut ChaCha8Rng,
}

impl Writer<'_> {
    fn fillers(&mut self, lo: usize, hi: usize) -> Vec<String> {
        let n = self.rng.gen_range(lo..=hi);
        (0..n)
            .map(|_| self.lex.filler.choose(self.rng).expect("non-empty").clone())
            .collect()
    }

    fn cue(&mut self, template: usize) -> String {
        self.lex.cues[template].choose(self.rng).expect("non-empty").clone()
    }

    /// `f* A cue f* cue B f* .`
    fn relation_sentence(&mut self, a: &str, b: &str, template: usize) -> String {
        let mut w = self.fillers(0, 2);
        w.push(a.to_string());
        w.push(self.cue(template));
        w.extend(self.fillers(0, 1));
        w.push(self.cue(template));
        w.push(b.to_string());
        w.extend(self.fillers(0, 2));
        w.push(".".into());
        w.join(" ")
    }

    /// `f* A cue f* Q f* .`
    fn support_sentence(&mut self, a: &str, q: &str, template: usize) -> String {
        let mut w = self.fillers(0, 1);
        w.push(a.to_string());
        w.push(self.cue(template));
        w.extend(self.fillers(0, 2));
        w.push(q.to_string());
        w.extend(self.fillers(0, 1));
        w.push(".".into());
        w.join(" ")
    }

    fn filler_sentence(&mut self) -> String {
        let mut w = self.fillers(5, 8);
        w.push(".".into());
        w.join(" ")
    }
}

/// Generates one document per fact and labels it with the weak rule. Output
/// is a pure function of the config.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let lex = Lexicon::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let relations: Vec<String> = (0..cfg.relations).map(|i| format!("relation_{i}")).collect();

    let side = lex.first_names.len();
    let mut name_ids: Vec<usize> = (0..side * side).collect();
    name_ids.shuffle(&mut rng);
    let mut names = name_ids.into_iter().map(|i| {
        format!("{} {}", capitalize(&lex.first_names[i / side]), capitalize(&lex.last_names[i % side]))
    });

    let mut facts = Vec::with_capacity(cfg.facts);
    let mut documents = Vec::with_capacity(cfg.facts);
    let mut templates = BTreeMap::new();
    let mut noisy = BTreeSet::new();
    let len = cfg.sentences_per_fact;
    for fi in 0..cfg.facts {
        let label = rng.gen_range(0..cfg.relations);
        let e1 = names.next().expect("name pool sized for facts");
        let e2 = names.next().expect("name pool sized for facts");
        let q: Vec<String> = lex
            .qualifiers
            .choose_multiple(&mut rng, 2)
            .map(|w| capitalize(w))
            .collect();
        facts.push(Fact {
            relation: relations[label].clone(),
            main_entities: vec![e1.clone(), e2.clone()],
            qualifiers: vec![
                Qualifier { name: q[0].clone(), role: "time".into() },
                Qualifier { name: q[1].clone(), role: "place".into() },
            ],
        });

        let is_noisy = rng.gen::<f64>() < cfg.noise_rate;
        let template = if is_noisy {
            noisy.insert(fi);
            // Without shared cues a distractor says nothing about any label.
            let options: Vec<usize> = (cfg.relations..cfg.template_pool)
                .filter(|&d| cfg.cue_overlap == 0.0 || lex.host(d, cfg.relations) != Some(label))
                .collect();
            if options.is_empty() {
                let others: Vec<usize> = (0..cfg.relations).filter(|&r| r != label).collect();
                *others.choose(&mut rng).expect("two or more relations")
            } else {
                *options.choose(&mut rng).expect("non-empty")
            }
        } else {
            label
        };

        let doc_id = format!("doc{fi:05}");
        let main_pos = rng.gen_range(0..len);
        let mut slots: Vec<Option<String>> = vec![None; len];
        let mut used = BTreeMap::new();
        let mut w = Writer { lex: &lex, rng: &mut rng };
        slots[main_pos] = Some(w.relation_sentence(&e1, &e2, template));
        used.insert(main_pos, template);

        let near: Vec<usize> = [main_pos.checked_sub(1), Some(main_pos + 1)]
            .into_iter()
            .flatten()
            .filter(|&p| p < len)
            .collect();
        let support_pos = *near.choose(w.rng).expect("length ≥ 2");
        let anchor = if w.rng.gen() { &e1 } else { &e2 };
        let qualifier = &q[w.rng.gen_range(0..2)];
        slots[support_pos] = Some(w.support_sentence(anchor, qualifier, template));
        used.insert(support_pos, template);

        let far: Vec<usize> = (0..len).filter(|&p| p.abs_diff(main_pos) >= 2).collect();
        if !far.is_empty() && w.rng.gen::<f64>() < cfg.irrelevant_rate {
            let p = *far.choose(w.rng).expect("non-empty");
            // Never the relation the main sentence expresses; for a distractor
            // document any relation, so the sentence leaks nothing about the label.
            let others: Vec<usize> = (0..cfg.relations).filter(|&r| r != template).collect();
            let other = *others.choose(w.rng).expect("two or more relations");
            let anchor = if w.rng.gen() { &e1 } else { &e2 };
            let mut words = w.fillers(0, 1);
            words.push(anchor.clone());
            words.push(w.cue(other));
            words.extend(w.fillers(1, 2));
            words.push(w.cue(other));
            words.extend(w.fillers(0, 2));
            words.push(".".into());
            slots[p] = Some(words.join(" "));
            used.insert(p, other);
        }

        let sentences = slots
            .into_iter()
            .enumerate()
            .map(|(p, text)| {
                let text = text.unwrap_or_else(|| w.filler_sentence());
                Sentence::new(doc_id.clone(), p, text)
            })
            .collect();
        for (p, t) in used {
            templates.insert(SentenceRef(doc_id.clone(), p), t);
        }
        documents.push(Document { doc_id, sentences });
    }

    let mut corpus = Corpus::new(documents)?;
    annotate(&mut corpus, &facts);
    let (mut groups, _) = label_weak(&corpus, &facts);
    for g in &mut groups {
        g.clean_flag = Some(!noisy.contains(&g.fact_index));
    }
    Ok(SyntheticData { corpus, facts, groups, relations, templates })
}
