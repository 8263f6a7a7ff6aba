use super::*;
use crate::encoder::{Document, Mention};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn curie_fact() -> Fact {
    Fact {
        relation: "educated at".into(),
        main_entities: vec!["Marie Curie".into(), "University of Paris".into()],
        qualifiers: vec![
            Qualifier { name: "physics".into(), role: "major".into() },
            Qualifier { name: "Doctor of Science".into(), role: "degree".into() },
        ],
    }
}

fn doc(id: &str, sentences: &[(usize, &str)]) -> Document {
    Document {
        doc_id: id.into(),
        sentences: sentences.iter().map(|&(p, t)| Sentence::new(id, p, t)).collect(),
    }
}

fn r(doc: &str, p: usize) -> SentenceRef {
    SentenceRef(doc.into(), p)
}

#[test]
fn curie_table_assignments() {
    let mut corpus = Corpus::new(vec![doc(
        "curie",
        &[
            (0, "In June 1903, Marie Curie was awarded her doctorate from the University of Paris."),
            (1, "Marie Curie was the first woman to become a professor at the University of Paris."),
            (2, "In 1893, Marie Curie was awarded a degree in physics and began work in an industrial laboratory of Professor Gabriel Lippmann."),
            (3, "The laboratory was small."),
        ],
    )])
    .unwrap();
    let facts = vec![curie_fact()];
    annotate(&mut corpus, &facts);
    let (groups, skipped) = label_weak(&corpus, &facts);
    assert!(skipped.facts_without_main.is_empty());
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].main, vec![r("curie", 0), r("curie", 1)]);
    assert_eq!(groups[0].supplementary, vec![r("curie", 2)]);
}

#[test]
fn fact_without_main_sentence_is_reported() {
    let mut corpus = Corpus::new(vec![doc("d", &[(0, "Marie Curie studied physics.")])]).unwrap();
    let facts = vec![curie_fact()];
    annotate(&mut corpus, &facts);
    let (groups, skipped) = label_weak(&corpus, &facts);
    assert!(groups.is_empty());
    assert_eq!(skipped.facts_without_main, vec![0]);
}

fn turing_corpus() -> Corpus {
    Corpus::new(vec![doc(
        "turing",
        &[
            (3, "Alan Turing worked on hyper computation in Princeton University."),
            (4, "He obtained his PhD in 1938."),
            (18, "Alan Turing studied logic and computer science in Princeton."),
            (20, "His PhD advisor is Alonzo Church"),
        ],
    )])
    .unwrap()
}

#[test]
fn strong_rule_labels_adjacent_turing_sentences() {
    let fact = Fact {
        relation: "edu".into(),
        main_entities: vec!["Alan Turing".into(), "Princeton".into()],
        qualifiers: vec![Qualifier { name: "PhD".into(), role: "degree".into() }],
    };
    let mut corpus = turing_corpus();
    annotate(&mut corpus, &[fact.clone()]);
    let groups = label_strong(&corpus, &[fact.clone()], 2).unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].main, vec![r("turing", 3)]);
    assert_eq!(groups[0].supplementary, vec![r("turing", 4)]);
    let wider = label_strong(&corpus, &[fact], 3).unwrap();
    assert!(wider.iter().any(|g| g.main == vec![r("turing", 3)]));
}

#[test]
fn second_indicator_example_counts_three_entities() {
    let fact = Fact {
        relation: "edu".into(),
        main_entities: vec!["Alan Turing".into(), "Princeton".into()],
        qualifiers: vec![
            Qualifier { name: "PhD".into(), role: "degree".into() },
            Qualifier { name: "computer science".into(), role: "major".into() },
        ],
    };
    let mut corpus = turing_corpus();
    annotate(&mut corpus, &[fact.clone()]);
    let s = corpus.sentence(&r("turing", 18)).unwrap();
    assert_eq!(fact.coverage(s).count_ones(), 3);
}

#[test]
fn single_sentence_window_suppresses_wider_ones() {
    let fact = Fact {
        relation: "x".into(),
        main_entities: vec!["Ada".into(), "Bob".into()],
        qualifiers: vec![],
    };
    let mut corpus = Corpus::new(vec![doc("d", &[(0, "Ada met Bob."), (1, "Ada left."), (2, "Bob stayed.")])]).unwrap();
    annotate(&mut corpus, &[fact.clone()]);
    let groups = label_strong(&corpus, &[fact], 3).unwrap();
    let spans: Vec<_> = groups.iter().map(|g| (g.main[0].1, g.supplementary.len())).collect();
    // [0, 1] and [0, 2] contain the single-sentence window; [1, 2] does not overlap it.
    assert_eq!(spans, vec![(0, 0), (1, 1)]);
}

#[test]
fn entities_beyond_span_give_no_group() {
    let fact = Fact {
        relation: "x".into(),
        main_entities: vec!["Ada".into(), "Bob".into()],
        qualifiers: vec![],
    };
    let mut corpus = Corpus::new(vec![doc("d", &[(0, "Ada."), (1, "no."), (2, "no."), (3, "Bob.")])]).unwrap();
    annotate(&mut corpus, &[fact.clone()]);
    assert!(label_strong(&corpus, &[fact], 3).unwrap().is_empty());
}

fn random_corpus(rng: &mut ChaCha8Rng, facts: &[Fact]) -> Corpus {
    let names: Vec<&str> = facts.iter().flat_map(|f| f.entities()).collect();
    let docs = (0..4)
        .map(|d| {
            let n = rng.gen_range(1..9);
            let sentences = (0..n)
                .map(|p| {
                    let mut words = vec!["w".to_string(); rng.gen_range(1..4)];
                    for _ in 0..rng.gen_range(0..3) {
                        words.push(names[rng.gen_range(0..names.len())].to_string());
                        words.push("w".into());
                    }
                    Sentence::new(format!("d{d}"), p, words.join(" "))
                })
                .collect();
            Document { doc_id: format!("d{d}"), sentences }
        })
        .collect();
    let mut c = Corpus::new(docs).unwrap();
    annotate(&mut c, facts);
    c
}

fn random_facts() -> Vec<Fact> {
    vec![
        Fact {
            relation: "x".into(),
            main_entities: vec!["Ada".into(), "Bob".into()],
            qualifiers: vec![Qualifier { name: "Cy".into(), role: "q".into() }],
        },
        Fact {
            relation: "y".into(),
            main_entities: vec!["Bob".into(), "Dee".into()],
            qualifiers: vec![
                Qualifier { name: "Eve".into(), role: "q".into() },
                Qualifier { name: "Fay".into(), role: "q".into() },
            ],
        },
    ]
}

#[test]
fn strong_rule_windows_are_minimal() {
    let facts = random_facts();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let corpus = random_corpus(&mut rng, &facts);
        let groups = label_strong(&corpus, &facts, 3).unwrap();
        for (i, a) in groups.iter().enumerate() {
            let span = |g: &LabeledGroup| {
                let lo = g.main[0].1;
                let hi = g.supplementary.last().map_or(lo, |s| s.1);
                (g.main[0].0.clone(), lo, hi)
            };
            let (da, la, ha) = span(a);
            for b in &groups[i + 1..] {
                let (db, lb, hb) = span(b);
                if a.fact_index != b.fact_index || da != db {
                    continue;
                }
                let strictly_contains = (la <= lb && hb <= ha && (la, ha) != (lb, hb))
                    || (lb <= la && ha <= hb && (la, ha) != (lb, hb));
                assert!(!strictly_contains, "{a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn weak_rule_is_sound_and_idempotent() {
    let facts = random_facts();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let mut corpus = random_corpus(&mut rng, &facts);
        let (groups, _) = label_weak(&corpus, &facts);
        for g in &groups {
            let fact = &facts[g.fact_index];
            for m in &g.main {
                let s = corpus.sentence(m).unwrap();
                for e in &fact.main_entities {
                    assert!(s.mentions.iter().any(|x| x.entity_id.eq_ignore_ascii_case(e)));
                }
            }
        }
        annotate(&mut corpus, &facts);
        assert_eq!(label_weak(&corpus, &facts).0, groups);
    }
}

#[test]
fn sentence_without_fact_entities_is_unlabeled() {
    let mut corpus = Corpus::new(vec![doc("d", &[(0, "Ada met Bob."), (1, "Nothing here.")])]).unwrap();
    let facts = vec![random_facts().remove(0)];
    annotate(&mut corpus, &facts);
    let (groups, _) = label_weak(&corpus, &facts);
    assert_eq!(groups[0].supplementary, vec![]);
    let s = corpus.sentence(&r("d", 1)).unwrap();
    assert_eq!(s.mentions, Vec::<Mention>::new());
}

#[test]
fn synthetic_noise_free_is_all_clean() {
    let cfg = SynthConfig { facts: 40, noise_rate: 0.0, ..SynthConfig::default() };
    let data = generate_synthetic(&cfg).unwrap();
    assert_eq!(data.groups.len(), 40);
    assert!(data.groups.iter().all(|g| g.clean_flag == Some(true)));
}

#[test]
fn synthetic_noise_count_and_ground_truth() {
    let data = generate_synthetic(&SynthConfig::default()).unwrap();
    assert_eq!(data.groups.len(), 500);
    let noisy = data.groups.iter().filter(|g| g.clean_flag == Some(false)).count();
    // Binomial(500, 0.3): mean 150, sd ≈ 10.2.
    assert!((110..=190).contains(&noisy), "{noisy}");
    for g in &data.groups {
        let label = data.relations.iter().position(|r| *r == data.facts[g.fact_index].relation).unwrap();
        for m in &g.main {
            let t = data.templates[m];
            assert_eq!(t == label, g.clean_flag == Some(true));
        }
    }
}

#[test]
fn synthetic_output_is_byte_identical_per_seed() {
    let cfg = SynthConfig { facts: 30, ..SynthConfig::default() };
    let dump = |d: &SyntheticData| {
        let mut buf = Vec::new();
        d.corpus.write_to(&mut buf).unwrap();
        crate::jsonl::write_to(&mut buf, &d.facts).unwrap();
        crate::jsonl::write_to(&mut buf, &d.groups).unwrap();
        buf
    };
    let a = dump(&generate_synthetic(&cfg).unwrap());
    let b = dump(&generate_synthetic(&cfg).unwrap());
    assert_eq!(a, b);
    let c = dump(&generate_synthetic(&SynthConfig { seed: 11, ..cfg }).unwrap());
    assert_ne!(a, c);
}

#[test]
fn small_template_pool_is_rejected() {
    let cfg = SynthConfig { template_pool: 3, ..SynthConfig::default() };
    assert!(generate_synthetic(&cfg).is_err());
}
