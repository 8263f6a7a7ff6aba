//! Weak labeling of the Marie Curie sentences: two main sentences name both
//! main entities, one supplementary sentence names one, and a sentence with
//! no fact entity stays unlabeled.

use nrx::encoder::{Corpus, Document, Sentence};
use nrx::labeler::{annotate, label_weak, Fact, Qualifier};

fn main() -> nrx::Result<()> {
    let texts = [
        "In June 1903, Marie Curie was awarded her doctorate from the University of Paris.",
        "Marie Curie was the first woman to become a professor at the University of Paris.",
        "In 1893, Marie Curie was awarded a degree in physics and began work in an industrial laboratory of Professor Gabriel Lippmann.",
        "The laboratory was small.",
    ];
    let doc = Document {
        doc_id: "curie".into(),
        sentences: texts.iter().enumerate().map(|(i, t)| Sentence::new("curie", i, *t)).collect(),
    };
    let mut corpus = Corpus::new(vec![doc])?;
    let facts = vec![Fact {
        relation: "educated at".into(),
        main_entities: vec!["Marie Curie".into(), "University of Paris".into()],
        qualifiers: vec![
            Qualifier { name: "physics".into(), role: "major".into() },
            Qualifier { name: "Doctor of Science".into(), role: "degree".into() },
        ],
    }];
    annotate(&mut corpus, &facts);
    let (groups, _) = label_weak(&corpus, &facts);
    for g in &groups {
        for r in &g.main {
            println!("main          {}", corpus.resolve(r)?.text);
        }
        for r in &g.supplementary {
            println!("supplementary {}", corpus.resolve(r)?.text);
        }
    }
    Ok(())
}
