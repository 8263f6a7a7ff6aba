use crate::encoder::{Corpus, EncodedSentence, SentenceRef};
use crate::error::{Error, Result};
use crate::labeler::{Fact, LabeledGroup};
use crate::model::{Instance, ReModel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Slot {
    pub sentence: SentenceRef,
    /// Fact entities mentioned, as a bitmask.
    pub coverage: u64,
    pub encoded: EncodedSentence,
}

/// One training or test instance: a main sentence of a labeled group and the
/// group's supplementary sentences.
#[derive(Clone, Debug)]
pub struct Sample {
    pub group_id: usize,
    pub fact_index: usize,
    pub label: usize,
    pub clean: Option<bool>,
    pub main: Slot,
    pub supplementary: Vec<Slot>,
}

impl Sample {
    /// The main sentence plus the chosen supplementary sentences, or all of
    /// them when `selection` is `None`.
    pub fn instance(&self, selection: Option<&[usize]>) -> Instance {
        let mut sentences = vec![self.main.encoded.clone()];
        match selection {
            Some(sel) => sentences.extend(sel.iter().map(|&j| self.supplementary[j].encoded.clone())),
            None => sentences.extend(self.supplementary.iter().map(|s| s.encoded.clone())),
        }
        Instance { sentences, label: self.label }
    }
}

/// Expands labeled groups into samples, one per main sentence.
pub fn build_samples(corpus: &Corpus, facts: &[Fact], groups: &[LabeledGroup], model: &ReModel) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let fact = facts
            .get(g.fact_index)
            .ok_or_else(|| Error::invalid(format!("group {gi} refers to missing fact {}", g.fact_index)))?;
        let label = model
            .relation_id(&fact.relation)
            .ok_or_else(|| Error::invalid(format!("relation `{}` is not in the relation vocabulary", fact.relation)))?;
        let slot = |r: &SentenceRef| -> Result<Slot> {
            let s = corpus.resolve(r)?;
            Ok(Slot { sentence: r.clone(), coverage: fact.coverage(s), encoded: model.encode(s)? })
        };
        let supplementary = g.supplementary.iter().map(slot).collect::<Result<Vec<_>>>()?;
        for m in &g.main {
            out.push(Sample {
                group_id: gi,
                fact_index: g.fact_index,
                label,
                clean: g.clean_flag,
                main: slot(m)?,
                supplementary: supplementary.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Fold {
    pub train: Vec<LabeledGroup>,
    pub test: Vec<LabeledGroup>,
}

#[derive(Clone, Debug)]
pub struct Folds {
    pub folds: Vec<Fold>,
    /// Groups with a single sentence, kept wholly in training.
    pub single_sentence_groups: Vec<usize>,
}

fn part(g: &LabeledGroup, main: Vec<SentenceRef>, supp: Vec<SentenceRef>) -> Option<LabeledGroup> {
    let (mut main, mut supp) = (main, supp);
    main.sort();
    supp.sort();
    if main.is_empty() {
        if supp.is_empty() {
            return None;
        }
        main.push(supp.remove(0));
    }
    Some(LabeledGroup { main, supplementary: supp, ..g.clone() })
}

/// Sentence-level k-fold split within each group. Main and supplementary
/// sentences are shuffled separately and dealt round-robin from a random
/// offset, so every fold tests about 1/k of each and every test group keeps at
/// least one training sentence. A part without a main sentence promotes its
/// first sentence.
pub fn kfold_split(groups: &[LabeledGroup], k: usize, seed: u64) -> Result<Folds> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold split needs k ≥ 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Fold> = (0..k).map(|_| Fold { train: Vec::new(), test: Vec::new() }).collect();
    let mut single = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let mut main = g.main.clone();
        let mut supp = g.supplementary.clone();
        main.shuffle(&mut rng);
        supp.shuffle(&mut rng);
        let offset = rng.gen_range(0..k);
        let n = main.len() + supp.len();
        if n < 2 {
            single.push(gi);
            for f in &mut folds {
                f.train.push(g.clone());
            }
            continue;
        }
        let items: Vec<(SentenceRef, bool)> = main
            .into_iter()
            .map(|r| (r, true))
            .chain(supp.into_iter().map(|r| (r, false)))
            .collect();
        for (fi, fold) in folds.iter_mut().enumerate() {
            let (mut tr_m, mut tr_s, mut te_m, mut te_s) = (vec![], vec![], vec![], vec![]);
            for (idx, (r, is_main)) in items.iter().enumerate() {
                let test = (offset + idx) % k == fi;
                match (test, is_main) {
                    (true, true) => te_m.push(r.clone()),
                    (true, false) => te_s.push(r.clone()),
                    (false, true) => tr_m.push(r.clone()),
                    (false, false) => tr_s.push(r.clone()),
                }
            }
            fold.train.extend(part(g, tr_m, tr_s));
            fold.test.extend(part(g, te_m, te_s));
        }
    }
    Ok(Folds { folds, single_sentence_groups: single })
}
