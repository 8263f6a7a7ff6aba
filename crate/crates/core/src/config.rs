//! Flat `key = value` run configuration covering the generator, the model and
//! the training schedule.

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::labeler::SynthConfig;
use crate::model::ReConfig;
use crate::sde::Estimator;
use crate::train::TrainConfig;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const SEED_ENV: &str = "NRX_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ReConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 10,
            synth: SynthConfig::default(),
            model: ReConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    /// Sizes that train in minutes on one CPU core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model = ReConfig {
            encoder: EncoderConfig { d_w: 16, d_p: 4, d_b: 16, max_dist: 30 },
            n_filters: 16,
            window: 3,
            heads: 4,
            dropout: 0.5,
            l2: 1e-4,
        };
        c.train.re_epochs = 12;
        c.train.batch_size = 32;
        c.train.lr = 0.3;
        c.train.sde_lr_theta = 0.3;
        c.train.sde_lr_gamma = 0.01;
        c
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (s, m, t) = (&mut self.synth, &mut self.model, &mut self.train);
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                s.seed = self.seed;
            }
            "vocab_size" => s.vocab_size = parse(key, value)?,
            "relations" => s.relations = parse(key, value)?,
            "facts" => s.facts = parse(key, value)?,
            "sentences_per_fact" => s.sentences_per_fact = parse(key, value)?,
            "noise_rate" => s.noise_rate = parse(key, value)?,
            "template_pool" => s.template_pool = parse(key, value)?,
            "cues_per_template" => s.cues_per_template = parse(key, value)?,
            "cue_overlap" => s.cue_overlap = parse(key, value)?,
            "irrelevant_rate" => s.irrelevant_rate = parse(key, value)?,
            "d_w" => m.encoder.d_w = parse(key, value)?,
            "d_p" => m.encoder.d_p = parse(key, value)?,
            "d_b" => m.encoder.d_b = parse(key, value)?,
            "max_dist" => m.encoder.max_dist = parse(key, value)?,
            "n_filters" => m.n_filters = parse(key, value)?,
            "window" => m.window = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "l2" => m.l2 = parse(key, value)?,
            "re_epochs" => t.re_epochs = parse(key, value)?,
            "sde_passes" => t.sde_passes = parse(key, value)?,
            "rounds" => t.rounds = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "sde_lr_theta" => t.sde_lr_theta = parse(key, value)?,
            "sde_lr_gamma" => t.sde_lr_gamma = parse(key, value)?,
            "rollouts" => t.rollouts = parse(key, value)?,
            "episodes_per_sample" => t.episodes_per_sample = parse(key, value)?,
            "estimator" => {
                t.estimator = match value {
                    "printed" => Estimator::Printed,
                    "score_function" => Estimator::ScoreFunction,
                    _ => {
                        return Err(Error::Config(format!(
                            "`estimator`: expected printed or score_function, got `{value}`"
                        )))
                    }
                }
            }
            "use_indicators" => t.use_indicators = parse_bool(key, value)?,
            "threads" => t.threads = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `text` on top of `self`. Blank lines and `#` comments are
    /// skipped; duplicate and unknown keys are errors.
    pub fn apply_text(mut self, text: &str, name: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |message: String| Error::Parse { path: name.to_string(), line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), i + 1) {
                return Err(at(format!("`{k}` already set on line {prev}")));
            }
            self.set(k, v).map_err(|e| at(e.to_string()))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        Self::default().apply_text(text, name)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `NRX_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", v.trim()).map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse `{v}`")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let (s, m, t) = (&self.synth, &self.model, &self.train);
        let estimator = match t.estimator {
            Estimator::Printed => "printed",
            Estimator::ScoreFunction => "score_function",
        };
        [
            ("seed", self.seed.to_string()),
            ("vocab_size", s.vocab_size.to_string()),
            ("relations", s.relations.to_string()),
            ("facts", s.facts.to_string()),
            ("sentences_per_fact", s.sentences_per_fact.to_string()),
            ("noise_rate", s.noise_rate.to_string()),
            ("template_pool", s.template_pool.to_string()),
            ("cues_per_template", s.cues_per_template.to_string()),
            ("cue_overlap", s.cue_overlap.to_string()),
            ("irrelevant_rate", s.irrelevant_rate.to_string()),
            ("d_w", m.encoder.d_w.to_string()),
            ("d_p", m.encoder.d_p.to_string()),
            ("d_b", m.encoder.d_b.to_string()),
            ("max_dist", m.encoder.max_dist.to_string()),
            ("n_filters", m.n_filters.to_string()),
            ("window", m.window.to_string()),
            ("heads", m.heads.to_string()),
            ("dropout", m.dropout.to_string()),
            ("l2", m.l2.to_string()),
            ("re_epochs", t.re_epochs.to_string()),
            ("sde_passes", t.sde_passes.to_string()),
            ("rounds", t.rounds.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("sde_lr_theta", t.sde_lr_theta.to_string()),
            ("sde_lr_gamma", t.sde_lr_gamma.to_string()),
            ("rollouts", t.rollouts.to_string()),
            ("episodes_per_sample", t.episodes_per_sample.to_string()),
            ("estimator", estimator.to_string()),
            ("use_indicators", t.use_indicators.to_string()),
            ("threads", t.threads.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// The config as a file that parses back to the same value.
    pub fn render(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 12 hex digits of the SHA-256 of [`render`](Self::render).
    /// `threads` is left out since it does not change what is computed in
    /// single-threaded mode.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "threads" {
                h.update(format!("{k} = {v}\n"));
            }
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_follow_the_published_setup() {
        let c = RunConfig::default();
        assert_eq!(c.seed, 10);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!((c.train.re_epochs, c.train.sde_passes), (20, 8));
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.rollouts, 5);
        assert_eq!((c.model.dropout, c.model.l2), (0.5, 0.1));
        assert_eq!((c.model.encoder.d_w, c.model.encoder.d_p), (200, 25));
    }

    #[test]
    fn unknown_key_names_the_line() {
        let err = RunConfig::parse("# hi\nlr = 0.1\nlearning_rate = 3\n", "run.cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.cfg:3") && msg.contains("learning_rate"), "{msg}");
        assert!(err.is_validation());
    }

    #[test]
    fn duplicates_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("lr = 1\nlr = 2\n", "x").is_err());
        assert!(RunConfig::parse("batch_size = many\n", "x").is_err());
        assert!(RunConfig::parse("batch_size = 0\n", "x").is_err());
        assert!(RunConfig::parse("just words\n", "x").is_err());
        assert!(RunConfig::parse("estimator = greedy\n", "x").is_err());
    }

    #[test]
    fn comments_and_seed_propagate() {
        let c = RunConfig::parse("seed = 7  # trailing\n\n  rounds=1\n", "x").unwrap();
        assert_eq!((c.seed, c.synth.seed, c.train.rounds), (7, 7, 1));
    }

    #[test]
    fn threads_do_not_change_the_hash() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.train.threads = 4;
        assert_eq!(a.hash(), b.hash());
        b.train.lr = 0.2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }

    proptest! {
        #[test]
        fn render_parses_back(seed in 0u64..1000, rounds in 0usize..5, lr in 0.0f64..2.0, ind in any::<bool>()) {
            let mut c = RunConfig::desk();
            c.set("seed", &seed.to_string()).unwrap();
            c.train.rounds = rounds;
            c.train.lr = lr;
            c.train.use_indicators = ind;
            let back = RunConfig::parse(&c.render(), "x").unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
