//! The `nrx` command line.

use crate::audit::{gradient_audit, AUDIT_TOLERANCE};
use crate::config::RunConfig;
use crate::encoder::Corpus;
use crate::error::{Error, Result};
use crate::labeler::{annotate, label_strong, label_weak, read_facts, read_groups, Fact, LabeledGroup};
use crate::model::ReModel;
use crate::pipeline::{relations_of, synthetic, train_groups};
use crate::sde::Sde;
use crate::train::{
    build_model, build_samples, evaluate_accuracy, group_views, noise_separation_report, selection_records, Sample,
};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "nrx", version, about = "Cross-sentence relation extraction with a learned sentence selector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelMode {
    Weak,
    Strong,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus, its facts and labeled groups.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label a corpus against facts with the weak or strong rule.
    Label {
        #[arg(long, value_enum)]
        mode: LabelMode,
        #[arg(long)]
        facts: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3)]
        max_span: usize,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the extractor and the selector; writes checkpoints and report.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Labeled groups; corpus.jsonl and facts.jsonl are read from the same directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for feature extraction (results may differ from single-threaded runs).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Accuracy of a trained extractor on labeled groups.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding the checkpoints written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Selection report, probability histogram and α/β series of a trained run.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Finite-difference audit of every layer and both policies.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seed: u64,
    },
}

/// Runs the command line and returns the exit code: 0 on success, 1 on
/// invalid input, 2 on runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(path: Option<&Path>, threads: Option<usize>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = cfg.with_env_seed()?;
    if let Some(t) = threads {
        cfg.set("threads", &t.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::invalid(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

struct Dataset {
    corpus: Corpus,
    facts: Vec<Fact>,
    groups: Vec<LabeledGroup>,
}

/// Groups file plus the sibling `corpus.jsonl` and `facts.jsonl`.
fn load_dataset(groups: &Path) -> Result<Dataset> {
    let dir = groups.parent().unwrap_or(Path::new("."));
    let facts = read_facts(&dir.join("facts.jsonl"))?;
    let mut corpus = Corpus::read(&dir.join("corpus.jsonl"))?;
    annotate(&mut corpus, &facts);
    let groups = read_groups(groups)?;
    Ok(Dataset { corpus, facts, groups })
}

fn checkpoint_paths(dir: &Path, hash: &str) -> Result<(PathBuf, PathBuf)> {
    let re = dir.join(format!("re-{hash}.ckpt"));
    let sde = dir.join(format!("sde-{hash}.ckpt"));
    for p in [&re, &sde] {
        if !p.exists() {
            return Err(Error::invalid(format!(
                "missing checkpoint {} (was it trained with the same config?)",
                p.display()
            )));
        }
    }
    Ok((re, sde))
}

fn restore(cfg: &RunConfig, data: &Dataset, dir: &Path) -> Result<(ReModel, Sde, Vec<Sample>)> {
    let (re_path, sde_path) = checkpoint_paths(dir, &cfg.hash())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = build_model(cfg.model.clone(), &data.corpus, relations_of(&data.facts), &mut rng)?;
    model.load(&re_path)?;
    let mut sde = Sde::new(model.params.d_s(), cfg.train.use_indicators);
    sde.load(&sde_path)?;
    let samples = build_samples(&data.corpus, &data.facts, &data.groups, &model)?;
    Ok((model, sde, samples))
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Generate { config, out: dir } => {
            let cfg = load_config(config.as_deref(), None)?;
            let data = synthetic(&cfg)?;
            create_dir(&dir)?;
            data.corpus.write(&dir.join("corpus.jsonl"))?;
            crate::jsonl::write(&dir.join("facts.jsonl"), &data.facts)?;
            crate::jsonl::write(&dir.join("groups.jsonl"), &data.groups)?;
            let hash = cfg.hash();
            std::fs::write(dir.join(format!("config-{hash}.cfg")), format!("# config {hash}\n{}", cfg.render()))?;
            let noisy = data.groups.iter().filter(|g| g.clean_flag == Some(false)).count();
            writeln!(
                out,
                "config {hash}: {} documents, {} facts, {} groups ({noisy} noisy) in {}",
                data.corpus.documents.len(),
                data.facts.len(),
                data.groups.len(),
                dir.display()
            )?;
        }
        Command::Label { mode, facts, corpus, max_span, out: path } => {
            let facts = read_facts(&facts)?;
            let mut corpus = Corpus::read(&corpus)?;
            annotate(&mut corpus, &facts);
            let groups = match mode {
                LabelMode::Weak => {
                    let (groups, skipped) = label_weak(&corpus, &facts);
                    if !skipped.facts_without_main.is_empty() {
                        writeln!(err, "facts without a main sentence: {:?}", skipped.facts_without_main)?;
                    }
                    groups
                }
                LabelMode::Strong => label_strong(&corpus, &facts, max_span)?,
            };
            match path {
                Some(p) => crate::jsonl::write(&p, &groups)?,
                None => crate::jsonl::write_to(&mut *out, &groups)?,
            }
        }
        Command::Train { config, data, out: dir, threads } => {
            let cfg = load_config(config.as_deref(), threads)?;
            let ds = load_dataset(&data)?;
            create_dir(&dir)?;
            let hash = cfg.hash();
            let trained = train_groups(&cfg, &ds.corpus, &ds.facts, &ds.groups, relations_of(&ds.facts))?;
            trained.model.save(&dir.join(format!("re-{hash}.ckpt")))?;
            trained.sde.save(&dir.join(format!("sde-{hash}.ckpt")))?;
            let report = serde_json::json!({ "config_hash": hash, "report": trained.report });
            write_json(&dir.join("report.json"), &report)?;
            writeln!(out, "config {hash}: trained on {} groups", ds.groups.len())?;
            if let Some(acc) = trained.report.train_accuracy {
                writeln!(out, "train accuracy {acc:.4}")?;
            }
            if let Some(n) = &trained.report.noise {
                writeln!(out, "noise separation gap {:.4} auc {}", n.gap, fmt_opt(n.auc))?;
            }
        }
        Command::Eval { config, data, ckpt } => {
            let cfg = load_config(config.as_deref(), None)?;
            let ds = load_dataset(&data)?;
            let (model, _, samples) = restore(&cfg, &ds, &ckpt)?;
            writeln!(out, "subset\tsamples\taccuracy")?;
            let subsets: [(&str, Box<dyn Fn(&Sample) -> bool>); 3] = [
                ("all", Box::new(|_| true)),
                ("clean", Box::new(|s| s.clean == Some(true))),
                ("noisy", Box::new(|s| s.clean == Some(false))),
            ];
            for (name, keep) in subsets {
                let subset: Vec<Sample> = samples.iter().filter(|s| keep(s)).cloned().collect();
                if subset.is_empty() {
                    continue;
                }
                writeln!(out, "{name}\t{}\t{:.4}", subset.len(), evaluate_accuracy(&model, &subset)?)?;
            }
        }
        Command::Inspect { config, data, ckpt, out: dir, threads } => {
            let cfg = load_config(config.as_deref(), threads)?;
            let ds = load_dataset(&data)?;
            let (model, sde, samples) = restore(&cfg, &ds, &ckpt)?;
            create_dir(&dir)?;
            let hash = cfg.hash();
            let views = group_views(&model, &samples, cfg.train.threads)?;
            crate::jsonl::write(&dir.join(format!("selection-{hash}.jsonl")), &selection_records(&sde, &samples, &views))?;
            if samples.iter().any(|s| s.clean.is_some()) {
                let noise = noise_separation_report(&sde, &samples, &views)?;
                std::fs::write(dir.join(format!("histogram-{hash}.csv")), noise.histogram_csv())?;
                writeln!(out, "gap {:.4} auc {}", noise.gap, fmt_opt(noise.auc))?;
            }
            let report_path = ckpt.join("report.json");
            if report_path.exists() {
                let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
                let mut csv = String::from("update,alpha,beta\n");
                if let Some(series) = report["report"]["alpha_beta"].as_array() {
                    for (i, ab) in series.iter().enumerate() {
                        csv.push_str(&format!("{i},{},{}\n", ab[0], ab[1]));
                    }
                }
                std::fs::write(dir.join(format!("alpha_beta-{hash}.csv")), csv)?;
            }
            writeln!(out, "α {:.4} β {:.4}; wrote reports to {}", sde.alpha(), sde.beta(), dir.display())?;
        }
        Command::Gradcheck { seed } => {
            let report = gradient_audit(seed)?;
            let mut ok = true;
            for r in &report {
                ok &= r.passed();
                writeln!(
                    out,
                    "{:<32} {:>6} coords  max rel err {:.3e}  {}",
                    r.layer,
                    r.coordinates,
                    r.max_rel_error,
                    if r.passed() { "ok" } else { "FAIL" }
                )?;
            }
            writeln!(out, "tolerance {AUDIT_TOLERANCE:e}: {}", if ok { "all layers pass" } else { "audit failed" })?;
            return Ok(if ok { 0 } else { 2 });
        }
    }
    Ok(0)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into())
}
