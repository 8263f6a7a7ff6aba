//! Full alternating schedule on the desk-scale synthetic corpus, printing the
//! step log. Pass a config file to override the desk settings.

use nrx::config::RunConfig;
use nrx::pipeline::{synthetic, train_groups};
use nrx::train::Phase;

fn main() -> nrx::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::read(path.as_ref())?,
        None => RunConfig::desk(),
    }
    .with_env_seed()?;
    let data = synthetic(&cfg)?;
    let t = train_groups(&cfg, &data.corpus, &data.facts, &data.groups, data.relations.clone())?;
    for step in &t.report.steps {
        let what = match step.phase {
            Phase::ReEpoch => "RE loss",
            Phase::SdePass => "SDE mean reward",
        };
        println!("round {} {what:<16} {:.4}", step.round, step.value);
    }
    println!("kept per round {:?}", t.report.selected);
    println!("train accuracy {:.4}", t.report.train_accuracy.unwrap_or(f64::NAN));
    let (a, b) = t.report.alpha_beta.last().copied().unwrap_or((0.5, 0.5));
    println!("final α {a:.4} β {b:.4}");
    Ok(())
}
