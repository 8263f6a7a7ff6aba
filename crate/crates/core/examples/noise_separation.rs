//! Trains on the noisy synthetic corpus and prints how the main policy's
//! acceptance probability splits clean from noisy groups.

use nrx::config::RunConfig;
use nrx::pipeline::{synthetic, train_groups};

fn main() -> nrx::Result<()> {
    let cfg = RunConfig::desk().with_env_seed()?;
    let data = synthetic(&cfg)?;
    let t = train_groups(&cfg, &data.corpus, &data.facts, &data.groups, data.relations.clone())?;
    let noise = t.report.noise.expect("synthetic groups carry clean flags");
    println!("mean P(accept) clean {:.3} noisy {:.3}", noise.mean_clean, noise.mean_noisy);
    println!("gap {:.3} AUC {:?}", noise.gap, noise.auc);
    print!("{}", noise.histogram_csv());
    Ok(())
}
