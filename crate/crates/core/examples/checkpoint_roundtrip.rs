//! Saves a briefly trained extractor and selector and reloads them into fresh
//! models.

use nrx::config::RunConfig;
use nrx::pipeline::{synthetic, train_groups};
use nrx::sde::Sde;
use nrx::train::{build_model, build_samples};
use rand::SeedableRng;

fn main() -> nrx::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.synth.facts = 60;
    cfg.train.re_epochs = 2;
    cfg.train.sde_passes = 1;
    cfg.train.rounds = 1;
    let data = synthetic(&cfg)?;
    let trained = train_groups(&cfg, &data.corpus, &data.facts, &data.groups, data.relations.clone())?;
    let dir = std::env::temp_dir().join(format!("nrx-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    trained.model.save(&dir.join("re.ckpt"))?;
    trained.sde.save(&dir.join("sde.ckpt"))?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let mut model = build_model(cfg.model.clone(), &data.corpus, data.relations.clone(), &mut rng)?;
    model.load(&dir.join("re.ckpt"))?;
    let mut sde = Sde::new(model.params.d_s(), true);
    sde.load(&dir.join("sde.ckpt"))?;

    let samples = build_samples(&data.corpus, &data.facts, &data.groups, &model)?;
    let inst = samples[0].instance(None);
    let before = trained.model.predict(&inst.sentences)?;
    let after = model.predict(&inst.sentences)?;
    println!("prediction before save {before:.4?}");
    println!("prediction after load  {after:.4?}");
    println!("identical: {}", before == after && sde.alpha() == trained.sde.alpha());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
