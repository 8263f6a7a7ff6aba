//! Generates the template corpus and prints one clean and one noisy document.

use nrx::config::RunConfig;
use nrx::pipeline::synthetic;

fn main() -> nrx::Result<()> {
    let cfg = RunConfig::default();
    let data = synthetic(&cfg)?;
    let noisy = data.groups.iter().filter(|g| g.clean_flag == Some(false)).count();
    println!("{} facts, {} groups, {noisy} noisy", data.facts.len(), data.groups.len());
    for flag in [true, false] {
        let g = data.groups.iter().find(|g| g.clean_flag == Some(flag)).expect("both kinds exist");
        let fact = &data.facts[g.fact_index];
        println!("\n{} group, relation `{}`:", if flag { "clean" } else { "noisy" }, fact.relation);
        let doc = data.corpus.document(&g.main[0].0).expect("generated document");
        for s in &doc.sentences {
            let role = if g.main.iter().any(|r| r.1 == s.position) {
                "main"
            } else if g.supplementary.iter().any(|r| r.1 == s.position) {
                "supp"
            } else {
                "    "
            };
            println!("  {role} {}", s.text);
        }
    }
    Ok(())
}
