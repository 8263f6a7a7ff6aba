//! Gradient ascent on the enumerable three-candidate problem, tracking the
//! exact expected reward.

use nrx::sde::toy::ToyProblem;
use nrx::sde::{Estimator, WeightedEpisode};

fn main() -> nrx::Result<()> {
    let toy = ToyProblem::standard();
    let mut sde = toy.random_sde(7);
    for step in 0..=200 {
        if step % 40 == 0 {
            println!(
                "step {step:>3}  expected reward {:.4}  main {:.3}  candidates {:?}",
                toy.expected_reward(&sde),
                sde.main_prob(&toy.view.main_features),
                sde.candidate_probs(&toy.view).iter().map(|p| format!("{p:.2}")).collect::<Vec<_>>()
            );
        }
        let trajectories = toy.trajectories(&sde);
        let batch: Vec<_> = trajectories
            .iter()
            .map(|t| WeightedEpisode { view: &toy.view, episode: &t.episode, weight: t.probability })
            .collect();
        let grads = sde.policy_gradients(&batch, Estimator::ScoreFunction)?;
        sde.update_policies(&grads, 1.0, 1.0);
    }
    Ok(())
}
