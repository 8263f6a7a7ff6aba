//! A three-candidate selection problem small enough to enumerate, so the
//! expected reward and its gradient are known exactly.

use super::{
    indicators, Candidate, Decision, Episode, Estimator, GroupView, SelectionScorer, SelectionState, Sde,
    WeightedEpisode,
};
use crate::encoder::SentenceRef;
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub view: GroupView,
    pub reject_reward: f64,
    base_ce: f64,
    deltas: Vec<f64>,
    /// Extra cross-entropy when candidates 0 and 2 are both selected.
    clash: f64,
}

pub struct ToyScorer<'a>(pub &'a ToyProblem);

impl SelectionScorer for ToyScorer<'_> {
    fn cross_entropy(&mut self, selected: &[usize]) -> Result<f64> {
        Ok(self.0.cross_entropy(selected))
    }
}

/// A complete trajectory with its probability under the current policies.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub probability: f64,
    pub episode: Episode,
}

impl ToyProblem {
    pub fn standard() -> Self {
        let d_s = 4;
        let main_features = vec![0.6, -0.2, 0.4, 0.1];
        let raw: [(usize, u64, [f64; 4]); 3] = [
            (3, 0b0101, [0.5, -0.1, 0.3, 0.2]),
            (5, 0b0001, [-0.4, 0.6, -0.2, 0.1]),
            (1, 0b1010, [0.2, 0.3, 0.5, -0.3]),
        ];
        let main_position = 2;
        let candidates = raw
            .iter()
            .map(|&(position, coverage, f)| Candidate {
                sentence: SentenceRef("toy".into(), position),
                position,
                coverage,
                features: f.to_vec(),
                indicators: indicators(position, main_position, coverage, &f, &main_features),
            })
            .collect();
        debug_assert_eq!(main_features.len(), d_s);
        Self {
            view: GroupView {
                main: SentenceRef("toy".into(), main_position),
                main_position,
                main_coverage: 0b0011,
                main_features,
                candidates,
                label: 0,
            },
            reject_reward: 0.02,
            base_ce: 1.5,
            deltas: vec![-1.5, 3.0, -0.3],
            clash: 1.0,
        }
    }

    pub fn d_s(&self) -> usize {
        self.view.main_features.len()
    }

    pub fn cross_entropy(&self, selected: &[usize]) -> f64 {
        let mut ce = self.base_ce + selected.iter().map(|&j| self.deltas[j]).sum::<f64>();
        if selected.contains(&0) && selected.contains(&2) {
            ce += self.clash;
        }
        ce
    }

    /// A selector with random non-zero parameters.
    pub fn random_sde(&self, seed: u64) -> Sde {
        let mut sde = Sde::new(self.d_s(), true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let ids: Vec<_> = sde.store.ids().collect();
        for id in ids {
            for w in sde.store.get_mut(id).data_mut() {
                *w += normal.sample(&mut rng);
            }
        }
        sde
    }

    /// Every trajectory with its probability. Each decision's reward is the
    /// terminal reward, which makes the probability-weighted score-function
    /// sum equal to the exact gradient.
    pub fn trajectories(&self, sde: &Sde) -> Vec<Trajectory> {
        let main_prob = sde.main_prob(&self.view.main_features);
        let probs = sde.candidate_probs(&self.view);
        let mut out = vec![Trajectory {
            probability: 1.0 - main_prob,
            episode: Episode { main_prob, accepted: false, decisions: Vec::new(), terminal_reward: self.reject_reward },
        }];
        let mut stack = vec![(SelectionState::new(&self.view), Vec::<(usize, bool)>::new(), main_prob)];
        while let Some((state, path, prob)) = stack.pop() {
            match state.next_state(&self.view) {
                None => {
                    let selected: Vec<usize> = path.iter().filter(|d| d.1).map(|d| d.0).collect();
                    let r = (-self.cross_entropy(&selected)).exp();
                    let decisions = path
                        .iter()
                        .map(|&(candidate, selected)| Decision { candidate, selected, prob: probs[candidate], reward: r })
                        .collect();
                    out.push(Trajectory {
                        probability: prob,
                        episode: Episode { main_prob, accepted: true, decisions, terminal_reward: r },
                    });
                }
                Some(j) => {
                    for b in [false, true] {
                        let mut st = state.clone();
                        st.visit(&self.view, j, b);
                        let mut p = path.clone();
                        p.push((j, b));
                        let q = if b { probs[j] } else { 1.0 - probs[j] };
                        stack.push((st, p, prob * q));
                    }
                }
            }
        }
        out
    }

    /// Expected terminal reward by enumeration.
    pub fn expected_reward(&self, sde: &Sde) -> f64 {
        self.trajectories(sde)
            .iter()
            .map(|t| t.probability * t.episode.terminal_reward)
            .sum()
    }

    /// Score-function gradient summed over all trajectories, flattened in
    /// store order.
    pub fn exact_gradient(&self, sde: &Sde) -> Result<Vec<f64>> {
        let trajectories = self.trajectories(sde);
        let batch: Vec<WeightedEpisode<'_>> = trajectories
            .iter()
            .map(|t| WeightedEpisode { view: &self.view, episode: &t.episode, weight: t.probability })
            .collect();
        Ok(sde.policy_gradients(&batch, Estimator::ScoreFunction)?.flatten())
    }

    /// Central differences of the enumerated expected reward.
    pub fn finite_difference_gradient(&self, sde: &Sde, eps: f64) -> Vec<f64> {
        let mut probe = sde.clone();
        let ids: Vec<_> = probe.store.ids().collect();
        let mut out = Vec::new();
        for id in ids {
            for k in 0..probe.store.get(id).numel() {
                let orig = probe.store.get(id).data()[k];
                probe.store.get_mut(id).data_mut()[k] = orig + eps;
                let up = self.expected_reward(&probe);
                probe.store.get_mut(id).data_mut()[k] = orig - eps;
                let down = self.expected_reward(&probe);
                probe.store.get_mut(id).data_mut()[k] = orig;
                out.push((up - down) / (2.0 * eps));
            }
        }
        out
    }

    /// Mean gradient estimate over `episodes` sampled episodes.
    pub fn sampled_gradient<R: Rng + ?Sized>(
        &self,
        sde: &Sde,
        episodes: usize,
        rollouts: usize,
        estimator: Estimator,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut scorer = ToyScorer(self);
        let eps = (0..episodes)
            .map(|_| sde.sample_episode(&self.view, &mut scorer, rollouts, self.reject_reward, rng))
            .collect::<Result<Vec<_>>>()?;
        let w = 1.0 / episodes as f64;
        let batch: Vec<WeightedEpisode<'_>> = eps
            .iter()
            .map(|episode| WeightedEpisode { view: &self.view, episode, weight: w })
            .collect();
        Ok(sde.policy_gradients(&batch, estimator)?.flatten())
    }
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}
