//! Seeded random finite MDPs. These never feed the learning stack; they give
//! the planning oracle small problems with exactly computable solutions.

use crate::rng::stream_rng;
use crate::Real;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `[s][a][s']`, each (s, a) row summing to 1.
    pub transition: Vec<Real>,
    /// Row-major `[s][a]`.
    pub reward: Vec<Real>,
}

impl TabularMdp {
    pub fn transition_row(&self, s: usize, a: usize) -> &[Real] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn reward_at(&self, s: usize, a: usize) -> Real {
        self.reward[s * self.n_actions + a]
    }

    /// Sample s' ~ T(. | s, a) by inverse CDF walk.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut impl Rng) -> usize {
        let row = self.transition_row(s, a);
        let u: Real = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.n_states - 1
    }
}

/// Uniform-positive transition rows normalized to 1, rewards U[0, 1],
/// everything determined by the seed.
pub fn make_random_mdp(n_states: usize, n_actions: usize, seed: u64) -> TabularMdp {
    let mut rng = stream_rng(seed, "tabular-mdp");
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for row in transition.chunks_exact_mut(n_states) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            // Bounded away from zero so every row is genuinely stochastic.
            *v = rng.gen_range(0.05..1.0);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let reward = (0..n_states * n_actions).map(|_| rng.gen_range(0.0..1.0)).collect();
    TabularMdp { n_states, n_actions, transition, reward }
}
