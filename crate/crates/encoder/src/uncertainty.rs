//! Monte-Carlo dropout over the finest branch's high-risk probability.

use dcmil_core::TilePyramid;
use dcmil_survival::StochasticModel;
use rand_chacha::ChaCha8Rng;

use crate::forward::Dropout;
use crate::model::C1Model;

impl StochasticModel for C1Model {
    type Input = Vec<TilePyramid>;

    fn stochastic_pass(&self, input: &Self::Input, dropout_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        input
            .iter()
            .map(|pyr| {
                let mut d = Dropout::new(dropout_rate, rng);
                let probs = self
                    .high_risk_probs(pyr, self.n_branches(), &mut d)
                    .expect("instances were validated when the bag was built");
                probs[probs.len() - 1]
            })
            .collect()
    }
}
