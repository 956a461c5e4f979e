//! The scheduled-sampling probability against direct evaluation of its formula.

use imn::training::scheduled_sampling_prob;

use crate::common::Outcome;

pub fn run() -> Outcome {
    if scheduled_sampling_prob(0) != 5.0 / 6.0 {
        return Outcome::fail(format!("eps(0) = {}", scheduled_sampling_prob(0)));
    }
    let mut worst = 0.0f64;
    for epoch in 0..=100 {
        let direct = 5.0 / (5.0 + (epoch as f64 / 5.0).exp());
        worst = worst.max((scheduled_sampling_prob(epoch) - direct).abs());
        if epoch > 0 && scheduled_sampling_prob(epoch) >= scheduled_sampling_prob(epoch - 1) {
            return Outcome::fail(format!("eps does not decrease at epoch {epoch}"));
        }
    }
    Outcome::new(
        worst <= 1e-12,
        format!("eps(0) = 5/6 exactly, strictly decreasing over 0..=100, max deviation {worst:.1e}"),
    )
}
