//! Synthetic stand-in for the white-browed coucal growth data: 292
//! nestlings, body mass against age in days, generated from the logistic
//! model at the published full-model estimate
//! `Lambda = diag(sqrt 212.34, sqrt 0.89, sqrt 0.02)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcboot_core::{simulate_dataset, Dataset, Logistic, Model, Theta};

pub const N_NESTLINGS: usize = 292;

/// Asymptotic mass (g), age at half of it and scale (days). Only `Lambda`
/// is published; `beta` and `sigma2` are plausible values for the species.
pub fn theta() -> Theta {
    Theta::diagonal(
        vec![BETA[0], BETA[1], BETA[2]],
        &[212.34f64.sqrt(), 0.89f64.sqrt(), 0.02f64.sqrt()],
        SIGMA2,
    )
    .expect("valid parameter")
}

const BETA: [f64; 3] = [110.0, 9.0, 2.5];
const SIGMA2: f64 = 36.0;

pub fn model() -> Model {
    Model::new(Logistic::new(0))
}

/// Each nestling is weighed on 4 to 8 distinct days between ages 1 and 24.
pub fn design<R: Rng + ?Sized>(rng: &mut R) -> Vec<Vec<Vec<f64>>> {
    (0..N_NESTLINGS)
        .map(|_| {
            let j = rng.random_range(4..=8);
            let mut days: Vec<usize> = sample(rng, 24, j).into_vec();
            days.sort_unstable();
            days.into_iter().map(|d| vec![(d + 1) as f64]).collect()
        })
        .collect()
}

pub fn synthetic(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let design = design(&mut rng);
    simulate_dataset(&model(), &theta(), &design, &mut rng).expect("valid design")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape() {
        let d = synthetic(1);
        assert_eq!(d.n(), N_NESTLINGS);
        assert!(d.individuals().iter().all(|i| (4..=8).contains(&i.len())));
        assert_eq!(d, synthetic(1));
    }
}
