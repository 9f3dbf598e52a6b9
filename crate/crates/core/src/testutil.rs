use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{sigmoid, DataShard};

fn design(rng: &mut ChaCha8Rng, d: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
}

pub(crate) fn logistic_data(d: usize, n: usize, seed: u64) -> DataShard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = DVector::from_fn(d, |_, _| rng.random::<f64>());
    let x = design(&mut rng, d, n);
    let eta = &x * &theta;
    let y = eta.map(|e| {
        if rng.random::<f64>() < sigmoid(e) {
            1.0
        } else {
            0.0
        }
    });
    DataShard::new(x, y).unwrap()
}

pub(crate) fn linear_data(d: usize, n: usize, seed: u64) -> DataShard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = DVector::from_fn(d, |i, _| (i % 3) as f64 - 1.0);
    let x = design(&mut rng, d, n);
    let noise = DVector::from_fn(n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    let y = &x * &theta + noise;
    DataShard::new(x, y).unwrap()
}
