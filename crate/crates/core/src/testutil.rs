use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{FeatureMatrix, Mask3, Matrix, Tensor3};

pub fn tiny_features(seed: u64, n: [usize; 3], p: [usize; 3]) -> [FeatureMatrix; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    [0, 1, 2].map(|m| {
        let values = Matrix::from_fn(n[m], p[m], |_, _| normal.sample(&mut rng));
        FeatureMatrix::with_default_ids(values, &format!("m{}_", m + 1)).unwrap()
    })
}

/// Random responses with roughly `hidden` of the cells unobserved.
pub fn tiny_data(seed: u64, dims: [usize; 3], hidden: f64) -> (Tensor3, Mask3) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let y = Tensor3::from_fn(dims, |_, _, _| normal.sample(&mut rng));
    let mut mask = Mask3::full(dims);
    let u = rand_distr::Uniform::new(0.0, 1.0).unwrap();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                if u.sample(&mut rng) < hidden {
                    mask.set(i, j, k, false);
                }
            }
        }
    }
    (y, mask)
}
