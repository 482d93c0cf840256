#![allow(dead_code)]

pub mod oracles;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_shape<R: Rng>(rng: &mut R, n: usize, centre: [f32; 3], std: f32) -> Vec<[f32; 3]> {
    (0..n)
        .map(|_| {
            let mut p = centre;
            for c in &mut p {
                let z: f32 = StandardNormal.sample(rng);
                *c += std * z;
            }
            p
        })
        .collect()
}
