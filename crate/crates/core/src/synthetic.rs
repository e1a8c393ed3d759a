//! Small seeded molecule sets with a smooth, rotation-invariant target.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::MoleculeRecord;
use crate::geometry::{pairwise_distance, PointCloud};
use crate::model::QM9_VOCABULARY;
use crate::testkit::random_cloud;

/// Name of the target written by [`synthetic_dataset`].
pub const SYNTHETIC_TARGET: &str = "energy";

/// `sum_{i<j} exp(-d_ij^2 / 4)`, a smooth pair potential.
pub fn smooth_target(cloud: &PointCloud) -> f64 {
    let p = cloud.positions();
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let d = pairwise_distance(&p[i], &p[j]);
            total += (-d * d / 4.0).exp();
        }
    }
    total
}

/// `count` molecules of 5 to 12 atoms with QM9 elements, at least 0.9 Å apart.
pub fn synthetic_dataset(count: usize, seed: u64) -> Vec<MoleculeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(5..=12);
            let side = 1.6 * (n as f64).cbrt() + 1.0;
            let cloud = random_cloud(&mut rng, &QM9_VOCABULARY, n, side, 0.9);
            let mut targets = IndexMap::new();
            targets.insert(SYNTHETIC_TARGET.to_string(), smooth_target(&cloud));
            MoleculeRecord { cloud, targets }
        })
        .collect()
}
