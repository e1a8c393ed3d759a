//! Rotation sampling, group actions and the equivariance property check.

use eqgat_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EqgatError, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::model::Model;

/// A proper rotation `R` (orthogonal, `det R = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation of a quaternion `(w, x, y, z)`; the input is normalized first.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|c| c / n);
        Self {
            m: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
        }
    }

    /// Rotation about a unit `axis` by `angle` radians.
    pub fn about_axis(axis: Vec3, angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Self::from_quaternion([c, s * axis[0], s * axis[1], s * axis[2]])
    }

    /// Uniform sample from SO(3): a normalized isotropic Gaussian 4-vector is a
    /// uniform unit quaternion.
    pub fn sample(rng: &mut impl Rng) -> Self {
        loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            if q.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
                return Self::from_quaternion(q);
            }
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        std::array::from_fn(|a| (0..3).map(|b| self.m[a][b] * p[b]).sum())
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self {
            m: std::array::from_fn(|a| std::array::from_fn(|c| (0..3).map(|b| self.m[a][b] * other.m[b][c]).sum())),
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            m: std::array::from_fn(|a| std::array::from_fn(|b| self.m[b][a])),
        }
    }

    /// `max |R^T R - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let g = self.transpose().compose(self);
        let mut worst: f64 = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((g.m[a][b] - target).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rotates every column `v[n, :, c]` of a `[N, 3, F]` array.
    pub fn apply_to_vectors(&self, v: &Tensor) -> Result<Tensor> {
        if v.ndim() != 3 || v.shape()[1] != 3 {
            return Err(EqgatError::Shape {
                what: "vector features".into(),
                expected: vec![v.shape().first().copied().unwrap_or(0), 3, 0],
                actual: v.shape().to_vec(),
            });
        }
        let f = v.shape()[2];
        let mut out = vec![0.0; v.numel()];
        for (src, dst) in v.data().chunks(3 * f).zip(out.chunks_mut(3 * f)) {
            for a in 0..3 {
                for b in 0..3 {
                    let r = self.m[a][b];
                    for c in 0..f {
                        dst[a * f + c] += r * src[b * f + c];
                    }
                }
            }
        }
        Ok(Tensor::new(v.shape().to_vec(), out)?)
    }
}

/// Types on which SO(3) acts.
pub trait GroupAction: Sized {
    fn act(&self, r: &Rotation) -> Result<Self>;

    /// Largest componentwise difference, erroring when layouts differ.
    fn deviation(&self, other: &Self) -> Result<f64>;
}

impl GroupAction for PointCloud {
    fn act(&self, r: &Rotation) -> Result<Self> {
        Ok(self.map_positions(|p| r.apply(p)))
    }

    fn deviation(&self, other: &Self) -> Result<f64> {
        if self.atomic_numbers() != other.atomic_numbers() {
            return Err(EqgatError::InvalidCloud("the two clouds have different atoms".into()));
        }
        Ok(self
            .positions()
            .iter()
            .zip(other.positions())
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
            .fold(0.0, f64::max))
    }
}

/// Concrete node features: `s` is `[N, F_s]`, `v` is `[N, 3, F_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub s: Tensor,
    pub v: Tensor,
}

impl GroupAction for NodeState {
    fn act(&self, r: &Rotation) -> Result<Self> {
        Ok(Self {
            s: self.s.clone(),
            v: r.apply_to_vectors(&self.v)?,
        })
    }

    fn deviation(&self, other: &Self) -> Result<f64> {
        Ok(self.s.max_abs_diff(&other.s)?.max(self.v.max_abs_diff(&other.v)?))
    }
}

/// Invariant quantities: the group acts trivially.
impl GroupAction for f64 {
    fn act(&self, _: &Rotation) -> Result<Self> {
        Ok(*self)
    }

    fn deviation(&self, other: &Self) -> Result<f64> {
        Ok((self - other).abs())
    }
}

impl<A: GroupAction, B: GroupAction> GroupAction for (A, B) {
    fn act(&self, r: &Rotation) -> Result<Self> {
        Ok((self.0.act(r)?, self.1.act(r)?))
    }

    fn deviation(&self, other: &Self) -> Result<f64> {
        Ok(self.0.deviation(&other.0)?.max(self.1.deviation(&other.1)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares `f(R x)` with `R f(x)` for `trials` rotations drawn from `seed`,
/// cycling through `inputs`.
pub fn equivariance_check<X, Y, F>(
    f: F,
    inputs: &[X],
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivarianceReport>
where
    X: GroupAction,
    Y: GroupAction,
    F: Fn(&X) -> Result<Y>,
{
    if inputs.is_empty() {
        return Err(EqgatError::Config("equivariance check needs at least one input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_deviation: f64 = 0.0;
    for t in 0..trials {
        let r = Rotation::sample(&mut rng);
        let x = &inputs[t % inputs.len()];
        let rotated_first = f(&x.act(&r)?)?;
        let rotated_after = f(x)?.act(&r)?;
        let dev = rotated_first.deviation(&rotated_after)?;
        max_deviation = if dev.is_nan() { f64::NAN } else { max_deviation.max(dev) };
    }
    Ok(EquivarianceReport {
        trials,
        max_deviation,
        tolerance,
        pass: max_deviation < tolerance,
    })
}

/// Cloud of `n` atoms drawn uniformly from a cube of side `side`, with no two
/// atoms closer than `min_distance` Å.
pub fn random_cloud(rng: &mut impl Rng, vocabulary: &[u32], n: usize, side: f64, min_distance: f64) -> PointCloud {
    let mut positions: Vec<Vec3> = Vec::with_capacity(n);
    while positions.len() < n {
        let p: Vec3 = std::array::from_fn(|_| rng.random_range(-0.5 * side..0.5 * side));
        if positions
            .iter()
            .all(|q| crate::geometry::pairwise_distance(&p, q) >= min_distance)
        {
            positions.push(p);
        }
    }
    let z = (0..n)
        .map(|_| vocabulary[rng.random_range(0..vocabulary.len())])
        .collect();
    PointCloud::new(z, positions).expect("sampled cloud is valid")
}

/// Rotation check of a whole model: node states must rotate with the input
/// and the prediction must stay fixed. Trials cycle over up to five random
/// clouds of `atoms` atoms at roughly liquid density.
pub fn model_equivariance(
    model: &Model,
    trials: usize,
    atoms: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivarianceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 6.0 * (atoms as f64 / 20.0).cbrt();
    let vocabulary = &model.config().vocabulary;
    let clouds: Vec<PointCloud> = (0..trials.clamp(1, 5))
        .map(|_| random_cloud(&mut rng, vocabulary, atoms, side, 0.8))
        .collect();
    equivariance_check(
        |c| model.encode_and_predict(c),
        &clouds,
        trials,
        tolerance,
        rng.random(),
    )
}

/// Compact `n`-atom cloud (3 Å cube, atoms at least 0.9 Å apart) from `seed`.
pub fn compact_cloud(seed: u64, vocabulary: &[u32], n: usize) -> PointCloud {
    random_cloud(&mut ChaCha8Rng::seed_from_u64(seed), vocabulary, n, 3.0, 0.9)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_proper_rotations() {
        for seed in 0..200 {
            let r = Rotation::from_seed(seed);
            assert!(r.orthogonality_error() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
        assert_eq!(Rotation::from_seed(9), Rotation::from_seed(9));
        assert_ne!(Rotation::from_seed(9), Rotation::from_seed(10));
    }

    #[test]
    fn identity_and_composition() {
        let cloud = PointCloud::new(vec![1, 6], vec![[0.1, 0.2, 0.3], [-1.0, 2.0, 0.5]]).unwrap();
        assert_eq!(cloud.act(&Rotation::identity()).unwrap(), cloud);

        let (r1, r2) = (Rotation::from_seed(1), Rotation::from_seed(2));
        let stepwise = cloud.act(&r1).unwrap().act(&r2).unwrap();
        let composed = cloud.act(&r2.compose(&r1)).unwrap();
        assert!(stepwise.deviation(&composed).unwrap() < 1e-14);
    }

    #[test]
    fn scalars_are_untouched() {
        let state = NodeState {
            s: Tensor::vector(vec![1.0, -2.0]).reshaped(vec![1, 2]).unwrap(),
            v: Tensor::new(vec![1, 3, 1], vec![1.0, 0.0, 0.0]).unwrap(),
        };
        let moved = state.act(&Rotation::from_seed(4)).unwrap();
        assert_eq!(moved.s, state.s);
        assert_ne!(moved.v, state.v);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = Rotation::about_axis([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let p = r.apply(&[1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15 && p[2].abs() < 1e-15);
    }

    fn vector_state(seed: u64) -> NodeState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        NodeState {
            s: Tensor::zeros(&[2, 1]),
            v: Tensor::new(vec![2, 3, 2], v).unwrap(),
        }
    }

    #[test]
    fn identity_map_has_zero_deviation() {
        let inputs: Vec<NodeState> = (0..3).map(vector_state).collect();
        let report = equivariance_check(|x: &NodeState| Ok(x.clone()), &inputs, 20, 1e-12, 0).unwrap();
        assert_eq!(report.max_deviation, 0.0);
        assert!(report.pass);
    }

    #[test]
    fn cross_product_of_channels_is_equivariant() {
        let cross = |x: &NodeState| -> Result<NodeState> {
            let mut out = Vec::new();
            for node in x.v.data().chunks(6) {
                let a = [node[0], node[2], node[4]];
                let b = [node[1], node[3], node[5]];
                out.extend([
                    a[1] * b[2] - a[2] * b[1],
                    a[2] * b[0] - a[0] * b[2],
                    a[0] * b[1] - a[1] * b[0],
                ]);
            }
            Ok(NodeState {
                s: x.s.clone(),
                v: Tensor::new(vec![x.v.shape()[0], 3, 1], out)?,
            })
        };
        let inputs: Vec<NodeState> = (0..5).map(vector_state).collect();
        let report = equivariance_check(cross, &inputs, 50, 1e-12, 1).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn adding_a_constant_vector_fails() {
        let c = [0.0, 0.0, 1.0];
        let shift = |x: &NodeState| -> Result<NodeState> {
            let mut v = x.v.clone();
            for node in v.data_mut().chunks_mut(6) {
                for a in 0..3 {
                    node[2 * a] += c[a];
                    node[2 * a + 1] += c[a];
                }
            }
            Ok(NodeState { s: x.s.clone(), v })
        };
        // A half turn about x maps e_z to -e_z, so |(R - I) c|_inf = 2.
        let r = Rotation::about_axis([1.0, 0.0, 0.0], std::f64::consts::PI);
        let x = vector_state(3);
        let dev = shift(&x.act(&r).unwrap())
            .unwrap()
            .deviation(&shift(&x).unwrap().act(&r).unwrap())
            .unwrap();
        assert!((dev - 2.0).abs() < 1e-12, "{dev}");

        let report = equivariance_check(shift, &[x], 10, 1e-9, 2).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let bad = |x: &NodeState| -> Result<NodeState> {
            // output layout depends on the input orientation
            let f = if x.v.data()[0] > 0.0 { 1 } else { 2 };
            Ok(NodeState {
                s: x.s.clone(),
                v: Tensor::zeros(&[2, 3, f]),
            })
        };
        let mut x = vector_state(0);
        x.v.data_mut()[0] = 0.5;
        let flip = Rotation::about_axis([0.0, 0.0, 1.0], std::f64::consts::PI);
        assert!(bad(&x.act(&flip).unwrap())
            .unwrap()
            .deviation(&bad(&x).unwrap())
            .is_err());
    }

    #[test]
    fn report_serializes_with_expected_keys() {
        let report = EquivarianceReport {
            trials: 3,
            max_deviation: 1e-13,
            tolerance: 1e-9,
            pass: true,
        };
        let json = serde_json::to_value(&report).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["trials", "max_deviation", "tolerance", "pass"]);
    }
}
