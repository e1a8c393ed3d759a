//! Point clouds, radius graphs and the invariant distance encoding.
//!
//! Edges are directed `source j -> target i` and always sorted by
//! `(target, source)`, which fixes the order of every neighborhood sum.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use eqgat_autodiff::Tensor;

use crate::error::{EqgatError, Result};

pub type Vec3 = [f64; 3];

/// Above this many points [`build_radius_graph`] switches to a cell list.
pub const CELL_LIST_THRESHOLD: usize = 2000;

/// Atomic numbers and Cartesian positions (Å) of one molecule or complex.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    atomic_numbers: Vec<u32>,
    positions: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(atomic_numbers: Vec<u32>, positions: Vec<Vec3>) -> Result<Self> {
        if atomic_numbers.is_empty() {
            return Err(EqgatError::InvalidCloud("a cloud needs at least one atom".into()));
        }
        if atomic_numbers.len() != positions.len() {
            return Err(EqgatError::InvalidCloud(format!(
                "{} atomic numbers but {} positions",
                atomic_numbers.len(),
                positions.len()
            )));
        }
        if let Some(i) = atomic_numbers.iter().position(|&z| z == 0) {
            return Err(EqgatError::InvalidCloud(format!("atom {i} has atomic number 0")));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(EqgatError::InvalidCloud(format!("atom {i} has a non-finite position")));
        }
        Ok(Self {
            atomic_numbers,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn atomic_numbers(&self) -> &[u32] {
        &self.atomic_numbers
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|x| x / n)
    }

    /// Maps every position through `f`, keeping atom types.
    pub fn map_positions(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        Self {
            atomic_numbers: self.atomic_numbers.clone(),
            positions: self.positions.iter().map(f).collect(),
        }
    }

    pub fn translated(&self, offset: Vec3) -> Self {
        self.map_positions(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
    }

    pub fn centered(&self) -> Self {
        let c = self.centroid();
        self.translated([-c[0], -c[1], -c[2]])
    }

    /// Reorders atoms so that new atom `k` is old atom `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            atomic_numbers: order.iter().map(|&i| self.atomic_numbers[i]).collect(),
            positions: order.iter().map(|&i| self.positions[i]).collect(),
        }
    }

    /// Positions as an `[N, 3]` tensor.
    pub fn positions_tensor(&self) -> Tensor {
        let data = self.positions.iter().flatten().copied().collect();
        Tensor::new(vec![self.len(), 3], data).expect("N x 3 positions")
    }
}

/// Euclidean distance `sqrt(|p_i|^2 + |p_j|^2 - 2 p_i . p_j)`, evaluated in
/// the cancellation-free difference form.
pub fn pairwise_distance(p_i: &Vec3, p_j: &Vec3) -> f64 {
    let d = [p_j[0] - p_i[0], p_j[1] - p_i[1], p_j[2] - p_i[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Directed radius graph: edge `j -> i` for every pair with `0 < d_ji < c`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    num_nodes: usize,
    sources: Arc<[usize]>,
    targets: Arc<[usize]>,
    distances: Vec<f64>,
    unit_rel: Vec<Vec3>,
}

impl NeighborGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &Arc<[usize]> {
        &self.sources
    }

    pub fn targets(&self) -> &Arc<[usize]> {
        &self.targets
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    /// `(p_j - p_i) / d_ji` per edge.
    pub fn unit_rel(&self) -> &[Vec3] {
        &self.unit_rel
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sources.iter().copied().zip(self.targets.iter().copied())
    }

    /// Unit relative positions as an `[E, 3]` tensor.
    pub fn unit_rel_tensor(&self) -> Tensor {
        let data = self.unit_rel.iter().flatten().copied().collect();
        Tensor::new(vec![self.num_edges(), 3], data).expect("E x 3 directions")
    }

    /// Number of incoming edges per node.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &t in self.targets.iter() {
            deg[t] += 1;
        }
        deg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborSearch {
    /// Choose by cloud size.
    Auto,
    BruteForce,
    CellList,
}

pub fn build_radius_graph(cloud: &PointCloud, cutoff: f64) -> Result<NeighborGraph> {
    build_radius_graph_with(cloud, cutoff, NeighborSearch::Auto)
}

pub fn build_radius_graph_with(cloud: &PointCloud, cutoff: f64, search: NeighborSearch) -> Result<NeighborGraph> {
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(EqgatError::Config(format!("cutoff must be positive, got {cutoff}")));
    }
    let pos = cloud.positions();
    let mut pairs = match search {
        NeighborSearch::BruteForce => brute_force_pairs(pos, cutoff)?,
        NeighborSearch::CellList => cell_list_pairs(pos, cutoff)?,
        NeighborSearch::Auto if pos.len() > CELL_LIST_THRESHOLD => cell_list_pairs(pos, cutoff)?,
        NeighborSearch::Auto => brute_force_pairs(pos, cutoff)?,
    };
    pairs.sort_unstable_by_key(|&(j, i, _)| (i, j));

    let mut sources = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    let mut distances = Vec::with_capacity(pairs.len());
    let mut unit_rel = Vec::with_capacity(pairs.len());
    for (j, i, d) in pairs {
        let (pi, pj) = (pos[i], pos[j]);
        sources.push(j);
        targets.push(i);
        distances.push(d);
        unit_rel.push([(pj[0] - pi[0]) / d, (pj[1] - pi[1]) / d, (pj[2] - pi[2]) / d]);
    }
    Ok(NeighborGraph {
        num_nodes: pos.len(),
        sources: sources.into(),
        targets: targets.into(),
        distances,
        unit_rel,
    })
}

/// `(source, target, distance)` for both directions of every close pair.
fn brute_force_pairs(pos: &[Vec3], cutoff: f64) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            push_pair(&mut out, pos, i, j, cutoff)?;
        }
    }
    Ok(out)
}

fn cell_list_pairs(pos: &[Vec3], cutoff: f64) -> Result<Vec<(usize, usize, f64)>> {
    let cell_of = |p: &Vec3| p.map(|x| (x / cutoff).floor() as i64);
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in pos.iter().enumerate() {
        cells.entry(cell_of(p)).or_default().push(i);
    }
    let mut out = Vec::new();
    for (i, p) in pos.iter().enumerate() {
        let c = cell_of(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(members) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &j in members.iter().filter(|&&j| j > i) {
                        push_pair(&mut out, pos, i, j, cutoff)?;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn push_pair(out: &mut Vec<(usize, usize, f64)>, pos: &[Vec3], i: usize, j: usize, cutoff: f64) -> Result<()> {
    let d = pairwise_distance(&pos[i], &pos[j]);
    if d == 0.0 {
        return Err(EqgatError::CoincidentPoints { first: i, second: j });
    }
    if d < cutoff {
        out.push((j, i, d));
        out.push((i, j, d));
    }
    Ok(())
}

/// `e_k(d) = sqrt(2/c) sin(k pi d / c) / d` for `k = 1..=K`.
pub fn bessel_rbf(d: f64, num_rbf: usize, cutoff: f64) -> Result<Vec<f64>> {
    if !(d > 0.0) {
        return Err(EqgatError::NonPositiveDistance(d));
    }
    let norm = (2.0 / cutoff).sqrt();
    Ok((1..=num_rbf)
        .map(|k| norm * (k as f64 * PI * d / cutoff).sin() / d)
        .collect())
}

/// `0.5 (cos(pi d / c) + 1)` on `[0, c]`, zero beyond.
///
/// Evaluated as `cos^2(pi d / 2c)`, which keeps full relative precision next
/// to the cutoff where the sum form cancels.
pub fn cosine_cutoff(d: f64, cutoff: f64) -> f64 {
    if d > cutoff {
        0.0
    } else {
        let h = (0.5 * PI * d / cutoff).cos();
        h * h
    }
}

/// `kappa * (W_e rbf + b_e)` for one edge; `W_e` is `[F_s, K]`.
pub fn edge_embedding(rbf: &[f64], kappa: f64, weight: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    let k = rbf.len();
    if weight.ndim() != 2 || weight.shape()[1] != k {
        return Err(EqgatError::Shape {
            what: "edge embedding weight".into(),
            expected: vec![bias.numel(), k],
            actual: weight.shape().to_vec(),
        });
    }
    let fs = weight.shape()[0];
    if bias.shape() != [fs] {
        return Err(EqgatError::Shape {
            what: "edge embedding bias".into(),
            expected: vec![fs],
            actual: bias.shape().to_vec(),
        });
    }
    Ok((0..fs)
        .map(|o| {
            let row = &weight.data()[o * k..][..k];
            let lin: f64 = row.iter().zip(rbf).map(|(w, r)| w * r).sum::<f64>() + bias.data()[o];
            kappa * lin
        })
        .collect())
}

/// Per-edge distance encodings shared by every layer.
#[derive(Debug, Clone)]
pub struct EdgeFeatures {
    /// `[E, K]`
    pub rbf: Tensor,
    /// `[E]`
    pub cutoff: Tensor,
}

impl EdgeFeatures {
    pub fn compute(graph: &NeighborGraph, num_rbf: usize, cutoff: f64) -> Result<Self> {
        let mut rbf = Vec::with_capacity(graph.num_edges() * num_rbf);
        let mut kappa = Vec::with_capacity(graph.num_edges());
        for &d in graph.distances() {
            rbf.extend(bessel_rbf(d, num_rbf, cutoff)?);
            kappa.push(cosine_cutoff(d, cutoff));
        }
        Ok(Self {
            rbf: Tensor::new(vec![graph.num_edges(), num_rbf], rbf)?,
            cutoff: Tensor::vector(kappa),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(positions: Vec<Vec3>) -> PointCloud {
        PointCloud::new(vec![1; positions.len()], positions).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(pairwise_distance(&[0.0, 0.0, 0.0], &[3.0, 4.0, 0.0]), 5.0);
        let p = [0.3, -2.0, 7.1];
        assert_eq!(pairwise_distance(&p, &p), 0.0);
        // Gram form: 3 + 38 - 2 * 10 = 21
        let d = pairwise_distance(&[1.0, 1.0, 1.0], &[2.0, 3.0, 5.0]);
        assert!((d - 21f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn two_points_inside_and_outside_cutoff() {
        let near = build_radius_graph(&cloud(vec![[0.0; 3], [3.0, 0.0, 0.0]]), 5.0).unwrap();
        assert_eq!(near.num_edges(), 2);
        let far = build_radius_graph(&cloud(vec![[0.0; 3], [6.0, 0.0, 0.0]]), 5.0).unwrap();
        assert_eq!(far.num_edges(), 0);
    }

    #[test]
    fn unit_square_keeps_sides_only() {
        let sq = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let g = build_radius_graph(&sq, 1.2).unwrap();
        assert_eq!(g.num_edges(), 8);
        assert!(g.distances().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn edges_sorted_by_target_then_source() {
        let g = build_radius_graph(
            &cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.5, 0.5]]),
            5.0,
        )
        .unwrap();
        let edges: Vec<(usize, usize)> = g.edges().map(|(j, i)| (i, j)).collect();
        let mut sorted = edges.clone();
        sorted.sort();
        assert_eq!(edges, sorted);
        assert!(g.edges().all(|(j, i)| j != i));
    }

    #[test]
    fn unit_rel_points_from_target_to_source() {
        let g = build_radius_graph(&cloud(vec![[0.0; 3], [0.0, 2.0, 0.0]]), 5.0).unwrap();
        // edge 1 -> 0 comes first (target 0)
        assert_eq!(g.edges().next(), Some((1, 0)));
        assert_eq!(g.unit_rel()[0], [0.0, 1.0, 0.0]);
        assert_eq!(g.unit_rel()[1], [0.0, -1.0, 0.0]);
    }

    #[test]
    fn coincident_points_are_rejected() {
        let err = build_radius_graph(&cloud(vec![[1.0; 3], [0.0; 3], [1.0; 3]]), 5.0).unwrap_err();
        assert!(matches!(err, EqgatError::CoincidentPoints { first: 0, second: 2 }));
    }

    #[test]
    fn invalid_cutoff_is_rejected() {
        assert!(build_radius_graph(&cloud(vec![[0.0; 3]]), 0.0).is_err());
        assert!(build_radius_graph(&cloud(vec![[0.0; 3]]), -1.0).is_err());
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![], vec![]).is_err());
        assert!(PointCloud::new(vec![0], vec![[0.0; 3]]).is_err());
        assert!(PointCloud::new(vec![1], vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(PointCloud::new(vec![1, 1], vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn bessel_examples() {
        let at_cutoff = bessel_rbf(5.0, 8, 5.0).unwrap();
        assert!(at_cutoff.iter().all(|v| v.abs() < 1e-12));
        let one = bessel_rbf(2.5, 1, 5.0).unwrap();
        assert!((one[0] - 0.252_982_212_813_470_35).abs() < 1e-15);
        assert!((one[0] - 0.4f64.sqrt() / 2.5).abs() < 1e-15);
        let two = bessel_rbf(2.5, 2, 5.0).unwrap();
        assert!(two[1].abs() < 1e-15);
        assert!(bessel_rbf(0.0, 3, 5.0).is_err());
        assert!(bessel_rbf(-1.0, 3, 5.0).is_err());
    }

    #[test]
    fn cosine_cutoff_examples() {
        assert_eq!(cosine_cutoff(0.0, 5.0), 1.0);
        assert!(cosine_cutoff(5.0, 5.0).abs() < 1e-16);
        assert!((cosine_cutoff(2.5, 5.0) - 0.5).abs() < 1e-15);
        assert_eq!(cosine_cutoff(5.5, 5.0), 0.0);
        let samples: Vec<f64> = (0..=100).map(|k| cosine_cutoff(k as f64 * 0.05, 5.0)).collect();
        assert!(samples.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn edge_embedding_examples() {
        let rbf = bessel_rbf(1.3, 4, 5.0).unwrap();
        let w = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let b = Tensor::vector(vec![0.2, -0.1, 0.4]);
        assert!(edge_embedding(&rbf, 0.0, &w, &b).unwrap().iter().all(|&x| x == 0.0));

        let e = edge_embedding(&rbf, 0.5, &Tensor::zeros(&[3, 4]), &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(e, vec![0.5; 3]);

        assert!(edge_embedding(&rbf, 1.0, &Tensor::zeros(&[3, 5]), &b).is_err());
        assert!(edge_embedding(&rbf, 1.0, &w, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn edge_embedding_vanishes_near_cutoff() {
        let c = 5.0;
        let d = c - 1e-6;
        let kappa = cosine_cutoff(d, c);
        // 0.5 (cos(pi (1 - 2e-7)) + 1) = 9.8696044e-14
        assert!((kappa - 9.869_604_401_089_034e-14).abs() < 1e-20);
        let rbf = bessel_rbf(d, 4, c).unwrap();
        let w = Tensor::new(vec![2, 4], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9, 0.05, -1.3]).unwrap();
        let b = Tensor::vector(vec![0.6, -0.8]);
        let lin = edge_embedding(&rbf, 1.0, &w, &b).unwrap();
        let e = edge_embedding(&rbf, kappa, &w, &b).unwrap();
        let lin_max = lin.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let e_max = e.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(e_max < 1e-5 * lin_max);
        assert!((e_max - kappa * lin_max).abs() <= 1e-15 * kappa * lin_max);
    }
}
