//! Encoder stack and task readouts.

use std::sync::Arc;

use eqgat_autodiff::{Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EqgatError, Result};
use crate::geometry::{build_radius_graph, EdgeFeatures, NeighborGraph, PointCloud};
use crate::layer::{EqgatLayer, GatedBlock, GraphInputs, LayerTrace, State};
use crate::nn::Mlp;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::testkit::NodeState;

/// Largest allowed `|centroid|` for [`lba_readout`] inputs.
pub const CENTERING_TOLERANCE: f64 = 1e-8;

/// QM9 heavy atoms plus hydrogen.
pub const QM9_VOCABULARY: [u32; 5] = [1, 6, 7, 8, 9];
/// Elements common in proteins, nucleic acids and drug-like ligands.
pub const BIOMOLECULE_VOCABULARY: [u32; 10] = [1, 6, 7, 8, 9, 15, 16, 17, 35, 53];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Sum of node scalars, then `Linear -> SiLU -> Linear`.
    SumPoolScalar,
    /// One gated block, mean of node scalars, then a half-width MLP.
    MeanPoolScalar,
    /// Two gated blocks emitting one scalar and one vector per node;
    /// `y = sum_i |s_i p_i + v_i|^2` on centered positions.
    LbaGeometric,
}

/// Architectural hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub scalar_channels: usize,
    pub vector_channels: usize,
    pub num_rbf: usize,
    /// Å
    pub cutoff: f64,
    pub vocabulary: Vec<u32>,
    pub head: HeadKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::qm9()
    }
}

impl EncoderConfig {
    pub fn qm9() -> Self {
        Self {
            num_layers: 7,
            scalar_channels: 128,
            vector_channels: 32,
            num_rbf: 20,
            cutoff: 5.0,
            vocabulary: QM9_VOCABULARY.to_vec(),
            head: HeadKind::SumPoolScalar,
        }
    }

    /// Two narrow layers, small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            scalar_channels: 8,
            vector_channels: 4,
            num_rbf: 6,
            cutoff: 5.0,
            vocabulary: QM9_VOCABULARY.to_vec(),
            head: HeadKind::SumPoolScalar,
        }
    }

    /// Shared encoder of the LBA, PSR and RSR tasks.
    pub fn atom3d(head: HeadKind) -> Self {
        Self {
            num_layers: 5,
            scalar_channels: 128,
            vector_channels: 16,
            num_rbf: 16,
            cutoff: 4.5,
            vocabulary: BIOMOLECULE_VOCABULARY.to_vec(),
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("scalar_channels", self.scalar_channels),
            ("vector_channels", self.vector_channels),
            ("num_rbf", self.num_rbf),
        ];
        for (key, value) in positive {
            if value == 0 {
                return Err(EqgatError::Config(format!("model.{key} must be at least 1")));
            }
        }
        if self.scalar_channels < 2 {
            return Err(EqgatError::Config("model.scalar_channels must be at least 2".into()));
        }
        if self.vector_channels > self.scalar_channels {
            return Err(EqgatError::Config(
                "model.vector_channels must not exceed model.scalar_channels".into(),
            ));
        }
        if !(self.cutoff > 0.0) || !self.cutoff.is_finite() {
            return Err(EqgatError::Config("model.cutoff must be positive".into()));
        }
        if self.vocabulary.is_empty() {
            return Err(EqgatError::Config("model.vocabulary must not be empty".into()));
        }
        let mut sorted = self.vocabulary.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.vocabulary.len() || sorted.contains(&0) {
            return Err(EqgatError::Config(
                "model.vocabulary must list distinct atomic numbers >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Row of the embedding table for atomic number `z`.
    pub fn vocabulary_index(&self, z: u32) -> Result<usize> {
        self.vocabulary
            .iter()
            .position(|&w| w == z)
            .ok_or_else(|| EqgatError::UnknownAtom {
                z,
                vocabulary: self.vocabulary.clone(),
            })
    }
}

#[derive(Debug, Clone)]
enum Head {
    SumPool(Mlp),
    MeanPool(GatedBlock, Mlp),
    Lba(GatedBlock, GatedBlock),
}

/// A cloud with its graph and distance features, ready for repeated forwards.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cloud: PointCloud,
    pub graph: NeighborGraph,
    pub features: EdgeFeatures,
    pub atom_rows: Arc<[usize]>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Output {
    pub state: State,
    /// Scalar prediction, shape `[]`.
    pub prediction: Var,
    pub traces: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: EncoderConfig,
    params: ParamStore,
    embedding: ParamId,
    layers: Vec<EqgatLayer>,
    head: Head,
}

impl Model {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    /// A model whose vector value maps carry a bias, which breaks rotation
    /// equivariance. Used as a negative control for the test harness.
    pub fn with_vector_bias_fault(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    fn build(config: EncoderConfig, seed: u64, vector_bias: bool) -> Result<Self> {
        config.validate()?;
        let (fs, fv) = (config.scalar_channels, config.vector_channels);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let embedding = init.uniform_param("embedding", &[config.vocabulary.len(), fs], 3f64.sqrt())?;
        let layers = (0..config.num_layers)
            .map(|l| EqgatLayer::new(&mut init, &format!("layers.{l}"), fs, fv, config.num_rbf, vector_bias))
            .collect::<Result<Vec<_>>>()?;
        let (hs, hv) = ((fs / 2).max(1), (fv / 2).max(1));
        let head = match config.head {
            HeadKind::SumPoolScalar => Head::SumPool(Mlp::new(&mut init, "head.mlp", fs, fs, 1)?),
            HeadKind::MeanPoolScalar => Head::MeanPool(
                GatedBlock::new(&mut init, "head.gated", (fs, fv), (fs, fv), true)?,
                Mlp::new(&mut init, "head.mlp", fs, hs, 1)?,
            ),
            HeadKind::LbaGeometric => Head::Lba(
                GatedBlock::new(&mut init, "head.gated.0", (fs, fv), (hs, hv), true)?,
                GatedBlock::new(&mut init, "head.gated.1", (hs, hv), (1, 1), false)?,
            ),
        };
        Ok(Self {
            config,
            params,
            embedding,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter counts grouped by component, with layer indices folded into `*`.
    pub fn parameter_breakdown(&self) -> IndexMap<String, usize> {
        let mut out = IndexMap::new();
        for (name, t) in self.params.iter() {
            let mut parts: Vec<&str> = name.split('.').collect();
            if parts.first() == Some(&"layers") && parts.len() > 1 {
                parts[1] = "*";
            }
            if matches!(parts.last(), Some(&"weight") | Some(&"bias")) {
                parts.pop();
            }
            if parts.len() >= 2 && parts[parts.len() - 2] == "mlp" {
                parts.pop();
            }
            *out.entry(parts.join(".")).or_default() += t.numel();
        }
        out
    }

    /// Validates atom types and builds the graph and edge features.
    pub fn prepare(&self, cloud: &PointCloud) -> Result<Prepared> {
        let atom_rows = cloud
            .atomic_numbers()
            .iter()
            .map(|&z| self.config.vocabulary_index(z))
            .collect::<Result<Vec<_>>>()?;
        let graph = build_radius_graph(cloud, self.config.cutoff)?;
        let features = EdgeFeatures::compute(&graph, self.config.num_rbf, self.config.cutoff)?;
        Ok(Prepared {
            cloud: cloud.clone(),
            graph,
            features,
            atom_rows: atom_rows.into(),
        })
    }

    /// Embedding rows for the atoms of `prepared`, `[N, F_s]`.
    pub fn atom_embed(&self, tape: &mut Tape, p: &Bound, prepared: &Prepared) -> Result<Var> {
        Ok(tape.gather(p[self.embedding], prepared.atom_rows.clone())?)
    }

    /// Runs the encoder only.
    pub fn encode_on(&self, tape: &mut Tape, p: &Bound, prepared: &Prepared) -> Result<(State, Vec<LayerTrace>)> {
        let n = prepared.cloud.len();
        let graph = GraphInputs::record(tape, &prepared.graph, &prepared.features);
        let s = self.atom_embed(tape, p, prepared)?;
        let v = tape.constant(Tensor::zeros(&[n, 3, self.config.vector_channels]));
        let mut state = State { s, v };
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, trace) = layer.forward(tape, p, &graph, state)?;
            state = next;
            traces.push(trace);
        }
        Ok((state, traces))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, prepared: &Prepared) -> Result<Output> {
        let (state, traces) = self.encode_on(tape, p, prepared)?;
        let n = prepared.cloud.len();
        let prediction = match &self.head {
            Head::SumPool(mlp) => sum_pool_readout(tape, p, mlp, state.s)?,
            Head::MeanPool(block, mlp) => {
                let pooled = block.forward(tape, p, state)?;
                let sum = tape.sum(pooled.s, 0)?;
                let mean = tape.scale(sum, 1.0 / n as f64)?;
                scalar_mlp(tape, p, mlp, mean)?
            }
            Head::Lba(first, second) => {
                let hidden = first.forward(tape, p, state)?;
                let out = second.forward(tape, p, hidden)?;
                let centered = prepared.cloud.centered().positions_tensor();
                lba_readout(tape, out.s, out.v, &centered)?
            }
        };
        Ok(Output {
            state,
            prediction,
            traces,
        })
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<f64> {
        let prepared = self.prepare(cloud)?;
        self.predict_prepared(&prepared)
    }

    pub fn predict_prepared(&self, prepared: &Prepared) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let out = self.forward(&mut tape, &p, prepared)?;
        let y = tape.value(out.prediction).item().expect("scalar prediction");
        if !y.is_finite() {
            return Err(EqgatError::Dataset("model produced a non-finite prediction".into()));
        }
        Ok(y)
    }

    /// Final node state and prediction from a single forward pass.
    pub fn encode_and_predict(&self, cloud: &PointCloud) -> Result<(NodeState, f64)> {
        let prepared = self.prepare(cloud)?;
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let out = self.forward(&mut tape, &p, &prepared)?;
        let state = NodeState {
            s: tape.value(out.state.s).clone(),
            v: tape.value(out.state.v).clone(),
        };
        Ok((state, tape.value(out.prediction).item().expect("scalar prediction")))
    }

    /// Final node state as concrete tensors.
    pub fn encode(&self, cloud: &PointCloud) -> Result<NodeState> {
        let prepared = self.prepare(cloud)?;
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let (state, _) = self.encode_on(&mut tape, &p, &prepared)?;
        Ok(NodeState {
            s: tape.value(state.s).clone(),
            v: tape.value(state.v).clone(),
        })
    }
}

fn scalar_mlp(tape: &mut Tape, p: &Bound, mlp: &Mlp, pooled: Var) -> Result<Var> {
    let width = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, vec![1, width])?;
    let y = mlp.forward(tape, p, row)?;
    Ok(tape.reshape(y, vec![])?)
}

/// `MLP(sum_i s_i)`.
pub fn sum_pool_readout(tape: &mut Tape, p: &Bound, mlp: &Mlp, s: Var) -> Result<Var> {
    let pooled = tape.sum(s, 0)?;
    scalar_mlp(tape, p, mlp, pooled)
}

/// `sum_i |s_i p_i + v_i|^2` for `s: [N, 1]`, `v: [N, 3, 1]` and centered
/// positions `[N, 3]`.
pub fn lba_readout(tape: &mut Tape, s: Var, v: Var, positions: &Tensor) -> Result<Var> {
    let n = positions.shape()[0];
    let mut centroid = [0.0; 3];
    for row in positions.data().chunks(3) {
        for k in 0..3 {
            centroid[k] += row[k] / n as f64;
        }
    }
    let offset = centroid.iter().map(|c| c * c).sum::<f64>().sqrt();
    if offset > CENTERING_TOLERANCE {
        return Err(EqgatError::NotCentered(offset));
    }
    let s = tape.reshape(s, vec![n])?;
    let s = tape.broadcast(s, 1, 3)?;
    let v = tape.reshape(v, vec![n, 3])?;
    let pos = tape.constant(positions.clone());
    let sp = tape.mul(s, pos)?;
    let w = tape.add(sp, v)?;
    let sq = tape.mul(w, w)?;
    Ok(tape.sum_all(sq)?)
}
