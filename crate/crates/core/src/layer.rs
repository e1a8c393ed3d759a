//! One EQGAT convolution block and its building blocks.
//!
//! Node features are a pair `(s, v)`: `s` is `[N, F_s]` and rotation
//! invariant, `v` is `[N, 3, F_v]` with the spatial axis in the middle so that
//! every column `v[n, :, c]` is one 3-vector.

use std::sync::Arc;

use eqgat_autodiff::{Tape, Tensor, Var};

use crate::error::{EqgatError, Result};
use crate::geometry::{EdgeFeatures, NeighborGraph};
use crate::nn::{Linear, Mlp, VectorLinear};
use crate::params::{Bound, Init, ParamId};

/// Epsilon inside every vector norm.
pub const SAFE_NORM_EPS: f64 = 1e-8;
/// Variance epsilon of the scalar layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Tape handles of a node state.
#[derive(Debug, Clone, Copy)]
pub struct State {
    pub s: Var,
    pub v: Var,
}

/// Per-forward graph data recorded as tape constants.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub num_nodes: usize,
    pub sources: Arc<[usize]>,
    pub targets: Arc<[usize]>,
    /// `[E, 3]`
    pub unit_rel: Var,
    /// `[E, K]`
    pub rbf: Var,
    /// `[E]`
    pub cutoff: Var,
}

impl GraphInputs {
    pub fn record(tape: &mut Tape, graph: &NeighborGraph, features: &EdgeFeatures) -> Self {
        Self {
            num_nodes: graph.num_nodes(),
            sources: graph.sources().clone(),
            targets: graph.targets().clone(),
            unit_rel: tape.constant(graph.unit_rel_tensor()),
            rbf: tape.constant(features.rbf.clone()),
            cutoff: tape.constant(features.cutoff.clone()),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }
}

/// `q = W_q s + b_q`, `k = W_k s + b_k` for every node.
pub fn query_key(tape: &mut Tape, p: &Bound, query: &Linear, key: &Linear, s: Var) -> Result<(Var, Var)> {
    Ok((query.forward(tape, p, s)?, key.forward(tape, p, s)?))
}

/// Edge filter `kappa * (W_e rbf + b_e)`, `[E, F_s]`.
pub fn edge_filter(tape: &mut Tape, p: &Bound, embed: &Linear, graph: &GraphInputs) -> Result<Var> {
    let lin = embed.forward(tape, p, graph.rbf)?;
    let kappa = tape.broadcast(graph.cutoff, 1, embed.out_dim)?;
    Ok(tape.mul(kappa, lin)?)
}

/// Per-channel attention weights and the two vector filters of every edge.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// `[E, F_s]`, summing to one over the edges into each target.
    pub alpha: Var,
    /// `[E, F_v]`
    pub beta: Var,
    /// `[E, F_v]`
    pub gamma: Var,
}

/// `a = W_a (q_i * k_j * e_ji)` split into `[alpha~, beta, gamma]`, with
/// `alpha = sigmoid(alpha~) / sum_j sigmoid(alpha~)` per target and channel.
///
/// `q_i`, `k_j` and `e_ji` are edge-aligned `[E, F_s]` arrays.
#[allow(clippy::too_many_arguments)]
pub fn feature_attention(
    tape: &mut Tape,
    p: &Bound,
    attn: &Linear,
    q_i: Var,
    k_j: Var,
    e_ji: Var,
    targets: &Arc<[usize]>,
    num_nodes: usize,
    fv: usize,
) -> Result<Attention> {
    let fs = attn.in_dim;
    if attn.out_dim != fs + 2 * fv {
        return Err(EqgatError::Shape {
            what: "attention map".into(),
            expected: vec![fs + 2 * fv, fs],
            actual: vec![attn.out_dim, attn.in_dim],
        });
    }
    let qk = tape.mul(q_i, k_j)?;
    let a_tilde = tape.mul(qk, e_ji)?;
    let a = attn.forward(tape, p, a_tilde)?;
    let parts = tape.split(a, 1, &[fs, fv, fv])?;
    let gate = tape.sigmoid(parts[0])?;
    let denom = tape.scatter_add(gate, targets.clone(), num_nodes)?;
    let denom = tape.gather(denom, targets.clone())?;
    Ok(Attention {
        alpha: tape.div(gate, denom)?,
        beta: parts[1],
        gamma: parts[2],
    })
}

/// Node-level value tensors.
#[derive(Debug, Clone, Copy)]
pub struct Values {
    /// `[N, F_s]`
    pub v_s0: Var,
    /// `[N, F_v]`
    pub y_v0: Var,
    /// `[N, F_v]`
    pub y_v1: Var,
    /// `[N, 3, F_v]`
    pub v_v: Var,
}

/// `W_sv s + b_sv` split into `[v_s0, y_v0, y_v1]`, and `v W_vv` over channels.
pub fn value_transform(
    tape: &mut Tape,
    p: &Bound,
    scalar_value: &Linear,
    vector_value: &VectorLinear,
    vector_bias: Option<ParamId>,
    state: State,
) -> Result<Values> {
    let fv = vector_value.out_dim;
    let fs = scalar_value.out_dim - 2 * fv;
    let vs = scalar_value.forward(tape, p, state.s)?;
    let parts = tape.split(vs, 1, &[fs, fv, fv])?;
    let mut v_v = vector_value.forward(tape, p, state.v)?;
    if let Some(b) = vector_bias {
        let n = tape.shape(state.v)[0];
        let rows = tape.broadcast(p[b], 0, 3)?;
        let tiled = tape.broadcast(rows, 0, n)?;
        v_v = tape.add(v_v, tiled)?;
    }
    Ok(Values {
        v_s0: parts[0],
        y_v0: parts[1],
        y_v1: parts[2],
        v_v,
    })
}

/// `y0 = p_e (x) m_v0` and `y1 = (1 (x) m_v1) * (v_j x v_i + v_v,j)`, all `[E, 3, F_v]`.
///
/// `unit_rel` is `[E, 3]`, the messages `[E, F_v]` and the vector inputs are
/// already gathered onto edges.
pub fn equivariant_messages(
    tape: &mut Tape,
    unit_rel: Var,
    m_v0: Var,
    m_v1: Var,
    v_i: Var,
    v_j: Var,
    v_vj: Var,
) -> Result<(Var, Var)> {
    let fv = tape.shape(m_v0).get(1).copied().unwrap_or(0);
    let dirs = tape.broadcast(unit_rel, 2, fv)?;
    let lifted0 = tape.broadcast(m_v0, 1, 3)?;
    let y0 = tape.mul(dirs, lifted0)?;
    let crossed = tape.cross(v_j, v_i, 1)?;
    let a_v = tape.add(crossed, v_vj)?;
    let lifted1 = tape.broadcast(m_v1, 1, 3)?;
    let y1 = tape.mul(lifted1, a_v)?;
    Ok((y0, y1))
}

/// Sums edge messages into their targets: `(sum_j m_s, sum_j (y0 + y1))`.
pub fn aggregate(
    tape: &mut Tape,
    m_s: Var,
    y0: Var,
    y1: Var,
    targets: &Arc<[usize]>,
    num_nodes: usize,
) -> Result<(Var, Var)> {
    let ms = tape.scatter_add(m_s, targets.clone(), num_nodes)?;
    let y = tape.add(y0, y1)?;
    let mv = tape.scatter_add(y, targets.clone(), num_nodes)?;
    Ok((ms, mv))
}

/// `(s + m_s, v + m_v)`.
pub fn residual_update(tape: &mut Tape, state: State, m_s: Var, m_v: Var) -> Result<State> {
    Ok(State {
        s: tape.add(state.s, m_s)?,
        v: tape.add(state.v, m_v)?,
    })
}

/// Scalar layer norm with affine parameters plus division of `v` by the RMS
/// of its column norms.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub fs: usize,
    pub fv: usize,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, fs: usize, fv: usize) -> Result<Self> {
        if fs < 2 {
            return Err(EqgatError::Config(format!(
                "layer norm needs at least 2 scalar channels, got {fs}"
            )));
        }
        Ok(Self {
            scale: init.constant(&format!("{name}.scale"), &[fs], 1.0)?,
            shift: init.constant(&format!("{name}.shift"), &[fs], 0.0)?,
            fs,
            fv,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, state: State) -> Result<State> {
        let n = tape.shape(state.s)[0];
        let (fs, fv) = (self.fs as f64, self.fv as f64);

        let sum = tape.sum(state.s, 1)?;
        let mean = tape.scale(sum, 1.0 / fs)?;
        let mean = tape.broadcast(mean, 1, self.fs)?;
        let centered = tape.sub(state.s, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.sum(sq, 1)?;
        let var = tape.scale(var, 1.0 / fs)?;
        let var = tape.shift(var, LAYER_NORM_EPS)?;
        let std = tape.sqrt(var)?;
        let std = tape.broadcast(std, 1, self.fs)?;
        let normed = tape.div(centered, std)?;
        let gamma = tape.broadcast(p[self.scale], 0, n)?;
        let beta = tape.broadcast(p[self.shift], 0, n)?;
        let s = tape.mul(normed, gamma)?;
        let s = tape.add(s, beta)?;

        let norms = tape.safe_norm(state.v, 1, SAFE_NORM_EPS)?;
        let sq = tape.mul(norms, norms)?;
        let ms = tape.sum(sq, 1)?;
        let ms = tape.scale(ms, 1.0 / fv)?;
        let rms = tape.sqrt(ms)?;
        let rms = tape.broadcast(rms, 1, 3)?;
        let rms = tape.broadcast(rms, 2, self.fv)?;
        let v = tape.div(state.v, rms)?;
        Ok(State { s, v })
    }
}

/// Residual gated update:
/// `U = v W_U`, `V = v W_V`, `[a_ss, a_sv, a_vv] = MLP([s ; |V|])`,
/// `s' = s + a_ss + a_sv * <U, V>`, `v' = v + U * a_vv`.
///
/// `a_sv * <U, V>` has `F_v` channels; it is added to the first `F_v` scalar
/// channels.
#[derive(Debug, Clone)]
pub struct GatedUpdate {
    pub u: VectorLinear,
    pub v: VectorLinear,
    pub mlp: Mlp,
    pub fs: usize,
    pub fv: usize,
}

impl GatedUpdate {
    pub fn new(init: &mut Init, name: &str, fs: usize, fv: usize) -> Result<Self> {
        if fv > fs {
            return Err(EqgatError::Config(format!(
                "the gated update needs F_v <= F_s, got F_v = {fv}, F_s = {fs}"
            )));
        }
        Ok(Self {
            u: VectorLinear::new(init, &format!("{name}.w_u"), fv, fv)?,
            v: VectorLinear::new(init, &format!("{name}.w_v"), fv, fv)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), fs + fv, fs + fv, fs + 2 * fv)?,
            fs,
            fv,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, state: State) -> Result<State> {
        let n = tape.shape(state.s)[0];
        let u = self.u.forward(tape, p, state.v)?;
        let vv = self.v.forward(tape, p, state.v)?;
        let norms = tape.safe_norm(vv, 1, SAFE_NORM_EPS)?;
        let ctx = tape.concat(&[state.s, norms], 1)?;
        let h = self.mlp.forward(tape, p, ctx)?;
        let parts = tape.split(h, 1, &[self.fs, self.fv, self.fv])?;
        let (a_ss, a_sv, a_vv) = (parts[0], parts[1], parts[2]);

        let uv = tape.mul(u, vv)?;
        let inner = tape.sum(uv, 1)?;
        let mut gated = tape.mul(a_sv, inner)?;
        if self.fs > self.fv {
            let pad = tape.constant(Tensor::zeros(&[n, self.fs - self.fv]));
            gated = tape.concat(&[gated, pad], 1)?;
        }
        let s = tape.add(state.s, a_ss)?;
        let s = tape.add(s, gated)?;

        let gate = tape.broadcast(a_vv, 1, 3)?;
        let dv = tape.mul(u, gate)?;
        let v = tape.add(state.v, dv)?;
        Ok(State { s, v })
    }
}

/// Non-residual gated block mapping `(F_s, F_v)` to `(out_s, out_v)`:
/// `[V, W] = v W_mix`, `[s', g] = MLP([s ; |V|])`, `v' = g * W`.
#[derive(Debug, Clone)]
pub struct GatedBlock {
    pub mix: VectorLinear,
    pub mlp: Mlp,
    pub out_s: usize,
    pub out_v: usize,
    /// Apply SiLU to the scalar output.
    pub activate: bool,
}

impl GatedBlock {
    pub fn new(
        init: &mut Init,
        name: &str,
        (in_s, in_v): (usize, usize),
        (out_s, out_v): (usize, usize),
        activate: bool,
    ) -> Result<Self> {
        Ok(Self {
            mix: VectorLinear::new(init, &format!("{name}.w_mix"), in_v, 2 * out_v)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), in_s + out_v, in_s, out_s + out_v)?,
            out_s,
            out_v,
            activate,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, state: State) -> Result<State> {
        let mixed = self.mix.forward(tape, p, state.v)?;
        let halves = tape.split(mixed, 2, &[self.out_v, self.out_v])?;
        let norms = tape.safe_norm(halves[0], 1, SAFE_NORM_EPS)?;
        let ctx = tape.concat(&[state.s, norms], 1)?;
        let h = self.mlp.forward(tape, p, ctx)?;
        let parts = tape.split(h, 1, &[self.out_s, self.out_v])?;
        let s = if self.activate { tape.silu(parts[0])? } else { parts[0] };
        let gate = tape.broadcast(parts[1], 1, 3)?;
        let v = tape.mul(gate, halves[1])?;
        Ok(State { s, v })
    }
}

/// Edge-level quantities of one layer application, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// `[E, F_s]`
    pub edge_filter: Var,
    pub attention: Attention,
    /// `[E, F_s]`
    pub scalar_messages: Var,
    /// `[E, 3, F_v]`
    pub y0: Var,
    /// `[E, 3, F_v]`
    pub y1: Var,
}

/// Layer norm, attention convolution, residual and gated update. The residual
/// connection starts from the normalized state.
#[derive(Debug, Clone)]
pub struct EqgatLayer {
    pub norm: LayerNorm,
    pub edge_embed: Linear,
    pub query: Linear,
    pub key: Linear,
    pub attn: Linear,
    pub scalar_value: Linear,
    pub vector_value: VectorLinear,
    /// Deliberate equivariance fault: a bias on the vector value map.
    pub vector_bias: Option<ParamId>,
    pub update: GatedUpdate,
    pub fs: usize,
    pub fv: usize,
}

impl EqgatLayer {
    pub fn new(init: &mut Init, name: &str, fs: usize, fv: usize, num_rbf: usize, vector_bias: bool) -> Result<Self> {
        let n = |part: &str| format!("{name}.{part}");
        let norm = LayerNorm::new(init, &n("norm"), fs, fv)?;
        let edge_embed = Linear::new(init, &n("edge_embed"), num_rbf, fs, true)?;
        let query = Linear::new(init, &n("query"), fs, fs, true)?;
        let key = Linear::new(init, &n("key"), fs, fs, true)?;
        let attn = Linear::new(init, &n("attn"), fs, fs + 2 * fv, false)?;
        let scalar_value = Linear::new(init, &n("scalar_value"), fs, fs + 2 * fv, true)?;
        let vector_value = VectorLinear::new(init, &n("vector_value"), fv, fv)?;
        let vector_bias = if vector_bias {
            let limit = (3.0 / fv as f64).sqrt();
            Some(init.uniform_param(&n("vector_value.bias"), &[fv], limit)?)
        } else {
            None
        };
        let update = GatedUpdate::new(init, &n("update"), fs, fv)?;
        Ok(Self {
            norm,
            edge_embed,
            query,
            key,
            attn,
            scalar_value,
            vector_value,
            vector_bias,
            update,
            fs,
            fv,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &GraphInputs,
        state: State,
    ) -> Result<(State, LayerTrace)> {
        let n = graph.num_nodes;
        let src = &graph.sources;
        let tgt = &graph.targets;
        let x = self.norm.forward(tape, p, state)?;

        let e = edge_filter(tape, p, &self.edge_embed, graph)?;
        let (q, k) = query_key(tape, p, &self.query, &self.key, x.s)?;
        let q_i = tape.gather(q, tgt.clone())?;
        let k_j = tape.gather(k, src.clone())?;
        let att = feature_attention(tape, p, &self.attn, q_i, k_j, e, tgt, n, self.fv)?;

        let values = value_transform(tape, p, &self.scalar_value, &self.vector_value, self.vector_bias, x)?;
        let v_s0 = tape.gather(values.v_s0, src.clone())?;
        let y_v0 = tape.gather(values.y_v0, src.clone())?;
        let y_v1 = tape.gather(values.y_v1, src.clone())?;
        let v_vj = tape.gather(values.v_v, src.clone())?;

        let m_s = tape.mul(att.alpha, v_s0)?;
        let m_v0 = tape.mul(att.beta, y_v0)?;
        let m_v1 = tape.mul(att.gamma, y_v1)?;

        let v_i = tape.gather(x.v, tgt.clone())?;
        let v_j = tape.gather(x.v, src.clone())?;
        let (y0, y1) = equivariant_messages(tape, graph.unit_rel, m_v0, m_v1, v_i, v_j, v_vj)?;
        let (agg_s, agg_v) = aggregate(tape, m_s, y0, y1, tgt, n)?;

        let mid = residual_update(tape, x, agg_s, agg_v)?;
        let out = self.update.forward(tape, p, mid)?;
        let trace = LayerTrace {
            edge_filter: e,
            attention: att,
            scalar_messages: m_s,
            y0,
            y1,
        };
        Ok((out, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_radius_graph, PointCloud};
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_and_init<T>(build: impl FnOnce(&mut Init) -> T) -> (ParamStore, T) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = build(&mut Init {
            store: &mut store,
            rng: &mut rng,
        });
        (store, out)
    }

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn query_key_examples() {
        let (mut store, (q, k)) = store_and_init(|init| {
            (
                Linear::new(init, "q", 2, 2, true).unwrap(),
                Linear::new(init, "k", 2, 2, true).unwrap(),
            )
        });
        *store.get_mut(q.weight) = tensor(&[2, 2], &[2.0, 0.0, 0.0, 2.0]);
        *store.get_mut(k.weight) = Tensor::eye(2);
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let s = tape.constant(tensor(&[1, 2], &[1.0, -1.0]));
        let (qv, kv) = query_key(&mut tape, &p, &q, &k, s).unwrap();
        assert_eq!(tape.value(qv).data(), &[2.0, -2.0]);
        assert_eq!(tape.value(kv).data(), &[1.0, -1.0]);

        *store.get_mut(q.bias.unwrap()) = Tensor::vector(vec![0.25, 0.75]);
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let s = tape.constant(Tensor::zeros(&[1, 2]));
        let (qv, _) = query_key(&mut tape, &p, &q, &k, s).unwrap();
        assert_eq!(tape.value(qv).data(), &[0.25, 0.75]);
    }

    fn attention_with_targets(targets: Vec<usize>, num_nodes: usize, qk: Tensor) -> Tensor {
        let (fs, fv) = (2, 1);
        let (store, attn) = store_and_init(|init| Linear::new(init, "a", fs, fs + 2 * fv, false).unwrap());
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let q = tape.constant(qk.clone());
        let ones = tape.constant(Tensor::full(qk.shape(), 1.0));
        let att = feature_attention(&mut tape, &p, &attn, q, ones, ones, &targets.into(), num_nodes, fv).unwrap();
        tape.value(att.alpha).clone()
    }

    #[test]
    fn attention_examples() {
        let single = attention_with_targets(vec![0], 2, tensor(&[1, 2], &[0.3, -2.0]));
        assert_eq!(single.data(), &[1.0, 1.0]);

        let pair = attention_with_targets(vec![1, 1], 2, tensor(&[2, 2], &[0.3, -2.0, 0.3, -2.0]));
        assert!(pair.data().iter().all(|&a| a == 0.5));

        let triple = attention_with_targets(vec![0, 0, 0], 1, Tensor::zeros(&[3, 2]));
        assert!(triple.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-16));
    }

    #[test]
    fn equivariant_message_examples() {
        let mut tape = Tape::new();
        let unit = tape.constant(tensor(&[1, 3], &[1.0, 0.0, 0.0]));
        let m_v0 = tape.constant(tensor(&[1, 2], &[2.0, 3.0]));
        let zeros2 = tape.constant(Tensor::zeros(&[1, 2]));
        let zeros_v = tape.constant(Tensor::zeros(&[1, 3, 2]));
        let (y0, y1) = equivariant_messages(&mut tape, unit, m_v0, zeros2, zeros_v, zeros_v, zeros_v).unwrap();
        assert_eq!(tape.value(y0).data(), &[2.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(tape.value(y1).max_abs(), 0.0);

        // column e_x for v_j and e_y for v_i, unit gate, no value term
        let v_j = tape.constant(tensor(&[1, 3, 1], &[1.0, 0.0, 0.0]));
        let v_i = tape.constant(tensor(&[1, 3, 1], &[0.0, 1.0, 0.0]));
        let zero_vv = tape.constant(Tensor::zeros(&[1, 3, 1]));
        let one = tape.constant(tensor(&[1, 1], &[1.0]));
        let unit = tape.constant(tensor(&[1, 3], &[0.0, 0.0, 1.0]));
        let (_, y1) = equivariant_messages(&mut tape, unit, one, one, v_i, v_j, zero_vv).unwrap();
        assert_eq!(tape.value(y1).data(), &[0.0, 0.0, 1.0]);

        // annihilation: m_v1 = 0, v_v = 0
        let v_a = tape.constant(tensor(&[1, 3, 1], &[0.3, -1.2, 2.0]));
        let v_b = tape.constant(tensor(&[1, 3, 1], &[1.5, 0.7, -0.4]));
        let zero = tape.constant(Tensor::zeros(&[1, 1]));
        let (_, y1) = equivariant_messages(&mut tape, unit, one, zero, v_a, v_b, zero_vv).unwrap();
        assert_eq!(tape.value(y1).max_abs(), 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let mut tape = Tape::new();
        let empty_s = tape.constant(Tensor::zeros(&[0, 2]));
        let empty_v = tape.constant(Tensor::zeros(&[0, 3, 1]));
        let (ms, mv) = aggregate(&mut tape, empty_s, empty_v, empty_v, &Vec::new().into(), 2).unwrap();
        assert_eq!(tape.shape(ms), &[2, 2]);
        assert_eq!(tape.value(ms).max_abs() + tape.value(mv).max_abs(), 0.0);

        let u = [0.7, -1.9];
        let alpha = tape.constant(Tensor::full(&[2, 2], 0.5));
        let vals = tape.constant(tensor(&[2, 2], &[u[0], u[1], u[0], u[1]]));
        let m_s = tape.mul(alpha, vals).unwrap();
        let y = tape.constant(Tensor::zeros(&[2, 3, 1]));
        let (ms, _) = aggregate(&mut tape, m_s, y, y, &vec![0, 0].into(), 1).unwrap();
        assert_eq!(tape.value(ms).data(), &u);
    }

    #[test]
    fn residual_examples() {
        let mut tape = Tape::new();
        let s = tape.constant(tensor(&[1, 1], &[1.0]));
        let v = tape.constant(Tensor::zeros(&[1, 3, 1]));
        let m_s = tape.constant(tensor(&[1, 1], &[2.0]));
        let out = residual_update(&mut tape, State { s, v }, m_s, v).unwrap();
        assert_eq!(tape.value(out.s).data(), &[3.0]);
    }

    #[test]
    fn gated_update_hand_example() {
        let (mut store, up) = store_and_init(|init| GatedUpdate::new(init, "u", 2, 1).unwrap());
        *store.get_mut(up.u.weight) = Tensor::eye(1);
        *store.get_mut(up.v.weight) = Tensor::eye(1);
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let v = tape.constant(tensor(&[1, 3, 1], &[3.0, 4.0, 0.0]));
        let u = up.u.forward(&mut tape, &p, v).unwrap();
        let vv = up.v.forward(&mut tape, &p, v).unwrap();
        let n = tape.safe_norm(vv, 1, 0.0).unwrap();
        let uv = tape.mul(u, vv).unwrap();
        let inner = tape.sum(uv, 1).unwrap();
        assert_eq!(tape.value(n).data(), &[5.0]);
        assert_eq!(tape.value(inner).data(), &[25.0]);
    }

    #[test]
    fn gated_update_is_identity_for_zero_vectors_and_zero_mlp() {
        let (mut store, up) = store_and_init(|init| GatedUpdate::new(init, "u", 3, 2).unwrap());
        for id in [up.mlp.output.weight, up.mlp.output.bias.unwrap()] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let s0 = tensor(&[2, 3], &[0.1, -0.4, 2.0, 1.0, 0.0, -3.0]);
        let s = tape.constant(s0.clone());
        let v = tape.constant(Tensor::zeros(&[2, 3, 2]));
        let out = up.forward(&mut tape, &p, State { s, v }).unwrap();
        assert_eq!(tape.value(out.s), &s0);
        assert_eq!(tape.value(out.v).max_abs(), 0.0);
    }

    #[test]
    fn gated_update_rejects_wide_vectors() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(GatedUpdate::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng
            },
            "u",
            2,
            3
        )
        .is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let (mut store, ln) = store_and_init(|init| LayerNorm::new(init, "ln", 3, 2).unwrap());
        *store.get_mut(ln.shift) = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let s = tape.constant(Tensor::full(&[1, 3], 4.2));
        let v = tape.constant(Tensor::zeros(&[1, 3, 2]));
        let out = ln.forward(&mut tape, &p, State { s, v }).unwrap();
        assert_eq!(tape.value(out.s).data(), &[0.5, -1.0, 2.0]);
        assert_eq!(tape.value(out.v).max_abs(), 0.0);
        assert!(tape.value(out.v).all_finite());

        // columns (3,4,0) and (0,0,0): norms 5 and ~0, RMS 5 / sqrt(2)
        let v = tape.constant(tensor(&[1, 3, 2], &[3.0, 0.0, 4.0, 0.0, 0.0, 0.0]));
        let out = ln.forward(&mut tape, &p, State { s, v }).unwrap();
        let scale = 2f64.sqrt() / 5.0;
        let expected = [3.0 * scale, 0.0, 4.0 * scale, 0.0, 0.0, 0.0];
        for (a, b) in tape.value(out.v).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LayerNorm::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng
            },
            "ln",
            1,
            2
        )
        .is_err());
    }

    #[test]
    fn value_transform_examples() {
        let (mut store, (sv, vv)) = store_and_init(|init| {
            (
                Linear::new(init, "sv", 2, 4, true).unwrap(),
                VectorLinear::new(init, "vv", 1, 1).unwrap(),
            )
        });
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let s = tape.constant(tensor(&[1, 2], &[1.0, 2.0]));
        let v = tape.constant(Tensor::zeros(&[1, 3, 1]));
        let out = value_transform(&mut tape, &p, &sv, &vv, None, State { s, v }).unwrap();
        assert_eq!(tape.value(out.v_v).max_abs(), 0.0);
        assert_eq!(tape.shape(out.v_s0), &[1, 2]);
        assert_eq!(tape.shape(out.y_v0), &[1, 1]);

        *store.get_mut(vv.weight) = Tensor::eye(1);
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let s = tape.constant(tensor(&[1, 2], &[1.0, 2.0]));
        let v0 = tensor(&[1, 3, 1], &[0.5, -0.5, 2.0]);
        let v = tape.constant(v0.clone());
        let out = value_transform(&mut tape, &p, &sv, &vv, None, State { s, v }).unwrap();
        assert_eq!(tape.value(out.v_v), &v0);
    }

    #[test]
    fn isolated_atom_layer_runs() {
        let (store, layer) = store_and_init(|init| EqgatLayer::new(init, "l", 4, 2, 3, false).unwrap());
        let cloud = PointCloud::new(vec![6], vec![[0.0; 3]]).unwrap();
        let graph = build_radius_graph(&cloud, 5.0).unwrap();
        let feats = EdgeFeatures::compute(&graph, 3, 5.0).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let g = GraphInputs::record(&mut tape, &graph, &feats);
        let s = tape.constant(tensor(&[1, 4], &[0.1, 0.2, -0.3, 0.4]));
        let v = tape.constant(Tensor::zeros(&[1, 3, 2]));
        let (out, _) = layer.forward(&mut tape, &p, &g, State { s, v }).unwrap();
        assert!(tape.value(out.s).all_finite());
        assert_eq!(tape.value(out.v).max_abs(), 0.0);
    }
}
