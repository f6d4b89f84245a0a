//! The summarization network.
//!
//! Two GRU local encoders read the code token and SBT sequences. The
//! global encoder embeds every class name in the method's UML subgraph
//! (the class semantic embedding) and refines the enclosing class's
//! vector with stacked multi-relational graph attention layers (the
//! class relational embedding). The decoder is a GRU with a two-level
//! attention mechanism: sequential attention over the encoder states,
//! then multi-modal attention over the four context channels.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Precision, Tape, TensorError, TensorId};
use crate::uml::{Relation, UmlGraph, UmlNode};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Uml(#[from] crate::uml::UmlError),
    #[error("class {0:?} has no name tokens")]
    EmptyClassName(String),
    #[error("{which} sequence is empty")]
    EmptySequence { which: &'static str },
    #[error("token id {id} out of range for {table} table of size {size}")]
    TokenIdOutOfRange {
        table: &'static str,
        id: usize,
        size: usize,
    },
    #[error("precomputed vector for class {name:?} has length {got}, expected {expected}")]
    BadPrecomputedVector {
        name: String,
        expected: usize,
        got: usize,
    },
}

/// Model dimensions and limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub code_vocab_size: usize,
    pub sbt_vocab_size: usize,
    pub summary_vocab_size: usize,
    pub embed_dim: usize,
    pub gru_hidden: usize,
    /// Class semantic embedding width.
    pub class_embed_dim: usize,
    pub gnn_hidden: usize,
    pub gnn_layers: usize,
    pub dropout: f64,
    pub max_code_len: usize,
    pub max_sbt_len: usize,
    pub max_summary_len: usize,
    pub leaky_slope: f64,
    pub subgraph_radius: usize,
    pub precision: Precision,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            code_vocab_size: 10_000,
            sbt_vocab_size: 10_000,
            summary_vocab_size: 10_000,
            embed_dim: 128,
            gru_hidden: 256,
            class_embed_dim: 512,
            gnn_hidden: 256,
            gnn_layers: 2,
            dropout: 0.5,
            max_code_len: 150,
            max_sbt_len: 500,
            max_summary_len: 30,
            leaky_slope: 0.2,
            subgraph_radius: 2,
            precision: Precision::Double,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            self.code_vocab_size,
            self.sbt_vocab_size,
            self.summary_vocab_size,
            self.embed_dim,
            self.gru_hidden,
            self.class_embed_dim,
            self.gnn_hidden,
            self.gnn_layers,
            self.max_code_len,
            self.max_sbt_len,
            self.max_summary_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err("all dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// One named trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered registry of every trainable array. Insertion order is fixed
/// by construction, which keeps optimizer sweeps and checkpoints
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.entries.len();
        self.entries.push(ParamEntry { name, shape, data });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruIdx {
    pub w_r: usize,
    pub w_hr: usize,
    pub w_z: usize,
    pub w_hz: usize,
    pub w_n: usize,
    pub w_hn: usize,
    pub b_r: usize,
    pub b_hr: usize,
    pub b_z: usize,
    pub b_hz: usize,
    pub b_n: usize,
    pub b_hn: usize,
}

/// Per-relation parameters of one graph attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelIdx {
    /// Projection ahead of the neighbor attention score.
    pub attn_proj: usize,
    /// Affine map from the concatenated projections to a scalar logit.
    pub attn_w: usize,
    pub attn_b: usize,
    /// Neighbor transform inside the weighted sum.
    pub neigh: usize,
    /// Alignment of the relation embedding for relation-level attention.
    pub align: usize,
    /// Output transform in the relation-level combination.
    pub out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GnnLayerIdx {
    pub rels: [RelIdx; 4],
    /// Alignment of the general embedding for relation-level attention.
    pub align_g: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderIdx {
    pub embed: usize,
    pub gru: GruIdx,
    pub ctx_code: usize,
    pub ctx_sbt: usize,
    pub ctx_sem: usize,
    pub ctx_rel: usize,
    pub align_code: usize,
    pub align_sbt: usize,
    pub align_sem: usize,
    pub align_rel: usize,
    pub align_state: usize,
    pub out_w: usize,
    pub out_b: usize,
}

/// Indices of every named parameter inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIdx {
    pub code_embed: usize,
    pub code_gru: GruIdx,
    pub sbt_embed: usize,
    pub sbt_gru: GruIdx,
    /// Class-name subtoken embeddings, indexed by code-vocabulary ids.
    pub name_embed: usize,
    pub name_proj: usize,
    pub gnn: Vec<GnnLayerIdx>,
    pub dec: DecoderIdx,
}

/// All trainable arrays plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub set: ParamSet,
    pub idx: ParamIdx,
}

fn rel_tag(r: Relation) -> &'static str {
    match r {
        Relation::Realization => "realization",
        Relation::Generalization => "generalization",
        Relation::Dependency => "dependency",
        Relation::Association => "association",
    }
}

struct Init<'r> {
    rng: &'r mut ChaCha20Rng,
    precision: Precision,
}

impl Init<'_> {
    fn sample(&mut self, bound: f64) -> f64 {
        let v = self.rng.gen_range(-bound..bound);
        match self.precision {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }

    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    fn matrix(&mut self, set: &mut ParamSet, name: String, rows: usize, cols: usize) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| self.sample(bound)).collect();
        set.add(name, vec![rows, cols], data)
    }

    fn vector(&mut self, set: &mut ParamSet, name: String, len: usize, fan_in: usize) -> usize {
        let bound = (6.0 / (fan_in + 1) as f64).sqrt();
        let data: Vec<f64> = (0..len).map(|_| self.sample(bound)).collect();
        set.add(name, vec![len], data)
    }

    fn zeros(&mut self, set: &mut ParamSet, name: String, len: usize) -> usize {
        set.add(name, vec![len], vec![0.0; len])
    }

    fn gru(&mut self, set: &mut ParamSet, prefix: &str, in_dim: usize, hidden: usize) -> GruIdx {
        GruIdx {
            w_r: self.matrix(set, format!("{prefix}.w_r"), hidden, in_dim),
            w_hr: self.matrix(set, format!("{prefix}.w_hr"), hidden, hidden),
            w_z: self.matrix(set, format!("{prefix}.w_z"), hidden, in_dim),
            w_hz: self.matrix(set, format!("{prefix}.w_hz"), hidden, hidden),
            w_n: self.matrix(set, format!("{prefix}.w_n"), hidden, in_dim),
            w_hn: self.matrix(set, format!("{prefix}.w_hn"), hidden, hidden),
            b_r: self.zeros(set, format!("{prefix}.b_r"), hidden),
            b_hr: self.zeros(set, format!("{prefix}.b_hr"), hidden),
            b_z: self.zeros(set, format!("{prefix}.b_z"), hidden),
            b_hz: self.zeros(set, format!("{prefix}.b_hz"), hidden),
            b_n: self.zeros(set, format!("{prefix}.b_n"), hidden),
            b_hn: self.zeros(set, format!("{prefix}.b_hn"), hidden),
        }
    }
}

impl ModelParams {
    /// Initialize all parameters from the config. Weight matrices are
    /// uniform Xavier; biases start at zero.
    pub fn init(cfg: &Config, rng: &mut ChaCha20Rng) -> ModelParams {
        let mut set = ParamSet::default();
        let mut init = Init {
            rng,
            precision: cfg.precision,
        };
        let e = cfg.embed_dim;
        let h = cfg.gru_hidden;
        let dl = cfg.class_embed_dim;
        let dm = cfg.gnn_hidden;

        let code_embed = init.matrix(&mut set, "code_encoder.embed".into(), cfg.code_vocab_size, e);
        let code_gru = init.gru(&mut set, "code_encoder.gru", e, h);
        let sbt_embed = init.matrix(&mut set, "sbt_encoder.embed".into(), cfg.sbt_vocab_size, e);
        let sbt_gru = init.gru(&mut set, "sbt_encoder.gru", e, h);

        let name_embed = init.matrix(&mut set, "class_embed.tokens".into(), cfg.code_vocab_size, e);
        let name_proj = init.matrix(&mut set, "class_embed.project".into(), dl, e);

        let mut gnn = Vec::with_capacity(cfg.gnn_layers);
        for layer in 0..cfg.gnn_layers {
            let in_dim = if layer == 0 { dl } else { dm };
            let mut rels = Vec::with_capacity(4);
            for r in Relation::ALL {
                let p = format!("gnn.layer{layer}.{}", rel_tag(r));
                rels.push(RelIdx {
                    attn_proj: init.matrix(&mut set, format!("{p}.attn_proj"), dm, in_dim),
                    attn_w: init.vector(&mut set, format!("{p}.attn_w"), 2 * dm, 2 * dm),
                    attn_b: init.zeros(&mut set, format!("{p}.attn_b"), 1),
                    neigh: init.matrix(&mut set, format!("{p}.neigh"), dm, in_dim),
                    align: init.matrix(&mut set, format!("{p}.align"), dm, dm),
                    out: init.matrix(&mut set, format!("{p}.out"), dm, dm),
                });
            }
            let align_g = init.matrix(&mut set, format!("gnn.layer{layer}.align_g"), dm, in_dim);
            gnn.push(GnnLayerIdx {
                rels: [rels[0], rels[1], rels[2], rels[3]],
                align_g,
            });
        }

        let dec = DecoderIdx {
            embed: init.matrix(&mut set, "decoder.embed".into(), cfg.summary_vocab_size, e),
            gru: init.gru(&mut set, "decoder.gru", e, h),
            ctx_code: init.matrix(&mut set, "decoder.ctx_code".into(), h, h),
            ctx_sbt: init.matrix(&mut set, "decoder.ctx_sbt".into(), h, h),
            ctx_sem: init.matrix(&mut set, "decoder.ctx_sem".into(), h, dl),
            ctx_rel: init.matrix(&mut set, "decoder.ctx_rel".into(), h, dm),
            align_code: init.matrix(&mut set, "decoder.align_code".into(), h, h),
            align_sbt: init.matrix(&mut set, "decoder.align_sbt".into(), h, h),
            align_sem: init.matrix(&mut set, "decoder.align_sem".into(), h, dl),
            align_rel: init.matrix(&mut set, "decoder.align_rel".into(), h, dm),
            align_state: init.matrix(&mut set, "decoder.align_state".into(), h, h),
            out_w: init.matrix(&mut set, "decoder.out".into(), cfg.summary_vocab_size, 2 * h),
            out_b: init.zeros(&mut set, "decoder.out_bias".into(), cfg.summary_vocab_size),
        };

        ModelParams {
            set,
            idx: ParamIdx {
                code_embed,
                code_gru,
                sbt_embed,
                sbt_gru,
                name_embed,
                name_proj,
                gnn,
                dec,
            },
        }
    }

    /// Expected `(name, shape)` layout for a config, used to validate
    /// checkpoints without keeping the data around.
    pub fn expected_layout(cfg: &Config) -> Vec<(String, Vec<usize>)> {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let params = ModelParams::init(cfg, &mut rng);
        params
            .set
            .entries
            .into_iter()
            .map(|e| (e.name, e.shape))
            .collect()
    }

    /// Put every parameter on a tape as a gradient-tracked leaf.
    pub fn load<'a>(
        &'a self,
        cfg: &'a Config,
        tape: &mut Tape,
    ) -> Result<TapeModel<'a>, TensorError> {
        let ids = self
            .set
            .entries
            .iter()
            .map(|e| tape.leaf(e.data.clone(), e.shape.clone(), true))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TapeModel {
            cfg,
            idx: &self.idx,
            ids,
        })
    }
}

/// A parameter set materialized on a tape.
pub struct TapeModel<'a> {
    pub cfg: &'a Config,
    pub idx: &'a ParamIdx,
    pub ids: Vec<TensorId>,
}

impl TapeModel<'_> {
    /// Rebind prebuilt leaf ids (same order as `ParamSet.entries`).
    pub fn from_ids<'a>(cfg: &'a Config, idx: &'a ParamIdx, ids: Vec<TensorId>) -> TapeModel<'a> {
        TapeModel { cfg, idx, ids }
    }

    fn p(&self, i: usize) -> TensorId {
        self.ids[i]
    }
}

/// Forward-pass mode: evaluation, or training with dropout and a
/// deterministic RNG.
pub enum Mode<'r> {
    Eval,
    Train {
        dropout: f64,
        rng: &'r mut ChaCha20Rng,
    },
}

impl Mode<'_> {
    /// Inverted dropout on a vector; identity in eval mode.
    fn dropout(&mut self, tape: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { dropout, rng } => {
                if *dropout <= 0.0 {
                    return Ok(x);
                }
                let keep = 1.0 - *dropout;
                let mask: Vec<f64> = (0..tape.data(x).len())
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let shape = tape.shape(x).to_vec();
                let mask = tape.constant(mask, shape)?;
                tape.hadamard(x, mask)
            }
        }
    }
}

/// One GRU step: reset and update gates via sigmoid, candidate state via
/// tanh with the reset-gated recurrent term, then the convex mix of the
/// candidate and the previous hidden state.
pub fn gru_cell(
    tape: &mut Tape,
    m: &TapeModel,
    g: &GruIdx,
    x: TensorId,
    h_prev: TensorId,
) -> Result<TensorId, TensorError> {
    let gate = |tape: &mut Tape, w, b, wh, bh| -> Result<TensorId, TensorError> {
        let wx = tape.matvec(m.p(w), x)?;
        let wx = tape.add(wx, m.p(b))?;
        let hh = tape.matvec(m.p(wh), h_prev)?;
        let hh = tape.add(hh, m.p(bh))?;
        tape.add(wx, hh)
    };
    let r_pre = gate(tape, g.w_r, g.b_r, g.w_hr, g.b_hr)?;
    let z_pre = gate(tape, g.w_z, g.b_z, g.w_hz, g.b_hz)?;
    let r = tape.sigmoid(r_pre);
    let z = tape.sigmoid(z_pre);

    let nx = tape.matvec(m.p(g.w_n), x)?;
    let nx = tape.add(nx, m.p(g.b_n))?;
    let nh = tape.matvec(m.p(g.w_hn), h_prev)?;
    let nh = tape.add(nh, m.p(g.b_hn))?;
    let gated = tape.hadamard(r, nh)?;
    let n_pre = tape.add(nx, gated)?;
    let n = tape.tanh(n_pre);

    let keep = tape.affine(z, -1.0, 1.0);
    let a = tape.hadamard(keep, n)?;
    let b = tape.hadamard(z, h_prev)?;
    tape.add(a, b)
}

/// Run a GRU over a token id sequence, returning every hidden state.
pub fn gru_forward(
    tape: &mut Tape,
    m: &TapeModel,
    g: &GruIdx,
    embed: usize,
    token_ids: &[usize],
    h0: Option<TensorId>,
    mode: &mut Mode,
) -> Result<Vec<TensorId>, ModelError> {
    if token_ids.is_empty() {
        return Err(ModelError::EmptySequence { which: "token" });
    }
    let table = m.p(embed);
    let rows = tape.shape(table)[0];
    let hidden = tape.shape(m.p(g.w_hr))[0];
    let mut h = match h0 {
        Some(h) => h,
        None => tape.zeros(vec![hidden]),
    };
    let mut states = Vec::with_capacity(token_ids.len());
    for &id in token_ids {
        if id >= rows {
            return Err(ModelError::TokenIdOutOfRange {
                table: "embedding",
                id,
                size: rows,
            });
        }
        let x = tape.row(table, id)?;
        let x = mode.dropout(tape, x)?;
        h = gru_cell(tape, m, g, x, h)?;
        states.push(h);
    }
    Ok(states)
}

/// Class semantic embedding: the mean of the name's subtoken embeddings
/// projected to the class embedding width. A precomputed vector, when
/// supplied, is used verbatim.
pub fn class_semantic_embed(
    tape: &mut Tape,
    m: &TapeModel,
    name_ids: &[usize],
    precomputed: Option<&[f64]>,
    class_name: &str,
) -> Result<TensorId, ModelError> {
    if let Some(vec) = precomputed {
        if vec.len() != m.cfg.class_embed_dim {
            return Err(ModelError::BadPrecomputedVector {
                name: class_name.to_string(),
                expected: m.cfg.class_embed_dim,
                got: vec.len(),
            });
        }
        return Ok(tape.constant(vec.to_vec(), vec![vec.len()])?);
    }
    if name_ids.is_empty() {
        return Err(ModelError::EmptyClassName(class_name.to_string()));
    }
    let table = m.p(m.idx.name_embed);
    let rows = tape.shape(table)[0];
    let mut sum = None;
    for &id in name_ids {
        if id >= rows {
            return Err(ModelError::TokenIdOutOfRange {
                table: "class name embedding",
                id,
                size: rows,
            });
        }
        let row = tape.row(table, id)?;
        sum = Some(match sum {
            None => row,
            Some(acc) => tape.add(acc, row)?,
        });
    }
    let mean = tape.affine(sum.expect("nonempty"), 1.0 / name_ids.len() as f64, 0.0);
    Ok(tape.matvec(m.p(m.idx.name_proj), mean)?)
}

/// The UML subgraph a method resides in, prepared for encoding: node
/// order, per-node name token ids, per-relation symmetrized adjacency
/// with self-loops, and optional precomputed class vectors.
#[derive(Debug, Clone)]
pub struct GraphContext {
    /// Original node ids, ascending.
    pub node_ids: Vec<u32>,
    pub names: Vec<String>,
    pub name_ids: Vec<Vec<usize>>,
    pub precomputed: Vec<Option<Vec<f64>>>,
    /// Index of the enclosing class in `node_ids`.
    pub class_pos: usize,
    /// Per relation, per node: sorted neighbor positions including self.
    pub adj: [Vec<Vec<usize>>; 4],
}

/// Optional externally supplied class vectors, keyed by class name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassVectors(pub HashMap<String, Vec<f64>>);

impl GraphContext {
    pub fn build(
        graph: &UmlGraph,
        class_node: u32,
        radius: usize,
        name_ids_of: impl Fn(&UmlNode) -> Vec<usize>,
        vectors: Option<&ClassVectors>,
    ) -> Result<GraphContext, ModelError> {
        let sub = graph.subgraph_for_method(class_node, radius)?;
        let mut nodes: Vec<&UmlNode> = sub.nodes.iter().collect();
        nodes.sort_by_key(|n| n.id);
        let pos: HashMap<u32, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();

        let mut adj: [Vec<Vec<usize>>; 4] = std::array::from_fn(|_| vec![Vec::new(); nodes.len()]);
        for edge in &sub.edges {
            let (s, d) = (pos[&edge.src], pos[&edge.dst]);
            let rel = edge.relation.index();
            adj[rel][s].push(d);
            adj[rel][d].push(s);
        }
        for per_node in adj.iter_mut() {
            for (v, list) in per_node.iter_mut().enumerate() {
                list.push(v); // self-loop keeps every attention nonempty
                list.sort_unstable();
                list.dedup();
            }
        }

        let mut name_ids = Vec::with_capacity(nodes.len());
        let mut names = Vec::with_capacity(nodes.len());
        let mut precomputed = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let ids = name_ids_of(n);
            let pre = vectors.and_then(|v| v.0.get(&n.name).cloned());
            if ids.is_empty() && pre.is_none() {
                return Err(ModelError::EmptyClassName(n.name.clone()));
            }
            name_ids.push(ids);
            names.push(n.name.clone());
            precomputed.push(pre);
        }

        Ok(GraphContext {
            node_ids: nodes.iter().map(|n| n.id).collect(),
            names,
            name_ids,
            precomputed,
            class_pos: pos[&class_node],
            adj,
        })
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

/// Attention vectors recorded by one graph layer: per node, the four
/// per-relation neighbor attentions and the relation-level attention.
pub struct GnnLayerTrace {
    pub alphas: Vec<[TensorId; 4]>,
    pub betas: Vec<TensorId>,
}

pub struct GnnLayerOut {
    pub h_general: Vec<TensorId>,
    pub h_relation: Vec<[TensorId; 4]>,
    pub trace: GnnLayerTrace,
}

/// One multi-relational graph attention layer.
///
/// Neighbor attention per relation weights same-relation neighbors into
/// a relation-specific embedding; relation attention then weights the
/// four relation embeddings into the node's updated general embedding.
pub fn mrgnn_layer(
    tape: &mut Tape,
    m: &TapeModel,
    layer: &GnnLayerIdx,
    gctx: &GraphContext,
    h_general: &[TensorId],
    h_relation: &[[TensorId; 4]],
) -> Result<GnnLayerOut, ModelError> {
    let n = gctx.len();
    let slope = m.cfg.leaky_slope;

    // Projections and messages for every node, per relation.
    let mut projections: Vec<Vec<TensorId>> = Vec::with_capacity(4);
    let mut messages: Vec<Vec<TensorId>> = Vec::with_capacity(4);
    for (r, rel) in layer.rels.iter().enumerate() {
        let mut p_r = Vec::with_capacity(n);
        let mut m_r = Vec::with_capacity(n);
        for v in 0..n {
            p_r.push(tape.matvec(m.p(rel.attn_proj), h_relation[v][r])?);
            m_r.push(tape.matvec(m.p(rel.neigh), h_relation[v][r])?);
        }
        projections.push(p_r);
        messages.push(m_r);
    }

    let mut new_relation: Vec<[TensorId; 4]> = Vec::with_capacity(n);
    let mut alphas: Vec<[TensorId; 4]> = Vec::with_capacity(n);
    for v in 0..n {
        let mut rel_states = Vec::with_capacity(4);
        let mut rel_alphas = Vec::with_capacity(4);
        for (r, rel) in layer.rels.iter().enumerate() {
            let neighbors = &gctx.adj[r][v];
            let mut logits = Vec::with_capacity(neighbors.len());
            for &j in neighbors {
                let pair = tape.concat(projections[r][v], projections[r][j], 0)?;
                let score = tape.dot(pair, m.p(rel.attn_w))?;
                let score = tape.add(score, m.p(rel.attn_b))?;
                logits.push(tape.leaky_relu(score, slope));
            }
            let logits_mat = tape.stack_rows(&logits)?;
            let logits_vec = tape.reshape(logits_mat, vec![neighbors.len()])?;
            let alpha = tape.softmax(logits_vec)?;

            let msg_rows: Vec<TensorId> = neighbors.iter().map(|&j| messages[r][j]).collect();
            let msgs = tape.stack_rows(&msg_rows)?;
            let alpha_row = tape.reshape(alpha, vec![1, neighbors.len()])?;
            let mixed = tape.matmul(alpha_row, msgs)?;
            let mixed = tape.reshape(mixed, vec![m.cfg.gnn_hidden])?;
            rel_states.push(tape.leaky_relu(mixed, slope));
            rel_alphas.push(alpha);
        }
        new_relation.push([rel_states[0], rel_states[1], rel_states[2], rel_states[3]]);
        alphas.push([rel_alphas[0], rel_alphas[1], rel_alphas[2], rel_alphas[3]]);
    }

    let mut new_general = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    for v in 0..n {
        let aligned_g = tape.matvec(m.p(layer.align_g), h_general[v])?;
        let mut logits = Vec::with_capacity(4);
        for (r, rel) in layer.rels.iter().enumerate() {
            let aligned_r = tape.matvec(m.p(rel.align), new_relation[v][r])?;
            logits.push(tape.dot(aligned_g, aligned_r)?);
        }
        let logits_mat = tape.stack_rows(&logits)?;
        let logits_vec = tape.reshape(logits_mat, vec![4])?;
        let beta = tape.softmax(logits_vec)?;

        let out_rows: Vec<TensorId> = layer
            .rels
            .iter()
            .enumerate()
            .map(|(r, rel)| tape.matvec(m.p(rel.out), new_relation[v][r]))
            .collect::<Result<_, _>>()?;
        let stacked = tape.stack_rows(&out_rows)?;
        let beta_row = tape.reshape(beta, vec![1, 4])?;
        let mixed = tape.matmul(beta_row, stacked)?;
        let mixed = tape.reshape(mixed, vec![m.cfg.gnn_hidden])?;
        new_general.push(tape.leaky_relu(mixed, slope));
        betas.push(beta);
    }

    Ok(GnnLayerOut {
        h_general: new_general,
        h_relation: new_relation,
        trace: GnnLayerTrace { alphas, betas },
    })
}

/// The four encoder outputs the decoder consumes.
pub struct EncodedContext {
    /// Code encoder hidden states, one per code token.
    pub code_states: Vec<TensorId>,
    /// Code states stacked as a `[T_c, hidden]` matrix.
    pub code_matrix: TensorId,
    pub sbt_states: Vec<TensorId>,
    pub sbt_matrix: TensorId,
    /// Class semantic embedding of the enclosing class.
    pub semantic: TensorId,
    /// Class relational embedding of the enclosing class node.
    pub relational: TensorId,
    /// Decoder initial hidden state (final code encoder state).
    pub decoder_init: TensorId,
    /// Per-node general embeddings after the final graph layer.
    pub node_general: Vec<TensorId>,
    pub gnn_trace: Vec<GnnLayerTrace>,
}

/// Run both local encoders and the global context encoder.
pub fn encode(
    tape: &mut Tape,
    m: &TapeModel,
    code_ids: &[usize],
    sbt_ids: &[usize],
    gctx: &GraphContext,
    mode: &mut Mode,
) -> Result<EncodedContext, ModelError> {
    if code_ids.is_empty() {
        return Err(ModelError::EmptySequence { which: "code" });
    }
    if sbt_ids.is_empty() {
        return Err(ModelError::EmptySequence { which: "sbt" });
    }

    let raw_code = gru_forward(tape, m, &m.idx.code_gru, m.idx.code_embed, code_ids, None, mode)?;
    let mut code_states = Vec::with_capacity(raw_code.len());
    for h in raw_code {
        code_states.push(mode.dropout(tape, h)?);
    }
    let code_matrix = tape.stack_rows(&code_states)?;

    let raw_sbt = gru_forward(tape, m, &m.idx.sbt_gru, m.idx.sbt_embed, sbt_ids, None, mode)?;
    let mut sbt_states = Vec::with_capacity(raw_sbt.len());
    for h in raw_sbt {
        sbt_states.push(mode.dropout(tape, h)?);
    }
    let sbt_matrix = tape.stack_rows(&sbt_states)?;

    // Class semantic embeddings seed both the general and the
    // relation-specific node states of the first graph layer.
    let mut h_general = Vec::with_capacity(gctx.len());
    for v in 0..gctx.len() {
        h_general.push(class_semantic_embed(
            tape,
            m,
            &gctx.name_ids[v],
            gctx.precomputed[v].as_deref(),
            &gctx.names[v],
        )?);
    }
    let semantic = h_general[gctx.class_pos];
    let mut h_relation: Vec<[TensorId; 4]> = h_general.iter().map(|&h| [h, h, h, h]).collect();

    let mut gnn_trace = Vec::with_capacity(m.idx.gnn.len());
    for layer in &m.idx.gnn {
        let out = mrgnn_layer(tape, m, layer, gctx, &h_general, &h_relation)?;
        h_general = out.h_general;
        h_relation = out.h_relation;
        gnn_trace.push(out.trace);
    }

    Ok(EncodedContext {
        decoder_init: *code_states.last().expect("nonempty code"),
        code_states,
        code_matrix,
        sbt_states,
        sbt_matrix,
        semantic,
        relational: h_general[gctx.class_pos],
        node_general: h_general,
        gnn_trace,
    })
}

/// One decoder step's outputs, including the recorded attention vectors.
pub struct DecoderStep {
    /// Probability distribution over the summary vocabulary.
    pub y: TensorId,
    pub hidden: TensorId,
    /// Sequential attention over code states.
    pub gamma: TensorId,
    /// Sequential attention over SBT states.
    pub delta: TensorId,
    /// Multi-modal attention over the four context channels.
    pub lambda: TensorId,
}

/// One step of the two-level attention decoder.
pub fn decoder_step(
    tape: &mut Tape,
    m: &TapeModel,
    prev_token: usize,
    h_prev: TensorId,
    ctx: &EncodedContext,
    mode: &mut Mode,
) -> Result<DecoderStep, ModelError> {
    let dec = &m.idx.dec;
    let table = m.p(dec.embed);
    let rows = tape.shape(table)[0];
    if prev_token >= rows {
        return Err(ModelError::TokenIdOutOfRange {
            table: "summary embedding",
            id: prev_token,
            size: rows,
        });
    }
    let x = tape.row(table, prev_token)?;
    let x = mode.dropout(tape, x)?;
    let hidden = gru_cell(tape, m, &dec.gru, x, h_prev)?;

    // Sequential attention: inner products of encoder states with the
    // decoder state, softmax-normalized over the sequence.
    let attend =
        |tape: &mut Tape, matrix: TensorId| -> Result<(TensorId, TensorId), TensorError> {
            let t_len = tape.shape(matrix)[0];
            let h_col = tape.reshape(hidden, vec![m.cfg.gru_hidden, 1])?;
            let scores = tape.matmul(matrix, h_col)?;
            let scores = tape.reshape(scores, vec![t_len])?;
            let weights = tape.softmax(scores)?;
            let w_row = tape.reshape(weights, vec![1, t_len])?;
            let ctx_vec = tape.matmul(w_row, matrix)?;
            let ctx_vec = tape.reshape(ctx_vec, vec![m.cfg.gru_hidden])?;
            Ok((weights, ctx_vec))
        };
    let (gamma, code_ctx) = attend(tape, ctx.code_matrix)?;
    let (delta, sbt_ctx) = attend(tape, ctx.sbt_matrix)?;

    // Multi-modal attention over code context, SBT context, class
    // semantic embedding, and class relational embedding.
    let aligned_state = tape.matvec(m.p(dec.align_state), hidden)?;
    let channel = |tape: &mut Tape, align: usize, v: TensorId| -> Result<TensorId, TensorError> {
        let aligned = tape.matvec(m.p(align), v)?;
        tape.dot(aligned, aligned_state)
    };
    let logits = [
        channel(tape, dec.align_code, code_ctx)?,
        channel(tape, dec.align_sbt, sbt_ctx)?,
        channel(tape, dec.align_sem, ctx.semantic)?,
        channel(tape, dec.align_rel, ctx.relational)?,
    ];
    let logit_mat = tape.stack_rows(&logits)?;
    let logit_vec = tape.reshape(logit_mat, vec![4])?;
    let lambda = tape.softmax(logit_vec)?;

    let channels = [
        (dec.ctx_code, code_ctx),
        (dec.ctx_sbt, sbt_ctx),
        (dec.ctx_sem, ctx.semantic),
        (dec.ctx_rel, ctx.relational),
    ];
    let mut combined = None;
    for (i, (proj, v)) in channels.into_iter().enumerate() {
        let projected = tape.matvec(m.p(proj), v)?;
        let weight = tape.pick(lambda, i)?;
        let term = tape.scale_by(projected, weight)?;
        combined = Some(match combined {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let q = tape.sigmoid(combined.expect("four channels"));

    let joined = tape.concat(hidden, q, 0)?;
    let out = tape.matvec(m.p(dec.out_w), joined)?;
    let out = tape.add(out, m.p(dec.out_b))?;
    let y = tape.softmax(out)?;

    Ok(DecoderStep {
        y,
        hidden,
        gamma,
        delta,
        lambda,
    })
}

/// Mean negative log-probability of the target token at each step.
pub fn sequence_loss(
    tape: &mut Tape,
    step_probs: &[TensorId],
    targets: &[usize],
) -> Result<TensorId, ModelError> {
    assert_eq!(step_probs.len(), targets.len(), "step/target length mismatch");
    if targets.is_empty() {
        return Err(ModelError::EmptySequence { which: "target" });
    }
    let mut picks = Vec::with_capacity(targets.len());
    for (&y, &target) in step_probs.iter().zip(targets) {
        picks.push(tape.pick(y, target)?);
    }
    let stacked = tape.stack_rows(&picks)?;
    let flat = tape.reshape(stacked, vec![targets.len()])?;
    let logs = tape.ln_clamped(flat);
    let total = tape.sum(logs);
    Ok(tape.affine(total, -1.0 / targets.len() as f64, 0.0))
}

/// Teacher-forced decode of `targets ++ [eos]` starting from BOS;
/// returns the loss and the per-step outputs. With a forcing ratio
/// below 1 the previous prediction replaces the gold token at random.
pub fn teacher_forced_loss(
    tape: &mut Tape,
    m: &TapeModel,
    ctx: &EncodedContext,
    targets: &[usize],
    bos: usize,
    eos: usize,
    forcing_ratio: f64,
    mode: &mut Mode,
) -> Result<(TensorId, Vec<DecoderStep>), ModelError> {
    let mut expected: Vec<usize> = targets.to_vec();
    expected.push(eos);

    let mut prev = bos;
    let mut hidden = ctx.decoder_init;
    let mut steps = Vec::with_capacity(expected.len());
    let mut probs = Vec::with_capacity(expected.len());
    for &gold in &expected {
        let step = decoder_step(tape, m, prev, hidden, ctx, mode)?;
        hidden = step.hidden;
        probs.push(step.y);
        let force = if forcing_ratio >= 1.0 {
            true
        } else {
            match mode {
                Mode::Train { rng, .. } => rng.gen::<f64>() < forcing_ratio,
                Mode::Eval => true,
            }
        };
        prev = if force { gold } else { argmax(tape.data(step.y)) };
        steps.push(step);
    }
    let loss = sequence_loss(tape, &probs, &expected)?;
    Ok((loss, steps))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
