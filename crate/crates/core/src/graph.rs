//! Workload representation: operator graphs with FLOP and byte accounting, a
//! synthetic decoder-only transformer generator, and workload feature
//! extraction for the RL state.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Conv,
    Attention,
    Elementwise,
    Softmax,
    Norm,
    Embed,
    Other,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::MatMul,
        OpKind::Conv,
        OpKind::Attention,
        OpKind::Elementwise,
        OpKind::Softmax,
        OpKind::Norm,
        OpKind::Embed,
        OpKind::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "MatMul",
            OpKind::Conv => "Conv",
            OpKind::Attention => "Attention",
            OpKind::Elementwise => "Elementwise",
            OpKind::Softmax => "Softmax",
            OpKind::Norm => "Norm",
            OpKind::Embed => "Embed",
            OpKind::Other => "Other",
        }
    }

    /// Kinds whose FLOPs run on the vector datapath.
    pub fn is_vectorizable(self) -> bool {
        matches!(self, OpKind::MatMul | OpKind::Conv | OpKind::Elementwise)
    }

    /// Kinds that may be split across several tiles.
    pub fn is_partitionable(self) -> bool {
        matches!(self, OpKind::MatMul | OpKind::Conv)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown operator kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "FP32")]
    Fp32,
    #[default]
    #[serde(rename = "FP16")]
    Fp16,
    #[serde(rename = "BF16")]
    Bf16,
    #[serde(rename = "FP8")]
    Fp8,
    #[serde(rename = "INT8")]
    Int8,
    Mixed,
}

impl Precision {
    pub const ALL: [Precision; 6] = [
        Precision::Fp32,
        Precision::Fp16,
        Precision::Bf16,
        Precision::Fp8,
        Precision::Int8,
        Precision::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp32 => "FP32",
            Precision::Fp16 => "FP16",
            Precision::Bf16 => "BF16",
            Precision::Fp8 => "FP8",
            Precision::Int8 => "INT8",
            Precision::Mixed => "Mixed",
        }
    }

    /// Storage bytes per element. Mixed precision stores 16-bit values.
    pub fn elem_bytes(self) -> u64 {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp16 | Precision::Bf16 | Precision::Mixed => 2,
            Precision::Fp8 | Precision::Int8 => 1,
        }
    }

    pub fn index(self) -> usize {
        Precision::ALL.iter().position(|p| *p == self).unwrap()
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Precision::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown precision {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorNode {
    pub id: u64,
    pub kind: OpKind,
    pub flops: u64,
    pub weight_bytes: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
    pub precision: Precision,
}

/// Tensor edge `(producer, consumer, bytes)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: u64,
    pub dst: u64,
    pub bytes: u64,
}

/// A validated operator DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorGraph {
    nodes: Vec<OperatorNode>,
    edges: Vec<Edge>,
    p_total: u64,
    w_total: u64,
    index: HashMap<u64, usize>,
}

impl OperatorGraph {
    /// Builds a graph, checking id uniqueness, edge endpoints and acyclicity.
    /// `W_total` is derived from the node weights.
    pub fn new(nodes: Vec<OperatorNode>, edges: Vec<Edge>, p_total: u64) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                return Err(invalid(format!("duplicate node id {}", n.id)));
            }
        }
        for e in &edges {
            for end in [e.src, e.dst] {
                if !index.contains_key(&end) {
                    return Err(invalid(format!(
                        "edge {} -> {} references unknown node {end}",
                        e.src, e.dst
                    )));
                }
            }
        }
        let w_total = nodes.iter().map(|n| n.weight_bytes).sum();
        let g = OperatorGraph {
            nodes,
            edges,
            p_total,
            w_total,
            index,
        };
        g.topo_order()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[OperatorNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Total parameter count `P_total`.
    pub fn p_total(&self) -> u64 {
        self.p_total
    }

    /// Total weight footprint `W_total` in bytes.
    pub fn w_total(&self) -> u64 {
        self.w_total
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    pub fn total_edge_bytes(&self) -> u64 {
        self.edges.iter().map(|e| e.bytes).sum()
    }

    /// Producer node indices for every node index.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            preds[self.index[&e.dst]].push(self.index[&e.src]);
        }
        preds
    }

    /// Node indices in topological order (Kahn, smallest index first).
    /// On a cycle, reports one edge that closes it.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut succ = vec![Vec::new(); n];
        let mut indeg = vec![0usize; n];
        for e in &self.edges {
            let (s, d) = (self.index[&e.src], self.index[&e.dst]);
            succ[s].push(d);
            indeg[d] += 1;
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        if order.len() == n {
            return Ok(order);
        }
        let (s, d) = find_back_edge(&succ, &indeg);
        Err(Error::Cycle {
            src: self.nodes[s].id,
            dst: self.nodes[d].id,
        })
    }

    /// Canonical JSON: object keys sorted, byte counts as exact integers.
    pub fn to_json_string(&self) -> String {
        let nodes: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| {
                json!({
                    "id": n.id,
                    "kind": n.kind.name(),
                    "flops": n.flops,
                    "weight_bytes": n.weight_bytes,
                    "input_bytes": n.input_bytes,
                    "output_bytes": n.output_bytes,
                    "precision": n.precision.name(),
                })
            })
            .collect();
        let edges: Vec<Value> = self
            .edges
            .iter()
            .map(|e| json!([e.src, e.dst, e.bytes]))
            .collect();
        let mut root = Map::new();
        root.insert("edges".into(), Value::Array(edges));
        root.insert(
            "meta".into(),
            json!({ "p_total": self.p_total, "w_total": self.w_total }),
        );
        root.insert("nodes".into(), Value::Array(nodes));
        let mut s = serde_json::to_string_pretty(&Value::Object(root)).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let raw: RawGraph = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        raw.validate()
    }
}

/// Finds an edge `(u, v)` lying on a cycle among the nodes Kahn's pass could
/// not drain (those with remaining in-degree).
fn find_back_edge(succ: &[Vec<usize>], indeg: &[usize]) -> (usize, usize) {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let n = succ.len();
    let mut mark = vec![Mark::White; n];
    for start in (0..n).filter(|&i| indeg[i] > 0) {
        if mark[start] != Mark::White {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        mark[start] = Mark::Grey;
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if *next < succ[u].len() {
                let v = succ[u][*next];
                *next += 1;
                match mark[v] {
                    Mark::Grey => return (u, v),
                    Mark::White => {
                        mark[v] = Mark::Grey;
                        stack.push((v, 0));
                    }
                    Mark::Black => {}
                }
            } else {
                mark[u] = Mark::Black;
                stack.pop();
            }
        }
    }
    unreachable!("Kahn's pass left nodes but no cycle was found")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: i64,
    kind: String,
    flops: i64,
    weight_bytes: i64,
    input_bytes: i64,
    output_bytes: i64,
    precision: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    p_total: i64,
    w_total: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    nodes: Vec<RawNode>,
    edges: Vec<(i64, i64, i64)>,
    meta: RawMeta,
}

fn non_negative(v: i64, field: &str) -> Result<u64> {
    u64::try_from(v).map_err(|_| invalid(format!("{field} must be >= 0, got {v}")))
}

impl RawGraph {
    fn validate(self) -> Result<OperatorGraph> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (i, r) in self.nodes.into_iter().enumerate() {
            let at = |f: &str| format!("nodes[{i}].{f}");
            nodes.push(OperatorNode {
                id: non_negative(r.id, &at("id"))?,
                kind: r.kind.parse().map_err(|_| {
                    invalid(format!("{}: unknown operator kind {:?}", at("kind"), r.kind))
                })?,
                flops: non_negative(r.flops, &at("flops"))?,
                weight_bytes: non_negative(r.weight_bytes, &at("weight_bytes"))?,
                input_bytes: non_negative(r.input_bytes, &at("input_bytes"))?,
                output_bytes: non_negative(r.output_bytes, &at("output_bytes"))?,
                precision: r.precision.parse().map_err(|_| {
                    invalid(format!("{}: unknown precision {:?}", at("precision"), r.precision))
                })?,
            });
        }
        let mut edges = Vec::with_capacity(self.edges.len());
        for (i, (s, d, b)) in self.edges.into_iter().enumerate() {
            edges.push(Edge {
                src: non_negative(s, &format!("edges[{i}][0]"))?,
                dst: non_negative(d, &format!("edges[{i}][1]"))?,
                bytes: non_negative(b, &format!("edges[{i}][2]"))?,
            });
        }
        let p_total = non_negative(self.meta.p_total, "meta.p_total")?;
        let w_total = non_negative(self.meta.w_total, "meta.w_total")?;
        let g = OperatorGraph::new(nodes, edges, p_total)?;
        if g.w_total != w_total {
            return Err(invalid(format!(
                "meta.w_total = {w_total} but node weights sum to {}",
                g.w_total
            )));
        }
        Ok(g)
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<OperatorGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    OperatorGraph::from_json_str(&text, path)
}

pub fn save_graph(g: &OperatorGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, g.to_json_string())?;
    Ok(())
}

/// Shape of a decoder-only transformer with grouped-query attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerSpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub precision: Precision,
    /// MLP intermediate width; `None` means `round(8/3 · hidden)`.
    pub intermediate: Option<usize>,
}

impl TransformerSpec {
    pub fn new(
        layers: usize,
        hidden: usize,
        heads: usize,
        kv_heads: usize,
        vocab: usize,
        seq_len: usize,
        precision: Precision,
    ) -> Self {
        TransformerSpec {
            layers,
            hidden,
            heads,
            kv_heads,
            vocab,
            seq_len,
            precision,
            intermediate: None,
        }
    }

    /// Llama 3.1 8B shape at a 2048-token sequence.
    pub fn llama8b() -> Self {
        TransformerSpec {
            intermediate: Some(14336),
            ..TransformerSpec::new(32, 4096, 32, 8, 128_256, 2048, Precision::Fp16)
        }
    }

    /// Desk-scale stand-in for `llama8b`: same GQA ratio and FFN multiplier
    /// on a 2-layer, 256-wide model.
    pub fn llama8b_toy() -> Self {
        TransformerSpec {
            intermediate: Some(896),
            ..TransformerSpec::new(2, 256, 8, 2, 2048, 64, Precision::Fp16)
        }
    }

    /// The 2-layer, 64-wide graph used by tests and baseline comparisons.
    pub fn toy() -> Self {
        TransformerSpec::new(2, 64, 4, 2, 256, 32, Precision::Fp16)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "llama8b" => Some(Self::llama8b()),
            "llama8b-toy" => Some(Self::llama8b_toy()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "hidden ({}) is not divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(invalid(format!(
                "heads ({}) is not divisible by kv_heads ({})",
                self.heads, self.kv_heads
            )));
        }
        if self.intermediate == Some(0) {
            return Err(invalid("intermediate must be >= 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim()
    }

    pub fn intermediate_size(&self) -> usize {
        self.intermediate
            .unwrap_or_else(|| ((8.0 * self.hidden as f64) / 3.0).round() as usize)
            .max(1)
    }

    /// Closed-form parameter count of the generated topology.
    pub fn param_count(&self) -> u64 {
        let h = self.hidden as u64;
        let kv = self.kv_dim() as u64;
        let inter = self.intermediate_size() as u64;
        let per_layer = 2 * h * h + 2 * h * kv + 3 * h * inter + 2 * h;
        self.layers as u64 * per_layer + 2 * self.vocab as u64 * h + h
    }
}

struct GraphBuilder {
    nodes: Vec<OperatorNode>,
    edges: Vec<Edge>,
    elem: u64,
    precision: Precision,
}

impl GraphBuilder {
    fn op(&mut self, kind: OpKind, flops: u64, params: u64, out_elems: u64, inputs: &[usize]) -> usize {
        let id = self.nodes.len();
        let output_bytes = out_elems * self.elem;
        let mut input_bytes = 0;
        for &src in inputs {
            let bytes = self.nodes[src].output_bytes;
            input_bytes += bytes;
            self.edges.push(Edge {
                src: src as u64,
                dst: id as u64,
                bytes,
            });
        }
        self.nodes.push(OperatorNode {
            id: id as u64,
            kind,
            flops,
            weight_bytes: params * self.elem,
            input_bytes,
            output_bytes,
            precision: self.precision,
        });
        id
    }
}

/// Generates the operator graph of a decoder-only transformer processing
/// `seq_len` tokens.
pub fn gen_transformer(spec: &TransformerSpec) -> Result<OperatorGraph> {
    spec.validate()?;
    let s = spec.seq_len as u64;
    let h = spec.hidden as u64;
    let kv = spec.kv_dim() as u64;
    let inter = spec.intermediate_size() as u64;
    let vocab = spec.vocab as u64;
    let heads = spec.heads as u64;

    let mut b = GraphBuilder {
        nodes: Vec::new(),
        edges: Vec::new(),
        elem: spec.precision.elem_bytes(),
        precision: spec.precision,
    };
    let matmul = |b: &mut GraphBuilder, k_in: u64, n_out: u64, src: &[usize]| {
        b.op(OpKind::MatMul, 2 * s * k_in * n_out, k_in * n_out, s * n_out, src)
    };

    let embed = b.op(OpKind::Embed, s * h, vocab * h, s * h, &[]);
    // token ids enter as int32
    b.nodes[embed].input_bytes = 4 * s;
    let mut x = embed;
    for _ in 0..spec.layers {
        let norm = b.op(OpKind::Norm, 4 * s * h, h, s * h, &[x]);
        let q = matmul(&mut b, h, h, &[norm]);
        let k = matmul(&mut b, h, kv, &[norm]);
        let v = matmul(&mut b, h, kv, &[norm]);
        let attn_flops = 4 * s * s * h + 5 * heads * s * s;
        let attn = b.op(OpKind::Attention, attn_flops, 0, s * h, &[q, k, v]);
        let o = matmul(&mut b, h, h, &[attn]);
        let resid = b.op(OpKind::Elementwise, s * h, 0, s * h, &[x, o]);
        let norm2 = b.op(OpKind::Norm, 4 * s * h, h, s * h, &[resid]);
        let gate = matmul(&mut b, h, inter, &[norm2]);
        let up = matmul(&mut b, h, inter, &[norm2]);
        let act = b.op(OpKind::Elementwise, 4 * s * inter, 0, s * inter, &[gate, up]);
        let down = matmul(&mut b, inter, h, &[act]);
        x = b.op(OpKind::Elementwise, s * h, 0, s * h, &[resid, down]);
    }
    let fnorm = b.op(OpKind::Norm, 4 * s * h, h, s * h, &[x]);
    let head = matmul(&mut b, h, vocab, &[fnorm]);
    b.op(OpKind::Softmax, 5 * s * vocab, 0, s * vocab, &[head]);

    OperatorGraph::new(b.nodes, b.edges, spec.param_count())
}

/// Workload descriptors feeding the state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadFeatures {
    pub instruction_count: u64,
    pub ilp: f64,
    pub memory_intensity: f64,
    pub vector_util: f64,
    pub matmul_ratio: f64,
    /// FP32/FP16/BF16/FP8/INT8/Mixed node fractions.
    pub precision_dist: [f64; 6],
    /// (scalar, vector) node fractions.
    pub scalar_vector_ratio: [f64; 2],
}

/// Bytes/FLOP above which memory intensity saturates at 1.
pub const MEMORY_INTENSITY_CLIP: f64 = 4.0;
/// FLOPs per instruction in the instruction-count proxy.
pub const FLOPS_PER_INSTRUCTION: u64 = 128;

pub fn workload_features(g: &OperatorGraph) -> WorkloadFeatures {
    let n = g.nodes().len();
    let mut precision_dist = [0.0; 6];
    let mut vector_nodes = 0usize;
    for node in g.nodes() {
        precision_dist[node.precision.index()] += 1.0;
        if node.kind.is_vectorizable() {
            vector_nodes += 1;
        }
    }
    let (precision_dist, scalar_vector_ratio) = if n == 0 {
        ([1.0 / 6.0; 6], [0.0, 0.0])
    } else {
        precision_dist.iter_mut().for_each(|p| *p /= n as f64);
        let v = vector_nodes as f64 / n as f64;
        (precision_dist, [1.0 - v, v])
    };

    let total = g.total_flops();
    if total == 0 {
        return WorkloadFeatures {
            instruction_count: 0,
            ilp: 0.0,
            memory_intensity: 0.0,
            vector_util: 0.0,
            matmul_ratio: 0.0,
            precision_dist,
            scalar_vector_ratio,
        };
    }
    let flops_of = |pred: fn(OpKind) -> bool| -> f64 {
        g.nodes()
            .iter()
            .filter(|n| pred(n.kind))
            .map(|n| n.flops as f64)
            .sum::<f64>()
    };
    let matmul_ratio = flops_of(|k| k == OpKind::MatMul) / total as f64;
    let vector_util = flops_of(OpKind::is_vectorizable) / total as f64;
    let bytes: f64 = g
        .nodes()
        .iter()
        .map(|n| (n.input_bytes + n.output_bytes + n.weight_bytes) as f64)
        .sum();
    let memory_intensity =
        (bytes / total as f64).clamp(0.0, MEMORY_INTENSITY_CLIP) / MEMORY_INTENSITY_CLIP;

    WorkloadFeatures {
        instruction_count: total.div_ceil(FLOPS_PER_INSTRUCTION),
        ilp: ilp_estimate(g),
        memory_intensity,
        vector_util,
        matmul_ratio,
        precision_dist,
        scalar_vector_ratio,
    }
}

/// `1 - (nodes on the longest path) / (total nodes)`: zero for a chain,
/// approaching one for a wide graph.
fn ilp_estimate(g: &OperatorGraph) -> f64 {
    let n = g.nodes().len();
    if n == 0 {
        return 0.0;
    }
    let order = g.topo_order().expect("validated graph is acyclic");
    let preds = g.predecessors();
    let mut depth = vec![1usize; n];
    for &i in &order {
        if let Some(d) = preds[i].iter().map(|&p| depth[p]).max() {
            depth[i] = d + 1;
        }
    }
    let longest = depth.into_iter().max().unwrap_or(1);
    1.0 - longest as f64 / n as f64
}

/// `2 · P_total · φ_decode`.
pub fn flops_per_token(g: &OperatorGraph, phi_decode: f64) -> Result<f64> {
    if !(phi_decode > 0.0 && phi_decode <= 1.0) {
        return Err(invalid(format!("phi_decode must lie in (0, 1], got {phi_decode}")));
    }
    Ok(2.0 * g.p_total() as f64 * phi_decode)
}

/// Decode-active FLOP fraction for GQA models.
pub const PHI_DECODE_GQA: f64 = 0.97;

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u64, kind: OpKind, flops: u64) -> OperatorNode {
        OperatorNode {
            id,
            kind,
            flops,
            weight_bytes: 0,
            input_bytes: 0,
            output_bytes: 0,
            precision: Precision::Fp16,
        }
    }

    #[test]
    fn divisibility_is_validated() {
        let mut spec = TransformerSpec::toy();
        spec.hidden = 66;
        assert!(matches!(gen_transformer(&spec), Err(Error::Validation(_))));
        let mut spec = TransformerSpec::toy();
        spec.kv_heads = 3;
        assert!(matches!(gen_transformer(&spec), Err(Error::Validation(_))));
        let mut spec = TransformerSpec::toy();
        spec.layers = 0;
        assert!(gen_transformer(&spec).is_err());
    }

    #[test]
    fn degenerate_transformer_is_valid() {
        let spec = TransformerSpec::new(1, 1, 1, 1, 1, 1, Precision::Fp16);
        let g = gen_transformer(&spec).unwrap();
        assert!(g.w_total() > 0);
        assert_eq!(g.w_total(), 2 * g.p_total());
    }

    #[test]
    fn per_layer_structure() {
        let spec = TransformerSpec::toy();
        let g = gen_transformer(&spec).unwrap();
        let count = |k| g.nodes().iter().filter(|n| n.kind == k).count();
        // 7 MatMuls per layer plus the unembedding
        assert_eq!(count(OpKind::MatMul), 7 * spec.layers + 1);
        assert_eq!(count(OpKind::Attention), spec.layers);
        assert_eq!(count(OpKind::Norm), 2 * spec.layers + 1);
        assert_eq!(count(OpKind::Embed), 1);
    }

    #[test]
    fn matmul_ratio_arithmetic() {
        let g = OperatorGraph::new(vec![node(0, OpKind::MatMul, 1000)], vec![], 0).unwrap();
        assert_eq!(workload_features(&g).matmul_ratio, 1.0);
        let g = OperatorGraph::new(
            vec![node(0, OpKind::MatMul, 300), node(1, OpKind::Elementwise, 100)],
            vec![Edge { src: 0, dst: 1, bytes: 8 }],
            0,
        )
        .unwrap();
        let f = workload_features(&g);
        assert_eq!(f.matmul_ratio, 0.75);
        assert_eq!(f.vector_util, 1.0);
        // chain of two: no parallelism
        assert_eq!(f.ilp, 0.0);
    }

    #[test]
    fn zero_flops_gives_zero_ratios() {
        let g = OperatorGraph::new(vec![node(0, OpKind::Other, 0)], vec![], 0).unwrap();
        let f = workload_features(&g);
        assert_eq!(f.matmul_ratio, 0.0);
        assert_eq!(f.memory_intensity, 0.0);
        assert_eq!(f.vector_util, 0.0);
        assert!((f.precision_dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fp16_only_precision_distribution() {
        let g = gen_transformer(&TransformerSpec::toy()).unwrap();
        let f = workload_features(&g);
        assert_eq!(f.precision_dist, [0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn flops_per_token_formula() {
        let g = OperatorGraph::new(vec![node(0, OpKind::MatMul, 1)], vec![], 100).unwrap();
        assert_eq!(flops_per_token(&g, 1.0).unwrap(), 200.0);
        let g0 = OperatorGraph::new(vec![], vec![], 0).unwrap();
        assert_eq!(flops_per_token(&g0, 0.5).unwrap(), 0.0);
        assert!(flops_per_token(&g, 0.0).is_err());
        assert!(flops_per_token(&g, 1.5).is_err());
    }

    #[test]
    fn cycle_reports_an_edge_on_the_cycle() {
        let err = OperatorGraph::new(
            vec![node(0, OpKind::Other, 1), node(1, OpKind::Other, 1), node(2, OpKind::Other, 1)],
            vec![
                Edge { src: 2, dst: 0, bytes: 1 },
                Edge { src: 0, dst: 1, bytes: 1 },
                Edge { src: 1, dst: 0, bytes: 1 },
            ],
            0,
        )
        .unwrap_err();
        match err {
            Error::Cycle { src, dst } => {
                assert!(matches!((src, dst), (0, 1) | (1, 0)), "{src}->{dst}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_edge_rejected() {
        let err = OperatorGraph::new(
            vec![node(0, OpKind::Other, 1)],
            vec![Edge { src: 0, dst: 7, bytes: 1 }],
            0,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
