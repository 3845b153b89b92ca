//! Explicit DAG representation of a network.
//!
//! Nodes are feature-map slots, edges are parameterized ops. The
//! executor has no architecture-specific branches: every builder output
//! runs through the same [`forward_on_tape`].
//!
//! Parameter placement follows the aggregation mode. A sum-aggregating
//! node owns a single bias applied after summation and its incoming
//! conv edges are bias-free; a concat-aggregating node owns no bias and
//! each parameterized incoming edge carries its own. Identity edges
//! (skips, pool feeds) never own parameters.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, ConvCfg, ConvTransposeCfg, EdgeGeom, Tape, VarId};
use crate::builders::BuilderConfig;
use crate::rng::StreamRng;
use crate::tensor::{Element, Tensor4};
use crate::{Error, Result};

/// Epsilon inside the batchnorm denominator.
pub const BN_EPS: f64 = 1e-5;
/// Blend factor for batchnorm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// How a node combines its incoming edge outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Concat,
    Sum,
}

/// Per-node pipeline stages applied after aggregation, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PostOp {
    Batchnorm,
    Relu,
    Maxpool { k: usize },
    Upsample,
    /// `(b, c, height, width)` -> `(b, c*height*width, 1, 1)`.
    Flatten { height: usize, width: usize },
    /// `(b, channels*height*width, 1, 1)` -> `(b, channels, height, width)`.
    Unflatten {
        channels: usize,
        height: usize,
        width: usize,
    },
}

/// One feature-map slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub index: usize,
    /// Channel count of the node's final output (after post ops).
    pub channels: usize,
    pub aggregation: Aggregation,
    pub post_ops: Vec<PostOp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Conv,
    TransposeConv,
    /// Parameter-free pass-through (skip connections, pool feeds).
    Identity,
}

/// One parameterized (or identity) connection between two nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: usize,
    pub to: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub kind: EdgeKind,
    /// Channels this edge contributes to its target's aggregation.
    pub out_channels: usize,
}

impl EdgeSpec {
    pub fn conv(from: usize, to: usize, kernel: usize, dilation: usize, out_channels: usize) -> Self {
        EdgeSpec {
            from,
            to,
            kernel,
            dilation,
            kind: EdgeKind::Conv,
            out_channels,
        }
    }

    pub fn transpose(from: usize, to: usize, out_channels: usize) -> Self {
        EdgeSpec {
            from,
            to,
            kernel: 3,
            dilation: 1,
            kind: EdgeKind::TransposeConv,
            out_channels,
        }
    }

    pub fn identity(from: usize, to: usize, channels: usize) -> Self {
        EdgeSpec {
            from,
            to,
            kernel: 1,
            dilation: 1,
            kind: EdgeKind::Identity,
            out_channels: channels,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        !matches!(self.kind, EdgeKind::Identity)
    }
}

/// Builder provenance carried inside every serialized spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchMeta {
    pub config: BuilderConfig,
    /// Node index of the autoencoder latent vector, when one exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_node: Option<usize>,
}

/// A complete network graph plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
    pub c_in: usize,
    pub c_out: usize,
    pub metadata: ArchMeta,
}

/// A single invariant violation found by [`ArchSpec::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TooFewNodes,
    BadNodeIndex { node: usize, expected: usize },
    BadEdgeRef { edge: usize },
    BackEdge { edge: usize, from: usize, to: usize },
    DuplicateEdge { from: usize, to: usize },
    InputHasPostOps,
    InputHasIncoming { edge: usize },
    NoIncoming { node: usize },
    NoOutgoing { node: usize },
    DeadNode { node: usize },
    BadKernel { edge: usize, kernel: usize },
    BadDilation { edge: usize },
    ChannelMismatch { node: usize, detail: String },
    BoundaryChannels { detail: String },
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Violation::TooFewNodes => write!(f, "graph needs at least an input and an output node"),
            Violation::BadNodeIndex { node, expected } => {
                write!(f, "node at position {expected} carries index {node}")
            }
            Violation::BadEdgeRef { edge } => write!(f, "edge {edge} references a missing node"),
            Violation::BackEdge { edge, from, to } => {
                write!(f, "back edge {edge}: {from} -> {to} violates topological order")
            }
            Violation::DuplicateEdge { from, to } => write!(f, "duplicate edge {from} -> {to}"),
            Violation::InputHasPostOps => write!(f, "input node must not carry post ops"),
            Violation::InputHasIncoming { edge } => {
                write!(f, "edge {edge} points into the input node")
            }
            Violation::NoIncoming { node } => write!(f, "dead node {node}: no incoming edge"),
            Violation::NoOutgoing { node } => write!(f, "dead node {node}: no outgoing edge"),
            Violation::DeadNode { node } => {
                write!(f, "dead node {node}: not on any input-to-output path")
            }
            Violation::BadKernel { edge, kernel } => {
                write!(f, "edge {edge}: kernel {kernel} not in {{1, 3}}")
            }
            Violation::BadDilation { edge } => {
                write!(f, "edge {edge}: dilation must be 1 for 1x1 kernels and >= 1 otherwise")
            }
            Violation::ChannelMismatch { node, detail } => {
                write!(f, "node {node}: {detail}")
            }
            Violation::BoundaryChannels { detail } => write!(f, "{detail}"),
        }
    }
}

/// Effective receptive-field span of a dilated kernel: `dilation*(k-1) + 1`.
pub fn kernel_span(k: usize, dilation: usize) -> Result<usize> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::config(format!("kernel size must be odd, got {k}")));
    }
    if dilation == 0 {
        return Err(Error::config("dilation must be >= 1"));
    }
    Ok(dilation * (k - 1) + 1)
}

/// Trainable/non-trainable parameter totals with a per-item breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    /// Batchnorm running statistics.
    pub non_trainable: usize,
    pub breakdown: Vec<(String, usize)>,
}

/// Named parameter tensors (trainable) and running-stat buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element> {
    pub params: BTreeMap<String, Tensor4<T>>,
    pub buffers: BTreeMap<String, Tensor4<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn trainable_values(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

pub fn weight_key(edge: usize) -> String {
    format!("e{edge:04}.w")
}

pub fn edge_bias_key(edge: usize) -> String {
    format!("e{edge:04}.b")
}

pub fn node_bias_key(node: usize) -> String {
    format!("n{node:04}.b")
}

pub fn bn_gamma_key(node: usize) -> String {
    format!("n{node:04}.bn.g")
}

pub fn bn_beta_key(node: usize) -> String {
    format!("n{node:04}.bn.b")
}

pub fn bn_mean_key(node: usize) -> String {
    format!("n{node:04}.bn.rm")
}

pub fn bn_var_key(node: usize) -> String {
    format!("n{node:04}.bn.rv")
}

impl ArchSpec {
    pub fn builder_name(&self) -> &'static str {
        self.metadata.config.builder_name()
    }

    pub fn incoming(&self, node: usize) -> impl Iterator<Item = (usize, &EdgeSpec)> {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.to == node)
    }

    pub fn outgoing(&self, node: usize) -> impl Iterator<Item = (usize, &EdgeSpec)> {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.from == node)
    }

    /// Channel count the node sees right after aggregation, derived by
    /// inverting any flatten/unflatten post ops from the final channels.
    pub fn agg_channels(&self, node: usize) -> Result<usize> {
        let n = &self.nodes[node];
        let mut c = n.channels;
        for op in n.post_ops.iter().rev() {
            match *op {
                PostOp::Flatten { height, width } => {
                    let hw = height * width;
                    if hw == 0 || c % hw != 0 {
                        return Err(Error::config(format!(
                            "node {node}: flatten {height}x{width} incompatible with {c} channels"
                        )));
                    }
                    c /= hw;
                }
                PostOp::Unflatten {
                    channels,
                    height,
                    width,
                } => {
                    if c != channels {
                        return Err(Error::config(format!(
                            "node {node}: unflatten to {channels} channels but node declares {c}"
                        )));
                    }
                    c = channels * height * width;
                }
                _ => {}
            }
        }
        Ok(c)
    }

    /// Channel count at the batchnorm stage of the node's pipeline.
    fn bn_channels(&self, node: usize) -> Result<usize> {
        let mut c = self.agg_channels(node)?;
        for op in &self.nodes[node].post_ops {
            match *op {
                PostOp::Batchnorm => return Ok(c),
                PostOp::Flatten { height, width } => c *= height * width,
                PostOp::Unflatten { channels, .. } => c = channels,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn has_batchnorm(&self, node: usize) -> bool {
        self.nodes[node]
            .post_ops
            .iter()
            .any(|op| matches!(op, PostOp::Batchnorm))
    }

    pub fn any_batchnorm(&self) -> bool {
        (0..self.nodes.len()).any(|n| self.has_batchnorm(n))
    }

    /// Whether the node owns a post-aggregation bias.
    pub fn has_node_bias(&self, node: usize) -> bool {
        node > 0
            && matches!(self.nodes[node].aggregation, Aggregation::Sum)
            && self.incoming(node).any(|(_, e)| e.is_parameterized())
    }

    /// Whether the edge carries its own bias (parameterized edge into a
    /// concat-aggregating node).
    pub fn edge_has_bias(&self, edge: usize) -> bool {
        let e = &self.edges[edge];
        e.is_parameterized() && matches!(self.nodes[e.to].aggregation, Aggregation::Concat)
    }

    /// Checks every structural invariant, returning all violations found.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.nodes.len();
        if n < 2 {
            out.push(Violation::TooFewNodes);
            return out;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.index != i {
                out.push(Violation::BadNodeIndex {
                    node: node.index,
                    expected: i,
                });
            }
        }
        if !self.nodes[0].post_ops.is_empty() {
            out.push(Violation::InputHasPostOps);
        }
        let mut seen = alloc::collections::BTreeSet::new();
        for (i, e) in self.edges.iter().enumerate() {
            if e.from >= n || e.to >= n {
                out.push(Violation::BadEdgeRef { edge: i });
                continue;
            }
            if e.to == 0 {
                out.push(Violation::InputHasIncoming { edge: i });
            }
            if e.from >= e.to {
                out.push(Violation::BackEdge {
                    edge: i,
                    from: e.from,
                    to: e.to,
                });
            }
            if !seen.insert((e.from, e.to)) {
                out.push(Violation::DuplicateEdge {
                    from: e.from,
                    to: e.to,
                });
            }
            if e.kernel != 1 && e.kernel != 3 {
                out.push(Violation::BadKernel {
                    edge: i,
                    kernel: e.kernel,
                });
            }
            if e.dilation == 0 || (e.kernel == 1 && e.dilation != 1) {
                out.push(Violation::BadDilation { edge: i });
            }
        }
        if out
            .iter()
            .any(|v| matches!(v, Violation::BadEdgeRef { .. } | Violation::BackEdge { .. }))
        {
            return out;
        }

        // reachability in both directions; edges always point forward, so
        // a single sweep in node order settles each direction
        let mut from_input = vec![false; n];
        from_input[0] = true;
        for i in 1..n {
            from_input[i] = self.incoming(i).any(|(_, e)| from_input[e.from]);
        }
        let mut to_output = vec![false; n];
        to_output[n - 1] = true;
        for i in (0..n - 1).rev() {
            to_output[i] = self.outgoing(i).any(|(_, e)| to_output[e.to]);
        }
        for i in 1..n - 1 {
            let has_in = self.incoming(i).next().is_some();
            let has_out = self.outgoing(i).next().is_some();
            if !has_in {
                out.push(Violation::NoIncoming { node: i });
            }
            if !has_out {
                out.push(Violation::NoOutgoing { node: i });
            }
            if has_in && has_out && (!from_input[i] || !to_output[i]) {
                out.push(Violation::DeadNode { node: i });
            }
        }
        if self.incoming(n - 1).next().is_none() {
            out.push(Violation::NoIncoming { node: n - 1 });
        }

        // channel consistency at every aggregation point
        if self.nodes[0].channels != self.c_in {
            out.push(Violation::BoundaryChannels {
                detail: format!(
                    "input node declares {} channels but c_in is {}",
                    self.nodes[0].channels, self.c_in
                ),
            });
        }
        if self.nodes[n - 1].channels != self.c_out {
            out.push(Violation::BoundaryChannels {
                detail: format!(
                    "output node declares {} channels but c_out is {}",
                    self.nodes[n - 1].channels, self.c_out
                ),
            });
        }
        for i in 1..n {
            let agg = match self.agg_channels(i) {
                Ok(c) => c,
                Err(e) => {
                    out.push(Violation::ChannelMismatch {
                        node: i,
                        detail: e.to_string(),
                    });
                    continue;
                }
            };
            let contributions: Vec<usize> = self
                .incoming(i)
                .map(|(_, e)| match e.kind {
                    EdgeKind::Identity => self.nodes[e.from].channels,
                    _ => e.out_channels,
                })
                .collect();
            if contributions.is_empty() {
                continue;
            }
            match self.nodes[i].aggregation {
                Aggregation::Sum => {
                    if contributions.iter().any(|&c| c != agg) {
                        out.push(Violation::ChannelMismatch {
                            node: i,
                            detail: format!(
                                "sum aggregation over {contributions:?} does not match {agg} channels"
                            ),
                        });
                    }
                }
                Aggregation::Concat => {
                    let total: usize = contributions.iter().sum();
                    if total != agg {
                        out.push(Violation::ChannelMismatch {
                            node: i,
                            detail: format!(
                                "concat of {contributions:?} gives {total}, node declares {agg}"
                            ),
                        });
                    }
                }
            }
            for (ei, e) in self.incoming(i) {
                if matches!(e.kind, EdgeKind::Identity)
                    && e.out_channels != self.nodes[e.from].channels
                {
                    out.push(Violation::ChannelMismatch {
                        node: i,
                        detail: format!(
                            "identity edge {ei} declares {} channels, source has {}",
                            e.out_channels, self.nodes[e.from].channels
                        ),
                    });
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            let mut msg = String::from("invalid architecture:");
            for v in &violations {
                msg.push_str("\n  - ");
                msg.push_str(&v.to_string());
            }
            Err(Error::config(msg))
        }
    }

    /// Trainable parameter total with per-edge/per-node breakdown.
    pub fn param_count(&self) -> Result<ParamCount> {
        self.ensure_valid()?;
        let mut trainable = 0;
        let mut non_trainable = 0;
        let mut breakdown = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            if !e.is_parameterized() {
                continue;
            }
            let src = self.nodes[e.from].channels;
            let weights = e.out_channels * src * e.kernel * e.kernel;
            trainable += weights;
            breakdown.push((
                format!("edge {i} ({} -> {}) weights", e.from, e.to),
                weights,
            ));
            if self.edge_has_bias(i) {
                trainable += e.out_channels;
                breakdown.push((format!("edge {i} ({} -> {}) bias", e.from, e.to), e.out_channels));
            }
        }
        for i in 1..self.nodes.len() {
            if self.has_node_bias(i) {
                let c = self.agg_channels(i)?;
                trainable += c;
                breakdown.push((format!("node {i} bias"), c));
            }
            if self.has_batchnorm(i) {
                let c = self.bn_channels(i)?;
                trainable += 2 * c;
                non_trainable += 2 * c;
                breakdown.push((format!("node {i} batchnorm"), 2 * c));
            }
        }
        Ok(ParamCount {
            trainable,
            non_trainable,
            breakdown,
        })
    }

    /// Deterministic parameter initialization: He-style normal weights,
    /// zero biases, unit-gamma batchnorm with zero/one running stats.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.ensure_valid()?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for (i, e) in self.edges.iter().enumerate() {
            if !e.is_parameterized() {
                continue;
            }
            let src = self.nodes[e.from].channels;
            let fan_in = src * e.kernel * e.kernel;
            let std = num_traits::Float::sqrt(2.0 / fan_in as f64);
            let shape = match e.kind {
                EdgeKind::Conv => [e.out_channels, src, e.kernel, e.kernel],
                EdgeKind::TransposeConv => [src, e.out_channels, e.kernel, e.kernel],
                EdgeKind::Identity => unreachable!(),
            };
            let key = weight_key(i);
            let mut rng = StreamRng::new(seed, &format!("init/{key}"));
            params.insert(key, Tensor4::random_normal(shape, std, &mut rng).with_grad());
            if self.edge_has_bias(i) {
                params.insert(
                    edge_bias_key(i),
                    Tensor4::zeros([1, e.out_channels, 1, 1]).with_grad(),
                );
            }
        }
        for i in 1..self.nodes.len() {
            if self.has_node_bias(i) {
                let c = self.agg_channels(i)?;
                params.insert(node_bias_key(i), Tensor4::zeros([1, c, 1, 1]).with_grad());
            }
            if self.has_batchnorm(i) {
                let c = self.bn_channels(i)?;
                params.insert(bn_gamma_key(i), Tensor4::full([1, c, 1, 1], T::one()).with_grad());
                params.insert(bn_beta_key(i), Tensor4::zeros([1, c, 1, 1]).with_grad());
                buffers.insert(bn_mean_key(i), Tensor4::zeros([1, c, 1, 1]));
                buffers.insert(bn_var_key(i), Tensor4::full([1, c, 1, 1], T::one()));
            }
        }
        Ok(ParamStore { params, buffers })
    }

    /// GraphViz DOT rendering with channel-labelled nodes and
    /// kernel/dilation-labelled edges.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph arch {\n  rankdir=LR;\n");
        for node in &self.nodes {
            let role = if node.index == 0 {
                "in"
            } else if node.index == self.nodes.len() - 1 {
                "out"
            } else {
                "hidden"
            };
            let mut ops = String::new();
            for op in &node.post_ops {
                let tag = match op {
                    PostOp::Batchnorm => "bn".to_string(),
                    PostOp::Relu => "relu".to_string(),
                    PostOp::Maxpool { k } => format!("pool{k}"),
                    PostOp::Upsample => "up2".to_string(),
                    PostOp::Flatten { .. } => "flatten".to_string(),
                    PostOp::Unflatten { .. } => "unflatten".to_string(),
                };
                if !ops.is_empty() {
                    ops.push('+');
                }
                ops.push_str(&tag);
            }
            let label = if ops.is_empty() {
                format!("n{} {} c={}", node.index, role, node.channels)
            } else {
                format!("n{} {} c={} {}", node.index, role, node.channels, ops)
            };
            s.push_str(&format!("  n{} [label=\"{}\"];\n", node.index, label));
        }
        for e in &self.edges {
            let label = match e.kind {
                EdgeKind::Conv => format!("{0}x{0} d{1}", e.kernel, e.dilation),
                EdgeKind::TransposeConv => "up 3x3 s2".to_string(),
                EdgeKind::Identity => "skip".to_string(),
            };
            let style = if matches!(e.kind, EdgeKind::Identity) {
                ", style=dashed"
            } else {
                ""
            };
            s.push_str(&format!(
                "  n{} -> n{} [label=\"{}\"{}];\n",
                e.from, e.to, label, style
            ));
        }
        s.push_str("}\n");
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<ArchSpec> {
        serde_json::from_str(text)
            .map_err(|e| Error::config(format!("cannot parse architecture: {e}")))
    }

    /// Product of maxpool windows on the deepest path into each node;
    /// the input spatial dims must be divisible by this at the node.
    fn pool_factor(&self) -> Vec<usize> {
        let mut factor = vec![1usize; self.nodes.len()];
        for i in 1..self.nodes.len() {
            let mut f = 1;
            for (_, e) in self.incoming(i) {
                f = f.max(factor[e.from]);
            }
            for op in &self.nodes[i].post_ops {
                if let PostOp::Maxpool { k } = op {
                    f *= k;
                }
            }
            factor[i] = f;
        }
        factor
    }
}

/// Tape variables registered for a parameter store.
pub struct ParamVars {
    pub vars: BTreeMap<String, VarId>,
}

/// Registers every parameter tensor as a tape leaf.
pub fn register_params<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>) -> ParamVars {
    let mut vars = BTreeMap::new();
    for (k, t) in &store.params {
        vars.insert(k.clone(), tape.leaf(t.clone()));
    }
    ParamVars { vars }
}

/// Batchnorm op recorded during a train-mode forward, for running-stat
/// updates after the step.
pub struct BnHook {
    pub node: usize,
    pub op: VarId,
}

/// Result of executing a spec on a tape.
pub struct ForwardTrace {
    pub output: VarId,
    pub node_vars: Vec<VarId>,
    pub bn_hooks: Vec<BnHook>,
}

/// Executes the graph in topological (index) order on the given tape.
pub fn forward_on_tape<T: Element>(
    tape: &mut Tape<T>,
    spec: &ArchSpec,
    params: &ParamVars,
    buffers: &BTreeMap<String, Tensor4<T>>,
    input: VarId,
    mode: BnMode,
) -> Result<ForwardTrace> {
    let x_shape = tape.value(input).shape();
    if x_shape[1] != spec.c_in {
        return Err(Error::dim(format!(
            "input has {} channels, architecture expects {}",
            x_shape[1], spec.c_in
        )));
    }
    let pool_factor = spec.pool_factor();
    let var_of = |params: &ParamVars, key: &str| -> Result<VarId> {
        params
            .vars
            .get(key)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter store is missing {key}")))
    };

    let n = spec.nodes.len();
    let mut node_vars: Vec<Option<VarId>> = vec![None; n];
    node_vars[0] = Some(input);
    let mut bn_hooks = Vec::new();

    for i in 1..n {
        let node = &spec.nodes[i];
        let edge_geom = |e: &EdgeSpec| match e.kind {
            EdgeKind::Conv => EdgeGeom::Conv(ConvCfg {
                stride: 1,
                padding: e.dilation * (e.kernel - 1) / 2,
                dilation: e.dilation,
            }),
            EdgeKind::TransposeConv => EdgeGeom::Transpose(ConvTransposeCfg {
                stride: 2,
                padding: 1,
                output_padding: 1,
            }),
            EdgeKind::Identity => unreachable!("identity edges carry no geometry"),
        };
        let mut cur = match node.aggregation {
            Aggregation::Sum => {
                // parameterized edges fuse into a single accumulating op
                let mut fused: Vec<(VarId, VarId, EdgeGeom)> = Vec::new();
                let mut identity_parts: Vec<VarId> = Vec::new();
                for (ei, e) in spec.edges.iter().enumerate() {
                    if e.to != i {
                        continue;
                    }
                    let src = node_vars[e.from].ok_or_else(|| {
                        Error::config(format!(
                            "edge {ei} reads node {} before it is computed",
                            e.from
                        ))
                    })?;
                    if e.is_parameterized() {
                        fused.push((src, var_of(params, &weight_key(ei))?, edge_geom(e)));
                    } else {
                        identity_parts.push(src);
                    }
                }
                if fused.is_empty() && identity_parts.is_empty() {
                    return Err(Error::config(format!("node {i} has no incoming edges")));
                }
                let bias = if spec.has_node_bias(i) {
                    Some(var_of(params, &node_bias_key(i))?)
                } else {
                    None
                };
                if fused.is_empty() {
                    if identity_parts.len() == 1 {
                        identity_parts[0]
                    } else {
                        tape.sum_n(&identity_parts)?
                    }
                } else {
                    let conv_part = tape
                        .conv_sum(&fused, bias)
                        .map_err(|err| Error::dim(format!("node {i}: {err}")))?;
                    if identity_parts.is_empty() {
                        conv_part
                    } else {
                        identity_parts.push(conv_part);
                        tape.sum_n(&identity_parts)?
                    }
                }
            }
            Aggregation::Concat => {
                let mut parts: Vec<VarId> = Vec::new();
                for (ei, e) in spec.edges.iter().enumerate() {
                    if e.to != i {
                        continue;
                    }
                    let src = node_vars[e.from].ok_or_else(|| {
                        Error::config(format!(
                            "edge {ei} reads node {} before it is computed",
                            e.from
                        ))
                    })?;
                    let part = match e.kind {
                        EdgeKind::Identity => src,
                        _ => {
                            let w = var_of(params, &weight_key(ei))?;
                            let bias = if spec.edge_has_bias(ei) {
                                Some(var_of(params, &edge_bias_key(ei))?)
                            } else {
                                None
                            };
                            let one = [(src, w, edge_geom(e))];
                            tape.conv_sum(&one, bias).map_err(|err| {
                                Error::dim(format!("edge {ei} into node {i}: {err}"))
                            })?
                        }
                    };
                    parts.push(part);
                }
                if parts.is_empty() {
                    return Err(Error::config(format!("node {i} has no incoming edges")));
                }
                if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat_channels(&parts)?
                }
            }
        };
        for op in &node.post_ops {
            cur = match *op {
                PostOp::Batchnorm => {
                    let gamma = var_of(params, &bn_gamma_key(i))?;
                    let beta = var_of(params, &bn_beta_key(i))?;
                    let rm = buffers.get(&bn_mean_key(i)).ok_or_else(|| {
                        Error::config(format!("missing running mean for node {i}"))
                    })?;
                    let rv = buffers.get(&bn_var_key(i)).ok_or_else(|| {
                        Error::config(format!("missing running variance for node {i}"))
                    })?;
                    let out = tape
                        .batchnorm2d(cur, gamma, beta, rm.data(), rv.data(), mode, BN_EPS)
                        .map_err(|err| match err {
                            Error::Config(m) => Error::config(format!("node {i}: {m}")),
                            other => other,
                        })?;
                    if matches!(mode, BnMode::Train) {
                        bn_hooks.push(BnHook { node: i, op: out });
                    }
                    out
                }
                PostOp::Relu => tape.relu(cur),
                PostOp::Maxpool { k } => tape.maxpool2d(cur, k).map_err(|_| {
                    Error::config(format!(
                        "node {i}: input spatial dims {}x{} must be a multiple of {} for this architecture",
                        x_shape[2], x_shape[3], pool_factor[i]
                    ))
                })?,
                PostOp::Upsample => tape.upsample2(cur),
                PostOp::Flatten { height, width } => {
                    let [b, c, h, w] = tape.value(cur).shape();
                    if h != height || w != width {
                        return Err(Error::dim(format!(
                            "node {i}: flatten expects {height}x{width} input, got {h}x{w} \
                             (architecture was built for a fixed input size)"
                        )));
                    }
                    tape.reshape(cur, [b, c * h * w, 1, 1])?
                }
                PostOp::Unflatten {
                    channels,
                    height,
                    width,
                } => {
                    let [b, c, h, w] = tape.value(cur).shape();
                    if c * h * w != channels * height * width {
                        return Err(Error::dim(format!(
                            "node {i}: cannot unflatten {c}x{h}x{w} into {channels}x{height}x{width}"
                        )));
                    }
                    tape.reshape(cur, [b, channels, height, width])?
                }
            };
        }
        node_vars[i] = Some(cur);
    }

    Ok(ForwardTrace {
        output: node_vars[n - 1].expect("all nodes computed"),
        node_vars: node_vars.into_iter().map(|v| v.expect("computed")).collect(),
        bn_hooks,
    })
}

/// Convenience single-shot forward pass outside any training loop.
pub fn forward<T: Element>(
    spec: &ArchSpec,
    store: &ParamStore<T>,
    x: &Tensor4<T>,
    mode: BnMode,
) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let mut frozen = store.clone();
    for t in frozen.params.values_mut() {
        t.requires_grad = false;
    }
    let params = register_params(&mut tape, &frozen);
    let input = tape.leaf(x.clone());
    let trace = forward_on_tape(&mut tape, spec, &params, &frozen.buffers, input, mode)?;
    Ok(tape.value(trace.output).clone())
}

/// Forward pass returning every node's output (e.g. latent extraction).
pub fn forward_trace<T: Element>(
    spec: &ArchSpec,
    store: &ParamStore<T>,
    x: &Tensor4<T>,
    mode: BnMode,
) -> Result<Vec<Tensor4<T>>> {
    let mut tape = Tape::new();
    let mut frozen = store.clone();
    for t in frozen.params.values_mut() {
        t.requires_grad = false;
    }
    let params = register_params(&mut tape, &frozen);
    let input = tape.leaf(x.clone());
    let trace = forward_on_tape(&mut tape, spec, &params, &frozen.buffers, input, mode)?;
    Ok(trace
        .node_vars
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::{BuilderConfig, MsdConfig};

    fn meta() -> ArchMeta {
        ArchMeta {
            config: BuilderConfig::Msdnet(MsdConfig {
                depth: 1,
                max_dilation: Some(1),
                custom_dilations: None,
                width: 1,
                c_in: 1,
                c_out: 1,
            }),
            latent_node: None,
        }
    }

    fn chain_spec() -> ArchSpec {
        ArchSpec {
            nodes: vec![
                NodeSpec {
                    index: 0,
                    channels: 1,
                    aggregation: Aggregation::Sum,
                    post_ops: vec![],
                },
                NodeSpec {
                    index: 1,
                    channels: 1,
                    aggregation: Aggregation::Sum,
                    post_ops: vec![PostOp::Relu],
                },
                NodeSpec {
                    index: 2,
                    channels: 1,
                    aggregation: Aggregation::Sum,
                    post_ops: vec![],
                },
            ],
            edges: vec![EdgeSpec::conv(0, 1, 3, 1, 1), EdgeSpec::conv(1, 2, 1, 1, 1)],
            c_in: 1,
            c_out: 1,
            metadata: meta(),
        }
    }

    #[test]
    fn chain_validates_clean() {
        assert!(chain_spec().validate().is_empty());
    }

    #[test]
    fn back_edge_is_reported() {
        let mut spec = chain_spec();
        spec.edges.push(EdgeSpec::conv(2, 1, 1, 1, 1));
        assert!(spec
            .validate()
            .iter()
            .any(|v| matches!(v, Violation::BackEdge { .. })));
    }

    #[test]
    fn dead_node_is_reported() {
        let mut spec = chain_spec();
        // hidden node with no outgoing edge
        spec.nodes.insert(
            2,
            NodeSpec {
                index: 2,
                channels: 1,
                aggregation: Aggregation::Sum,
                post_ops: vec![],
            },
        );
        spec.nodes[3].index = 3;
        spec.edges[1].to = 3;
        spec.edges.push(EdgeSpec::conv(0, 2, 3, 1, 1));
        assert!(spec
            .validate()
            .iter()
            .any(|v| matches!(v, Violation::NoOutgoing { node: 2 })));
    }

    #[test]
    fn single_conv_edge_counts_ten_params() {
        // 3x3 conv 1 -> 1 channel: 9 weights + 1 node bias
        let spec = ArchSpec {
            nodes: vec![
                NodeSpec {
                    index: 0,
                    channels: 1,
                    aggregation: Aggregation::Sum,
                    post_ops: vec![],
                },
                NodeSpec {
                    index: 1,
                    channels: 1,
                    aggregation: Aggregation::Sum,
                    post_ops: vec![],
                },
            ],
            edges: vec![EdgeSpec::conv(0, 1, 3, 1, 1)],
            c_in: 1,
            c_out: 1,
            metadata: meta(),
        };
        let count = spec.param_count().unwrap();
        assert_eq!(count.trainable, 10);
        assert_eq!(count.non_trainable, 0);
    }

    #[test]
    fn identity_spec_forwards_input_unchanged() {
        let spec = ArchSpec {
            nodes: vec![
                NodeSpec {
                    index: 0,
                    channels: 1,
                    aggregation: Aggregation::Sum,
                    post_ops: vec![],
                },
                NodeSpec {
                    index: 1,
                    channels: 1,
                    aggregation: Aggregation::Sum,
                    post_ops: vec![],
                },
            ],
            edges: vec![EdgeSpec::conv(0, 1, 1, 1, 1)],
            c_in: 1,
            c_out: 1,
            metadata: meta(),
        };
        let mut store: ParamStore<f64> = spec.init_params(0).unwrap();
        store
            .params
            .insert(weight_key(0), Tensor4::full([1, 1, 1, 1], 1.0).with_grad());
        store
            .params
            .insert(node_bias_key(1), Tensor4::zeros([1, 1, 1, 1]).with_grad());
        let mut rng = crate::rng::StreamRng::new(0, "fwd-id");
        let x = Tensor4::random_uniform([2, 1, 5, 5], -1.0, 1.0, &mut rng);
        let y = forward(&spec, &store, &x, BnMode::Eval).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dot_export_lists_every_node_and_edge() {
        let spec = chain_spec();
        let dot = spec.to_dot();
        assert_eq!(dot.matches("label=\"n").count(), 3);
        assert_eq!(dot.matches(" -> ").count(), 2);
        assert!(dot.starts_with("digraph"));
    }

    #[test]
    fn kernel_span_formula() {
        assert_eq!(kernel_span(3, 1).unwrap(), 3);
        assert_eq!(kernel_span(3, 10).unwrap(), 21);
        assert_eq!(kernel_span(3, 7).unwrap(), 15);
        assert!(kernel_span(2, 1).is_err());
        assert!(kernel_span(3, 0).is_err());
    }

    #[test]
    fn json_round_trip_is_identity() {
        let spec = chain_spec();
        let json = spec.to_json();
        let back = ArchSpec::from_json(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn param_count_matches_initialized_store() {
        let spec = chain_spec();
        let count = spec.param_count().unwrap();
        let store: ParamStore<f32> = spec.init_params(7).unwrap();
        assert_eq!(count.trainable, store.trainable_values());
    }
}
