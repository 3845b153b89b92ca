//! Deterministic constructors mapping hyperparameters to [`ArchSpec`]s.
//!
//! Four families: tunable U-Nets, convolutional autoencoders, mixed-scale
//! dense networks, and stochastically generated sparse mixed-scale
//! networks. Builders are pure functions; the sparse generator draws all
//! randomness from counter-based streams keyed by `(seed, step, index)`,
//! so every `(config, seed)` pair maps to exactly one graph.

use alloc::vec::Vec;
use alloc::{format, vec};

#[allow(unused_imports)]
use num_traits::Float as _;

use serde::{Deserialize, Serialize};

use crate::graph::{Aggregation, ArchMeta, ArchSpec, EdgeSpec, NodeSpec, PostOp};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Tunable U-Net hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub growth_rate: f64,
    pub hidden_rate: f64,
    pub c_in: usize,
    pub c_out: usize,
}

/// Convolutional autoencoder hyperparameters. The input spatial dims
/// `(m, n)` are part of the configuration because the bottleneck flattens
/// a fixed-size feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub growth_rate: f64,
    pub latent_len: usize,
    pub c_in: usize,
    pub m: usize,
    pub n: usize,
}

fn default_width() -> usize {
    1
}

/// Mixed-scale dense network hyperparameters. Exactly one of
/// `max_dilation` (cyclic assignment) or `custom_dilations` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsdConfig {
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_dilation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_dilations: Option<Vec<usize>>,
    /// Channels per hidden layer.
    #[serde(default = "default_width")]
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
}

fn default_k_min() -> usize {
    1
}

fn default_hidden_channels() -> usize {
    1
}

/// Sparse mixed-scale network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmsConfig {
    pub hidden_nodes: usize,
    /// Global minimum sampled out-degree (adjusted near the output).
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    /// Global maximum sampled out-degree; defaults to `hidden_nodes + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    /// Out-degree density decay: weight of degree n is exp(-gamma * n).
    pub gamma: f64,
    /// Skip-distance density decay: weight of |i - j| is exp(-alpha * |i - j|).
    pub alpha: f64,
    /// Probability of an input -> hidden edge.
    pub p_il: f64,
    /// Probability of a hidden -> output edge.
    pub p_lo: f64,
    /// Whether a direct input -> output 1x1 edge is added.
    pub p_io: bool,
    pub dilation_choices: Vec<usize>,
    #[serde(default = "default_hidden_channels")]
    pub hidden_channels: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub seed: u64,
}

impl SmsConfig {
    pub fn k_max_resolved(&self) -> usize {
        self.k_max.unwrap_or(self.hidden_nodes + 1)
    }
}

/// Tagged union of the four builder configurations; this is the JSON
/// document the `build` pipeline stage consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "snake_case")]
pub enum BuilderConfig {
    Tunet(TunetConfig),
    Autoencoder(AutoConfig),
    Msdnet(MsdConfig),
    Smsnet(SmsConfig),
}

impl BuilderConfig {
    pub fn builder_name(&self) -> &'static str {
        match self {
            BuilderConfig::Tunet(_) => "tunet",
            BuilderConfig::Autoencoder(_) => "autoencoder",
            BuilderConfig::Msdnet(_) => "msdnet",
            BuilderConfig::Smsnet(_) => "smsnet",
        }
    }

    pub fn build(&self) -> Result<ArchSpec> {
        match self {
            BuilderConfig::Tunet(c) => build_tunet(c),
            BuilderConfig::Autoencoder(c) => build_autoencoder(c),
            BuilderConfig::Msdnet(c) => build_msdnet(c),
            BuilderConfig::Smsnet(c) => build_smsnet(c),
        }
    }

    /// Strict JSON parse: unknown fields are rejected.
    pub fn from_json(text: &str) -> Result<BuilderConfig> {
        serde_json::from_str(text)
            .map_err(|e| Error::config(format!("cannot parse builder config: {e}")))
    }
}

/// Round-half-up channel rounding shared by all channel-growth formulas.
fn round_channels(x: f64, what: &str) -> Result<usize> {
    let r = num_traits::Float::floor(x + 0.5);
    if r < 1.0 {
        return Err(Error::config(format!(
            "{what}: channel formula yields {x:.3}, which rounds to zero"
        )));
    }
    Ok(r as usize)
}

fn positive(v: usize, what: &str) -> Result<()> {
    if v == 0 {
        Err(Error::config(format!("{what} must be >= 1")))
    } else {
        Ok(())
    }
}

struct GraphAccum {
    nodes: Vec<NodeSpec>,
    edges: Vec<EdgeSpec>,
}

impl GraphAccum {
    fn new(c_in: usize) -> Self {
        GraphAccum {
            nodes: vec![NodeSpec {
                index: 0,
                channels: c_in,
                aggregation: Aggregation::Sum,
                post_ops: vec![],
            }],
            edges: Vec::new(),
        }
    }

    fn node(&mut self, channels: usize, aggregation: Aggregation, post_ops: Vec<PostOp>) -> usize {
        let index = self.nodes.len();
        self.nodes.push(NodeSpec {
            index,
            channels,
            aggregation,
            post_ops,
        });
        index
    }

    fn edge(&mut self, e: EdgeSpec) {
        self.edges.push(e);
    }
}

/// Per-layer `(target, hidden)` channel pairs of a U-Net encoder:
/// `c_i = round(c_b * r^(i-1))`, `h_i = round(c_i * r_h)`.
pub fn tunet_channels(cfg: &TunetConfig) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(cfg.depth);
    for i in 1..=cfg.depth {
        let target = cfg.base_channels as f64
            * num_traits::Float::powi(cfg.growth_rate, i as i32 - 1);
        let c = round_channels(target, "tunet growth")?;
        let h = round_channels(c as f64 * cfg.hidden_rate, "tunet hidden rate")?;
        out.push((c, h));
    }
    Ok(out)
}

/// Encoder of `depth` dual-conv layers with pooling between them, a
/// mirrored transpose-conv decoder with concatenated skips, and a 1x1
/// output head.
pub fn build_tunet(cfg: &TunetConfig) -> Result<ArchSpec> {
    positive(cfg.depth, "tunet depth")?;
    positive(cfg.base_channels, "tunet base_channels")?;
    positive(cfg.c_in, "tunet c_in")?;
    positive(cfg.c_out, "tunet c_out")?;
    if cfg.growth_rate <= 0.0 || cfg.hidden_rate <= 0.0 {
        return Err(Error::config("tunet growth rates must be positive"));
    }
    let channels = tunet_channels(cfg)?;
    let d = cfg.depth;
    let mut g = GraphAccum::new(cfg.c_in);
    let conv_block = vec![PostOp::Batchnorm, PostOp::Relu];

    let mut prev = 0usize;
    let mut skip_sources = vec![0usize; d + 1];
    for i in 1..=d {
        let (c, h) = channels[i - 1];
        let a = g.node(c, Aggregation::Sum, conv_block.clone());
        g.edge(EdgeSpec::conv(prev, a, 3, 1, c));
        let b = g.node(h, Aggregation::Sum, conv_block.clone());
        g.edge(EdgeSpec::conv(a, b, 3, 1, h));
        skip_sources[i] = b;
        if i < d {
            let p = g.node(h, Aggregation::Sum, vec![PostOp::Maxpool { k: 2 }]);
            g.edge(EdgeSpec::identity(b, p, h));
            prev = p;
        }
    }

    let mut cur = skip_sources[d];
    for i in (1..d).rev() {
        let (c, h) = channels[i - 1];
        let cat = g.node(c + h, Aggregation::Concat, vec![]);
        g.edge(EdgeSpec::transpose(cur, cat, c));
        g.edge(EdgeSpec::identity(skip_sources[i], cat, h));
        let da = g.node(c, Aggregation::Sum, conv_block.clone());
        g.edge(EdgeSpec::conv(cat, da, 3, 1, c));
        let db = g.node(h, Aggregation::Sum, conv_block.clone());
        g.edge(EdgeSpec::conv(da, db, 3, 1, h));
        cur = db;
    }

    let head = g.node(cfg.c_out, Aggregation::Sum, vec![]);
    g.edge(EdgeSpec::conv(cur, head, 1, 1, cfg.c_out));

    let spec = ArchSpec {
        nodes: g.nodes,
        edges: g.edges,
        c_in: cfg.c_in,
        c_out: cfg.c_out,
        metadata: ArchMeta {
            config: BuilderConfig::Tunet(cfg.clone()),
            latent_node: None,
        },
    };
    spec.ensure_valid()?;
    Ok(spec)
}

/// U-Net-style encoder without skips, pooling after every layer, an
/// affine bottleneck to a `latent_len` vector and back, and a mirrored
/// transpose-conv decoder reconstructing the input channels.
pub fn build_autoencoder(cfg: &AutoConfig) -> Result<ArchSpec> {
    if cfg.depth == 0 {
        return Err(Error::config(
            "autoencoder depth must be >= 1: the bottleneck needs at least one pooling step",
        ));
    }
    positive(cfg.base_channels, "autoencoder base_channels")?;
    positive(cfg.latent_len, "autoencoder latent_len")?;
    positive(cfg.c_in, "autoencoder c_in")?;
    if cfg.growth_rate <= 0.0 {
        return Err(Error::config("autoencoder growth_rate must be positive"));
    }
    let divisor = 1usize << cfg.depth;
    if cfg.m == 0 || cfg.n == 0 || cfg.m % divisor != 0 || cfg.n % divisor != 0 {
        return Err(Error::config(format!(
            "autoencoder input dims {}x{} must be divisible by 2^depth = {divisor}",
            cfg.m, cfg.n
        )));
    }
    let d = cfg.depth;
    let mut channels = Vec::with_capacity(d);
    for i in 1..=d {
        let target = cfg.base_channels as f64
            * num_traits::Float::powi(cfg.growth_rate, i as i32 - 1);
        channels.push(round_channels(target, "autoencoder growth")?);
    }
    let (bh, bw) = (cfg.m / divisor, cfg.n / divisor);
    let c_bottom = channels[d - 1];
    let flat_len = c_bottom * bh * bw;

    let mut g = GraphAccum::new(cfg.c_in);
    let conv_block = vec![PostOp::Batchnorm, PostOp::Relu];

    let mut prev = 0usize;
    for i in 1..=d {
        let c = channels[i - 1];
        let a = g.node(c, Aggregation::Sum, conv_block.clone());
        g.edge(EdgeSpec::conv(prev, a, 3, 1, c));
        let b = g.node(c, Aggregation::Sum, conv_block.clone());
        g.edge(EdgeSpec::conv(a, b, 3, 1, c));
        let p = g.node(c, Aggregation::Sum, vec![PostOp::Maxpool { k: 2 }]);
        g.edge(EdgeSpec::identity(b, p, c));
        prev = p;
    }

    let flat = g.node(
        flat_len,
        Aggregation::Sum,
        vec![PostOp::Flatten {
            height: bh,
            width: bw,
        }],
    );
    g.edge(EdgeSpec::identity(prev, flat, c_bottom));
    let latent = g.node(cfg.latent_len, Aggregation::Sum, vec![]);
    g.edge(EdgeSpec::conv(flat, latent, 1, 1, cfg.latent_len));
    let expand = g.node(
        c_bottom,
        Aggregation::Sum,
        vec![PostOp::Unflatten {
            channels: c_bottom,
            height: bh,
            width: bw,
        }],
    );
    g.edge(EdgeSpec::conv(latent, expand, 1, 1, flat_len));

    let mut cur = expand;
    for i in (1..=d).rev() {
        let c = channels[i - 1];
        let t = g.node(c, Aggregation::Sum, vec![]);
        g.edge(EdgeSpec::transpose(cur, t, c));
        let da = g.node(c, Aggregation::Sum, conv_block.clone());
        g.edge(EdgeSpec::conv(t, da, 3, 1, c));
        let db = g.node(c, Aggregation::Sum, conv_block.clone());
        g.edge(EdgeSpec::conv(da, db, 3, 1, c));
        cur = db;
    }
    let head = g.node(cfg.c_in, Aggregation::Sum, vec![]);
    g.edge(EdgeSpec::conv(cur, head, 1, 1, cfg.c_in));

    let spec = ArchSpec {
        nodes: g.nodes,
        edges: g.edges,
        c_in: cfg.c_in,
        c_out: cfg.c_in,
        metadata: ArchMeta {
            config: BuilderConfig::Autoencoder(cfg.clone()),
            latent_node: Some(latent),
        },
    };
    spec.ensure_valid()?;
    Ok(spec)
}

/// Dilation of hidden layer `i` (1-based) under the cyclic rule
/// `((i - 1) mod max_dilation) + 1`.
pub fn msd_dilation(cfg: &MsdConfig, layer: usize) -> Result<usize> {
    match (&cfg.max_dilation, &cfg.custom_dilations) {
        (Some(lm), None) => Ok((layer - 1) % lm + 1),
        (None, Some(list)) => Ok(list[layer - 1]),
        _ => Err(Error::config(
            "msdnet needs exactly one of max_dilation or custom_dilations",
        )),
    }
}

/// Fixed-resolution dense network: every hidden layer receives dilated
/// 3x3 edges from the input and all earlier hidden layers; the output
/// node receives 1x1 edges from the input and every hidden layer.
pub fn build_msdnet(cfg: &MsdConfig) -> Result<ArchSpec> {
    positive(cfg.depth, "msdnet depth")?;
    positive(cfg.width, "msdnet width")?;
    positive(cfg.c_in, "msdnet c_in")?;
    positive(cfg.c_out, "msdnet c_out")?;
    match (&cfg.max_dilation, &cfg.custom_dilations) {
        (Some(lm), None) => positive(*lm, "msdnet max_dilation")?,
        (None, Some(list)) => {
            if list.len() != cfg.depth {
                return Err(Error::config(format!(
                    "msdnet custom_dilations has {} entries, depth is {}",
                    list.len(),
                    cfg.depth
                )));
            }
            if list.iter().any(|&d| d == 0) {
                return Err(Error::config("msdnet custom_dilations entries must be >= 1"));
            }
        }
        _ => {
            return Err(Error::config(
                "msdnet needs exactly one of max_dilation or custom_dilations",
            ))
        }
    }
    let d = cfg.depth;
    let w = cfg.width;
    let mut g = GraphAccum::new(cfg.c_in);
    for j in 1..=d {
        let dil = msd_dilation(cfg, j)?;
        let node = g.node(w, Aggregation::Sum, vec![PostOp::Batchnorm, PostOp::Relu]);
        debug_assert_eq!(node, j);
        g.edge(EdgeSpec::conv(0, j, 3, dil, w));
        for i in 1..j {
            g.edge(EdgeSpec::conv(i, j, 3, dil, w));
        }
    }
    let out = g.node(cfg.c_out, Aggregation::Sum, vec![]);
    g.edge(EdgeSpec::conv(0, out, 1, 1, cfg.c_out));
    for i in 1..=d {
        g.edge(EdgeSpec::conv(i, out, 1, 1, cfg.c_out));
    }
    let spec = ArchSpec {
        nodes: g.nodes,
        edges: g.edges,
        c_in: cfg.c_in,
        c_out: cfg.c_out,
        metadata: ArchMeta {
            config: BuilderConfig::Msdnet(cfg.clone()),
            latent_node: None,
        },
    };
    spec.ensure_valid()?;
    Ok(spec)
}

/// Samples a value from the truncated discrete density `exp(-decay * v)`
/// on `lo..=hi`. Weights are shifted by `lo` so arbitrarily large decay
/// degenerates cleanly to the lower bound.
fn sample_trunc_exp(rng: &mut StreamRng, decay: f64, lo: usize, hi: usize) -> usize {
    if lo == hi {
        return lo;
    }
    let weights: Vec<f64> = (lo..=hi)
        .map(|v| num_traits::Float::exp(-decay * (v - lo) as f64))
        .collect();
    lo + rng.weighted_index(&weights)
}

/// Stochastic sparse mixed-scale network generation.
///
/// Deterministic in `(config, seed)`: (1) each hidden node `j` draws an
/// out-degree from the truncated density `exp(-gamma n)` on
/// `[min(k_min, d-j), min(k_max, d-j)]`; (2) that many forward targets
/// are drawn without replacement with weight `exp(-alpha |j-t|)`;
/// (3) input->hidden edges appear with probability `p_il`, hidden->output
/// with `p_lo`, and input->output when `p_io`; (4) a repair pass connects
/// any hidden node left without an incoming (from input) or outgoing (to
/// output) edge; (5) every 3x3 edge draws its dilation uniformly from
/// `dilation_choices`, keyed by its endpoints.
pub fn build_smsnet(cfg: &SmsConfig) -> Result<ArchSpec> {
    let d = cfg.hidden_nodes;
    positive(d, "smsnet hidden_nodes")?;
    positive(cfg.hidden_channels, "smsnet hidden_channels")?;
    positive(cfg.c_in, "smsnet c_in")?;
    positive(cfg.c_out, "smsnet c_out")?;
    let k_max = cfg.k_max_resolved();
    if cfg.k_min < 1 || cfg.k_min > k_max || k_max > d + 1 {
        return Err(Error::config(format!(
            "smsnet degree bounds must satisfy 1 <= k_min <= k_max <= hidden_nodes + 1, \
             got k_min {} k_max {k_max}",
            cfg.k_min
        )));
    }
    if cfg.gamma < 0.0 || cfg.alpha < 0.0 {
        return Err(Error::config("smsnet gamma and alpha must be >= 0"));
    }
    if !(0.0..=1.0).contains(&cfg.p_il) || !(0.0..=1.0).contains(&cfg.p_lo) {
        return Err(Error::config("smsnet p_il and p_lo must lie in [0, 1]"));
    }
    if cfg.dilation_choices.is_empty() {
        return Err(Error::config("smsnet dilation_choices must not be empty"));
    }
    if cfg.dilation_choices.iter().any(|&x| x == 0) {
        return Err(Error::config("smsnet dilation_choices entries must be >= 1"));
    }

    let w = cfg.hidden_channels;
    let output = d + 1;
    let mut g = GraphAccum::new(cfg.c_in);
    for j in 1..=d {
        let node = g.node(w, Aggregation::Sum, vec![PostOp::Batchnorm, PostOp::Relu]);
        debug_assert_eq!(node, j);
    }
    let out_node = g.node(cfg.c_out, Aggregation::Sum, vec![]);
    debug_assert_eq!(out_node, output);

    // hidden -> hidden edges, in draw order per source node
    for j in 1..=d {
        let avail = d - j;
        let lo = cfg.k_min.min(avail);
        let hi = k_max.min(avail);
        let mut deg_rng = StreamRng::keyed(cfg.seed, "deg", j as u64);
        let degree = sample_trunc_exp(&mut deg_rng, cfg.gamma, lo, hi);
        let mut pool: Vec<usize> = (j + 1..=d).collect();
        let mut tgt_rng = StreamRng::keyed(cfg.seed, "tgt", j as u64);
        for _ in 0..degree {
            let weights: Vec<f64> = pool
                .iter()
                .map(|&t| num_traits::Float::exp(-cfg.alpha * (t - j - 1) as f64))
                .collect();
            let pick = tgt_rng.weighted_index(&weights);
            let t = pool.remove(pick);
            g.edge(EdgeSpec::conv(j, t, 3, 1, w));
        }
    }
    // input -> hidden
    for j in 1..=d {
        if StreamRng::keyed(cfg.seed, "pil", j as u64).bernoulli(cfg.p_il) {
            g.edge(EdgeSpec::conv(0, j, 3, 1, w));
        }
    }
    // hidden -> output
    for j in 1..=d {
        if StreamRng::keyed(cfg.seed, "plo", j as u64).bernoulli(cfg.p_lo) {
            g.edge(EdgeSpec::conv(j, output, 1, 1, cfg.c_out));
        }
    }
    if cfg.p_io {
        g.edge(EdgeSpec::conv(0, output, 1, 1, cfg.c_out));
    }
    // repair pass: every hidden node must lie on an input-output path
    for j in 1..=d {
        if !g.edges.iter().any(|e| e.to == j) {
            g.edge(EdgeSpec::conv(0, j, 3, 1, w));
        }
        if !g.edges.iter().any(|e| e.from == j) {
            g.edge(EdgeSpec::conv(j, output, 1, 1, cfg.c_out));
        }
    }
    if !g.edges.iter().any(|e| e.to == output) {
        // possible only when p_lo = 0 rounds everything away and repair
        // already gave every node an outgoing edge; connect the last node.
        g.edge(EdgeSpec::conv(d, output, 1, 1, cfg.c_out));
    }
    // dilations for every 3x3 edge, keyed by endpoints
    for e in g.edges.iter_mut() {
        if e.kernel == 3 {
            let mut rng = StreamRng::new(cfg.seed, &format!("dil/{}/{}", e.from, e.to));
            e.dilation = cfg.dilation_choices[rng.below(cfg.dilation_choices.len() as u64) as usize];
        }
    }

    let spec = ArchSpec {
        nodes: g.nodes,
        edges: g.edges,
        c_in: cfg.c_in,
        c_out: cfg.c_out,
        metadata: ArchMeta {
            config: BuilderConfig::Smsnet(cfg.clone()),
            latent_node: None,
        },
    };
    spec.ensure_valid()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EdgeKind;

    fn msd(depth: usize, max_dilation: usize, width: usize) -> MsdConfig {
        MsdConfig {
            depth,
            max_dilation: Some(max_dilation),
            custom_dilations: None,
            width,
            c_in: 1,
            c_out: 1,
        }
    }

    #[test]
    fn tunet_depth_one_is_dual_conv_plus_head() {
        let cfg = TunetConfig {
            depth: 1,
            base_channels: 8,
            growth_rate: 2.0,
            hidden_rate: 1.0,
            c_in: 1,
            c_out: 3,
        };
        let spec = build_tunet(&cfg).unwrap();
        assert_eq!(spec.nodes.len(), 4); // in, conv a, conv b, head
        assert_eq!(spec.edges.len(), 3);
        assert!(spec
            .edges
            .iter()
            .all(|e| !matches!(e.kind, EdgeKind::TransposeConv | EdgeKind::Identity)));
    }

    #[test]
    fn tunet_encoder_channels_follow_growth_formula() {
        let cfg = TunetConfig {
            depth: 4,
            base_channels: 10,
            growth_rate: 1.5,
            hidden_rate: 2.0,
            c_in: 1,
            c_out: 1,
        };
        let chans = tunet_channels(&cfg).unwrap();
        assert_eq!(
            chans,
            vec![(10, 20), (15, 30), (23, 46), (34, 68)] // round-half-up
        );
        build_tunet(&cfg).unwrap();
    }

    #[test]
    fn tunet_paper_scale_parameter_count() {
        let cfg = TunetConfig {
            depth: 4,
            base_channels: 64,
            growth_rate: 2.0,
            hidden_rate: 1.0,
            c_in: 1,
            c_out: 1,
        };
        let spec = build_tunet(&cfg).unwrap();
        let count = spec.param_count().unwrap();
        let rel = (count.trainable as f64 - 8.56e6).abs() / 8.56e6;
        assert!(rel < 0.02, "trainable {} not within 2% of 8.56M", count.trainable);
    }

    #[test]
    fn tunet_rejects_vanishing_channels() {
        let cfg = TunetConfig {
            depth: 4,
            base_channels: 1,
            growth_rate: 0.2,
            hidden_rate: 1.0,
            c_in: 1,
            c_out: 1,
        };
        assert!(matches!(build_tunet(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn autoencoder_rejects_depth_zero_and_indivisible_dims() {
        let mut cfg = AutoConfig {
            depth: 0,
            base_channels: 4,
            growth_rate: 2.0,
            latent_len: 8,
            c_in: 1,
            m: 64,
            n: 64,
        };
        assert!(matches!(build_autoencoder(&cfg), Err(Error::Config(_))));
        cfg.depth = 3;
        cfg.m = 60;
        assert!(matches!(build_autoencoder(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn autoencoder_latent_length_is_pinned_by_config() {
        let cfg = AutoConfig {
            depth: 4,
            base_channels: 16,
            growth_rate: 2.0,
            latent_len: 16,
            c_in: 1,
            m: 64,
            n: 64,
        };
        let spec = build_autoencoder(&cfg).unwrap();
        let latent = spec.metadata.latent_node.unwrap();
        assert_eq!(spec.nodes[latent].channels, 16);
    }

    #[test]
    fn msdnet_edge_count_matches_dense_topology() {
        // depth 3: 3 input->hidden + C(3,2) hidden->hidden + 4 output edges
        let spec = build_msdnet(&msd(3, 2, 1)).unwrap();
        assert_eq!(spec.edges.len(), 10);
        // in-degree of hidden node i equals i (input + all predecessors)
        for i in 1..=3 {
            assert_eq!(spec.incoming(i).count(), i);
        }
    }

    #[test]
    fn msdnet_cyclic_dilation_rule() {
        let cfg = msd(25, 10, 1);
        for (layer, want) in [(1, 1), (9, 9), (10, 10), (11, 1), (20, 10), (21, 1)] {
            assert_eq!(msd_dilation(&cfg, layer).unwrap(), want);
        }
        // custom list cycling [1,2,4,8,16] ten times: layer 7 -> 2
        let cycles: Vec<usize> = [1usize, 2, 4, 8, 16]
            .iter()
            .copied()
            .cycle()
            .take(50)
            .collect();
        let custom = MsdConfig {
            depth: 50,
            max_dilation: None,
            custom_dilations: Some(cycles),
            width: 1,
            c_in: 1,
            c_out: 1,
        };
        assert_eq!(msd_dilation(&custom, 7).unwrap(), 2);
        let spec = build_msdnet(&custom).unwrap();
        let dil7: Vec<usize> = spec
            .incoming(7)
            .map(|(_, e)| e.dilation)
            .collect();
        assert!(dil7.iter().all(|&d| d == 2));
    }

    #[test]
    fn msdnet_paper_scale_parameter_count() {
        let spec = build_msdnet(&msd(200, 10, 1)).unwrap();
        let count = spec.param_count().unwrap();
        assert_eq!(count.trainable, 181_702);
        assert_eq!(count.non_trainable, 400);
    }

    #[test]
    fn msdnet_rejects_bad_dilation_config() {
        let mut cfg = msd(3, 1, 1);
        cfg.custom_dilations = Some(vec![1, 2, 3]);
        assert!(matches!(build_msdnet(&cfg), Err(Error::Config(_))));
        let mut cfg = msd(3, 1, 1);
        cfg.max_dilation = None;
        cfg.custom_dilations = Some(vec![1, 2]);
        assert!(matches!(build_msdnet(&cfg), Err(Error::Config(_))));
    }

    fn sms(seed: u64) -> SmsConfig {
        SmsConfig {
            hidden_nodes: 20,
            k_min: 1,
            k_max: None,
            gamma: 0.5,
            alpha: 0.25,
            p_il: 0.2,
            p_lo: 0.2,
            p_io: false,
            dilation_choices: vec![1, 2, 4, 8],
            hidden_channels: 1,
            c_in: 1,
            c_out: 1,
            seed,
        }
    }

    #[test]
    fn smsnet_is_deterministic_in_seed() {
        let a = build_smsnet(&sms(7)).unwrap();
        let b = build_smsnet(&sms(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        let c = build_smsnet(&sms(8)).unwrap();
        assert_ne!(a, c);
        assert_eq!(
            a.param_count().unwrap().trainable,
            b.param_count().unwrap().trainable
        );
    }

    #[test]
    fn smsnet_validates_across_seeds() {
        for seed in 0..200 {
            let spec = build_smsnet(&sms(seed)).unwrap();
            assert!(spec.validate().is_empty(), "seed {seed}");
        }
    }

    #[test]
    fn smsnet_degenerate_gamma_pins_out_degree_to_minimum() {
        let mut cfg = sms(3);
        cfg.gamma = 1e9;
        let spec = build_smsnet(&cfg).unwrap();
        let d = cfg.hidden_nodes;
        for j in 1..=d {
            let sampled = spec
                .edges
                .iter()
                .filter(|e| e.from == j && e.to <= d)
                .count();
            assert_eq!(sampled, 1usize.min(d - j), "node {j}");
        }
    }

    #[test]
    fn smsnet_rejects_bad_bounds() {
        let mut cfg = sms(0);
        cfg.k_min = 5;
        cfg.k_max = Some(2);
        assert!(matches!(build_smsnet(&cfg), Err(Error::Config(_))));
        let mut cfg = sms(0);
        cfg.dilation_choices = vec![];
        assert!(matches!(build_smsnet(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn builder_config_json_is_strict() {
        let ok = r#"{"builder":"msdnet","depth":3,"max_dilation":2,"c_in":1,"c_out":1}"#;
        let cfg = BuilderConfig::from_json(ok).unwrap();
        assert_eq!(cfg.builder_name(), "msdnet");
        let bad = r#"{"builder":"msdnet","depth":3,"max_dilation":2,"c_in":1,"c_out":1,"typo":5}"#;
        assert!(BuilderConfig::from_json(bad).is_err());
    }
}
