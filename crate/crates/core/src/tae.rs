//! Topology-aware encoder: spatial features are pooled onto vessel-graph
//! nodes, refined by multi-head graph attention, and diffused back onto the
//! image grid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{ConvSpec, Tape, Var};
use crate::config::{ConfigError, TaeConfig};
use crate::nn::Conv2d;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::vessel::VesselGraph;

/// How neighbours are weighted inside the graph layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Learned attention coefficients.
    #[default]
    Attention,
    /// Every neighbour (self included) weighted equally, i.e. a mean-aggregating
    /// graph convolution with the same parameters.
    Uniform,
}

/// Switches used by the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct TaeOptions {
    pub aggregation: Aggregation,
    /// When false the diffusion convolutions are skipped and only the
    /// scattered node map (through the skip path) is returned.
    pub diffuse: bool,
}

impl TaeOptions {
    pub fn full() -> Self {
        Self { aggregation: Aggregation::Attention, diffuse: true }
    }
}

/// Weights of one attention head: `w: [C_in, C_out]`, and the attention
/// vector split into its source and destination halves.
#[derive(Clone, Debug)]
pub struct GatHead {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub slope: f64,
}

/// Attention coefficients of one layer, dense `N×N` per head; entries outside
/// a node's neighbourhood are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub nodes: usize,
    pub coefficients: Vec<Vec<f64>>,
}

impl AttentionMap {
    pub fn heads(&self) -> usize {
        self.coefficients.len()
    }

    pub fn get(&self, head: usize, i: usize, j: usize) -> f64 {
        self.coefficients[head][i * self.nodes + j]
    }

    /// `(head, i, j, alpha)` for every directed neighbour pair, self-loops included.
    pub fn entries<'a>(&'a self, graph: &'a VesselGraph) -> impl Iterator<Item = (usize, usize, usize, f64)> + 'a {
        let mask = graph.neighborhood_mask();
        let n = self.nodes;
        (0..self.heads()).flat_map(move |h| {
            let mask = mask.clone();
            (0..n * n).filter(move |&k| mask[k]).map(move |k| (h, k / n, k % n, self.get(h, k / n, k % n)))
        })
    }
}

#[derive(Clone, Debug)]
pub struct Tae {
    config: TaeConfig,
    reduce: Conv2d,
    patch1: Conv2d,
    patch2: Conv2d,
    layers: Vec<GatLayer>,
    diffuse1: Conv2d,
    diffuse2: Conv2d,
    skip: Option<Conv2d>,
    out_dim: usize,
}

impl Tae {
    /// `feature_dim` is the channel count of the base/detail maps and of the
    /// produced graph feature map.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        config: &TaeConfig,
        feature_dim: usize,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let c = config;
        let reduce = Conv2d::pointwise(store, rng, &format!("{prefix}.reduce"), 2 * feature_dim, c.reduce_dim, true);
        let patch1 =
            Conv2d::new(store, rng, &format!("{prefix}.patch1"), c.reduce_dim, c.node_dim, 3, ConvSpec::valid(), true);
        let patch2 =
            Conv2d::new(store, rng, &format!("{prefix}.patch2"), c.node_dim, c.node_dim, 3, ConvSpec::valid(), true);
        let mut layers = Vec::with_capacity(c.giu_layers);
        let mut cin = c.node_dim;
        for l in 0..c.giu_layers {
            let heads = (0..c.giu_heads)
                .map(|k| {
                    let name = format!("{prefix}.giu.{l}.head{k}");
                    GatHead {
                        w: store.add_uniform(format!("{name}.w"), &[cin, c.head_dim], cin, rng),
                        a_src: store.add_uniform(format!("{name}.a_src"), &[c.head_dim], c.head_dim, rng),
                        a_dst: store.add_uniform(format!("{name}.a_dst"), &[c.head_dim], c.head_dim, rng),
                    }
                })
                .collect();
            layers.push(GatLayer { heads, slope: c.attention_slope });
            cin = c.head_dim;
        }
        let giu = c.giu_dim();
        let spec = ConvSpec::same(c.g2s_dilation);
        let k = c.g2s_kernel;
        let diffuse1 = Conv2d::new(store, rng, &format!("{prefix}.diffuse1"), giu, feature_dim, k, spec, false);
        let diffuse2 = Conv2d::new(store, rng, &format!("{prefix}.diffuse2"), feature_dim, feature_dim, k, spec, false);
        let skip =
            (giu != feature_dim).then(|| Conv2d::pointwise(store, rng, &format!("{prefix}.skip"), giu, feature_dim, false));
        Ok(Self { config: c.clone(), reduce, patch1, patch2, layers, diffuse1, diffuse2, skip, out_dim: feature_dim })
    }

    pub fn config(&self) -> &TaeConfig {
        &self.config
    }

    pub fn layers(&self) -> &[GatLayer] {
        &self.layers
    }

    /// Concatenates base and detail maps and reduces them with a 1×1 convolution.
    pub fn s2g_reduce<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, base: Var, detail: Var) -> Var {
        assert_eq!(tape.shape(base), tape.shape(detail), "base/detail shape mismatch");
        let x = tape.concat(&[base, detail]);
        self.reduce.forward(tape, store, x)
    }

    /// One feature row per node, in node order: a `p×p` window around the
    /// node (mirrored at the borders), two unpadded 3×3 convolutions with
    /// leaky rectification, then a spatial mean. `None` for an empty graph.
    pub fn s2g_node_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        reduced: Var,
        graph: &VesselGraph,
    ) -> Option<Var> {
        if graph.is_empty() {
            return None;
        }
        let s = tape.shape(reduced);
        assert_eq!((s[1], s[2]), graph.image_size, "graph does not match the feature map");
        let slope = self.config.conv_slope;
        let rows: Vec<Var> = graph
            .nodes
            .iter()
            .map(|&(x, y)| {
                let p = tape.crop_reflect(reduced, x, y, self.config.patch_size);
                let p = self.patch1.forward(tape, store, p);
                let p = tape.leaky_relu(p, slope);
                let p = self.patch2.forward(tape, store, p);
                let p = tape.leaky_relu(p, slope);
                tape.mean_spatial(p)
            })
            .collect();
        let stacked = tape.concat(&rows);
        Some(tape.reshape(stacked, &[graph.node_count(), self.config.node_dim]))
    }

    /// One attention layer on `nodes: [N, C_in]`; output `[N, C_out]` is the
    /// mean over heads of `elu(alpha · (nodes · W))`.
    pub fn gat_layer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        layer: usize,
        nodes: Var,
        graph: &VesselGraph,
        aggregation: Aggregation,
    ) -> (Var, AttentionMap) {
        let n = graph.node_count();
        assert_eq!(tape.shape(nodes)[0], n, "one feature row per node");
        let mask = graph.neighborhood_mask();
        let l = &self.layers[layer];
        let mut outs = Vec::with_capacity(l.heads.len());
        let mut coefficients = Vec::with_capacity(l.heads.len());
        for head in &l.heads {
            let w = tape.param(store, head.w);
            let h = tape.matmul(nodes, w);
            let alpha = match aggregation {
                Aggregation::Attention => {
                    let c = tape.shape(h)[1];
                    let a_src = tape.param(store, head.a_src);
                    let a_src = tape.reshape(a_src, &[c, 1]);
                    let a_dst = tape.param(store, head.a_dst);
                    let a_dst = tape.reshape(a_dst, &[c, 1]);
                    let s = tape.matmul(h, a_src);
                    let t = tape.matmul(h, a_dst);
                    let e = tape.outer_sum(s, t);
                    let e = tape.leaky_relu(e, l.slope);
                    tape.masked_softmax_rows(e, Some(&mask))
                }
                Aggregation::Uniform => {
                    let mut a = vec![T::zero(); n * n];
                    for i in 0..n {
                        let deg = mask[i * n..(i + 1) * n].iter().filter(|&&m| m).count();
                        for j in 0..n {
                            if mask[i * n + j] {
                                a[i * n + j] = T::lit(1.0 / deg as f64);
                            }
                        }
                    }
                    tape.constant(Tensor::from_vec(&[n, n], a))
                }
            };
            coefficients.push(tape.value(alpha).data().iter().map(|v| v.f64()).collect());
            let m = tape.matmul(alpha, h);
            outs.push(tape.elu(m));
        }
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = tape.add(acc, o);
        }
        let out = tape.scale(acc, 1.0 / outs.len() as f64);
        (out, AttentionMap { nodes: n, coefficients })
    }

    /// Runs every attention layer in sequence.
    pub fn giu_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        nodes: Var,
        graph: &VesselGraph,
        aggregation: Aggregation,
    ) -> (Var, Vec<AttentionMap>) {
        let mut x = nodes;
        let mut maps = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (y, m) = self.gat_layer(tape, store, l, x, graph, aggregation);
            x = y;
            maps.push(m);
        }
        (x, maps)
    }

    /// Scatters node rows onto a zero map at their pixels (collisions sum),
    /// then two dilated convolutions plus a skip from the scattered map.
    /// An empty graph yields an all-zero `[D, H, W]` map.
    pub fn g2s_diffuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        nodes: Option<Var>,
        graph: &VesselGraph,
        diffuse: bool,
    ) -> Var {
        let (h, w) = graph.image_size;
        let Some(nodes) = nodes else {
            return tape.constant(Tensor::zeros(&[self.out_dim, h, w]));
        };
        let map = tape.scatter_nodes(nodes, &graph.nodes, h, w);
        let skip = match &self.skip {
            Some(c) => c.forward(tape, store, map),
            None => map,
        };
        if !diffuse {
            return skip;
        }
        let y = self.diffuse1.forward(tape, store, map);
        let y = tape.leaky_relu(y, self.config.conv_slope);
        let y = self.diffuse2.forward(tape, store, y);
        tape.add(y, skip)
    }

    /// Graph feature map `[D, H, W]` for one modality.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        base: Var,
        detail: Var,
        graph: &VesselGraph,
        options: TaeOptions,
    ) -> Var {
        if graph.is_empty() {
            return self.g2s_diffuse(tape, store, None, graph, options.diffuse);
        }
        let reduced = self.s2g_reduce(tape, store, base, detail);
        let nodes = self.s2g_node_features(tape, store, reduced, graph);
        let refined = nodes.map(|x| self.giu_forward(tape, store, x, graph, options.aggregation).0);
        self.g2s_diffuse(tape, store, refined, graph, options.diffuse)
    }
}
