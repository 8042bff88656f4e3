//! Independent oracles shared by the core integration tests and the
//! acceptance suite (which includes this file by path).
#![allow(dead_code)]

pub mod metric_reference;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagat_core::image::Mask;
use tagat_core::vessel::VesselGraph;
use tagat_core::{ParamStore, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Worst relative error found by [`fd_check`], with where it happened.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub worst: f64,
    pub at: String,
    pub checked: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst < tol
    }
}

/// Compares tape gradients of a scalar function with central differences.
///
/// `f` receives the input variables (created as differentiable leaves) and
/// must return a scalar. Up to `per_tensor` randomly chosen coordinates of
/// every input and every parameter are perturbed by ±`step`. The error of a
/// tensor is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over its
/// sampled coordinates; tensors whose gradients both vanish are skipped.
pub fn fd_check(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Var,
    per_tensor: usize,
    seed: u64,
) -> FdReport {
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, store, &vars);
        assert_eq!(tape.value(out).numel(), 1, "fd_check needs a scalar output");
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, store, &vars);
    let grads = tape.backward(out);

    let mut r = rng(seed);
    let step = 1e-5;
    let mut report = FdReport { worst: 0.0, at: String::new(), checked: 0 };
    let record = |name: String, analytic: &[f64], numeric: &[f64], report: &mut FdReport| {
        let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        report.checked += 1;
        if scale < 1e-12 {
            return;
        }
        let e = diff / scale;
        if e > report.worst {
            report.worst = e;
            report.at = name;
        }
    };
    let pick = |n: usize, r: &mut ChaCha8Rng| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(r);
        idx.truncate(per_tensor);
        idx
    };

    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let g = grads.wrt(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let idx = pick(n, &mut r);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &idx {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            numeric.push((eval(store, &plus) - eval(store, &minus)) / (2.0 * step));
            analytic.push(g[i]);
        }
        record(format!("input {k}"), &analytic, &numeric, &mut report);
    }

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let g = grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let idx = pick(n, &mut r);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &idx {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[i] += step;
            let p = eval(&s, inputs);
            s.get_mut(id).data_mut()[i] -= 2.0 * step;
            let m = eval(&s, inputs);
            numeric.push((p - m) / (2.0 * step));
            analytic.push(g[i]);
        }
        record(store.name(id).to_string(), &analytic, &numeric, &mut report);
    }
    report
}

/// `sum(x ⊙ R)` for a fixed random `R`, turning a map into a scalar that
/// exercises every output element.
pub fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut r = rng(seed);
    let w = tape.constant(random_tensor(&shape, &mut r));
    let y = tape.mul(x, w);
    tape.sum(y)
}

/// Random simple graph on `n` distinct pixels of an `h×w` frame.
pub fn random_graph(n: usize, edge_prob: f64, size: (usize, usize), rng: &mut impl Rng) -> VesselGraph {
    let (h, w) = size;
    let mut seen = BTreeSet::new();
    let mut nodes = Vec::new();
    while nodes.len() < n {
        let p = (rng.random_range(0..w), rng.random_range(0..h));
        if seen.insert(p) {
            nodes.push(p);
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(edge_prob) {
                edges.push((i, j));
            }
        }
    }
    VesselGraph { image_size: size, nodes, edges }
}

/// One head of a graph-attention layer written out directly from its
/// definition, with plain nested vectors.
pub struct BruteHead {
    /// `w[c_in][c_out]`
    pub w: Vec<Vec<f64>>,
    /// Scoring vector applied to the centre node's projection.
    pub a_centre: Vec<f64>,
    /// Scoring vector applied to the neighbour's projection.
    pub a_neighbour: Vec<f64>,
}

/// Returns the layer output and, per head, the attention matrix (zero off
/// the neighbourhood). Neighbourhoods include the node itself.
pub fn brute_gat_layer(
    x: &[Vec<f64>],
    graph: &VesselGraph,
    heads: &[BruteHead],
    slope: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = x.len();
    let mut nbrs: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
    for &(i, j) in &graph.edges {
        nbrs[i].insert(j);
        nbrs[j].insert(i);
    }
    let c_out = heads[0].w[0].len();
    let mut out = vec![vec![0.0; c_out]; n];
    let mut alphas = Vec::new();
    for head in heads {
        let proj: Vec<Vec<f64>> = x
            .iter()
            .map(|row| (0..c_out).map(|o| row.iter().enumerate().map(|(c, v)| v * head.w[c][o]).sum()).collect())
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let mut alpha = vec![vec![0.0; n]; n];
        for i in 0..n {
            let scores: Vec<(usize, f64)> = nbrs[i]
                .iter()
                .map(|&j| {
                    let e = dot(&head.a_centre, &proj[i]) + dot(&head.a_neighbour, &proj[j]);
                    (j, if e > 0.0 { e } else { slope * e })
                })
                .collect();
            let m = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - m).exp()).sum();
            for &(j, e) in &scores {
                alpha[i][j] = (e - m).exp() / z;
            }
            for o in 0..c_out {
                let agg: f64 = nbrs[i].iter().map(|&j| alpha[i][j] * proj[j][o]).sum();
                let elu = if agg > 0.0 { agg } else { agg.exp() - 1.0 };
                out[i][o] += elu / heads.len() as f64;
            }
        }
        alphas.push(alpha);
    }
    (out, alphas)
}

pub fn draw(h: usize, w: usize, pts: &[(usize, usize)]) -> Mask {
    let mut m = Mask::empty(h, w);
    for &(x, y) in pts {
        m.set(x, y, true);
    }
    m
}

/// A hand-drawn skeleton with its exact expected graph, nodes given by
/// position and edges as position pairs.
pub struct SkeletonCase {
    pub name: &'static str,
    pub mask: Mask,
    pub nodes: BTreeSet<(usize, usize)>,
    pub edges: BTreeSet<((usize, usize), (usize, usize))>,
}

fn case(
    name: &'static str,
    size: (usize, usize),
    pts: Vec<(usize, usize)>,
    nodes: &[(usize, usize)],
    edges: &[((usize, usize), (usize, usize))],
) -> SkeletonCase {
    SkeletonCase {
        name,
        mask: draw(size.0, size.1, &pts),
        nodes: nodes.iter().copied().collect(),
        edges: edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect(),
    }
}

/// The ten skeletons with enumerated answers.
pub fn skeleton_cases() -> Vec<SkeletonCase> {
    let mut v = Vec::new();

    v.push(case("line", (12, 20), (3..=16).map(|x| (x, 6)).collect(), &[(3, 6), (16, 6)], &[((3, 6), (16, 6))]));

    // Y: stem up from (10,20) to the fork at (10,10), arms to (3,3) and (17,3)
    let mut y = vec![(10, 10)];
    y.extend((11..=20).map(|r| (10, r)));
    for k in 1..=7 {
        y.push((10 - k, 10 - k));
        y.push((10 + k, 10 - k));
    }
    v.push(case(
        "Y",
        (24, 24),
        y,
        &[(10, 10), (10, 20), (3, 3), (17, 3)],
        &[((10, 10), (10, 20)), ((10, 10), (3, 3)), ((10, 10), (17, 3))],
    ));

    // X: two diagonals crossing at (10,10)
    let mut x = Vec::new();
    for k in -7i32..=7 {
        x.push(((10 + k) as usize, (10 + k) as usize));
        x.push(((10 + k) as usize, (10 - k) as usize));
    }
    x.sort();
    x.dedup();
    v.push(case(
        "X",
        (24, 24),
        x,
        &[(10, 10), (3, 3), (17, 17), (3, 17), (17, 3)],
        &[((10, 10), (3, 3)), ((10, 10), (17, 17)), ((10, 10), (3, 17)), ((10, 10), (17, 3))],
    ));

    // T: bar y = 4 from x = 2..=18, stem x = 10 from y = 5..=16
    let mut t: Vec<(usize, usize)> = (2..=18).map(|c| (c, 4)).collect();
    t.extend((5..=16).map(|r| (10, r)));
    v.push(case(
        "T",
        (20, 22),
        t,
        &[(10, 4), (2, 4), (18, 4), (10, 16)],
        &[((10, 4), (2, 4)), ((10, 4), (18, 4)), ((10, 4), (10, 16))],
    ));

    // loop: square ring with cut corners (every pixel has two neighbours),
    // anchored at its first pixel in raster order
    let mut ring = Vec::new();
    for c in 5..=11 {
        ring.push((c, 4));
        ring.push((c, 12));
        ring.push((4, c));
        ring.push((12, c));
    }
    v.push(case("loop", (16, 16), ring, &[(5, 4)], &[]));

    // two separate segments
    let mut two: Vec<(usize, usize)> = (2..=9).map(|c| (c, 3)).collect();
    two.extend((5..=12).map(|r| (14, r)));
    v.push(case(
        "two components",
        (16, 18),
        two,
        &[(2, 3), (9, 3), (14, 5), (14, 12)],
        &[((2, 3), (9, 3)), ((14, 5), (14, 12))],
    ));

    v.push(case("single pixel", (8, 8), vec![(4, 3)], &[(4, 3)], &[]));

    v.push(case("empty", (8, 8), vec![], &[], &[]));

    // dense junction cluster: in a 4-arm plus the centre and its four
    // neighbours all have three or more neighbours; one node at the centre
    let mut dense: Vec<(usize, usize)> = (2..=9).map(|c| (c, 10)).collect();
    dense.extend((11..=18).map(|c| (c, 10)));
    dense.extend((2..=9).map(|r| (10, r)));
    dense.extend((11..=18).map(|r| (10, r)));
    dense.push((10, 10));
    v.push(case(
        "dense junction",
        (21, 21),
        dense,
        &[(10, 10), (2, 10), (18, 10), (10, 2), (10, 18)],
        &[((10, 10), (2, 10)), ((10, 10), (18, 10)), ((10, 10), (10, 2)), ((10, 10), (10, 18))],
    ));

    // spur: a long line with a 2-step spur hanging off (10,6); the spur is
    // pruned and the remaining degree-2 junction dissolves
    let mut spur: Vec<(usize, usize)> = (2..=18).map(|c| (c, 6)).collect();
    spur.push((10, 7));
    spur.push((10, 8));
    v.push(case("spur pruning", (12, 21), spur, &[(2, 6), (18, 6)], &[((2, 6), (18, 6))]));

    v
}

/// Node and edge sets of a graph, keyed by position.
pub fn graph_sets(
    g: &VesselGraph,
) -> (BTreeSet<(usize, usize)>, BTreeSet<((usize, usize), (usize, usize))>) {
    let nodes = g.nodes.iter().copied().collect();
    let edges = g
        .edges
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (g.nodes[i], g.nodes[j]);
            (a.min(b), a.max(b))
        })
        .collect();
    (nodes, edges)
}
