//! Vessel topology graph: segmentation adapter, thinning, and skeleton-to-graph
//! extraction.
//!
//! Nodes are skeleton endpoints and branch points (pixel coordinates); edges
//! join node pairs connected by a skeleton path with no node in between.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::image::{Mask, Plane, NEIGHBORS_8};

/// Undirected vessel graph over pixel coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VesselGraph {
    /// `(height, width)` of the image the coordinates refer to.
    pub image_size: (usize, usize),
    /// `(x, y)` = (column, row).
    pub nodes: Vec<(usize, usize)>,
    /// Index pairs with `i < j`, each stored once.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("node {index} at ({x}, {y}) lies outside the {height}x{width} image")]
    NodeOutOfBounds { index: usize, x: usize, y: usize, height: usize, width: usize },
    #[error("edge ({0}, {1}) references a missing node")]
    DanglingEdge(usize, usize),
    #[error("edge ({0}, {1}) is a self-loop or not stored with i < j")]
    BadEdge(usize, usize),
    #[error("duplicate node coordinate ({0}, {1})")]
    DuplicateNode(usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
}

impl VesselGraph {
    pub fn empty(image_size: (usize, usize)) -> Self {
        Self { image_size, nodes: Vec::new(), edges: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let (height, width) = self.image_size;
        let mut seen = BTreeSet::new();
        for (index, &(x, y)) in self.nodes.iter().enumerate() {
            if x >= width || y >= height {
                return Err(GraphError::NodeOutOfBounds { index, x, y, height, width });
            }
            if !seen.insert((x, y)) {
                return Err(GraphError::DuplicateNode(x, y));
            }
        }
        let mut edges = BTreeSet::new();
        for &(i, j) in &self.edges {
            if i >= self.nodes.len() || j >= self.nodes.len() {
                return Err(GraphError::DanglingEdge(i, j));
            }
            if i >= j {
                return Err(GraphError::BadEdge(i, j));
            }
            if !edges.insert((i, j)) {
                return Err(GraphError::DuplicateEdge(i, j));
            }
        }
        Ok(())
    }

    /// Dense `N×N` neighbourhood mask including self-loops, as used by graph
    /// attention.
    pub fn neighborhood_mask(&self) -> Vec<bool> {
        let n = self.nodes.len();
        let mut m = vec![false; n * n];
        for i in 0..n {
            m[i * n + i] = true;
        }
        for &(i, j) in &self.edges {
            m[i * n + j] = true;
            m[j * n + i] = true;
        }
        m
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == i || b == i).count()
    }

    /// Relabels node `i` as `perm[i]`, keeping the invariants.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.nodes.len());
        let mut nodes = vec![(0, 0); self.nodes.len()];
        for (i, &p) in perm.iter().enumerate() {
            nodes[p] = self.nodes[i];
        }
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(a, b)| {
                let (a, b) = (perm[a], perm[b]);
                (a.min(b), a.max(b))
            })
            .collect();
        edges.sort_unstable();
        Self { image_size: self.image_size, nodes, edges }
    }
}

/// Source of the binary vessel mask for an image.
#[derive(Clone, Debug)]
pub enum Segmenter<'a> {
    /// A precomputed mask, returned unchanged.
    External(&'a Mask),
    /// Built-in multiscale ridge filter with hysteresis thresholding.
    Ridge(RidgeFilter),
}

/// Multiscale Hessian ridge filter. Vessel polarity (bright on dark or dark on
/// bright) is chosen per image from the stronger response.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeFilter {
    pub scales: Vec<f64>,
    /// Blob suppression (ratio of Hessian eigenvalues).
    pub beta: f64,
    /// Strong-seed threshold as a fraction of the maximum response.
    pub high: f64,
    /// Weak threshold as a fraction of the maximum response.
    pub low: f64,
    /// Connected components smaller than this are discarded.
    pub min_component: usize,
}

impl Default for RidgeFilter {
    fn default() -> Self {
        Self { scales: vec![1.0, 1.5, 2.0, 3.0], beta: 0.5, high: 0.3, low: 0.12, min_component: 12 }
    }
}

pub fn segment_vessels(image: &Plane, segmenter: &Segmenter<'_>) -> Mask {
    match segmenter {
        Segmenter::External(m) => (*m).clone(),
        Segmenter::Ridge(f) => ridge_segment(image, f),
    }
}

fn gaussian_kernels(sigma: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let r = libm::ceil(3.0 * sigma) as isize;
    let s2 = sigma * sigma;
    let mut g = Vec::new();
    let mut g1 = Vec::new();
    let mut g2 = Vec::new();
    for i in -r..=r {
        let x = i as f64;
        let e = libm::exp(-x * x / (2.0 * s2));
        g.push(e);
        g1.push(-x / s2 * e);
        g2.push((x * x / (s2 * s2) - 1.0 / s2) * e);
    }
    let z: f64 = g.iter().sum();
    for v in g.iter_mut().chain(g1.iter_mut()).chain(g2.iter_mut()) {
        *v /= z;
    }
    // truncation leaves a small DC term in the second derivative
    let dc = g2.iter().sum::<f64>() / g2.len() as f64;
    g2.iter_mut().for_each(|v| *v -= dc);
    (g, g1, g2)
}

/// Hessian norms below this are treated as a flat image.
const FLAT_RESPONSE: f64 = 1e-4;

/// Per-pixel vesselness for bright (`.0`) and dark (`.1`) ridges, max over scales.
fn ridge_response(image: &Plane, f: &RidgeFilter) -> (Plane, Plane) {
    let (h, w) = image.size();
    let mut bright = Plane::filled(h, w, 0.0);
    let mut dark = Plane::filled(h, w, 0.0);
    for &sigma in &f.scales {
        let (g, g1, g2) = gaussian_kernels(sigma);
        let s2 = sigma * sigma;
        let ixx = image.filter_separable(&g2, &g);
        let iyy = image.filter_separable(&g, &g2);
        let ixy = image.filter_separable(&g1, &g1);
        let mut lam2 = Vec::with_capacity(h * w);
        let mut structure = 0.0f64;
        for i in 0..h * w {
            let (a, b, c) = (s2 * ixx.data()[i], s2 * iyy.data()[i], s2 * ixy.data()[i]);
            let tr = 0.5 * (a + b);
            let disc = libm::sqrt(0.25 * (a - b) * (a - b) + c * c);
            let (e1, e2) = (tr + disc, tr - disc);
            let (small, large) = if libm::fabs(e1) < libm::fabs(e2) { (e1, e2) } else { (e2, e1) };
            let s = libm::sqrt(small * small + large * large);
            structure = structure.max(s);
            lam2.push((small, large, s));
        }
        if structure < FLAT_RESPONSE {
            continue;
        }
        let c = 0.5 * structure;
        for (i, &(small, large, s)) in lam2.iter().enumerate() {
            if large == 0.0 {
                continue;
            }
            let rb = small / large;
            let v = libm::exp(-rb * rb / (2.0 * f.beta * f.beta)) * (1.0 - libm::exp(-s * s / (2.0 * c * c)));
            if large < 0.0 {
                bright.data_mut()[i] = bright.data()[i].max(v);
            } else {
                dark.data_mut()[i] = dark.data()[i].max(v);
            }
        }
    }
    (bright, dark)
}

fn ridge_segment(image: &Plane, f: &RidgeFilter) -> Mask {
    let (h, w) = image.size();
    let (bright, dark) = ridge_response(image, f);
    let resp = if top_mean(&bright) >= top_mean(&dark) { bright } else { dark };
    let max = resp.data().iter().cloned().fold(0.0, f64::max);
    if max < 1e-9 {
        return Mask::empty(h, w);
    }
    let (hi, lo) = (f.high * max, f.low * max);
    // hysteresis: grow strong seeds through weak pixels
    let mut out = Mask::empty(h, w);
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| resp.data()[i] >= hi).collect();
    for &i in &stack {
        out.set(i % w, i / w, true);
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for (dx, dy) in NEIGHBORS_8 {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if !out.get(nx, ny) && resp.get(nx, ny) >= lo {
                out.set(nx, ny, true);
                stack.push(ny * w + nx);
            }
        }
    }
    remove_small_components(&out, f.min_component)
}

/// Mean of the strongest 5% of responses; vessels are thin, so the bulk of
/// the image says little about their polarity.
fn top_mean(p: &Plane) -> f64 {
    let mut v = p.data().to_vec();
    v.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let k = (v.len() / 20).max(1);
    v[..k].iter().sum::<f64>() / k as f64
}

fn remove_small_components(m: &Mask, min: usize) -> Mask {
    let (h, w) = m.size();
    let mut out = m.clone();
    let mut seen = vec![false; h * w];
    for start in 0..h * w {
        if !m.data()[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut k = 0;
        while k < comp.len() {
            let p = comp[k];
            k += 1;
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for (dx, dy) in NEIGHBORS_8 {
                if m.get_signed(x + dx, y + dy) {
                    let q = (y + dy) as usize * w + (x + dx) as usize;
                    if !seen[q] {
                        seen[q] = true;
                        comp.push(q);
                    }
                }
            }
        }
        if comp.len() < min {
            for p in comp {
                out.set(p % w, p / w, false);
            }
        }
    }
    out
}

/// One-pixel-wide skeleton of a binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonImage(pub Mask);

impl SkeletonImage {
    pub fn mask(&self) -> &Mask {
        &self.0
    }

    /// Whether any 2×2 block is entirely foreground.
    pub fn has_solid_block(&self) -> bool {
        let m = &self.0;
        (0..m.height().saturating_sub(1)).any(|y| {
            (0..m.width().saturating_sub(1))
                .any(|x| m.get(x, y) && m.get(x + 1, y) && m.get(x, y + 1) && m.get(x + 1, y + 1))
        })
    }
}

/// 8-bit neighbourhood code, bit `k` set when neighbour `NEIGHBORS_8[k]` is foreground.
fn neighborhood_code(m: &Mask, x: usize, y: usize) -> u8 {
    let mut code = 0u8;
    for (k, (dx, dy)) in NEIGHBORS_8.iter().enumerate() {
        if m.get_signed(x as isize + dx, y as isize + dy) {
            code |= 1 << k;
        }
    }
    code
}

/// A pixel is simple (removable without changing topology) when its
/// foreground neighbours form exactly one 8-connected group and its
/// background neighbours form exactly one 4-connected group touching it.
fn is_simple(code: u8) -> bool {
    let fg = |k: usize| code & (1 << (k % 8)) != 0;
    // 8-components of foreground in the ring: positions k, k+1 are always
    // 8-adjacent; corners (odd k) also link k-1 and k+1 through adjacency,
    // which the ring walk already covers.
    let mut parent: [usize; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
    fn find(p: &mut [usize; 8], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    let adj8 = |a: usize, b: usize| {
        let (ax, ay) = NEIGHBORS_8[a];
        let (bx, by) = NEIGHBORS_8[b];
        (ax - bx).abs() <= 1 && (ay - by).abs() <= 1
    };
    let adj4 = |a: usize, b: usize| {
        let (ax, ay) = NEIGHBORS_8[a];
        let (bx, by) = NEIGHBORS_8[b];
        (ax - bx).abs() + (ay - by).abs() == 1
    };
    for a in 0..8 {
        for b in a + 1..8 {
            if fg(a) && fg(b) && adj8(a, b) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    let mut fg_roots = BTreeSet::new();
    for a in 0..8 {
        if fg(a) {
            fg_roots.insert(find(&mut parent, a));
        }
    }
    if fg_roots.len() != 1 {
        return false;
    }
    let mut parent: [usize; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
    for a in 0..8 {
        for b in a + 1..8 {
            if !fg(a) && !fg(b) && adj4(a, b) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    // only background components containing an edge-neighbour (even k) count
    let mut bg_roots = BTreeSet::new();
    for a in (0..8).step_by(2) {
        if !fg(a) {
            bg_roots.insert(find(&mut parent, a));
        }
    }
    bg_roots.len() == 1
}

fn simple_table() -> [bool; 256] {
    let mut t = [false; 256];
    for (code, v) in t.iter_mut().enumerate() {
        *v = is_simple(code as u8);
    }
    t
}

/// Topology-preserving thinning. Border pixels are peeled one layer at a time
/// from the north, south, east and west in turn; a pixel is deleted only if it
/// is simple and has at least two foreground neighbours, so curve endpoints
/// and 8-connected component counts are kept.
pub fn skeletonize(mask: &Mask) -> SkeletonImage {
    let table = simple_table();
    let mut m = mask.clone();
    let (h, w) = m.size();
    // north, south, east, west neighbour offsets
    let dirs: [(isize, isize); 4] = [(0, -1), (0, 1), (1, 0), (-1, 0)];
    loop {
        let mut changed = false;
        for &(dx, dy) in &dirs {
            let candidates: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| m.get(x, y) && !m.get_signed(x as isize + dx, y as isize + dy))
                .collect();
            for (x, y) in candidates {
                let code = neighborhood_code(&m, x, y);
                if code.count_ones() >= 2 && table[code as usize] {
                    m.set(x, y, false);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    SkeletonImage(m)
}

/// Edges shorter than this many pixel steps that end in a skeleton endpoint
/// and start at a branch point are removed as thinning spurs.
pub const MIN_EDGE_LENGTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NodeKind {
    End,
    Branch,
    Isolated,
    Anchor,
}

/// Extracts branch points and endpoints as nodes and traces the skeleton
/// paths between them as edges.
///
/// Adjacent branch pixels are merged into one node placed on the cluster
/// pixel closest to the cluster centroid. Rings without any endpoint or
/// branch point get a single anchor node (no edge). Endpoint spurs shorter
/// than [`MIN_EDGE_LENGTH`] are pruned, after which branch nodes left with
/// exactly two edges are dissolved into a single edge. Nodes come out in
/// raster order (row, then column).
pub fn extract_graph(skeleton: &SkeletonImage) -> VesselGraph {
    let m = skeleton.mask();
    let (h, w) = m.size();
    let idx = |x: usize, y: usize| y * w + x;
    let neighbors = |p: usize| -> Vec<usize> {
        let (x, y) = ((p % w) as isize, (p / w) as isize);
        NEIGHBORS_8
            .iter()
            .filter(|(dx, dy)| m.get_signed(x + dx, y + dy))
            .map(|(dx, dy)| idx((x + dx) as usize, (y + dy) as usize))
            .collect()
    };
    let count: Vec<usize> = (0..h * w).map(|p| if m.data()[p] { neighbors(p).len() } else { 0 }).collect();

    let mut node_of: Vec<Option<usize>> = vec![None; h * w];
    let mut nodes: Vec<(usize, NodeKind)> = Vec::new(); // (representative pixel, kind)

    // branch clusters
    for start in 0..h * w {
        if !m.data()[start] || count[start] < 3 || node_of[start].is_some() {
            continue;
        }
        let id = nodes.len();
        let mut cluster = vec![start];
        node_of[start] = Some(id);
        let mut k = 0;
        while k < cluster.len() {
            let p = cluster[k];
            k += 1;
            for q in neighbors(p) {
                if count[q] >= 3 && node_of[q].is_none() {
                    node_of[q] = Some(id);
                    cluster.push(q);
                }
            }
        }
        // squared distance to the centroid scaled by n², in exact integers
        let n = cluster.len() as i64;
        let sx: i64 = cluster.iter().map(|&p| (p % w) as i64).sum();
        let sy: i64 = cluster.iter().map(|&p| (p / w) as i64).sum();
        let d = |p: usize| {
            let (dx, dy) = (n * (p % w) as i64 - sx, n * (p / w) as i64 - sy);
            dx * dx + dy * dy
        };
        let rep = *cluster.iter().min_by_key(|&&p| (d(p), p)).unwrap();
        nodes.push((rep, NodeKind::Branch));
    }
    for p in 0..h * w {
        if m.data()[p] && count[p] <= 1 {
            node_of[p] = Some(nodes.len());
            nodes.push((p, if count[p] == 1 { NodeKind::End } else { NodeKind::Isolated }));
        }
    }

    // trace paths (pixels with exactly two neighbours) between nodes
    let mut edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let add_edge = |edges: &mut BTreeMap<(usize, usize), usize>, a: usize, b: usize, len: usize| {
        if a != b {
            let key = (a.min(b), a.max(b));
            let e = edges.entry(key).or_insert(len);
            *e = (*e).min(len);
        }
    };
    let mut visited = vec![false; h * w];
    for s in 0..h * w {
        let Some(a) = node_of[s] else { continue };
        for q in neighbors(s) {
            if let Some(b) = node_of[q] {
                add_edge(&mut edges, a, b, 1);
                continue;
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let (mut prev, mut cur, mut len) = (s, q, 1);
            loop {
                let Some(next) = neighbors(cur).into_iter().find(|&n| n != prev) else { break };
                len += 1;
                if let Some(b) = node_of[next] {
                    add_edge(&mut edges, a, b, len);
                    break;
                }
                if visited[next] {
                    break;
                }
                visited[next] = true;
                prev = cur;
                cur = next;
            }
        }
    }
    // closed rings with no node
    for p in 0..h * w {
        if !m.data()[p] || visited[p] || node_of[p].is_some() {
            continue;
        }
        node_of[p] = Some(nodes.len());
        nodes.push((p, NodeKind::Anchor));
        let mut stack = vec![p];
        visited[p] = true;
        while let Some(c) = stack.pop() {
            for q in neighbors(c) {
                if !visited[q] && node_of[q].is_none() {
                    visited[q] = true;
                    stack.push(q);
                }
            }
        }
    }

    let (alive, edges) = prune_spurs(&nodes, edges);

    // raster order relabelling
    let mut order: Vec<usize> = (0..nodes.len()).filter(|&i| alive[i]).collect();
    order.sort_by_key(|&i| nodes[i].0);
    let mut new_id = vec![usize::MAX; nodes.len()];
    for (k, &i) in order.iter().enumerate() {
        new_id[i] = k;
    }
    let mut out_edges: Vec<(usize, usize)> = edges
        .keys()
        .map(|&(a, b)| {
            let (a, b) = (new_id[a], new_id[b]);
            (a.min(b), a.max(b))
        })
        .collect();
    out_edges.sort_unstable();
    out_edges.dedup();
    VesselGraph {
        image_size: (h, w),
        nodes: order.iter().map(|&i| (nodes[i].0 % w, nodes[i].0 / w)).collect(),
        edges: out_edges,
    }
}

type EdgeMap = BTreeMap<(usize, usize), usize>;

fn prune_spurs(nodes: &[(usize, NodeKind)], mut edges: EdgeMap) -> (Vec<bool>, EdgeMap) {
    let n = nodes.len();
    let degree = |edges: &EdgeMap, i: usize| edges.keys().filter(|&&(a, b)| a == i || b == i).count();
    let mut alive = vec![true; n];
    let spurs: Vec<((usize, usize), usize)> = edges
        .iter()
        .filter(|(&(a, b), &len)| {
            if len >= MIN_EDGE_LENGTH {
                return false;
            }
            let (ka, kb) = (nodes[a].1, nodes[b].1);
            (ka == NodeKind::End && kb == NodeKind::Branch && degree(&edges, b) >= 3)
                || (kb == NodeKind::End && ka == NodeKind::Branch && degree(&edges, a) >= 3)
        })
        .map(|(&k, &v)| (k, v))
        .collect();
    for ((a, b), _) in &spurs {
        let end = if nodes[*a].1 == NodeKind::End { *a } else { *b };
        edges.remove(&(*a, *b));
        alive[end] = false;
    }
    // a branch cluster with two edges is just a bend in a longer vessel
    for b in (0..n).filter(|&i| nodes[i].1 == NodeKind::Branch) {
        let incident: Vec<((usize, usize), usize)> =
            edges.iter().filter(|(&(x, y), _)| x == b || y == b).map(|(&k, &v)| (k, v)).collect();
        if incident.len() != 2 {
            continue;
        }
        let other = |k: (usize, usize)| if k.0 == b { k.1 } else { k.0 };
        let (u, v) = (other(incident[0].0), other(incident[1].0));
        for (k, _) in &incident {
            edges.remove(k);
        }
        alive[b] = false;
        if u != v {
            let key = (u.min(v), u.max(v));
            let len = incident[0].1 + incident[1].1;
            let e = edges.entry(key).or_insert(len);
            *e = (*e).min(len);
        }
    }
    (alive, edges)
}

/// Maps node coordinates onto a resized image. Pixel centres are scaled,
/// rounded and clamped; nodes landing on the same pixel are merged (first
/// occurrence keeps its position in the node order) and their edges
/// re-indexed, dropping self-loops and duplicates.
pub fn scale_graph(graph: &VesselGraph, new_size: (usize, usize)) -> VesselGraph {
    let (h, w) = graph.image_size;
    let (nh, nw) = new_size;
    assert!(nh > 0 && nw > 0, "target size must be positive");
    if (h, w) == (nh, nw) {
        return graph.clone();
    }
    let map = |v: usize, from: usize, to: usize| -> usize {
        let s = to as f64 / from as f64;
        let c = libm::round((v as f64 + 0.5) * s - 0.5);
        (c.max(0.0) as usize).min(to - 1)
    };
    let mut index_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut nodes = Vec::new();
    let mut remap = Vec::with_capacity(graph.nodes.len());
    for &(x, y) in &graph.nodes {
        let c = (map(x, w, nw), map(y, h, nh));
        let id = *index_of.entry(c).or_insert_with(|| {
            nodes.push(c);
            nodes.len() - 1
        });
        remap.push(id);
    }
    let mut edges: Vec<(usize, usize)> = graph
        .edges
        .iter()
        .filter_map(|&(a, b)| {
            let (a, b) = (remap[a], remap[b]);
            (a != b).then(|| (a.min(b), a.max(b)))
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    VesselGraph { image_size: new_size, nodes, edges }
}

/// Segment (or pass through), thin and extract in one call.
pub fn graph_from_image(image: &Plane, segmenter: &Segmenter<'_>) -> VesselGraph {
    let mask = segment_vessels(image, segmenter);
    extract_graph(&skeletonize(&mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draw(h: usize, w: usize, pts: &[(usize, usize)]) -> SkeletonImage {
        let mut m = Mask::empty(h, w);
        for &(x, y) in pts {
            m.set(x, y, true);
        }
        SkeletonImage(m)
    }

    #[test]
    fn straight_line_gives_two_endpoints() {
        let s = draw(5, 10, &(1..9).map(|x| (x, 2)).collect::<Vec<_>>());
        let g = extract_graph(&s);
        assert_eq!(g.nodes, vec![(1, 2), (8, 2)]);
        assert_eq!(g.edges, vec![(0, 1)]);
    }

    #[test]
    fn empty_skeleton_gives_empty_graph() {
        let g = extract_graph(&SkeletonImage(Mask::empty(4, 4)));
        assert!(g.nodes.is_empty() && g.edges.is_empty());
        assert_eq!(g.image_size, (4, 4));
    }

    #[test]
    fn simple_point_table_basics() {
        // isolated pixel: no foreground neighbours, not simple
        assert!(!is_simple(0));
        // single north neighbour: simple (an endpoint)
        assert!(is_simple(0b0000_0001));
        // north and south only: removing disconnects
        assert!(!is_simple(0b0001_0001));
        // all eight: interior point
        assert!(!is_simple(0xff));
    }

    #[test]
    fn thick_bar_thins_to_one_row() {
        let m = Mask::from_fn(11, 20, |x, y| (3..8).contains(&y) && (2..18).contains(&x));
        let s = skeletonize(&m);
        let rows: BTreeSet<usize> =
            (0..11).filter(|&y| (0..20).any(|x| s.mask().get(x, y))).collect();
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), vec![5]);
        let xs: Vec<usize> = (0..20).filter(|&x| s.mask().get(x, 5)).collect();
        assert!(xs.len() >= 10);
        assert!(xs.windows(2).all(|p| p[1] == p[0] + 1));
    }

    #[test]
    fn scaling_to_same_size_is_identity() {
        let g = VesselGraph { image_size: (10, 10), nodes: vec![(1, 1), (8, 3)], edges: vec![(0, 1)] };
        assert_eq!(scale_graph(&g, (10, 10)), g);
        let half = scale_graph(&g, (5, 5));
        assert_eq!(half.nodes, vec![(0, 0), (4, 1)]);
    }
}
