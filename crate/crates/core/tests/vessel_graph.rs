mod common;

use std::collections::{BTreeSet, VecDeque};

use proptest::prelude::*;
use tagat_core::data::{generate_synthetic_pair, SyntheticSceneSpec};
use tagat_core::image::{Mask, Plane, NEIGHBORS_8};
use tagat_core::vessel::*;

use common::{draw, graph_sets, skeleton_cases};

fn y_shape() -> Vec<(usize, usize)> {
    let mut pts: Vec<(usize, usize)> = (11..=20).map(|y| (10, y)).collect();
    pts.push((10, 10));
    for k in 1..=7 {
        pts.push((10 - k, 10 - k));
        pts.push((10 + k, 10 - k));
    }
    pts
}

/// Independent tracer: nodes are pixels with one or at least three
/// neighbours; two nodes are joined when a flood fill through non-node pixels
/// (or a direct step) connects them.
fn brute_force_graph(m: &Mask) -> (BTreeSet<(usize, usize)>, BTreeSet<((usize, usize), (usize, usize))>) {
    let (h, w) = m.size();
    let nbrs = |x: usize, y: usize| -> Vec<(usize, usize)> {
        NEIGHBORS_8
            .iter()
            .filter(|(dx, dy)| m.get_signed(x as isize + dx, y as isize + dy))
            .map(|(dx, dy)| ((x as isize + dx) as usize, (y as isize + dy) as usize))
            .collect()
    };
    let mut nodes = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            if m.get(x, y) && nbrs(x, y).len() != 2 {
                nodes.insert((x, y));
            }
        }
    }
    let mut edges = BTreeSet::new();
    for &n in &nodes {
        let mut seen = BTreeSet::from([n]);
        let mut queue = VecDeque::from([n]);
        while let Some((x, y)) = queue.pop_front() {
            for q in nbrs(x, y) {
                if !seen.insert(q) {
                    continue;
                }
                if nodes.contains(&q) {
                    if q != n {
                        edges.insert((n.min(q), n.max(q)));
                    }
                } else {
                    queue.push_back(q);
                }
            }
        }
    }
    (nodes, edges)
}

#[test]
fn hand_drawn_skeletons_give_the_enumerated_graphs() {
    let cases = skeleton_cases();
    assert_eq!(cases.len(), 10);
    for c in cases {
        let g = extract_graph(&SkeletonImage(c.mask.clone()));
        g.validate().unwrap();
        let (nodes, edges) = graph_sets(&g);
        assert_eq!(nodes, c.nodes, "{}: nodes", c.name);
        assert_eq!(edges, c.edges, "{}: edges", c.name);
    }
}

#[test]
fn y_skeleton_matches_brute_force_trace() {
    let m = draw(24, 24, &y_shape());
    let g = extract_graph(&SkeletonImage(m.clone()));
    let (nodes, edges) = brute_force_graph(&m);
    assert_eq!(g.node_count(), 4);
    assert_eq!(g.edge_count(), 3);
    assert_eq!(g.nodes.iter().cloned().collect::<BTreeSet<_>>(), nodes);
    let got: BTreeSet<_> = g
        .edges
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (g.nodes[i], g.nodes[j]);
            (a.min(b), a.max(b))
        })
        .collect();
    assert_eq!(got, edges);
    g.validate().unwrap();
}

#[test]
fn y_mask_thins_to_one_component() {
    let thin = draw(24, 24, &y_shape());
    let thick = Mask::from_fn(24, 24, |x, y| {
        NEIGHBORS_8.iter().any(|(dx, dy)| thin.get_signed(x as isize + dx, y as isize + dy)) || thin.get(x, y)
    });
    let s = skeletonize(&thick);
    assert_eq!(thick.component_count(), 1);
    assert_eq!(s.mask().component_count(), 1);
    assert!(!s.has_solid_block());
    let g = extract_graph(&s);
    assert_eq!((g.node_count(), g.edge_count()), (4, 3));
}

#[test]
fn ring_gets_one_anchor_and_no_edges() {
    let m = Mask::from_fn(12, 12, |x, y| {
        ((x == 2 || x == 9) && (2..=9).contains(&y)) || ((y == 2 || y == 9) && (2..=9).contains(&x))
    });
    let s = skeletonize(&m);
    let g = extract_graph(&s);
    assert_eq!(g.node_count(), 1);
    assert!(g.edges.is_empty());
}

#[test]
fn short_spurs_are_pruned() {
    let line: Vec<(usize, usize)> = (2..20).map(|x| (x, 6)).collect();
    // a one-pixel bump turns into a junction cluster with only two edges
    let mut bump = line.clone();
    bump.push((10, 5));
    // a two-pixel spur
    let mut spur = bump.clone();
    spur.push((10, 4));
    for pts in [bump, spur] {
        let g = extract_graph(&SkeletonImage(draw(12, 22, &pts)));
        assert_eq!(g.nodes, vec![(2, 6), (19, 6)]);
        assert_eq!(g.edges, vec![(0, 1)]);
    }
    // a long side branch survives
    let mut branch = line;
    branch.extend((1..6).map(|y| (10, y)));
    let g = extract_graph(&SkeletonImage(draw(12, 22, &branch)));
    assert_eq!(g.node_count(), 4);
    assert_eq!(g.edge_count(), 3);
}

#[test]
fn isolated_pixel_is_a_node() {
    let g = extract_graph(&SkeletonImage(draw(5, 5, &[(2, 2)])));
    assert_eq!(g.nodes, vec![(2, 2)]);
    assert!(g.edges.is_empty());
}

#[test]
fn constant_image_segments_to_nothing() {
    let seg = Segmenter::Ridge(RidgeFilter::default());
    assert!(segment_vessels(&Plane::filled(32, 40, 0.4), &seg).is_empty());
}

#[test]
fn external_mask_passes_through() {
    let m = draw(10, 10, &[(1, 1), (2, 2), (5, 7)]);
    let out = segment_vessels(&Plane::filled(10, 10, 0.0), &Segmenter::External(&m));
    assert_eq!(out, m);
}

#[test]
fn ridge_baseline_recovers_synthetic_vessels() {
    let seg = Segmenter::Ridge(RidgeFilter::default());
    for seed in 0..4 {
        let p = generate_synthetic_pair(&SyntheticSceneSpec::new((64, 80), 3, seed)).unwrap();
        let truth = p.mask1.as_ref().unwrap();
        for img in [&p.image1, &p.image2] {
            let d = segment_vessels(img, &seg).dice(truth);
            assert!(d >= 0.7, "seed {seed}: dice {d}");
        }
    }
}

#[test]
fn single_vessel_gives_one_edge() {
    for seed in 0..6 {
        let p = generate_synthetic_pair(&SyntheticSceneSpec::new((64, 80), 1, seed)).unwrap();
        let s = skeletonize(p.mask1.as_ref().unwrap());
        assert!(!s.has_solid_block());
        let g = extract_graph(&s);
        assert_eq!((g.node_count(), g.edge_count()), (2, 1), "seed {seed}");
    }
}

#[test]
fn shared_masks_give_identical_graphs() {
    let p = generate_synthetic_pair(&SyntheticSceneSpec::new((64, 80), 3, 11)).unwrap();
    let g1 = extract_graph(&skeletonize(p.mask1.as_ref().unwrap()));
    let g2 = extract_graph(&skeletonize(p.mask2.as_ref().unwrap()));
    assert_eq!(g1, g2);
    assert!(g1.node_count() >= 6);
}

#[test]
fn graph_json_shape() {
    let g = VesselGraph { image_size: (4, 5), nodes: vec![(0, 1), (3, 2)], edges: vec![(0, 1)] };
    let v = serde_json::to_value(&g).unwrap();
    assert_eq!(v, serde_json::json!({"image_size": [4, 5], "nodes": [[0, 1], [3, 2]], "edges": [[0, 1]]}));
}

fn random_mask() -> impl Strategy<Value = Mask> {
    (4usize..14, 4usize..14).prop_flat_map(|(h, w)| {
        proptest::collection::vec(proptest::bool::weighted(0.45), h * w).prop_map(move |d| Mask::new(h, w, d))
    })
}

proptest! {
    #[test]
    fn extracted_graphs_are_well_formed(m in random_mask()) {
        let s = skeletonize(&m);
        let g = extract_graph(&s);
        prop_assert!(g.validate().is_ok());
        for &(x, y) in &g.nodes {
            prop_assert!(s.mask().get(x, y));
        }
        let mut sorted = g.nodes.clone();
        sorted.sort_by_key(|&(x, y)| (y, x));
        prop_assert_eq!(&sorted, &g.nodes);
    }

    #[test]
    fn thinning_keeps_components(m in random_mask()) {
        let s = skeletonize(&m);
        prop_assert_eq!(s.mask().component_count(), m.component_count());
        for (a, b) in s.mask().data().iter().zip(m.data()) {
            prop_assert!(!a | b);
        }
        prop_assert_eq!(skeletonize(s.mask()), s.clone());
    }

    #[test]
    fn border_padding_only_shifts_nodes(m in random_mask(), pad in 1usize..4) {
        let g = extract_graph(&skeletonize(&m));
        let gp = extract_graph(&skeletonize(&m.padded(pad)));
        let shifted: Vec<_> = g.nodes.iter().map(|&(x, y)| (x + pad, y + pad)).collect();
        prop_assert_eq!(gp.nodes, shifted);
        prop_assert_eq!(gp.edges, g.edges);
    }

    #[test]
    fn rescaling_never_adds_nodes(m in random_mask(), th in 2usize..30, tw in 2usize..30) {
        let g = extract_graph(&skeletonize(&m));
        let down = scale_graph(&g, (th, tw));
        prop_assert!(down.validate().is_ok());
        prop_assert!(down.node_count() <= g.node_count());
        let back = scale_graph(&down, g.image_size);
        prop_assert!(back.validate().is_ok());
        prop_assert!(back.node_count() <= g.node_count());
    }
}
