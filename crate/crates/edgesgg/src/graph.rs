//! Scene-graph data model: detections, the primitive candidate graph, and
//! the edge dual transformation.
//!
//! The primitive graph holds one undirected candidate edge per object
//! pair, each carrying a geometric descriptor for both directions. The
//! edge dual graph turns every primitive edge into a node and connects
//! two dual nodes exactly when their primitive edges share an object.
//! Construction is pure: graphs are immutable once built and safe to
//! share across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the directional box-geometry descriptor attached to each
/// candidate edge: subject box, object box, union box, center offset,
/// and log width/height ratios.
pub const GEO_DIM: usize = 16;

/// Axis-aligned box as (x1, y1, x2, y2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    /// Validate the normalized-image-coordinate invariant: strictly
    /// positive extent, all coordinates inside the unit square.
    pub fn validate_unit(&self) -> Result<()> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::Data(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|&v| inside(v)) {
            return Err(Error::Data("box coordinates outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

/// One detected object: appearance feature, box, and class information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: u64,
    /// Appearance feature of length `d_obj`; may be empty for
    /// structure-only scenes (e.g. the transform CLI).
    #[serde(default)]
    pub feature: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Per-class scores over the object vocabulary; empty when unknown.
    #[serde(default)]
    pub label_scores: Vec<f64>,
    pub label: usize,
}

impl Detection {
    pub fn new(
        id: u64,
        feature: Vec<f64>,
        bbox: BBox,
        label_scores: Vec<f64>,
        label: usize,
    ) -> Result<Detection> {
        bbox.validate_unit()?;
        if !label_scores.is_empty() {
            let argmax = argmax_slice(&label_scores);
            if argmax != label {
                return Err(Error::Data(format!(
                    "label {label} disagrees with argmax of scores ({argmax})"
                )));
            }
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite detection feature".into()));
        }
        Ok(Detection {
            id,
            feature,
            bbox,
            label_scores,
            label,
        })
    }
}

fn argmax_slice(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Directional geometric descriptors for one undirected candidate edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeGeometry {
    /// Descriptor with the lower-id endpoint as subject.
    pub forward: Vec<f64>,
    /// Descriptor with the higher-id endpoint as subject.
    pub reverse: Vec<f64>,
}

/// Descriptor of the (subject, object) box pair: both boxes, their union,
/// center offset and log size ratios. All entries are finite for valid
/// boxes.
pub fn geometric_descriptor(subject: &BBox, object: &BBox) -> Vec<f64> {
    let u = subject.union(object);
    let (scx, scy) = subject.center();
    let (ocx, ocy) = object.center();
    vec![
        subject.x1,
        subject.y1,
        subject.x2,
        subject.y2,
        object.x1,
        object.y1,
        object.x2,
        object.y2,
        u.x1,
        u.y1,
        u.x2,
        u.y2,
        ocx - scx,
        ocy - scy,
        (subject.width() / object.width()).ln(),
        (subject.height() / object.height()).ln(),
    ]
}

/// How the candidate edge set of a primitive graph is chosen.
#[derive(Debug, Clone)]
pub enum GraphMode {
    /// Every unordered pair of detections.
    Complete,
    /// An explicit list of undirected (id, id) pairs.
    Pairs(Vec<(u64, u64)>),
}

/// Candidate graph over detections: nodes are objects, edges are
/// undirected relation candidates with per-direction geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveGraph {
    pub nodes: Vec<Detection>,
    /// Undirected pairs as (min_id, max_id), lexicographically sorted.
    pub edges: Vec<(u64, u64)>,
    /// One geometry pair per edge, co-indexed with `edges`.
    pub relation_features: Vec<EdgeGeometry>,
}

impl PrimitiveGraph {
    /// Position of a node id in `nodes`.
    pub fn node_position(&self, id: u64) -> Option<usize> {
        self.nodes.iter().position(|d| d.id == id)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Build the candidate graph over detections.
///
/// In complete mode all `n(n-1)/2` unordered pairs become edges. Edge
/// order is lexicographic by (min_id, max_id) so construction is
/// deterministic.
pub fn build_primitive_graph(
    detections: &[Detection],
    mode: &GraphMode,
) -> Result<PrimitiveGraph> {
    if detections.is_empty() {
        return Err(Error::EmptyScene);
    }
    let d_obj = detections[0].feature.len();
    if detections.iter().any(|d| d.feature.len() != d_obj) {
        return Err(Error::DimensionMismatch(
            "detections carry features of different lengths".into(),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in detections {
        if !seen.insert(d.id) {
            return Err(Error::Data(format!("duplicate detection id {}", d.id)));
        }
    }

    let mut edges: Vec<(u64, u64)> = match mode {
        GraphMode::Complete => {
            let mut ids: Vec<u64> = detections.iter().map(|d| d.id).collect();
            ids.sort_unstable();
            let mut pairs = Vec::new();
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    pairs.push((ids[i], ids[j]));
                }
            }
            pairs
        }
        GraphMode::Pairs(pairs) => {
            let mut normalized = Vec::with_capacity(pairs.len());
            let mut dedup = std::collections::BTreeSet::new();
            for &(a, b) in pairs {
                if a == b {
                    return Err(Error::Data(format!("self-loop on node {a}")));
                }
                if !seen.contains(&a) || !seen.contains(&b) {
                    return Err(Error::Data(format!("edge ({a}, {b}) references unknown id")));
                }
                let pair = (a.min(b), a.max(b));
                if !dedup.insert(pair) {
                    return Err(Error::Data(format!(
                        "duplicate edge ({}, {})",
                        pair.0, pair.1
                    )));
                }
                normalized.push(pair);
            }
            normalized
        }
    };
    edges.sort_unstable();

    let mut relation_features = Vec::with_capacity(edges.len());
    for &(a, b) in &edges {
        let box_a = detections[detections.iter().position(|d| d.id == a).unwrap()].bbox;
        let box_b = detections[detections.iter().position(|d| d.id == b).unwrap()].bbox;
        relation_features.push(EdgeGeometry {
            forward: geometric_descriptor(&box_a, &box_b),
            reverse: geometric_descriptor(&box_b, &box_a),
        });
    }

    Ok(PrimitiveGraph {
        nodes: detections.to_vec(),
        edges,
        relation_features,
    })
}

/// An undirected dual edge: primitive edges `i` and `j` (indices into the
/// primitive edge list, `i < j`) share exactly the node `shared`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualEdge {
    pub i: usize,
    pub j: usize,
    pub shared: u64,
}

/// Edge dual of a primitive graph: one dual node per primitive edge, one
/// dual edge per unordered pair of primitive edges sharing an object.
///
/// Per-incidence message features live in the model's forward state, not
/// here; the dual graph itself is pure structure. Isolated detections
/// leave no trace in the dual since they lie on no edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDualGraph {
    /// Primitive edge indices, one per dual node (the identity map, kept
    /// explicit for the serialized form).
    pub dual_nodes: Vec<usize>,
    pub dual_edges: Vec<DualEdge>,
}

impl EdgeDualGraph {
    /// Primitive edges adjacent to `edge_id` in the dual, each with the
    /// shared node id, sorted by neighbor edge id.
    pub fn neighborhood(&self, edge_id: usize) -> Result<Vec<(usize, u64)>> {
        if !self.dual_nodes.contains(&edge_id) {
            return Err(Error::InvalidArgument(format!(
                "unknown edge id {edge_id}"
            )));
        }
        let mut out = Vec::new();
        for de in &self.dual_edges {
            if de.i == edge_id {
                out.push((de.j, de.shared));
            } else if de.j == edge_id {
                out.push((de.i, de.shared));
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn n_dual_nodes(&self) -> usize {
        self.dual_nodes.len()
    }

    pub fn n_dual_edges(&self) -> usize {
        self.dual_edges.len()
    }
}

/// Primitive edges adjacent to `edge_id` in the dual graph with their
/// shared node, sorted by neighbor edge id.
pub fn dual_neighborhood(dg: &EdgeDualGraph, edge_id: usize) -> Result<Vec<(usize, u64)>> {
    dg.neighborhood(edge_id)
}

/// Transform a primitive graph into its edge dual.
///
/// Dual nodes are the primitive edges; two dual nodes are connected
/// exactly when their primitive edges share one object, and the shared
/// object is recorded on the dual edge. Ordering is deterministic
/// (ascending edge-index pairs).
pub fn build_edge_dual_graph(g: &PrimitiveGraph) -> Result<EdgeDualGraph> {
    if g.edges.is_empty() {
        return Err(Error::NoRelations);
    }
    let mut dual_edges = Vec::new();
    for i in 0..g.edges.len() {
        for j in i + 1..g.edges.len() {
            let (a1, b1) = g.edges[i];
            let (a2, b2) = g.edges[j];
            let mut shared = None;
            let mut count = 0;
            for x in [a1, b1] {
                if x == a2 || x == b2 {
                    shared = Some(x);
                    count += 1;
                }
            }
            match count {
                0 => {}
                1 => dual_edges.push(DualEdge {
                    i,
                    j,
                    shared: shared.unwrap(),
                }),
                _ => {
                    return Err(Error::Data(format!(
                        "edges {i} and {j} share two nodes; multigraphs are unsupported"
                    )))
                }
            }
        }
    }
    Ok(EdgeDualGraph {
        dual_nodes: (0..g.edges.len()).collect(),
        dual_edges,
    })
}

/// Closed-form dual counts for a complete graph on `n_nodes` nodes:
/// `n(n-1)/2` dual nodes and `[n(n-1)/2] * (n-2)` dual edges. Used as an
/// oracle cross-check against [`build_edge_dual_graph`].
pub fn validate_dual_counts(n_nodes: u64) -> Result<(u64, u64)> {
    if n_nodes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 nodes, got {n_nodes}"
        )));
    }
    let e = n_nodes * (n_nodes - 1) / 2;
    Ok((e, e * (n_nodes - 2)))
}

/// Scene JSON: `{"nodes":[{"id","box","label"}],"edges":[{"u","v"}]}`.
/// Features are not part of this structural format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub nodes: Vec<SceneFileNode>,
    #[serde(default)]
    pub edges: Vec<SceneFileEdge>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFileNode {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFileEdge {
    pub u: u64,
    pub v: u64,
}

impl SceneFile {
    pub fn to_detections(&self) -> Result<Vec<Detection>> {
        self.nodes
            .iter()
            .map(|n| Detection::new(n.id, Vec::new(), n.bbox, Vec::new(), n.label))
            .collect()
    }

    /// Edge list for graph building; an absent or empty edge list means a
    /// complete candidate graph.
    pub fn graph_mode(&self) -> GraphMode {
        if self.edges.is_empty() {
            GraphMode::Complete
        } else {
            GraphMode::Pairs(self.edges.iter().map(|e| (e.u, e.v)).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(id: u64, x1: f64, y1: f64, x2: f64, y2: f64) -> Detection {
        Detection::new(id, Vec::new(), BBox::new(x1, y1, x2, y2), Vec::new(), 0).unwrap()
    }

    fn grid_detections(n: usize) -> Vec<Detection> {
        (0..n)
            .map(|i| {
                let x = 0.05 + 0.9 * (i as f64) / (n as f64);
                det(i as u64, x, 0.1, x + 0.05, 0.2)
            })
            .collect()
    }

    /// Independent enumeration oracle: count unordered pairs of distinct
    /// edges sharing exactly one node.
    fn count_adjacent_pairs(edges: &[(u64, u64)]) -> usize {
        let mut count = 0;
        for i in 0..edges.len() {
            for j in i + 1..edges.len() {
                let (a1, b1) = edges[i];
                let (a2, b2) = edges[j];
                let shared = [a1, b1]
                    .iter()
                    .filter(|&&x| x == a2 || x == b2)
                    .count();
                if shared == 1 {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn complete_graph_counts() {
        let g = build_primitive_graph(&grid_detections(4), &GraphMode::Complete).unwrap();
        assert_eq!(g.n_nodes(), 4);
        assert_eq!(g.n_edges(), 6);

        let g1 = build_primitive_graph(&grid_detections(1), &GraphMode::Complete).unwrap();
        assert_eq!((g1.n_nodes(), g1.n_edges()), (1, 0));

        let g2 = build_primitive_graph(&grid_detections(2), &GraphMode::Complete).unwrap();
        assert_eq!(g2.n_edges(), 1);
        assert_eq!(g2.relation_features[0].forward.len(), GEO_DIM);
        assert_eq!(g2.relation_features[0].reverse.len(), GEO_DIM);
        assert_ne!(
            g2.relation_features[0].forward,
            g2.relation_features[0].reverse
        );
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            build_primitive_graph(&[], &GraphMode::Complete),
            Err(Error::EmptyScene)
        ));

        let mut dets = grid_detections(2);
        dets[0].feature = vec![1.0, 2.0];
        dets[1].feature = vec![1.0];
        assert!(matches!(
            build_primitive_graph(&dets, &GraphMode::Complete),
            Err(Error::DimensionMismatch(_))
        ));

        let dets = grid_detections(3);
        assert!(build_primitive_graph(&dets, &GraphMode::Pairs(vec![(0, 0)])).is_err());
        assert!(
            build_primitive_graph(&dets, &GraphMode::Pairs(vec![(0, 1), (1, 0)])).is_err()
        );
        assert!(build_primitive_graph(&dets, &GraphMode::Pairs(vec![(0, 9)])).is_err());
    }

    #[test]
    fn dual_of_k4() {
        let g = build_primitive_graph(&grid_detections(4), &GraphMode::Complete).unwrap();
        let dg = build_edge_dual_graph(&g).unwrap();
        assert_eq!(dg.n_dual_nodes(), 6);
        assert_eq!(dg.n_dual_edges(), 12);
        for e in 0..6 {
            assert_eq!(dg.neighborhood(e).unwrap().len(), 4);
        }
    }

    #[test]
    fn dual_of_single_edge() {
        let g = build_primitive_graph(&grid_detections(2), &GraphMode::Complete).unwrap();
        let dg = build_edge_dual_graph(&g).unwrap();
        assert_eq!(dg.n_dual_nodes(), 1);
        assert_eq!(dg.n_dual_edges(), 0);
        assert!(dg.neighborhood(0).unwrap().is_empty());
    }

    #[test]
    fn dual_of_star() {
        // Center node 0 with three leaves: the dual is a triangle whose
        // every edge shares the center.
        let dets = grid_detections(4);
        let g = build_primitive_graph(&dets, &GraphMode::Pairs(vec![(0, 1), (0, 2), (0, 3)]))
            .unwrap();
        let dg = build_edge_dual_graph(&g).unwrap();
        assert_eq!(dg.n_dual_nodes(), 3);
        assert_eq!(dg.n_dual_edges(), 3);
        assert!(dg.dual_edges.iter().all(|de| de.shared == 0));

        let nb = dg.neighborhood(0).unwrap();
        assert_eq!(nb, vec![(1, 0), (2, 0)]);
    }

    #[test]
    fn dual_errors() {
        let g = build_primitive_graph(&grid_detections(1), &GraphMode::Complete).unwrap();
        assert!(matches!(
            build_edge_dual_graph(&g),
            Err(Error::NoRelations)
        ));

        let g2 = build_primitive_graph(&grid_detections(2), &GraphMode::Complete).unwrap();
        let dg = build_edge_dual_graph(&g2).unwrap();
        assert!(dg.neighborhood(5).is_err());
    }

    #[test]
    fn dual_counts_formula() {
        assert_eq!(validate_dual_counts(4).unwrap(), (6, 12));
        assert_eq!(validate_dual_counts(2).unwrap(), (1, 0));
        assert_eq!(validate_dual_counts(5).unwrap(), (10, 30));
        assert!(validate_dual_counts(1).is_err());
    }

    #[test]
    fn dual_counts_match_enumeration_for_complete_graphs() {
        for n in 2..=8usize {
            let g = build_primitive_graph(&grid_detections(n), &GraphMode::Complete).unwrap();
            let dg = build_edge_dual_graph(&g).unwrap();
            let (nodes, edges) = validate_dual_counts(n as u64).unwrap();
            assert_eq!(dg.n_dual_nodes() as u64, nodes);
            assert_eq!(dg.n_dual_edges() as u64, edges);
            assert_eq!(dg.n_dual_edges(), count_adjacent_pairs(&g.edges));
        }
    }

    #[test]
    fn deterministic_serialization() {
        let dets = grid_detections(5);
        let g1 = build_primitive_graph(&dets, &GraphMode::Complete).unwrap();
        let g2 = build_primitive_graph(&dets, &GraphMode::Complete).unwrap();
        assert_eq!(
            serde_json::to_string(&g1).unwrap(),
            serde_json::to_string(&g2).unwrap()
        );
        let d1 = build_edge_dual_graph(&g1).unwrap();
        let d2 = build_edge_dual_graph(&g2).unwrap();
        assert_eq!(
            serde_json::to_string(&d1).unwrap(),
            serde_json::to_string(&d2).unwrap()
        );
    }

    #[test]
    fn scene_file_roundtrip() {
        let json = r#"{"nodes":[{"id":0,"box":[0.1,0.1,0.3,0.3],"label":2},
                                {"id":1,"box":[0.4,0.4,0.6,0.6],"label":0}],
                       "edges":[{"u":0,"v":1}]}"#;
        let scene: SceneFile = serde_json::from_str(json).unwrap();
        let dets = scene.to_detections().unwrap();
        assert_eq!(dets.len(), 2);
        assert!(matches!(scene.graph_mode(), GraphMode::Pairs(_)));

        let no_edges: SceneFile =
            serde_json::from_str(r#"{"nodes":[{"id":0,"box":[0.1,0.1,0.3,0.3],"label":0}]}"#)
                .unwrap();
        assert!(matches!(no_edges.graph_mode(), GraphMode::Complete));
    }

    #[test]
    fn detection_validation() {
        assert!(Detection::new(0, vec![], BBox::new(0.5, 0.1, 0.2, 0.2), vec![], 0).is_err());
        assert!(Detection::new(0, vec![], BBox::new(-0.1, 0.1, 0.2, 0.2), vec![], 0).is_err());
        assert!(
            Detection::new(0, vec![], BBox::new(0.1, 0.1, 0.2, 0.2), vec![0.9, 0.1], 1).is_err()
        );
        assert!(
            Detection::new(0, vec![], BBox::new(0.1, 0.1, 0.2, 0.2), vec![0.1, 0.9], 1).is_ok()
        );
    }

    proptest! {
        /// Structure preservation: dual adjacency holds exactly for
        /// primitive edge pairs sharing one node, on random subgraphs.
        #[test]
        fn dual_adjacency_matches_pairwise_intersection(
            n in 3usize..8,
            edge_mask in proptest::collection::vec(any::<bool>(), 28),
        ) {
            let dets = grid_detections(n);
            let mut pairs = Vec::new();
            let mut k = 0;
            for i in 0..n as u64 {
                for j in i + 1..n as u64 {
                    if edge_mask[k % edge_mask.len()] {
                        pairs.push((i, j));
                    }
                    k += 1;
                }
            }
            prop_assume!(!pairs.is_empty());
            let g = build_primitive_graph(&dets, &GraphMode::Pairs(pairs)).unwrap();
            let dg = build_edge_dual_graph(&g).unwrap();

            // No dual self-loops, each unordered pair at most once.
            for de in &dg.dual_edges {
                prop_assert!(de.i < de.j);
            }
            let mut seen = std::collections::BTreeSet::new();
            for de in &dg.dual_edges {
                prop_assert!(seen.insert((de.i, de.j)));
            }

            // Independent pairwise intersection over all pairs.
            for i in 0..g.edges.len() {
                for j in i + 1..g.edges.len() {
                    let (a1, b1) = g.edges[i];
                    let (a2, b2) = g.edges[j];
                    let shared: Vec<u64> = [a1, b1]
                        .into_iter()
                        .filter(|&x| x == a2 || x == b2)
                        .collect();
                    let dual = dg.dual_edges.iter().find(|de| de.i == i && de.j == j);
                    match shared.len() {
                        1 => {
                            let de = dual.expect("adjacent edges must be dual-connected");
                            prop_assert_eq!(de.shared, shared[0]);
                        }
                        _ => prop_assert!(dual.is_none()),
                    }
                }
            }
        }
    }
}
