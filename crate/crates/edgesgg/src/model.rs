//! Dual message passing network over a primitive graph and its edge dual.
//!
//! Two branches update relation features in parallel from a shared layer
//! snapshot:
//!
//! * the object-centric branch updates one feature per *directional*
//!   candidate edge from its two endpoint objects, gated by a two-way
//!   attention over the endpoint features;
//! * the relation-centric branch carries one feature per *directional
//!   incidence* (ordered pair of adjacent primitive edges), initialized
//!   from the shared object's feature and updated from the incidence
//!   neighborhood of its first edge.
//!
//! After the final layer the incidence features are mean-pooled onto
//! their first edge, broadcast to both directions, fused with the
//! object-centric edge features (concat, mean or elementwise product
//! through a linear layer), and fed to softmax classifier heads for
//! object labels and directional relation labels. The joint loss is the
//! sum of the two mean cross-entropies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeDualGraph, PrimitiveGraph, GEO_DIM};
use crate::tensor::{pair_softmax_scalar, ParamStore, Tape, Tensor, Var};

/// How the two branch outputs are fused before the relation head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Concat,
    Mean,
    Multiply,
}

/// Model hyperparameters and branch switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualMpnnConfig {
    /// Object feature dimension.
    pub d_obj: usize,
    /// Relation feature dimension.
    pub d_rel: usize,
    /// Number of message passing layers per branch.
    pub layers: usize,
    /// Object vocabulary size.
    pub n_obj_classes: usize,
    /// Relation vocabulary size, including class 0 = "no relation".
    pub n_rel_classes: usize,
    pub aggregation: Aggregation,
    pub object_branch: bool,
    pub relation_branch: bool,
}

impl DualMpnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_obj < 1 || self.d_rel < 1 || self.layers < 1 {
            return Err(Error::Config(
                "d_obj, d_rel and layers must all be at least 1".into(),
            ));
        }
        if self.n_obj_classes < 2 || self.n_rel_classes < 2 {
            return Err(Error::Config("need at least two classes per head".into()));
        }
        if !self.object_branch && !self.relation_branch {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        Ok(())
    }

    /// Input width of the fusion layer. Concatenation doubles the width
    /// only when both branches contribute.
    pub fn fuse_input_width(&self) -> usize {
        if self.object_branch && self.relation_branch && self.aggregation == Aggregation::Concat {
            2 * self.d_rel
        } else {
            self.d_rel
        }
    }
}

/// Parameter names used by the model; see [`param_shapes`] for shapes.
pub mod names {
    /// Maps the directional box descriptor to relation space.
    pub const GEO_PROJ_W: &str = "geo_proj_w";
    pub const GEO_PROJ_B: &str = "geo_proj_b";
    /// Object branch: weights for the forward and reverse directional
    /// features of an edge.
    pub const EDGE_FWD_W: &str = "edge_fwd_w";
    pub const EDGE_REV_W: &str = "edge_rev_w";
    /// Object branch attention vector over node features.
    pub const NODE_ATT_W: &str = "node_att_w";
    /// Relation branch: node-to-relation projection for incidence init.
    pub const NODE_TO_REL_W: &str = "node_to_rel_w";
    /// Relation branch: weights for an incidence and its mirror.
    pub const REL_FWD_W: &str = "rel_fwd_w";
    pub const REL_REV_W: &str = "rel_rev_w";
    /// Relation branch attention vector over incidence features.
    pub const REL_ATT_W: &str = "rel_att_w";
    /// Fusion layer.
    pub const FUSE_W: &str = "fuse_w";
    pub const FUSE_B: &str = "fuse_b";
    /// Classifier heads.
    pub const OBJ_CLS_W: &str = "obj_cls_w";
    pub const REL_CLS_W: &str = "rel_cls_w";
}

/// Parameter layout for a config: (name, rows, cols, is_bias).
pub fn param_shapes(cfg: &DualMpnnConfig) -> Vec<(&'static str, usize, usize, bool)> {
    let mut shapes = Vec::new();
    if cfg.object_branch {
        shapes.push((names::GEO_PROJ_W, GEO_DIM, cfg.d_rel, false));
        shapes.push((names::GEO_PROJ_B, 1, cfg.d_rel, true));
        shapes.push((names::EDGE_FWD_W, cfg.d_rel, cfg.d_rel, false));
        shapes.push((names::EDGE_REV_W, cfg.d_rel, cfg.d_rel, false));
        shapes.push((names::NODE_ATT_W, cfg.d_obj, 1, false));
    }
    if cfg.relation_branch {
        shapes.push((names::NODE_TO_REL_W, cfg.d_obj, cfg.d_rel, false));
        shapes.push((names::REL_FWD_W, cfg.d_rel, cfg.d_rel, false));
        shapes.push((names::REL_REV_W, cfg.d_rel, cfg.d_rel, false));
        shapes.push((names::REL_ATT_W, cfg.d_rel, 1, false));
    }
    shapes.push((names::FUSE_W, cfg.fuse_input_width(), cfg.d_rel, false));
    shapes.push((names::FUSE_B, 1, cfg.d_rel, true));
    shapes.push((names::OBJ_CLS_W, cfg.d_obj, cfg.n_obj_classes, false));
    shapes.push((names::REL_CLS_W, cfg.d_rel, cfg.n_rel_classes, false));
    shapes
}

/// Fresh parameters for a config; initialization is a pure function of
/// `(name, shape, seed)`.
pub fn init_params(cfg: &DualMpnnConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new(seed);
    for (name, rows, cols, is_bias) in param_shapes(cfg) {
        if is_bias {
            store.add_zeros(name, rows, cols)?;
        } else {
            store.add_weight(name, rows, cols)?;
        }
    }
    Ok(store)
}

/// Two-way attention over a pair of feature vectors:
/// `exp(w.u) / (exp(w.u) + exp(w.v))`, computed with max-subtraction.
/// Complementary by construction: swapping the arguments gives `1 - a`.
pub fn attention_score(u: &[f64], v: &[f64], w: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.len() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "attention over lengths {}, {}, {}",
            u.len(),
            v.len(),
            w.len()
        )));
    }
    let su: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    let sv: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
    Ok(pair_softmax_scalar(su, sv))
}

/// Index structure of one scene, precomputed so the tape ops are pure
/// row gathers and scatters.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub n_nodes: usize,
    pub n_edges: usize,
    /// Node features, one row per detection.
    pub node_features: Tensor,
    /// Directional edges: row 2k is edge k as (lo -> hi), row 2k+1 the
    /// reverse. These are node positions, not ids.
    pub dir_subject: Vec<usize>,
    pub dir_object: Vec<usize>,
    /// Index of the opposite direction of each directional edge.
    pub dir_reverse: Vec<usize>,
    /// Undirected edge index of each directional edge.
    pub dir_edge: Vec<usize>,
    /// Geometry descriptors, one row per directional edge.
    pub geometry: Tensor,
    /// Directional incidences (ordered pairs of adjacent primitive
    /// edges): first edge, mirror incidence index, shared node position.
    pub inc_edge: Vec<usize>,
    pub inc_reverse: Vec<usize>,
    pub inc_shared: Vec<usize>,
}

impl PreparedScene {
    pub fn new(g: &PrimitiveGraph, dg: &EdgeDualGraph, d_obj: usize) -> Result<PreparedScene> {
        if g.edges.is_empty() {
            return Err(Error::NoRelations);
        }
        if g.nodes.iter().any(|d| d.feature.len() != d_obj) {
            return Err(Error::DimensionMismatch(format!(
                "detections must carry features of length {d_obj}"
            )));
        }
        let rows: Vec<Vec<f64>> = g.nodes.iter().map(|d| d.feature.clone()).collect();
        let node_features = Tensor::from_rows(&rows)?;

        let n_dir = 2 * g.edges.len();
        let mut dir_subject = Vec::with_capacity(n_dir);
        let mut dir_object = Vec::with_capacity(n_dir);
        let mut dir_reverse = Vec::with_capacity(n_dir);
        let mut dir_edge = Vec::with_capacity(n_dir);
        let mut geo_rows = Vec::with_capacity(n_dir);
        for (k, &(a, b)) in g.edges.iter().enumerate() {
            let pa = g
                .node_position(a)
                .ok_or_else(|| Error::Data(format!("edge references missing node {a}")))?;
            let pb = g
                .node_position(b)
                .ok_or_else(|| Error::Data(format!("edge references missing node {b}")))?;
            dir_subject.push(pa);
            dir_object.push(pb);
            dir_subject.push(pb);
            dir_object.push(pa);
            dir_reverse.push(2 * k + 1);
            dir_reverse.push(2 * k);
            dir_edge.push(k);
            dir_edge.push(k);
            geo_rows.push(g.relation_features[k].forward.clone());
            geo_rows.push(g.relation_features[k].reverse.clone());
        }
        let geometry = Tensor::from_rows(&geo_rows)?;

        // Directional incidences in ascending (first edge, second edge)
        // order; the mirror of (i, j) is (j, i).
        let mut inc_pairs: Vec<(usize, usize, u64)> = Vec::new();
        for de in &dg.dual_edges {
            inc_pairs.push((de.i, de.j, de.shared));
            inc_pairs.push((de.j, de.i, de.shared));
        }
        inc_pairs.sort_unstable();
        let mut inc_edge = Vec::with_capacity(inc_pairs.len());
        let mut inc_shared = Vec::with_capacity(inc_pairs.len());
        let mut inc_reverse = vec![0usize; inc_pairs.len()];
        for (idx, &(i, j, shared)) in inc_pairs.iter().enumerate() {
            inc_edge.push(i);
            let pos = g.node_position(shared).ok_or_else(|| {
                Error::Data(format!("dual edge references missing node {shared}"))
            })?;
            inc_shared.push(pos);
            let mirror = inc_pairs
                .binary_search(&(j, i, shared))
                .map_err(|_| Error::Data("incidence mirror missing".into()))?;
            inc_reverse[idx] = mirror;
        }

        Ok(PreparedScene {
            n_nodes: g.nodes.len(),
            n_edges: g.edges.len(),
            node_features,
            dir_subject,
            dir_object,
            dir_reverse,
            dir_edge,
            geometry,
            inc_edge,
            inc_reverse,
            inc_shared,
        })
    }

    pub fn n_directional(&self) -> usize {
        self.dir_edge.len()
    }

    pub fn n_incidences(&self) -> usize {
        self.inc_edge.len()
    }
}

/// One simultaneous object-centric layer update from the layer-h
/// snapshot `e_h`:
/// `e' = e + relu(alpha * e W_fwd + (1 - alpha) * e_rev W_rev)`.
pub fn object_centric_update(
    tape: &mut Tape,
    e_h: Var,
    alpha: Var,
    dir_reverse: &[usize],
    w_fwd: Var,
    w_rev: Var,
) -> Result<Var> {
    if tape.value(e_h).rows() != dir_reverse.len() {
        return Err(Error::DimensionMismatch(
            "directional features must cover both directions of every edge".into(),
        ));
    }
    let one_minus = tape.affine(alpha, -1.0, 1.0);
    let own = tape.scale_rows(e_h, alpha)?;
    let own = tape.matmul(own, w_fwd)?;
    let flipped = tape.gather_rows(e_h, dir_reverse.to_vec())?;
    let flipped = tape.scale_rows(flipped, one_minus)?;
    let flipped = tape.matmul(flipped, w_rev)?;
    let mixed = tape.add(own, flipped)?;
    let activated = tape.relu(mixed);
    tape.add(e_h, activated)
}

/// Attention column for directional edges from endpoint node features.
pub fn edge_attention(
    tape: &mut Tape,
    node_features: Var,
    att_w: Var,
    dir_subject: &[usize],
    dir_object: &[usize],
) -> Result<Var> {
    let scores = tape.matmul(node_features, att_w)?;
    let subj = tape.gather_rows(scores, dir_subject.to_vec())?;
    let obj = tape.gather_rows(scores, dir_object.to_vec())?;
    tape.pair_softmax(subj, obj)
}

/// Incidence features at layer zero: the shared object's feature mapped
/// into relation space.
pub fn relation_init(
    tape: &mut Tape,
    node_features: Var,
    inc_shared: &[usize],
    w_map: Var,
) -> Result<Var> {
    if let Some(&bad) = inc_shared
        .iter()
        .find(|&&p| p >= tape.value(node_features).rows())
    {
        return Err(Error::Data(format!("dangling shared node position {bad}")));
    }
    let gathered = tape.gather_rows(node_features, inc_shared.to_vec())?;
    tape.matmul(gathered, w_map)
}

/// Attention column over incidences: each incidence scored against its
/// mirror with a dedicated relation-space attention vector.
pub fn incidence_attention(
    tape: &mut Tape,
    z_h: Var,
    att_w: Var,
    inc_reverse: &[usize],
) -> Result<Var> {
    let scores = tape.matmul(z_h, att_w)?;
    let mirrored = tape.gather_rows(scores, inc_reverse.to_vec())?;
    tape.pair_softmax(scores, mirrored)
}

/// One simultaneous relation-centric layer update from the layer-h
/// snapshot. Every incidence with first edge `e` receives the same
/// neighborhood aggregate: the attention-weighted sum over incidences
/// `(e, k)` of their own feature through `w_fwd` plus the mirrored
/// feature through `w_rev`, passed through ReLU and added residually.
#[allow(clippy::too_many_arguments)]
pub fn relation_centric_update(
    tape: &mut Tape,
    z_h: Var,
    alpha: Var,
    inc_reverse: &[usize],
    inc_edge: &[usize],
    n_edges: usize,
    w_fwd: Var,
    w_rev: Var,
) -> Result<Var> {
    if tape.value(z_h).rows() != inc_edge.len() {
        return Err(Error::DimensionMismatch(
            "incidence features must cover every directional incidence".into(),
        ));
    }
    if inc_edge.is_empty() {
        // No adjacent edge pairs anywhere: the empty sum leaves features
        // unchanged.
        return Ok(z_h);
    }
    let one_minus = tape.affine(alpha, -1.0, 1.0);
    let own = tape.scale_rows(z_h, alpha)?;
    let own = tape.matmul(own, w_fwd)?;
    let mirrored = tape.gather_rows(z_h, inc_reverse.to_vec())?;
    let mirrored = tape.scale_rows(mirrored, one_minus)?;
    let mirrored = tape.matmul(mirrored, w_rev)?;
    let terms = tape.add(own, mirrored)?;
    let per_edge = tape.scatter_sum_rows(terms, inc_edge.to_vec(), n_edges)?;
    let broadcast = tape.gather_rows(per_edge, inc_edge.to_vec())?;
    let activated = tape.relu(broadcast);
    tape.add(z_h, activated)
}

/// Mean-pool incidence features onto their first edge; edges with no
/// incidences receive the zero vector.
pub fn pool_dual_to_edge(
    tape: &mut Tape,
    z_h: Var,
    inc_edge: &[usize],
    n_edges: usize,
) -> Result<Var> {
    tape.scatter_mean_rows(z_h, inc_edge.to_vec(), n_edges)
}

/// Fuse the branch outputs into the final per-directional-edge feature
/// through the linear fusion layer and ReLU. With a single branch the
/// input passes through the fusion layer at width `d_rel`.
pub fn aggregate_features(
    tape: &mut Tape,
    object_feats: Option<Var>,
    relation_feats: Option<Var>,
    mode: Aggregation,
    fuse_w: Var,
    fuse_b: Var,
) -> Result<Var> {
    let fused_input = match (object_feats, relation_feats) {
        (Some(e), Some(z)) => match mode {
            Aggregation::Concat => tape.concat_cols(e, z)?,
            Aggregation::Mean => {
                let sum = tape.add(e, z)?;
                tape.affine(sum, 0.5, 0.0)
            }
            Aggregation::Multiply => tape.mul_elem(e, z)?,
        },
        (Some(e), None) => e,
        (None, Some(z)) => z,
        (None, None) => return Err(Error::Config("at least one branch must be enabled".into())),
    };
    let projected = tape.matmul(fused_input, fuse_w)?;
    let biased = tape.add_row(projected, fuse_b)?;
    Ok(tape.relu(biased))
}

/// Classifier heads: softmax object distributions from raw node features
/// and softmax relation distributions from the fused edge features.
pub fn predict(
    tape: &mut Tape,
    node_features: Var,
    fused: Var,
    obj_cls_w: Var,
    rel_cls_w: Var,
) -> Result<(Var, Var)> {
    let obj_logits = tape.matmul(node_features, obj_cls_w)?;
    let obj_probs = tape.softmax_row(obj_logits);
    let rel_logits = tape.matmul(fused, rel_cls_w)?;
    let rel_probs = tape.softmax_row(rel_logits);
    Ok((obj_probs, rel_probs))
}

/// Everything a forward pass produces, layer by layer.
pub struct ForwardState {
    /// Object-branch directional edge features per layer (empty when the
    /// branch is disabled).
    pub edge_layers: Vec<Var>,
    /// Relation-branch incidence features per layer.
    pub incidence_layers: Vec<Var>,
    /// Fused per-directional-edge feature.
    pub fused: Var,
    /// Object class distributions, one row per detection.
    pub obj_probs: Var,
    /// Relation class distributions, one row per directional edge.
    pub rel_probs: Var,
}

/// Run the configured branches over a prepared scene.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &DualMpnnConfig,
    scene: &PreparedScene,
) -> Result<ForwardState> {
    cfg.validate()?;
    if scene.node_features.cols() != cfg.d_obj {
        return Err(Error::DimensionMismatch(format!(
            "scene features are {} wide, model expects {}",
            scene.node_features.cols(),
            cfg.d_obj
        )));
    }
    let node_features = tape.constant(scene.node_features.clone())?;

    let mut edge_layers = Vec::new();
    if cfg.object_branch {
        let geo = tape.constant(scene.geometry.clone())?;
        let gw = tape.param(store, names::GEO_PROJ_W)?;
        let gb = tape.param(store, names::GEO_PROJ_B)?;
        let projected = tape.matmul(geo, gw)?;
        let mut e = tape.add_row(projected, gb)?;
        edge_layers.push(e);

        let att_w = tape.param(store, names::NODE_ATT_W)?;
        let alpha = edge_attention(
            tape,
            node_features,
            att_w,
            &scene.dir_subject,
            &scene.dir_object,
        )?;
        let w_fwd = tape.param(store, names::EDGE_FWD_W)?;
        let w_rev = tape.param(store, names::EDGE_REV_W)?;
        for _ in 0..cfg.layers {
            e = object_centric_update(tape, e, alpha, &scene.dir_reverse, w_fwd, w_rev)?;
            edge_layers.push(e);
        }
    }

    let mut incidence_layers = Vec::new();
    let mut pooled = None;
    if cfg.relation_branch {
        let w_map = tape.param(store, names::NODE_TO_REL_W)?;
        let mut z = relation_init(tape, node_features, &scene.inc_shared, w_map)?;
        incidence_layers.push(z);

        let att_w = tape.param(store, names::REL_ATT_W)?;
        let w_fwd = tape.param(store, names::REL_FWD_W)?;
        let w_rev = tape.param(store, names::REL_REV_W)?;
        for _ in 0..cfg.layers {
            let alpha = incidence_attention(tape, z, att_w, &scene.inc_reverse)?;
            z = relation_centric_update(
                tape,
                z,
                alpha,
                &scene.inc_reverse,
                &scene.inc_edge,
                scene.n_edges,
                w_fwd,
                w_rev,
            )?;
            incidence_layers.push(z);
        }

        let per_edge = pool_dual_to_edge(tape, z, &scene.inc_edge, scene.n_edges)?;
        pooled = Some(tape.gather_rows(per_edge, scene.dir_edge.to_vec())?);
    }

    let fuse_w = tape.param(store, names::FUSE_W)?;
    let fuse_b = tape.param(store, names::FUSE_B)?;
    let fused = aggregate_features(
        tape,
        edge_layers.last().copied(),
        pooled,
        cfg.aggregation,
        fuse_w,
        fuse_b,
    )?;

    let obj_cls_w = tape.param(store, names::OBJ_CLS_W)?;
    let rel_cls_w = tape.param(store, names::REL_CLS_W)?;
    let (obj_probs, rel_probs) = predict(tape, node_features, fused, obj_cls_w, rel_cls_w)?;

    Ok(ForwardState {
        edge_layers,
        incidence_layers,
        fused,
        obj_probs,
        rel_probs,
    })
}

/// Joint loss parts: object and relation mean cross-entropies and their
/// sum.
pub struct JointLoss {
    pub total: Var,
    pub object: Var,
    pub relation: Var,
}

/// Mean cross-entropy over objects plus mean cross-entropy over all
/// directional relation slots (class 0 marks "no relation").
pub fn joint_loss(
    tape: &mut Tape,
    state: &ForwardState,
    obj_targets: &[usize],
    rel_targets: &[usize],
) -> Result<JointLoss> {
    let object = tape.cross_entropy(state.obj_probs, obj_targets)?;
    let relation = tape.cross_entropy(state.rel_probs, rel_targets)?;
    let total = tape.add(object, relation)?;
    Ok(JointLoss {
        total,
        object,
        relation,
    })
}

/// Serialize seed, config, and parameters into one JSON document.
pub fn checkpoint_to_json(store: &ParamStore, cfg: &DualMpnnConfig) -> Result<serde_json::Value> {
    let mut value = store.to_json();
    value["config"] = serde_json::to_value(cfg)?;
    Ok(value)
}

/// Load a checkpoint, rejecting shape mismatches against the config's
/// parameter layout.
pub fn checkpoint_from_json(value: &serde_json::Value) -> Result<(ParamStore, DualMpnnConfig)> {
    let cfg: DualMpnnConfig = serde_json::from_value(
        value
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Data("checkpoint missing config".into()))?,
    )?;
    cfg.validate()?;
    let store = ParamStore::from_json(value)?;
    for (name, rows, cols, _) in param_shapes(&cfg) {
        let tensor = store
            .tensor(name)
            .map_err(|_| Error::Data(format!("checkpoint missing parameter {name}")))?;
        if tensor.shape() != (rows, cols) {
            return Err(Error::Shape(format!(
                "checkpoint parameter {name} is {:?}, config expects ({rows}, {cols})",
                tensor.shape()
            )));
        }
    }
    Ok((store, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_edge_dual_graph, build_primitive_graph, BBox, Detection, GraphMode};
    use crate::tensor::gradcheck::{central_diff_grad, rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_config() -> DualMpnnConfig {
        DualMpnnConfig {
            d_obj: 4,
            d_rel: 3,
            layers: 2,
            n_obj_classes: 3,
            n_rel_classes: 4,
            aggregation: Aggregation::Concat,
            object_branch: true,
            relation_branch: true,
        }
    }

    fn scene_detections(n: usize, d_obj: usize, seed: u64) -> Vec<Detection> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x = 0.05 + 0.8 * (i as f64) / (n as f64);
                let y = 0.1 + 0.05 * (i as f64);
                let feature: Vec<f64> = (0..d_obj).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Detection::new(
                    i as u64,
                    feature,
                    BBox::new(x, y, x + 0.12, y + 0.15),
                    Vec::new(),
                    i % 3,
                )
                .unwrap()
            })
            .collect()
    }

    fn prepared(n: usize, cfg: &DualMpnnConfig, seed: u64) -> PreparedScene {
        let dets = scene_detections(n, cfg.d_obj, seed);
        let g = build_primitive_graph(&dets, &GraphMode::Complete).unwrap();
        let dg = build_edge_dual_graph(&g).unwrap();
        PreparedScene::new(&g, &dg, cfg.d_obj).unwrap()
    }

    #[test]
    fn attention_score_cases() {
        let u = vec![0.3, -0.2];
        assert!((attention_score(&u, &u, &[1.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(
            (attention_score(&[1.0, 2.0], &[-3.0, 0.5], &[0.0, 0.0]).unwrap() - 0.5).abs()
                < 1e-15
        );
        // w.u = ln 3, w.v = 0 gives 3/(3+1).
        let a = attention_score(&[3f64.ln()], &[0.0], &[1.0]).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
        assert!(attention_score(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn attention_complementarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = attention_score(&u, &v, &w).unwrap();
            let b = attention_score(&v, &u, &w).unwrap();
            assert!((a + b - 1.0).abs() <= 1e-12);
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn object_update_zero_weights_is_identity() {
        let cfg = test_config();
        let scene = prepared(3, &cfg, 5);
        let mut tape = Tape::new();
        let e0 = tape.constant(scene.geometry.clone()).unwrap();
        let alpha = tape
            .constant(Tensor::filled(scene.n_directional(), 1, 0.3))
            .unwrap();
        let zeros = tape.constant(Tensor::zeros(GEO_DIM, GEO_DIM)).unwrap();
        let e1 =
            object_centric_update(&mut tape, e0, alpha, &scene.dir_reverse, zeros, zeros).unwrap();
        assert_eq!(tape.value(e1), tape.value(e0));
    }

    #[test]
    fn object_update_hand_case() {
        // One edge, d_rel = 2, identity weights, alpha hand-picked as
        // 0.75 via scores (ln 3, 0):
        // e'_fwd = [1,0] + relu(0.75*[1,0] + 0.25*[0,1]) = [1.75, 0.25].
        let mut tape = Tape::new();
        let e0 = tape
            .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let scores_subj = tape
            .constant(Tensor::from_rows(&[vec![3f64.ln()], vec![0.0]]).unwrap())
            .unwrap();
        let scores_obj = tape
            .constant(Tensor::from_rows(&[vec![0.0], vec![3f64.ln()]]).unwrap())
            .unwrap();
        let alpha = tape.pair_softmax(scores_subj, scores_obj).unwrap();
        let eye = tape.constant(Tensor::identity(2)).unwrap();
        let e1 = object_centric_update(&mut tape, e0, alpha, &[1, 0], eye, eye).unwrap();
        let out = tape.value(e1);
        assert!((out.get(0, 0) - 1.75).abs() < 1e-12);
        assert!((out.get(0, 1) - 0.25).abs() < 1e-12);
        // Reverse direction: [0,1] + relu(0.25*[0,1] + 0.75*[1,0]).
        assert!((out.get(1, 0) - 0.75).abs() < 1e-12);
        assert!((out.get(1, 1) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn relation_init_cases() {
        let cfg = test_config();
        let scene = prepared(4, &cfg, 6);
        let mut tape = Tape::new();
        let feats = tape.constant(scene.node_features.clone()).unwrap();

        let zeros = tape
            .constant(Tensor::zeros(cfg.d_obj, cfg.d_rel))
            .unwrap();
        let z0 = relation_init(&mut tape, feats, &scene.inc_shared, zeros).unwrap();
        assert!(tape.value(z0).data().iter().all(|&v| v == 0.0));

        // Identity map (d_obj = d_rel here would be needed; emulate with
        // a rectangular selector that copies the first d_rel dims).
        let mut sel = Tensor::zeros(cfg.d_obj, cfg.d_rel);
        for i in 0..cfg.d_rel {
            sel.set(i, i, 1.0);
        }
        let sel = tape.constant(sel).unwrap();
        let z0 = relation_init(&mut tape, feats, &scene.inc_shared, sel).unwrap();
        for (row, &shared) in scene.inc_shared.iter().enumerate() {
            for c in 0..cfg.d_rel {
                assert_eq!(
                    tape.value(z0).get(row, c),
                    scene.node_features.get(shared, c)
                );
            }
        }

        // Star graph: all incidences share the center, so all rows of z0
        // are identical.
        let dets = scene_detections(4, cfg.d_obj, 9);
        let g = build_primitive_graph(&dets, &GraphMode::Pairs(vec![(0, 1), (0, 2), (0, 3)]))
            .unwrap();
        let dg = build_edge_dual_graph(&g).unwrap();
        let star = PreparedScene::new(&g, &dg, cfg.d_obj).unwrap();
        let feats2 = tape.constant(star.node_features.clone()).unwrap();
        let sel2 = tape.constant(Tensor::identity(cfg.d_obj)).unwrap();
        let z0 = relation_init(&mut tape, feats2, &star.inc_shared, sel2).unwrap();
        let first: Vec<f64> = tape.value(z0).row(0).to_vec();
        for r in 1..tape.value(z0).rows() {
            assert_eq!(tape.value(z0).row(r), &first[..]);
        }
    }

    #[test]
    fn relation_update_zero_weights_and_no_neighbors() {
        let cfg = test_config();
        let scene = prepared(4, &cfg, 8);
        let mut tape = Tape::new();
        let z0 = tape
            .constant(Tensor::filled(scene.n_incidences(), cfg.d_rel, 0.7))
            .unwrap();
        let alpha = tape
            .constant(Tensor::filled(scene.n_incidences(), 1, 0.4))
            .unwrap();
        let zeros = tape.constant(Tensor::zeros(cfg.d_rel, cfg.d_rel)).unwrap();
        let z1 = relation_centric_update(
            &mut tape,
            z0,
            alpha,
            &scene.inc_reverse,
            &scene.inc_edge,
            scene.n_edges,
            zeros,
            zeros,
        )
        .unwrap();
        assert_eq!(tape.value(z1), tape.value(z0));

        // Two disjoint edges: the dual has two isolated nodes, no
        // incidences, and the update is the identity on the empty set.
        let dets = scene_detections(4, cfg.d_obj, 10);
        let g =
            build_primitive_graph(&dets, &GraphMode::Pairs(vec![(0, 1), (2, 3)])).unwrap();
        let dg = build_edge_dual_graph(&g).unwrap();
        assert_eq!(dg.n_dual_edges(), 0);
        let disjoint = PreparedScene::new(&g, &dg, cfg.d_obj).unwrap();
        assert_eq!(disjoint.n_incidences(), 0);
        let z0 = tape.constant(Tensor::zeros(0, cfg.d_rel)).unwrap();
        let alpha0 = tape.constant(Tensor::zeros(0, 1)).unwrap();
        let eye = tape.constant(Tensor::identity(cfg.d_rel)).unwrap();
        let z1 = relation_centric_update(
            &mut tape,
            z0,
            alpha0,
            &disjoint.inc_reverse,
            &disjoint.inc_edge,
            disjoint.n_edges,
            eye,
            eye,
        )
        .unwrap();
        assert_eq!(tape.value(z1).rows(), 0);
    }

    /// Independent scalar reference for one relation-centric step on the
    /// 3-edge star with d_rel = 1 and identity weights.
    #[test]
    fn relation_update_matches_scalar_oracle() {
        let d_obj = 2;
        let dets = scene_detections(4, d_obj, 11);
        let g = build_primitive_graph(&dets, &GraphMode::Pairs(vec![(0, 1), (0, 2), (0, 3)]))
            .unwrap();
        let dg = build_edge_dual_graph(&g).unwrap();
        let scene = PreparedScene::new(&g, &dg, d_obj).unwrap();
        let p = scene.n_incidences();
        assert_eq!(p, 6);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z_vals: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let att_w = rng.gen_range(-1.0..1.0f64);

        // Scalar oracle: walk every incidence (i, j) and sum over
        // neighbors k of i explicitly.
        let mut expected = vec![0.0; p];
        for a in 0..p {
            let (ei, _) = (scene.inc_edge[a], ());
            let mut sum = 0.0;
            for b in 0..p {
                if scene.inc_edge[b] != ei {
                    continue;
                }
                let mirror = scene.inc_reverse[b];
                let alpha = pair_softmax_scalar(att_w * z_vals[b], att_w * z_vals[mirror]);
                sum += alpha * z_vals[b] * 1.0 + (1.0 - alpha) * z_vals[mirror] * 1.0;
            }
            expected[a] = z_vals[a] + sum.max(0.0);
        }

        let mut tape = Tape::new();
        let z0 = tape
            .constant(Tensor::from_vec(p, 1, z_vals.clone()).unwrap())
            .unwrap();
        let w_att = tape.constant(Tensor::scalar(att_w)).unwrap();
        let alpha = incidence_attention(&mut tape, z0, w_att, &scene.inc_reverse).unwrap();
        let eye = tape.constant(Tensor::identity(1)).unwrap();
        let z1 = relation_centric_update(
            &mut tape,
            z0,
            alpha,
            &scene.inc_reverse,
            &scene.inc_edge,
            scene.n_edges,
            eye,
            eye,
        )
        .unwrap();
        for a in 0..p {
            assert!(
                (tape.value(z1).get(a, 0) - expected[a]).abs() < 1e-12,
                "incidence {a}: {} vs oracle {}",
                tape.value(z1).get(a, 0),
                expected[a]
            );
        }
    }

    #[test]
    fn pooling_cases() {
        let cfg = test_config();
        // K4: every edge has 4 incidences; pooling is their mean.
        let scene = prepared(4, &cfg, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut z = Tensor::zeros(scene.n_incidences(), cfg.d_rel);
        for v in z.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone()).unwrap();
        let pooled = pool_dual_to_edge(&mut tape, zv, &scene.inc_edge, scene.n_edges).unwrap();
        for e in 0..scene.n_edges {
            let members: Vec<usize> = (0..scene.n_incidences())
                .filter(|&i| scene.inc_edge[i] == e)
                .collect();
            assert_eq!(members.len(), 4);
            for c in 0..cfg.d_rel {
                let mean: f64 =
                    members.iter().map(|&i| z.get(i, c)).sum::<f64>() / members.len() as f64;
                assert!((tape.value(pooled).get(e, c) - mean).abs() < 1e-12);
            }
        }

        // All-zero incidences pool to zero.
        let zv0 = tape
            .constant(Tensor::zeros(scene.n_incidences(), cfg.d_rel))
            .unwrap();
        let pooled0 = pool_dual_to_edge(&mut tape, zv0, &scene.inc_edge, scene.n_edges).unwrap();
        assert!(tape.value(pooled0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregation_modes() {
        let mut tape = Tape::new();
        let d = 3;
        let e = tape
            .constant(Tensor::from_rows(&[vec![0.2, -0.4, 1.0]]).unwrap())
            .unwrap();
        let z = tape
            .constant(Tensor::from_rows(&[vec![0.2, -0.4, 1.0]]).unwrap())
            .unwrap();

        // Zero weights and bias: zero output regardless of input.
        let zero_w = tape.constant(Tensor::zeros(2 * d, d)).unwrap();
        let zero_b = tape.constant(Tensor::zeros(1, d)).unwrap();
        let out = aggregate_features(
            &mut tape,
            Some(e),
            Some(z),
            Aggregation::Concat,
            zero_w,
            zero_b,
        )
        .unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(out).shape(), (1, d));

        // Mean aggregation with e == z equals the fused projection of e.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut w = Tensor::zeros(d, d);
        for v in w.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let wv = tape.constant(w).unwrap();
        let bv = tape.constant(Tensor::zeros(1, d)).unwrap();
        let mean_out =
            aggregate_features(&mut tape, Some(e), Some(z), Aggregation::Mean, wv, bv).unwrap();
        let single_out = aggregate_features(&mut tape, Some(e), None, Aggregation::Mean, wv, bv)
            .unwrap();
        assert_eq!(tape.value(mean_out), tape.value(single_out));
    }

    #[test]
    fn predict_cases() {
        let mut tape = Tape::new();
        let feats = tape
            .constant(Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.3]]).unwrap())
            .unwrap();
        let fused = tape
            .constant(Tensor::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap())
            .unwrap();
        let zero_obj = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let eye_rel = tape.constant(Tensor::identity(2)).unwrap();
        let (obj, rel) = predict(&mut tape, feats, fused, zero_obj, eye_rel).unwrap();

        // Zero weights give uniform object distributions.
        for r in 0..2 {
            for c in 0..3 {
                assert!((tape.value(obj).get(r, c) - 1.0 / 3.0).abs() < 1e-12);
            }
            let sum: f64 = tape.value(obj).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Logits (ln 3, 0) softmax to (0.75, 0.25).
        assert!((tape.value(rel).get(0, 0) - 0.75).abs() < 1e-12);
        assert!((tape.value(rel).get(0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_cases() {
        let mut tape = Tape::new();
        // One object over 2 classes predicted 0.75 on target 0; one
        // relation over 2 classes at 0.5 on target 1.
        let obj = tape
            .constant(Tensor::from_rows(&[vec![0.75, 0.25]]).unwrap())
            .unwrap();
        let rel = tape
            .constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap())
            .unwrap();
        let state = ForwardState {
            edge_layers: vec![],
            incidence_layers: vec![],
            fused: rel,
            obj_probs: obj,
            rel_probs: rel,
        };
        let loss = joint_loss(&mut tape, &state, &[0], &[1]).unwrap();
        let expect = -(0.75f64.ln()) - 0.5f64.ln();
        assert!((tape.value(loss.total).item().unwrap() - expect).abs() < 1e-12);
        assert!((tape.value(loss.total).item().unwrap() - 0.98083).abs() < 1e-5);

        // Perfect one-hot predictions: loss vanishes.
        let obj1 = tape
            .constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let rel1 = tape
            .constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let state1 = ForwardState {
            edge_layers: vec![],
            incidence_layers: vec![],
            fused: rel1,
            obj_probs: obj1,
            rel_probs: rel1,
        };
        let loss1 = joint_loss(&mut tape, &state1, &[0], &[1]).unwrap();
        assert!(tape.value(loss1.total).item().unwrap() <= 1e-10);

        // Invalid class index.
        assert!(joint_loss(&mut tape, &state1, &[2], &[1]).is_err());
    }

    #[test]
    fn forward_uniform_when_heads_are_zero() {
        // Zeroing every parameter leaves both heads uniform, so the loss
        // is ln|Y_obj| + ln|Y_rel|.
        let mut cfg = test_config();
        cfg.layers = 1;
        let scene = prepared(3, &cfg, 20);
        let mut store = init_params(&cfg, 0).unwrap();
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let (r, c) = store.tensor(&name).unwrap().shape();
            store.set_tensor(&name, Tensor::zeros(r, c)).unwrap();
        }
        let mut tape = Tape::new();
        let state = forward(&mut tape, &store, &cfg, &scene).unwrap();
        let obj_targets = vec![0; scene.n_nodes];
        let rel_targets = vec![0; scene.n_directional()];
        let loss = joint_loss(&mut tape, &state, &obj_targets, &rel_targets).unwrap();
        let expect = (cfg.n_obj_classes as f64).ln() + (cfg.n_rel_classes as f64).ln();
        assert!((tape.value(loss.total).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn forward_residual_identity_with_zero_branch_weights() {
        // With the branch mixing weights zeroed (but heads live), the
        // layer stacks are exact identities.
        let cfg = test_config();
        let scene = prepared(4, &cfg, 21);
        let mut store = init_params(&cfg, 3).unwrap();
        for name in [
            names::EDGE_FWD_W,
            names::EDGE_REV_W,
            names::REL_FWD_W,
            names::REL_REV_W,
        ] {
            let (r, c) = store.tensor(name).unwrap().shape();
            store.set_tensor(name, Tensor::zeros(r, c)).unwrap();
        }
        let mut tape = Tape::new();
        let state = forward(&mut tape, &store, &cfg, &scene).unwrap();
        let first = tape.value(state.edge_layers[0]).clone();
        let last = tape.value(*state.edge_layers.last().unwrap()).clone();
        assert_eq!(first, last);
        let zfirst = tape.value(state.incidence_layers[0]).clone();
        let zlast = tape.value(*state.incidence_layers.last().unwrap()).clone();
        assert_eq!(zfirst, zlast);
    }

    #[test]
    fn forward_smoke_across_widths() {
        for d_rel in [3, 6] {
            let mut cfg = test_config();
            cfg.d_rel = d_rel;
            let scene = prepared(3, &cfg, 22);
            let store = init_params(&cfg, 1).unwrap();
            let mut tape = Tape::new();
            let state = forward(&mut tape, &store, &cfg, &scene).unwrap();
            assert_eq!(
                tape.value(state.rel_probs).shape(),
                (scene.n_directional(), cfg.n_rel_classes)
            );
        }
    }

    #[test]
    fn forward_rejects_disabled_branches() {
        let mut cfg = test_config();
        cfg.object_branch = false;
        cfg.relation_branch = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_wiring_touches_exactly_branch_params() {
        let base = test_config();
        let variants = [
            (true, false, vec![
                names::EDGE_FWD_W,
                names::EDGE_REV_W,
                names::FUSE_B,
                names::FUSE_W,
                names::GEO_PROJ_B,
                names::GEO_PROJ_W,
                names::NODE_ATT_W,
                names::OBJ_CLS_W,
                names::REL_CLS_W,
            ]),
            (false, true, vec![
                names::FUSE_B,
                names::FUSE_W,
                names::NODE_TO_REL_W,
                names::OBJ_CLS_W,
                names::REL_ATT_W,
                names::REL_CLS_W,
                names::REL_FWD_W,
                names::REL_REV_W,
            ]),
            (true, true, vec![
                names::EDGE_FWD_W,
                names::EDGE_REV_W,
                names::FUSE_B,
                names::FUSE_W,
                names::GEO_PROJ_B,
                names::GEO_PROJ_W,
                names::NODE_ATT_W,
                names::NODE_TO_REL_W,
                names::OBJ_CLS_W,
                names::REL_ATT_W,
                names::REL_CLS_W,
                names::REL_FWD_W,
                names::REL_REV_W,
            ]),
        ];
        for (object_branch, relation_branch, expected) in variants {
            let cfg = DualMpnnConfig {
                object_branch,
                relation_branch,
                ..base.clone()
            };
            let scene = prepared(4, &cfg, 23);
            let store = init_params(&cfg, 2).unwrap();
            let mut tape = Tape::new();
            forward(&mut tape, &store, &cfg, &scene).unwrap();
            let mut expected: Vec<String> =
                expected.into_iter().map(str::to_string).collect();
            expected.sort();
            assert_eq!(tape.bound_params(), expected);
            let mut created: Vec<String> = store.names().map(str::to_string).collect();
            created.sort();
            assert_eq!(tape.bound_params(), created);
        }
    }

    #[test]
    fn forward_permutation_equivariance() {
        // Relabeling detection ids permutes node and edge outputs without
        // changing values beyond roundoff.
        let cfg = test_config();
        let dets = scene_detections(4, cfg.d_obj, 30);
        let store = init_params(&cfg, 4).unwrap();

        let g = build_primitive_graph(&dets, &GraphMode::Complete).unwrap();
        let dg = build_edge_dual_graph(&g).unwrap();
        let scene = PreparedScene::new(&g, &dg, cfg.d_obj).unwrap();
        let mut tape = Tape::new();
        let state = forward(&mut tape, &store, &cfg, &scene).unwrap();

        // Relabel node i -> 3 - i (a reversal) and rebuild.
        let mut relabeled = dets.clone();
        for d in &mut relabeled {
            d.id = 3 - d.id;
        }
        let g2 = build_primitive_graph(&relabeled, &GraphMode::Complete).unwrap();
        let dg2 = build_edge_dual_graph(&g2).unwrap();
        let scene2 = PreparedScene::new(&g2, &dg2, cfg.d_obj).unwrap();
        let mut tape2 = Tape::new();
        let state2 = forward(&mut tape2, &store, &cfg, &scene2).unwrap();

        // Object rows follow detection list order, which we kept.
        let obj1 = tape.value(state.obj_probs);
        let obj2 = tape2.value(state2.obj_probs);
        for r in 0..4 {
            for c in 0..cfg.n_obj_classes {
                assert!((obj1.get(r, c) - obj2.get(r, c)).abs() < 1e-9);
            }
        }

        // Directional edge (old ids a -> b) maps to new ids (3-a -> 3-b).
        let rel1 = tape.value(state.rel_probs);
        let rel2 = tape2.value(state2.rel_probs);
        for d1 in 0..scene.n_directional() {
            let (sa, oa) = (scene.dir_subject[d1], scene.dir_object[d1]);
            let (na, nb) = (dets[sa].id, dets[oa].id);
            let (ta, tb) = (3 - na, 3 - nb);
            let d2 = (0..scene2.n_directional())
                .find(|&k| {
                    relabeled[scene2.dir_subject[k]].id == ta
                        && relabeled[scene2.dir_object[k]].id == tb
                })
                .unwrap();
            for c in 0..cfg.n_rel_classes {
                assert!(
                    (rel1.get(d1, c) - rel2.get(d2, c)).abs() < 1e-9,
                    "edge {d1} vs {d2}, class {c}"
                );
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = DualMpnnConfig {
            d_obj: 8,
            d_rel: 8,
            layers: 2,
            n_obj_classes: 3,
            n_rel_classes: 4,
            aggregation: Aggregation::Concat,
            object_branch: true,
            relation_branch: true,
        };
        let scene = prepared(3, &cfg, 40);
        let obj_targets: Vec<usize> = (0..scene.n_nodes).map(|i| i % cfg.n_obj_classes).collect();
        let rel_targets: Vec<usize> = (0..scene.n_directional())
            .map(|i| i % cfg.n_rel_classes)
            .collect();
        let mut store = init_params(&cfg, 41).unwrap();

        let eval_scene = scene.clone();
        let eval_cfg = cfg.clone();
        let eval_obj = obj_targets.clone();
        let eval_rel = rel_targets.clone();
        let mut eval = move |s: &ParamStore| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let state = forward(&mut tape, s, &eval_cfg, &eval_scene)?;
            let loss = joint_loss(&mut tape, &state, &eval_obj, &eval_rel)?;
            tape.value(loss.total).item()
        };

        let mut tape = Tape::new();
        let state = forward(&mut tape, &store, &cfg, &scene).unwrap();
        let loss = joint_loss(&mut tape, &state, &obj_targets, &rel_targets).unwrap();
        tape.backward(loss.total).unwrap();
        tape.accumulate_grads(&mut store).unwrap();

        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let analytic = store.grad(&name).unwrap().clone();
            let fd = central_diff_grad(&mut store, &name, 1e-5, &mut eval).unwrap();
            for (a, f) in analytic.data().iter().zip(fd.data()) {
                assert!(
                    rel_error(*a, *f) <= 1e-4,
                    "{name}: analytic {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_shape_rejection() {
        let cfg = test_config();
        let store = init_params(&cfg, 50).unwrap();
        let json = checkpoint_to_json(&store, &cfg).unwrap();
        let (back, cfg2) = checkpoint_from_json(&json).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(
            back.tensor(names::FUSE_W).unwrap(),
            store.tensor(names::FUSE_W).unwrap()
        );

        let mut bad = json.clone();
        bad["config"]["d_rel"] = serde_json::json!(99);
        assert!(checkpoint_from_json(&bad).is_err());
    }
}
