//! Scene-graph evaluation: triplet matching, R@K, mR@K, weighted mAP,
//! the weighted score, subtask drivers, and long-tail reporting.
//!
//! Matching is greedy top-down over score-ranked predictions with each
//! ground-truth triplet consumed at most once. R@K averages per-scene
//! recall; mR@K averages per-predicate recalls computed over the whole
//! split; wmAP computes per-predicate average precision (area under the
//! exact precision-recall staircase, predictions pooled over the split)
//! weighted by ground-truth support. The weighted score combines R@50
//! with both wmAP variants on a 0-100 scale.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_edge_dual_graph, build_primitive_graph, BBox, GraphMode};
use crate::model::{forward, DualMpnnConfig, PreparedScene};
use crate::scenes::{simulate_detector, DetectorNoise, SceneSample, World};
use crate::tensor::{ParamStore, Tape};

/// Intersection over union of two boxes. Boxes must have positive area.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::Data("degenerate box in IoU".into()));
    }
    let inter = a.intersection_area(b);
    Ok(inter / (a.area() + b.area() - inter))
}

/// Whether triplet boxes are matched separately or as a union box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxMode {
    /// Subject and object box must each clear the IoU threshold.
    Pair,
    /// The union boxes must clear the IoU threshold.
    Union,
}

/// One ranked prediction: labeled subject/object boxes, a predicate, and
/// the ranking score (product of the three confidences).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletPrediction {
    pub subject_box: BBox,
    pub object_box: BBox,
    pub subject_label: usize,
    pub object_label: usize,
    pub predicate: usize,
    pub score: f64,
}

/// One ground-truth triplet in evaluation form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtTriplet {
    pub subject_box: BBox,
    pub object_box: BBox,
    pub subject_label: usize,
    pub object_label: usize,
    pub predicate: usize,
}

fn labels_match(p: &TripletPrediction, g: &GtTriplet) -> bool {
    p.subject_label == g.subject_label
        && p.object_label == g.object_label
        && p.predicate == g.predicate
}

fn boxes_match(p: &TripletPrediction, g: &GtTriplet, thresh: f64, mode: BoxMode) -> Result<bool> {
    Ok(match mode {
        BoxMode::Pair => {
            iou(&p.subject_box, &g.subject_box)? >= thresh
                && iou(&p.object_box, &g.object_box)? >= thresh
        }
        BoxMode::Union => {
            let pu = p.subject_box.union(&p.object_box);
            let gu = g.subject_box.union(&g.object_box);
            iou(&pu, &gu)? >= thresh
        }
    })
}

/// Greedy top-down matching of score-sorted predictions against ground
/// truth; returns, per prediction, the index of the ground-truth triplet
/// it claimed, if any. Each ground truth is matched at most once.
pub fn match_triplets(
    preds: &[TripletPrediction],
    gts: &[GtTriplet],
    iou_thresh: f64,
    mode: BoxMode,
) -> Result<Vec<Option<usize>>> {
    if preds.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(Error::InvalidArgument(
            "predictions must be sorted by descending score".into(),
        ));
    }
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::with_capacity(preds.len());
    for p in preds {
        let mut hit = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || !labels_match(p, g) {
                continue;
            }
            if boxes_match(p, g, iou_thresh, mode)? {
                hit = Some(gi);
                taken[gi] = true;
                break;
            }
        }
        matches.push(hit);
    }
    Ok(matches)
}

/// Matching outcome for one scene, enough to compute every recall
/// flavor.
#[derive(Debug, Clone)]
pub struct SceneMatches {
    /// Per ranked prediction, the matched ground-truth index.
    pub matches: Vec<Option<usize>>,
    /// Predicate of each ground-truth triplet.
    pub gt_predicates: Vec<usize>,
}

impl SceneMatches {
    pub fn n_gt(&self) -> usize {
        self.gt_predicates.len()
    }
}

/// Fraction of ground-truth triplets recovered within the top K
/// predictions, averaged over scenes that have ground truth.
pub fn recall_at_k(scenes: &[SceneMatches], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let mut total = 0.0;
    let mut images = 0usize;
    for scene in scenes {
        if scene.n_gt() == 0 {
            continue;
        }
        let hit = scene
            .matches
            .iter()
            .take(k)
            .filter(|m| m.is_some())
            .count();
        total += hit as f64 / scene.n_gt() as f64;
        images += 1;
    }
    if images == 0 {
        return Err(Error::Data("empty ground truth".into()));
    }
    Ok(total / images as f64)
}

/// Unweighted mean over predicate classes (with at least one ground-truth
/// instance) of the class recall within the top K, computed over the
/// whole split.
pub fn mean_recall_at_k(scenes: &[SceneMatches], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let per_class = per_predicate_recall(scenes, k)?;
    let sum: f64 = per_class.values().map(|c| c.recall).sum();
    Ok(sum / per_class.len() as f64)
}

/// Support and top-K recall of one predicate class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub support: u64,
    pub recall: f64,
}

/// Per-predicate top-K recall over the whole split.
pub fn per_predicate_recall(
    scenes: &[SceneMatches],
    k: usize,
) -> Result<BTreeMap<usize, ClassRecall>> {
    let mut gt_counts: BTreeMap<usize, u64> = BTreeMap::new();
    let mut hit_counts: BTreeMap<usize, u64> = BTreeMap::new();
    for scene in scenes {
        for &p in &scene.gt_predicates {
            *gt_counts.entry(p).or_insert(0) += 1;
        }
        for m in scene.matches.iter().take(k).flatten() {
            *hit_counts.entry(scene.gt_predicates[*m]).or_insert(0) += 1;
        }
    }
    if gt_counts.is_empty() {
        return Err(Error::Data("empty ground truth".into()));
    }
    Ok(gt_counts
        .into_iter()
        .map(|(class, support)| {
            let hits = hit_counts.get(&class).copied().unwrap_or(0);
            (
                class,
                ClassRecall {
                    support,
                    recall: hits as f64 / support as f64,
                },
            )
        })
        .collect())
}

/// Predictions and ground truth of one scene, for AP-style metrics that
/// re-match per class.
#[derive(Debug, Clone)]
pub struct ScenePredictions {
    pub preds: Vec<TripletPrediction>,
    pub gts: Vec<GtTriplet>,
}

/// Weighted mean average precision over predicate classes: AP per class
/// from the split-pooled ranked predictions (area under the exact PR
/// staircase), weighted by ground-truth support.
pub fn wmap(scenes: &[ScenePredictions], mode: BoxMode, iou_thresh: f64) -> Result<f64> {
    let mut classes: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    let mut total_gt = 0u64;
    for scene in scenes {
        for g in &scene.gts {
            classes.insert(g.predicate);
            total_gt += 1;
        }
    }
    if total_gt == 0 {
        return Err(Error::Data("empty ground truth".into()));
    }

    let mut weighted = 0.0;
    for &class in &classes {
        let mut flags: Vec<(f64, usize, bool)> = Vec::new();
        let mut n_gt_class = 0u64;
        for (scene_idx, scene) in scenes.iter().enumerate() {
            let preds: Vec<&TripletPrediction> = scene
                .preds
                .iter()
                .filter(|p| p.predicate == class)
                .collect();
            let gts: Vec<GtTriplet> = scene
                .gts
                .iter()
                .filter(|g| g.predicate == class)
                .cloned()
                .collect();
            n_gt_class += gts.len() as u64;
            // Class-restricted greedy matching within the scene.
            let owned: Vec<TripletPrediction> = preds.iter().map(|p| (*p).clone()).collect();
            let matches = match_triplets(&owned, &gts, iou_thresh, mode)?;
            for (p, m) in owned.iter().zip(matches) {
                flags.push((p.score, scene_idx, m.is_some()));
            }
        }
        if n_gt_class == 0 {
            continue;
        }
        // Pool across scenes by descending score with a deterministic
        // tie-break.
        flags.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let mut tp = 0u64;
        let mut ap = 0.0;
        for (rank, (_, _, is_tp)) in flags.iter().enumerate() {
            if *is_tp {
                tp += 1;
                ap += tp as f64 / (rank + 1) as f64;
            }
        }
        let ap = ap / n_gt_class as f64;
        weighted += (n_gt_class as f64 / total_gt as f64) * ap;
    }
    Ok(weighted)
}

/// Weighted score on a 0-100 scale:
/// `0.2 * R@50 + 0.4 * wmAP_rel + 0.4 * wmAP_phr`, inputs as
/// percentages.
pub fn score_wtd(r50: f64, wmap_rel: f64, wmap_phr: f64) -> f64 {
    0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr
}

/// Evaluation subtask, deciding what ground truth the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtask {
    /// Ground-truth boxes and labels; only predicates are predicted.
    PredCls,
    /// Ground-truth boxes; labels and predicates are predicted.
    SgCls,
    /// Simulated detections; everything is predicted.
    SgGen,
}

impl std::str::FromStr for Subtask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Subtask> {
        match s.to_ascii_lowercase().as_str() {
            "predcls" => Ok(Subtask::PredCls),
            "sgcls" => Ok(Subtask::SgCls),
            "sggen" => Ok(Subtask::SgGen),
            other => Err(Error::InvalidArgument(format!("unknown subtask {other}"))),
        }
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// K values for the recall metrics.
    pub ks: Vec<usize>,
    pub iou_thresh: f64,
    /// Keep only the argmax non-background predicate per ordered pair.
    pub graph_constraint: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![20, 50, 100],
            iou_thresh: 0.5,
            graph_constraint: true,
        }
    }
}

impl EvalOptions {
    pub fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(100)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("K values must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_thresh) {
            return Err(Error::Config("IoU threshold must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Ground truth of a scene in evaluation form.
pub fn gt_triplets_of(scene: &SceneSample) -> Vec<GtTriplet> {
    scene
        .gt_triplets
        .iter()
        .map(|t| {
            let subj = scene
                .detections
                .iter()
                .find(|d| d.id == t.subject_id)
                .expect("triplet subject exists");
            let obj = scene
                .detections
                .iter()
                .find(|d| d.id == t.object_id)
                .expect("triplet object exists");
            GtTriplet {
                subject_box: subj.bbox,
                object_box: obj.bbox,
                subject_label: subj.label,
                object_label: obj.label,
                predicate: t.predicate,
            }
        })
        .collect()
}

/// Run the model on one scene under a subtask and rank its triplet
/// predictions. Scenes with fewer than two (surviving) detections yield
/// no predictions. The world (for the detector simulator) is only
/// required for SGGen.
#[allow(clippy::too_many_arguments)]
pub fn predict_scene(
    store: &ParamStore,
    cfg: &DualMpnnConfig,
    world: Option<&World>,
    scene: &SceneSample,
    subtask: Subtask,
    noise: &DetectorNoise,
    detector_seed: u64,
    opts: &EvalOptions,
) -> Result<Vec<TripletPrediction>> {
    let detections = match subtask {
        Subtask::PredCls | Subtask::SgCls => scene.detections.clone(),
        Subtask::SgGen => {
            let world = world.ok_or_else(|| {
                Error::InvalidArgument("detector simulation needs the world".into())
            })?;
            simulate_detector(world, scene, noise, detector_seed)?
        }
    };
    if detections.len() < 2 {
        return Ok(Vec::new());
    }
    let g = build_primitive_graph(&detections, &GraphMode::Complete)?;
    let dg = build_edge_dual_graph(&g)?;
    let prepared = PreparedScene::new(&g, &dg, cfg.d_obj)?;
    let mut tape = Tape::new();
    let state = forward(&mut tape, store, cfg, &prepared)?;
    let obj_probs = tape.value(state.obj_probs);
    let rel_probs = tape.value(state.rel_probs);

    // Object labels and confidences per subtask.
    let mut labels = Vec::with_capacity(detections.len());
    let mut confidences = Vec::with_capacity(detections.len());
    for (i, det) in detections.iter().enumerate() {
        match subtask {
            Subtask::PredCls => {
                labels.push(det.label);
                confidences.push(1.0);
            }
            Subtask::SgCls | Subtask::SgGen => {
                let row = obj_probs.row(i);
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                labels.push(best);
                confidences.push(row[best]);
            }
        }
    }

    let mut preds = Vec::new();
    for dir in 0..prepared.n_directional() {
        let s = prepared.dir_subject[dir];
        let o = prepared.dir_object[dir];
        let row = rel_probs.row(dir);
        if opts.graph_constraint {
            // One candidate per ordered pair: the best non-background
            // predicate.
            let mut best = 1;
            for (c, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = c;
                }
            }
            preds.push(TripletPrediction {
                subject_box: detections[s].bbox,
                object_box: detections[o].bbox,
                subject_label: labels[s],
                object_label: labels[o],
                predicate: best,
                score: confidences[s] * confidences[o] * row[best],
            });
        } else {
            for (c, v) in row.iter().enumerate().skip(1) {
                preds.push(TripletPrediction {
                    subject_box: detections[s].bbox,
                    object_box: detections[o].bbox,
                    subject_label: labels[s],
                    object_label: labels[o],
                    predicate: c,
                    score: confidences[s] * confidences[o] * v,
                });
            }
        }
    }
    preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    preds.truncate(opts.max_k());
    Ok(preds)
}

/// Head/body/tail stratum of a predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Head,
    Body,
    Tail,
}

/// Predicates ranked by frequency and split 30/40/30 by rank into
/// head/body/tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataMap {
    /// Predicate -> (1-based frequency rank, stratum).
    pub assignment: BTreeMap<usize, (usize, Stratum)>,
}

/// Rank predicates by descending count (ties by class index) and split
/// 30% / 40% / 30% by rank.
pub fn strata_from_counts(counts: &BTreeMap<usize, u64>) -> StrataMap {
    let mut ranked: Vec<(usize, u64)> = counts.iter().map(|(&c, &n)| (c, n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let p = ranked.len();
    let head_n = ((0.3 * p as f64).round() as usize).max(1).min(p);
    let body_n = ((0.4 * p as f64).round() as usize).min(p - head_n);
    let mut assignment = BTreeMap::new();
    for (i, (class, _)) in ranked.into_iter().enumerate() {
        let stratum = if i < head_n {
            Stratum::Head
        } else if i < head_n + body_n {
            Stratum::Body
        } else {
            Stratum::Tail
        };
        assignment.insert(class, (i + 1, stratum));
    }
    StrataMap { assignment }
}

/// Aggregate of one stratum: member classes, total support, unweighted
/// mean recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub classes: Vec<usize>,
    pub support: u64,
    pub mean_recall: f64,
}

/// Full metric bundle of one evaluation run. Recall-family values are
/// fractions in [0,1]; `score_wtd` is on the 0-100 percentage scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subtask: Subtask,
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_recall_at: BTreeMap<usize, f64>,
    pub wmap_rel: f64,
    pub wmap_phr: f64,
    pub score_wtd: f64,
    /// Per-predicate support and recall at the largest K.
    pub per_predicate_recall: BTreeMap<usize, ClassRecall>,
    pub strata: Option<BTreeMap<String, StratumReport>>,
}

/// Evaluate a model over a whole split. Scene-level prediction runs in
/// parallel and is merged in input order, so results are deterministic
/// for any thread count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_dataset(
    store: &ParamStore,
    cfg: &DualMpnnConfig,
    world: &World,
    samples: &[SceneSample],
    subtask: Subtask,
    noise: &DetectorNoise,
    opts: &EvalOptions,
    strata: Option<&StrataMap>,
) -> Result<MetricsReport> {
    opts.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let per_scene: Vec<Result<ScenePredictions>> = samples
        .par_iter()
        .enumerate()
        .map(|(idx, scene)| {
            let preds = predict_scene(
                store,
                cfg,
                Some(world),
                scene,
                subtask,
                noise,
                0x5eed_0000 + idx as u64,
                opts,
            )?;
            Ok(ScenePredictions {
                preds,
                gts: gt_triplets_of(scene),
            })
        })
        .collect();
    let scenes: Vec<ScenePredictions> = per_scene.into_iter().collect::<Result<_>>()?;
    report_from_predictions(&scenes, subtask, opts, strata)
}

/// Build the metric bundle from per-scene predictions and ground truth.
pub fn report_from_predictions(
    scenes: &[ScenePredictions],
    subtask: Subtask,
    opts: &EvalOptions,
    strata: Option<&StrataMap>,
) -> Result<MetricsReport> {
    let matched: Vec<SceneMatches> = scenes
        .iter()
        .map(|s| {
            Ok(SceneMatches {
                matches: match_triplets(&s.preds, &s.gts, opts.iou_thresh, BoxMode::Pair)?,
                gt_predicates: s.gts.iter().map(|g| g.predicate).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let mut recall_at = BTreeMap::new();
    let mut mean_recall_at = BTreeMap::new();
    for &k in &opts.ks {
        recall_at.insert(k, recall_at_k(&matched, k)?);
        mean_recall_at.insert(k, mean_recall_at_k(&matched, k)?);
    }
    let wmap_rel = wmap(scenes, BoxMode::Pair, opts.iou_thresh)?;
    let wmap_phr = wmap(scenes, BoxMode::Union, opts.iou_thresh)?;
    let r50 = recall_at
        .get(&50)
        .copied()
        .unwrap_or_else(|| recall_at.values().next_back().copied().unwrap_or(0.0));
    let per_class = per_predicate_recall(&matched, opts.max_k())?;

    let strata_report = strata.map(|map| {
        let mut out: BTreeMap<String, StratumReport> = BTreeMap::new();
        for (name, stratum) in [
            ("head", Stratum::Head),
            ("body", Stratum::Body),
            ("tail", Stratum::Tail),
        ] {
            let classes: Vec<usize> = map
                .assignment
                .iter()
                .filter(|(_, (_, s))| *s == stratum)
                .map(|(&c, _)| c)
                .collect();
            let members: Vec<&ClassRecall> = classes
                .iter()
                .filter_map(|c| per_class.get(c))
                .collect();
            let support = members.iter().map(|c| c.support).sum();
            let mean_recall = if members.is_empty() {
                0.0
            } else {
                members.iter().map(|c| c.recall).sum::<f64>() / members.len() as f64
            };
            out.insert(
                name.to_string(),
                StratumReport {
                    classes,
                    support,
                    mean_recall,
                },
            );
        }
        out
    });

    Ok(MetricsReport {
        subtask,
        recall_at,
        mean_recall_at,
        wmap_rel,
        wmap_phr,
        score_wtd: score_wtd(100.0 * r50, 100.0 * wmap_rel, 100.0 * wmap_phr),
        per_predicate_recall: per_class,
        strata: strata_report,
    })
}

/// One row of the long-tail table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongtailRow {
    pub rank: usize,
    pub predicate: usize,
    pub support: u64,
    pub recall: f64,
    pub stratum: Stratum,
}

/// Plot-ready per-predicate table grouped by stratum, ordered by
/// frequency rank.
pub fn longtail_report(report: &MetricsReport, strata: &StrataMap) -> Vec<LongtailRow> {
    let mut rows: Vec<LongtailRow> = strata
        .assignment
        .iter()
        .map(|(&predicate, &(rank, stratum))| {
            let class = report.per_predicate_recall.get(&predicate);
            LongtailRow {
                rank,
                predicate,
                support: class.map_or(0, |c| c.support),
                recall: class.map_or(0.0, |c| c.recall),
                stratum,
            }
        })
        .collect();
    rows.sort_by_key(|r| r.rank);
    rows
}

/// CSV form of the long-tail table: rank,predicate,support,recall,stratum.
pub fn longtail_csv(rows: &[LongtailRow]) -> String {
    let mut out = String::from("rank,predicate,support,recall,stratum\n");
    for r in rows {
        let stratum = match r.stratum {
            Stratum::Head => "head",
            Stratum::Body => "body",
            Stratum::Tail => "tail",
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.rank, r.predicate, r.support, r.recall, stratum
        ));
    }
    out
}
