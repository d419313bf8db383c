//! Synthetic scene generation: the stand-in for a real object detector.
//!
//! A world fixes class prototypes and a rulebook of
//! (subject class, object class, predicate, box precondition) entries.
//! Scenes sample boxes and classes, attach noisy prototype features, and
//! assign a ground-truth predicate to every ordered pair for which a rule
//! fires, choosing among applicable predicates with Zipf-skewed weights
//! so the predicate distribution is long-tailed. A detector simulator
//! jitters boxes, flips labels (resampling the feature from the flipped
//! class) and drops objects for the SGGen subtask.
//!
//! Everything is a pure function of (spec, seed).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BBox, Detection};

/// Dataset file format version for the JSONL header.
pub const DATASET_VERSION: u32 = 1;

/// Standard deviation of the feature noise around class prototypes.
pub const FEATURE_NOISE: f64 = 0.1;

/// Center distance threshold for the `Near` precondition.
pub const NEAR_THRESHOLD: f64 = 0.25;

/// Decidable geometric precondition between a subject and an object box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxRelation {
    /// The boxes intersect with positive area.
    Overlap,
    /// The subject's center is strictly above the object's (smaller y).
    Above,
    /// The subject box contains the object box.
    Contains,
    /// Box centers are within [`NEAR_THRESHOLD`].
    Near,
}

impl BoxRelation {
    pub fn holds(&self, subject: &BBox, object: &BBox) -> bool {
        match self {
            BoxRelation::Overlap => subject.intersection_area(object) > 0.0,
            BoxRelation::Above => subject.center().1 < object.center().1,
            BoxRelation::Contains => subject.contains(object),
            BoxRelation::Near => {
                let (sx, sy) = subject.center();
                let (ox, oy) = object.center();
                ((sx - ox).powi(2) + (sy - oy).powi(2)).sqrt() < NEAR_THRESHOLD
            }
        }
    }
}

/// One rulebook entry: subject and object classes plus the box
/// precondition under which `predicate` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRule {
    pub subject_class: usize,
    pub object_class: usize,
    pub predicate: usize,
    pub precondition: BoxRelation,
}

/// Generator specification: vocabulary sizes, predicate skew, rulebook,
/// feature dimension, and the world seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_obj_classes: usize,
    /// Relation vocabulary including background class 0.
    pub n_rel_classes: usize,
    /// Zipf exponent; 0 is uniform, larger is more skewed.
    pub zipf_exponent: f64,
    pub rulebook: Vec<RelationRule>,
    pub d_obj: usize,
    pub seed: u64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_obj_classes < 2 {
            return Err(Error::Config("need at least 2 object classes".into()));
        }
        if self.n_rel_classes < 2 {
            return Err(Error::Config(
                "need at least 2 relation classes (background plus one)".into(),
            ));
        }
        if self.zipf_exponent < 0.0 {
            return Err(Error::Config("zipf exponent must be non-negative".into()));
        }
        if self.d_obj < 1 {
            return Err(Error::Config("d_obj must be at least 1".into()));
        }
        for rule in &self.rulebook {
            if rule.predicate == 0 || rule.predicate >= self.n_rel_classes {
                return Err(Error::Config(format!(
                    "rule predicate {} outside [1, {})",
                    rule.predicate, self.n_rel_classes
                )));
            }
            if rule.subject_class >= self.n_obj_classes
                || rule.object_class >= self.n_obj_classes
            {
                return Err(Error::Config("rule references unknown object class".into()));
            }
        }
        Ok(())
    }
}

/// A validated world: class prototypes plus the rulebook from its spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub spec: WorldSpec,
    /// Unit-norm class prototypes with pairwise cosine below 0.9.
    pub prototypes: Vec<Vec<f64>>,
}

/// Build class prototypes and validate the rulebook. Prototypes are
/// sampled from a seeded Gaussian and normalized; sampling retries a
/// bounded number of times to satisfy the pairwise cosine bound.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    const MAX_TRIES: usize = 200;
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(spec.n_obj_classes);
    for class in 0..spec.n_obj_classes {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let mut proto: Vec<f64> = (0..spec.d_obj).map(|_| normal.sample(&mut rng)).collect();
            let norm = proto.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            for v in &mut proto {
                *v /= norm;
            }
            let separated = prototypes
                .iter()
                .all(|p| p.iter().zip(&proto).map(|(a, b)| a * b).sum::<f64>() < 0.9);
            if separated {
                prototypes.push(proto);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not separate prototype for class {class} after {MAX_TRIES} tries"
            )));
        }
    }
    Ok(World {
        spec: spec.clone(),
        prototypes,
    })
}

/// Ground-truth relation triplet by detection id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject_id: u64,
    pub object_id: u64,
    pub predicate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One ground-truth annotated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub detections: Vec<Detection>,
    pub gt_triplets: Vec<Triplet>,
    pub split: Split,
}

fn sample_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.gen_range(0.1..0.4);
    let h = rng.gen_range(0.1..0.4);
    let cx = rng.gen_range(0.05 + w / 2.0..0.95 - w / 2.0);
    let cy = rng.gen_range(0.05 + h / 2.0..0.95 - h / 2.0);
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Zipf weight of a predicate: `1 / rank^s` with rank = predicate index.
fn zipf_weight(predicate: usize, s: f64) -> f64 {
    (predicate as f64).powf(-s)
}

/// Sample one scene: boxes and classes are drawn uniformly, features are
/// noisy class prototypes, and every ordered pair whose classes and
/// geometry match a rule receives one predicate, chosen among the
/// applicable predicates with Zipf(s) weights.
pub fn sample_scene(
    world: &World,
    n_objects: usize,
    seed: u64,
    split: Split,
) -> Result<SceneSample> {
    if n_objects < 2 {
        return Err(Error::InvalidArgument(
            "scenes need at least 2 objects".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, FEATURE_NOISE).expect("feature noise");
    let mut detections = Vec::with_capacity(n_objects);
    for id in 0..n_objects {
        let class = rng.gen_range(0..world.spec.n_obj_classes);
        let bbox = sample_box(&mut rng);
        let feature: Vec<f64> = world.prototypes[class]
            .iter()
            .map(|p| p + normal.sample(&mut rng))
            .collect();
        let mut label_scores = vec![0.0; world.spec.n_obj_classes];
        label_scores[class] = 1.0;
        detections.push(Detection::new(id as u64, feature, bbox, label_scores, class)?);
    }

    let mut gt_triplets = Vec::new();
    let s = world.spec.zipf_exponent;
    for subject in &detections {
        for object in &detections {
            if subject.id == object.id {
                continue;
            }
            let applicable: Vec<usize> = world
                .spec
                .rulebook
                .iter()
                .filter(|r| {
                    r.subject_class == subject.label
                        && r.object_class == object.label
                        && r.precondition.holds(&subject.bbox, &object.bbox)
                })
                .map(|r| r.predicate)
                .collect();
            if applicable.is_empty() {
                continue;
            }
            let total: f64 = applicable.iter().map(|&p| zipf_weight(p, s)).sum();
            let mut draw = rng.gen_range(0.0..total);
            let mut chosen = *applicable.last().unwrap();
            for &p in &applicable {
                draw -= zipf_weight(p, s);
                if draw < 0.0 {
                    chosen = p;
                    break;
                }
            }
            gt_triplets.push(Triplet {
                subject_id: subject.id,
                object_id: object.id,
                predicate: chosen,
            });
        }
    }

    Ok(SceneSample {
        detections,
        gt_triplets,
        split,
    })
}

/// Detector noise model for the SGGen subtask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    /// Gaussian sigma added to each box coordinate.
    pub box_jitter: f64,
    /// Probability of replacing the label (and feature) with another
    /// class.
    pub label_flip: f64,
    /// Probability of dropping a detection entirely.
    pub miss_rate: f64,
}

impl DetectorNoise {
    pub const NONE: DetectorNoise = DetectorNoise {
        box_jitter: 0.0,
        label_flip: 0.0,
        miss_rate: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if self.box_jitter < 0.0 {
            return Err(Error::Config("box jitter must be non-negative".into()));
        }
        for p in [self.label_flip, self.miss_rate] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("noise probabilities must be in [0,1]".into()));
            }
        }
        Ok(())
    }
}

/// Clamp a jittered box back into the unit square with strictly positive
/// extent.
fn repair_box(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    const MIN_EXTENT: f64 = 1e-3;
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let (mut x1, mut y1, mut x2, mut y2) = (clamp(x1), clamp(y1), clamp(x2), clamp(y2));
    if x2 - x1 < MIN_EXTENT {
        let c = ((x1 + x2) / 2.0).clamp(MIN_EXTENT / 2.0, 1.0 - MIN_EXTENT / 2.0);
        x1 = c - MIN_EXTENT / 2.0;
        x2 = c + MIN_EXTENT / 2.0;
    }
    if y2 - y1 < MIN_EXTENT {
        let c = ((y1 + y2) / 2.0).clamp(MIN_EXTENT / 2.0, 1.0 - MIN_EXTENT / 2.0);
        y1 = c - MIN_EXTENT / 2.0;
        y2 = c + MIN_EXTENT / 2.0;
    }
    BBox::new(x1, y1, x2, y2)
}

/// Simulate an imperfect detector over a ground-truth scene. Zero noise
/// returns the ground-truth detections verbatim; `miss_rate` 1 returns an
/// empty list.
pub fn simulate_detector(
    world: &World,
    scene: &SceneSample,
    noise: &DetectorNoise,
    seed: u64,
) -> Result<Vec<Detection>> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.box_jitter.max(1e-300)).expect("jitter sigma");
    let feature_noise = Normal::new(0.0, FEATURE_NOISE).expect("feature noise");
    let mut out = Vec::with_capacity(scene.detections.len());
    for det in &scene.detections {
        if noise.miss_rate > 0.0 && rng.gen_range(0.0..1.0) < noise.miss_rate {
            continue;
        }
        let mut det = det.clone();
        if noise.box_jitter > 0.0 {
            let b = det.bbox;
            det.bbox = repair_box(
                b.x1 + jitter.sample(&mut rng),
                b.y1 + jitter.sample(&mut rng),
                b.x2 + jitter.sample(&mut rng),
                b.y2 + jitter.sample(&mut rng),
            );
        }
        if noise.label_flip > 0.0 && rng.gen_range(0.0..1.0) < noise.label_flip {
            // The detector confuses the object for another class: the
            // reported appearance feature follows the wrong prototype.
            let offset = rng.gen_range(1..world.spec.n_obj_classes);
            let flipped = (det.label + offset) % world.spec.n_obj_classes;
            det.label = flipped;
            det.feature = world.prototypes[flipped]
                .iter()
                .map(|p| p + feature_noise.sample(&mut rng))
                .collect();
            det.label_scores = vec![0.0; world.spec.n_obj_classes];
            det.label_scores[flipped] = 1.0;
        }
        out.push(det);
    }
    Ok(out)
}

/// A generated dataset: the spec it came from plus its samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    /// Ground-truth predicate counts over all samples.
    pub fn predicate_counts(&self) -> std::collections::BTreeMap<usize, u64> {
        let mut counts = std::collections::BTreeMap::new();
        for sample in &self.samples {
            for t in &sample.gt_triplets {
                *counts.entry(t.predicate).or_insert(0) += 1;
            }
        }
        counts
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    spec: WorldSpec,
}

/// Write a dataset as JSON lines: a versioned header, then one sample
/// per line.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = DatasetHeader {
        version: DATASET_VERSION,
        spec: dataset.spec.clone(),
    };
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    for sample in &dataset.samples {
        serde_json::to_writer(&mut file, sample)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a dataset back, rejecting unknown versions and malformed lines.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Data("dataset file is empty".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    if header.version != DATASET_VERSION {
        return Err(Error::Data(format!(
            "dataset version {} unsupported (expected {})",
            header.version, DATASET_VERSION
        )));
    }
    let mut samples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    Ok(Dataset {
        spec: header.spec,
        samples,
    })
}

/// Default crossed rulebook over 5 object classes and 5 predicates.
///
/// Predicates are deliberately confusable along both axes: several class
/// pairs share the same geometric precondition (so box geometry alone
/// cannot name the predicate) and several class pairs map to different
/// predicates depending on direction and geometry (so class context
/// alone cannot either). Rule multiplicity per predicate falls off
/// roughly like the Zipf ranks, giving a long-tailed predicate
/// distribution with every relation still a deterministic function of
/// the scene.
pub fn default_rulebook() -> Vec<RelationRule> {
    use BoxRelation::*;
    let rule = |s, o, p, pre| RelationRule {
        subject_class: s,
        object_class: o,
        predicate: p,
        precondition: pre,
    };
    vec![
        // Head predicate: many subject-above-object class pairs.
        rule(0, 1, 1, Above),
        rule(1, 2, 1, Above),
        rule(0, 2, 1, Above),
        rule(1, 3, 1, Above),
        rule(2, 4, 1, Above),
        rule(0, 4, 1, Above),
        // Reverse directions of some of the same class pairs.
        rule(1, 0, 2, Above),
        rule(2, 1, 2, Above),
        rule(2, 0, 2, Above),
        // Same geometry as the head rules, different subject class.
        rule(3, 1, 3, Above),
        rule(3, 0, 3, Above),
        // One class pair where direction and geometry pick between two
        // tail predicates.
        rule(4, 3, 4, Near),
        rule(3, 4, 5, Overlap),
    ]
}
