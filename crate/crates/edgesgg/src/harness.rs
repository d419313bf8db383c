//! Reproducible experiment driver: dataset construction, SGD training
//! with per-epoch loss logging and best-validation checkpointing,
//! evaluation with report emission, and the branch/aggregation ablation
//! runner.
//!
//! Determinism: datasets are pure functions of the world seed (identical
//! across model seeds and ablation variants), parameter init and shuffling
//! are pure functions of the run seed, and all parallel reductions merge
//! in input order, so outputs are bit-identical for any `--jobs` level.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{build_edge_dual_graph, build_primitive_graph, GraphMode};
use crate::metrics::{
    evaluate_dataset, longtail_csv, longtail_report, strata_from_counts, EvalOptions,
    MetricsReport, StrataMap, Subtask,
};
use crate::model::{
    checkpoint_to_json, forward, init_params, joint_loss, DualMpnnConfig, PreparedScene,
};
use crate::scenes::{
    generate_world, sample_scene, write_dataset, Dataset, DetectorNoise, SceneSample, Split,
    World, WorldSpec,
};
use crate::tensor::{ParamStore, Tape, Tensor};

/// Scene counts per split and the per-scene object count range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub n_objects_min: usize,
    pub n_objects_max: usize,
}

/// SGD settings. A zero learning rate freezes the parameters (the
/// optimizer step is skipped), which keeps the loss series constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop once train relation accuracy reaches this level, checked once
    /// per epoch.
    #[serde(default)]
    pub early_stop_rel_acc: Option<f64>,
}

/// Everything one experiment needs, serialized as the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub dataset: DatasetSizes,
    pub model: DualMpnnConfig,
    pub optimizer: OptimizerConfig,
    pub subtask: Subtask,
    pub detector_noise: DetectorNoise,
    #[serde(default)]
    pub eval: EvalOptions,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.detector_noise.validate()?;
        self.eval.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.optimizer.lr < 0.0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.dataset.n_objects_min < 2 || self.dataset.n_objects_max < self.dataset.n_objects_min
        {
            return Err(Error::Config("invalid object count range".into()));
        }
        if self.dataset.train == 0 {
            return Err(Error::Config("training split must be non-empty".into()));
        }
        if self.model.n_obj_classes != self.world.n_obj_classes
            || self.model.n_rel_classes != self.world.n_rel_classes
        {
            return Err(Error::Config(
                "model vocabulary sizes must match the world".into(),
            ));
        }
        if self.model.d_obj != self.world.d_obj {
            return Err(Error::Config("model d_obj must match the world".into()));
        }
        Ok(())
    }
}

/// SHA-256 of the canonical JSON serialization.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the combined words.
    let mut x = a
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(b.rotate_left(17))
        .wrapping_add(c.rotate_left(43));
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    }
}

fn generate_split(
    world: &World,
    sizes: &DatasetSizes,
    split: Split,
    count: usize,
) -> Result<Dataset> {
    let samples: Vec<SceneSample> = (0..count)
        .map(|idx| {
            let seed = mix_seed(world.spec.seed, split_tag(split), idx as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(sizes.n_objects_min..=sizes.n_objects_max);
            sample_scene(world, n, mix_seed(seed, 7, 0), split)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        spec: world.spec.clone(),
        samples,
    })
}

/// World plus the three generated splits. A pure function of the config's
/// world spec and sizes, independent of the model seed.
pub fn build_datasets(config: &ExperimentConfig) -> Result<(World, Dataset, Dataset, Dataset)> {
    let world = generate_world(&config.world)?;
    let train = generate_split(&world, &config.dataset, Split::Train, config.dataset.train)?;
    let val = generate_split(&world, &config.dataset, Split::Val, config.dataset.val)?;
    let test = generate_split(&world, &config.dataset, Split::Test, config.dataset.test)?;
    Ok((world, train, val, test))
}

/// A training-ready scene: prepared index structure plus targets.
pub struct TrainScene {
    pub prepared: PreparedScene,
    pub obj_targets: Vec<usize>,
    pub rel_targets: Vec<usize>,
}

/// Precompute graphs and targets for every sample; scenes build in
/// parallel, order preserved.
pub fn prepare_scenes(samples: &[SceneSample], cfg: &DualMpnnConfig) -> Result<Vec<TrainScene>> {
    samples
        .par_iter()
        .map(|sample| {
            let g = build_primitive_graph(&sample.detections, &GraphMode::Complete)?;
            let dg = build_edge_dual_graph(&g)?;
            let prepared = PreparedScene::new(&g, &dg, cfg.d_obj)?;
            let obj_targets: Vec<usize> = g.nodes.iter().map(|d| d.label).collect();
            let mut rel_targets = vec![0usize; prepared.n_directional()];
            for t in &sample.gt_triplets {
                let s = g.node_position(t.subject_id).expect("triplet subject");
                let o = g.node_position(t.object_id).expect("triplet object");
                for ((subj, obj), target) in prepared
                    .dir_subject
                    .iter()
                    .zip(&prepared.dir_object)
                    .zip(&mut rel_targets)
                {
                    if *subj == s && *obj == o {
                        *target = t.predicate;
                    }
                }
            }
            Ok(TrainScene {
                prepared,
                obj_targets,
                rel_targets,
            })
        })
        .collect()
}

/// Mean joint loss over scenes without updating parameters.
pub fn mean_loss(store: &ParamStore, cfg: &DualMpnnConfig, scenes: &[TrainScene]) -> Result<(f64, f64, f64)> {
    let parts: Vec<Result<(f64, f64)>> = scenes
        .par_iter()
        .map(|scene| {
            let mut tape = Tape::new();
            let state = forward(&mut tape, store, cfg, &scene.prepared)?;
            let loss = joint_loss(&mut tape, &state, &scene.obj_targets, &scene.rel_targets)?;
            Ok((
                tape.value(loss.object).item()?,
                tape.value(loss.relation).item()?,
            ))
        })
        .collect();
    let mut obj = 0.0;
    let mut rel = 0.0;
    for part in parts {
        let (o, r) = part?;
        obj += o;
        rel += r;
    }
    obj /= scenes.len() as f64;
    rel /= scenes.len() as f64;
    Ok((obj, rel, obj + rel))
}

/// Fraction of directional relation slots (background included) whose
/// argmax matches the target.
pub fn relation_accuracy(
    store: &ParamStore,
    cfg: &DualMpnnConfig,
    scenes: &[TrainScene],
) -> Result<f64> {
    let counts: Vec<Result<(usize, usize)>> = scenes
        .par_iter()
        .map(|scene| {
            let mut tape = Tape::new();
            let state = forward(&mut tape, store, cfg, &scene.prepared)?;
            let probs = tape.value(state.rel_probs);
            let mut hit = 0;
            for (dir, &target) in scene.rel_targets.iter().enumerate() {
                let row = probs.row(dir);
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                if best == target {
                    hit += 1;
                }
            }
            Ok((hit, scene.rel_targets.len()))
        })
        .collect();
    let mut hit = 0usize;
    let mut total = 0usize;
    for c in counts {
        let (h, t) = c?;
        hit += h;
        total += t;
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Loss trace of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub obj: f64,
    pub rel: f64,
    pub total: f64,
    pub val_total: Option<f64>,
}

/// Reproducibility record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub per_epoch: Vec<EpochLoss>,
    pub final_report: Option<MetricsReport>,
    pub final_train_rel_acc: Option<f64>,
    pub wall_time_s: f64,
    pub checkpoint_path: Option<String>,
}

/// Result of a training run: the selected parameters (best validation
/// loss when a validation split exists, else the final parameters) and
/// the run record (without evaluation, which the caller attaches).
pub struct TrainOutcome {
    pub store: ParamStore,
    pub record: RunRecord,
}

/// One gradient accumulation pass over a batch; per-scene work runs in
/// parallel, gradients merge in input order. Returns per-scene
/// (object, relation) losses in batch order.
fn batch_step(
    store: &mut ParamStore,
    cfg: &DualMpnnConfig,
    batch: &[&TrainScene],
    lr: f64,
) -> Result<Vec<(f64, f64)>> {
    type SceneGrads = (f64, f64, Vec<(String, Tensor)>);
    let results: Vec<Result<SceneGrads>> = batch
        .par_iter()
        .map(|scene| {
            let mut tape = Tape::new();
            let state = forward(&mut tape, store, cfg, &scene.prepared)?;
            let loss = joint_loss(&mut tape, &state, &scene.obj_targets, &scene.rel_targets)?;
            tape.backward(loss.total)?;
            let grads: Vec<(String, Tensor)> = tape
                .bound_params()
                .into_iter()
                .filter_map(|name| {
                    tape.param_grad(&name).map(|g| (name, g.clone()))
                })
                .collect();
            Ok((
                tape.value(loss.object).item()?,
                tape.value(loss.relation).item()?,
                grads,
            ))
        })
        .collect();

    let mut losses = Vec::with_capacity(batch.len());
    for result in results {
        let (obj, rel, grads) = result?;
        if !(obj.is_finite() && rel.is_finite()) {
            return Err(Error::Numerical("loss diverged to a non-finite value".into()));
        }
        losses.push((obj, rel));
        for (name, grad) in grads {
            store.add_to_grad(&name, &grad)?;
        }
    }
    store.scale_grads(1.0 / batch.len() as f64);
    if !store.grads_finite() {
        return Err(Error::Numerical("gradients diverged".into()));
    }
    if lr > 0.0 {
        store.sgd_step(lr)?;
    } else {
        store.zero_grads();
    }
    Ok(losses)
}

/// Train a model with the config's optimizer on generated datasets.
pub fn train(config: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let (_, train_data, val_data, _) = build_datasets(config)?;
    let cfg = &config.model;
    let train_scenes = prepare_scenes(&train_data.samples, cfg)?;
    let val_scenes = prepare_scenes(&val_data.samples, cfg)?;

    let mut store = init_params(cfg, seed)?;
    let mut best: Option<(f64, ParamStore)> = None;
    let mut per_epoch = Vec::with_capacity(config.optimizer.epochs);

    let order: Vec<usize> = (0..train_scenes.len()).collect();
    for epoch in 0..config.optimizer.epochs {
        let mut shuffled = order.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xe90c, epoch as u64));
        shuffled.shuffle(&mut rng);

        // Per-scene losses stored by scene index so the epoch mean is
        // independent of the shuffle order.
        let mut scene_losses = vec![(0.0, 0.0); train_scenes.len()];
        for chunk in shuffled.chunks(config.optimizer.batch_size) {
            let batch: Vec<&TrainScene> = chunk.iter().map(|&i| &train_scenes[i]).collect();
            let losses = batch_step(&mut store, cfg, &batch, config.optimizer.lr)?;
            for (&scene_idx, loss) in chunk.iter().zip(losses) {
                scene_losses[scene_idx] = loss;
            }
        }
        let obj = scene_losses.iter().map(|l| l.0).sum::<f64>() / train_scenes.len() as f64;
        let rel = scene_losses.iter().map(|l| l.1).sum::<f64>() / train_scenes.len() as f64;

        let val_total = if val_scenes.is_empty() {
            None
        } else {
            let (_, _, total) = mean_loss(&store, cfg, &val_scenes)?;
            if best.as_ref().is_none_or(|(b, _)| total < *b) {
                best = Some((total, store.clone()));
            }
            Some(total)
        };
        per_epoch.push(EpochLoss {
            epoch,
            obj,
            rel,
            total: obj + rel,
            val_total,
        });
        log::info!(
            "epoch {epoch}: obj {obj:.4} rel {rel:.4} total {:.4}",
            obj + rel
        );

        if let Some(threshold) = config.optimizer.early_stop_rel_acc {
            let acc = relation_accuracy(&store, cfg, &train_scenes)?;
            if acc >= threshold {
                log::info!("early stop at epoch {epoch}: relation accuracy {acc:.4}");
                break;
            }
        }
    }

    let selected = match best {
        Some((_, snapshot)) => snapshot,
        None => store,
    };
    let final_train_rel_acc = Some(relation_accuracy(&selected, cfg, &train_scenes)?);

    Ok(TrainOutcome {
        store: selected,
        record: RunRecord {
            config_hash: config_hash(config)?,
            seed,
            per_epoch,
            final_report: None,
            final_train_rel_acc,
            wall_time_s: started.elapsed().as_secs_f64(),
            checkpoint_path: None,
        },
    })
}

/// Evaluate a trained store on the config's test split and subtask,
/// with strata ranked by training-split predicate frequency.
pub fn evaluate_run(
    config: &ExperimentConfig,
    store: &ParamStore,
) -> Result<(MetricsReport, StrataMap)> {
    let (world, train_data, _, test_data) = build_datasets(config)?;
    let strata = strata_from_counts(&train_data.predicate_counts());
    let report = evaluate_dataset(
        store,
        &config.model,
        &world,
        &test_data.samples,
        config.subtask,
        &config.detector_noise,
        &config.eval,
        Some(&strata),
    )?;
    Ok((report, strata))
}

/// Train, evaluate, and write every artifact (config, checkpoint, run
/// record, report, long-tail CSV) under `out_dir`.
pub fn run_training(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<RunRecord> {
    std::fs::create_dir_all(out_dir)?;
    let mut outcome = train(config, seed)?;
    let (report, strata) = evaluate_run(config, &outcome.store)?;

    let ckpt_path = out_dir.join("checkpoint.json");
    let ckpt = checkpoint_to_json(&outcome.store, &config.model)?;
    write_json(&ckpt_path, &ckpt)?;

    write_json(&out_dir.join("config.json"), &serde_json::to_value(config)?)?;
    write_json(&out_dir.join("report.json"), &serde_json::to_value(&report)?)?;
    let rows = longtail_report(&report, &strata);
    std::fs::write(out_dir.join("longtail.csv"), longtail_csv(&rows))?;

    outcome.record.final_report = Some(report);
    outcome.record.checkpoint_path = Some(ckpt_path.to_string_lossy().into_owned());
    write_json(
        &out_dir.join("runrecord.json"),
        &serde_json::to_value(&outcome.record)?,
    )?;
    Ok(outcome.record)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Which axis an ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Branches,
    Aggregation,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<AblationAxis> {
        match s.to_ascii_lowercase().as_str() {
            "branches" => Ok(AblationAxis::Branches),
            "aggregation" => Ok(AblationAxis::Aggregation),
            other => Err(Error::InvalidArgument(format!("unknown axis {other}"))),
        }
    }
}

/// Median mean-recall per variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// K -> median mR@K over seeds.
    pub median_mean_recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Variants of an ablation axis applied to a base config.
pub fn ablation_variants(
    config: &ExperimentConfig,
    axis: AblationAxis,
) -> Vec<(String, ExperimentConfig)> {
    let mut variants = Vec::new();
    match axis {
        AblationAxis::Branches => {
            for (name, object_branch, relation_branch) in [
                ("object", true, false),
                ("relation", false, true),
                ("both", true, true),
            ] {
                let mut v = config.clone();
                v.model.object_branch = object_branch;
                v.model.relation_branch = relation_branch;
                variants.push((name.to_string(), v));
            }
        }
        AblationAxis::Aggregation => {
            for (name, aggregation) in [
                ("mean", crate::model::Aggregation::Mean),
                ("multiply", crate::model::Aggregation::Multiply),
                ("concat", crate::model::Aggregation::Concat),
            ] {
                let mut v = config.clone();
                v.model.object_branch = true;
                v.model.relation_branch = true;
                v.model.aggregation = aggregation;
                variants.push((name.to_string(), v));
            }
        }
    }
    variants
}

/// Run every variant of the axis under every configured seed and report
/// median mR@K per variant. Fewer than three seeds only warns.
pub fn ablate(config: &ExperimentConfig, axis: AblationAxis) -> Result<AblationTable> {
    config.validate()?;
    if config.seeds.len() < 3 {
        log::warn!(
            "ablation over {} seed(s); medians are fragile below 3",
            config.seeds.len()
        );
    }
    let mut rows = Vec::new();
    for (variant, vconfig) in ablation_variants(config, axis) {
        let mut per_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &seed in &config.seeds {
            let outcome = train(&vconfig, seed)?;
            let (report, _) = evaluate_run(&vconfig, &outcome.store)?;
            for (&k, &v) in &report.mean_recall_at {
                per_k.entry(k).or_default().push(v);
            }
            log::info!(
                "ablation {variant} seed {seed}: mR {:?}",
                report.mean_recall_at
            );
        }
        rows.push(AblationRow {
            variant,
            median_mean_recall: per_k
                .into_iter()
                .map(|(k, mut vs)| (k, median(&mut vs)))
                .collect(),
        });
    }
    Ok(AblationTable { axis, rows })
}

/// Generate a dataset file from a world spec (the `gen` subcommand).
pub fn run_gen(
    spec: &WorldSpec,
    n: usize,
    seed_override: Option<u64>,
    split: Split,
    out: &Path,
) -> Result<()> {
    let mut spec = spec.clone();
    if let Some(seed) = seed_override {
        spec.seed = seed;
    }
    let world = generate_world(&spec)?;
    let samples: Vec<SceneSample> = (0..n)
        .map(|idx| {
            let seed = mix_seed(spec.seed, split_tag(split), idx as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_objects = rng.gen_range(4..=7);
            sample_scene(&world, n_objects, mix_seed(seed, 7, 0), split)
        })
        .collect::<Result<_>>()?;
    write_dataset(
        &Dataset {
            spec: spec.clone(),
            samples,
        },
        out,
    )
}

/// Transform a scene file into its dual graph file; returns
/// (dual node count, dual edge count).
pub fn run_transform(input: &Path, output: &Path) -> Result<(usize, usize)> {
    let text = std::fs::read_to_string(input)?;
    let scene: crate::graph::SceneFile = serde_json::from_str(&text)?;
    let detections = scene.to_detections()?;
    let g = build_primitive_graph(&detections, &scene.graph_mode())?;
    let dual = build_edge_dual_graph(&g)?;
    write_json(output, &serde_json::to_value(&dual)?)?;
    Ok((dual.n_dual_nodes(), dual.n_dual_edges()))
}

/// Evaluate a checkpoint file against a dataset file (the `eval`
/// subcommand); strata rank by the dataset's own predicate frequencies.
/// Writes the report JSON and a sibling long-tail CSV.
pub fn run_eval(
    ckpt_path: &Path,
    data_path: &Path,
    subtask: Subtask,
    noise: &DetectorNoise,
    report_path: &Path,
) -> Result<MetricsReport> {
    let ckpt: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ckpt_path)?)?;
    let (store, cfg) = crate::model::checkpoint_from_json(&ckpt)?;
    let dataset = crate::scenes::read_dataset(data_path)?;
    if dataset.samples.is_empty() {
        return Err(Error::Data("empty evaluation dataset".into()));
    }
    if cfg.n_obj_classes != dataset.spec.n_obj_classes
        || cfg.n_rel_classes != dataset.spec.n_rel_classes
        || cfg.d_obj != dataset.spec.d_obj
    {
        return Err(Error::Data(
            "checkpoint vocabulary does not match the dataset".into(),
        ));
    }
    let world = generate_world(&dataset.spec)?;
    let strata = strata_from_counts(&dataset.predicate_counts());
    let report = evaluate_dataset(
        &store,
        &cfg,
        &world,
        &dataset.samples,
        subtask,
        noise,
        &EvalOptions::default(),
        Some(&strata),
    )?;
    write_json(report_path, &serde_json::to_value(&report)?)?;
    let csv_path = report_path.with_extension("longtail.csv");
    std::fs::write(csv_path, longtail_csv(&longtail_report(&report, &strata)))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Aggregation;
    use crate::scenes::default_rulebook;

    pub(crate) fn tiny_config(out_dir: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            world: WorldSpec {
                n_obj_classes: 5,
                n_rel_classes: 6,
                zipf_exponent: 1.0,
                rulebook: default_rulebook(),
                d_obj: 8,
                seed: 11,
            },
            dataset: DatasetSizes {
                train: 6,
                val: 2,
                test: 3,
                n_objects_min: 3,
                n_objects_max: 4,
            },
            model: DualMpnnConfig {
                d_obj: 8,
                d_rel: 6,
                layers: 2,
                n_obj_classes: 5,
                n_rel_classes: 6,
                aggregation: Aggregation::Concat,
                object_branch: true,
                relation_branch: true,
            },
            optimizer: OptimizerConfig {
                lr: 0.1,
                epochs: 3,
                batch_size: 4,
                early_stop_rel_acc: None,
            },
            subtask: Subtask::SgGen,
            detector_noise: DetectorNoise {
                box_jitter: 0.01,
                label_flip: 0.1,
                miss_rate: 0.1,
            },
            eval: EvalOptions::default(),
            seeds: vec![1, 2, 3],
            out_dir,
        }
    }

    #[test]
    fn datasets_are_deterministic_and_split_disjoint_seeds() {
        let config = tiny_config(PathBuf::from("unused"));
        let (_, train1, val1, _) = build_datasets(&config).unwrap();
        let (_, train2, _, _) = build_datasets(&config).unwrap();
        assert_eq!(train1, train2);
        assert_ne!(train1.samples[0], val1.samples[0]);
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let mut config = tiny_config(PathBuf::from("unused"));
        config.optimizer.lr = 0.0;
        config.optimizer.epochs = 3;
        let outcome = train(&config, 5).unwrap();
        let first = &outcome.record.per_epoch[0];
        for epoch in &outcome.record.per_epoch {
            assert_eq!(epoch.total, first.total);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let config = tiny_config(PathBuf::from("unused"));
        let a = train(&config, 9).unwrap();
        let b = train(&config, 9).unwrap();
        assert_eq!(a.record.per_epoch, b.record.per_epoch);
        let ja = checkpoint_to_json(&a.store, &config.model).unwrap();
        let jb = checkpoint_to_json(&b.store, &config.model).unwrap();
        assert_eq!(ja.to_string(), jb.to_string());
    }

    #[test]
    fn training_reduces_loss() {
        let mut config = tiny_config(PathBuf::from("unused"));
        config.optimizer.epochs = 12;
        let outcome = train(&config, 3).unwrap();
        let first = outcome.record.per_epoch.first().unwrap().total;
        let last = outcome.record.per_epoch.last().unwrap().total;
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn ablation_emits_three_rows_per_axis() {
        let mut config = tiny_config(PathBuf::from("unused"));
        config.seeds = vec![1];
        config.optimizer.epochs = 1;
        for axis in [AblationAxis::Branches, AblationAxis::Aggregation] {
            let table = ablate(&config, axis).unwrap();
            assert_eq!(table.rows.len(), 3);
            for row in &table.rows {
                assert!(row.median_mean_recall.contains_key(&50));
            }
        }
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let config = tiny_config(PathBuf::from("unused"));
        let h1 = config_hash(&config).unwrap();
        let h2 = config_hash(&config).unwrap();
        assert_eq!(h1, h2);
        let mut other = config.clone();
        other.optimizer.lr *= 2.0;
        assert_ne!(h1, config_hash(&other).unwrap());
    }
}
