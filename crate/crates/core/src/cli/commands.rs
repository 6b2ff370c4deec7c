//! Pipeline verbs. Each reads its inputs from disk, writes its artifacts and
//! echoes the resolved configuration to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cli::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{
    avd, build_report, decide_postprocessing, detection_score, dice_score, largest_components, roc_auc,
    roc_points, DetectionRecord, PostprocessingPolicy, SegmentationReport, VolumeMetrics,
};
use crate::io::{
    extract_fingerprint, generate_phantom_with, read_mask, read_volume, write_mask, write_volume, DatasetIndex,
    ElementType, Fingerprint, Grid, IndexEntry, LabelMask, PhantomOptions, PhantomProfile, Split, Vendor, Volume,
    CLASS_NAMES, NUM_CLASSES,
};
use crate::net::{build_model, Network};
use crate::plan::{make_plan_with, PlanConfig};
use crate::train::{predict_volume, train_with_progress, Checkpoint, ProbabilityMap, TrainingData};

pub const FINGERPRINT_FILE: &str = "fingerprint.json";
pub const PLAN_FILE: &str = "plan.json";
pub const INDEX_FILE: &str = "index.json";
pub const LOO_MANIFEST_FILE: &str = "loo_manifest.json";

fn echo(command: &str, cfg: &ExperimentConfig, inputs: serde_json::Value) -> Result<()> {
    let doc = json!({ "command": command, "inputs": inputs, "config": cfg });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::json("config echo", e))?;
    eprintln!("{text}");
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T, context: &str) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(context, e))?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

// ---------------------------------------------------------------- phantom

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FluidContent {
    Random,
    Free,
    EveryClass,
}

impl FluidContent {
    fn options(self) -> PhantomOptions {
        match self {
            FluidContent::Random => PhantomOptions::default(),
            FluidContent::Free => PhantomOptions::fluid_free(),
            FluidContent::EveryClass => PhantomOptions::every_class(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRequest {
    pub seed: u64,
    pub profile: PhantomProfile,
    pub count: usize,
    pub out: PathBuf,
    /// Vendor tag; defaults to the profile's own vendor.
    pub vendor: Option<Vendor>,
    pub split: Split,
    pub fluid: FluidContent,
    /// Add to an existing index in `out` instead of replacing it.
    pub append: bool,
}

/// Writes `count` phantom pairs plus `index.json`; returns the index path.
pub fn cmd_phantom(req: &PhantomRequest, cfg: &ExperimentConfig) -> Result<PathBuf> {
    echo("phantom", cfg, serde_json::to_value(req).map_err(|e| Error::json("phantom request", e))?)?;
    if req.count == 0 {
        return Err(Error::Config("phantom count must be >= 1".into()));
    }
    create_dir(&req.out)?;
    let vendor = req.vendor.unwrap_or_else(|| req.profile.vendor());
    let index_path = req.out.join(INDEX_FILE);
    let mut entries = if req.append && index_path.exists() {
        DatasetIndex::load(&index_path)?.entries
    } else {
        Vec::new()
    };
    let tag = vendor.as_str().to_ascii_lowercase();
    for i in 0..req.count {
        let seed = req.seed.wrapping_add(i as u64);
        let (mut volume, mut mask) = generate_phantom_with(seed, req.profile, req.fluid.options());
        volume.meta.insert("vendor".into(), vendor.to_string());
        mask.meta.insert("vendor".into(), vendor.to_string());
        let name = format!("{tag}_{seed:04}");
        let vpath = PathBuf::from(format!("{name}.mhd"));
        let mpath = PathBuf::from(format!("{name}_mask.mhd"));
        write_volume(&volume, req.out.join(&vpath))?;
        write_mask(&mask, req.out.join(&mpath))?;
        entries.push(IndexEntry {
            volume: vpath,
            mask: Some(mpath),
            vendor,
            split: req.split,
        });
    }
    let index = DatasetIndex::new(entries, &req.out)?;
    index.save(&index_path)?;
    Ok(index_path)
}

// ----------------------------------------------------------- fingerprint

pub fn cmd_fingerprint(index_path: &Path, out: &Path, cfg: &ExperimentConfig) -> Result<Fingerprint> {
    echo("fingerprint", cfg, json!({ "index": index_path, "out": out }))?;
    let index = DatasetIndex::load(index_path)?;
    let f = extract_fingerprint(&index)?;
    write_text(out, &f.to_json()?)?;
    Ok(f)
}

// ------------------------------------------------------------------ plan

pub fn plan_from(f: &Fingerprint, cfg: &ExperimentConfig) -> Result<PlanConfig> {
    let auto = make_plan_with(f, &cfg.budget, &cfg.plan_overrides.planner_options())?;
    cfg.plan_overrides.apply(auto)
}

pub fn cmd_plan(fingerprint_path: &Path, out: &Path, cfg: &ExperimentConfig) -> Result<PlanConfig> {
    echo("plan", cfg, json!({ "fingerprint": fingerprint_path, "out": out }))?;
    let f: Fingerprint = read_json(fingerprint_path)?;
    let plan = plan_from(&f, cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    plan.save(out)?;
    Ok(plan)
}

// ----------------------------------------------------------------- train

fn labels_of(pred: ProbabilityMap, like: &Volume) -> LabelMask {
    let mut m = pred.argmax();
    m.meta = like.meta.clone();
    m
}

/// Trains on the index's train entries and decides post-processing by
/// predicting those same cases.
pub fn train_index(index: &DatasetIndex, plan: &PlanConfig, cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let pairs = index.load_train_pairs()?;
    if pairs.is_empty() {
        return Err(Error::Precondition("index has no train entries".into()));
    }
    let f = Fingerprint::from_pairs(pairs.iter().map(|(v, m)| (v, Some(m))))?;
    let data = TrainingData::prepare(&pairs, &f.intensity_stats, plan)?;
    let spec = build_model(cfg.model, plan, &cfg.network);
    let net = Network::init(spec, cfg.seed);
    let mut ck = train_with_progress(net, &data, plan, &cfg.train, &cfg.augmentation, |r| {
        eprintln!("epoch {:>4}  lr {:.6}  loss {:.6}", r.epoch, r.lr, r.loss);
    })?;
    let preds: Vec<Result<(LabelMask, LabelMask)>> = parallel_map(&pairs, cfg.effective_workers(), |(v, m)| {
        Ok((labels_of(predict_volume(&ck, v)?, v), m.clone()))
    });
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    ck.postprocessing = Some(decide_postprocessing(&preds)?);
    Ok(ck)
}

pub fn cmd_train(index_path: &Path, plan_path: &Path, out: &Path, cfg: &ExperimentConfig) -> Result<Checkpoint> {
    echo("train", cfg, json!({ "index": index_path, "plan": plan_path, "out": out }))?;
    cfg.validate()?;
    let index = DatasetIndex::load(index_path)?;
    let plan = PlanConfig::load(plan_path)?;
    let ck = train_index(&index, &plan, cfg)?;
    ck.save(out)?;
    Ok(ck)
}

// --------------------------------------------------------------- predict

pub fn seg_file(id: &str) -> String {
    format!("{id}_seg.mhd")
}

pub fn prob_file(id: &str, class: usize) -> String {
    format!("{id}_prob_{}.mhd", CLASS_NAMES[class])
}

fn write_prediction(dir: &Path, id: &str, volume: &Volume, probs: &ProbabilityMap, policy: &PostprocessingPolicy) -> Result<()> {
    let seg = largest_components(&labels_of(probs.clone(), volume), policy);
    write_mask(&seg, dir.join(seg_file(id)))?;
    for c in 0..probs.num_classes {
        let grid = Grid::from_vec(probs.dims, probs.channel(c).iter().map(|&p| p as f32).collect())?;
        let mut v = Volume::new(grid, volume.spacing)?;
        v.origin = volume.origin;
        v.meta = volume.meta.clone();
        v.element_type = ElementType::Float;
        write_volume(&v, dir.join(prob_file(id, c)))?;
    }
    Ok(())
}

pub fn predict_index(ck: &Checkpoint, index: &DatasetIndex, out: &Path, workers: usize) -> Result<usize> {
    create_dir(out)?;
    let policy = ck.postprocessing.clone().unwrap_or_else(PostprocessingPolicy::none);
    let results = parallel_map(&index.entries, workers, |e| -> Result<()> {
        let v = index.load_volume(e)?;
        let probs = predict_volume(ck, &v)?;
        write_prediction(out, &e.id(), &v, &probs, &policy)
    });
    for r in results {
        r?;
    }
    Ok(index.entries.len())
}

pub fn cmd_predict(checkpoint: &Path, index_path: &Path, out: &Path, cfg: &ExperimentConfig) -> Result<usize> {
    echo("predict", cfg, json!({ "checkpoint": checkpoint, "index": index_path, "out": out }))?;
    let ck = Checkpoint::load(checkpoint)?;
    let index = DatasetIndex::load(index_path)?;
    predict_index(&ck, &index, out, cfg.effective_workers())
}

// -------------------------------------------------------------- evaluate

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: SegmentationReport,
    pub detections: Vec<DetectionRecord>,
    /// AUC per foreground class; `None` when undefined (single truth class).
    pub auc: Vec<Option<f64>>,
}

fn load_probs(dir: &Path, id: &str) -> Result<ProbabilityMap> {
    let mut data = Vec::new();
    let mut geom = None;
    for c in 0..NUM_CLASSES {
        let v = read_volume(dir.join(prob_file(id, c)))?;
        geom.get_or_insert((v.dims(), v.spacing, v.origin));
        data.extend(v.voxels.as_slice().iter().map(|&p| p as f64));
    }
    let (dims, spacing, origin) = geom.expect("at least one class");
    Ok(ProbabilityMap {
        num_classes: NUM_CLASSES,
        dims,
        spacing,
        origin,
        data,
    })
}

pub fn evaluate_index(index: &DatasetIndex, predictions: &Path, cfg: &ExperimentConfig) -> Result<Evaluation> {
    let labelled: Vec<&IndexEntry> = index.entries.iter().filter(|e| e.mask.is_some()).collect();
    if labelled.is_empty() {
        return Err(Error::Precondition("index has no labelled entries to evaluate".into()));
    }
    type PerVolume = (VolumeMetrics, Vec<DetectionRecord>);
    let results = parallel_map(&labelled, cfg.effective_workers(), |e| -> Result<PerVolume> {
        let id = e.id();
        let gt = index.load_mask(e)?.expect("filtered to labelled entries");
        let seg_path = predictions.join(seg_file(&id));
        if !seg_path.exists() {
            return Err(Error::Missing(seg_path));
        }
        let pred = read_mask(&seg_path)?;
        let probs = load_probs(predictions, &id)?;
        let mut m = VolumeMetrics {
            volume: id.clone(),
            vendor: e.vendor.to_string(),
            dice: Vec::new(),
            avd_mm3: Vec::new(),
        };
        let mut recs = Vec::new();
        for c in 1..NUM_CLASSES as u8 {
            m.dice.push(dice_score(&pred, &gt, c)?);
            m.avd_mm3.push(avd(&pred, &gt, c, gt.spacing)?);
            recs.push(DetectionRecord {
                volume: id.clone(),
                class: c,
                score: detection_score(&probs, c as usize, cfg.detection_reducer),
                truth: gt.contains(c),
            });
        }
        Ok((m, recs))
    });
    let mut metrics = Vec::new();
    let mut detections = Vec::new();
    for r in results {
        let (m, d) = r?;
        metrics.push(m);
        detections.extend(d);
    }
    let report = build_report(&metrics)?;
    let auc = (1..NUM_CLASSES as u8)
        .map(|c| {
            let recs: Vec<DetectionRecord> = detections.iter().filter(|r| r.class == c).cloned().collect();
            roc_auc(&recs).ok()
        })
        .collect();
    Ok(Evaluation {
        report,
        detections,
        auc,
    })
}

pub fn write_evaluation(ev: &Evaluation, out: &Path) -> Result<()> {
    create_dir(out)?;
    ev.report.write_csv(out.join("report.csv"))?;
    ev.report.write_json(out.join("report.json"))?;

    let path = out.join("detection.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["volume", "class", "score", "truth"])?;
    for r in &ev.detections {
        w.write_record([
            r.volume.clone(),
            CLASS_NAMES[r.class as usize].to_string(),
            r.score.to_string(),
            u8::from(r.truth).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("roc_points.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["class", "threshold", "fpr", "tpr"])?;
    let mut auc = BTreeMap::new();
    for (i, a) in ev.auc.iter().enumerate() {
        let c = (i + 1) as u8;
        auc.insert(CLASS_NAMES[c as usize], *a);
        let recs: Vec<DetectionRecord> = ev.detections.iter().filter(|r| r.class == c).cloned().collect();
        if let Ok(points) = roc_points(&recs) {
            for p in points {
                w.write_record([
                    CLASS_NAMES[c as usize].to_string(),
                    p.threshold.to_string(),
                    p.fpr.to_string(),
                    p.tpr.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out.join("auc.json"), &auc, "auc")
}

pub fn cmd_evaluate(index_path: &Path, predictions: &Path, out: &Path, cfg: &ExperimentConfig) -> Result<Evaluation> {
    echo("evaluate", cfg, json!({ "index": index_path, "predictions": predictions, "out": out }))?;
    let index = DatasetIndex::load(index_path)?;
    let ev = evaluate_index(&index, predictions, cfg)?;
    write_evaluation(&ev, out)?;
    Ok(ev)
}

// ------------------------------------------------------------------- loo

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooManifest {
    pub held_out_vendor: Vendor,
    pub train_vendors: Vec<Vendor>,
    pub train_count: usize,
    pub test_count: usize,
    pub train_volumes: Vec<PathBuf>,
    pub test_volumes: Vec<PathBuf>,
}

/// Splits `index` into (train, test) for one held-out vendor.
pub fn loo_split(index: &DatasetIndex, held_out: Vendor, cfg: &ExperimentConfig) -> Result<(DatasetIndex, DatasetIndex, LooManifest)> {
    if cfg.vendors_train.contains(&held_out) {
        return Err(Error::Config(format!("held-out vendor {held_out} is listed for training")));
    }
    let mut train_vendors: Vec<Vendor> = if cfg.vendors_train.is_empty() {
        index
            .entries
            .iter()
            .map(|e| e.vendor)
            .filter(|v| *v != held_out)
            .collect()
    } else {
        cfg.vendors_train.clone()
    };
    train_vendors.sort_by_key(|v| v.as_str());
    train_vendors.dedup();
    if train_vendors.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-vendor-out needs at least two training vendors, found {}",
            train_vendors.len()
        )));
    }
    let train = index.filtered(|e| e.split == Split::Train && train_vendors.contains(&e.vendor));
    let test = index.filtered(|e| e.vendor == held_out);
    // structural check: nothing from the held-out vendor may reach training
    if train.entries.iter().any(|e| e.vendor == held_out) {
        return Err(Error::Config("held-out vendor leaked into the training split".into()));
    }
    if test.entries.is_empty() {
        return Err(Error::Config(format!("index has no {held_out} volumes to test on")));
    }
    let manifest = LooManifest {
        held_out_vendor: held_out,
        train_vendors,
        train_count: train.entries.len(),
        test_count: test.entries.len(),
        train_volumes: train.entries.iter().map(|e| e.volume.clone()).collect(),
        test_volumes: test.entries.iter().map(|e| e.volume.clone()).collect(),
    };
    Ok((train, test, manifest))
}

fn resolve_hold_out(hold_out: Option<Vendor>, cfg: &ExperimentConfig) -> Result<Vendor> {
    match (hold_out, cfg.vendors_test.as_slice()) {
        (Some(v), []) => Ok(v),
        (Some(v), [t]) if *t == v => Ok(v),
        (Some(v), _) => Err(Error::Config(format!("--hold-out {v} conflicts with vendors_test"))),
        (None, [t]) => Ok(*t),
        (None, _) => Err(Error::Config("exactly one held-out vendor is required".into())),
    }
}

/// Leave-one-vendor-out experiment. With `dry_run` only the split manifest
/// is written.
pub fn cmd_loo(
    index_path: &Path,
    hold_out: Option<Vendor>,
    dry_run: bool,
    out: &Path,
    cfg: &ExperimentConfig,
) -> Result<LooManifest> {
    echo("loo", cfg, json!({ "index": index_path, "hold_out": hold_out, "dry_run": dry_run, "out": out }))?;
    cfg.validate()?;
    let held_out = resolve_hold_out(hold_out, cfg)?;
    let index = DatasetIndex::load(index_path)?;
    let (train, test, manifest) = loo_split(&index, held_out, cfg)?;
    create_dir(out)?;
    write_json(&out.join(LOO_MANIFEST_FILE), &manifest, "loo manifest")?;
    if dry_run {
        return Ok(manifest);
    }
    let f = extract_fingerprint(&train)?;
    write_text(&out.join(FINGERPRINT_FILE), &f.to_json()?)?;
    let plan = plan_from(&f, cfg)?;
    plan.save(out.join(PLAN_FILE))?;
    let ck = train_index(&train, &plan, cfg)?;
    let ck_dir = out.join("checkpoint");
    ck.save(&ck_dir)?;
    let pred_dir = out.join("predictions");
    predict_index(&ck, &test, &pred_dir, cfg.effective_workers())?;
    let ev = evaluate_index(&test, &pred_dir, cfg)?;
    write_evaluation(&ev, &out.join("evaluation"))?;
    Ok(manifest)
}
