//! One function per subcommand.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lacune::detector::{build_training_set, sidecar_path, train_detector};
use lacune::metrics;
use lacune::nifti_io::{load_case_dir, read_mask, write_case_dir, write_mask, write_volume};
use lacune::pipeline::SegmentationResult;
use lacune::prevalence::{resample_to_subject, SubjectGeometry};
use lacune::segmenter::{optimize_threshold, predict_dataset, sample_training_patches, train_segmenter, PatchDataset};
use lacune::{
    generate_phantom, predict_case, Case, Detector, DetectorConfig, Mask3D, NormalizeOptions, PlantedLesion,
    Prevalence, RuleParams, Segmenter, SegmenterConfig, ThresholdSetting, TransformSpec,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::*;
use crate::overlay::write_overlays;
use crate::record::{case_dirs, file_sha256, mask_files, read_config, read_json, sidecar, write_json, RunRecord};

/// Keyword accepted in place of a checkpoint path.
pub const RULE_BASED: &str = "rule-based";

fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match jobs {
        None => Ok(f()),
        Some(0) => bail!("--jobs must be at least 1"),
        Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f)),
    }
}

fn read_transform(path: Option<&Path>) -> Result<TransformSpec> {
    path.map_or(Ok(TransformSpec::Identity), read_json)
}

fn record_dir_outputs(record: &mut RunRecord, dir: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "provenance.json") {
                files.push(p);
            }
        }
    }
    files.sort();
    for f in files {
        record.output(&f)?;
    }
    Ok(())
}

fn record_case_inputs(record: &mut RunRecord, dir: &Path) -> Result<()> {
    let f = lacune::nifti_io::case_files(dir)?;
    for p in [Some(f.t1), Some(f.t2), Some(f.flair), f.truth].into_iter().flatten() {
        record.input(&p)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- gen-phantoms

#[derive(Serialize)]
struct ManifestEntry {
    case_id: String,
    seed: u64,
    lesions: Vec<PlantedLesion>,
}

pub fn gen_phantoms(a: &GenPhantomsArgs) -> Result<()> {
    let mut spec: lacune::PhantomSpec = read_config(a.spec.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let entries = (0..a.n)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let s = lacune::PhantomSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            };
            let id = format!("phantom_{i:03}");
            let ph = generate_phantom::<f32>(&s, &id)?;
            let dir = a.out.join(&id);
            write_case_dir(&dir, &ph.case)?;
            write_mask(dir.join("region.nii.gz"), &ph.region)?;
            write_mask(dir.join("csf.nii.gz"), &ph.csf)?;
            write_mask(dir.join("decoys.nii.gz"), &ph.decoys)?;
            write_json(&dir.join("lesions.json"), &ph.lesions)?;
            Ok(ManifestEntry {
                case_id: id,
                seed: s.seed,
                lesions: ph.lesions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&a.out.join("manifest.json"), &entries)?;

    let mut record = RunRecord::new("gen-phantoms", &json!({ "n": a.n, "spec": spec }), Some(spec.seed))?;
    if let Some(p) = &a.spec {
        record.input(p)?;
    }
    record_dir_outputs(&mut record, &a.out)?;
    record.write(&a.out.join("provenance.json"))?;
    println!("wrote {} phantoms to {}", a.n, a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- build-prevmap

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrevmapConfig {
    /// Mirror axis for left-right symmetrization; `null` disables it.
    pub mirror_axis: Option<usize>,
    pub dilation_mm: f64,
}

impl Default for PrevmapConfig {
    fn default() -> Self {
        Self {
            mirror_axis: Some(0),
            dilation_mm: 7.0,
        }
    }
}

pub fn build_prevmap(a: &BuildPrevmapArgs) -> Result<()> {
    let mut cfg: PrevmapConfig = read_config(a.config.as_deref())?;
    if let Some(d) = a.dilation_mm {
        cfg.dilation_mm = d;
    }
    let files = mask_files(&a.masks)?;
    let mut record = RunRecord::new("build-prevmap", &cfg, None)?;
    let masks = files
        .values()
        .map(|p| {
            record.input(p)?;
            Ok(read_mask(p)?)
        })
        .collect::<Result<Vec<Mask3D>>>()?;
    let csf = match &a.csf {
        Some(p) => {
            record.input(p)?;
            Some(read_mask(p)?)
        }
        None => None,
    };
    let map = Prevalence::build(&masks, cfg.mirror_axis, cfg.dilation_mm, csf.as_ref())?;
    fs::create_dir_all(&a.out)?;
    let (freq, mask) = (a.out.join("frequency.nii.gz"), a.out.join("mask.nii.gz"));
    write_volume(&freq, &map.frequency)?;
    write_mask(&mask, &map.mask)?;
    write_json(&a.out.join("prevmap.json"), &map.provenance)?;
    record_dir_outputs(&mut record, &a.out)?;
    record.write(&a.out.join("provenance.json"))?;
    println!(
        "prevalence mask from {} subjects: {} voxels -> {}",
        masks.len(),
        map.mask.count(),
        mask.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- training

fn load_cases(root: &Path, record: &mut RunRecord) -> Result<Vec<Case>> {
    case_dirs(root)?
        .iter()
        .map(|d| {
            record_case_inputs(record, d)?;
            load_case_dir::<f32>(d).with_context(|| format!("loading case {}", d.display()))
        })
        .collect()
}

fn finish_checkpoint(record: &mut RunRecord, out: &Path) -> Result<()> {
    record.output(out)?;
    record.output(&sidecar_path(out))?;
    record.write(&sidecar(out))
}

pub fn train_detect(a: &TrainDetectArgs) -> Result<()> {
    let mut cfg: DetectorConfig = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let mut record = RunRecord::new("train-detect", &cfg, Some(cfg.seed))?;
    let cases = load_cases(&a.cases, &mut record)?;
    let data = build_training_set(&cases, &cfg)?;
    let model = train_detector(&data, &cfg)?;
    model.save(&a.out)?;
    finish_checkpoint(&mut record, &a.out)?;
    println!(
        "detector trained on {} patches for {} epochs, final loss {:?} -> {}",
        model.log.samples,
        model.log.epochs_run,
        model.log.final_loss,
        a.out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

fn subject_masks(cases: &[Case], atlas: &Mask3D, transform: &TransformSpec) -> Result<Vec<Mask3D>> {
    cases
        .iter()
        .map(|c| Ok(resample_to_subject(atlas, transform, &SubjectGeometry::of(&c.t1))?))
        .collect()
}

fn sample(cases: &[Case], atlas: &Mask3D, transform: &TransformSpec, cfg: &SegmenterConfig) -> Result<PatchDataset<f32>> {
    Ok(sample_training_patches(cases, &subject_masks(cases, atlas, transform)?, cfg)?)
}

pub fn train_segment(a: &TrainSegmentArgs) -> Result<()> {
    let mut cfg: SegmenterConfig = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let transform = read_transform(a.transform.as_deref())?;
    let mut record = RunRecord::new("train-segment", &json!({ "segmenter": cfg, "transform": transform }), Some(cfg.seed))?;
    record.input(&a.prevmask)?;
    let atlas = read_mask(&a.prevmask)?;
    let cases = load_cases(&a.cases, &mut record)?;

    let (train, validation): (Vec<Case>, Vec<Case>) = match &a.split {
        None => (cases, Vec::new()),
        Some(path) => {
            record.input(path)?;
            let split: SplitFile = read_json(path)?;
            let known: BTreeSet<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
            for id in split.train.iter().chain(&split.validation) {
                if !known.contains(id.as_str()) {
                    bail!("split names unknown case `{id}`");
                }
            }
            let pick = |ids: &[String]| cases.iter().filter(|c| ids.contains(&c.case_id)).cloned().collect();
            (pick(&split.train), pick(&split.validation))
        }
    };
    if train.is_empty() {
        bail!("no training cases");
    }
    let train_set = sample(&train, &atlas, &transform, &cfg)?;
    let val_set = if validation.is_empty() {
        None
    } else {
        let val_cfg = SegmenterConfig {
            seed: cfg.seed.wrapping_add(1),
            ..cfg.clone()
        };
        Some(sample(&validation, &atlas, &transform, &val_cfg)?)
    };
    let mut model = train_segmenter(&train_set, val_set.as_ref(), &cfg)?;
    if let ThresholdSetting::Search(_) = cfg.threshold {
        let Some(val) = &val_set else {
            bail!("threshold \"optimize\" needs validation cases in --split");
        };
        let pairs: Vec<_> = predict_dataset(&model, val)?
            .into_iter()
            .zip(val.samples.iter().map(|s| s.target.clone()))
            .collect();
        let search = optimize_threshold(&pairs)?;
        model.threshold = search.threshold;
        record.extra = json!({ "threshold_search": search });
    }
    model.save(&a.out)?;
    finish_checkpoint(&mut record, &a.out)?;
    println!(
        "segmenter trained on {}+{} patches for {} epochs, threshold {} -> {}",
        train_set.positives(),
        train_set.negatives(),
        model.log.epochs_run,
        model.threshold,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- predict

fn load_detector(source: &str) -> Result<(Detector, String)> {
    if source == RULE_BASED {
        return Ok((Detector::rule_based(RuleParams::default(), DetectorConfig::default())?, RULE_BASED.into()));
    }
    let path = Path::new(source);
    let model = Detector::load(path).with_context(|| format!("loading detector {source}"))?;
    let id = format!("{}:{}", model.kind_name(), file_sha256(path)?);
    Ok((model, id))
}

fn load_segmenter(source: &str) -> Result<(Segmenter, String)> {
    if source == RULE_BASED {
        return Ok((Segmenter::rule_based(RuleParams::default(), SegmenterConfig::default())?, RULE_BASED.into()));
    }
    let path = Path::new(source);
    let model = Segmenter::load(path).with_context(|| format!("loading segmenter {source}"))?;
    let id = format!("{}:{}", model.kind_name(), file_sha256(path)?);
    Ok((model, id))
}

struct Shared<'a> {
    args: &'a PredictArgs,
    detector: Detector,
    segmenter: Segmenter,
    detector_id: String,
    segmenter_id: String,
    atlas: Mask3D,
    transform: TransformSpec,
    normalize: NormalizeOptions,
}

fn predict_one(s: &Shared, dir: &Path) -> Result<(String, usize)> {
    let case = load_case_dir::<f32>(dir).with_context(|| format!("loading case {}", dir.display()))?;
    let id = case.case_id.clone();
    let subject = resample_to_subject(&s.atlas, &s.transform, &SubjectGeometry::of(&case.t1))
        .with_context(|| format!("case {id}: prevalence mask transfer"))?;
    let res: SegmentationResult = predict_case(
        &case,
        &s.detector,
        &s.segmenter,
        &s.segmenter_id,
        &subject,
        s.normalize,
    )
    .with_context(|| format!("case {id}"))?;
    let out = &s.args.out;
    let seg_path = out.join(format!("{id}_seg.nii.gz"));
    let unc_path = out.join(format!("{id}_unc.nii.gz"));
    write_mask(&seg_path, &res.segmentation)?;
    write_mask(&unc_path, &res.uncertainty)?;

    let config = json!({
        "detector": s.args.detector,
        "detector_id": s.detector_id,
        "detector_config": s.detector.config,
        "segmenter": s.args.segmenter,
        "segmenter_id": s.segmenter_id,
        "segmenter_config": s.segmenter.config,
        "segmenter_threshold": s.segmenter.threshold,
        "prevmask": s.args.prevmask,
        "transform": s.transform,
        "normalize": s.normalize,
    });
    let mut record = RunRecord::new("predict", &config, None)?;
    record_case_inputs(&mut record, dir)?;
    record.input(&s.args.prevmask)?;
    record.output(&seg_path)?;
    record.output(&unc_path)?;
    if let Some(ov) = &s.args.overlay {
        for p in write_overlays(ov, &case, &res.segmentation, &subject)? {
            record.output(&p)?;
        }
    }
    record.extra = json!({ "pipeline": res.provenance });
    record.write(&out.join(format!("{id}_provenance.json")))?;
    Ok((id, res.segmentation.count()))
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let mut dirs = a.case.clone();
    if let Some(root) = &a.cases {
        dirs.extend(case_dirs(root)?);
    }
    if dirs.is_empty() {
        bail!("give at least one --case or a --cases directory");
    }
    let names: BTreeSet<_> = dirs.iter().map(|d| d.file_name().map(|n| n.to_owned())).collect();
    if names.len() != dirs.len() {
        bail!("case directory names must be unique");
    }
    let (detector, detector_id) = load_detector(&a.detector)?;
    let (segmenter, segmenter_id) = load_segmenter(&a.segmenter)?;
    let shared = Shared {
        args: a,
        detector,
        segmenter,
        detector_id,
        segmenter_id,
        atlas: read_mask(&a.prevmask)?,
        transform: read_transform(a.transform.as_deref())?,
        normalize: NormalizeOptions {
            foreground_only: a.foreground_normalization,
        },
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let results = with_jobs(a.jobs, || {
        dirs.par_iter()
            .map(|d| predict_one(&shared, d))
            .collect::<Result<Vec<_>>>()
    })??;
    for (id, voxels) in results {
        println!("{id}: {voxels} segmented voxels");
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let pred = mask_files(&a.pred)?;
    let truth = mask_files(&a.truth)?;
    let (p_ids, t_ids): (BTreeSet<_>, BTreeSet<_>) = (pred.keys().collect(), truth.keys().collect());
    if p_ids != t_ids {
        let missing: Vec<_> = t_ids.difference(&p_ids).collect();
        let extra: Vec<_> = p_ids.difference(&t_ids).collect();
        bail!("case sets differ: no prediction for {missing:?}, no truth for {extra:?}");
    }
    let mut record = RunRecord::new("evaluate", &json!({ "upsample_factor": a.upsample_factor }), None)?;
    for p in pred.values().chain(truth.values()) {
        record.input(p)?;
    }
    let triples = with_jobs(a.jobs, || {
        pred.par_iter()
            .map(|(id, p)| Ok((id.clone(), read_mask(p)?, read_mask(&truth[id])?)))
            .collect::<Result<Vec<(String, Mask3D, Mask3D)>>>()
    })??;
    let report = metrics::evaluate(&triples, a.upsample_factor)?;
    fs::create_dir_all(&a.out)?;
    let (json_path, csv_path) = (a.out.join("report.json"), a.out.join("report.csv"));
    write_json(&json_path, &report)?;
    fs::write(&csv_path, report.to_csv()).with_context(|| format!("writing {}", csv_path.display()))?;
    record.output(&json_path)?;
    record.output(&csv_path)?;
    record.write(&a.out.join("provenance.json"))?;
    let ap: BTreeMap<_, _> = report.ap50_by_size.iter().map(|(k, v)| (k.name(), *v)).collect();
    println!(
        "{} cases: Dice {:.4}, IoU {:.4}, lesions TP {} FP {} FN {}, AP50 {:?}",
        report.per_case.len(),
        report.dice,
        report.iou,
        report.lesionwise.tp,
        report.lesionwise.fp,
        report.lesionwise.fn_,
        ap
    );
    Ok(())
}
