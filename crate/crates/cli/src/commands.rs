use std::collections::HashMap;
use std::path::Path;

use anyhow::{Context, Result};
use mipose::bop::{
    annotation, load_models_dir, load_visib_mask, model_files, read_gt_dir, read_results_file,
    read_scene, scene_dirs, write_atomic, GtImage, MODELS_INFO,
};
use mipose::encoding::{sample_true_locations, TrainingTarget};
use mipose::eval::evaluate;
use mipose::harness::{
    benchmark_postprocess, default_camera, default_models, pnp_vs_voting, BenchmarkConfig,
    ExperimentConfig,
};
use mipose::mesh::{load_ply, read_models_info, ModelsInfo, ObjectModel, SymmetrySet};
use mipose::metrics::EvalModel;
use mipose::{par, Error, Execution};
use serde::Serialize;

use crate::config::{require, RunConfig};
use crate::InputError;

fn write_out(cfg: &RunConfig, name: &str, bytes: &[u8]) -> Result<()> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    write_atomic(&path, bytes)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn load_model(
    class_id: usize,
    obj_id: u32,
    path: &Path,
    cfg: &RunConfig,
    info: Option<&ModelsInfo>,
) -> mipose::Result<ObjectModel> {
    let mesh = load_ply(path, cfg.model_unit.length_unit())?;
    let mut m = ObjectModel::new(class_id, obj_id, mesh, SymmetrySet::default())
        .map_err(|e| e.in_file(path))?;
    if let Some(rec) = info.and_then(|i| i.get(&obj_id.to_string())) {
        m.apply_info(rec, cfg.symmetry_steps)?;
    }
    Ok(m)
}

pub fn model_info(cfg: &RunConfig) -> Result<()> {
    let dir = require(&cfg.paths.models_dir, "models directory")?;
    let info_path = dir.join(MODELS_INFO);
    let info = if info_path.is_file() {
        Some(read_models_info(&info_path)?)
    } else {
        None
    };
    let scale = cfg.model_unit.per_meter();
    let mut failed = 0;
    let mut out = ModelsInfo::new();
    println!(
        "{:>6} {:>9} {:>12} {:>12} {:>12} {:>12} {:>10}",
        "obj_id", "vertices", "diameter", "size_x", "size_y", "size_z", "symmetries"
    );
    for (class_id, (obj_id, path)) in model_files(dir)?.into_iter().enumerate() {
        let m = match load_model(class_id, obj_id, &path, cfg, info.as_ref()) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("error: {e}");
                failed += 1;
                continue;
            }
        };
        let (lo, hi) = m.cuboid.iter().fold(
            ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]),
            |(mut lo, mut hi), p| {
                for k in 0..3 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
                (lo, hi)
            },
        );
        println!(
            "{:>6} {:>9} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>10}",
            obj_id,
            m.mesh.vertices.len(),
            m.diameter * scale,
            (hi[0] - lo[0]) * scale,
            (hi[1] - lo[1]) * scale,
            (hi[2] - lo[2]) * scale,
            m.symmetries.len()
        );
        out.insert(obj_id.to_string(), m.info());
    }
    if failed > 0 {
        return Err(InputError(format!("{failed} model file(s) could not be loaded")).into());
    }
    write_out(cfg, MODELS_INFO, &serde_json::to_vec_pretty(&out)?)
}

#[derive(Serialize)]
struct TargetLine<'a> {
    scene_id: u32,
    im_id: u32,
    gt_index: usize,
    obj_id: u32,
    level: usize,
    #[serde(flatten)]
    target: &'a TrainingTarget,
}

#[derive(Serialize)]
struct EncodeSummary {
    images: usize,
    instances: usize,
    /// Instances with at least one sampled location.
    instances_with_targets: usize,
    targets: usize,
    /// Sampled locations per pyramid level.
    locations_per_level: Vec<usize>,
    /// Instances assigned to each level, sampled or not.
    instances_per_level: Vec<usize>,
    /// Instances whose footprint fell back to the amodal box.
    box_fallback: usize,
}

struct EncodedInstance {
    gt_index: usize,
    obj_id: u32,
    level: usize,
    targets: Vec<TrainingTarget>,
    box_fallback: bool,
}

fn encode_image(
    dir: &Path,
    img: &GtImage,
    models: &HashMap<u32, &ObjectModel>,
    cfg: &RunConfig,
) -> mipose::Result<Vec<EncodedInstance>> {
    img.instances
        .iter()
        .enumerate()
        .map(|(k, inst)| {
            let model = models.get(&inst.obj_id).ok_or_else(|| {
                Error::MissingAnnotation(format!(
                    "scene {} image {} instance {k}: no model for object id {}",
                    img.scene_id, img.im_id, inst.obj_id
                ))
            })?;
            let mask = load_visib_mask(dir, img.im_id, k)?;
            let ann = annotation(inst, model, &img.camera, mask)?;
            let s = sample_true_locations(&ann, &cfg.pyramid, model, &img.camera)?;
            Ok(EncodedInstance {
                gt_index: k,
                obj_id: inst.obj_id,
                level: s.level,
                targets: s.targets,
                box_fallback: s.used_box_fallback,
            })
        })
        .collect()
}

pub fn encode(cfg: &RunConfig, exec: Execution) -> Result<()> {
    let gt_dir = require(&cfg.paths.gt_dir, "ground-truth directory")?;
    let models_dir = require(&cfg.paths.models_dir, "models directory")?;
    let models = load_models_dir(models_dir, cfg.model_unit.length_unit(), cfg.symmetry_steps)?;
    let by_id: HashMap<u32, &ObjectModel> = models.iter().map(|m| (m.obj_id, m)).collect();
    let mut images = Vec::new();
    for (id, dir) in scene_dirs(gt_dir)? {
        for img in read_scene(&dir, id)? {
            images.push((dir.clone(), img));
        }
    }
    let encoded = par::try_map(exec, &images, |(dir, img)| {
        encode_image(dir, img, &by_id, cfg)
    })?;

    let levels = cfg.pyramid.num_levels();
    let mut summary = EncodeSummary {
        images: images.len(),
        instances: 0,
        instances_with_targets: 0,
        targets: 0,
        locations_per_level: vec![0; levels],
        instances_per_level: vec![0; levels],
        box_fallback: 0,
    };
    let mut lines = String::new();
    for ((_, img), insts) in images.iter().zip(&encoded) {
        for e in insts {
            summary.instances += 1;
            summary.instances_per_level[e.level] += 1;
            summary.box_fallback += usize::from(e.box_fallback);
            if !e.targets.is_empty() {
                summary.instances_with_targets += 1;
            }
            for t in &e.targets {
                summary.targets += 1;
                summary.locations_per_level[t.location.level] += 1;
                let line = TargetLine {
                    scene_id: img.scene_id,
                    im_id: img.im_id,
                    gt_index: e.gt_index,
                    obj_id: e.obj_id,
                    level: t.location.level,
                    target: t,
                };
                lines.push_str(&serde_json::to_string(&line)?);
                lines.push('\n');
            }
        }
    }
    println!(
        "{:>6} {:>7} {:>10} {:>10}",
        "level", "stride", "instances", "locations"
    );
    for l in 0..levels {
        println!(
            "{:>6} {:>7} {:>10} {:>10}",
            l,
            cfg.pyramid.strides[l],
            summary.instances_per_level[l],
            summary.locations_per_level[l]
        );
    }
    write_out(cfg, "targets.jsonl", lines.as_bytes())?;
    write_out(
        cfg,
        "encode_summary.json",
        &serde_json::to_vec_pretty(&summary)?,
    )
}

pub fn eval(cfg: &RunConfig, exec: Execution) -> Result<()> {
    let results_path = require(&cfg.paths.results, "results file")?;
    let gt_dir = require(&cfg.paths.gt_dir, "ground-truth directory")?;
    let models_dir = require(&cfg.paths.models_dir, "models directory")?;
    let models = load_models_dir(models_dir, cfg.model_unit.length_unit(), cfg.symmetry_steps)?;
    let eval_models: Vec<EvalModel> = models
        .into_iter()
        .map(|m| EvalModel::new(m, &cfg.metrics))
        .collect();
    let gt = read_gt_dir(gt_dir)?;
    let results = read_results_file(results_path)?;
    let report = evaluate(&gt, &results, &eval_models, &cfg.metrics, exec)?;

    println!(
        "AR {:.4} (VSD {:.4}, MSSD {:.4}, MSPD {:.4})  ADD(-S) {:.4}  mAP {:.4}",
        report.ar.ar,
        report.ar.ar_vsd,
        report.ar.ar_mssd,
        report.ar.ar_mspd,
        report.add_recall,
        report.map
    );
    println!(
        "{} images, {} ground-truth instances, {} estimates ({} ignored)",
        report.num_images, report.num_gt, report.num_estimates, report.ignored_estimates
    );
    println!(
        "{:>6} {:>6} {:>6} {:>8} {:>8}",
        "obj_id", "gt", "est", "AR", "ADD(-S)"
    );
    for o in &report.per_object {
        println!(
            "{:>6} {:>6} {:>6} {:>8.4} {:>8.4}",
            o.obj_id, o.num_gt, o.num_estimates, o.ar.ar, o.add_recall
        );
    }
    write_out(
        cfg,
        "eval_report.json",
        &serde_json::to_vec_pretty(&report)?,
    )
}

fn scene_config(cfg: &RunConfig) -> mipose::harness::SceneConfig {
    mipose::harness::SceneConfig {
        pyramid: cfg.pyramid.clone(),
        ..cfg.scene.clone()
    }
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let defaults = BenchmarkConfig::default();
    let bc = BenchmarkConfig {
        counts: cfg.bench.counts.clone().unwrap_or(defaults.counts),
        repeats: cfg.bench.repeats.unwrap_or(defaults.repeats),
        seed: cfg.seed,
        noise: cfg.noise.clone().unwrap_or(defaults.noise),
        postprocess: cfg.postprocess,
        scene: scene_config(cfg),
    };
    if bc.counts.is_empty() || bc.repeats == 0 {
        return Err(InputError("bench needs at least one count and one repeat".into()).into());
    }
    let report = benchmark_postprocess(&default_models(), &default_camera(), &bc)?;
    println!(
        "{:>6} {:>10} {:>10} {:>11} {:>10} {:>9}",
        "count", "mean_ms", "std_ms", "hypotheses", "foreground", "detected"
    );
    for b in &report.buckets {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>11} {:>10} {:>9}",
            b.count, b.mean_ms, b.std_ms, b.hypotheses, b.foreground_hypotheses, b.detected
        );
    }
    write_out(cfg, "bench.csv", report.to_csv().as_bytes())?;
    write_out(cfg, "bench.json", &serde_json::to_vec_pretty(&report)?)
}

pub fn pnp_compare(cfg: &RunConfig, exec: Execution) -> Result<()> {
    let defaults = ExperimentConfig::default();
    let ec = ExperimentConfig {
        scenes: cfg.experiment.scenes.unwrap_or(defaults.scenes),
        seed: cfg.seed,
        noise: cfg.noise.clone().unwrap_or(defaults.noise),
        postprocess: cfg.postprocess,
        scene: scene_config(cfg),
        ransac: cfg.ransac,
    };
    let rows = pnp_vs_voting(&default_models(), &default_camera(), &ec, exec)?;
    println!("{:>8} {:>10}", "method", "ADD(-S)");
    for r in &rows {
        println!("{:>8} {:>10.4}", r.method, r.add_recall);
    }
    write_out(cfg, "pnp_compare.json", &serde_json::to_vec_pretty(&rows)?)
}
