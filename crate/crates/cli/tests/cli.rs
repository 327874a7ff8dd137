use std::path::Path;
use std::process::{Command, Output};

use mipose::bop::{
    gt_as_results, load_models_dir, write_results_file, write_scene, GtImage, GtInstance,
};
use mipose::encoding::{assign_level, destandardize, PyramidSpec};
use mipose::geometry::{project, CameraIntrinsics, Point2, Pose, RotationMatrix, Vec3};
use mipose::mesh::{write_ply, LengthUnit, PlyEncoding, TriangleMesh};
use serde_json::Value;
use tempfile::TempDir;

fn mipose(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mipose"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn write_model(dir: &Path, name: &str, mesh: &TriangleMesh) {
    std::fs::create_dir_all(dir).unwrap();
    let mut f = std::fs::File::create(dir.join(name)).unwrap();
    write_ply(&mut f, mesh, PlyEncoding::Ascii, LengthUnit::Millimeters).unwrap();
}

fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(572.4114, 573.5704, 325.2611, 242.0490, 640, 480).unwrap()
}

fn gt_instance(t: Vec3, angle: f64, visib: f64) -> GtInstance {
    let r = RotationMatrix::about_axis(&Vec3::new(0.3, 1.0, 0.2), angle).unwrap();
    let mut g = GtInstance::from_pose(1, &Pose::new(r, t));
    g.visib_fract = Some(visib);
    g
}

/// Models dir with a 10 cm cube as object 1, and one scene written from
/// `instances`.
fn dataset(tmp: &TempDir, instances: Vec<GtInstance>) -> (std::path::PathBuf, std::path::PathBuf) {
    let models = tmp.path().join("models");
    write_model(
        &models,
        "obj_000001.ply",
        &TriangleMesh::cuboid(Vec3::new(0.1, 0.1, 0.1)),
    );
    let scene = tmp.path().join("test").join("000001");
    let img = GtImage {
        scene_id: 1,
        im_id: 0,
        camera: camera(),
        instances,
    };
    write_scene(&scene, &[img]).unwrap();
    (models, tmp.path().join("test"))
}

#[test]
fn model_info_unit_cube() {
    let tmp = TempDir::new().unwrap();
    let models = tmp.path().join("models");
    let cube = TriangleMesh::cuboid(Vec3::new(0.001, 0.001, 0.001));
    write_model(&models, "obj_000007.ply", &cube);
    let o = mipose(&["model-info", "models", "-o", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let row = stdout(&o).lines().nth(1).unwrap().to_owned();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols[0], "7");
    assert_eq!(cols[1], "8");
    let d: f64 = cols[2].parse().unwrap();
    assert!((d - 3f64.sqrt()).abs() < 1e-6, "{row}");
    assert_eq!(&cols[3..6], &["1.000000"; 3]);
    let info = read_json(&tmp.path().join("out/models_info.json"));
    let d = info["7"]["diameter"].as_f64().unwrap();
    assert!((d - 3f64.sqrt()).abs() < 1e-9);
}

#[test]
fn model_info_empty_dir() {
    let tmp = TempDir::new().unwrap();
    std::fs::create_dir(tmp.path().join("models")).unwrap();
    let o = mipose(&["model-info", "models", "-o", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1);
    assert_eq!(
        read_json(&tmp.path().join("out/models_info.json")),
        serde_json::json!({})
    );
}

#[test]
fn model_info_corrupt_file() {
    let tmp = TempDir::new().unwrap();
    let models = tmp.path().join("models");
    write_model(
        &models,
        "obj_000001.ply",
        &TriangleMesh::cuboid(Vec3::new(0.1, 0.1, 0.1)),
    );
    std::fs::write(
        models.join("obj_000002.ply"),
        "ply\nformat ascii 1.0\nelement vertex 3\n",
    )
    .unwrap();
    let o = mipose(&["model-info", "models", "-o", "out"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("obj_000002.ply"), "{}", stderr(&o));
    assert!(!tmp.path().join("out/models_info.json").exists());
}

fn targets(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("targets.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn arr<const N: usize>(v: &Value) -> [f64; N] {
    let a: Vec<f64> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    a.try_into().unwrap()
}

#[test]
fn encode_levels_and_round_trip() {
    let tmp = TempDir::new().unwrap();
    let near = gt_instance(Vec3::new(-0.08, 0.0, 0.6), 0.4, 1.0);
    let far = gt_instance(Vec3::new(0.3, 0.1, 1.8), 1.1, 1.0);
    let hidden = gt_instance(Vec3::new(0.0, -0.1, 1.0), 2.0, 0.2);
    let (models_dir, gt_dir) = dataset(&tmp, vec![near.clone(), far.clone(), hidden]);
    let o = mipose(
        &[
            "encode",
            "--gt",
            gt_dir.to_str().unwrap(),
            "--models",
            "models",
            "-o",
            "out",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let models = load_models_dir(&models_dir, LengthUnit::Millimeters, 8).unwrap();
    let model = &models[0];
    let spec = PyramidSpec::default();
    let cam = camera();
    let lines = targets(&tmp.path().join("out"));
    assert!(!lines.is_empty());
    let mut levels = [None, None];
    for l in &lines {
        let k = l["gt_index"].as_u64().unwrap() as usize;
        assert!(k < 2, "the 20%-visible instance has no targets");
        let inst = [&near, &far][k];
        let pose = inst.pose().unwrap();
        let level = assign_level(model.diameter, pose.translation.z, &spec).unwrap();
        assert_eq!(l["level"].as_u64().unwrap() as usize, level);
        assert_eq!(l["location"]["level"], l["level"]);
        levels[k] = Some(level);

        let c = arr::<2>(&l["location"]["center"]);
        let y = arr::<16>(&l["y_g"]);
        let back = destandardize(
            &y,
            &Point2::new(c[0], c[1]),
            l["delta_px"].as_f64().unwrap(),
        )
        .unwrap();
        let truth = project(&model.cuboid, &pose, &cam).unwrap();
        for (a, b) in back.iter().zip(&truth) {
            assert!((a - b).norm() < 1e-6);
        }
    }
    assert_eq!(levels[0].unwrap(), levels[1].unwrap() + 1);

    let s = read_json(&tmp.path().join("out/encode_summary.json"));
    assert_eq!(s["instances"], 3);
    assert_eq!(s["instances_with_targets"], 2);
    assert_eq!(s["targets"].as_u64().unwrap() as usize, lines.len());
    let hist: usize = s["locations_per_level"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .sum();
    assert_eq!(hist, lines.len());
}

#[test]
fn encode_unknown_object_is_input_error() {
    let tmp = TempDir::new().unwrap();
    let mut inst = gt_instance(Vec3::new(0.0, 0.0, 1.0), 0.1, 1.0);
    inst.obj_id = 9;
    let (_, gt_dir) = dataset(&tmp, vec![inst]);
    let o = mipose(
        &[
            "encode",
            "--gt",
            gt_dir.to_str().unwrap(),
            "--models",
            "models",
            "-o",
            "out",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("object id 9"), "{}", stderr(&o));
}

fn two_cubes(tmp: &TempDir) -> (std::path::PathBuf, Vec<GtImage>) {
    let a = gt_instance(Vec3::new(-0.1, 0.0, 0.8), 0.3, 1.0);
    let b = gt_instance(Vec3::new(0.12, 0.05, 1.0), 2.2, 1.0);
    let (_, gt_dir) = dataset(tmp, vec![a, b]);
    let gt = mipose::bop::read_gt_dir(&gt_dir).unwrap();
    (gt_dir, gt)
}

fn eval(tmp: &TempDir, gt_dir: &Path, results: &str) -> Output {
    mipose(
        &[
            "eval",
            "--results",
            results,
            "--gt",
            gt_dir.to_str().unwrap(),
            "--models",
            "models",
            "-o",
            "out",
        ],
        tmp.path(),
    )
}

#[test]
fn eval_exported_gt_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let (gt_dir, gt) = two_cubes(&tmp);
    write_results_file(&tmp.path().join("res.csv"), &gt_as_results(&gt)).unwrap();
    let o = eval(&tmp, &gt_dir, "res.csv");
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&tmp.path().join("out/eval_report.json"));
    for k in ["ar", "ar_vsd", "ar_mssd", "ar_mspd", "add_recall", "map"] {
        assert_eq!(r[k].as_f64().unwrap(), 1.0, "{k}");
    }
    assert_eq!(r["num_gt"], 2);
}

#[test]
fn eval_empty_results() {
    let tmp = TempDir::new().unwrap();
    let (gt_dir, _) = two_cubes(&tmp);
    std::fs::write(tmp.path().join("res.csv"), "").unwrap();
    let o = eval(&tmp, &gt_dir, "res.csv");
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&tmp.path().join("out/eval_report.json"));
    assert_eq!(r["ar"].as_f64().unwrap(), 0.0);
    assert_eq!(r["add_recall"].as_f64().unwrap(), 0.0);
}

#[test]
fn eval_shifted_estimate_fails_add() {
    let tmp = TempDir::new().unwrap();
    let (gt_dir, gt) = two_cubes(&tmp);
    let models = load_models_dir(&tmp.path().join("models"), LengthUnit::Millimeters, 8).unwrap();
    let mut rows = gt_as_results(&gt);
    rows[1].translation_mm[0] += 0.5 * models[0].diameter * 1000.0;
    write_results_file(&tmp.path().join("res.csv"), &rows).unwrap();
    let o = eval(&tmp, &gt_dir, "res.csv");
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&tmp.path().join("out/eval_report.json"));
    assert_eq!(r["add_recall"].as_f64().unwrap(), 0.5);
    assert_eq!(r["per_object"][0]["add_recall"].as_f64().unwrap(), 0.5);
}

#[test]
fn eval_malformed_row_reports_index() {
    let tmp = TempDir::new().unwrap();
    let (gt_dir, gt) = two_cubes(&tmp);
    write_results_file(&tmp.path().join("res.csv"), &gt_as_results(&gt)).unwrap();
    let mut text = std::fs::read_to_string(tmp.path().join("res.csv")).unwrap();
    text.push_str("1,0,1,0.5,1 0 0,0 0 1,-1\n");
    std::fs::write(tmp.path().join("res.csv"), text).unwrap();
    let o = eval(&tmp, &gt_dir, "res.csv");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

fn bench_json(tmp: &TempDir, extra: &[&str]) -> Value {
    let mut args = vec!["bench", "-o", "out"];
    args.extend_from_slice(extra);
    let o = mipose(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    read_json(&tmp.path().join("out/bench.json"))
}

#[test]
fn bench_default_counts() {
    let tmp = TempDir::new().unwrap();
    let r = bench_json(&tmp, &["--repeats", "1"]);
    let csv = std::fs::read_to_string(tmp.path().join("out/bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "count,mean_ms,std_ms,hypotheses");
    assert_eq!(lines.len(), 11);
    let counts: Vec<u64> = r["buckets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["count"].as_u64().unwrap())
        .collect();
    assert_eq!(counts, (1..=10).map(|k| 10 * k).collect::<Vec<u64>>());
}

#[test]
fn bench_repeats_and_seed() {
    let tmp = TempDir::new().unwrap();
    let fg = |r: &Value| -> Vec<Value> {
        r["buckets"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| {
                serde_json::json!([b["hypotheses"], b["foreground_hypotheses"], b["detected"]])
            })
            .collect()
    };
    let a = bench_json(
        &tmp,
        &["--counts", "10,30", "--repeats", "5", "--seed", "4"],
    );
    for b in a["buckets"].as_array().unwrap() {
        let s: Vec<f64> = b["samples_ms"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(s.len(), 5);
        let mean = s.iter().sum::<f64>() / 5.0;
        let sd = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((b["std_ms"].as_f64().unwrap() - sd).abs() <= 1e-12 * sd.max(1.0));
        assert_eq!(b["detected"], b["count"]);
    }
    let b = bench_json(
        &tmp,
        &["--counts", "10,30", "--repeats", "5", "--seed", "4"],
    );
    assert_eq!(fg(&a), fg(&b));
}

#[test]
fn config_file_with_flag_override() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(
        tmp.path().join("run.toml"),
        "seed = 2\n[bench]\ncounts = [10]\nrepeats = 2\n[paths]\noutput_dir = \"cfg-out\"\n",
    )
    .unwrap();
    let o = mipose(
        &["bench", "--config", "run.toml", "--repeats", "3"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&tmp.path().join("cfg-out/bench.json"));
    let buckets = r["buckets"].as_array().unwrap();
    assert_eq!(buckets.len(), 1);
    assert_eq!(buckets[0]["samples_ms"].as_array().unwrap().len(), 3);
}

#[test]
fn bad_config_is_input_error() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(
        tmp.path().join("a.toml"),
        "seed = 1\n[postprocess]\ncluster_iou = \"x\"\n",
    )
    .unwrap();
    let o = mipose(&["bench", "--config", "a.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    std::fs::write(
        tmp.path().join("b.toml"),
        "[postprocess]\ncluster_iou = 2.0\n",
    )
    .unwrap();
    let o = mipose(&["bench", "--config", "b.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[postprocess]"), "{}", stderr(&o));

    let o = mipose(&["bench", "--counts", "ten"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

fn pnp_rows(tmp: &TempDir, extra: &[&str]) -> Vec<(String, f64)> {
    let mut args = vec!["pnp-compare", "-o", "out"];
    args.extend_from_slice(extra);
    let o = mipose(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    read_json(&tmp.path().join("out/pnp_compare.json"))
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            (
                r["method"].as_str().unwrap().to_owned(),
                r["add_recall"].as_f64().unwrap(),
            )
        })
        .collect()
}

#[test]
fn pnp_compare_zero_noise() {
    let tmp = TempDir::new().unwrap();
    let rows = pnp_rows(
        &tmp,
        &[
            "--scenes",
            "3",
            "--corner-sigma",
            "0",
            "--rotation-sigma",
            "0",
            "--translation-sigma",
            "0",
        ],
    );
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(names, ["PnP", "n=1", "n=5", "n=10", "all"]);
    for (m, r) in &rows {
        assert_eq!(*r, 1.0, "{m}");
    }
}

#[test]
fn pnp_compare_corner_noise_favours_voting() {
    let tmp = TempDir::new().unwrap();
    let rows = pnp_rows(
        &tmp,
        &[
            "--scenes",
            "8",
            "--seed",
            "11",
            "--corner-sigma",
            "6",
            "--rotation-sigma",
            "0.01",
            "--translation-sigma",
            "0.001",
        ],
    );
    let pnp = rows[0].1;
    for (m, r) in &rows[1..] {
        assert!(*r > pnp, "{m}: {r} vs PnP {pnp}");
    }
}
