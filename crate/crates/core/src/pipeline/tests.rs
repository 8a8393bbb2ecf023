use super::*;
use crate::image::Image;
use crate::metrics::EvalConfig;

fn coarse() -> HumanoidParams {
    HumanoidParams { cell: 0.03, ..Default::default() }
}

fn tiny_run(dataset: &Path, output: &Path) -> RunConfig {
    RunConfig {
        dataset: dataset.to_path_buf(),
        output: output.to_path_buf(),
        net: NetConfig { resolution: 32, base_width: 8, groups: 4, hidden: 16, blocks: 1, ..Default::default() },
        iterations: 3,
        checkpoint_every: 2,
        test_mode: true,
        ..Default::default()
    }
}

#[test]
fn synth_is_deterministic_and_self_describing() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = cmd_synth(2, 9, a.path(), &coarse()).unwrap();
    let mb = cmd_synth(2, 9, b.path(), &coarse()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(Manifest::load(a.path()).unwrap(), ma);
    for rec in &ma.scenes {
        let fa = std::fs::read(a.path().join(&rec.body)).unwrap();
        assert_eq!(fa, std::fs::read(b.path().join(&rec.body)).unwrap());
    }
    let scenes = load_scenes(a.path(), &[ma.scenes[1].id.clone()]).unwrap();
    assert_eq!(scenes.len(), 1);
    assert!(load_scenes(a.path(), &["nope".into()]).is_err());
}

#[test]
fn missing_scene_files_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_synth(2, 1, dir.path(), &coarse()).unwrap();
    std::fs::remove_file(dir.path().join(&m.scenes[0].prior)).unwrap();
    let scenes = load_scenes(dir.path(), &[]).unwrap();
    assert_eq!(scenes.len(), 1);
    assert_eq!(scenes[0].id, m.scenes[1].id);
}

#[test]
fn run_config_json_round_trip_and_validation() {
    let cfg = tiny_run(Path::new("d"), Path::new("o"));
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    let partial: RunConfig = serde_json::from_str(r#"{"iterations": 5, "snmc": "four-view"}"#).unwrap();
    assert_eq!(partial.iterations, 5);
    assert_eq!(partial.snmc, SnmcMode::FourView);
    assert!(RunConfig { views_per_batch: 4, ..cfg.clone() }.validate().is_err());
    assert!(RunConfig { perceptual_levels: 0, ..cfg }.validate().is_err());
}

#[test]
fn smoke_train_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_synth(1, 2, &data, &coarse()).unwrap();
    let cfg = tiny_run(&data, &dir.path().join("run"));
    let out = cmd_train(&cfg).unwrap();
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|r| r.loss.total.is_finite() && r.grad_norm > 0.0));
    let text = std::fs::read_to_string(&out.log_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 4);
    let cols = LOG_HEADER.split(',').count();
    assert!(lines[1..].iter().all(|l| l.split(',').count() == cols));
    let ck = load_checkpoint(&out.checkpoint_path).unwrap();
    assert_eq!(ck.meta.step, 3);
    assert_eq!(ck.weights, out.checkpoint.weights);
    let run: RunConfig = serde_json::from_str(&std::fs::read_to_string(cfg.output.join("run.json")).unwrap()).unwrap();
    assert_eq!(run, cfg);
}

#[test]
fn infer_writes_views_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let m = cmd_synth(1, 3, &data, &coarse()).unwrap();
    let cfg = RunConfig { iterations: 1, ..tiny_run(&data, &dir.path().join("run")) };
    let ckpt = cmd_train(&cfg).unwrap().checkpoint_path;
    let body = load_obj(&data.join(&m.scenes[0].body)).unwrap();
    let cam = cfg.rig.camera(0.0, 0.0, 32).unwrap();
    let image_path = dir.path().join("front.png");
    crate::mesh::raster_mesh(&body, &cam, crate::mesh::RasterMode::Rgb).unwrap().image.save_png(&image_path).unwrap();
    let prior = data.join(&m.scenes[0].prior);
    let opts = InferOptions { grid: 0, ..Default::default() };
    let a = cmd_infer(&ckpt, &image_path, &prior, &dir.path().join("a"), &opts).unwrap();
    let b = cmd_infer(&ckpt, &image_path, &prior, &dir.path().join("b"), &opts).unwrap();
    assert_eq!(a.views.len(), NOVEL_VIEW_AZIMUTHS.len());
    assert_eq!(a.prediction.theta, b.prediction.theta);
    assert!(a.mesh.is_none());
    for az in NOVEL_VIEW_AZIMUTHS {
        let name = format!("view_{:03}.png", az as u32);
        let img = Image::load_png(dir.path().join("a").join(&name)).unwrap();
        assert_eq!((img.width, img.height), (32, 32));
    }
    let ply = std::fs::read(dir.path().join("a/gaussians.ply")).unwrap();
    assert_eq!(ply, std::fs::read(dir.path().join("b/gaussians.ply")).unwrap());

    let small = Image::from_data(3, 16, 16, vec![0.5; 3 * 256]).unwrap();
    let small_path = dir.path().join("small.png");
    small.save_png(&small_path).unwrap();
    let err = cmd_infer(&ckpt, &small_path, &prior, &dir.path().join("c"), &opts).unwrap_err();
    assert!(err.to_string().contains("32x32"), "{err}");
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    cmd_synth(2, 5, &gt, &coarse()).unwrap();
    let csv = dir.path().join("m.csv");
    let cfg = EvalConfig { samples: 2000, render_res: 32, ..Default::default() };
    let rows = cmd_eval(&gt, &gt, &csv, &cfg).unwrap();
    assert_eq!(rows.len(), 2);
    for (_, r) in &rows {
        assert_eq!((r.cd_p2s, r.cd_s2p), (0.0, 0.0));
        assert_eq!(r.f_score, 100.0);
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with(crate::metrics::CSV_HEADER));
}

#[test]
fn eval_reports_unaligned_ids() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    let m = cmd_synth(1, 5, &gt, &coarse()).unwrap();
    let pred = dir.path().join("pred/other");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::copy(gt.join(&m.scenes[0].body), pred.join("mesh.obj")).unwrap();
    let err = cmd_eval(&dir.path().join("pred"), &gt, &dir.path().join("m.csv"), &EvalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    assert!(err.to_string().contains("other"));
}

#[test]
fn export_both_directions() {
    let dir = tempfile::tempdir().unwrap();
    let mut sphere = crate::mesh::icosphere(2);
    sphere.scale_translate(0.4, [0.0; 3]);
    let obj = dir.path().join("s.obj");
    let ply = dir.path().join("s.ply");
    save_obj(&sphere, &obj).unwrap();
    cmd_export(&ply, &obj, ExportDirection::ObjToPly, 0.5).unwrap();
    let set: crate::gaussian::GaussianSet<f32> = crate::gaussian::read_ply(&ply).unwrap();
    assert_eq!(set.len(), sphere.vertices.len());
    let back = dir.path().join("back.obj");
    cmd_export(&ply, &back, ExportDirection::PlyToObj { grid: 48 }, 0.5).unwrap();
    let mesh = load_obj(&back).unwrap();
    assert!(!mesh.faces.is_empty());
    let r = mesh.vertices.iter().map(|v| crate::geom::norm(*v)).sum::<f64>() / mesh.vertices.len() as f64;
    assert!((r - 0.4).abs() < 0.1, "{r}");
}
