use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, Checkpoint};
use super::train::prior_views;
use super::Manifest;
use crate::autodiff::Tape;
use crate::camera::ray_map;
use crate::error::{Error, Result};
use crate::gaussian::{read_ply, write_ply, FeatureKind, Gaussian, GaussianSet};
use crate::gradcheck::{run_all, SuiteReport};
use crate::image::Image;
use crate::loss::GradientPyramid;
use crate::mesh::{load_obj, save_obj, TriMesh};
use crate::metrics::{evaluate, gaussians_to_mesh, metrics_csv, EvalConfig, MetricReport};
use crate::net::{forward, NetInputs};
use crate::render::{default_background, render};

/// Azimuths of the novel views written by inference.
pub const NOVEL_VIEW_AZIMUTHS: [f64; 8] = [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0];

#[derive(Clone, Debug)]
pub struct Prediction {
    pub theta: GaussianSet<f32>,
    pub theta_prime: Option<GaussianSet<f32>>,
}

/// Runs the network on an RGB image seen from `input_azimuth` (elevation 0).
pub fn predict(ckpt: &Checkpoint, image: &Image, prior: &TriMesh, input_azimuth: f64) -> Result<Prediction> {
    let cfg = &ckpt.weights.config;
    let r = cfg.resolution;
    if image.height != r || image.width != r {
        return Err(Error::config(format!(
            "input image is {}x{} but the checkpoint was trained at {r}x{r}",
            image.width, image.height
        )));
    }
    let rgb = match image.channels {
        3 => image.clone(),
        4 => Image::from_data(3, r, r, image.data[..3 * r * r].to_vec())?,
        c => return Err(Error::config(format!("input image has {c} channels, expected RGB"))),
    };
    let rig = ckpt.meta.rig;
    let cam = rig.camera(input_azimuth, 0.0, r)?;
    let rays = ray_map(&cam);
    let pv = prior_views(prior, &rig, input_azimuth, cfg.normal_size())?;
    let mut tape = Tape::<f32>::new();
    let vars = ckpt.weights.register(&mut tape);
    let inputs = NetInputs { image: &rgb, rays: &rays, normal_maps: &pv.maps, normal_rays: &pv.rays };
    let out = forward(&mut tape, &vars, cfg, &inputs, ckpt.meta.snmg, ckpt.meta.snmc)?;
    let theta = GaussianSet::from_flat(FeatureKind::Color, tape.value(out.theta).data())?;
    let theta_prime = out
        .theta_prime
        .map(|v| GaussianSet::from_flat(FeatureKind::Direction, tape.value(v).data()))
        .transpose()?;
    Ok(Prediction { theta, theta_prime })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferOptions {
    pub input_azimuth: f64,
    /// Extraction lattice side; 0 skips the mesh.
    pub grid: usize,
    pub iso: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { input_azimuth: 0.0, grid: 128, iso: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub prediction: Prediction,
    pub views: Vec<Image>,
    pub mesh: Option<TriMesh>,
}

/// Writes `gaussians.ply`, `view_AAA.png` for each novel azimuth and
/// `mesh.obj` into `out_dir`.
pub fn cmd_infer(ckpt_path: &Path, image_path: &Path, prior_path: &Path, out_dir: &Path, opts: &InferOptions) -> Result<InferOutput> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let image = Image::load_png(image_path)?;
    let prior = load_obj(prior_path)?;
    let prediction = predict(&ckpt, &image, &prior, opts.input_azimuth)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_ply(&prediction.theta, &out_dir.join("gaussians.ply"))?;

    let res = ckpt.weights.config.resolution;
    let bg = default_background(FeatureKind::Color);
    let mut views = Vec::with_capacity(NOVEL_VIEW_AZIMUTHS.len());
    for az in NOVEL_VIEW_AZIMUTHS {
        let cam = ckpt.meta.rig.camera((opts.input_azimuth + az) % 360.0, 0.0, res)?;
        let out = render(&prediction.theta, &cam, bg, &ckpt.meta.render);
        let img = Image::from_data(3, res, res, out.image.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        img.save_png(out_dir.join(format!("view_{:03}.png", az as u32)))?;
        views.push(img);
    }
    let mesh = if opts.grid > 0 {
        let m = gaussians_to_mesh(&prediction.theta, opts.grid, opts.iso)?;
        save_obj(&m, &out_dir.join("mesh.obj"))?;
        Some(m)
    } else {
        None
    };
    Ok(InferOutput { prediction, views, mesh })
}

const MESH_NAMES: [&str; 2] = ["mesh.obj", "body.obj"];

/// Scene id → mesh path, from a manifest when present, otherwise from
/// sub-directories holding `mesh.obj` or `body.obj`.
fn scene_meshes(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if dir.join(super::MANIFEST_NAME).is_file() {
        let m = Manifest::load(dir)?;
        return Ok(m.scenes.into_iter().map(|s| (s.id, dir.join(s.body))).collect());
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_dir() {
            continue;
        }
        if let Some(file) = MESH_NAMES.iter().map(|n| path.join(n)).find(|p| p.is_file()) {
            let id = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.insert(id, file);
        }
    }
    Ok(out)
}

/// Evaluates every predicted scene against its ground truth and writes the
/// per-scene CSV with a trailing mean row.
pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, out_csv: &Path, cfg: &EvalConfig) -> Result<Vec<(String, MetricReport)>> {
    let pred = scene_meshes(pred_dir)?;
    let gt = scene_meshes(gt_dir)?;
    let only_pred: Vec<&String> = pred.keys().filter(|k| !gt.contains_key(*k)).collect();
    let only_gt: Vec<&String> = gt.keys().filter(|k| !pred.contains_key(*k)).collect();
    if !only_pred.is_empty() || !only_gt.is_empty() || pred.is_empty() {
        return Err(Error::usage(format!(
            "scene ids do not align: only in predictions {only_pred:?}, only in ground truth {only_gt:?}"
        )));
    }
    let perceptual = GradientPyramid::default();
    let mut rows = Vec::with_capacity(pred.len());
    for (id, p) in &pred {
        let report = evaluate(&load_obj(p)?, &load_obj(&gt[id])?, cfg, &perceptual)?;
        log::info!("{id}: cd {:.4}/{:.4} cm", report.cd_p2s, report.cd_s2p);
        rows.push((id.clone(), report));
    }
    std::fs::write(out_csv, metrics_csv(&rows)).map_err(|e| Error::io(out_csv, e))?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportDirection {
    /// Extract a mesh from the Gaussians.
    PlyToObj { grid: usize },
    /// One isotropic Gaussian per mesh vertex.
    ObjToPly,
}

fn mesh_to_gaussians(mesh: &TriMesh) -> Result<GaussianSet<f32>> {
    if mesh.faces.is_empty() {
        return Err(Error::config("mesh has no faces"));
    }
    let mut edge = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        edge += crate::geom::norm(crate::geom::sub(a, b))
            + crate::geom::norm(crate::geom::sub(b, c))
            + crate::geom::norm(crate::geom::sub(c, a));
    }
    let s = (0.5 * edge / (3 * mesh.faces.len()) as f64) as f32;
    let gaussians = mesh
        .vertices
        .iter()
        .enumerate()
        .map(|(i, v)| Gaussian {
            position: v.map(|x| x as f32),
            scale: [s; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 0.9,
            feature: mesh.colors.as_ref().map_or([0.5; 3], |c| c[i].map(|x| x as f32)),
        })
        .collect();
    Ok(GaussianSet { kind: FeatureKind::Color, gaussians })
}

pub fn cmd_export(ply: &Path, obj: &Path, direction: ExportDirection, iso: f64) -> Result<()> {
    match direction {
        ExportDirection::PlyToObj { grid } => {
            let set: GaussianSet<f32> = read_ply(ply)?;
            save_obj(&gaussians_to_mesh(&set, grid, iso)?, obj)
        }
        ExportDirection::ObjToPly => write_ply(&mesh_to_gaussians(&load_obj(obj)?)?, ply),
    }
}

/// Runs every finite-difference suite; the caller decides the exit status
/// from [`SuiteReport::passed`].
pub fn cmd_gradcheck() -> Result<Vec<SuiteReport>> {
    run_all()
}
