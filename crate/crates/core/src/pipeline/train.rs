use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use super::{load_scenes, InputView, LoadedScene, RunConfig, CHECKPOINT_NAME, LOG_NAME};
use crate::autodiff::Tape;
use crate::camera::{ray_map, sample_training_views, Camera, RayMap, RigConfig, TrainingViews};
use crate::error::{Error, Result};
use crate::gaussian::FeatureKind;
use crate::image::Image;
use crate::loss::{loss_norm, loss_norm_four, loss_rgb, loss_total, GradientPyramid, LossReport};
use crate::mesh::{normal_maps_around, raster_mesh, NormalMap, RasterMode, TriMesh};
use crate::net::{forward, init_weights, ModelWeights, NetInputs, SnmcMode};
use crate::optim::{OptimizerState, Param};
use crate::render::{default_background, render_on_tape};

pub const LOG_HEADER: &str =
    "iter,scene_id,input_az,lf,lrgb,lnorm,rgb_mse,mask_mse,rgb_perc,norm_mse,norm_perc,grad_norm,clipped";

/// Prior normal maps around `azimuth` (front, back, left, right) with their
/// cameras and rays at `res`.
pub(crate) struct PriorViews {
    pub maps: Vec<NormalMap>,
    pub cameras: Vec<Camera>,
    pub rays: Vec<RayMap>,
}

pub(crate) fn prior_views(prior: &TriMesh, rig: &RigConfig, azimuth: f64, res: usize) -> Result<PriorViews> {
    let maps = normal_maps_around(prior, rig, azimuth, res)?.to_vec();
    let cameras = [0.0, 180.0, 90.0, 270.0]
        .iter()
        .map(|off| rig.camera((azimuth + off) % 360.0, 0.0, res))
        .collect::<Result<Vec<_>>>()?;
    let rays = cameras.iter().map(ray_map).collect();
    Ok(PriorViews { maps, cameras, rays })
}

/// Ground truth for one iteration.
struct Batch {
    views: TrainingViews,
    rgb: Vec<Image>,
    mask: Vec<Image>,
    input_rays: RayMap,
    prior: PriorViews,
}

impl Batch {
    fn input_azimuth(&self) -> f64 {
        self.views.records[self.views.input_index].azimuth_deg
    }
}

fn prepare(scene: &LoadedScene, views: TrainingViews, cfg: &RunConfig) -> Result<Batch> {
    let rasters = views
        .cameras
        .iter()
        .map(|c| raster_mesh(&scene.body, c, RasterMode::Rgb))
        .collect::<Result<Vec<_>>>()?;
    let (rgb, mask) = rasters.into_iter().map(|r| (r.image, r.mask)).unzip();
    let input_rays = ray_map(&views.cameras[views.input_index]);
    let az = views.records[views.input_index].azimuth_deg;
    let prior = prior_views(&scene.prior, &cfg.rig, az, cfg.net.normal_size())?;
    Ok(Batch { views, rgb, mask, input_rays, prior })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterLog {
    pub iter: u64,
    pub scene_id: String,
    pub input_azimuth: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl IterLog {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{:.1},{},{:.9e},{}",
            self.iter,
            self.scene_id,
            self.input_azimuth,
            self.loss.csv_fields(),
            self.grad_norm,
            u8::from(self.clipped)
        );
        s
    }
}

/// Single-scene-per-batch training loop state.
pub struct Trainer {
    cfg: RunConfig,
    scenes: Vec<LoadedScene>,
    pub weights: ModelWeights,
    pub optimizer: OptimizerState,
    rng: ChaCha8Rng,
    perceptual: GradientPyramid,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, scenes: Vec<LoadedScene>) -> Result<Self> {
        cfg.validate()?;
        if scenes.is_empty() {
            return Err(Error::config("training needs at least one scene"));
        }
        Ok(Self {
            weights: init_weights(&cfg.net, cfg.seed)?,
            optimizer: OptimizerState::new(cfg.optimizer),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_7EA1),
            perceptual: GradientPyramid { levels: cfg.perceptual_levels },
            cfg: cfg.clone(),
            scenes,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            weights: self.weights.clone(),
            meta: CheckpointMeta {
                step: self.optimizer.step,
                snmg: self.cfg.snmg,
                snmc: self.cfg.snmc,
                rig: self.cfg.rig,
                render: self.cfg.render,
            },
        }
    }

    /// One optimisation step. On a non-finite loss or gradient the weights are
    /// left untouched and a numeric error is returned.
    pub fn step(&mut self) -> Result<IterLog> {
        let cfg = &self.cfg;
        let scene = &self.scenes[self.rng.gen_range(0..self.scenes.len())];
        let mut views = sample_training_views(self.rng.gen(), &cfg.rig, cfg.net.resolution)?;
        if cfg.input_view == InputView::Front {
            views.input_index = 0;
        }
        let batch = prepare(scene, views, cfg)?;

        let mut tape = Tape::<f32>::new();
        let vars = self.weights.register(&mut tape);
        let inputs = NetInputs {
            image: &batch.rgb[batch.views.input_index],
            rays: &batch.input_rays,
            normal_maps: &batch.prior.maps,
            normal_rays: &batch.prior.rays,
        };
        let out = forward(&mut tape, &vars, &cfg.net, &inputs, cfg.snmg, cfg.snmc)?;
        let bg = default_background(FeatureKind::Color);
        let rendered = batch
            .views
            .cameras
            .iter()
            .map(|c| render_on_tape(&mut tape, out.theta, FeatureKind::Color, c, bg, cfg.render))
            .collect::<Result<Vec<_>>>()?;
        let rgb = loss_rgb(&mut tape, &rendered, &batch.rgb, &batch.mask, &self.perceptual)?;
        let norm = match out.theta_prime {
            Some(tp) => {
                let sel = cfg.snmc.views();
                let bgd = default_background(FeatureKind::Direction);
                let r = sel
                    .iter()
                    .map(|&v| render_on_tape(&mut tape, tp, FeatureKind::Direction, &batch.prior.cameras[v], bgd, cfg.render))
                    .collect::<Result<Vec<_>>>()?;
                let gt: Vec<NormalMap> = sel.iter().map(|&v| batch.prior.maps[v].clone()).collect();
                Some(if cfg.snmc == SnmcMode::FourView {
                    loss_norm_four(&mut tape, &r, &gt, &self.perceptual)?
                } else {
                    loss_norm(&mut tape, &r, &gt, &self.perceptual)?
                })
            }
            None => None,
        };
        let total = loss_total(&mut tape, rgb.total, norm.as_ref().map(|n| n.total))?;
        let loss = LossReport::collect(&tape, total, &rgb, norm.as_ref());
        let iter = self.optimizer.step;
        if !loss.total.is_finite() {
            return Err(Error::Numeric { what: format!("training loss at iteration {iter}") });
        }
        let mut grads = tape.backward(total)?;
        let grads = self.weights.collect_grads(&vars, &mut grads);
        let mut params: Vec<Param<'_, f32>> = self
            .weights
            .params
            .iter_mut()
            .map(|(name, t)| Param { name: name.as_str(), value: t.data_mut(), grad: grads[name].data() })
            .collect();
        let stats = self.optimizer.step(&mut params)?;
        Ok(IterLog {
            iter,
            scene_id: scene.id.clone(),
            input_azimuth: batch.input_azimuth(),
            loss,
            grad_norm: stats.grad_norm,
            clipped: stats.clipped,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<IterLog>,
}

fn run(cfg: &RunConfig) -> Result<TrainOutcome> {
    let scenes = load_scenes(&cfg.dataset, &cfg.scenes)?;
    let out = &cfg.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;

    let log_path = out.join(LOG_NAME);
    let ckpt_path = out.join(CHECKPOINT_NAME);
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    writeln!(writer, "{LOG_HEADER}").map_err(io)?;

    let mut trainer = Trainer::new(cfg, scenes)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let row = match trainer.step() {
            Ok(row) => row,
            Err(e) => {
                writer.flush().map_err(io)?;
                log::error!("aborting at iteration {i}: {e}; last checkpoint kept");
                return Err(e);
            }
        };
        writeln!(writer, "{}", row.csv_row()).map_err(io)?;
        if i % 50 == 0 {
            log::info!("iter {i}: lf {:.5} lrgb {:.5} lnorm {:.5}", row.loss.total, row.loss.rgb, row.loss.norm);
        }
        log.push(row);
        if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 && i + 1 < cfg.iterations {
            writer.flush().map_err(io)?;
            save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
        }
    }
    writer.flush().map_err(io)?;
    let checkpoint = trainer.checkpoint();
    save_checkpoint(&checkpoint, &ckpt_path)?;
    Ok(TrainOutcome { checkpoint, checkpoint_path: ckpt_path, log_path, log })
}

/// Trains per `cfg`, writing `run.json`, the CSV log and checkpoints into
/// `cfg.output`. Test mode runs on a single worker thread.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.test_mode {
        crate::par::with_threads(1, || run(cfg))
    } else {
        run(cfg)
    }
}

/// PSNR of the prediction from the view at `input_azimuth` against the
/// body rendered at each of `azimuths` (elevation 0, white background).
pub fn held_out_psnr(
    ckpt: &Checkpoint,
    scene: &LoadedScene,
    input_azimuth: f64,
    azimuths: &[f64],
) -> Result<Vec<f64>> {
    let res = ckpt.weights.config.resolution;
    let rig = ckpt.meta.rig;
    let cam = rig.camera(input_azimuth, 0.0, res)?;
    let image = raster_mesh(&scene.body, &cam, RasterMode::Rgb)?.image;
    let pred = super::commands::predict(ckpt, &image, &scene.prior, input_azimuth)?;
    azimuths
        .iter()
        .map(|&az| {
            let c = rig.camera(az, 0.0, res)?;
            let gt = raster_mesh(&scene.body, &c, RasterMode::Rgb)?.image;
            let out = crate::render::render(&pred.theta, &c, default_background(FeatureKind::Color), &ckpt.meta.render);
            let img = Image::from_data(3, res, res, out.image.iter().map(|&v| v.clamp(0.0, 1.0)).collect())?;
            Ok(img.psnr(&gt))
        })
        .collect()
}
