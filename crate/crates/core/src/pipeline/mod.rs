//! End-to-end orchestration: dataset synthesis, training, inference,
//! evaluation, export and the gradient-check command.

mod checkpoint;
mod commands;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use commands::{
    cmd_eval, cmd_export, cmd_gradcheck, cmd_infer, predict, ExportDirection, InferOptions, InferOutput, Prediction,
    NOVEL_VIEW_AZIMUTHS,
};
pub use train::{cmd_train, held_out_psnr, IterLog, TrainOutcome, Trainer, LOG_HEADER};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::RigConfig;
use crate::error::{Error, Result};
use crate::mesh::{load_obj, save_obj, synth_humanoid, HumanoidParams, TriMesh};
use crate::net::{NetConfig, SnmcMode, SnmgMode};
use crate::optim::AdamWConfig;
use crate::render::RenderSettings;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const CHECKPOINT_NAME: &str = "checkpoint.sehr";
pub const LOG_NAME: &str = "train_log.csv";
/// Overrides `RunConfig::output`.
pub const ENV_OUTPUT: &str = "SEHR_OUTPUT";
/// Worker thread count for the data-parallel kernels.
pub const ENV_THREADS: &str = "SEHR_THREADS";

/// How the network input is chosen among the four orthogonal views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputView {
    /// A random orthogonal view per iteration.
    Random,
    /// Always azimuth 0.
    Front,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Scene ids to train on; empty means every scene in the manifest.
    pub scenes: Vec<String>,
    pub net: NetConfig,
    pub optimizer: AdamWConfig,
    pub iterations: usize,
    /// Rendered supervision views per iteration; the protocol fixes it at 8.
    pub views_per_batch: usize,
    pub input_view: InputView,
    pub seed: u64,
    pub snmg: SnmgMode,
    pub snmc: SnmcMode,
    pub rig: RigConfig,
    pub render: RenderSettings,
    /// Pyramid depth of the perceptual term.
    pub perceptual_levels: usize,
    /// Checkpoint period in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Forces one worker thread.
    pub test_mode: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
            scenes: Vec::new(),
            net: NetConfig::default(),
            optimizer: AdamWConfig::default(),
            iterations: 2000,
            views_per_batch: 8,
            input_view: InputView::Random,
            seed: 0,
            snmg: SnmgMode::FourView,
            snmc: SnmcMode::ThreeView,
            rig: RigConfig::default(),
            render: RenderSettings::default(),
            perceptual_levels: 3,
            checkpoint_every: 500,
            test_mode: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.views_per_batch != 8 {
            return Err(Error::config(format!(
                "views_per_batch must be 8 (four orthogonal + four random), got {}",
                self.views_per_batch
            )));
        }
        if self.perceptual_levels == 0 {
            return Err(Error::config("perceptual_levels must be positive"));
        }
        Ok(())
    }

    /// Reads a JSON config and applies the output-path override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if let Ok(out) = std::env::var(ENV_OUTPUT) {
            cfg.output = PathBuf::from(out);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies `SEHR_THREADS` if set. Returns the thread count now in effect.
pub fn apply_thread_env() -> Result<usize> {
    if let Ok(v) = std::env::var(ENV_THREADS) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{ENV_THREADS}={v:?} is not a positive integer")))?;
        if !crate::par::configure_threads(n) {
            log::warn!("{ENV_THREADS} ignored: worker pool already running");
        }
    }
    Ok(crate::par::current_threads())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    /// Relative to the manifest directory.
    pub body: PathBuf,
    pub prior: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub scenes: Vec<SceneRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A scene with both meshes in memory.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub id: String,
    pub body: TriMesh,
    pub prior: TriMesh,
}

/// Loads the selected scenes (all when `ids` is empty); scenes whose files
/// are missing or unreadable are skipped with a warning.
pub fn load_scenes(dir: &Path, ids: &[String]) -> Result<Vec<LoadedScene>> {
    let manifest = Manifest::load(dir)?;
    for id in ids {
        if !manifest.scenes.iter().any(|s| &s.id == id) {
            return Err(Error::config(format!("scene {id} is not in {}", dir.join(MANIFEST_NAME).display())));
        }
    }
    let mut out = Vec::new();
    for rec in &manifest.scenes {
        if !ids.is_empty() && !ids.contains(&rec.id) {
            continue;
        }
        match (load_obj(&dir.join(&rec.body)), load_obj(&dir.join(&rec.prior))) {
            (Ok(body), Ok(prior)) => out.push(LoadedScene { id: rec.id.clone(), body, prior }),
            (Err(e), _) | (_, Err(e)) => log::warn!("skipping scene {}: {e}", rec.id),
        }
    }
    if out.is_empty() {
        return Err(Error::config(format!("no loadable scenes in {}", dir.display())));
    }
    Ok(out)
}

fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Writes `n` synthetic scenes (`body.obj`, `prior.obj`) and the manifest.
pub fn cmd_synth(n: usize, seed: u64, out_dir: &Path, params: &HumanoidParams) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("scene_{i:03}");
        let dir = out_dir.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let pair = synth_humanoid(scene_seed(seed, i), params)?;
        save_obj(&pair.body, &dir.join("body.obj"))?;
        save_obj(&pair.prior, &dir.join("prior.obj"))?;
        log::info!("{id}: {} body faces, {} prior faces", pair.body.faces.len(), pair.prior.faces.len());
        scenes.push(SceneRecord {
            body: PathBuf::from(&id).join("body.obj"),
            prior: PathBuf::from(&id).join("prior.obj"),
            id,
            views: None,
        });
    }
    let manifest = Manifest { version: 1, seed, scenes };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests;
