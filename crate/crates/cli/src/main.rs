use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use sehr_core::mesh::HumanoidParams;
use sehr_core::metrics::EvalConfig;
use sehr_core::pipeline::{
    apply_thread_env, cmd_eval, cmd_export, cmd_gradcheck, cmd_infer, cmd_synth, cmd_train, ExportDirection,
    InferOptions, RunConfig,
};

#[derive(Parser)]
#[command(name = "sehr", version, about = "Single-view clothed human reconstruction with Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clothed-humanoid scenes with their body-prior meshes.
    Synth {
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Surface extraction lattice spacing before scaling.
        #[arg(long, default_value_t = HumanoidParams::default().cell)]
        cell: f64,
    },
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruct one front-view image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Body-prior mesh used for the guidance normal maps.
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Azimuth the image was taken from, degrees.
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        /// Mesh extraction grid; 0 skips the mesh.
        #[arg(long, default_value_t = 128)]
        grid: usize,
        #[arg(long, default_value_t = 0.5)]
        iso: f64,
    },
    /// Compare predicted meshes against ground truth, one CSV row per scene.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = EvalConfig::default().samples)]
        samples: usize,
        #[arg(long, default_value_t = EvalConfig::default().tau_cm)]
        tau_cm: f64,
    },
    /// Convert Gaussians to a mesh, or a mesh to Gaussians with --to-ply.
    Export {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        obj: PathBuf,
        #[arg(long)]
        to_ply: bool,
        #[arg(long, default_value_t = 128)]
        grid: usize,
        #[arg(long, default_value_t = 0.5)]
        iso: f64,
    },
    /// Finite-difference checks of every tape op and the rasterizer.
    Gradcheck,
}

fn run(cli: Cli) -> Result<bool> {
    let threads = apply_thread_env()?;
    log::debug!("{threads} worker threads");
    match cli.command {
        Command::Synth { scenes, seed, out, cell } => {
            let params = HumanoidParams { cell, ..Default::default() };
            let m = cmd_synth(scenes, seed, &out, &params).context("synth failed")?;
            println!("wrote {} scenes to {}", m.scenes.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let o = cmd_train(&cfg).context("training failed")?;
            if let Some(last) = o.log.last() {
                println!("final loss {:.6} after {} iterations", last.loss.total, o.log.len());
            }
            println!("checkpoint {}", o.checkpoint_path.display());
        }
        Command::Infer { ckpt, image, prior, out, azimuth, grid, iso } => {
            let opts = InferOptions { input_azimuth: azimuth, grid, iso };
            let o = cmd_infer(&ckpt, &image, &prior, &out, &opts).context("inference failed")?;
            println!("{} Gaussians, {} views written to {}", o.prediction.theta.len(), o.views.len(), out.display());
        }
        Command::Eval { pred, gt, out, samples, tau_cm } => {
            let cfg = EvalConfig { samples, tau_cm, ..Default::default() };
            let rows = cmd_eval(&pred, &gt, &out, &cfg).context("evaluation failed")?;
            println!("{} scenes evaluated, table in {}", rows.len(), out.display());
        }
        Command::Export { ply, obj, to_ply, grid, iso } => {
            let dir = if to_ply { ExportDirection::ObjToPly } else { ExportDirection::PlyToObj { grid } };
            cmd_export(&ply, &obj, dir, iso).context("export failed")?;
        }
        Command::Gradcheck => {
            let reports = cmd_gradcheck()?;
            let mut ok = true;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!("{status} {}", r.summary());
                for m in &r.messages {
                    println!("    {m}");
                }
                ok &= r.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
