//! The `able` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::diffcore::{write_atomic, Checkpoint};
use crate::evalviz::{depth_map, mean_l2, perturb_le, psnr, render_view, ssim, write_depth_csv, write_png, ImageBuffer, Perturbation};
use crate::model::{AbleModel, RayOutput};
use crate::scenes::{generate_synthetic_dataset, load_blender, nearby_views, save_blender, SceneDataset, Split, SyntheticScene};
use crate::trainer::{train, RunConfig, TrainOutputs, Trainer};

/// Azimuth offset of generated held-out views, in degrees.
pub const NEARBY_DEGREES: f64 = 6.0;

#[derive(Debug, Parser)]
#[command(name = "able", version, about = "Attention-based neural radiance fields")]
pub struct Cli {
    /// Worker threads (default: all logical cores); 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a Blender-format dataset.
    Train(TrainArgs),
    /// Render a split to PNGs with per-view PSNR/SSIM.
    Render(RenderArgs),
    /// Print PSNR/SSIM for a split.
    Eval(EvalArgs),
    /// Depth maps from fine attention.
    Depth(DepthArgs),
    /// Corrupt the learnable embeddings of a checkpoint.
    Perturb(PerturbArgs),
    /// Write a synthetic scene as a Blender-format dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Disable the front-to-back attention mask.
    #[arg(long)]
    pub no_mask: bool,
    /// Drop the learnable-embedding branch.
    #[arg(long)]
    pub no_le: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<u64>,
    /// Continue from `<out>/model.ckpt` if it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 1)]
    pub downscale: usize,
    /// Rays per render batch.
    #[arg(long, default_value_t = 256)]
    pub chunk: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "renders")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct DepthArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "depth")]
    pub out: PathBuf,
    /// Use the attention-weighted mean depth instead of the argmax frustum.
    #[arg(long)]
    pub expected: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PerturbMode {
    Gaussian,
    Zero,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub mode: PerturbMode,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output checkpoint (default: `<ckpt>.perturbed`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset for side-by-side renders.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "perturb")]
    pub renders: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene file, or `builtin:default` / `builtin:sphere`.
    #[arg(long)]
    pub scene: String,
    #[arg(long)]
    pub views: usize,
    #[arg(long)]
    pub res: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        // a pool may already exist when run() is called repeatedly in-process
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() && rayon::current_num_threads() != n {
            bail!("thread pool already initialized with {} threads", rayon::current_num_threads());
        }
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Depth(a) => cmd_depth(a),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Entry point for the binary: logging from `ABLE_LOG`, one-line errors, exit codes.
pub fn main_exit() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("ABLE_LOG", "warn")).format_timestamp(None).init();
    match run(std::env::args_os()) {
        Ok(()) => 0,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                if !ce.use_stderr() {
                    print!("{ce}");
                    return 0;
                }
            }
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}", msg.trim());
            1
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if a.no_mask {
        cfg.model.use_mask = false;
    }
    if a.no_le {
        cfg.model.n_le = 0;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(i) = a.iters {
        cfg.train.iters = i;
    }
    if a.dataset.is_some() {
        cfg.dataset = a.dataset;
    }
    if a.out.is_some() {
        cfg.out_dir = a.out;
    }
    let dataset = cfg.dataset.clone().context("no dataset given (config key `dataset` or --dataset)")?;
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
    cfg.out_dir = Some(out_dir.clone());
    cfg.model.validate()?;
    cfg.train.validate()?;
    println!("{}", cfg.to_text());
    let ds = load_blender(&dataset, Split::Train, cfg.downscale)?;
    let outputs = TrainOutputs::in_dir(&out_dir);
    write_atomic(&out_dir.join("config.toml"), cfg.to_text().as_bytes())?;
    let mut trainer = if a.resume && outputs.checkpoint.exists() {
        let t = Trainer::from_checkpoint(&Checkpoint::load(&outputs.checkpoint)?, cfg.train.clone())?;
        if t.model.config != cfg.model {
            bail!("checkpoint model config differs from the requested one");
        }
        t
    } else {
        Trainer::new(cfg.model.clone(), cfg.train.clone())?
    };
    let rows = train(&mut trainer, &ds, Some(&outputs))?;
    if let Some(last) = rows.last() {
        println!("iter {} loss {:.6} psnr {:.2}", last.iter, last.loss, last.psnr);
    }
    println!("checkpoint {}", outputs.checkpoint.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<AbleModel<f32>> {
    let ck = Checkpoint::load(path)?;
    Ok(AbleModel::from_checkpoint(&ck)?)
}

fn render_split(model: &AbleModel<f32>, ds: &SceneDataset, chunk: usize) -> Result<Vec<(ImageBuffer, Vec<RayOutput>)>> {
    ds.cameras.iter().map(|c| Ok(render_view(model, c, ds.near, ds.far, chunk)?)).collect()
}

struct ViewMetrics {
    psnr: f64,
    ssim: f64,
}

fn metrics(renders: &[(ImageBuffer, Vec<RayOutput>)], ds: &SceneDataset) -> Result<Vec<ViewMetrics>> {
    renders
        .iter()
        .zip(&ds.images)
        .map(|((img, _), gt)| Ok(ViewMetrics { psnr: psnr(img, gt)?, ssim: ssim(img, gt)? }))
        .collect()
}

fn metrics_table(m: &[ViewMetrics]) -> String {
    let mut s = String::from("view,psnr,ssim\n");
    for (i, v) in m.iter().enumerate() {
        s.push_str(&format!("{i},{:.4},{:.5}\n", v.psnr, v.ssim));
    }
    let n = m.len() as f64;
    s.push_str(&format!(
        "mean,{:.4},{:.5}\n",
        m.iter().map(|v| v.psnr).sum::<f64>() / n,
        m.iter().map(|v| v.ssim).sum::<f64>() / n
    ));
    s
}

fn echo_data(d: &DataArgs) {
    println!(
        "ckpt = {:?}\ndataset = {:?}\nsplit = {:?}\ndownscale = {}\nchunk = {}",
        d.ckpt,
        d.dataset,
        d.split.name(),
        d.downscale,
        d.chunk
    );
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    echo_data(&a.data);
    let model = load_model(&a.data.ckpt)?;
    let ds = load_blender(&a.data.dataset, a.data.split, a.data.downscale)?;
    let renders = render_split(&model, &ds, a.data.chunk)?;
    for (i, (img, _)) in renders.iter().enumerate() {
        write_png(img, &a.out.join(format!("{}_{i:03}.png", ds.split.name())))?;
    }
    let table = metrics_table(&metrics(&renders, &ds)?);
    write_atomic(&a.out.join("metrics.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    echo_data(&a.data);
    let model = load_model(&a.data.ckpt)?;
    let ds = load_blender(&a.data.dataset, a.data.split, a.data.downscale)?;
    print!("{}", metrics_table(&metrics(&render_split(&model, &ds, a.data.chunk)?, &ds)?));
    Ok(())
}

fn cmd_depth(a: DepthArgs) -> Result<()> {
    echo_data(&a.data);
    println!("expected = {}", a.expected);
    let model = load_model(&a.data.ckpt)?;
    let ds = load_blender(&a.data.dataset, a.data.split, a.data.downscale)?;
    for (i, (_, outs)) in render_split(&model, &ds, a.data.chunk)?.into_iter().enumerate() {
        let outs: Vec<RayOutput> = if a.expected {
            outs.into_iter().map(|o| RayOutput { depth: o.expected_depth, ..o }).collect()
        } else {
            outs
        };
        let (img, depth) = depth_map(&outs, ds.width(), ds.height(), ds.near, ds.far)?;
        write_png(&img, &a.out.join(format!("depth_{i:03}.png")))?;
        write_depth_csv(&depth, ds.width(), &a.out.join(format!("depth_{i:03}.csv")))?;
    }
    println!("wrote {} depth maps to {}", ds.len(), a.out.display());
    Ok(())
}

fn cmd_perturb(a: PerturbArgs) -> Result<()> {
    let mode = match a.mode {
        PerturbMode::Gaussian => Perturbation::Gaussian { sigma: a.sigma },
        PerturbMode::Zero => Perturbation::Zero,
    };
    let out = a.out.clone().unwrap_or_else(|| {
        let mut p = a.ckpt.clone().into_os_string();
        p.push(".perturbed");
        PathBuf::from(p)
    });
    println!("ckpt = {:?}\nmode = {mode:?}\nseed = {}\nout = {out:?}", a.ckpt, a.seed);
    let ck = Checkpoint::load(&a.ckpt)?;
    let perturbed = perturb_le(&ck, mode, a.seed)?;
    perturbed.save(&out)?;
    if let Some(dir) = &a.dataset {
        let ds = load_blender(dir, a.split, 1)?;
        let before = render_split(&AbleModel::from_checkpoint(&ck)?, &ds, 256)?;
        let after = render_split(&AbleModel::from_checkpoint(&perturbed)?, &ds, 256)?;
        let mut table = String::from("view,mean_l2,psnr_before,psnr_after,direct_identical\n");
        for (i, ((b, bo), (f, fo))) in before.iter().zip(&after).enumerate() {
            write_png(b, &a.renders.join(format!("original_{i:03}.png")))?;
            write_png(f, &a.renders.join(format!("perturbed_{i:03}.png")))?;
            let same = bo.iter().zip(fo).all(|(x, y)| x.direct_rgb == y.direct_rgb);
            table.push_str(&format!("{i},{:.6e},{:.4},{:.4},{same}\n", mean_l2(b, f)?, psnr(b, &ds.images[i])?, psnr(f, &ds.images[i])?));
        }
        write_atomic(&a.renders.join("comparison.csv"), table.as_bytes())?;
        print!("{table}");
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    println!("scene = {:?}\nviews = {}\nres = {}\nout = {:?}\nseed = {}", a.scene, a.views, a.res, a.out, a.seed);
    let scene = match a.scene.as_str() {
        "builtin:default" => SyntheticScene::default_scene(),
        "builtin:sphere" => SyntheticScene::sphere_scene(),
        path => SyntheticScene::load(Path::new(path))?,
    };
    let train = generate_synthetic_dataset(&scene, a.views, a.res, a.seed)?;
    save_blender(&train, &a.out)?;
    for split in [Split::Val, Split::Test] {
        save_blender(&nearby_views(&scene, &train, NEARBY_DEGREES, split)?, &a.out)?;
    }
    write_atomic(&a.out.join("scene.txt"), scene.to_text().as_bytes())?;
    println!("wrote {} views per split to {}", a.views, a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["able", "train", "--config", "c", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["able", "frobnicate"]).is_err());
        let c = Cli::try_parse_from(["able", "--threads", "1", "train", "--config", "c", "--no-le", "--seed", "3"]).unwrap();
        match c.command {
            Command::Train(t) => assert!(t.no_le && !t.no_mask && t.seed == Some(3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn perturb_mode_parses() {
        let c = Cli::try_parse_from(["able", "perturb", "--ckpt", "m", "--mode", "gaussian", "--sigma", "0.5"]).unwrap();
        assert!(matches!(c.command, Command::Perturb(PerturbArgs { mode: PerturbMode::Gaussian, .. })));
        assert!(Cli::try_parse_from(["able", "perturb", "--ckpt", "m", "--mode", "blur"]).is_err());
    }

    #[test]
    fn missing_config_is_an_error() {
        let err = run(["able", "train", "--config", "/nonexistent/cfg.toml"]).unwrap_err();
        assert!(format!("{err:#}").contains("/nonexistent/cfg.toml"));
    }
}
