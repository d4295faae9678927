//! Command-line surface: simulate, reconstruct, evaluate, posterior and fsc.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{
    align_volume, fsc_curve, head_usage, pose_error_stats, posterior_heatmap, resolution_at, FSC_THRESHOLD_GT,
};
use crate::geometry::{Rotation, SphereGrid};
use crate::io::checkpoint::{load_trainer, save_trainer};
use crate::io::config::{read_config, RawRunConfig, RunConfig};
use crate::io::image::write_sphere_png;
use crate::io::mrc::{read_volume, write_volume};
use crate::io::report::{read_poses_csv, write_epoch_log, write_fsc_csv, write_json, write_posterior_csv, write_poses_csv};
use crate::io::{load_stack, save_stack};
use crate::objective::estimate_sigma;
use crate::simulator::{phantom_for_spec, synthesize_dataset};
use crate::trainer::{Preset, Trainer};
use crate::transforms::Mask;
use crate::volume::MEVolume;

pub const CHECKPOINT_FILE: &str = "checkpoint.spin";
pub const LOG_FILE: &str = "train_log.csv";
pub const VOLUME_FILE: &str = "reconstruction.mrc";
pub const POSES_FILE: &str = "poses.csv";
pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const EVAL_REPORT_FILE: &str = "evaluation.json";
pub const FSC_FILE: &str = "fsc.csv";

#[derive(Parser, Debug)]
#[command(name = "cryorecon", version, about = "Ab-initio cryo-EM reconstruction at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Synthetic,
    Desk,
    RealStyle,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Preset {
        match p {
            PresetArg::Synthetic => Preset::Synthetic,
            PresetArg::Desk => Preset::Desk,
            PresetArg::RealStyle => Preset::RealStyle,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration; paths inside it are relative to the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Overrides the output directory from the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom and a particle stack.
    Simulate(ConfigArgs),
    /// Run two-stage training on a particle stack.
    Reconstruct {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        switch_epoch: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        no_freq_march: bool,
        /// Keep auto-encoding for every epoch.
        #[arg(long)]
        fully_amortized: bool,
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in this invocation, leaving a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compare a reconstruction with the simulation ground truth.
    Evaluate(ConfigArgs),
    /// Orientation posterior heatmaps for selected particles.
    Posterior {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated particle ids.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        level: u32,
        #[arg(long, default_value_t = 16)]
        inplane: usize,
        /// Volume to score against; defaults to the reconstruction.
        #[arg(long)]
        volume: Option<PathBuf>,
    },
    /// Fourier shell correlation between two volumes.
    Fsc {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = FSC_THRESHOLD_GT)]
        threshold: f64,
        /// Curve CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let (raw, base) = match &args.config {
        Some(p) => (read_config(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (RawRunConfig::default(), PathBuf::from(".")),
    };
    let mut cfg = raw.resolve(args.preset.map(Preset::from))?.rebase(&base);
    if let Some(out) = &args.out {
        cfg.paths.output_dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    Ok(cfg.paths.output_dir.clone())
}

fn simulate(cfg: &RunConfig) -> Result<()> {
    let phantom = phantom_for_spec(&cfg.simulation)?;
    let stack = synthesize_dataset(&phantom, &cfg.simulation)?;
    for p in [&cfg.paths.stack, &cfg.paths.metadata, &cfg.paths.phantom] {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_volume(&cfg.paths.phantom, phantom.l, cfg.simulation.pixel_size, &phantom.density)?;
    save_stack(&cfg.paths.stack, &cfg.paths.metadata, &stack)?;
    println!("wrote {} images of size {} to {}", stack.len(), stack.l, cfg.paths.stack.display());
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    config_digest: String,
    config: &'a RunConfig,
    epochs_completed: usize,
    finished: bool,
    final_mean_loss: Option<f64>,
    final_median_pose_error: Option<f64>,
    head_usage: Vec<f64>,
}

fn write_outputs(dir: &Path, cfg: &RunConfig, t: &Trainer) -> Result<()> {
    save_trainer(&dir.join(CHECKPOINT_FILE), t)?;
    write_epoch_log(&dir.join(LOG_FILE), &t.log, t.config.heads)?;
    write_volume(&dir.join(VOLUME_FILE), t.l, t.volume.pixel_size, &t.volume.to_real_density())?;
    let heads: Vec<usize> = match &t.poses {
        Some(table) => table.entries.iter().map(|e| e.head).collect(),
        None => t.last_winners.iter().map(|w| w.1).collect(),
    };
    let poses = t.current_poses();
    if !poses.is_empty() {
        write_poses_csv(&dir.join(POSES_FILE), &poses, Some(&heads))?;
    }
    let last = t.log.last();
    let report = RunReport {
        config_digest: cfg.digest(),
        config: cfg,
        epochs_completed: t.epoch,
        finished: t.is_done(),
        final_mean_loss: last.map(|l| l.mean_wta_loss),
        final_median_pose_error: last.and_then(|l| l.median_pose_error),
        head_usage: head_usage(&heads, t.config.heads),
    };
    write_json(&dir.join(RUN_REPORT_FILE), &report)
}

#[allow(clippy::too_many_arguments)]
fn reconstruct(
    mut cfg: RunConfig,
    switch_epoch: Option<usize>,
    heads: Option<usize>,
    no_freq_march: bool,
    fully_amortized: bool,
    resume: Option<PathBuf>,
    stop_after: Option<usize>,
    workers: Option<usize>,
) -> Result<()> {
    let tc = &mut cfg.training;
    if let Some(s) = switch_epoch {
        tc.switch_epoch = s;
    }
    if let Some(h) = heads {
        tc.heads = h;
    }
    if no_freq_march {
        tc.freq_march = false;
    }
    if fully_amortized {
        tc.fully_amortized = true;
    }
    if let Some(w) = workers {
        tc.workers = w;
    }
    cfg.validate()?;
    let stack = load_stack(&cfg.paths.stack, &cfg.paths.metadata)?;
    let dir = out_dir(&cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = load_trainer(&p)?;
            if t.config != cfg.training {
                return Err(Error::Config("checkpoint was written with a different training configuration".into()));
            }
            t.config.workers = cfg.training.workers;
            t
        }
        None => Trainer::new(cfg.training.clone(), &stack)?,
    };
    let budget = stop_after.unwrap_or(usize::MAX);
    let mut ran = 0;
    while !trainer.is_done() && ran < budget {
        let log = trainer.run_epoch(&stack)?;
        ran += 1;
        let err = log.median_pose_error.map_or("n/a".to_string(), |e| format!("{e:.2} deg"));
        println!(
            "epoch {:>3} {:?} loss {:.6} mask {} median pose error {} ({:.1}s)",
            log.epoch, log.stage, log.mean_wta_loss, log.mask_radius, err, log.wall_seconds
        );
        write_outputs(&dir, &cfg, &trainer)?;
    }
    if ran == 0 {
        write_outputs(&dir, &cfg, &trainer)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    pose_error_mean_deg: f64,
    pose_error_median_deg: f64,
    flipped: bool,
    resolution_fsc_0_5_angstrom: f64,
    head_usage: Option<Vec<f64>>,
}

fn evaluate(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let stack = load_stack(&cfg.paths.stack, &cfg.paths.metadata)?;
    let gt = stack.gt_poses.as_ref().ok_or_else(|| Error::Metadata("evaluation needs ground-truth poses".into()))?;
    let (l, px, rec) = read_volume(&dir.join(VOLUME_FILE))?;
    let (lp, _, phantom) = read_volume(&cfg.paths.phantom)?;
    if l != lp {
        return Err(Error::DimensionMismatch { expected: lp, got: l });
    }
    let (poses, heads) = read_poses_csv(&dir.join(POSES_FILE))?;
    if poses.len() != gt.len() {
        return Err(Error::DimensionMismatch { expected: gt.len(), got: poses.len() });
    }
    let pred: Vec<Rotation> = poses.iter().map(|p| p.rotation).collect();
    let truth: Vec<Rotation> = gt.iter().map(|p| p.rotation).collect();
    let report = pose_error_stats(&pred, &truth)?;
    let curve = fsc_curve(&align_volume(&rec, l, &report), &phantom, l, px)?;
    let resolution = resolution_at(&curve, FSC_THRESHOLD_GT, px);
    write_fsc_csv(&dir.join(FSC_FILE), &curve)?;
    let head_usage = heads.iter().copied().collect::<Option<Vec<usize>>>().map(|h| {
        let m = h.iter().max().map_or(1, |m| m + 1);
        head_usage(&h, m)
    });
    let out = EvalReport {
        pose_error_mean_deg: report.mean,
        pose_error_median_deg: report.median,
        flipped: report.alignment.flipped,
        resolution_fsc_0_5_angstrom: resolution,
        head_usage,
    };
    write_json(&dir.join(EVAL_REPORT_FILE), &out)?;
    println!(
        "median pose error {:.2} deg, mean {:.2} deg, FSC=0.5 resolution {:.2} A{}",
        out.pose_error_median_deg,
        out.pose_error_mean_deg,
        resolution,
        if out.flipped { " (mirrored hand)" } else { "" }
    );
    Ok(())
}

fn posterior(cfg: &RunConfig, ids: &[usize], level: u32, inplane: usize, volume: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(cfg)?;
    let stack = load_stack(&cfg.paths.stack, &cfg.paths.metadata)?;
    let (l, px, density) = read_volume(&volume.unwrap_or_else(|| dir.join(VOLUME_FILE)))?;
    if l != stack.l {
        return Err(Error::DimensionMismatch { expected: stack.l, got: l });
    }
    let vol = MEVolume::from_density(&density, l, px)?;
    let noise = estimate_sigma(&stack)?;
    let grid = SphereGrid::new(level);
    let mask = Mask::new(l, Mask::max_radius(l));
    let translations = read_poses_csv(&dir.join(POSES_FILE)).ok().map(|(p, _)| p);
    for &i in ids {
        if i >= stack.len() {
            return Err(Error::Metadata(format!("particle id {i} out of range (stack has {})", stack.len())));
        }
        let t = translations.as_ref().and_then(|p| p.get(i)).map_or([0.0, 0.0], |p| p.translation);
        let map = posterior_heatmap(&stack.hartley_image(i), &stack.ctf_image(i), &vol, &noise, &grid, inplane, t, &mask)?;
        write_posterior_csv(&dir.join(format!("posterior_{i}.csv")), &grid, &map)?;
        write_sphere_png(&dir.join(format!("posterior_{i}.png")), &grid, &map.values, 256)?;
        println!("particle {i}: posterior mode at cell {}", map.argmax());
    }
    Ok(())
}

fn fsc(a: &Path, b: &Path, threshold: f64, out: Option<PathBuf>) -> Result<()> {
    let (la, pa, va) = read_volume(a)?;
    let (lb, _, vb) = read_volume(b)?;
    if la != lb {
        return Err(Error::DimensionMismatch { expected: la, got: lb });
    }
    let curve = fsc_curve(&va, &vb, la, pa)?;
    if let Some(p) = out {
        write_fsc_csv(&p, &curve)?;
    }
    for (r, v) in curve.radii.iter().zip(&curve.values) {
        println!("{r}\t{v:.6}");
    }
    println!("resolution at {threshold}: {:.3} A", resolution_at(&curve, threshold, pa));
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => simulate(&resolve(&c)?),
        Command::Reconstruct { common, switch_epoch, heads, no_freq_march, fully_amortized, resume, stop_after, workers } => {
            reconstruct(resolve(&common)?, switch_epoch, heads, no_freq_march, fully_amortized, resume, stop_after, workers)
        }
        Command::Evaluate(c) => evaluate(&resolve(&c)?),
        Command::Posterior { common, ids, level, inplane, volume } => posterior(&resolve(&common)?, &ids, level, inplane, volume),
        Command::Fsc { a, b, threshold, out } => fsc(&a, &b, threshold, out),
    }
}

/// Parses `argv` and runs; returns the process exit code (2 for usage errors).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
