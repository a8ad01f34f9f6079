use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use roadfuse_core::crnn::CrnnModel;
use roadfuse_core::io::{list_frames, load_frame, write_frame, FrameInput};
use roadfuse_core::pipeline::{
    bundled_sky_samples, crnn_protocol, inspect, patch_sources, run_ablation, run_frames, sky_prior_samples,
    worker_pool, RunContext, FULL_GRID,
};
use roadfuse_core::synthetic::{generate, random_spec, Tier};
use roadfuse_core::{FeatureConfig, InferenceMode, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "roadfuse", version, about = "Joint object segmentation and semantic labeling of road scenes")]
struct Cli {
    /// `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// separated | holistic
    #[arg(long, global = true)]
    mode: Option<InferenceMode>,
    /// RGB | RGB_HC | RGBXYZ | RGBXYZ_HC
    #[arg(long, global = true)]
    features: Option<FeatureConfig>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "roadfuse_out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment and label every frame of a dataset.
    Run(RunArgs),
    /// Compare the four feature configurations under both inference modes.
    Ablation(RunArgs),
    /// Train the patch classifier on a dataset with ground truth.
    TrainCrnn(TrainArgs),
    /// Print one stage of one frame as JSON.
    Inspect(InspectArgs),
    /// Write a synthetic dataset with exact ground truth.
    GenScenes(GenArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset root (image_02/, velodyne/, calib/, optional gt/ and sky/).
    #[arg(long)]
    data: PathBuf,
    /// Trained patch classifier; without it every class scores uniformly.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset whose sky masks train the sky model; defaults to the
    /// bundled hand-labeled masks.
    #[arg(long)]
    sky: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Only these frame ids.
    #[arg(long, value_delimiter = ',')]
    frames: Vec<String>,
    /// Cache fitted appearance models under <out>/cache.
    #[arg(long)]
    cache: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Train all four masked x depth variants instead of the configured one.
    #[arg(long)]
    grid: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    frame: String,
    /// register | hypothesize | priors | scores | unaries
    #[arg(long)]
    stage: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TierArg {
    Clean,
    Noisy,
    Shadows,
    Clutter,
    /// Cycle through every tier.
    All,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, value_enum, default_value_t = TierArg::All)]
    tier: TierArg,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PipelineConfig::parse(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(m) = cli.mode {
        config.mode = m;
    }
    if let Some(f) = cli.features {
        config.features = f;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    Ok(config.validated()?)
}

fn frame_ids(root: &Path, only: &[String]) -> Result<Vec<String>> {
    let ids = list_frames(root)?;
    if only.is_empty() {
        return Ok(ids);
    }
    for id in only {
        if !ids.contains(id) {
            bail!("frame {id} not found under {}", root.display());
        }
    }
    Ok(only.to_vec())
}

fn sky_from(root: Option<&Path>) -> Result<Vec<[f64; 3]>> {
    let Some(root) = root else {
        return Ok(bundled_sky_samples()?);
    };
    let frames: Vec<FrameInput> = list_frames(root)?
        .iter()
        .map(|id| load_frame(root, id))
        .collect::<roadfuse_core::Result<_>>()?;
    let pairs: Vec<_> = frames
        .iter()
        .filter_map(|f| f.sky_mask.as_deref().map(|m| (&f.image, m)))
        .collect();
    if pairs.is_empty() {
        log::warn!("no sky masks under {}; using the bundled ones", root.display());
        return Ok(bundled_sky_samples()?);
    }
    Ok(sky_prior_samples(&pairs))
}

fn load_model(path: Option<&Path>) -> Result<Option<CrnnModel>> {
    path.map(|p| CrnnModel::load(p).with_context(|| format!("loading model {}", p.display())))
        .transpose()
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(config: &PipelineConfig, out: &Path, args: &RunArgs) -> Result<()> {
    let model = load_model(args.data.model.as_deref())?;
    let sky = sky_from(args.data.sky.as_deref())?;
    let cache = out.join("cache");
    let ctx = RunContext {
        config,
        model: model.as_ref(),
        sky: &sky,
        cache: args.cache.then_some(cache.as_path()),
    };
    let ids = frame_ids(&args.data.data, &args.frames)?;
    let frames: Vec<_> = ids.iter().map(|id| load_frame(&args.data.data, id)).collect();
    let manifest = run_frames(&frames, &ctx, out)?;
    println!("{} of {} frames processed", manifest.succeeded(), manifest.frames.len());
    if let Some(s) = manifest.summary {
        println!(
            "GCE {:.4}  LCE {:.4}  accuracy {:.2}%  ({} frames with ground truth)",
            s.mean_gce, s.mean_lce, s.accuracy, s.frames
        );
    }
    Ok(())
}

fn ablation(config: &PipelineConfig, out: &Path, args: &RunArgs) -> Result<()> {
    let model = load_model(args.data.model.as_deref())?;
    let sky = sky_from(args.data.sky.as_deref())?;
    let ctx = RunContext {
        config,
        model: model.as_ref(),
        sky: &sky,
        cache: None,
    };
    let frames: Vec<FrameInput> = frame_ids(&args.data.data, &args.frames)?
        .iter()
        .map(|id| load_frame(&args.data.data, id))
        .collect::<roadfuse_core::Result<Vec<_>>>()?
        .into_iter()
        .filter(|f| f.truth.is_some())
        .collect();
    if frames.is_empty() {
        bail!("no frames with ground truth under {}", args.data.data.display());
    }
    let (report, _) = run_ablation(&frames, &ctx)?;
    std::fs::create_dir_all(out)?;
    let text = report.to_text();
    write(&out.join("ablation.txt"), &text)?;
    write(&out.join("ablation.csv"), &report.to_csv())?;
    write(&out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    print!("{text}");
    Ok(())
}

fn train(config: &PipelineConfig, out: &Path, args: &TrainArgs) -> Result<()> {
    let frames: Vec<FrameInput> = list_frames(&args.data)?
        .iter()
        .map(|id| load_frame(&args.data, id))
        .collect::<roadfuse_core::Result<_>>()?;
    let sources = patch_sources(&frames, config)?;
    let total: usize = sources.iter().map(|s| s.clusters.len()).sum();
    if total == 0 {
        bail!("no labeled object hypotheses under {}", args.data.display());
    }
    let cells = if args.grid {
        FULL_GRID.to_vec()
    } else {
        vec![(config.patch_masked, config.patch_depth)]
    };
    let grid = crnn_protocol(&sources, config, &cells)?;
    std::fs::create_dir_all(out)?;
    for cell in &grid {
        let name = if args.grid {
            format!(
                "crnn_{}_{}.bin",
                if cell.masked { "masked" } else { "unmasked" },
                if cell.depth { "rgbd" } else { "rgb" }
            )
        } else {
            "crnn.bin".to_string()
        };
        let path = out.join(name);
        cell.model.as_ref().expect("trained").save(&path)?;
        println!(
            "{:<9} {:<5} train {:>5.1}%  test {:>5.1}%  ({} / {} patches) -> {}",
            if cell.masked { "masked" } else { "unmasked" },
            if cell.depth { "RGBD" } else { "RGB" },
            100.0 * cell.train_accuracy,
            100.0 * cell.test_accuracy,
            cell.train_patches,
            cell.test_patches,
            path.display()
        );
    }
    write(&out.join("crnn_report.json"), &serde_json::to_string_pretty(&grid)?)?;
    Ok(())
}

fn gen_scenes(config: &PipelineConfig, out: &Path, args: &GenArgs) -> Result<()> {
    let tier_of = |i: usize| match args.tier {
        TierArg::Clean => Tier::Clean,
        TierArg::Noisy => Tier::Noisy,
        TierArg::Shadows => Tier::Shadows,
        TierArg::Clutter => Tier::Clutter,
        TierArg::All => Tier::ALL[i % Tier::ALL.len()],
    };
    let pool = worker_pool(config.workers)?;
    let frames: Vec<_> = pool.install(|| {
        (0..args.count)
            .into_par_iter()
            .map(|i| generate(&random_spec(config.seed + i as u64, tier_of(i))))
            .collect()
    });
    for f in &frames {
        write_frame(out, f)?;
    }
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|config| match &cli.command {
        Command::Run(a) => run(&config, &cli.out, a),
        Command::Ablation(a) => ablation(&config, &cli.out, a),
        Command::TrainCrnn(a) => train(&config, &cli.out, a),
        Command::Inspect(a) => {
            let model = load_model(a.data.model.as_deref())?;
            let sky = sky_from(a.data.sky.as_deref())?;
            let ctx = RunContext {
                config: &config,
                model: model.as_ref(),
                sky: &sky,
                cache: None,
            };
            let frame = load_frame(&a.data.data, &a.frame)?;
            println!("{}", serde_json::to_string_pretty(&inspect(&frame, &a.stage, &ctx)?)?);
            Ok(())
        }
        Command::GenScenes(a) => gen_scenes(&config, &cli.out, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
