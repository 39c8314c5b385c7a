//! Command-line toolkit: synthetic terrain, degradation, mask generation,
//! training, restoration, evaluation, and forward-process diagnostics.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! All randomness flows from `--seed`; every run writes a resolved-config
//! JSON next to its primary output. Relative paths resolve against
//! `DEMRES_DATA_DIR` when that variable is set.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use demres::degrade::{gen_void_mask, MaskSpec};
use demres::denoiser::{load_checkpoint, save_checkpoint, DenoiserConfig};
use demres::eval::{bicubic_baseline, error_map, evaluate, write_metrics_csv};
use demres::grid::Grid2;
use demres::raster::{
    read_raster, synth_terrain, tile, write_raster, HeightGrid, RasterFormat, TileSet,
};
use demres::rng::{normal_field, rng_from_seed};
use demres::sampling::{restore, SampleMode, SamplerConfig};
use demres::sde::{forward_transition, marginal, ScheduleSpec, ThetaProfile};
use demres::training::{degrade_for_eval, train, TrainConfig, TrainSinks};

#[derive(Parser)]
#[command(name = "demres", version, about = "Elevation-model restoration toolkit")]
struct Cli {
    /// Bound worker-thread parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fractal test terrain.
    Synth(SynthArgs),
    /// Downsample a raster and inject random-walk voids.
    Degrade(DegradeArgs),
    /// Generate a void mask raster from a preset.
    MaskGen(MaskGenArgs),
    /// Train the restoration model on tiles cut from a raster.
    Train(TrainArgs),
    /// Restore a degraded raster with a trained checkpoint.
    Restore(RestoreArgs),
    /// Score restored tiles against ground truth.
    Evaluate(EvaluateArgs),
    /// Monte Carlo diagnostics of the forward process.
    SimulateSde(SimulateSdeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Native,
    Asc,
}

impl FormatArg {
    fn to_format(self) -> RasterFormat {
        match self {
            FormatArg::Native => RasterFormat::NativeBinary,
            FormatArg::Asc => RasterFormat::EsriAscii,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Constant,
    Cosine,
}

impl ProfileArg {
    fn to_profile(self) -> ThetaProfile {
        match self {
            ProfileArg::Constant => ThetaProfile::Constant,
            ProfileArg::Cosine => ThetaProfile::CosineIncreasing,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    OptimalState,
    EulerSde,
}

impl ModeArg {
    fn to_mode(self) -> SampleMode {
        match self {
            ModeArg::OptimalState => SampleMode::OptimalState,
            ModeArg::EulerSde => SampleMode::EulerSde,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    rows: usize,
    #[arg(long, default_value_t = 256)]
    cols: usize,
    #[arg(long, default_value_t = 0.55)]
    roughness: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Native)]
    format: FormatArg,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    /// Void-mask preset (e.g. M-311, M-533); omit for no voids.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct MaskGenArgs {
    /// Preset name, e.g. M-423.
    #[arg(long, conflicts_with_all = ["n_center", "t_walk", "r_v"])]
    preset: Option<String>,
    #[arg(long)]
    n_center: Option<usize>,
    #[arg(long)]
    t_walk: Option<usize>,
    #[arg(long)]
    r_v: Option<usize>,
    #[arg(long, default_value_t = 96)]
    rows: usize,
    #[arg(long, default_value_t = 96)]
    cols: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output mask raster (1 = void, 0 = observed).
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Source raster to tile into training patches.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 64)]
    tile: usize,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long, default_value = "M-311")]
    preset: String,
    /// JSON file mirroring the training configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    edge_weight: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = ProfileArg::Cosine)]
    profile: ProfileArg,
    /// Desk-scale model by default; `--full-model` selects the 64-channel one.
    #[arg(long)]
    full_model: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Validation tiles restored per validation pass (0 disables).
    #[arg(long, default_value_t = 0)]
    val_tiles: usize,
    #[arg(long, default_value_t = 500)]
    val_every: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    /// Total reverse steps; must match the checkpoint's schedule.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::OptimalState)]
    mode: ModeArg,
    #[arg(long)]
    stochastic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Restored raster file or directory of rasters.
    #[arg(long, required_unless_present = "baseline_of")]
    pred: Option<PathBuf>,
    /// Ground-truth raster file or directory (aligned by sorted file name).
    #[arg(long)]
    gt: PathBuf,
    /// Score the bicubic baseline of this degraded input instead of --pred.
    #[arg(long, conflicts_with = "pred", value_name = "PATH")]
    baseline_of: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for grayscale error-heatmap PNGs.
    #[arg(long)]
    heatmap_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateSdeArgs {
    #[arg(long, default_value_t = 100)]
    t: usize,
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = ProfileArg::Cosine)]
    profile: ProfileArg,
    #[arg(long, default_value_t = 0.005)]
    terminal_decay: f64,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    #[arg(long, default_value_t = 1.0)]
    x0: f64,
    #[arg(long, default_value_t = 0.0)]
    mu: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<demres::Error>() {
        Some(
            demres::Error::NonFiniteLoss(_)
            | demres::Error::NonFiniteState(_)
            | demres::Error::DegenerateVariance(_),
        ) => 3,
        _ => 2,
    }
}

/// Resolves a path against `DEMRES_DATA_DIR` when relative.
fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("DEMRES_DATA_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn emit_config(primary_output: &Path, value: serde_json::Value) -> Result<()> {
    let mut name = primary_output.as_os_str().to_os_string();
    name.push(".run.json");
    fs::write(PathBuf::from(name), serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Degrade(args) => cmd_degrade(args),
        Command::MaskGen(args) => cmd_mask_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Restore(args) => cmd_restore(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::SimulateSde(args) => cmd_simulate_sde(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let output = resolve(&args.output);
    let grid = synth_terrain(args.rows, args.cols, args.roughness, args.seed)?;
    write_raster(&grid, &output, args.format.to_format())?;
    emit_config(
        &output,
        json!({
            "command": "synth",
            "rows": args.rows,
            "cols": args.cols,
            "roughness": args.roughness,
            "seed": args.seed,
            "output": output,
        }),
    )?;
    println!("wrote {}x{} terrain to {}", args.rows, args.cols, output.display());
    Ok(())
}

fn cmd_degrade(args: DegradeArgs) -> Result<()> {
    let input = resolve(&args.input);
    let output = resolve(&args.output);
    let grid = read_raster(&input, RasterFormat::from_path(&input))
        .with_context(|| format!("reading {}", input.display()))?;
    let mask = match &args.preset {
        Some(p) => Some(p.parse::<MaskSpec>()?),
        None => None,
    };
    let degraded = match &mask {
        Some(spec) => degrade_for_eval(&grid, args.scale, spec, args.seed)?,
        None => demres::degrade::downsample(&grid, args.scale)?,
    };
    write_raster(&degraded, &output, RasterFormat::from_path(&output))?;
    emit_config(
        &output,
        json!({
            "command": "degrade",
            "input": input,
            "scale": args.scale,
            "preset": args.preset,
            "seed": args.seed,
            "output": output,
        }),
    )?;
    println!(
        "degraded {}x{} -> {}x{} ({})",
        grid.rows(),
        grid.cols(),
        degraded.rows(),
        degraded.cols(),
        output.display()
    );
    Ok(())
}

fn cmd_mask_gen(args: MaskGenArgs) -> Result<()> {
    let output = resolve(&args.output);
    let spec = match (&args.preset, args.n_center, args.t_walk, args.r_v) {
        (Some(name), _, _, _) => name.parse::<MaskSpec>()?,
        (None, Some(n), Some(t), Some(r)) => MaskSpec::new(n, t, r)?,
        _ => bail!("provide either --preset or all of --n-center/--t-walk/--r-v"),
    };
    let mask = gen_void_mask(&spec, args.rows, args.cols, args.seed)?;
    let values = Grid2::from_fn(args.rows, args.cols, |r, c| {
        if mask.mask[(r, c)] {
            1.0
        } else {
            0.0
        }
    });
    let grid = HeightGrid::from_values(values, 1.0)?;
    write_raster(&grid, &output, RasterFormat::from_path(&output))?;
    emit_config(
        &output,
        json!({
            "command": "mask-gen",
            "spec": spec.to_string(),
            "rows": args.rows,
            "cols": args.cols,
            "seed": args.seed,
            "void_cells": mask.void_count(),
            "output": output,
        }),
    )?;
    println!(
        "mask {} with {} void cells -> {}",
        spec,
        mask.void_count(),
        output.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let input = resolve(&args.input);
    let out_dir = resolve(&args.out_dir);
    fs::create_dir_all(&out_dir)?;

    let mut config: TrainConfig = match &args.config {
        Some(path) => {
            let path = resolve(path);
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| "parsing train config")?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.lr_init = v;
    }
    if let Some(v) = args.edge_weight {
        config.edge_weight = v;
    }
    if let Some(v) = args.beta2 {
        config.beta2 = v;
    }
    config.seed = args.seed;

    let mask: MaskSpec = args.preset.parse()?;
    let sched_spec = ScheduleSpec {
        t: args.steps,
        profile: args.profile.to_profile(),
        lambda: args.lambda,
        terminal_decay: 0.005,
    };
    let model_config = if args.full_model {
        DenoiserConfig::full()
    } else {
        DenoiserConfig::desk()
    };

    let grid = read_raster(&input, RasterFormat::from_path(&input))
        .with_context(|| format!("reading {}", input.display()))?;
    let (train_set, test_set) = tile(&grid, args.tile, args.tile, args.train_fraction, args.seed)?;
    eprintln!(
        "tiled {} train / {} test patches of {}x{}",
        train_set.len(),
        test_set.len(),
        args.tile,
        args.tile
    );

    let sinks = TrainSinks {
        loss_csv: Some(out_dir.join("loss.csv")),
        val_csv: if args.val_tiles > 0 {
            Some(out_dir.join("val.csv"))
        } else {
            None
        },
        checkpoint_dir: Some(out_dir.clone()),
        checkpoint_every: args.checkpoint_every,
        val_every: args.val_every,
        val_tiles: args.val_tiles,
    };
    let val_set = if args.val_tiles > 0 { Some(&test_set) } else { None };
    let mut state = train(
        &train_set,
        args.scale,
        &mask,
        &sched_spec,
        &model_config,
        &config,
        val_set,
        &sinks,
    )?;

    let ckpt = out_dir.join("model.ckpt");
    save_checkpoint(&mut state.model, &sched_spec, state.step, &ckpt)?;
    let resolved = json!({
        "command": "train",
        "input": input,
        "tile": args.tile,
        "train_fraction": args.train_fraction,
        "scale": args.scale,
        "preset": mask.to_string(),
        "schedule": sched_spec,
        "model": model_config,
        "train": config,
        "out_dir": out_dir,
    });
    fs::write(
        out_dir.join("resolved_config.json"),
        serde_json::to_string_pretty(&resolved)?,
    )?;
    println!("trained {} steps; checkpoint at {}", state.step, ckpt.display());
    Ok(())
}

fn cmd_restore(args: RestoreArgs) -> Result<()> {
    let input = resolve(&args.input);
    let output = resolve(&args.output);
    let ckpt_path = resolve(&args.checkpoint);

    let (mut model, sched_spec, trained_steps) = load_checkpoint(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let sched = sched_spec.build()?;
    let sampler = SamplerConfig {
        t: args.steps.unwrap_or(sched_spec.t),
        mode: args.mode.to_mode(),
        stochastic: args.stochastic,
        seed: args.seed,
        ..Default::default()
    };

    let lq = read_raster(&input, RasterFormat::from_path(&input))
        .with_context(|| format!("reading {}", input.display()))?;
    let restored = restore(&lq, &mut model, &sched, args.scale, &sampler)?;
    write_raster(&restored, &output, RasterFormat::from_path(&output))?;
    emit_config(
        &output,
        json!({
            "command": "restore",
            "input": input,
            "checkpoint": ckpt_path,
            "checkpoint_steps": trained_steps,
            "scale": args.scale,
            "sampler": sampler,
            "schedule": sched_spec,
            "output": output,
        }),
    )?;
    println!(
        "restored {}x{} -> {}x{} ({})",
        lq.rows(),
        lq.cols(),
        restored.rows(),
        restored.cols(),
        output.display()
    );
    Ok(())
}

/// Loads one raster or every raster in a directory (sorted by file name).
fn load_tiles(path: &Path) -> Result<Vec<(String, HeightGrid)>> {
    let meta = fs::metadata(path).with_context(|| format!("reading {}", path.display()))?;
    if meta.is_file() {
        let g = read_raster(path, RasterFormat::from_path(path))?;
        return Ok(vec![(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            g,
        )]);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("dem") | Some("asc") | Some("bin") | Some("raw")
            )
        })
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for p in names {
        let g = read_raster(&p, RasterFormat::from_path(&p))
            .with_context(|| format!("reading {}", p.display()))?;
        out.push((p.file_name().unwrap().to_string_lossy().into_owned(), g));
    }
    Ok(out)
}

fn to_tileset(tiles: Vec<(String, HeightGrid)>) -> Result<TileSet> {
    if tiles.is_empty() {
        bail!("no rasters found");
    }
    let (rows, cols) = (tiles[0].1.rows(), tiles[0].1.cols());
    Ok(TileSet {
        tiles: tiles.into_iter().map(|(_, g)| g).collect(),
        tile_rows: rows,
        tile_cols: cols,
        split_seed: 0,
    })
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let gt_tiles = load_tiles(&resolve(&args.gt))?;
    let gt_names: Vec<String> = gt_tiles.iter().map(|(n, _)| n.clone()).collect();
    let gt = to_tileset(gt_tiles)?;

    let pred = match &args.baseline_of {
        Some(lq_path) => {
            let lq_tiles = load_tiles(&resolve(lq_path))?;
            let upsampled: demres::Result<Vec<HeightGrid>> = lq_tiles
                .iter()
                .map(|(_, g)| bicubic_baseline(g, args.scale))
                .collect();
            let tiles = upsampled?;
            let (rows, cols) = (tiles[0].rows(), tiles[0].cols());
            TileSet {
                tiles,
                tile_rows: rows,
                tile_cols: cols,
                split_seed: 0,
            }
        }
        None => to_tileset(load_tiles(&resolve(args.pred.as_ref().unwrap()))?)?,
    };

    let (report, per_tile) = evaluate(&pred, &gt)?;
    let csv_path = resolve(&args.csv);
    write_metrics_csv(&csv_path, &per_tile, &report)?;
    if let Some(report_path) = &args.report {
        fs::write(resolve(report_path), serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(dir) = &args.heatmap_dir {
        let dir = resolve(dir);
        fs::create_dir_all(&dir)?;
        for (k, (p, g)) in pred.tiles.iter().zip(gt.tiles.iter()).enumerate() {
            let map = error_map(&p.values, &g.values)?;
            let name = gt_names
                .get(k)
                .map(|n| format!("{n}.err.png"))
                .unwrap_or_else(|| format!("tile_{k:04}.err.png"));
            write_heatmap_png(&dir.join(name), &map)?;
        }
    }
    emit_config(
        &csv_path,
        json!({
            "command": "evaluate",
            "pred": args.pred,
            "baseline_of": args.baseline_of,
            "gt": args.gt,
            "scale": args.scale,
            "report": report,
        }),
    )?;
    println!(
        "tiles={} mae={:.4} rmse={:.4} psnr={:.2} ssim={:.4}",
        per_tile.len(),
        report.mae,
        report.rmse,
        report.psnr,
        report.ssim
    );
    Ok(())
}

fn write_heatmap_png(path: &Path, map: &Grid2<f64>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(file, map.cols() as u32, map.rows() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let pixels: Vec<u8> = map.iter().map(|v| (v * 255.0).round() as u8).collect();
    writer.write_image_data(&pixels)?;
    Ok(())
}

fn cmd_simulate_sde(args: SimulateSdeArgs) -> Result<()> {
    let output = resolve(&args.output);
    let spec = ScheduleSpec {
        t: args.t,
        profile: args.profile.to_profile(),
        lambda: args.lambda,
        terminal_decay: args.terminal_decay,
    };
    let sched = spec.build()?;
    let x0 = Grid2::filled(1, 1, args.x0);
    let mu = Grid2::filled(1, 1, args.mu);

    let mut rng = rng_from_seed(args.seed);
    let mut paths: Vec<Grid2<f64>> = vec![x0.clone(); args.paths];
    let mut csv = String::from("i,mean_err,std\n");
    for i in 1..=args.t {
        for p in paths.iter_mut() {
            let noise = normal_field(1, 1, &mut rng);
            *p = forward_transition(p, &mu, &sched, i, &noise)?.x;
        }
        let mean: f64 = paths.iter().map(|p| p[(0, 0)]).sum::<f64>() / args.paths as f64;
        let var: f64 = paths
            .iter()
            .map(|p| (p[(0, 0)] - mean).powi(2))
            .sum::<f64>()
            / (args.paths - 1) as f64;
        let (closed_mean, _) = marginal(&x0, &mu, &sched, i)?;
        csv.push_str(&format!(
            "{i},{:.8},{:.8}\n",
            (mean - closed_mean[(0, 0)]).abs(),
            var.sqrt()
        ));
    }
    fs::write(&output, csv)?;
    emit_config(
        &output,
        json!({
            "command": "simulate-sde",
            "schedule": spec,
            "paths": args.paths,
            "x0": args.x0,
            "mu": args.mu,
            "seed": args.seed,
            "output": output,
        }),
    )?;
    println!("wrote {} rows to {}", args.t, output.display());
    Ok(())
}
