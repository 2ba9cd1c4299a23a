//! `s2rc` — train, evaluate, and render hyperspectral scene classifiers.
//!
//! Subcommands: `gen-synth` writes a synthetic labeled scene to a dataset
//! directory, `train` fits a model from a config file, `eval` scores a
//! checkpoint on its held-out pixels, `predict-map` renders a full-scene
//! classification map, and `ablate` compares the full model against the
//! three reduced variants over several seeds.
//!
//! Every run is deterministic in (config, seed, dataset): artifacts for the
//! same inputs are byte-identical. All file writes are atomic.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use s2rc_core::dataio::ppm::render_map;
use s2rc_core::dataio::{
    generate_synthetic, load_dataset, save_dataset, write_atomic, Coord, SynthSpec, TrainConfig,
};
use s2rc_core::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use s2rc_core::trainer::{
    predict, prepare_experiment, run_experiment, run_repeated, MetricsReport, RepeatedReport,
    PREDICT_BLOCK,
};

#[derive(Parser)]
#[command(name = "s2rc", version, about = "Spectral-spatial GCN classifier for hyperspectral scenes")]
struct Cli {
    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled scene as a dataset directory.
    GenSynth(GenSynthArgs),
    /// Train on a dataset; writes checkpoint, training log, and report.
    Train(DataArgs),
    /// Score a checkpoint on the dataset's held-out test pixels.
    Eval(CheckpointArgs),
    /// Classify every pixel and render the map as a PPM image.
    PredictMap(CheckpointArgs),
    /// Run the full model and the three reduced variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    bands: usize,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    regions_per_class: usize,
    /// Spectral signature smoothness in (0, 1].
    #[arg(long, default_value_t = 0.7)]
    smoothness: f64,
    /// Per-band Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Boundary blending strength in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    boundary_mix: f64,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (header.json + cube.bin + labels.bin).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (header.json + cube.bin + labels.bin).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory (header.json + cube.bin + labels.bin).
    #[arg(long)]
    data: PathBuf,
    /// Seeds to average over, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3, 4, 5])]
    seeds: Vec<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(args) => gen_synth(&cli, args),
        Command::Train(args) => train(&cli, args),
        Command::Eval(args) => eval(&cli, args),
        Command::PredictMap(args) => predict_map(&cli, args),
        Command::Ablate(args) => ablate(&cli, args),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli.out.as_deref().context("this subcommand needs --out <dir>")?;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn gen_synth(cli: &Cli, args: &GenSynthArgs) -> Result<()> {
    let spec = SynthSpec {
        height: args.height,
        width: args.width,
        bands: args.bands,
        classes: args.classes,
        regions_per_class: args.regions_per_class,
        smoothness: args.smoothness,
        sigma: args.sigma,
        boundary_mix: args.boundary_mix,
        seed: cli.seed.unwrap_or(1),
    };
    let dir = out_dir(cli)?;
    let cube = generate_synthetic(&spec)?;
    save_dataset(&cube, dir)?;
    println!(
        "wrote {}x{}x{} scene with {} classes to {}",
        cube.height,
        cube.width,
        cube.bands,
        cube.classes,
        dir.display()
    );
    Ok(())
}

fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

fn train(cli: &Cli, args: &DataArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli)?;
    let cube = load_dataset(&args.data)?;
    let mut arts = run_experiment(&cfg, &cube)?;

    let log_path = dir.join("train.log");
    write_atomic(&log_path, (arts.log.join("\n") + "\n").as_bytes())?;
    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&mut arts.state, &ckpt_path)?;
    let report_path = dir.join("report.json");
    write_atomic(&report_path, report_json(&arts.report).as_bytes())?;

    let r = &arts.report;
    println!(
        "trained {} epochs on {} ({} test pixels)",
        cfg.epochs,
        args.data.display(),
        arts.test_coords.len()
    );
    println!(
        "OA {:.4}  AA {:.4}  kappa {:.4}  macro-F1 {:.4}  ({:.1}s)",
        r.oa, r.aa, r.kappa, r.f1_macro, r.wall_clock_seconds
    );
    println!(
        "wrote {}, {}, {}",
        ckpt_path.display(),
        log_path.display(),
        report_path.display()
    );
    Ok(())
}

/// Loads a checkpoint and the dataset it will be scored on, verifying that
/// the model was built for scenes of this shape.
fn load_pair(args: &CheckpointArgs) -> Result<(s2rc_core::trainer::TrainerState, s2rc_core::dataio::HsiCube)> {
    let state = load_checkpoint(&args.checkpoint)?;
    let cube = load_dataset(&args.data)?;
    if state.model.classes != cube.classes {
        bail!(
            "config: checkpoint was trained for {} classes but {} has {}",
            state.model.classes,
            args.data.display(),
            cube.classes
        );
    }
    if state.model.bands != cube.bands {
        bail!(
            "config: checkpoint was trained on {} bands but {} has {}",
            state.model.bands,
            args.data.display(),
            cube.bands
        );
    }
    Ok((state, cube))
}

fn eval(cli: &Cli, args: &CheckpointArgs) -> Result<()> {
    let (mut state, cube) = load_pair(args)?;
    let setup = prepare_experiment(&state.config, &cube)?;
    let preds = predict(
        &mut state,
        &setup.normalized,
        &setup.projected,
        &setup.batch,
        &setup.test_coords,
        PREDICT_BLOCK,
    )?;
    let truth: Vec<u16> =
        setup.test_coords.iter().map(|c| cube.label(c.row, c.col)).collect();
    let report = s2rc_core::trainer::compute_metrics(&preds, &truth, cube.classes)?;
    let json = report_json(&report);
    print!("{json}");
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("report.json"), json.as_bytes())?;
    }
    Ok(())
}

fn predict_map(cli: &Cli, args: &CheckpointArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let (mut state, cube) = load_pair(args)?;
    let setup = prepare_experiment(&state.config, &cube)?;
    let queries: Vec<Coord> = (0..cube.height)
        .flat_map(|r| (0..cube.width).map(move |c| Coord::new(r, c)))
        .collect();
    let preds = predict(
        &mut state,
        &setup.normalized,
        &setup.projected,
        &setup.batch,
        &queries,
        PREDICT_BLOCK,
    )?;
    let ppm = render_map(&preds, cube.height, cube.width, &cube.palette)?;
    let path = dir.join("map.ppm");
    write_atomic(&path, &ppm)?;
    println!("wrote {} ({}x{} pixels)", path.display(), cube.width, cube.height);
    Ok(())
}

struct Variant {
    name: &'static str,
    description: &'static str,
    apply: fn(&mut TrainConfig),
}

const VARIANTS: [Variant; 4] = [
    Variant { name: "full", description: "complete model", apply: |_| {} },
    Variant {
        name: "I",
        description: "no spectral-spatial fusion",
        apply: |c| c.no_fusion = true,
    },
    Variant { name: "II", description: "no channel gating", apply: |c| c.no_se = true },
    Variant {
        name: "III",
        description: "no reliable contrastive loss",
        apply: |c| c.no_contrast = true,
    },
];

fn ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let base = load_config(cli)?;
    let cube = load_dataset(&args.data)?;
    let mut rows: Vec<(&'static str, &'static str, RepeatedReport)> = Vec::new();
    for v in &VARIANTS {
        let mut cfg = base.clone();
        (v.apply)(&mut cfg);
        let rep = run_repeated(&cfg, &cube, &args.seeds)?;
        rows.push((v.name, v.description, rep));
    }

    let mut table = String::new();
    writeln!(table, "variant  OA              AA              kappa           note").unwrap();
    let mut csv = String::from("variant,oa_mean,oa_std,aa_mean,aa_std,kappa_mean,kappa_std\n");
    for (name, desc, rep) in &rows {
        writeln!(
            table,
            "{:<8} {:.4} ± {:.4} {:.4} ± {:.4} {:.4} ± {:.4} {}",
            name, rep.oa.mean, rep.oa.std, rep.aa.mean, rep.aa.std, rep.kappa.mean,
            rep.kappa.std, desc
        )
        .unwrap();
        writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            name, rep.oa.mean, rep.oa.std, rep.aa.mean, rep.aa.std, rep.kappa.mean, rep.kappa.std
        )
        .unwrap();
    }
    print!("{table}");
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("ablation.csv"), csv.as_bytes())?;
        println!("wrote {}", dir.join("ablation.csv").display());
    }
    Ok(())
}
