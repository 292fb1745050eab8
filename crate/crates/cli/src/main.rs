//! `caim`: data generation, training, evaluation, inference, benchmarking and map export.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use caim_core::bench::{bench_encoder, bench_inference, count_params, estimate_flops, BenchReport};
use caim_core::data::{
    generate_synthetic_scene, list_cubes, load_cube, load_dataset, load_label_maps, save_cube, save_prediction_maps,
    split_dataset, tile_samples, ChangeLabels, SceneConfig, TsiCube,
};
use caim_core::model::CaimNet;
use caim_core::render::export_maps;
use caim_core::train::{evaluate, predict_maps, train, MetricsAccumulator, MetricsReport};
use caim_core::{CaimError, Result, RunConfig};

/// Extension of prediction dumps written by `infer`.
const PRED_EXT: &str = "pred";

#[derive(Parser)]
#[command(name = "caim", version, about = "Time-series change detection: change moment first, change area second")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic labelled cubes.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `generate.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on the patches of a cube directory (8:1:1 split).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the checkpoint, log and test report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint, or saved predictions, against labelled cubes.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `infer` outputs.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict change maps for every cube of a directory.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time stacked against per-date encoding and count parameters and FLOPs.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        t: usize,
        #[arg(long, default_value_t = 8)]
        b: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Samples per epoch for the epoch-equivalent estimate.
        #[arg(long, default_value_t = 200)]
        epoch_samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render area and moment PNGs from `infer` outputs and labelled cubes.
    ExportMaps {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out, count } => gen_data(&load_config(config.as_deref(), None)?, &out, count),
        Command::Train { config, data, out, epochs } => {
            let mut cfg = load_config(config.as_deref(), None)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.validate()?;
            }
            let data = data_dir(data, &cfg)?;
            let out = out.or_else(|| cfg.paths.output_dir.clone()).unwrap_or_else(|| PathBuf::from("run"));
            train_cmd(&cfg, &data, &out)
        }
        Command::Eval { config, checkpoint, predictions, data, out } => {
            let cfg = load_config(config.as_deref(), checkpoint.as_deref())?;
            let data = data_dir(data, &cfg)?;
            let report = match (&checkpoint, &predictions) {
                (Some(ck), _) => eval_checkpoint(&cfg, ck, &data)?,
                (None, Some(pred)) => eval_predictions(&pred_dir(pred)?, &data)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            let text = format!("{}{}", cfg.provenance()?, report.to_text());
            print!("{text}");
            if let Some(path) = out {
                fs::write(path, &text)?;
            }
            Ok(())
        }
        Command::Infer { config, checkpoint, data, out } => {
            let cfg = load_config(config.as_deref(), Some(&checkpoint))?;
            let data = data_dir(data, &cfg)?;
            infer_cmd(&cfg, &checkpoint, &data, &out)
        }
        Command::Bench { config, t, b, size, repeats, epoch_samples, out } => {
            let cfg = load_config(config.as_deref(), None)?;
            bench_cmd(&cfg, t, b, size, repeats, epoch_samples, out.as_deref())
        }
        Command::ExportMaps { predictions, data, out } => {
            let cfg = load_config(None, None)?;
            let data = data_dir(data, &cfg)?;
            export_cmd(&pred_dir(&predictions)?, &data, &out)
        }
    }
}

/// Explicit `--config`, else the configuration saved next to the checkpoint, else defaults;
/// `CAIM_SEED` applies last.
fn load_config(path: Option<&Path>, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (path, checkpoint.map(config_beside)) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.is_file() => RunConfig::load(&p)?,
        _ => RunConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_beside(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| CaimError::Config("no data directory: pass --data or set paths.data_dir".into()))?;
    if !dir.is_dir() {
        return Err(CaimError::Config(format!("data directory {} does not exist", dir.display())));
    }
    Ok(dir)
}

fn pred_dir(dir: &Path) -> Result<PathBuf> {
    if !dir.is_dir() {
        return Err(CaimError::Config(format!("prediction directory {} does not exist", dir.display())));
    }
    Ok(dir.to_path_buf())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn gen_data(cfg: &RunConfig, out: &Path, count: Option<usize>) -> Result<()> {
    let count = count.unwrap_or(cfg.generate.count);
    fs::create_dir_all(out)?;
    for i in 0..count {
        let scene = SceneConfig { seed: cfg.scene.seed.wrapping_add(i as u64), ..cfg.scene.clone() };
        let (cube, _, labels) = generate_synthetic_scene(&scene)?;
        save_cube(&out.join(format!("scene_{i:05}.caim")), &cube, Some(&labels))?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data)?.into_iter().map(|(_, s)| s);
    let patches = tile_samples(dataset, cfg.train.patch, cfg.train.stride)?;
    let (tr, va, te) = split_dataset(patches, (8, 1, 1), cfg.train.seed)?;
    fs::create_dir_all(out)?;
    let checkpoint = cfg.paths.checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
    println!("patches: train {} val {} test {}", tr.len(), va.len(), te.len());

    let mut net = CaimNet::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut log = BufWriter::new(File::create(out.join("train.log"))?);
    let mut log_err = None;
    let outcome = train(&mut net, &tr, &va, &cfg.train, &cfg.loss, |line| {
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    net.store.save(&checkpoint)?;
    cfg.save(&config_beside(&checkpoint))?;
    let ev = evaluate(&net, &te, cfg.train.batch_size, None)?;
    let text = format!(
        "{}# best_epoch = {}\n{}",
        cfg.provenance()?,
        outcome.best_epoch,
        ev.report.to_text()
    );
    fs::write(out.join("test_metrics.txt"), text)?;
    println!(
        "best epoch {}; test area kappa {:.2}, moment kappa {:.2}; checkpoint {}",
        outcome.best_epoch,
        ev.report.area.kappa,
        ev.report.moment.kappa,
        checkpoint.display()
    );
    Ok(())
}

fn load_net(cfg: &RunConfig, checkpoint: &Path) -> Result<CaimNet<f32>> {
    if !checkpoint.is_file() {
        return Err(CaimError::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    CaimNet::from_checkpoint(cfg.model.clone(), checkpoint)
}

/// Whole cubes are scored one at a time, exactly as `infer` predicts them.
fn eval_checkpoint(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<MetricsReport> {
    let net = load_net(cfg, checkpoint)?;
    let samples: Vec<_> = load_dataset(data)?.into_iter().map(|(_, s)| s).collect();
    Ok(evaluate(&net, &samples, 1, None)?.report)
}

fn eval_predictions(pred: &Path, data: &Path) -> Result<MetricsReport> {
    let mut acc: Option<MetricsAccumulator> = None;
    for path in list_cubes(data)? {
        let (_, labels) = load_cube(&path)?;
        let labels = labels.ok_or_else(|| CaimError::Format(format!("{} has no labels", path.display())))?;
        let dump = pred.join(format!("{}.{PRED_EXT}", stem(&path)));
        let maps = load_label_maps(&dump)?;
        if (maps.height, maps.width, maps.t_len) != (labels.height, labels.width, labels.t_len) {
            return Err(CaimError::InvalidInput(format!("{} does not match {}", dump.display(), path.display())));
        }
        acc.get_or_insert_with(|| MetricsAccumulator::new(labels.t_len)).add(&maps.moment, &maps.area, &labels)?;
    }
    acc.ok_or_else(|| CaimError::InvalidInput(format!("no cubes in {}", data.display())))?.report()
}

fn infer_cmd(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let net = load_net(cfg, checkpoint)?;
    let files = list_cubes(data)?;
    if files.is_empty() {
        return Err(CaimError::InvalidInput(format!("no cubes in {}", data.display())));
    }
    fs::create_dir_all(out)?;
    for path in &files {
        let (cube, _): (TsiCube, _) = load_cube(path)?;
        let maps = predict_maps(&net, &[&cube], 1)?;
        save_prediction_maps(&out.join(format!("{}.{PRED_EXT}", stem(path))), &maps[0])?;
    }
    println!("wrote {} prediction maps to {}", files.len(), out.display());
    Ok(())
}

fn bench_cmd(cfg: &RunConfig, t: usize, b: usize, size: usize, repeats: usize, epoch_samples: usize, out: Option<&Path>) -> Result<()> {
    let seed = cfg.train.seed;
    let net = CaimNet::<f32>::new(cfg.model.clone(), seed)?;
    let inference = bench_inference(&net, 1, size, size, repeats, seed)?;
    let encoder = bench_encoder(&cfg.model, t, b, size, size, repeats, seed)?;
    let report = BenchReport {
        params: count_params(&net.store),
        flops: estimate_flops(&cfg.model, size, size),
        encoder: vec![encoder],
        epoch_samples,
        inference_s: Some(inference),
    };
    let text = format!("{}{}", cfg.provenance()?, report.to_text());
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, text)?;
    }
    Ok(())
}

fn export_cmd(pred: &Path, data: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut n = 0;
    for path in list_cubes(data)? {
        let (_, labels) = load_cube(&path)?;
        let truth: ChangeLabels =
            labels.ok_or_else(|| CaimError::Format(format!("{} has no labels", path.display())))?;
        let name = stem(&path);
        let maps = load_label_maps(&pred.join(format!("{name}.{PRED_EXT}")))?;
        export_maps(&maps, &truth, out, &name)?;
        n += 1;
    }
    println!("wrote {} map pairs to {}", n, out.display());
    Ok(())
}
