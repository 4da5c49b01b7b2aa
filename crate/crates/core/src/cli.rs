//! Command-line front end. `main` only maps the result to an exit code.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::density::{render_density, DotMap};
use crate::error::{Error, Result};
use crate::eval::{self, RunOptions, Variant};
use crate::grid::DenseGrid;
use crate::model::{load_checkpoint, predict_maps, save_checkpoint, CheckpointMeta};
use crate::pgm;
use crate::synth::{generate_dataset, split_dataset, DatasetManifest, DatasetSplits};
use crate::trainer::{train_with, write_history, TrainMode, TrainingSet};

#[derive(Debug, Parser)]
#[command(name = "crowdcount", version, about = "Weakly supervised object counting on synthetic multi-shot data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory; defaults to `<out>/data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-shot dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// baseline1, baseline2, matt, matt-symmetric, matt-count-only, matt-mse-only
        #[arg(long)]
        mode: Option<String>,
        /// Training seed (overrides `train.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// test, val, weak or seed
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Baseline1 vs Baseline2 vs MATT over several seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds (overrides `seeds`).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Ablation sweeps over training variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// branches[=LO..HI|=K,K,..], symmetry, lossterms or fully.
        #[arg(long)]
        sweep: String,
        /// Comma-separated seeds (overrides `seeds`).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Write prediction, ground truth and auxiliary maps as 16-bit PGM.
    Render {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// seed, or SPLIT:INDEX such as test:3
        #[arg(long, default_value = "seed")]
        image: String,
    },
}

struct Resolved {
    cfg: RunConfig,
    data_dir: PathBuf,
}

fn resolve(common: &Common) -> Result<Resolved> {
    let mut cfg = match &common.config {
        Some(p) if !p.exists() => return Err(Error::Config(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    let data_dir = common.data.clone().unwrap_or_else(|| cfg.data_dir());
    Ok(Resolved { cfg, data_dir })
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(|t| t.trim().parse::<u64>().map_err(|_| Error::Config(format!("bad seed {t:?} in --seeds"))))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("--seeds is empty".into()));
    }
    Ok(seeds)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn load_data(r: &Resolved) -> Result<(DatasetManifest, DatasetSplits)> {
    if !r.data_dir.join("manifest.json").exists() {
        return Err(Error::Config(format!(
            "no dataset at {}; run gen-data first",
            r.data_dir.display()
        )));
    }
    let manifest = DatasetManifest::load(&r.data_dir)?;
    let s = r.cfg.splits;
    let splits = split_dataset(&manifest, s.train_weak, s.val, s.test)?;
    Ok((manifest, splits))
}

fn training_set(r: &Resolved, splits: &DatasetSplits) -> Result<TrainingSet> {
    TrainingSet::from_splits(splits, r.cfg.train.density_sigma, r.cfg.train.density_truncation)
}

fn test_set(splits: &DatasetSplits) -> Vec<(DenseGrid, f64)> {
    splits.test.iter().map(|s| (s.image.clone(), s.count)).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => cmd_gen_data(&common),
        Command::Train { common, mode, seed } => cmd_train(&common, mode.as_deref(), seed),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => cmd_eval(&common, &checkpoint, &split),
        Command::Compare { common, seeds } => cmd_compare(&common, seeds.as_deref()),
        Command::Ablate { common, sweep, seeds } => cmd_ablate(&common, &sweep, seeds.as_deref()),
        Command::Render {
            common,
            checkpoint,
            image,
        } => cmd_render(&common, &checkpoint, &image),
    }
}

fn cmd_gen_data(common: &Common) -> Result<()> {
    let r = resolve(common)?;
    r.cfg.scene.validate()?;
    let manifest = generate_dataset(&r.cfg.scene, &r.cfg.dataset, r.cfg.datagen_seed())?;
    manifest.save(&r.data_dir)?;
    eprintln!(
        "wrote {} images (+{} test) to {}",
        1 + manifest.weak_samples.len() + manifest.val_samples.len(),
        manifest.test_samples.len(),
        r.data_dir.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, mode: Option<&str>, seed: Option<u64>) -> Result<()> {
    let mut r = resolve(common)?;
    if let Some(m) = mode {
        r.cfg.train.mode = m.parse()?;
    }
    if let Some(s) = seed {
        r.cfg.train.seed = s;
    }
    r.cfg.validate()?;
    let (_, splits) = load_data(&r)?;
    let data = training_set(&r, &splits)?;
    let tc = &r.cfg.train;
    let run_dir = r.cfg.out_dir.join("runs").join(format!("{}-seed{}", tc.mode, tc.seed));
    mkdir(&run_dir)?;
    r.cfg.save(&run_dir.join("config.json"))?;

    let history_path = run_dir.join("history.csv");
    let outcome = train_with(&data, tc, |h| {
        if let Some(last) = h.iter().rev().find(|row| row.split == "train") {
            let val = h.last().and_then(|row| row.mae).map(|m| format!(" val_mae {m:.3}")).unwrap_or_default();
            eprintln!(
                "epoch {:>3} loss {:.4}{}",
                last.epoch,
                last.loss_total.unwrap_or(f64::NAN),
                val
            );
        }
    })?;
    write_history(&history_path, &outcome.history)?;
    if let Some(msg) = outcome.diverged {
        return Err(Error::Diverged {
            step: outcome.steps as usize,
            detail: msg,
        });
    }
    let meta = CheckpointMeta {
        seed: tc.seed,
        step: outcome.steps,
    };
    save_checkpoint(&run_dir.join("final.ckpt"), &outcome.final_params, meta)?;
    save_checkpoint(&run_dir.join("best.ckpt"), &outcome.best_params, meta)?;
    eprintln!("best epoch {}; run directory {}", outcome.best_epoch, run_dir.display());
    println!("{}", run_dir.display());
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<(crate::model::ModelParams, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    load_checkpoint(path)
}

#[derive(Serialize)]
struct EvalLine {
    image: usize,
    predicted: f64,
    ground_truth: f64,
}

fn cmd_eval(common: &Common, checkpoint: &Path, split: &str) -> Result<()> {
    let r = resolve(common)?;
    let (params, _) = load_ckpt(checkpoint)?;
    let (_, splits) = load_data(&r)?;
    let samples: Vec<(DenseGrid, f64)> = match split {
        "test" => test_set(&splits),
        "val" => splits.val.iter().map(|s| (s.image.clone(), s.count)).collect(),
        "weak" => splits.weak.iter().map(|s| (s.image.clone(), s.count)).collect(),
        "seed" => splits.fully.iter().map(|s| (s.image.clone(), s.dots.count() as f64)).collect(),
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let report = eval::evaluate_model(&params, &samples)?;
    mkdir(&r.cfg.out_dir)?;
    write_json(&r.cfg.out_dir.join(format!("eval_{split}.json")), &report)?;
    let lines: Vec<EvalLine> = report
        .per_image
        .iter()
        .enumerate()
        .map(|(i, &(p, g))| EvalLine {
            image: i,
            predicted: p,
            ground_truth: g,
        })
        .collect();
    eval::write_rows(&r.cfg.out_dir.join(format!("eval_{split}.csv")), &lines)?;
    println!(
        "{split}: n {} mae {:.4} mse {:.4} rer {:.2}%",
        report.n_images,
        report.mae,
        report.mse,
        100.0 * report.rer
    );
    Ok(())
}

fn run_and_write(r: &Resolved, variants: &[Variant], seeds: &[u64], name: &str) -> Result<()> {
    let (_, splits) = load_data(r)?;
    let data = training_set(r, &splits)?;
    let test = test_set(&splits);
    let opts = RunOptions {
        record_runtime: r.cfg.record_runtime,
    };
    let rows = eval::run_variants(&data, &test, variants, seeds, opts, |row| match row.mae {
        Some(m) => eprintln!("{:<20} seed {:>3} mae {:.3}", row.method, row.seed, m),
        None => eprintln!("{:<20} seed {:>3} diverged: {}", row.method, row.seed, row.status),
    })?;
    mkdir(&r.cfg.out_dir)?;
    eval::write_rows(&r.cfg.out_dir.join(format!("{name}.csv")), &rows)?;
    let summary = eval::summarize(&rows);
    eval::write_rows(&r.cfg.out_dir.join(format!("{name}_summary.csv")), &summary)?;
    print!("{}", eval::format_summary(&summary));
    Ok(())
}

fn cmd_compare(common: &Common, seeds: Option<&str>) -> Result<()> {
    let mut r = resolve(common)?;
    if let Some(s) = seeds {
        r.cfg.seeds = parse_seeds(s)?;
    }
    r.cfg.validate()?;
    let variants: Vec<Variant> = [TrainMode::Baseline1, TrainMode::Baseline2, TrainMode::Matt]
        .into_iter()
        .map(|m| Variant::mode(&r.cfg.train, m))
        .collect();
    run_and_write(&r, &variants, &r.cfg.seeds.clone(), "compare")
}

/// Parses `LO..HI` (inclusive) or a comma list.
pub fn parse_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad branch range {s:?}; use LO..HI or K,K,.."));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        Ok((lo..=hi).collect())
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
    }
}

/// Variants for one named sweep.
pub fn sweep_variants(base: &crate::trainer::TrainConfig, sweep: &str) -> Result<Vec<Variant>> {
    let (name, arg) = match sweep.split_once('=') {
        Some((n, a)) => (n, Some(a)),
        None => (sweep, None),
    };
    let plain = |m| Variant::mode(base, m);
    let variants = match (name, arg) {
        ("branches", arg) => parse_range(arg.unwrap_or("0..8"))?
            .into_iter()
            .map(|k| {
                let mut v = plain(TrainMode::Matt);
                v.label = format!("matt-k{k}");
                v.config.model = base.model.clone().with_aux_branches(k);
                v
            })
            .collect(),
        ("symmetry", None) => vec![plain(TrainMode::Matt), plain(TrainMode::MattSymmetric)],
        ("lossterms", None) => vec![
            plain(TrainMode::MattCountOnly),
            plain(TrainMode::MattMseOnly),
            plain(TrainMode::Matt),
        ],
        ("fully", None) => {
            let mut on_fully = plain(TrainMode::Matt);
            on_fully.label = "matt-on-fully".into();
            on_fully.config.aux_on_full = true;
            on_fully.drop_weak = true;
            vec![plain(TrainMode::Baseline1), on_fully]
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown sweep {sweep:?}; expected branches[=RANGE], symmetry, lossterms or fully"
            )))
        }
    };
    for v in &variants {
        v.config.validate()?;
    }
    Ok(variants)
}

fn cmd_ablate(common: &Common, sweep: &str, seeds: Option<&str>) -> Result<()> {
    let mut r = resolve(common)?;
    if let Some(s) = seeds {
        r.cfg.seeds = parse_seeds(s)?;
    }
    r.cfg.validate()?;
    let variants = sweep_variants(&r.cfg.train, sweep)?;
    let name = sweep.split('=').next().unwrap_or(sweep);
    run_and_write(&r, &variants, &r.cfg.seeds.clone(), &format!("ablate_{name}"))
}

fn cmd_render(common: &Common, checkpoint: &Path, image: &str) -> Result<()> {
    let r = resolve(common)?;
    let (params, _) = load_ckpt(checkpoint)?;
    let manifest = if r.data_dir.join("manifest.json").exists() {
        DatasetManifest::load(&r.data_dir)?
    } else {
        return Err(Error::Config(format!("no dataset at {}", r.data_dir.display())));
    };
    let (img, dots): (DenseGrid, DotMap) = match image.split_once(':') {
        None if image == "seed" => (manifest.seed_sample.image.clone(), manifest.seed_sample.dots.clone()),
        Some((split, idx)) => {
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Config(format!("bad image index in {image:?}")))?;
            let pool = match split {
                "weak" => &manifest.weak_samples,
                "val" => &manifest.val_samples,
                "test" => &manifest.test_samples,
                _ => return Err(Error::Config(format!("unknown split in {image:?}"))),
            };
            let shot = pool
                .get(idx)
                .ok_or_else(|| Error::Config(format!("{image:?} is out of range ({} images)", pool.len())))?;
            (shot.image.clone(), shot.hidden_dots.clone())
        }
        None => return Err(Error::Config(format!("bad --image {image:?}; use seed or SPLIT:INDEX"))),
    };
    let gt = render_density(&dots, r.cfg.train.density_sigma, r.cfg.train.density_truncation)?;
    let (pred, aux) = predict_maps(&params, &img)?;
    let dir = &r.cfg.out_dir.join("render");
    mkdir(dir)?;
    let stem = image.replace(':', "_");
    let mut written = vec![
        (dir.join(format!("{stem}_prediction.pgm")), pred),
        (dir.join(format!("{stem}_ground_truth.pgm")), gt.grid().clone()),
    ];
    for (k, a) in aux.into_iter().enumerate() {
        written.push((dir.join(format!("{stem}_aux{}.pgm", k + 1)), a));
    }
    for (path, grid) in &written {
        let scale = pgm::write_scaled(path, grid)?;
        println!("{} sum {:.3}", path.display(), scale.sum);
    }
    Ok(())
}
