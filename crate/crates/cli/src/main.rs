use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dascd_core::config::DataSource;
use dascd_core::data::{
    self, dataset_stats, load_counts, stats_from_counts, Manifest, ManifestEntry, Split,
};
use dascd_core::metrics::{linear_grid, threshold_sweep_many};
use dascd_core::train::{
    distance_maps, evaluate, gradcheck, load_dataset, predict, train, Checkpoint, Dataset,
};
use dascd_core::RunConfig;

#[derive(Parser)]
#[command(
    name = "dascd",
    version,
    about = "Dual-attention Siamese change detection"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (file or directory, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra configuration entries, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train,
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Overrides the checkpoint's threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also print one line per image.
        #[arg(long)]
        per_image: bool,
    },
    /// Write distance and change maps for one image pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        t0: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Changed / unchanged pixel counts per split.
    Stats {
        /// Image manifest (t0, t1, label, split per line).
        #[arg(long, conflicts_with = "counts")]
        manifest: Option<PathBuf>,
        /// Precomputed counts (split, changed, unchanged per line).
        #[arg(long)]
        counts: Option<PathBuf>,
    },
    /// F1 over a grid of thresholds.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0.0)]
        lo: f64,
        #[arg(long, default_value_t = 2.5)]
        hi: f64,
        #[arg(long, default_value_t = 21)]
        steps: usize,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        probes: usize,
    },
    /// Write the synthetic dataset as PNGs plus a manifest.
    Gen,
}

fn resolve_config(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_kv(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    for entry in &common.set {
        let (k, v) = entry
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {entry:?}"))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A checkpoint plus the configuration its data should come from.
fn open_checkpoint(common: &Common, path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ck =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = resolve_config(common, ck.config.clone())?;
    Ok((ck, cfg))
}

fn split_of(data: &Dataset, split: Split) -> Result<&[dascd_core::Example]> {
    let s = data.split(split);
    if s.is_empty() {
        bail!("the {split} split is empty");
    }
    Ok(s)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = resolve_config(common, RunConfig::default())?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("dascd.ckpt"));
    let data = load_dataset(&cfg)?;
    eprintln!(
        "training on {} pairs ({} val, {} test), {} epochs",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cfg.epochs
    );
    let ck = train(&cfg, &data, |r| {
        eprintln!("epoch {:>3}  loss {:.6}", r.epoch, r.mean_loss)
    })?;
    eprintln!(
        "class weights w1={:.6} w2={:.6}",
        ck.config.loss.w1, ck.config.loss.w2
    );
    ck.save(&out)
        .with_context(|| format!("writing {}", out.display()))?;
    if !data.val.is_empty() {
        let r = evaluate(&ck.model, &data.val, ck.config.threshold())?;
        println!("val {}", r.overall.record());
    }
    eprintln!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    split: Split,
    t: Option<f64>,
    per_image: bool,
) -> Result<()> {
    let (ck, cfg) = open_checkpoint(common, checkpoint)?;
    let data = load_dataset(&cfg)?;
    let t = t.unwrap_or_else(|| cfg.threshold());
    let r = evaluate(&ck.model, split_of(&data, split)?, t)?;
    let mut text = format!("split={split} threshold={t} {}\n", r.overall.record());
    if per_image {
        for (i, m) in r.per_image.iter().enumerate() {
            text.push_str(&format!("image={i} {}\n", m.record()));
        }
    }
    write_or_print(common.out.as_deref(), &text)
}

fn cmd_predict(
    common: &Common,
    checkpoint: &Path,
    t0: &Path,
    t1: &Path,
    t: Option<f64>,
) -> Result<()> {
    let (ck, cfg) = open_checkpoint(common, checkpoint)?;
    let pair = data::ImagePair::new(data::load_rgb(t0)?, data::load_rgb(t1)?)
        .with_context(|| format!("pairing {} with {}", t0.display(), t1.display()))?;
    let t = t.unwrap_or_else(|| cfg.threshold());
    let p = predict(&ck.model, &pair, t)?;
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("prediction"));
    p.write(&dir)?;
    println!(
        "changed={} of {} pixels ({:.4}) threshold={t} written to {}",
        p.change.positives(),
        p.change.mask().len(),
        p.change.positive_rate(),
        dir.display()
    );
    Ok(())
}

fn cmd_stats(common: &Common, manifest: Option<&Path>, counts: Option<&Path>) -> Result<()> {
    let table = match (manifest, counts) {
        (Some(m), None) => dataset_stats(&Manifest::load(m)?)?,
        (None, Some(c)) => stats_from_counts(&load_counts(c)?),
        _ => bail!("pass exactly one of --manifest or --counts"),
    };
    write_or_print(common.out.as_deref(), &table.to_string())
}

fn cmd_sweep(
    common: &Common,
    checkpoint: &Path,
    split: Split,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<()> {
    let (ck, cfg) = open_checkpoint(common, checkpoint)?;
    if !(lo >= 0.0 && hi > lo) || steps < 2 {
        bail!("sweep needs 0 ≤ lo < hi and at least 2 steps");
    }
    let data = load_dataset(&cfg)?;
    let maps = distance_maps(&ck.model, split_of(&data, split)?)?;
    let table = threshold_sweep_many(&maps, &linear_grid(lo, hi, steps))?;
    write_or_print(common.out.as_deref(), &table.to_string())
}

fn cmd_gradcheck(common: &Common, probes: usize) -> Result<()> {
    let cfg = resolve_config(common, RunConfig::default())?;
    let r = gradcheck(&cfg, probes, cfg.seed)?;
    let mut text = String::new();
    for p in &r.probes {
        let c = &p.comparison;
        text.push_str(&format!(
            "{}[{}] analytic={:.9e} numeric={:.9e} rel={:.3e}\n",
            p.param, p.index, c.analytic, c.numeric, c.relative
        ));
    }
    text.push_str(&format!(
        "probes={} max_rel={:.3e} max_abs={:.3e} {}\n",
        r.probes.len(),
        r.max_relative,
        r.max_absolute,
        if r.passed { "ok" } else { "FAILED" }
    ));
    write_or_print(common.out.as_deref(), &text)?;
    if !r.passed {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_gen(common: &Common) -> Result<()> {
    let cfg = resolve_config(common, RunConfig::default())?;
    if matches!(cfg.data, DataSource::Manifest(_)) {
        bail!("gen needs a synthetic configuration, not a manifest");
    }
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("synthetic"));
    let data = load_dataset(&cfg)?;
    let mut manifest = Manifest::default();
    for split in Split::ALL {
        let sub = dir.join(split.as_str());
        fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        for (i, ex) in data.split(split).iter().enumerate() {
            let entry = ManifestEntry {
                t0: sub.join(format!("{i:04}_t0.png")),
                t1: sub.join(format!("{i:04}_t1.png")),
                label: sub.join(format!("{i:04}_label.png")),
                split,
            };
            data::save_rgb(&entry.t0, &ex.pair.t0)?;
            data::save_rgb(&entry.t1, &ex.pair.t1)?;
            data::save_label(&entry.label, &ex.label)?;
            manifest.entries.push(entry);
        }
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest.to_text(&dir))?;
    println!(
        "wrote {} pairs to {} (train {}, val {}, test {})",
        manifest.entries.len(),
        path.display(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Train => cmd_train(c),
        Command::Eval {
            checkpoint,
            split,
            threshold,
            per_image,
        } => cmd_eval(c, &checkpoint, split, threshold, per_image),
        Command::Predict {
            checkpoint,
            t0,
            t1,
            threshold,
        } => cmd_predict(c, &checkpoint, &t0, &t1, threshold),
        Command::Stats { manifest, counts } => cmd_stats(c, manifest.as_deref(), counts.as_deref()),
        Command::Sweep {
            checkpoint,
            split,
            lo,
            hi,
            steps,
        } => cmd_sweep(c, &checkpoint, split, lo, hi, steps),
        Command::Gradcheck { probes } => cmd_gradcheck(c, probes),
        Command::Gen => cmd_gen(c),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
