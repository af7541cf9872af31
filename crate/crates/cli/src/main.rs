use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use tunet::complexity::complexity_of;
use tunet::data::{
    image_to_tensor, list_pngs, read_gray, read_rgb, split_dataset, tile_pair, DatasetDir,
    Normalization, SplitManifest, TILE_SIZE,
};
use tunet::encoder::ModelConfig;
use tunet::harness::{self, Checkpoint, DiskSplit, RunConfig, Trainer};
use tunet::render::{mask_from_image, mask_image, probability_image, render_map};

#[derive(Parser)]
#[command(
    name = "tunet",
    version,
    about = "Triplet-encoder change detection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile scenes from <input>/{A,B,label} and write a split manifest.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = TILE_SIZE)]
        tile: usize,
        #[arg(long, default_value_t = 0, env = "TUNET_SEED")]
        seed: u64,
        /// train:val:test ratios
        #[arg(long, default_value = "7:1:2")]
        ratios: String,
        /// explicit train,val,test tile counts
        #[arg(long)]
        counts: Option<String>,
    },
    /// Train from a key=value config file.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// extra key=value overrides
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// continue from a checkpoint instead of starting fresh
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one manifest split; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a change mask for one image pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// optional grayscale probability map
        #[arg(long)]
        probabilities: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Colour-code a predicted mask against its label.
    Render {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP counts for one variant.
    Complexity {
        #[arg(long, default_value = "Ours/T-UNet")]
        variant: String,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        width_divisor: usize,
    },
    /// List the ablation variants.
    Variants,
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split([':', ','])
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad ratios `{s}`"))?;
    let [a, b, c] = v[..] else {
        bail!("expected three ratios, got `{s}`")
    };
    Ok([a, b, c])
}

fn parse_counts(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split([':', ','])
        .map(|x| x.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad counts `{s}`"))?;
    let [a, b, c] = v[..] else {
        bail!("expected three counts, got `{s}`")
    };
    Ok([a, b, c])
}

fn find_variant(label: &str, size: usize) -> Result<ModelConfig> {
    ModelConfig::ablation_grid((size, size))
        .into_iter()
        .find(|(l, _)| l.eq_ignore_ascii_case(label))
        .map(|(_, c)| c)
        .with_context(|| format!("unknown variant `{label}`; see `tunet variants`"))
}

fn prepare(
    input: &Path,
    out: &Path,
    tile: usize,
    seed: u64,
    ratios: &str,
    counts: Option<&str>,
) -> Result<()> {
    let ratios = parse_ratios(ratios)?;
    let counts = counts.map(parse_counts).transpose()?;
    let dest = DatasetDir::new(out);
    let mut ids = Vec::new();
    for stem in list_pngs(&input.join("A"))? {
        let file = format!("{stem}.png");
        let a = read_rgb(&input.join("A").join(&file))?;
        let b = read_rgb(&input.join("B").join(&file))?;
        let label = read_gray(&input.join("label").join(&file))?;
        for t in tile_pair(&a, &b, &label, tile, &stem)? {
            ids.push(dest.write_tile(&t)?);
        }
    }
    if ids.is_empty() {
        bail!("no scenes found under {}", input.join("A").display());
    }
    let manifest = split_dataset(&ids, ratios, seed, counts)?;
    let path = out.join("manifest.tsv");
    manifest.save(&path)?;
    let [tr, va, te] = manifest.counts();
    println!(
        "{}",
        json!({ "tiles": ids.len(), "train": tr, "val": va, "test": te, "manifest": path })
    );
    Ok(())
}

fn train(config: Option<&Path>, overrides: &[String], resume: Option<&Path>) -> Result<()> {
    let Some(ck) = resume else {
        let mut cfg = RunConfig::from_file(config.context("--config is required")?)?;
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override `{kv}` is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.apply_env()?;
        cfg.validate()?;
        return print_report(&harness::train(&cfg)?);
    };
    let mut trainer = Trainer::resume(&Checkpoint::load(ck)?)?;
    let cfg = trainer.run.clone();
    let root = cfg
        .data_root
        .clone()
        .context("checkpoint has no data_root")?;
    let manifest = SplitManifest::load(
        &cfg.manifest
            .clone()
            .unwrap_or_else(|| root.join("manifest.tsv")),
    )?;
    let tr = DiskSplit::open(&root, &manifest, "train");
    let va = DiskSplit::open(&root, &manifest, "val");
    let report = trainer.fit(&tr, Some(&va), true, &mut |rec| {
        log::info!("step {} loss {:.5}", rec.step, rec.total);
    })?;
    print_report(&report)
}

fn print_report(report: &harness::TrainReport) -> Result<()> {
    println!(
        "{}",
        json!({
            "steps": report.steps.len(),
            "epochs": report.epochs_completed,
            "final_loss": report.steps.last().map(|s| s.total),
            "best_val_f1": report.best_val_f1,
            "last_checkpoint": report.last_checkpoint,
            "best_checkpoint": report.best_checkpoint,
        })
    );
    Ok(())
}

fn eval(
    checkpoint: &Path,
    split: &str,
    data_root: Option<PathBuf>,
    manifest: Option<PathBuf>,
    threshold: Option<f32>,
    out: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let run = &ck.meta.run;
    let root = data_root
        .or_else(|| run.data_root.clone())
        .context("no data root given")?;
    let manifest_path = manifest
        .or_else(|| run.manifest.clone())
        .unwrap_or_else(|| root.join("manifest.tsv"));
    let manifest = SplitManifest::load(&manifest_path)?;
    let model = ck.to_model()?;
    let ds = DiskSplit::open(&root, &manifest, split);
    let report = harness::evaluate(
        &model,
        &ds,
        threshold.unwrap_or(run.threshold),
        run.batch_size,
    )?;
    let text = serde_json::to_string_pretty(&report.to_json())?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn predict(
    checkpoint: &Path,
    a: &Path,
    b: &Path,
    mask_out: &Path,
    prob_out: Option<&Path>,
    threshold: Option<f32>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    let norm = Normalization::IMAGENET;
    let xa = image_to_tensor(&read_rgb(a)?, &norm)?;
    let xb = image_to_tensor(&read_rgb(b)?, &norm)?;
    let pred = harness::predict(&model, &xa, &xb, threshold.unwrap_or(ck.meta.run.threshold))?;
    mask_image(&pred.mask).save(mask_out)?;
    if let Some(p) = prob_out {
        let img = probability_image(
            pred.mask.width(),
            pred.mask.height(),
            &pred.probability_values()?,
        )?;
        img.save(p)?;
    }
    let changed = pred.mask.data().iter().filter(|&&v| v).count();
    println!("{}", json!({ "changed_pixels": changed, "mask": mask_out }));
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Prepare {
            input,
            out,
            tile,
            seed,
            ratios,
            counts,
        } => prepare(&input, &out, tile, seed, &ratios, counts.as_deref()),
        Command::Train {
            config,
            overrides,
            resume,
        } => train(config.as_deref(), &overrides, resume.as_deref()),
        Command::Eval {
            checkpoint,
            split,
            data_root,
            manifest,
            threshold,
            out,
        } => eval(
            &checkpoint,
            &split,
            data_root,
            manifest,
            threshold,
            out.as_deref(),
        ),
        Command::Predict {
            checkpoint,
            image_a,
            image_b,
            mask,
            probabilities,
            threshold,
        } => predict(
            &checkpoint,
            &image_a,
            &image_b,
            &mask,
            probabilities.as_deref(),
            threshold,
        ),
        Command::Render { pred, target, out } => {
            let p = mask_from_image(&read_gray(&pred)?, 127);
            let t = mask_from_image(&read_gray(&target)?, 127);
            render_map(&p, &t)?.save(&out)?;
            Ok(())
        }
        Command::Complexity {
            variant,
            size,
            width_divisor,
        } => {
            let cfg = find_variant(&variant, size)?.with_width_divisor(width_divisor);
            let r = complexity_of(cfg)?;
            println!(
                "{}",
                json!({
                    "variant": variant,
                    "params": r.params,
                    "params_millions": r.params_millions(),
                    "macs": r.macs,
                    "elementwise": r.elementwise,
                    "flops": r.flops,
                    "gflops": r.gflops(),
                    "input_shape": r.input_shape,
                })
            );
            Ok(())
        }
        Command::Variants => {
            for (label, c) in ModelConfig::ablation_grid((256, 256)) {
                println!(
                    "{label:<12} branches={:<8} mbsscca={:<5} decoder_attention={}",
                    c.branches, c.use_mbsscca, c.use_decoder_attention
                );
            }
            Ok(())
        }
    }
}
