use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Parser, Subcommand};
use serde_json::json;
use tmsnet_core::checkpoint::{load_checkpoint, save_checkpoint};
use tmsnet_core::corruption::{corrupt_volume, CorruptionSpec, Method, Views};
use tmsnet_core::model::{TmsNet, Variant};
use tmsnet_core::qc::{default_grid, qc_experiment, summarize, to_csv};
use tmsnet_core::quality::DEFAULT_TAU;
use tmsnet_core::segment::{segment_volume, DEFAULT_BATCH};
use tmsnet_core::volume::{read_mask, read_volume, write_mask, write_volume};
use tmsnet_core::ViewAxis;
use tmsnet_workbench::dataset::{load_split, make_dataset, Split};
use tmsnet_workbench::experiment::{
    ablation, ablation_csv, eval_csv, evaluate, mean, scatter_svg, train_from_dir, TrainSpec, ABLATION_EPS,
};

#[derive(Parser)]
#[command(name = "tmsnet", version, about = "Multi-view segmentation with run-time quality control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with train/val/test splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        val: usize,
        #[arg(long)]
        test: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a network on a dataset's train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "shared")]
        variant: Variant,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "axial")]
        standard_view: ViewAxis,
    },
    /// Segment one volume from all three views.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a corrupted copy of a volume.
    #[command(group(ArgGroup::new("magnitude").required(true).args(["eps", "sigma"])))]
    Corrupt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value = "three")]
        views: Views,
        /// Labels for the attack loss; defaults to the network's own
        /// segmentation.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice/Jaccard table of a dataset split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the quality-control experiment grid.
    Qc {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "default")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train shared and independent-encoder networks and compare them under
    /// engineered noise.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "axial")]
        standard_view: ViewAxis,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_net(ckpt: &Path) -> Result<TmsNet<f32>> {
    load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            train,
            val,
            test,
            seed,
            size,
        } => {
            let m = make_dataset(train, val, test, seed, size, &out)?;
            println!("wrote {} samples of {size}^3 to {}", m.samples.len(), out.display());
        }
        Command::Train {
            data,
            out,
            variant,
            channels,
            epochs,
            seed,
            standard_view,
        } => {
            let spec = TrainSpec {
                variant,
                channels,
                epochs,
                seed,
                standard_view,
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let (net, reports) = train_from_dir(&data, &spec, Some(&out.join("train_log.csv")))?;
            save_checkpoint(&net, &out)?;
            if let Some(r) = reports.last() {
                println!("epoch {}: losses {:?}, val dice {:?}", r.epoch, r.phase_losses, r.val_dice);
            }
        }
        Command::Segment { ckpt, volume, out } => {
            let net = load_net(&ckpt)?;
            let v = read_volume(&volume)?;
            let seg = segment_volume(&net, &v, DEFAULT_BATCH)?;
            let orientation = v.orientation();
            for view in ViewAxis::ALL {
                let p = seg.probs[view.index()].reslice(orientation);
                write_volume(&p, &out.join(format!("prob_{view}.json")))?;
            }
            write_volume(&seg.aggregated.reslice(orientation), &out.join("aggregate.json"))?;
            let otsu = seg.threshold();
            write_mask(&otsu.mask.reslice(orientation), &out.join("mask.json"))?;
            let report = match seg.consistency(DEFAULT_TAU) {
                Ok(r) => serde_json::to_value(r)?,
                Err(e) => json!({ "error": e.to_string() }),
            };
            let info = json!({
                "consistency": report,
                "otsu_threshold": otsu.threshold,
                "otsu_degenerate": otsu.degenerate,
            });
            write(&out.join("report.json"), serde_json::to_string_pretty(&info)?)?;
            println!("wrote segmentation of {} to {}", volume.display(), out.display());
        }
        Command::Corrupt {
            ckpt,
            volume,
            method,
            eps,
            sigma,
            views,
            mask,
            seed,
            out,
        } => {
            let spec = match (method, eps, sigma) {
                (Method::Rician, _, Some(s)) => CorruptionSpec::rician(s, seed),
                (Method::Rician, _, None) => bail!("rician noise takes --sigma"),
                (Method::Fgsm, Some(e), None) => CorruptionSpec::fgsm(e, views),
                (Method::Bim, Some(e), None) => CorruptionSpec::bim(e, views),
                _ => bail!("{method} takes --eps"),
            };
            let net = load_net(&ckpt)?;
            let v = read_volume(&volume)?;
            let (labels, label_source) = match &mask {
                Some(p) => (read_mask(p)?, p.display().to_string()),
                None => {
                    let seg = segment_volume(&net, &v, DEFAULT_BATCH)?;
                    (seg.threshold().mask.reslice(v.orientation()), "prediction".to_string())
                }
            };
            let corrupted = corrupt_volume(&net, &v, &labels, &spec, DEFAULT_BATCH)?;
            write_volume(&corrupted, &out)?;
            let provenance = json!({
                "source": volume.display().to_string(),
                "checkpoint": ckpt.display().to_string(),
                "spec": spec,
                "labels": label_source,
            });
            let prov_path = out.with_extension("provenance.json");
            write(&prov_path, serde_json::to_string_pretty(&provenance)?)?;
            println!("wrote {} and {}", out.display(), prov_path.display());
        }
        Command::Evaluate { ckpt, data, split, out } => {
            let net = load_net(&ckpt)?;
            let cases = load_split(&data, split)?;
            if cases.is_empty() {
                bail!("split {} of {} is empty", split.name(), data.display());
            }
            let rows = evaluate(&net, &cases)?;
            write(&out, eval_csv(&rows))?;
            println!(
                "mean dice {:.4}, mean jaccard {:.4} over {} volumes",
                mean(rows.iter().map(|r| r.dice)),
                mean(rows.iter().map(|r| r.jaccard)),
                rows.len()
            );
        }
        Command::Qc {
            ckpt,
            data,
            grid,
            out,
            summary,
            split,
            tau,
            seed,
        } => {
            if grid != "default" {
                bail!("unknown grid {grid:?}; only \"default\" is defined");
            }
            let net = load_net(&ckpt)?;
            let cases = load_split(&data, split)?;
            if cases.is_empty() {
                bail!("split {} of {} is empty", split.name(), data.display());
            }
            let rows = qc_experiment(&net, &cases, &default_grid(seed), tau)?;
            write(&out, to_csv(&rows))?;
            let s = summarize(&rows)?;
            write(&summary, serde_json::to_string_pretty(&s)?)?;
            let svg = out.with_extension("svg");
            write(&svg, scatter_svg(&rows))?;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "r = {} (p = {}), MAE = {:.4}, AUC = {} over {} rows",
                show(s.r),
                s.p.map_or("n/a".to_string(), |p| format!("{p:.3e}")),
                s.mae,
                show(s.auc),
                s.n
            );
        }
        Command::Ablate {
            data,
            out,
            channels,
            epochs,
            seed,
            standard_view,
        } => {
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut nets = Vec::new();
            for variant in [Variant::Shared, Variant::Independent3] {
                let spec = TrainSpec {
                    variant,
                    channels,
                    epochs,
                    seed,
                    standard_view,
                };
                let dir = out.join(variant.to_string());
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                let (net, _) = train_from_dir(&data, &spec, Some(&dir.join("train_log.csv")))?;
                save_checkpoint(&net, &dir)?;
                nets.push(net);
            }
            let cases = load_split(&data, Split::Test)?;
            if cases.is_empty() {
                bail!("test split of {} is empty", data.display());
            }
            let rows = ablation(&nets[0], &nets[1], &cases, &ABLATION_EPS)?;
            write(&out.join("ablation.csv"), ablation_csv(&rows))?;
            println!("wrote {}", out.join("ablation.csv").display());
        }
    }
    Ok(())
}
