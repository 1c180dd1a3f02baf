use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use facadefixer::bank_store::{self, BankStore};
use facadefixer::curate::{curate, write_manifest};
use facadefixer::dataset;
use facadefixer::evaluate::{evaluate_dirs, write_table};
use facadefixer::fixtures::write_fixture_set;
use facadefixer::gateway::{EmbedInput, ExpertsConfig, Gateway};
use facadefixer::imageio::read_png;
use facadefixer::pipeline::{inspect, NodeStatus, RunOptions};
use facadefixer::recompose::{recompose_cycle, write_sample, RecomposeSettings};
use facadefixer_core::curation::CurationConfig;
use facadefixer_core::geometry::{BinaryMask, DefectCategory, Rle};
use facadefixer_core::hash::{digest_parts, hex};
use facadefixer_core::memory::{Provenance, QuerySpec};
use facadefixer_core::recompose::entry_from_instance;
use serde_json::json;

#[derive(Parser)]
#[command(name = "facadefixer", version, about = "Facade defect inspection with expert ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan and run a pipeline over a dataset, resuming an interrupted run.
    Inspect {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        experts: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Discard previous state in the run directory.
        #[arg(long)]
        fresh: bool,
        /// Stop after the named node is checkpointed (simulates a kill).
        #[arg(long, hide = true)]
        halt_after: Option<String>,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompose every annotated image of a dataset with defects from the bank.
    Recompose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        experts: ExpertsArg,
    },
    /// Filter a dataset by quality, negative concepts and near-duplicates.
    Curate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        experts: ExpertsArg,
    },
    /// Inspect or extend a memory bank.
    Bank {
        #[command(subcommand)]
        command: BankCommand,
    },
    /// Write a synthetic fixture set (dataset, bank, experts and profile).
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        images: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct ExpertsArg {
    /// Experts file; defaults to an all-mock roster.
    #[arg(long)]
    experts: Option<PathBuf>,
}

impl ExpertsArg {
    fn gateway(&self) -> anyhow::Result<Gateway> {
        let cfg = match &self.experts {
            Some(p) => ExpertsConfig::load(p)?,
            None => ExpertsConfig::all_mock(0),
        };
        Ok(Gateway::with_http(cfg)?)
    }
}

#[derive(Subcommand)]
enum BankCommand {
    /// Create an empty bank.
    Init {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = 512)]
        dim: usize,
    },
    /// Add a real defect instance cut from an image.
    Add {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Instance mask: a PNG (non-zero pixels) or an RLE JSON file.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        category: DefectCategory,
        #[arg(long, default_value = "")]
        text: String,
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        experts: ExpertsArg,
    },
    /// Nearest entries to a text or image query.
    Query {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        text: Option<String>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        category: Option<DefectCategory>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[command(flatten)]
        experts: ExpertsArg,
    },
    /// Entry counts per category and provenance.
    Stats {
        #[arg(long)]
        bank: PathBuf,
    },
}

fn read_mask(path: &Path) -> anyhow::Result<BinaryMask> {
    if path.extension().is_some_and(|e| e == "png") {
        let img = read_png(path)?;
        let (w, h) = img.dims();
        Ok(BinaryMask::from_fn(w, h, |x, y| img.get(x, y) != [0, 0, 0]))
    } else {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let rle: Rle = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(BinaryMask::from_rle(&rle)?)
    }
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn bank_command(cmd: BankCommand) -> anyhow::Result<()> {
    match cmd {
        BankCommand::Init { bank, dim } => {
            if bank.join("manifest.json").exists() {
                bail!("{} already holds a bank", bank.display());
            }
            BankStore::open_or_create(&bank, dim)?;
            println!("created {} (dim {dim})", bank.display());
        }
        BankCommand::Add {
            bank,
            image,
            mask,
            category,
            text,
            id,
            experts,
        } => {
            let gateway = experts.gateway()?;
            let store = BankStore::open(&bank)?;
            let pixels = read_png(&image)?;
            let mask = read_mask(&mask)?;
            let id = id.unwrap_or_else(|| {
                let rle = serde_json::to_vec(&mask.to_rle()).unwrap_or_default();
                let h = hex(&digest_parts(&[pixels.as_bytes(), &rle]));
                format!("real-{}", &h[..16])
            });
            let entry = entry_from_instance(
                id,
                &pixels,
                &mask,
                category,
                text,
                &mut |img| {
                    gateway
                        .embed_default(EmbedInput::Image(img))
                        .map_err(|e| facadefixer_core::Error::External(e.to_string()))
                },
                Provenance::Real,
                0,
            )?;
            let id = store.insert(entry)?;
            println!("{id}");
        }
        BankCommand::Query {
            bank,
            text,
            image,
            category,
            k,
            experts,
        } => {
            let gateway = experts.gateway()?;
            let bank = bank_store::load(&bank)?;
            let embedding = match (&text, &image) {
                (Some(t), _) => gateway.embed_default(EmbedInput::Text(t))?,
                (None, Some(p)) => gateway.embed_default(EmbedInput::Image(&read_png(p)?))?,
                (None, None) => bail!("pass --text or --image"),
            };
            let spec = QuerySpec {
                category,
                embedding,
                k,
                region: None,
            };
            let hits: Vec<_> = bank
                .query_top_k(&spec)?
                .into_iter()
                .map(|(e, score)| json!({ "id": e.id, "category": e.category, "score": score, "text": e.text }))
                .collect();
            print_json(&hits)?;
        }
        BankCommand::Stats { bank } => {
            let bank = bank_store::load(&bank)?;
            let real = bank.entries().filter(|e| e.provenance == Provenance::Real).count();
            print_json(&json!({
                "dim": bank.dim(),
                "entries": bank.len(),
                "real": real,
                "synthetic": bank.len() - real,
                "backgrounds": bank.backgrounds().count(),
                "categories": bank.category_counts(),
            }))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Inspect {
            profile,
            experts,
            bank,
            out,
            seed,
            fresh,
            halt_after,
        } => {
            let opts = RunOptions { seed, fresh, halt_after };
            let report = inspect(&profile, &experts, &bank, &out, &opts)?;
            for n in &report.nodes {
                match &n.error {
                    Some(e) => println!("{:<9} {:?}: {e}", n.id, n.status),
                    None => println!("{:<9} {:?}", n.id, n.status),
                }
            }
            println!("comparable digest {}", report.comparable_digest);
            if report.nodes.iter().any(|n| n.status != NodeStatus::Done) {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate { pred, gt, out } => {
            let table = evaluate_dirs(&pred, &gt)?;
            write_table(&out, &table)?;
            print_json(&table)?;
        }
        Command::Recompose {
            input,
            bank,
            out,
            seed,
            experts,
        } => {
            let gateway = experts.gateway()?;
            let store = BankStore::open(&bank)?;
            let settings = RecomposeSettings::default();
            let categories: BTreeSet<DefectCategory> = DefectCategory::ALL.into_iter().collect();
            let mut summary = Vec::new();
            for item in dataset::list(&input)? {
                let Some(class_masks) = item.sidecar.class_masks()? else {
                    summary.push(json!({ "image_id": item.id(), "skipped": "no instance masks" }));
                    continue;
                };
                if class_masks.is_empty() {
                    summary.push(json!({ "image_id": item.id(), "skipped": "no instances" }));
                    continue;
                }
                let masks: Vec<BinaryMask> = class_masks.into_values().collect();
                let pixels = item.load_image()?;
                let cycle = recompose_cycle(&item.image_ref()?, &pixels, &masks, &categories, &store, &gateway, seed, &settings)?;
                for (id, sample) in &cycle.samples {
                    write_sample(&out, id, sample)?;
                }
                summary.push(json!({
                    "image_id": item.id(),
                    "background_id": cycle.background.id,
                    "outcomes": cycle.outcomes,
                }));
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("recompose.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            let made: usize = summary.iter().filter_map(|s| s["outcomes"].as_array()).map(|o| o.len()).sum();
            println!("{made} samples from {} images", summary.len());
        }
        Command::Curate {
            input,
            config,
            out,
            experts,
        } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg: CurationConfig = if config.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text)?
            } else {
                serde_json::from_str(&text)?
            };
            let gateway = experts.gateway()?;
            let manifest = curate(&dataset::list(&input)?, &cfg, &gateway)?;
            write_manifest(&out, &manifest)?;
            println!("kept {} dropped {}", manifest.kept.len(), manifest.dropped.len());
        }
        Command::Bank { command } => bank_command(command)?,
        Command::Fixtures { out, images, seed } => {
            write_fixture_set(&out, images, seed)?;
            println!("wrote {images} fixture images to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
