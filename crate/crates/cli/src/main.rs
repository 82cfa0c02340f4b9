use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use laeids::classify::ModelBundle;
use laeids::harness::{self, DataSource, RunConfig, RunDir};
use laeids::orchestrator::{alerts_to_jsonl, write_jsonl};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "laeids",
    version,
    about = "Collaborative intrusion detection for low-altitude IoT swarms"
)]
struct Cli {
    /// Run configuration (JSON), or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a labeled flow CSV and split it into train/test.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "label")]
        label_column: String,
        #[arg(long, default_value = "benign")]
        benign_label: String,
        /// Stratified subset size.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Generate the synthetic corpus and split it into train/test.
    Synth {
        #[arg(long)]
        benign: Option<usize>,
        #[arg(long)]
        malicious: Option<usize>,
    },
    /// Pretrain the diffusion feature memory.
    Pretrain,
    /// Run swarm feature selection on the training split.
    Select,
    /// Build the device-profile knowledge repository.
    BuildRepo,
    /// Train the tiered classifier pools.
    Train,
    /// Generate a swarm scenario and run the online loop over it.
    Simulate {
        /// Replay this scenario file instead of generating one.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Score the trained models and write metrics.json.
    Evaluate,
    /// Compute the label-efficiency curve.
    Curve,
    /// Run every stage and write a manifest.
    Run,
    /// Re-run the configuration recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Inspect a model bundle.
    Model {
        #[command(subcommand)]
        action: ModelAction,
    },
}

#[derive(Subcommand)]
enum ModelAction {
    Inspect { path: PathBuf },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print(value: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Ingest {
            csv,
            label_column,
            benign_label,
            limit,
        } => {
            cfg.data = DataSource::Csv {
                path: csv.clone(),
                label_column: label_column.clone(),
                benign_label: benign_label.clone(),
                limit: *limit,
            };
        }
        Command::Synth { benign, malicious } => {
            let mut synth = match &cfg.data {
                DataSource::Synthetic { synth } => synth.clone(),
                DataSource::Csv { .. } => Default::default(),
            };
            if let Some(n) = benign {
                synth.n_benign = *n;
            }
            if let Some(n) = malicious {
                synth.n_malicious = *n;
            }
            cfg.data = DataSource::Synthetic { synth };
        }
        _ => {}
    }
    let cfg = cfg.resolved();
    cfg.validate()?;

    if let Command::Model {
        action: ModelAction::Inspect { path },
    } = &cli.command
    {
        let bundle = ModelBundle::load(path).with_context(|| format!("loading {}", path.display()))?;
        let pools: Vec<_> = bundle
            .pools
            .iter()
            .map(|p| {
                json!({
                    "mask": p.models.first().map(|m| m.feature_mask.to_string()),
                    "tiers": p.models.iter().map(|m| json!({
                        "tier": m.tier,
                        "kind": m.kind,
                        "trees": m.tree_count(),
                        "input_dim": m.input_dim(),
                        "train_accuracy": m.digest.train_accuracy,
                        "digest": m.digest.hash,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        return print(json!({
            "digest": bundle.digest(),
            "schema": bundle.schema_name,
            "schema_digest": bundle.schema_digest,
            "classes": bundle.class_names,
            "input": bundle.input,
            "memory_digest": bundle.memory_digest,
            "pools": pools,
        }));
    }

    let dir = RunDir::new(&cli.out)?;
    match &cli.command {
        Command::Ingest { .. } | Command::Synth { .. } => {
            let (train, test) = harness::stage_data(&cfg, &dir)?;
            std::fs::write(dir.path(harness::CONFIG), serde_json::to_string_pretty(&cfg)? + "\n")?;
            print(json!({"train": train, "test": test, "out": dir.root()}))
        }
        Command::Pretrain => {
            let memory = harness::stage_pretrain(&cfg, &dir)?;
            print(json!({
                "images": memory.provenance.image_count,
                "feature_dim": memory.feature_dim(),
                "learning_rate_used": memory.provenance.learning_rate_used,
                "final_epoch_mean_loss": memory.provenance.epoch_mean_losses.last(),
            }))
        }
        Command::Select => {
            let r = harness::stage_select(&cfg, &dir)?;
            print(json!({"mask": r.mask.to_string(), "fitness": r.fitness, "run_digest": r.run_digest}))
        }
        Command::BuildRepo => {
            let repo = harness::stage_repository(&cfg, &dir)?;
            let entries: Vec<_> = repo
                .entries
                .iter()
                .map(|e| json!({"id": e.id, "class": e.profile.device_class, "mask": e.mask.as_ref().map(|m| m.to_string()), "error": e.error}))
                .collect();
            print(json!({"entries": entries}))
        }
        Command::Train => {
            let bundle = harness::stage_train(&cfg, &dir)?;
            print(json!({"digest": bundle.digest(), "pools": bundle.pools.len()}))
        }
        Command::Simulate { scenario: None } => {
            let summary = harness::stage_simulate(&cfg, &dir)?;
            print(serde_json::to_value(summary)?)
        }
        Command::Simulate { scenario: Some(path) } => {
            let alerts = harness::replay_scenario(&cfg, &dir, path)?;
            write_jsonl(&dir.path(harness::ALERTS), &alerts)?;
            print!("{}", alerts_to_jsonl(&alerts));
            Ok(())
        }
        Command::Evaluate => {
            let m = harness::stage_evaluate(&cfg, &dir)?;
            print(json!({
                "accuracy": m.pipeline.accuracy,
                "macro_f1": m.pipeline.macro_f1,
                "raw_supervised_accuracy": m.raw_supervised.accuracy,
                "tiers": m.tiers,
            }))
        }
        Command::Curve => {
            if cfg.curve_fractions.is_empty() {
                bail!("no curve fractions configured");
            }
            harness::stage_curve(&cfg, &dir)?;
            print!("{}", std::fs::read_to_string(dir.path(harness::CURVE_CSV))?);
            Ok(())
        }
        Command::Run => {
            let manifest = harness::run_pipeline(&cfg, &cli.out)?;
            print(
                json!({"config_digest": manifest.config_digest, "stages": manifest.stages, "artifacts": manifest.artifacts}),
            )
        }
        Command::Replay { manifest } => {
            let m = harness::replay_manifest(manifest, &cli.out)?;
            print(json!({"config_digest": m.config_digest, "artifacts": m.artifacts}))
        }
        Command::Model { .. } => unreachable!("handled above"),
    }
}
