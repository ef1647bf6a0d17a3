//! Command-line entry point: packing verification, latency estimation,
//! teacher/supernet training, constrained search, quantization, and export.
//! Logging verbosity comes from the QUASAR_LOG environment variable
//! (error, info, debug).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use quasar_core::hw::{QuantMode, StrategyRule, TileConfig};
use quasar_core::manifest::RunManifest;
use quasar_core::nas::ModelArch;
use quasar_core::pipeline::{
    format_estimate_table, run_estimate, run_export, run_pack_verify, run_quantize, run_search,
    run_train_supernet, run_train_teacher, write_sample_configs, EstimateOptions, ExportOptions,
    ModelDescriptor, PackVerifyMode, SearchOptions, SearchResults, TeacherOptions,
    TrainSupernetOptions,
};

#[derive(Parser)]
#[command(name = "quasar", version, about = "Quantization-aware architecture search workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    All,
    Pack3,
    Pack4,
    W8,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantModeArg {
    W4a6,
    W8a6,
    W8a6Direct,
}

impl From<QuantModeArg> for QuantMode {
    fn from(m: QuantModeArg) -> Self {
        match m {
            QuantModeArg::W4a6 => QuantMode::W4A6,
            QuantModeArg::W8a6 => QuantMode::W8A6,
            QuantModeArg::W8a6Direct => QuantMode::W8A6Direct,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Standard,
    Derived,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Table,
}

#[derive(Args)]
struct ArchArgs {
    /// Token vector width of the synthetic dataset.
    #[arg(long, default_value_t = 16)]
    token_dim: usize,
    /// Tokens per sample.
    #[arg(long, default_value_t = 8)]
    tokens: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

impl ArchArgs {
    fn to_arch(&self) -> ModelArch {
        ModelArch {
            token_dim: self.token_dim,
            tokens: self.tokens,
            num_heads: self.heads,
            num_classes: self.classes,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Exhaustively verify the DSP packing schemes.
    PackVerify {
        #[arg(long, value_enum, default_value = "all")]
        mode: ModeArg,
        /// Worker thread cap for the sweeps.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Write the verification report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Deliberately corrupt the lane layout (failure-path test hook).
        #[arg(long, hide = true)]
        test_corrupt_lanes: bool,
    },
    /// Latency, resource, size, and BOPs estimate for one subnet.
    Estimate {
        /// Model descriptor JSON (arch + subnet).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        hw_profile: PathBuf,
        /// Cost table JSON; the characterized defaults when omitted.
        #[arg(long)]
        costs: Option<PathBuf>,
        /// Per-layer tile JSON array; auto-tiling when omitted.
        #[arg(long, conflicts_with = "auto_tile")]
        tiles: Option<PathBuf>,
        /// Grid-search tile sizes per layer (the default when --tiles is
        /// not given).
        #[arg(long)]
        auto_tile: bool,
        #[arg(long, value_enum, default_value = "w4a6")]
        mode: QuantModeArg,
        #[arg(long, value_enum, default_value = "standard")]
        strategy_rule: RuleArg,
        #[arg(long, default_value_t = 6)]
        act_bits: u32,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
        /// Write the JSON report here as well as printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the distillation teacher and export its logits.
    TrainTeacher {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        arch: ArchArgs,
    },
    /// Train the weight-entangled supernet.
    TrainSupernet {
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Teacher directory from train-teacher; enables distillation.
        #[arg(long)]
        kd_teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 2.0)]
        tau: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 6)]
        act_bits: u32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        arch: ArchArgs,
    },
    /// Evolution search under an FPS floor, scored by one-shot accuracy.
    Search {
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        supernet: PathBuf,
        #[arg(long)]
        hw_profile: PathBuf,
        #[arg(long)]
        costs: Option<PathBuf>,
        #[arg(long)]
        target_fps: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        population: usize,
        #[arg(long, default_value_t = 20)]
        generations: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value_t = 0.2)]
        p_depth: f64,
        #[arg(long, default_value_t = 0.4)]
        p_mutate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Row-wise quantize a 2-D f32 QVT tensor.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        /// Fraction of leading rows quantized to 8 bits.
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize a searched subnet: quantized weights plus an estimate.
    Export {
        #[arg(long)]
        supernet: PathBuf,
        /// Subnet config JSON (a model descriptor or a bare subnet).
        #[arg(long, conflicts_with = "results")]
        config: Option<PathBuf>,
        /// Search results JSON; exports the candidate at --rank.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        rank: usize,
        #[arg(long)]
        hw_profile: PathBuf,
        #[arg(long)]
        costs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the shipped sample spaces, profile, and cost table.
    GenConfigs {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn real_main() -> anyhow::Result<bool> {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("QUASAR_LOG", "warn"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    match cli.command {
        Command::PackVerify {
            mode,
            jobs,
            out,
            test_corrupt_lanes,
        } => {
            let mode = match mode {
                ModeArg::All => PackVerifyMode::All,
                ModeArg::Pack3 => PackVerifyMode::Pack3,
                ModeArg::Pack4 => PackVerifyMode::Pack4,
                ModeArg::W8 => PackVerifyMode::W8,
            };
            let outcome = run_pack_verify(mode, jobs, test_corrupt_lanes);
            for line in &outcome.lines {
                println!("{line}");
            }
            if let Some(out) = out {
                let report = serde_json::json!({ "ok": outcome.ok, "lines": outcome.lines });
                std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
                RunManifest::new("pack-verify")
                    .output(&out)
                    .write(&out.with_extension("manifest.json"))?;
            }
            Ok(outcome.ok)
        }
        Command::Estimate {
            config,
            hw_profile,
            costs,
            tiles,
            auto_tile: _,
            mode,
            strategy_rule,
            act_bits,
            format,
            out,
        } => {
            let model: ModelDescriptor = load_json(&config)?;
            let profile = load_json(&hw_profile)?;
            let cost_table = match &costs {
                Some(p) => load_json(p)?,
                None => quasar_core::hw::CostTable::default(),
            };
            let tile_list: Option<Vec<TileConfig>> = match &tiles {
                Some(p) => Some(load_json(p)?),
                None => None,
            };
            let opts = EstimateOptions {
                mode: mode.into(),
                rule: match strategy_rule {
                    RuleArg::Standard => StrategyRule::Standard,
                    RuleArg::Derived => StrategyRule::Derived,
                },
                act_bits,
                tiles: tile_list,
            };
            let report = run_estimate(&model, &profile, &cost_table, &opts)?;
            match format {
                FormatArg::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                FormatArg::Table => print!("{}", format_estimate_table(&report)),
            }
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
                let mut manifest = RunManifest::new("estimate").input(&config)?.input(&hw_profile)?;
                if let Some(c) = &costs {
                    manifest = manifest.input(c)?;
                }
                manifest.output(&out).write(&out.with_extension("manifest.json"))?;
            }
            Ok(true)
        }
        Command::TrainTeacher {
            seed,
            data_seed,
            epochs,
            batch_size,
            lr,
            out,
            arch,
        } => {
            let report = run_train_teacher(
                &arch.to_arch(),
                &TeacherOptions {
                    seed,
                    data_seed,
                    epochs,
                    batch_size,
                    lr,
                    out_dir: out,
                },
            )?;
            println!(
                "teacher trained: train acc {:.3}, val acc {:.3}",
                report.train_accuracy, report.val_accuracy
            );
            Ok(true)
        }
        Command::TrainSupernet {
            space,
            epochs,
            seed,
            data_seed,
            kd_teacher,
            alpha,
            tau,
            batch_size,
            lr,
            act_bits,
            out,
            arch,
        } => {
            let report = run_train_supernet(&TrainSupernetOptions {
                space_path: space,
                arch: arch.to_arch(),
                act_bits,
                epochs,
                batch_size,
                lr,
                seed,
                data_seed,
                kd_teacher,
                kd_alpha: alpha,
                kd_tau: tau,
                out_dir: out,
            })?;
            println!(
                "supernet trained: {} steps, largest-subnet val acc {:.3}",
                report.train.steps, report.largest_subnet_val_accuracy
            );
            Ok(true)
        }
        Command::Search {
            space,
            supernet,
            hw_profile,
            costs,
            target_fps,
            seed,
            population,
            generations,
            top_k,
            p_depth,
            p_mutate,
            out,
        } => {
            let results = run_search(&SearchOptions {
                space_path: space,
                supernet_dir: supernet,
                profile_path: hw_profile,
                costs_path: costs,
                evo: quasar_core::evo::EvoParams {
                    population_size: population,
                    generations,
                    top_k,
                    p_depth,
                    p_mutate,
                    target_fps,
                    seed,
                    max_attempts: 100_000,
                },
                out_path: out.clone(),
            })?;
            let best = results.candidates.first();
            println!(
                "search done: {} candidates, best fitness {:.3} at {:.1} fps -> {}",
                results.candidates.len(),
                best.map(|c| c.fitness).unwrap_or(f64::NAN),
                best.map(|c| c.fps).unwrap_or(f64::NAN),
                out.display()
            );
            Ok(true)
        }
        Command::Quantize { input, ratio, out } => {
            run_quantize(&input, ratio, &out)?;
            println!("quantized {} -> {}", input.display(), out.display());
            Ok(true)
        }
        Command::Export {
            supernet,
            config,
            results,
            rank,
            hw_profile,
            costs,
            out,
        } => {
            let subnet = if let Some(cfg_path) = config {
                // Accept either a bare subnet or a full descriptor.
                let text = std::fs::read_to_string(&cfg_path)
                    .with_context(|| format!("reading {}", cfg_path.display()))?;
                match serde_json::from_str::<ModelDescriptor>(&text) {
                    Ok(d) => d.subnet,
                    Err(_) => serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", cfg_path.display()))?,
                }
            } else if let Some(results_path) = results {
                let r: SearchResults = load_json(&results_path)?;
                r.candidates
                    .get(rank)
                    .map(|c| c.config.clone())
                    .ok_or_else(|| anyhow::anyhow!("results hold no rank {rank}"))?
            } else {
                bail!("export needs --config or --results");
            };
            let report = run_export(&ExportOptions {
                supernet_dir: supernet,
                config: subnet,
                profile_path: hw_profile,
                costs_path: costs,
                out_dir: out.clone(),
            })?;
            println!(
                "exported to {} ({:.1} fps, {:.3} MB)",
                out.display(),
                report.fps,
                report.model_size_mb
            );
            Ok(true)
        }
        Command::GenConfigs { out } => {
            write_sample_configs(&out)?;
            RunManifest::new("gen-configs")
                .output(&out)
                .write(&out.join("run.manifest.json"))?;
            println!("sample configs written to {}", out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
