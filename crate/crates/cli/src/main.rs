//! Command-line interface: train sub-models, run attack suites, evaluate the
//! full robust-accuracy pipeline, and generate key files.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use scramblenet::attacks::{run_attack, worst_case_eval, AttackConfig, AttackKind};
use scramblenet::ensemble::{build_ensemble_observed, RandomEnsemble};
use scramblenet::harness::{
    evaluate_clean, gen_synthetic_split, load_cifar10_binary, run_experiment, AttackColumn,
    Dataset, DatasetConfig, EvalReport, ExperimentConfig, ReportFormat, ReportRow, RunMeta, Split,
};
use scramblenet::pipeline::{Pipeline, RandomEnsemblePipeline, SimpleEnsemblePipeline};
use scramblenet::rng::RngStream;
use scramblenet::transform::{write_key_file, ShuffleKey};
use scramblenet::Error;

#[derive(Parser)]
#[command(name = "scramblenet", version, about = "Keyed pixel-shuffling defense: training, attacks, and robust-accuracy evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the ensemble's sub-models and write checkpoints plus a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the attack suite against a trained ensemble manifest.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Path to an ensemble manifest written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated attack list, e.g. pgd,pgd-t,square.
        #[arg(long)]
        attacks: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// table | csv | jsonl
        #[arg(long)]
        format: Option<String>,
        /// Also write per-iteration attack traces for the first example.
        #[arg(long)]
        trace: bool,
    },
    /// Full pipeline: baseline, simple ensemble, random ensemble, report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        trace: bool,
    },
    /// Key management.
    Keys {
        #[command(subcommand)]
        command: KeysCommand,
    },
}

#[derive(Subcommand)]
enum KeysCommand {
    /// Generate a key file from a seed.
    Gen {
        #[arg(long)]
        seed: u64,
        /// Block size M.
        #[arg(long)]
        block: usize,
        #[arg(long)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidAttackConfig(_)
        | Error::InvalidEnsembleSize(_)
        | Error::DuplicateSeeds
        | Error::InvalidDimensions(_)
        | Error::InvalidSubsetSize { .. }
        | Error::InvalidTarget(_)
        | Error::InvalidLabel { .. } => 2,
        Error::Io(_)
        | Error::Data(_)
        | Error::MalformedRecord(_)
        | Error::BadMagic { .. }
        | Error::VersionMismatch { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(
    path: &PathBuf,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    format: Option<&str>,
    trace: bool,
) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(dir) = out_dir {
        cfg.output.dir = dir;
    }
    if let Some(f) = format {
        cfg.output.format = parse_format(f)?;
    }
    if trace {
        cfg.output.trace = true;
    }
    Ok(cfg)
}

fn parse_format(s: &str) -> Result<ReportFormat, Error> {
    match s {
        "table" => Ok(ReportFormat::Table),
        "csv" => Ok(ReportFormat::Csv),
        "jsonl" => Ok(ReportFormat::Jsonl),
        other => Err(Error::Config(format!(
            "unknown format '{other}' (expected table, csv, or jsonl)"
        ))),
    }
}

fn print_report(report: &EvalReport, table: &str, format: ReportFormat) -> Result<(), Error> {
    match format {
        ReportFormat::Table => print!("{table}"),
        ReportFormat::Csv => print!("{}", report.to_csv()),
        ReportFormat::Jsonl => print!("{}", report.to_jsonl()?),
    }
    Ok(())
}

fn training_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), Error> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { .. } => {
            let (train_spec, test_spec) = cfg.synthetic_spec(None).unwrap();
            Ok((
                gen_synthetic_split(&train_spec, Split::Train)?,
                gen_synthetic_split(&test_spec, Split::Test)?,
            ))
        }
        DatasetConfig::Cifar10 {
            train_path,
            test_path,
        } => Ok((
            load_cifar10_binary(train_path)?,
            load_cifar10_binary(test_path)?,
        )),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out_dir,
        } => {
            let cfg = load_config(&config, seed, out_dir, None, false)?;
            let (train, _) = training_datasets(&cfg)?;
            std::fs::create_dir_all(&cfg.output.dir)?;

            let mut train_cfg = cfg.train_config();
            train_cfg.rng_seed = RngStream::new(cfg.master_seed)
                .derive(b"ensemble-train")
                .seed();
            let mut logs: Vec<String> = vec![String::new(); cfg.ensemble.num_members];
            let ensemble = build_ensemble_observed(
                &train,
                cfg.ensemble.num_members,
                cfg.ensemble.selection_size,
                &cfg.ensemble.key_seeds,
                cfg.ensemble.block_size,
                &train_cfg,
                |member, record| {
                    logs[member].push_str(
                        &serde_json::to_string(record).expect("epoch record serializes"),
                    );
                    logs[member].push('\n');
                },
            )?;
            for (i, log) in logs.iter().enumerate() {
                std::fs::write(cfg.output.dir.join(format!("train_member_{i}.jsonl")), log)?;
            }
            let manifest = ensemble.save(&cfg.output.dir)?;
            println!(
                "trained {} sub-models; manifest at {}",
                ensemble.num_members(),
                manifest.display()
            );
            Ok(())
        }

        Command::Attack {
            config,
            model,
            attacks,
            seed,
            out_dir,
            format,
            trace,
        } => {
            let cfg = load_config(&config, seed, out_dir, format.as_deref(), trace)?;
            let kinds: Vec<AttackKind> = attacks
                .split(',')
                .map(AttackKind::from_str)
                .collect::<Result<_, _>>()?;
            if kinds.is_empty() {
                return Err(Error::Config("no attacks given".into()));
            }
            let ensemble = RandomEnsemble::load(&model)?;
            let (_, test) = training_datasets(&cfg)?;
            let eval_set = test.take(cfg.attack.num_eval);
            std::fs::create_dir_all(&cfg.output.dir)?;

            let master = RngStream::new(cfg.master_seed);
            let mut rows = Vec::new();
            let mut evaluate_row = |name: &str, pipeline: &dyn Pipeline| -> Result<(), Error> {
                let clean =
                    evaluate_clean(pipeline, &eval_set, master.derive(format!("clean-{name}").as_bytes()).seed())?;
                let attack_cfg = AttackConfig {
                    rng_seed: master.derive(format!("attacks-{name}").as_bytes()).seed(),
                    ..cfg.attack_config()
                };
                let wc = worst_case_eval(pipeline, &eval_set, &kinds, &attack_cfg)?;
                rows.push(ReportRow {
                    model: name.to_string(),
                    clean,
                    per_attack: wc
                        .per_attack
                        .iter()
                        .map(|(kind, robust)| AttackColumn {
                            attack: kind.as_str().to_string(),
                            robust: *robust,
                        })
                        .collect(),
                    combined: wc.combined,
                });
                Ok(())
            };
            let simple = SimpleEnsemblePipeline::new(&ensemble);
            evaluate_row("simple-ensemble", &simple)?;
            let random = RandomEnsemblePipeline::new(&ensemble, cfg.attack.white_box_mode);
            evaluate_row("random-ensemble", &random)?;

            let report = EvalReport {
                meta: RunMeta {
                    config_digest: cfg.digest()?,
                    library_version: env!("CARGO_PKG_VERSION").to_string(),
                    num_eval: eval_set.len(),
                    epsilon: cfg.attack.epsilon,
                    attacks: kinds.iter().map(|k| k.as_str().to_string()).collect(),
                    white_box_mode: cfg.attack.white_box_mode.as_str().to_string(),
                },
                rows,
            };
            report.validate()?;
            std::fs::write(cfg.output.dir.join("report.jsonl"), report.to_jsonl()?)?;
            std::fs::write(cfg.output.dir.join("summary.csv"), report.to_csv())?;

            if cfg.output.trace && !eval_set.is_empty() {
                write_traces(&cfg, &ensemble, &eval_set, &kinds)?;
            }
            print_report(&report, &report.render_table(), cfg.output.format)?;
            Ok(())
        }

        Command::Evaluate {
            config,
            seed,
            out_dir,
            format,
            trace,
        } => {
            let cfg = load_config(&config, seed, out_dir, format.as_deref(), trace)?;
            let output = run_experiment(&cfg)?;
            print_report(&output.report, &output.table, cfg.output.format)?;
            Ok(())
        }

        Command::Keys { command } => match command {
            KeysCommand::Gen {
                seed,
                block,
                channels,
                out,
            } => {
                let key = ShuffleKey::generate(seed, block, channels)?;
                write_key_file(&key, &out)?;
                println!("wrote key {} (seed {seed}, M={block}, C={channels})", key.id());
                Ok(())
            }
        },
    }
}

/// Per-iteration traces of each attack on the first evaluation example,
/// against the random ensemble.
fn write_traces(
    cfg: &ExperimentConfig,
    ensemble: &RandomEnsemble,
    eval_set: &Dataset,
    kinds: &[AttackKind],
) -> Result<(), Error> {
    use scramblenet::attacks::{pgd_observed, square_attack_observed, TraceRecord};

    let pipeline = RandomEnsemblePipeline::new(ensemble, cfg.attack.white_box_mode);
    let x = &eval_set.images()[0];
    let label = eval_set.labels()[0];
    let attack_cfg = cfg.attack_config();
    let root = RngStream::new(cfg.master_seed).derive(b"trace");
    for kind in kinds {
        let mut lines = String::new();
        let mut push = |rec: &TraceRecord| {
            lines.push_str(&serde_json::to_string(rec).expect("trace record serializes"));
            lines.push('\n');
        };
        match kind {
            AttackKind::Square => {
                square_attack_observed(&pipeline, x, label, &attack_cfg, &root, &mut push)?;
            }
            AttackKind::Pgd => {
                pgd_observed(&pipeline, x, label, &attack_cfg, None, &root, |rec, _| push(rec))?;
            }
            AttackKind::PgdTargeted | AttackKind::Fgsm => {
                run_attack(*kind, &pipeline, x, label, &attack_cfg, &root)?;
                continue;
            }
        }
        std::fs::write(
            cfg.output.dir.join(format!("trace_{kind}.jsonl")),
            lines,
        )?;
    }
    Ok(())
}
