//! `posa` command line: dataset generation, training, translation and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or data error,
//! 3 non-finite loss.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use posa::metrics::{evaluate, ProxyClassifier};
use posa::rng::{stream, Rng};
use posa::synthdata::{dataset_hash, generate_dataset, panoptic_overlay, read_dataset, write_dataset, write_image_png};
use posa::trainer::{fit, load_checkpoint};
use posa::{generator, Config, Error, LossTerm};

#[derive(Parser, Debug)]
#[command(name = "posa", version, about = "Image translation between paired domains guided by panoptic maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML config; desk defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train both domains' generators and discriminators.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable one loss term (repeatable).
        #[arg(long = "disable-loss", value_name = "NAME", value_parser = parse_loss)]
        disable_loss: Vec<LossTerm>,
    },
    /// Translate every dataset input under several prior styles.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        direction: Direction,
        #[arg(long, default_value_t = 1)]
        styles: usize,
    },
    /// Write the metrics report of a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Direction {
    T2c,
    C2t,
}

impl Direction {
    fn name(self) -> &'static str {
        match self {
            Direction::T2c => "t2c",
            Direction::C2t => "c2t",
        }
    }
}

fn parse_loss(s: &str) -> std::result::Result<LossTerm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    tool_version: &'static str,
    seed: u64,
    config_hash: String,
    config: Config,
    dataset_hash: String,
    artifacts: Vec<PathBuf>,
}

impl Manifest {
    fn new(command: &str, seed: u64, cfg: &Config, dataset_hash: String, artifacts: Vec<PathBuf>) -> Self {
        Self {
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            dataset_hash,
            artifacts,
        }
    }

    /// Artifact paths are stored relative to the manifest's directory, so identical runs
    /// into different directories produce identical manifests.
    fn write(mut self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent() {
            for a in &mut self.artifacts {
                if let Ok(rel) = a.strip_prefix(dir) {
                    *a = rel.to_path_buf();
                }
            }
        }
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
        Ok(path.to_path_buf())
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::desk(),
    })
}

fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::GenData { out, n, seed, config } => {
            let cfg = load_config(config.as_deref())?;
            let samples = generate_dataset(&cfg, n, seed);
            write_dataset(&out, &samples)?;
            let artifacts = samples
                .iter()
                .flat_map(|s| ["a.png", "b.png", "seg.png", "meta.json"].map(|f| out.join(format!("{:06}_{f}", s.index))))
                .collect();
            Manifest::new("gen-data", seed, &cfg, dataset_hash(&out)?, artifacts).write(&out.join("manifest.json"))
        }
        Command::Train {
            data,
            out,
            config,
            disable_loss,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            for t in disable_loss {
                cfg.set_disabled(t, true);
            }
            cfg.validate()?;
            let outcome = fit(&cfg, &data, &out)?;
            let mut artifacts = vec![out.join("losses.csv"), out.join("probes.csv")];
            artifacts.extend(outcome.checkpoints);
            artifacts.extend(outcome.sample_images);
            Manifest::new("train", cfg.seed, &cfg, dataset_hash(&data)?, artifacts).write(&out.join("manifest.json"))
        }
        Command::Translate {
            ckpt,
            data,
            out,
            direction,
            styles,
        } => {
            if styles == 0 {
                return Err(Error::InvalidArgument("--styles must be at least 1".into()).into());
            }
            let (nets, state) = load_checkpoint(&ckpt)?;
            let cfg = &state.cfg;
            let samples = read_dataset(&data, cfg)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let t = (&nets.gen_t, &state.gen_t);
            let c = (&nets.gen_c, &state.gen_c);
            let (src, tgt) = match direction {
                Direction::T2c => (t, c),
                Direction::C2t => (c, t),
            };
            let mut rng = Rng::new(cfg.seed, stream::TRANSLATE);
            let mut artifacts = Vec::new();
            for s in &samples {
                let input = match direction {
                    Direction::T2c => &s.a,
                    Direction::C2t => &s.b,
                };
                for k in 0..styles {
                    let img = generator::translate(src, tgt, input, &s.panoptic, &mut rng)?;
                    let p = out.join(format!("{:06}_{}_style{k}.png", s.index, direction.name()));
                    write_image_png(&p, &img)?;
                    if k == 0 {
                        let overlay = out.join(format!("{:06}_{}_overlay.png", s.index, direction.name()));
                        write_image_png(&overlay, &panoptic_overlay(&img, &s.panoptic))?;
                        artifacts.push(overlay);
                    }
                    artifacts.push(p);
                }
            }
            Manifest::new("translate", cfg.seed, cfg, dataset_hash(&data)?, artifacts).write(&out.join("manifest.json"))
        }
        Command::Evaluate { ckpt, data, report } => {
            let (nets, state) = load_checkpoint(&ckpt)?;
            let cfg = &state.cfg;
            let samples = read_dataset(&data, cfg)?;
            let classifier = ProxyClassifier::train(cfg)?;
            let r = evaluate(&nets, &state, &samples, &classifier)?;
            if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let text = serde_json::to_string_pretty(&r).expect("report serializes");
            fs::write(&report, text + "\n").map_err(|e| Error::io(&report, e))?;
            let manifest = report.with_extension("manifest.json");
            Manifest::new("evaluate", cfg.seed, cfg, dataset_hash(&data)?, vec![report.clone()])
                .write(&manifest)
                .context("writing evaluation manifest")
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => 3,
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
