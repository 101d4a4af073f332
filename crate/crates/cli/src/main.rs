//! `kedit`: staged driver for the knowledge editing lab.
//!
//! Stages read and write JSON artifacts under a run root (`--root`, or the
//! `KEDIT_RUN_ROOT` environment variable, default `./kedit-runs`):
//!
//! | stage            | reads                          | writes                      |
//! |------------------|--------------------------------|-----------------------------|
//! | `gen-data`       | config                         | `lab.json`, `world.json`    |
//! | `pretrain`       | `lab.json`, `world.json`       | `model.json`                |
//! | `train-stage1`   | `lab.json`, `world.json`       | `encoders.json`             |
//! | `train-stage2`   | the above                      | `connector.json`            |
//! | `run`            | the above                      | `runs/<name>/…`             |
//! | `report`         | `runs/<name>/ledger.jsonl`     | CSV                         |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::Value;

use kedit::editor::{read_ledger, ConnectorArtifact, EditorConfig, RunManifest, Stage2Config, Strategy};
use kedit::exec::Exec;
use kedit::metrics::{evaluate_run, MetricsReport};
use kedit::pipeline::{build_encoders, build_pretrained, Artifacts, LabConfig, Pretrained, TrainedEncoders};
use kedit::world::{generate_world_with, KnowledgeBase};

#[derive(Parser)]
#[command(name = "kedit", version, about = "Continual and compositional knowledge editing lab")]
struct Cli {
    /// Run root holding every artifact.
    #[arg(long, env = "KEDIT_RUN_ROOT", default_value = "kedit-runs", global = true)]
    root: PathBuf,
    /// JSON file overriding configuration keys (see README).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and freeze the configuration.
    GenData,
    /// Pretrain the base model on the world corpus.
    Pretrain,
    /// Train the memory encoders.
    TrainStage1,
    /// Train the knowledge connector with the adversarial retriever.
    TrainStage2 {
        #[arg(long)]
        hit_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file name inside the root.
        #[arg(long, default_value = "connector.json")]
        out: String,
    },
    /// Run the sequential editing protocol.
    Run {
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value_t = 500)]
        edits: usize,
        #[arg(long, value_delimiter = ',')]
        gaps: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        stream_seed: u64,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        /// Adversarial hit rate for compositional probes.
        #[arg(long)]
        test_hit_rate: Option<f64>,
        #[arg(long, default_value = "connector.json")]
        connector: String,
        /// Run directory name under `runs/`; defaults to the strategy.
        #[arg(long)]
        name: Option<String>,
    },
    /// Emit one CSV with strategy × gap rows for completed runs.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        compare: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast property suites.
    Selftest,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        bail!(
            "missing prerequisite artifact {} (run the stage that produces it first)",
            path.display()
        );
    }
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

/// Overlays `patch` on `base`; keys absent from `base` are rejected.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = format!("{path}.{k}");
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown configuration key {}", here.trim_start_matches('.')),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn load_config(file: Option<&Path>) -> Result<LabConfig> {
    let mut v = serde_json::to_value(LabConfig::default())?;
    if let Some(f) = file {
        let patch: Value = read_json(f)?;
        merge(&mut v, patch, "")?;
    }
    Ok(serde_json::from_value(v)?)
}

struct Ctx {
    root: PathBuf,
    exec: Exec,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn config(&self) -> Result<LabConfig> {
        read_json(&self.path("lab.json"))
    }

    fn world(&self) -> Result<KnowledgeBase> {
        let p = self.path("world.json");
        if !p.exists() {
            bail!("missing prerequisite artifact {} (run gen-data first)", p.display());
        }
        Ok(KnowledgeBase::load(&p)?)
    }

    fn artifacts(&self) -> Result<Artifacts> {
        let config = self.config()?;
        let kb = self.world()?;
        let pretrained: Pretrained = read_json(&self.path("model.json"))?;
        let encoders: TrainedEncoders = read_json(&self.path("encoders.json"))?;
        Ok(Artifacts::from_parts(config, kb, pretrained, encoders, None, self.exec))
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let ctx = Ctx {
        root: cli.root.clone(),
        exec,
    };
    match cli.cmd {
        Command::GenData => {
            let config = load_config(cli.config.as_deref())?;
            let kb = generate_world_with(&config.world)?;
            std::fs::create_dir_all(&ctx.root)?;
            write_json(&ctx.path("lab.json"), &config)?;
            kb.save(&ctx.path("world.json"))?;
            println!(
                "world: {} entities, {} facts, vocabulary {}",
                kb.entities.len(),
                kb.facts.len(),
                kb.vocab.total_len()
            );
        }
        Command::Pretrain => {
            let config = ctx.config()?;
            let kb = ctx.world()?;
            let p = build_pretrained(&config, &kb, exec)?;
            println!("pretrain: {} epochs, accuracy {:.4}", p.report.epochs, p.report.accuracy);
            write_json(&ctx.path("model.json"), &p)?;
        }
        Command::TrainStage1 => {
            let config = ctx.config()?;
            let kb = ctx.world()?;
            let e = build_encoders(&config, &kb)?;
            println!("stage 1: {} iterations, final loss {:.4}", e.report.iters, e.report.final_loss);
            write_json(&ctx.path("encoders.json"), &e)?;
        }
        Command::TrainStage2 { hit_rate, seed, out } => {
            let art = ctx.artifacts()?;
            let mut s2: Stage2Config = art.config.stage2.clone();
            if let Some(p) = hit_rate {
                s2.hit_rate = p;
            }
            if let Some(s) = seed {
                s2.seed = s;
            }
            let c = art.connector(&s2)?;
            println!("stage 2: hit rate {}, loss by epoch {:?}", c.hit_rate, c.history);
            c.save(&ctx.path(&out))?;
        }
        Command::Run {
            strategy,
            edits,
            gaps,
            seed,
            stream_seed,
            alpha,
            tau,
            test_hit_rate,
            connector,
            name,
        } => {
            let strategy = Strategy::parse(&strategy)?;
            let art = ctx.artifacts()?;
            let mut cfg = EditorConfig {
                strategy,
                test_hit_rate,
                ..art.config.editor.clone()
            };
            if let Some(g) = gaps {
                cfg.gaps = g;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(t) = tau {
                cfg.tau = t;
            }
            cfg.validate()?;
            let conn = if strategy.uses_connector() {
                Some(ConnectorArtifact::load(&ctx.path(&connector))?)
            } else {
                None
            };
            let out = art.run(&cfg, edits, stream_seed, conn.as_ref())?;
            let dir = ctx.path("runs").join(name.unwrap_or_else(|| strategy.name().to_string()));
            out.write(&dir)?;
            print!("{}", out.report.to_csv());
            println!("wrote {}", dir.display());
        }
        Command::Report { compare, out } => {
            let mut reports = Vec::new();
            for name in &compare {
                let dir = ctx.path("runs").join(name);
                let manifest = RunManifest::load(&dir.join("manifest.json"))?;
                let ledger = read_ledger(&dir.join("ledger.jsonl"))?;
                reports.push(evaluate_run(manifest.config.strategy, &ledger, &manifest.config.gaps)?);
            }
            let csv = MetricsReport::merge(reports).to_csv();
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Selftest => {
            for (name, suite) in kedit::selftest::SUITES {
                suite(exec).with_context(|| format!("suite {name}"))?;
                println!("ok  {name}");
            }
            println!("selftest: all suites passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
