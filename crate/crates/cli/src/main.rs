use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tsckb::agents::{Agents, TaskContext};
use tsckb::bank::{KnowledgeBank, Section, Tier};
use tsckb::config::{ClientKind, Config};
use tsckb::data::{few_shot_split, Dataset, FewShotSplit};
use tsckb::error::{ConfigError, Error};
use tsckb::pipeline::{run_all, MetricsReport, Pipeline, RunDir, Variant};
use tsckb::plot::{render_line_plot, ImageCache};
use tsckb::prompt::Templates;
use tsckb::vlm::{RecordingClient, RemoteClient, ScriptedClient, VlmClient};

#[derive(Debug, Parser)]
#[command(name = "tsckb", version, about = "Few-shot time-series classification with a self-evolving knowledge bank")]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `split.k=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory (overrides `run.out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    client: Option<ClientArg>,
    /// JSON-lines script for the scripted client.
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClientArg {
    Scripted,
    Remote,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the initial bank from the few-shot training samples.
    Warmup,
    /// Refine the bank in the run directory over train and validation samples.
    Train,
    /// Stream the test split through two-pass prediction with bank updates.
    Test,
    /// Warmup, train and test in one go.
    Run,
    /// Run every ablation variant and print a comparison table.
    Ablate,
    /// Pretty-print a bank snapshot.
    Inspect {
        /// Snapshot file (defaults to `<out>/bank.json`).
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Rebuild the bank from its operation log and compare with the snapshot.
    Replay {
        /// Snapshot file (defaults to `<out>/bank.json`).
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Render one sample as a PNG line plot.
    Plot {
        #[arg(long)]
        sample: String,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    /// Outputs were written but some role calls failed.
    Roles(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Data(_) | Error::Template(_) => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

fn load_config(cli: &Cli) -> Result<Config, ConfigError> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    config.apply_overrides(&cli.overrides)?;
    if let Some(out) = &cli.out {
        config.run.out_dir = out.clone();
    }
    if let Some(kind) = cli.client {
        config.client.kind = match kind {
            ClientArg::Scripted => ClientKind::Scripted,
            ClientArg::Remote => ClientKind::Remote,
        };
    }
    if let Some(script) = &cli.script {
        config.client.script = Some(script.clone());
    }
    Ok(config)
}

fn make_client(config: &Config) -> Result<Box<dyn VlmClient>, Failure> {
    match config.client.kind {
        ClientKind::Scripted => {
            let path = config
                .client
                .script
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("the scripted client needs client.script or --script".into()))?;
            let client = ScriptedClient::from_file(path).map_err(|e| Failure::Config(e.into()))?;
            Ok(Box::new(client))
        }
        ClientKind::Remote => {
            let client = RemoteClient::from_env(config.client.remote.clone()).map_err(|e| Failure::Config(e.into()))?;
            Ok(Box::new(client))
        }
    }
}

/// Everything a pipeline command needs, owned in one place.
struct Session {
    config: Config,
    train: Dataset,
    split: FewShotSplit,
    templates: Templates,
}

impl Session {
    fn open(config: Config) -> Result<Self, Failure> {
        config.validate()?;
        let (train, test) = config.load_datasets()?;
        let split = few_shot_split(&train, &test, config.split.k, config.split.seed).map_err(Error::from)?;
        let templates = match &config.run.templates_dir {
            Some(dir) => Templates::with_overrides(dir)?,
            None => Templates::builtin(),
        };
        Ok(Self {
            config,
            train,
            split,
            templates,
        })
    }

    /// Runs `f` with a pipeline writing into `dir`.
    fn with_pipeline<T>(
        &self,
        dir: &RunDir,
        f: impl FnOnce(&mut Pipeline<'_>) -> Result<T, Error>,
    ) -> Result<(T, usize), Failure> {
        let inner = make_client(&self.config)?;
        let client = RecordingClient::with_file(inner, &dir.transcript_path())
            .with_context(|| format!("opening {}", dir.transcript_path().display()))
            .map_err(Failure::Runtime)?;
        let run_config = self.config.run_config();
        let ctx = TaskContext::from_dataset(&self.train);
        let images = ImageCache::new(dir.images_dir());
        let mut agents = Agents::new(&client, &self.templates, &images, &run_config.plot, &ctx);
        agents.temperature = run_config.temperature;
        agents.r_schema = run_config.r_schema;
        agents.budgets = run_config.budgets;
        let mut pipeline = Pipeline::new(&run_config, agents, &self.split).with_run_dir(dir);
        let value = f(&mut pipeline)?;
        Ok((value, pipeline.role_failures()))
    }

    fn run_dir(&self, root: &Path) -> Result<RunDir, Failure> {
        let dir = RunDir::create(root)?;
        dir.write_json("config.json", &self.config)?;
        Ok(dir)
    }
}

fn roles_result(failures: usize) -> Result<(), Failure> {
    if failures > 0 {
        Err(Failure::Roles(failures))
    } else {
        Ok(())
    }
}

fn print_metrics(m: &MetricsReport) {
    println!("accuracy {:.4} ({}/{})", m.accuracy, m.correct, m.total);
    if m.degraded > 0 || m.role_failures > 0 {
        println!("degraded {} role failures {}", m.degraded, m.role_failures);
    }
}

fn cmd_stage(cli: &Cli, config: Config) -> Result<(), Failure> {
    let session = Session::open(config)?;
    let dir = session.run_dir(&session.config.run.out_dir)?;
    let failures = match cli.command {
        Command::Warmup => {
            let (_, failures) = session.with_pipeline(&dir, |p| {
                let mut bank = KnowledgeBank::new();
                p.warmup(&mut bank)
            })?;
            println!("warmup bank written to {}", dir.bank_path().display());
            failures
        }
        Command::Train => {
            let mut bank = dir.read_bank()?;
            let (_, failures) = session.with_pipeline(&dir, |p| p.train(&mut bank))?;
            println!("trained bank has {} bullets", bank.len());
            failures
        }
        Command::Test => {
            let mut bank = dir.read_bank()?;
            let stages = session.config.run.stages;
            let (metrics, failures) = session.with_pipeline(&dir, |p| {
                if stages.test_update && stages.second_pass {
                    p.run_test(&mut bank)
                } else {
                    p.evaluate_only(&bank)
                }
            })?;
            dir.write("bank.json", &bank.snapshot())?;
            dir.write_json("metrics.json", &metrics)?;
            print_metrics(&metrics);
            failures
        }
        Command::Run => {
            let (outcome, failures) = session.with_pipeline(&dir, run_all)?;
            print_metrics(&outcome.metrics);
            failures
        }
        _ => unreachable!("not a pipeline stage"),
    };
    roles_result(failures)
}

#[derive(Debug, Serialize)]
struct AblationRow {
    variant: Variant,
    label: &'static str,
    accuracy: f64,
    correct: usize,
    total: usize,
    role_failures: usize,
}

fn cmd_ablate(config: Config) -> Result<(), Failure> {
    let root = config.run.out_dir.clone();
    let mut rows = Vec::new();
    let mut total_failures = 0;
    for variant in Variant::ALL {
        let mut variant_config = config.clone();
        variant_config.run.stages = variant.stages();
        variant_config.run.out_dir = root.join(variant.key());
        let session = Session::open(variant_config)?;
        let dir = session.run_dir(&session.config.run.out_dir)?;
        let (outcome, failures) = session.with_pipeline(&dir, run_all)?;
        total_failures += failures;
        rows.push(AblationRow {
            variant,
            label: variant.label(),
            accuracy: outcome.metrics.accuracy,
            correct: outcome.metrics.correct,
            total: outcome.metrics.total,
            role_failures: failures,
        });
    }
    RunDir::create(&root)?.write_json("ablation.json", &rows)?;
    println!("{:<32} {:>8} {:>9} {:>9}", "variant", "accuracy", "correct", "failures");
    for r in &rows {
        println!(
            "{:<32} {:>8.4} {:>9} {:>9}",
            r.label,
            r.accuracy,
            format!("{}/{}", r.correct, r.total),
            r.role_failures
        );
    }
    roles_result(total_failures)
}

fn read_snapshot(path: &Path) -> Result<KnowledgeBank, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Runtime)?;
    KnowledgeBank::restore(&text).map_err(|e| Failure::Runtime(e.into()))
}

fn cmd_inspect(path: &Path) -> Result<(), Failure> {
    let bank = read_snapshot(path)?;
    println!(
        "phase {}  step {}  bullets {}  next id {}  tokens {}  log entries {}",
        bank.phase(),
        bank.step(),
        bank.len(),
        bank.next_id(),
        bank.token_count(),
        bank.op_log().len()
    );
    for section in Section::ALL {
        println!("\n## {}", section.header());
        for b in bank.bullets().filter(|b| b.section == section) {
            let tier = match b.tier {
                Tier::Prototype => "prototype",
                Tier::Reference => "reference",
                Tier::Candidate => "candidate",
            };
            println!(
                "[{}] {tier:<9} score {:>3}  +{} -{} ={}  scope [{}]\n    {}",
                b.id,
                b.score,
                b.tags.helpful,
                b.tags.harmful,
                b.tags.neutral,
                b.class_scope.join(", "),
                b.content
            );
        }
    }
    Ok(())
}

fn cmd_replay(path: &Path) -> Result<(), Failure> {
    let snapshot = read_snapshot(path)?;
    let mut replayed = KnowledgeBank::replay(snapshot.op_log());
    replayed.set_step(snapshot.step());
    if replayed == snapshot {
        println!("banks identical ({} log entries, {} bullets)", snapshot.op_log().len(), snapshot.len());
        return Ok(());
    }
    let ids = |b: &KnowledgeBank| b.bullets().map(|x| x.id).collect::<Vec<_>>();
    println!("banks differ");
    println!("snapshot ids: {:?}", ids(&snapshot));
    println!("replayed ids: {:?}", ids(&replayed));
    for b in snapshot.bullets() {
        if replayed.get(b.id) != Some(b) {
            println!("bullet {} differs", b.id);
        }
    }
    Err(Failure::Runtime(anyhow::anyhow!("replayed bank does not match {}", path.display())))
}

fn cmd_plot(config: Config, sample_id: &str, output: &Path) -> Result<(), Failure> {
    let (train, test) = config.load_datasets()?;
    let sample = train
        .samples
        .iter()
        .chain(&test.samples)
        .find(|s| s.sample_id == sample_id)
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("no sample with id {sample_id:?}")))?;
    let png = render_line_plot(sample, &config.plot).map_err(|e| Failure::Runtime(e.into()))?;
    std::fs::write(output, png)
        .with_context(|| format!("writing {}", output.display()))
        .map_err(Failure::Runtime)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let config = load_config(cli)?;
    let default_bank = || config.run.out_dir.join("bank.json");
    match &cli.command {
        Command::Warmup | Command::Train | Command::Test | Command::Run => cmd_stage(cli, config.clone()),
        Command::Ablate => cmd_ablate(config.clone()),
        Command::Inspect { bank } => cmd_inspect(&bank.clone().unwrap_or_else(default_bank)),
        Command::Replay { bank } => cmd_replay(&bank.clone().unwrap_or_else(default_bank)),
        Command::Plot { sample, output } => cmd_plot(config.clone(), sample, output),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Roles(n)) => {
            eprintln!("error: {n} role call(s) failed; outputs were written");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
    }
}
