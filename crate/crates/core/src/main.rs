use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nffb::experiment::{ablate, ablation_table, dump_levels, evaluate, fit, load_task, sweep, LoadedTask};
use nffb::io::{load_checkpoint, parse_config_as, RunConfig, TaskKind};
use nffb::{NffbError, Result};

/// Fit images and signed distance fields with a neural Fourier filter bank.
#[derive(Parser)]
#[command(name = "nffb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an image (P6 PPM or PNG).
    FitImage(RunArgs),
    /// Fit a signed distance field (analytic shape or point file).
    FitSdf(RunArgs),
    /// Report metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Replacement input file (image or point file).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train all four variants with matched seeds and print a comparison table.
    Ablate(RunArgs),
    /// One run per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// n_min, c_g, sigma_min, alpha, width or levels.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write per-level output renders of a checkpoint.
    DumpLevels {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the renders; defaults to `<run output>/levels`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Render size for images (defaults to the input image size) and slice resolution for SDFs.
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Total number of training steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Zero wall-clock column for byte-reproducible metrics.
    #[arg(long)]
    deterministic: bool,
    /// Image file (image task) or point file (SDF task).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration replaces --config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the configuration file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, task: TaskKind) -> Result<(RunConfig, Option<nffb::io::Checkpoint>)> {
        let (mut config, ckpt) = match &self.resume {
            Some(path) => {
                let ckpt = load_checkpoint(path)?;
                (ckpt.config.clone(), Some(ckpt))
            }
            None => {
                let text = match &self.config {
                    Some(p) => fs::read_to_string(p)?,
                    None => String::new(),
                };
                (parse_config_as(&text, task)?, None)
            }
        };
        if config.task != task {
            return Err(NffbError::Config(format!(
                "configuration is for the {} task, not {task}",
                config.task
            )));
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| NffbError::Config(format!("override '{o}' is not key=value")))?;
            if k.trim() == "task" {
                return Err(NffbError::Config("the task is set by the subcommand".into()));
            }
            config
                .set(k.trim(), v.trim())
                .map_err(|m| NffbError::Config(format!("override '{o}': {m}")))?;
        }
        if let Some(o) = &self.output {
            config.output = o.clone();
        }
        if let Some(s) = self.steps {
            config.steps = s;
        }
        if let Some(s) = self.seed {
            if ckpt.is_some() && s != config.model.seed {
                return Err(NffbError::Config("--seed cannot change the seed of a resumed run".into()));
            }
            config.model.seed = s;
        }
        if self.deterministic {
            config.deterministic = true;
        }
        if let Some(i) = &self.input {
            match task {
                TaskKind::Image => config.image = Some(i.clone()),
                TaskKind::Sdf => config.points = Some(i.clone()),
            }
        }
        config.validate()?;
        config.require_input()?;
        Ok((config, ckpt))
    }
}

fn print_echo(config: &RunConfig) {
    println!("# configuration");
    for line in config.to_text().lines() {
        println!("# {line}");
    }
}

fn print_eval(eval: &nffb::experiment::EvalReport) {
    for (name, value) in eval.fields() {
        println!("{name} = {value}");
    }
}

fn run_fit(args: &RunArgs, task: TaskKind) -> Result<()> {
    let (config, ckpt) = args.resolve(task)?;
    print_echo(&config);
    let report = fit(&config, ckpt)?;
    print_eval(&report.eval);
    println!("outputs in {}", config.output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitImage(args) => run_fit(&args, TaskKind::Image),
        Command::FitSdf(args) => run_fit(&args, TaskKind::Sdf),
        Command::Eval { checkpoint, input } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut config = ckpt.config.clone();
            if let Some(i) = input {
                match config.task {
                    TaskKind::Image => config.image = Some(i),
                    TaskKind::Sdf => config.points = Some(i),
                }
            }
            let task = load_task(&config)?;
            let model = ckpt.model()?;
            println!("step = {}", ckpt.state.step);
            print_eval(&evaluate(&config, &task, &model)?);
            Ok(())
        }
        Command::Ablate(args) => {
            let task = ablate_task(&args)?;
            let (config, _) = args.resolve(task)?;
            print_echo(&config);
            let rows = ablate(&config)?;
            let table = ablation_table(&rows);
            fs::create_dir_all(&config.output)?;
            fs::write(config.output.join("ablation.csv"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Sweep { run, param, values } => {
            let task = ablate_task(&run)?;
            let (config, _) = run.resolve(task)?;
            print_echo(&config);
            for row in sweep(&config, &param, &values)? {
                let fields: Vec<String> = row.eval.fields().iter().map(|(n, v)| format!("{n}={v}")).collect();
                println!("{param}={} {} metrics={}", row.value, fields.join(" "), row.metrics.display());
            }
            Ok(())
        }
        Command::DumpLevels {
            checkpoint,
            output,
            size,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let config = &ckpt.config;
            let model = ckpt.model()?;
            let dims = match (config.task, size) {
                (_, Some(s)) => (s, s),
                (TaskKind::Image, None) => match load_task(config) {
                    Ok(LoadedTask::Image(t)) => (t.image.width, t.image.height),
                    _ => (256, 256),
                },
                (TaskKind::Sdf, None) => (config.slice_res, config.slice_res),
            };
            let out = output.unwrap_or_else(|| config.output.join("levels"));
            for path in dump_levels(config, &model, &out, dims)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

/// Task of an `ablate` or `sweep` run: from the resumed checkpoint or the
/// configuration file, image when unspecified.
fn ablate_task(args: &RunArgs) -> Result<TaskKind> {
    if args.resume.is_some() {
        return Err(NffbError::Config("ablate and sweep start fresh runs; --resume is not accepted".into()));
    }
    let text = match &args.config {
        Some(p) => fs::read_to_string(Path::new(p))?,
        None => String::new(),
    };
    Ok(parse_config_as(&text, TaskKind::Image)?.task)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
