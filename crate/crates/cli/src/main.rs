use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use exclusion_core::attacks::write_attack_csv;
use exclusion_core::dataset::{save_dataset, DataFormat, DatasetSchema};
use exclusion_core::ensemble::OutputMode;
use exclusion_core::harness::{
    emit_report, load_report_csv, render_table_csv, render_table_json, serve_lines, serve_tcp, Arm, Bundle, Evaluation, ExperimentConfig, Lab, Report,
    ReportFormat, SweepKind,
};

#[derive(Parser)]
#[command(name = "exlab", version, about = "Partitioned ensembles with member exclusion, and the attacks that probe them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset plus its schema sidecar.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output data file; the schema goes to `<out>.schema.toml`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: DataFormat,
    },
    /// Train subset models, the full model and oracles into a bundle.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Run every configured attack against every configured arm.
    Attack {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rotation or translation sweep against every configured arm.
    Sweep {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        kind: SweepKind,
        /// Comma-separated grid; defaults to `sweep.rotation` or `sweep.translation`.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render a report (JSON or CSV) as CSV or JSON.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer base64 pixel lines with JSON predictions.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "coe")]
        arm: Arm,
        /// Overrides the bundle's `output_mode`.
        #[arg(long)]
        output_mode: Option<OutputMode>,
        /// TCP address; stdin/stdout when absent.
        #[arg(long)]
        listen: Option<String>,
        /// Stop after this many TCP connections.
        #[arg(long)]
        max_connections: Option<usize>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set partition.n=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=<SEED>`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set partition.n=<N>`.
    #[arg(long)]
    n: Option<usize>,
    /// Shorthand for `--set output_mode=<MODE>`.
    #[arg(long)]
    output_mode: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(n) = self.n {
            overrides.push(format!("partition.n={n}"));
        }
        if let Some(mode) = &self.output_mode {
            overrides.push(format!("output_mode=\"{mode}\""));
        }
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path).with_context(|| format!("config: reading {}", path.display()))?,
            None => String::new(),
        };
        ExperimentConfig::with_overrides(&text, &overrides).context("config")
    }
}

#[derive(Args)]
struct SourceArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Reuse a trained bundle instead of training from the config.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

impl SourceArgs {
    fn lab(&self) -> Result<Lab> {
        match &self.bundle {
            Some(dir) => {
                let bundle = Bundle::load(dir).with_context(|| format!("bundle: loading {}", dir.display()))?;
                let mut lab = bundle.into_lab().context("bundle")?;
                if !self.config.overrides.is_empty() || self.config.output_mode.is_some() {
                    let text = lab.cfg.to_toml_string()?;
                    let mut args = self.config.overrides.clone();
                    if let Some(mode) = &self.config.output_mode {
                        args.push(format!("output_mode=\"{mode}\""));
                    }
                    let cfg = ExperimentConfig::with_overrides(&text, &args).context("config")?;
                    if cfg.data != lab.cfg.data || cfg.split != lab.cfg.split || cfg.seed != lab.cfg.seed {
                        bail!("config: overrides may not change data, split or seed of a trained bundle");
                    }
                    lab.cfg = cfg;
                }
                Ok(lab)
            }
            None => Ok(Lab::build(self.config.load()?)?),
        }
    }
}

fn output_dir(cli_out: Option<PathBuf>, cfg: &ExperimentConfig) -> Option<PathBuf> {
    cli_out.or_else(|| cfg.output.dir.clone())
}

fn write_evaluation(eval: &Evaluation, dir: Option<&Path>, stem: &str) -> Result<()> {
    match dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("report: creating {}", dir.display()))?;
            emit_report(&eval.report, &dir.join(format!("{stem}.csv")), ReportFormat::Csv)?;
            emit_report(&eval.report, &dir.join(format!("{stem}.json")), ReportFormat::Json)?;
            let file = std::fs::File::create(dir.join(format!("{stem}_scores.csv")))
                .context("report: creating score file")?;
            write_attack_csv(&eval.outcomes, BufWriter::new(file))?;
            eprintln!("wrote {}/{stem}.{{csv,json}} and {stem}_scores.csv", dir.display());
        }
        None => print!("{}", eval.report.to_csv_string()?),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, format } => {
            let cfg = config.load()?;
            let data = cfg.data.synthetic_spec()?.generate()?;
            save_dataset(&data, &out, format).with_context(|| format!("data: writing {}", out.display()))?;
            DatasetSchema::of(&data).write(&DatasetSchema::sidecar_path(&out))?;
            eprintln!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train { config, bundle } => {
            let lab = Lab::build(config.load()?)?;
            lab.save_bundle(&bundle).with_context(|| format!("bundle: writing {}", bundle.display()))?;
            eprintln!("wrote bundle {}", bundle.display());
        }
        Command::Attack { source, out } => {
            let lab = source.lab()?;
            let eval = lab.evaluate()?;
            write_evaluation(&eval, output_dir(out, &lab.cfg).as_deref(), "report")?;
        }
        Command::Sweep { source, kind, grid, out } => {
            let lab = source.lab()?;
            let grid = if grid.is_empty() {
                match kind {
                    SweepKind::Rotation => lab.cfg.sweep.rotation.clone(),
                    SweepKind::Translation => lab.cfg.sweep.translation.iter().map(|&d| d as f64).collect(),
                }
            } else {
                grid
            };
            let eval = lab.sweep(kind, &grid)?;
            let stem = match kind {
                SweepKind::Rotation => "sweep_rotation",
                SweepKind::Translation => "sweep_translation",
            };
            write_evaluation(&eval, output_dir(out, &lab.cfg).as_deref(), stem)?;
        }
        Command::Report { input, format, out } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("report: reading {}", input.display()))?;
            let rendered = if text.trim_start().starts_with('{') {
                let report = Report::from_json(&text).context("report")?;
                match format {
                    ReportFormat::Csv => report.to_csv_string()?,
                    ReportFormat::Json => report.to_json_string()?,
                }
            } else {
                let rows = load_report_csv(text.as_bytes()).context("report")?;
                match format {
                    ReportFormat::Csv => render_table_csv(&rows)?,
                    ReportFormat::Json => render_table_json(&rows)?,
                }
            };
            match out {
                Some(path) => std::fs::write(&path, rendered).with_context(|| format!("report: writing {}", path.display()))?,
                None => print!("{rendered}"),
            }
        }
        Command::Serve {
            bundle,
            arm,
            output_mode,
            listen,
            max_connections,
        } => {
            let bundle = Bundle::load(&bundle).with_context(|| format!("bundle: loading {}", bundle.display()))?;
            let mode = output_mode.unwrap_or(bundle.cfg.output_mode);
            let target = bundle.target(arm, mode).context("serve")?;
            match listen {
                Some(addr) => {
                    eprintln!("serving {arm} on {addr}");
                    serve_tcp(target.as_ref(), bundle.shape, &addr, max_connections).context("serve")?;
                }
                None => {
                    let stdin = std::io::stdin();
                    let stdout = std::io::stdout();
                    serve_lines(target.as_ref(), bundle.shape, BufReader::new(stdin.lock()), stdout.lock())
                        .context("serve")?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("exlab: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
