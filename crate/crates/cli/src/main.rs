//! `trafficsift` command line.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use trafficsift_core::config::{RunConfig, RunMode, SettingName};
use trafficsift_core::dataset::{load_records, make_setting_bundle, synth_gaussians, write_records, FlowRecord, RecordSchema};
use trafficsift_core::evaluation::{run_experiment, sweep, write_sweep_csv, SweepAxis};
use trafficsift_core::pipeline::{read_run_log, write_run_log, ExpertPolicy, PipelineState, StepReport};
use trafficsift_service::Driver;

#[derive(Parser)]
#[command(name = "trafficsift", version, about = "Self-training flow classification with unknown traffic discovery")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Values that override the config file.
#[derive(Args)]
struct Overrides {
    /// JSON run configuration; flags below take precedence over its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flow records CSV; without it the synthetic benchmark is generated.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory (a file path for `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// no-expert, with-expert or interactive.
    #[arg(long, global = true)]
    mode: Option<RunMode>,
    /// synthetic, setting1, setting2 or custom.
    #[arg(long, global = true)]
    setting: Option<SettingName>,
    #[arg(long, global = true)]
    max_steps: Option<u64>,
    #[arg(long, global = true)]
    port: Option<u16>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian dataset.
    Synth {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        separation: Option<f64>,
    },
    /// Run one experiment and write its log, result and confusion matrix.
    Run,
    /// Run one experiment per value along an axis.
    Sweep {
        /// known_fraction, n_known_classes or n_unknown_classes.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Summarize run logs, one line per step.
    Report {
        /// Run log files or run output directories.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
    /// Run the pipeline behind the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.setting {
            cfg.setting = v;
        }
        if let Some(v) = self.max_steps {
            cfg.max_steps = v;
        }
        if let Some(v) = self.port {
            cfg.port = v;
        }
        // Fail on inconsistent values before any work starts.
        cfg.setting()?;
        cfg.experiment()?;
        Ok(cfg)
    }
}

fn records(cfg: &RunConfig) -> Result<Vec<FlowRecord>> {
    Ok(match &cfg.data {
        Some(path) => load_records(path, &RecordSchema::default())?,
        None => synth_gaussians(
            cfg.synth_classes,
            cfg.synth_per_class,
            cfg.synth_dim,
            cfg.synth_separation,
            cfg.seed,
        )?,
    })
}

/// Creates the output directory and stores the resolved config in it.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(out.join("config.json"))?;
    Ok(out)
}

fn cmd_synth(
    mut cfg: RunConfig,
    classes: Option<usize>,
    per_class: Option<usize>,
    dim: Option<usize>,
    separation: Option<f64>,
) -> Result<()> {
    cfg.synth_classes = classes.unwrap_or(cfg.synth_classes);
    cfg.synth_per_class = per_class.unwrap_or(cfg.synth_per_class);
    cfg.synth_dim = dim.unwrap_or(cfg.synth_dim);
    cfg.synth_separation = separation.unwrap_or(cfg.synth_separation);
    cfg.data = None;
    let recs = records(&cfg)?;
    let path = cfg.out.clone().unwrap_or_else(|| PathBuf::from("synthetic.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_records(&path, &recs)?;
    println!("wrote {} records to {}", recs.len(), path.display());
    Ok(())
}

fn cmd_run(cfg: RunConfig) -> Result<()> {
    if cfg.mode == RunMode::Interactive {
        bail!("interactive mode needs an expert at the HTTP API; use `serve`");
    }
    let recs = records(&cfg)?;
    let out = prepare_out(&cfg)?;
    let result = run_experiment(&recs, &cfg.setting()?, &cfg.experiment()?)?;
    write_run_log(out.join("run_log.jsonl"), &result.reports)?;
    result.write_json(out.join("result.json"))?;
    let confusion = out.join("confusion.csv");
    let file = std::fs::File::create(&confusion).with_context(|| format!("creating {}", confusion.display()))?;
    result.confusion.write_csv(file)?;

    let s = &result.summary;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  fpr {:.4}",
        result.metrics.accuracy, result.metrics.precision, result.metrics.recall, result.metrics.fpr
    );
    println!(
        "known accuracy {:.4}  unknown recall {}  pseudo-label precision {} ({} accepted)",
        s.known_accuracy,
        opt(s.unknown_recall),
        opt(s.pseudo_label_precision),
        s.pseudo_labels_accepted
    );
    println!(
        "{} steps{}, label set grew by {}, expert labeled {:.1}% of training",
        s.steps,
        if s.quiesced { " to quiescence" } else { "" },
        s.label_set_growth,
        100.0 * s.expert_proportion
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_sweep(cfg: RunConfig, axis: SweepAxis, values: &[f64]) -> Result<()> {
    if cfg.mode == RunMode::Interactive {
        bail!("sweeps cannot wait for an interactive expert; use no-expert or with-expert");
    }
    let recs = records(&cfg)?;
    let out = prepare_out(&cfg)?;
    let rows = sweep(&recs, &cfg.setting()?, axis, values, &cfg.experiment()?)?;
    let path = out.join("sweep.csv");
    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_sweep_csv(&rows, file)?;
    write_sweep_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}

fn report_line(r: &StepReport) -> String {
    let eval = r
        .evaluation
        .as_ref()
        .map(|e| format!(", accuracy {:.4}, fpr {:.4}", e.metrics.accuracy, e.metrics.fpr))
        .unwrap_or_default();
    format!(
        "step {:>2}: pool {}, accepted {}, unknown {}, deferred {}, noise {}, {} clusters, labeled {}, classes [{}]{}",
        r.step,
        r.pool_size,
        r.counts.accepted,
        r.counts.detected_unknown,
        r.counts.deferred,
        r.counts.noise,
        r.n_clusters,
        r.labeled_size,
        r.label_set.join(", "),
        eval
    )
}

fn cmd_report(logs: &[PathBuf]) -> Result<()> {
    for path in logs {
        let file = if path.is_dir() { path.join("run_log.jsonl") } else { path.clone() };
        let reports = read_run_log(&file)?;
        println!("{} ({} steps)", file.display(), reports.len());
        for r in &reports {
            println!("  {}", report_line(r));
        }
    }
    Ok(())
}

fn cmd_serve(cfg: RunConfig, host: IpAddr) -> Result<()> {
    let policy = match cfg.mode {
        RunMode::NoExpert => ExpertPolicy::None,
        RunMode::WithExpert => ExpertPolicy::Oracle,
        RunMode::Interactive => ExpertPolicy::External,
    };
    let recs = records(&cfg)?;
    let out = prepare_out(&cfg)?;
    let bundle = make_setting_bundle(&recs, &cfg.setting()?)?;
    let state = PipelineState::with_policy(bundle, policy, cfg.pipeline()?)?;
    let (driver, hub) = Driver::new(state, cfg.stop()?);

    let worker = std::thread::spawn(move || -> Result<()> {
        let (state, reports) = driver.run()?;
        write_run_log(out.join("run_log.jsonl"), &reports)?;
        state.checkpoint(out.join("checkpoint.json"))?;
        info!("run finished after {} steps; outputs in {}", reports.len(), out.display());
        Ok(())
    });

    let addr = SocketAddr::new(host, cfg.port);
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(trafficsift_service::serve(std::sync::Arc::clone(&hub), addr))
        .with_context(|| format!("serving on {addr}"))?;
    hub.shutdown();
    match worker.join() {
        Ok(r) => r,
        Err(_) => bail!("pipeline thread panicked"),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = cli.overrides.resolve()?;
    match cli.command {
        Command::Synth {
            classes,
            per_class,
            dim,
            separation,
        } => cmd_synth(cfg, classes, per_class, dim, separation),
        Command::Run => cmd_run(cfg),
        Command::Sweep { axis, values } => cmd_sweep(cfg, axis, &values),
        Command::Report { logs } => cmd_report(&logs),
        Command::Serve { host } => cmd_serve(cfg, host),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("M3S_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
