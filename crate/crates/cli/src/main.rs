use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clipiod::evaluation::{ApMode, Stage};
use clipiod::runner::{
    cmd_ablate, cmd_eval, cmd_sweep_distill, execute_run, prepare_data, RunConfig, RunError,
};
use clipiod::trainer::Toggles;

/// Two-stage incremental object detection with a vision-language text head.
///
/// Every subcommand reads a TOML run config. Flags given on the command line
/// replace the matching config values; everything else comes from the file.
/// Set CLIPIOD_CACHE_DIR to cache oracle text embeddings on disk.
#[derive(Parser)]
#[command(name = "clipiod", version)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the default desk-scale synthetic config.
    InitConfig {
        /// Destination TOML file.
        out: PathBuf,
        #[arg(long, default_value = "data/synthetic")]
        data_root: PathBuf,
        #[arg(long, default_value = "runs/synthetic")]
        out_dir: PathBuf,
    },
    /// Render the synthetic dataset of a config into its data root.
    PrepareData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train both tasks, evaluate each stage and write all artifacts.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-evaluate a saved checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Also write per-class JSON lines here.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Run the four method rows and tabulate T1/T2 base, novel and all mAP.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Switches to vary, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "text,broad,image")]
        vary: Vec<String>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Task 2 mAP as a function of the distillation weight.
    SweepDistill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.5,1.0")]
        weights: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    T1,
    T2,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Method switches, e.g. `text+broad+image` or `none`.
    #[arg(long)]
    toggles: Option<Toggles>,
    /// Iterations per task.
    #[arg(long)]
    iters: Option<u64>,
    /// Start task 1 from this pseudo-annotation store.
    #[arg(long)]
    pseudo_store: Option<PathBuf>,
    /// `voc11` or `area`.
    #[arg(long)]
    ap_mode: Option<ApMode>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, RunError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.data_root {
            cfg.data_root = p.clone();
        }
        if let Some(p) = &self.out_dir {
            cfg.out_dir = p.clone();
        }
        if let Some(t) = self.toggles {
            cfg.toggles = t;
        }
        if let Some(n) = self.iters {
            cfg.train.iters_per_task = n;
        }
        if let Some(p) = &self.pseudo_store {
            cfg.pseudo_store = Some(p.clone());
        }
        if let Some(m) = self.ap_mode {
            cfg.ap_mode = m;
        }
        cfg.normalize();
        Ok(cfg)
    }
}

fn write(path: &std::path::Path, text: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, text).map_err(|source| RunError::Io { path: path.to_path_buf(), source })
}

fn dispatch(cmd: Cmd) -> Result<(), RunError> {
    match cmd {
        Cmd::InitConfig { out, data_root, out_dir } => {
            let cfg = RunConfig::synthetic(data_root, out_dir);
            write(&out, &cfg.to_toml_string()?)?;
            println!("wrote {}", out.display());
        }
        Cmd::PrepareData { cfg } => {
            let cfg = cfg.resolve()?;
            let (tv, te) = prepare_data(&cfg)?;
            println!("wrote {tv} trainval and {te} test images under {}", cfg.data_root.display());
        }
        Cmd::Run { cfg } => {
            let cfg = cfg.resolve()?;
            let out = execute_run(&cfg)?;
            print!("{}{}", out.report_t1.to_table(), out.report_t2.to_table());
            println!("artifacts in {}", cfg.out_dir.display());
        }
        Cmd::Eval { cfg, checkpoint, stage, jsonl } => {
            let cfg = cfg.resolve()?;
            let stage = match stage {
                StageArg::T1 => Stage::Task1,
                StageArg::T2 => Stage::Task2,
            };
            let report = cmd_eval(&cfg, &checkpoint, stage)?;
            print!("{}", report.to_table());
            if let Some(p) = jsonl {
                write(&p, &report.to_jsonl())?;
            }
        }
        Cmd::Ablate { cfg, vary, parallel } => {
            let cfg = cfg.resolve()?;
            let vary: Vec<String> = vary.into_iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            let table = cmd_ablate(&cfg, &vary, parallel)?;
            print!("{}", table.to_table());
        }
        Cmd::SweepDistill { cfg, weights, parallel } => {
            let cfg = cfg.resolve()?;
            let res = cmd_sweep_distill(&cfg, &weights, parallel)?;
            print!("{}", res.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.tag());
            ExitCode::FAILURE
        }
    }
}
