use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use timesclip_cli as cli;
use timesclip_core::config::RunConfig;
use timesclip_core::dataset::Split;
use timesclip_core::{Error, Result};

#[derive(Parser)]
#[command(name = "timesclip", version, about = "Multimodal contrastive time-series forecasting at toy scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out` (for `render` and `synth`: the directory written to).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Draw every variate in the same line color.
    #[arg(long)]
    grayscale: bool,
    /// Drop the vision branch and the alignment loss.
    #[arg(long)]
    language_only: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured data and score the test split.
    Train(Common),
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the component and fusion ablation grid.
    Ablate(Common),
    /// Write one PNG per variate of one lookback window.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Index into this split's windows instead of all windows.
        #[arg(long)]
        split: Option<String>,
    },
    /// Write the configured synthetic series as CSV.
    Synth(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &c.out {
        let abs = std::path::absolute(out).map_err(|e| Error::io(out, e))?;
        cfg.out = abs.display().to_string();
    }
    if c.grayscale {
        cfg.ablations.no_colorize = true;
    }
    if c.language_only {
        cfg.ablations.language_only = true;
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.out.clone().unwrap_or_else(|| cfg.base_dir.join(&cfg.out))
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TIMESCLIP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::InvalidValue {
            key: "TIMESCLIP_THREADS".into(),
            detail: format!("expected a positive integer, got `{v}`"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.cmd {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let r = cli::cmd_train(&cfg, true)?;
            println!("{}", cli::summary(&cfg, &r.report));
            println!("{}", cli::summary(&cfg, &r.naive));
            if let Some(acc) = r.test_retrieval {
                println!("test retrieval accuracy (B={}): {acc:.4}", cfg.train.retrieval_batch);
            }
            println!("artifacts: {}", out_dir(&c, &cfg).display());
        }
        Command::Eval { common, checkpoint, split } => {
            let split = Split::parse(&split)?;
            let cfg = common.config.is_some().then(|| load_config(&common)).transpose()?;
            let r = cli::cmd_eval(&checkpoint, cfg.as_ref(), split)?;
            let shown = match &cfg {
                Some(c) => c.clone(),
                None => RunConfig::parse(&timesclip_core::checkpoint::Checkpoint::load(&checkpoint)?.config)?,
            };
            println!("{}", cli::summary(&shown, &r));
            println!("{}", r.to_json_line()?);
        }
        Command::Ablate(c) => {
            let cfg = load_config(&c)?;
            let table = cli::cmd_ablate(&cfg, true)?;
            print!("{}", table.to_text());
        }
        Command::Render { common, index, split } => {
            let cfg = load_config(&common)?;
            let split = split.as_deref().map(Split::parse).transpose()?;
            for p in cli::cmd_render(&cfg, index, split, &out_dir(&common, &cfg))? {
                println!("{}", p.display());
            }
        }
        Command::Synth(c) => {
            let cfg = load_config(&c)?;
            println!("{}", cli::cmd_synth(&cfg, &out_dir(&c, &cfg))?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
