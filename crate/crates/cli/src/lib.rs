//! Commands behind the `timesclip` binary: train, eval, ablate, render, synth.
//! Each returns its result and writes its artifacts; `main.rs` only parses
//! arguments and formats errors.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use timesclip_core::checkpoint::Checkpoint;
use timesclip_core::config::{MetricMode, RunConfig};
use timesclip_core::dataset::{make_windows, RawSeries, SeriesWindow, Split, SplitWindows};
use timesclip_core::metrics::{EvalOptions, MetricReport};
use timesclip_core::model::{Ablations, TimesClip};
use timesclip_core::raster::{color_name, render_sample};
use timesclip_core::select::Fusion;
use timesclip_core::training::{self, EpochLog, StopReason, TrainOutcome};
use timesclip_core::{synth, Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train.log";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

/// Loaded series and their chronological windows.
pub struct Prepared {
    pub series: Vec<RawSeries>,
    pub windows: SplitWindows,
    pub variates: usize,
    pub period: usize,
    pub name: String,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let series = cfg.load_series()?;
    let first = series.first().ok_or_else(|| Error::EmptyInput("no series loaded".into()))?;
    let variates = first.values.cols();
    if let Some(s) = series.iter().find(|s| s.values.cols() != variates) {
        return Err(Error::DimMismatch(format!(
            "series `{}` has {} variates, `{}` has {variates}",
            s.name,
            s.values.cols(),
            first.name
        )));
    }
    let windows = SplitWindows::build_many(&series, &cfg.split, cfg.lookback, cfg.horizon, cfg.stride)?;
    let name = if series.len() == 1 {
        first.name.clone()
    } else {
        format!("{} ({} series)", first.name, series.len())
    };
    Ok(Prepared {
        period: first.period.max(1),
        variates,
        name,
        windows,
        series,
    })
}

fn eval_options(cfg: &RunConfig, period: usize) -> EvalOptions {
    EvalOptions {
        period,
        mase_mode: cfg.metrics.mase_mode,
        naive2: cfg.metrics.naive2,
    }
}

/// Metric report for `preds` on `windows`, labelled and with any configured reference applied.
pub fn score(cfg: &RunConfig, prep_name: &str, period: usize, split: Split, run: &str, windows: &[SeriesWindow], preds: &[timesclip_core::tensor::DenseArray]) -> Result<MetricReport> {
    let mut r = training::report_for(windows, preds, &eval_options(cfg, period))?;
    r.dataset = prep_name.to_string();
    r.split = split.as_str().to_string();
    r.run = run.to_string();
    if let Some(reference) = cfg.metrics.reference {
        r.set_reference(reference);
    }
    Ok(r)
}

/// One-line human summary in the configured metric mode.
pub fn summary(cfg: &RunConfig, r: &MetricReport) -> String {
    let opt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.4}"));
    match cfg.metrics.mode {
        MetricMode::LongTerm => format!("{} {}: mse={:.6} mae={:.6}", r.run, r.split, r.mse, r.mae),
        MetricMode::ShortTerm => format!(
            "{} {}: smape={:.4} mase={} owa={}",
            r.run,
            r.split,
            r.smape,
            opt(r.mase),
            opt(r.owa)
        ),
    }
}

pub struct TrainRun {
    pub model: TimesClip,
    pub outcome: TrainOutcome,
    pub report: MetricReport,
    /// Last-value naive forecast scored on the same test windows.
    pub naive: MetricReport,
    pub test_retrieval: Option<f64>,
    pub prepared: Prepared,
}

/// Train and score on the test split without writing anything.
pub fn run_training(cfg: &RunConfig, run: &str, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainRun> {
    let prep = prepare(cfg)?;
    let mut model = TimesClip::new(cfg.model_config(prep.variates), cfg.train.seed)?;
    let outcome = training::train(&mut model, &prep.windows.train, &prep.windows.val, &cfg.train, on_epoch)?;
    let test = &prep.windows.test;
    let preds = training::predict(&model, test, cfg.train.batch_size)?;
    let report = score(cfg, &prep.name, prep.period, Split::Test, run, test, &preds)?;
    let naive = score(
        cfg,
        &prep.name,
        prep.period,
        Split::Test,
        "naive",
        test,
        &training::naive_predictions(test),
    )?;
    let test_retrieval = if model.vision.is_some() && test.len() >= cfg.train.retrieval_batch {
        training::retrieval_accuracy(&model, test, cfg.train.retrieval_batch, cfg.train.seed)?
    } else {
        None
    };
    Ok(TrainRun {
        model,
        outcome,
        report,
        naive,
        test_retrieval,
        prepared: prep,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn stop_line(outcome: &TrainOutcome) -> String {
    let stop = match &outcome.stop {
        StopReason::Completed => "completed".to_string(),
        StopReason::EarlyStopped { epoch } => format!("early_stopped epoch={epoch}"),
        StopReason::Diverged { epoch, detail } => format!("diverged epoch={epoch} detail=\"{detail}\""),
    };
    format!("stop={stop} best_epoch={} best_val_gen={:.6}", outcome.best_epoch, outcome.best_val)
}

/// Train, then write the checkpoint, epoch log, test metrics and resolved
/// config under the configured output directory.
pub fn cmd_train(cfg: &RunConfig, progress: bool) -> Result<TrainRun> {
    let out = cfg.base_dir.join(&cfg.out);
    create_dir(&out)?;
    let mut snapshot = cfg.clone();
    if !cfg.data.path.is_empty() {
        let p = cfg.data_path();
        snapshot.data.path = p.canonicalize().unwrap_or(p).display().to_string();
    }
    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log_err = None;
    let run = run_training(cfg, "timesclip", |e| {
        if progress {
            eprintln!("{}", e.to_line());
        }
        if let Err(err) = writeln!(log, "{}", e.to_line()) {
            log_err.get_or_insert(err);
        }
    })?;
    writeln!(log, "{}", stop_line(&run.outcome)).map_err(|e| Error::io(&log_path, e))?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }

    let text = snapshot.to_text();
    write_file(&out.join(CONFIG_FILE), &text)?;
    let best_epoch = run.outcome.best_epoch + 1;
    Checkpoint::capture(&run.model, &text, cfg.train.seed, best_epoch, run.outcome.best_val, Some(&run.outcome.optimizer))
        .save(out.join(CHECKPOINT_FILE))?;
    let mut lines = String::new();
    for r in [&run.report, &run.naive] {
        lines.push_str(&r.to_json_line()?);
        lines.push('\n');
    }
    write_file(&out.join(METRICS_FILE), &lines)?;
    Ok(run)
}

/// Score a checkpoint on one split. The dataset comes from `data_cfg` when
/// given, otherwise from the configuration stored in the checkpoint.
pub fn cmd_eval(checkpoint: &Path, data_cfg: Option<&RunConfig>, split: Split) -> Result<MetricReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = match data_cfg {
        Some(c) => c.clone(),
        None => RunConfig::parse(&ck.config)?,
    };
    let m = &ck.model;
    let prep_series = cfg.load_series()?;
    let n = prep_series.first().map_or(0, |s| s.values.cols());
    if n != m.variates || cfg.lookback != m.lookback || cfg.horizon != m.horizon {
        return Err(Error::DimMismatch(format!(
            "checkpoint expects N={}, T={}, H_f={}; data has N={n}, T={}, H_f={}",
            m.variates, m.lookback, m.horizon, cfg.lookback, cfg.horizon
        )));
    }
    let prep = prepare(&cfg)?;
    let model = ck.restore()?;
    let windows = prep.windows.get(split);
    let preds = training::predict(&model, windows, cfg.train.batch_size)?;
    let r = score(&cfg, &prep.name, prep.period, split, "eval", windows, &preds)?;
    let out = match data_cfg {
        Some(c) => c.base_dir.join(&c.out),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    create_dir(&out)?;
    let path = out.join(format!("eval_{}.jsonl", split.as_str()));
    write_file(&path, &(r.to_json_line()? + "\n"))?;
    Ok(r)
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub section: &'static str,
    pub label: String,
    pub align: bool,
    pub colorize: bool,
    pub select: bool,
    pub fusion: Fusion,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub header: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub mode: MetricMode,
}

/// The five component rows (alignment, colorization, selection), then the
/// three fusion strategies on the full model.
pub fn ablation_grid() -> Vec<(&'static str, String, Ablations, Fusion)> {
    let flags = |align: bool, color: bool, select: bool| Ablations {
        no_align: !align,
        no_colorize: !color,
        no_select: !select,
        language_only: false,
    };
    let mut grid = vec![
        ("components", "no align, no color, no select".to_string(), flags(false, false, false), Fusion::ReplaceLast),
        ("components", "align, no color, no select".to_string(), flags(true, false, false), Fusion::ReplaceLast),
        ("components", "align, color, no select".to_string(), flags(true, true, false), Fusion::ReplaceLast),
        ("components", "align, no color, select".to_string(), flags(true, false, true), Fusion::ReplaceLast),
        ("components", "full model".to_string(), flags(true, true, true), Fusion::ReplaceLast),
    ];
    for f in Fusion::ALL {
        grid.push(("fusion", format!("fusion {}", f.as_str()), flags(true, true, true), f));
    }
    grid
}

impl AblationTable {
    fn metric_names(&self) -> &'static [&'static str] {
        match self.mode {
            MetricMode::LongTerm => &["MSE", "MAE"],
            MetricMode::ShortTerm => &["SMAPE", "MASE", "OWA"],
        }
    }

    fn values(&self, r: &MetricReport) -> Vec<Option<f64>> {
        match self.mode {
            MetricMode::LongTerm => vec![Some(r.mse), Some(r.mae)],
            MetricMode::ShortTerm => vec![Some(r.smape), r.mase, r.owa],
        }
    }

    /// Primary metric of a row (MSE or SMAPE); lower is better.
    pub fn primary(&self, row: &AblationRow) -> Option<f64> {
        let r = row.metrics.as_ref()?;
        Some(match self.mode {
            MetricMode::LongTerm => r.mse,
            MetricMode::ShortTerm => r.smape,
        })
    }

    fn find(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label).and_then(|r| self.primary(r))
    }

    /// Observed effect of each component, comparing rows that differ in that flag only.
    pub fn directions(&self) -> Vec<String> {
        let pairs = [
            ("alignment", "no align, no color, no select", "align, no color, no select"),
            ("colorization", "align, no color, no select", "align, color, no select"),
            ("colorization (with selection)", "align, no color, select", "full model"),
            ("selection", "align, no color, no select", "align, no color, select"),
            ("selection (with color)", "align, color, no select", "full model"),
        ];
        pairs
            .iter()
            .map(|(what, without, with)| match (self.find(without), self.find(with)) {
                (Some(a), Some(b)) => {
                    let dir = if b < a {
                        "improves"
                    } else if b > a {
                        "worsens"
                    } else {
                        "no change"
                    };
                    format!("{what}: {a:.6} -> {b:.6} ({dir})")
                }
                _ => format!("{what}: unavailable (a run failed)"),
            })
            .collect()
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut head: Vec<String> = ["section", "configuration", "align", "color", "select", "fusion"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        head.extend(self.metric_names().iter().map(|s| s.to_string()));
        let yes = |b: bool| if b { "yes" } else { "no" }.to_string();
        let mut cells = vec![head];
        for r in &self.rows {
            let mut c = vec![
                r.section.to_string(),
                r.label.clone(),
                yes(r.align),
                yes(r.colorize),
                yes(r.select),
                r.fusion.as_str().to_string(),
            ];
            match (&r.metrics, &r.error) {
                (Some(m), _) => c.extend(
                    self.values(m)
                        .into_iter()
                        .map(|v| v.map_or("absent".into(), |x| format!("{x:.6}"))),
                ),
                (None, e) => c.push(format!("FAILED: {}", e.as_deref().unwrap_or("unknown"))),
            }
            cells.push(c);
        }
        let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|j| cells.iter().filter_map(|r| r.get(j)).map(String::len).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for line in &self.header {
            let _ = writeln!(s, "# {line}");
        }
        for row in &cells {
            let parts: Vec<String> = row.iter().enumerate().map(|(j, c)| format!("{c:<w$}", w = widths[j])).collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        }
        let _ = writeln!(s, "# observed effects (lower is better; reported, not asserted):");
        for d in self.directions() {
            let _ = writeln!(s, "#   {d}");
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Run the ablation grid with one seed and one data split; a failing row is
/// recorded and the remaining rows still run. Writes `ablation.txt` and
/// `ablation.jsonl` under the output directory.
pub fn cmd_ablate(cfg: &RunConfig, progress: bool) -> Result<AblationTable> {
    let prep = prepare(cfg)?;
    let header = vec![
        format!(
            "ablation on {} (N={}, T={}, H_f={}), seed {}, identical data splits; only the flags below differ",
            prep.name, prep.variates, cfg.lookback, cfg.horizon, cfg.train.seed
        ),
        "desk-scale toy encoders trained from scratch: absolute numbers are NOT comparable to published".into(),
        "full-scale results (e.g. M4 weighted SMAPE 11.642, Exchange-96 MSE 0.083), which need pretrained".into(),
        "CLIP backbones and the full datasets; only the directions of effect are of interest here".into(),
    ];
    let mut rows = Vec::new();
    let mut full: Option<MetricReport> = None;
    for (section, label, ablations, fusion) in ablation_grid() {
        let mut c = cfg.clone();
        c.ablations = Ablations {
            language_only: false,
            ..ablations
        };
        c.fusion = fusion;
        let mut row = AblationRow {
            section,
            label: label.clone(),
            align: !ablations.no_align,
            colorize: !ablations.no_colorize,
            select: !ablations.no_select,
            fusion,
            seed: cfg.train.seed,
            metrics: None,
            error: None,
        };
        // The replace-last fusion row is the full model; reuse that run.
        let reuse = section == "fusion" && fusion == Fusion::ReplaceLast && full.is_some();
        let result = if reuse {
            Ok(full.clone().map(|mut r| {
                r.run = label.clone();
                r
            }))
        } else {
            if progress {
                eprintln!("ablation: {label}");
            }
            run_training(&c, &label, |e| {
                if progress {
                    eprintln!("  {}", e.to_line());
                }
            })
            .map(|r| Some(r.report))
        };
        match result {
            Ok(m) => {
                if label == "full model" {
                    full = m.clone();
                }
                row.metrics = m;
            }
            Err(e) => row.error = Some(format!("error[{}]: {e}", e.kind())),
        }
        rows.push(row);
    }
    let table = AblationTable {
        header,
        rows,
        mode: cfg.metrics.mode,
    };
    let out = cfg.base_dir.join(&cfg.out);
    create_dir(&out)?;
    write_file(&out.join("ablation.txt"), &table.to_text())?;
    write_file(&out.join("ablation.jsonl"), &table.to_jsonl()?)?;
    Ok(table)
}

/// Lookback windows addressed by `render`: one split, or every window of every series.
pub fn render_windows(cfg: &RunConfig, split: Option<Split>) -> Result<Vec<SeriesWindow>> {
    match split {
        Some(s) => Ok(prepare(cfg)?.windows.get(s).to_vec()),
        None => {
            let mut all = Vec::new();
            for s in cfg.load_series()? {
                all.extend(make_windows(&s, cfg.lookback, cfg.horizon, cfg.stride)?);
            }
            Ok(all)
        }
    }
}

/// Write one PNG per variate of window `index`; names carry the variate index and line color.
pub fn cmd_render(cfg: &RunConfig, index: usize, split: Option<Split>, out: &Path) -> Result<Vec<PathBuf>> {
    let windows = render_windows(cfg, split)?;
    let w = windows.get(index).ok_or(Error::OutOfRange {
        index,
        len: windows.len(),
    })?;
    let raster = cfg.model_config(w.variates()).raster_config();
    create_dir(out)?;
    let mut paths = Vec::new();
    for img in render_sample(&w.x, &raster)? {
        let color = color_name(img.variate_index, raster.colorize);
        let path = out.join(format!("sample{index:05}_v{:02}_{color}.png", img.variate_index));
        img.save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Write the configured synthetic series as CSV.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    let series = synth::generate(&cfg.synth)?;
    let path = out.join("synthetic.csv");
    synth::write_csv(&series, &path)?;
    Ok(path)
}
