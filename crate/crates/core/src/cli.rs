//! Subcommand implementations behind the `fedyoyo` binary. Each writes its
//! human-readable output to `w` and its artifacts under `out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{write_data_dir, ExperimentConfig, SweepParam};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, ExperimentData, ExperimentResult};
use crate::metrics::RoundMetrics;

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_COLUMNS: [&str; 7] = [
    "variant",
    "acc_all",
    "acc_many",
    "acc_medium",
    "acc_few",
    "nc_mean_angle",
    "prior_l2",
];

/// Process exit status for an error: 2 for configuration, 3 for runtime.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_config_error() {
        2
    } else {
        3
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn summary_row(m: &RoundMetrics) -> String {
    [
        m.algorithm.clone(),
        format!("{:.4}", m.acc_all),
        opt(m.acc_many),
        opt(m.acc_medium),
        opt(m.acc_few),
        opt(m.nc_mean_angle),
        opt(m.prior_l2),
    ]
    .join(",")
}

pub fn log_path(out: &Path, variant: &str) -> PathBuf {
    out.join(format!("{variant}.csv"))
}

/// Writes dataset and partition files and prints the per-client class
/// count table.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, w: &mut dyn Write) -> Result<ExperimentData> {
    let data = cfg.data.generate(cfg.seed)?;
    write_data_dir(out, &data)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    write_count_table(&data, w)?;
    Ok(data)
}

pub fn write_count_table(data: &ExperimentData, w: &mut dyn Write) -> Result<()> {
    let c = data.train.num_classes();
    let header: Vec<String> = (0..c).map(|j| format!("c{j}")).collect();
    writeln!(w, "client,{},total", header.join(","))?;
    for k in 0..data.partition.num_clients() {
        let counts = data.partition.client_class_counts(k);
        let cells: Vec<String> = counts.iter().map(usize::to_string).collect();
        writeln!(w, "{k},{},{}", cells.join(","), data.partition.client_size(k))?;
    }
    let totals: Vec<String> = data.train.class_counts().iter().map(usize::to_string).collect();
    writeln!(w, "all,{},{}", totals.join(","), data.train.len())?;
    Ok(())
}

fn write_result(out: &Path, result: &ExperimentResult) -> Result<()> {
    let name = &result.initial.algorithm;
    fs::write(log_path(out, name), result.csv_log())?;
    fs::write(out.join(format!("{name}.jsonl")), result.json_log())?;
    let mut ckpt = Vec::new();
    result.server.params.write_checkpoint(&mut ckpt)?;
    fs::write(out.join(format!("{name}.ckpt")), ckpt)?;
    Ok(())
}

fn train_variants(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RoundMetrics>> {
    let variants = cfg.variants()?;
    let data = cfg.data.load_or_generate(cfg.seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let mut finals = Vec::with_capacity(variants.len());
    for v in variants {
        let result = run_experiment(&cfg.train_config(v)?, &data)?;
        write_result(out, &result)?;
        finals.push(result.final_metrics().clone());
    }
    Ok(finals)
}

/// Runs every configured variant on shared data, writes logs and
/// checkpoints, and prints a final summary table.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, w: &mut dyn Write) -> Result<Vec<RoundMetrics>> {
    let finals = train_variants(cfg, out)?;
    writeln!(w, "{}", SUMMARY_COLUMNS.join(","))?;
    for m in &finals {
        writeln!(w, "{}", summary_row(m))?;
    }
    Ok(finals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: RoundMetrics,
}

pub fn sweep_dir(out: &Path, param: SweepParam, value: f64) -> PathBuf {
    out.join(format!("{}={value}", param.name()))
}

/// Paired runs across `values` of one parameter; every run shares the seed.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    out: &Path,
    w: &mut dyn Write,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| cfg.with_param(param, v))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (&value, c) in values.iter().zip(&configs) {
        for metrics in train_variants(c, &sweep_dir(out, param, value))? {
            rows.push(SweepRow { value, metrics });
        }
    }
    let mut table = format!("{},variant,acc_all,acc_few\n", param.name());
    for r in &rows {
        table.push_str(&format!(
            "{},{},{:.4},{}\n",
            r.value,
            r.metrics.algorithm,
            r.metrics.acc_all,
            opt(r.metrics.acc_few)
        ));
    }
    fs::write(out.join("sweep.csv"), &table)?;
    w.write_all(table.as_bytes())?;
    Ok(rows)
}

/// A validated round log with its original lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub path: PathBuf,
    pub lines: Vec<String>,
    pub rows: Vec<RoundMetrics>,
}

impl RoundLog {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != RoundMetrics::csv_header() {
            return Err(Error::Parse {
                line: 1,
                detail: format!("{}: unexpected header", path.display()),
            });
        }
        let mut kept = Vec::new();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row = RoundMetrics::from_csv_row(line, i + 2).map_err(|e| match e {
                Error::Parse { line, detail } => Error::Parse {
                    line,
                    detail: format!("{}: {detail}", path.display()),
                },
                other => other,
            })?;
            kept.push(line.to_string());
            rows.push(row);
        }
        Ok(Self {
            path: path.to_path_buf(),
            lines: kept,
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(path, &fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Header, then for each aligned round one row per log in input order.
    pub curves: String,
    /// Header, then the last aligned row of each log.
    pub finals: String,
    pub warnings: Vec<String>,
}

pub fn build_report(logs: &[RoundLog]) -> Result<Report> {
    if logs.is_empty() {
        return Err(Error::Config("report needs at least one log".into()));
    }
    let len = logs.iter().map(|l| l.rows.len()).min().unwrap_or(0);
    let mut warnings = Vec::new();
    if logs.iter().any(|l| l.rows.len() != len) {
        let counts: Vec<String> = logs
            .iter()
            .map(|l| format!("{}: {}", l.path.display(), l.rows.len()))
            .collect();
        warnings.push(format!(
            "round counts differ ({}); aligning on the first {len}",
            counts.join(", ")
        ));
    }
    let header = RoundMetrics::csv_header();
    let mut curves = format!("{header}\n");
    for i in 0..len {
        for log in logs {
            curves.push_str(&log.lines[i]);
            curves.push('\n');
        }
    }
    let mut finals = format!("{header}\n");
    if len > 0 {
        for log in logs {
            finals.push_str(&log.lines[len - 1]);
            finals.push('\n');
        }
    }
    Ok(Report {
        curves,
        finals,
        warnings,
    })
}

/// Merges round logs. Curves go to `w`; with `out`, both curves and the
/// final-round comparison are also written there.
pub fn cmd_report(
    paths: &[PathBuf],
    out: Option<&Path>,
    w: &mut dyn Write,
    warn: &mut dyn Write,
) -> Result<Report> {
    let logs: Vec<RoundLog> = paths.iter().map(|p| RoundLog::read(p)).collect::<Result<_>>()?;
    let report = build_report(&logs)?;
    for msg in &report.warnings {
        writeln!(warn, "warning: {msg}")?;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("curves.csv"), &report.curves)?;
        fs::write(dir.join("final.csv"), &report.finals)?;
    }
    w.write_all(report.curves.as_bytes())?;
    Ok(report)
}
