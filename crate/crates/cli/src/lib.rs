//! Command implementations behind the `mlcl` binary.
//!
//! Each `cmd_*` function does the work of one subcommand and reports failures
//! as a [`CliError`] carrying the process exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mlcl_core::harness::{run_experiment, write_outputs};
use mlcl_core::tasks::{generate_text_records, write_jsonl};
use mlcl_core::{cbt, cft, CbtRow, Error, ExperimentConfig, RunResult, ScoreMatrix, SyntheticStreamConfig};
use serde_json::Value;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))
}

fn read_json(path: &Path) -> CliResult<Value> {
    serde_json::from_str(&read_file(path)?)
        .map_err(|e| CliError::config(format!("{} is not valid JSON: {e}", path.display())))
}

/// Sets `key` (dot-separated path) to `value`; every segment must already
/// exist. The value is read as JSON, falling back to a plain string.
pub fn apply_override(doc: &mut Value, key: &str, value: &str) -> CliResult<()> {
    let mut node = doc;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::config(format!("override {key:?}: no config key {part:?}")))?;
    }
    *node = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok(())
}

fn parse_config(doc: Value, origin: &str) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_value(doc).map_err(|e| CliError::config(format!("{origin}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file and applies `key=value` overrides.
///
/// Overrides are applied to the fully defaulted document, so fields left
/// out of the file can still be set.
pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let origin = path.display().to_string();
    let cfg: ExperimentConfig =
        serde_json::from_value(read_json(path)?).map_err(|e| CliError::config(format!("{origin}: {e}")))?;
    if overrides.is_empty() {
        cfg.validate()?;
        return Ok(cfg);
    }
    let mut doc = serde_json::to_value(&cfg).map_err(|e| CliError::config(e.to_string()))?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override {o:?} is not of the form key=value")))?;
        apply_override(&mut doc, k.trim(), v)?;
    }
    parse_config(doc, &origin)
}

/// Runs the configured experiment and writes its outputs; returns the
/// output directory.
pub fn cmd_run(config: &Path, overrides: &[String], out: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = load_config(config, overrides)?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results").join(cfg.method_name()));
    let result = run_experiment(&cfg)?;
    write_outputs(&result, &dir)?;
    Ok(dir)
}

/// Writes the text rendering of a synthetic stream as `data.jsonl` and
/// `labels.txt` under `out`.
///
/// The config is either a bare synthetic-stream object or a full
/// experiment config with a synthetic stream.
pub fn cmd_generate_data(config: &Path, out: &Path) -> CliResult<(PathBuf, PathBuf)> {
    let doc = read_json(config)?;
    let stream = match doc.get("stream") {
        Some(s) => s
            .get("synthetic")
            .cloned()
            .ok_or_else(|| CliError::config("generate-data needs a synthetic stream"))?,
        None => doc,
    };
    let cfg: SyntheticStreamConfig =
        serde_json::from_value(stream).map_err(|e| CliError::config(format!("{}: {e}", config.display())))?;
    let (records, vocab) = generate_text_records(&cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::data(format!("cannot create {}: {e}", out.display())))?;
    let (data, labels) = (out.join("data.jsonl"), out.join("labels.txt"));
    write_jsonl(&records, &vocab, &data, &labels)?;
    Ok((data, labels))
}

/// CFT and CBT of a stored score matrix as a JSON object; a metric whose
/// rows are missing is `null`.
pub fn cmd_metrics(r: &Path, cbt_row: CbtRow) -> CliResult<Value> {
    let file = fs::File::open(r).map_err(|e| CliError::data(format!("cannot open {}: {e}", r.display())))?;
    let m = ScoreMatrix::read_csv(file)?;
    let keep = |v: mlcl_core::Result<f64>| match v {
        Ok(x) => Ok(Some(x)),
        Err(Error::State(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(serde_json::json!({
        "cft": keep(cft(&m))?,
        "cbt": keep(cbt(&m, cbt_row))?,
    }))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub cft: Option<(f64, f64)>,
    pub cbt: Option<(f64, f64)>,
    pub final_average: (f64, f64),
}

pub fn load_results(paths: &[PathBuf]) -> CliResult<Vec<CompareRow>> {
    paths
        .iter()
        .map(|p| {
            let r: RunResult = serde_json::from_str(&read_file(p)?)
                .map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            Ok(CompareRow {
                method: r.method,
                cft: r.cft.map(|s| (s.mean, s.std)),
                cbt: r.cbt.map(|s| (s.mean, s.std)),
                final_average: (r.final_average.mean, r.final_average.std),
            })
        })
        .collect()
}

fn best(rows: &[CompareRow], f: impl Fn(&CompareRow) -> Option<(f64, f64)>) -> Option<f64> {
    rows.iter().filter_map(|r| f(r).map(|v| v.0)).reduce(f64::max)
}

/// Method x {CFT, CBT, final} table, rows in input order. The best mean in
/// each column (highest; CBT is better when less negative) gets a `*`.
pub fn render_compare(rows: &[CompareRow], csv: bool) -> String {
    let best_cft = best(rows, |r| r.cft);
    let best_cbt = best(rows, |r| r.cbt);
    let best_avg = best(rows, |r| Some(r.final_average));
    let cell = |v: Option<(f64, f64)>, best: Option<f64>| match v {
        None => "-".to_string(),
        Some((m, s)) => {
            let mark = if Some(m) == best { "*" } else { "" };
            if csv {
                format!("{m:.2}{mark}")
            } else {
                format!("{m:.2} ± {s:.2}{mark}")
            }
        }
    };
    let table: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                cell(r.cft, best_cft),
                cell(r.cbt, best_cbt),
                cell(Some(r.final_average), best_avg),
            ]
        })
        .collect();
    let header = ["method", "CFT", "CBT", "final_avg"];
    let mut out = String::new();
    if csv {
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &table {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        return out;
    }
    let mut widths = header.map(|h| h.chars().count());
    for row in &table {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                let _ = write!(s, "{c}{}", " ".repeat(pad));
            } else {
                let _ = write!(s, "  {}{c}", " ".repeat(pad));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    out.push_str(&line(&header.map(String::from)));
    out.push_str(&line(&widths.map(|w| "-".repeat(w))));
    for row in &table {
        out.push_str(&line(row));
    }
    out
}

pub fn cmd_compare(paths: &[PathBuf], csv: bool) -> CliResult<String> {
    if paths.is_empty() {
        return Err(CliError::config("compare needs at least one result.json"));
    }
    Ok(render_compare(&load_results(paths)?, csv))
}
