use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use fidelity_lab::analysis::plot::{line_chart, scatter_with_bands};
use fidelity_lab::analysis::{
    block_means, correlate, decoupling_report, quantile_bands, smoothed_tail, RunSummary,
    DEFAULT_DECOUPLING_DELTA,
};
use fidelity_lab::diagnostics::{probe_dynamics, BatchLayout};
use fidelity_lab::model::checkpoint;
use fidelity_lab::training::CompressionSample;
use serde_json::{json, Value};

use crate::error::{analysis_error, checkpoint_error, diagnostics_error, CliError, CliResult};
use crate::manifest::{output_dir, read_json, write_json, write_text, RunManifest};
use crate::train::PROBE_FILE;

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Effective rank and entropy over a run's checkpoints, plus the loss-curve check.
    Dynamics(DynamicsArgs),
    /// Pearson and Spearman correlation between two CSV columns.
    Correlate(CorrelateArgs),
    /// Flags run pairs where BLEU holds or rises while QA accuracy falls.
    Decouple(DecoupleArgs),
}

#[derive(Args, Debug)]
pub struct DynamicsArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Probe samples; defaults to the run's probe.json.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Block length of the loss smoothing, in steps.
    #[arg(long, default_value_t = 500)]
    pub smooth_window: usize,
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Args, Debug)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only rows from the first maximum of this column onward (e.g. `erank`).
    #[arg(long)]
    pub after_peak: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub bins: usize,
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Args, Debug)]
pub struct DecoupleArgs {
    /// CSV with columns `label,bleu,qa_overwrite,qa_drift`; QA cells may be empty.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DECOUPLING_DELTA)]
    pub delta: f64,
}

/// Header and rows of a CSV file; ragged rows are schema errors naming the line.
struct Table {
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    fn read(path: &Path) -> CliResult<Self> {
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.kind() {
                csv::ErrorKind::Io(_) => CliError::io(path, e),
                _ => CliError::schema(format!("{}: {e}", path.display())),
            })?;
        let header = r
            .headers()
            .map_err(|e| CliError::schema(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                CliError::schema(format!("{} line {line}: {e}", path.display()))
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Self { header, rows })
    }

    fn column(&self, path: &Path, name: &str) -> CliResult<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::schema(format!(
                "{}: no column `{name}` (have {})",
                path.display(),
                self.header.join(",")
            ))
        })
    }
}

fn cell(path: &Path, line: u64, s: &str) -> CliResult<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| {
        CliError::schema(format!(
            "{} line {line}: `{s}` is not a number",
            path.display()
        ))
    })
}

fn with_manifest(
    name: &str,
    out: &Path,
    config: Value,
    inputs: Vec<PathBuf>,
    work: impl FnOnce(&mut RunManifest) -> CliResult<Value>,
) -> CliResult<()> {
    output_dir(out)?;
    let mut m = RunManifest::start(name, &config, None, inputs);
    m.write(out)?;
    match work(&mut m) {
        Ok(results) => m.complete(out, results),
        Err(e) => {
            m.fail(out, &e);
            Err(e)
        }
    }
}

pub fn run(cmd: AnalyzeCommand) -> CliResult<()> {
    match cmd {
        AnalyzeCommand::Dynamics(a) => {
            let probe_path = a.probe.clone().unwrap_or_else(|| a.run.join(PROBE_FILE));
            let config =
                json!({ "smooth_window": a.smooth_window, "layout": BatchLayout::Flatten });
            with_manifest(
                "analyze dynamics",
                &a.out,
                config,
                vec![a.run.clone(), probe_path.clone()],
                |m| dynamics(&a, &probe_path, m),
            )
        }
        AnalyzeCommand::Correlate(a) => {
            let config = json!({ "x": a.x, "y": a.y, "after_peak": a.after_peak, "bins": a.bins });
            with_manifest(
                "analyze correlate",
                &a.out,
                config,
                vec![a.input.clone()],
                |m| correlate_cmd(&a, m),
            )
        }
        AnalyzeCommand::Decouple(a) => {
            let config = json!({ "delta": a.delta });
            with_manifest(
                "analyze decouple",
                &a.out,
                config,
                vec![a.input.clone()],
                |m| decouple(&a, m),
            )
        }
    }
}

fn read_losses(path: &Path) -> CliResult<Vec<(u64, f64)>> {
    let t = Table::read(path)?;
    let (si, li) = (t.column(path, "step")?, t.column(path, "loss_total")?);
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, row) in &t.rows {
        let step = row[si]
            .parse()
            .map_err(|_| CliError::schema(format!("{} line {line}: bad step", path.display())))?;
        let loss = cell(path, *line, &row[li])?.ok_or_else(|| {
            CliError::schema(format!("{} line {line}: empty loss", path.display()))
        })?;
        out.push((step, loss));
    }
    Ok(out)
}

fn dynamics(a: &DynamicsArgs, probe_path: &Path, m: &mut RunManifest) -> CliResult<Value> {
    let probe: Vec<CompressionSample> = read_json(probe_path)?;
    let checkpoints = checkpoint::list(&a.run).map_err(|e| checkpoint_error(&a.run, e))?;
    if checkpoints.is_empty() {
        return Err(CliError::io(&a.run, "no checkpoints found"));
    }
    let traj =
        probe_dynamics(&checkpoints, &probe, BatchLayout::Flatten).map_err(diagnostics_error)?;
    let csv_path = a.out.join("dynamics.csv");
    write_text(&csv_path, &traj.to_csv())?;
    m.outputs.push(csv_path);

    let loss_path = a.run.join("loss.csv");
    let losses = read_losses(&loss_path)?;
    let values: Vec<f64> = losses.iter().map(|l| l.1).collect();
    let tail = smoothed_tail(&values, a.smooth_window).map_err(analysis_error)?;
    let first = traj.points.first().map(|p| p.step);
    let last = traj.points.last().map(|p| p.step);
    let report = json!({
        "points": traj.points.len(),
        "first_step": first,
        "last_step": last,
        "erank_peak_step": traj.peak_step,
        "erank_peak_is_interior": traj.peak_is_interior,
        "loss_smoothing": tail,
        "loss_from_step": losses.get(tail.from_index).map(|l| l.0),
    });
    let json_path = a.out.join("dynamics.json");
    write_json(&json_path, &report)?;
    m.outputs.push(json_path);

    match traj.peak_step {
        Some(s) if traj.peak_is_interior => println!("erank peak at step {s} (interior)"),
        Some(s) => println!("erank peak at step {s} (boundary; no interior peak)"),
        None => println!("no erank peak"),
    }
    println!(
        "smoothed loss over final half (window {}): {} (max rise {:.3e})",
        tail.window,
        if tail.non_increasing {
            "non-increasing"
        } else {
            "rises"
        },
        tail.max_increase
    );

    if !a.no_plots {
        let w = a.smooth_window;
        let skip = values.len() % w;
        let smooth: Vec<(f64, f64)> = block_means(&values, w)
            .iter()
            .enumerate()
            .map(|(i, &v)| (losses[skip + (i + 1) * w - 1].0 as f64, v))
            .collect();
        let raw: Vec<(f64, f64)> = losses.iter().map(|&(s, v)| (s as f64, v)).collect();
        let path = a.out.join("loss.svg");
        write_text(
            &path,
            &line_chart(
                "training loss",
                "step",
                "nats per sample",
                &[("batch", raw), ("smoothed", smooth)],
            ),
        )?;
        m.outputs.push(path);
        let erank: Vec<(f64, f64)> = traj
            .points
            .iter()
            .map(|p| (p.step as f64, p.erank))
            .collect();
        let entropy: Vec<(f64, f64)> = traj
            .points
            .iter()
            .map(|p| (p.step as f64, p.entropy))
            .collect();
        for (name, pts) in [("erank", erank), ("entropy", entropy)] {
            let path = a.out.join(format!("{name}.svg"));
            write_text(&path, &line_chart(name, "step", name, &[(name, pts)]))?;
            m.outputs.push(path);
        }
    }
    Ok(report)
}

fn correlate_cmd(a: &CorrelateArgs, m: &mut RunManifest) -> CliResult<Value> {
    let t = Table::read(&a.input)?;
    let (xi, yi) = (t.column(&a.input, &a.x)?, t.column(&a.input, &a.y)?);
    let peak_col = a
        .after_peak
        .as_deref()
        .map(|c| t.column(&a.input, c))
        .transpose()?;
    let mut rows: Vec<(f64, f64, Option<f64>)> = Vec::new();
    for (line, row) in &t.rows {
        let (x, y) = (
            cell(&a.input, *line, &row[xi])?,
            cell(&a.input, *line, &row[yi])?,
        );
        let p = peak_col
            .map(|c| cell(&a.input, *line, &row[c]))
            .transpose()?
            .flatten();
        if let (Some(x), Some(y)) = (x, y) {
            rows.push((x, y, p));
        }
    }
    let mut dropped = 0;
    if peak_col.is_some() {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if let Some(p) = r.2 {
                if best.map_or(true, |(_, b)| p > b) {
                    best = Some((i, p));
                }
            }
        }
        if let Some((i, _)) = best {
            dropped = i;
            rows.drain(..i);
        }
    }
    let x: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let result = correlate(&x, &y).map_err(analysis_error)?;
    let bins = a.bins.min(x.len());
    let bands = quantile_bands(&x, &y, bins).map_err(analysis_error)?;
    println!(
        "n = {}  pearson r = {:.6} (p = {:.4e})  spearman rho = {:.6} (p = {:.4e})",
        result.n, result.pearson_r, result.pearson_p, result.spearman_rho, result.spearman_p
    );
    let report = json!({ "x": a.x, "y": a.y, "rows_before_peak": dropped, "correlation": result, "bands": bands });
    let path = a.out.join("correlate.json");
    write_json(&path, &report)?;
    m.outputs.push(path);
    if !a.no_plots {
        let pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
        let path = a.out.join("correlate.svg");
        write_text(
            &path,
            &scatter_with_bands(&format!("{} vs {}", a.y, a.x), &a.x, &a.y, &pts, &bands),
        )?;
        m.outputs.push(path);
    }
    Ok(report)
}

fn decouple(a: &DecoupleArgs, m: &mut RunManifest) -> CliResult<Value> {
    if !(a.delta >= 0.0) {
        return Err(CliError::config("delta must be >= 0"));
    }
    let t = Table::read(&a.input)?;
    let col = |name| t.column(&a.input, name);
    let (li, bi, oi, di) = (
        col("label")?,
        col("bleu")?,
        col("qa_overwrite")?,
        col("qa_drift")?,
    );
    let mut runs = Vec::with_capacity(t.rows.len());
    for (line, row) in &t.rows {
        let bleu = cell(&a.input, *line, &row[bi])?.ok_or_else(|| {
            CliError::schema(format!("{} line {line}: empty bleu", a.input.display()))
        })?;
        runs.push(RunSummary {
            label: row[li].clone(),
            bleu,
            qa_overwrite: cell(&a.input, *line, &row[oi])?,
            qa_drift: cell(&a.input, *line, &row[di])?,
        });
    }
    let report = decoupling_report(&runs, a.delta).map_err(analysis_error)?;
    for f in &report.flags {
        let drops: Vec<String> = f
            .drops
            .iter()
            .map(|(k, v)| format!("{k} {v:+.4}"))
            .collect();
        println!(
            "paradox: {} -> {} (bleu {:+.4}; {})",
            f.from,
            f.to,
            f.bleu_change,
            drops.join(", ")
        );
    }
    println!("flags: {}", report.flags.len());
    let json_path = a.out.join("decouple.json");
    write_json(&json_path, &report)?;
    let csv_path = a.out.join("decouple.csv");
    write_text(&csv_path, &report.to_csv())?;
    m.outputs.extend([json_path, csv_path]);
    Ok(json!({ "runs": report.runs.len(), "flags": report.flags.len() }))
}
