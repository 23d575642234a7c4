use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    total_loss, train_step, Adam, CompressionSample, LossBreakdown, TrainConfig, TrainError,
};
use crate::diagnostics::{probe_model, BatchLayout};
use crate::model::{checkpoint, CompressionModel};

pub const METRICS_HEADER: &str =
    "step,loss_re,loss_nt,loss_total,erank,entropy,qa_overwrite,qa_drift";

/// Snapshot taken every `probe_interval` steps. Losses are means over the probe set
/// after the update of that step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub erank: Option<f64>,
    pub entropy: Option<f64>,
    pub qa_overwrite: Option<f64>,
    pub qa_drift: Option<f64>,
}

impl DynamicsRecord {
    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss.re,
            self.loss.nt,
            self.loss.total,
            opt(self.erank),
            opt(self.entropy),
            opt(self.qa_overwrite),
            opt(self.qa_drift)
        )
    }
}

/// Training-batch loss of one optimizer step (before the update).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Callbacks invoked by [`run_training`].
pub trait TrainHooks {
    fn on_step(&mut self, _step: u64, _loss: &LossBreakdown) {}

    /// QA accuracies `(overwrite, drift)` for the model at a probe step.
    fn qa_probe(
        &mut self,
        _step: u64,
        _model: &CompressionModel<f32>,
    ) -> (Option<f64>, Option<f64>) {
        (None, None)
    }

    fn on_record(&mut self, _record: &DynamicsRecord) {}
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// QA accuracies computed by an arbitrary closure at every probe step.
pub struct QaProbe<F>(pub F);

impl<F> TrainHooks for QaProbe<F>
where
    F: FnMut(&CompressionModel<f32>) -> (Option<f64>, Option<f64>),
{
    fn qa_probe(
        &mut self,
        _step: u64,
        model: &CompressionModel<f32>,
    ) -> (Option<f64>, Option<f64>) {
        (self.0)(model)
    }
}

#[derive(Debug)]
pub struct TrainingRun {
    pub model: CompressionModel<f32>,
    pub records: Vec<DynamicsRecord>,
    pub losses: Vec<StepLoss>,
    pub checkpoints: Vec<(u64, PathBuf)>,
}

fn probe_losses(
    model: &CompressionModel<f32>,
    probe: &[CompressionSample],
) -> Result<LossBreakdown, TrainError> {
    let losses: Vec<LossBreakdown> = probe
        .par_iter()
        .map(|s| total_loss(model, s))
        .collect::<Result<_, _>>()?;
    Ok(LossBreakdown::mean(&losses))
}

/// Trains `model` on `train`, cycling through one seeded permutation of the samples
/// (or a fresh one per epoch with `reshuffle`).
///
/// With an output directory, writes `ckpt_{step:08}` every `checkpoint_interval`
/// steps and at the final step, `metrics.csv` with one row per probe, and `loss.csv`
/// with one row per step.
pub fn run_training(
    mut model: CompressionModel<f32>,
    train: &[CompressionSample],
    probe: &[CompressionSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainingRun, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut metrics = None;
    let mut loss_log = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut m = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(m, "{METRICS_HEADER}")?;
        m.flush()?;
        metrics = Some(m);
        let mut l = BufWriter::new(File::create(dir.join("loss.csv"))?);
        writeln!(l, "step,loss_re,loss_nt,loss_total")?;
        loss_log = Some(l);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Adam::new(&model.params, cfg);
    let mut records = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut checkpoints = Vec::new();

    for step in 1..=cfg.steps {
        let at = |e: TrainError| TrainError::AtStep {
            step,
            source: Box::new(e),
        };
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                if cfg.reshuffle {
                    order.shuffle(&mut rng);
                }
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let loss = train_step(&mut model, &batch, &mut opt).map_err(at)?;
        losses.push(StepLoss { step, loss });
        hooks.on_step(step, &loss);
        if let Some(l) = loss_log.as_mut() {
            writeln!(l, "{step},{},{},{}", loss.re, loss.nt, loss.total)
                .map_err(|e| at(e.into()))?;
        }

        if step % cfg.probe_interval == 0 && !probe.is_empty() {
            let loss = probe_losses(&model, probe).map_err(at)?;
            let m = probe_model(&model, probe, BatchLayout::Flatten).map_err(|e| at(e.into()))?;
            let (qa_overwrite, qa_drift) = hooks.qa_probe(step, &model);
            let record = DynamicsRecord {
                step,
                loss,
                erank: Some(m.erank),
                entropy: Some(m.entropy),
                qa_overwrite,
                qa_drift,
            };
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{}", record.csv_row())
                    .and_then(|_| w.flush())
                    .map_err(|e| at(e.into()))?;
            }
            hooks.on_record(&record);
            records.push(record);
        }

        if let Some(dir) = out_dir {
            if step % cfg.checkpoint_interval == 0 || step == cfg.steps {
                let path = dir.join(checkpoint::file_name(step));
                checkpoint::save_model(&path, &model, step).map_err(|e| at(e.into()))?;
                checkpoints.push((step, path));
            }
        }
    }
    if let Some(mut l) = loss_log {
        l.flush()?;
    }
    Ok(TrainingRun {
        model,
        records,
        losses,
        checkpoints,
    })
}

/// Writes records in the metrics-log format.
pub fn write_metrics_csv(path: &Path, records: &[DynamicsRecord]) -> std::io::Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    fs::write(path, out)
}

/// Parses a metrics log. Errors carry the 1-based line number.
pub fn read_metrics_csv(text: &str) -> Result<Vec<DynamicsRecord>, (usize, String)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err((1, format!("expected header `{METRICS_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err((n, format!("expected 8 columns, found {}", cells.len())));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| (n, format!("bad number `{s}`")))
        };
        let opt = |s: &str| {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        let step = cells[0]
            .trim()
            .parse::<u64>()
            .map_err(|_| (n, format!("bad step `{}`", cells[0])))?;
        let (re, nt, total) = (num(cells[1])?, num(cells[2])?, num(cells[3])?);
        out.push(DynamicsRecord {
            step,
            loss: LossBreakdown { re, nt, total },
            erank: opt(cells[4])?,
            entropy: opt(cells[5])?,
            qa_overwrite: opt(cells[6])?,
            qa_drift: opt(cells[7])?,
        });
    }
    Ok(out)
}
