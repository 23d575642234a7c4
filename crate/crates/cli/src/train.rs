use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fidelity_lab::analysis::plot::line_chart;
use fidelity_lab::model::{CompressionConfig, CompressionModel, ModelConfig, Role};
use fidelity_lab::tasks::{
    eval_drift, eval_overwrite, read_drift_jsonl, read_overwrite_jsonl, DriftQAItem,
    OverwriteQAItem,
};
use fidelity_lab::training::{
    run_training, split_probe, window_for_prefix, windows, DynamicsRecord, LossBreakdown,
    TrainConfig, TrainHooks,
};
use fidelity_lab::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{tasks_error, train_error, CliError, CliResult};
use crate::manifest::{
    self, output_dir, read_json, read_text, write_json, write_text, RunManifest,
};

pub const PROBE_FILE: &str = "probe.json";
/// Long enough to quote a whole context; generation also stops at EOS or a full
/// decoder context.
pub const DRIFT_ANSWER_LEN: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SizePreset {
    Tiny,
    Small,
    Base,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSize {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl From<SizePreset> for StackSize {
    fn from(p: SizePreset) -> Self {
        match p {
            SizePreset::Tiny => Self {
                n_layers: 2,
                n_heads: 2,
                d_model: 32,
                d_ff: 128,
            },
            SizePreset::Small => Self {
                n_layers: 2,
                n_heads: 4,
                d_model: 64,
                d_ff: 256,
            },
            SizePreset::Base => Self {
                n_layers: 4,
                n_heads: 4,
                d_model: 128,
                d_ff: 512,
            },
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Existing directory for checkpoints, logs and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config or a previous manifest.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Compression rate `L / M`.
    #[arg(long)]
    pub rate: Option<usize>,
    /// Tokens compressed per sample (`L`).
    #[arg(long)]
    pub source_length: Option<usize>,
    #[arg(long, value_enum)]
    pub compressor_size: Option<SizePreset>,
    #[arg(long, value_enum)]
    pub decoder_size: Option<SizePreset>,
    #[arg(long)]
    pub freeze_decoder: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub probe_interval: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Keep at most this many training windows.
    #[arg(long)]
    pub train_windows: Option<usize>,
    /// Score the data directory's QA sets at every probe.
    #[arg(long)]
    pub qa_probe: bool,
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub rate: usize,
    pub source_length: usize,
    /// Derived from `source_length / rate`; recorded for reference.
    pub memory_slots: usize,
    pub compressor: StackSize,
    pub decoder: StackSize,
    pub train_windows: Option<usize>,
    pub qa_probe: bool,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            rate: 16,
            source_length: 64,
            memory_slots: 4,
            compressor: SizePreset::Tiny.into(),
            decoder: SizePreset::Tiny.into(),
            train_windows: None,
            qa_probe: false,
            train: TrainConfig::default(),
        }
    }
}

impl TrainSettings {
    fn resolve(args: &TrainArgs) -> CliResult<Self> {
        let mut s: Self = manifest::resolve(args.config.as_deref(), &["train", "seed"])?;
        let t = &mut s.train;
        if let Some(v) = args.seed {
            t.seed = v;
        }
        if let Some(v) = args.steps {
            t.steps = v;
        }
        if let Some(v) = args.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = args.peak_lr {
            t.peak_lr = v;
        }
        if let Some(v) = args.probe_interval {
            t.probe_interval = v;
        }
        if let Some(v) = args.checkpoint_interval {
            t.checkpoint_interval = v;
        }
        t.freeze_decoder |= args.freeze_decoder;
        if let Some(v) = args.rate {
            s.rate = v;
        }
        if let Some(v) = args.source_length {
            s.source_length = v;
        }
        if let Some(p) = args.compressor_size {
            s.compressor = p.into();
        }
        if let Some(p) = args.decoder_size {
            s.decoder = p.into();
        }
        if args.train_windows.is_some() {
            s.train_windows = args.train_windows;
        }
        s.qa_probe |= args.qa_probe;
        let compression = CompressionConfig::for_rate(s.source_length, s.rate)
            .map_err(|e| CliError::config(e.to_string()))?;
        s.memory_slots = compression.memory_slots;
        s.train.validate().map_err(train_error)?;
        Ok(s)
    }

    fn build_model(&self, vocab: Vocabulary, window: usize) -> CliResult<CompressionModel<f32>> {
        let m = self.memory_slots;
        let cfg = |role, s: StackSize, max_positions| {
            ModelConfig::new(
                role,
                vocab.len(),
                s.n_layers,
                s.n_heads,
                s.d_model,
                s.d_ff,
                max_positions,
            )
        };
        let c = cfg(Role::Compressor, self.compressor, self.source_length + m);
        let d = cfg(Role::Decoder, self.decoder, m + window + 1);
        let compression = CompressionConfig::for_rate(self.source_length, self.rate)
            .map_err(|e| CliError::config(e.to_string()))?;
        CompressionModel::new(vocab, c, d, compression, self.train.seed)
            .map_err(|e| CliError::config(e.to_string()))
    }
}

/// Loads the vocabulary and encodes a one-text-per-line corpus into a single stream.
pub fn encode_lines(vocab: &Vocabulary, path: &Path) -> CliResult<Vec<u32>> {
    let mut stream = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids = vocab
            .encode(line)
            .map_err(|e| CliError::schema(format!("{} line {}: {e}", path.display(), i + 1)))?;
        stream.extend(ids);
    }
    Ok(stream)
}

struct Progress {
    overwrite: Vec<OverwriteQAItem>,
    drift: Vec<DriftQAItem>,
}

impl TrainHooks for Progress {
    fn on_step(&mut self, step: u64, loss: &LossBreakdown) {
        if step % 250 == 0 {
            eprintln!("step {step}: loss {:.4}", loss.total);
        }
    }

    fn qa_probe(
        &mut self,
        _step: u64,
        model: &CompressionModel<f32>,
    ) -> (Option<f64>, Option<f64>) {
        let ow = (!self.overwrite.is_empty())
            .then(|| eval_overwrite(model, &self.overwrite, "overwrite").accuracy);
        let dr = (!self.drift.is_empty())
            .then(|| eval_drift(model, &self.drift, DRIFT_ANSWER_LEN, "drift").accuracy);
        (ow, dr)
    }

    fn on_record(&mut self, r: &DynamicsRecord) {
        eprintln!(
            "probe {}: loss {:.4} erank {:.4} entropy {:.4}",
            r.step,
            r.loss.total,
            r.erank.unwrap_or(f64::NAN),
            r.entropy.unwrap_or(f64::NAN)
        );
    }
}

pub fn run(args: TrainArgs) -> CliResult<()> {
    let settings = TrainSettings::resolve(&args)?;
    let out = args.out.as_path();
    output_dir(out)?;
    let vocab_path = args.data.join("vocab.json");
    let corpus_path = args.data.join("compression.txt");
    let mut m = RunManifest::start(
        "train",
        &settings,
        Some(settings.train.seed),
        vec![vocab_path.clone(), corpus_path.clone()],
    );
    m.write(out)?;
    match train(&args, &settings, &vocab_path, &corpus_path, &mut m) {
        Ok(results) => m.complete(out, results),
        Err(e) => {
            m.fail(out, &e);
            Err(e)
        }
    }
}

fn train(
    args: &TrainArgs,
    s: &TrainSettings,
    vocab_path: &Path,
    corpus_path: &Path,
    m: &mut RunManifest,
) -> CliResult<serde_json::Value> {
    let out = args.out.as_path();
    let vocab: Vocabulary = read_json(vocab_path)?;
    let stream = encode_lines(&vocab, corpus_path)?;
    let window = window_for_prefix(s.source_length);
    let samples = windows(&stream, window, s.source_length).map_err(train_error)?;
    let (mut train, probe) =
        split_probe(samples, s.train.probe_size, s.train.seed).map_err(train_error)?;
    if let Some(cap) = s.train_windows {
        if cap > train.len() {
            eprintln!(
                "warning: --train-windows {cap} exceeds the {} available windows",
                train.len()
            );
        }
        train.truncate(cap);
    }
    write_json(&out.join(PROBE_FILE), &probe)?;

    let mut hooks = Progress {
        overwrite: Vec::new(),
        drift: Vec::new(),
    };
    if s.qa_probe {
        let ow = args.data.join("overwrite.jsonl");
        let dr = args.data.join("drift.jsonl");
        hooks.overwrite = read_overwrite_jsonl(&read_text(&ow)?).map_err(tasks_error)?;
        hooks.drift = read_drift_jsonl(&read_text(&dr)?).map_err(tasks_error)?;
        m.inputs.extend([ow, dr]);
    }
    let model = s.build_model(vocab, window)?;
    eprintln!(
        "training {} windows of {window} tokens, probe {}, {} parameters, M = {}",
        train.len(),
        probe.len(),
        model.params.num_scalars(),
        s.memory_slots
    );
    m.write(out)?;

    let run = run_training(model, &train, &probe, &s.train, Some(out), &mut hooks)
        .map_err(train_error)?;
    m.outputs.push(out.join("metrics.csv"));
    m.outputs.push(out.join("loss.csv"));
    m.outputs.push(out.join(PROBE_FILE));
    m.outputs
        .extend(run.checkpoints.iter().map(|(_, p)| p.clone()));

    if !args.no_plots {
        let loss: Vec<(f64, f64)> = run
            .losses
            .iter()
            .map(|l| (l.step as f64, l.loss.total))
            .collect();
        let path = out.join("loss.svg");
        write_text(
            &path,
            &line_chart(
                "training loss",
                "step",
                "nats per sample",
                &[("total", loss)],
            ),
        )?;
        m.outputs.push(path);
        let series = |f: fn(&DynamicsRecord) -> Option<f64>| -> Vec<(f64, f64)> {
            run.records
                .iter()
                .filter_map(|r| f(r).map(|v| (r.step as f64, v)))
                .collect()
        };
        let path = out.join("probe.svg");
        let chart = line_chart(
            "probe diagnostics",
            "step",
            "value",
            &[
                ("erank", series(|r| r.erank)),
                ("entropy", series(|r| r.entropy)),
            ],
        );
        write_text(&path, &chart)?;
        m.outputs.push(path);
    }

    let last = run.losses.last().map(|l| l.loss);
    Ok(json!({
        "train_windows": train.len(),
        "probe_windows": probe.len(),
        "window_length": window,
        "memory_slots": s.memory_slots,
        "final_batch_loss": last,
        "probes": run.records.len(),
        "checkpoints": run.checkpoints.len(),
    }))
}
