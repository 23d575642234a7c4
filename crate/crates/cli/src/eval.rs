use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use fidelity_lab::model::checkpoint::{self, LoadedModel};
use fidelity_lab::model::CompressorDecoder;
use fidelity_lab::tasks::{
    eval_drift, eval_overwrite, eval_recon, read_drift_jsonl, read_overwrite_jsonl,
};
use fidelity_lab::vocab::TokenSequence;
use serde_json::{json, Value};

use crate::error::{checkpoint_error, tasks_error, CliResult};
use crate::manifest::{output_dir, read_text, write_json, RunManifest};
use crate::train::{encode_lines, DRIFT_ANSWER_LEN};

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Greedy reconstruction BLEU and exact match over a text corpus.
    Recon(ReconArgs),
    /// Counterfactual-versus-prior answer scoring.
    Overwrite(CommonArgs),
    /// Generated answers on relational and structural questions.
    Drift(DriftArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Existing directory for the report and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Window length; defaults to the checkpoint's training source length, or 64.
    #[arg(long)]
    pub source_length: Option<usize>,
    /// Evaluate at most this many windows.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DriftArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = DRIFT_ANSWER_LEN)]
    pub max_answer_len: usize,
}

fn load(path: &Path) -> CliResult<LoadedModel> {
    checkpoint::load(path)
        .map(|c| c.model)
        .map_err(|e| checkpoint_error(path, e))
}

fn dataset_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn with_manifest(
    name: &str,
    common: &CommonArgs,
    config: Value,
    work: impl FnOnce(&mut RunManifest) -> CliResult<Value>,
) -> CliResult<()> {
    let out = common.out.as_path();
    output_dir(out)?;
    let mut m = RunManifest::start(
        name,
        &config,
        None,
        vec![common.checkpoint.clone(), common.data.clone()],
    );
    m.write(out)?;
    match work(&mut m) {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).expect("json"));
            m.complete(out, summary)
        }
        Err(e) => {
            m.fail(out, &e);
            Err(e)
        }
    }
}

pub fn run(cmd: EvalCommand) -> CliResult<()> {
    match cmd {
        EvalCommand::Recon(a) => with_manifest(
            "eval recon",
            &a.common,
            json!({ "source_length": a.source_length, "limit": a.limit }),
            |m| {
                let model = load(&a.common.checkpoint)?;
                let l = a.source_length.unwrap_or(match &model {
                    LoadedModel::Transformer(t) => t.compression.source_length,
                    LoadedModel::Scripted(_) => 64,
                });
                let stream = encode_lines(model.vocabulary(), &a.common.data)?;
                let mut sources: Vec<TokenSequence> = stream
                    .chunks_exact(l)
                    .map(|w| TokenSequence::new(w.to_vec()).expect("non-empty"))
                    .collect();
                if let Some(n) = a.limit {
                    sources.truncate(n);
                }
                let report = eval_recon(&model, &sources, &dataset_name(&a.common.data));
                let path = a.common.out.join("recon.json");
                write_json(&path, &report)?;
                m.outputs.push(path);
                Ok(json!({
                    "dataset": report.dataset,
                    "n_items": report.n_items,
                    "source_length": l,
                    "bleu": report.bleu_sentence_mean,
                    "exact_match": report.exact_match,
                }))
            },
        ),
        EvalCommand::Overwrite(a) => with_manifest("eval overwrite", &a, json!({}), |m| {
            let items = read_overwrite_jsonl(&read_text(&a.data)?).map_err(tasks_error)?;
            let model = load(&a.checkpoint)?;
            let report = eval_overwrite(&model, &items, &dataset_name(&a.data));
            let path = a.out.join("overwrite.json");
            write_json(&path, &report)?;
            m.outputs.push(path);
            Ok(
                json!({ "dataset": report.dataset, "n_items": report.n_items, "accuracy": report.accuracy }),
            )
        }),
        EvalCommand::Drift(a) => with_manifest(
            "eval drift",
            &a.common,
            json!({ "max_answer_len": a.max_answer_len }),
            |m| {
                let items = read_drift_jsonl(&read_text(&a.common.data)?).map_err(tasks_error)?;
                let model = load(&a.common.checkpoint)?;
                let report = eval_drift(
                    &model,
                    &items,
                    a.max_answer_len,
                    &dataset_name(&a.common.data),
                );
                let path = a.common.out.join("drift.json");
                write_json(&path, &report)?;
                m.outputs.push(path);
                Ok(json!({
                    "dataset": report.dataset,
                    "n_items": report.n_items,
                    "accuracy": report.accuracy,
                    "answerable_accuracy": report.answerable_accuracy,
                    "unanswerable_accuracy": report.unanswerable_accuracy,
                }))
            },
        ),
    }
}
