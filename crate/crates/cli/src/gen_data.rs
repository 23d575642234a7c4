use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use fidelity_lab::model::checkpoint;
use fidelity_lab::model::scripted::{ScriptedModel, StepDistribution};
use fidelity_lab::tasks::{
    build_fact_world, make_counterfactual_items, make_drift_items, prior_oracle, to_jsonl,
    DriftConfig, OverwriteConfig, WorldConfig,
};
use fidelity_lab::vocab::ABSTAIN;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{tasks_error, CliError, CliResult};
use crate::manifest::{self, output_dir, write_json, write_text, RunManifest};

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Existing directory to write into.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config or a previous manifest.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub attributes: Option<usize>,
    #[arg(long)]
    pub relations: Option<usize>,
    #[arg(long)]
    pub repetition: Option<usize>,
    #[arg(long)]
    pub paragraphs: Option<usize>,
    #[arg(long)]
    pub overwrite_fraction: Option<f64>,
    #[arg(long)]
    pub drift_per_dimension: Option<usize>,
    #[arg(long)]
    pub unanswerable_share: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    pub entities: usize,
    pub attributes: usize,
    pub relations: usize,
    pub repetition: usize,
    pub paragraphs: usize,
    pub overwrite_fraction: f64,
    pub overwrite_priors: usize,
    pub drift_per_dimension: usize,
    pub unanswerable_share: f64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let (w, o, d) = (
            WorldConfig::default(),
            OverwriteConfig::default(),
            DriftConfig::default(),
        );
        Self {
            seed: w.seed,
            entities: w.n_entities,
            attributes: w.n_attributes,
            relations: w.n_relations,
            repetition: w.repetition,
            paragraphs: w.n_paragraphs,
            overwrite_fraction: o.fraction,
            overwrite_priors: o.n_priors,
            drift_per_dimension: d.per_dimension_count,
            unanswerable_share: d.unanswerable_share,
        }
    }
}

impl GenDataConfig {
    fn resolve(args: &GenDataArgs) -> CliResult<Self> {
        let mut c: Self = manifest::resolve(args.config.as_deref(), &["seed"])?;
        macro_rules! flag {
            ($($f:ident => $field:ident),*) => { $(if let Some(v) = args.$f { c.$field = v; })* };
        }
        flag!(seed => seed, entities => entities, attributes => attributes, relations => relations,
            repetition => repetition, paragraphs => paragraphs, overwrite_fraction => overwrite_fraction,
            drift_per_dimension => drift_per_dimension, unanswerable_share => unanswerable_share);
        Ok(c)
    }
}

const FILES: [&str; 6] = [
    "world.json",
    "vocab.json",
    "pretraining.txt",
    "compression.txt",
    "overwrite.jsonl",
    "drift.jsonl",
];

fn lines(texts: &[String]) -> String {
    let mut s = texts.join("\n");
    s.push('\n');
    s
}

pub fn run(args: GenDataArgs) -> CliResult<()> {
    let cfg = GenDataConfig::resolve(&args)?;
    let world_cfg = WorldConfig {
        seed: cfg.seed,
        n_entities: cfg.entities,
        n_attributes: cfg.attributes,
        n_relations: cfg.relations,
        repetition: cfg.repetition,
        n_paragraphs: cfg.paragraphs,
    };
    let overwrite_cfg = OverwriteConfig {
        fraction: cfg.overwrite_fraction,
        n_priors: cfg.overwrite_priors,
        seed: cfg.seed,
    };
    let drift_cfg = DriftConfig {
        per_dimension_count: cfg.drift_per_dimension,
        unanswerable_share: cfg.unanswerable_share,
        seed: cfg.seed,
    };
    let out = args.out.as_path();
    output_dir(out)?;
    let mut m = RunManifest::start("gen-data", &cfg, Some(cfg.seed), Vec::new());
    m.write(out)?;
    match generate(out, &world_cfg, &overwrite_cfg, &drift_cfg, &mut m) {
        Ok(results) => m.complete(out, results),
        Err(e) => {
            m.fail(out, &e);
            Err(e)
        }
    }
}

fn generate(
    out: &Path,
    world_cfg: &WorldConfig,
    overwrite_cfg: &OverwriteConfig,
    drift_cfg: &DriftConfig,
    m: &mut RunManifest,
) -> CliResult<serde_json::Value> {
    let g = build_fact_world(world_cfg).map_err(tasks_error)?;
    let overwrite = make_counterfactual_items(&g.world, overwrite_cfg).map_err(tasks_error)?;
    let drift = make_drift_items(&g.compression, drift_cfg).map_err(tasks_error)?;

    write_json(&out.join(FILES[0]), &g.world)?;
    write_json(&out.join(FILES[1]), &g.vocabulary)?;
    write_text(&out.join(FILES[2]), &lines(&g.pretraining))?;
    write_text(&out.join(FILES[3]), &lines(&g.compression))?;
    write_text(&out.join(FILES[4]), &to_jsonl(&overwrite))?;
    write_text(&out.join(FILES[5]), &to_jsonl(&drift))?;
    m.outputs.extend(FILES.iter().map(|f| out.join(f)));

    let dir = out.join("oracles");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let vocab = g.vocabulary.clone();
    let oracles = [
        (
            "verbatim",
            ScriptedModel::new(vocab.clone(), StepDistribution::Verbatim),
        ),
        (
            "prior",
            prior_oracle(&vocab, &overwrite).map_err(tasks_error)?,
        ),
        (
            "abstain",
            ScriptedModel::new(vocab.clone(), StepDistribution::Constant(ABSTAIN)),
        ),
        (
            "uniform",
            ScriptedModel::new(vocab, StepDistribution::Uniform),
        ),
    ];
    for (name, model) in &oracles {
        let path = dir.join(format!("{name}.ckpt"));
        checkpoint::save_scripted(&path, model, 0)
            .map_err(|e| crate::error::checkpoint_error(&path, e))?;
        m.outputs.push(path);
    }

    let unanswerable = drift.iter().filter(|d| d.is_unanswerable()).count();
    let results = json!({
        "vocabulary_size": g.vocabulary.len(),
        "pretraining_sentences": g.pretraining.len(),
        "compression_paragraphs": g.compression.len(),
        "overwrite_items": overwrite.len(),
        "drift_items": drift.len(),
        "drift_unanswerable": unanswerable,
    });
    println!("{}", serde_json::to_string(&results).expect("json"));
    Ok(results)
}
