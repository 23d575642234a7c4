//! QA schemas, item generators over the synthetic world, and the overwrite and drift
//! evaluators.

pub mod world;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use world::{
    build_fact_world, parse_paragraph, Attribute, FactWorld, GeneratedWorld, ParsedParagraph,
    WorldConfig,
};

use crate::metrics::{contains_phrase, mean_bleu, normalize_text, substring_match};
use crate::model::scripted::{ScriptedModel, StepDistribution};
use crate::model::{
    generate_from, generate_greedy, qa_prompt, score_candidate, CompressorDecoder, ModelError,
};
use crate::vocab::{TokenId, TokenSequence, Vocabulary, ABSTAIN, ABSTAIN_SYMBOL};

#[derive(Debug, Error)]
pub enum TasksError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("attribute {attribute:?} has {available} values, {needed} needed")]
    InsufficientValueSpace {
        attribute: Attribute,
        available: usize,
        needed: usize,
    },
    #[error("text does not follow the paragraph schema: `{0}`")]
    TemplateMismatch(String),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("invalid item: {0}")]
    InvalidItem(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverwriteQAItem {
    pub context: String,
    pub question: String,
    pub counterfactual_answer: String,
    pub prior_answers: Vec<String>,
}

impl OverwriteQAItem {
    pub fn validate(&self) -> Result<(), TasksError> {
        let bad = |m: &str| Err(TasksError::InvalidItem(m.to_string()));
        if normalize_text(&self.question).is_empty()
            || normalize_text(&self.counterfactual_answer).is_empty()
        {
            return bad("question and counterfactual_answer must be non-empty");
        }
        if self.prior_answers.is_empty() {
            return bad("prior_answers must hold at least one answer");
        }
        let cf = normalize_text(&self.counterfactual_answer);
        if !contains_phrase(&normalize_text(&self.context), &cf) {
            return bad("counterfactual_answer does not appear in context");
        }
        if self.prior_answers.iter().any(|p| normalize_text(p) == cf) {
            return bad("counterfactual_answer is listed among prior_answers");
        }
        if self
            .prior_answers
            .iter()
            .any(|p| normalize_text(p).is_empty())
        {
            return bad("prior answers must be non-empty");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftDimension {
    MainTopic,
    EntityList,
    PredicateExactness,
    RelationAnchor,
    Coreference,
    RoleBinding,
    ModifierScope,
}

impl DriftDimension {
    pub const ALL: [DriftDimension; 7] = [
        Self::MainTopic,
        Self::EntityList,
        Self::PredicateExactness,
        Self::RelationAnchor,
        Self::Coreference,
        Self::RoleBinding,
        Self::ModifierScope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MainTopic => "main_topic",
            Self::EntityList => "entity_list",
            Self::PredicateExactness => "predicate_exactness",
            Self::RelationAnchor => "relation_anchor",
            Self::Coreference => "coreference",
            Self::RoleBinding => "role_binding",
            Self::ModifierScope => "modifier_scope",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftQAItem {
    pub context: String,
    pub question: String,
    pub dimension: DriftDimension,
    /// Answer span from the context, or [`ABSTAIN_SYMBOL`].
    pub gold: String,
}

impl DriftQAItem {
    pub fn is_unanswerable(&self) -> bool {
        self.gold == ABSTAIN_SYMBOL
    }

    pub fn validate(&self) -> Result<(), TasksError> {
        if normalize_text(&self.question).is_empty() {
            return Err(TasksError::InvalidItem("question must be non-empty".into()));
        }
        if self.is_unanswerable() {
            return Ok(());
        }
        let gold = normalize_text(&self.gold);
        if gold.is_empty() || !contains_phrase(&normalize_text(&self.context), &gold) {
            return Err(TasksError::InvalidItem(format!(
                "gold `{}` is not a substring of the context",
                self.gold
            )));
        }
        Ok(())
    }
}

trait Validate {
    fn check(&self) -> Result<(), TasksError>;
}

impl Validate for OverwriteQAItem {
    fn check(&self) -> Result<(), TasksError> {
        self.validate()
    }
}

impl Validate for DriftQAItem {
    fn check(&self) -> Result<(), TasksError> {
        self.validate()
    }
}

fn read_jsonl<T: DeserializeOwned + Validate>(text: &str) -> Result<Vec<T>, TasksError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let item: T = serde_json::from_str(line).map_err(|e| TasksError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        item.check().map_err(|e| TasksError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Parses and validates overwrite items; errors name the 1-based line.
pub fn read_overwrite_jsonl(text: &str) -> Result<Vec<OverwriteQAItem>, TasksError> {
    read_jsonl(text)
}

/// Parses and validates drift items; errors name the 1-based line.
pub fn read_drift_jsonl(text: &str) -> Result<Vec<DriftQAItem>, TasksError> {
    read_jsonl(text)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable item"));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverwriteConfig {
    /// Share of eligible facts turned into items.
    pub fraction: f64,
    pub n_priors: usize,
    pub seed: u64,
}

impl Default for OverwriteConfig {
    fn default() -> Self {
        Self {
            fraction: 0.25,
            n_priors: 1,
            seed: 0,
        }
    }
}

/// Attributes whose topic-entity statement appears in generated paragraphs.
const OVERWRITE_ATTRIBUTES: [Attribute; 4] = [
    Attribute::Color,
    Attribute::Home,
    Attribute::Mark,
    Attribute::Size,
];

/// Contexts that state a swapped value for sampled `(entity, attribute)` facts; the
/// world-true value becomes the first prior answer.
pub fn make_counterfactual_items(
    world: &FactWorld,
    cfg: &OverwriteConfig,
) -> Result<Vec<OverwriteQAItem>, TasksError> {
    if !(0.0..=1.0).contains(&cfg.fraction) {
        return Err(TasksError::InvalidConfig(
            "fraction must lie in [0, 1]".into(),
        ));
    }
    if cfg.n_priors < 1 {
        return Err(TasksError::InvalidConfig("n_priors must be >= 1".into()));
    }
    let attrs: Vec<Attribute> = OVERWRITE_ATTRIBUTES
        .into_iter()
        .filter(|&a| world.has(a))
        .collect();
    for &a in &attrs {
        if a.values().len() < cfg.n_priors + 1 {
            return Err(TasksError::InsufficientValueSpace {
                attribute: a,
                available: a.values().len(),
                needed: cfg.n_priors + 1,
            });
        }
    }
    let mut facts: Vec<(usize, Attribute)> = (0..world.entities.len())
        .flat_map(|e| attrs.iter().map(move |&a| (e, a)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ world.seed.rotate_left(17));
    facts.shuffle(&mut rng);
    let count = (cfg.fraction * facts.len() as f64).round() as usize;
    facts.truncate(count);

    let mut items = Vec::with_capacity(count);
    for (e, attr) in facts {
        let truth = world.value(e, attr).expect("enabled attribute").to_string();
        let mut others: Vec<&str> = attr
            .values()
            .iter()
            .copied()
            .filter(|v| *v != truth)
            .collect();
        others.shuffle(&mut rng);
        let cf = others[0].to_string();
        let mut prior_answers = vec![truth];
        prior_answers.extend(others[1..cfg.n_priors].iter().map(|v| v.to_string()));
        let ov = world::Override {
            attribute: attr,
            value: cf.clone(),
            forbidden: prior_answers.clone(),
        };
        let p = world::paragraph(world, e, Some(&ov), &mut rng);
        let item = OverwriteQAItem {
            context: p.text,
            question: attr.question(&world.entities[e]),
            counterfactual_answer: cf,
            prior_answers,
        };
        item.validate()?;
        let ctx = normalize_text(&item.context);
        if item
            .prior_answers
            .iter()
            .any(|a| contains_phrase(&ctx, &normalize_text(a)))
        {
            return Err(TasksError::InvalidItem(format!(
                "context states a prior answer: {}",
                item.context
            )));
        }
        items.push(item);
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub per_dimension_count: usize,
    /// Target share of unanswerable items within each dimension.
    pub unanswerable_share: f64,
    pub seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            per_dimension_count: 15,
            unanswerable_share: 0.25,
            seed: 0,
        }
    }
}

struct Generated {
    question: String,
    gold: Option<String>,
}

fn answerable(dim: DriftDimension, p: &ParsedParagraph) -> Option<Generated> {
    let some = |q: String, g: String| {
        Some(Generated {
            question: q,
            gold: Some(g),
        })
    };
    match dim {
        DriftDimension::MainTopic => p
            .topic
            .clone()
            .and_then(|t| some("what is this about ?".into(), t)),
        DriftDimension::EntityList => {
            let (e, list) = p.near.first()?;
            some(
                format!("who is near {e} ?"),
                format!("{} , {} and {}", list[0], list[1], list[2]),
            )
        }
        DriftDimension::PredicateExactness => {
            let (a, v, b) = p.relations.first()?;
            let unique = p
                .relations
                .iter()
                .filter(|(x, _, y)| x == a && y == b)
                .count()
                == 1;
            if !unique {
                return None;
            }
            some(format!("what did {a} do to {b} ?"), v.clone())
        }
        DriftDimension::RelationAnchor => {
            let ((a, v, b), (c, w, d)) = p.causes.first()?;
            some(
                format!("what happened because {a} {v} {b} ?"),
                format!("{c} {w} {d}"),
            )
        }
        DriftDimension::Coreference => {
            let sizes: Vec<_> = p
                .attributes
                .iter()
                .filter(|(_, a, _)| *a == Attribute::Size)
                .collect();
            match sizes.as_slice() {
                [(g, _, s)] => some(format!("who is {s} ?"), g.clone()),
                _ => None,
            }
        }
        DriftDimension::RoleBinding => {
            let (a, v, b) = p.relations.first()?;
            let unique = p
                .relations
                .iter()
                .filter(|(_, x, y)| x == v && y == b)
                .count()
                == 1;
            if !unique {
                return None;
            }
            some(format!("who {v} {b} ?"), a.clone())
        }
        DriftDimension::ModifierScope => {
            let (e, _, m) = p
                .attributes
                .iter()
                .find(|(_, a, _)| *a == Attribute::Mark)?;
            some(
                format!("what kind of tail does {e} have ?"),
                format!("{m} tail"),
            )
        }
    }
}

fn unanswerable(
    dim: DriftDimension,
    p: &ParsedParagraph,
    outsiders: &[&String],
) -> Option<Generated> {
    let q = |question: String| {
        Some(Generated {
            question,
            gold: None,
        })
    };
    match dim {
        DriftDimension::MainTopic => q(format!("what is {} made of ?", p.topic.as_ref()?)),
        DriftDimension::EntityList => {
            p.near.first()?;
            q(format!("who is near {} ?", outsiders.first()?))
        }
        DriftDimension::PredicateExactness => {
            let (a, _, b) = p.relations.first()?;
            let stated = p.relations.iter().any(|(x, _, y)| x == b && y == a);
            if stated {
                return None;
            }
            q(format!("what did {b} do to {a} ?"))
        }
        DriftDimension::RelationAnchor => {
            let (_, (c, w, d)) = p.causes.first()?;
            let stated = p
                .causes
                .iter()
                .any(|(cause, _)| cause == &(c.clone(), w.clone(), d.clone()));
            if stated {
                return None;
            }
            q(format!("what happened because {c} {w} {d} ?"))
        }
        DriftDimension::Coreference => {
            let stated: Vec<&String> = p
                .attributes
                .iter()
                .filter(|(_, a, _)| *a == Attribute::Size)
                .map(|(_, _, v)| v)
                .collect();
            if stated.is_empty() {
                return None;
            }
            let other = Attribute::Size
                .values()
                .iter()
                .find(|v| !stated.iter().any(|s| s == *v))?;
            q(format!("who is {other} ?"))
        }
        DriftDimension::RoleBinding => {
            let (a, v, _) = p.relations.first()?;
            let stated = p.relations.iter().any(|(_, x, y)| x == v && y == a);
            if stated {
                return None;
            }
            q(format!("who {v} {a} ?"))
        }
        DriftDimension::ModifierScope => {
            p.attributes
                .iter()
                .find(|(_, a, _)| *a == Attribute::Mark)?;
            q(format!(
                "what kind of tail does {} have ?",
                outsiders.first()?
            ))
        }
    }
}

/// Per dimension, `per_dimension_count` answerable items drawn from paragraphs in
/// order, followed by unanswerable items sized to the configured share.
pub fn make_drift_items(
    paragraphs: &[String],
    cfg: &DriftConfig,
) -> Result<Vec<DriftQAItem>, TasksError> {
    if !(0.0..1.0).contains(&cfg.unanswerable_share) {
        return Err(TasksError::InvalidConfig(
            "unanswerable_share must lie in [0, 1)".into(),
        ));
    }
    let parsed: Vec<ParsedParagraph> = paragraphs
        .iter()
        .map(|p| parse_paragraph(p))
        .collect::<Result<_, _>>()?;
    let all_entities: Vec<&String> = {
        let mut set = std::collections::BTreeSet::new();
        for p in &parsed {
            set.extend(p.entities.iter());
        }
        set.into_iter().collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::new();
    for dim in DriftDimension::ALL {
        let mut n_answerable = 0;
        for (text, p) in paragraphs.iter().zip(&parsed) {
            if n_answerable == cfg.per_dimension_count {
                break;
            }
            if let Some(g) = answerable(dim, p) {
                items.push(DriftQAItem {
                    context: text.clone(),
                    question: g.question,
                    dimension: dim,
                    gold: g.gold.expect("answerable"),
                });
                n_answerable += 1;
            }
        }
        let share = cfg.unanswerable_share;
        let n_unanswerable = (n_answerable as f64 * share / (1.0 - share)).round() as usize;
        // Start half-way through the corpus so unanswerable contexts differ from answerable ones.
        let start = paragraphs.len() / 2;
        let mut emitted = 0;
        for i in 0..paragraphs.len() {
            if emitted == n_unanswerable {
                break;
            }
            let j = (start + i) % paragraphs.len();
            let mut outsiders: Vec<&String> = all_entities
                .iter()
                .copied()
                .filter(|e| !parsed[j].entities.contains(*e))
                .collect();
            outsiders.shuffle(&mut rng);
            if let Some(g) = unanswerable(dim, &parsed[j], &outsiders) {
                items.push(DriftQAItem {
                    context: paragraphs[j].clone(),
                    question: g.question,
                    dimension: dim,
                    gold: ABSTAIN_SYMBOL.to_string(),
                });
                emitted += 1;
            }
        }
    }
    for item in &items {
        item.validate()?;
    }
    Ok(items)
}

/// Scripted decoder that answers every overwrite question with its first prior answer,
/// ignoring the context.
pub fn prior_oracle(
    vocab: &Vocabulary,
    items: &[OverwriteQAItem],
) -> Result<ScriptedModel, TasksError> {
    let enc = |s: &str| {
        vocab
            .encode(s)
            .map_err(|e| TasksError::InvalidItem(e.to_string()))
    };
    let mut pairs = Vec::with_capacity(items.len());
    for item in items {
        pairs.push((enc(&item.question)?, enc(&item.prior_answers[0])?));
    }
    Ok(ScriptedModel::new(
        vocab.clone(),
        StepDistribution::Prior(pairs),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub question: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dimension: Option<DriftDimension>,
    /// Chosen candidate (overwrite) or generated text (drift).
    pub chosen: Option<String>,
    /// Counterfactual score first, then one per prior answer.
    pub scores: Vec<f64>,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionAccuracy {
    pub n_items: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n_items: usize,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_dimension: BTreeMap<String, DimensionAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answerable_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unanswerable_accuracy: Option<f64>,
    pub records: Vec<ItemRecord>,
}

fn accuracy<'a>(records: impl Iterator<Item = &'a ItemRecord>) -> (usize, f64) {
    let (mut n, mut k) = (0usize, 0usize);
    for r in records {
        n += 1;
        k += usize::from(r.correct);
    }
    (n, if n == 0 { 0.0 } else { k as f64 / n as f64 })
}

fn encode(vocab: &Vocabulary, text: &str) -> Result<Vec<TokenId>, ModelError> {
    Ok(vocab.encode(text)?)
}

fn compress_text<M: CompressorDecoder + ?Sized>(
    model: &M,
    text: &str,
) -> Result<crate::model::MemoryTensor, ModelError> {
    let ids = encode(model.vocabulary(), text)?;
    model.compress(&TokenSequence::new(ids)?)
}

fn overwrite_item<M: CompressorDecoder + ?Sized>(
    model: &M,
    item: &OverwriteQAItem,
) -> Result<(Vec<f64>, String, bool), ModelError> {
    let vocab = model.vocabulary();
    let z = compress_text(model, &item.context)?;
    let q = encode(vocab, &item.question)?;
    let cf = score_candidate(model, &z, &q, &encode(vocab, &item.counterfactual_answer)?)?;
    let mut scores = vec![cf];
    let mut best_prior: Option<(f64, &str)> = None;
    for p in &item.prior_answers {
        let s = score_candidate(model, &z, &q, &encode(vocab, p)?)?;
        scores.push(s);
        if best_prior.map_or(true, |(b, _)| s > b) {
            best_prior = Some((s, p));
        }
    }
    let (prior_score, prior) = best_prior.expect("at least one prior");
    let correct = cf > prior_score;
    let chosen = if correct {
        item.counterfactual_answer.clone()
    } else {
        prior.to_string()
    };
    Ok((scores, chosen, correct))
}

/// Item correct iff the counterfactual answer scores strictly above every prior.
pub fn eval_overwrite<M: CompressorDecoder + ?Sized>(
    model: &M,
    items: &[OverwriteQAItem],
    dataset: &str,
) -> EvalReport {
    let records: Vec<ItemRecord> = items
        .par_iter()
        .enumerate()
        .map(|(index, item)| {
            let base = ItemRecord {
                index,
                question: item.question.clone(),
                dimension: None,
                chosen: None,
                scores: Vec::new(),
                correct: false,
                error: None,
            };
            match overwrite_item(model, item) {
                Ok((scores, chosen, correct)) => ItemRecord {
                    chosen: Some(chosen),
                    scores,
                    correct,
                    ..base
                },
                Err(e) => ItemRecord {
                    error: Some(e.to_string()),
                    ..base
                },
            }
        })
        .collect();
    let (n_items, acc) = accuracy(records.iter());
    EvalReport {
        dataset: dataset.to_string(),
        n_items,
        accuracy: acc,
        per_dimension: BTreeMap::new(),
        answerable_accuracy: None,
        unanswerable_accuracy: None,
        records,
    }
}

fn drift_item<M: CompressorDecoder + ?Sized>(
    model: &M,
    item: &DriftQAItem,
    max_answer_len: usize,
) -> Result<(String, bool), ModelError> {
    let vocab = model.vocabulary();
    let z = compress_text(model, &item.context)?;
    let q = encode(vocab, &item.question)?;
    let out = generate_from(model, &z, &qa_prompt(&q), max_answer_len)?;
    let text = vocab.decode(&out);
    let correct = if item.is_unanswerable() {
        out.first() == Some(&ABSTAIN)
    } else {
        substring_match(&text, &item.gold).unwrap_or(false)
    };
    Ok((text, correct))
}

/// Greedy answers after `[Z; SEP; question; SEP]`; answerable items need the gold
/// span in the output, unanswerable items need ABSTAIN as the first token.
pub fn eval_drift<M: CompressorDecoder + ?Sized>(
    model: &M,
    items: &[DriftQAItem],
    max_answer_len: usize,
    dataset: &str,
) -> EvalReport {
    let records: Vec<ItemRecord> = items
        .par_iter()
        .enumerate()
        .map(|(index, item)| {
            let base = ItemRecord {
                index,
                question: item.question.clone(),
                dimension: Some(item.dimension),
                chosen: None,
                scores: Vec::new(),
                correct: false,
                error: None,
            };
            match drift_item(model, item, max_answer_len) {
                Ok((text, correct)) => ItemRecord {
                    chosen: Some(text),
                    correct,
                    ..base
                },
                Err(e) => ItemRecord {
                    error: Some(e.to_string()),
                    ..base
                },
            }
        })
        .collect();
    let (n_items, acc) = accuracy(records.iter());
    let mut per_dimension = BTreeMap::new();
    for dim in DriftDimension::ALL {
        let (n, a) = accuracy(records.iter().filter(|r| r.dimension == Some(dim)));
        if n > 0 {
            per_dimension.insert(
                dim.name().to_string(),
                DimensionAccuracy {
                    n_items: n,
                    accuracy: a,
                },
            );
        }
    }
    let split = |want: bool| {
        let (n, a) = accuracy(
            records
                .iter()
                .zip(items)
                .filter(|(_, i)| i.is_unanswerable() == want)
                .map(|(r, _)| r),
        );
        (n > 0).then_some(a)
    };
    EvalReport {
        dataset: dataset.to_string(),
        n_items,
        accuracy: acc,
        per_dimension,
        answerable_accuracy: split(false),
        unanswerable_accuracy: split(true),
        records,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRecord {
    pub index: usize,
    pub bleu: f64,
    pub exact: bool,
    pub generated: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub dataset: String,
    pub n_items: usize,
    /// Mean of sentence-level BLEU-4 scores.
    pub bleu_sentence_mean: f64,
    pub exact_match: f64,
    pub records: Vec<ReconRecord>,
}

/// Compresses each source and greedily decodes at most as many tokens as it holds,
/// scoring against the source.
pub fn eval_recon<M: CompressorDecoder + ?Sized>(
    model: &M,
    sources: &[TokenSequence],
    dataset: &str,
) -> ReconReport {
    let outputs: Vec<Result<Vec<TokenId>, ModelError>> = sources
        .par_iter()
        .map(|x| {
            let z = model.compress(x)?;
            generate_greedy(model, &z, z.source_length())
        })
        .collect();
    let mut records = Vec::with_capacity(sources.len());
    for (index, (x, out)) in sources.iter().zip(&outputs).enumerate() {
        match out {
            Ok(ids) => {
                let bleu = mean_bleu([(ids.as_slice(), x.ids())]).expect("non-empty reference");
                records.push(ReconRecord {
                    index,
                    bleu,
                    exact: ids.as_slice() == x.ids(),
                    generated: model.vocabulary().decode(ids),
                    error: None,
                });
            }
            Err(e) => records.push(ReconRecord {
                index,
                bleu: 0.0,
                exact: false,
                generated: String::new(),
                error: Some(e.to_string()),
            }),
        }
    }
    let n = records.len();
    let mean = |f: &dyn Fn(&ReconRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            records.iter().map(f).sum::<f64>() / n as f64
        }
    };
    ReconReport {
        dataset: dataset.to_string(),
        n_items: n,
        bleu_sentence_mean: mean(&|r| r.bleu),
        exact_match: mean(&|r| f64::from(u8::from(r.exact))),
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_style_role_binding_example() {
        let items = make_drift_items(
            &["about alice . alice hit bob .".to_string()],
            &DriftConfig::default(),
        )
        .unwrap();
        let rb = items
            .iter()
            .find(|i| i.dimension == DriftDimension::RoleBinding && !i.is_unanswerable())
            .unwrap();
        assert_eq!(
            (rb.question.as_str(), rb.gold.as_str()),
            ("who hit bob ?", "alice")
        );
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let good = to_jsonl(&[OverwriteQAItem {
            context: "about the strawberry . the strawberry is white .".into(),
            question: "what color is the strawberry ?".into(),
            counterfactual_answer: "white".into(),
            prior_answers: vec!["red".into()],
        }]);
        assert_eq!(read_overwrite_jsonl(&good).unwrap().len(), 1);
        let bad = format!("{good}{good}{{\"context\": 3}}\n");
        match read_overwrite_jsonl(&bad) {
            Err(TasksError::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_fraction_gives_no_items() {
        let g = build_fact_world(&WorldConfig::default()).unwrap();
        let cfg = OverwriteConfig {
            fraction: 0.0,
            ..OverwriteConfig::default()
        };
        assert!(make_counterfactual_items(&g.world, &cfg)
            .unwrap()
            .is_empty());
    }
}
