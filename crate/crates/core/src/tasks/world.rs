//! Synthetic fact world: entities with one value per attribute, asymmetric relations,
//! a pretraining corpus that repeats every fact, and paragraphs mixing facts in a
//! fixed sentence schema that the drift generator can parse back.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::TasksError;
use crate::vocab::{split_words, Vocabulary};

pub const NAMES: &[&str] = &[
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "kevin",
    "laura", "mallory", "nina", "oscar", "peggy", "quinn", "rita", "sam", "trent", "ursula",
    "victor", "wendy", "xena", "yusuf", "zoe", "adam", "bella", "caleb", "diana", "ethan", "fiona",
    "george", "hannah", "isaac", "jade", "kyle", "luna", "mason", "nora", "owen", "piper", "ryan",
    "sara", "tyler", "uma", "vera", "will", "yara", "zane",
];

pub const CREATURES: &[&str] = &[
    "bee", "flower", "fox", "owl", "cat", "dog", "horse", "rabbit", "mouse", "frog", "bear",
    "wolf", "deer", "goat", "sheep", "duck", "goose", "crow", "hawk", "eagle", "otter", "beaver",
    "badger", "lizard", "snake", "turtle", "whale", "shark", "crab", "squirrel", "hedgehog",
    "camel", "llama", "zebra", "tiger", "lion", "panda", "koala", "moth", "ant", "spider", "snail",
    "swan", "heron", "parrot", "robin", "pigeon", "falcon", "lamb", "toad",
];

pub const VERBS: &[&str] = &[
    "hit",
    "pushed",
    "helped",
    "followed",
    "chased",
    "fed",
    "called",
    "visited",
    "watched",
    "pollinated",
    "carried",
    "greeted",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Color,
    Home,
    Mark,
    Size,
    Food,
}

impl Attribute {
    /// Catalog order; a world with `n` attributes uses the first `n`.
    pub const ALL: [Attribute; 5] = [Self::Color, Self::Home, Self::Mark, Self::Size, Self::Food];

    pub fn values(self) -> &'static [&'static str] {
        match self {
            Self::Color => &[
                "red", "white", "blue", "green", "yellow", "black", "brown", "pink", "gray",
                "orange", "purple", "golden",
            ],
            Self::Home => &[
                "meadow", "forest", "river", "desert", "cave", "garden", "valley", "harbor",
                "tower", "swamp",
            ],
            Self::Mark => &["striped", "spotted", "curly", "fluffy", "bushy", "forked"],
            Self::Size => &["small", "large", "tiny", "huge", "tall", "short"],
            Self::Food => &[
                "seeds", "honey", "fish", "berries", "grass", "nuts", "bread", "apples",
            ],
        }
    }

    /// Pretraining templates, cycled across the repetitions of a fact.
    fn templates(self) -> &'static [&'static str] {
        match self {
            Self::Color => &[
                "{e} is {v} .",
                "the color of {e} is {v} .",
                "{e} looks {v} .",
            ],
            Self::Home => &[
                "{e} lives in the {v} .",
                "the home of {e} is the {v} .",
                "{e} stays in the {v} .",
            ],
            Self::Mark => &[
                "{e} has a {v} tail .",
                "the tail of {e} is {v} .",
                "{e} shows a {v} tail .",
            ],
            Self::Size => &[
                "{e} is {v} in size .",
                "the size of {e} is {v} .",
                "{e} looks {v} in size .",
            ],
            Self::Food => &[
                "{e} eats {v} .",
                "the food of {e} is {v} .",
                "{e} likes to eat {v} .",
            ],
        }
    }

    /// Question asking for this attribute of `e`.
    pub fn question(self, e: &str) -> String {
        match self {
            Self::Color => format!("what color is {e} ?"),
            Self::Home => format!("where does {e} live ?"),
            Self::Mark => format!("what kind of tail does {e} have ?"),
            Self::Size => format!("how big is {e} ?"),
            Self::Food => format!("what does {e} eat ?"),
        }
    }
}

const RELATION_TEMPLATES: &[&str] = &[
    "{a} {r} {b} .",
    "yesterday {a} {r} {b} .",
    "it was {a} who {r} {b} .",
];

/// Every fixed word used by templates and questions.
const FIXED_TEXT: &str = "about is lives in the has a tail eats because , near are and it . \
    color of looks home stays shows size food likes to eat yesterday was who \
    what where does live kind have how big this made do did happened ?";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub agent: usize,
    pub verb: String,
    pub patient: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactWorld {
    pub seed: u64,
    /// Surface forms, e.g. `alice` or `the bee`.
    pub entities: Vec<String>,
    pub attributes: Vec<Attribute>,
    /// `values[e][a]` is the true value of `attributes[a]` for entity `e`.
    pub values: Vec<Vec<String>>,
    pub relations: Vec<Relation>,
}

impl FactWorld {
    pub fn value(&self, entity: usize, attr: Attribute) -> Option<&str> {
        let a = self.attributes.iter().position(|&x| x == attr)?;
        Some(&self.values[entity][a])
    }

    pub fn has(&self, attr: Attribute) -> bool {
        self.attributes.contains(&attr)
    }

    pub fn entity_index(&self, surface: &str) -> Option<usize> {
        self.entities.iter().position(|e| e == surface)
    }

    pub fn relation_text(&self, r: &Relation) -> String {
        format!(
            "{} {} {}",
            self.entities[r.agent], r.verb, self.entities[r.patient]
        )
    }

    /// Word-level vocabulary covering every text the world can produce.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: BTreeSet<String> = split_words(FIXED_TEXT).into_iter().collect();
        for e in &self.entities {
            words.extend(split_words(e));
        }
        for a in Attribute::ALL {
            words.extend(a.values().iter().map(|v| v.to_string()));
        }
        words.extend(VERBS.iter().map(|v| v.to_string()));
        Vocabulary::new(words)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_attributes: usize,
    pub n_relations: usize,
    /// Times every true fact is stated in the pretraining corpus.
    pub repetition: usize,
    pub n_paragraphs: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 50,
            n_attributes: 5,
            n_relations: 60,
            repetition: 3,
            n_paragraphs: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedWorld {
    pub world: FactWorld,
    pub vocabulary: Vocabulary,
    /// One sentence per entry.
    pub pretraining: Vec<String>,
    /// One paragraph per entry.
    pub compression: Vec<String>,
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in pairs {
        s = s.replace(k, v);
    }
    s
}

pub fn build_fact_world(cfg: &WorldConfig) -> Result<GeneratedWorld, TasksError> {
    let pool = NAMES.len() + CREATURES.len();
    if cfg.n_entities < 1 || cfg.n_entities > pool {
        return Err(TasksError::InvalidConfig(format!(
            "n_entities must be in 1..={pool}"
        )));
    }
    if cfg.n_attributes < 1 || cfg.n_attributes > Attribute::ALL.len() {
        return Err(TasksError::InvalidConfig(format!(
            "n_attributes must be in 1..={}",
            Attribute::ALL.len()
        )));
    }
    if cfg.repetition < 1 {
        return Err(TasksError::InvalidConfig("repetition must be >= 1".into()));
    }
    let max_relations = cfg.n_entities * (cfg.n_entities - 1) / 2;
    if cfg.n_relations > max_relations {
        return Err(TasksError::InvalidConfig(format!(
            "{} entities support at most {max_relations} relations",
            cfg.n_entities
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut surfaces: Vec<String> = NAMES
        .iter()
        .map(|n| n.to_string())
        .chain(CREATURES.iter().map(|c| format!("the {c}")))
        .collect();
    surfaces.shuffle(&mut rng);
    surfaces.truncate(cfg.n_entities);

    let attributes: Vec<Attribute> = Attribute::ALL[..cfg.n_attributes].to_vec();
    let values = (0..cfg.n_entities)
        .map(|_| {
            attributes
                .iter()
                .map(|a| a.values().choose(&mut rng).expect("non-empty").to_string())
                .collect()
        })
        .collect();

    // At most one relation per unordered pair keeps every relation asymmetric.
    let mut pairs: Vec<(usize, usize)> = (0..cfg.n_entities)
        .flat_map(|a| (a + 1..cfg.n_entities).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    let relations = pairs[..cfg.n_relations]
        .iter()
        .map(|&(a, b)| {
            let (agent, patient) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
            Relation {
                agent,
                verb: VERBS.choose(&mut rng).expect("non-empty").to_string(),
                patient,
            }
        })
        .collect();

    let world = FactWorld {
        seed: cfg.seed,
        entities: surfaces,
        attributes,
        values,
        relations,
    };
    let pretraining = pretraining_corpus(&world, cfg.repetition, &mut rng);
    let compression = (0..cfg.n_paragraphs)
        .map(|i| paragraph(&world, i % world.entities.len(), None, &mut rng).text)
        .collect();
    let vocabulary = world.vocabulary();
    Ok(GeneratedWorld {
        world,
        vocabulary,
        pretraining,
        compression,
    })
}

fn pretraining_corpus(world: &FactWorld, repetition: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = Vec::new();
    for (e, surface) in world.entities.iter().enumerate() {
        for (a, attr) in world.attributes.iter().enumerate() {
            let templates = attr.templates();
            for r in 0..repetition {
                out.push(fill(
                    templates[r % templates.len()],
                    &[("{e}", surface), ("{v}", &world.values[e][a])],
                ));
            }
        }
    }
    for rel in &world.relations {
        let (a, b) = (&world.entities[rel.agent], &world.entities[rel.patient]);
        for r in 0..repetition {
            out.push(fill(
                RELATION_TEMPLATES[r % RELATION_TEMPLATES.len()],
                &[("{a}", a), ("{r}", &rel.verb), ("{b}", b)],
            ));
        }
    }
    out.shuffle(rng);
    out
}

/// A generated paragraph with the facts it states about its topic.
#[derive(Clone, Debug, PartialEq)]
pub struct Paragraph {
    pub text: String,
    pub topic: usize,
}

/// Attribute value substituted for the topic entity.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub attribute: Attribute,
    pub value: String,
    /// Values that must not appear anywhere in the paragraph.
    pub forbidden: Vec<String>,
}

/// Builds one paragraph about `topic`. With an override, the topic's attribute is
/// stated with the override value and the paragraph avoids the forbidden values.
pub fn paragraph(
    world: &FactWorld,
    topic: usize,
    ov: Option<&Override>,
    rng: &mut ChaCha8Rng,
) -> Paragraph {
    let n = world.entities.len();
    let ent = |i: usize| world.entities[i].as_str();
    let value = |e: usize, a: Attribute| -> String {
        match ov {
            Some(o) if e == topic && o.attribute == a => o.value.clone(),
            _ => world.value(e, a).expect("enabled attribute").to_string(),
        }
    };
    let allowed = |v: &str| ov.map_or(true, |o| !o.forbidden.iter().any(|f| f == v));
    let mut s: Vec<String> = vec![format!("about {} .", ent(topic))];

    // The coreference antecedent is the topic itself when its size is overridden.
    let size_on_topic = matches!(ov, Some(o) if o.attribute == Attribute::Size);
    let coref = if world.has(Attribute::Size) {
        if size_on_topic || n == 1 {
            Some(topic)
        } else {
            let others: Vec<usize> = (0..n)
                .filter(|&g| {
                    g != topic
                        && allowed(&value(g, Attribute::Color))
                        && allowed(&value(g, Attribute::Size))
                })
                .collect();
            others.choose(rng).copied()
        }
    } else {
        None
    };

    if world.has(Attribute::Color) && coref != Some(topic) {
        s.push(format!(
            "{} is {} .",
            ent(topic),
            value(topic, Attribute::Color)
        ));
    }
    if world.has(Attribute::Home) {
        s.push(format!(
            "{} lives in the {} .",
            ent(topic),
            value(topic, Attribute::Home)
        ));
    }

    let mut rels: Vec<&Relation> = world.relations.iter().collect();
    rels.shuffle(rng);
    let mut chosen: Vec<&Relation> = Vec::new();
    for r in rels {
        // Distinct (verb, patient) and no patient reused as agent keeps role questions unique.
        let clash = chosen.iter().any(|c| {
            (c.verb == r.verb && c.patient == r.patient)
                || (c.verb == r.verb && (c.patient == r.agent || c.agent == r.patient))
        });
        if !clash {
            chosen.push(r);
        }
        if chosen.len() == 3 {
            break;
        }
    }
    if let Some(r) = chosen.first() {
        s.push(format!("{} .", world.relation_text(r)));
    }
    if chosen.len() >= 3 {
        s.push(format!(
            "because {} , {} .",
            world.relation_text(chosen[1]),
            world.relation_text(chosen[2])
        ));
    }

    if n >= 4 {
        let mut others: Vec<usize> = (0..n).filter(|&e| e != topic).collect();
        others.shuffle(rng);
        s.push(format!(
            "near {} are {} , {} and {} .",
            ent(topic),
            ent(others[0]),
            ent(others[1]),
            ent(others[2])
        ));
    }
    if let Some(g) = coref {
        s.push(format!(
            "{} is {} . it is {} .",
            ent(g),
            value(g, Attribute::Color),
            value(g, Attribute::Size)
        ));
    }
    if world.has(Attribute::Mark) {
        s.push(format!(
            "{} has a {} tail .",
            ent(topic),
            value(topic, Attribute::Mark)
        ));
    }
    Paragraph {
        text: s.join(" "),
        topic,
    }
}

/// Facts recovered from a paragraph text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedParagraph {
    pub topic: Option<String>,
    /// `(entity, attribute, value)`; size statements are resolved to their antecedent.
    pub attributes: Vec<(String, Attribute, String)>,
    pub relations: Vec<(String, String, String)>,
    /// `(cause, effect)` relation pairs.
    pub causes: Vec<((String, String, String), (String, String, String))>,
    pub near: Vec<(String, Vec<String>)>,
    pub entities: BTreeSet<String>,
}

struct Patterns {
    about: Regex,
    color: Regex,
    home: Regex,
    mark: Regex,
    food: Regex,
    size: Regex,
    size_coref: Regex,
    relation: Regex,
    because: Regex,
    near: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| {
        let ent = "((?:the )?[a-z]+)";
        let alt = |a: Attribute| format!("({})", a.values().join("|"));
        let verbs = format!("({})", VERBS.join("|"));
        let re = |s: String| Regex::new(&format!("^{s}$")).expect("valid pattern");
        Patterns {
            about: re(format!("about {ent}")),
            color: re(format!("{ent} is {}", alt(Attribute::Color))),
            home: re(format!("{ent} lives in the {}", alt(Attribute::Home))),
            mark: re(format!("{ent} has a {} tail", alt(Attribute::Mark))),
            food: re(format!("{ent} eats {}", alt(Attribute::Food))),
            size: re(format!("{ent} is {} in size", alt(Attribute::Size))),
            size_coref: re(format!("it is {}", alt(Attribute::Size))),
            relation: re(format!("{ent} {verbs} {ent}")),
            because: re(format!("because {ent} {verbs} {ent} , {ent} {verbs} {ent}")),
            near: re(format!("near {ent} are {ent} , {ent} and {ent}")),
        }
    })
}

/// Parses a paragraph in the generator's schema; any other sentence is a
/// `TemplateMismatch`.
pub fn parse_paragraph(text: &str) -> Result<ParsedParagraph, TasksError> {
    let p = patterns();
    let mut out = ParsedParagraph::default();
    let mut last_subject: Option<String> = None;
    let words = split_words(text);
    let sentences: Vec<String> = words
        .split(|w| w == ".")
        .filter(|s| !s.is_empty())
        .map(|s| s.join(" "))
        .collect();
    if sentences.is_empty() {
        return Err(TasksError::TemplateMismatch(text.to_string()));
    }
    let g = |c: &regex::Captures, i: usize| c[i].to_string();
    for sentence in &sentences {
        let mismatch = || TasksError::TemplateMismatch(sentence.clone());
        if let Some(c) = p.about.captures(sentence) {
            if out.topic.is_some() {
                return Err(mismatch());
            }
            out.topic = Some(g(&c, 1));
            last_subject = Some(g(&c, 1));
        } else if let Some(c) = p.size_coref.captures(sentence) {
            let antecedent = last_subject.clone().ok_or_else(mismatch)?;
            out.attributes.push((antecedent, Attribute::Size, g(&c, 1)));
        } else if let Some((attr, c)) = [
            (Attribute::Color, &p.color),
            (Attribute::Home, &p.home),
            (Attribute::Mark, &p.mark),
            (Attribute::Food, &p.food),
            (Attribute::Size, &p.size),
        ]
        .into_iter()
        .find_map(|(a, r)| r.captures(sentence).map(|c| (a, c)))
        {
            out.attributes.push((g(&c, 1), attr, g(&c, 2)));
            last_subject = Some(g(&c, 1));
        } else if let Some(c) = p.because.captures(sentence) {
            let cause = (g(&c, 1), g(&c, 2), g(&c, 3));
            let effect = (g(&c, 4), g(&c, 5), g(&c, 6));
            out.relations.push(cause.clone());
            out.relations.push(effect.clone());
            out.causes.push((cause, effect));
            last_subject = None;
        } else if let Some(c) = p.relation.captures(sentence) {
            out.relations.push((g(&c, 1), g(&c, 2), g(&c, 3)));
            last_subject = None;
        } else if let Some(c) = p.near.captures(sentence) {
            out.near
                .push((g(&c, 1), vec![g(&c, 2), g(&c, 3), g(&c, 4)]));
            last_subject = None;
        } else {
            return Err(mismatch());
        }
    }
    let mut entities = BTreeSet::new();
    entities.extend(out.topic.iter().cloned());
    entities.extend(out.attributes.iter().map(|(e, _, _)| e.clone()));
    for (a, _, b) in &out.relations {
        entities.insert(a.clone());
        entities.insert(b.clone());
    }
    for (e, list) in &out.near {
        entities.insert(e.clone());
        entities.extend(list.iter().cloned());
    }
    out.entities = entities;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paragraphs_fit_one_window_and_parse() {
        let g = build_fact_world(&WorldConfig::default()).unwrap();
        for text in &g.compression {
            let len = g.vocabulary.encode(text).unwrap().len();
            assert!(len <= 64, "{len} tokens: {text}");
            let parsed = parse_paragraph(text).unwrap();
            assert!(parsed.topic.is_some());
        }
        for s in &g.pretraining {
            g.vocabulary.encode(s).unwrap();
        }
    }

    #[test]
    fn content_words_are_unique() {
        let mut words: Vec<&str> = NAMES
            .iter()
            .chain(CREATURES)
            .chain(VERBS)
            .copied()
            .collect();
        for a in Attribute::ALL {
            words.extend(a.values());
        }
        let set: BTreeSet<&str> = words.iter().copied().collect();
        assert_eq!(set.len(), words.len());
    }

    #[test]
    fn foreign_text_is_rejected() {
        assert!(matches!(
            parse_paragraph("the quick brown fox jumps ."),
            Err(TasksError::TemplateMismatch(_))
        ));
        assert!(matches!(
            parse_paragraph(""),
            Err(TasksError::TemplateMismatch(_))
        ));
    }

    #[test]
    fn relations_are_asymmetric() {
        let g = build_fact_world(&WorldConfig::default()).unwrap();
        for r in &g.world.relations {
            assert_ne!(r.agent, r.patient);
            assert!(!g
                .world
                .relations
                .iter()
                .any(|s| s.agent == r.patient && s.patient == r.agent));
        }
    }
}
