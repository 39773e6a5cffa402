//! Synthetic relational QA scenes with analytic ground truth.
//!
//! A scene is a set of non-overlapping boxes with category and attribute
//! labels. Spatial relations follow from geometry (x-axis checked first, so
//! the rule is total over disjoint boxes); symmetric semantic relations are
//! sprinkled from a closed set. Per ordered pair exactly one relation
//! occupies the visible edge slot (semantic beats spatial), and a density
//! knob leaves some slots unannotated to exercise the unknown-relationship
//! embedding. Questions are only emitted when a brute-force symbolic solver
//! over the scene record can answer them uniquely, which makes every
//! generated QA set solvable by construction.
//!
//! Node features are one-hot(category) ++ one-hot(attribute) ++ noise and
//! deliberately carry no position, so relation questions are answerable
//! only through the edges.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::params::ModelParams;
use crate::relation::{noisy_map, MapKind, RelationEncoderSpec};
use crate::rng::{self, SeedableStream};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

pub const SPATIAL_PREDICATES: [&str; 4] = ["left of", "right of", "above", "below"];
pub const LEFT_OF: usize = 0;
pub const RIGHT_OF: usize = 1;
pub const ABOVE: usize = 2;
pub const BELOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionFamily {
    Attribute,
    Existence,
    Relation,
}

impl QuestionFamily {
    pub fn name(&self) -> &'static str {
        match self {
            QuestionFamily::Attribute => "attribute",
            QuestionFamily::Existence => "existence",
            QuestionFamily::Relation => "relation",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub scenes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub categories: Vec<String>,
    pub attributes: Vec<String>,
    /// Symmetric semantic predicates appended after the four spatial ones.
    pub semantic_predicates: Vec<String>,
    /// Probability that an unordered pair gets a semantic relation.
    pub semantic_prob: f64,
    /// Probability that an ordered pair's edge slot stays annotated.
    pub annotation_density: f64,
    pub questions_per_scene: usize,
    pub families: Vec<QuestionFamily>,
    /// Among relation questions, fraction of open (non yes/no) ones.
    pub relation_open_fraction: f64,
    pub noise_dim: usize,
    pub noise_scale: Real,
    pub box_min: Real,
    pub box_max: Real,
    /// Fraction of scenes reserved for the evaluation split.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            scenes: 100,
            objects_min: 4,
            objects_max: 6,
            categories: [
                "ball", "bird", "book", "box", "car", "cat", "chair", "cup", "dog", "fish",
                "lamp", "tree",
            ]
            .map(String::from)
            .to_vec(),
            attributes: ["black", "blue", "green", "red", "white", "yellow"]
                .map(String::from)
                .to_vec(),
            semantic_predicates: vec!["near".into(), "beside".into()],
            semantic_prob: 0.15,
            annotation_density: 0.9,
            questions_per_scene: 2,
            families: vec![
                QuestionFamily::Attribute,
                QuestionFamily::Existence,
                QuestionFamily::Relation,
            ],
            relation_open_fraction: 0.5,
            noise_dim: 8,
            noise_scale: 0.1,
            box_min: 0.08,
            box_max: 0.18,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Config("scene count must be positive".into()));
        }
        if self.objects_min < 2 || self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "object range [{}, {}] is invalid (need 2 <= min <= max)",
                self.objects_min, self.objects_max
            )));
        }
        if self.categories.len() < 2 || self.attributes.is_empty() {
            return Err(Error::Config(
                "need at least 2 categories and 1 attribute".into(),
            ));
        }
        if self.families.is_empty() {
            return Err(Error::Config("at least one question family".into()));
        }
        if !(0.0..=1.0).contains(&self.holdout_fraction)
            || !(0.0..=1.0).contains(&self.semantic_prob)
            || !(0.0..=1.0).contains(&self.annotation_density)
            || !(0.0..=1.0).contains(&self.relation_open_fraction)
        {
            return Err(Error::Config("probability knobs must lie in [0, 1]".into()));
        }
        if !(self.box_min > 0.0 && self.box_min <= self.box_max && self.box_max < 1.0) {
            return Err(Error::Config("box size range is invalid".into()));
        }
        Ok(())
    }

    /// Full predicate lexicon: the four spatial predicates, then semantic.
    pub fn predicates(&self) -> Vec<String> {
        SPATIAL_PREDICATES
            .iter()
            .map(|s| s.to_string())
            .chain(self.semantic_predicates.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneObject {
    pub category: usize,
    pub attribute: usize,
    /// Normalized (x1, y1, x2, y2); y grows downward.
    pub bbox: [Real; 4],
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct RelationTriple {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticScene {
    pub id: usize,
    pub objects: Vec<SceneObject>,
    /// Closed-world record: every relation that holds.
    pub relations: Vec<RelationTriple>,
    /// Visible annotation per ordered pair: (subject, object, predicate).
    pub edge_slots: Vec<(usize, usize, usize)>,
}

impl SyntheticScene {
    pub fn n(&self) -> usize {
        self.objects.len()
    }

    pub fn has_relation(&self, subject: usize, predicate: usize, object: usize) -> bool {
        self.relations.contains(&RelationTriple {
            subject,
            predicate,
            object,
        })
    }

    pub fn slot(&self, subject: usize, object: usize) -> Option<usize> {
        self.edge_slots
            .iter()
            .find(|(s, o, _)| *s == subject && *o == object)
            .map(|(_, _, p)| *p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaPair {
    pub id: usize,
    pub scene: usize,
    pub text: String,
    pub family: QuestionFamily,
    /// Index into the dataset's answer lexicon.
    pub answer: usize,
    /// Referenced (subject, object) pair for relation questions.
    pub refs: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub categories: Vec<String>,
    pub attributes: Vec<String>,
    pub predicates: Vec<String>,
    /// Answer lexicon; `QaPair::answer` indexes into it.
    pub answers: Vec<String>,
    pub noise_dim: usize,
    pub noise_scale: Real,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn d_obj(&self) -> usize {
        self.categories.len() + self.attributes.len() + self.noise_dim
    }

    pub fn answer_index(&self, text: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == text)
    }
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub meta: DatasetMeta,
    pub scenes: Vec<SyntheticScene>,
    pub train: Vec<QaPair>,
    pub val: Vec<QaPair>,
}

// ---- geometry ---------------------------------------------------------------

fn overlaps(a: &[Real; 4], b: &[Real; 4], margin: Real) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

/// Spatial predicate of the ordered pair (a, b), x-axis first. Total for
/// non-overlapping boxes.
pub fn spatial_predicate(a: &[Real; 4], b: &[Real; 4]) -> Option<usize> {
    if a[2] < b[0] {
        Some(LEFT_OF)
    } else if b[2] < a[0] {
        Some(RIGHT_OF)
    } else if a[3] < b[1] {
        Some(ABOVE)
    } else if b[3] < a[1] {
        Some(BELOW)
    } else {
        None
    }
}

// ---- generation ---------------------------------------------------------------

const LAYOUT_RETRIES: usize = 1_000;

fn place_boxes(
    count: usize,
    cfg: &SceneGenConfig,
    rng: &mut SeedableStream,
) -> Result<Vec<[Real; 4]>> {
    let mut boxes: Vec<[Real; 4]> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count {
        attempts += 1;
        if attempts > LAYOUT_RETRIES {
            return Err(Error::Generation(format!(
                "could not place {count} non-overlapping boxes within {LAYOUT_RETRIES} attempts"
            )));
        }
        let w = rng.gen_range(cfg.box_min..=cfg.box_max);
        let h = rng.gen_range(cfg.box_min..=cfg.box_max);
        let x1 = rng.gen_range(0.0..1.0 - w);
        let y1 = rng.gen_range(0.0..1.0 - h);
        let candidate = [x1, y1, x1 + w, y1 + h];
        if boxes.iter().all(|b| !overlaps(b, &candidate, 0.02)) {
            boxes.push(candidate);
        }
    }
    Ok(boxes)
}

fn build_scene(id: usize, cfg: &SceneGenConfig, rng: &mut SeedableStream) -> Result<SyntheticScene> {
    let count = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let boxes = place_boxes(count, cfg, rng)?;
    let objects: Vec<SceneObject> = boxes
        .into_iter()
        .map(|bbox| SceneObject {
            category: rng.gen_range(0..cfg.categories.len()),
            attribute: rng.gen_range(0..cfg.attributes.len()),
            bbox,
            noise_seed: rng.gen(),
        })
        .collect();

    let n = objects.len();
    let n_spatial = SPATIAL_PREDICATES.len();
    let mut relations = Vec::new();
    let mut semantic = vec![None; n * n];
    for a in 0..n {
        for b in a + 1..n {
            if !cfg.semantic_predicates.is_empty() && rng.gen::<f64>() < cfg.semantic_prob {
                let p = n_spatial + rng.gen_range(0..cfg.semantic_predicates.len());
                semantic[a * n + b] = Some(p);
                semantic[b * n + a] = Some(p);
            }
        }
    }
    let mut spatial = vec![None; n * n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let sp = spatial_predicate(&objects[a].bbox, &objects[b].bbox)
                .expect("disjoint boxes always have a spatial relation");
            spatial[a * n + b] = Some(sp);
            relations.push(RelationTriple {
                subject: a,
                predicate: sp,
                object: b,
            });
            if let Some(p) = semantic[a * n + b] {
                relations.push(RelationTriple {
                    subject: a,
                    predicate: p,
                    object: b,
                });
            }
        }
    }
    let mut edge_slots = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            if rng.gen::<f64>() >= cfg.annotation_density {
                continue;
            }
            let p = semantic[a * n + b].or(spatial[a * n + b]).unwrap();
            edge_slots.push((a, b, p));
        }
    }
    Ok(SyntheticScene {
        id,
        objects,
        relations,
        edge_slots,
    })
}

// ---- questions & the symbolic oracle ---------------------------------------------

/// Structured reading of a question's text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedQuestion {
    /// "what color is the {category} ?"
    WhatColor { category: usize },
    /// "is there a {category} ?"
    IsThere { category: usize },
    /// "what is {predicate} the {category} ?"
    WhatRelated { predicate: usize, category: usize },
    /// "is the {catA} {predicate} the {catB} ?"
    IsRelated {
        subject_cat: usize,
        predicate: usize,
        object_cat: usize,
    },
}

/// Parses question text back into its structured form. The inverse of the
/// generator's templates; used by the symbolic oracle so it never peeks at
/// stored answers.
pub fn parse_question(text: &str, meta: &DatasetMeta) -> Result<ParsedQuestion> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let cat = |name: &str| -> Result<usize> {
        meta.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Data(format!("unknown category {name} in question")))
    };
    let pred = |tokens: &[&str]| -> Result<usize> {
        let joined = tokens.join(" ");
        meta.predicates
            .iter()
            .position(|p| *p == joined)
            .ok_or_else(|| Error::Data(format!("unknown predicate {joined} in question")))
    };
    let bad = || Error::Data(format!("unparseable question: {text}"));
    match toks.as_slice() {
        ["what", "color", "is", "the", c, "?"] => Ok(ParsedQuestion::WhatColor { category: cat(c)? }),
        ["is", "there", "a", c, "?"] => Ok(ParsedQuestion::IsThere { category: cat(c)? }),
        ["what", "is", rest @ .., "the", c, "?"] if !rest.is_empty() => {
            Ok(ParsedQuestion::WhatRelated {
                predicate: pred(rest)?,
                category: cat(c)?,
            })
        }
        ["is", "the", a, rest @ .., "the", b, "?"] if !rest.is_empty() => {
            Ok(ParsedQuestion::IsRelated {
                subject_cat: cat(a)?,
                predicate: pred(rest)?,
                object_cat: cat(b)?,
            })
        }
        _ => Err(bad()),
    }
}

/// Brute-force solver over the scene record. Returns the answer text when
/// the question is uniquely determined, `None` otherwise.
pub fn symbolic_answer(
    scene: &SyntheticScene,
    q: &ParsedQuestion,
    meta: &DatasetMeta,
) -> Option<String> {
    let of_cat = |c: usize| -> Vec<usize> {
        (0..scene.n())
            .filter(|&i| scene.objects[i].category == c)
            .collect()
    };
    match *q {
        ParsedQuestion::WhatColor { category } => {
            let members = of_cat(category);
            if members.len() == 1 {
                Some(meta.attributes[scene.objects[members[0]].attribute].clone())
            } else {
                None
            }
        }
        ParsedQuestion::IsThere { category } => {
            Some(if of_cat(category).is_empty() { "no" } else { "yes" }.to_string())
        }
        ParsedQuestion::WhatRelated {
            predicate,
            category,
        } => {
            let anchors = of_cat(category);
            if anchors.len() != 1 {
                return None;
            }
            let anchor = anchors[0];
            let subjects: Vec<usize> = (0..scene.n())
                .filter(|&j| j != anchor && scene.has_relation(j, predicate, anchor))
                .collect();
            if subjects.len() == 1 {
                Some(meta.categories[scene.objects[subjects[0]].category].clone())
            } else {
                None
            }
        }
        ParsedQuestion::IsRelated {
            subject_cat,
            predicate,
            object_cat,
        } => {
            let subjects = of_cat(subject_cat);
            let objects = of_cat(object_cat);
            if subjects.len() != 1 || objects.len() != 1 || subjects[0] == objects[0] {
                return None;
            }
            Some(
                if scene.has_relation(subjects[0], predicate, objects[0]) {
                    "yes"
                } else {
                    "no"
                }
                .to_string(),
            )
        }
    }
}

struct QuestionDraft {
    text: String,
    family: QuestionFamily,
    answer: String,
    refs: Option<(usize, usize)>,
}

/// Tries to instantiate one question of the given family on a scene. The
/// draft is only returned when the symbolic oracle confirms the intended
/// answer, so emitted questions are solvable by construction.
fn draft_question(
    scene: &SyntheticScene,
    family: QuestionFamily,
    cfg: &SceneGenConfig,
    meta: &DatasetMeta,
    rng: &mut SeedableStream,
) -> Option<QuestionDraft> {
    let n = scene.n();
    let draft = match family {
        QuestionFamily::Attribute => {
            let i = rng.gen_range(0..n);
            let cat = scene.objects[i].category;
            let text = format!("what color is the {} ?", meta.categories[cat]);
            QuestionDraft {
                text,
                family,
                answer: meta.attributes[scene.objects[i].attribute].clone(),
                refs: None,
            }
        }
        QuestionFamily::Existence => {
            let want_yes = rng.gen::<f64>() < 0.5;
            let present: HashSet<usize> = scene.objects.iter().map(|o| o.category).collect();
            let pool: Vec<usize> = (0..meta.categories.len())
                .filter(|c| present.contains(c) == want_yes)
                .collect();
            let cat = *pool.choose(rng)?;
            QuestionDraft {
                text: format!("is there a {} ?", meta.categories[cat]),
                family,
                answer: if want_yes { "yes" } else { "no" }.to_string(),
                refs: None,
            }
        }
        QuestionFamily::Relation => {
            if rng.gen::<f64>() < cfg.relation_open_fraction {
                // open: "what is {p} the {cat} ?", anchored at a
                // unique-category object with a unique, slot-visible subject
                let anchor = rng.gen_range(0..n);
                let incoming: Vec<(usize, usize, usize)> = scene
                    .edge_slots
                    .iter()
                    .filter(|(_, o, _)| *o == anchor)
                    .copied()
                    .collect();
                let (subject, _, predicate) = *incoming.as_slice().choose(rng)?;
                let text = format!(
                    "what is {} the {} ?",
                    meta.predicates[predicate], meta.categories[scene.objects[anchor].category]
                );
                QuestionDraft {
                    text,
                    family,
                    answer: meta.categories[scene.objects[subject].category].clone(),
                    refs: Some((subject, anchor)),
                }
            } else {
                // binary: ask about a slot-visible pair; yes uses the slot
                // predicate, no uses a predicate absent from the record
                let (a, b, slot_pred) = *scene.edge_slots.as_slice().choose(rng)?;
                let want_yes = rng.gen::<f64>() < 0.5;
                let predicate = if want_yes {
                    slot_pred
                } else {
                    let absent: Vec<usize> = (0..meta.predicates.len())
                        .filter(|&p| !scene.has_relation(a, p, b))
                        .collect();
                    *absent.choose(rng)?
                };
                let text = format!(
                    "is the {} {} the {} ?",
                    meta.categories[scene.objects[a].category],
                    meta.predicates[predicate],
                    meta.categories[scene.objects[b].category]
                );
                QuestionDraft {
                    text,
                    family,
                    answer: if want_yes { "yes" } else { "no" }.to_string(),
                    refs: Some((a, b)),
                }
            }
        }
    };
    // the oracle must confirm the draft, otherwise the instantiation was
    // ambiguous (duplicate categories, multiple subjects, ...)
    let parsed = parse_question(&draft.text, meta).ok()?;
    let oracle = symbolic_answer(scene, &parsed, meta)?;
    if oracle != draft.answer {
        return None;
    }
    Some(draft)
}

/// Generates scenes and a QA set with analytic ground truth.
pub fn generate_dataset(cfg: &SceneGenConfig) -> Result<SceneDataset> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let predicates = cfg.predicates();
    let mut answers: Vec<String> = vec!["yes".into(), "no".into()];
    answers.extend(cfg.attributes.iter().cloned());
    answers.extend(cfg.categories.iter().cloned());
    let meta = DatasetMeta {
        categories: cfg.categories.clone(),
        attributes: cfg.attributes.clone(),
        predicates,
        answers,
        noise_dim: cfg.noise_dim,
        noise_scale: cfg.noise_scale,
        seed: cfg.seed,
    };

    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let train_scenes = cfg.scenes - (cfg.scenes as f64 * cfg.holdout_fraction).round() as usize;
    let mut qid = 0;
    for sid in 0..cfg.scenes {
        let scene = build_scene(sid, cfg, &mut rng)?;
        let mut texts_seen = HashSet::new();
        let mut emitted = 0;
        let mut tries = 0;
        while emitted < cfg.questions_per_scene && tries < 60 * cfg.questions_per_scene {
            tries += 1;
            let family = *cfg.families.as_slice().choose(&mut rng).expect("families nonempty");
            let Some(draft) = draft_question(&scene, family, cfg, &meta, &mut rng) else {
                continue;
            };
            if !texts_seen.insert(draft.text.clone()) {
                continue;
            }
            let answer = meta
                .answer_index(&draft.answer)
                .expect("draft answers come from the lexicon");
            let pair = QaPair {
                id: qid,
                scene: sid,
                text: draft.text,
                family: draft.family,
                answer,
                refs: draft.refs,
            };
            qid += 1;
            if sid < train_scenes {
                train.push(pair);
            } else {
                val.push(pair);
            }
            emitted += 1;
        }
        scenes.push(scene);
    }
    Ok(SceneDataset {
        meta,
        scenes,
        train,
        val,
    })
}

// ---- tensors from scenes -----------------------------------------------------------

/// Node features: one-hot(category) ++ one-hot(attribute) ++ seeded noise.
pub fn node_features(scene: &SyntheticScene, meta: &DatasetMeta) -> Tensor {
    let d = meta.d_obj();
    let mut data = vec![0.0; scene.n() * d];
    for (i, obj) in scene.objects.iter().enumerate() {
        let row = &mut data[i * d..(i + 1) * d];
        row[obj.category] = 1.0;
        row[meta.categories.len() + obj.attribute] = 1.0;
        let mut noise_rng = rng::seeded(rng::derive_seed(obj.noise_seed, 0xFEA7));
        for v in row
            .iter_mut()
            .skip(meta.categories.len() + meta.attributes.len())
        {
            *v = noise_rng.gen_range(-meta.noise_scale..=meta.noise_scale);
        }
    }
    Tensor::new(vec![scene.n(), d], data).expect("consistent feature shape")
}

pub fn boxes_tensor(scene: &SyntheticScene) -> Tensor {
    let mut data = Vec::with_capacity(scene.n() * 4);
    for o in &scene.objects {
        data.extend_from_slice(&o.bbox);
    }
    Tensor::new(vec![scene.n(), 4], data).expect("consistent box shape")
}

/// Where edge embeddings come from when materializing scene graphs.
pub enum EdgeProvider<'a> {
    /// Deterministic per-predicate vectors; for unit tests and ablations
    /// that do not involve the encoder.
    Idealized { width: usize },
    /// A frozen relationship encoder applied to synthetic pair maps keyed
    /// by predicate and endpoint categories.
    Encoder {
        spec: &'a RelationEncoderSpec,
        params: &'a ModelParams,
        noise: Real,
    },
}

const IDEAL_EDGE_SEED: u64 = 0x1dea_11ed;

/// Deterministic stand-in embedding for a predicate.
pub fn idealized_edge_embedding(predicate: usize, width: usize) -> Tensor {
    let mut rng = rng::seeded(rng::derive_seed(IDEAL_EDGE_SEED, predicate as u64));
    Tensor::uniform(vec![width], 1.0, &mut rng)
}

impl EdgeProvider<'_> {
    pub fn width(&self) -> usize {
        match self {
            EdgeProvider::Idealized { width } => *width,
            EdgeProvider::Encoder { spec, .. } => spec.embed_width,
        }
    }

    /// One `(from, to, predicate, embedding)` entry per visible edge slot.
    pub fn edge_embeddings(
        &self,
        scene: &SyntheticScene,
    ) -> Result<Vec<(usize, usize, usize, Vec<Real>)>> {
        let mut out = Vec::with_capacity(scene.edge_slots.len());
        match self {
            EdgeProvider::Idealized { width } => {
                for &(a, b, p) in &scene.edge_slots {
                    let emb = idealized_edge_embedding(p, *width);
                    out.push((a, b, p, emb.data().to_vec()));
                }
            }
            EdgeProvider::Encoder { spec, params, noise } => {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let mut trunks: Vec<Option<crate::tape::Var>> = vec![None; scene.n()];
                for &(a, b, p) in &scene.edge_slots {
                    for &i in &[a, b] {
                        if trunks[i].is_none() {
                            let obj = &scene.objects[i];
                            let map = noisy_map(
                                MapKind::Category,
                                obj.category,
                                spec.in_channels,
                                *noise,
                                rng::derive_seed(obj.noise_seed, 0xED6E),
                            );
                            let x = tape.constant(map);
                            trunks[i] = Some(spec.trunk(&mut tape, &bound, x)?);
                        }
                    }
                    let edge_seed = rng::derive_seed(
                        rng::derive_seed(scene.objects[a].noise_seed, scene.objects[b].noise_seed),
                        p as u64,
                    );
                    let union = noisy_map(MapKind::Predicate, p, spec.in_channels, *noise, edge_seed);
                    let xr = tape.constant(union);
                    let tr = spec.trunk(&mut tape, &bound, xr)?;
                    let emb = spec.relation_head(
                        &mut tape,
                        &bound,
                        trunks[a].unwrap(),
                        tr,
                        trunks[b].unwrap(),
                    )?;
                    out.push((a, b, p, tape.data(emb).to_vec()));
                }
            }
        }
        Ok(out)
    }

    /// Materializes the scene graph: node features, boxes, and one embedding
    /// per visible edge slot. Unannotated pairs keep `unknown_embedding`.
    pub fn scene_graph(
        &self,
        scene: &SyntheticScene,
        meta: &DatasetMeta,
        unknown_embedding: &[Real],
    ) -> Result<SceneGraph> {
        let mut graph = SceneGraph::new(
            node_features(scene, meta),
            Some(boxes_tensor(scene)),
            unknown_embedding,
        )?;
        for (a, b, p, emb) in self.edge_embeddings(scene)? {
            graph.set_edge(a, b, &emb, Some(p));
        }
        Ok(graph)
    }
}

// ---- dataset IO -----------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct QaRow {
    id: usize,
    scene: usize,
    text: String,
    family: QuestionFamily,
    answer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    refs: Option<(usize, usize)>,
}

impl From<&QaPair> for QaRow {
    fn from(q: &QaPair) -> Self {
        QaRow {
            id: q.id,
            scene: q.scene,
            text: q.text.clone(),
            family: q.family,
            answer: q.answer,
            refs: q.refs,
        }
    }
}

impl From<QaRow> for QaPair {
    fn from(r: QaRow) -> Self {
        QaPair {
            id: r.id,
            scene: r.scene,
            text: r.text,
            family: r.family,
            answer: r.answer,
            refs: r.refs,
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

impl SceneDataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::to_string_pretty(&self.meta)?;
        fs::write(dir.join("meta.json"), meta)?;
        write_jsonl(&dir.join("scenes.jsonl"), self.scenes.iter())?;
        write_jsonl(&dir.join("questions_train.jsonl"), self.train.iter().map(QaRow::from))?;
        write_jsonl(&dir.join("questions_val.jsonl"), self.val.iter().map(QaRow::from))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(dir.join("meta.json"))
            .map_err(|e| Error::Data(format!("cannot read meta.json in {}: {e}", dir.display())))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_text)?;
        let scenes: Vec<SyntheticScene> = read_jsonl(&dir.join("scenes.jsonl"))?;
        let train: Vec<QaRow> = read_jsonl(&dir.join("questions_train.jsonl"))?;
        let val: Vec<QaRow> = read_jsonl(&dir.join("questions_val.jsonl"))?;
        Ok(SceneDataset {
            meta,
            scenes,
            train: train.into_iter().map(QaPair::from).collect(),
            val: val.into_iter().map(QaPair::from).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SceneGenConfig {
        SceneGenConfig {
            scenes: 30,
            questions_per_scene: 3,
            seed: 7,
            ..SceneGenConfig::default()
        }
    }

    #[test]
    fn two_objects_strictly_left_get_both_directed_relations() {
        let cfg = SceneGenConfig {
            scenes: 1,
            objects_min: 2,
            objects_max: 2,
            semantic_prob: 0.0,
            seed: 1,
            ..SceneGenConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let scene = &ds.scenes[0];
        let (a, b) = (0usize, 1usize);
        let (left, right) = if scene.objects[a].bbox[2] < scene.objects[b].bbox[0] {
            (a, b)
        } else if scene.objects[b].bbox[2] < scene.objects[a].bbox[0] {
            (b, a)
        } else {
            return; // boxes disjoint on y only; spatial rule used the y axis
        };
        assert!(scene.has_relation(left, LEFT_OF, right));
        assert!(scene.has_relation(right, RIGHT_OF, left));
    }

    #[test]
    fn existence_question_on_present_category_is_yes() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let scene = &ds.scenes[0];
        let cat = scene.objects[0].category;
        let q = ParsedQuestion::IsThere { category: cat };
        assert_eq!(symbolic_answer(scene, &q, &ds.meta).unwrap(), "yes");
        let absent = (0..ds.meta.categories.len())
            .find(|c| scene.objects.iter().all(|o| o.category != *c));
        if let Some(c) = absent {
            let q = ParsedQuestion::IsThere { category: c };
            assert_eq!(symbolic_answer(scene, &q, &ds.meta).unwrap(), "no");
        }
    }

    #[test]
    fn oracle_answers_every_generated_question() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        assert!(!ds.train.is_empty() && !ds.val.is_empty());
        for q in ds.train.iter().chain(&ds.val) {
            let parsed = parse_question(&q.text, &ds.meta).unwrap();
            let answer = symbolic_answer(&ds.scenes[q.scene], &parsed, &ds.meta)
                .unwrap_or_else(|| panic!("oracle cannot answer {:?}", q.text));
            assert_eq!(
                ds.meta.answer_index(&answer).unwrap(),
                q.answer,
                "oracle disagrees on {:?}",
                q.text
            );
        }
    }

    #[test]
    fn generation_is_deterministic_under_seed() {
        let a = generate_dataset(&small_cfg()).unwrap();
        let b = generate_dataset(&small_cfg()).unwrap();
        assert_eq!(a.scenes, b.scenes);
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.text, y.text);
            assert_eq!(x.answer, y.answer);
        }
    }

    #[test]
    fn boxes_do_not_overlap() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        for scene in &ds.scenes {
            for (i, a) in scene.objects.iter().enumerate() {
                for b in scene.objects.iter().skip(i + 1) {
                    assert!(!overlaps(&a.bbox, &b.bbox, 0.0));
                }
            }
        }
    }

    #[test]
    fn unsatisfiable_layout_is_a_generation_error() {
        let cfg = SceneGenConfig {
            scenes: 1,
            objects_min: 4,
            objects_max: 4,
            box_min: 0.7,
            box_max: 0.8,
            seed: 2,
            ..SceneGenConfig::default()
        };
        assert!(matches!(
            generate_dataset(&cfg).unwrap_err(),
            Error::Generation(_)
        ));
    }

    #[test]
    fn relabeling_objects_yields_an_isomorphic_graph() {
        let ds = generate_dataset(&SceneGenConfig {
            scenes: 1,
            objects_min: 4,
            objects_max: 4,
            seed: 3,
            ..SceneGenConfig::default()
        })
        .unwrap();
        let scene = &ds.scenes[0];
        let n = scene.n();
        let perm: Vec<usize> = vec![2, 0, 3, 1]; // new index -> old index
        let permuted = SyntheticScene {
            id: scene.id,
            objects: perm.iter().map(|&old| scene.objects[old].clone()).collect(),
            relations: scene
                .relations
                .iter()
                .map(|r| RelationTriple {
                    subject: perm.iter().position(|&o| o == r.subject).unwrap(),
                    predicate: r.predicate,
                    object: perm.iter().position(|&o| o == r.object).unwrap(),
                })
                .collect(),
            edge_slots: scene
                .edge_slots
                .iter()
                .map(|&(a, b, p)| {
                    (
                        perm.iter().position(|&o| o == a).unwrap(),
                        perm.iter().position(|&o| o == b).unwrap(),
                        p,
                    )
                })
                .collect(),
        };
        let provider = EdgeProvider::Idealized { width: 5 };
        let unknown = vec![0.25; 5];
        let g1 = provider.scene_graph(scene, &ds.meta, &unknown).unwrap();
        let g2 = provider.scene_graph(&permuted, &ds.meta, &unknown).unwrap();
        let d = ds.meta.d_obj();
        for new in 0..n {
            let old = perm[new];
            assert_eq!(
                &g2.node_features().data()[new * d..(new + 1) * d],
                &g1.node_features().data()[old * d..(old + 1) * d]
            );
            for new2 in 0..n {
                if new == new2 {
                    continue;
                }
                let old2 = perm[new2];
                assert_eq!(g2.edge_embedding(new, new2), g1.edge_embedding(old, old2));
                assert_eq!(g2.edge_label(new, new2), g1.edge_label(old, old2));
            }
        }
    }

    #[test]
    fn encoder_edges_are_deterministic_and_have_width() {
        let spec = RelationEncoderSpec {
            in_channels: 2,
            mid_channels: 3,
            embed_width: 6,
            gru_hidden: 4,
        };
        let mut params = ModelParams::new();
        let mut prng = rng::seeded(40);
        spec.init(&mut params, 4, &mut prng);
        let ds = generate_dataset(&SceneGenConfig {
            scenes: 1,
            seed: 4,
            ..SceneGenConfig::default()
        })
        .unwrap();
        let provider = EdgeProvider::Encoder {
            spec: &spec,
            params: &params,
            noise: 0.1,
        };
        let unknown = vec![0.0; 6];
        let g1 = provider
            .scene_graph(&ds.scenes[0], &ds.meta, &unknown)
            .unwrap();
        let g2 = provider
            .scene_graph(&ds.scenes[0], &ds.meta, &unknown)
            .unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.edge_width(), 6);
        if let Some(&(a, b, _)) = ds.scenes[0].edge_slots.first() {
            assert!(g1.edge_is_known(a, b));
            assert!(g1.edge_embedding(a, b).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_cfg()).unwrap();
        ds.write(dir.path()).unwrap();
        let back = SceneDataset::load(dir.path()).unwrap();
        assert_eq!(back.scenes, ds.scenes);
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.meta.answers, ds.meta.answers);
        assert_eq!(back.val[0].text, ds.val[0].text);
    }

    #[test]
    fn relation_only_config_emits_only_relation_questions() {
        let cfg = SceneGenConfig {
            scenes: 10,
            families: vec![QuestionFamily::Relation],
            seed: 5,
            ..SceneGenConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(!ds.train.is_empty());
        for q in ds.train.iter().chain(&ds.val) {
            assert_eq!(q.family, QuestionFamily::Relation);
            assert!(q.refs.is_some());
        }
    }
}
