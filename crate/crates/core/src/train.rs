//! Training loops, evaluation, checkpoints, and attention dumps.
//!
//! Two stages mirror the two-model pipeline: the relationship encoder
//! trains with Adam on alignment losses; the VQA model trains with Adamax
//! on summed binary cross-entropy with global-norm clipping. Both loops are
//! driven by one seeded stream, checkpoint their full state every epoch,
//! and resume bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{EdgeSourceConfig, ExperimentConfig, RelTrainConfig};
use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::model::{
    argmax, extract_trace, AttentionTrace, SceneGcnConfig, SceneGcnModel, Variant,
};
use crate::optim::{clip_gradients, Optimizer, OptimizerKind};
use crate::params::ModelParams;
use crate::relation::{
    batch_forward, build_predicate_index, load_manifest, total_relation_loss, PredicateIndex,
    RelationEncoderSpec, RelationSample, SyntheticRelationData,
};
use crate::rng::{self, RngState, SeedableStream};
use crate::synthetic::{DatasetMeta, EdgeProvider, QaPair, SceneDataset};
use crate::tape::{Mode, Tape};
use crate::tensor::{Offset, Real, Tensor};
use crate::text::Vocabulary;

// ---- answer vocabulary -----------------------------------------------------

/// Answer lexicon of a trained model: answers at or above the frequency
/// threshold, ordered by descending frequency with lexicographic
/// tie-breaking.
#[derive(Debug, Clone)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, threshold: usize) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= threshold)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if kept.is_empty() {
            return Err(Error::Config(format!(
                "no answer reaches the frequency threshold {threshold}"
            )));
        }
        let answers: Vec<String> = kept.into_iter().map(|(t, _)| t.to_string()).collect();
        Self::from_list(answers)
    }

    pub fn from_list(answers: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate answer {a}")));
            }
        }
        Ok(AnswerVocab { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    pub fn answer(&self, i: usize) -> &str {
        &self.answers[i]
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}

/// Ground-truth score of an answer under annotator voting: `min(1, n/3)`.
pub fn vqa_gt_score(votes: &BTreeMap<String, u32>) -> BTreeMap<String, Real> {
    votes
        .iter()
        .map(|(a, &n)| (a.clone(), (n as Real / 3.0).min(1.0)))
        .collect()
}

// ---- prepared scenes ---------------------------------------------------------

/// Scene tensors plus compact known-edge embeddings, built once (the edge
/// encoder is frozen) and shared across epochs and model variants.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub features: Tensor,
    pub boxes: Tensor,
    pub edges: Vec<(usize, usize, usize, Vec<Real>)>,
}

#[derive(Debug, Clone)]
pub struct PreparedScenes {
    pub scenes: Vec<PreparedScene>,
    pub edge_width: usize,
}

pub fn prepare_scenes(ds: &SceneDataset, provider: &EdgeProvider) -> Result<PreparedScenes> {
    let mut scenes = Vec::with_capacity(ds.scenes.len());
    for scene in &ds.scenes {
        scenes.push(PreparedScene {
            features: crate::synthetic::node_features(scene, &ds.meta),
            boxes: crate::synthetic::boxes_tensor(scene),
            edges: provider.edge_embeddings(scene)?,
        });
    }
    Ok(PreparedScenes {
        scenes,
        edge_width: provider.width(),
    })
}

impl PreparedScene {
    pub fn graph(&self, edge_width: usize) -> Result<SceneGraph> {
        let mut g = SceneGraph::new(
            self.features.clone(),
            Some(self.boxes.clone()),
            &vec![0.0; edge_width],
        )?;
        for (a, b, p, emb) in &self.edges {
            g.set_edge(*a, *b, emb, Some(*p));
        }
        Ok(g)
    }
}

/// Resolves the experiment's edge source, loading the frozen encoder
/// checkpoint when one is configured.
pub fn edge_provider<'a>(
    cfg: &ExperimentConfig,
    encoder: &'a Option<RelationBundle>,
) -> Result<EdgeProvider<'a>> {
    match (&cfg.edge_source, encoder) {
        (EdgeSourceConfig::Idealized, _) => Ok(EdgeProvider::Idealized {
            width: cfg.edge_width,
        }),
        (EdgeSourceConfig::Encoder { noise, .. }, Some(bundle)) => Ok(EdgeProvider::Encoder {
            spec: &bundle.spec,
            params: &bundle.params,
            noise: *noise,
        }),
        (EdgeSourceConfig::Encoder { checkpoint, .. }, None) => Err(Error::Config(format!(
            "edge source needs the encoder checkpoint {} loaded",
            checkpoint.display()
        ))),
    }
}

// ---- evaluation ---------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FamilyStats {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: Real,
    /// Annotator-vote credit of the predicted answers; equals exact-match
    /// accuracy when no votes accompany the data.
    pub vqa_credit: Real,
    pub per_family: BTreeMap<String, FamilyStats>,
    pub total: usize,
    pub seed: u64,
    pub config_digest: String,
}

/// Scores an arbitrary predictor (predicted answer-vocab index per
/// question). Out-of-vocabulary gold answers count as wrong.
pub fn evaluate_with<F>(
    answers: &AnswerVocab,
    qa: &[QaPair],
    meta: &DatasetMeta,
    votes: Option<&HashMap<usize, BTreeMap<String, u32>>>,
    mut scorer: F,
) -> Result<EvalReport>
where
    F: FnMut(&QaPair) -> Result<usize>,
{
    if qa.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut per_family: BTreeMap<String, FamilyStats> = BTreeMap::new();
    let mut correct = 0usize;
    let mut credit = 0.0;
    for pair in qa {
        let predicted_idx = scorer(pair)?;
        let predicted = answers.answer(predicted_idx);
        let gold = &meta.answers[pair.answer];
        let hit = predicted == gold;
        let stats = per_family.entry(pair.family.name().to_string()).or_default();
        stats.total += 1;
        if hit {
            stats.correct += 1;
            correct += 1;
        }
        credit += match votes.and_then(|v| v.get(&pair.id)) {
            Some(v) => vqa_gt_score(v).get(predicted).copied().unwrap_or(0.0),
            None => hit as usize as Real,
        };
    }
    Ok(EvalReport {
        overall_accuracy: correct as Real / qa.len() as Real,
        vqa_credit: credit / qa.len() as Real,
        per_family,
        total: qa.len(),
        seed: 0,
        config_digest: String::new(),
    })
}

// ---- VQA bundle, training, evaluation ------------------------------------------

#[derive(Debug, Clone)]
pub struct VqaBundle {
    pub config: ExperimentConfig,
    pub model: SceneGcnModel,
    pub vocab_q: Vocabulary,
    pub answers: AnswerVocab,
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: Real,
    pub lr: Real,
    pub clip_events: usize,
    pub eval: Option<EvalReport>,
}

pub struct VqaTrainOutcome {
    pub bundle: VqaBundle,
    pub optimizer: Optimizer,
    pub rng: SeedableStream,
    pub logs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

fn model_config(
    cfg: &ExperimentConfig,
    d_obj: usize,
    question_vocab: usize,
    n_a: usize,
) -> SceneGcnConfig {
    SceneGcnConfig {
        variant: cfg.variant,
        d: cfg.d,
        d_q: cfg.d_q,
        d_f: cfg.d_f,
        heads: cfg.heads,
        d_obj,
        edge_width: cfg.edge_width,
        n_a,
        mlp_hidden: cfg.mlp_hidden,
        dropout: cfg.dropout,
        question_vocab,
        gru_layers: cfg.gru_layers,
        question_attention: cfg.question_attention,
    }
}

struct TrainExample {
    scene: usize,
    tokens: Vec<usize>,
    target: usize,
}

/// Trains the VQA model. `resume` continues a checkpointed run bit-exactly;
/// `checkpoint_dir` writes one checkpoint per epoch when set.
pub fn train_vqa(
    cfg: &ExperimentConfig,
    dataset: &SceneDataset,
    prepared: &PreparedScenes,
    resume: Option<&Checkpoint>,
    checkpoint_dir: Option<&Path>,
) -> Result<VqaTrainOutcome> {
    cfg.validate()?;
    if prepared.edge_width != cfg.edge_width {
        return Err(Error::Config(format!(
            "prepared edges are {}-wide, config says {}",
            prepared.edge_width, cfg.edge_width
        )));
    }
    let vocab_q = Vocabulary::from_corpus(
        dataset
            .train
            .iter()
            .flat_map(|q| q.text.split_whitespace()),
    );
    let answers = AnswerVocab::build(
        dataset
            .train
            .iter()
            .map(|q| dataset.meta.answers[q.answer].as_str()),
        cfg.answer_threshold,
    )?;
    if let Some(pinned) = cfg.n_a {
        if pinned != answers.len() {
            return Err(Error::Config(format!(
                "config pins n_a = {pinned}, built answer vocabulary has {}",
                answers.len()
            )));
        }
    }
    let mut stream = rng::seeded(cfg.seed);
    let mcfg = model_config(cfg, dataset.meta.d_obj(), vocab_q.len(), answers.len());
    let mut model = SceneGcnModel::init(mcfg, &mut stream)?;
    let mut optimizer = Optimizer::new(
        OptimizerKind::Adamax,
        cfg.lr,
        cfg.weight_decay,
        cfg.lr_decay,
        &model.params,
    );
    let mut start_epoch = 0usize;
    let mut global_step = 0u64;
    if let Some(ck) = resume {
        if ck.config_json != cfg.canonical_json() {
            return Err(Error::Config(
                "checkpoint was produced by a different configuration".into(),
            ));
        }
        model.params = ck.params.clone();
        optimizer.step_count = ck.opt.step;
        optimizer.lr = ck.lr_current;
        optimizer.first = ck.opt.first.clone();
        optimizer.second = ck.opt.second.clone();
        stream = rng::restore(&ck.rng);
        start_epoch = ck.epoch as usize;
        global_step = ck.global_step;
    }

    // training set: questions whose answers survived the threshold
    let examples: Vec<TrainExample> = dataset
        .train
        .iter()
        .filter_map(|q| {
            answers
                .get(&dataset.meta.answers[q.answer])
                .map(|target| TrainExample {
                    scene: q.scene,
                    tokens: vocab_q.encode(&q.text),
                    target,
                })
        })
        .collect();
    if examples.is_empty() {
        return Err(Error::Data("no trainable questions after filtering".into()));
    }

    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut stream);
        let mut epoch_loss = 0.0;
        let mut clip_events = 0usize;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let ex = &examples[idx];
                let graph = prepared.scenes[ex.scene].graph(cfg.edge_width)?;
                let out = model.forward(
                    &mut tape,
                    &bound,
                    &graph,
                    &ex.tokens,
                    Mode::Train,
                    &mut stream,
                )?;
                let mut target = vec![0.0; answers.len()];
                target[ex.target] = 1.0;
                let targets = Tensor::new(vec![answers.len()], target)?;
                losses.push(tape.bce_with_logits(out.logits, &targets)?);
            }
            let stacked = tape.stack(&losses)?;
            let batch_loss = tape.sum(stacked);
            let loss_value = tape.scalar_value(batch_loss);
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_value} in epoch {epoch} batch {batch_id}"
                )));
            }
            epoch_loss += loss_value;
            tape.backward(batch_loss)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&tape, &bound);
            if clip_gradients(&mut model.params, cfg.clip_norm) < 1.0 {
                clip_events += 1;
            }
            optimizer.step(&mut model.params)?;
            global_step += 1;
        }
        optimizer.decay_lr();

        let bundle_view = VqaBundle {
            config: cfg.clone(),
            model: model.clone(),
            vocab_q: vocab_q.clone(),
            answers: answers.clone(),
        };
        let eval = if dataset.val.is_empty() {
            None
        } else {
            Some(evaluate(&bundle_view, &dataset.val, dataset, prepared)?)
        };
        logs.push(EpochLog {
            epoch,
            mean_loss: epoch_loss / examples.len() as Real,
            lr: optimizer.lr,
            clip_events,
            eval,
        });
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("epoch_{:03}.sgck", epoch + 1));
            let ck = Checkpoint {
                kind: ModelKind::Vqa,
                config_json: cfg.canonical_json(),
                epoch: (epoch + 1) as u32,
                global_step,
                lr_current: optimizer.lr,
                rng: rng::capture(&stream),
                vocab_q: vocab_q.tokens().to_vec(),
                vocab_a: answers.answers().to_vec(),
                params: model.params.clone(),
                opt: OptimizerSnapshot::from(&optimizer),
            };
            save_checkpoint(&path, &ck)?;
            checkpoints.push(path);
        }
    }
    Ok(VqaTrainOutcome {
        bundle: VqaBundle {
            config: cfg.clone(),
            model,
            vocab_q,
            answers,
        },
        optimizer,
        rng: stream,
        logs,
        checkpoints,
    })
}

/// Runs the model over a QA slice: argmax score per question, exact-match
/// accuracy overall and per family.
pub fn evaluate(
    bundle: &VqaBundle,
    qa: &[QaPair],
    dataset: &SceneDataset,
    prepared: &PreparedScenes,
) -> Result<EvalReport> {
    let mut report = evaluate_with(&bundle.answers, qa, &dataset.meta, None, |pair| {
        let graph = prepared.scenes[pair.scene].graph(bundle.config.edge_width)?;
        let tokens = bundle.vocab_q.encode(&pair.text);
        let mut tape = Tape::new();
        let bound = bundle.model.params.bind(&mut tape);
        let mut no_rng = rng::seeded(0);
        let out = bundle
            .model
            .forward(&mut tape, &bound, &graph, &tokens, Mode::Eval, &mut no_rng)?;
        Ok(argmax(tape.data(out.scores)))
    })?;
    report.seed = bundle.config.seed;
    report.config_digest = bundle.config.digest();
    Ok(report)
}

/// Forward one example from a trained model and export its attention
/// state; top edges are labeled through the predicate index when given.
pub fn dump_attention(
    bundle: &VqaBundle,
    dataset: &SceneDataset,
    prepared: &PreparedScenes,
    example_id: usize,
    labeler: Option<(&PredicateIndex, &[String])>,
) -> Result<AttentionTrace> {
    let pair = dataset
        .train
        .iter()
        .chain(&dataset.val)
        .find(|q| q.id == example_id)
        .ok_or_else(|| Error::Data(format!("no example with id {example_id}")))?;
    let graph = prepared.scenes[pair.scene].graph(bundle.config.edge_width)?;
    let tokens = bundle.vocab_q.encode(&pair.text);
    let mut tape = Tape::new();
    let bound = bundle.model.params.bind(&mut tape);
    let mut no_rng = rng::seeded(0);
    let out = bundle
        .model
        .forward(&mut tape, &bound, &graph, &tokens, Mode::Eval, &mut no_rng)?;
    let mut trace = extract_trace(&tape, &out, &graph);
    if let Some((index, lexicon)) = labeler {
        for edge in &mut trace.top_edges {
            let emb = if graph.edge_is_known(edge.from, edge.to) {
                graph.edge_embedding(edge.from, edge.to).to_vec()
            } else if bundle.model.params.contains("edge.unknown") {
                bundle
                    .model
                    .params
                    .get("edge.unknown")
                    .unwrap()
                    .data()
                    .to_vec()
            } else {
                continue;
            };
            let (label, sim) = index.predict(&emb)?;
            edge.predicate = Some(lexicon[label].clone());
            edge.similarity = Some(sim);
        }
    }
    Ok(trace)
}

// ---- relationship-encoder training ------------------------------------------------

/// Data source for encoder training.
pub enum RelationData {
    InMemory(Vec<RelationSample>),
    Synthetic(SyntheticRelationData),
}

impl RelationData {
    pub fn len(&self) -> usize {
        match self {
            RelationData::InMemory(v) => v.len(),
            RelationData::Synthetic(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> RelationSample {
        match self {
            RelationData::InMemory(v) => v[i].clone(),
            RelationData::Synthetic(s) => s.materialize(i),
        }
    }

    fn annotation_tokens(&self) -> Vec<String> {
        match self {
            RelationData::InMemory(v) => v
                .iter()
                .flat_map(|s| {
                    [&s.l_s, &s.l_o, &s.l_r]
                        .into_iter()
                        .flat_map(|l| l.split_whitespace().map(String::from))
                })
                .collect(),
            RelationData::Synthetic(s) => {
                s.annotation_tokens().into_iter().map(String::from).collect()
            }
        }
    }

    /// Distinct predicate annotations, sorted.
    pub fn predicate_lexicon(&self) -> Vec<String> {
        let mut preds: Vec<String> = match self {
            RelationData::InMemory(v) => v.iter().map(|s| s.l_r.clone()).collect(),
            RelationData::Synthetic(s) => s.cfg.predicates.clone(),
        };
        preds.sort_unstable();
        preds.dedup();
        preds
    }
}

#[derive(Debug, Clone)]
pub struct RelEpochLog {
    pub epoch: usize,
    pub mean_loss: Real,
    pub lr: Real,
    pub replacement_batches: usize,
}

pub struct RelationBundle {
    pub spec: RelationEncoderSpec,
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub lexicon: Vec<String>,
}

pub struct RelTrainOutcome {
    pub bundle: RelationBundle,
    pub logs: Vec<RelEpochLog>,
    /// Recall@1 of `predict_predicate` on the held-out samples.
    pub recall_at_1: Real,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains the relationship encoder with Adam, per-epoch learning-rate
/// decay, and the combined triplet + triplet-softmax objective.
pub fn train_relation(
    cfg: &RelTrainConfig,
    data: &RelationData,
    holdout: &[RelationSample],
    checkpoint_dir: Option<&Path>,
) -> Result<RelTrainOutcome> {
    cfg.validate()?;
    if data.len() < cfg.loss.n_pos {
        return Err(Error::Config(format!(
            "dataset of {} samples cannot fill one batch of n_pos = {}",
            data.len(),
            cfg.loss.n_pos
        )));
    }
    let tokens = data.annotation_tokens();
    let vocab = Vocabulary::from_corpus(tokens.iter().map(String::as_str));
    let mut stream = rng::seeded(cfg.seed);
    let mut params = ModelParams::new();
    cfg.encoder.init(&mut params, vocab.len(), &mut stream);
    let mut optimizer = Optimizer::new(
        OptimizerKind::Adam,
        cfg.lr,
        cfg.weight_decay,
        cfg.lr_decay,
        &params,
    );
    let lexicon = data.predicate_lexicon();

    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut replacement_batches = 0usize;
        for chunk in order.chunks_exact(cfg.loss.n_pos) {
            let samples: Vec<RelationSample> = chunk.iter().map(|&i| data.get(i)).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let branches = batch_forward(&cfg.encoder, &mut tape, &bound, &samples, &vocab)?;
            let (loss, stats) = total_relation_loss(
                &mut tape,
                [&branches[0], &branches[1], &branches[2]],
                &cfg.loss,
                &mut stream,
            )?;
            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite relation loss in epoch {epoch} batch {batches}"
                )));
            }
            if !stats.replacement_branches.is_empty() {
                replacement_batches += 1;
            }
            epoch_loss += loss_value;
            batches += 1;
            tape.backward(loss)?;
            params.zero_grads();
            params.accumulate_grads(&tape, &bound);
            optimizer.step(&mut params)?;
            global_step += 1;
        }
        optimizer.decay_lr();
        logs.push(RelEpochLog {
            epoch,
            mean_loss: epoch_loss / batches.max(1) as Real,
            lr: optimizer.lr,
            replacement_batches,
        });
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("epoch_{:03}.sgck", epoch + 1));
            let ck = Checkpoint {
                kind: ModelKind::Relation,
                config_json: cfg.canonical_json(),
                epoch: (epoch + 1) as u32,
                global_step,
                lr_current: optimizer.lr,
                rng: rng::capture(&stream),
                vocab_q: vocab.tokens().to_vec(),
                vocab_a: lexicon.clone(),
                params: params.clone(),
                opt: OptimizerSnapshot::from(&optimizer),
            };
            save_checkpoint(&path, &ck)?;
            checkpoints.push(path);
        }
    }

    let bundle = RelationBundle {
        spec: cfg.encoder,
        params,
        vocab,
        lexicon,
    };
    let recall_at_1 = if holdout.is_empty() {
        0.0
    } else {
        predicate_recall(&bundle, holdout)?
    };
    Ok(RelTrainOutcome {
        bundle,
        logs,
        recall_at_1,
        checkpoints,
    })
}

/// Fraction of samples whose relation embedding retrieves its own predicate
/// at rank 1.
pub fn predicate_recall(bundle: &RelationBundle, samples: &[RelationSample]) -> Result<Real> {
    let index = build_predicate_index(&bundle.spec, &bundle.params, &bundle.lexicon, &bundle.vocab)?;
    let mut hits = 0usize;
    for s in samples {
        let mut tape = Tape::new();
        let bound = bundle.params.bind(&mut tape);
        let x_s = tape.constant(s.x_s.clone());
        let x_o = tape.constant(s.x_o.clone());
        let x_r = tape.constant(s.x_r.clone());
        let r = bundle
            .spec
            .encode_relation(&mut tape, &bound, x_s, x_o, x_r)?;
        let (label, _) = index.predict(tape.data(r))?;
        if bundle.lexicon[label] == s.l_r {
            hits += 1;
        }
    }
    Ok(hits as Real / samples.len() as Real)
}

/// Resolves a relation-training config into its data and holdout sets.
pub fn relation_data_from_config(
    cfg: &RelTrainConfig,
) -> Result<(RelationData, Vec<RelationSample>)> {
    match (&cfg.data_dir, &cfg.synthetic) {
        (Some(dir), _) => {
            let samples = load_manifest(dir, cfg.cap_per_predicate)?;
            // hold out the last `holdout_per_predicate` per predicate
            let mut per_pred: HashMap<String, usize> = HashMap::new();
            for s in &samples {
                *per_pred.entry(s.l_r.clone()).or_insert(0) += 1;
            }
            let mut seen: HashMap<String, usize> = HashMap::new();
            let mut train = Vec::new();
            let mut hold = Vec::new();
            for s in samples {
                let total = per_pred[&s.l_r];
                let taken = seen.entry(s.l_r.clone()).or_insert(0);
                *taken += 1;
                if *taken > total.saturating_sub(cfg.holdout_per_predicate) {
                    hold.push(s);
                } else {
                    train.push(s);
                }
            }
            Ok((RelationData::InMemory(train), hold))
        }
        (None, Some(gen_cfg)) => {
            let data = SyntheticRelationData::generate(gen_cfg.clone())?;
            let mut hold_cfg = gen_cfg.clone();
            hold_cfg.samples_per_predicate = cfg.holdout_per_predicate;
            hold_cfg.seed = rng::derive_seed(gen_cfg.seed, 0x401d);
            let hold_data = SyntheticRelationData::generate(hold_cfg)?;
            let hold = (0..hold_data.len()).map(|i| hold_data.materialize(i)).collect();
            Ok((RelationData::Synthetic(data), hold))
        }
        (None, None) => Err(Error::Config("no relation data source".into())),
    }
}

// ---- checkpoints --------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Vqa,
    Relation,
}

#[derive(Debug, Clone)]
pub struct OptimizerSnapshot {
    pub kind: OptimizerKind,
    pub step: u64,
    pub lr0: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    pub lr_decay: Real,
    pub first: Vec<Vec<Real>>,
    pub second: Vec<Vec<Real>>,
}

impl From<&Optimizer> for OptimizerSnapshot {
    fn from(o: &Optimizer) -> Self {
        OptimizerSnapshot {
            kind: o.kind,
            step: o.step_count,
            lr0: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            lr_decay: o.lr_decay,
            first: o.first.clone(),
            second: o.second.clone(),
        }
    }
}

/// Full training state at an epoch boundary: parameters, optimizer moments,
/// the rng cursor, both vocabularies, and the exact configuration JSON.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config_json: String,
    pub epoch: u32,
    pub global_step: u64,
    pub lr_current: Real,
    pub rng: RngState,
    pub vocab_q: Vec<String>,
    pub vocab_a: Vec<String>,
    pub params: ModelParams,
    pub opt: OptimizerSnapshot,
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_string_list<W: Write>(w: &mut W, list: &[String]) -> Result<()> {
    w.write_all(&(list.len() as u32).to_le_bytes())?;
    for s in list {
        write_string(w, s)?;
    }
    Ok(())
}

fn write_real_vec<W: Write>(w: &mut W, v: &[Real]) -> Result<()> {
    for &x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&[match ck.kind {
        ModelKind::Vqa => 0u8,
        ModelKind::Relation => 1u8,
    }])?;
    write_string(&mut w, &ck.config_json)?;
    w.write_all(&ck.epoch.to_le_bytes())?;
    w.write_all(&ck.global_step.to_le_bytes())?;
    w.write_all(&ck.lr_current.to_le_bytes())?;
    w.write_all(&ck.rng.seed)?;
    w.write_all(&ck.rng.word_pos.to_le_bytes())?;
    write_string_list(&mut w, &ck.vocab_q)?;
    write_string_list(&mut w, &ck.vocab_a)?;
    w.write_all(&(ck.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in ck.params.iter() {
        write_string(&mut w, name)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        write_real_vec(&mut w, tensor.data())?;
    }
    w.write_all(&[match ck.opt.kind {
        OptimizerKind::Adam => 0u8,
        OptimizerKind::Adamax => 1u8,
    }])?;
    w.write_all(&ck.opt.step.to_le_bytes())?;
    for v in [
        ck.opt.lr0,
        ck.opt.beta1,
        ck.opt.beta2,
        ck.opt.eps,
        ck.opt.weight_decay,
        ck.opt.lr_decay,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for m in ck.opt.first.iter().chain(ck.opt.second.iter()) {
        write_real_vec(&mut w, m)?;
    }
    w.flush()?;
    Ok(())
}

fn read_string<R: Read>(off: &mut Offset, r: &mut R) -> Result<String> {
    let len = off.read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(off.error("implausible string length"));
    }
    let mut buf = vec![0u8; len];
    off.read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| off.error("invalid utf-8"))
}

fn read_string_list<R: Read>(off: &mut Offset, r: &mut R) -> Result<Vec<String>> {
    let count = off.read_u32(r)? as usize;
    (0..count).map(|_| read_string(off, r)).collect()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut off = Offset::new(path);
    let mut magic = [0u8; 4];
    off.read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(off.error_at(0, "bad magic, expected SGCK"));
    }
    let version = off.read_u32(&mut r)?;
    if version != 1 {
        return Err(off.error("unsupported checkpoint version"));
    }
    let kind = match off.read_u8(&mut r)? {
        0 => ModelKind::Vqa,
        1 => ModelKind::Relation,
        _ => return Err(off.error("unknown model kind")),
    };
    let config_json = read_string(&mut off, &mut r)?;
    let epoch = off.read_u32(&mut r)?;
    let global_step = off.read_u64(&mut r)?;
    let lr_current = off.read_f64(&mut r)?;
    let mut seed = [0u8; 32];
    off.read_exact(&mut r, &mut seed)?;
    let word_pos = off.read_u128(&mut r)?;
    let vocab_q = read_string_list(&mut off, &mut r)?;
    let vocab_a = read_string_list(&mut off, &mut r)?;
    let param_count = off.read_u32(&mut r)? as usize;
    let mut params = ModelParams::new();
    for _ in 0..param_count {
        let name = read_string(&mut off, &mut r)?;
        let rank = off.read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(off.read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(off.read_f64(&mut r)?);
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    let opt_kind = match off.read_u8(&mut r)? {
        0 => OptimizerKind::Adam,
        1 => OptimizerKind::Adamax,
        _ => return Err(off.error("unknown optimizer kind")),
    };
    let step = off.read_u64(&mut r)?;
    let mut hyper = [0.0; 6];
    for h in hyper.iter_mut() {
        *h = off.read_f64(&mut r)?;
    }
    let mut read_moments = |off: &mut Offset, r: &mut BufReader<File>| -> Result<Vec<Vec<Real>>> {
        let mut out = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let n = params.tensor(i).len();
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(off.read_f64(r)?);
            }
            out.push(v);
        }
        Ok(out)
    };
    let first = read_moments(&mut off, &mut r)?;
    let second = read_moments(&mut off, &mut r)?;
    Ok(Checkpoint {
        kind,
        config_json,
        epoch,
        global_step,
        lr_current,
        rng: RngState { seed, word_pos },
        vocab_q,
        vocab_a,
        params,
        opt: OptimizerSnapshot {
            kind: opt_kind,
            step,
            lr0: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
            weight_decay: hyper[4],
            lr_decay: hyper[5],
            first,
            second,
        },
    })
}

/// Rebuilds a runnable VQA bundle from a checkpoint.
pub fn vqa_bundle_from_checkpoint(ck: &Checkpoint) -> Result<VqaBundle> {
    if ck.kind != ModelKind::Vqa {
        return Err(Error::Config("checkpoint holds a relation encoder".into()));
    }
    let config = ExperimentConfig::from_json(&ck.config_json)?;
    let vocab_q = Vocabulary::from_token_list(ck.vocab_q.clone())?;
    let answers = AnswerVocab::from_list(ck.vocab_a.clone())?;
    let proj = ck
        .params
        .get("proj.w")
        .ok_or_else(|| Error::Data("checkpoint lacks proj.w".into()))?;
    let d_obj = proj.shape()[1];
    let mcfg = model_config(&config, d_obj, vocab_q.len(), answers.len());
    mcfg.validate()?;
    Ok(VqaBundle {
        config,
        model: SceneGcnModel {
            cfg: mcfg,
            params: ck.params.clone(),
        },
        vocab_q,
        answers,
    })
}

/// Rebuilds a frozen relationship encoder from a checkpoint.
pub fn relation_bundle_from_checkpoint(ck: &Checkpoint) -> Result<RelationBundle> {
    if ck.kind != ModelKind::Relation {
        return Err(Error::Config("checkpoint holds a VQA model".into()));
    }
    let config = RelTrainConfig::from_json(&ck.config_json)?;
    Ok(RelationBundle {
        spec: config.encoder,
        params: ck.params.clone(),
        vocab: Vocabulary::from_token_list(ck.vocab_q.clone())?,
        lexicon: ck.vocab_a.clone(),
    })
}

pub fn load_relation_bundle(path: &Path) -> Result<RelationBundle> {
    relation_bundle_from_checkpoint(&load_checkpoint(path)?)
}
