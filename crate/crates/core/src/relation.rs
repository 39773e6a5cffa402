//! Visual relationship encoder: a shared convolutional trunk over subject,
//! object, and union-region feature maps, a shared GRU language module, and
//! the triplet / triplet-softmax alignment losses that pull visual
//! embeddings toward their annotation embeddings under cosine similarity.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams};
use crate::rng::{self, SeedableStream};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::text::{self, GruSpec, Vocabulary};

/// Spatial extent of region feature maps.
pub const MAP_SIDE: usize = 7;

/// One encoder training instance: three `c×7×7` feature maps and the
/// subject / object / predicate annotations.
#[derive(Debug, Clone)]
pub struct RelationSample {
    pub x_s: Tensor,
    pub x_o: Tensor,
    pub x_r: Tensor,
    pub l_s: String,
    pub l_o: String,
    pub l_r: String,
}

impl RelationSample {
    pub fn validate(&self, channels: usize) -> Result<()> {
        for (name, t) in [("x_s", &self.x_s), ("x_o", &self.x_o), ("x_r", &self.x_r)] {
            if t.shape() != [channels, MAP_SIDE, MAP_SIDE] {
                return Err(Error::Dimension {
                    op: "relation_sample",
                    lhs: t.shape().to_vec(),
                    rhs: vec![channels, MAP_SIDE, MAP_SIDE],
                });
            }
            let _ = name;
        }
        for (name, l) in [("l_s", &self.l_s), ("l_o", &self.l_o), ("l_r", &self.l_r)] {
            if l.trim().is_empty() {
                return Err(Error::Input(format!("empty annotation {name}")));
            }
        }
        Ok(())
    }
}

/// Width/depth description of the encoder. `embed_width` is the dimension
/// of the semantic space shared by visual and language embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEncoderSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub embed_width: usize,
    pub gru_hidden: usize,
}

impl Default for RelationEncoderSpec {
    fn default() -> Self {
        RelationEncoderSpec {
            in_channels: 16,
            mid_channels: 32,
            embed_width: 512,
            gru_hidden: 64,
        }
    }
}

impl RelationEncoderSpec {
    fn lang_gru(&self) -> GruSpec {
        GruSpec {
            layers: 1,
            input: text::EMBED_WIDTH,
            hidden: self.gru_hidden,
        }
    }

    /// Inserts every encoder parameter. The conv trunk and the GRU are
    /// shared by all three branches; the subject and object branches also
    /// share their head transform.
    pub fn init(&self, params: &mut ModelParams, vocab_size: usize, rng: &mut SeedableStream) {
        let c = self.in_channels;
        let m = self.mid_channels;
        params.insert("vis.proj.k", Tensor::fan_init(vec![m, c, 1, 1], c, rng));
        params.insert("vis.proj.b", Tensor::zeros(vec![m]));
        for i in 0..3 {
            params.insert(
                format!("vis.conv{i}.k"),
                Tensor::fan_init(vec![m, m, 3, 3], m * 9, rng),
            );
            // small positive bias keeps blocks from starting dead
            params.insert(format!("vis.conv{i}.b"), Tensor::filled(vec![m], 0.01));
            params.insert(
                format!("vis.skip{i}.k"),
                Tensor::fan_init(vec![m, m, 1, 1], m, rng),
            );
        }
        params.insert(
            "head.so.w",
            Tensor::fan_init(vec![self.embed_width, m], m, rng),
        );
        params.insert("head.so.b", Tensor::zeros(vec![self.embed_width]));
        params.insert(
            "head.r.w",
            Tensor::fan_init(vec![self.embed_width, 3 * m], 3 * m, rng),
        );
        params.insert("head.r.b", Tensor::zeros(vec![self.embed_width]));
        text::init_embedding("lang.", vocab_size, params, rng);
        self.lang_gru().init("lang.gru.", params, rng);
        params.insert(
            "lang.proj.w",
            Tensor::fan_init(vec![self.embed_width, self.gru_hidden], self.gru_hidden, rng),
        );
        params.insert("lang.proj.b", Tensor::zeros(vec![self.embed_width]));
    }

    /// Shared compression trunk: 1×1 projection, then three valid 3×3
    /// stride-1 convolutions taking 7×7 down through 5×5 and 3×3 to 1×1,
    /// each with a center-crop + 1×1-projection shortcut added before the
    /// activation. Returns the flattened `[mid_channels]` vector.
    pub fn trunk(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape != [self.in_channels, MAP_SIDE, MAP_SIDE] {
            return Err(Error::Dimension {
                op: "relation_trunk",
                lhs: shape,
                rhs: vec![self.in_channels, MAP_SIDE, MAP_SIDE],
            });
        }
        let proj = tape.conv2d(x, bound.var("vis.proj.k"), 1)?;
        let mut s = tape.add_channel_bias(proj, bound.var("vis.proj.b"))?;
        for i in 0..3 {
            let side = tape.shape(s)[1];
            let y = tape.conv2d(s, bound.var(&format!("vis.conv{i}.k")), 1)?;
            let y = tape.add_channel_bias(y, bound.var(&format!("vis.conv{i}.b")))?;
            let cropped = tape.center_crop(s, side - 2, side - 2)?;
            let skip = tape.conv2d(cropped, bound.var(&format!("vis.skip{i}.k")), 1)?;
            let added = tape.add(y, skip)?;
            // the last block stays linear: the heads read an unconstrained
            // feature, not a nonnegative one, so cosine-space embeddings can
            // point anywhere
            s = if i < 2 { tape.relu(added) } else { added };
        }
        tape.reshape(s, vec![self.mid_channels])
    }

    fn head_so(&self, tape: &mut Tape, bound: &Bound, t: Var) -> Result<Var> {
        tape.linear(bound.var("head.so.w"), t, Some(bound.var("head.so.b")))
    }

    pub(crate) fn relation_head(&self, tape: &mut Tape, bound: &Bound, ts: Var, tr: Var, to: Var) -> Result<Var> {
        let sr = tape.concat(ts, tr)?;
        let sro = tape.concat(sr, to)?;
        tape.linear(bound.var("head.r.w"), sro, Some(bound.var("head.r.b")))
    }

    /// Visual module: all three maps go through the shared trunk; subject
    /// and object use the shared head, the relation head reads the ordered
    /// concatenation of the three trunk outputs (direction-sensitive).
    pub fn visual_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_s: Var,
        x_o: Var,
        x_r: Var,
    ) -> Result<(Var, Var, Var)> {
        let ts = self.trunk(tape, bound, x_s)?;
        let to = self.trunk(tape, bound, x_o)?;
        let tr = self.trunk(tape, bound, x_r)?;
        let v_s = self.head_so(tape, bound, ts)?;
        let v_o = self.head_so(tape, bound, to)?;
        let v_r = self.relation_head(tape, bound, ts, tr, to)?;
        Ok((v_s, v_o, v_r))
    }

    /// Language module: embedding, shared GRU, projection to the semantic
    /// space.
    pub fn language_forward(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Input("empty annotation".into()));
        }
        let table = bound.var("lang.embed.table");
        let x = text::embed(tape, table, tokens)?;
        let (_, final_state) = self.lang_gru().encode(tape, bound, "lang.gru.", x)?;
        tape.linear(bound.var("lang.proj.w"), final_state, Some(bound.var("lang.proj.b")))
    }

    /// The edge embedding consumed downstream: the relation-branch output.
    pub fn encode_relation(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_s: Var,
        x_o: Var,
        x_r: Var,
    ) -> Result<Var> {
        let ts = self.trunk(tape, bound, x_s)?;
        let to = self.trunk(tape, bound, x_o)?;
        let tr = self.trunk(tape, bound, x_r)?;
        self.relation_head(tape, bound, ts, tr, to)
    }
}

/// Margin and batch-shape knobs for the alignment losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RelationLossConfig {
    pub margin: Real,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Multiplier on similarities before the triplet softmax; 1 disables.
    pub sim_scale: Real,
}

impl Default for RelationLossConfig {
    fn default() -> Self {
        RelationLossConfig {
            margin: 0.2,
            n_pos: 256,
            n_neg: 128,
            sim_scale: 1.0,
        }
    }
}

impl RelationLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.n_pos == 0 || self.n_neg == 0 {
            return Err(Error::Config("n_pos and n_neg must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-anchor negative indices. `with_replacement` flags anchors that had
/// fewer eligible negatives than requested.
#[derive(Debug, Clone)]
pub struct NegativePairing {
    pub indices: Vec<Vec<usize>>,
    pub with_replacement: bool,
}

/// Draws `n_neg` in-batch negatives per anchor, uniformly without
/// replacement among entries whose label differs; falls back to sampling
/// with replacement (and flags it) when too few are eligible.
pub fn sample_negatives(
    labels: &[String],
    n_neg: usize,
    rng: &mut SeedableStream,
) -> Result<NegativePairing> {
    let distinct = {
        let mut seen: Vec<&str> = labels.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    if distinct < 2 {
        return Err(Error::Input(
            "negative sampling needs at least 2 distinct annotation classes".into(),
        ));
    }
    let mut with_replacement = false;
    let mut indices = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let eligible: Vec<usize> = (0..labels.len())
            .filter(|&j| labels[j] != *label && j != i)
            .collect();
        debug_assert!(!eligible.is_empty());
        let picks = if eligible.len() >= n_neg {
            let mut pool = eligible;
            pool.shuffle(rng);
            pool.truncate(n_neg);
            pool
        } else {
            with_replacement = true;
            (0..n_neg)
                .map(|_| eligible[rng.gen_range(0..eligible.len())])
                .collect()
        };
        indices.push(picks);
    }
    Ok(NegativePairing {
        indices,
        with_replacement,
    })
}

fn check_batch_shape(
    op: &'static str,
    visual: &[Var],
    language: &[Var],
    pairing: &NegativePairing,
    cfg: &RelationLossConfig,
) -> Result<()> {
    cfg.validate()?;
    if visual.len() != cfg.n_pos || language.len() != cfg.n_pos || pairing.indices.len() != cfg.n_pos
    {
        return Err(Error::Contract(format!(
            "{op}: batch has {} visual / {} language / {} pairings, expected n_pos = {}",
            visual.len(),
            language.len(),
            pairing.indices.len(),
            cfg.n_pos
        )));
    }
    if pairing.indices.iter().any(|p| p.len() != cfg.n_neg) {
        return Err(Error::Contract(format!(
            "{op}: every anchor needs exactly n_neg = {} negatives",
            cfg.n_neg
        )));
    }
    Ok(())
}

/// Margin triplet loss with visual negatives:
/// `(1/(N_pos·N_neg)) Σ_i Σ_j max(0, m − s(v_i, l_i) + s(v⁻_ij, l_i))`.
pub fn triplet_loss(
    tape: &mut Tape,
    visual: &[Var],
    language: &[Var],
    pairing: &NegativePairing,
    cfg: &RelationLossConfig,
) -> Result<Var> {
    check_batch_shape("triplet_loss", visual, language, pairing, cfg)?;
    let mut terms = Vec::with_capacity(cfg.n_pos * cfg.n_neg);
    for i in 0..cfg.n_pos {
        let pos = tape.cosine(visual[i], language[i])?;
        for &j in &pairing.indices[i] {
            let neg = tape.cosine(visual[j], language[i])?;
            let diff = tape.sub(neg, pos)?;
            let shifted = tape.affine(diff, 1.0, cfg.margin);
            terms.push(tape.relu(shifted));
        }
    }
    let stacked = tape.stack(&terms)?;
    let total = tape.sum(stacked);
    Ok(tape.affine(total, 1.0 / (cfg.n_pos * cfg.n_neg) as Real, 0.0))
}

/// Triplet softmax loss with annotation negatives:
/// `(1/N_pos) Σ_i −log( e^{γ·s(v_i,l_i)} / (e^{γ·s(v_i,l_i)} + Σ_j e^{γ·s(v_i,l⁻_ij)}) )`.
pub fn triplet_softmax_loss(
    tape: &mut Tape,
    visual: &[Var],
    language: &[Var],
    pairing: &NegativePairing,
    cfg: &RelationLossConfig,
) -> Result<Var> {
    check_batch_shape("triplet_softmax_loss", visual, language, pairing, cfg)?;
    let mut terms = Vec::with_capacity(cfg.n_pos);
    for i in 0..cfg.n_pos {
        let pos = tape.cosine(visual[i], language[i])?;
        let pos = tape.scale(pos, cfg.sim_scale);
        let mut sims = Vec::with_capacity(1 + cfg.n_neg);
        sims.push(pos);
        for &j in &pairing.indices[i] {
            let neg = tape.cosine(visual[i], language[j])?;
            sims.push(tape.scale(neg, cfg.sim_scale));
        }
        let sim_vec = tape.stack(&sims)?;
        let lse = tape.logsumexp(sim_vec)?;
        terms.push(tape.sub(lse, pos)?);
    }
    let stacked = tape.stack(&terms)?;
    let total = tape.sum(stacked);
    Ok(tape.affine(total, 1.0 / cfg.n_pos as Real, 0.0))
}

/// Embeddings and labels of one branch (subject, relation, or object) over
/// a batch.
pub struct BranchBatch {
    pub visual: Vec<Var>,
    pub language: Vec<Var>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct LossStats {
    /// Branches that had to sample negatives with replacement this batch.
    pub replacement_branches: Vec<&'static str>,
}

/// Total objective: per branch, triplet loss (visual negatives) plus
/// triplet softmax loss (annotation negatives) with one shared pairing,
/// summed over the subject, relation, and object branches.
pub fn total_relation_loss(
    tape: &mut Tape,
    branches: [&BranchBatch; 3],
    cfg: &RelationLossConfig,
    rng: &mut SeedableStream,
) -> Result<(Var, LossStats)> {
    let names = ["subject", "relation", "object"];
    let mut stats = LossStats::default();
    let mut total: Option<Var> = None;
    for (branch, name) in branches.into_iter().zip(names) {
        let pairing = sample_negatives(&branch.labels, cfg.n_neg, rng)?;
        if pairing.with_replacement {
            stats.replacement_branches.push(name);
        }
        let tr = triplet_loss(tape, &branch.visual, &branch.language, &pairing, cfg)?;
        let sm = triplet_softmax_loss(tape, &branch.visual, &branch.language, &pairing, cfg)?;
        let branch_loss = tape.add(tr, sm)?;
        total = Some(match total {
            Some(t) => tape.add(t, branch_loss)?,
            None => branch_loss,
        });
    }
    Ok((total.expect("three branches"), stats))
}

/// Runs the full encoder over a batch and groups the outputs per branch.
pub fn batch_forward(
    spec: &RelationEncoderSpec,
    tape: &mut Tape,
    bound: &Bound,
    samples: &[RelationSample],
    vocab: &Vocabulary,
) -> Result<[BranchBatch; 3]> {
    let mut subject = BranchBatch {
        visual: Vec::new(),
        language: Vec::new(),
        labels: Vec::new(),
    };
    let mut relation = BranchBatch {
        visual: Vec::new(),
        language: Vec::new(),
        labels: Vec::new(),
    };
    let mut object = BranchBatch {
        visual: Vec::new(),
        language: Vec::new(),
        labels: Vec::new(),
    };
    for s in samples {
        s.validate(spec.in_channels)?;
        let x_s = tape.constant(s.x_s.clone());
        let x_o = tape.constant(s.x_o.clone());
        let x_r = tape.constant(s.x_r.clone());
        let (v_s, v_o, v_r) = spec.visual_forward(tape, bound, x_s, x_o, x_r)?;
        let l_s = spec.language_forward(tape, bound, &vocab.encode(&s.l_s))?;
        let l_o = spec.language_forward(tape, bound, &vocab.encode(&s.l_o))?;
        let l_r = spec.language_forward(tape, bound, &vocab.encode(&s.l_r))?;
        subject.visual.push(v_s);
        subject.language.push(l_s);
        subject.labels.push(s.l_s.clone());
        relation.visual.push(v_r);
        relation.language.push(l_r);
        relation.labels.push(s.l_r.clone());
        object.visual.push(v_o);
        object.language.push(l_o);
        object.labels.push(s.l_o.clone());
    }
    Ok([subject, relation, object])
}

// ---- predicate retrieval ---------------------------------------------------

/// Precomputed language embeddings of a predicate lexicon.
#[derive(Debug, Clone)]
pub struct PredicateIndex {
    pub lexicon: Vec<String>,
    embeddings: Vec<Vec<Real>>,
}

pub fn build_predicate_index(
    spec: &RelationEncoderSpec,
    params: &ModelParams,
    lexicon: &[String],
    vocab: &Vocabulary,
) -> Result<PredicateIndex> {
    if lexicon.is_empty() {
        return Err(Error::Input("empty predicate lexicon".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut embeddings = Vec::with_capacity(lexicon.len());
    for p in lexicon {
        let var = spec.language_forward(&mut tape, &bound, &vocab.encode(p))?;
        embeddings.push(tape.data(var).to_vec());
    }
    Ok(PredicateIndex {
        lexicon: lexicon.to_vec(),
        embeddings,
    })
}

impl PredicateIndex {
    /// Argmax of cosine similarity against the lexicon; ties resolve to the
    /// lowest index.
    pub fn predict(&self, r: &[Real]) -> Result<(usize, Real)> {
        let nr = r.iter().map(|v| v * v).sum::<Real>().sqrt();
        if nr < crate::tape::DEGENERATE_EPS {
            return Err(Error::Degenerate {
                norm: nr,
                eps: crate::tape::DEGENERATE_EPS,
            });
        }
        let mut best = (0usize, Real::NEG_INFINITY);
        for (i, emb) in self.embeddings.iter().enumerate() {
            let ne = emb.iter().map(|v| v * v).sum::<Real>().sqrt();
            if ne < crate::tape::DEGENERATE_EPS {
                return Err(Error::Degenerate {
                    norm: ne,
                    eps: crate::tape::DEGENERATE_EPS,
                });
            }
            let dot: Real = emb.iter().zip(r).map(|(a, b)| a * b).sum();
            let sim = dot / (ne * nr);
            if sim > best.1 {
                best = (i, sim);
            }
        }
        Ok(best)
    }
}

// ---- synthetic separable data ----------------------------------------------

const PROTO_CATEGORY: u64 = 0x9a17_0001;
const PROTO_PREDICATE: u64 = 0x9a17_0002;

/// What a prototype map stands for.
#[derive(Debug, Clone, Copy)]
pub enum MapKind {
    Category,
    Predicate,
}

/// Deterministic prototype feature map for a category or predicate index.
pub fn prototype_map(kind: MapKind, index: usize, channels: usize) -> Tensor {
    let base = match kind {
        MapKind::Category => PROTO_CATEGORY,
        MapKind::Predicate => PROTO_PREDICATE,
    };
    let mut rng = rng::seeded(rng::derive_seed(base, index as u64));
    Tensor::uniform(vec![channels, MAP_SIDE, MAP_SIDE], 1.0, &mut rng)
}

/// Prototype plus seeded uniform noise.
pub fn noisy_map(kind: MapKind, index: usize, channels: usize, noise: Real, seed: u64) -> Tensor {
    let mut map = prototype_map(kind, index, channels);
    let mut rng = rng::seeded(seed);
    for v in map.data_mut() {
        *v += rng.gen_range(-noise..=noise);
    }
    map
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationGenConfig {
    pub predicates: Vec<String>,
    pub categories: Vec<String>,
    pub samples_per_predicate: usize,
    pub channels: usize,
    pub noise: Real,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RelationSampleSpec {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub noise_seed: u64,
}

/// Lazily materialized separable relationship dataset: each sample's maps
/// are the prototypes of its (subject, object, predicate) plus per-sample
/// noise, so classes are linearly far apart while instances still vary.
#[derive(Debug, Clone)]
pub struct SyntheticRelationData {
    pub cfg: RelationGenConfig,
    pub specs: Vec<RelationSampleSpec>,
}

impl SyntheticRelationData {
    pub fn generate(cfg: RelationGenConfig) -> Result<Self> {
        if cfg.predicates.len() < 2 || cfg.categories.len() < 2 {
            return Err(Error::Config(
                "synthetic relation data needs at least 2 predicates and 2 categories".into(),
            ));
        }
        let mut rng = rng::seeded(cfg.seed);
        let mut specs = Vec::with_capacity(cfg.predicates.len() * cfg.samples_per_predicate);
        for p in 0..cfg.predicates.len() {
            for _ in 0..cfg.samples_per_predicate {
                let subject = rng.gen_range(0..cfg.categories.len());
                let object = rng.gen_range(0..cfg.categories.len());
                specs.push(RelationSampleSpec {
                    subject,
                    object,
                    predicate: p,
                    noise_seed: rng.gen(),
                });
            }
        }
        Ok(SyntheticRelationData { cfg, specs })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn materialize(&self, i: usize) -> RelationSample {
        let spec = &self.specs[i];
        let c = self.cfg.channels;
        let n = self.cfg.noise;
        RelationSample {
            x_s: noisy_map(
                MapKind::Category,
                spec.subject,
                c,
                n,
                rng::derive_seed(spec.noise_seed, 1),
            ),
            x_o: noisy_map(
                MapKind::Category,
                spec.object,
                c,
                n,
                rng::derive_seed(spec.noise_seed, 2),
            ),
            x_r: noisy_map(
                MapKind::Predicate,
                spec.predicate,
                c,
                n,
                rng::derive_seed(spec.noise_seed, 3),
            ),
            l_s: self.cfg.categories[spec.subject].clone(),
            l_o: self.cfg.categories[spec.object].clone(),
            l_r: self.cfg.predicates[spec.predicate].clone(),
        }
    }

    /// All annotation tokens, for vocabulary construction.
    pub fn annotation_tokens(&self) -> Vec<&str> {
        self.cfg
            .predicates
            .iter()
            .chain(self.cfg.categories.iter())
            .flat_map(|s| s.split_whitespace())
            .collect()
    }
}

// ---- manifest IO -------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: usize,
    subject: String,
    object: String,
    predicate: String,
    x_s: String,
    x_o: String,
    x_r: String,
}

/// Writes samples as `manifest.jsonl` plus `SGT1` tensor files under
/// `tensors/`.
pub fn write_manifest(dir: &Path, samples: &[RelationSample]) -> Result<()> {
    fs::create_dir_all(dir.join("tensors"))?;
    let mut manifest = std::io::BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for (i, s) in samples.iter().enumerate() {
        let rel = |suffix: &str| format!("tensors/{i:06}_{suffix}.sgt");
        s.x_s.save_sgt(&dir.join(rel("s")))?;
        s.x_o.save_sgt(&dir.join(rel("o")))?;
        s.x_r.save_sgt(&dir.join(rel("r")))?;
        let row = ManifestRow {
            id: i,
            subject: s.l_s.clone(),
            object: s.l_o.clone(),
            predicate: s.l_r.clone(),
            x_s: rel("s"),
            x_o: rel("o"),
            x_r: rel("r"),
        };
        serde_json::to_writer(&mut manifest, &row)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Loads a manifest dataset, optionally capping the sample count per
/// predicate (in manifest order).
pub fn load_manifest(dir: &Path, cap_per_predicate: Option<usize>) -> Result<Vec<RelationSample>> {
    let file = fs::File::open(dir.join("manifest.jsonl"))
        .map_err(|e| Error::Data(format!("cannot open manifest in {}: {e}", dir.display())))?;
    let mut counts: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut samples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)?;
        if let Some(cap) = cap_per_predicate {
            let c = counts.entry(row.predicate.clone()).or_insert(0);
            if *c >= cap {
                continue;
            }
            *c += 1;
        }
        let sample = RelationSample {
            x_s: Tensor::load_sgt(&dir.join(&row.x_s))?,
            x_o: Tensor::load_sgt(&dir.join(&row.x_o))?,
            x_r: Tensor::load_sgt(&dir.join(&row.x_r))?,
            l_s: row.subject,
            l_o: row.object,
            l_r: row.predicate,
        };
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FdConfig};

    fn tiny_spec() -> RelationEncoderSpec {
        RelationEncoderSpec {
            in_channels: 2,
            mid_channels: 3,
            embed_width: 8,
            gru_hidden: 4,
        }
    }

    fn tiny_setup() -> (RelationEncoderSpec, ModelParams, Vocabulary) {
        let spec = tiny_spec();
        let vocab = Vocabulary::from_corpus(["dog", "cat", "left", "of", "above"]);
        let mut params = ModelParams::new();
        let mut rng = rng::seeded(31);
        spec.init(&mut params, vocab.len(), &mut rng);
        (spec, params, vocab)
    }

    fn random_map(channels: usize, seed: u64) -> Tensor {
        let mut rng = rng::seeded(seed);
        Tensor::uniform(vec![channels, MAP_SIDE, MAP_SIDE], 1.0, &mut rng)
    }

    #[test]
    fn identical_subject_object_inputs_share_embeddings_exactly() {
        let (spec, params, _) = tiny_setup();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let m = random_map(2, 7);
        let x_s = tape.constant(m.clone());
        let x_o = tape.constant(m.clone());
        let x_r = tape.constant(random_map(2, 8));
        let (v_s, v_o, _) = spec
            .visual_forward(&mut tape, &bound, x_s, x_o, x_r)
            .unwrap();
        assert_eq!(tape.data(v_s), tape.data(v_o));
    }

    #[test]
    fn swapping_subject_and_object_permutes_their_embeddings() {
        let (spec, params, _) = tiny_setup();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let ms = random_map(2, 9);
        let mo = random_map(2, 10);
        let mr = random_map(2, 11);
        let (x_s, x_o, x_r) = (
            tape.constant(ms.clone()),
            tape.constant(mo.clone()),
            tape.constant(mr.clone()),
        );
        let (v_s, v_o, _) = spec
            .visual_forward(&mut tape, &bound, x_s, x_o, x_r)
            .unwrap();
        let (y_s, y_o, _) = spec
            .visual_forward(&mut tape, &bound, x_o, x_s, x_r)
            .unwrap();
        assert_eq!(tape.data(v_s), tape.data(y_o));
        assert_eq!(tape.data(v_o), tape.data(y_s));
    }

    #[test]
    fn outputs_have_the_configured_semantic_width() {
        let (spec, params, vocab) = tiny_setup();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (x_s, x_o, x_r) = (
            tape.constant(random_map(2, 1)),
            tape.constant(random_map(2, 2)),
            tape.constant(random_map(2, 3)),
        );
        let (v_s, v_o, v_r) = spec
            .visual_forward(&mut tape, &bound, x_s, x_o, x_r)
            .unwrap();
        for v in [v_s, v_o, v_r] {
            assert_eq!(tape.shape(v), &[8]);
        }
        let l = spec
            .language_forward(&mut tape, &bound, &vocab.encode("left of"))
            .unwrap();
        assert_eq!(tape.shape(l), &[8]);
    }

    #[test]
    fn encode_relation_equals_visual_forward_component() {
        let (spec, params, _) = tiny_setup();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (x_s, x_o, x_r) = (
            tape.constant(random_map(2, 4)),
            tape.constant(random_map(2, 5)),
            tape.constant(random_map(2, 6)),
        );
        let (_, _, v_r) = spec
            .visual_forward(&mut tape, &bound, x_s, x_o, x_r)
            .unwrap();
        let r = spec
            .encode_relation(&mut tape, &bound, x_s, x_o, x_r)
            .unwrap();
        assert_eq!(tape.data(r), tape.data(v_r));
    }

    #[test]
    fn encode_relation_is_direction_sensitive() {
        let (spec, params, _) = tiny_setup();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut found = false;
        for seed in 0..5 {
            let (x_s, x_o, x_r) = (
                tape.constant(random_map(2, 100 + seed)),
                tape.constant(random_map(2, 200 + seed)),
                tape.constant(random_map(2, 300 + seed)),
            );
            let fwd = spec
                .encode_relation(&mut tape, &bound, x_s, x_o, x_r)
                .unwrap();
            let rev = spec
                .encode_relation(&mut tape, &bound, x_o, x_s, x_r)
                .unwrap();
            let diff: Real = tape
                .data(fwd)
                .iter()
                .zip(tape.data(rev))
                .map(|(a, b)| (a - b).abs())
                .sum();
            if diff > 1e-9 {
                found = true;
                break;
            }
        }
        assert!(found, "swapping subject and object never changed the relation embedding");
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let (spec, params, _) = tiny_setup();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let bad = tape.constant(random_map(3, 12));
        assert!(matches!(
            spec.trunk(&mut tape, &bound, bad).unwrap_err(),
            Error::Dimension { .. }
        ));
    }

    #[test]
    fn shared_gru_gives_identical_language_embeddings_across_branches() {
        let (spec, params, vocab) = tiny_setup();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let tokens = vocab.encode("dog");
        let a = spec.language_forward(&mut tape, &bound, &tokens).unwrap();
        let b = spec.language_forward(&mut tape, &bound, &tokens).unwrap();
        assert_eq!(tape.data(a), tape.data(b));
    }

    fn unit_vec(tape: &mut Tape, dir: &[Real]) -> Var {
        tape.constant(Tensor::new(vec![dir.len()], dir.to_vec()).unwrap())
    }

    #[test]
    fn triplet_loss_closed_forms() {
        let cfg = RelationLossConfig {
            margin: 0.2,
            n_pos: 1,
            n_neg: 1,
            sim_scale: 1.0,
        };
        // s(v, l) = 1, s(v_neg, l) = 0  => max(0, 0.2 - 1 + 0) = 0
        let mut tape = Tape::new();
        let v = unit_vec(&mut tape, &[1.0, 0.0]);
        let l = unit_vec(&mut tape, &[1.0, 0.0]);
        let v_neg = unit_vec(&mut tape, &[0.0, 1.0]);
        let pairing = NegativePairing {
            indices: vec![vec![1]],
            with_replacement: false,
        };
        let loss = triplet_loss(&mut tape, &[v, v_neg], &[l], &pairing, &cfg);
        // shape guard: visual has 2 entries but n_pos = 1
        assert!(loss.is_err());

        // proper 1-positive batch where the negative index points into the
        // visual list of the same length
        let cfg2 = RelationLossConfig {
            n_pos: 2,
            n_neg: 1,
            ..cfg
        };
        let mut tape = Tape::new();
        let v0 = unit_vec(&mut tape, &[1.0, 0.0]);
        let v1 = unit_vec(&mut tape, &[0.0, 1.0]);
        let l0 = unit_vec(&mut tape, &[1.0, 0.0]);
        let l1 = unit_vec(&mut tape, &[0.0, 1.0]);
        let pairing = NegativePairing {
            indices: vec![vec![1], vec![0]],
            with_replacement: false,
        };
        let loss = triplet_loss(&mut tape, &[v0, v1], &[l0, l1], &pairing, &cfg2).unwrap();
        // each term: max(0, 0.2 - 1 + 0) = 0
        assert_eq!(tape.scalar_value(loss), 0.0);

        // negative equals positive: per-term loss = margin
        let mut tape = Tape::new();
        let v0 = unit_vec(&mut tape, &[1.0, 0.0]);
        let v1 = unit_vec(&mut tape, &[1.0, 0.0]);
        let l0 = unit_vec(&mut tape, &[1.0, 0.0]);
        let l1 = unit_vec(&mut tape, &[0.5, 0.5]);
        let pairing = NegativePairing {
            indices: vec![vec![1], vec![0]],
            with_replacement: false,
        };
        let loss = triplet_loss(&mut tape, &[v0, v1], &[l0, l1], &pairing, &cfg2).unwrap();
        // anchor 0: s(v0,l0)=1, s(v1,l0)=1 -> term m; anchor 1 the same by symmetry
        assert!((tape.scalar_value(loss) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn triplet_softmax_uniform_similarities_give_log_one_plus_n_neg() {
        for n_neg in [1usize, 4, 9] {
            let cfg = RelationLossConfig {
                margin: 0.2,
                n_pos: n_neg + 1,
                n_neg,
                sim_scale: 1.0,
            };
            let mut tape = Tape::new();
            let mut vis = Vec::new();
            let mut lang = Vec::new();
            for _ in 0..cfg.n_pos {
                vis.push(unit_vec(&mut tape, &[1.0, 0.0]));
                lang.push(unit_vec(&mut tape, &[1.0, 0.0]));
            }
            let indices = (0..cfg.n_pos)
                .map(|i| (0..cfg.n_pos).filter(|&j| j != i).take(n_neg).collect())
                .collect();
            let pairing = NegativePairing {
                indices,
                with_replacement: false,
            };
            let loss = triplet_softmax_loss(&mut tape, &vis, &lang, &pairing, &cfg).unwrap();
            let expect = (1.0 + n_neg as Real).ln();
            assert!(
                (tape.scalar_value(loss) - expect).abs() < 1e-12,
                "n_neg {n_neg}"
            );
        }
    }

    #[test]
    fn triplet_softmax_single_negative_closed_form() {
        // s(v,l) = 1, s(v,l_neg) = -1: -ln(e / (e + e^-1))
        let cfg = RelationLossConfig {
            margin: 0.2,
            n_pos: 2,
            n_neg: 1,
            sim_scale: 1.0,
        };
        let mut tape = Tape::new();
        let v0 = unit_vec(&mut tape, &[1.0, 0.0]);
        let v1 = unit_vec(&mut tape, &[-1.0, 0.0]);
        let l0 = unit_vec(&mut tape, &[1.0, 0.0]);
        let l1 = unit_vec(&mut tape, &[-1.0, 0.0]);
        let pairing = NegativePairing {
            indices: vec![vec![1], vec![0]],
            with_replacement: false,
        };
        let loss = triplet_softmax_loss(&mut tape, &[v0, v1], &[l0, l1], &pairing, &cfg).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        assert!((expect - 0.126928).abs() < 1e-6);
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn losses_match_untaped_brute_force_to_1e12() {
        let cfg = RelationLossConfig {
            margin: 0.2,
            n_pos: 6,
            n_neg: 3,
            sim_scale: 1.0,
        };
        let mut rng = rng::seeded(77);
        let mut tape = Tape::new();
        let mut vis_data = Vec::new();
        let mut lang_data = Vec::new();
        let mut vis = Vec::new();
        let mut lang = Vec::new();
        let mut labels = Vec::new();
        for i in 0..cfg.n_pos {
            let v = Tensor::uniform(vec![5], 1.0, &mut rng);
            let l = Tensor::uniform(vec![5], 1.0, &mut rng);
            vis.push(tape.constant(v.clone()));
            lang.push(tape.constant(l.clone()));
            vis_data.push(v.data().to_vec());
            lang_data.push(l.data().to_vec());
            labels.push(format!("class{}", i % 3));
        }
        let pairing = sample_negatives(&labels, cfg.n_neg, &mut rng).unwrap();
        let tr = triplet_loss(&mut tape, &vis, &lang, &pairing, &cfg).unwrap();
        let sm = triplet_softmax_loss(&mut tape, &vis, &lang, &pairing, &cfg).unwrap();

        let cos = |a: &[Real], b: &[Real]| {
            let na = a.iter().map(|v| v * v).sum::<Real>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<Real>().sqrt();
            let d: Real = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (na * nb)
        };
        let mut tr_ref = 0.0;
        for i in 0..cfg.n_pos {
            let pos = cos(&vis_data[i], &lang_data[i]);
            for &j in &pairing.indices[i] {
                let neg = cos(&vis_data[j], &lang_data[i]);
                tr_ref += (cfg.margin - pos + neg).max(0.0);
            }
        }
        tr_ref /= (cfg.n_pos * cfg.n_neg) as Real;
        let mut sm_ref = 0.0;
        for i in 0..cfg.n_pos {
            let pos = cos(&vis_data[i], &lang_data[i]);
            let mut sims = vec![pos];
            for &j in &pairing.indices[i] {
                sims.push(cos(&vis_data[i], &lang_data[j]));
            }
            let max = sims.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = max + sims.iter().map(|s| (s - max).exp()).sum::<Real>().ln();
            sm_ref += lse - pos;
        }
        sm_ref /= cfg.n_pos as Real;

        assert!((tape.scalar_value(tr) - tr_ref).abs() < 1e-12);
        assert!((tape.scalar_value(sm) - sm_ref).abs() < 1e-12);
    }

    #[test]
    fn negative_sampling_respects_labels_and_seed() {
        let labels: Vec<String> = (0..10)
            .map(|i| if i % 2 == 0 { "a".into() } else { "b".into() })
            .collect();
        let mut rng = rng::seeded(5);
        let p1 = sample_negatives(&labels, 3, &mut rng).unwrap();
        for (i, picks) in p1.indices.iter().enumerate() {
            for &j in picks {
                assert_ne!(labels[j], labels[i]);
            }
            // without replacement: all distinct
            let mut sorted = picks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), picks.len());
        }
        assert!(!p1.with_replacement);
        let mut rng2 = rng::seeded(5);
        let p2 = sample_negatives(&labels, 3, &mut rng2).unwrap();
        assert_eq!(p1.indices, p2.indices);
    }

    #[test]
    fn negative_sampling_statistics_and_fallback() {
        // mismatch rate is exactly 100% over many draws
        let labels: Vec<String> = (0..40)
            .map(|i| format!("c{}", i % 4))
            .collect();
        let mut rng = rng::seeded(6);
        let mut draws = 0;
        for _ in 0..250 {
            let p = sample_negatives(&labels, 1, &mut rng).unwrap();
            for (i, picks) in p.indices.iter().enumerate() {
                assert_ne!(labels[picks[0]], labels[i]);
                draws += 1;
            }
        }
        assert_eq!(draws, 10_000);

        // too few eligible -> replacement flagged
        let labels = vec!["a".to_string(), "a".into(), "b".into()];
        let p = sample_negatives(&labels, 4, &mut rng).unwrap();
        assert!(p.with_replacement);
        assert!(p.indices.iter().all(|v| v.len() == 4));

        // single class -> input error
        let labels = vec!["a".to_string(), "a".into()];
        assert!(matches!(
            sample_negatives(&labels, 1, &mut rng).unwrap_err(),
            Error::Input(_)
        ));
    }

    /// Hand-built batch with every branch guaranteed to hold two classes.
    fn controlled_samples(n: usize) -> Vec<RelationSample> {
        let cats = ["dog", "cat"];
        let preds = ["left of", "above"];
        (0..n)
            .map(|i| RelationSample {
                x_s: noisy_map(MapKind::Category, i % 2, 2, 0.1, 100 + i as u64),
                x_o: noisy_map(MapKind::Category, (i + 1) % 2, 2, 0.1, 200 + i as u64),
                x_r: noisy_map(MapKind::Predicate, i % 2, 2, 0.1, 300 + i as u64),
                l_s: cats[i % 2].to_string(),
                l_o: cats[(i + 1) % 2].to_string(),
                l_r: preds[i % 2].to_string(),
            })
            .collect()
    }

    #[test]
    fn total_loss_is_the_sum_of_six_terms() {
        let (spec, params, vocab) = tiny_setup();
        let samples = controlled_samples(4);
        let cfg = RelationLossConfig {
            margin: 0.2,
            n_pos: 4,
            n_neg: 2,
            sim_scale: 1.0,
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let branches = batch_forward(&spec, &mut tape, &bound, &samples, &vocab).unwrap();
        let mut rng_a = rng::seeded(9);
        let (total, _) = total_relation_loss(
            &mut tape,
            [&branches[0], &branches[1], &branches[2]],
            &cfg,
            &mut rng_a,
        )
        .unwrap();
        // recompute the six summands with the identical rng stream
        let mut rng_b = rng::seeded(9);
        let mut expect = 0.0;
        for b in &branches {
            let pairing = sample_negatives(&b.labels, cfg.n_neg, &mut rng_b).unwrap();
            let tr = triplet_loss(&mut tape, &b.visual, &b.language, &pairing, &cfg).unwrap();
            let sm =
                triplet_softmax_loss(&mut tape, &b.visual, &b.language, &pairing, &cfg).unwrap();
            expect += tape.scalar_value(tr) + tape.scalar_value(sm);
        }
        assert!((tape.scalar_value(total) - expect).abs() < 1e-12);
        assert!(tape.scalar_value(total) >= 0.0);
    }

    #[test]
    fn encoder_gradients_pass_finite_difference() {
        let (spec, params, vocab) = tiny_setup();
        let samples = controlled_samples(2);
        let cfg = RelationLossConfig {
            margin: 0.2,
            n_pos: 2,
            n_neg: 1,
            sim_scale: 1.0,
        };
        let report = finite_diff_check(
            &params,
            &|t, b| {
                let branches = batch_forward(&spec, t, b, &samples, &vocab)?;
                let mut rng = rng::seeded(11);
                let (loss, _) = total_relation_loss(
                    t,
                    [&branches[0], &branches[1], &branches[2]],
                    &cfg,
                    &mut rng,
                )?;
                Ok(loss)
            },
            &FdConfig {
                tol: 1e-4,
                coords_per_param: 12,
                ..FdConfig::default()
            },
        )
        .unwrap();
        assert!(report.pass(), "{}", report.summary());
    }

    #[test]
    fn predicate_prediction_basics() {
        let (spec, params, vocab) = tiny_setup();
        let lexicon = vec!["left of".to_string(), "above".to_string()];
        let index = build_predicate_index(&spec, &params, &lexicon, &vocab).unwrap();

        // size-1 lexicon always answers that label
        let single = build_predicate_index(&spec, &params, &lexicon[..1], &vocab).unwrap();
        let mut rng = rng::seeded(12);
        let q = Tensor::uniform(vec![8], 1.0, &mut rng);
        assert_eq!(single.predict(q.data()).unwrap().0, 0);

        // r equal to a lexicon embedding retrieves it with similarity 1
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let emb = spec
            .language_forward(&mut tape, &bound, &vocab.encode("above"))
            .unwrap();
        let (label, sim) = index.predict(tape.data(emb)).unwrap();
        assert_eq!(label, 1);
        assert!((sim - 1.0).abs() < 1e-12);

        // empty lexicon is an input error
        assert!(matches!(
            build_predicate_index(&spec, &params, &[], &vocab).unwrap_err(),
            Error::Input(_)
        ));
    }

    #[test]
    fn manifest_round_trip_and_cap() {
        let dir = tempfile::tempdir().unwrap();
        let data = SyntheticRelationData::generate(RelationGenConfig {
            predicates: vec!["p0".into(), "p1".into()],
            categories: vec!["a".into(), "b".into()],
            samples_per_predicate: 3,
            channels: 2,
            noise: 0.05,
            seed: 5,
        })
        .unwrap();
        let samples: Vec<RelationSample> = (0..data.len()).map(|i| data.materialize(i)).collect();
        write_manifest(dir.path(), &samples).unwrap();
        let back = load_manifest(dir.path(), None).unwrap();
        assert_eq!(back.len(), samples.len());
        assert_eq!(back[0].l_r, samples[0].l_r);
        assert_eq!(back[2].x_r.data(), samples[2].x_r.data());
        let capped = load_manifest(dir.path(), Some(1)).unwrap();
        assert_eq!(capped.len(), 2);
    }
}
