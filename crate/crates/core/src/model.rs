//! The reasoning core: question-relation guided self-attention over a scene
//! graph, a residual multi-head graph convolution, question-guided object
//! attention, and a two-layer MLP answer head with sigmoid scores.
//!
//! Model variants share this code path: the baseline drops the neighbor
//! messages entirely (the graph convolution with all message weights at
//! zero collapses to it), the implicit variant replaces relation embeddings
//! with a projection of the endpoint node features, and the multi-head
//! variant splits the message width across heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::params::{Bound, ModelParams};
use crate::rng::SeedableStream;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::text::{GruSpec, QuestionEncoder, EMBED_WIDTH};

/// Ablation variants. `scenegcn_2att` is `scenegcn` with two attention
/// heads; `implicit` swaps learned relation embeddings for projected
/// node-feature concatenations; `baseline` has no message passing at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "+width")]
    PlusWidth,
    #[serde(rename = "+q_att")]
    PlusQAtt,
    #[serde(rename = "scenegcn")]
    SceneGcn,
    #[serde(rename = "scenegcn_2att")]
    SceneGcn2Att,
    #[serde(rename = "implicit")]
    Implicit,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PlusWidth => "+width",
            Variant::PlusQAtt => "+q_att",
            Variant::SceneGcn => "scenegcn",
            Variant::SceneGcn2Att => "scenegcn_2att",
            Variant::Implicit => "implicit",
        }
    }

    /// Whether the variant runs the graph convolution.
    pub fn has_graph_conv(&self) -> bool {
        matches!(
            self,
            Variant::SceneGcn | Variant::SceneGcn2Att | Variant::Implicit
        )
    }

    pub fn uses_implicit_edges(&self) -> bool {
        matches!(self, Variant::Implicit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGcnConfig {
    pub variant: Variant,
    /// Projected object width (Table-1 baseline 512; desk scale smaller).
    pub d: usize,
    /// Question embedding width.
    pub d_q: usize,
    /// Fusion width of the attention scorers.
    pub d_f: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Raw object feature width.
    pub d_obj: usize,
    /// Relation embedding width.
    pub edge_width: usize,
    /// Answer vocabulary size.
    pub n_a: usize,
    pub mlp_hidden: usize,
    pub dropout: Real,
    pub question_vocab: usize,
    pub gru_layers: usize,
    pub question_attention: bool,
}

impl SceneGcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide node width {}",
                self.heads, self.d
            )));
        }
        match self.variant {
            Variant::SceneGcn | Variant::Implicit if self.heads != 1 => {
                return Err(Error::Config(format!(
                    "{} uses a single attention head",
                    self.variant.name()
                )))
            }
            Variant::SceneGcn2Att if self.heads != 2 => {
                return Err(Error::Config("scenegcn_2att requires exactly 2 heads".into()))
            }
            _ => {}
        }
        if self.n_a == 0 {
            return Err(Error::Config("answer vocabulary is empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        GruSpec::new(self.gru_layers, EMBED_WIDTH, self.d_q)?;
        Ok(())
    }

    pub fn question_encoder(&self) -> QuestionEncoder {
        QuestionEncoder {
            gru: GruSpec {
                layers: self.gru_layers,
                input: EMBED_WIDTH,
                hidden: self.d_q,
            },
            attention: self.question_attention,
            att_width: self.d_q,
        }
    }
}

/// The model: a config plus its named parameters.
#[derive(Debug, Clone)]
pub struct SceneGcnModel {
    pub cfg: SceneGcnConfig,
    pub params: ModelParams,
}

/// Everything a forward pass exposes.
pub struct ForwardOut {
    pub logits: Var,
    pub scores: Var,
    /// Per node `i`, per head `k`: attention over the neighbors of `i` in
    /// ascending-index order with `i` skipped. Empty without graph conv or
    /// neighbors.
    pub edge_attention: Vec<Vec<Var>>,
    pub node_attention: Var,
    pub projected_nodes: Var,
    pub updated_nodes: Var,
    pub question: Var,
}

impl SceneGcnModel {
    pub fn init(cfg: SceneGcnConfig, rng: &mut SeedableStream) -> Result<Self> {
        cfg.validate()?;
        let mut params = ModelParams::new();
        cfg.question_encoder()
            .init("q.", cfg.question_vocab, &mut params, rng);
        params.insert(
            "proj.w",
            Tensor::fan_init(vec![cfg.d, cfg.d_obj], cfg.d_obj, rng),
        );
        params.insert("proj.b", Tensor::zeros(vec![cfg.d]));
        if cfg.variant.has_graph_conv() {
            let msg_in = cfg.d + cfg.edge_width;
            for k in 0..cfg.heads {
                params.insert(
                    format!("conv.w{k}"),
                    Tensor::fan_init(vec![cfg.d / cfg.heads, msg_in], msg_in, rng),
                );
            }
            params.insert(
                "att.w_q",
                Tensor::fan_init(vec![cfg.d_f, cfg.d_q], cfg.d_q, rng),
            );
            params.insert(
                "att.w_r",
                Tensor::fan_init(vec![cfg.d_f, cfg.edge_width], cfg.edge_width, rng),
            );
            for k in 0..cfg.heads {
                params.insert(
                    format!("att.head{k}.w"),
                    Tensor::fan_init(vec![cfg.d_f], cfg.d_f, rng),
                );
                params.insert(format!("att.head{k}.b"), Tensor::zeros(vec![]));
            }
            params.insert(
                "edge.unknown",
                Tensor::fan_init(vec![cfg.edge_width], cfg.edge_width, rng),
            );
            if cfg.variant.uses_implicit_edges() {
                params.insert(
                    "edge.implicit.w",
                    Tensor::fan_init(vec![cfg.edge_width, 2 * cfg.d_obj], 2 * cfg.d_obj, rng),
                );
            }
        }
        params.insert(
            "oatt.w_q",
            Tensor::fan_init(vec![cfg.d_f, cfg.d_q], cfg.d_q, rng),
        );
        params.insert(
            "oatt.w_h",
            Tensor::fan_init(vec![cfg.d_f, cfg.d], cfg.d, rng),
        );
        params.insert("oatt.w", Tensor::fan_init(vec![cfg.d_f], cfg.d_f, rng));
        params.insert("oatt.b", Tensor::zeros(vec![]));
        params.insert(
            "fuse.w_a",
            Tensor::fan_init(vec![cfg.d, cfg.d_q], cfg.d_q, rng),
        );
        params.insert(
            "mlp.0.w",
            Tensor::fan_init(vec![cfg.mlp_hidden, cfg.d], cfg.d, rng),
        );
        params.insert("mlp.0.b", Tensor::zeros(vec![cfg.mlp_hidden]));
        params.insert(
            "mlp.1.w",
            Tensor::fan_init(vec![cfg.n_a, cfg.mlp_hidden], cfg.mlp_hidden, rng),
        );
        params.insert("mlp.1.b", Tensor::zeros(vec![cfg.n_a]));
        Ok(SceneGcnModel { cfg, params })
    }

    /// Linear projection of raw object features: `h_i^p = W_p·h_i + b`.
    pub fn project_nodes(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let wt = tape.transpose(bound.var("proj.w"))?;
        let xw = tape.matmul(x, wt)?;
        tape.add_bias(xw, bound.var("proj.b"))
    }

    /// Relation embedding vars per ordered pair. Known edges enter as
    /// constants; unknown pairs share the trainable unknown-relationship
    /// embedding; the implicit variant projects `x_j ++ x_i` instead.
    pub fn edge_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graph: &SceneGraph,
        x: Var,
    ) -> Result<Vec<Vec<Option<Var>>>> {
        let n = graph.n();
        let mut edges = vec![vec![None; n]; n];
        if self.cfg.variant.uses_implicit_edges() {
            let w = bound.var("edge.implicit.w");
            let rows: Vec<Var> = (0..n).map(|i| tape.row(x, i)).collect::<Result<_>>()?;
            for (j, row_j) in rows.iter().enumerate() {
                for (i, row_i) in rows.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let cat = tape.concat(*row_j, *row_i)?;
                    edges[j][i] = Some(tape.matvec(w, cat)?);
                }
            }
        } else {
            let unknown = bound.var("edge.unknown");
            for j in 0..n {
                for i in 0..n {
                    if i == j {
                        continue;
                    }
                    edges[j][i] = Some(if graph.edge_is_known(j, i) {
                        let emb = Tensor::new(
                            vec![self.cfg.edge_width],
                            graph.edge_embedding(j, i).to_vec(),
                        )?;
                        tape.constant(emb)
                    } else {
                        unknown
                    });
                }
            }
        }
        Ok(edges)
    }

    /// Question-relation guided self-attention: softmax over each node's
    /// incoming neighbors, per head, of `w_k · ((w_q·q) ∘ (w_r·r_ji)) + b_k`.
    pub fn qr_self_attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        question: Var,
        edges: &[Vec<Option<Var>>],
    ) -> Result<Vec<Vec<Var>>> {
        let n = edges.len();
        let wq_q = tape.matvec(bound.var("att.w_q"), question)?;
        let mut fused = vec![vec![None; n]; n];
        for j in 0..n {
            for i in 0..n {
                if let Some(r) = edges[j][i] {
                    let wr = tape.matvec(bound.var("att.w_r"), r)?;
                    fused[j][i] = Some(tape.mul(wq_q, wr)?);
                }
            }
        }
        let mut omega = Vec::with_capacity(n);
        for i in 0..n {
            let neighbors: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut per_head = Vec::with_capacity(self.cfg.heads);
            if neighbors.is_empty() {
                omega.push(per_head);
                continue;
            }
            for k in 0..self.cfg.heads {
                let w_k = bound.var(&format!("att.head{k}.w"));
                let b_k = bound.var(&format!("att.head{k}.b"));
                let mut logits = Vec::with_capacity(neighbors.len());
                for &j in &neighbors {
                    let c = fused[j][i].expect("off-diagonal fusion exists");
                    let score = tape.dot(w_k, c)?;
                    logits.push(tape.add(score, b_k)?);
                }
                let vec = tape.stack(&logits)?;
                per_head.push(tape.softmax(vec, 0)?);
            }
            omega.push(per_head);
        }
        Ok(omega)
    }

    /// Residual graph convolution: per node, attention-weighted messages
    /// `W_k · (σ(h_j^p) ++ r_ji)` concatenated over heads and added to the
    /// projection before the activation.
    pub fn graph_conv_update(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hp_rows: &[Var],
        relu_rows: &[Var],
        edges: &[Vec<Option<Var>>],
        omega: &[Vec<Var>],
    ) -> Result<Vec<Var>> {
        let n = hp_rows.len();
        let head_w: Vec<Var> = (0..self.cfg.heads)
            .map(|k| tape.transpose(bound.var(&format!("conv.w{k}"))))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let neighbors: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            if neighbors.is_empty() {
                out.push(tape.relu(hp_rows[i]));
                continue;
            }
            let mut feats = Vec::with_capacity(neighbors.len());
            for &j in &neighbors {
                let r = edges[j][i].expect("off-diagonal edge exists");
                feats.push(tape.concat(relu_rows[j], r)?);
            }
            let f_mat = tape.stack_rows(&feats)?;
            let mut head_msgs = Vec::with_capacity(self.cfg.heads);
            for k in 0..self.cfg.heads {
                let msgs = tape.matmul(f_mat, head_w[k])?;
                let msgs_t = tape.transpose(msgs)?;
                head_msgs.push(tape.matvec(msgs_t, omega[i][k])?);
            }
            let mut merged = head_msgs[0];
            for &m in &head_msgs[1..] {
                merged = tape.concat(merged, m)?;
            }
            let sum = tape.add(hp_rows[i], merged)?;
            out.push(tape.relu(sum));
        }
        Ok(out)
    }

    /// Question-guided object attention over the updated node states.
    pub fn q_object_attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        question: Var,
        hs_rows: &[Var],
    ) -> Result<Var> {
        let wq = tape.matvec(bound.var("oatt.w_q"), question)?;
        let w = bound.var("oatt.w");
        let b = bound.var("oatt.b");
        let mut logits = Vec::with_capacity(hs_rows.len());
        for &h in hs_rows {
            let wh = tape.matvec(bound.var("oatt.w_h"), h)?;
            let c = tape.mul(wq, wh)?;
            let score = tape.dot(w, c)?;
            logits.push(tape.add(score, b)?);
        }
        let vec = tape.stack(&logits)?;
        tape.softmax(vec, 0)
    }

    /// Answer head: `sigmoid(MLP(v̂ ∘ W_a·q))` with the hidden relu and
    /// dropout between the two linear layers. Returns (logits, scores).
    pub fn predict_answers(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        v_hat: Var,
        question: Var,
        mode: Mode,
        rng: &mut SeedableStream,
    ) -> Result<(Var, Var)> {
        let wa_q = tape.matvec(bound.var("fuse.w_a"), question)?;
        let fused = tape.mul(v_hat, wa_q)?;
        let h = tape.linear(bound.var("mlp.0.w"), fused, Some(bound.var("mlp.0.b")))?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.cfg.dropout, mode, rng)?;
        let logits = tape.linear(bound.var("mlp.1.w"), h, Some(bound.var("mlp.1.b")))?;
        let scores = tape.sigmoid(logits);
        Ok((logits, scores))
    }

    /// Full pass over one (graph, question) pair.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graph: &SceneGraph,
        tokens: &[usize],
        mode: Mode,
        rng: &mut SeedableStream,
    ) -> Result<ForwardOut> {
        if graph.node_features().shape()[1] != self.cfg.d_obj {
            return Err(Error::Dimension {
                op: "scenegcn_forward",
                lhs: graph.node_features().shape().to_vec(),
                rhs: vec![graph.n(), self.cfg.d_obj],
            });
        }
        let question = self
            .cfg
            .question_encoder()
            .encode(tape, bound, "q.", tokens)?;
        let x = tape.constant(graph.node_features().clone());
        let hp = self.project_nodes(tape, bound, x)?;
        let n = graph.n();
        let hp_rows: Vec<Var> = (0..n).map(|i| tape.row(hp, i)).collect::<Result<_>>()?;
        let relu_rows: Vec<Var> = hp_rows.iter().map(|&r| tape.relu(r)).collect();

        let (hs_rows, edge_attention) = if self.cfg.variant.has_graph_conv() {
            let edges = self.edge_vars(tape, bound, graph, x)?;
            let omega = self.qr_self_attention(tape, bound, question, &edges)?;
            let hs = self.graph_conv_update(tape, bound, &hp_rows, &relu_rows, &edges, &omega)?;
            (hs, omega)
        } else {
            (relu_rows.clone(), Vec::new())
        };

        let node_attention = self.q_object_attention(tape, bound, question, &hs_rows)?;
        let hs_mat = tape.stack_rows(&hs_rows)?;
        let v_hat = aggregate(tape, hs_mat, node_attention)?;
        let (logits, scores) =
            self.predict_answers(tape, bound, v_hat, question, mode, rng)?;
        Ok(ForwardOut {
            logits,
            scores,
            edge_attention,
            node_attention,
            projected_nodes: hp,
            updated_nodes: hs_mat,
            question,
        })
    }
}

/// Attention-weighted sum of node states: `v̂ = Σ_i ω_i · h_i^s`.
pub fn aggregate(tape: &mut Tape, hs_mat: Var, omega: Var) -> Result<Var> {
    let t = tape.transpose(hs_mat)?;
    tape.matvec(t, omega)
}

// ---- attention traces ------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopEdge {
    pub from: usize,
    pub to: usize,
    pub head: usize,
    pub weight: Real,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<Real>,
}

/// Exported attention state of one forward pass: per-head `N×N` matrices
/// (entry `[i][j]` is the weight of incoming neighbor `j` at node `i`, so
/// each row sums to one), the object attention vector, boxes, the central
/// object, and its strongest incoming edges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub n: usize,
    pub heads: usize,
    pub edge_weights: Vec<Vec<Vec<Real>>>,
    pub node_weights: Vec<Real>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[Real; 4]>>,
    pub central_object: usize,
    pub top_edges: Vec<TopEdge>,
}

/// Reads the attention weights out of a finished forward pass.
pub fn extract_trace(tape: &Tape, out: &ForwardOut, graph: &SceneGraph) -> AttentionTrace {
    let n = graph.n();
    let node_weights = tape.data(out.node_attention).to_vec();
    let heads = out.edge_attention.first().map_or(0, Vec::len);
    let mut edge_weights = vec![vec![vec![0.0; n]; n]; heads.max(1)];
    if heads > 0 {
        for i in 0..n {
            let neighbors: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            for k in 0..heads {
                let w = tape.data(out.edge_attention[i][k]);
                for (slot, &j) in neighbors.iter().enumerate() {
                    edge_weights[k][i][j] = w[slot];
                }
            }
        }
    }
    let central_object = argmax(&node_weights);
    let mut incoming: Vec<TopEdge> = Vec::new();
    for k in 0..heads {
        for j in 0..n {
            if j == central_object {
                continue;
            }
            incoming.push(TopEdge {
                from: j,
                to: central_object,
                head: k,
                weight: edge_weights[k][central_object][j],
                predicate: None,
                similarity: None,
            });
        }
    }
    incoming.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap()
            .then(a.head.cmp(&b.head))
            .then(a.from.cmp(&b.from))
    });
    incoming.truncate(3);
    let boxes = graph.boxes().map(|b| {
        (0..n)
            .map(|i| {
                let r = &b.data()[i * 4..(i + 1) * 4];
                [r[0], r[1], r[2], r[3]]
            })
            .collect()
    });
    AttentionTrace {
        n,
        heads: heads.max(1),
        edge_weights,
        node_weights,
        boxes,
        central_object,
        top_edges: incoming,
    }
}

/// First index of the maximum (ties resolve to the lowest index).
pub fn argmax(values: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
