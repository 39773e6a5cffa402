//! Scene graphs: object nodes with feature vectors and boxes, fully
//! connected by directed 512-wide relation embeddings, with unannotated
//! pairs carrying a designated unknown-relationship embedding. Also the
//! binary feature container and graph construction from pair regions plus
//! a relationship encoder.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::relation::RelationEncoderSpec;
use crate::tape::Tape;
use crate::tensor::{Offset, Real, Tensor};

/// Default cap on objects per image.
pub const DEFAULT_N_MAX: usize = 36;

/// Magic bytes of the feature container.
pub const FEATURE_MAGIC: &[u8; 4] = b"SGF1";

/// Directed scene graph over `n` objects. Edge storage is dense `n×n`; the
/// diagonal is never written or read.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    n: usize,
    edge_width: usize,
    node_features: Tensor,
    boxes: Option<Tensor>,
    edge_emb: Vec<Real>,
    edge_known: Vec<bool>,
    edge_labels: Vec<Option<usize>>,
}

fn validate_boxes(boxes: &Tensor, n: usize) -> Result<()> {
    if boxes.shape() != [n, 4] {
        return Err(Error::Dimension {
            op: "scene_graph_boxes",
            lhs: boxes.shape().to_vec(),
            rhs: vec![n, 4],
        });
    }
    for i in 0..n {
        let b = &boxes.data()[i * 4..(i + 1) * 4];
        if !(b[0] < b[2]) || !(b[1] < b[3]) {
            return Err(Error::Validation(format!(
                "box {i} is not ordered: [{}, {}, {}, {}]",
                b[0], b[1], b[2], b[3]
            )));
        }
    }
    Ok(())
}

impl SceneGraph {
    /// Creates a graph with every pair unknown, filled with
    /// `unknown_embedding`.
    pub fn new(
        node_features: Tensor,
        boxes: Option<Tensor>,
        unknown_embedding: &[Real],
    ) -> Result<Self> {
        if node_features.rank() != 2 {
            return Err(Error::Dimension {
                op: "scene_graph_nodes",
                lhs: node_features.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let n = node_features.shape()[0];
        if n == 0 {
            return Err(Error::EmptyScene);
        }
        if let Some(b) = &boxes {
            validate_boxes(b, n)?;
        }
        let edge_width = unknown_embedding.len();
        let mut edge_emb = vec![0.0; n * n * edge_width];
        for from in 0..n {
            for to in 0..n {
                if from != to {
                    let at = (from * n + to) * edge_width;
                    edge_emb[at..at + edge_width].copy_from_slice(unknown_embedding);
                }
            }
        }
        Ok(SceneGraph {
            n,
            edge_width,
            node_features,
            boxes,
            edge_emb,
            edge_known: vec![false; n * n],
            edge_labels: vec![None; n * n],
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_width(&self) -> usize {
        self.edge_width
    }

    /// Number of directed edges: `n(n-1)`.
    pub fn edge_count(&self) -> usize {
        self.n * (self.n - 1)
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn boxes(&self) -> Option<&Tensor> {
        self.boxes.as_ref()
    }

    fn idx(&self, from: usize, to: usize) -> usize {
        assert!(from != to, "self-edges are never read or written");
        assert!(from < self.n && to < self.n, "edge index out of range");
        from * self.n + to
    }

    pub fn set_edge(&mut self, from: usize, to: usize, emb: &[Real], label: Option<usize>) {
        let i = self.idx(from, to);
        assert_eq!(emb.len(), self.edge_width, "edge embedding width mismatch");
        self.edge_emb[i * self.edge_width..(i + 1) * self.edge_width].copy_from_slice(emb);
        self.edge_known[i] = true;
        self.edge_labels[i] = label;
    }

    /// Embedding of the directed edge `from -> to` (subject -> object).
    pub fn edge_embedding(&self, from: usize, to: usize) -> &[Real] {
        let i = self.idx(from, to);
        &self.edge_emb[i * self.edge_width..(i + 1) * self.edge_width]
    }

    /// Whether the pair carries an annotated relationship (as opposed to
    /// the unknown-relationship filler).
    pub fn edge_is_known(&self, from: usize, to: usize) -> bool {
        let i = self.idx(from, to);
        self.edge_known[i]
    }

    pub fn edge_label(&self, from: usize, to: usize) -> Option<usize> {
        let i = self.idx(from, to);
        self.edge_labels[i]
    }
}

// ---- feature container -------------------------------------------------------

/// Writes the `SGF1` container: magic, u32 N, u32 d_obj, u8 has_boxes, the
/// `N·d_obj` features, then the optional `N·4` boxes, all little-endian.
pub fn write_features<W: Write>(
    w: &mut W,
    features: &Tensor,
    boxes: Option<&Tensor>,
) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::Contract(format!(
            "feature matrix must be rank 2, got {:?}",
            features.shape()
        )));
    }
    let n = features.shape()[0];
    if let Some(b) = boxes {
        validate_boxes(b, n)?;
    }
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(features.shape()[1] as u32).to_le_bytes())?;
    w.write_all(&[boxes.is_some() as u8])?;
    for &v in features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(b) = boxes {
        for &v in b.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_features(path: &Path, features: &Tensor, boxes: Option<&Tensor>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, features, boxes)?;
    w.flush()?;
    Ok(())
}

/// Parses the feature container, validating the object cap and box order.
pub fn read_features<R: Read>(
    r: &mut R,
    path: &Path,
    n_max: usize,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut off = Offset::new(path);
    let mut magic = [0u8; 4];
    off.read_exact(r, &mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(off.error_at(0, "bad magic, expected SGF1"));
    }
    let n = off.read_u32(r)? as usize;
    let d = off.read_u32(r)? as usize;
    let has_boxes = off.read_u8(r)?;
    if has_boxes > 1 {
        return Err(off.error("has_boxes flag must be 0 or 1"));
    }
    if n == 0 {
        return Err(Error::EmptyScene);
    }
    if n > n_max {
        return Err(Error::Validation(format!(
            "container holds {n} objects, cap is {n_max}"
        )));
    }
    let mut feat = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        feat.push(off.read_f64(r)?);
    }
    let features = Tensor::new(vec![n, d], feat)?;
    let boxes = if has_boxes == 1 {
        let mut b = Vec::with_capacity(n * 4);
        for _ in 0..n * 4 {
            b.push(off.read_f64(r)?);
        }
        let boxes = Tensor::new(vec![n, 4], b)?;
        validate_boxes(&boxes, n)?;
        Some(boxes)
    } else {
        None
    };
    Ok((features, boxes))
}

pub fn load_features(path: &Path, n_max: usize) -> Result<(Tensor, Option<Tensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_features(&mut r, path, n_max)
}

// ---- graph construction --------------------------------------------------------

/// Region maps available for graph construction: one optional map per
/// object plus union-region maps for annotated ordered pairs.
#[derive(Debug, Default)]
pub struct PairRegions {
    pub object_maps: Vec<Option<Tensor>>,
    pub union_maps: HashMap<(usize, usize), Tensor>,
    pub labels: HashMap<(usize, usize), usize>,
}

#[derive(Debug)]
pub struct BuildOutcome {
    pub graph: SceneGraph,
    /// Original object count when truncation to the cap was applied.
    pub truncated_from: Option<usize>,
}

/// Builds a scene graph: pairs with full region data get the encoder's
/// relation embedding, everything else keeps the unknown-relationship
/// embedding. Scenes above the cap keep the `n_max` highest-score objects
/// (index order breaks ties and stands in when scores are absent).
pub fn build_graph(
    node_features: Tensor,
    boxes: Option<Tensor>,
    scores: Option<&[Real]>,
    regions: &PairRegions,
    encoder: (&RelationEncoderSpec, &ModelParams),
    unknown_embedding: &[Real],
    n_max: usize,
) -> Result<BuildOutcome> {
    if node_features.rank() != 2 {
        return Err(Error::Dimension {
            op: "build_graph",
            lhs: node_features.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let n_orig = node_features.shape()[0];
    if n_orig == 0 {
        return Err(Error::EmptyScene);
    }
    let (keep, truncated_from) = if n_orig > n_max {
        let mut order: Vec<usize> = (0..n_orig).collect();
        if let Some(s) = scores {
            if s.len() != n_orig {
                return Err(Error::Contract(format!(
                    "{} scores for {} objects",
                    s.len(),
                    n_orig
                )));
            }
            order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        }
        let mut keep: Vec<usize> = order.into_iter().take(n_max).collect();
        keep.sort_unstable();
        (keep, Some(n_orig))
    } else {
        ((0..n_orig).collect(), None)
    };

    let d = node_features.shape()[1];
    let mut feat = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        feat.extend_from_slice(&node_features.data()[i * d..(i + 1) * d]);
    }
    let features = Tensor::new(vec![keep.len(), d], feat)?;
    let boxes = match boxes {
        Some(b) => {
            let mut data = Vec::with_capacity(keep.len() * 4);
            for &i in &keep {
                data.extend_from_slice(&b.data()[i * 4..(i + 1) * 4]);
            }
            Some(Tensor::new(vec![keep.len(), 4], data)?)
        }
        None => None,
    };

    let mut graph = SceneGraph::new(features, boxes, unknown_embedding)?;
    let (spec, params) = encoder;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);

    // trunk outputs are per object; cache them across that object's edges
    let mut trunk_cache: Vec<Option<crate::tape::Var>> = vec![None; keep.len()];
    let mut trunk_of = |tape: &mut Tape, new_idx: usize, orig_idx: usize| -> Result<Option<crate::tape::Var>> {
        if trunk_cache[new_idx].is_none() {
            match regions.object_maps.get(orig_idx).and_then(|m| m.as_ref()) {
                Some(map) => {
                    let x = tape.constant(map.clone());
                    trunk_cache[new_idx] = Some(spec.trunk(tape, &bound, x)?);
                }
                None => return Ok(None),
            }
        }
        Ok(trunk_cache[new_idx])
    };

    for (a, &from_orig) in keep.iter().enumerate() {
        for (b, &to_orig) in keep.iter().enumerate() {
            if a == b {
                continue;
            }
            let Some(union) = regions.union_maps.get(&(from_orig, to_orig)) else {
                continue;
            };
            let Some(ts) = trunk_of(&mut tape, a, from_orig)? else {
                continue;
            };
            let Some(to_trunk) = trunk_of(&mut tape, b, to_orig)? else {
                continue;
            };
            let xr = tape.constant(union.clone());
            let tr = spec.trunk(&mut tape, &bound, xr)?;
            let emb = spec.relation_head(&mut tape, &bound, ts, tr, to_trunk)?;
            let label = regions.labels.get(&(from_orig, to_orig)).copied();
            graph.set_edge(a, b, tape.data(emb), label);
        }
    }

    Ok(BuildOutcome {
        graph,
        truncated_from,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::{noisy_map, MapKind};
    use crate::rng;

    fn tiny_encoder() -> (RelationEncoderSpec, ModelParams) {
        let spec = RelationEncoderSpec {
            in_channels: 2,
            mid_channels: 3,
            embed_width: 6,
            gru_hidden: 4,
        };
        let mut params = ModelParams::new();
        let mut rng = rng::seeded(41);
        spec.init(&mut params, 4, &mut rng);
        (spec, params)
    }

    fn features(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rng::seeded(seed);
        Tensor::uniform(vec![n, d], 1.0, &mut rng)
    }

    #[test]
    fn single_object_graph_has_zero_edges() {
        let g = SceneGraph::new(features(1, 3, 1), None, &[0.0; 6]).unwrap();
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn three_object_graph_has_six_edges() {
        let g = SceneGraph::new(features(3, 3, 2), None, &[0.0; 6]).unwrap();
        assert_eq!(g.edge_count(), 6);
    }

    #[test]
    #[should_panic(expected = "self-edges")]
    fn reading_a_self_edge_panics() {
        let g = SceneGraph::new(features(2, 3, 3), None, &[0.0; 6]).unwrap();
        let _ = g.edge_embedding(1, 1);
    }

    #[test]
    fn empty_scene_is_rejected() {
        let feat = Tensor::new(vec![0, 3], vec![]).unwrap();
        assert!(matches!(
            SceneGraph::new(feat, None, &[0.0; 6]).unwrap_err(),
            Error::EmptyScene
        ));
    }

    #[test]
    fn unordered_boxes_are_a_validation_error() {
        let boxes = Tensor::new(vec![1, 4], vec![0.5, 0.1, 0.4, 0.2]).unwrap();
        assert!(matches!(
            SceneGraph::new(features(1, 3, 4), Some(boxes), &[0.0; 6]).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn all_unknown_pairs_carry_the_unknown_embedding() {
        let unknown = [1.0, -2.0, 3.0, -4.0, 5.0, -6.0];
        let (spec, params) = tiny_encoder();
        let outcome = build_graph(
            features(3, 4, 5),
            None,
            None,
            &PairRegions::default(),
            (&spec, &params),
            &unknown,
            DEFAULT_N_MAX,
        )
        .unwrap();
        let g = outcome.graph;
        for from in 0..3 {
            for to in 0..3 {
                if from != to {
                    assert_eq!(g.edge_embedding(from, to), &unknown);
                    assert!(!g.edge_is_known(from, to));
                }
            }
        }
    }

    #[test]
    fn annotated_pairs_get_encoder_embeddings() {
        let (spec, params) = tiny_encoder();
        let mut regions = PairRegions {
            object_maps: vec![
                Some(noisy_map(MapKind::Category, 0, 2, 0.1, 1)),
                Some(noisy_map(MapKind::Category, 1, 2, 0.1, 2)),
            ],
            ..Default::default()
        };
        regions
            .union_maps
            .insert((0, 1), noisy_map(MapKind::Predicate, 0, 2, 0.1, 3));
        regions.labels.insert((0, 1), 7);
        let outcome = build_graph(
            features(2, 4, 6),
            None,
            None,
            &regions,
            (&spec, &params),
            &[0.0; 6],
            DEFAULT_N_MAX,
        )
        .unwrap();
        let g = outcome.graph;
        assert!(g.edge_is_known(0, 1));
        assert_eq!(g.edge_label(0, 1), Some(7));
        assert!(!g.edge_is_known(1, 0));
        assert!(g.edge_embedding(0, 1).iter().any(|&v| v != 0.0));
        assert_eq!(g.edge_embedding(1, 0), &[0.0; 6]);
    }

    #[test]
    fn truncation_keeps_the_highest_scores() {
        let (spec, params) = tiny_encoder();
        let scores = [0.1, 0.9, 0.5, 0.7];
        let outcome = build_graph(
            features(4, 2, 7),
            None,
            Some(&scores),
            &PairRegions::default(),
            (&spec, &params),
            &[0.0; 6],
            2,
        )
        .unwrap();
        assert_eq!(outcome.truncated_from, Some(4));
        assert_eq!(outcome.graph.n(), 2);
        // objects 1 and 3 survive, in original order
        let orig = features(4, 2, 7);
        assert_eq!(
            outcome.graph.node_features().data()[..2],
            orig.data()[2..4]
        );
        assert_eq!(
            outcome.graph.node_features().data()[2..],
            orig.data()[6..8]
        );
    }

    #[test]
    fn feature_container_round_trip_is_byte_identical() {
        let feat = features(36, 2048, 8);
        let boxes = {
            let mut data = Vec::new();
            for i in 0..36 {
                let x = i as Real / 40.0;
                data.extend_from_slice(&[x, x, x + 0.1, x + 0.2]);
            }
            Tensor::new(vec![36, 4], data).unwrap()
        };
        let mut buf1 = Vec::new();
        write_features(&mut buf1, &feat, Some(&boxes)).unwrap();
        let (f2, b2) = read_features(&mut buf1.as_slice(), Path::new("mem"), 36).unwrap();
        assert_eq!(f2.shape(), &[36, 2048]);
        assert_eq!(f2.data(), feat.data());
        let mut buf2 = Vec::new();
        write_features(&mut buf2, &f2, b2.as_ref()).unwrap();
        assert_eq!(buf1, buf2);
    }

    #[test]
    fn truncated_container_is_a_format_error_with_offset() {
        let feat = features(3, 5, 9);
        let mut buf = Vec::new();
        write_features(&mut buf, &feat, None).unwrap();
        buf.truncate(buf.len() - 3);
        match read_features(&mut buf.as_slice(), Path::new("mem"), 36).unwrap_err() {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn container_over_cap_is_rejected() {
        let feat = features(5, 2, 10);
        let mut buf = Vec::new();
        write_features(&mut buf, &feat, None).unwrap();
        assert!(matches!(
            read_features(&mut buf.as_slice(), Path::new("mem"), 4).unwrap_err(),
            Error::Validation(_)
        ));
    }
}
