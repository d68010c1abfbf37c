//! Entity similarity: relation-signature vectors (or loaded embeddings)
//! with relation-constrained exact k-NN under cosine similarity.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{self, BufRead};

use thiserror::Error;

use crate::graph::{EntityId, KnowledgeGraph, RelationId};

/// Which relation set spans the signature vector space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignatureDims {
    /// One coordinate per relation of the inverse-closed set.
    #[default]
    Closed,
    /// One coordinate per base relation; inverse edges are ignored.
    Base,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexMode {
    Signature(SignatureDims),
    External,
}

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("line {line}: embedding has {found} dimensions, expected {expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Counters reported by [`SimilarityIndex::load_external`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmbeddingLoadStats {
    /// Rows naming entities absent from the graph, skipped.
    pub skipped_unknown: usize,
    /// Graph entities with no row in the file; they fall back to zero
    /// vectors and similarity 0.
    pub missing_entities: usize,
}

#[derive(Debug)]
enum Vectors {
    /// Sorted coordinate lists of binary vectors, one per entity.
    Sparse(Vec<Vec<u32>>),
    /// Row-major dense matrix, one row per entity.
    Dense(Vec<f32>),
}

/// Per-entity vectors with cached L2 norms. Immutable once built;
/// concurrent queries are safe.
#[derive(Debug)]
pub struct SimilarityIndex {
    mode: IndexMode,
    dimension: usize,
    vectors: Vectors,
    norms: Vec<f64>,
}

impl SimilarityIndex {
    /// Builds the m-hot signature index: entity e gets a 1 exactly in the
    /// coordinates of relations r with at least one outgoing (e, r, ·) edge.
    pub fn signature(graph: &KnowledgeGraph, dims: SignatureDims) -> Self {
        let dimension = match dims {
            SignatureDims::Closed => graph.relation_count(),
            SignatureDims::Base => graph.base_relation_count(),
        };
        let closed = graph.is_closed_under_inverses();
        let mut rows = Vec::with_capacity(graph.entity_count());
        let mut norms = Vec::with_capacity(graph.entity_count());
        for e in 0..graph.entity_count() {
            let mut coords: Vec<u32> = Vec::new();
            for r in graph.outgoing_relations(EntityId(e as u32)) {
                match dims {
                    SignatureDims::Closed => coords.push(r.0),
                    SignatureDims::Base => {
                        if closed && r.0 & 1 == 1 {
                            continue;
                        }
                        let d = if closed { r.0 >> 1 } else { r.0 };
                        coords.push(d);
                    }
                }
            }
            norms.push((coords.len() as f64).sqrt());
            rows.push(coords);
        }
        SimilarityIndex {
            mode: IndexMode::Signature(dims),
            dimension,
            vectors: Vectors::Sparse(rows),
            norms,
        }
    }

    /// Loads pretrained embeddings from "name TAB v1 TAB ... TAB vd" rows.
    /// Graph entities without a row keep zero vectors; rows for unknown
    /// entities are skipped and counted.
    pub fn load_external<R: BufRead>(
        reader: R,
        graph: &KnowledgeGraph,
    ) -> Result<(Self, EmbeddingLoadStats), SimilarityError> {
        let n = graph.entity_count();
        let mut dimension: Option<usize> = None;
        let mut data: Vec<f32> = Vec::new();
        let mut filled = vec![false; n];
        let mut stats = EmbeddingLoadStats::default();

        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let mut fields = line.split('\t');
            let name = fields.next().unwrap_or("");
            let values: Vec<&str> = fields.collect();
            if values.is_empty() {
                return Err(SimilarityError::MalformedRow {
                    line: lineno,
                    reason: "no vector components".into(),
                });
            }
            let dim = match dimension {
                Some(d) => {
                    if values.len() != d {
                        return Err(SimilarityError::DimensionMismatch {
                            line: lineno,
                            expected: d,
                            found: values.len(),
                        });
                    }
                    d
                }
                None => {
                    let d = values.len();
                    dimension = Some(d);
                    data = vec![0.0f32; n * d];
                    d
                }
            };
            let Some(e) = graph.entity_id(name) else {
                stats.skipped_unknown += 1;
                continue;
            };
            let row = &mut data[e.index() * dim..(e.index() + 1) * dim];
            for (slot, v) in row.iter_mut().zip(&values) {
                *slot = v.parse::<f32>().map_err(|_| SimilarityError::MalformedRow {
                    line: lineno,
                    reason: format!("invalid number {v:?}"),
                })?;
            }
            filled[e.index()] = true;
        }

        let dimension = dimension.unwrap_or(0);
        stats.missing_entities = filled.iter().filter(|&&f| !f).count();
        Ok((Self::from_dense(data, dimension, n), stats))
    }

    /// Wraps an existing row-major dense matrix (store deserialization).
    pub fn from_dense(data: Vec<f32>, dimension: usize, entity_count: usize) -> Self {
        assert_eq!(data.len(), entity_count * dimension);
        let norms = (0..entity_count)
            .map(|e| {
                data[e * dimension..(e + 1) * dimension]
                    .iter()
                    .map(|&v| v as f64 * v as f64)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        SimilarityIndex {
            mode: IndexMode::External,
            dimension,
            vectors: Vectors::Dense(data),
            norms,
        }
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entity_count(&self) -> usize {
        self.norms.len()
    }

    pub fn norm(&self, e: EntityId) -> f64 {
        self.norms[e.index()]
    }

    /// Raw dense rows, present only in external mode.
    pub fn dense_rows(&self) -> Option<&[f32]> {
        match &self.vectors {
            Vectors::Dense(d) => Some(d),
            Vectors::Sparse(_) => None,
        }
    }

    /// Sparse signature coordinates of one entity (signature mode only).
    pub fn signature_coords(&self, e: EntityId) -> Option<&[u32]> {
        match &self.vectors {
            Vectors::Sparse(rows) => Some(&rows[e.index()]),
            Vectors::Dense(_) => None,
        }
    }

    /// Normalized inner product in [-1, 1]; 0 when either vector has zero
    /// norm. Signature mode yields values in [0, 1].
    pub fn cosine(&self, a: EntityId, b: EntityId) -> f64 {
        let (na, nb) = (self.norms[a.index()], self.norms[b.index()]);
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot = match &self.vectors {
            Vectors::Sparse(rows) => {
                sparse_intersection(&rows[a.index()], &rows[b.index()]) as f64
            }
            Vectors::Dense(data) => {
                let d = self.dimension;
                let ra = &data[a.index() * d..(a.index() + 1) * d];
                let rb = &data[b.index() * d..(b.index() + 1) * d];
                ra.iter()
                    .zip(rb)
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum::<f64>()
            }
        };
        let score = dot / (na * nb);
        // fold -0.0 into +0.0 so tie ordering is stable
        if score == 0.0 {
            0.0
        } else {
            score
        }
    }

    /// The k most similar entities to `query` among those with at least one
    /// outgoing `constraint` edge, ordered by (cosine desc, id asc). Returns
    /// fewer than k when the eligible pool is smaller, and an empty list when
    /// no entity carries the constraint relation or the query vector has zero
    /// norm.
    pub fn knn_with_relation(
        &self,
        graph: &KnowledgeGraph,
        query: EntityId,
        constraint: RelationId,
        k: usize,
    ) -> Vec<(EntityId, f64)> {
        if k == 0 || self.norm(query) == 0.0 {
            return Vec::new();
        }
        // min-heap of the k best candidates; the weakest sits on top
        let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
        for i in 0..graph.entity_count() {
            let e = EntityId(i as u32);
            if !graph.has_outgoing(e, constraint) {
                continue;
            }
            let cand = Candidate { score: self.cosine(query, e), entity: e };
            if heap.len() < k {
                heap.push(std::cmp::Reverse(cand));
            } else if heap.peek().is_some_and(|worst| cand > worst.0) {
                heap.pop();
                heap.push(std::cmp::Reverse(cand));
            }
        }
        let mut out: Vec<Candidate> = heap.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out.into_iter().map(|c| (c.entity, c.score)).collect()
    }
}

/// k-NN candidate; `Ord` ranks higher scores first and breaks ties by
/// ascending entity id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    score: f64,
    entity: EntityId,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.entity.cmp(&self.entity))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn sparse_intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RawTriple;

    fn graph(triples: &[(&str, &str, &str)]) -> KnowledgeGraph {
        let raw: Vec<RawTriple> = triples
            .iter()
            .map(|&(h, r, t)| RawTriple::new(h, r, t))
            .collect();
        KnowledgeGraph::build(&raw, true).unwrap()
    }

    #[test]
    fn signature_marks_outgoing_relations() {
        let g = graph(&[("a", "r", "b")]);
        let idx = SimilarityIndex::signature(&g, SignatureDims::Closed);
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        let r = g.relation_id("r").unwrap();
        let r_inv = g.relation_id("r_inv").unwrap();
        assert_eq!(idx.signature_coords(a).unwrap(), &[r.0]);
        assert_eq!(idx.signature_coords(b).unwrap(), &[r_inv.0]);
        assert_eq!(idx.dimension(), 2);
    }

    #[test]
    fn identical_signatures_have_unit_cosine() {
        let g = graph(&[("a", "r", "x"), ("a", "s", "y"), ("b", "r", "y"), ("b", "s", "x")]);
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        let idx = SimilarityIndex::signature(&g, SignatureDims::Closed);
        assert_eq!(idx.cosine(a, b), 1.0);
        assert_eq!(idx.cosine(a, a), 1.0);
    }

    #[test]
    fn disjoint_supports_have_zero_cosine() {
        let g = graph(&[("a", "r", "x"), ("b", "s", "y")]);
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        let idx = SimilarityIndex::signature(&g, SignatureDims::Closed);
        assert_eq!(idx.cosine(a, b), 0.0);
    }

    #[test]
    fn cosine_of_nested_supports() {
        // vector(a) support {r1,r2}, vector(b) support {r1,r2,r3,r4}
        let g = graph(&[
            ("a", "r1", "x"),
            ("a", "r2", "x"),
            ("b", "r1", "y"),
            ("b", "r2", "y"),
            ("b", "r3", "y"),
            ("b", "r4", "y"),
        ]);
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        let idx = SimilarityIndex::signature(&g, SignatureDims::Closed);
        let expected = 2.0 / (2.0f64.sqrt() * 4.0f64.sqrt());
        assert!((idx.cosine(a, b) - expected).abs() < 1e-12);
        assert!((idx.cosine(a, b) - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn cosine_is_symmetric() {
        let g = graph(&[("a", "r1", "x"), ("a", "r2", "x"), ("b", "r2", "y"), ("c", "r3", "b")]);
        let idx = SimilarityIndex::signature(&g, SignatureDims::Closed);
        for i in 0..g.entity_count() {
            for j in 0..g.entity_count() {
                let (a, b) = (EntityId(i as u32), EntityId(j as u32));
                assert_eq!(idx.cosine(a, b), idx.cosine(b, a));
            }
        }
    }

    #[test]
    fn base_dims_ignore_inverse_edges() {
        let g = graph(&[("a", "r", "b")]);
        let idx = SimilarityIndex::signature(&g, SignatureDims::Base);
        assert_eq!(idx.dimension(), 1);
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        assert_eq!(idx.signature_coords(a).unwrap(), &[0]);
        // b only has the inverse edge, so its base-mode vector is empty
        assert_eq!(idx.signature_coords(b).unwrap(), &[] as &[u32]);
        assert_eq!(idx.cosine(a, b), 0.0);
    }

    #[test]
    fn external_load_and_fallback() {
        let g = graph(&[("a", "r", "b"), ("c", "r", "b")]);
        let file = "a\t1.0\t0.0\t0.0\t0.0\nb\t1.0\t0.0\t0.0\t0.0\nzzz\t0.0\t1.0\t0.0\t0.0\n";
        let (idx, stats) = SimilarityIndex::load_external(file.as_bytes(), &g).unwrap();
        assert_eq!(idx.dimension(), 4);
        assert_eq!(stats.skipped_unknown, 1);
        assert_eq!(stats.missing_entities, 1);
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        let c = g.entity_id("c").unwrap();
        assert_eq!(idx.cosine(a, b), 1.0);
        // c has no row: zero vector, similarity 0 to everything
        assert_eq!(idx.cosine(c, a), 0.0);
        assert_eq!(idx.norm(c), 0.0);
    }

    #[test]
    fn external_rejects_dimension_mismatch() {
        let g = graph(&[("a", "r", "b")]);
        let file = "a\t1.0\t2.0\t3.0\t4.0\nb\t1.0\t2.0\t3.0\t4.0\t5.0\n";
        let err = SimilarityIndex::load_external(file.as_bytes(), &g).unwrap_err();
        match err {
            SimilarityError::DimensionMismatch { line, expected, found } => {
                assert_eq!((line, expected, found), (2, 4, 5));
            }
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn external_rejects_bad_numbers() {
        let g = graph(&[("a", "r", "b")]);
        let err = SimilarityIndex::load_external("a\t1.0\tbogus\n".as_bytes(), &g).unwrap_err();
        assert!(matches!(err, SimilarityError::MalformedRow { line: 1, .. }));
    }

    #[test]
    fn knn_respects_relation_constraint_and_ties() {
        // a and c have identical signatures; both carry r. b does not carry r.
        let g = graph(&[("a", "r", "x"), ("c", "r", "y"), ("b", "s", "x")]);
        let idx = SimilarityIndex::signature(&g, SignatureDims::Closed);
        let a = g.entity_id("a").unwrap();
        let c = g.entity_id("c").unwrap();
        let r = g.relation_id("r").unwrap();
        let result = idx.knn_with_relation(&g, a, r, 5);
        // pool smaller than k; equal scores ordered by ascending id
        assert_eq!(result.len(), 2);
        assert_eq!(result[0].0, a.min(c));
        assert_eq!(result[1].0, a.max(c));
        assert_eq!(result[0].1, 1.0);
        assert_eq!(result[1].1, 1.0);
        for &(e, _) in &result {
            assert!(g.has_outgoing(e, r));
        }
    }

    #[test]
    fn knn_pool_of_one() {
        let g = graph(&[("a", "r", "b")]);
        let idx = SimilarityIndex::signature(&g, SignatureDims::Closed);
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        let r_inv = g.relation_id("r_inv").unwrap();
        // b is the single entity with outgoing r_inv
        let result = idx.knn_with_relation(&g, a, r_inv, 5);
        assert_eq!(result.len(), 1);
        assert_eq!(result[0].0, b);
    }

    #[test]
    fn knn_zero_norm_query_returns_nothing() {
        let g = graph(&[("a", "r", "b")]);
        // in base-dims mode b has only the inverse edge, hence a zero vector
        let idx = SimilarityIndex::signature(&g, SignatureDims::Base);
        let b = g.entity_id("b").unwrap();
        let r = g.relation_id("r").unwrap();
        assert_eq!(idx.norm(b), 0.0);
        assert!(idx.knn_with_relation(&g, b, r, 3).is_empty());
    }

    #[test]
    fn knn_matches_brute_force() {
        let g = graph(&[
            ("a", "r", "b"),
            ("c", "r", "d"),
            ("e", "r", "a"),
            ("a", "s", "c"),
            ("c", "s", "e"),
            ("e", "t", "b"),
            ("d", "t", "b"),
        ]);
        let idx = SimilarityIndex::signature(&g, SignatureDims::Closed);
        let r = g.relation_id("r").unwrap();
        for qi in 0..g.entity_count() {
            let q = EntityId(qi as u32);
            for k in 1..=4 {
                let got = idx.knn_with_relation(&g, q, r, k);
                let mut pool: Vec<(EntityId, f64)> = (0..g.entity_count())
                    .map(|i| EntityId(i as u32))
                    .filter(|&e| g.has_outgoing(e, r))
                    .map(|e| (e, idx.cosine(q, e)))
                    .collect();
                pool.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                pool.truncate(k);
                assert_eq!(got, pool, "query {q} k {k}");
            }
        }
    }
}
