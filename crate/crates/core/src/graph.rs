//! Knowledge graph construction: triple loading, symbol interning, and the
//! inverse-closed adjacency index every other component queries.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Suffix appended to a relation name to form its synthesized inverse.
pub const INVERSE_SUFFIX: &str = "_inv";

/// Dense index of an entity in the symbol table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

/// Dense index of a relation in the symbol table.
///
/// On an inverse-closed graph relations are interned in (base, inverse)
/// pairs, so a relation and its inverse differ only in the lowest bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A directed labeled edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple { head, relation, tail }
    }
}

/// An entity-level path: a start node plus (relation, entity) hops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub start: EntityId,
    pub hops: Vec<(RelationId, EntityId)>,
}

impl Path {
    pub fn new(start: EntityId) -> Self {
        Path { start, hops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    /// Final entity of the path (the start node for an empty path).
    pub fn end(&self) -> EntityId {
        self.hops.last().map(|&(_, e)| e).unwrap_or(self.start)
    }

    /// The relation sequence with entities stripped.
    pub fn path_type(&self) -> PathType {
        PathType::new(self.hops.iter().map(|&(r, _)| r).collect())
    }
}

/// A relation sequence: the shape of a path with its entities stripped.
///
/// Ordered shortlex (shorter sequences first, then lexicographic by
/// relation id) so that sorted collections of path types have a stable,
/// reproducible order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathType(Vec<RelationId>);

impl PathType {
    pub fn new(relations: Vec<RelationId>) -> Self {
        PathType(relations)
    }

    pub fn relations(&self) -> &[RelationId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<RelationId>> for PathType {
    fn from(relations: Vec<RelationId>) -> Self {
        PathType::new(relations)
    }
}

impl Ord for PathType {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .len()
            .cmp(&other.0.len())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for PathType {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A triple as read from disk, before interning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl RawTriple {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Self {
        RawTriple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

/// Column order of a triple file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColumnOrder {
    /// head TAB relation TAB tail
    #[default]
    HeadRelTail,
    /// head TAB tail TAB relation (used by some NELL releases)
    HeadTailRel,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: expected 3 tab-separated fields, found {found}")]
    MalformedLine { line: usize, found: usize },
    #[error("relation name {name:?} ends with the reserved suffix {INVERSE_SUFFIX:?}")]
    ReservedRelationName { name: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads tab-separated triples from a line-oriented stream, in file order,
/// without deduplication. Empty lines are skipped; a trailing `\r` is
/// tolerated for CRLF input.
pub fn load_triples<R: BufRead>(
    reader: R,
    order: ColumnOrder,
) -> Result<Vec<RawTriple>, GraphError> {
    let mut triples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(GraphError::MalformedLine {
                line: idx + 1,
                found: fields.len(),
            });
        }
        let triple = match order {
            ColumnOrder::HeadRelTail => RawTriple::new(fields[0], fields[1], fields[2]),
            ColumnOrder::HeadTailRel => RawTriple::new(fields[0], fields[2], fields[1]),
        };
        triples.push(triple);
    }
    Ok(triples)
}

/// Convenience wrapper over [`load_triples`] for a file path.
pub fn load_triples_file(
    path: impl AsRef<std::path::Path>,
    order: ColumnOrder,
) -> Result<Vec<RawTriple>, GraphError> {
    let file = std::fs::File::open(path)?;
    load_triples(io::BufReader::new(file), order)
}

#[derive(Debug, Default)]
struct SymbolTable {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl SymbolTable {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    fn len(&self) -> usize {
        self.names.len()
    }
}

/// Immutable directed labeled multigraph with interned symbols, a CSR-style
/// adjacency index sorted by (head, relation, tail), and a per-entity
/// outgoing-relation bitset.
#[derive(Debug)]
pub struct KnowledgeGraph {
    entities: SymbolTable,
    relations: SymbolTable,
    closed: bool,
    // Sorted triple list in struct-of-arrays form. `offsets` has one entry
    // per entity plus a sentinel; the slice offsets[e]..offsets[e+1] holds
    // that entity's out-edges.
    offsets: Vec<u32>,
    edge_heads: Vec<EntityId>,
    edge_rels: Vec<RelationId>,
    edge_tails: Vec<EntityId>,
    // has_outgoing bitset: one row of `rel_words` u64 words per entity.
    out_bits: Vec<u64>,
    rel_words: usize,
}

impl KnowledgeGraph {
    /// Interns symbols in first-appearance order and builds the adjacency
    /// index. With `add_inverses`, every edge (h, r, t) also stores
    /// (t, r_inv, h); inverse relations get synthesized names and are
    /// interned right after their base so the two differ in the low bit.
    pub fn build(triples: &[RawTriple], add_inverses: bool) -> Result<Self, GraphError> {
        let mut entities = SymbolTable::default();
        let mut relations = SymbolTable::default();
        let mut edges: Vec<Triple> = Vec::with_capacity(triples.len() * if add_inverses { 2 } else { 1 });

        for raw in triples {
            let head = EntityId(entities.intern(&raw.head));
            let tail = EntityId(entities.intern(&raw.tail));
            let rel = if add_inverses {
                if raw.relation.ends_with(INVERSE_SUFFIX) {
                    return Err(GraphError::ReservedRelationName {
                        name: raw.relation.clone(),
                    });
                }
                let id = if let Some(id) = relations.get(&raw.relation) {
                    id
                } else {
                    let base = relations.intern(&raw.relation);
                    relations.intern(&format!("{}{}", raw.relation, INVERSE_SUFFIX));
                    base
                };
                RelationId(id)
            } else {
                RelationId(relations.intern(&raw.relation))
            };
            edges.push(Triple::new(head, rel, tail));
            if add_inverses {
                edges.push(Triple::new(tail, RelationId(rel.0 ^ 1), head));
            }
        }

        edges.sort_unstable();
        edges.dedup();

        let entity_count = entities.len();
        let relation_count = relations.len();
        let mut offsets = vec![0u32; entity_count + 1];
        for t in &edges {
            offsets[t.head.index() + 1] += 1;
        }
        for i in 0..entity_count {
            offsets[i + 1] += offsets[i];
        }

        let rel_words = relation_count.div_ceil(64).max(1);
        let mut out_bits = vec![0u64; entity_count * rel_words];
        let mut edge_heads = Vec::with_capacity(edges.len());
        let mut edge_rels = Vec::with_capacity(edges.len());
        let mut edge_tails = Vec::with_capacity(edges.len());
        for t in &edges {
            edge_heads.push(t.head);
            edge_rels.push(t.relation);
            edge_tails.push(t.tail);
            let bit = t.relation.index();
            out_bits[t.head.index() * rel_words + bit / 64] |= 1u64 << (bit % 64);
        }

        Ok(KnowledgeGraph {
            entities,
            relations,
            closed: add_inverses,
            offsets,
            edge_heads,
            edge_rels,
            edge_tails,
            out_bits,
            rel_words,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    /// Number of base (non-inverse) relations.
    pub fn base_relation_count(&self) -> usize {
        if self.closed {
            self.relations.len() / 2
        } else {
            self.relations.len()
        }
    }

    pub fn triple_count(&self) -> usize {
        self.edge_rels.len()
    }

    pub fn is_closed_under_inverses(&self) -> bool {
        self.closed
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        self.entities.name(e.0)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        self.relations.name(r.0)
    }

    /// The inverse of `r`, if this graph was built with inverse closure.
    pub fn inverse(&self, r: RelationId) -> Option<RelationId> {
        self.closed.then(|| RelationId(r.0 ^ 1))
    }

    pub fn is_inverse_relation(&self, r: RelationId) -> bool {
        self.closed && r.0 & 1 == 1
    }

    /// Base form of `r` (identity for base relations and unclosed graphs).
    pub fn base_relation(&self, r: RelationId) -> RelationId {
        if self.closed {
            RelationId(r.0 & !1)
        } else {
            r
        }
    }

    /// The i-th triple of the canonical (head, relation, tail)-sorted list.
    pub fn triple(&self, index: usize) -> Triple {
        Triple::new(self.edge_heads[index], self.edge_rels[index], self.edge_tails[index])
    }

    /// Index of `t` in the canonical triple list.
    pub fn triple_index(&self, t: Triple) -> Option<usize> {
        let range = self.edge_range(t.head);
        let rels = &self.edge_rels[range.clone()];
        let lo = rels.partition_point(|&r| r < t.relation);
        let hi = rels.partition_point(|&r| r <= t.relation);
        let tails = &self.edge_tails[range.start + lo..range.start + hi];
        tails
            .binary_search(&t.tail)
            .ok()
            .map(|i| range.start + lo + i)
    }

    pub fn contains_edge(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.successors(head, relation).binary_search(&tail).is_ok()
    }

    fn edge_range(&self, e: EntityId) -> std::ops::Range<usize> {
        self.offsets[e.index()] as usize..self.offsets[e.index() + 1] as usize
    }

    /// Offset of `e`'s first out-edge in the flat edge arrays. Together with
    /// [`out_degree`](Self::out_degree) this identifies each outgoing edge
    /// slot by a global index.
    pub fn edge_offset(&self, e: EntityId) -> usize {
        self.offsets[e.index()] as usize
    }

    pub fn out_degree(&self, e: EntityId) -> usize {
        let r = self.edge_range(e);
        r.end - r.start
    }

    /// Parallel (relation, tail) slices of `e`'s out-edges, sorted by
    /// (relation, tail).
    pub fn out_edges(&self, e: EntityId) -> (&[RelationId], &[EntityId]) {
        let r = self.edge_range(e);
        (&self.edge_rels[r.clone()], &self.edge_tails[r])
    }

    /// Tails t with (e, r, t) in the graph, ascending. Unknown combinations
    /// yield an empty slice.
    pub fn successors(&self, e: EntityId, r: RelationId) -> &[EntityId] {
        let range = self.edge_range(e);
        let rels = &self.edge_rels[range.clone()];
        let lo = rels.partition_point(|&x| x < r);
        let hi = rels.partition_point(|&x| x <= r);
        &self.edge_tails[range.start + lo..range.start + hi]
    }

    /// O(1) test for at least one outgoing edge (e, r, ·).
    pub fn has_outgoing(&self, e: EntityId, r: RelationId) -> bool {
        let bit = r.index();
        self.out_bits[e.index() * self.rel_words + bit / 64] & (1u64 << (bit % 64)) != 0
    }

    /// Distinct relations on `e`'s out-edges, ascending.
    pub fn outgoing_relations(&self, e: EntityId) -> Vec<RelationId> {
        let (rels, _) = self.out_edges(e);
        let mut out = Vec::new();
        for &r in rels {
            if out.last() != Some(&r) {
                out.push(r);
            }
        }
        out
    }

    /// SHA-256 over the symbol tables and the canonical triple list.
    /// Identical inputs produce identical hashes on every platform.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"kg-content-v1");
        h.update([self.closed as u8]);
        h.update((self.entities.len() as u32).to_le_bytes());
        for name in &self.entities.names {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
        }
        h.update((self.relations.len() as u32).to_le_bytes());
        for name in &self.relations.names {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
        }
        h.update((self.triple_count() as u32).to_le_bytes());
        for i in 0..self.triple_count() {
            h.update(self.edge_heads[i].0.to_le_bytes());
            h.update(self.edge_rels[i].0.to_le_bytes());
            h.update(self.edge_tails[i].0.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Writes the entity symbol table as "id TAB name" lines.
    pub fn write_entity_symbols<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (id, name) in self.entities.names.iter().enumerate() {
            writeln!(w, "{id}\t{name}")?;
        }
        Ok(())
    }

    /// Writes the relation symbol table as "id TAB name" lines.
    pub fn write_relation_symbols<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (id, name) in self.relations.names.iter().enumerate() {
            writeln!(w, "{id}\t{name}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(h: &str, r: &str, t: &str) -> RawTriple {
        RawTriple::new(h, r, t)
    }

    #[test]
    fn load_single_line() {
        let triples = load_triples("USA\thas_city\tBoston\n".as_bytes(), ColumnOrder::HeadRelTail)
            .unwrap();
        assert_eq!(triples, vec![raw("USA", "has_city", "Boston")]);
    }

    #[test]
    fn load_empty_input() {
        let triples = load_triples("".as_bytes(), ColumnOrder::HeadRelTail).unwrap();
        assert!(triples.is_empty());
    }

    #[test]
    fn load_rejects_bad_arity() {
        let err = load_triples("a\tb".as_bytes(), ColumnOrder::HeadRelTail).unwrap_err();
        match err {
            GraphError::MalformedLine { line, found } => {
                assert_eq!(line, 1);
                assert_eq!(found, 2);
            }
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn load_reports_line_numbers_past_blank_lines() {
        let err = load_triples("a\tr\tb\n\nx\ty\n".as_bytes(), ColumnOrder::HeadRelTail)
            .unwrap_err();
        match err {
            GraphError::MalformedLine { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn load_tail_relation_order() {
        let triples =
            load_triples("a\tb\tr\n".as_bytes(), ColumnOrder::HeadTailRel).unwrap();
        assert_eq!(triples, vec![raw("a", "r", "b")]);
    }

    #[test]
    fn build_adds_inverse_edges() {
        let g = KnowledgeGraph::build(&[raw("a", "r", "b")], true).unwrap();
        assert_eq!(g.entity_count(), 2);
        assert_eq!(g.relation_count(), 2);
        assert_eq!(g.base_relation_count(), 1);
        assert_eq!(g.triple_count(), 2);
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        let r = g.relation_id("r").unwrap();
        let r_inv = g.relation_id("r_inv").unwrap();
        assert_eq!(g.inverse(r), Some(r_inv));
        assert_eq!(g.inverse(r_inv), Some(r));
        assert!(g.contains_edge(a, r, b));
        assert!(g.contains_edge(b, r_inv, a));
    }

    #[test]
    fn build_dedups_identical_triples() {
        let g = KnowledgeGraph::build(&[raw("a", "r", "b"), raw("a", "r", "b")], true).unwrap();
        assert_eq!(g.triple_count(), 2); // one per direction
    }

    #[test]
    fn build_rejects_reserved_suffix() {
        let err = KnowledgeGraph::build(&[raw("a", "r_inv", "b")], true).unwrap_err();
        assert!(matches!(err, GraphError::ReservedRelationName { .. }));
    }

    #[test]
    fn build_without_closure_keeps_reserved_names() {
        let g = KnowledgeGraph::build(&[raw("a", "r_inv", "b")], false).unwrap();
        assert_eq!(g.relation_count(), 1);
        assert_eq!(g.inverse(RelationId(0)), None);
    }

    #[test]
    fn successors_are_sorted_and_exact() {
        let g = KnowledgeGraph::build(&[raw("a", "r", "c"), raw("a", "r", "b")], false).unwrap();
        let a = g.entity_id("a").unwrap();
        let r = g.relation_id("r").unwrap();
        let b = g.entity_id("b").unwrap();
        let c = g.entity_id("c").unwrap();
        // c interned before b, so c has the smaller id
        assert_eq!(g.successors(a, r), &[c, b]);
        assert!(c < b);
        assert_eq!(g.successors(b, r), &[] as &[EntityId]);
    }

    #[test]
    fn successors_cover_inverse_closure() {
        let g = KnowledgeGraph::build(&[raw("a", "r", "b")], true).unwrap();
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        let r = g.relation_id("r").unwrap();
        let r_inv = g.inverse(r).unwrap();
        assert_eq!(g.successors(b, r_inv), &[a]);
        assert!(g.has_outgoing(a, r));
        assert!(!g.has_outgoing(b, r));
        assert!(g.has_outgoing(b, r_inv));
    }

    #[test]
    fn interning_round_trips() {
        let g = KnowledgeGraph::build(
            &[raw("x", "r", "y"), raw("y", "s", "z")],
            true,
        )
        .unwrap();
        for i in 0..g.entity_count() {
            let name = g.entity_name(EntityId(i as u32)).to_string();
            assert_eq!(g.entity_id(&name), Some(EntityId(i as u32)));
        }
        for i in 0..g.relation_count() {
            let name = g.relation_name(RelationId(i as u32)).to_string();
            assert_eq!(g.relation_id(&name), Some(RelationId(i as u32)));
        }
    }

    #[test]
    fn triple_index_round_trips() {
        let g = KnowledgeGraph::build(
            &[raw("a", "r", "b"), raw("b", "s", "c"), raw("a", "s", "c")],
            true,
        )
        .unwrap();
        for i in 0..g.triple_count() {
            assert_eq!(g.triple_index(g.triple(i)), Some(i));
        }
        let a = g.entity_id("a").unwrap();
        let r = g.relation_id("r").unwrap();
        assert_eq!(g.triple_index(Triple::new(a, r, a)), None);
    }

    #[test]
    fn content_hash_is_input_sensitive() {
        let g1 = KnowledgeGraph::build(&[raw("a", "r", "b")], true).unwrap();
        let g2 = KnowledgeGraph::build(&[raw("a", "r", "b")], true).unwrap();
        let g3 = KnowledgeGraph::build(&[raw("a", "r", "c")], true).unwrap();
        assert_eq!(g1.content_hash(), g2.content_hash());
        assert_ne!(g1.content_hash(), g3.content_hash());
    }

    #[test]
    fn path_type_orders_shortlex() {
        let short = PathType::new(vec![RelationId(9)]);
        let long = PathType::new(vec![RelationId(0), RelationId(1)]);
        assert!(short < long);
        let a = PathType::new(vec![RelationId(0), RelationId(5)]);
        let b = PathType::new(vec![RelationId(1), RelationId(0)]);
        assert!(a < b);
    }

    #[test]
    fn self_loops_are_allowed() {
        let g = KnowledgeGraph::build(&[raw("a", "r", "a")], true).unwrap();
        let a = g.entity_id("a").unwrap();
        let r = g.relation_id("r").unwrap();
        assert!(g.contains_edge(a, r, a));
        assert!(g.contains_edge(a, g.inverse(r).unwrap(), a));
        assert_eq!(g.triple_count(), 2);
    }

    #[test]
    fn symbol_export_lists_ids_and_names() {
        let g = KnowledgeGraph::build(&[raw("a", "r", "b")], true).unwrap();
        let mut ents = Vec::new();
        g.write_entity_symbols(&mut ents).unwrap();
        assert_eq!(String::from_utf8(ents).unwrap(), "0\ta\n1\tb\n");
        let mut rels = Vec::new();
        g.write_relation_symbols(&mut rels).unwrap();
        assert_eq!(String::from_utf8(rels).unwrap(), "0\tr\n1\tr_inv\n");
    }
}
