//! The precomputed memory: per-triple relation-path cases mined from
//! sampled subgraphs, the similarity index, and a persistent container.

use std::collections::{BTreeSet, HashMap};
use std::io::{self, Read, Write};
use std::path::Path as FsPath;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{EntityId, KnowledgeGraph, PathType, RelationId, Triple};
use crate::similarity::{IndexMode, SignatureDims, SimilarityIndex};

const STORE_MAGIC: &[u8; 8] = b"CBRSTOR1";
const STORE_VERSION: u32 = 1;

/// Store build parameters. All sampling randomness derives from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreConfig {
    /// Random walks sampled per entity.
    pub walks: u32,
    /// Maximum path length, in edges.
    pub max_path_len: usize,
    pub seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig { walks: 1000, max_path_len: 3, seed: 0 }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("store file is truncated")]
    Truncated,
    #[error("store file is corrupt: {0}")]
    Corrupt(&'static str),
    #[error("store format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("store was built from a different graph (content hash mismatch)")]
    GraphHashMismatch,
}

/// Union of the edges touched by the random walks rooted at one entity.
/// Edges are kept sorted by (head, relation, tail).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledSubgraph {
    root: EntityId,
    edges: Vec<(EntityId, RelationId, EntityId)>,
}

impl SampledSubgraph {
    pub fn root(&self) -> EntityId {
        self.root
    }

    pub fn edges(&self) -> &[(EntityId, RelationId, EntityId)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains_edge(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.edges.binary_search(&(head, relation, tail)).is_ok()
    }

    /// Out-edges of `e` within the subgraph.
    pub fn out_edges_of(&self, e: EntityId) -> &[(EntityId, RelationId, EntityId)] {
        let lo = self.edges.partition_point(|&(h, _, _)| h < e);
        let hi = self.edges.partition_point(|&(h, _, _)| h <= e);
        &self.edges[lo..hi]
    }
}

/// Reusable dedup bitset over the graph's global edge slots.
struct WalkScratch {
    seen: Vec<u64>,
    touched: Vec<u32>,
}

impl WalkScratch {
    fn new(edge_count: usize) -> Self {
        WalkScratch {
            seen: vec![0u64; edge_count.div_ceil(64).max(1)],
            touched: Vec::new(),
        }
    }

    /// Marks a slot; true when it was not yet set.
    fn mark(&mut self, slot: usize) -> bool {
        let (word, bit) = (slot / 64, 1u64 << (slot % 64));
        if self.seen[word] & bit != 0 {
            return false;
        }
        self.seen[word] |= bit;
        self.touched.push(slot as u32);
        true
    }

    fn reset(&mut self) {
        for &slot in &self.touched {
            self.seen[slot as usize / 64] &= !(1u64 << (slot % 64));
        }
        self.touched.clear();
    }
}

/// Splitmix64 over (seed, entity) so each entity gets an independent,
/// order-insensitive walk stream.
fn per_entity_seed(seed: u64, entity: EntityId) -> u64 {
    let mut z = seed ^ (entity.0 as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unions `walks` independent random walks from `root`, each up to
/// `max_len` steps choosing uniformly among the outgoing edge slots of the
/// current node and stopping early at sinks.
pub fn sample_subgraph(
    graph: &KnowledgeGraph,
    root: EntityId,
    walks: u32,
    max_len: usize,
    seed: u64,
) -> SampledSubgraph {
    let mut scratch = WalkScratch::new(graph.triple_count());
    sample_subgraph_with(graph, root, walks, max_len, seed, &mut scratch)
}

fn sample_subgraph_with(
    graph: &KnowledgeGraph,
    root: EntityId,
    walks: u32,
    max_len: usize,
    seed: u64,
    scratch: &mut WalkScratch,
) -> SampledSubgraph {
    let mut rng = ChaCha8Rng::seed_from_u64(per_entity_seed(seed, root));
    let mut edges = Vec::new();
    for _ in 0..walks {
        let mut cur = root;
        for _ in 0..max_len {
            let deg = graph.out_degree(cur);
            if deg == 0 {
                break;
            }
            let j = rng.gen_range(0..deg);
            let (rels, tails) = graph.out_edges(cur);
            let (r, t) = (rels[j], tails[j]);
            if scratch.mark(graph.edge_offset(cur) + j) {
                edges.push((cur, r, t));
            }
            cur = t;
        }
    }
    scratch.reset();
    edges.sort_unstable();
    SampledSubgraph { root, edges }
}

/// All simple relation paths (no repeated entities) of length 1..=max_len
/// from `root` within the subgraph, grouped by end entity.
fn reachable_path_types(
    sub: &SampledSubgraph,
    root: EntityId,
    max_len: usize,
) -> HashMap<EntityId, BTreeSet<PathType>> {
    let mut out: HashMap<EntityId, BTreeSet<PathType>> = HashMap::new();
    let mut visited = vec![root];
    let mut rels = Vec::with_capacity(max_len);
    walk_simple(sub, root, max_len, &mut visited, &mut rels, &mut out);
    out
}

fn walk_simple(
    sub: &SampledSubgraph,
    cur: EntityId,
    max_len: usize,
    visited: &mut Vec<EntityId>,
    rels: &mut Vec<RelationId>,
    out: &mut HashMap<EntityId, BTreeSet<PathType>>,
) {
    for &(_, r, t) in sub.out_edges_of(cur) {
        if visited.contains(&t) {
            continue;
        }
        rels.push(r);
        out.entry(t).or_default().insert(PathType::new(rels.clone()));
        if rels.len() < max_len {
            visited.push(t);
            walk_simple(sub, t, max_len, visited, rels, out);
            visited.pop();
        }
        rels.pop();
    }
}

/// Exhaustively enumerates the non-trivial path types connecting
/// `triple.head` to `triple.tail` within the subgraph: every simple path of
/// length <= max_len, entity-stripped and deduplicated, minus the trivial
/// single-hop type `[triple.relation]` (and `[triple.relation^-1]` for
/// self-loops, which closure makes equally vacuous).
pub fn mine_case_paths(
    graph: &KnowledgeGraph,
    subgraph: &SampledSubgraph,
    triple: Triple,
    max_len: usize,
) -> BTreeSet<PathType> {
    let reach = reachable_path_types(subgraph, triple.head, max_len);
    let mut types = reach.get(&triple.tail).cloned().unwrap_or_default();
    strip_trivial(graph, triple, &mut types);
    types
}

fn strip_trivial(graph: &KnowledgeGraph, triple: Triple, types: &mut BTreeSet<PathType>) {
    types.remove(&PathType::new(vec![triple.relation]));
    if triple.head == triple.tail {
        if let Some(inv) = graph.inverse(triple.relation) {
            types.remove(&PathType::new(vec![inv]));
        }
    }
}

/// A triple together with the path types mined for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Case {
    pub triple: Triple,
    pub path_types: BTreeSet<PathType>,
}

/// Handle to a case: either mined for the i-th graph triple or retained
/// later for a triple outside the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseRef {
    Mined(u32),
    Retained(u32),
}

/// One case per graph triple (in canonical triple order) plus any retained
/// cases, with a per-relation index over both.
#[derive(Debug, PartialEq, Eq)]
pub struct CaseStore {
    mined: Vec<BTreeSet<PathType>>,
    retained: Vec<Case>,
    by_relation: Vec<Vec<CaseRef>>,
    retained_index: HashMap<(EntityId, RelationId), Vec<u32>>,
}

impl CaseStore {
    fn from_mined(graph: &KnowledgeGraph, mined: Vec<BTreeSet<PathType>>) -> Self {
        debug_assert_eq!(mined.len(), graph.triple_count());
        let mut by_relation = vec![Vec::new(); graph.relation_count()];
        for idx in 0..mined.len() {
            by_relation[graph.triple(idx).relation.index()].push(CaseRef::Mined(idx as u32));
        }
        CaseStore {
            mined,
            retained: Vec::new(),
            by_relation,
            retained_index: HashMap::new(),
        }
    }

    pub fn mined_count(&self) -> usize {
        self.mined.len()
    }

    pub fn retained_count(&self) -> usize {
        self.retained.len()
    }

    pub fn case_count(&self) -> usize {
        self.mined.len() + self.retained.len()
    }

    /// Path types of the case for the i-th graph triple.
    pub fn mined_types(&self, triple_index: usize) -> &BTreeSet<PathType> {
        &self.mined[triple_index]
    }

    /// Path types of the case for `triple`, if one exists (mined or retained).
    pub fn path_types(&self, graph: &KnowledgeGraph, triple: Triple) -> Option<&BTreeSet<PathType>> {
        if let Some(idx) = graph.triple_index(triple) {
            return Some(&self.mined[idx]);
        }
        self.retained_index
            .get(&(triple.head, triple.relation))?
            .iter()
            .map(|&i| &self.retained[i as usize])
            .find(|c| c.triple.tail == triple.tail)
            .map(|c| &c.path_types)
    }

    /// Retained cases whose triple starts with (head, relation).
    pub fn retained_for(&self, head: EntityId, relation: RelationId) -> impl Iterator<Item = &Case> {
        self.retained_index
            .get(&(head, relation))
            .into_iter()
            .flatten()
            .map(|&i| &self.retained[i as usize])
    }

    pub fn retained_cases(&self) -> &[Case] {
        &self.retained
    }

    /// Cases whose triple carries `relation`, mined first in triple order.
    pub fn cases_with_relation(&self, relation: RelationId) -> &[CaseRef] {
        &self.by_relation[relation.index()]
    }

    /// Total number of stored (case, path type) entries.
    pub fn total_path_types(&self) -> usize {
        self.mined.iter().map(|s| s.len()).sum::<usize>()
            + self.retained.iter().map(|c| c.path_types.len()).sum::<usize>()
    }

    /// Inserts a case for a triple. Cases for triples already in the graph
    /// merge into the existing mined case, keeping one case per triple.
    pub(crate) fn insert_case(&mut self, graph: &KnowledgeGraph, case: Case) {
        if let Some(idx) = graph.triple_index(case.triple) {
            self.mined[idx].extend(case.path_types);
            return;
        }
        let key = (case.triple.head, case.triple.relation);
        if let Some(existing) = self
            .retained_index
            .get(&key)
            .and_then(|ids| {
                ids.iter()
                    .copied()
                    .find(|&i| self.retained[i as usize].triple == case.triple)
            })
        {
            self.retained[existing as usize].path_types.extend(case.path_types);
            return;
        }
        let id = self.retained.len() as u32;
        self.by_relation[case.triple.relation.index()].push(CaseRef::Retained(id));
        self.retained_index.entry(key).or_default().push(id);
        self.retained.push(case);
    }
}

/// Mines one case per graph triple: every entity's subgraph is sampled once
/// (seeded independently per entity), then each of its outgoing triples is
/// searched exhaustively within that subgraph.
pub fn build_case_store(graph: &KnowledgeGraph, config: &StoreConfig) -> CaseStore {
    let per_entity = entity_case_sets(graph, config);
    let mut mined = Vec::with_capacity(graph.triple_count());
    for sets in per_entity {
        mined.extend(sets);
    }
    CaseStore::from_mined(graph, mined)
}

fn case_sets_for_entity(
    graph: &KnowledgeGraph,
    config: &StoreConfig,
    scratch: &mut WalkScratch,
    e: EntityId,
) -> Vec<BTreeSet<PathType>> {
    let deg = graph.out_degree(e);
    if deg == 0 {
        return Vec::new();
    }
    let sub = sample_subgraph_with(graph, e, config.walks, config.max_path_len, config.seed, scratch);
    let reach = reachable_path_types(&sub, e, config.max_path_len);
    let (rels, tails) = graph.out_edges(e);
    (0..deg)
        .map(|i| {
            let triple = Triple::new(e, rels[i], tails[i]);
            let mut types = reach.get(&tails[i]).cloned().unwrap_or_default();
            strip_trivial(graph, triple, &mut types);
            types
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn entity_case_sets(graph: &KnowledgeGraph, config: &StoreConfig) -> Vec<Vec<BTreeSet<PathType>>> {
    use rayon::prelude::*;
    (0..graph.entity_count() as u32)
        .into_par_iter()
        .map_init(
            || WalkScratch::new(graph.triple_count()),
            |scratch, e| case_sets_for_entity(graph, config, scratch, EntityId(e)),
        )
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn entity_case_sets(graph: &KnowledgeGraph, config: &StoreConfig) -> Vec<Vec<BTreeSet<PathType>>> {
    let mut scratch = WalkScratch::new(graph.triple_count());
    (0..graph.entity_count() as u32)
        .map(|e| case_sets_for_entity(graph, config, &mut scratch, EntityId(e)))
        .collect()
}

/// Provenance recorded with every store file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u32,
    pub seed: u64,
    pub walks: u32,
    pub max_path_len: u32,
    pub graph_hash: [u8; 32],
    pub similarity: SimilaritySummary,
}

/// Compact descriptor of how the similarity index was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilaritySummary {
    SignatureClosed,
    SignatureBase,
    External { dimension: u32 },
}

impl SimilaritySummary {
    fn of(index: &SimilarityIndex) -> Self {
        match index.mode() {
            IndexMode::Signature(SignatureDims::Closed) => SimilaritySummary::SignatureClosed,
            IndexMode::Signature(SignatureDims::Base) => SimilaritySummary::SignatureBase,
            IndexMode::External => SimilaritySummary::External {
                dimension: index.dimension() as u32,
            },
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SimilaritySummary::SignatureClosed => "signature/closed".into(),
            SimilaritySummary::SignatureBase => "signature/base".into(),
            SimilaritySummary::External { dimension } => format!("external/d{dimension}"),
        }
    }
}

/// The full precomputed memory: case store plus similarity index plus
/// provenance header. Immutable for querying; retaining needs `&mut`.
#[derive(Debug)]
pub struct MemoryStore {
    pub cases: CaseStore,
    pub similarity: SimilarityIndex,
    pub header: StoreHeader,
}

impl MemoryStore {
    pub fn build(graph: &KnowledgeGraph, config: &StoreConfig, similarity: SimilarityIndex) -> Self {
        let cases = build_case_store(graph, config);
        let header = StoreHeader {
            version: STORE_VERSION,
            seed: config.seed,
            walks: config.walks,
            max_path_len: config.max_path_len as u32,
            graph_hash: graph.content_hash(),
            similarity: SimilaritySummary::of(&similarity),
        };
        MemoryStore { cases, similarity, header }
    }

    /// Builds with the default m-hot signature similarity index.
    pub fn build_signature(graph: &KnowledgeGraph, config: &StoreConfig, dims: SignatureDims) -> Self {
        Self::build(graph, config, SimilarityIndex::signature(graph, dims))
    }

    pub fn save_to_path(&self, path: impl AsRef<FsPath>) -> Result<(), StoreError> {
        let bytes = self.to_bytes();
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_from_path(
        path: impl AsRef<FsPath>,
        graph: &KnowledgeGraph,
    ) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, graph)
    }

    /// Serializes to the store container: fixed-layout header, similarity
    /// block, case records, retained records, trailing SHA-256 checksum.
    /// The encoding is deterministic, so identical stores are byte-identical.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(STORE_MAGIC);
        buf.write_u32::<LittleEndian>(self.header.version).unwrap();
        buf.write_u64::<LittleEndian>(self.header.seed).unwrap();
        buf.write_u32::<LittleEndian>(self.header.walks).unwrap();
        buf.write_u32::<LittleEndian>(self.header.max_path_len).unwrap();
        buf.extend_from_slice(&self.header.graph_hash);
        match self.header.similarity {
            SimilaritySummary::SignatureClosed => {
                buf.push(0);
                buf.write_u32::<LittleEndian>(0).unwrap();
            }
            SimilaritySummary::SignatureBase => {
                buf.push(1);
                buf.write_u32::<LittleEndian>(0).unwrap();
            }
            SimilaritySummary::External { dimension } => {
                buf.push(2);
                buf.write_u32::<LittleEndian>(dimension).unwrap();
                let rows = self
                    .similarity
                    .dense_rows()
                    .expect("external similarity index stores dense rows");
                buf.write_u32::<LittleEndian>(self.similarity.entity_count() as u32)
                    .unwrap();
                for &v in rows {
                    buf.write_f32::<LittleEndian>(v).unwrap();
                }
            }
        }
        buf.write_u32::<LittleEndian>(self.cases.mined.len() as u32).unwrap();
        for types in &self.cases.mined {
            write_type_set(&mut buf, types);
        }
        buf.write_u32::<LittleEndian>(self.cases.retained.len() as u32).unwrap();
        for case in &self.cases.retained {
            buf.write_u32::<LittleEndian>(case.triple.head.0).unwrap();
            buf.write_u32::<LittleEndian>(case.triple.relation.0).unwrap();
            buf.write_u32::<LittleEndian>(case.triple.tail.0).unwrap();
            write_type_set(&mut buf, &case.path_types);
        }
        let checksum: [u8; 32] = Sha256::digest(&buf).into();
        buf.extend_from_slice(&checksum);
        buf
    }

    pub fn from_bytes(bytes: &[u8], graph: &KnowledgeGraph) -> Result<Self, StoreError> {
        if bytes.len() < STORE_MAGIC.len() + 4 + 32 {
            return Err(StoreError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        let mut r = io::Cursor::new(body);

        let mut magic = [0u8; 8];
        read(&mut r, |r| r.read_exact(&mut magic))?;
        if &magic != STORE_MAGIC {
            return Err(StoreError::Corrupt("bad magic bytes"));
        }
        let version = read(&mut r, |r| r.read_u32::<LittleEndian>())?;
        if version != STORE_VERSION {
            return Err(StoreError::VersionMismatch {
                found: version,
                expected: STORE_VERSION,
            });
        }
        let seed = read(&mut r, |r| r.read_u64::<LittleEndian>())?;
        let walks = read(&mut r, |r| r.read_u32::<LittleEndian>())?;
        let max_path_len = read(&mut r, |r| r.read_u32::<LittleEndian>())?;
        let mut graph_hash = [0u8; 32];
        read(&mut r, |r| r.read_exact(&mut graph_hash))?;
        if graph_hash != graph.content_hash() {
            return Err(StoreError::GraphHashMismatch);
        }

        let sim_tag = read(&mut r, |r| r.read_u8())?;
        let dimension = read(&mut r, |r| r.read_u32::<LittleEndian>())?;
        let (summary, similarity) = match sim_tag {
            0 => (
                SimilaritySummary::SignatureClosed,
                SimilarityIndex::signature(graph, SignatureDims::Closed),
            ),
            1 => (
                SimilaritySummary::SignatureBase,
                SimilarityIndex::signature(graph, SignatureDims::Base),
            ),
            2 => {
                let n = read(&mut r, |r| r.read_u32::<LittleEndian>())? as usize;
                if n != graph.entity_count() {
                    return Err(StoreError::Corrupt("entity count mismatch"));
                }
                let mut data = vec![0f32; n * dimension as usize];
                for v in data.iter_mut() {
                    *v = read(&mut r, |r| r.read_f32::<LittleEndian>())?;
                }
                (
                    SimilaritySummary::External { dimension },
                    SimilarityIndex::from_dense(data, dimension as usize, n),
                )
            }
            _ => return Err(StoreError::Corrupt("unknown similarity mode")),
        };

        let mined_count = read(&mut r, |r| r.read_u32::<LittleEndian>())? as usize;
        if mined_count != graph.triple_count() {
            return Err(StoreError::Corrupt("case count does not match graph"));
        }
        let mut mined = Vec::with_capacity(mined_count);
        for _ in 0..mined_count {
            mined.push(read_type_set(&mut r)?);
        }
        let mut cases = CaseStore::from_mined(graph, mined);

        let retained_count = read(&mut r, |r| r.read_u32::<LittleEndian>())? as usize;
        for _ in 0..retained_count {
            let head = EntityId(read(&mut r, |r| r.read_u32::<LittleEndian>())?);
            let rel = RelationId(read(&mut r, |r| r.read_u32::<LittleEndian>())?);
            let tail = EntityId(read(&mut r, |r| r.read_u32::<LittleEndian>())?);
            let path_types = read_type_set(&mut r)?;
            cases.insert_case(graph, Case { triple: Triple::new(head, rel, tail), path_types });
        }
        if r.position() != body.len() as u64 {
            return Err(StoreError::Corrupt("trailing bytes after records"));
        }
        let checksum: [u8; 32] = Sha256::digest(body).into();
        if checksum != tail {
            return Err(StoreError::Corrupt("checksum mismatch"));
        }

        Ok(MemoryStore {
            cases,
            similarity,
            header: StoreHeader {
                version,
                seed,
                walks,
                max_path_len,
                graph_hash,
                similarity: summary,
            },
        })
    }
}

fn read<T>(
    r: &mut io::Cursor<&[u8]>,
    f: impl FnOnce(&mut io::Cursor<&[u8]>) -> io::Result<T>,
) -> Result<T, StoreError> {
    f(r).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            StoreError::Truncated
        } else {
            StoreError::Io(e)
        }
    })
}

fn write_type_set(buf: &mut Vec<u8>, types: &BTreeSet<PathType>) {
    buf.write_u32::<LittleEndian>(types.len() as u32).unwrap();
    for ty in types {
        buf.push(ty.len() as u8);
        for r in ty.relations() {
            buf.write_u32::<LittleEndian>(r.0).unwrap();
        }
    }
}

fn read_type_set(r: &mut io::Cursor<&[u8]>) -> Result<BTreeSet<PathType>, StoreError> {
    let count = read(r, |r| r.read_u32::<LittleEndian>())? as usize;
    let mut set = BTreeSet::new();
    for _ in 0..count {
        let len = read(r, |r| r.read_u8())? as usize;
        let mut rels = Vec::with_capacity(len);
        for _ in 0..len {
            rels.push(RelationId(read(r, |r| r.read_u32::<LittleEndian>())?));
        }
        set.insert(PathType::new(rels));
    }
    Ok(set)
}
