//! Query answering: retrieve similar entities, gather their cases' path
//! types, re-apply the top types from the query subject by exact traversal,
//! and rank reached entities by path support.

use std::collections::HashMap;

use thiserror::Error;

use crate::graph::{EntityId, KnowledgeGraph, PathType, RelationId, Triple};
use crate::store::{Case, CaseStore, MemoryStore};

/// A tail-prediction query (subject, relation, ?). Head prediction is the
/// same query over the inverse relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub subject: EntityId,
    pub relation: RelationId,
}

/// How an answer's support is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupportMode {
    /// Number of distinct path types reaching the answer.
    #[default]
    DistinctTypes,
    /// Total number of path instantiations reaching the answer.
    Instantiations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReasonerParams {
    /// Neighbors retrieved per query.
    pub k: usize,
    /// Budget on the aggregated, count-sorted path-type list.
    pub l: usize,
    /// Frontier cap per traversal hop; entities beyond it are dropped in
    /// ascending-id order.
    pub fanout_cap: usize,
    pub retain_enabled: bool,
    pub support_mode: SupportMode,
    /// Keep the subject in its own answer list.
    pub include_self: bool,
}

impl Default for ReasonerParams {
    fn default() -> Self {
        ReasonerParams {
            k: 5,
            l: 50,
            fanout_cap: 1000,
            retain_enabled: false,
            support_mode: SupportMode::DistinctTypes,
            include_self: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryDiagnostics {
    pub neighbors_used: usize,
    pub path_types_tried: usize,
    pub path_types_matched: usize,
}

/// Ranked answers with their support, sorted (support desc, id asc).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryResult {
    pub answers: Vec<(EntityId, u64)>,
    pub diagnostics: QueryDiagnostics,
}

impl QueryResult {
    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn support_of(&self, e: EntityId) -> Option<u64> {
        self.answers.iter().find(|&&(a, _)| a == e).map(|&(_, s)| s)
    }

    pub fn contains(&self, e: EntityId) -> bool {
        self.support_of(e).is_some()
    }
}

#[derive(Debug, Error)]
pub enum RetainError {
    #[error("path type {path_type:?} does not connect the subject to the answer")]
    UnsoundRetain { path_type: PathType },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetainOutcome {
    Inserted,
    /// Retention is disabled in the active parameters; nothing was stored.
    Disabled,
}

/// Collects path types from the cases of every (neighbor, r_q, ·) fact,
/// counting each (case, type) occurrence once, and returns the top-l types
/// ordered by (count desc, shorter first, lexicographic relation order).
pub fn gather_path_types(
    cases: &CaseStore,
    graph: &KnowledgeGraph,
    neighbors: &[EntityId],
    relation: RelationId,
    budget: usize,
) -> Vec<(PathType, u32)> {
    let mut counts: HashMap<PathType, u32> = HashMap::new();
    for &neighbor in neighbors {
        for &tail in graph.successors(neighbor, relation) {
            let triple = Triple::new(neighbor, relation, tail);
            if let Some(types) = cases.path_types(graph, triple) {
                for ty in types {
                    *counts.entry(ty.clone()).or_insert(0) += 1;
                }
            }
        }
        for case in cases.retained_for(neighbor, relation) {
            for ty in &case.path_types {
                *counts.entry(ty.clone()).or_insert(0) += 1;
            }
        }
    }
    let mut gathered: Vec<(PathType, u32)> = counts.into_iter().collect();
    gathered.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    gathered.truncate(budget);
    gathered
}

/// Relational breadth-first traversal of one path type. Each hop expands
/// the frontier through `successors` and truncates it to `fanout_cap`
/// entities in ascending id order.
fn traverse(
    graph: &KnowledgeGraph,
    start: EntityId,
    path_type: &PathType,
    fanout_cap: usize,
) -> Vec<EntityId> {
    let mut frontier = vec![start];
    for &r in path_type.relations() {
        let mut next: Vec<EntityId> = frontier
            .iter()
            .flat_map(|&e| graph.successors(e, r))
            .copied()
            .collect();
        next.sort_unstable();
        next.dedup();
        next.truncate(fanout_cap);
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    frontier
}

/// Like [`traverse`], additionally counting the number of distinct walks
/// that reach each surviving frontier entity (saturating).
fn traverse_with_counts(
    graph: &KnowledgeGraph,
    start: EntityId,
    path_type: &PathType,
    fanout_cap: usize,
) -> Vec<(EntityId, u64)> {
    let mut frontier: Vec<(EntityId, u64)> = vec![(start, 1)];
    for &r in path_type.relations() {
        let mut next: Vec<(EntityId, u64)> = Vec::new();
        for &(e, count) in &frontier {
            for &t in graph.successors(e, r) {
                next.push((t, count));
            }
        }
        next.sort_unstable_by_key(|&(e, _)| e);
        let mut merged: Vec<(EntityId, u64)> = Vec::with_capacity(next.len());
        for (e, count) in next {
            match merged.last_mut() {
                Some(last) if last.0 == e => last.1 = last.1.saturating_add(count),
                _ => merged.push((e, count)),
            }
        }
        merged.truncate(fanout_cap);
        frontier = merged;
        if frontier.is_empty() {
            break;
        }
    }
    frontier
}

/// Entities reached by re-applying `path_type` from `start`. The start
/// entity never answers for itself and is removed when it reappears.
pub fn apply_path_type(
    graph: &KnowledgeGraph,
    start: EntityId,
    path_type: &PathType,
    fanout_cap: usize,
) -> Vec<EntityId> {
    let mut reached = traverse(graph, start, path_type, fanout_cap);
    reached.retain(|&e| e != start);
    reached
}

/// The gathered top-l path types with the entities each one reaches from
/// the query subject. Shared by query answering and the evaluation
/// diagnostics.
pub fn applied_path_types(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    query: Query,
    params: &ReasonerParams,
) -> (Vec<(PathType, u32, Vec<EntityId>)>, usize) {
    let neighbors = memory
        .similarity
        .knn_with_relation(graph, query.subject, query.relation, params.k);
    let gathered = gather_path_types(
        &memory.cases,
        graph,
        &neighbors.iter().map(|&(e, _)| e).collect::<Vec<_>>(),
        query.relation,
        params.l,
    );
    let applied = gathered
        .into_iter()
        .map(|(ty, count)| {
            let mut reached = traverse(graph, query.subject, &ty, params.fanout_cap);
            if !params.include_self {
                reached.retain(|&e| e != query.subject);
            }
            (ty, count, reached)
        })
        .collect();
    (applied, neighbors.len())
}

/// Full pipeline: retrieve k neighbors, gather their top-l path types,
/// re-apply each from the subject, and rank reached entities by support.
pub fn answer_query(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    query: Query,
    params: &ReasonerParams,
) -> QueryResult {
    let (applied, neighbors_used) = applied_path_types(memory, graph, query, params);
    let mut support: HashMap<EntityId, u64> = HashMap::new();
    let mut matched = 0usize;
    for (ty, _count, reached) in &applied {
        if reached.is_empty() {
            continue;
        }
        matched += 1;
        match params.support_mode {
            SupportMode::DistinctTypes => {
                for &e in reached {
                    *support.entry(e).or_insert(0) += 1;
                }
            }
            SupportMode::Instantiations => {
                let mut counts = traverse_with_counts(graph, query.subject, ty, params.fanout_cap);
                if !params.include_self {
                    counts.retain(|&(e, _)| e != query.subject);
                }
                for (e, c) in counts {
                    let slot = support.entry(e).or_insert(0);
                    *slot = slot.saturating_add(c);
                }
            }
        }
    }
    let mut answers: Vec<(EntityId, u64)> = support.into_iter().collect();
    answers.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    QueryResult {
        answers,
        diagnostics: QueryDiagnostics {
            neighbors_used,
            path_types_tried: applied.len(),
            path_types_matched: matched,
        },
    }
}

/// Stores a revised solution back into the memory: a new case for
/// (subject, relation, answer) holding the matched path types. Every type
/// must re-traverse from the subject to the answer; unsound retention is
/// rejected. No-op unless `params.retain_enabled`.
pub fn retain(
    memory: &mut MemoryStore,
    graph: &KnowledgeGraph,
    query: Query,
    answer: EntityId,
    matched_types: &[PathType],
    params: &ReasonerParams,
) -> Result<RetainOutcome, RetainError> {
    if !params.retain_enabled {
        return Ok(RetainOutcome::Disabled);
    }
    for ty in matched_types {
        let reached = traverse(graph, query.subject, ty, usize::MAX);
        if !reached.contains(&answer) {
            return Err(RetainError::UnsoundRetain { path_type: ty.clone() });
        }
    }
    memory.cases.insert_case(
        graph,
        Case {
            triple: Triple::new(query.subject, query.relation, answer),
            path_types: matched_types.iter().cloned().collect(),
        },
    );
    Ok(RetainOutcome::Inserted)
}
