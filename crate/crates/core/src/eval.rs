//! Rank-based link-prediction evaluation: hits@N and MRR over test splits,
//! filtered/raw protocols, hyperparameter tuning, and diagnostics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, BufRead};

use thiserror::Error;

use crate::graph::{EntityId, KnowledgeGraph, PathType, RawTriple, RelationId};
use crate::reasoner::{answer_query, applied_path_types, Query, QueryResult, ReasonerParams};
use crate::store::MemoryStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    Tail,
    Head,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Protocol {
    #[default]
    Filtered,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TiePolicy {
    /// Gold's rank is the mean rank of its tie block.
    #[default]
    Mean,
    /// Gold ranks at the top of its tie block.
    Optimistic,
    /// Gold ranks at the bottom of its tie block.
    Pessimistic,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub direction: Direction,
    pub protocol: Protocol,
    pub tie_policy: TiePolicy,
    /// Hits cutoffs, positive and sorted ascending.
    pub hits_cutoffs: Vec<u32>,
    pub params: ReasonerParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            direction: Direction::default(),
            protocol: Protocol::default(),
            tie_policy: TiePolicy::default(),
            hits_cutoffs: vec![1, 3, 10],
            params: ReasonerParams::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("tuning grid is empty")]
    EmptyGrid,
    #[error("line {line}: cannot parse gold rule (expected \"r1,r2 => head\")")]
    RuleParse { line: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// All true tails per (subject, relation) across the supplied splits, in
/// both query directions. Used by the filtered protocol to drop known
/// competitors before ranking.
#[derive(Debug, Default)]
pub struct KnownAnswers {
    map: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl KnownAnswers {
    pub fn build(graph: &KnowledgeGraph, splits: &[&[RawTriple]]) -> Self {
        let mut map: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        for split in splits {
            for t in *split {
                let (Some(h), Some(r), Some(tl)) = (
                    graph.entity_id(&t.head),
                    graph.relation_id(&t.relation),
                    graph.entity_id(&t.tail),
                ) else {
                    continue;
                };
                map.entry((h, r)).or_default().push(tl);
                if let Some(inv) = graph.inverse(r) {
                    map.entry((tl, inv)).or_default().push(h);
                }
            }
        }
        for tails in map.values_mut() {
            tails.sort_unstable();
            tails.dedup();
        }
        KnownAnswers { map }
    }

    pub fn get(&self, subject: EntityId, relation: RelationId) -> Option<&[EntityId]> {
        self.map.get(&(subject, relation)).map(|v| v.as_slice())
    }
}

/// Rank of `gold` within a ranked answer list, or `None` when gold was not
/// retrieved. Under the filtered protocol, entities in `known` (other than
/// gold itself) are dropped before ranking. Ties at gold's support resolve
/// per `tie_policy`; the mean policy can yield fractional ranks.
pub fn rank_of(
    result: &QueryResult,
    gold: EntityId,
    known: Option<&[EntityId]>,
    protocol: Protocol,
    tie_policy: TiePolicy,
) -> Option<f64> {
    let gold_support = result.support_of(gold)?;
    let mut better = 0usize;
    let mut tied = 0usize;
    for &(e, s) in &result.answers {
        if e == gold {
            continue;
        }
        if protocol == Protocol::Filtered
            && known.is_some_and(|k| k.binary_search(&e).is_ok())
        {
            continue;
        }
        if s > gold_support {
            better += 1;
        } else if s == gold_support {
            tied += 1;
        }
    }
    let first = (better + 1) as f64;
    let last = (better + tied + 1) as f64;
    Some(match tie_policy {
        TiePolicy::Optimistic => first,
        TiePolicy::Pessimistic => last,
        TiePolicy::Mean => (first + last) / 2.0,
    })
}

/// One line of the per-query rank log. Every aggregate metric is
/// recomputable from these records.
#[derive(Debug, Clone, PartialEq)]
pub struct RankRecord {
    pub subject: String,
    pub relation: String,
    pub gold: String,
    pub rank: Option<f64>,
    pub gold_support: u64,
    /// Whether the query produced any answers at all.
    pub answered: bool,
    /// Whether gold appeared anywhere in the retrieved answer set.
    pub oracle_hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// (cutoff, hits@cutoff) pairs in cutoff order.
    pub hits: Vec<(u32, f64)>,
    pub mrr: f64,
    pub answered_fraction: f64,
    /// Fraction of queries whose gold was retrieved at any rank: the hits@1
    /// upper bound under a perfect re-ranker.
    pub oracle_hits_at_1: f64,
    pub num_queries: usize,
}

/// Aggregates hits@N and MRR from per-query ranks; unranked queries
/// contribute zero reciprocal rank.
pub fn metrics_from_ranks(ranks: &[Option<f64>], cutoffs: &[u32]) -> (Vec<(u32, f64)>, f64) {
    let n = ranks.len().max(1) as f64;
    let hits = cutoffs
        .iter()
        .map(|&c| {
            let hit = ranks
                .iter()
                .filter(|r| r.is_some_and(|rank| rank <= c as f64))
                .count();
            (c, hit as f64 / n)
        })
        .collect();
    let mrr = ranks.iter().map(|r| r.map_or(0.0, |rank| 1.0 / rank)).sum::<f64>() / n;
    (hits, mrr)
}

struct QueryTask {
    subject: String,
    relation: String,
    gold: String,
    resolved: Option<Query>,
}

fn build_tasks(graph: &KnowledgeGraph, test: &[RawTriple], direction: Direction) -> Vec<QueryTask> {
    let mut tasks = Vec::new();
    for t in test {
        if matches!(direction, Direction::Tail | Direction::Both) {
            let resolved = match (graph.entity_id(&t.head), graph.relation_id(&t.relation)) {
                (Some(subject), Some(relation)) => Some(Query { subject, relation }),
                _ => None,
            };
            tasks.push(QueryTask {
                subject: t.head.clone(),
                relation: t.relation.clone(),
                gold: t.tail.clone(),
                resolved,
            });
        }
        if matches!(direction, Direction::Head | Direction::Both) {
            let inv = graph.relation_id(&t.relation).and_then(|r| graph.inverse(r));
            let resolved = match (graph.entity_id(&t.tail), inv) {
                (Some(subject), Some(relation)) => Some(Query { subject, relation }),
                _ => None,
            };
            let relation_name = inv
                .map(|r| graph.relation_name(r).to_string())
                .unwrap_or_else(|| format!("{}{}", t.relation, crate::graph::INVERSE_SUFFIX));
            tasks.push(QueryTask {
                subject: t.tail.clone(),
                relation: relation_name,
                gold: t.head.clone(),
                resolved,
            });
        }
    }
    tasks
}

fn run_task(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    known: &KnownAnswers,
    config: &EvalConfig,
    task: &QueryTask,
) -> RankRecord {
    let mut record = RankRecord {
        subject: task.subject.clone(),
        relation: task.relation.clone(),
        gold: task.gold.clone(),
        rank: None,
        gold_support: 0,
        answered: false,
        oracle_hit: false,
    };
    let Some(query) = task.resolved else {
        return record;
    };
    let result = answer_query(memory, graph, query, &config.params);
    record.answered = !result.is_empty();
    if let Some(gold) = graph.entity_id(&task.gold) {
        record.oracle_hit = result.contains(gold);
        record.gold_support = result.support_of(gold).unwrap_or(0);
        record.rank = rank_of(
            &result,
            gold,
            known.get(query.subject, query.relation),
            config.protocol,
            config.tie_policy,
        );
    }
    record
}

#[cfg(feature = "parallel")]
fn run_tasks(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    known: &KnownAnswers,
    config: &EvalConfig,
    tasks: &[QueryTask],
) -> Vec<RankRecord> {
    use rayon::prelude::*;
    tasks
        .par_iter()
        .map(|t| run_task(memory, graph, known, config, t))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_tasks(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    known: &KnownAnswers,
    config: &EvalConfig,
    tasks: &[QueryTask],
) -> Vec<RankRecord> {
    tasks
        .iter()
        .map(|t| run_task(memory, graph, known, config, t))
        .collect()
}

/// Runs every test triple as tail (and, per `direction`, head) queries and
/// aggregates ranking metrics. Queries execute concurrently; aggregation is
/// order-independent, so results do not depend on parallelism.
pub fn evaluate(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    test: &[RawTriple],
    known: &KnownAnswers,
    config: &EvalConfig,
) -> (Metrics, Vec<RankRecord>) {
    let tasks = build_tasks(graph, test, config.direction);
    let records = run_tasks(memory, graph, known, config, &tasks);
    let ranks: Vec<Option<f64>> = records.iter().map(|r| r.rank).collect();
    let (hits, mrr) = metrics_from_ranks(&ranks, &config.hits_cutoffs);
    let n = records.len().max(1) as f64;
    let metrics = Metrics {
        hits,
        mrr,
        answered_fraction: records.iter().filter(|r| r.answered).count() as f64 / n,
        oracle_hits_at_1: records.iter().filter(|r| r.oracle_hit).count() as f64 / n,
        num_queries: records.len(),
    };
    (metrics, records)
}

/// Convenience wrapper returning only the oracle upper bound.
pub fn oracle_hits_at_1(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    test: &[RawTriple],
    known: &KnownAnswers,
    config: &EvalConfig,
) -> f64 {
    evaluate(memory, graph, test, known, config).0.oracle_hits_at_1
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best_k: usize,
    pub best_l: usize,
    pub best_mrr: f64,
    /// (k, l, validation MRR) for every grid point, in scan order.
    pub table: Vec<(usize, usize, f64)>,
}

/// Grid-searches (k, l) by validation MRR. Ties prefer smaller k, then
/// smaller l.
pub fn tune(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    valid: &[RawTriple],
    known: &KnownAnswers,
    k_grid: &[usize],
    l_grid: &[usize],
    config: &EvalConfig,
) -> Result<TuneResult, EvalError> {
    if valid.is_empty() {
        return Err(EvalError::EmptyValidation);
    }
    if k_grid.is_empty() || l_grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let mut ks = k_grid.to_vec();
    let mut ls = l_grid.to_vec();
    ks.sort_unstable();
    ks.dedup();
    ls.sort_unstable();
    ls.dedup();

    let mut table = Vec::with_capacity(ks.len() * ls.len());
    let mut best: Option<(usize, usize, f64)> = None;
    for &k in &ks {
        for &l in &ls {
            let mut point = config.clone();
            point.params.k = k;
            point.params.l = l;
            let (metrics, _) = evaluate(memory, graph, valid, known, &point);
            table.push((k, l, metrics.mrr));
            if best.is_none_or(|(_, _, m)| metrics.mrr > m) {
                best = Some((k, l, metrics.mrr));
            }
        }
    }
    let (best_k, best_l, best_mrr) = best.expect("non-empty grid");
    Ok(TuneResult { best_k, best_l, best_mrr, table })
}

/// For each query relation, the number of distinct path types that led to
/// the gold answer for at least one test query of that relation.
pub fn count_unique_correct_paths(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    test: &[RawTriple],
    config: &EvalConfig,
) -> BTreeMap<RelationId, usize> {
    let tasks = build_tasks(graph, test, config.direction);
    let per_task = collect_correct_types(memory, graph, &config.params, &tasks);
    let mut sets: BTreeMap<RelationId, BTreeSet<PathType>> = BTreeMap::new();
    for (relation, types) in per_task {
        sets.entry(relation).or_default().extend(types);
    }
    sets.into_iter().map(|(r, s)| (r, s.len())).collect()
}

fn correct_types_for_task(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    params: &ReasonerParams,
    task: &QueryTask,
) -> Option<(RelationId, Vec<PathType>)> {
    let query = task.resolved?;
    let gold = graph.entity_id(&task.gold)?;
    let (applied, _) = applied_path_types(memory, graph, query, params);
    let correct: Vec<PathType> = applied
        .into_iter()
        .filter(|(_, _, reached)| reached.contains(&gold))
        .map(|(ty, _, _)| ty)
        .collect();
    (!correct.is_empty()).then_some((query.relation, correct))
}

#[cfg(feature = "parallel")]
fn collect_correct_types(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    params: &ReasonerParams,
    tasks: &[QueryTask],
) -> Vec<(RelationId, Vec<PathType>)> {
    use rayon::prelude::*;
    tasks
        .par_iter()
        .filter_map(|t| correct_types_for_task(memory, graph, params, t))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn collect_correct_types(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    params: &ReasonerParams,
    tasks: &[QueryTask],
) -> Vec<(RelationId, Vec<PathType>)> {
    tasks
        .iter()
        .filter_map(|t| correct_types_for_task(memory, graph, params, t))
        .collect()
}

/// A Horn-style gold rule: body path type and head relation, by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldRule {
    pub body: Vec<String>,
    pub head: String,
}

/// Parses gold rules, one per line: "r1,r2 => head_relation". Blank lines
/// and lines starting with '#' are skipped.
pub fn parse_gold_rules<R: BufRead>(reader: R) -> Result<Vec<GoldRule>, EvalError> {
    let mut rules = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((body, head)) = line.split_once("=>") else {
            return Err(EvalError::RuleParse { line: idx + 1 });
        };
        let body: Vec<String> = body
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        let head = head.trim().to_string();
        if body.is_empty() || head.is_empty() {
            return Err(EvalError::RuleParse { line: idx + 1 });
        }
        rules.push(GoldRule { body, head });
    }
    Ok(rules)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleStatus {
    Recovered,
    NotRecovered,
    /// The rule names a relation unknown to the graph.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub statuses: Vec<RuleStatus>,
    pub total: usize,
    pub skipped: usize,
    pub recovered: usize,
    /// recovered / (total - skipped); None when nothing was auditable.
    pub fraction: Option<f64>,
    /// head relation name -> (recovered, total) over its rules.
    pub per_relation: BTreeMap<String, (usize, usize)>,
}

/// Checks which gold rules the reasoner rediscovers: a rule counts as
/// recovered when its body appears among the gathered path types of at
/// least one validation query of its head relation.
pub fn audit_rules(
    memory: &MemoryStore,
    graph: &KnowledgeGraph,
    valid: &[RawTriple],
    rules: &[GoldRule],
    config: &EvalConfig,
) -> AuditReport {
    struct Resolved {
        body: PathType,
        head: RelationId,
    }
    let resolved: Vec<Option<Resolved>> = rules
        .iter()
        .map(|rule| {
            let head = graph.relation_id(&rule.head)?;
            let body: Option<Vec<RelationId>> =
                rule.body.iter().map(|r| graph.relation_id(r)).collect();
            Some(Resolved { body: PathType::new(body?), head })
        })
        .collect();

    let mut by_head: HashMap<RelationId, Vec<usize>> = HashMap::new();
    for (idx, r) in resolved.iter().enumerate() {
        if let Some(r) = r {
            by_head.entry(r.head).or_default().push(idx);
        }
    }

    let mut statuses: Vec<RuleStatus> = resolved
        .iter()
        .map(|r| {
            if r.is_some() {
                RuleStatus::NotRecovered
            } else {
                RuleStatus::Skipped
            }
        })
        .collect();

    let tasks = build_tasks(graph, valid, config.direction);
    for task in &tasks {
        let Some(query) = task.resolved else { continue };
        let Some(rule_ids) = by_head.get(&query.relation) else {
            continue;
        };
        if rule_ids
            .iter()
            .all(|&i| statuses[i] == RuleStatus::Recovered)
        {
            continue;
        }
        let neighbors: Vec<EntityId> = memory
            .similarity
            .knn_with_relation(graph, query.subject, query.relation, config.params.k)
            .into_iter()
            .map(|(e, _)| e)
            .collect();
        let gathered = crate::reasoner::gather_path_types(
            &memory.cases,
            graph,
            &neighbors,
            query.relation,
            config.params.l,
        );
        for &i in rule_ids {
            if statuses[i] == RuleStatus::Recovered {
                continue;
            }
            let body = &resolved[i].as_ref().expect("resolved rule").body;
            if gathered.iter().any(|(ty, _)| ty == body) {
                statuses[i] = RuleStatus::Recovered;
            }
        }
    }

    let total = rules.len();
    let skipped = statuses.iter().filter(|&&s| s == RuleStatus::Skipped).count();
    let recovered = statuses
        .iter()
        .filter(|&&s| s == RuleStatus::Recovered)
        .count();
    let auditable = total - skipped;
    let mut per_relation: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (rule, status) in rules.iter().zip(&statuses) {
        if *status == RuleStatus::Skipped {
            continue;
        }
        let entry = per_relation.entry(rule.head.clone()).or_insert((0, 0));
        entry.1 += 1;
        if *status == RuleStatus::Recovered {
            entry.0 += 1;
        }
    }
    AuditReport {
        statuses,
        total,
        skipped,
        recovered,
        fraction: (auditable > 0).then(|| recovered as f64 / auditable as f64),
        per_relation,
    }
}
