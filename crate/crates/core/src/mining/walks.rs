//! Relation paths between two entities: exhaustive bounded enumeration and
//! a seeded random-walk sampler whose output is always a subset of it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;

use crate::graph::{EntityId, GraphError, KnowledgeGraph, RelationId};

pub type RelationPath = Vec<RelationId>;

/// Result of a capped enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkSet {
    pub paths: BTreeSet<RelationPath>,
    pub truncated: bool,
}

/// Every distinct relation sequence of length `1..=max_len` that some
/// grounded walk follows from `src` to `dst`. Cycles are allowed.
pub fn enumerate_walks(
    graph: &KnowledgeGraph,
    src: EntityId,
    dst: EntityId,
    max_len: usize,
) -> Result<BTreeSet<RelationPath>, GraphError> {
    Ok(enumerate_walks_capped(graph, src, dst, max_len, usize::MAX)?.paths)
}

/// Like [`enumerate_walks`] but stops after `cap` paths. Paths are produced
/// shortest first and lexicographically within a length, so truncation is
/// deterministic.
pub fn enumerate_walks_capped(
    graph: &KnowledgeGraph,
    src: EntityId,
    dst: EntityId,
    max_len: usize,
    cap: usize,
) -> Result<WalkSet, GraphError> {
    graph.check_entity(src)?;
    graph.check_entity(dst)?;
    let mut out = WalkSet {
        paths: BTreeSet::new(),
        truncated: false,
    };
    if max_len == 0 || cap == 0 {
        return Ok(out);
    }
    let dist = distances_to(graph, dst, max_len);
    if dist[src.index()] > max_len {
        return Ok(out);
    }

    // Each frontier entry is a relation sequence and the set of entities it
    // can reach that are still within range of `dst`.
    let mut frontier: Vec<(RelationPath, BTreeSet<EntityId>)> = vec![(Vec::new(), BTreeSet::from([src]))];
    for depth in 1..=max_len {
        let remaining = max_len - depth;
        let mut next = Vec::new();
        for (path, reached) in &frontier {
            let mut by_relation: BTreeMap<RelationId, BTreeSet<EntityId>> = BTreeMap::new();
            for &e in reached {
                for &(r, t) in graph.edges_from(e) {
                    if dist[t.index()] <= remaining {
                        by_relation.entry(r).or_default().insert(t);
                    }
                }
            }
            for (r, targets) in by_relation {
                let mut extended = path.clone();
                extended.push(r);
                if targets.contains(&dst) {
                    out.paths.insert(extended.clone());
                    if out.paths.len() >= cap {
                        out.truncated = true;
                        return Ok(out);
                    }
                }
                if remaining > 0 {
                    next.push((extended, targets));
                }
            }
        }
        // Parents are visited in order and children appended by relation id,
        // so `next` is already sorted.
        frontier = next;
    }
    Ok(out)
}

/// Shortest hop count from every entity to `target`, saturating above `limit`.
fn distances_to(graph: &KnowledgeGraph, target: EntityId, limit: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; graph.entity_count()];
    dist[target.index()] = 0;
    let mut queue = VecDeque::from([target]);
    while let Some(e) = queue.pop_front() {
        let d = dist[e.index()];
        if d == limit {
            continue;
        }
        for &(_, head) in graph.edges_into(e) {
            if dist[head.index()] == usize::MAX {
                dist[head.index()] = d + 1;
                queue.push_back(head);
            }
        }
    }
    dist
}

/// Samples `walks` random walks of up to `max_len` steps from `src`,
/// recording the relation prefix every time a walk stands on `dst`.
pub fn sample_walks<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    src: EntityId,
    dst: EntityId,
    max_len: usize,
    walks: usize,
    rng: &mut R,
) -> Result<BTreeSet<RelationPath>, GraphError> {
    graph.check_entity(src)?;
    graph.check_entity(dst)?;
    let mut found = BTreeSet::new();
    for _ in 0..walks {
        let mut at = src;
        let mut path = Vec::with_capacity(max_len);
        for _ in 0..max_len {
            let edges = graph.edges_from(at);
            if edges.is_empty() {
                break;
            }
            let (r, t) = edges[rng.random_range(0..edges.len())];
            path.push(r);
            at = t;
            if at == dst {
                found.insert(path.clone());
            }
        }
    }
    Ok(found)
}
