//! Brute-force oracles and random fixtures shared by the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use embrag::embeddings::{loss_and_grad, step_probability, ComplexEmbeddings, LabeledTriple, Real};
use embrag::graph::{EntityId, GraphBuilder, KnowledgeGraph, RelationId, Triple};
use embrag::mining::QaExample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random graph over `entities` entities and `relations` base relations,
/// augmented with inverses. Every entity is registered even if isolated.
pub fn random_graph<R: Rng>(rng: &mut R, entities: usize, relations: usize, triples: usize) -> KnowledgeGraph {
    let mut b = GraphBuilder::new();
    for e in 0..entities {
        b.entity(&format!("e{e}"));
    }
    for r in 0..relations {
        b.relation(&format!("r{r}"));
    }
    for _ in 0..triples {
        let h = rng.random_range(0..entities);
        let r = rng.random_range(0..relations);
        let t = rng.random_range(0..entities);
        b.add(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
    }
    b.build().with_inverses().unwrap()
}

/// Embedding tables with entries uniform in `[-scale, scale]`.
pub fn random_embeddings<T: Real, R: Rng>(rng: &mut R, graph: &KnowledgeGraph, rank: usize, scale: f64) -> ComplexEmbeddings<T> {
    let mut emb = ComplexEmbeddings::<T>::zeros(graph.entity_count(), graph.relation_count(), rank).unwrap();
    let fill = |xs: &mut [T], rng: &mut R| {
        for x in xs {
            *x = T::from(rng.random_range(-scale..=scale)).unwrap();
        }
    };
    for e in graph.entity_ids() {
        let (re, im) = emb.entity_mut(e);
        fill(re, rng);
        fill(im, rng);
    }
    for r in graph.relation_ids() {
        let (re, im) = emb.relation_mut(r);
        fill(re, rng);
        fill(im, rng);
    }
    emb
}

/// Every grounding of `rule` from `topic` over all entity sequences; each
/// entity keeps its best product. Sorted by score descending, then id.
pub fn exhaustive_groundings(
    graph: &KnowledgeGraph,
    emb: &ComplexEmbeddings<f32>,
    topic: EntityId,
    rule: &[RelationId],
) -> Vec<(EntityId, f64)> {
    let n = graph.entity_count();
    // Step table per rule position: table[i][u * n + v].
    let tables: Vec<Vec<f64>> = rule
        .iter()
        .map(|&r| {
            let mut t = vec![0.0; n * n];
            for u in 0..n {
                for v in 0..n {
                    t[u * n + v] = step_probability(graph, emb, EntityId(u as u32), r, EntityId(v as u32)).unwrap();
                }
            }
            t
        })
        .collect();
    let mut best: BTreeMap<EntityId, f64> = BTreeMap::new();
    let mut stack = vec![(topic.index(), 0usize, 1.0f64)];
    while let Some((at, depth, p)) = stack.pop() {
        if depth == rule.len() {
            let e = best.entry(EntityId(at as u32)).or_insert(f64::NEG_INFINITY);
            if p > *e {
                *e = p;
            }
            continue;
        }
        for v in 0..n {
            stack.push((v, depth + 1, p * tables[depth][at * n + v]));
        }
    }
    let mut out: Vec<(EntityId, f64)> = best.into_iter().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Relation sequences of length `1..=max_len` that reach `dst` from `src`,
/// by trying every sequence over the vocabulary.
pub fn brute_force_walks(graph: &KnowledgeGraph, src: EntityId, dst: EntityId, max_len: usize) -> BTreeSet<Vec<RelationId>> {
    let relations: Vec<RelationId> = graph.relation_ids().collect();
    let mut out = BTreeSet::new();
    let mut layer: Vec<(Vec<RelationId>, BTreeSet<EntityId>)> = vec![(vec![], BTreeSet::from([src]))];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (seq, reached) in &layer {
            for &r in &relations {
                let mut to = BTreeSet::new();
                for &e in reached {
                    for &(rel, t) in graph.edges_from(e) {
                        if rel == r {
                            to.insert(t);
                        }
                    }
                }
                let mut s = seq.clone();
                s.push(r);
                if to.contains(&dst) {
                    out.insert(s.clone());
                }
                next.push((s, to));
            }
        }
        layer = next;
    }
    out
}

/// Normalized rule probability straight from the definition.
pub fn brute_force_probability(graph: &KnowledgeGraph, members: &[QaExample], path: &[RelationId], max_len: usize) -> f64 {
    let mut total = 0.0;
    for ex in members {
        let mut sum = 0.0;
        for &a in &ex.answers {
            let rw = brute_force_walks(graph, ex.topic, a, max_len);
            if rw.contains(path) {
                sum += 1.0 / rw.len() as f64;
            }
        }
        total += sum / ex.answers.len() as f64;
    }
    total / members.len() as f64
}

/// Precision, recall, F1, Hits@1 and exact match, counted element by element.
pub fn brute_force_metrics(ranked: &[EntityId], pred: &[EntityId], gold: &[EntityId], universe: u32) -> [f64; 5] {
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    let mut same = true;
    for i in 0..universe {
        let e = EntityId(i);
        let p = pred.contains(&e);
        let g = gold.contains(&e);
        np += p as usize;
        ng += g as usize;
        tp += (p && g) as usize;
        same &= p == g;
    }
    let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let recall = tp as f64 / ng as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let hit = ranked.first().is_some_and(|e| gold.contains(e));
    [precision, recall, f1, hit as u8 as f64, same as u8 as f64]
}

const STEP: f64 = 1e-5;

pub fn random_batch<R: Rng>(rng: &mut R, entities: u32, relations: u32, size: usize) -> Vec<LabeledTriple> {
    (0..size)
        .map(|_| LabeledTriple {
            triple: Triple::new(
                EntityId(rng.random_range(0..entities)),
                RelationId(rng.random_range(0..relations)),
                EntityId(rng.random_range(0..entities)),
            ),
            positive: rng.random_bool(0.5),
        })
        .collect()
}

fn loss(emb: &ComplexEmbeddings<f64>, batch: &[LabeledTriple], l2: f64) -> f64 {
    loss_and_grad(emb, batch, l2).unwrap().0.total()
}

/// Largest relative error between analytic and central-difference
/// gradients over every touched coordinate.
pub fn gradient_relative_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (entities, relations) = (12u32, 4u32);
    let mut emb = ComplexEmbeddings::<f64>::zeros(entities as usize, relations as usize, 4).unwrap();
    for e in 0..entities {
        let (re, im) = emb.entity_mut(EntityId(e));
        re.iter_mut().chain(im.iter_mut()).for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    for r in 0..relations {
        let (re, im) = emb.relation_mut(RelationId(r));
        re.iter_mut().chain(im.iter_mut()).for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    let batch = random_batch(&mut rng, entities, relations, 16);
    let l2 = 1e-2;
    let (_, grads) = loss_and_grad(&emb, &batch, l2).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = |emb: &mut ComplexEmbeddings<f64>, pick: &dyn Fn(&mut ComplexEmbeddings<f64>) -> &mut f64, g: f64| {
        let orig = *pick(emb);
        *pick(emb) = orig + STEP;
        let up = loss(emb, &batch, l2);
        *pick(emb) = orig - STEP;
        let down = loss(emb, &batch, l2);
        *pick(emb) = orig;
        analytic.push(g);
        numeric.push((up - down) / (2.0 * STEP));
    };
    for (&e, row) in &grads.entities {
        for k in 0..4 {
            probe(&mut emb, &|m| &mut m.entity_mut(e).0[k], row.re[k]);
            probe(&mut emb, &|m| &mut m.entity_mut(e).1[k], row.im[k]);
        }
    }
    for (&r, row) in &grads.relations {
        for k in 0..4 {
            probe(&mut emb, &|m| &mut m.relation_mut(r).0[k], row.re[k]);
            probe(&mut emb, &|m| &mut m.relation_mut(r).1[k], row.im[k]);
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    diff / scale.max(f64::MIN_POSITIVE)
}
