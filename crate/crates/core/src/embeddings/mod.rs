//! ComplEx entity and relation embeddings.
//!
//! A triple `(h, r, t)` scores `Re(<r, e_h, conj(e_t)>)`. The fuzzy step
//! probability used during retrieval is exactly 1 for edges present in the
//! graph and the logistic squash of the score otherwise.

mod checkpoint;
mod train;

use std::collections::BTreeMap;
use std::fmt::Debug;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{EntityId, GraphError, KnowledgeGraph, RelationId, Triple};

pub use checkpoint::{load, load_for_graph, save, CheckpointHeader};
pub use train::{train, train_with_progress, EpochRecord, Optimizer, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("entity id {0} out of range")]
    EntityOutOfRange(u32),
    #[error("relation id {0} out of range")]
    RelationOutOfRange(u32),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("training needs at least 2 entities and 1 triple")]
    GraphTooSmall,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint dimensions do not match: {0}")]
    DimensionMismatch(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scalar type for embedding tables. Checkpoints store `f32`; `f64` tables
/// are used where finite-difference precision matters.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major `[count × rank]` real and imaginary tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexEmbeddings<T = f32> {
    rank: usize,
    entity_re: Vec<T>,
    entity_im: Vec<T>,
    relation_re: Vec<T>,
    relation_im: Vec<T>,
    seed: u64,
    trained_epochs: usize,
}

impl<T: Real> ComplexEmbeddings<T> {
    /// Entries uniform in `[-0.5/rank, 0.5/rank]`, deterministic in `seed`.
    pub fn init(graph: &KnowledgeGraph, rank: usize, seed: u64) -> Result<Self, EmbeddingError> {
        Self::init_sized(graph.entity_count(), graph.relation_count(), rank, seed)
    }

    pub fn init_sized(entities: usize, relations: usize, rank: usize, seed: u64) -> Result<Self, EmbeddingError> {
        if rank == 0 {
            return Err(EmbeddingError::ZeroRank);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.5 / rank as f64;
        let mut table = |rows: usize| -> Vec<T> {
            (0..rows * rank)
                .map(|_| T::from(rng.random_range(-bound..=bound)).unwrap())
                .collect()
        };
        let entity_re = table(entities);
        let entity_im = table(entities);
        let relation_re = table(relations);
        let relation_im = table(relations);
        Ok(Self {
            rank,
            entity_re,
            entity_im,
            relation_re,
            relation_im,
            seed,
            trained_epochs: 0,
        })
    }

    /// Zero tables, mostly useful for tests and hand-built fixtures.
    pub fn zeros(entities: usize, relations: usize, rank: usize) -> Result<Self, EmbeddingError> {
        if rank == 0 {
            return Err(EmbeddingError::ZeroRank);
        }
        Ok(Self {
            rank,
            entity_re: vec![T::zero(); entities * rank],
            entity_im: vec![T::zero(); entities * rank],
            relation_re: vec![T::zero(); relations * rank],
            relation_im: vec![T::zero(); relations * rank],
            seed: 0,
            trained_epochs: 0,
        })
    }

    pub(crate) fn from_parts(
        rank: usize,
        tables: [Vec<T>; 4],
        seed: u64,
        trained_epochs: usize,
    ) -> Self {
        let [entity_re, entity_im, relation_re, relation_im] = tables;
        Self {
            rank,
            entity_re,
            entity_im,
            relation_re,
            relation_im,
            seed,
            trained_epochs,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn entity_count(&self) -> usize {
        self.entity_re.len() / self.rank
    }

    pub fn relation_count(&self) -> usize {
        self.relation_re.len() / self.rank
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub(crate) fn set_trained_epochs(&mut self, epochs: usize) {
        self.trained_epochs = epochs;
    }

    pub(crate) fn tables(&self) -> [&[T]; 4] {
        [&self.entity_re, &self.entity_im, &self.relation_re, &self.relation_im]
    }

    fn row(&self, i: usize) -> std::ops::Range<usize> {
        i * self.rank..(i + 1) * self.rank
    }

    pub fn entity(&self, e: EntityId) -> (&[T], &[T]) {
        let r = self.row(e.index());
        (&self.entity_re[r.clone()], &self.entity_im[r])
    }

    pub fn relation(&self, rel: RelationId) -> (&[T], &[T]) {
        let r = self.row(rel.index());
        (&self.relation_re[r.clone()], &self.relation_im[r])
    }

    pub fn entity_mut(&mut self, e: EntityId) -> (&mut [T], &mut [T]) {
        let r = e.index() * self.rank..(e.index() + 1) * self.rank;
        (&mut self.entity_re[r.clone()], &mut self.entity_im[r])
    }

    pub fn relation_mut(&mut self, rel: RelationId) -> (&mut [T], &mut [T]) {
        let r = rel.index() * self.rank..(rel.index() + 1) * self.rank;
        (&mut self.relation_re[r.clone()], &mut self.relation_im[r])
    }

    pub fn check_entity(&self, e: EntityId) -> Result<(), EmbeddingError> {
        if e.index() < self.entity_count() {
            Ok(())
        } else {
            Err(EmbeddingError::EntityOutOfRange(e.0))
        }
    }

    pub fn check_relation(&self, r: RelationId) -> Result<(), EmbeddingError> {
        if r.index() < self.relation_count() {
            Ok(())
        } else {
            Err(EmbeddingError::RelationOutOfRange(r.0))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tables().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `Re(<r, e_h, conj(e_t)>)`.
    pub fn raw_score(&self, head: EntityId, relation: RelationId, tail: EntityId) -> Result<f64, EmbeddingError> {
        self.check_entity(head)?;
        self.check_relation(relation)?;
        self.check_entity(tail)?;
        Ok(self.score(head, relation, tail).to_f64().unwrap())
    }

    // Head and relation fold into one complex vector q = r * e_h, so that
    // score(t) = Re(q · conj(e_t)) = Σ q_re t_re + q_im t_im. Pointwise and
    // batched scoring share this path and agree bit for bit.
    fn query(&self, head: EntityId, relation: RelationId) -> (Vec<T>, Vec<T>) {
        let (hr, hi) = self.entity(head);
        let (rr, ri) = self.relation(relation);
        let q_re = (0..self.rank).map(|k| rr[k] * hr[k] - ri[k] * hi[k]).collect();
        let q_im = (0..self.rank).map(|k| rr[k] * hi[k] + ri[k] * hr[k]).collect();
        (q_re, q_im)
    }

    fn score_query(&self, q_re: &[T], q_im: &[T], tail: EntityId) -> T {
        let (tr, ti) = self.entity(tail);
        let mut s = T::zero();
        for k in 0..self.rank {
            s = s + q_re[k] * tr[k] + q_im[k] * ti[k];
        }
        s
    }

    pub(crate) fn score(&self, head: EntityId, relation: RelationId, tail: EntityId) -> T {
        let (q_re, q_im) = self.query(head, relation);
        self.score_query(&q_re, &q_im, tail)
    }

    /// Scores `(head, relation, t)` for every entity `t`, indexed by entity id.
    pub fn score_all_tails(&self, head: EntityId, relation: RelationId) -> Vec<f64> {
        let (q_re, q_im) = self.query(head, relation);
        (0..self.entity_count())
            .map(|t| self.score_query(&q_re, &q_im, EntityId(t as u32)).to_f64().unwrap())
            .collect()
    }

    pub fn apply(&mut self, grads: &Gradients<T>, learning_rate: T) {
        for (&e, g) in &grads.entities {
            let (re, im) = self.entity_mut(e);
            step(re, &g.re, learning_rate);
            step(im, &g.im, learning_rate);
        }
        for (&r, g) in &grads.relations {
            let (re, im) = self.relation_mut(r);
            step(re, &g.re, learning_rate);
            step(im, &g.im, learning_rate);
        }
    }
}

fn step<T: Real>(params: &mut [T], grad: &[T], lr: T) {
    for (p, &g) in params.iter_mut().zip(grad) {
        *p = *p - lr * g;
    }
}

/// Logistic function restricted to the open interval (0, 1), so that a
/// predicted step never reaches the certainty reserved for graph edges.
pub fn squash(x: f64) -> f64 {
    const LARGEST_BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, LARGEST_BELOW_ONE)
}

/// Fuzzy truth value of `(head, relation, tail)`: 1 for a graph edge,
/// otherwise the squashed embedding score.
pub fn step_probability<T: Real>(
    graph: &KnowledgeGraph,
    embeddings: &ComplexEmbeddings<T>,
    head: EntityId,
    relation: RelationId,
    tail: EntityId,
) -> Result<f64, EmbeddingError> {
    if graph.has_triple(head, relation, tail)? {
        return Ok(1.0);
    }
    Ok(squash(embeddings.raw_score(head, relation, tail)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexRow<T> {
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Real> ComplexRow<T> {
    fn zeros(rank: usize) -> Self {
        Self {
            re: vec![T::zero(); rank],
            im: vec![T::zero(); rank],
        }
    }
}

/// Sparse gradients over the rows a batch touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub entities: BTreeMap<EntityId, ComplexRow<T>>,
    pub relations: BTreeMap<RelationId, ComplexRow<T>>,
}

impl<T> Gradients<T> {
    pub fn entity(&self, e: EntityId) -> Option<&ComplexRow<T>> {
        self.entities.get(&e)
    }

    pub fn relation(&self, r: RelationId) -> Option<&ComplexRow<T>> {
        self.relations.get(&r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledTriple {
    pub triple: Triple,
    pub positive: bool,
}

/// Loss broken into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss<T> {
    pub data: T,
    pub regularization: T,
}

impl<T: Real> Loss<T> {
    pub fn total(&self) -> T {
        self.data + self.regularization
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy of `σ(score)` against the labels, plus
/// `l2_weight` times the mean squared norm of the rows the batch touches.
pub fn loss_and_grad<T: Real>(
    embeddings: &ComplexEmbeddings<T>,
    batch: &[LabeledTriple],
    l2_weight: T,
) -> Result<(Loss<T>, Gradients<T>), EmbeddingError> {
    if batch.is_empty() {
        return Err(EmbeddingError::EmptyBatch);
    }
    let rank = embeddings.rank();
    let mut grads = Gradients {
        entities: BTreeMap::new(),
        relations: BTreeMap::new(),
    };
    for item in batch {
        let t = item.triple;
        embeddings.check_entity(t.head)?;
        embeddings.check_relation(t.relation)?;
        embeddings.check_entity(t.tail)?;
        grads.entities.entry(t.head).or_insert_with(|| ComplexRow::zeros(rank));
        grads.entities.entry(t.tail).or_insert_with(|| ComplexRow::zeros(rank));
        grads.relations.entry(t.relation).or_insert_with(|| ComplexRow::zeros(rank));
    }

    let n = T::from(batch.len()).unwrap();
    let mut data = T::zero();
    for item in batch {
        let Triple { head, relation, tail } = item.triple;
        let s = embeddings.score(head, relation, tail);
        let (loss, target) = if item.positive {
            (softplus(-s), T::one())
        } else {
            (softplus(s), T::zero())
        };
        data = data + loss;
        let coeff = (sigmoid(s) - target) / n;

        let (hr, hi) = embeddings.entity(head);
        let (rr, ri) = embeddings.relation(relation);
        let (tr, ti) = embeddings.entity(tail);
        {
            let g = grads.relations.get_mut(&relation).unwrap();
            for k in 0..rank {
                g.re[k] = g.re[k] + coeff * (hr[k] * tr[k] + hi[k] * ti[k]);
                g.im[k] = g.im[k] + coeff * (hr[k] * ti[k] - hi[k] * tr[k]);
            }
        }
        {
            let g = grads.entities.get_mut(&head).unwrap();
            for k in 0..rank {
                g.re[k] = g.re[k] + coeff * (rr[k] * tr[k] + ri[k] * ti[k]);
                g.im[k] = g.im[k] + coeff * (rr[k] * ti[k] - ri[k] * tr[k]);
            }
        }
        {
            let g = grads.entities.get_mut(&tail).unwrap();
            for k in 0..rank {
                g.re[k] = g.re[k] + coeff * (rr[k] * hr[k] - ri[k] * hi[k]);
                g.im[k] = g.im[k] + coeff * (rr[k] * hi[k] + ri[k] * hr[k]);
            }
        }
    }
    data = data / n;

    let touched = T::from(grads.entities.len() + grads.relations.len()).unwrap();
    let two = T::one() + T::one();
    let mut sq_norm = T::zero();
    let reg_coeff = l2_weight * two / touched;
    for (&e, g) in grads.entities.iter_mut() {
        let (re, im) = embeddings.entity(e);
        sq_norm = sq_norm + accumulate_l2(g, re, im, reg_coeff);
    }
    for (&r, g) in grads.relations.iter_mut() {
        let (re, im) = embeddings.relation(r);
        sq_norm = sq_norm + accumulate_l2(g, re, im, reg_coeff);
    }
    let regularization = l2_weight * sq_norm / touched;
    Ok((Loss { data, regularization }, grads))
}

fn accumulate_l2<T: Real>(g: &mut ComplexRow<T>, re: &[T], im: &[T], coeff: T) -> T {
    let mut sq = T::zero();
    for k in 0..re.len() {
        sq = sq + re[k] * re[k] + im[k] * im[k];
        g.re[k] = g.re[k] + coeff * re[k];
        g.im[k] = g.im[k] + coeff * im[k];
    }
    sq
}
