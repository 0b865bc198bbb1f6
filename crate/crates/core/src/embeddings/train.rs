use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grad, ComplexEmbeddings, EmbeddingError, Gradients, LabeledTriple};
use crate::graph::{EntityId, KnowledgeGraph, Triple};

/// Attempts at drawing a corruption that is not a known triple.
const MAX_CORRUPTION_TRIES: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain SGD; the learning rate applies per example.
    #[default]
    Sgd,
    /// Per-coordinate AdaGrad. Much less sensitive to the tiny
    /// initialization and to the learning rate.
    Adagrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rank: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub batch_size: usize,
    pub l2_weight: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub early_stop_patience: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 100,
            learning_rate: 0.05,
            epochs: 100,
            negatives_per_positive: 10,
            batch_size: 512,
            l2_weight: 1e-3,
            seed: 0,
            validation_fraction: 0.05,
            early_stop_patience: 5,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let bad = |m: &str| Err(EmbeddingError::InvalidConfig(m.to_owned()));
        if self.rank == 0 {
            return bad("rank must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.negatives_per_positive == 0 {
            return bad("negatives per positive must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return bad("l2 weight must be non-negative");
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 0.5]");
        }
        if self.early_stop_patience == 0 {
            return bad("early-stop patience must be positive");
        }
        Ok(())
    }
}

/// One line of training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mrr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub embeddings: ComplexEmbeddings<f32>,
    pub history: Vec<EpochRecord>,
    /// Epoch whose tables were returned (best validation MRR when a
    /// validation split exists, otherwise the last epoch).
    pub best_epoch: usize,
}

pub fn train(graph: &KnowledgeGraph, config: &TrainConfig) -> Result<ComplexEmbeddings<f32>, EmbeddingError> {
    Ok(train_with_progress(graph, config, |_| {})?.embeddings)
}

/// Mini-batch SGD on the logistic loss with uniformly corrupted heads or
/// tails as negatives. Single-threaded and fully determined by the seed.
pub fn train_with_progress(
    graph: &KnowledgeGraph,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, EmbeddingError> {
    config.validate()?;
    if graph.entity_count() < 2 || graph.is_empty() {
        return Err(EmbeddingError::GraphTooSmall);
    }
    let mut embeddings = ComplexEmbeddings::<f32>::init(graph, config.rank, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);

    let mut triples: Vec<Triple> = graph.triples().to_vec();
    triples.shuffle(&mut rng);
    let n_val = (triples.len() as f64 * config.validation_fraction).floor() as usize;
    let validation: Vec<Triple> = triples[..n_val].to_vec();
    let mut training: Vec<Triple> = triples[n_val..].to_vec();
    if training.is_empty() {
        return Err(EmbeddingError::GraphTooSmall);
    }

    let lr = config.learning_rate as f32;
    let mut adagrad = match config.optimizer {
        Optimizer::Sgd => None,
        Optimizer::Adagrad => Some(ComplexEmbeddings::<f32>::zeros(
            graph.entity_count(),
            graph.relation_count(),
            config.rank,
        )?),
    };
    let l2 = config.l2_weight as f32;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ComplexEmbeddings<f32>)> = None;
    let mut stale = 0;
    let mut last_epoch = 0;

    for epoch in 1..=config.epochs {
        training.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut examples = 0usize;
        for chunk in training.chunks(config.batch_size) {
            let batch = build_batch(graph, chunk, config.negatives_per_positive, &mut rng);
            let (loss, grads) = loss_and_grad(&embeddings, &batch, l2)?;
            if !loss.total().is_finite() {
                return Err(EmbeddingError::Diverged { epoch });
            }
            match &mut adagrad {
                None => embeddings.apply(&grads, lr * batch.len() as f32),
                Some(squares) => adagrad_step(&mut embeddings, squares, &grads, lr),
            }
            loss_sum += loss.total() as f64 * batch.len() as f64;
            examples += batch.len();
        }
        last_epoch = epoch;
        let val_mrr = (!validation.is_empty()).then(|| filtered_mrr(graph, &embeddings, &validation));
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / examples as f64,
            val_mrr,
        };
        on_epoch(&record);
        history.push(record);

        if let Some(mrr) = val_mrr {
            match &best {
                Some((best_mrr, _, _)) if mrr <= *best_mrr => {
                    stale += 1;
                    if stale >= config.early_stop_patience {
                        log::info!("early stop at epoch {epoch}");
                        break;
                    }
                }
                _ => {
                    stale = 0;
                    best = Some((mrr, epoch, embeddings.clone()));
                }
            }
        }
    }

    let (mut embeddings, best_epoch) = match best {
        Some((_, epoch, tables)) => (tables, epoch),
        None => (embeddings, last_epoch),
    };
    embeddings.set_trained_epochs(best_epoch);
    Ok(TrainOutcome {
        embeddings,
        history,
        best_epoch,
    })
}

const ADAGRAD_EPS: f32 = 1e-10;

fn adagrad_step(
    embeddings: &mut ComplexEmbeddings<f32>,
    squares: &mut ComplexEmbeddings<f32>,
    grads: &Gradients<f32>,
    lr: f32,
) {
    let update = |params: &mut [f32], acc: &mut [f32], grad: &[f32]| {
        for ((p, a), &g) in params.iter_mut().zip(acc.iter_mut()).zip(grad) {
            *a += g * g;
            *p -= lr * g / (a.sqrt() + ADAGRAD_EPS);
        }
    };
    for (&e, g) in &grads.entities {
        let (re, im) = embeddings.entity_mut(e);
        let (acc_re, acc_im) = squares.entity_mut(e);
        update(re, acc_re, &g.re);
        update(im, acc_im, &g.im);
    }
    for (&r, g) in &grads.relations {
        let (re, im) = embeddings.relation_mut(r);
        let (acc_re, acc_im) = squares.relation_mut(r);
        update(re, acc_re, &g.re);
        update(im, acc_im, &g.im);
    }
}

fn build_batch<R: Rng>(graph: &KnowledgeGraph, positives: &[Triple], negatives: usize, rng: &mut R) -> Vec<LabeledTriple> {
    let n = graph.entity_count() as u32;
    let mut batch = Vec::with_capacity(positives.len() * (1 + negatives));
    for &triple in positives {
        batch.push(LabeledTriple { triple, positive: true });
        for _ in 0..negatives {
            for _ in 0..MAX_CORRUPTION_TRIES {
                let replacement = EntityId(rng.random_range(0..n));
                let corrupted = if rng.random_bool(0.5) {
                    Triple::new(replacement, triple.relation, triple.tail)
                } else {
                    Triple::new(triple.head, triple.relation, replacement)
                };
                if !graph.contains(corrupted.head, corrupted.relation, corrupted.tail) {
                    batch.push(LabeledTriple {
                        triple: corrupted,
                        positive: false,
                    });
                    break;
                }
            }
        }
    }
    batch
}

/// Tail-prediction mean reciprocal rank, ignoring other known tails.
pub(crate) fn filtered_mrr(graph: &KnowledgeGraph, embeddings: &ComplexEmbeddings<f32>, held_out: &[Triple]) -> f64 {
    let mut total = 0.0;
    for t in held_out {
        let scores = embeddings.score_all_tails(t.head, t.relation);
        let target = scores[t.tail.index()];
        let known = graph.neighbors_unchecked(t.head, t.relation);
        let better = scores
            .iter()
            .enumerate()
            .filter(|&(e, &s)| s > target && known.binary_search(&EntityId(e as u32)).is_err())
            .count();
        total += 1.0 / (better + 1) as f64;
    }
    total / held_out.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::step_probability;
    use crate::graph::load_triples;

    const FAMILY: &str = "tom\thasBrother\tbob\nbob\thasChild\tann\nbob\tisMarriedTo\tsue\n";

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            rank: 8,
            epochs,
            learning_rate: 0.2,
            batch_size: 4,
            negatives_per_positive: 4,
            validation_fraction: 0.0,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let g = load_triples(FAMILY.as_bytes()).unwrap();
        let cfg = small_config(0);
        let trained = train(&g, &cfg).unwrap();
        assert_eq!(trained, ComplexEmbeddings::<f32>::init(&g, 8, 3).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let g = load_triples(FAMILY.as_bytes()).unwrap().with_inverses().unwrap();
        let a = train(&g, &small_config(20)).unwrap();
        let b = train(&g, &small_config(20)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_eq!(a.trained_epochs(), 20);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let single = load_triples("a\tr\ta\n".as_bytes()).unwrap();
        assert!(matches!(train(&single, &small_config(1)), Err(EmbeddingError::GraphTooSmall)));
        let g = load_triples(FAMILY.as_bytes()).unwrap();
        let bad = TrainConfig {
            validation_fraction: 0.7,
            ..small_config(1)
        };
        assert!(matches!(train(&g, &bad), Err(EmbeddingError::InvalidConfig(_))));
    }

    #[test]
    fn separates_true_from_corrupted() {
        let adagrad = TrainConfig {
            optimizer: Optimizer::Adagrad,
            learning_rate: 0.1,
            ..small_config(200)
        };
        for cfg in [small_config(200), adagrad] {
            separation(&cfg);
        }
    }

    fn separation(cfg: &TrainConfig) {
        let g = load_triples(FAMILY.as_bytes()).unwrap().with_inverses().unwrap();
        let emb = train(&g, cfg).unwrap();
        // Score the true triples through the embedding alone by checking
        // against an empty graph with the same vocabulary.
        let mut builder = crate::graph::GraphBuilder::new();
        for name in g.entity_names() {
            builder.entity(name);
        }
        for name in g.relation_names() {
            builder.relation(name);
        }
        let blank = builder.build();
        let mut pos = 0.0;
        let mut neg = 0.0;
        let mut neg_count = 0.0;
        for t in g.triples() {
            pos += step_probability(&blank, &emb, t.head, t.relation, t.tail).unwrap();
            for e in g.entity_ids() {
                if !g.contains(t.head, t.relation, e) {
                    neg += step_probability(&blank, &emb, t.head, t.relation, e).unwrap();
                    neg_count += 1.0;
                }
            }
        }
        let pos = pos / g.triple_count() as f64;
        let neg = neg / neg_count;
        assert!(pos > neg + 0.2, "{:?}: positives {pos} vs corrupted {neg}", cfg.optimizer);
    }

    #[test]
    fn loss_trend_decreases() {
        let g = load_triples(FAMILY.as_bytes()).unwrap().with_inverses().unwrap();
        let outcome = train_with_progress(&g, &small_config(60), |_| {}).unwrap();
        let windows: Vec<f64> = outcome
            .history
            .chunks(10)
            .map(|w| w.iter().map(|r| r.train_loss).sum::<f64>() / w.len() as f64)
            .collect();
        for pair in windows.windows(2) {
            assert!(pair[1] <= pair[0], "{windows:?}");
        }
    }
}
