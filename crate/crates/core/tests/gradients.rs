mod common;

use embrag::embeddings::{loss_and_grad, ComplexEmbeddings, LabeledTriple};
use embrag::graph::{EntityId, RelationId, Triple};

#[test]
fn analytic_matches_central_differences() {
    for seed in 0..50 {
        let err = common::gradient_relative_error(seed);
        assert!(err < 1e-4, "batch {seed}: relative error {err}");
    }
}

#[test]
fn untouched_rows_get_no_gradient() {
    let emb = ComplexEmbeddings::<f64>::init_sized(5, 2, 3, 1).unwrap();
    let batch = [LabeledTriple {
        triple: Triple::new(EntityId(0), RelationId(1), EntityId(2)),
        positive: true,
    }];
    let (_, grads) = loss_and_grad(&emb, &batch, 0.1).unwrap();
    assert_eq!(grads.entities.keys().copied().collect::<Vec<_>>(), [EntityId(0), EntityId(2)]);
    assert_eq!(grads.relations.keys().copied().collect::<Vec<_>>(), [RelationId(1)]);
}
