//! Finite-difference checks of every generator loss term in isolation, and
//! the wiring of zero-weight terms.

mod common;

use common::grad::{frozen, param_grads, term_check};
use common::tiny_model;
use musa_autograd::Graph;
use musa_core::config::TrainingConfig;
use musa_core::model::LossTerm;

#[test]
fn toy_stack_is_small() {
    let (model, _) = tiny_model(3);
    let n = model.generator.num_scalars();
    assert!(n <= 1000, "{n} generator parameters");
}

#[test]
fn every_term_matches_finite_differences() {
    let (model, batch) = tiny_model(3);
    let fq = frozen(&model, &batch);
    for term in LossTerm::ALL {
        let (ratio, param, total) = term_check(&model, &batch, &fq, term);
        assert!(total > 0.0, "{} has no gradient at all", term.name());
        assert!(ratio <= 1.0, "{} / {param}: error {ratio} times the allowance", term.name());
    }
}

#[test]
fn zero_speaker_weight_leaves_classifier_untouched() {
    let (model, batch) = tiny_model(5);
    let cls: Vec<usize> = model
        .generator
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name.starts_with("cls"))
        .map(|(i, _)| i)
        .collect();
    assert!(!cls.is_empty());

    let on = param_grads(&model, &batch, &TrainingConfig::default());
    assert!(cls.iter().any(|&i| on[i].data().iter().any(|&v| v != 0.0)));

    let mut w = TrainingConfig::default();
    w.lambda_s = 0.0;
    let off = param_grads(&model, &batch, &w);
    for &i in &cls {
        assert!(off[i].data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_semantic_weight_ignores_tokens() {
    let (model, batch) = tiny_model(7);
    let mut shuffled = batch.clone();
    let k = model.bank.codebook_size();
    for tok in &mut shuffled.tokens {
        for t in tok.iter_mut() {
            *t = (*t + 1) % k;
        }
    }

    let a = param_grads(&model, &batch, &TrainingConfig::default());
    let b = param_grads(&model, &shuffled, &TrainingConfig::default());
    assert_ne!(a, b, "tokens should matter while the semantic term is on");

    let mut w = TrainingConfig::default();
    w.lambda_m = 0.0;
    let a = param_grads(&model, &batch, &w);
    let b = param_grads(&model, &shuffled, &w);
    assert_eq!(a, b);
}

#[test]
fn zero_weight_terms_are_not_built() {
    let (model, batch) = tiny_model(9);
    let mut w = TrainingConfig::default();
    w.lambda_s = 0.0;
    w.lambda_m = 0.0;
    let g = Graph::new();
    let p = model.generator.bind(&g, false);
    let pass = model.generator_pass(&g, &p, &batch, &w, None).unwrap();
    let built: Vec<LossTerm> = pass.terms.iter().map(|(t, _)| *t).collect();
    assert_eq!(built, vec![LossTerm::Reconstruction, LossTerm::Commitment]);
}
