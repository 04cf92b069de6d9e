//! Generator objective with a frozen quantization, for gradient checks.

use musa_autograd::{Bound, Graph, Tensor, Var};
use musa_core::config::TrainingConfig;
use musa_core::model::{weighted_total, FrozenQuantization, LossTerm, MusaModel, TrainBatch};

/// Loss roundoff over the step size: values near 1 with eps 1e-6.
pub const ROUNDOFF: f64 = 1e-7;

pub fn only(term: LossTerm) -> TrainingConfig {
    let mut w = TrainingConfig::default();
    for t in LossTerm::ALL {
        if t != term {
            set_weight(&mut w, t, 0.0);
        }
    }
    w
}

fn set_weight(w: &mut TrainingConfig, term: LossTerm, v: f64) {
    match term {
        LossTerm::Reconstruction => w.lambda_r = v,
        LossTerm::Adversarial => w.lambda_a = v,
        LossTerm::FeatureMatching => w.lambda_f = v,
        LossTerm::Commitment => w.lambda_c = v,
        LossTerm::Speaker => w.lambda_s = v,
        LossTerm::Semantic => w.lambda_m = v,
    }
}

pub fn frozen(model: &MusaModel, batch: &TrainBatch) -> FrozenQuantization {
    let g = Graph::new();
    let p = model.generator.bind(&g, false);
    model.generator_pass(&g, &p, batch, &TrainingConfig::default(), None).unwrap().quant
}

pub fn objective<'g>(
    model: &MusaModel,
    batch: &TrainBatch,
    w: &TrainingConfig,
    fq: &FrozenQuantization,
    g: &'g Graph,
    params: &[Var<'g>],
) -> Var<'g> {
    let p = Bound::from_vars(params.to_vec());
    let pass = model.generator_pass(g, &p, batch, w, Some(fq.clone())).unwrap();
    let dp = model.discriminator.bind(g, false);
    let mut terms = pass.terms;
    terms.extend(model.adversarial_terms(&dp, pass.x, pass.x_hat, w));
    weighted_total(&terms, w).unwrap()
}

pub fn param_grads(model: &MusaModel, batch: &TrainBatch, w: &TrainingConfig) -> Vec<Tensor> {
    let fq = frozen(model, batch);
    let g = Graph::new();
    let p = model.generator.bind(&g, true);
    let loss = objective(model, batch, w, &fq, &g, p.vars());
    let grads = g.backward(loss);
    model.generator.collect_grads(&p, &grads)
}

/// Worst ratio of `|analytic - numeric|` to the allowed error over all
/// parameter tensors (passes at <= 1), with the offending tensor's name, and
/// the total analytic gradient norm. The allowance is 1e-3 relative plus an
/// absolute [`ROUNDOFF`] floor: some parameters get an exactly zero gradient
/// (the speaker vector cancels through the straight-through bottleneck), where
/// the difference quotient is pure roundoff.
pub fn term_check(model: &MusaModel, batch: &TrainBatch, fq: &FrozenQuantization, term: LossTerm) -> (f64, String, f64) {
    let w = only(term);
    let inputs: Vec<Tensor> = model.generator.values().to_vec();
    let report = musa_autograd::gradcheck::check_gradients(|g, v| objective(model, batch, &w, fq, g, v), &inputs, 1e-6);
    let norm = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let names: Vec<&str> = model.generator.iter().map(|(n, _)| n).collect();
    let mut worst = (0.0, String::new());
    for (i, (a, n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        let ratio = norm(&a.zip_map(n, |x, y| x - y)) / (1e-3 * norm(a).max(norm(n)) + ROUNDOFF);
        if ratio > worst.0 {
            worst = (ratio, names[i].to_string());
        }
    }
    let total = report.analytic.iter().map(norm).sum();
    (worst.0, worst.1, total)
}
