//! Central finite-difference gradient checking.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Norm-wise relative error per input: `|a - n| / max(|a|, |n|)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `eps` for every element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> GradCheck
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let loss = f(&graph, &vars);
    let grads = graph.backward(loss);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vs: Vec<Var<'_>> = ins.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vs).item()
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            num.data_mut()[j] = (up - down) / (2.0 * eps);
        }
        numeric.push(num);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff: f64 = a.data().iter().zip(n.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = na.max(nn);
            if denom == 0.0 {
                0.0
            } else {
                diff / denom
            }
        })
        .collect();
    GradCheck {
        rel_errors,
        analytic,
        numeric,
    }
}
