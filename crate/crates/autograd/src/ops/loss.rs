use std::rc::Rc;

use crate::gemm::gemm;
use crate::graph::Var;
use crate::tensor::Tensor;

/// Row-wise log-softmax of a `[N, K]` buffer.
pub fn log_softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

impl<'g> Var<'g> {
    /// Mean cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "cross_entropy wants [N, K] logits");
        let (n, k) = (x.dim(0), x.dim(1));
        assert_eq!(targets.len(), n, "cross_entropy: {} targets for {} rows", targets.len(), n);
        assert!(targets.iter().all(|&t| t < k), "cross_entropy target out of range");
        let logp = log_softmax_rows(x.data(), k);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| logp[i * k + t])
            .sum::<f64>()
            / n as f64;
        let targets = targets.to_vec();
        self.graph.op(Tensor::scalar(loss), &[self], move || {
            move |g: &Tensor, _: &[bool]| {
                let scale = g.item() / n as f64;
                let mut d: Vec<f64> = logp.iter().map(|lp| lp.exp() * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * k + t] -= scale;
                }
                vec![Some(Tensor::new(vec![n, k], d))]
            }
        })
    }

    /// Cosine similarity between matching rows of two `[N, D]` tensors.
    pub fn cosine_rows(self, other: Var<'g>) -> Var<'g> {
        const EPS: f64 = 1e-12;
        let a = self.value();
        let b = other.value();
        assert!(a.rank() == 2 && a.shape() == b.shape(), "cosine_rows shape mismatch");
        let (n, d) = (a.dim(0), a.dim(1));
        let mut stats = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for (ra, rb) in a.data().chunks(d).zip(b.data().chunks(d)) {
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
            let c = dot / (na * nb);
            stats.push((na, nb, c));
            y.push(c);
        }
        self.graph.op(Tensor::new(vec![n], y), &[self, other], move || {
            move |g: &Tensor, need: &[bool]| {
                let grad_for = |u: &Tensor, v: &Tensor, swap: bool| {
                    let mut out = vec![0.0; n * d];
                    for i in 0..n {
                        let (na, nb, c) = stats[i];
                        let (nu, nv) = if swap { (nb, na) } else { (na, nb) };
                        let gi = g.data()[i];
                        for j in 0..d {
                            let uj = u.data()[i * d + j];
                            let vj = v.data()[i * d + j];
                            out[i * d + j] = gi * (vj / (nu * nv) - c * uj / (nu * nu));
                        }
                    }
                    Tensor::new(vec![n, d], out)
                };
                vec![
                    need[0].then(|| grad_for(&a, &b, false)),
                    need[1].then(|| grad_for(&b, &a, true)),
                ]
            }
        })
    }

    /// Negative squared Euclidean distance from each row of `self: [N, D]` to
    /// each row of a fixed `codebook: [K, D]`, giving `[N, K]` logits.
    pub fn neg_sq_dist(self, codebook: Rc<Tensor>) -> Var<'g> {
        let r = self.value();
        assert!(r.rank() == 2 && codebook.rank() == 2 && r.dim(1) == codebook.dim(1), "neg_sq_dist shape mismatch");
        let (n, d, k) = (r.dim(0), r.dim(1), codebook.dim(0));
        let mut y = vec![0.0; n * k];
        gemm(n, d, k, r.data(), false, codebook.data(), true, &mut y, 0.0);
        let rn: Vec<f64> = r.data().chunks(d).map(|row| row.iter().map(|v| v * v).sum()).collect();
        let en: Vec<f64> = codebook.data().chunks(d).map(|row| row.iter().map(|v| v * v).sum()).collect();
        for i in 0..n {
            for j in 0..k {
                y[i * k + j] = 2.0 * y[i * k + j] - rn[i] - en[j];
            }
        }
        self.graph.op(Tensor::new(vec![n, k], y), &[self], move || {
            move |g: &Tensor, _: &[bool]| {
                // d/dr_n = 2 * sum_k g_nk e_k - 2 * (sum_k g_nk) r_n
                let mut dr = vec![0.0; n * d];
                gemm(n, k, d, g.data(), false, codebook.data(), false, &mut dr, 0.0);
                for i in 0..n {
                    let gs: f64 = g.data()[i * k..(i + 1) * k].iter().sum();
                    for j in 0..d {
                        dr[i * d + j] = 2.0 * dr[i * d + j] - 2.0 * gs * r.data()[i * d + j];
                    }
                }
                vec![Some(Tensor::new(vec![n, d], dr))]
            }
        })
    }
}
