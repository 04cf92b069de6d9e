//! Reductions, reshapes and the handful of broadcasts the models need.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.graph.op(y, &[self], move || {
            move |g: &Tensor, _: &[bool]| vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over the last axis: `[.., T] -> [..]`.
    pub fn mean_last(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let t = *shape.last().expect("mean_last on scalar");
        assert!(t > 0, "mean_last over empty axis");
        let outer = x.numel() / t;
        let data: Vec<f64> = x
            .data()
            .chunks(t)
            .map(|c| c.iter().sum::<f64>() / t as f64)
            .collect();
        let y = Tensor::new(shape[..shape.len() - 1].to_vec(), data);
        self.graph.op(y, &[self], move || {
            move |g: &Tensor, _: &[bool]| {
                let mut out = Vec::with_capacity(outer * t);
                for &gv in g.data() {
                    out.extend(std::iter::repeat_n(gv / t as f64, t));
                }
                vec![Some(Tensor::new(shape.clone(), out))]
            }
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape);
        self.graph.op(y, &[self], move || {
            move |g: &Tensor, _: &[bool]| vec![Some(g.clone().reshape(old.clone()))]
        })
    }

    /// Swaps the two trailing axes: `[.., A, B] -> [.., B, A]`.
    pub fn swap_last2(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let r = shape.len();
        assert!(r >= 2, "swap_last2 needs rank >= 2");
        let (a, b) = (shape[r - 2], shape[r - 1]);
        let mut new_shape = shape.clone();
        new_shape.swap(r - 2, r - 1);
        let y = Tensor::new(new_shape, transpose_blocks(x.data(), a, b));
        self.graph.op(y, &[self], move || {
            move |g: &Tensor, _: &[bool]| {
                vec![Some(Tensor::new(shape.clone(), transpose_blocks(g.data(), b, a)))]
            }
        })
    }

    /// `[.., T] -> [.., len]` taking positions `start..start + len`.
    pub fn slice_last(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let t = *shape.last().expect("slice_last on scalar");
        assert!(start + len <= t, "slice {start}+{len} out of range {t}");
        let mut data = Vec::with_capacity(x.numel() / t * len);
        for c in x.data().chunks(t) {
            data.extend_from_slice(&c[start..start + len]);
        }
        let mut new_shape = shape.clone();
        *new_shape.last_mut().unwrap() = len;
        let y = Tensor::new(new_shape, data);
        self.graph.op(y, &[self], move || {
            move |g: &Tensor, _: &[bool]| {
                let mut out = Tensor::zeros(shape.clone());
                for (o, gc) in out.data_mut().chunks_mut(t).zip(g.data().chunks(len)) {
                    o[start..start + len].copy_from_slice(gc);
                }
                vec![Some(out)]
            }
        })
    }

    /// Zero padding on the last axis.
    pub fn pad_last(self, left: usize, right: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let t = *shape.last().expect("pad_last on scalar");
        let nt = t + left + right;
        let mut data = Vec::with_capacity(x.numel() / t.max(1) * nt);
        for c in x.data().chunks(t) {
            data.extend(std::iter::repeat_n(0.0, left));
            data.extend_from_slice(c);
            data.extend(std::iter::repeat_n(0.0, right));
        }
        let mut new_shape = shape.clone();
        *new_shape.last_mut().unwrap() = nt;
        let y = Tensor::new(new_shape, data);
        self.graph.op(y, &[self], move || {
            move |g: &Tensor, _: &[bool]| {
                let mut out = Vec::with_capacity(g.numel() / nt * t);
                for c in g.data().chunks(nt) {
                    out.extend_from_slice(&c[left..left + t]);
                }
                vec![Some(Tensor::new(shape.clone(), out))]
            }
        })
    }

    /// Adds a per-channel vector `b: [C]` to `self: [B, C, ..]`.
    pub fn add_channel(self, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let bv = b.value();
        let shape = x.shape().to_vec();
        assert!(shape.len() >= 2 && bv.shape() == [shape[1]], "add_channel shape mismatch");
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut y = (*x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bv.data()[(i / inner) % c];
        }
        self.graph.op(y, &[self, b], move || {
            move |g: &Tensor, need: &[bool]| {
                let db = need[1].then(|| {
                    let mut d = vec![0.0; c];
                    for (i, gv) in g.data().iter().enumerate() {
                        d[(i / inner) % c] += gv;
                    }
                    Tensor::new(vec![c], d)
                });
                vec![need[0].then(|| g.clone()), db]
            }
        })
    }

    /// `self: [B, D, T]` plus `s: [B, D]` broadcast along time.
    pub fn add_time(self, s: Var<'g>) -> Var<'g> {
        broadcast_time(self, s, 1.0)
    }

    /// `self: [B, D, T]` minus `s: [B, D]` broadcast along time.
    pub fn sub_time(self, s: Var<'g>) -> Var<'g> {
        broadcast_time(self, s, -1.0)
    }
}

fn broadcast_time<'g>(x: Var<'g>, s: Var<'g>, sign: f64) -> Var<'g> {
    let xv = x.value();
    let sv = s.value();
    let shape = xv.shape().to_vec();
    assert!(
        shape.len() == 3 && sv.shape() == [shape[0], shape[1]],
        "time broadcast: {:?} vs {:?}",
        shape,
        sv.shape()
    );
    let t = shape[2];
    let mut y = (*xv).clone();
    for (row, &sval) in y.data_mut().chunks_mut(t).zip(sv.data()) {
        for v in row {
            *v += sign * sval;
        }
    }
    let sshape = sv.shape().to_vec();
    x.graph.op(y, &[x, s], move || {
        move |g: &Tensor, need: &[bool]| {
            let ds = need[1].then(|| {
                let d = g.data().chunks(t).map(|c| sign * c.iter().sum::<f64>()).collect();
                Tensor::new(sshape.clone(), d)
            });
            vec![need[0].then(|| g.clone()), ds]
        }
    })
}

fn transpose_blocks(data: &[f64], a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let block = a * b;
    if block == 0 {
        return out;
    }
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

impl Graph {
    /// Concatenates along axis 0; all other axes must agree.
    pub fn concat0<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat0 of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for v in &values {
            assert_eq!(&v.shape()[1..], &tail[..], "concat0 trailing shape mismatch");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let sizes: Vec<(Vec<usize>, usize)> =
            values.iter().map(|v| (v.shape().to_vec(), v.numel())).collect();
        self.op(Tensor::new(shape, data), parts, move || {
            move |g: &Tensor, need: &[bool]| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(need)
                    .map(|((s, n), &nd)| {
                        let out = nd.then(|| Tensor::new(s.clone(), g.data()[off..off + n].to_vec()));
                        off += n;
                        out
                    })
                    .collect()
            }
        })
    }
}
