use crate::gemm::gemm;
use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(self, rhs: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = rhs.value();
        assert!(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul {:?} x {:?}", a.shape(), b.shape());
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut y = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut y, 0.0);
        self.graph.op(Tensor::new(vec![m, n], y), &[self, rhs], move || {
            move |g: &Tensor, need: &[bool]| {
                let da = need[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, &mut d, 0.0);
                    Tensor::new(vec![m, k], d)
                });
                let db = need[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, &mut d, 0.0);
                    Tensor::new(vec![k, n], d)
                });
                vec![da, db]
            }
        })
    }

    /// Affine map over the last axis: `[.., In] -> [.., Out]` with `w: [Out, In]`.
    pub fn linear(self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        let shape = x.shape().to_vec();
        let in_dim = *shape.last().expect("linear on scalar");
        assert!(wv.rank() == 2 && wv.dim(1) == in_dim, "linear weight {:?} vs input {:?}", wv.shape(), shape);
        let out_dim = wv.dim(0);
        let rows = x.numel() / in_dim;
        let mut y = vec![0.0; rows * out_dim];
        gemm(rows, in_dim, out_dim, x.data(), false, wv.data(), true, &mut y, 0.0);
        if let Some(b) = &b {
            let bv = b.value();
            assert_eq!(bv.shape(), [out_dim], "linear bias shape");
            for row in y.chunks_mut(out_dim) {
                for (v, bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = out_dim;
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.graph.op(Tensor::new(out_shape, y), &parents, move || {
            move |g: &Tensor, need: &[bool]| {
                let dx = need[0].then(|| {
                    let mut d = vec![0.0; rows * in_dim];
                    gemm(rows, out_dim, in_dim, g.data(), false, wv.data(), false, &mut d, 0.0);
                    Tensor::new(shape.clone(), d)
                });
                let dw = need[1].then(|| {
                    let mut d = vec![0.0; out_dim * in_dim];
                    gemm(out_dim, rows, in_dim, g.data(), true, x.data(), false, &mut d, 0.0);
                    Tensor::new(vec![out_dim, in_dim], d)
                });
                let mut res = vec![dx, dw];
                if has_bias {
                    res.push(need[2].then(|| {
                        let mut d = vec![0.0; out_dim];
                        for row in g.data().chunks(out_dim) {
                            for (a, b) in d.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        Tensor::new(vec![out_dim], d)
                    }));
                }
                res
            }
        })
    }
}
