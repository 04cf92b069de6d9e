//! Single LSTM layer as one fused tape node with hand-written BPTT.
//! Gate order in the packed weights is input, forget, cell, output.

use crate::gemm::gemm;
use crate::graph::Var;
use crate::ops::elementwise::sigmoid;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// `x: [B, T, In]`, `w_ih: [4H, In]`, `w_hh: [4H, H]`, `b: [4H]` -> `[B, T, H]`,
    /// zero initial state.
    pub fn lstm(self, w_ih: Var<'g>, w_hh: Var<'g>, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let wih = w_ih.value();
        let whh = w_hh.value();
        let bv = b.value();
        assert_eq!(x.rank(), 3, "lstm input must be [B, T, In]");
        let (bsz, t_len, in_dim) = (x.dim(0), x.dim(1), x.dim(2));
        let h4 = wih.dim(0);
        let h = h4 / 4;
        assert!(h4 % 4 == 0 && wih.dim(1) == in_dim, "lstm w_ih shape {:?}", wih.shape());
        assert_eq!(whh.shape(), [h4, h], "lstm w_hh shape");
        assert_eq!(bv.shape(), [h4], "lstm bias shape");

        let rows = bsz * t_len;
        let mut xp = vec![0.0; rows * h4];
        gemm(rows, in_dim, h4, x.data(), false, wih.data(), true, &mut xp, 0.0);

        // Per step: activated gates [B, 4H], cell state and tanh(cell) [B, H].
        let mut acts = vec![0.0; t_len * bsz * h4];
        let mut cells = vec![0.0; (t_len + 1) * bsz * h];
        let mut hiddens = vec![0.0; (t_len + 1) * bsz * h];
        let mut tanh_c = vec![0.0; t_len * bsz * h];
        let mut y = vec![0.0; rows * h];
        let mut pre = vec![0.0; bsz * h4];
        for t in 0..t_len {
            let h_prev = &hiddens[t * bsz * h..(t + 1) * bsz * h];
            gemm(bsz, h, h4, h_prev, false, whh.data(), true, &mut pre, 0.0);
            for bi in 0..bsz {
                let prow = &mut pre[bi * h4..(bi + 1) * h4];
                let xrow = &xp[(bi * t_len + t) * h4..(bi * t_len + t + 1) * h4];
                for ((p, xv), bb) in prow.iter_mut().zip(xrow).zip(bv.data()) {
                    *p += xv + bb;
                }
                let arow = &mut acts[(t * bsz + bi) * h4..(t * bsz + bi + 1) * h4];
                for j in 0..h {
                    arow[j] = sigmoid(prow[j]);
                    arow[h + j] = sigmoid(prow[h + j]);
                    arow[2 * h + j] = prow[2 * h + j].tanh();
                    arow[3 * h + j] = sigmoid(prow[3 * h + j]);
                }
                for j in 0..h {
                    let c_prev = cells[(t * bsz + bi) * h + j];
                    let c = arow[h + j] * c_prev + arow[j] * arow[2 * h + j];
                    let tc = c.tanh();
                    let hv = arow[3 * h + j] * tc;
                    cells[((t + 1) * bsz + bi) * h + j] = c;
                    tanh_c[(t * bsz + bi) * h + j] = tc;
                    hiddens[((t + 1) * bsz + bi) * h + j] = hv;
                    y[(bi * t_len + t) * h + j] = hv;
                }
            }
        }

        self.graph.op(
            Tensor::new(vec![bsz, t_len, h], y),
            &[self, w_ih, w_hh, b],
            move || {
                move |g: &Tensor, need: &[bool]| {
                    let mut dgates = vec![0.0; rows * h4];
                    let mut dh_next = vec![0.0; bsz * h];
                    let mut dc_next = vec![0.0; bsz * h];
                    let mut dwhh = vec![0.0; h4 * h];
                    let mut step = vec![0.0; bsz * h4];
                    for t in (0..t_len).rev() {
                        for bi in 0..bsz {
                            let arow = &acts[(t * bsz + bi) * h4..(t * bsz + bi + 1) * h4];
                            let srow = &mut step[bi * h4..(bi + 1) * h4];
                            for j in 0..h {
                                let (i_g, f_g, c_g, o_g) = (arow[j], arow[h + j], arow[2 * h + j], arow[3 * h + j]);
                                let tc = tanh_c[(t * bsz + bi) * h + j];
                                let c_prev = cells[(t * bsz + bi) * h + j];
                                let dh = g.data()[(bi * t_len + t) * h + j] + dh_next[bi * h + j];
                                let d_o = dh * tc;
                                let dc = dc_next[bi * h + j] + dh * o_g * (1.0 - tc * tc);
                                srow[j] = dc * c_g * i_g * (1.0 - i_g);
                                srow[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                                srow[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                                srow[3 * h + j] = d_o * o_g * (1.0 - o_g);
                                dc_next[bi * h + j] = dc * f_g;
                            }
                            dgates[(bi * t_len + t) * h4..(bi * t_len + t + 1) * h4].copy_from_slice(srow);
                        }
                        let h_prev = &hiddens[t * bsz * h..(t + 1) * bsz * h];
                        gemm(h4, bsz, h, &step, true, h_prev, false, &mut dwhh, 1.0);
                        gemm(bsz, h4, h, &step, false, whh.data(), false, &mut dh_next, 0.0);
                    }
                    let dx = need[0].then(|| {
                        let mut d = vec![0.0; rows * in_dim];
                        gemm(rows, h4, in_dim, &dgates, false, wih.data(), false, &mut d, 0.0);
                        Tensor::new(vec![bsz, t_len, in_dim], d)
                    });
                    let dwih = need[1].then(|| {
                        let mut d = vec![0.0; h4 * in_dim];
                        gemm(h4, rows, in_dim, &dgates, true, x.data(), false, &mut d, 0.0);
                        Tensor::new(vec![h4, in_dim], d)
                    });
                    let db = need[3].then(|| {
                        let mut d = vec![0.0; h4];
                        for row in dgates.chunks(h4) {
                            for (a, v) in d.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        Tensor::new(vec![h4], d)
                    });
                    vec![dx, dwih, need[2].then(|| Tensor::new(vec![h4, h], dwhh)), db]
                }
            },
        )
    }
}
