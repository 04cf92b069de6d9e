//! Parameterized layers over the autograd tape. Each layer registers its
//! tensors in a [`ParamStore`] at construction and reads them back from a
//! [`Bound`] during the forward pass.

use musa_autograd::{Bound, Conv1dCfg, Conv2dCfg, ParamId, ParamStore, Var};
use rand::Rng;

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    cfg: Conv1dCfg,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, cfg: Conv1dCfg, rng: &mut impl Rng) -> Self {
        let bound = fan_in_bound(cin * kernel);
        Self {
            w: store.add_uniform(format!("{name}.w"), &[cout, cin, kernel], bound, rng),
            b: store.add_uniform(format!("{name}.b"), &[cout], bound, rng),
            cfg,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv1d(p[self.w], Some(p[self.b]), self.cfg)
    }
}

/// Transposed convolution with kernel `2 * stride`, cropped so `L` frames map
/// to exactly `L * stride` samples.
#[derive(Debug, Clone)]
pub struct Upsample1d {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Upsample1d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let bound = fan_in_bound(cin * 2);
        Self {
            w: store.add_uniform(format!("{name}.w"), &[cin, cout, 2 * stride], bound, rng),
            b: store.add_uniform(format!("{name}.b"), &[cout], bound, rng),
            stride,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let l = x.shape()[2];
        // Full output is (l + 1) * stride; drop half a stride from each side.
        x.conv_transpose1d(p[self.w], Some(p[self.b]), self.stride)
            .slice_last(self.stride / 2, l * self.stride)
    }
}

/// Downsampling convolution with kernel `2 * stride` whose padding makes
/// `L` samples map to exactly `L / stride` frames when `stride` divides `L`.
pub fn downsample_cfg(stride: usize) -> Conv1dCfg {
    Conv1dCfg::strided(stride, stride.div_ceil(2), stride / 2)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    cfg: Conv2dCfg,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        cfg: Conv2dCfg,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = fan_in_bound(cin * kernel.0 * kernel.1);
        Self {
            w: store.add_uniform(format!("{name}.w"), &[cout, cin, kernel.0, kernel.1], bound, rng),
            b: store.add_uniform(format!("{name}.b"), &[cout], bound, rng),
            cfg,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(p[self.w], Some(p[self.b]), self.cfg)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = fan_in_bound(cin);
        Self {
            w: store.add_uniform(format!("{name}.w"), &[cout, cin], bound, rng),
            b: bias.then(|| store.add_uniform(format!("{name}.b"), &[cout], bound, rng)),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.linear(p[self.w], self.b.map(|b| p[b]))
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

#[derive(Debug, Clone)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// Stacked LSTM over `[B, C, T]` channels-first input, with a skip connection
/// around the whole stack.
#[derive(Debug, Clone)]
pub struct ResidualLstm {
    layers: Vec<LstmLayer>,
}

impl ResidualLstm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, num_layers: usize, rng: &mut impl Rng) -> Self {
        let bound = fan_in_bound(channels);
        let layers = (0..num_layers)
            .map(|i| {
                let b = store.add_uniform(format!("{name}.{i}.b"), &[4 * channels], bound, rng);
                // Forget-gate bias starts at 1 so early gradients pass through time.
                for v in &mut store.get_mut(b).data_mut()[channels..2 * channels] {
                    *v += 1.0;
                }
                LstmLayer {
                    w_ih: store.add_uniform(format!("{name}.{i}.w_ih"), &[4 * channels, channels], bound, rng),
                    w_hh: store.add_uniform(format!("{name}.{i}.w_hh"), &[4 * channels, channels], bound, rng),
                    b,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        if self.layers.is_empty() {
            return x;
        }
        let seq = x.swap_last2();
        let mut h = seq;
        for l in &self.layers {
            h = h.lstm(p[l.w_ih], p[l.w_hh], p[l.b]);
        }
        h.add(seq).swap_last2()
    }
}

/// `x + conv(elu(conv(elu(x))))` with kernel-3 convolutions.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    c1: Conv1d,
    c2: Conv1d,
}

impl ResidualUnit {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            c1: Conv1d::new(store, &format!("{name}.c1"), channels, channels, 3, Conv1dCfg::same(3), rng),
            c2: Conv1d::new(store, &format!("{name}.c2"), channels, channels, 3, Conv1dCfg::same(3), rng),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.c1.forward(p, x.elu());
        let h = self.c2.forward(p, h.elu());
        x.add(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use musa_autograd::{Graph, Tensor};
    use rand::SeedableRng;

    #[test]
    fn downsample_then_upsample_lengths() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        for s in [2usize, 4, 5, 8] {
            let down = Conv1d::new(&mut store, &format!("d{s}"), 2, 3, 2 * s, downsample_cfg(s), &mut rng);
            let up = Upsample1d::new(&mut store, &format!("u{s}"), 3, 2, s, &mut rng);
            let g = Graph::new();
            let p = store.bind(&g, false);
            let x = g.constant(Tensor::zeros(vec![1, 2, 7 * s]));
            let y = down.forward(&p, x);
            assert_eq!(y.shape(), vec![1, 3, 7]);
            assert_eq!(up.forward(&p, y).shape(), vec![1, 2, 7 * s]);
        }
    }

    #[test]
    fn residual_lstm_keeps_shape() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lstm = ResidualLstm::new(&mut store, "l", 3, 2, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::from_fn(vec![2, 3, 5], |i| i as f64 * 0.01));
        assert_eq!(lstm.forward(&p, x).shape(), vec![2, 3, 5]);
    }
}
