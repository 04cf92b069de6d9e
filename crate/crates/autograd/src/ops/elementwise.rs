use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = x.map(f);
        let y_rc = std::rc::Rc::new(y.clone());
        self.graph.op(y, &[self], move || {
            move |g: &Tensor, _: &[bool]| {
                let mut out = g.clone();
                for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(y_rc.data()) {
                    *o *= df(xv, yv);
                }
                vec![Some(out)]
            }
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let y = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.op(y, &[self, other], || {
            |g: &Tensor, need: &[bool]| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.clone()),
                ]
            }
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let y = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.op(y, &[self, other], || {
            |g: &Tensor, need: &[bool]| {
                vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))]
            }
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let y = a.zip_map(&b, |x, y| x * y);
        self.graph.op(y, &[self, other], move || {
            move |g: &Tensor, need: &[bool]| {
                vec![
                    need[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                    need[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
                ]
            }
        })
    }

    /// Product with a one-element var (broadcast over `self`).
    pub fn mul_scalar_var(self, s: Var<'g>) -> Var<'g> {
        let a = self.value();
        let sv = s.item();
        let sshape = s.shape();
        let y = a.map(|v| v * sv);
        self.graph.op(y, &[self, s], move || {
            move |g: &Tensor, need: &[bool]| {
                vec![
                    need[0].then(|| g.map(|gv| gv * sv)),
                    need[1].then(|| {
                        let d: f64 = g.data().iter().zip(a.data()).map(|(gv, av)| gv * av).sum();
                        Tensor::new(sshape.clone(), vec![d])
                    }),
                ]
            }
        })
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let y = self.value().map(|v| v * c);
        self.graph.op(y, &[self], move || {
            move |g: &Tensor, _: &[bool]| vec![Some(g.map(|v| v * c))]
        })
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let y = self.value().map(|v| v + c);
        self.graph
            .op(y, &[self], || |g: &Tensor, _: &[bool]| vec![Some(g.clone())])
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary(
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// ELU with alpha 1.
    pub fn elu(self) -> Var<'g> {
        self.unary(
            |v| if v > 0.0 { v } else { v.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
