use crate::{Tensor, Var};

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary<F, D>(&self, f: F, df: D) -> Var<'g>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let y = x.map(f);
        self.graph().custom(&[*self], y, move |ctx| {
            let x = ctx.input(0).data();
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let data = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
            vec![Some(Tensor::new(ctx.grad.shape(), data))]
        })
    }

    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph().custom(&[*self, *other], v, |ctx| {
            vec![
                ctx.needs(0).then(|| ctx.grad.clone()),
                ctx.needs(1).then(|| ctx.grad.clone()),
            ]
        })
    }

    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph().custom(&[*self, *other], v, |ctx| {
            vec![
                ctx.needs(0).then(|| ctx.grad.clone()),
                ctx.needs(1).then(|| ctx.grad.scale(-1.0)),
            ]
        })
    }

    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.graph().custom(&[*self, *other], v, |ctx| {
            vec![
                ctx.needs(0).then(|| ctx.grad.zip_map(ctx.input(1), |g, b| g * b)),
                ctx.needs(1).then(|| ctx.grad.zip_map(ctx.input(0), |g, a| g * a)),
            ]
        })
    }

    pub fn add_scalar(&self, k: f64) -> Var<'g> {
        self.unary(|x| x + k, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, k: f64) -> Var<'g> {
        self.unary(|x| x * k, move |_, _| k)
    }

    pub fn neg(&self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    /// `log(1 + e^x)`, overflow-safe.
    pub fn softplus(&self) -> Var<'g> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Adds `bias` (shape `[F]`) to every row of a `[.., F]` tensor.
    pub fn add_row(&self, bias: &Var<'g>) -> Var<'g> {
        let x = self.value();
        let b = bias.value();
        let f = b.numel();
        assert_eq!(x.shape().last().copied(), Some(f), "add_row: bias length mismatch");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(f) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.graph().custom(&[*self, *bias], out, move |ctx| {
            let gb = ctx.needs(1).then(|| {
                let mut acc = vec![0.0; f];
                for row in ctx.grad.data().chunks(f) {
                    for (a, g) in acc.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                Tensor::new(&[f], acc)
            });
            vec![ctx.needs(0).then(|| ctx.grad.clone()), gb]
        })
    }
}
