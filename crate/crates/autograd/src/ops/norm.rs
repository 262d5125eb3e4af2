use crate::{Tensor, Var};

impl<'g> Var<'g> {
    /// Normalizes every (instance, channel) slice of `[N, C, ..]` to zero mean
    /// and unit variance. Variance is the biased spatial estimate plus `eps`.
    pub fn instance_norm(&self, eps: f64) -> Var<'g> {
        let x = self.value();
        assert!(x.ndim() >= 3, "instance_norm expects [N, C, spatial..]");
        let s: usize = x.shape()[2..].iter().product();
        let groups = x.numel() / s;
        let mut out = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(groups);
        for row in x.data().chunks(s) {
            let mean = row.iter().sum::<f64>() / s as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            out.extend(row.iter().map(|v| (v - mean) * r));
        }
        self.graph().custom(&[*self], Tensor::new(x.shape(), out), move |ctx| {
            let mut g = Vec::with_capacity(ctx.grad.numel());
            for ((gr, yr), r) in ctx.grad.data().chunks(s).zip(ctx.output.data().chunks(s)).zip(&inv_std) {
                let mg = gr.iter().sum::<f64>() / s as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / s as f64;
                g.extend(gr.iter().zip(yr).map(|(gv, yv)| r * (gv - mg - yv * mgy)));
            }
            vec![Some(Tensor::new(ctx.grad.shape(), g))]
        })
    }

    /// `x * gamma + beta` with per-(instance, channel) `gamma`, `beta` of
    /// shape `[N, C]` broadcast over the spatial axes of `[N, C, ..]`.
    pub fn channel_affine(&self, gamma: &Var<'g>, beta: &Var<'g>) -> Var<'g> {
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let nc = x.shape()[0] * x.shape()[1];
        assert_eq!(gm.shape(), &x.shape()[..2], "channel_affine: gamma shape");
        assert_eq!(bt.shape(), &x.shape()[..2], "channel_affine: beta shape");
        let s = x.numel() / nc;
        let mut out = Vec::with_capacity(x.numel());
        for (k, row) in x.data().chunks(s).enumerate() {
            let (a, b) = (gm.data()[k], bt.data()[k]);
            out.extend(row.iter().map(|v| v * a + b));
        }
        self.graph().custom(&[*self, *gamma, *beta], Tensor::new(x.shape(), out), move |ctx| {
            let (x, gm, g) = (ctx.input(0), ctx.input(1), ctx.grad);
            let dx = ctx.needs(0).then(|| {
                let mut d = Vec::with_capacity(g.numel());
                for (k, row) in g.data().chunks(s).enumerate() {
                    let a = gm.data()[k];
                    d.extend(row.iter().map(|v| v * a));
                }
                Tensor::new(x.shape(), d)
            });
            let dg = ctx.needs(1).then(|| {
                let d = g
                    .data()
                    .chunks(s)
                    .zip(x.data().chunks(s))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::new(gm.shape(), d)
            });
            let db = ctx.needs(2).then(|| {
                Tensor::new(gm.shape(), g.data().chunks(s).map(|r| r.iter().sum()).collect())
            });
            vec![dx, dg, db]
        })
    }
}
