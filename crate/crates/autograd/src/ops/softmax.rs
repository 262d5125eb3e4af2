use crate::{Tensor, Var};

impl<'g> Var<'g> {
    /// Row-wise log-softmax of a `[N, C]` tensor.
    pub fn log_softmax(&self) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "log_softmax expects [N, C]");
        let c = x.shape()[1];
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        self.graph().custom(&[*self], Tensor::new(x.shape(), out), move |ctx| {
            let mut g = Vec::with_capacity(ctx.grad.numel());
            for (gr, yr) in ctx.grad.data().chunks(c).zip(ctx.output.data().chunks(c)) {
                let s: f64 = gr.iter().sum();
                g.extend(gr.iter().zip(yr).map(|(gv, yv)| gv - yv.exp() * s));
            }
            vec![Some(Tensor::new(ctx.grad.shape(), g))]
        })
    }

    /// Picks one column per row: `[N, C] -> [N]`.
    pub fn gather_cols(&self, cols: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2);
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert_eq!(cols.len(), n, "gather_cols: one column per row");
        let data = cols.iter().enumerate().map(|(i, &j)| x.data()[i * c + j]).collect();
        let cols = cols.to_vec();
        self.graph().custom(&[*self], Tensor::new(&[n], data), move |ctx| {
            let mut g = vec![0.0; n * c];
            for (i, &j) in cols.iter().enumerate() {
                g[i * c + j] = ctx.grad.data()[i];
            }
            vec![Some(Tensor::new(&[n, c], g))]
        })
    }

    /// Per-segment mean of rows: `[N, E] -> [S, E]`, where row `i` belongs to
    /// segment `seg[i]`. Every segment must be non-empty.
    pub fn segment_mean(&self, seg: &[usize], segments: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2);
        let (n, e) = (x.shape()[0], x.shape()[1]);
        assert_eq!(seg.len(), n);
        let mut counts = vec![0usize; segments];
        let mut sums = vec![0.0; segments * e];
        for (i, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            for t in 0..e {
                sums[s * e + t] += x.data()[i * e + t];
            }
        }
        assert!(counts.iter().all(|&k| k > 0), "segment_mean: empty segment");
        for s in 0..segments {
            let k = counts[s] as f64;
            sums[s * e..(s + 1) * e].iter_mut().for_each(|v| *v /= k);
        }
        let seg = seg.to_vec();
        self.graph().custom(&[*self], Tensor::new(&[segments, e], sums), move |ctx| {
            let mut g = vec![0.0; n * e];
            for (i, &s) in seg.iter().enumerate() {
                let k = counts[s] as f64;
                for t in 0..e {
                    g[i * e + t] = ctx.grad.data()[s * e + t] / k;
                }
            }
            vec![Some(Tensor::new(&[n, e], g))]
        })
    }
}
