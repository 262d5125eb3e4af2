use crate::{Tensor, Var};

impl<'g> Var<'g> {
    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.graph()
            .custom(&[*self], out, move |ctx| vec![Some(ctx.grad.clone().reshape(&in_shape))])
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        self.graph().custom(&[*self], Tensor::scalar(s), |ctx| {
            let shape = ctx.input(0).shape();
            vec![Some(Tensor::full(shape, ctx.grad.item()))]
        })
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums the trailing axis: `[.., F] -> [..]`.
    pub fn sum_last(&self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape();
        let f = *shape.last().expect("sum_last on a scalar");
        let out_shape = &shape[..shape.len() - 1];
        let data = x.data().chunks(f).map(|r| r.iter().sum()).collect();
        self.graph().custom(&[*self], Tensor::new(out_shape, data), move |ctx| {
            let mut g = Vec::with_capacity(ctx.grad.numel() * f);
            for &v in ctx.grad.data() {
                g.extend(std::iter::repeat_n(v, f));
            }
            vec![Some(Tensor::new(ctx.input(0).shape(), g))]
        })
    }

    /// Concatenates `[N, A]` and `[N, B]` into `[N, A + B]`.
    pub fn concat_cols(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ndim(), 2);
        assert_eq!(b.ndim(), 2);
        let (n, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(b.shape()[0], n, "concat_cols: row mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
        }
        self.graph().custom(&[*self, *other], Tensor::new(&[n, ca + cb], data), move |ctx| {
            let g = ctx.grad.data();
            let ga = ctx.needs(0).then(|| {
                let d = (0..n).flat_map(|i| g[i * (ca + cb)..i * (ca + cb) + ca].iter().copied()).collect();
                Tensor::new(&[n, ca], d)
            });
            let gb = ctx.needs(1).then(|| {
                let d = (0..n).flat_map(|i| g[i * (ca + cb) + ca..(i + 1) * (ca + cb)].iter().copied()).collect();
                Tensor::new(&[n, cb], d)
            });
            vec![ga, gb]
        })
    }

    /// Columns `[start, end)` of a `[N, C]` tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2);
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert!(start <= end && end <= c);
        let w = end - start;
        let data = (0..n).flat_map(|i| x.data()[i * c + start..i * c + end].iter().copied()).collect();
        self.graph().custom(&[*self], Tensor::new(&[n, w], data), move |ctx| {
            let mut g = vec![0.0; n * c];
            for i in 0..n {
                g[i * c + start..i * c + end].copy_from_slice(&ctx.grad.data()[i * w..(i + 1) * w]);
            }
            vec![Some(Tensor::new(&[n, c], g))]
        })
    }

    /// Gathers entries of the leading axis (repeats allowed).
    pub fn select_outer(&self, idx: &[usize]) -> Var<'g> {
        let x = self.value();
        let out = x.select_outer(idx);
        let idx = idx.to_vec();
        self.graph().custom(&[*self], out, move |ctx| {
            let shape = ctx.input(0).shape();
            let inner: usize = shape[1..].iter().product();
            let mut g = Tensor::zeros(shape);
            let gd = g.data_mut();
            for (k, &i) in idx.iter().enumerate() {
                for (a, b) in gd[i * inner..(i + 1) * inner].iter_mut().zip(&ctx.grad.data()[k * inner..(k + 1) * inner]) {
                    *a += b;
                }
            }
            vec![Some(g)]
        })
    }

    /// Repeats a leading-axis-1 tensor `n` times: `[1, ..] -> [n, ..]`.
    pub fn expand_outer(&self, n: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape()[0], 1, "expand_outer needs a leading axis of 1");
        self.select_outer(&vec![0; n])
    }

    /// Concatenates along the leading axis.
    pub fn stack_outer(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::stack_outer(&refs);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        parts[0].graph().custom(parts, out, move |ctx| {
            let mut start = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let g = ctx.needs(i).then(|| ctx.grad.slice_outer(start, start + s));
                    start += s;
                    g
                })
                .collect()
        })
    }
}
