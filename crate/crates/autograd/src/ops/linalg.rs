use crate::{Tensor, Var};

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows x cols` matrix.
    pub fn rm(cols: usize) -> Self {
        Self { rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn rm_t(cols: usize) -> Self {
        Self { rs: 1, cs: cols as isize }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index reachable through the given
    // strides for row-major or transposed-row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

impl<'g> Var<'g> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-D");
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D");
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(b.shape()[0], k, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), Layout::rm(k), b.data(), Layout::rm(n), 0.0, &mut out, Layout::rm(n));
        self.graph().custom(&[*self, *other], Tensor::new(&[m, n], out), move |ctx| {
            let g = ctx.grad.data();
            let ga = ctx.needs(0).then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, 1.0, g, Layout::rm(n), ctx.input(1).data(), Layout::rm_t(n), 0.0, &mut d, Layout::rm(k));
                Tensor::new(&[m, k], d)
            });
            let gb = ctx.needs(1).then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, 1.0, ctx.input(0).data(), Layout::rm_t(k), g, Layout::rm(n), 0.0, &mut d, Layout::rm(n));
                Tensor::new(&[k, n], d)
            });
            vec![ga, gb]
        })
    }

    /// Pairwise squared Euclidean distances: `[Q, E] x [C, E] -> [Q, C]`.
    pub fn sqdist(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ndim(), 2);
        assert_eq!(b.ndim(), 2);
        let (q, e, c) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        assert_eq!(b.shape()[1], e, "sqdist: embedding width mismatch");
        let mut out = vec![0.0; q * c];
        for i in 0..q {
            let ai = &a.data()[i * e..(i + 1) * e];
            for j in 0..c {
                let bj = &b.data()[j * e..(j + 1) * e];
                out[i * c + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        self.graph().custom(&[*self, *other], Tensor::new(&[q, c], out), move |ctx| {
            let (a, b, g) = (ctx.input(0).data(), ctx.input(1).data(), ctx.grad.data());
            let mut ga = ctx.needs(0).then(|| vec![0.0; q * e]);
            let mut gb = ctx.needs(1).then(|| vec![0.0; c * e]);
            for i in 0..q {
                for j in 0..c {
                    let w = 2.0 * g[i * c + j];
                    if w == 0.0 {
                        continue;
                    }
                    for t in 0..e {
                        let d = w * (a[i * e + t] - b[j * e + t]);
                        if let Some(ga) = ga.as_mut() {
                            ga[i * e + t] += d;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j * e + t] -= d;
                        }
                    }
                }
            }
            vec![ga.map(|d| Tensor::new(&[q, e], d)), gb.map(|d| Tensor::new(&[c, e], d))]
        })
    }
}
