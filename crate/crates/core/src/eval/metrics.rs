use fbnet_autograd::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::recognition::{predict, PrototypeSet};

/// Fraction of queries whose nearest prototype (ties to the lowest
/// category id) is their label.
pub fn top1_accuracy(embeddings: &Tensor, labels: &[usize], prototypes: &PrototypeSet) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let pred = predict(embeddings, prototypes);
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

fn moments(x: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean().transpose();
    let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix, negative
/// eigenvalues clipped to zero.
fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits (unbiased covariance) of two
/// feature sets: `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// `Tr((S1 S2)^(1/2))` is evaluated as `Tr((S1^(1/2) S2 S1^(1/2))^(1/2))`,
/// which has the same eigenvalues and stays symmetric.
pub fn fid(real: &Tensor, fake: &Tensor) -> Result<f64> {
    if real.ndim() != 2 || fake.ndim() != 2 || real.shape()[1] != fake.shape()[1] {
        return Err(Error::Shape(format!("feature sets {:?} and {:?} are not comparable", real.shape(), fake.shape())));
    }
    if real.shape()[0] < 2 || fake.shape()[0] < 2 {
        return Err(Error::Data("need at least 2 samples per side".into()));
    }
    let (m1, s1) = moments(real);
    let (m2, s2) = moments(fake);
    let r1 = sqrtm_psd(&s1);
    let cross = sqrtm_psd(&(&r1 * &s2 * &r1));
    let d = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// `exp(E_x KL(p(y|x) || p(y)))` per split, reported as `(mean, std)` over
/// `n_splits` contiguous splits (population standard deviation).
pub fn inception_score(probs: &Tensor, n_splits: usize) -> Result<(f64, f64)> {
    if probs.ndim() != 2 {
        return Err(Error::Shape(format!("expected [N, C] probabilities, got {:?}", probs.shape())));
    }
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    if n_splits == 0 || n < n_splits {
        return Err(Error::Data(format!("cannot split {n} rows into {n_splits} splits")));
    }
    for i in 0..n {
        let row = &probs.data()[i * c..(i + 1) * c];
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("row {i} is not a probability vector")));
        }
    }
    let scores: Vec<f64> = (0..n_splits)
        .map(|k| {
            let (a, b) = (k * n / n_splits, (k + 1) * n / n_splits);
            let rows = &probs.data()[a * c..b * c];
            let mut marginal = vec![0.0; c];
            for row in rows.chunks(c) {
                marginal.iter_mut().zip(row).for_each(|(m, p)| *m += p);
            }
            marginal.iter_mut().for_each(|m| *m /= (b - a) as f64);
            let kl: f64 = rows
                .chunks(c)
                .map(|row| row.iter().zip(&marginal).filter(|(p, _)| **p > 0.0).map(|(p, m)| p * (p / m).ln()).sum::<f64>())
                .sum::<f64>()
                / (b - a) as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n_splits as f64;
    Ok((mean, var.sqrt()))
}
