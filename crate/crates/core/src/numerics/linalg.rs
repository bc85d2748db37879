use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::argument("softmax of empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("softmax input contains non-finite values"));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Vector-Jacobian product of softmax: given `p = softmax(z)` and `dp`, returns `dz`.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors stored as columns
/// of a row-major `[n×n]` matrix.
pub fn symmetric_eigen(m: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = square_dim(m)?;
    let mut a = m.data().to_vec();
    let mut v = Tensor::identity(n).into_data();
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i * n + i]).collect();
    Ok((eigenvalues, Tensor::from_parts(vec![n, n], v)))
}

fn square_dim(m: &Tensor) -> Result<usize> {
    if m.shape().len() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(Error::argument(format!("expected square matrix, got {:?}", m.shape())));
    }
    Ok(m.shape()[0])
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Symmetry is checked to `1e-8·max(1, max|M|)`; eigenvalues down to
/// `-1e-10·max(1, ‖M‖_F)` are treated as round-off and clamped to zero.
pub fn psd_sqrt(m: &Tensor) -> Result<Tensor> {
    let n = square_dim(m)?;
    let max_abs = m.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let sym_tol = 1e-8 * max_abs.max(1.0);
    let mut sym = m.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (m.at(i, j), m.at(j, i));
            if (a - b).abs() > sym_tol {
                return Err(Error::numeric(format!(
                    "matrix not symmetric at ({i},{j}): {a} vs {b}"
                )));
            }
            let avg = 0.5 * (a + b);
            sym.data_mut()[i * n + j] = avg;
            sym.data_mut()[j * n + i] = avg;
        }
    }
    let (values, vectors) = symmetric_eigen(&sym)?;
    let neg_tol = -1e-10 * m.frobenius_norm().max(1.0);
    let mut roots = Vec::with_capacity(n);
    for &lambda in &values {
        if lambda < neg_tol {
            return Err(Error::numeric(format!("matrix is indefinite: eigenvalue {lambda}")));
        }
        roots.push(lambda.max(0.0).sqrt());
    }
    // S = V diag(√λ) Vᵀ
    let mut scaled = vectors.clone();
    for i in 0..n {
        for (j, r) in roots.iter().enumerate() {
            scaled.data_mut()[i * n + j] *= r;
        }
    }
    let mut s = scaled.matmul_t(&vectors)?;
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (s.at(i, j) + s.at(j, i));
            s.data_mut()[i * n + j] = avg;
            s.data_mut()[j * n + i] = avg;
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, substream};
    use proptest::prelude::*;

    fn random_psd(n: usize, seed: u64) -> Tensor {
        let mut rng = substream(seed, "psd-test");
        let a = Tensor::new(vec![n, n], gaussian_vec(&mut rng, n * n)).unwrap();
        a.matmul_t(&a).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[4.2, 4.2, 4.2]).unwrap();
        for p in &u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[0.0, 2f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(softmax(&[]), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            x in prop::collection::vec(-1e3f64..1e3, 1..20),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&x).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i = Tensor::identity(4);
        assert!(psd_sqrt(&i).unwrap().max_abs_diff(&i) < 1e-14);
        let s = psd_sqrt(&Tensor::from_diag(&[4.0, 9.0])).unwrap();
        assert!(s.max_abs_diff(&Tensor::from_diag(&[2.0, 3.0])) < 1e-14);
    }

    #[test]
    fn sqrt_reconstructs_random_psd() {
        for (n, seed) in [(1, 1), (2, 2), (5, 3), (16, 4), (32, 5)] {
            let m = random_psd(n, seed);
            let s = psd_sqrt(&m).unwrap();
            let err = s.matmul(&s).unwrap().sub(&m).unwrap().frobenius_norm();
            assert!(err <= 1e-8 * (1.0 + m.frobenius_norm()), "n={n} err={err}");
            assert!(s.max_abs_diff(&s.transpose()) == 0.0);
        }
    }

    #[test]
    fn sqrt_handles_rank_deficient() {
        let mut rng = substream(7, "rank1");
        let v = gaussian_vec(&mut rng, 6);
        let col = Tensor::new(vec![6, 1], v).unwrap();
        let m = col.matmul_t(&col).unwrap();
        let s = psd_sqrt(&m).unwrap();
        let err = s.matmul(&s).unwrap().sub(&m).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * (1.0 + m.frobenius_norm()));
    }

    #[test]
    fn sqrt_rejects_bad_input() {
        let nonsym = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(psd_sqrt(&nonsym), Err(Error::NumericDomain(_))));
        let indefinite = Tensor::from_diag(&[1.0, -1.0]);
        assert!(matches!(psd_sqrt(&indefinite), Err(Error::NumericDomain(_))));
        let tiny_negative = Tensor::from_diag(&[1.0, -1e-12]);
        assert!(psd_sqrt(&tiny_negative).is_ok());
    }

    #[test]
    fn eigen_decomposition_reconstructs() {
        let m = random_psd(8, 11);
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        let mut scaled = vecs.clone();
        for i in 0..8 {
            for j in 0..8 {
                scaled.data_mut()[i * 8 + j] *= vals[j];
            }
        }
        let back = scaled.matmul_t(&vecs).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-10 * (1.0 + m.frobenius_norm()));
    }
}
