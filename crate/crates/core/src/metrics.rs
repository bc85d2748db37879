//! Fréchet and kernel distances between two sets of feature vectors.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::f64file;
use crate::numerics::{dot, psd_sqrt, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Tensor,
    pub n: usize,
}

fn as_matrix(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::argument(format!("{what} must be an n×d matrix, got shape {s:?}"))),
    }
}

/// Sample mean and `1/(n−1)` covariance of the rows of `x`.
pub fn gaussian_stats(x: &Tensor) -> Result<GaussianStats> {
    let (n, d) = as_matrix(x, "features")?;
    if n < 2 {
        return Err(Error::argument(format!("need at least 2 samples for a covariance, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Vec::with_capacity(n * d);
    for i in 0..n {
        centered.extend(x.row(i).iter().zip(&mean).map(|(v, m)| v - m));
    }
    let c = Tensor::new(vec![n, d], centered)?;
    let cov = c.t_matmul(&c)?.scale(1.0 / (n - 1) as f64);
    Ok(GaussianStats { mean, cov, n })
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2·(ΣaΣb)^½)`.
///
/// The trace of the cross term is taken as `Tr((s·Σb·s)^½)` with `s = Σa^½`,
/// which has the same eigenvalues as `(ΣaΣb)^½` but stays symmetric.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::argument(format!("feature dims differ: {} vs {}", a.mean.len(), b.mean.len())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let s = psd_sqrt(&a.cov)?;
    let inner = s.matmul(&b.cov)?.matmul(&s)?;
    let cross = psd_sqrt(&inner)?.trace();
    let value = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if value < -1e-8 {
        return Err(Error::numeric(format!("FID came out negative ({value:e})")));
    }
    Ok(value.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolynomialKernel {
    pub degree: u32,
    pub scale: f64,
    pub offset: f64,
}

impl PolynomialKernel {
    pub fn for_dim(d: usize) -> Self {
        PolynomialKernel { degree: 3, scale: 1.0 / d as f64, offset: 1.0 }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (dot(x, y) * self.scale + self.offset).powi(self.degree as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmdEstimate {
    pub value: f64,
    pub m: usize,
    pub n: usize,
    #[serde(skip)]
    pub kernel: PolynomialKernel,
}

/// Sum of `k(a_i, b_j)` over all pairs (or over `i < j` when `upper` is set),
/// one row per task and summed in row order.
fn kernel_sum(a: &Tensor, b: &Tensor, k: &PolynomialKernel, upper: bool) -> f64 {
    let rows: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let start = if upper { i + 1 } else { 0 };
            (start..b.rows()).map(|j| k.eval(a.row(i), b.row(j))).sum()
        })
        .collect();
    rows.iter().sum()
}

/// Unbiased squared MMD with the cubic polynomial kernel `(xᵀy/d + 1)³`.
pub fn kid(x: &Tensor, y: &Tensor) -> Result<MmdEstimate> {
    let (m, dx) = as_matrix(x, "first feature set")?;
    let (n, dy) = as_matrix(y, "second feature set")?;
    if dx != dy {
        return Err(Error::argument(format!("feature dims differ: {dx} vs {dy}")));
    }
    if m < 2 || n < 2 {
        return Err(Error::argument(format!("KID needs at least 2 samples per set, got {m} and {n}")));
    }
    let k = PolynomialKernel::for_dim(dx);
    let kxx = 2.0 * kernel_sum(x, x, &k, true) / (m * (m - 1)) as f64;
    let kyy = 2.0 * kernel_sum(y, y, &k, true) / (n * (n - 1)) as f64;
    let kxy = kernel_sum(x, y, &k, false) / (m * n) as f64;
    Ok(MmdEstimate { value: kxx + kyy - 2.0 * kxy, m, n, kernel: k })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KidReport {
    pub value: f64,
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricReport {
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kid: Option<KidReport>,
}

impl From<&MmdEstimate> for KidReport {
    fn from(e: &MmdEstimate) -> Self {
        KidReport { value: e.value, m: e.m, n: e.n }
    }
}

/// Loads a feature file; anything with more than two axes is flattened to
/// rows over its last axis.
pub fn load_features(path: &Path) -> Result<Tensor> {
    let t = f64file::read(path)?;
    if t.shape().len() == 2 {
        return Ok(t);
    }
    let d = t.cols();
    let n = t.len() / d;
    t.reshape(vec![n, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, substream};
    use proptest::prelude::*;

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::new(vec![n, d], gaussian_vec(&mut substream(seed, "metrics"), n * d)).unwrap()
    }

    fn stats(mean: Vec<f64>, cov: Tensor) -> GaussianStats {
        GaussianStats { mean, cov, n: 10 }
    }

    /// Double-loop unbiased MMD² with the same kernel.
    fn naive_kid(x: &Tensor, y: &Tensor) -> f64 {
        let (m, n, d) = (x.rows(), y.rows(), x.cols() as f64);
        let k = |a: &[f64], b: &[f64]| {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += a[i] * b[i];
            }
            (s / d + 1.0).powi(3)
        };
        let mut xx = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    xx += k(x.row(i), x.row(j));
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    yy += k(y.row(i), y.row(j));
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..m {
            for j in 0..n {
                xy += k(x.row(i), y.row(j));
            }
        }
        xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64
    }

    #[test]
    fn covariance_examples() {
        let same = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(gaussian_stats(&same).unwrap().cov.data().iter().all(|&v| v == 0.0));
        let s = gaussian_stats(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.cov.data(), &[2.0, 0.0, 0.0, 0.0]);
        assert!(matches!(gaussian_stats(&Tensor::zeros(&[1, 3])), Err(Error::Argument(_))));
    }

    #[test]
    fn stats_ignore_row_order() {
        let x = random(7, 3, 1);
        let mut rows: Vec<Vec<f64>> = (0..7).map(|i| x.row(i).to_vec()).collect();
        rows.reverse();
        let a = gaussian_stats(&x).unwrap();
        let b = gaussian_stats(&Tensor::from_rows(&rows).unwrap()).unwrap();
        assert!(a.cov.max_abs_diff(&b.cov) <= 1e-14);
    }

    #[test]
    fn fid_closed_forms() {
        let one = |m: f64, v: f64| stats(vec![m], Tensor::new(vec![1, 1], vec![v]).unwrap());
        assert!((fid(&one(0.0, 1.0), &one(1.0, 1.0)).unwrap() - 1.0).abs() <= 1e-8);
        assert!((fid(&one(0.0, 1.0), &one(0.0, 4.0)).unwrap() - 1.0).abs() <= 1e-8);
        let a = gaussian_stats(&random(40, 6, 2)).unwrap();
        assert!(fid(&a, &a).unwrap() <= 1e-10);
        let b = stats(vec![0.0; 5], Tensor::identity(5));
        assert!(matches!(fid(&a, &b), Err(Error::Argument(_))));
    }

    #[test]
    fn fid_is_symmetric_and_matches_diagonal_closed_form() {
        let a = gaussian_stats(&random(30, 5, 3)).unwrap();
        let b = gaussian_stats(&random(25, 5, 4).map(|v| 2.0 * v + 0.5)).unwrap();
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() <= 1e-8);
        // commuting diagonal covariances: Σ (σa − σb)²
        let da = [1.0, 4.0, 9.0];
        let db = [4.0, 1.0, 0.25];
        let f = fid(&stats(vec![0.0; 3], Tensor::from_diag(&da)), &stats(vec![1.0, 0.0, 0.0], Tensor::from_diag(&db)))
            .unwrap();
        let want = 1.0 + da.iter().zip(&db).map(|(x, y): (&f64, &f64)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>();
        assert!((f - want).abs() <= 1e-8);
    }

    #[test]
    fn kid_duplicates_and_errors() {
        let dup = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap();
        assert!(kid(&dup, &dup).unwrap().value.abs() <= 1e-12);
        assert!(matches!(kid(&Tensor::zeros(&[1, 3]), &dup), Err(Error::Argument(_))));
        assert!(matches!(kid(&Tensor::zeros(&[2, 2]), &dup), Err(Error::Argument(_))));
    }

    #[test]
    fn kid_concentrates_on_same_distribution() {
        let e = kid(&random(500, 8, 10), &random(500, 8, 11)).unwrap();
        assert!(e.value.abs() <= 0.05, "{}", e.value);
    }

    #[test]
    fn report_shape() {
        let r = MetricReport { fid: None, kid: Some(KidReport { value: 0.0, m: 2, n: 2 }) };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"fid":null,"kid":{"value":0.0,"m":2,"n":2}}"#);
    }

    proptest! {
        #[test]
        fn kid_matches_double_loop(m in 2usize..=20, n in 2usize..=20, d in 1usize..6, seed in 0u64..10_000) {
            let x = random(m, d, seed);
            let y = random(n, d, seed + 1);
            let e = kid(&x, &y).unwrap();
            prop_assert!((e.value - naive_kid(&x, &y)).abs() <= 1e-12);
            prop_assert!((e.value - kid(&y, &x).unwrap().value).abs() <= 1e-12);
        }
    }
}
