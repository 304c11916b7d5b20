use crate::error::{Error, Result};

const MAX_ITERS: usize = 100_000;
const TOL: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, first nonzero loading positive.
    pub components: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalues of the kept components.
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// `[N][n_components]`
    pub coords: Vec<Vec<f64>>,
}

impl Pca {
    /// Mean squared distance between each point and its reconstruction.
    pub fn reconstruction_error(&self, points: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (p, c) in points.iter().zip(&self.coords) {
            let mut r = self.mean.clone();
            for (comp, &s) in self.components.iter().zip(c) {
                for (ri, v) in r.iter_mut().zip(comp) {
                    *ri += s * v;
                }
            }
            total += p.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        total / points.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// A unit vector orthogonal to `basis`, from Gram-Schmidt over the standard basis.
fn orthogonal_complement(basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    for e in 0..d {
        let mut v = vec![0.0; d];
        v[e] = 1.0;
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if normalize(&mut v) > 1e-6 {
            return v;
        }
    }
    unreachable!("fewer components than dimensions")
}

/// Leading eigenpair of a symmetric PSD matrix by power iteration.
fn leading_eigen(c: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let start = (0..c.len()).max_by(|&a, &b| c[a][a].total_cmp(&c[b][b])).unwrap_or(0);
    let mut v = c[start].clone();
    if normalize(&mut v) == 0.0 {
        return (0.0, v);
    }
    for _ in 0..MAX_ITERS {
        let mut w = mat_vec(c, &v);
        if normalize(&mut w) == 0.0 {
            return (0.0, w);
        }
        let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if diff < TOL {
            break;
        }
    }
    (dot(&v, &mat_vec(c, &v)), v)
}

/// Mean-centred projection onto the top principal directions, found by power
/// iteration on the sample covariance with deflation.
pub fn pca_project(points: &[Vec<f64>], n_components: usize) -> Result<Pca> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n_components == 0 || n < n_components.max(2) || d < n_components {
        return Err(Error::Config(format!(
            "pca needs N >= max(2, n_components) and dim >= n_components (N = {n}, dim = {d}, n_components = {n_components})"
        )));
    }
    if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data("pca points must be finite and share one dimension".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += p[i] * p[j];
            }
        }
    }
    cov.iter_mut().flatten().for_each(|v| *v /= (n - 1) as f64);
    let total: f64 = (0..d).map(|i| cov[i][i]).sum();
    if !(total > 0.0) {
        return Err(Error::Data("pca input has zero variance".into()));
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(n_components);
    let mut variance = Vec::with_capacity(n_components);
    let mut deflated = cov.clone();
    for _ in 0..n_components {
        let (mut lambda, mut v) = leading_eigen(&deflated);
        if lambda <= total * 1e-14 {
            lambda = 0.0;
            v = orthogonal_complement(&components, d);
        }
        if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for i in 0..d {
            for j in 0..d {
                deflated[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        variance.push(lambda);
    }
    let coords = centred.iter().map(|p| components.iter().map(|c| dot(p, c)).collect()).collect();
    let explained_ratio = variance.iter().map(|v| v / total).collect();
    Ok(Pca { mean, components, explained_variance: variance, explained_ratio, coords })
}
