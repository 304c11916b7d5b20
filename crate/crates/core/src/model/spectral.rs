//! Spectral-norm estimation by power iteration.

use super::network::{Relso, SPECTRAL_WEIGHTS};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::Result;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// One power-iteration step on `w: [m, n]`: `v <- W^T u / |.|`, `u <- W v / |.|`.
/// Returns `u^T W v`.
pub fn power_step(w: &Tensor, u: &mut [f64], v: &mut [f64]) -> f64 {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let d = w.data();
    for (j, vj) in v.iter_mut().enumerate() {
        *vj = (0..m).map(|i| d[i * n + j] * u[i]).sum();
    }
    normalize(v);
    for (i, ui) in u.iter_mut().enumerate() {
        *ui = (0..n).map(|j| d[i * n + j] * v[j]).sum();
    }
    normalize(u);
    (0..m).map(|i| u[i] * (0..n).map(|j| d[i * n + j] * v[j]).sum::<f64>()).sum()
}

/// Largest singular value estimate after `iters` power-iteration steps from a
/// fixed all-ones start.
pub fn spectral_norm(w: &Tensor, iters: usize) -> f64 {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut u = vec![1.0 / (m as f64).sqrt(); m];
    let mut v = vec![0.0; n];
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        sigma = power_step(w, &mut u, &mut v);
    }
    sigma
}

impl Relso {
    /// Advances the persistent power-iteration vectors of every penalized
    /// fitness-head matrix by one step.
    pub fn update_spectral_vectors(&mut self) -> Result<()> {
        for name in SPECTRAL_WEIGHTS {
            let w = self.params.get(name)?.clone();
            let mut u = self.params.buffer(&format!("{name}.u"))?.data().to_vec();
            let mut v = self.params.buffer(&format!("{name}.v"))?.data().to_vec();
            power_step(&w, &mut u, &mut v);
            self.params.set_buffer(&format!("{name}.u"), Tensor::vector(&u))?;
            self.params.set_buffer(&format!("{name}.v"), Tensor::vector(&v))?;
        }
        Ok(())
    }

    /// `sum_W (u^T W v)^2` over the penalized matrices, with `u`, `v` held constant.
    pub fn spectral_penalty_graph(&self, g: &mut Graph) -> Result<Var> {
        let mut total: Option<Var> = None;
        for name in SPECTRAL_WEIGHTS {
            let w = g.param(&self.params, name)?;
            let u = self.params.buffer(&format!("{name}.u"))?;
            let v = self.params.buffer(&format!("{name}.v"))?;
            let u = g.constant(u.clone().reshape(&[1, u.len()])?);
            let v = g.constant(v.clone().reshape(&[v.len(), 1])?);
            let uw = g.matmul(u, w)?;
            let sigma = g.matmul(uw, v)?;
            let sq = g.mul(sigma, sigma)?;
            let sq = g.reshape(sq, &[1])?;
            total = Some(match total {
                Some(t) => g.add(t, sq)?,
                None => sq,
            });
        }
        Ok(total.expect("at least one penalized matrix"))
    }
}
