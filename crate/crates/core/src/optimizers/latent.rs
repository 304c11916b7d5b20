use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_finite, Budget, LatentModel, StopReason, Trajectory};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientAscentConfig {
    /// Step size in latent units.
    pub step_size: f64,
    /// Maximum number of updates.
    pub max_iters: usize,
    /// Stops once the gradient norm falls below this.
    pub tol: f64,
    /// Re-encodes the argmax decoding after every update.
    pub cycle: bool,
}

impl Default for GradientAscentConfig {
    fn default() -> Self {
        Self { step_size: 0.05, max_iters: 60, tol: 1e-4, cycle: false }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `z <- z + step_size * grad h(z)`. Every evaluated point costs one unit of
/// budget and is recorded; the run ends on convergence, `max_iters` updates,
/// or an exhausted budget.
pub fn gradient_ascent(
    z0: &[f64],
    model: &dyn LatentModel,
    cfg: &GradientAscentConfig,
    budget: Budget,
    length: usize,
    seed_id: usize,
) -> Result<Trajectory> {
    if !(cfg.step_size > 0.0) || cfg.max_iters == 0 || budget.total() == 0 {
        return Err(Error::Config("gradient ascent needs step_size > 0, max_iters >= 1 and a nonzero budget".into()));
    }
    let hp = [
        ("step_size", cfg.step_size),
        ("max_iters", cfg.max_iters as f64),
        ("tol", cfg.tol),
        ("cycle", f64::from(u8::from(cfg.cycle))),
    ];
    let mut t = Trajectory::new("ga", seed_id, &hp, budget);
    let mut z = z0.to_vec();
    let mut updates = 0;
    loop {
        if !t.budget.try_spend(1) {
            t.stop = StopReason::BudgetExhausted;
            break;
        }
        let (y, g) = model.value_and_grad(&z)?;
        check_finite(&g, "latent gradient")?;
        let seq = model.decode(std::slice::from_ref(&z), length)?.remove(0);
        t.record(Some(z.clone()), seq.clone(), y);
        if norm(&g) < cfg.tol {
            t.stop = StopReason::Converged;
            break;
        }
        if updates == cfg.max_iters {
            t.stop = StopReason::MaxIterations;
            break;
        }
        for (zi, gi) in z.iter_mut().zip(&g) {
            *zi += cfg.step_size * gi;
        }
        if cfg.cycle {
            let decoded = model.decode(std::slice::from_ref(&z), length)?;
            z = model.encode(&decoded)?.remove(0);
        }
        updates += 1;
    }
    Ok(t)
}

/// Greedy or stochastic hill climbing with Gaussian latent perturbations.
/// Each iteration spends exactly `n_candidates` evaluations.
#[allow(clippy::too_many_arguments)]
pub fn hill_climb(
    z0: &[f64],
    model: &dyn LatentModel,
    n_candidates: usize,
    step_scale: f64,
    budget: Budget,
    stochastic: bool,
    length: usize,
    rng: &mut Rng,
    seed_id: usize,
) -> Result<Trajectory> {
    if n_candidates == 0 || !(step_scale > 0.0) {
        return Err(Error::Config("hill climbing needs n_candidates >= 1 and step_scale > 0".into()));
    }
    let name = if stochastic { "shc" } else { "hc" };
    let hp = [("n_candidates", n_candidates as f64), ("step_scale", step_scale)];
    let mut t = Trajectory::new(name, seed_id, &hp, budget);
    if !t.budget.try_spend(1) {
        return Err(Error::Config("budget is zero".into()));
    }
    let mut z = z0.to_vec();
    let mut y = model.predict(std::slice::from_ref(&z))?[0];
    t.record(Some(z.clone()), model.decode(std::slice::from_ref(&z), length)?.remove(0), y);
    let noise = Normal::new(0.0, step_scale).expect("positive scale");
    loop {
        if !t.budget.try_spend(n_candidates) {
            t.stop = StopReason::BudgetExhausted;
            break;
        }
        let cands: Vec<Vec<f64>> = (0..n_candidates).map(|_| z.iter().map(|v| v + noise.sample(rng)).collect()).collect();
        let ys = model.predict(&cands)?;
        check_finite(&ys, "hill-climb prediction")?;
        let improvers: Vec<usize> = (0..n_candidates).filter(|&i| ys[i] > y).collect();
        if improvers.is_empty() {
            t.stop = StopReason::NoImprovement;
            break;
        }
        let pick = if stochastic {
            improvers[rng.random_range(0..improvers.len())]
        } else {
            improvers.iter().copied().fold(improvers[0], |b, i| if ys[i] > ys[b] { i } else { b })
        };
        z.clone_from(&cands[pick]);
        y = ys[pick];
        t.record(Some(z.clone()), model.decode(std::slice::from_ref(&z), length)?.remove(0), y);
    }
    Ok(t)
}

/// `min(1, exp(dy / kt))`.
pub fn acceptance_probability(dy: f64, kt: f64) -> f64 {
    if dy >= 0.0 {
        1.0
    } else {
        (dy / kt).exp()
    }
}

pub(super) fn metropolis(dy: f64, kt: f64, rng: &mut Rng) -> bool {
    let p = acceptance_probability(dy, kt);
    p >= 1.0 || rng.random::<f64>() < p
}

/// Metropolis sampling over latent space with Gaussian proposals. Records
/// the starting point and every accepted state.
#[allow(clippy::too_many_arguments)]
pub fn mcmc_latent(
    z0: &[f64],
    model: &dyn LatentModel,
    step_scale: f64,
    kt: f64,
    budget: Budget,
    length: usize,
    rng: &mut Rng,
    seed_id: usize,
) -> Result<Trajectory> {
    if !(kt > 0.0) || !(step_scale > 0.0) {
        return Err(Error::Config("latent MCMC needs kT > 0 and step_scale > 0".into()));
    }
    let mut t = Trajectory::new("mcmc-latent", seed_id, &[("step_scale", step_scale), ("kt", kt)], budget);
    if !t.budget.try_spend(1) {
        return Err(Error::Config("budget is zero".into()));
    }
    let mut z = z0.to_vec();
    let mut y = model.predict(std::slice::from_ref(&z))?[0];
    t.record(Some(z.clone()), model.decode(std::slice::from_ref(&z), length)?.remove(0), y);
    let noise = Normal::new(0.0, step_scale).expect("positive scale");
    while t.budget.try_spend(1) {
        let cand: Vec<f64> = z.iter().map(|v| v + noise.sample(rng)).collect();
        let yc = model.predict(std::slice::from_ref(&cand))?[0];
        check_finite(&[yc], "latent MCMC prediction")?;
        if metropolis(yc - y, kt, rng) {
            z = cand;
            y = yc;
            t.record(Some(z.clone()), model.decode(std::slice::from_ref(&z), length)?.remove(0), y);
        }
    }
    t.stop = StopReason::BudgetExhausted;
    Ok(t)
}
