//! Latent-space and sequence-space optimizers under a shared evaluation budget.

mod benchmark;
mod latent;
mod sequence;
mod surrogate;

use std::collections::BTreeMap;

use serde::Serialize;

pub use benchmark::{
    benchmark_csv, held_out_seeds, phi_summary_csv, run_benchmark, BenchmarkConfig, BenchmarkReport, Method,
    PhiSummary, BENCHMARK_SCHEMA_VERSION,
};
pub use latent::{acceptance_probability, gradient_ascent, hill_climb, mcmc_latent, GradientAscentConfig};
pub use sequence::{directed_evolution, mcmc_sequence};
pub use surrogate::{LatentModel, SequenceModel};

use crate::error::{Error, Result};

/// Fitness-model evaluations allowed for one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Budget {
    total: usize,
    spent: usize,
}

impl Budget {
    pub fn new(total: usize) -> Self {
        Self { total, spent: 0 }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn spent(&self) -> usize {
        self.spent
    }

    pub fn remaining(&self) -> usize {
        self.total - self.spent
    }

    /// Spends `n` evaluations if that many remain; otherwise spends nothing.
    pub fn try_spend(&mut self, n: usize) -> bool {
        if n <= self.remaining() {
            self.spent += n;
            true
        } else {
            false
        }
    }
}

/// One recorded point of an optimization run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryStep {
    /// Latent point, for latent-space methods.
    pub z: Option<Vec<f64>>,
    pub sequence: String,
    pub predicted: f64,
    /// Budget spent when this step was recorded.
    pub spent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub method: String,
    pub seed_id: usize,
    pub hyperparameters: BTreeMap<String, f64>,
    pub steps: Vec<TrajectoryStep>,
    pub budget: Budget,
    /// Why the run stopped.
    pub stop: StopReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    Converged,
    MaxIterations,
    NoImprovement,
    /// Directed evolution ran out of budget part-way through a position.
    PartialPosition,
    Completed,
}

impl Trajectory {
    fn new(method: &str, seed_id: usize, hyperparameters: &[(&str, f64)], budget: Budget) -> Self {
        Self {
            method: method.to_string(),
            seed_id,
            hyperparameters: hyperparameters.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            steps: Vec::new(),
            budget,
            stop: StopReason::Completed,
        }
    }

    fn record(&mut self, z: Option<Vec<f64>>, sequence: String, predicted: f64) {
        self.steps.push(TrajectoryStep { z, sequence, predicted, spent: self.budget.spent() });
    }

    pub fn last(&self) -> &TrajectoryStep {
        self.steps.last().expect("trajectories record their starting point")
    }
}

fn check_finite(v: &[f64], op: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[cfg(test)]
mod tests;
