use rand_distr::{Distribution, Normal};

use super::*;
use crate::model::{ModelConfig, Relso};
use crate::rng;
use crate::seqdata::{gen_toy_landscape, hamming, ToyLandscape, ToyLandscapeSpec};

/// `h(z) = -|z - c|^2 + w . z`.
struct Quadratic {
    c: Vec<f64>,
    curvature: f64,
    linear: Vec<f64>,
}

impl Quadratic {
    fn bowl(c: Vec<f64>) -> Self {
        let d = c.len();
        Self { c, curvature: 1.0, linear: vec![0.0; d] }
    }

    fn plane(w: Vec<f64>) -> Self {
        let d = w.len();
        Self { c: vec![0.0; d], curvature: 0.0, linear: w }
    }

    fn value(&self, z: &[f64]) -> f64 {
        let q: f64 = z.iter().zip(&self.c).map(|(a, b)| (a - b) * (a - b)).sum();
        -self.curvature * q + z.iter().zip(&self.linear).map(|(a, b)| a * b).sum::<f64>()
    }
}

impl LatentModel for Quadratic {
    fn d_latent(&self) -> usize {
        self.c.len()
    }
    fn predict(&self, z: &[Vec<f64>]) -> crate::Result<Vec<f64>> {
        Ok(z.iter().map(|p| self.value(p)).collect())
    }
    fn value_and_grad(&self, z: &[f64]) -> crate::Result<(f64, Vec<f64>)> {
        let g = z.iter().zip(&self.c).zip(&self.linear).map(|((a, b), w)| -2.0 * self.curvature * (a - b) + w).collect();
        Ok((self.value(z), g))
    }
    fn decode(&self, z: &[Vec<f64>], length: usize) -> crate::Result<Vec<String>> {
        Ok(z.iter().map(|p| if p[0] > 0.0 { "C" } else { "A" }.repeat(length)).collect())
    }
    fn encode(&self, s: &[String]) -> crate::Result<Vec<Vec<f64>>> {
        Ok(vec![vec![0.0; self.c.len()]; s.len()])
    }
}

struct Constant;

impl SequenceModel for Constant {
    fn predict_sequences(&self, s: &[String]) -> crate::Result<Vec<f64>> {
        Ok(vec![1.0; s.len()])
    }
}

#[test]
fn budget_contract() {
    let mut b = Budget::new(5);
    assert!(b.try_spend(3));
    assert!(!b.try_spend(3));
    assert_eq!((b.spent(), b.remaining()), (3, 2));
    assert!(b.try_spend(2));
    assert_eq!(b.remaining(), 0);
}

#[test]
fn gradient_step_follows_update_rule() {
    let m = Quadratic::plane(vec![1.0, 0.0]);
    let cfg = GradientAscentConfig { step_size: 0.1, max_iters: 1, ..Default::default() };
    let t = gradient_ascent(&[0.0, 0.0], &m, &cfg, Budget::new(10), 3, 0).unwrap();
    assert_eq!(t.steps.len(), 2);
    assert_eq!(t.steps[1].z.as_deref(), Some(&[0.1, 0.0][..]));
    assert_eq!(t.stop, StopReason::MaxIterations);
    assert_eq!(t.budget.spent(), 2);
}

#[test]
fn gradient_ascent_converges_on_quadratic() {
    let c = vec![1.5, -0.5, 2.0];
    let m = Quadratic::bowl(c.clone());
    let cfg = GradientAscentConfig { step_size: 0.1, max_iters: 100, tol: 1e-9, cycle: false };
    let t = gradient_ascent(&[0.0; 3], &m, &cfg, Budget::new(1000), 4, 0).unwrap();
    let z = t.last().z.clone().unwrap();
    assert!(z.iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-8), "{z:?}");
    let grads: Vec<f64> = t.steps.iter().map(|s| m.value_and_grad(s.z.as_ref().unwrap()).unwrap().1).map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    assert!(grads.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn gradient_ascent_respects_budget_and_tolerance() {
    let m = Quadratic::bowl(vec![10.0, 10.0]);
    let t = gradient_ascent(&[0.0, 0.0], &m, &GradientAscentConfig::default(), Budget::new(7), 2, 0).unwrap();
    assert_eq!((t.budget.spent(), t.steps.len(), t.stop), (7, 7, StopReason::BudgetExhausted));
    let at_max = gradient_ascent(&[10.0, 10.0], &m, &GradientAscentConfig::default(), Budget::new(7), 2, 0).unwrap();
    assert_eq!((at_max.steps.len(), at_max.stop), (1, StopReason::Converged));
    assert!(gradient_ascent(&[0.0], &m, &GradientAscentConfig { step_size: 0.0, ..Default::default() }, Budget::new(7), 2, 0).is_err());
}

#[test]
fn hill_climb_stops_without_improvers() {
    let m = Quadratic::bowl(vec![0.0, 0.0]);
    let mut r = rng::stream(0, rng::PROPOSALS);
    let t = hill_climb(&[0.0, 0.0], &m, 4, 0.5, Budget::new(60), false, 3, &mut r, 0).unwrap();
    assert_eq!(t.steps.len(), 1);
    assert_eq!(t.last().z.as_deref(), Some(&[0.0, 0.0][..]));
    assert_eq!((t.stop, t.budget.spent()), (StopReason::NoImprovement, 5));
}

#[test]
fn greedy_hill_climb_takes_best_candidate() {
    let m = Quadratic::bowl(vec![3.0]);
    let mut r = rng::stream(1, rng::PROPOSALS);
    let mut replay = r.clone();
    let t = hill_climb(&[0.0], &m, 6, 1.0, Budget::new(7), false, 2, &mut r, 0).unwrap();
    let noise = Normal::new(0.0, 1.0).unwrap();
    let cands: Vec<f64> = (0..6).map(|_| noise.sample(&mut replay)).collect();
    let best = cands.iter().copied().fold(cands[0], |b, c| if m.value(&[c]) > m.value(&[b]) { c } else { b });
    assert_eq!(t.steps[1].z.as_deref(), Some(&[best][..]));
}

#[test]
fn hill_climb_spends_n_candidates_per_iteration() {
    let m = Quadratic::plane(vec![1.0, 1.0]);
    for stochastic in [false, true] {
        let mut r = rng::stream(2, rng::PROPOSALS);
        let t = hill_climb(&[0.0, 0.0], &m, 5, 0.3, Budget::new(60), stochastic, 2, &mut r, 0).unwrap();
        let spent: Vec<usize> = t.steps.iter().map(|s| s.spent).collect();
        assert_eq!(spent[0], 1);
        assert!(spent.windows(2).all(|w| w[1] - w[0] == 5));
        assert!(t.budget.spent() <= 60);
        assert!(t.steps.windows(2).all(|w| w[1].predicted > w[0].predicted));
    }
}

#[test]
fn acceptance_probability_examples() {
    assert_eq!(acceptance_probability(0.5, 1.0), 1.0);
    assert_eq!(acceptance_probability(0.0, 1.0), 1.0);
    assert!((acceptance_probability(-0.3 * 2f64.ln(), 0.3) - 0.5).abs() < 1e-15);
}

#[test]
fn metropolis_frequency_matches_formula() {
    let kt = 0.7;
    for ratio in [-2.0, -(2f64.ln()), 0.0, 1.0] {
        let mut r = rng::stream(9, rng::PROPOSALS);
        let n = 100_000;
        let hits = (0..n).filter(|_| super::latent::metropolis(ratio * kt, kt, &mut r)).count();
        let expected = acceptance_probability(ratio * kt, kt);
        assert!((hits as f64 / n as f64 - expected).abs() < 0.02 * expected.max(0.1), "{ratio}");
    }
}

#[test]
fn mcmc_latent_records_accepted_chain() {
    let m = Quadratic::bowl(vec![1.0, 1.0]);
    let mut r = rng::stream(3, rng::PROPOSALS);
    let t = mcmc_latent(&[0.0, 0.0], &m, 0.2, 0.05, Budget::new(60), 2, &mut r, 0).unwrap();
    assert_eq!(t.budget.spent(), 60);
    assert!(t.steps.len() > 1);
    assert!(mcmc_latent(&[0.0, 0.0], &m, 0.2, 0.0, Budget::new(60), 2, &mut r, 0).is_err());
}

#[test]
fn sequence_mcmc_single_substitutions() {
    let symbols = ['A', 'C', 'D', 'E'];
    let mut r = rng::stream(4, rng::PROPOSALS);
    let t = mcmc_sequence("AAAAAA", &Constant, &symbols, 0.1, Budget::new(60), &mut r, 0).unwrap();
    assert_eq!(t.steps.len(), 60);
    assert!(t.steps.windows(2).all(|w| hamming(&w[0].sequence, &w[1].sequence).unwrap() == 1));
    assert!(mcmc_sequence("AAXA", &Constant, &symbols, 0.1, Budget::new(5), &mut r, 0).is_err());
}

#[test]
fn sequence_mcmc_samples_boltzmann_distribution() {
    let spec = ToyLandscapeSpec { length: 4, alphabet_size: 4, samples: 0, epistatic_pairs: 2, seed: 3, ..Default::default() };
    let land = ToyLandscape::new(&spec).unwrap();
    let all = land.enumerate().unwrap();
    let kt = 1.0;
    let weights: Vec<f64> = all.iter().map(|s| (land.fitness(s).unwrap() / kt).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut r = rng::stream(5, rng::PROPOSALS);
    let n = 400_000;
    let t = mcmc_sequence(&all[0], &land, &land.symbols, kt, Budget::new(n), &mut r, 0).unwrap();
    let mut visits = std::collections::HashMap::new();
    for (i, s) in t.steps.iter().enumerate() {
        let until = t.steps.get(i + 1).map_or(n, |x| x.spent);
        *visits.entry(s.sequence.clone()).or_insert(0usize) += until - s.spent;
    }
    let freq: Vec<f64> = all.iter().map(|s| *visits.get(s).unwrap_or(&0) as f64 / n as f64).collect();
    let tv: f64 = freq.iter().zip(&weights).map(|(f, w)| (f - w / z).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.05, "total variation {tv}");
    let rho = crate::trainer::spearman(&freq, &weights).unwrap();
    assert!(rho > 0.9, "{rho}");
}

#[test]
fn directed_evolution_recovers_separable_optimum() {
    for seed in 0..5 {
        let spec = ToyLandscapeSpec { length: 6, alphabet_size: 5, epistatic_pairs: 0, seed, samples: 100, ..Default::default() };
        let land = ToyLandscape::new(&spec).unwrap();
        let start: String = land.symbols[0].to_string().repeat(6);
        let t = directed_evolution(&start, &land, &land.symbols, None, Budget::new(1000), 0).unwrap();
        let (opt, y) = land.optimum().unwrap();
        assert_eq!(t.last().sequence, opt);
        assert!((t.last().predicted - y).abs() < 1e-12);
        assert_eq!(t.budget.spent(), 30);
    }
}

#[test]
fn directed_evolution_budget_and_ties() {
    let symbols: Vec<char> = crate::seqdata::AMINO_ACIDS.to_vec();
    let t = directed_evolution("KKKKKKKKKK", &Constant, &symbols, None, Budget::new(60), 0).unwrap();
    assert_eq!(t.steps.len(), 3);
    assert_eq!(t.stop, StopReason::PartialPosition);
    assert_eq!(t.last().sequence, "AAAKKKKKKK");

    let order = [2, 0, 1];
    let t = directed_evolution("KKK", &Constant, &symbols, Some(&order), Budget::new(20), 0).unwrap();
    assert_eq!(t.last().sequence, "KKA");
    assert!(directed_evolution("KKK", &Constant, &symbols, Some(&[0, 0, 1]), Budget::new(20), 0).is_err());
}

#[test]
fn directed_evolution_single_position_is_exhaustive() {
    let spec = ToyLandscapeSpec { length: 2, alphabet_size: 6, epistatic_pairs: 1, seed: 2, samples: 0, ..Default::default() };
    let land = ToyLandscape::new(&spec).unwrap();
    let t = directed_evolution("AC", &land, &land.symbols, Some(&[1, 0]), Budget::new(6), 0).unwrap();
    let best = land.symbols.iter().map(|&c| format!("A{c}")).max_by(|a, b| land.fitness(a).unwrap().total_cmp(&land.fitness(b).unwrap())).unwrap();
    assert_eq!(t.last().sequence, best);
}

fn bench_fixture() -> (crate::seqdata::FitnessDataset, ToyLandscape, Relso) {
    let spec = ToyLandscapeSpec { length: 6, alphabet_size: 4, samples: 400, seed: 1, ..Default::default() };
    let (data, land) = gen_toy_landscape(&spec).unwrap();
    let cfg = ModelConfig { d_embed: 16, d_hidden: 16, d_latent: 4, max_len: 6, decoder_channels: 8, fitness_hidden: 8, ..ModelConfig::desk() };
    (data, land, Relso::new(cfg, 0).unwrap())
}

#[test]
fn benchmark_is_deterministic_and_within_budget() {
    let (data, land, model) = bench_fixture();
    let cfg = BenchmarkConfig { n_seeds: 4, budget: 20, ..Default::default() };
    let a = run_benchmark(&data, &model, &Method::ALL, &cfg, Some(&land)).unwrap();
    let b = run_benchmark(&data, &model, &Method::ALL, &cfg, Some(&land)).unwrap();
    assert_eq!(phi_summary_csv(&a).unwrap(), phi_summary_csv(&b).unwrap());
    assert_eq!(benchmark_csv(&a, Some(&land)).unwrap(), benchmark_csv(&b, Some(&land)).unwrap());
    assert_eq!(a.trajectories.len(), 24);
    for t in &a.trajectories {
        assert!(t.budget.spent() <= 20);
        for s in &t.steps {
            assert_eq!(s.sequence.len(), 6);
            assert!(s.sequence.chars().all(|c| land.symbols.contains(&c)));
        }
    }
    let csv = phi_summary_csv(&a).unwrap();
    assert!(csv.starts_with("# schema_version: 1\nmethod,phi_size,"));
    assert_eq!(csv.lines().count(), 8);
    assert!(benchmark_csv(&a, Some(&land)).unwrap().lines().nth(1).unwrap().ends_with(",ground_truth"));
}

#[test]
fn benchmark_seeds_come_from_bottom_quartile() {
    let (data, _, _) = bench_fixture();
    let seeds = held_out_seeds(&data, 10, 0).unwrap();
    let held: Vec<f64> = data.records().iter().filter(|r| r.split != crate::seqdata::Split::Train).map(|r| r.fitness).collect();
    let cut = crate::seqdata::quantile(&held, 0.25);
    assert!(seeds.iter().all(|s| s.fitness <= cut && s.split != crate::seqdata::Split::Train));
    assert!(held_out_seeds(&data, 1000, 0).is_err());
}

#[test]
fn phi_statistics() {
    let (data, land, model) = bench_fixture();
    let cfg = BenchmarkConfig { n_seeds: 3, budget: 12, threshold: Some(f64::NEG_INFINITY), ..Default::default() };
    let r = run_benchmark(&data, &model, &[Method::De, Method::McmcSeq], &cfg, Some(&land)).unwrap();
    for s in &r.summaries {
        assert_eq!(s.size, 3);
        let members: Vec<&String> = r.finals.iter().filter(|f| f.method == s.method).map(|f| &f.sequence).collect();
        let mut total = 0.0;
        for i in 0..3 {
            for j in i + 1..3 {
                total += hamming(members[i], members[j]).unwrap() as f64 / 6.0;
            }
        }
        assert!((s.diversity.unwrap() - total / 3.0).abs() < 1e-12);
        let gt: Vec<f64> = members.iter().map(|m| land.fitness(m).unwrap()).collect();
        assert!((s.gt_mean.unwrap() - gt.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&s.novelty.unwrap()));
    }
    assert!(Method::parse_list("ga,hc,shc,mcmc-latent,mcmc-seq,de").unwrap() == Method::ALL.to_vec());
    assert!(Method::parse("sa").is_err());
}
