use rand::Rng as _;

use super::*;
use crate::seqdata::{gen_toy_landscape, ToyLandscapeSpec};

fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| {
                let below = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn spearman_examples() {
    let a: Vec<f64> = (0..10).map(f64::from).collect();
    let rev: Vec<f64> = a.iter().rev().copied().collect();
    assert_eq!(spearman(&a, &a).unwrap(), 1.0);
    assert_eq!(spearman(&a, &rev).unwrap(), -1.0);
    assert_eq!(spearman(&[2.0; 10], &a).unwrap(), 0.0);
    assert!(spearman(&[1.0], &[1.0]).is_err());
    assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn spearman_matches_brute_force() {
    let mut r = rng::stream(3, "test");
    for trial in 0..50 {
        let a: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = if trial % 2 == 0 {
            (0..20).map(|_| r.random_range(-1.0..1.0)).collect()
        } else {
            (0..20).map(|_| f64::from(r.random_range(0..5))).collect()
        };
        assert!((spearman(&a, &b).unwrap() - brute_spearman(&a, &b)).abs() < 1e-12);
    }
}

fn toy(samples: usize, seed: u64) -> FitnessDataset {
    let spec = ToyLandscapeSpec { length: 6, alphabet_size: 4, samples, seed, ..Default::default() };
    gen_toy_landscape(&spec).unwrap().0
}

fn small_model(max_len: usize) -> ModelConfig {
    ModelConfig { d_embed: 16, d_hidden: 32, d_latent: 4, max_len, decoder_channels: 16, fitness_hidden: 16, neg_samples: 8, ..ModelConfig::desk() }
}

fn quick(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { steps, batch_size: 8, lr: 2e-3, seed, eval_every: steps / 2, ..Default::default() }
}

#[test]
fn config_validation() {
    let m = small_model(6);
    assert!(TrainConfig { steps: 0, ..quick(10, 0) }.validate(&m).is_err());
    assert!(TrainConfig { batch_size: 1, ..quick(10, 0) }.validate(&m).is_err());
    assert!(TrainConfig { lr: 0.0, ..quick(10, 0) }.validate(&m).is_err());
    let p = TrainConfig::paper();
    assert_eq!((p.steps, p.batch_size, p.lr), (300_000, 64, 2e-5));
}

#[test]
fn same_seed_reproduces_run() {
    let data = toy(64, 1);
    let a = train(&data, &small_model(6), &quick(20, 5)).unwrap();
    let b = train(&data, &small_model(6), &quick(20, 5)).unwrap();
    let c = train(&data, &small_model(6), &quick(20, 6)).unwrap();
    assert_eq!(a.checkpoint.model.params.fingerprint(), b.checkpoint.model.params.fingerprint());
    assert_eq!(metric_log_csv(&a.log).unwrap(), metric_log_csv(&b.log).unwrap());
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_ne!(a.checkpoint.model.params.fingerprint(), c.checkpoint.model.params.fingerprint());
}

#[test]
fn metric_log_layout() {
    let data = toy(64, 1);
    let out = train(&data, &small_model(6), &quick(4, 0)).unwrap();
    let text = metric_log_csv(&out.log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# schema_version: 1");
    assert!(lines[1].starts_with("step,recon,fitness,neg_sampling,interp,latent_norm,spectral,total,grad_norm,val_"));
    assert_eq!(lines.len(), 6);
    assert!(lines[2].ends_with(",,,,"));
    assert!(!lines[5].ends_with(",,,,"));
}

#[test]
fn loss_decreases_for_every_preset() {
    let data = toy(128, 2);
    for preset in Preset::ALL {
        let cfg = TrainConfig { preset: Some(preset), ..quick(300, 3) };
        let out = train(&data, &small_model(6), &cfg).unwrap();
        let median = |rows: &[LogRow]| {
            let mut v: Vec<f64> = rows.iter().map(|r| r.loss.total).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let (head, tail) = (median(&out.log[..100]), median(&out.log[out.log.len() - 100..]));
        assert!(head > tail, "{preset:?}: {head} vs {tail}");
    }
}

#[test]
fn fitness_head_frozen_without_fitness_task() {
    let data = toy(64, 2);
    let cfg = TrainConfig { preset: Some(Preset::Ae), ..quick(30, 3) };
    let out = train(&data, &small_model(6), &cfg).unwrap();
    let fresh = Relso::new(out.checkpoint.model.config.clone(), 3).unwrap();
    for name in ["head.w1", "head.b1", "head.w2", "head.b2", "head.w1.u", "head.w2.v"] {
        let get = |m: &Relso| m.params.get(name).or_else(|_| m.params.buffer(name)).unwrap().clone();
        assert_eq!(get(&out.checkpoint.model), get(&fresh), "{name}");
    }
    assert!(out.log.iter().all(|r| r.loss.fitness == 0.0 && r.loss.neg_sampling == 0.0));
}

#[test]
fn validation_does_not_mutate() {
    let data = toy(64, 2);
    let model = Relso::new(small_model(6), 1).unwrap();
    let before = model.params.fingerprint();
    let m = validate(&model, &data.split(Split::Val)).unwrap();
    assert_eq!(model.params.fingerprint(), before);
    assert!((0.0..=1.0).contains(&m.accuracy) && m.perplexity >= 1.0 && (-1.0..=1.0).contains(&m.spearman));
    assert!(validate(&model, &[]).is_err());
}

#[test]
fn overfits_memorized_sequences() {
    let seqs = ["ACDEFG", "KLMNPQ", "RSTVWY", "GFEDCA", "WWYYAA", "MKKLLP", "CCCAAA", "TVTVTV"];
    let rows = seqs.iter().enumerate().map(|(i, s)| (s.to_string(), i as f64, Some(Split::Train))).collect();
    let data = FitnessDataset::from_rows("mem", rows, None, 0).unwrap();
    let cfg = TrainConfig { preset: Some(Preset::Ae), steps: 600, batch_size: 8, lr: 3e-3, seed: 0, ..Default::default() };
    let out = train(&data, &ModelConfig { max_len: 6, ..ModelConfig::desk() }, &cfg).unwrap();
    let m = out.log.last().unwrap().val.unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert!(m.perplexity < 1.05, "{}", m.perplexity);
    let model = &out.checkpoint.model;
    let enc: Vec<_> = data.records().iter().map(|r| &r.encoded).collect();
    let z = model.encode_z(&enc).unwrap();
    assert_eq!(model.decode_sequences(&z, 6).unwrap(), seqs.to_vec());
}

#[test]
fn data_and_numeric_errors() {
    let data = toy(64, 2);
    assert!(matches!(train(&data, &small_model(8), &quick(2, 0)), Err(Error::Config(_))));
    let rows = vec![("ACD".to_string(), 1.0, Some(Split::Val)), ("ACE".to_string(), 2.0, Some(Split::Test))];
    let no_train = FitnessDataset::from_rows("x", rows, None, 0).unwrap();
    assert!(matches!(train(&no_train, &small_model(3), &quick(2, 0)), Err(Error::Data(_))));
    let rows = vec![("ACD".to_string(), 1e200, Some(Split::Train)), ("ACE".to_string(), -1e200, Some(Split::Train))];
    let huge = FitnessDataset::from_rows("x", rows, None, 0).unwrap();
    assert!(matches!(train(&huge, &small_model(3), &quick(2, 0)), Err(Error::NonFiniteLoss { step: 1 })));
}
