use rand::Rng as _;

use super::*;
use crate::diffcore::{Graph, Tensor};
use crate::rng;
use crate::seqdata::{Alphabet, EncodedSequence, PAD};

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_embed: 8,
        d_hidden: 8,
        d_latent: 4,
        max_len: 6,
        decoder_channels: 4,
        fitness_hidden: 5,
        ..ModelConfig::desk()
    }
}

fn enc(s: &str, max_len: usize) -> EncodedSequence {
    Alphabet::protein().encode(s, max_len, 1).unwrap()
}

#[test]
fn pooling_and_attention_are_distributions() {
    let m = Relso::new(tiny_config(), 3).unwrap();
    let seqs = [enc("ACD", 6), enc("WYVKLM", 6), enc("G", 6)];
    let out = m.encode(&seqs.iter().collect::<Vec<_>>()).unwrap();
    for (s, o) in seqs.iter().zip(&out) {
        let total: f64 = o.pooling.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        for (p, &w) in o.pooling.iter().enumerate() {
            assert!(w >= 0.0);
            if p >= s.length {
                assert_eq!(w, 0.0);
            }
        }
        for row in o.attention.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row[s.length..].iter().all(|&w| w == 0.0));
        }
    }
    assert_eq!(out[2].pooling[0], 1.0);
}

#[test]
fn pad_tail_content_does_not_change_z() {
    let m = Relso::new(tiny_config(), 5).unwrap();
    let mut r = rng::stream(11, "test");
    for _ in 0..10 {
        let base = enc("KLMN", 6);
        let mut noisy = base.clone();
        for t in &mut noisy.tokens[4..] {
            *t = r.random_range(0..22);
        }
        let a = m.encode_z(&[&base]).unwrap();
        let b = m.encode_z(&[&noisy]).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn swapping_tokens_changes_z() {
    let m = Relso::new(tiny_config(), 5).unwrap();
    let a = m.encode_z(&[&enc("ACDEF", 6)]).unwrap();
    let b = m.encode_z(&[&enc("CADEF", 6)]).unwrap();
    assert_ne!(a, b);
}

#[test]
fn encode_rejects_bad_tokens() {
    let m = Relso::new(tiny_config(), 0).unwrap();
    let bad = EncodedSequence { tokens: vec![1, 40, PAD, PAD, PAD, PAD], length: 2 };
    assert!(m.encode(&[&bad]).is_err());
    assert!(m.encode(&[]).is_err());
    assert!(m.encode(&[&enc("AC", 4)]).is_err());
}

#[test]
fn decode_is_deterministic_in_eval_mode() {
    let m = Relso::new(tiny_config(), 1).unwrap();
    let z = vec![vec![0.3, -0.1, 0.7, 0.2]; 2];
    let l = m.decode(&z).unwrap();
    assert_eq!(l.shape(), &[2, 6, 22]);
    let per = 6 * 22;
    assert_eq!(&l.data()[..per], &l.data()[per..]);
    assert!(m.decode(&[vec![f64::NAN; 4]]).is_err());
    let s = m.decode_sequences(&z, 4).unwrap();
    assert!(s.iter().all(|x| x.len() == 4 && x.chars().all(|c| Alphabet::protein().index(c).is_some_and(|i| i >= 1 && i <= 20))));
}

#[test]
fn restricted_decode_is_argmax_over_subset() {
    let m = Relso::new(tiny_config(), 2).unwrap();
    let z = vec![vec![0.5, -0.4, 0.1, 0.9], vec![-1.0, 0.2, 0.3, -0.6]];
    let logits = m.decode(&z).unwrap();
    let a = Alphabet::protein();
    let subset = ['W', 'C', 'K'];
    let got = m.decode_sequences_over(&z, 5, &subset).unwrap();
    for (b, s) in got.iter().enumerate() {
        for (p, c) in s.chars().enumerate() {
            let row = &logits.data()[(b * 6 + p) * 22..(b * 6 + p + 1) * 22];
            let best = subset.iter().copied().max_by(|x, y| row[a.index(*x).unwrap()].total_cmp(&row[a.index(*y).unwrap()])).unwrap();
            assert_eq!(c, best);
        }
    }
    assert_eq!(m.decode_sequences_over(&z, 5, &crate::seqdata::AMINO_ACIDS).unwrap(), m.decode_sequences(&z, 5).unwrap());
    assert!(m.decode_sequences_over(&z, 5, &['B']).is_err());
    assert!(m.decode_sequences_over(&z, 5, &[]).is_err());
}

#[test]
fn zero_head_weights_give_bias() {
    let mut m = Relso::new(tiny_config(), 1).unwrap();
    for name in ["head.w1", "head.w2"] {
        m.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    m.params.get_mut("head.b2").unwrap().data_mut()[0] = 0.75;
    let y = m.predict_fitness(&[vec![1.0, 2.0, 3.0, 4.0], vec![-5.0, 0.0, 0.0, 9.0]]).unwrap();
    assert_eq!(y, vec![0.75, 0.75]);
}

#[test]
fn fitness_gradient_matches_finite_differences() {
    let m = Relso::new(tiny_config(), 9).unwrap();
    let mut r = rng::stream(2, "test");
    for _ in 0..5 {
        let z: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let (_, grad) = m.fitness_and_grad(&z).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..4)
            .map(|i| {
                let mut p = z.clone();
                let mut q = z.clone();
                p[i] += h;
                q[i] -= h;
                (m.predict_fitness(&[p]).unwrap()[0] - m.predict_fitness(&[q]).unwrap()[0]) / (2.0 * h)
            })
            .collect();
        let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        assert!(num / den.max(1e-12) < 1e-5, "relative error {}", num / den);
    }
}

#[test]
fn spectral_estimate_matches_svd() {
    let mut r = rng::stream(4, "test");
    for (m, n) in [(8, 8), (4, 7), (7, 1)] {
        let data: Vec<f64> = (0..m * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let w = Tensor::new(vec![m, n], data.clone()).unwrap();
        let exact = nalgebra::DMatrix::from_row_slice(m, n, &data).singular_values().max();
        let est = spectral_norm(&w, 50);
        assert!((est - exact).abs() / exact < 0.01, "{m}x{n}: {est} vs {exact}");
    }
}

#[test]
fn persistent_power_iteration_converges() {
    let mut m = Relso::new(tiny_config(), 2).unwrap();
    for _ in 0..50 {
        m.update_spectral_vectors().unwrap();
    }
    let mut g = Graph::frozen();
    let pen = m.spectral_penalty_graph(&mut g).unwrap();
    let expected: f64 = ["head.w1", "head.w2"].iter().map(|n| spectral_norm(m.params.get(n).unwrap(), 200).powi(2)).sum();
    assert!((g.value(pen).item() - expected).abs() / expected < 1e-3);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let m = Relso::new(tiny_config(), 8).unwrap();
    let ck = Checkpoint { model: m.clone(), seed: 8, step: 17 };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!((back.seed, back.step), (8, 17));
    assert_eq!(back.model.config, m.config);
    assert_eq!(back.model.params.fingerprint(), m.params.fingerprint());
    let s = [enc("ACDE", 6)];
    let refs: Vec<_> = s.iter().collect();
    assert_eq!(back.model.encode(&refs).unwrap(), m.encode(&refs).unwrap());
    assert_eq!(back.model.predict_sequences(&refs).unwrap(), m.predict_sequences(&refs).unwrap());
}

#[test]
fn checkpoint_errors() {
    let m = Relso::new(tiny_config(), 8).unwrap();
    let bytes = Checkpoint { model: m, seed: 0, step: 0 }.to_bytes().unwrap();

    let mut bad_version = bytes.clone();
    bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(crate::Error::Version { expected: 1, found: 99 })));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(crate::Error::Corrupt(_))));

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(crate::Error::Corrupt(_))), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let a = Relso::new(tiny_config(), 4).unwrap();
    let b = Relso::new(tiny_config(), 4).unwrap();
    let c = Relso::new(tiny_config(), 5).unwrap();
    assert_eq!(a.params.fingerprint(), b.params.fingerprint());
    assert_ne!(a.params.fingerprint(), c.params.fingerprint());
}
