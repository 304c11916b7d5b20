use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::model::{tests::tiny_config, Relso};
use crate::rng;
use crate::seqdata::{hamming, Alphabet, EncodedSequence};

fn pts(v: &[f64]) -> Vec<Vec<f64>> {
    v.iter().map(|&x| vec![x]).collect()
}

fn random_points(r: &mut rng::Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(r)).collect()).collect()
}

#[test]
fn collinear_knn() {
    let g = knn_graph(&pts(&[0.0, 1.0, 3.0]), 1).unwrap();
    assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
}

#[test]
fn knn_ties_go_to_lower_index() {
    let g = knn_graph(&pts(&[0.0, 1.0, -1.0, 1.1, -1.1]), 1).unwrap();
    assert_eq!(g.edges, vec![(0, 1), (1, 3), (2, 4)]);
}

#[test]
fn knn_saturates_and_is_symmetric() {
    let mut r = rng::stream(0, rng::TOY);
    let p = random_points(&mut r, 7, 3);
    assert_eq!(knn_graph(&p, 6).unwrap().edges.len(), 21);
    let a = knn_graph(&p, 2).unwrap().adjacency();
    for i in 0..7 {
        assert!(!a[i][i]);
        for j in 0..7 {
            assert_eq!(a[i][j], a[j][i]);
        }
    }
    assert!(knn_graph(&p, 7).is_err());
    assert!(knn_graph(&p, 0).is_err());
    assert_eq!(knn_graph(&pts(&[1.0, 1.0, 1.0]), 1).unwrap().edges, vec![(0, 1), (0, 2)]);
}

#[test]
fn smoothness_examples() {
    let g = KnnGraph { n: 2, k: 1, edges: vec![(0, 1)] };
    assert_eq!(smoothness_index(&g, &scalar_signal(&[0.0, 1.0]), "f").unwrap().lambda, 0.5);
    assert_eq!(smoothness_index(&g, &scalar_signal(&[3.0, 3.0]), "f").unwrap().lambda, 0.0);
    assert!(smoothness_index(&g, &scalar_signal(&[1.0]), "f").is_err());
}

#[test]
fn smoothness_equals_edge_sum_and_quadratic_form() {
    let mut r = rng::stream(1, rng::TOY);
    for trial in 0..50 {
        let n = r.random_range(3..40);
        let k = r.random_range(1..n);
        let g = knn_graph(&random_points(&mut r, n, 3), k).unwrap();
        let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let got = smoothness_index(&g, &scalar_signal(&y), "f").unwrap().lambda;

        let a = g.adjacency();
        let mut brute = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                if a[i][j] {
                    brute += (y[i] - y[j]) * (y[i] - y[j]);
                }
            }
        }
        assert_eq!(got, brute / n as f64, "trial {trial}");

        let l = DMatrix::from_fn(n, n, |i, j| g.laplacian()[i][j]);
        let v = DVector::from_vec(y.clone());
        let quad = (v.transpose() * &l * &v)[(0, 0)] / n as f64;
        assert!((quad - got).abs() <= 1e-10 * quad.abs().max(1.0));
    }
}

#[test]
fn one_hot_signal_averages_positions() {
    let seqs = ["ACD", "ACC", "DDD", "ACD"];
    let s = one_hot_signal(&seqs, &['A', 'C', 'D']).unwrap();
    let g = knn_graph(&pts(&[0.0, 1.0, 2.0, 3.0]), 1).unwrap();
    let got = smoothness_index(&g, &s, "seq").unwrap().lambda;
    let want: f64 = g.edges.iter().map(|&(i, j)| 2.0 * hamming(seqs[i], seqs[j]).unwrap() as f64 / 3.0).sum::<f64>() / 4.0;
    assert!((got - want).abs() < 1e-12);
    assert!(one_hot_signal(&["AC", "A"], &['A', 'C']).is_err());
    assert!(one_hot_signal(&["AX"], &['A', 'C']).is_err());
}

proptest! {
    #[test]
    fn smoothness_ignores_constant_shift(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut r = rng::stream(seed, rng::TOY);
        let g = knn_graph(&random_points(&mut r, 20, 2), 3).unwrap();
        let y: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut r)).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let a = smoothness_index(&g, &scalar_signal(&y), "f").unwrap().lambda;
        let b = smoothness_index(&g, &scalar_signal(&ys), "f").unwrap().lambda;
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn knn_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
        let mut r = rng::stream(seed, rng::TOY);
        let p = random_points(&mut r, 25, 3);
        let q: Vec<Vec<f64>> = p.iter().map(|x| x.iter().map(|v| v * c).collect()).collect();
        prop_assert_eq!(knn_graph(&p, 4).unwrap(), knn_graph(&q, 4).unwrap());
    }

    #[test]
    fn pca_reconstruction_error_nonincreasing(seed in 0u64..1000) {
        let mut r = rng::stream(seed, rng::TOY);
        let p = random_points(&mut r, 12, 5);
        let errs: Vec<f64> = (1..=5).map(|c| pca_project(&p, c).unwrap().reconstruction_error(&p)).collect();
        prop_assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-10));
        prop_assert!(errs[4] < 1e-10);
    }
}

#[test]
fn pca_line_captures_all_variance() {
    let p: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0 + i as f64, 2.0 - 2.0 * i as f64, 0.5 * i as f64]).collect();
    let r = pca_project(&p, 2).unwrap();
    assert!((r.explained_ratio[0] - 1.0).abs() < 1e-12);
    assert!(r.explained_variance[1].abs() < 1e-12);
    assert!(r.components[0][0] > 0.0);
    let dot: f64 = r.components[0].iter().zip(&r.components[1]).map(|(a, b)| a * b).sum();
    assert!(dot.abs() < 1e-9);
}

#[test]
fn pca_matches_dense_eigensolver() {
    let mut r = rng::stream(2, rng::TOY);
    for _ in 0..20 {
        let p = random_points(&mut r, 10, 4);
        let res = pca_project(&p, 2).unwrap();
        for c in 0..2 {
            let m: f64 = res.coords.iter().map(|x| x[c]).sum::<f64>() / 10.0;
            assert!(m.abs() < 1e-9);
        }
        let x = DMatrix::from_fn(10, 4, |i, j| p[i][j] - res.mean[j]);
        let cov = x.transpose() * &x / 9.0;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for c in 0..2 {
            assert!((res.explained_variance[c] - eig.eigenvalues[order[c]]).abs() < 1e-8);
            let v = eig.eigenvectors.column(order[c]);
            let align: f64 = (0..4).map(|j| v[j] * res.components[c][j]).sum();
            assert!((align.abs() - 1.0).abs() < 1e-6);
            let first = res.components[c].iter().find(|v| v.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }
}

#[test]
fn pca_errors() {
    assert!(pca_project(&vec![vec![1.0, 2.0]; 5], 1).is_err());
    assert!(pca_project(&[vec![1.0, 2.0]], 1).is_err());
    assert!(pca_project(&[vec![1.0], vec![2.0]], 2).is_err());
}

fn enc(s: &str) -> EncodedSequence {
    Alphabet::protein().encode(s, 6, 1).unwrap()
}

#[test]
fn walk_is_greedy_through_the_pool() {
    let m = Relso::new(tiny_config(), 3).unwrap();
    let mut r = rng::stream(4, rng::TOY);
    let pool = random_points(&mut r, 30, 4);
    let a = vec![0.4, -0.2, 0.9, 0.1];
    let b = vec![-1.0, 0.5, 0.3, -0.7];
    let w = latent_walk_profile(&m, &pool, &a, &b, 10, 5, 5).unwrap();
    let n = w.len();
    assert!((2..=10).contains(&n));
    assert_eq!((w[n - 1].fit_gap, w[n - 1].seq_gap), (0.0, 0));
    assert_eq!((w[0].z.clone(), w[n - 1].z.clone()), (a.clone(), b.clone()));
    assert!(w[1..n - 1].iter().all(|s| pool.contains(&s.z)));
    let to_end: Vec<f64> = w.iter().map(|s| s.z.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum()).collect();
    assert!(to_end.windows(2).all(|p| p[1] < p[0]));
    assert!(w.iter().all(|s| s.sequence.len() == 5));

    let same = latent_walk_profile(&m, &pool, &a, &a, 6, 5, 5).unwrap();
    assert_eq!(same.len(), 2);
    assert!(same.iter().all(|s| s.fit_gap == 0.0 && s.seq_gap == 0 && s.seq_change == 0));
    assert!(latent_walk_profile(&m, &pool, &a, &b, 1, 5, 5).is_err());
    assert!(latent_walk_profile(&m, &pool, &a, &b, 4, 0, 5).is_err());
    assert!(latent_walk_profile(&m, &pool, &a[..3], &b, 4, 5, 5).is_err());
}

#[test]
fn walk_along_a_line() {
    let m = Relso::new(tiny_config(), 3).unwrap();
    let at = |x: f64| vec![x, 0.0, 0.0, 0.0];
    let pool: Vec<Vec<f64>> = [3.0, 1.0, 2.0, -1.0].iter().map(|&x| at(x)).collect();
    let xs = |w: &[WalkStep]| w.iter().map(|s| s.z[0]).collect::<Vec<_>>();
    assert_eq!(xs(&latent_walk_profile(&m, &pool, &at(0.0), &at(4.0), 10, 1, 5).unwrap()), [0.0, 1.0, 2.0, 3.0, 4.0]);
    // Wider neighbourhoods jump further.
    assert_eq!(xs(&latent_walk_profile(&m, &pool, &at(0.0), &at(4.0), 10, 3, 5).unwrap()), [0.0, 2.0, 3.0, 4.0]);
    // Step cap.
    assert_eq!(xs(&latent_walk_profile(&m, &pool, &at(0.0), &at(4.0), 3, 1, 5).unwrap()), [0.0, 1.0, 4.0]);
    // No neighbour makes progress.
    assert_eq!(xs(&latent_walk_profile(&m, &pool, &at(0.0), &at(-0.5), 10, 1, 5).unwrap()), [0.0, -0.5]);
}

#[test]
fn attention_single_sequence_is_raw_mean() {
    let m = Relso::new(tiny_config(), 5).unwrap();
    let s = enc("ACDEF");
    let sum = aggregate_attention(&m, &[&s], 0.0).unwrap();
    let out = &m.encode(&[&s]).unwrap()[0];
    let a = out.attention.data();
    for i in 0..5 {
        for j in 0..5 {
            let want = (0..2).map(|h| a[(h * 6 + i) * 6 + j]).sum::<f64>() / 2.0;
            assert!((sum.mean[i][j] - want).abs() < 1e-15);
        }
        assert!((sum.mean[i].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(sum.thresholded, sum.mean);
    assert!((sum.positional.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn attention_threshold_sparsity() {
    let m = Relso::new(tiny_config(), 6).unwrap();
    let seqs: Vec<EncodedSequence> = ["ACDEF", "KLMNP", "WYACD"].iter().map(|s| enc(s)).collect();
    let refs: Vec<&EncodedSequence> = seqs.iter().collect();
    for pct in [0.0, 25.0, 50.0, 90.0, 100.0] {
        let sum = aggregate_attention(&m, &refs, pct).unwrap();
        let zeros = sum.thresholded.iter().flatten().filter(|v| **v == 0.0).count();
        let want = (pct / 100.0 * 25.0).floor() as usize;
        assert!(zeros.abs_diff(want) <= 1, "{pct}: {zeros} vs {want}");
        let kept_min = sum.thresholded.iter().flatten().filter(|v| **v > 0.0).fold(f64::INFINITY, |a, b| a.min(*b));
        let dropped_max = sum.mean.iter().flatten().zip(sum.thresholded.iter().flatten()).filter(|(_, t)| **t == 0.0).map(|(v, _)| *v).fold(0.0, f64::max);
        assert!(dropped_max <= kept_min);
    }
    assert_eq!(aggregate_attention(&m, &refs, 0.0).unwrap().top_positions(5).len(), 5);
    let mixed = enc("ACD");
    assert!(aggregate_attention(&m, &[&seqs[0], &mixed], 10.0).is_err());
    assert!(aggregate_attention(&m, &[], 10.0).is_err());
    assert!(aggregate_attention(&m, &refs, 120.0).is_err());
}

#[test]
fn csv_outputs_carry_schema_line() {
    let p = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]];
    let pca = pca_project(&p, 2).unwrap();
    let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
    let csv = latent_coords_csv(&ids, &pca, &[1.0, 2.0, 3.0]).unwrap();
    assert!(csv.starts_with("# schema_version: 1\nid,pc1,pc2,fitness\n"));
    assert_eq!(csv.lines().count(), 5);
    let g = knn_graph(&p, 1).unwrap();
    let s = smoothness_index(&g, &scalar_signal(&[1.0, 2.0, 3.0]), "fitness").unwrap();
    let csv = smoothness_csv(&[("latent".into(), s)]).unwrap();
    assert!(csv.lines().nth(1).unwrap() == "representation,signal,k,n,lambda");
}
