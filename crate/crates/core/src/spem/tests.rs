use super::*;
use crate::backbone::BackboneConfig;
use crate::numcore::{central_difference, max_relative_error};
use proptest::prelude::*;

fn uniform(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

fn small_backbone() -> Backbone {
    let cfg = BackboneConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        injection_layers: [0].into(),
        ..BackboneConfig::desk()
    };
    Backbone::new(cfg, 0).unwrap()
}

fn stripes(seed: u64) -> Raster {
    let mut rng = rng_from(seed);
    let phase = rng.random_range(0.0..6.0);
    let data = (0..256)
        .map(|i| 0.5 + 0.4 * ((i % 16) as f64 * 0.8 + phase).sin())
        .collect();
    Raster::new(16, 16, 1, data).unwrap()
}

#[test]
fn pca_axis_aligned_variance() {
    let mut rng = rng_from(2);
    let rows: Vec<Vec<f64>> = (0..30)
        .map(|_| {
            let mut r = vec![1.0, -2.0, 0.5];
            r[0] += rng.random_range(-3.0..3.0);
            r
        })
        .collect();
    let pca = fit_pca(&Tensor::from_rows(&rows).unwrap(), 1).unwrap();
    let c = pca.components.row(0);
    assert!((c[0].abs() - 1.0).abs() < 1e-12);
    assert!(c[1].abs() < 1e-12 && c[2].abs() < 1e-12);
}

#[test]
fn pca_full_basis_reconstructs() {
    let x = uniform(40, 6, 1);
    let pca = fit_pca(&x, 6).unwrap();
    let back = pca.inverse_transform(&pca.transform(&x).unwrap()).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-9);
    let cct = pca.components.matmul(&pca.components.transpose().unwrap()).unwrap();
    assert!(cct.max_abs_diff(&Tensor::eye(6)) < 1e-8);
    assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn pca_variance_matches_nalgebra() {
    let x = uniform(60, 8, 3);
    let pca = fit_pca(&x, 4).unwrap();
    let m = nalgebra::DMatrix::from_row_slice(60, 8, x.data());
    let mean = m.row_mean();
    let centered = nalgebra::DMatrix::from_fn(60, 8, |r, c| m[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / 59.0;
    let mut vals: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in pca.explained_variance.iter().zip(&vals) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn pca_needs_more_samples_than_dims() {
    let err = fit_pca(&uniform(4, 8, 0), 4).unwrap_err();
    assert_eq!(err.kind(), "insufficient_data");
}

#[test]
fn kmeans_distinct_points_zero_inertia() {
    let x = uniform(5, 3, 9);
    let km = kmeans(&x, 5, 0, 10, 300).unwrap();
    assert!(km.inertia < 1e-24);
    let mut ids = km.assignments.clone();
    ids.sort_unstable();
    assert_eq!(ids, vec![0, 1, 2, 3, 4]);
}

#[test]
fn kmeans_finds_two_blobs() {
    let mut rng = rng_from(4);
    let mut rows = Vec::new();
    for centre in [0.0, 10.0] {
        for _ in 0..50 {
            rows.push(vec![
                centre + rng.random_range(-0.5..0.5),
                centre + rng.random_range(-0.5..0.5),
            ]);
        }
    }
    let x = Tensor::from_rows(&rows).unwrap();
    let km = kmeans(&x, 2, 7, 10, 300).unwrap();
    for blob in 0..2 {
        let mean: Vec<f64> = (0..2)
            .map(|c| rows[blob * 50..(blob + 1) * 50].iter().map(|r| r[c]).sum::<f64>() / 50.0)
            .collect();
        let best = (0..2)
            .map(|k| sq_dist(km.centroids.row(k), &mean).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.5);
    }
}

#[test]
fn kmeans_too_few_points() {
    assert_eq!(kmeans(&uniform(3, 2, 0), 4, 0, 1, 10).unwrap_err().kind(), "insufficient_data");
}

#[test]
fn kmeans_is_deterministic() {
    let x = uniform(80, 3, 5);
    assert_eq!(kmeans(&x, 4, 11, 5, 300).unwrap(), kmeans(&x, 4, 11, 5, 300).unwrap());
}

#[test]
fn empty_cluster_is_reseeded() {
    // all points identical but one: any second centroid that loses its
    // members must be moved onto the outlier
    let mut rows = vec![vec![0.0, 0.0]; 10];
    rows.push(vec![5.0, 5.0]);
    let x = Tensor::from_rows(&rows).unwrap();
    let init = Tensor::from_rows(&[vec![0.0, 0.0], vec![-100.0, -100.0]]).unwrap();
    let res = lloyd(&x, init, 50);
    assert!(res.inertia < 1e-24);
    assert!(res.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kmeans_invariants(seed in 0u64..1000, k in 1usize..5, m in 6usize..40) {
        let x = uniform(m, 3, seed);
        let km = kmeans(&x, k, seed, 4, 300).unwrap();
        prop_assert!(km.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
        prop_assert!(km.run_inertias.iter().all(|&r| km.inertia <= r));
        prop_assert_eq!(&km.assignments, &assign_nearest(&x, &km.centroids));
    }

    #[test]
    fn pca_in_span_roundtrip(seed in 0u64..1000) {
        // points in a random 3-D subspace of R^6
        let basis = uniform(3, 6, seed);
        let coeff = uniform(20, 3, seed + 1);
        let x = coeff.matmul(&basis).unwrap();
        let pca = fit_pca(&x, 3).unwrap();
        let back = pca.inverse_transform(&pca.transform(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn temperature_keeps_argmax(seed in 0u64..1000, t1 in 0.05f64..5.0, t2 in 0.05f64..5.0) {
        let h = uniform(4, 5, seed);
        let p = uniform(4, 5, seed + 7);
        let hn = h.clone();
        let argmax = |tau: f64| -> Vec<usize> {
            let mut g = Graph::new();
            let (a, b) = (g.constant(&hn), g.constant(&p));
            let an = g.normalize_rows(a).unwrap();
            let bn = g.normalize_rows(b).unwrap();
            let bt = g.transpose(bn).unwrap();
            let s = g.matmul(an, bt).unwrap();
            let s = g.scale(s, 1.0 / tau);
            let sm = g.softmax(s, 1).unwrap();
            let v = g.to_tensor(sm);
            (0..4).map(|i| (0..4).max_by(|&x, &y| v.at(i, x).total_cmp(&v.at(i, y))).unwrap()).collect()
        };
        prop_assert_eq!(argmax(t1), argmax(t2));
    }

    #[test]
    fn consistency_loss_positive(seed in 0u64..1000, b in 2usize..6) {
        let h = uniform(b, 4, seed);
        let p = uniform(b, 4, seed + 3);
        prop_assert!(prompt_consistency_value(&h, &p, 0.1).unwrap() > 0.0);
    }
}

#[test]
fn single_pair_loss_is_zero() {
    let h = uniform(1, 4, 0);
    let p = uniform(1, 4, 1);
    assert!(prompt_consistency_value(&h, &p, 0.1).unwrap().abs() < 1e-15);
}

#[test]
fn orthogonal_pairs_closed_form() {
    let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let l = prompt_consistency_value(&h, &h, 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((l - (-2.0 * (e / (e + 1.0)).ln())).abs() < 1e-14);
}

#[test]
fn zero_norm_is_degenerate() {
    let h = Tensor::zeros(&[2, 3]);
    let p = uniform(2, 3, 0);
    assert_eq!(prompt_consistency_value(&h, &p, 0.1).unwrap_err().kind(), "degenerate");
}

#[test]
fn rotating_toward_own_pair_lowers_loss() {
    let h = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let t = step as f64 / 10.0 * std::f64::consts::FRAC_PI_2;
        // p̄₁ rotates from e₃ toward h₁ = e₁
        let p = Tensor::from_rows(&[vec![t.sin(), 0.0, t.cos()], vec![0.0, 1.0, 0.2]]).unwrap();
        let l = prompt_consistency_value(&h, &p, 0.5).unwrap();
        assert!(l < last);
        last = l;
    }
}

fn bank_with(prompts: Tensor) -> PromptBank {
    // identity-like projector is not available, so overwrite the cache
    let k = prompts.rows();
    let mut b = PromptBank::random_anchors(k, 2, 2, prompts.cols(), 0.1, 0).unwrap();
    b.prompts = prompts;
    b
}

#[test]
fn prompt_mean_single_cluster() {
    let bank = bank_with(uniform(3, 4, 1));
    let map = AssignmentMap::from_ids(vec![vec![2; 8]], 3).unwrap();
    let m = per_image_prompt_mean(&bank, &map, 0).unwrap();
    assert!(m.data().iter().zip(bank.prompts().row(2)).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn prompt_mean_uniform_and_mixed() {
    let p = uniform(3, 4, 2);
    let bank = bank_with(p.clone());
    let map = AssignmentMap::from_ids(vec![vec![0, 1, 2], vec![0, 0, 0, 1]], 3).unwrap();
    let u = per_image_prompt_mean(&bank, &map, 0).unwrap();
    let w = per_image_prompt_mean(&bank, &map, 1).unwrap();
    for c in 0..4 {
        let avg = (p.at(0, c) + p.at(1, c) + p.at(2, c)) / 3.0;
        assert!((u.at(0, c) - avg).abs() < 1e-15);
        assert!((w.at(0, c) - (0.75 * p.at(0, c) + 0.25 * p.at(1, c))).abs() < 1e-15);
    }
    assert_eq!(map.histograms[1], vec![3, 1, 0]);
}

#[test]
fn assignment_ids_are_bounded() {
    assert!(AssignmentMap::from_ids(vec![vec![0, 3]], 3).is_err());
}

#[test]
fn consistency_gradient_matches_fd() {
    let bank = PromptBank::random_anchors(3, 4, 5, 6, 0.2, 9).unwrap();
    let h = uniform(4, 6, 8);
    let w = AssignmentMap::from_ids(vec![vec![0, 0, 1], vec![2, 2, 2], vec![1, 0, 2], vec![1, 1, 1]], 3)
        .unwrap()
        .weight_matrix(&[0, 1, 2, 3])
        .unwrap();

    let loss = |bank: &PromptBank| -> (f64, Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars = Parameters::bind(&bank.projector, &mut g);
        let p = bank.prompts_graph(&mut g, &vars).unwrap();
        let wv = g.constant(&w);
        let pbar = g.matmul(wv, p).unwrap();
        let hv = g.constant(&h);
        let l = prompt_consistency_loss(&mut g, hv, pbar, bank.temperature).unwrap();
        (g.scalar(l), g, vars, l)
    };
    let (_, g, vars, l) = loss(&bank);
    let grads = g.backward(l).unwrap();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().to_vec();
        let base = bank.projector.params()[pi].data().to_vec();
        let numeric = central_difference(
            |x| {
                let mut b = bank.clone();
                b.projector.params_mut()[pi].data_mut().copy_from_slice(x);
                loss(&b).0
            },
            &base,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "param {pi}: {err}");
    }
}

#[test]
fn build_bank_shapes_and_determinism() {
    let b = small_backbone();
    let imgs: Vec<Raster> = (0..20).map(stripes).collect();
    let refs: Vec<&Raster> = imgs.iter().collect();
    let cfg = SpemConfig {
        num_prompts: 4,
        reduced_dim: 6,
        n_init: 3,
        ..SpemConfig::default()
    };
    let bank = build_prompt_bank(&refs, &b, &cfg, 1).unwrap();
    assert_eq!(bank.centroids.shape(), &[4, 6]);
    assert_eq!(bank.prompts().shape(), &[4, 16]);
    let again = build_prompt_bank(&refs, &b, &cfg, 1).unwrap();
    assert_eq!(bank.centroids.to_le_bytes(), again.centroids.to_le_bytes());
    let fresh = bank.projector.apply(&bank.centroids).unwrap();
    assert!(fresh.max_abs_diff(bank.prompts()) < 1e-12);

    let map = bank.assign(&b, &refs[..3]).unwrap();
    assert!(map.histograms.iter().all(|h| h.iter().sum::<usize>() == 16));
}

#[test]
fn refresh_keeps_projector_and_respects_interval() {
    let b = small_backbone();
    let imgs: Vec<Raster> = (0..12).map(stripes).collect();
    let refs: Vec<&Raster> = imgs.iter().collect();
    let mut cfg = SpemConfig {
        num_prompts: 3,
        reduced_dim: 4,
        n_init: 2,
        ..SpemConfig::default()
    };
    let mut bank = build_prompt_bank(&refs, &b, &cfg, 2).unwrap();
    bank.projector.w2.data_mut()[0] += 0.5;
    bank.refresh_cache().unwrap();

    assert_eq!(refresh_centroids(&bank, &refs, &b, 50, &cfg, 2).unwrap(), bank);
    cfg.refresh_interval = 5;
    assert_eq!(refresh_centroids(&bank, &refs, &b, 7, &cfg, 2).unwrap(), bank);
    let r = refresh_centroids(&bank, &refs, &b, 10, &cfg, 2).unwrap();
    assert_eq!(r.projector, bank.projector);
    assert_eq!(r.centroids, bank.centroids);
    let fresh = r.projector.apply(&r.centroids).unwrap();
    assert!(fresh.max_abs_diff(r.prompts()) < 1e-12);
}

#[test]
fn purity_counts() {
    let p = cluster_purity(&[0, 0, 1, 1, 1], &[true, false, true, true, true], 3).unwrap();
    assert_eq!(p, vec![(2, 0.5), (3, 1.0), (0, 0.0)]);
}
