mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use expamoe::dbe_ts::{random_split, scatter_fuse, split_count, token_split};
use expamoe::moe::{moe_forward, Activation, MoEModule, MoeConfig};
use expamoe::numerics::{gelu, stable_softmax, Matrix};
use expamoe::oracles;
use expamoe::sodd::{mahalanobis, soft_weights, update_stats, DomainRegistry, DomainStats};
use expamoe::spectral::{extract_descriptor, ImageSample, SpectralConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn stats(d: usize, seed: u64) -> DomainStats {
    let mut r = rng(seed);
    DomainStats {
        mean: random_vec(d, 1.0, &mut r),
        covariance: random_spd(d, &mut r),
        count: 3.0,
    }
}

fn batch(d: usize, b: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..b).map(|_| random_vec(d, 2.0, &mut r)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn descriptor_shape_and_shift_invariance(h in 3usize..12, w in 3usize..12, dy in 0usize..12, dx in 0usize..12, seed in any::<u64>(), log in any::<bool>()) {
        let img = random_image(h, w, 1, &mut rng(seed));
        let radius = (h.min(w) - 1) / 2;
        let cfg = SpectralConfig { crop_radius: radius, log_compress: log };
        let a = extract_descriptor(&img, &cfg).unwrap();
        prop_assert_eq!(a.values.len(), (2 * radius + 1).pow(2));
        prop_assert!(a.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        let mut shifted = img.pixels.clone();
        for i in 0..h {
            for j in 0..w {
                shifted[((i + dy) % h) * w + (j + dx) % w] = img.pixels[i * w + j];
            }
        }
        let b = extract_descriptor(&ImageSample::new(h, w, 1, shifted).unwrap(), &cfg).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn mahalanobis_is_nonnegative_and_zero_at_mean(d in 1usize..8, eps in 0.0f64..1.0, seed in any::<u64>()) {
        let s = stats(d, seed);
        prop_assert!(mahalanobis(&s, &s.mean, eps).unwrap().abs() < 1e-12);
        let z = batch(d, 1, seed ^ 1).remove(0);
        prop_assert!(mahalanobis(&s, &z, eps).unwrap() >= 0.0);
        let far: Vec<f64> = z.iter().zip(&s.mean).map(|(a, m)| m + 2.0 * (a - m)).collect();
        let (near_d, far_d) = (mahalanobis(&s, &z, eps).unwrap(), mahalanobis(&s, &far, eps).unwrap());
        prop_assert!((far_d - 4.0 * near_d).abs() <= 1e-9 * (1.0 + far_d));
    }

    #[test]
    fn soft_weights_form_a_distribution(d in 1usize..8, b in 1usize..16, seed in any::<u64>()) {
        let s = stats(d, seed);
        let w = soft_weights(&s, &batch(d, b, seed ^ 2), 0.1).unwrap();
        prop_assert_eq!(w.len(), b);
        prop_assert!(w.iter().all(|x| *x >= 0.0 && x.is_finite()));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_keeps_covariance_symmetric_psd(d in 1usize..8, b in 1usize..16, seed in any::<u64>()) {
        let s = stats(d, seed);
        let desc = batch(d, b, seed ^ 3);
        let w = soft_weights(&s, &desc, 0.1).unwrap();
        let n = update_stats(&s, &desc, &w).unwrap();
        prop_assert_eq!(n.count, s.count + 1.0);
        for i in 0..d {
            for j in 0..d {
                prop_assert_eq!(n.covariance[(i, j)], n.covariance[(j, i)]);
            }
        }
        let probe = batch(d, 1, seed ^ 4).remove(0);
        let quad: f64 = (0..d).map(|i| (0..d).map(|j| probe[i] * n.covariance[(i, j)] * probe[j]).sum::<f64>()).sum();
        prop_assert!(quad >= -1e-12);
    }

    #[test]
    fn posterior_is_a_distribution_matching_the_oracle(d in 1usize..6, k in 1usize..5, seed in any::<u64>()) {
        let mut reg = DomainRegistry::new(d, 0.2, f64::INFINITY, 1.0);
        let mut direct = Vec::new();
        for i in 0..k {
            let s = stats(d, seed.wrapping_add(i as u64));
            direct.push((s.mean.clone(), s.covariance.clone()));
            reg.push_domain(s).unwrap();
        }
        let z = batch(d, 1, seed ^ 5).remove(0);
        let p = reg.posterior(&z).unwrap();
        let q = oracles::posterior_direct(&direct, &z, 0.2);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn registry_bytes_round_trip(d in 1usize..6, k in 1usize..4, seed in any::<u64>()) {
        let mut reg = DomainRegistry::new(d, 0.05, 7.5, 0.3);
        for i in 0..k {
            reg.spawn_domain(&batch(d, 4, seed.wrapping_add(i as u64))).unwrap();
            reg.update_domain(i, &batch(d, 3, seed ^ i as u64)).unwrap();
        }
        let bytes = reg.to_bytes();
        let back = DomainRegistry::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes.clone());
        prop_assert_eq!(back.len(), k);
        prop_assert!(DomainRegistry::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn token_split_matches_sorting_oracle(n in 2usize..40, d in 1usize..6, k in 5.0f64..50.0, seed in any::<u64>(), ties in any::<bool>()) {
        let mut r = rng(seed);
        let mut tokens = Matrix::from_fn(n + 1, d, |_, _| rand::Rng::gen_range(&mut r, -1.0..1.0));
        if ties {
            // Duplicate rows force equal similarities.
            for i in (2..=n).step_by(2) {
                let prev = tokens.row(i - 1).to_vec();
                tokens.row_mut(i).copy_from_slice(&prev);
            }
        }
        let count = split_count(n, k);
        match token_split(&tokens, k) {
            Ok(s) => {
                prop_assert_eq!(s.task_indices.len(), count);
                prop_assert_eq!(s.domain_indices.len(), count);
                let (task, domain) = oracles::token_split_by_sort(&tokens, count);
                prop_assert_eq!(&s.task_indices, &task);
                prop_assert_eq!(&s.domain_indices, &domain);
                if 2 * count <= n {
                    prop_assert!(s.task_indices.iter().all(|i| !s.domain_indices.contains(i)));
                }
            }
            Err(_) => prop_assert!(count == 0 || 2 * count > n),
        }
    }

    #[test]
    fn split_count_is_the_floor(n in 0usize..500, k in 0.0f64..100.0) {
        let c = split_count(n, k);
        prop_assert!(c as f64 <= k / 100.0 * n as f64 + 1e-6);
        prop_assert!((c + 1) as f64 > k / 100.0 * n as f64);
    }

    #[test]
    fn random_split_is_disjoint(n in 2usize..40, k in 5.0f64..50.0, seed in any::<u64>()) {
        if let Ok(s) = random_split(n, k, &mut rng(seed)) {
            let count = split_count(n, k);
            prop_assert_eq!(s.task_indices.len(), count);
            prop_assert_eq!(s.domain_indices.len(), count);
            prop_assert!(s.task_indices.iter().chain(&s.domain_indices).all(|i| *i < n));
            prop_assert!(s.task_indices.iter().all(|i| !s.domain_indices.contains(i)));
        }
    }

    #[test]
    fn mixture_matches_explicit_loops(d in 3usize..8, m in 1usize..5, tokens in 1usize..5, seed in any::<u64>(), relu in any::<bool>()) {
        let mut r = rng(seed);
        let cfg = MoeConfig { num_experts: m, rank: 2, activation: if relu { Activation::Relu } else { Activation::Gelu } };
        let mut module = MoEModule::new(d, &cfg, &mut r).unwrap();
        module.router_weight = Matrix::from_fn(m, d, |_, _| rand::Rng::gen_range(&mut r, -1.0..1.0));
        module.router_bias = Matrix::from_fn(1, m, |_, _| rand::Rng::gen_range(&mut r, -1.0..1.0));
        for e in &mut module.experts {
            e.up = Matrix::from_fn(2, d, |_, _| rand::Rng::gen_range(&mut r, -1.0..1.0));
        }
        let z = Matrix::from_fn(tokens, d, |_, _| rand::Rng::gen_range(&mut r, -2.0..2.0));
        let y = moe_forward(&module, &z).unwrap();
        let experts: Vec<(Matrix, Matrix)> = module.experts.iter().map(|e| (e.down.clone(), e.up.clone())).collect();
        let act: fn(f64) -> f64 = if relu { |x| x.max(0.0) } else { gelu };
        for t in 0..tokens {
            let expect = oracles::moe_token(&module.router_weight, module.router_bias.as_slice(), &experts, act, z.row(t));
            for (a, b) in y.row(t).iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scatter_fuse_touches_only_selected_rows(n in 4usize..20, d in 1usize..5, lambda in 0.0f64..1.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let z = Matrix::from_fn(n + 1, d, |_, _| rand::Rng::gen_range(&mut r, -1.0..1.0));
        let split = token_split(&z, 25.0).unwrap();
        let c = split.task_indices.len();
        let ys = Matrix::from_fn(c, d, |_, _| 1.0);
        let yd = Matrix::from_fn(c, d, |_, _| -1.0);
        let out = scatter_fuse(&z, &split, &ys, &yd, lambda).unwrap();
        let task = split.task_rows();
        let dom = split.domain_rows();
        for i in 0..=n {
            let shift = if task.contains(&i) { lambda } else { 0.0 } - if dom.contains(&i) { 1.0 - lambda } else { 0.0 };
            for j in 0..d {
                prop_assert!((out[(i, j)] - z[(i, j)] - shift).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..10), c in -500.0f64..500.0) {
        let a = stable_softmax(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let b = stable_softmax(&shifted).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
