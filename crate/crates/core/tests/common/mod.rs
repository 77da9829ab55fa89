#![allow(dead_code)]

use expamoe::numerics::Matrix;
use expamoe::spectral::ImageSample;
use rand::Rng;

pub fn random_image<R: Rng>(h: usize, w: usize, c: usize, rng: &mut R) -> ImageSample {
    ImageSample::new(h, w, c, (0..h * w * c).map(|_| rng.gen()).collect()).unwrap()
}

pub fn random_spd<R: Rng>(d: usize, rng: &mut R) -> Matrix {
    let a = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let mut s = a.matmul_transposed(&a).unwrap();
    for i in 0..d {
        s[(i, i)] += 0.1;
    }
    s
}

/// Columns orthonormalized by modified Gram–Schmidt.
pub fn random_orthogonal<R: Rng>(d: usize, rng: &mut R) -> Matrix {
    loop {
        let mut q = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let mut ok = true;
        for j in 0..d {
            for k in 0..j {
                let p: f64 = (0..d).map(|i| q[(i, j)] * q[(i, k)]).sum();
                for i in 0..d {
                    q[(i, j)] -= p * q[(i, k)];
                }
            }
            let n: f64 = (0..d).map(|i| q[(i, j)] * q[(i, j)]).sum::<f64>().sqrt();
            if n < 1e-3 {
                ok = false;
                break;
            }
            for i in 0..d {
                q[(i, j)] /= n;
            }
        }
        if ok {
            return q;
        }
    }
}

/// `Q·diag(values)·Qᵀ`.
pub fn rotated_diagonal(q: &Matrix, values: &[f64]) -> Matrix {
    let d = values.len();
    Matrix::from_fn(d, d, |i, j| (0..d).map(|k| q[(i, k)] * values[k] * q[(j, k)]).sum())
}

pub fn random_vec<R: Rng>(d: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

use expamoe::adaptation::{AdaptConfig, Adapter};
use expamoe::backbone::{ToyViT, ToyViTConfig};
use expamoe::moe::MoeConfig;
use expamoe::params::{Branch, ParamKey};
use expamoe::sodd::DomainRegistry;
use expamoe::spectral::{extract_batch, SpectralConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_config(seed: u64) -> ToyViTConfig {
    ToyViTConfig {
        image_size: 8,
        patch_size: 2,
        embed_dim: 8,
        blocks: 2,
        heads: 2,
        classes: 4,
        mlp_hidden: 16,
        seed,
        experts: MoeConfig {
            num_experts: 3,
            rank: 2,
            ..MoeConfig::default()
        },
        ..ToyViTConfig::default()
    }
}

/// Keys of every shared and domain-branch tensor present in the model.
pub fn expert_keys(model: &ToyViT) -> Vec<ParamKey> {
    let mut keys = Vec::new();
    for (block, pool) in model.pools.iter().enumerate() {
        let branches = std::iter::once(Branch::Shared).chain((0..pool.num_branches()).map(Branch::Domain));
        for branch in branches {
            for (slot, _) in pool.module(branch).unwrap().tensors() {
                keys.push(ParamKey::Expert { block, branch, slot });
            }
        }
    }
    keys
}

/// Small model with non-zero expert tensors, so expert gradients are informative.
pub fn small_model(seed: u64) -> ToyViT {
    let mut model = ToyViT::new(small_config(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for key in expert_keys(&model) {
        for v in model.param_mut(&key).unwrap().as_mut_slice() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    model.freeze_backbone();
    model
}

pub fn small_spectral() -> SpectralConfig {
    SpectralConfig {
        crop_radius: 2,
        log_compress: true,
    }
}

pub fn random_batch(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<ImageSample> {
    (0..n).map(|_| random_image(size, size, 3, rng)).collect()
}

/// Adapter over `small_model` whose single registry domain is seeded from a random batch.
pub fn small_adapter(seed: u64, config: AdaptConfig) -> Adapter {
    let model = small_model(seed);
    let spectral = small_spectral();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let desc = extract_batch(&random_batch(8, 8, &mut rng), &spectral).unwrap();
    let mut registry = DomainRegistry::new(spectral.dim(), 0.1, f64::INFINITY, 0.5);
    registry.spawn_domain(&desc).unwrap();
    Adapter::new(model, registry, config, spectral).unwrap()
}
