//! Brute-force reference computations.
//!
//! Nothing here shares code with the production paths it checks: the DFT
//! is a direct quadruple loop, matrix inverses use Gauss–Jordan
//! elimination instead of Cholesky, probabilities are evaluated without
//! log-space tricks and token ranking uses a full sort. Used by the test
//! suites and the `oracle` CLI subcommand.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::numerics::Matrix;
use crate::spectral::ImageSample;

/// `O((HW)²)` double-sum DFT, row-major.
pub fn direct_dft2d(x: &Matrix) -> Vec<Complex64> {
    let (h, w) = x.shape();
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..h {
                for n in 0..w {
                    let phase = -2.0 * PI * ((u * m) as f64 / h as f64 + (v * n) as f64 / w as f64);
                    acc += x[(m, n)] * Complex64::new(phase.cos(), phase.sin());
                }
            }
            out.push(acc);
        }
    }
    out
}

/// `|fftshift(direct DFT)|` with the shift written as a source lookup.
pub fn direct_centered_magnitude(x: &Matrix) -> Matrix {
    let (h, w) = x.shape();
    let f = direct_dft2d(x);
    Matrix::from_fn(h, w, |i, j| {
        let u = (i + h - h / 2) % h;
        let v = (j + w - w / 2) % w;
        f[u * w + v].norm()
    })
}

/// Grayscale → direct DFT → shift → crop, without log compression.
pub fn direct_descriptor(img: &ImageSample, radius: usize) -> Vec<f64> {
    let gray = Matrix::from_fn(img.height, img.width, |i, j| {
        let mut s = 0.0;
        for c in 0..img.channels {
            s += img.at(i, j, c);
        }
        s / img.channels as f64
    });
    let mag = direct_centered_magnitude(&gray);
    let (cr, cc) = (img.height / 2, img.width / 2);
    let mut out = Vec::new();
    for i in 0..2 * radius + 1 {
        for j in 0..2 * radius + 1 {
            out.push(mag[(cr + i - radius, cc + j - radius)]);
        }
    }
    out
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut aug = Matrix::from_fn(n, 2 * n, |i, j| {
        if j < n {
            a[(i, j)]
        } else if j - n == i {
            1.0
        } else {
            0.0
        }
    });
    for col in 0..n {
        let pivot = (col..n).max_by(|&p, &q| aug[(p, col)].abs().total_cmp(&aug[(q, col)].abs()))?;
        if aug[(pivot, col)].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..2 * n {
                let t = aug[(col, j)];
                aug[(col, j)] = aug[(pivot, j)];
                aug[(pivot, j)] = t;
            }
        }
        let p = aug[(col, col)];
        for j in 0..2 * n {
            aug[(col, j)] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = aug[(i, col)];
                if f != 0.0 {
                    for j in 0..2 * n {
                        aug[(i, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
    }
    Some(Matrix::from_fn(n, n, |i, j| aug[(i, j + n)]))
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut m = a.clone();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| m[(p, col)].abs().total_cmp(&m[(q, col)].abs()))
            .unwrap();
        if m[(pivot, col)] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                let t = m[(col, j)];
                m[(col, j)] = m[(pivot, j)];
                m[(pivot, j)] = t;
            }
            det = -det;
        }
        det *= m[(col, col)];
        for i in col + 1..n {
            let f = m[(i, col)] / m[(col, col)];
            for j in col..n {
                m[(i, j)] -= f * m[(col, j)];
            }
        }
    }
    det
}

fn regularize(cov: &Matrix, eps: f64) -> Matrix {
    Matrix::from_fn(cov.rows(), cov.cols(), |i, j| {
        (1.0 - eps) * cov[(i, j)] + if i == j { eps } else { 0.0 }
    })
}

/// Mahalanobis distance through an explicit inverse.
pub fn mahalanobis_explicit_inverse(mean: &[f64], cov: &Matrix, z: &[f64], eps: f64) -> f64 {
    let inv = gauss_jordan_inverse(&regularize(cov, eps)).expect("invertible");
    let d = mean.len();
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            total += (z[i] - mean[i]) * inv[(i, j)] * (z[j] - mean[j]);
        }
    }
    total
}

/// Posterior by direct (linear-space) evaluation of `exp(−m/2)/√det`.
pub fn posterior_direct(domains: &[(Vec<f64>, Matrix)], z: &[f64], eps: f64) -> Vec<f64> {
    let dens: Vec<f64> = domains
        .iter()
        .map(|(mean, cov)| {
            let m = mahalanobis_explicit_inverse(mean, cov, z, eps);
            (-0.5 * m).exp() / determinant(&regularize(cov, eps)).sqrt()
        })
        .collect();
    let total: f64 = dens.iter().sum();
    dens.iter().map(|v| v / total).collect()
}

/// Weighted complete-data log-likelihood
/// `c·log N(μ_prior | μ, Σ) + Σ_b w_b log N(z_b | μ, Σ)`, up to a constant
/// independent of `μ`. The prior term is the log-density of the previous
/// mean under the candidate parameters.
pub fn weighted_log_likelihood(
    count: f64,
    prior_mean: &[f64],
    cov_inverse: &Matrix,
    descriptors: &[Vec<f64>],
    weights: &[f64],
    mu: &[f64],
) -> f64 {
    let quad = |x: &[f64]| -> f64 {
        let d = x.len();
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += (x[i] - mu[i]) * cov_inverse[(i, j)] * (x[j] - mu[j]);
            }
        }
        q
    };
    let mut ll = -0.5 * count * quad(prior_mean);
    for (z, w) in descriptors.iter().zip(weights) {
        ll -= 0.5 * w * quad(z);
    }
    ll
}

/// Top/bottom `n` patch indices from a full descending sort. The sort is
/// stable, so among equal similarities the lower index ranks higher; the
/// domain set is the tail of that order. `tokens` row 0 is the class token.
pub fn token_split_by_sort(tokens: &Matrix, n: usize) -> (Vec<usize>, Vec<usize>) {
    let cls = tokens.row(0);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut sims: Vec<(usize, f64)> = (1..tokens.rows())
        .map(|i| {
            let p = tokens.row(i);
            let denom = norm(cls) * norm(p);
            let s = if denom == 0.0 {
                0.0
            } else {
                cls.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / denom
            };
            (i - 1, s)
        })
        .collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1));
    let task = sims[..n].iter().map(|p| p.0).collect();
    let domain = sims[sims.len() - n..].iter().map(|p| p.0).collect();
    (task, domain)
}

/// Per-token `Σ α_i σ(z W_down_i) W_up_i` with explicit loops.
pub fn moe_token(
    router_weight: &Matrix,
    router_bias: &[f64],
    experts: &[(Matrix, Matrix)],
    activation: fn(f64) -> f64,
    z: &[f64],
) -> Vec<f64> {
    let m = router_weight.rows();
    let d = z.len();
    let logits: Vec<f64> = (0..m)
        .map(|i| (0..d).map(|j| router_weight[(i, j)] * z[j]).sum::<f64>() + router_bias[i])
        .collect();
    let denom: f64 = logits.iter().map(|v| v.exp()).sum();
    let mut out = vec![0.0; d];
    for (i, (down, up)) in experts.iter().enumerate() {
        let alpha = logits[i].exp() / denom;
        let r = down.cols();
        let hidden: Vec<f64> = (0..r)
            .map(|k| activation((0..d).map(|j| z[j] * down[(j, k)]).sum()))
            .collect();
        for (j, o) in out.iter_mut().enumerate() {
            *o += alpha * (0..r).map(|k| hidden[k] * up[(k, j)]).sum::<f64>();
        }
    }
    out
}
