/// Central-difference gradient `(f(θ+h·e_k) − f(θ−h·e_k)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = f(&probe);
        probe[k] = orig - h;
        let down = f(&probe);
        probe[k] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}
