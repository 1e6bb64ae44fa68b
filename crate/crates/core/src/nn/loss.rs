//! Losses over row-major logit matrices `[n × classes]`, returning the mean
//! loss and its gradient with respect to the logits.

/// Numerically stable log-softmax of one row, in f64.
pub fn log_softmax(row: &[f32], temperature: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 / temperature));
    let lse = max
        + row
            .iter()
            .map(|&v| (v as f64 / temperature - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|&v| v as f64 / temperature - lse).collect()
}

pub fn softmax(row: &[f32], temperature: f64) -> Vec<f64> {
    log_softmax(row, temperature).into_iter().map(f64::exp).collect()
}

/// Mean cross-entropy over rows and its gradient (already divided by `n`).
pub fn cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f64, Vec<f32>) {
    let n = labels.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0;
    for (r, (row, &y)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        let logp = log_softmax(row, 1.0);
        total -= logp[y];
        for k in 0..classes {
            let p = logp[k].exp();
            let target = if k == y { 1.0 } else { 0.0 };
            grad[r * classes + k] = ((p - target) / n as f64) as f32;
        }
    }
    (total / n as f64, grad)
}

/// `KL(softmax(z_s/T) ‖ softmax(z_t/T))` for one row and its gradient in `z_s`:
/// `p_j (log p_j − log q_j − KL) / T`.
pub fn kl_row(student: &[f32], teacher: &[f32], temperature: f64) -> (f64, Vec<f64>) {
    let logp = log_softmax(student, temperature);
    let logq = log_softmax(teacher, temperature);
    let kl: f64 = logp
        .iter()
        .zip(&logq)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum();
    let grad = logp
        .iter()
        .zip(&logq)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq - kl) / temperature)
        .collect();
    (kl.max(0.0), grad)
}

/// Weighted mean over rows of `KL(student ‖ teacher)`.
///
/// Row `r` uses `teachers[r]` and weight `weights[r]`; the mean divides by the
/// row count, so zero-weight rows still count toward the batch size.
pub fn kl_divergence(
    student: &[f32],
    teachers: &[&[f32]],
    weights: &[f64],
    classes: usize,
    temperature: f64,
) -> (f64, Vec<f32>) {
    let n = teachers.len();
    let mut grad = vec![0.0f32; student.len()];
    let mut total = 0.0;
    for (r, row) in student.chunks_exact(classes).enumerate() {
        if weights[r] == 0.0 {
            continue;
        }
        let (kl, g) = kl_row(row, teachers[r], temperature);
        total += weights[r] * kl;
        for k in 0..classes {
            grad[r * classes + k] = (weights[r] * g[k] / n as f64) as f32;
        }
    }
    (total / n as f64, grad)
}

/// Adds `scale · other` into `acc`.
pub fn accumulate(acc: &mut [f32], other: &[f32], scale: f32) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += scale * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_is_zero_with_zero_gradient_at_equality() {
        let z = [0.3f32, -1.2, 2.0, 0.0];
        let (kl, g) = kl_row(&z, &z, 2.0);
        assert!(kl.abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let s = [0.5f32, -0.7, 1.1];
        let t = [-0.2f32, 0.4, 0.9];
        let (_, g) = kl_row(&s, &t, 1.5);
        for j in 0..3 {
            let h = 1e-3f32;
            let mut up = s;
            up[j] += h;
            let mut down = s;
            down[j] -= h;
            let numeric = (kl_row(&up, &t, 1.5).0 - kl_row(&down, &t, 1.5).0) / (2.0 * h as f64);
            assert!((numeric - g[j]).abs() < 1e-4 * numeric.abs().max(1.0), "{numeric} vs {}", g[j]);
        }
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let logits = [0.0f32, 0.0, 0.0, 0.0];
        let (loss, grad) = cross_entropy(&logits, &[1], 4);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad[1] as f64 + 0.75).abs() < 1e-7);
        assert!((grad[0] as f64 - 0.25).abs() < 1e-7);
    }
}
