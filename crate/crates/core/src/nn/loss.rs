//! Softmax, cross-entropy and distillation losses with logit gradients.
//!
//! Every loss returns its batch mean together with d(mean loss)/d(logits).

use ndarray::{Array2, ArrayView1};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn log_softmax_row(row: ArrayView1<f32>) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Row-wise softmax in f64.
pub fn softmax_rows(logits: &Array2<f32>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(logits.raw_dim());
    for (src, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        for (d, l) in dst.iter_mut().zip(log_softmax_row(src)) {
            *d = l.exp();
        }
    }
    out
}

/// Softmax at temperature `t`.
pub fn softmax_rows_t(logits: &Array2<f32>, t: f64) -> Array2<f64> {
    softmax_rows(&logits.mapv(|v| (v as f64 / t) as f32))
}

/// Per-sample cross-entropy `-log p(y|x)`.
pub fn cross_entropy_per_sample(logits: &Array2<f32>, labels: &[usize]) -> Vec<f64> {
    logits.rows().into_iter().zip(labels).map(|(row, &y)| -log_softmax_row(row)[y]).collect()
}

/// Mean cross-entropy and its logit gradient.
pub fn cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    let n = logits.nrows().max(1) as f64;
    let mut grad = Array2::<f32>::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((row, &y), mut g) in logits.rows().into_iter().zip(labels).zip(grad.rows_mut()) {
        let ls = log_softmax_row(row);
        total -= ls[y];
        for (k, (gk, l)) in g.iter_mut().zip(&ls).enumerate() {
            let target = if k == y { 1.0 } else { 0.0 };
            *gk = ((l.exp() - target) / n) as f32;
        }
    }
    (total / n, grad)
}

/// Distillation towards teacher probabilities: mean `KL(teacher || student_T)`
/// where the student distribution is taken at temperature `t`.
pub fn distillation_kl(student: &Array2<f32>, teacher: &Array2<f64>, t: f64) -> (f64, Array2<f32>) {
    let n = student.nrows().max(1) as f64;
    let mut grad = Array2::<f32>::zeros(student.raw_dim());
    let mut total = 0.0;
    for ((row, trow), mut g) in student.rows().into_iter().zip(teacher.rows()).zip(grad.rows_mut()) {
        let scaled = row.mapv(|v| (v as f64 / t) as f32);
        let ls = log_softmax_row(scaled.view());
        for ((gk, l), &pt) in g.iter_mut().zip(&ls).zip(trow) {
            if pt > 0.0 {
                total += pt * (pt.max(PROB_FLOOR).ln() - l);
            }
            *gk = ((l.exp() - pt) / (t * n)) as f32;
        }
    }
    (total / n, grad)
}

/// Cross-entropy `H(p, q) = -sum_k p_k log q_k` with `q` floored at [`PROB_FLOOR`].
pub fn cross_entropy_between(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    -p.iter().zip(q).map(|(&pk, &qk)| pk * qk.max(PROB_FLOOR).ln()).sum::<f64>()
}

pub fn entropy(p: ArrayView1<f64>) -> f64 {
    cross_entropy_between(p, p)
}
