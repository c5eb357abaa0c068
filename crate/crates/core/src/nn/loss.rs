use super::tensor::{Scalar, Tensor2};

/// Mean cross-entropy of row-wise logits against integer labels.
///
/// Returns `(loss, dlogits, correct)` where `correct` counts rows whose
/// argmax equals the label.
pub fn cross_entropy<T: Scalar>(logits: &Tensor2<T>, labels: &[usize]) -> (T, Tensor2<T>, usize) {
    assert_eq!(logits.rows(), labels.len(), "one label per row");
    let n = T::c(labels.len().max(1) as f64);
    let mut grad = logits.clone();
    let mut loss = T::zero();
    let mut correct = 0;
    for (r, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        let (mut best, mut max) = (0, T::neg_infinity());
        for (i, v) in row.iter().enumerate() {
            if *v > max {
                max = *v;
                best = i;
            }
        }
        if best == y {
            correct += 1;
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += sum.ln() + max - logits.get(r, y);
        for v in row.iter_mut() {
            *v = *v / sum / n;
        }
        row[y] -= T::one() / n;
    }
    (loss / n, grad, correct)
}
