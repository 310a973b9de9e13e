use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean softmax cross-entropy over the batch. `logits` is `(n, classes, 1, 1)`.
///
/// Returns the loss and `(softmax - onehot) / n`.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let classes = s.sample();
    if labels.len() != s.n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let n = T::from_usize(s.n).expect("batch fits");
    let mut grad = Tensor::zeros(s);
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        let log_z = max + sum.ln();
        total = total + (log_z - row[label]);
        let g = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (j, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - log_z).exp();
            let target = if j == label { T::one() } else { T::zero() };
            *gv = (p - target) / n;
        }
    }
    Ok((total / n, grad))
}

/// Index of the largest logit per sample.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape().sample();
    logits
        .data()
        .chunks_exact(classes.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::<f64>::full(Shape::new(3, 4, 1, 1), 0.7);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 2, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_margin_gives_near_zero_loss() {
        let logits =
            Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), vec![0.0, 800.0, -5.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.abs() < 1e-300);
        assert!(grad.all_finite());
    }

    #[test]
    fn rejects_out_of_range_label() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::<f64>::from_fn(Shape::new(3, 5, 1, 1), |i| {
            ((i * 37 % 11) as f64 - 5.0) * 0.4
        });
        let labels = [4, 0, 2];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-5;
        for i in 0..logits.numel() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (softmax_cross_entropy(&p, &labels).unwrap().0
                - softmax_cross_entropy(&m, &labels).unwrap().0)
                / (2.0 * eps);
            let an = grad.data()[i];
            assert!((fd - an).abs() / 1f64.max(fd.abs()).max(an.abs()) < 1e-6);
        }
    }

    #[test]
    fn argmax_picks_largest() {
        let logits =
            Tensor::<f32>::from_vec(Shape::new(2, 3, 1, 1), vec![0.1, 0.5, 0.2, 3.0, -1.0, 2.0])
                .unwrap();
        assert_eq!(argmax_rows(&logits), vec![1, 0]);
    }
}
