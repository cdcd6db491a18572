//! Reconstruction and classification losses with their gradients.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
pub fn mse_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            layer: None,
            expected: format!("{:?}", target.shape()),
            actual: pred.shape().to_vec(),
        });
    }
    let count = T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut sum = T::ZERO;
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let r = p - t;
            sum += r * r;
            two * r / count
        })
        .collect();
    Ok((sum / count, Tensor::from_vec(pred.shape(), grad)?))
}

/// Row-wise softmax of `(N, K, 1, 1)` logits, max-shifted for stability.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.item_len();
    let mut out = logits.clone();
    if k == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(k) {
        let max = row
            .iter()
            .copied()
            .fold(row[0], |m, v| if v > m { v } else { m });
        let mut z = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Mean negative log-likelihood of the true classes and its gradient
/// `(softmax - onehot) / N` w.r.t. the logits.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [n, k, h, w] = logits.shape();
    if h != 1 || w != 1 || labels.len() != n {
        return Err(Error::ShapeMismatch {
            layer: None,
            expected: format!("[{}, K, 1, 1] logits", labels.len()),
            actual: logits.shape().to_vec(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let nf = T::from_f64(n as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = T::ZERO;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.item(i);
        let max = row
            .iter()
            .copied()
            .fold(row[0], |m, v| if v > m { v } else { m });
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            let onehot = if j == label { T::ONE } else { T::ZERO };
            *gv = (p - onehot) / nf;
        }
    }
    Ok((loss / nf, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![0.1, -2.0, 5.0]).unwrap();
        let (loss, grad) = mse_loss(&x, &x).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_hand_values() {
        let p = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let t = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let (loss, grad) = mse_loss(&p, &t).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grad.data(), &[-1.0, 0.0]);
    }

    #[test]
    fn mse_shape_mismatch() {
        let a = Tensor::<f32>::zeros([1, 1, 1, 2]);
        let b = Tensor::<f32>::zeros([1, 1, 2, 1]);
        assert!(mse_loss(&a, &b).is_err());
    }

    #[test]
    fn symmetric_logits_give_ln2() {
        let logits = Tensor::<f64>::zeros([1, 2, 1, 1]);
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(softmax(&logits).data(), &[0.5, 0.5]);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros([1, 2, 1, 1]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn huge_logits_stay_finite() {
        let logits = Tensor::<f32>::from_vec([1, 3, 1, 1], vec![1e4, -1e4, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.is_finite() && grad.all_finite());
    }
}
