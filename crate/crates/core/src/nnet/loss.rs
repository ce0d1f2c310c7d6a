use crate::corpus::PAD_ID;
use crate::error::{Error, Result};

use super::kernels::log_softmax_in_place;

/// Label-smoothed cross entropy over rows of `logits`, overwritten with the
/// gradient of the summed loss. Returns `(loss_sum, nll_sum)`.
///
/// Per token the loss is `-(1-ε)·log p[y] - (ε/V)·Σ log p[v]`, whose gradient
/// is `softmax - ((1-ε)·onehot(y) + ε/V)`.
pub(crate) fn smoothed_loss_rows(logits: &mut [f64], targets: &[u32], vocab: usize, eps: f64) -> (f64, f64) {
    let mut loss = 0.0;
    let mut nll = 0.0;
    let uniform = eps / vocab as f64;
    for (row, &y) in logits.chunks_exact_mut(vocab).zip(targets) {
        log_softmax_in_place(row);
        let lp_y = row[y as usize];
        let mean_lp: f64 = row.iter().sum::<f64>();
        loss += -(1.0 - eps) * lp_y - uniform * mean_lp;
        nll -= lp_y;
        for v in row.iter_mut() {
            *v = v.exp() - uniform;
        }
        row[y as usize] -= 1.0 - eps;
    }
    (loss, nll)
}

/// Mean label-smoothed loss over the non-padding positions of `targets` and
/// its gradient with respect to `logits` (`targets.len() × vocab`).
pub fn label_smoothed_loss(logits: &[f64], targets: &[u32], vocab: usize, smoothing: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() * vocab {
        return Err(Error::Data("logits and targets disagree in shape".into()));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing must be in [0, 1), got {smoothing}")));
    }
    let keep: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != PAD_ID).collect();
    if keep.is_empty() {
        return Err(Error::Data("reference contains only padding".into()));
    }
    if let Some(&i) = keep.iter().find(|&&i| targets[i] as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id: targets[i], vocab });
    }
    let mut rows: Vec<f64> = keep.iter().flat_map(|&i| logits[i * vocab..(i + 1) * vocab].iter().copied()).collect();
    let ys: Vec<u32> = keep.iter().map(|&i| targets[i]).collect();
    let (loss, _) = smoothed_loss_rows(&mut rows, &ys, vocab, smoothing);
    let n = keep.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    for (k, &i) in keep.iter().enumerate() {
        for (g, r) in grad[i * vocab..(i + 1) * vocab].iter_mut().zip(&rows[k * vocab..(k + 1) * vocab]) {
            *g = r / n;
        }
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_loss_matches_closed_form() {
        // V = 4, logits (2,0,0,0), reference 0, ε = 0.1
        let z = 2f64.exp() + 3.0;
        let lp0 = 2.0 - z.ln();
        let lpo = -z.ln();
        let want = -(0.9 * lp0) - 0.025 * (lp0 + 3.0 * lpo);
        let mut row = vec![2.0, 0.0, 0.0, 0.0];
        let (loss, _) = smoothed_loss_rows(&mut row, &[0], 4, 0.1);
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }

    #[test]
    fn gradient_is_softmax_minus_smoothed_target() {
        let mut row = vec![2.0, 0.0, 0.0, 0.0];
        smoothed_loss_rows(&mut row, &[0], 4, 0.1);
        let z = 2f64.exp() + 3.0;
        let p = [2f64.exp() / z, 1.0 / z, 1.0 / z, 1.0 / z];
        let want = [p[0] - 0.925, p[1] - 0.025, p[2] - 0.025, p[3] - 0.025];
        for (g, w) in row.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!(row.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn padding_is_ignored_and_all_padding_rejected() {
        let logits = [0.5, 1.0, -1.0, 0.0, 0.3, 0.3, 0.3, 0.3];
        let (a, g) = label_smoothed_loss(&logits, &[PAD_ID, 2], 4, 0.1).unwrap();
        let (b, _) = label_smoothed_loss(&logits[4..], &[2], 4, 0.1).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(g[..4].iter().all(|&x| x == 0.0));
        assert!(label_smoothed_loss(&logits, &[PAD_ID, PAD_ID], 4, 0.1).is_err());
    }

    #[test]
    fn zero_smoothing_is_nll() {
        let mut row = vec![0.1, 0.7, -0.2];
        let (l, n) = smoothed_loss_rows(&mut row, &[1], 3, 0.0);
        assert_eq!(l, n);
    }
}
