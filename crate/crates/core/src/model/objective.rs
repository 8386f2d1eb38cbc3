//! Joint training objective: per-sequence recognition NLL plus
//! class-balanced per-pixel segmentation cross-entropy,
//! L = L_rec + λ·L_seg.

use crate::tensor::{Scalar, Tensor};
use crate::vocab::SEG_CLASSES;

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Scalar loss components for one step; `total == rec + λ·seg` exactly in
/// the working precision.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_seg: f64,
    pub lambda: f64,
}

pub fn total_loss<T: Scalar>(rec: T, seg: T, lambda: f64) -> LossReport {
    let lam = T::from_f64(lambda);
    let total = rec + lam * seg;
    LossReport {
        loss_total: total.as_f64(),
        loss_rec: rec.as_f64(),
        loss_seg: seg.as_f64(),
        lambda,
    }
}

/// Mean over the batch of (1/T_n)·Σ_t −log p(y_t); positions beyond each
/// target's length (padding) contribute neither loss nor gradient.
/// Returns the scalar loss and dloss/dlogits.
pub fn recognition_loss<T: Scalar>(
    logits: &Tensor<T>, targets: &[Vec<usize>],
) -> Result<(T, Tensor<T>), LossError> {
    let (n, t_pad, k) = logits.dims3();
    if targets.len() != n {
        return Err(LossError::LengthMismatch(format!(
            "{n} logit rows vs {} target sequences",
            targets.len()
        )));
    }
    for s in targets {
        if s.is_empty() || s.len() > t_pad {
            return Err(LossError::LengthMismatch(format!(
                "target length {} outside 1..={}",
                s.len(),
                t_pad
            )));
        }
    }
    let mut dlogits = Tensor::zeros(logits.shape.clone());
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = T::zero();
    let mut row_p = vec![T::zero(); k];
    for (ni, target) in targets.iter().enumerate() {
        let inv_t = T::from_f64(1.0 / target.len() as f64);
        let mut sample = T::zero();
        for (t, &y) in target.iter().enumerate() {
            assert!(y < k, "target class {y} out of range {k}");
            let o = (ni * t_pad + t) * k;
            let row = &logits.data[o..o + k];
            // stable log-softmax
            let mut m = T::neg_infinity();
            for &v in row {
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::zero();
            for (p, &v) in row_p.iter_mut().zip(row.iter()) {
                *p = (v - m).exp();
                sum = sum + *p;
            }
            let log_z = sum.ln() + m;
            sample = sample + (log_z - row[y]);
            let g = inv_t * inv_n;
            let inv_sum = T::one() / sum;
            for (c, &p) in row_p.iter().enumerate() {
                dlogits.data[o + c] = p * inv_sum * g;
            }
            dlogits.data[o + y] = dlogits.data[o + y] - g;
        }
        loss = loss + sample * inv_t;
    }
    Ok((loss * inv_n, dlogits))
}

/// Mean over the batch of −(1/(H·W))·Σ_p w_p·log softmax(M)_{gt_p}; softmax
/// runs over the class channels at each pixel. Returns (loss, dloss/dM).
pub fn segmentation_loss<T: Scalar>(
    m: &Tensor<T>, gts: &[&[u8]], weights: &[Tensor<T>],
) -> Result<(T, Tensor<T>), LossError> {
    let (n, k, h, w) = m.dims4();
    if k != SEG_CLASSES {
        return Err(LossError::ShapeMismatch(format!("expected {SEG_CLASSES} channels, got {k}")));
    }
    if gts.len() != n || weights.len() != n {
        return Err(LossError::ShapeMismatch(format!(
            "{n} maps vs {} masks / {} weight maps",
            gts.len(),
            weights.len()
        )));
    }
    let hw = h * w;
    for (gt, wt) in gts.iter().zip(weights.iter()) {
        if gt.len() != hw || wt.len() != hw {
            return Err(LossError::ShapeMismatch(format!(
                "mask/weight size {}/{} vs {hw} pixels",
                gt.len(),
                wt.len()
            )));
        }
    }
    let mut dm = Tensor::zeros(m.shape.clone());
    let inv_n = T::from_f64(1.0 / n as f64);
    let inv_hw = T::from_f64(1.0 / hw as f64);
    let mut loss = T::zero();
    let mut probs = vec![T::zero(); k];
    for ni in 0..n {
        let mut sample = T::zero();
        for p in 0..hw {
            let base = ni * k * hw + p;
            let mut mx = T::neg_infinity();
            for c in 0..k {
                let v = m.data[base + c * hw];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for (c, pb) in probs.iter_mut().enumerate() {
                *pb = (m.data[base + c * hw] - mx).exp();
                sum = sum + *pb;
            }
            let y = gts[ni][p] as usize;
            assert!(y < k, "mask class {y} out of range {k}");
            let wt = weights[ni].data[p];
            let log_z = sum.ln() + mx;
            sample = sample + wt * (log_z - m.data[base + y * hw]);
            let g = wt * inv_hw * inv_n;
            let inv_sum = T::one() / sum;
            for (c, &pb) in probs.iter().enumerate() {
                dm.data[base + c * hw] = pb * inv_sum * g;
            }
            dm.data[base + y * hw] = dm.data[base + y * hw] - g;
        }
        loss = loss + sample * inv_hw;
    }
    Ok((loss * inv_n, dm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{EOS, REC_CLASSES};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = r.gen_range(-2.0..2.0);
        }
        t
    }

    #[test]
    fn uniform_logits_cost_ln_vocab() {
        let logits = Tensor::<f64>::full(vec![2, 5, REC_CLASSES], 0.3);
        let targets = vec![vec![4, 9, EOS], vec![11, 2, 7, 40, EOS]];
        let (loss, _) = recognition_loss(&logits, &targets).unwrap();
        assert!((loss - (REC_CLASSES as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn near_one_hot_logits_cost_near_zero() {
        let targets = vec![vec![4usize, 9, EOS]];
        let mut logits = Tensor::<f64>::zeros(vec![1, 3, REC_CLASSES]);
        for (t, &y) in targets[0].iter().enumerate() {
            logits.data[t * REC_CLASSES + y] = 50.0;
        }
        let (loss, _) = recognition_loss(&logits, &targets).unwrap();
        assert!(loss >= 0.0 && loss < 1e-8);
    }

    #[test]
    fn recognition_matches_scalar_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let logits = randt(&mut r, vec![3, 6, REC_CLASSES]);
        let targets = vec![vec![5, EOS], vec![20, 33, 67, 1, 8, EOS], vec![EOS]];
        let (loss, _) = recognition_loss(&logits, &targets).unwrap();
        // independent oracle: direct probability normalization per position
        let mut want = 0.0;
        for (ni, tg) in targets.iter().enumerate() {
            let mut s = 0.0;
            for (t, &y) in tg.iter().enumerate() {
                let row = &logits.data[(ni * 6 + t) * REC_CLASSES..(ni * 6 + t + 1) * REC_CLASSES];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                s += -(row[y].exp() / z).ln();
            }
            want += s / tg.len() as f64;
        }
        want /= targets.len() as f64;
        assert!((loss - want).abs() < 1e-6);
    }

    #[test]
    fn padded_positions_carry_no_loss_or_gradient() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let logits = randt(&mut r, vec![1, 8, REC_CLASSES]);
        let targets = vec![vec![3usize, EOS]];
        let (loss, dl) = recognition_loss(&logits, &targets).unwrap();
        let mut noisy = logits.clone();
        for t in 2..8 {
            for c in 0..REC_CLASSES {
                noisy.data[t * REC_CLASSES + c] += r.gen_range(-5.0..5.0);
            }
        }
        let (loss2, _) = recognition_loss(&noisy, &targets).unwrap();
        assert_eq!(loss, loss2);
        for t in 2..8 {
            for c in 0..REC_CLASSES {
                assert_eq!(dl.data[t * REC_CLASSES + c], 0.0);
            }
        }
    }

    #[test]
    fn recognition_length_mismatch_is_an_error() {
        let logits = Tensor::<f64>::zeros(vec![2, 4, REC_CLASSES]);
        assert!(matches!(
            recognition_loss(&logits, &[vec![EOS]]),
            Err(LossError::LengthMismatch(_))
        ));
        assert!(matches!(
            recognition_loss(&logits, &[vec![1; 9], vec![EOS]]),
            Err(LossError::LengthMismatch(_))
        ));
    }

    #[test]
    fn weighted_hand_case_on_a_2x2_map() {
        // uniform logits; one foreground pixel (w = 3) + three background
        // (w = 1) → loss = (1/4)·(3+1+1+1)·ln(K)
        let m = Tensor::<f64>::zeros(vec![1, SEG_CLASSES, 2, 2]);
        let gt: Vec<u8> = vec![7, 0, 0, 0];
        let weights = crate::data::compute_pixel_weights::<f64>(&gt, 2, 2).unwrap();
        assert_eq!(weights.data, vec![3.0, 1.0, 1.0, 1.0]);
        let (loss, _) = segmentation_loss(&m, &[&gt], &[weights]).unwrap();
        let want = 0.25 * 6.0 * (SEG_CLASSES as f64).ln();
        assert!((loss - want).abs() < 1e-12, "got {loss}, want {want}");
    }

    #[test]
    fn perfect_segmentation_costs_near_zero() {
        let gt: Vec<u8> = vec![7, 0, 0, 5];
        let mut m = Tensor::<f64>::zeros(vec![1, SEG_CLASSES, 2, 2]);
        for (p, &y) in gt.iter().enumerate() {
            m.data[y as usize * 4 + p] = 60.0;
        }
        let weights = crate::data::compute_pixel_weights::<f64>(&gt, 2, 2).unwrap();
        let (loss, _) = segmentation_loss(&m, &[&gt], &[weights]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-8);
    }

    #[test]
    fn unit_weights_reduce_to_plain_cross_entropy() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let m = randt(&mut r, vec![1, SEG_CLASSES, 4, 4]);
        let gt: Vec<u8> = vec![0; 16];
        let ones = Tensor::<f64>::full(vec![4, 4], 1.0);
        let (loss, _) = segmentation_loss(&m, &[&gt], &[ones]).unwrap();
        let mut want = 0.0;
        for p in 0..16 {
            let z: f64 = (0..SEG_CLASSES).map(|c| m.data[c * 16 + p].exp()).sum();
            want += -(m.data[p].exp() / z).ln();
        }
        want /= 16.0;
        assert!((loss - want).abs() < 1e-9);
    }

    #[test]
    fn pixel_permutation_leaves_the_value_unchanged() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let m = randt(&mut r, vec![1, SEG_CLASSES, 4, 8]);
        let gt: Vec<u8> = (0..32).map(|i| if i % 3 == 0 { (i % 60 + 1) as u8 } else { 0 }).collect();
        let weights = crate::data::compute_pixel_weights::<f64>(&gt, 4, 8).unwrap();
        let (loss, _) = segmentation_loss(&m, &[&gt], &[weights.clone()]).unwrap();
        // apply one fixed permutation to pixels of all three inputs
        let perm: Vec<usize> = (0..32).map(|i| (i * 13 + 5) % 32).collect();
        let mut m2 = m.clone();
        let mut gt2 = gt.clone();
        let mut w2 = weights.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..SEG_CLASSES {
                m2.data[c * 32 + dst] = m.data[c * 32 + src];
            }
            gt2[dst] = gt[src];
            w2.data[dst] = weights.data[src];
        }
        let (loss2, _) = segmentation_loss(&m2, &[&gt2], &[w2]).unwrap();
        assert!((loss - loss2).abs() < 1e-9);
    }

    #[test]
    fn segmentation_shape_mismatch_is_an_error() {
        let m = Tensor::<f64>::zeros(vec![1, SEG_CLASSES, 2, 2]);
        let gt: Vec<u8> = vec![0, 1, 0];
        let w = Tensor::<f64>::full(vec![2, 2], 1.0);
        assert!(matches!(
            segmentation_loss(&m, &[&gt], &[w.clone()]),
            Err(LossError::ShapeMismatch(_))
        ));
        let bad = Tensor::<f64>::zeros(vec![1, 5, 2, 2]);
        let gt4: Vec<u8> = vec![0, 1, 0, 2];
        assert!(matches!(
            segmentation_loss(&bad, &[&gt4], &[w]),
            Err(LossError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn total_is_exactly_rec_plus_lambda_seg() {
        let r = total_loss(1.0f64, 2.0, 1.0);
        assert_eq!(r.loss_total, 3.0);
        let r = total_loss(0.7f64, 5.0, 0.0);
        assert_eq!(r.loss_total, 0.7);
        let r = total_loss(0.0f64, 1.3, 0.5);
        assert_eq!(r.loss_total, 0.5 * 1.3);
        // bit-exactness in f32 as well
        let rec = 0.1f32;
        let seg = 0.37f32;
        let r = total_loss(rec, seg, 1.0);
        assert_eq!(r.loss_total, (rec + seg) as f64);
    }

    #[test]
    fn recognition_gradient_matches_fd() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let logits = randt(&mut r, vec![2, 4, REC_CLASSES]);
        let targets = vec![vec![3usize, 60, EOS], vec![12, EOS]];
        let (_, dl) = recognition_loss(&logits, &targets).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..logits.len()).step_by(17) {
            let mut p = logits.clone();
            p.data[i] += h;
            let mut m = logits.clone();
            m.data[i] -= h;
            let fd = (recognition_loss(&p, &targets).unwrap().0
                - recognition_loss(&m, &targets).unwrap().0)
                / (2.0 * h);
            let scale = fd.abs().max(dl.data[i].abs()).max(1e-6);
            worst = worst.max((fd - dl.data[i]).abs() / scale);
        }
        assert!(worst < 1e-4, "recognition grad rel err {worst}");
    }

    #[test]
    fn segmentation_gradient_matches_fd() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let m = randt(&mut r, vec![1, SEG_CLASSES, 2, 4]);
        let gt: Vec<u8> = vec![0, 3, 0, 0, 9, 0, 0, 1];
        let weights = crate::data::compute_pixel_weights::<f64>(&gt, 2, 4).unwrap();
        let (_, dm) = segmentation_loss(&m, &[&gt], &[weights.clone()]).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..m.len()).step_by(23) {
            let mut p = m.clone();
            p.data[i] += h;
            let mut q = m.clone();
            q.data[i] -= h;
            let fd = (segmentation_loss(&p, &[&gt], &[weights.clone()]).unwrap().0
                - segmentation_loss(&q, &[&gt], &[weights.clone()]).unwrap().0)
                / (2.0 * h);
            let scale = fd.abs().max(dm.data[i].abs()).max(1e-6);
            worst = worst.max((fd - dm.data[i]).abs() / scale);
        }
        assert!(worst < 1e-4, "segmentation grad rel err {worst}");
    }
}
