//! Losses on logits laid out `N×O×S…` (class axis second). Every loss
//! returns its value and the gradient with respect to the logits.

use super::Tensor;
use crate::hsicube::IGNORE;
use crate::{Error, Result};

/// Clamp for logarithms of probabilities.
const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Tensor,
}

/// `(n, classes, spatial)` of a logit tensor.
fn dims(logits: &Tensor) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() < 2 || s[1] == 0 {
        return Err(Error::DimensionMismatch(format!(
            "logits need a class axis, got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

fn check_targets(targets: &[u8], n: usize, o: usize, s: usize) -> Result<()> {
    if targets.len() != n * s {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {} logit positions",
            targets.len(),
            n * s
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t != IGNORE && t as usize >= o) {
        return Err(Error::InvalidData(format!("target {t} out of range for {o} classes")));
    }
    Ok(())
}

/// Softmax over the class axis.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, o, s) = dims(logits)?;
    let z = logits.data();
    let mut p = vec![0.0; z.len()];
    for b in 0..n {
        for j in 0..s {
            let at = |c: usize| (b * o + c) * s + j;
            let max = (0..o).map(|c| z[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..o {
                let e = (z[at(c)] - max).exp();
                p[at(c)] = e;
                sum += e;
            }
            for c in 0..o {
                p[at(c)] /= sum;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), p)
}

/// Mean cross-entropy over non-IGNORE positions, optionally class-weighted
/// (weighted mean).
pub fn cross_entropy(logits: &Tensor, targets: &[u8], weights: Option<&[f64]>) -> Result<LossOutput> {
    let (n, o, s) = dims(logits)?;
    check_targets(targets, n, o, s)?;
    if let Some(w) = weights {
        if w.len() != o {
            return Err(Error::DimensionMismatch(format!("{} class weights for {o} classes", w.len())));
        }
    }
    let p = softmax(logits)?;
    let mut grad = vec![0.0; p.len()];
    let mut total = 0.0;
    let mut norm = 0.0;
    for b in 0..n {
        for j in 0..s {
            let t = targets[b * s + j];
            if t == IGNORE {
                continue;
            }
            let w = weights.map_or(1.0, |w| w[t as usize]);
            let pt = p.data()[(b * o + t as usize) * s + j];
            total -= w * pt.max(LOG_EPS).ln();
            norm += w;
            for c in 0..o {
                let at = (b * o + c) * s + j;
                grad[at] = w * (p.data()[at] - if c == t as usize { 1.0 } else { 0.0 });
            }
        }
    }
    if norm > 0.0 {
        grad.iter_mut().for_each(|g| *g /= norm);
        total /= norm;
    }
    Ok(LossOutput {
        value: total,
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

/// `1 − mean soft Dice` over all positions of the batch. Only classes present
/// in the target or in the argmax prediction contribute.
pub fn dice_loss(logits: &Tensor, targets: &[u8]) -> Result<LossOutput> {
    let (n, o, s) = dims(logits)?;
    check_targets(targets, n, o, s)?;
    let p = softmax(logits)?;
    let pd = p.data();
    let mut inter = vec![0.0; o];
    let mut denom = vec![0.0; o];
    let mut present = vec![false; o];
    for b in 0..n {
        for j in 0..s {
            let t = targets[b * s + j];
            if t == IGNORE {
                continue;
            }
            let mut best = 0;
            for c in 0..o {
                let v = pd[(b * o + c) * s + j];
                denom[c] += v;
                if v > pd[(b * o + best) * s + j] {
                    best = c;
                }
            }
            present[best] = true;
            present[t as usize] = true;
            inter[t as usize] += pd[(b * o + t as usize) * s + j];
            denom[t as usize] += 1.0;
        }
    }
    let k = present.iter().filter(|&&v| v).count();
    if k == 0 {
        return Ok(LossOutput {
            value: 0.0,
            grad: Tensor::zeros(logits.shape().to_vec()),
        });
    }
    let mut mean_dice = 0.0;
    for c in 0..o {
        if present[c] {
            mean_dice += 2.0 * inter[c] / denom[c];
        }
    }
    mean_dice /= k as f64;
    let mut grad = vec![0.0; pd.len()];
    let mut gp = vec![0.0; o];
    for b in 0..n {
        for j in 0..s {
            let t = targets[b * s + j];
            if t == IGNORE {
                continue;
            }
            for c in 0..o {
                gp[c] = if present[c] {
                    let y = if c == t as usize { 1.0 } else { 0.0 };
                    -(2.0 * y * denom[c] - 2.0 * inter[c]) / (denom[c] * denom[c]) / k as f64
                } else {
                    0.0
                };
            }
            let dot: f64 = (0..o).map(|c| pd[(b * o + c) * s + j] * gp[c]).sum();
            for c in 0..o {
                let at = (b * o + c) * s + j;
                grad[at] = pd[at] * (gp[c] - dot);
            }
        }
    }
    Ok(LossOutput {
        value: 1.0 - mean_dice,
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

/// Mean `KL(q ‖ softmax)` with `q` laid out like the logits; every class
/// vector of `q` must sum to 1.
pub fn kl_divergence(logits: &Tensor, fuzzy: &[f64]) -> Result<LossOutput> {
    let (n, o, s) = dims(logits)?;
    if fuzzy.len() != logits.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} target values for {} logits",
            fuzzy.len(),
            logits.len()
        )));
    }
    let p = softmax(logits)?;
    let pd = p.data();
    let mut grad = vec![0.0; pd.len()];
    let mut total = 0.0;
    let m = (n * s) as f64;
    for b in 0..n {
        for j in 0..s {
            let sum: f64 = (0..o).map(|c| fuzzy[(b * o + c) * s + j]).sum();
            if (sum - 1.0).abs() > 1e-6 || (0..o).any(|c| fuzzy[(b * o + c) * s + j] < 0.0) {
                return Err(Error::InvalidData(format!("fuzzy target row sums to {sum}")));
            }
            for c in 0..o {
                let at = (b * o + c) * s + j;
                let q = fuzzy[at];
                if q > 0.0 {
                    total += q * (q.ln() - pd[at].max(LOG_EPS).ln());
                }
                grad[at] = (pd[at] - q) / m;
            }
        }
    }
    Ok(LossOutput {
        value: (total / m).max(0.0),
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

/// Equally weighted Dice and cross-entropy.
pub fn dice_ce(logits: &Tensor, targets: &[u8], weights: Option<&[f64]>) -> Result<LossOutput> {
    let d = dice_loss(logits, targets)?;
    let c = cross_entropy(logits, targets, weights)?;
    let grad: Vec<f64> = d
        .grad
        .data()
        .iter()
        .zip(c.grad.data())
        .map(|(a, b)| 0.5 * a + 0.5 * b)
        .collect();
    Ok(LossOutput {
        value: 0.5 * d.value + 0.5 * c.value,
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_softmax_cross_entropy_is_ln_classes() {
        let logits = Tensor::zeros(vec![3, 19]);
        let ce = cross_entropy(&logits, &[0, 5, 18], None).unwrap();
        assert!((ce.value - 19f64.ln()).abs() < 1e-12);
        assert!((ce.value - 2.944).abs() < 1e-3);
    }

    #[test]
    fn one_hot_prediction_limits() {
        let margin = 40.0;
        let logits = Tensor::new(vec![2, 3], vec![margin, 0.0, 0.0, 0.0, 0.0, margin]).unwrap();
        let ce = cross_entropy(&logits, &[0, 2], None).unwrap();
        assert!(ce.value < 1e-15);
        let d = dice_loss(&logits, &[0, 2]).unwrap();
        assert!(d.value < 1e-15);
        let kl = kl_divergence(&logits, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(kl.value < 1e-15);
    }

    #[test]
    fn ignored_positions_do_not_contribute() {
        let logits = Tensor::new(vec![2, 2], vec![1.0, -1.0, 3.0, 0.5]).unwrap();
        let a = cross_entropy(&logits, &[0, IGNORE], None).unwrap();
        let b = cross_entropy(&logits.slice_batch(0, 1), &[0], None).unwrap();
        assert!((a.value - b.value).abs() < 1e-15);
        assert!(a.grad.data()[2..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn equal_weights_match_unweighted() {
        let logits = Tensor::new(vec![3, 2], vec![0.3, -0.2, 1.0, 2.0, -1.0, 0.0]).unwrap();
        let a = cross_entropy(&logits, &[0, 1, 1], None).unwrap();
        let b = cross_entropy(&logits, &[0, 1, 1], Some(&[1.0, 1.0])).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn dice_of_perfect_match_is_global_minimum() {
        let targets = [0u8, 1, 2, 1];
        let mut z = vec![0.0; 12];
        for (i, &t) in targets.iter().enumerate() {
            z[i * 3 + t as usize] = 30.0;
        }
        let best = dice_ce(&Tensor::new(vec![4, 3], z.clone()).unwrap(), &targets, None).unwrap();
        for k in 0..12 {
            for d in [-3.0, 3.0] {
                let mut zz = z.clone();
                zz[k] += d;
                let v = dice_ce(&Tensor::new(vec![4, 3], zz).unwrap(), &targets, None).unwrap();
                assert!(v.value >= best.value - 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 2 * 7 * 3)) {
            let p = softmax(&Tensor::new(vec![2, 7, 3], vals).unwrap()).unwrap();
            for b in 0..2 {
                for j in 0..3 {
                    let s: f64 = (0..7).map(|c| p.data()[(b * 7 + c) * 3 + j]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn loss_ranges(vals in prop::collection::vec(-5.0f64..5.0, 12), t in prop::collection::vec(0u8..3, 4)) {
            let logits = Tensor::new(vec![4, 3], vals).unwrap();
            let d = dice_loss(&logits, &t).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(cross_entropy(&logits, &t, None).unwrap().value >= 0.0);
        }
    }
}
