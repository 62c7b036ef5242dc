//! Training objectives: the contrastive InfoNCE term over in-batch
//! embeddings, cross-entropy for detection and explanation slots, the
//! BCE + Dice mask term, and their weighted combination.
//!
//! Each loss is available both as a tape operation (`*_node`) used by the
//! trainer and as a plain function over tensors.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::heads::{Explanation, SLOT_SIZES};
use crate::numerics::{Graph, NodeId, Tensor};

/// Additive smoothing in the Dice ratio; keeps the empty-mask case defined.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 0.5,
            lambda_bce: 2.0,
            lambda_dice: 1.0,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!("tau must be > 0, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_bce", self.lambda_bce),
            ("lambda_dice", self.lambda_dice),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_total: f64,
    pub l_pred: f64,
    pub l_cl: f64,
    pub l_t: f64,
    pub l_cls: f64,
    pub l_mask: f64,
    pub l_bce: f64,
    pub l_dice: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_total,
            self.l_pred,
            self.l_cl,
            self.l_t,
            self.l_cls,
            self.l_mask,
            self.l_bce,
            self.l_dice,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// The individually computed loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub l_t: f64,
    pub l_cls: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_cl: f64,
}

/// Combines the terms: mask = λ_bce·bce + λ_dice·dice,
/// pred = t + cls + mask, total = pred + λ_c·cl.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> LossBreakdown {
    let l_mask = w.lambda_bce * c.l_bce + w.lambda_dice * c.l_dice;
    let l_pred = c.l_t + c.l_cls + l_mask;
    LossBreakdown {
        l_total: l_pred + w.lambda_c * c.l_cl,
        l_pred,
        l_cl: c.l_cl,
        l_t: c.l_t,
        l_cls: c.l_cls,
        l_mask,
        l_bce: c.l_bce,
        l_dice: c.l_dice,
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("tau must be > 0, got {tau}")));
    }
    Ok(())
}

/// `s_ij = z_i·z_j / (τ‖z_i‖‖z_j‖)` for the rows of an N×d matrix.
pub fn similarity_matrix_node(g: &mut Graph, z: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let unit = g.normalize_rows(z)?;
    let s = g.matmul_nt(unit, unit)?;
    Ok(g.scale(s, 1.0 / tau))
}

pub fn similarity_matrix(z: &Tensor, tau: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let zn = g.constant(z.clone());
    let s = similarity_matrix_node(&mut g, zn, tau)?;
    Ok(g.value(s).clone())
}

/// InfoNCE where every row's positive is itself:
/// `−(1/N) Σ_i log softmax_j(s_ij)[i]`.
pub fn infonce_node(g: &mut Graph, z: NodeId, tau: f64) -> Result<NodeId> {
    let n = g.value(z).dims2()?.0;
    let s = similarity_matrix_node(g, z, tau)?;
    let logp = g.log_softmax_rows(s)?;
    let diag: Rc<[usize]> = (0..n).map(|i| i * n + i).collect();
    let pos = g.gather(logp, diag, &[n])?;
    let mean = g.mean(pos);
    Ok(g.scale(mean, -1.0))
}

pub fn infonce(z: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let zn = g.constant(z.clone());
    let l = infonce_node(&mut g, zn, tau)?;
    Ok(g.scalar(l))
}

/// InfoNCE between two views: row i of `a` is positive with row i of `b`,
/// negatives are the other rows of `b`.
pub fn infonce_two_view_node(g: &mut Graph, a: NodeId, b: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let n = g.value(a).dims2()?.0;
    let ua = g.normalize_rows(a)?;
    let ub = g.normalize_rows(b)?;
    let s = g.matmul_nt(ua, ub)?;
    let s = g.scale(s, 1.0 / tau);
    let logp = g.log_softmax_rows(s)?;
    let diag: Rc<[usize]> = (0..n).map(|i| i * n + i).collect();
    let pos = g.gather(logp, diag, &[n])?;
    let mean = g.mean(pos);
    Ok(g.scale(mean, -1.0))
}

pub(crate) fn mask_targets(mask: &[bool]) -> Rc<[f64]> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

fn check_mask(logits: &Tensor, mask: &[bool]) -> Result<()> {
    if logits.len() != mask.len() {
        return Err(Error::dim(format!(
            "logits {:?} vs mask of {} pixels",
            logits.shape(),
            mask.len()
        )));
    }
    Ok(())
}

/// Mean pixel-wise binary cross-entropy of mask logits.
pub fn bce_loss(logits: &Tensor, mask: &[bool]) -> Result<f64> {
    check_mask(logits, mask)?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = g.bce_logits(l, mask_targets(mask))?;
    Ok(g.scalar(out))
}

/// Smoothed soft Dice loss of mask logits, in `[0, 1]`.
pub fn dice_loss(logits: &Tensor, mask: &[bool]) -> Result<f64> {
    check_mask(logits, mask)?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = g.dice_logits(l, mask_targets(mask), DICE_EPS)?;
    Ok(g.scalar(out))
}

/// Cross-entropy of a logit vector against a class index.
pub fn cross_entropy_node(g: &mut Graph, logits: NodeId, class: usize) -> Result<NodeId> {
    let k = g.value(logits).len();
    if class >= k {
        return Err(Error::Data(format!("class {class} out of range for {k} logits")));
    }
    let row = g.reshape(logits, &[1, k])?;
    let logp = g.log_softmax_rows(row)?;
    let picked = g.gather(logp, vec![class].into(), &[1])?;
    Ok(g.scale(picked, -1.0))
}

/// Mean cross-entropy over the verdict, region and cue slots. `slot_logits`
/// is the concatenation of the three slot logit vectors.
pub fn text_loss_node(g: &mut Graph, slot_logits: NodeId, reference: &Explanation) -> Result<NodeId> {
    let total: usize = SLOT_SIZES.iter().sum();
    if g.value(slot_logits).len() != total {
        return Err(Error::dim(format!(
            "slot logits {:?}, expected {total} values",
            g.value(slot_logits).shape()
        )));
    }
    let targets = reference.slot_indices();
    let mut offset = 0;
    let mut terms = Vec::with_capacity(3);
    for (&size, &target) in SLOT_SIZES.iter().zip(&targets) {
        let idx: Rc<[usize]> = (offset..offset + size).collect();
        let slot = g.gather(slot_logits, idx, &[size])?;
        terms.push(cross_entropy_node(g, slot, target)?);
        offset += size;
    }
    let all = g.concat(&terms, &[terms.len()])?;
    Ok(g.mean(all))
}

pub fn text_loss(slot_logits: &Tensor, reference: &Explanation) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(slot_logits.clone());
    let out = text_loss_node(&mut g, l, reference)?;
    Ok(g.scalar(out))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::heads::{Cue, Region, Verdict};
    use crate::numerics::finite_diff_check;

    #[test]
    fn similarity_examples() {
        let unit = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let s = similarity_matrix(&unit, 1.0).unwrap();
        for i in 0..3 {
            assert!((s.at(&[i, i]) - 1.0).abs() < 1e-15);
        }
        let s = similarity_matrix(&unit, 0.5).unwrap();
        assert_eq!(s.at(&[0, 1]), 0.0);
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let s = similarity_matrix(&z, 1.0).unwrap();
        assert!((s.at(&[0, 1]) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn similarity_errors() {
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(similarity_matrix(&z, 1.0), Err(Error::DegenerateVector { .. })));
        let z = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(similarity_matrix(&z, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(infonce(&z, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn infonce_examples() {
        let one = Tensor::matrix(1, 3, vec![0.2, -0.4, 1.0]).unwrap();
        assert_eq!(infonce(&one, 0.07).unwrap(), 0.0);

        let ortho = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((infonce(&ortho, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((infonce(&ortho, 1.0).unwrap() - 0.31326).abs() < 1e-5);

        for n in [2usize, 4, 8, 16] {
            let same = Tensor::from_fn(&[n, 3], |i| [0.3, -1.2, 0.5][i % 3]);
            let l = infonce(&same, 0.07).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-9, "n={n}: {l}");
        }
    }

    #[test]
    fn bce_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.3)).collect();
        let zero = Tensor::zeros(&[8, 8]);
        assert!((bce_loss(&zero, &mask).unwrap() - 2f64.ln()).abs() < 1e-12);

        let high = Tensor::full(&[8, 8], 20.0);
        assert!(bce_loss(&high, &[true; 64]).unwrap() <= 1e-8);
        let wrong = bce_loss(&high, &[false; 64]).unwrap();
        assert!((wrong - (1.0 + 20f64.exp()).ln()).abs() < 1e-9);
        assert!(bce_loss(&high, &[false; 63]).is_err());
    }

    #[test]
    fn dice_examples() {
        let mask: Vec<bool> = (0..64).map(|i| i < 32).collect();
        let exact = Tensor::from_fn(&[8, 8], |i| if mask[i] { 40.0 } else { -40.0 });
        assert!(dice_loss(&exact, &mask).unwrap() <= 1e-6);

        let empty = Tensor::full(&[8, 8], -40.0);
        assert!(dice_loss(&empty, &[false; 64]).unwrap().abs() < 1e-12);

        // p ≡ 1, half the pixels true: 1 − 2·0.5/(1 + 0.5) once ε is negligible.
        let half: Vec<bool> = (0..1_000_000).map(|i| i % 2 == 0).collect();
        let ones = Tensor::full(&[1000, 1000], 40.0);
        assert!((dice_loss(&ones, &half).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        let small = Tensor::full(&[8, 8], 40.0);
        let with_eps = 1.0 - (2.0 * 32.0 + DICE_EPS) / (64.0 + 32.0 + DICE_EPS);
        assert!((dice_loss(&small, &mask).unwrap() - with_eps).abs() < 1e-12);
        assert!(dice_loss(&small, &mask[..10]).is_err());
    }

    #[test]
    fn text_loss_examples() {
        let reference = Explanation::new(Verdict::Tampered, Region::SouthEast, Cue::TextureMismatch).unwrap();
        let idx = reference.slot_indices();
        let total: usize = SLOT_SIZES.iter().sum();
        let mut logits = vec![-30.0; total];
        let mut off = 0;
        for (size, t) in SLOT_SIZES.iter().zip(idx) {
            logits[off + t] = 30.0;
            off += size;
        }
        assert!(text_loss(&Tensor::vector(logits), &reference).unwrap() <= 1e-6);

        let uniform = text_loss(&Tensor::zeros(&[total]), &reference).unwrap();
        let expected = SLOT_SIZES.iter().map(|&k| (k as f64).ln()).sum::<f64>() / 3.0;
        assert!((uniform - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let c = LossComponents {
            l_t: 0.2,
            l_cls: 0.3,
            l_bce: 0.1,
            l_dice: 0.4,
            l_cl: 0.6,
        };
        let b = total_loss(&c, &w);
        assert!((b.l_mask - 0.6).abs() < 1e-12);
        assert!((b.l_pred - 1.1).abs() < 1e-12);
        assert!((b.l_total - 1.4).abs() < 1e-12);

        let no_cl = total_loss(&c, &LossWeights { lambda_c: 0.0, ..w });
        assert_eq!(no_cl.l_total, no_cl.l_pred);
        assert_eq!(total_loss(&LossComponents::default(), &w).l_total, 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let z2 = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let logits = Tensor::uniform(&[6, 6], 2.0, &mut rng);
        let mask: Vec<bool> = (0..36).map(|_| rng.gen_bool(0.4)).collect();
        let total: usize = SLOT_SIZES.iter().sum();
        let slots = Tensor::uniform(&[total], 2.0, &mut rng);
        let reference = Explanation::new(Verdict::Tampered, Region::NorthWest, Cue::BoundaryDiscontinuity).unwrap();

        let r = finite_diff_check(&[z.clone()], 1e-5, 1e-3, |g, p| infonce_node(g, p[0], 0.5)).unwrap();
        assert!(r.passed, "infonce {r:?}");
        let r = finite_diff_check(&[z, z2], 1e-5, 1e-3, |g, p| infonce_two_view_node(g, p[0], p[1], 0.5)).unwrap();
        assert!(r.passed, "two-view {r:?}");
        let t = mask_targets(&mask);
        let r = finite_diff_check(&[logits.clone()], 1e-5, 1e-3, |g, p| g.bce_logits(p[0], t.clone())).unwrap();
        assert!(r.passed, "bce {r:?}");
        let r = finite_diff_check(&[logits], 1e-5, 1e-3, |g, p| g.dice_logits(p[0], t.clone(), DICE_EPS)).unwrap();
        assert!(r.passed, "dice {r:?}");
        let r = finite_diff_check(&[slots], 1e-5, 1e-3, |g, p| text_loss_node(g, p[0], &reference)).unwrap();
        assert!(r.passed, "text {r:?}");
    }

    fn rotation(d: usize, seed: u64) -> Tensor {
        // Gram–Schmidt on a random matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        while rows.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                rows.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        Tensor::matrix(d, d, rows.concat()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn infonce_rotation_invariant(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::uniform(&[n, 4], 1.0, &mut rng);
            let rotated = crate::numerics::matmul(&z, &rotation(4, seed ^ 9)).unwrap();
            let a = infonce(&z, 0.07).unwrap();
            let b = infonce(&rotated, 0.07).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn mask_losses_bounded_and_monotone(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask: Vec<bool> = (0..36).map(|_| rng.gen_bool(0.5)).collect();
            let noise: Vec<f64> = (0..36).map(|_| rng.gen_range(0.5..1.5)).collect();
            let mut prev: Option<(f64, f64)> = None;
            for mag in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
                let logits = Tensor::from_fn(&[6, 6], |i| {
                    let s = if mask[i] { 1.0 } else { -1.0 };
                    s * mag * noise[i]
                });
                let bce = bce_loss(&logits, &mask).unwrap();
                let dice = dice_loss(&logits, &mask).unwrap();
                prop_assert!(bce >= 0.0);
                prop_assert!((0.0..=1.0).contains(&dice));
                if let Some((pb, pd)) = prev {
                    prop_assert!(bce < pb);
                    prop_assert!(dice <= pd);
                }
                prev = Some((bce, dice));
            }
        }

        #[test]
        fn breakdown_identities(t in 0.0f64..5.0, c in 0.0f64..5.0, b in 0.0f64..5.0,
                                d in 0.0f64..1.0, cl in 0.0f64..5.0, lc in 0.0f64..2.0,
                                lb in 0.0f64..4.0, ld in 0.0f64..2.0) {
            let w = LossWeights { lambda_c: lc, lambda_bce: lb, lambda_dice: ld, tau: 0.07 };
            let r = total_loss(&LossComponents { l_t: t, l_cls: c, l_bce: b, l_dice: d, l_cl: cl }, &w);
            prop_assert!((r.l_total - (r.l_pred + lc * r.l_cl)).abs() <= 1e-12);
            prop_assert!((r.l_pred - (r.l_t + r.l_cls + r.l_mask)).abs() <= 1e-12);
            prop_assert!((r.l_mask - (lb * r.l_bce + ld * r.l_dice)).abs() <= 1e-12);
        }
    }
}
