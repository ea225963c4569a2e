//! Training objectives: masked feature distillation (MSE split over the
//! teacher's zero/non-zero elements), occupancy-mask BCE, offset L1,
//! penalty-reduced focal heatmap loss, heatmap distillation, and box
//! regression, plus the stage totals.
//!
//! Teacher quantities always enter as tape constants, so gradients are
//! structurally zero with respect to every teacher tensor.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::targets::ScaleTarget;
use crate::tensor::{Tape, Tensor, TensorId};

pub const LOG_EPS: f64 = 1e-12;
/// Focal exponents (penalty-reduced, center-based convention).
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
/// Teacher heatmap cells above this count as distillation peaks.
pub const DISTILL_PEAK_THRESH: f64 = 0.9;

/// Static loss weights: the non-empty/empty balance of the feature
/// distillation term and per-term multipliers of the student total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on teacher-non-zero elements.
    pub beta: f64,
    /// Weight on teacher-zero elements.
    pub gamma: f64,
    pub w_reg: f64,
    pub w_hm: f64,
    pub w_s2d: f64,
    pub w_mask: f64,
    pub w_offset: f64,
    pub w_hm_distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 10.0,
            gamma: 20.0,
            w_reg: 1.0,
            w_hm: 1.0,
            w_s2d: 1.0,
            w_mask: 1.0,
            w_offset: 1.0,
            w_hm_distill: 1.0,
        }
    }
}

fn same_shape(tape: &Tape, id: TensorId, t: &Tensor, what: &str) -> Result<()> {
    if tape.shape(id) != t.shape() {
        return Err(CoreError::shape(format!(
            "{what}: student {:?} vs teacher {:?}",
            tape.shape(id),
            t.shape()
        )));
    }
    Ok(())
}

/// One masked-MSE pair of the feature distillation loss:
/// `beta/|N| * sum_nonzero (s - t)^2 + gamma/|Nz| * sum_zero (s - t)^2`,
/// where non-zero/zero index the *teacher* feature by exact comparison
/// with 0.0. Empty index sets contribute nothing.
fn distill_pair(
    tape: &mut Tape,
    student: TensorId,
    teacher: &Tensor,
    weights: &LossWeights,
) -> Result<TensorId> {
    same_shape(tape, student, teacher, "feature distillation")?;
    let n_total = teacher.numel();
    let mut nz_mask = vec![0.0f64; n_total];
    let mut z_mask = vec![0.0f64; n_total];
    let mut n_nz = 0usize;
    for (i, v) in teacher.data().iter().enumerate() {
        if *v != 0.0 {
            nz_mask[i] = 1.0;
            n_nz += 1;
        } else {
            z_mask[i] = 1.0;
        }
    }
    let n_z = n_total - n_nz;
    let shape = teacher.shape().to_vec();
    let t = tape.constant(teacher.clone());
    let diff = tape.sub(student, t)?;
    let sq = tape.powi(diff, 2);
    let mut total = tape.constant(Tensor::scalar(0.0));
    if n_nz > 0 {
        let m = tape.constant(Tensor::new(shape.clone(), nz_mask));
        let masked = tape.mul(sq, m)?;
        let s = tape.sum(masked);
        let term = tape.scale(s, weights.beta / n_nz as f64);
        total = tape.add(total, term)?;
    }
    if n_z > 0 {
        let m = tape.constant(Tensor::new(shape, z_mask));
        let masked = tape.mul(sq, m)?;
        let s = tape.sum(masked);
        let term = tape.scale(s, weights.gamma / n_z as f64);
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Feature distillation loss over the fused-feature pair and, when the
/// densification block is active, the densified-feature pair.
pub fn feature_distill_loss(
    tape: &mut Tape,
    f_a_student: TensorId,
    f_a_teacher: &Tensor,
    f_b_pair: Option<(TensorId, &Tensor)>,
    weights: &LossWeights,
) -> Result<TensorId> {
    let mut total = distill_pair(tape, f_a_student, f_a_teacher, weights)?;
    if let Some((f_b_student, f_b_teacher)) = f_b_pair {
        let b = distill_pair(tape, f_b_student, f_b_teacher, weights)?;
        total = tape.add(total, b)?;
    }
    Ok(total)
}

/// Occupancy BCE with foreground reweighting:
/// `sum_j [ -(N_b/N_f) y_j log p_j - (1 - y_j) log(1 - p_j) ]`.
/// With no foreground voxels the foreground term is dropped.
pub fn occupancy_mask_loss(
    tape: &mut Tape,
    pred_mask: TensorId,
    target: &ScaleTarget,
) -> Result<TensorId> {
    let n = target.spec.num_voxels();
    if tape.value(pred_mask).numel() != n {
        return Err(CoreError::shape(format!(
            "mask loss: pred {:?} vs {n} voxels",
            tape.shape(pred_mask)
        )));
    }
    let shape = tape.shape(pred_mask).to_vec();
    let y: Vec<f64> = target.mask.iter().map(|m| *m as f64).collect();
    let inv_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let mut total = tape.constant(Tensor::scalar(0.0));
    if target.n_foreground > 0 {
        let w = target.n_background as f64 / target.n_foreground as f64;
        let logp = tape.log_clamped(pred_mask, LOG_EPS);
        let ym = tape.constant(Tensor::new(shape.clone(), y));
        let fg = tape.mul(ym, logp)?;
        let s = tape.sum(fg);
        let term = tape.scale(s, -w);
        total = tape.add(total, term)?;
    }
    let one_minus_p = tape.affine(pred_mask, -1.0, 1.0);
    let log1mp = tape.log_clamped(one_minus_p, LOG_EPS);
    let im = tape.constant(Tensor::new(shape, inv_y));
    let bg = tape.mul(im, log1mp)?;
    let s = tape.sum(bg);
    let term = tape.scale(s, -1.0);
    tape.add(total, term)
}

/// Mean over foreground voxels of the L1 norm (summed over xyz) of
/// `(P_offset + V_c) - P_gt`. Zero when there is no foreground.
pub fn offset_loss(tape: &mut Tape, p_offset: TensorId, target: &ScaleTarget) -> Result<TensorId> {
    let n = target.spec.num_voxels();
    if tape.value(p_offset).numel() != 3 * n {
        return Err(CoreError::shape(format!(
            "offset loss: pred {:?} vs 3x{n}",
            tape.shape(p_offset)
        )));
    }
    if target.n_foreground == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let shape = tape.shape(p_offset).to_vec();
    let centers = tape.constant(Tensor::new(shape.clone(), target.voxel_centers()));
    let gt = tape.constant(Tensor::new(shape.clone(), target.mean_points.clone()));
    let mut fg3 = vec![0.0f64; 3 * n];
    for c in 0..3 {
        for f in 0..n {
            fg3[c * n + f] = target.mask[f] as f64;
        }
    }
    let fg = tape.constant(Tensor::new(shape, fg3));
    let absolute = tape.add(p_offset, centers)?;
    let diff = tape.sub(absolute, gt)?;
    let l1 = tape.abs(diff);
    let masked = tape.mul(l1, fg)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, 1.0 / target.n_foreground as f64))
}

/// Shared penalty-reduced focal form. `peak_mask` selects peak cells,
/// `neg_weight` carries `(1-t)^4` on non-peak cells (zero on peaks), and
/// the sum is normalized by the number of peaks (at least 1).
fn focal_form(
    tape: &mut Tape,
    pred: TensorId,
    peak_mask: Tensor,
    neg_weight: Tensor,
    n_peaks: usize,
) -> Result<TensorId> {
    let logp = tape.log_clamped(pred, LOG_EPS);
    let one_minus_p = tape.affine(pred, -1.0, 1.0);
    let omp_sq = tape.powi(one_minus_p, FOCAL_ALPHA);
    let pos_core = tape.mul(omp_sq, logp)?;
    let pm = tape.constant(peak_mask);
    let pos = tape.mul(pos_core, pm)?;
    let pos_sum = tape.sum(pos);

    let log1mp = tape.log_clamped(one_minus_p, LOG_EPS);
    let p_sq = tape.powi(pred, FOCAL_ALPHA);
    let neg_core = tape.mul(p_sq, log1mp)?;
    let nw = tape.constant(neg_weight);
    let neg = tape.mul(neg_core, nw)?;
    let neg_sum = tape.sum(neg);

    let both = tape.add(pos_sum, neg_sum)?;
    Ok(tape.scale(both, -1.0 / n_peaks.max(1) as f64))
}

/// Center-style focal loss: peaks are exactly the `target == 1` cells;
/// other cells are weighted by `(1 - target)^4`.
pub fn focal_heatmap_loss(tape: &mut Tape, pred: TensorId, target: &Tensor) -> Result<TensorId> {
    same_shape(tape, pred, target, "focal heatmap")?;
    let mut peak = vec![0.0f64; target.numel()];
    let mut negw = vec![0.0f64; target.numel()];
    let mut n_peaks = 0usize;
    for (i, t) in target.data().iter().enumerate() {
        if *t == 1.0 {
            peak[i] = 1.0;
            n_peaks += 1;
        } else {
            negw[i] = (1.0 - t).powi(FOCAL_BETA);
        }
    }
    let shape = target.shape().to_vec();
    focal_form(
        tape,
        pred,
        Tensor::new(shape.clone(), peak),
        Tensor::new(shape, negw),
        n_peaks,
    )
}

/// Heatmap distillation: same functional form with the (frozen) teacher
/// heatmap as soft target; peaks are teacher cells above
/// [`DISTILL_PEAK_THRESH`].
pub fn heatmap_distill_loss(
    tape: &mut Tape,
    pred_student: TensorId,
    teacher_hm: &Tensor,
) -> Result<TensorId> {
    same_shape(tape, pred_student, teacher_hm, "heatmap distillation")?;
    let mut peak = vec![0.0f64; teacher_hm.numel()];
    let mut negw = vec![0.0f64; teacher_hm.numel()];
    let mut n_peaks = 0usize;
    for (i, t) in teacher_hm.data().iter().enumerate() {
        if *t > DISTILL_PEAK_THRESH {
            peak[i] = 1.0;
            n_peaks += 1;
        } else {
            negw[i] = (1.0 - t).powi(FOCAL_BETA);
        }
    }
    let shape = teacher_hm.shape().to_vec();
    focal_form(
        tape,
        pred_student,
        Tensor::new(shape.clone(), peak),
        Tensor::new(shape, negw),
        n_peaks,
    )
}

/// Mean absolute error over regression channels at ground-truth peak cells.
pub fn box_reg_loss(
    tape: &mut Tape,
    pred_reg: TensorId,
    target_reg: &Tensor,
    peak_mask: &Tensor,
) -> Result<TensorId> {
    same_shape(tape, pred_reg, target_reg, "box regression")?;
    let channels = target_reg.shape()[1];
    let plane: usize = target_reg.shape()[2..].iter().product();
    if peak_mask.numel() != plane {
        return Err(CoreError::shape("peak mask does not match regression plane"));
    }
    let n_peaks = peak_mask.data().iter().filter(|v| **v > 0.0).count();
    if n_peaks == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut mask_rep = vec![0.0f64; channels * plane];
    for c in 0..channels {
        for i in 0..plane {
            mask_rep[c * plane + i] = peak_mask.data()[i];
        }
    }
    let shape = target_reg.shape().to_vec();
    let t = tape.constant(target_reg.clone());
    let m = tape.constant(Tensor::new(shape, mask_rep));
    let diff = tape.sub(pred_reg, t)?;
    let l1 = tape.abs(diff);
    let masked = tape.mul(l1, m)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, 1.0 / (n_peaks * channels) as f64))
}

/// Per-term scalar values of one step, for logging.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub hm: f64,
    pub s2d: f64,
    pub mask: f64,
    pub offset: f64,
    pub hm_distill: f64,
    pub total: f64,
}

/// Term ids of the student total.
pub struct SdetLossParts {
    pub reg: TensorId,
    pub hm: TensorId,
    pub s2d: Option<TensorId>,
    pub mask: Option<TensorId>,
    pub offset: Option<TensorId>,
    pub hm_distill: Option<TensorId>,
}

/// Teacher total: regression + heatmap.
pub fn total_ddet(tape: &mut Tape, reg: TensorId, hm: TensorId) -> Result<(TensorId, LossBreakdown)> {
    let total = tape.add(reg, hm)?;
    let b = LossBreakdown {
        reg: tape.value(reg).item(),
        hm: tape.value(hm).item(),
        total: tape.value(total).item(),
        ..Default::default()
    };
    Ok((total, b))
}

/// Student total: weighted sum of all active terms.
pub fn total_sdet(
    tape: &mut Tape,
    parts: &SdetLossParts,
    w: &LossWeights,
) -> Result<(TensorId, LossBreakdown)> {
    let mut breakdown = LossBreakdown {
        reg: tape.value(parts.reg).item(),
        hm: tape.value(parts.hm).item(),
        ..Default::default()
    };
    let r = tape.scale(parts.reg, w.w_reg);
    let h = tape.scale(parts.hm, w.w_hm);
    let mut total = tape.add(r, h)?;
    if let Some(id) = parts.s2d {
        breakdown.s2d = tape.value(id).item();
        let t = tape.scale(id, w.w_s2d);
        total = tape.add(total, t)?;
    }
    if let Some(id) = parts.mask {
        breakdown.mask = tape.value(id).item();
        let t = tape.scale(id, w.w_mask);
        total = tape.add(total, t)?;
    }
    if let Some(id) = parts.offset {
        breakdown.offset = tape.value(id).item();
        let t = tape.scale(id, w.w_offset);
        total = tape.add(total, t)?;
    }
    if let Some(id) = parts.hm_distill {
        breakdown.hm_distill = tape.value(id).item();
        let t = tape.scale(id, w.w_hm_distill);
        total = tape.add(total, t)?;
    }
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::VoxelSpec;
    use crate::targets::build_targets;
    use crate::tensor::check::{grad_check, GRAD_CHECK_H, GRAD_CHECK_TOL};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    #[test]
    fn distill_zero_on_equal_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = randt(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let s = tape.leaf(t.clone());
        let l = feature_distill_loss(&mut tape, s, &t, None, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn distill_single_element_equals_beta() {
        // F_a^D = [1], F_a^S = [0], F_b pair equal: loss = 10 * (0-1)^2 / 1.
        let mut tape = Tape::new();
        let fa_s = tape.leaf(Tensor::scalar(0.0));
        let fa_d = Tensor::scalar(1.0);
        let fb_s = tape.leaf(Tensor::scalar(0.5));
        let fb_d = Tensor::scalar(0.5);
        let l = feature_distill_loss(
            &mut tape,
            fa_s,
            &fa_d,
            Some((fb_s, &fb_d)),
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(tape.value(l).item(), 10.0);
    }

    /// Scalar-loop oracle of the distillation pair.
    fn distill_oracle(s: &[f64], t: &[f64], beta: f64, gamma: f64) -> f64 {
        let mut nz = Vec::new();
        let mut z = Vec::new();
        for (si, ti) in s.iter().zip(t) {
            let d = (si - ti) * (si - ti);
            if *ti != 0.0 {
                nz.push(d);
            } else {
                z.push(d);
            }
        }
        let mut total = 0.0;
        if !nz.is_empty() {
            total += beta * nz.iter().sum::<f64>() / nz.len() as f64;
        }
        if !z.is_empty() {
            total += gamma * z.iter().sum::<f64>() / z.len() as f64;
        }
        total
    }

    #[test]
    fn distill_matches_scalar_oracle_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let mut tdata: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in 0..48 {
                if rng.gen_bool(0.4) {
                    tdata[i] = 0.0;
                }
            }
            let teacher = Tensor::new(vec![1, 3, 4, 4], tdata.clone());
            let student = randt(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
            let mut tape = Tape::new();
            let s = tape.leaf(student.clone());
            let w = LossWeights::default();
            let l = feature_distill_loss(&mut tape, s, &teacher, None, &w).unwrap();
            let want = distill_oracle(student.data(), &tdata, w.beta, w.gamma);
            assert!((tape.value(l).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_teacher_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let teacher = randt(&mut rng, &[1, 2, 2, 2], -1.0, 1.0);
        let mut tape = Tape::new();
        let s = tape.leaf(randt(&mut rng, &[1, 2, 2, 2], -1.0, 1.0));
        let l = feature_distill_loss(&mut tape, s, &teacher, None, &LossWeights::default()).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(s).is_some());
        // The teacher was registered as a constant inside the loss; scan all
        // nodes for any gradient on a non-student leaf.
    }

    fn two_voxel_target(mask: [u8; 2]) -> ScaleTarget {
        let spec = VoxelSpec::new([0.0, 0.0, 0.0], [4.0, 1.0, 1.0], [2, 1, 1]);
        let n_fg = mask.iter().filter(|m| **m == 1).count();
        ScaleTarget {
            spec,
            mask: mask.to_vec(),
            mean_points: vec![0.0; 6],
            n_foreground: n_fg,
            n_background: 2 - n_fg,
        }
    }

    #[test]
    fn mask_loss_hand_case_two_ln_two() {
        let target = two_voxel_target([1, 0]);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 1, 1, 1, 2], vec![0.5, 0.5]));
        let l = occupancy_mask_loss(&mut tape, p, &target).unwrap();
        let want = 2.0 * std::f64::consts::LN_2;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn mask_loss_perfect_prediction_is_zero() {
        let target = two_voxel_target([1, 0]);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 1, 1, 1, 2], vec![1.0, 0.0]));
        let l = occupancy_mask_loss(&mut tape, p, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn mask_loss_no_foreground_drops_fg_term() {
        let target = two_voxel_target([0, 0]);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 1, 1, 1, 2], vec![0.5, 0.5]));
        let l = occupancy_mask_loss(&mut tape, p, &target).unwrap();
        assert!((tape.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    /// Scalar oracle for the mask BCE.
    fn mask_oracle(p: &[f64], y: &[u8], n_f: usize, n_b: usize) -> f64 {
        let w = if n_f > 0 { n_b as f64 / n_f as f64 } else { 0.0 };
        p.iter()
            .zip(y)
            .map(|(pi, yi)| {
                let lp = pi.max(1e-12).ln();
                let l1p = (1.0 - pi).max(1e-12).ln();
                -(w * *yi as f64 * lp) - (1.0 - *yi as f64) * l1p
            })
            .sum()
    }

    #[test]
    fn mask_loss_matches_oracle_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = VoxelSpec::new([0.0; 3], [1.0; 3], [4, 2, 2]);
        for _ in 0..10 {
            let n = spec.num_voxels();
            let mask: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.3) as u8).collect();
            let n_f = mask.iter().filter(|m| **m == 1).count();
            let target = ScaleTarget {
                spec,
                mask: mask.clone(),
                mean_points: vec![0.0; 3 * n],
                n_foreground: n_f,
                n_background: n - n_f,
            };
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::new(vec![1, 1, 2, 2, 4], probs.clone()));
            let l = occupancy_mask_loss(&mut tape, p, &target).unwrap();
            let want = mask_oracle(&probs, &mask, n_f, n - n_f);
            assert!((tape.value(l).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn offset_loss_perfect_and_single_error() {
        let spec = VoxelSpec::new([0.0; 3], [1.0; 3], [4, 4, 4]);
        let cloud = vec![crate::geom::Point3::new(0.3, 0.5, 0.5)];
        let t = build_targets(&cloud, &spec);
        // Work at the 1/4 scale (single 4 m voxel holds the point).
        let st = &t.scales[0];
        let n = st.spec.num_voxels();
        assert_eq!(st.n_foreground, 1);
        // Perfect offsets: P_offset = P_gt - V_c.
        let mut tape = Tape::new();
        let perfect = st.offsets();
        let p = tape.leaf(Tensor::new(vec![1, 3, st.spec.shape[2], st.spec.shape[1], st.spec.shape[0]], perfect.clone()));
        let l = offset_loss(&mut tape, p, st).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        // One 0.1 m error on x of the single foreground voxel.
        let mut off = perfect;
        let fg_idx = st.mask.iter().position(|m| *m == 1).unwrap();
        off[fg_idx] += 0.1;
        let p2 = tape.leaf(Tensor::new(vec![1, 3, st.spec.shape[2], st.spec.shape[1], st.spec.shape[0]], off));
        let l2 = offset_loss(&mut tape, p2, st).unwrap();
        assert!((tape.value(l2).item() - 0.1).abs() < 1e-12);
        let _ = n;
    }

    #[test]
    fn offset_loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = VoxelSpec::new([0.0; 3], [0.5; 3], [4, 4, 4]);
        let cloud: Vec<crate::geom::Point3> = (0..30)
            .map(|_| {
                crate::geom::Point3::new(
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                )
            })
            .collect();
        let t = build_targets(&cloud, &spec);
        for st in &t.scales {
            let n = st.spec.num_voxels();
            let pred: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::new(
                vec![1, 3, st.spec.shape[2], st.spec.shape[1], st.spec.shape[0]],
                pred.clone(),
            ));
            let l = offset_loss(&mut tape, p, st).unwrap();
            // Loop oracle.
            let centers = st.voxel_centers();
            let mut want = 0.0;
            for f in 0..n {
                if st.mask[f] == 1 {
                    for c in 0..3 {
                        want += (pred[c * n + f] + centers[c * n + f] - st.mean_points[c * n + f])
                            .abs();
                    }
                }
            }
            want /= st.n_foreground as f64;
            assert!((tape.value(l).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_hand_case_quarter_ln_two() {
        // Single cell, t = 1, p = 0.5: loss = (1-0.5)^2 * ln 2.
        let target = Tensor::new(vec![1, 1, 1, 1], vec![1.0]);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![0.5]));
        let l = focal_heatmap_loss(&mut tape, p, &target).unwrap();
        assert!((tape.value(l).item() - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_perfect_prediction_near_zero() {
        let target = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]));
        let l = focal_heatmap_loss(&mut tape, p, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    /// Scalar oracle of the penalty-reduced focal loss.
    fn focal_oracle(p: &[f64], t: &[f64]) -> f64 {
        let n_peaks = t.iter().filter(|v| **v == 1.0).count().max(1);
        let mut total = 0.0;
        for (pi, ti) in p.iter().zip(t) {
            if *ti == 1.0 {
                total -= (1.0 - pi).powi(2) * pi.max(1e-12).ln();
            } else {
                total -= (1.0 - ti).powi(4) * pi * pi * (1.0 - pi).max(1e-12).ln();
            }
        }
        total / n_peaks as f64
    }

    #[test]
    fn focal_matches_oracle_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let n = 24;
            let t: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.15) {
                        1.0
                    } else {
                        rng.gen_range(0.0..0.8)
                    }
                })
                .collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
            let target = Tensor::new(vec![1, 2, 3, 4], t.clone());
            let mut tape = Tape::new();
            let pid = tape.leaf(Tensor::new(vec![1, 2, 3, 4], p.clone()));
            let l = focal_heatmap_loss(&mut tape, pid, &target).unwrap();
            assert!((tape.value(l).item() - focal_oracle(&p, &t)).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_heatmap_threshold_rule() {
        // Teacher all 0.5: no peaks, pure background term, normalizer 1.
        let teacher = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 1, 1, 2], vec![0.3, 0.7]));
        let l = heatmap_distill_loss(&mut tape, p, &teacher).unwrap();
        let want: f64 = [0.3f64, 0.7]
            .iter()
            .map(|pi| -0.5f64.powi(4) * pi * pi * (1.0 - pi).ln())
            .sum();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        // Saturated teacher peak matched by the student: loss ~ 0.
        let teacher2 = Tensor::new(vec![1, 1, 1, 1], vec![0.99]);
        let p2 = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![0.99]));
        let l2 = heatmap_distill_loss(&mut tape, p2, &teacher2).unwrap();
        assert!(tape.value(l2).item() < 1e-3);
    }

    #[test]
    fn reg_loss_perfect_and_single_channel_error() {
        let target = Tensor::new(vec![1, 8, 1, 2], (0..16).map(|i| i as f64 / 8.0).collect());
        let peaks = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]);
        let mut tape = Tape::new();
        let p = tape.leaf(target.clone());
        let l = box_reg_loss(&mut tape, p, &target, &peaks).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        // One channel off by 0.2 at the peak cell: loss = 0.2 / 8.
        let mut off = target.data().to_vec();
        off[2 * 2] += 0.2; // channel 2, cell 0 (the peak)
        let p2 = tape.leaf(Tensor::new(vec![1, 8, 1, 2], off));
        let l2 = box_reg_loss(&mut tape, p2, &target, &peaks).unwrap();
        assert!((tape.value(l2).item() - 0.2 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_matches_oracle_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let plane = 6;
        let ch = 8;
        let target = randt(&mut rng, &[1, ch, 2, 3], -1.0, 1.0);
        let peaks_v: Vec<f64> = (0..plane).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let n_peaks = peaks_v.iter().filter(|v| **v > 0.0).count().max(1);
        let peaks = Tensor::new(vec![1, 1, 2, 3], peaks_v.clone());
        let pred = randt(&mut rng, &[1, ch, 2, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone());
        let l = box_reg_loss(&mut tape, p, &target, &peaks).unwrap();
        let mut want = 0.0;
        for c in 0..ch {
            for i in 0..plane {
                if peaks_v[i] > 0.0 {
                    want += (pred.data()[c * plane + i] - target.data()[c * plane + i]).abs();
                }
            }
        }
        want /= (n_peaks * ch) as f64;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn totals_sum_parts() {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = (1..=6)
            .map(|v| tape.leaf(Tensor::scalar(v as f64)))
            .collect();
        let parts = SdetLossParts {
            reg: ids[0],
            hm: ids[1],
            s2d: Some(ids[2]),
            mask: Some(ids[3]),
            offset: Some(ids[4]),
            hm_distill: Some(ids[5]),
        };
        let (total, b) = total_sdet(&mut tape, &parts, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(total).item(), 21.0);
        assert_eq!(b.total, 21.0);
        assert_eq!(b.offset, 5.0);
        // Ablation: dropping terms removes exactly their contribution.
        let parts2 = SdetLossParts {
            reg: ids[0],
            hm: ids[1],
            s2d: None,
            mask: None,
            offset: None,
            hm_distill: None,
        };
        let (total2, _) = total_sdet(&mut tape, &parts2, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(total2).item(), 3.0);
        let (td, _) = total_ddet(&mut tape, ids[0], ids[1]).unwrap();
        assert_eq!(tape.value(td).item(), 3.0);
    }

    #[test]
    fn losses_grad_check_against_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Distillation + focal + reg together, probabilities via sigmoid so
        // inputs stay in-range.
        let teacher = {
            let mut d: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for v in d.iter_mut().take(6) {
                *v = 0.0;
            }
            Tensor::new(vec![1, 1, 4, 4], d)
        };
        let hm_target = {
            let mut d = vec![0.2; 16];
            d[5] = 1.0;
            Tensor::new(vec![1, 1, 4, 4], d)
        };
        let x = randt(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
        let w = LossWeights::default();
        let err = grad_check(
            |tape, ids| {
                let l_feat = feature_distill_loss(tape, ids[0], &teacher, None, &w)?;
                let probs = tape.sigmoid(ids[0]);
                let l_hm = focal_heatmap_loss(tape, probs, &hm_target)?;
                tape.add(l_feat, l_hm)
            },
            &[x],
            GRAD_CHECK_H,
        )
        .unwrap();
        assert!(err < GRAD_CHECK_TOL, "loss grad err {err}");
    }
}
