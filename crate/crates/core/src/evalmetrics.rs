//! Detection quality metrics: rotated BEV IoU via convex polygon clipping,
//! greedy score-ordered matching, and 101-point interpolated AP, with a
//! heading-weighted variant (APH).

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::geom::{wrap_angle, ClassId, OrientedBox, NUM_CLASSES};

/// Intersection area of two convex polygons (Sutherland-Hodgman).
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            return output;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        // Inside = left of edge a->b for a counter-clockwise clip polygon.
        let inside =
            |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let intersect = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
            let d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            let d2 = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
            let t = d1 / (d1 - d2);
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        };
        let input = output.clone();
        output.clear();
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur));
            }
        }
    }
    output
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    acc.abs() / 2.0
}

/// Bird's-eye-view IoU of two oriented boxes (z ignored).
pub fn bev_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    let inter = polygon_area(&clip_polygon(&ca, &cb));
    let area_a = a.dims[0] * a.dims[1];
    let area_b = b.dims[0] * b.dims[1];
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-class IoU thresholds for a true positive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_vehicle: f64,
    pub iou_pedestrian: f64,
    pub iou_cyclist: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_vehicle: 0.5, iou_pedestrian: 0.25, iou_cyclist: 0.25 }
    }
}

impl EvalConfig {
    pub fn threshold(&self, class: ClassId) -> f64 {
        match class {
            ClassId::Vehicle => self.iou_vehicle,
            ClassId::Pedestrian => self.iou_pedestrian,
            ClassId::Cyclist => self.iou_cyclist,
        }
    }
}

/// One scored match outcome pooled across scenes.
#[derive(Debug, Clone, Copy)]
struct MatchRecord {
    score: f64,
    /// Some(heading credit in [0,1]) for a TP, None for a FP.
    credit: Option<f64>,
}

/// Greedy matching of one scene's detections (one class) against its
/// ground truth: descending score, each detection takes the best unclaimed
/// box with IoU at or above the threshold.
fn match_class(
    dets: &[&Detection],
    gts: &[&OrientedBox],
    iou_thresh: f64,
    records: &mut Vec<MatchRecord>,
) {
    let mut claimed = vec![false; gts.len()];
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    for di in order {
        let det_box = dets[di].to_box();
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if claimed[gi] {
                continue;
            }
            let iou = bev_iou(&det_box, g);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                claimed[gi] = true;
                let dyaw = wrap_angle(dets[di].yaw - gts[gi].yaw);
                records.push(MatchRecord {
                    score: dets[di].score,
                    credit: Some(dyaw.cos().max(0.0)),
                });
            }
            None => records.push(MatchRecord { score: dets[di].score, credit: None }),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap: f64,
    pub aph: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

/// Per-class AP report plus the held-out feature-imitation error filled in
/// by the training harness.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub vehicle: ClassMetrics,
    pub pedestrian: ClassMetrics,
    pub cyclist: ClassMetrics,
    /// Mean squared difference between student and teacher fused features
    /// on held-out scenes (None when no teacher is involved).
    pub feature_mse: Option<f64>,
}

impl EvalReport {
    pub fn class(&self, c: ClassId) -> &ClassMetrics {
        match c {
            ClassId::Vehicle => &self.vehicle,
            ClassId::Pedestrian => &self.pedestrian,
            ClassId::Cyclist => &self.cyclist,
        }
    }

    fn class_mut(&mut self, c: ClassId) -> &mut ClassMetrics {
        match c {
            ClassId::Vehicle => &mut self.vehicle,
            ClassId::Pedestrian => &mut self.pedestrian,
            ClassId::Cyclist => &mut self.cyclist,
        }
    }

    pub fn mean_ap(&self) -> f64 {
        (self.vehicle.ap + self.pedestrian.ap + self.cyclist.ap) / NUM_CLASSES as f64
    }

    /// Plain-text table for terminal output.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str("class        AP      APH     #gt   #det\n");
        for c in ClassId::all() {
            let m = self.class(c);
            s.push_str(&format!(
                "{:<11} {:<7.4} {:<7.4} {:<5} {:<5}\n",
                c.name(),
                m.ap,
                m.aph,
                m.num_gt,
                m.num_det
            ));
        }
        s.push_str(&format!("mean AP     {:<7.4}\n", self.mean_ap()));
        if let Some(mse) = self.feature_mse {
            s.push_str(&format!("feature MSE {mse:<12.6}\n"));
        }
        s
    }
}

/// 101-point interpolated average precision. `credit` weights the PR curve
/// (all-ones credit gives plain AP).
fn average_precision(records: &mut [MatchRecord], num_gt: usize, use_credit: bool) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    records.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut tp_cum = 0.0f64;
    let mut credit_cum = 0.0f64;
    let mut fp_cum = 0.0f64;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(records.len()); // (recall, precision)
    for r in records.iter() {
        match r.credit {
            Some(c) => {
                tp_cum += 1.0;
                credit_cum += if use_credit { c } else { 1.0 };
            }
            None => fp_cum += 1.0,
        }
        let denom = tp_cum + fp_cum;
        let numer = if use_credit { credit_cum } else { tp_cum };
        curve.push((numer / num_gt as f64, numer / denom));
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        ap += best;
    }
    ap / 101.0
}

/// Evaluate pooled detections against ground truth across scenes.
/// `scenes` pairs each scene's detections with its ground-truth boxes.
pub fn evaluate_detections(
    scenes: &[(Vec<Detection>, Vec<OrientedBox>)],
    cfg: &EvalConfig,
) -> EvalReport {
    let mut report = EvalReport::default();
    for class in ClassId::all() {
        let mut records = Vec::new();
        let mut num_gt = 0usize;
        let mut num_det = 0usize;
        for (dets, gts) in scenes {
            let class_dets: Vec<&Detection> =
                dets.iter().filter(|d| d.class_id == class).collect();
            let class_gts: Vec<&OrientedBox> =
                gts.iter().filter(|g| g.class_id == class).collect();
            num_gt += class_gts.len();
            num_det += class_dets.len();
            match_class(&class_dets, &class_gts, cfg.threshold(class), &mut records);
        }
        let m = report.class_mut(class);
        m.num_gt = num_gt;
        m.num_det = num_det;
        m.ap = average_precision(&mut records.clone(), num_gt, false);
        m.aph = average_precision(&mut records, num_gt, true);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn vbox(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> OrientedBox {
        OrientedBox::new([cx, cy, 0.0], [l, w, 1.5], yaw, ClassId::Vehicle, 0)
    }

    fn det_from(b: &OrientedBox, score: f64) -> Detection {
        Detection {
            class_id: b.class_id,
            center: b.center,
            dims: b.dims,
            yaw: b.yaw,
            score,
        }
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = vbox(1.0, 2.0, 4.0, 2.0, 0.7);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-9);
        let b = vbox(100.0, 100.0, 4.0, 2.0, 0.0);
        assert_eq!(bev_iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_axis_aligned_hand_case() {
        // Two 2x2 squares offset by 1 in x: inter 2, union 6.
        let a = vbox(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = vbox(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-9);
    }

    /// Monte-Carlo membership oracle for the rotated IoU.
    fn iou_sampling_oracle(a: &OrientedBox, b: &OrientedBox, rng: &mut ChaCha8Rng) -> f64 {
        let lo = [
            (a.center[0] - 6.0).min(b.center[0] - 6.0),
            (a.center[1] - 6.0).min(b.center[1] - 6.0),
        ];
        let hi = [
            (a.center[0] + 6.0).max(b.center[0] + 6.0),
            (a.center[1] + 6.0).max(b.center[1] + 6.0),
        ];
        let mut inter = 0usize;
        let mut union = 0usize;
        let n = 400_000;
        for _ in 0..n {
            let p = crate::geom::Point3::new(
                rng.gen_range(lo[0]..hi[0]),
                rng.gen_range(lo[1]..hi[1]),
                0.0,
            );
            let pa = crate::geom::point_in_box(&p, &inflate_z(a));
            let pb = crate::geom::point_in_box(&p, &inflate_z(b));
            inter += (pa && pb) as usize;
            union += (pa || pb) as usize;
        }
        inter as f64 / union.max(1) as f64
    }

    fn inflate_z(b: &OrientedBox) -> OrientedBox {
        OrientedBox::new(b.center, [b.dims[0], b.dims[1], 100.0], b.yaw, b.class_id, b.track_id)
    }

    #[test]
    fn rotated_iou_matches_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..4 {
            let a = vbox(0.0, 0.0, 4.0, 2.0, 0.3 + 0.4 * case as f64);
            let b = vbox(0.8, 0.4, 3.0, 2.2, -0.5 + 0.3 * case as f64);
            let got = bev_iou(&a, &b);
            let want = iou_sampling_oracle(&a, &b, &mut rng);
            assert!(
                (got - want).abs() < 0.01,
                "case {case}: clip {got:.4} vs sampled {want:.4}"
            );
        }
    }

    #[test]
    fn perfect_predictions_give_ap_one() {
        let gts = vec![vbox(0.0, 0.0, 4.0, 2.0, 0.2), vbox(10.0, 5.0, 4.0, 2.0, -0.9)];
        let dets: Vec<Detection> = gts.iter().map(|g| det_from(g, 1.0)).collect();
        let report = evaluate_detections(&[(dets, gts)], &EvalConfig::default());
        assert!((report.vehicle.ap - 1.0).abs() < 1e-9);
        assert!((report.vehicle.aph - 1.0).abs() < 1e-9);
        assert_eq!(report.vehicle.num_gt, 2);
    }

    #[test]
    fn no_predictions_give_ap_zero() {
        let gts = vec![vbox(0.0, 0.0, 4.0, 2.0, 0.0)];
        let report = evaluate_detections(&[(Vec::new(), gts)], &EvalConfig::default());
        assert_eq!(report.vehicle.ap, 0.0);
    }

    #[test]
    fn ap_hand_case_two_tp_one_fp() {
        // 3 GT; det1 TP at 0.9, det2 FP at 0.8, det3 TP at 0.7.
        let gts = vec![
            vbox(0.0, 0.0, 4.0, 2.0, 0.0),
            vbox(10.0, 0.0, 4.0, 2.0, 0.0),
            vbox(20.0, 0.0, 4.0, 2.0, 0.0),
        ];
        let dets = vec![
            det_from(&gts[0], 0.9),
            det_from(&vbox(40.0, 0.0, 4.0, 2.0, 0.0), 0.8),
            det_from(&gts[1], 0.7),
        ];
        let report = evaluate_detections(&[(dets, gts)], &EvalConfig::default());
        // Hand PR: (r=1/3, p=1), (1/3, 1/2), (2/3, 2/3). 101-point area:
        // r in {0..0.33}: p=1 (34 samples); r in {0.34..0.66}: 2/3 (33).
        let want = (34.0 + 33.0 * (2.0 / 3.0)) / 101.0;
        assert!(
            (report.vehicle.ap - want).abs() < 1e-9,
            "ap {} vs hand {want}",
            report.vehicle.ap
        );
    }

    #[test]
    fn aph_discounts_heading_error() {
        let gt = vbox(0.0, 0.0, 4.0, 4.0, 0.0);
        // Square box rotated 90 degrees still overlaps perfectly, but gets
        // zero heading credit.
        let mut d = det_from(&gt, 1.0);
        d.yaw = std::f64::consts::FRAC_PI_2;
        let report = evaluate_detections(&[(vec![d], vec![gt])], &EvalConfig::default());
        assert!((report.vehicle.ap - 1.0).abs() < 1e-9);
        assert!(report.vehicle.aph < 1e-9, "aph = {}", report.vehicle.aph);
    }

    #[test]
    fn duplicate_detections_count_as_fp() {
        let gt = vbox(0.0, 0.0, 4.0, 2.0, 0.0);
        let dets = vec![det_from(&gt, 0.9), det_from(&gt, 0.8)];
        let report = evaluate_detections(&[(dets, vec![gt])], &EvalConfig::default());
        // First matches, second is a duplicate FP; AP stays 1 because
        // recall 1.0 is reached at precision 1.
        assert!((report.vehicle.ap - 1.0).abs() < 1e-9);
        assert_eq!(report.vehicle.num_det, 2);
    }

    #[test]
    fn classes_are_evaluated_independently() {
        let gv = vbox(0.0, 0.0, 4.0, 2.0, 0.0);
        let gp = OrientedBox::new([5.0, 5.0, 0.0], [0.8, 0.8, 1.8], 0.0, ClassId::Pedestrian, 1);
        // A vehicle detection on the pedestrian position matches nothing.
        let stray = det_from(&vbox(5.0, 5.0, 0.8, 0.8, 0.0), 0.9);
        let good = det_from(&gv, 0.8);
        let report =
            evaluate_detections(&[(vec![stray, good], vec![gv, gp])], &EvalConfig::default());
        assert!(report.pedestrian.ap == 0.0);
        assert!(report.vehicle.ap > 0.4); // TP after an FP at higher score
    }
}
