//! Two-stage training: the dense-input teacher first, then the
//! sparse-input student distilled against the frozen teacher, with
//! ablation flags selecting which knowledge-transfer terms are active.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::GlobalTransform;
use crate::dense::{build_dense_bank, compose_dense_scene, DensifyParams, TrackedSequence};
use crate::detector::{
    decode, make_heatmap_targets, make_regression_targets, ArchConfig, Detector,
};
use crate::error::{CoreError, Result};
use crate::evalmetrics::{evaluate_detections, EvalConfig, EvalReport};
use crate::geom::{OrientedBox, Point3, VoxelSpec};
use crate::loss::{
    box_reg_loss, feature_distill_loss, focal_heatmap_loss, heatmap_distill_loss,
    occupancy_mask_loss, offset_loss, total_ddet, total_sdet, LossBreakdown, LossWeights,
    SdetLossParts,
};
use crate::nn::{AdamConfig, ParamStore, Session};
use crate::pcr::PcrHead;
use crate::s2d::S2dBlock;
use crate::schedule::OneCycle;
use crate::targets::build_targets;
use crate::tensor::{Tensor, TensorId};

/// Training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ddet,
    Sdet,
}

/// Which knowledge-transfer pieces the student uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Feature + heatmap distillation losses.
    pub distill: bool,
    /// The BEV densification block.
    pub s2d: bool,
    /// The reconstruction head and its losses (requires `s2d`).
    pub pcr: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.pcr && !self.s2d {
            return Err(CoreError::InvalidConfig(
                "pcr requires s2d (the reconstruction head reads the densified feature)".into(),
            ));
        }
        Ok(())
    }

    pub fn baseline() -> Self {
        AblationFlags::default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// One-cycle peak learning rate.
    pub lr: f64,
    pub div_factor: f64,
    pub cycle_pct: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub augment: bool,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 150,
            batch_size: 1,
            lr: 0.003,
            div_factor: 0.1,
            cycle_pct: 0.3,
            adam: AdamConfig::default(),
            seed: 0,
            ablation: AblationFlags::default(),
            augment: false,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            base_lr: self.lr,
            div_factor: self.div_factor,
            cycle_pct: self.cycle_pct,
            total_steps: self.steps,
        }
    }
}

/// Voxel grid plus channel plan, shared by every model in a run.
#[derive(Debug, Clone, Copy)]
pub struct ModelSpec {
    pub voxel: VoxelSpec,
    pub arch: ArchConfig,
}

/// One training sample: the raw scene and its densified counterparts.
#[derive(Debug, Clone)]
pub struct Sample {
    pub sparse_cloud: Vec<Point3>,
    pub boxes: Vec<OrientedBox>,
    pub dense_cloud: Vec<Point3>,
    pub object_cloud: Vec<Point3>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Build samples from tracked sequences: per sequence, generate the
    /// dense bank and compose every frame.
    pub fn from_sequences(seqs: &[TrackedSequence], params: &DensifyParams) -> Result<Dataset> {
        let mut samples = Vec::new();
        for seq in seqs {
            let bank = build_dense_bank(seq, params)?;
            for (fi, frame) in seq.frames.iter().enumerate() {
                let scene = compose_dense_scene(frame, fi, &bank);
                samples.push(Sample {
                    sparse_cloud: frame.points.clone(),
                    boxes: frame.boxes.clone(),
                    dense_cloud: scene.dense_cloud,
                    object_cloud: scene.object_only_cloud,
                });
            }
        }
        if samples.is_empty() {
            return Err(CoreError::EmptyInput("dataset has no frames"));
        }
        Ok(Dataset { samples })
    }

    fn apply_transform(&self, idx: usize, t: &GlobalTransform) -> Sample {
        let s = &self.samples[idx];
        Sample {
            sparse_cloud: t.apply_points(&s.sparse_cloud),
            boxes: s.boxes.iter().map(|b| t.apply_box(b)).collect(),
            dense_cloud: t.apply_points(&s.dense_cloud),
            object_cloud: t.apply_points(&s.object_cloud),
        }
    }
}

/// Per-step log record (serialized as one JSONL row by the CLI).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Deterministic sample order: reshuffled index cycles.
struct SampleIter {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl SampleIter {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        SampleIter { order, pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Student (or teacher) feature taps for one forward pass.
pub struct ForwardFeatures {
    pub f_c: TensorId,
    pub f_b: Option<TensorId>,
    pub f_a: TensorId,
}

/// Shared forward: detector features, optional densification, fusion.
pub fn model_forward(
    sess: &mut Session,
    detector: &Detector,
    s2d: Option<&S2dBlock>,
    cloud: &[Point3],
) -> Result<ForwardFeatures> {
    let feats = detector.forward_features(sess, cloud)?;
    match s2d {
        Some(block) => {
            let (f_b, f_a) = block.forward(sess, feats.f_c)?;
            Ok(ForwardFeatures { f_c: feats.f_c, f_b: Some(f_b), f_a })
        }
        None => Ok(ForwardFeatures { f_c: feats.f_c, f_b: None, f_a: feats.f_c }),
    }
}

fn check_finite_loss(step: usize, breakdown: &LossBreakdown) -> Result<()> {
    if breakdown.total.is_finite() {
        return Ok(());
    }
    Err(CoreError::NanLoss {
        step,
        detail: serde_json::to_string(breakdown).unwrap_or_else(|_| format!("{breakdown:?}")),
    })
}

/// Stage one: train the dense-input teacher on composed dense scenes.
pub fn train_ddet(
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(ParamStore, Vec<StepLog>)> {
    let detector = Detector::new(spec.voxel, spec.arch);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    detector.init(&mut store, &mut rng);
    let schedule = cfg.schedule();
    let mut sampler = SampleIter::new(data.samples.len(), cfg.seed ^ 0x5eed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa06);
    let mut logs = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let lr = schedule.lr(step);
        let mut grad_accum: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        let mut last_breakdown = LossBreakdown::default();
        for _ in 0..cfg.batch_size.max(1) {
            let idx = sampler.next();
            let sample = if cfg.augment {
                data.apply_transform(idx, &GlobalTransform::sample(aug_rng.gen()))
            } else {
                data.samples[idx].clone()
            };
            let mut sess = Session::train(&mut store);
            // The teacher trains on the dense scene cloud.
            let feats = model_forward(&mut sess, &detector, None, &sample.dense_cloud)?;
            let out = detector.forward_heads(&mut sess, feats.f_a)?;
            let hm_target = make_heatmap_targets(&sample.boxes, &spec.voxel);
            let (reg_target, peak_mask) = make_regression_targets(&sample.boxes, &spec.voxel);
            let l_hm = focal_heatmap_loss(&mut sess.tape, out.heatmap, &hm_target)?;
            let l_reg = box_reg_loss(&mut sess.tape, out.regression, &reg_target, &peak_mask)?;
            let (total, breakdown) = total_ddet(&mut sess.tape, l_reg, l_hm)?;
            check_finite_loss(step, &breakdown)?;
            sess.tape.backward(total)?;
            let scale = 1.0 / cfg.batch_size.max(1) as f64;
            for (name, g) in sess.param_grads() {
                let e = grad_accum.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (a, v) in e.iter_mut().zip(&g) {
                    *a += v * scale;
                }
            }
            last_breakdown = breakdown;
        }
        store.adam_step(&grad_accum, &cfg.adam, lr, step + 1);
        logs.push(StepLog { step, lr, loss: last_breakdown });
    }
    Ok((store, logs))
}

/// Cached teacher quantities for one sample (augmentation off).
struct TeacherOutputs {
    f_a_dense: Tensor,
    f_b_object: Option<Tensor>,
    heatmap: Option<Tensor>,
}

fn teacher_forward(
    teacher_store: &ParamStore,
    detector: &Detector,
    sample: &Sample,
    need_object_feature: bool,
    need_heatmap: bool,
) -> Result<TeacherOutputs> {
    let mut sess = Session::frozen(teacher_store);
    let feats = model_forward(&mut sess, detector, None, &sample.dense_cloud)?;
    let f_a_dense = sess.tape.value(feats.f_a).clone();
    let heatmap = if need_heatmap {
        let out = detector.forward_heads(&mut sess, feats.f_a)?;
        Some(sess.tape.value(out.heatmap).clone())
    } else {
        None
    };
    let f_b_object = if need_object_feature {
        let obj = model_forward(&mut sess, detector, None, &sample.object_cloud)?;
        Some(sess.tape.value(obj.f_a).clone())
    } else {
        None
    };
    Ok(TeacherOutputs { f_a_dense, f_b_object, heatmap })
}

/// Stage two: initialize the student from the teacher, freeze the teacher,
/// and optimize the student total with the configured ablation flags.
pub fn train_sdet(
    data: &Dataset,
    teacher_store: &ParamStore,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(ParamStore, Vec<StepLog>)> {
    cfg.ablation.validate()?;
    let flags = cfg.ablation;
    let detector = Detector::new(spec.voxel, spec.arch);
    let s2d = flags.s2d.then(|| S2dBlock::new(spec.arch.bev_channels));
    let pcr = if flags.pcr {
        Some(PcrHead::new(spec.voxel, spec.arch.bev_channels, spec.arch.pcr_channels)?)
    } else {
        None
    };

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    detector.init(&mut store, &mut rng);
    if let Some(block) = &s2d {
        block.init(&mut store, &mut rng);
    }
    if let Some(head) = &pcr {
        head.init(&mut store, &mut rng);
    }
    // Adopt every teacher weight that shape-matches (detector and heads);
    // the densification and reconstruction modules stay freshly initialized.
    store.copy_matching_from(teacher_store);

    let schedule = cfg.schedule();
    let mut sampler = SampleIter::new(data.samples.len(), cfg.seed ^ 0x5eed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa06);
    let mut logs = Vec::with_capacity(cfg.steps);
    let need_teacher = flags.distill;
    let mut teacher_cache: HashMap<usize, TeacherOutputs> = HashMap::new();

    for step in 0..cfg.steps {
        let lr = schedule.lr(step);
        let mut grad_accum: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        let mut last_breakdown = LossBreakdown::default();
        for _ in 0..cfg.batch_size.max(1) {
            let idx = sampler.next();
            let (sample, cached_teacher) = if cfg.augment {
                (data.apply_transform(idx, &GlobalTransform::sample(aug_rng.gen())), None)
            } else {
                (data.samples[idx].clone(), Some(idx))
            };

            // Teacher passes (frozen, eval mode). Cacheable when the sample
            // is not augmented.
            let teacher_out = if need_teacher {
                match cached_teacher {
                    Some(key) => {
                        if !teacher_cache.contains_key(&key) {
                            let out = teacher_forward(
                                teacher_store,
                                &detector,
                                &sample,
                                flags.s2d,
                                true,
                            )?;
                            teacher_cache.insert(key, out);
                        }
                        None // borrowed from cache below
                    }
                    None => Some(teacher_forward(
                        teacher_store,
                        &detector,
                        &sample,
                        flags.s2d,
                        true,
                    )?),
                }
            } else {
                None
            };
            let teacher_ref: Option<&TeacherOutputs> = if need_teacher {
                match cached_teacher {
                    Some(key) => teacher_cache.get(&key),
                    None => teacher_out.as_ref(),
                }
            } else {
                None
            };

            let mut sess = Session::train(&mut store);
            let feats = model_forward(&mut sess, &detector, s2d.as_ref(), &sample.sparse_cloud)?;
            let out = detector.forward_heads(&mut sess, feats.f_a)?;

            let hm_target = make_heatmap_targets(&sample.boxes, &spec.voxel);
            let (reg_target, peak_mask) = make_regression_targets(&sample.boxes, &spec.voxel);
            let l_hm = focal_heatmap_loss(&mut sess.tape, out.heatmap, &hm_target)?;
            let l_reg = box_reg_loss(&mut sess.tape, out.regression, &reg_target, &peak_mask)?;

            let l_s2d = match (&teacher_ref, flags.distill) {
                (Some(t), true) => {
                    let fb_pair = match (feats.f_b, &t.f_b_object) {
                        (Some(fb_s), Some(fb_d)) => Some((fb_s, fb_d)),
                        _ => None,
                    };
                    Some(feature_distill_loss(
                        &mut sess.tape,
                        feats.f_a,
                        &t.f_a_dense,
                        fb_pair,
                        &cfg.loss_weights,
                    )?)
                }
                _ => None,
            };
            let l_hm_distill = match (&teacher_ref, flags.distill) {
                (Some(t), true) => t
                    .heatmap
                    .as_ref()
                    .map(|hm| heatmap_distill_loss(&mut sess.tape, out.heatmap, hm))
                    .transpose()?,
                _ => None,
            };

            let (l_mask, l_offset) = if let Some(head) = &pcr {
                let f_b = feats.f_b.expect("pcr requires the densified feature");
                let pcr_out = head.forward(&mut sess, f_b)?;
                let targets = build_targets(&sample.object_cloud, &spec.voxel);
                let mut mask_total: Option<TensorId> = None;
                let mut off_total: Option<TensorId> = None;
                for (scale_out, target) in pcr_out.scales.iter().zip(&targets.scales) {
                    debug_assert_eq!(
                        target.spec,
                        spec.voxel.coarser(scale_out.factor),
                        "scale order mismatch"
                    );
                    let lm = occupancy_mask_loss(&mut sess.tape, scale_out.v_mask, target)?;
                    let lo = offset_loss(&mut sess.tape, scale_out.p_offset, target)?;
                    mask_total = Some(match mask_total {
                        Some(acc) => sess.tape.add(acc, lm)?,
                        None => lm,
                    });
                    off_total = Some(match off_total {
                        Some(acc) => sess.tape.add(acc, lo)?,
                        None => lo,
                    });
                }
                (mask_total, off_total)
            } else {
                (None, None)
            };

            let parts = SdetLossParts {
                reg: l_reg,
                hm: l_hm,
                s2d: l_s2d,
                mask: l_mask,
                offset: l_offset,
                hm_distill: l_hm_distill,
            };
            let (total, breakdown) = total_sdet(&mut sess.tape, &parts, &cfg.loss_weights)?;
            check_finite_loss(step, &breakdown)?;
            sess.tape.backward(total)?;
            let scale = 1.0 / cfg.batch_size.max(1) as f64;
            for (name, g) in sess.param_grads() {
                let e = grad_accum.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (a, v) in e.iter_mut().zip(&g) {
                    *a += v * scale;
                }
            }
            last_breakdown = breakdown;
        }
        store.adam_step(&grad_accum, &cfg.adam, lr, step + 1);
        logs.push(StepLog { step, lr, loss: last_breakdown });
    }
    Ok((store, logs))
}

/// Decode settings for evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub max_dets: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_thresh: 0.25, max_dets: 64 }
    }
}

/// Evaluate a trained model on held-out samples: AP metrics plus, when a
/// teacher is supplied, the mean squared fused-feature difference between
/// the student on the sparse cloud and the teacher on the dense cloud.
pub fn evaluate_model(
    store: &ParamStore,
    has_s2d: bool,
    spec: &ModelSpec,
    data: &Dataset,
    decode_cfg: &DecodeConfig,
    eval_cfg: &EvalConfig,
    teacher_store: Option<&ParamStore>,
) -> Result<EvalReport> {
    let detector = Detector::new(spec.voxel, spec.arch);
    let s2d = has_s2d.then(|| S2dBlock::new(spec.arch.bev_channels));
    let mut scenes = Vec::with_capacity(data.samples.len());
    let mut mse_sum = 0.0f64;
    let mut mse_count = 0usize;
    for sample in &data.samples {
        let mut sess = Session::frozen(store);
        let feats = model_forward(&mut sess, &detector, s2d.as_ref(), &sample.sparse_cloud)?;
        let out = detector.forward_heads(&mut sess, feats.f_a)?;
        let hm = sess.tape.value(out.heatmap).clone();
        let reg = sess.tape.value(out.regression).clone();
        let dets = decode(&hm, &reg, &spec.voxel, decode_cfg.score_thresh, decode_cfg.max_dets);
        if let Some(teacher) = teacher_store {
            let f_a_s = sess.tape.value(feats.f_a).clone();
            let mut tsess = Session::frozen(teacher);
            let tfeats = model_forward(&mut tsess, &detector, None, &sample.dense_cloud)?;
            let f_a_d = tsess.tape.value(tfeats.f_a);
            let diff: f64 = f_a_s
                .data()
                .iter()
                .zip(f_a_d.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            mse_sum += diff / f_a_s.numel() as f64;
            mse_count += 1;
        }
        scenes.push((dets, sample.boxes.clone()));
    }
    let mut report = evaluate_detections(&scenes, eval_cfg);
    if mse_count > 0 {
        report.feature_mse = Some(mse_sum / mse_count as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, SceneConfig};

    fn tiny_voxel() -> VoxelSpec {
        // 12.8 m world, 16x16x8 voxels -> BEV 4x4.
        VoxelSpec::new([-6.4, -6.4, -0.8], [0.8, 0.8, 0.5], [16, 16, 8])
    }

    fn tiny_dataset(seed: u64, frames: usize) -> Dataset {
        let cfg = SceneConfig {
            seed,
            n_frames: frames,
            n_vehicles: 1,
            n_pedestrians: 0,
            n_cyclists: 0,
            world_extent: 5.0,
            n_clutter: 30,
            density_k: 120.0,
            ..Default::default()
        };
        let seq = generate_sequence(&cfg).unwrap();
        Dataset::from_sequences(&[seq], &DensifyParams::default()).unwrap()
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            voxel: tiny_voxel(),
            arch: ArchConfig {
                encoder_channels: 4,
                backbone_channels: [6, 8],
                bev_channels: 8,
                pcr_channels: 4,
            },
        }
    }

    fn tiny_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig { steps, ..Default::default() }
    }

    #[test]
    fn ddet_loss_decreases_on_moving_average() {
        let data = tiny_dataset(3, 8);
        let spec = tiny_spec();
        let cfg = tiny_train_cfg(30);
        let (_, logs) = train_ddet(&data, &spec, &cfg).unwrap();
        assert_eq!(logs.len(), 30);
        let ma = |range: std::ops::Range<usize>| -> f64 {
            logs[range.clone()].iter().map(|l| l.loss.total).sum::<f64>() / range.len() as f64
        };
        let first = ma(0..5);
        let last = ma(25..30);
        assert!(
            last < first,
            "5-step moving average did not decrease: {first:.4} -> {last:.4}"
        );
    }

    #[test]
    fn ddet_schedule_endpoints() {
        let cfg = tiny_train_cfg(100);
        let data = tiny_dataset(4, 4);
        let spec = tiny_spec();
        let (_, logs) = train_ddet(&data, &spec, &TrainConfig { steps: 10, ..cfg }).unwrap();
        assert!((logs[0].lr - 0.0003).abs() < 1e-12);
        // Peak hits at 30% of steps.
        assert!((logs[3].lr - 0.003).abs() < 1e-12);
    }

    #[test]
    fn ddet_run_is_deterministic() {
        let data = tiny_dataset(5, 6);
        let spec = tiny_spec();
        let cfg = tiny_train_cfg(8);
        let (store_a, logs_a) = train_ddet(&data, &spec, &cfg).unwrap();
        let (store_b, logs_b) = train_ddet(&data, &spec, &cfg).unwrap();
        for (a, b) in logs_a.iter().zip(&logs_b) {
            assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
        }
        for name in store_a.param_names() {
            let a = store_a.get(&name).unwrap().data();
            let b = store_b.get(&name).unwrap().data();
            assert_eq!(a, b, "param {name} diverged");
        }
    }

    #[test]
    fn sdet_keeps_teacher_bytes_and_trains() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(6, 6);
        let spec = tiny_spec();
        let (teacher, _) = train_ddet(&data, &spec, &tiny_train_cfg(5)).unwrap();
        let before = dir.path().join("teacher_before");
        teacher.save_checkpoint(&before).unwrap();

        let cfg = TrainConfig {
            steps: 5,
            ablation: AblationFlags { distill: true, s2d: true, pcr: true },
            ..Default::default()
        };
        let (student, logs) = train_sdet(&data, &teacher, &spec, &cfg).unwrap();
        assert_eq!(logs.len(), 5);
        // Distillation terms actually appear in the breakdown.
        assert!(logs.iter().any(|l| l.loss.s2d != 0.0));
        assert!(logs.iter().any(|l| l.loss.mask != 0.0));

        let after = dir.path().join("teacher_after");
        teacher.save_checkpoint(&after).unwrap();
        assert_eq!(
            std::fs::read(before.with_extension("bin")).unwrap(),
            std::fs::read(after.with_extension("bin")).unwrap(),
            "teacher parameters changed during student training"
        );
        // Student has extra modules beyond the teacher.
        assert!(student.num_scalars() > teacher.num_scalars());
        // Detector weights were adopted: names overlap.
        assert!(student.contains("bb.s1.conv.w"));
    }

    #[test]
    fn sdet_baseline_reduces_to_plain_training() {
        let data = tiny_dataset(7, 5);
        let spec = tiny_spec();
        let (teacher, _) = train_ddet(&data, &spec, &tiny_train_cfg(3)).unwrap();
        let cfg = TrainConfig { steps: 4, ..Default::default() };
        let (_, logs) = train_sdet(&data, &teacher, &spec, &cfg).unwrap();
        for l in &logs {
            assert_eq!(l.loss.s2d, 0.0);
            assert_eq!(l.loss.mask, 0.0);
            assert_eq!(l.loss.offset, 0.0);
            assert_eq!(l.loss.hm_distill, 0.0);
            assert!((l.loss.reg + l.loss.hm - l.loss.total).abs() < 1e-12);
        }
    }

    #[test]
    fn pcr_without_s2d_is_rejected() {
        let cfg = TrainConfig {
            ablation: AblationFlags { distill: true, s2d: false, pcr: true },
            ..Default::default()
        };
        assert!(cfg.ablation.validate().is_err());
        let data = tiny_dataset(8, 4);
        let spec = tiny_spec();
        let (teacher, _) = train_ddet(&data, &spec, &tiny_train_cfg(2)).unwrap();
        assert!(matches!(
            train_sdet(&data, &teacher, &spec, &cfg),
            Err(CoreError::InvalidConfig(_))
        ));
    }

    #[test]
    fn evaluate_produces_report_with_feature_mse() {
        let data = tiny_dataset(9, 5);
        let spec = tiny_spec();
        let (teacher, _) = train_ddet(&data, &spec, &tiny_train_cfg(4)).unwrap();
        let cfg = TrainConfig {
            steps: 4,
            ablation: AblationFlags { distill: true, s2d: true, pcr: false },
            ..Default::default()
        };
        let (student, _) = train_sdet(&data, &teacher, &spec, &cfg).unwrap();
        let report = evaluate_model(
            &student,
            true,
            &spec,
            &data,
            &DecodeConfig::default(),
            &EvalConfig::default(),
            Some(&teacher),
        )
        .unwrap();
        assert!(report.feature_mse.is_some());
        assert!(report.feature_mse.unwrap().is_finite());
        let table = report.to_table();
        assert!(table.contains("vehicle"));
    }

    #[test]
    fn augmented_runs_stay_finite_and_deterministic() {
        let data = tiny_dataset(10, 5);
        let spec = tiny_spec();
        let cfg = TrainConfig { steps: 4, augment: true, ..Default::default() };
        let (_, a) = train_ddet(&data, &spec, &cfg).unwrap();
        let (_, b) = train_ddet(&data, &spec, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss.total.to_bits(), y.loss.total.to_bits());
        }
    }
}
