//! The seeded toy benchmark: small synthetic world, small model, short
//! two-stage runs, and the five-row ablation matrix over the
//! knowledge-transfer components.

use serde::{Deserialize, Serialize};

use crate::dense::DensifyParams;
use crate::detector::ArchConfig;
use crate::error::Result;
use crate::evalmetrics::{EvalConfig, EvalReport};
use crate::geom::VoxelSpec;
use crate::synth::{generate_sequence, SceneConfig};
use crate::train::{
    evaluate_model, train_ddet, train_sdet, AblationFlags, Dataset, DecodeConfig, ModelSpec,
    TrainConfig,
};

/// Toy voxel grid: 25.6 m square, 64x64 BEV cells at 0.4 m, z in [-2, 4].
pub fn toy_voxel_spec() -> VoxelSpec {
    VoxelSpec::new([-12.8, -12.8, -2.0], [0.4, 0.4, 0.75], [64, 64, 8])
}

pub fn toy_model_spec() -> ModelSpec {
    ModelSpec { voxel: toy_voxel_spec(), arch: ArchConfig::toy() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub frames_per_sequence: usize,
    pub steps_ddet: usize,
    pub steps_sdet: usize,
    pub scene: SceneConfig,
    pub densify: DensifyParams,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seeds: vec![0, 1, 2],
            train_sequences: 3,
            eval_sequences: 1,
            frames_per_sequence: 30,
            steps_ddet: 150,
            steps_sdet: 150,
            scene: SceneConfig::default(),
            densify: DensifyParams::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// The ablation rows in table order.
pub fn ablation_rows() -> Vec<(&'static str, AblationFlags)> {
    vec![
        ("Baseline", AblationFlags { distill: false, s2d: false, pcr: false }),
        ("+ Distillation", AblationFlags { distill: true, s2d: false, pcr: false }),
        ("+ S2D", AblationFlags { distill: true, s2d: true, pcr: false }),
        ("+ PCR", AblationFlags { distill: true, s2d: true, pcr: true }),
        ("- Distillation", AblationFlags { distill: false, s2d: true, pcr: true }),
    ]
}

/// The subset of rows the directional acceptance check uses.
pub fn acceptance_rows() -> Vec<(&'static str, AblationFlags)> {
    ablation_rows().into_iter().take(4).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowResult {
    pub label: String,
    pub flags: AblationFlags,
    /// One report per seed, in `seeds` order.
    pub reports: Vec<EvalReport>,
}

impl RowResult {
    pub fn mean_vehicle_ap(&self) -> f64 {
        self.reports.iter().map(|r| r.vehicle.ap).sum::<f64>() / self.reports.len() as f64
    }

    pub fn mean_ap(&self) -> f64 {
        self.reports.iter().map(|r| r.mean_ap()).sum::<f64>() / self.reports.len() as f64
    }

    pub fn feature_mses(&self) -> Vec<f64> {
        self.reports.iter().filter_map(|r| r.feature_mse).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResult {
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
    /// Teacher (dense-input) reports per seed, for reference.
    pub teacher_reports: Vec<EvalReport>,
}

impl BenchResult {
    pub fn row(&self, label: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Markdown table: one row per ablation entry.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Method | Vehicle AP | Pedestrian AP | Cyclist AP | Mean AP | Feature MSE |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for row in &self.rows {
            let n = row.reports.len() as f64;
            let ped = row.reports.iter().map(|r| r.pedestrian.ap).sum::<f64>() / n;
            let cyc = row.reports.iter().map(|r| r.cyclist.ap).sum::<f64>() / n;
            let mses = row.feature_mses();
            let mse = if mses.is_empty() {
                "-".to_string()
            } else {
                format!("{:.5}", mses.iter().sum::<f64>() / mses.len() as f64)
            };
            s.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n",
                row.label,
                row.mean_vehicle_ap(),
                ped,
                cyc,
                row.mean_ap(),
                mse
            ));
        }
        s
    }
}

/// Build the train/eval datasets for one seed.
pub fn build_seed_datasets(cfg: &BenchConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut train_seqs = Vec::new();
    for i in 0..cfg.train_sequences {
        let scene = SceneConfig {
            seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
            n_frames: cfg.frames_per_sequence,
            ..cfg.scene.clone()
        };
        train_seqs.push(generate_sequence(&scene)?);
    }
    let mut eval_seqs = Vec::new();
    for i in 0..cfg.eval_sequences {
        let scene = SceneConfig {
            seed: seed.wrapping_mul(1000).wrapping_add(900 + i as u64),
            n_frames: cfg.frames_per_sequence,
            ..cfg.scene.clone()
        };
        eval_seqs.push(generate_sequence(&scene)?);
    }
    let train = Dataset::from_sequences(&train_seqs, &cfg.densify)?;
    let eval = Dataset::from_sequences(&eval_seqs, &cfg.densify)?;
    Ok((train, eval))
}

/// Run the ablation matrix. `progress` receives one line per completed
/// training run.
pub fn run_ablation(
    cfg: &BenchConfig,
    rows: &[(&str, AblationFlags)],
    progress: &mut dyn FnMut(String),
) -> Result<BenchResult> {
    let spec = toy_model_spec();
    let mut row_results: Vec<RowResult> = rows
        .iter()
        .map(|(label, flags)| RowResult {
            label: label.to_string(),
            flags: *flags,
            reports: Vec::new(),
        })
        .collect();
    let mut teacher_reports = Vec::new();

    for &seed in &cfg.seeds {
        let (train_data, eval_data) = build_seed_datasets(cfg, seed)?;
        let ddet_cfg = TrainConfig { steps: cfg.steps_ddet, seed, ..Default::default() };
        let (teacher, _) = train_ddet(&train_data, &spec, &ddet_cfg)?;
        progress(format!("seed {seed}: teacher trained ({} steps)", cfg.steps_ddet));
        // Reference: the teacher evaluated on its own dense inputs.
        let teacher_eval = {
            let dense_eval = Dataset {
                samples: eval_data
                    .samples
                    .iter()
                    .map(|s| {
                        let mut d = s.clone();
                        d.sparse_cloud = s.dense_cloud.clone();
                        d
                    })
                    .collect(),
            };
            evaluate_model(&teacher, false, &spec, &dense_eval, &cfg.decode, &cfg.eval, None)?
        };
        teacher_reports.push(teacher_eval);

        for row in row_results.iter_mut() {
            let sdet_cfg = TrainConfig {
                steps: cfg.steps_sdet,
                seed,
                ablation: row.flags,
                ..Default::default()
            };
            let (student, _) = train_sdet(&train_data, &teacher, &spec, &sdet_cfg)?;
            let report = evaluate_model(
                &student,
                row.flags.s2d,
                &spec,
                &eval_data,
                &cfg.decode,
                &cfg.eval,
                Some(&teacher),
            )?;
            progress(format!(
                "seed {seed}: {} -> vehicle AP {:.4}, feature MSE {:.5}",
                row.label,
                report.vehicle.ap,
                report.feature_mse.unwrap_or(f64::NAN)
            ));
            row.reports.push(report);
        }
    }
    Ok(BenchResult { seeds: cfg.seeds.clone(), rows: row_results, teacher_reports })
}

// ---- gradient-check suite ---------------------------------------------------

use crate::detector::{make_heatmap_targets, Detector};
use crate::geom::{ClassId, OrientedBox, Point3};
use crate::loss::{
    box_reg_loss, feature_distill_loss, focal_heatmap_loss, heatmap_distill_loss,
    occupancy_mask_loss, offset_loss, LossWeights,
};
use crate::nn::{grad_check_params, ParamStore, Session};
use crate::pcr::{reconstruct_points, PcrHead};
use crate::s2d::S2dBlock;
use crate::targets::build_targets;
use crate::tensor::check::{grad_check, GRAD_CHECK_H};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn randt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

pub const GRADCHECK_MODULES: &[&str] = &[
    "conv2d",
    "conv3d",
    "depthwise",
    "transpose",
    "norms",
    "activations",
    "structural",
    "losses",
    "s2d",
    "pcr",
    "detector",
];

/// Run the finite-difference verification for one module (or "all").
/// Returns (check name, max relative error) pairs.
pub fn gradcheck_suite(module: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let run_all = module == "all";
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_817);
    let want = |name: &str| run_all || module == name;

    if want("conv2d") {
        let x = randt(&mut rng, &[1, 2, 5, 4], -1.0, 1.0);
        let w = randt(&mut rng, &[3, 2, 3, 3], -0.7, 0.7);
        let b = randt(&mut rng, &[3], -0.3, 0.3);
        let w1 = randt(&mut rng, &[2, 3, 1, 1], -0.7, 0.7);
        let err = grad_check(
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
                let z = tape.conv2d(y, ids[3], None, 1, 0)?;
                let sq = tape.powi(z, 2);
                Ok(tape.sum(sq))
            },
            &[x, w, b, w1],
            GRAD_CHECK_H,
        )?;
        out.push(("conv2d(k3s2p1)+1x1".to_string(), err));
    }
    if want("conv3d") {
        let x = randt(&mut rng, &[1, 2, 3, 4, 4], -1.0, 1.0);
        let w = randt(&mut rng, &[2, 2, 3, 3, 3], -0.5, 0.5);
        let b = randt(&mut rng, &[2], -0.3, 0.3);
        let err = grad_check(
            |tape, ids| {
                let y = tape.conv3d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
                let g = tape.gelu(y);
                let sq = tape.powi(g, 2);
                Ok(tape.sum(sq))
            },
            &[x, w, b],
            GRAD_CHECK_H,
        )?;
        out.push(("conv3d(k3s2p1)+gelu".to_string(), err));
    }
    if want("depthwise") {
        let x = randt(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
        let w = randt(&mut rng, &[3, 3, 3], -0.5, 0.5);
        let b = randt(&mut rng, &[3], -0.2, 0.2);
        let err = grad_check(
            |tape, ids| {
                let y = tape.depthwise_conv2d(ids[0], ids[1], Some(ids[2]), 1)?;
                let sq = tape.powi(y, 2);
                Ok(tape.sum(sq))
            },
            &[x, w, b],
            GRAD_CHECK_H,
        )?;
        out.push(("depthwise(k3)".to_string(), err));
    }
    if want("transpose") {
        let x = randt(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let w2 = randt(&mut rng, &[2, 3, 2, 2], -0.5, 0.5);
        let x3 = randt(&mut rng, &[1, 2, 2, 2, 2], -1.0, 1.0);
        let w3 = randt(&mut rng, &[2, 2, 2, 2, 2], -0.5, 0.5);
        let b3 = randt(&mut rng, &[2], -0.2, 0.2);
        let err = grad_check(
            |tape, ids| {
                let y = tape.conv_transpose2d(ids[0], ids[1], None, 2, 0, 0)?;
                let sq = tape.powi(y, 2);
                Ok(tape.sum(sq))
            },
            &[x, w2],
            GRAD_CHECK_H,
        )?;
        out.push(("conv_transpose2d(k2s2)".to_string(), err));
        let err = grad_check(
            |tape, ids| {
                let y = tape.conv_transpose3d(ids[0], ids[1], Some(ids[2]), 2, 0, 0)?;
                let sq = tape.powi(y, 2);
                Ok(tape.sum(sq))
            },
            &[x3, w3, b3],
            GRAD_CHECK_H,
        )?;
        out.push(("conv_transpose3d(k2s2)".to_string(), err));
    }
    if want("norms") {
        let x = randt(&mut rng, &[2, 3, 5], -1.5, 1.5);
        let gamma = randt(&mut rng, &[3], 0.5, 1.5);
        let beta = randt(&mut rng, &[3], -0.5, 0.5);
        let err = grad_check(
            |tape, ids| {
                let (y, _, _) = tape.batch_norm(ids[0], ids[1], ids[2])?;
                let z = tape.layer_norm(y, ids[1], ids[2])?;
                let sq = tape.powi(z, 2);
                Ok(tape.sum(sq))
            },
            &[x, gamma, beta],
            GRAD_CHECK_H,
        )?;
        out.push(("batch_norm+layer_norm".to_string(), err));
    }
    if want("activations") {
        let x = randt(&mut rng, &[12], -2.0, 2.0);
        let err = grad_check(
            |tape, ids| {
                let g = tape.gelu(ids[0]);
                let s = tape.sigmoid(g);
                let l = tape.log_clamped(s, 1e-12);
                let p = tape.powi(l, 2);
                Ok(tape.sum(p))
            },
            &[x],
            GRAD_CHECK_H,
        )?;
        out.push(("gelu+sigmoid+log+powi".to_string(), err));
    }
    if want("structural") {
        let a = randt(&mut rng, &[1, 2, 3], -1.0, 1.0);
        let b = randt(&mut rng, &[1, 3, 3], -1.0, 1.0);
        let m = randt(&mut rng, &[1, 1, 3], 0.1, 0.9);
        let err = grad_check(
            |tape, ids| {
                let c = tape.concat(1, &[ids[0], ids[1]])?;
                let s = tape.slice(c, 1, 1, 3)?;
                let r = tape.reshape(s, vec![1, 3, 3])?;
                let bm = tape.mul_bcast_c(r, ids[2])?;
                let af = tape.affine(bm, 1.5, -0.25);
                let sq = tape.powi(af, 2);
                Ok(tape.sum(sq))
            },
            &[a, b, m],
            GRAD_CHECK_H,
        )?;
        out.push(("concat+slice+reshape+bcast".to_string(), err));
    }
    if want("losses") {
        // Every loss composed with a small conv network.
        let x = randt(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = randt(&mut rng, &[1, 2, 3, 3], -0.6, 0.6);
        let hm_target = {
            let mut d = vec![0.1; 16];
            d[5] = 1.0;
            d[10] = 1.0;
            Tensor::new(vec![1, 1, 4, 4], d)
        };
        let teacher_feat = {
            let t = randt(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
            let mut d = t.data().to_vec();
            for v in d.iter_mut().take(7) {
                *v = 0.0;
            }
            Tensor::new(vec![1, 1, 4, 4], d)
        };
        let teacher_hm = {
            let mut d = vec![0.2; 16];
            d[5] = 0.97;
            Tensor::new(vec![1, 1, 4, 4], d)
        };
        let peaks = {
            let mut d = vec![0.0; 16];
            d[5] = 1.0;
            Tensor::new(vec![1, 1, 4, 4], d)
        };
        let reg_target = randt(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
        let weights = LossWeights::default();
        let err = grad_check(
            |tape, ids| {
                let feat = tape.conv2d(ids[0], ids[1], None, 1, 1)?;
                let probs = tape.sigmoid(feat);
                let l_hm = focal_heatmap_loss(tape, probs, &hm_target)?;
                let l_fd = feature_distill_loss(tape, feat, &teacher_feat, None, &weights)?;
                let l_hd = heatmap_distill_loss(tape, probs, &teacher_hm)?;
                let l_rg = box_reg_loss(tape, feat, &reg_target, &peaks)?;
                let a = tape.add(l_hm, l_fd)?;
                let b = tape.add(l_hd, l_rg)?;
                tape.add(a, b)
            },
            &[x, w],
            GRAD_CHECK_H,
        )?;
        out.push(("focal+distill+hm_dis+reg via conv".to_string(), err));

        // Reconstruction losses through a tiny 3D head.
        let spec = VoxelSpec::new([0.0; 3], [0.5; 3], [8, 8, 8]);
        let cloud: Vec<Point3> = (0..20)
            .map(|_| {
                Point3::new(
                    rng.gen_range(0.2..3.8),
                    rng.gen_range(0.2..3.8),
                    rng.gen_range(0.2..3.8),
                )
            })
            .collect();
        let targets = build_targets(&cloud, &spec);
        let st = targets.scales[0].clone();
        let x3 = randt(&mut rng, &[1, 2, 2, 2, 2], -1.0, 1.0);
        let wm = randt(&mut rng, &[1, 2, 1, 1, 1], -0.8, 0.8);
        let wo = randt(&mut rng, &[3, 2, 1, 1, 1], -0.8, 0.8);
        let v_c = Tensor::new(
            vec![1, 3, st.spec.shape[2], st.spec.shape[1], st.spec.shape[0]],
            st.voxel_centers(),
        );
        let err = grad_check(
            |tape, ids| {
                let logits = tape.conv3d(ids[0], ids[1], None, 1, 0)?;
                let mask = tape.sigmoid(logits);
                let offs = tape.conv3d(ids[0], ids[2], None, 1, 0)?;
                let lm = occupancy_mask_loss(tape, mask, &st)?;
                let lo = offset_loss(tape, offs, &st)?;
                // Also push gradient through the point assembly.
                let centers = tape.constant(v_c.clone());
                let absolute = tape.add(offs, centers)?;
                let pc = tape.mul_bcast_c(absolute, mask)?;
                let sq = tape.powi(pc, 2);
                let spc = tape.sum(sq);
                let ab = tape.add(lm, lo)?;
                tape.add(ab, spc)
            },
            &[x3, wm, wo],
            GRAD_CHECK_H,
        )?;
        out.push(("mask+offset+recon via conv3d".to_string(), err));
    }
    if want("s2d") {
        let block = S2dBlock::new(8);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let x = randt(&mut rng, &[1, 8, 8, 8], -1.0, 1.0);
        let err = grad_check(
            |tape, ids| {
                let store = store.clone();
                let mut sess = Session::eval_recording(&store);
                std::mem::swap(&mut sess.tape, tape);
                let r = (|| -> Result<crate::tensor::TensorId> {
                    let (f_b, f_a) = block.forward(&mut sess, ids[0])?;
                    let sb = sess.tape.powi(f_b, 2);
                    let sa = sess.tape.powi(f_a, 2);
                    let b = sess.tape.sum(sb);
                    let a = sess.tape.sum(sa);
                    sess.tape.add(a, b)
                })();
                std::mem::swap(&mut sess.tape, tape);
                r
            },
            &[x.clone()],
            GRAD_CHECK_H,
        )?;
        out.push(("s2d full block wrt input".to_string(), err));
        let input = x;
        let err = grad_check_params(
            |sess| {
                let xc = sess.tape.constant(input.clone());
                let (f_b, f_a) = block.forward(sess, xc)?;
                let sb = sess.tape.powi(f_b, 2);
                let sa = sess.tape.powi(f_a, 2);
                let b = sess.tape.sum(sb);
                let a = sess.tape.sum(sa);
                sess.tape.add(a, b)
            },
            &store,
            &[
                "s2d.block1.ln.gamma".to_string(),
                "s2d.mid.bn.beta".to_string(),
                "s2d.fuse_b.b".to_string(),
                "s2d.up1.conv.b".to_string(),
            ],
            GRAD_CHECK_H,
        )?;
        out.push(("s2d full block wrt params".to_string(), err));
    }
    if want("pcr") {
        let voxel = VoxelSpec::new([-2.0, -2.0, -1.0], [0.25, 0.25, 0.25], [16, 16, 8]);
        let head = PcrHead::new(voxel, 8, 4)?;
        let mut store = ParamStore::new();
        head.init(&mut store, &mut rng);
        let x = randt(&mut rng, &[1, 8, 4, 4], -0.8, 0.8);
        let cloud: Vec<Point3> = (0..15)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.8..1.8),
                    rng.gen_range(-1.8..1.8),
                    rng.gen_range(-0.8..0.8),
                )
            })
            .collect();
        let targets = build_targets(&cloud, &voxel);
        let input = x;
        let err = grad_check_params(
            |sess| {
                let xc = sess.tape.constant(input.clone());
                let out = head.forward(sess, xc)?;
                let mut total: Option<crate::tensor::TensorId> = None;
                for (s, t) in out.scales.iter().zip(&targets.scales) {
                    let lm = occupancy_mask_loss(&mut sess.tape, s.v_mask, t)?;
                    let lo = offset_loss(&mut sess.tape, s.p_offset, t)?;
                    let centers = Tensor::new(
                        vec![1, 3, t.spec.shape[2], t.spec.shape[1], t.spec.shape[0]],
                        t.voxel_centers(),
                    );
                    let pc = reconstruct_points(sess, s.v_mask, s.p_offset, &centers)?;
                    let sq = sess.tape.powi(pc, 2);
                    let spc = sess.tape.sum(sq);
                    let spc = sess.tape.scale(spc, 1e-3);
                    let sub = sess.tape.add(lm, lo)?;
                    let sub = sess.tape.add(sub, spc)?;
                    total = Some(match total {
                        Some(acc) => sess.tape.add(acc, sub)?,
                        None => sub,
                    });
                }
                Ok(total.unwrap())
            },
            &store,
            &[
                "pcr.proj.b".to_string(),
                "pcr.s1.mask.b".to_string(),
                "pcr.s2.off.b".to_string(),
                "pcr.s1.up.b".to_string(),
            ],
            GRAD_CHECK_H,
        )?;
        out.push(("pcr head + losses wrt params".to_string(), err));
    }
    if want("detector") {
        let voxel = VoxelSpec::new([-2.0, -2.0, -1.0], [0.25, 0.25, 0.25], [16, 16, 8]);
        let arch = ArchConfig {
            encoder_channels: 4,
            backbone_channels: [4, 6],
            bev_channels: 6,
            pcr_channels: 4,
        };
        let det = Detector::new(voxel, arch);
        let mut store = ParamStore::new();
        det.init(&mut store, &mut rng);
        let cloud: Vec<Point3> = (0..25)
            .map(|_| {
                Point3::with_feat(
                    rng.gen_range(-1.8..1.8),
                    rng.gen_range(-1.8..1.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let boxes = vec![OrientedBox::new(
            [0.4, -0.3, 0.0],
            [1.5, 0.8, 1.0],
            0.5,
            ClassId::Vehicle,
            1,
        )];
        let hm_target = make_heatmap_targets(&boxes, &voxel);
        let err = grad_check_params(
            |sess| {
                let feats = det.forward_features(sess, &cloud)?;
                let out = det.forward_heads(sess, feats.f_c)?;
                let l = focal_heatmap_loss(&mut sess.tape, out.heatmap, &hm_target)?;
                let sq = sess.tape.powi(out.regression, 2);
                let sr = sess.tape.sum(sq);
                let sr = sess.tape.scale(sr, 1e-2);
                sess.tape.add(l, sr)
            },
            &store,
            &[
                "enc.c1.w".to_string(),
                "bb.s1.bn.gamma".to_string(),
                "bev.conv.b".to_string(),
                "head.hm.c2.b".to_string(),
                "head.reg.c1.b".to_string(),
            ],
            GRAD_CHECK_H,
        )?;
        out.push(("detector pipeline wrt params".to_string(), err));
    }
    if out.is_empty() {
        return Err(crate::error::CoreError::InvalidConfig(format!(
            "unknown gradcheck module '{module}' (expected one of {GRADCHECK_MODULES:?} or 'all')"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_match_table_structure() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].0, "Baseline");
        assert_eq!(rows[4].0, "- Distillation");
        assert!(!rows[4].1.distill && rows[4].1.s2d && rows[4].1.pcr);
        for (_, flags) in rows {
            flags.validate().unwrap();
        }
    }

    #[test]
    fn seed_datasets_are_deterministic_and_disjoint() {
        let cfg = BenchConfig {
            train_sequences: 1,
            eval_sequences: 1,
            frames_per_sequence: 3,
            ..Default::default()
        };
        let (a_train, a_eval) = build_seed_datasets(&cfg, 7).unwrap();
        let (b_train, _) = build_seed_datasets(&cfg, 7).unwrap();
        assert_eq!(a_train.samples.len(), 3);
        assert_eq!(
            a_train.samples[0].sparse_cloud,
            b_train.samples[0].sparse_cloud
        );
        // Held-out scenes differ from training scenes.
        assert_ne!(
            a_train.samples[0].sparse_cloud,
            a_eval.samples[0].sparse_cloud
        );
    }
}
