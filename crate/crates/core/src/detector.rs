//! The shared detector skeleton used by both the dense-input teacher and
//! the sparse-input student: per-voxel feature encoding, an occupancy-masked
//! dense 3D backbone standing in for sparse convolution, BEV projection,
//! and center-style heatmap/regression heads.
//!
//! Masking is the load-bearing detail: after every backbone stage the
//! features are multiplied by the max-pooled occupancy mask, so features
//! stay confined to occupied neighborhoods and empty regions carry exact
//! zeros all the way into the BEV feature. A plain detector therefore
//! cannot express features for unobserved regions; the densification block
//! exists to lift that restriction for the student.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{voxel_index, wrap_angle, ClassId, OrientedBox, Point3, VoxelSpec, NUM_CLASSES};
use crate::nn::{BatchNorm, Conv2d, Conv3d, ParamStore, Session};
use crate::tensor::conv::{mask_depth_max, maxpool_mask3d};
use crate::tensor::{Tensor, TensorId};

/// Number of raw per-voxel encoder inputs: mean xyz offset, mean feature,
/// normalized count.
pub const ENCODER_INPUTS: usize = 5;
/// Regression channels: xy cell offset, z, log dims, sin/cos yaw.
pub const REG_CHANNELS: usize = 8;
/// Heatmap-head final bias; sigmoid(-2.19) ~ 0.1.
pub const HEATMAP_BIAS_INIT: f64 = -2.19;
/// Downsample factor from the voxel grid to the BEV feature map
/// (two stride-2 backbone stages).
pub const BEV_FACTOR: usize = 4;

/// Channel widths. Defaults mirror the production plan at desk scale;
/// the toy benchmark shrinks everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub encoder_channels: usize,
    pub backbone_channels: [usize; 2],
    pub bev_channels: usize,
    /// Width of the reconstruction head's 3D convs.
    pub pcr_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            encoder_channels: 16,
            backbone_channels: [32, 64],
            bev_channels: 64,
            pcr_channels: 32,
        }
    }
}

impl ArchConfig {
    /// Small widths for the CPU toy benchmark.
    pub fn toy() -> Self {
        ArchConfig {
            encoder_channels: 8,
            backbone_channels: [16, 32],
            bev_channels: 32,
            pcr_channels: 16,
        }
    }
}

/// Encoded voxel grid: dense features plus the {0,1} occupancy mask.
pub struct VoxelFeatures {
    /// `[1, C0, D, H, W]`, exactly zero wherever `mask` is zero.
    pub features: TensorId,
    /// `[1, 1, D, H, W]` constant.
    pub mask: Tensor,
}

/// Raw per-voxel statistics grid: `[1, 5, D, H, W]` plus occupancy mask.
///
/// Channels: mean offset from voxel center (xyz), mean point feature, and
/// `min(count, 5)/5`. Empty voxels are all-zero.
pub fn voxel_input_grid(cloud: &[Point3], spec: &VoxelSpec) -> (Tensor, Tensor) {
    let [nx, ny, nz] = spec.shape;
    let n = spec.num_voxels();
    let mut sums = vec![0.0f64; 4 * n];
    let mut counts = vec![0u32; n];
    for p in cloud {
        if let Some(idx) = voxel_index(p, spec) {
            let f = spec.flat(idx);
            let c = spec.voxel_center(idx);
            sums[f] += p.x - c[0];
            sums[n + f] += p.y - c[1];
            sums[2 * n + f] += p.z - c[2];
            sums[3 * n + f] += p.feat;
            counts[f] += 1;
        }
    }
    let mut grid = vec![0.0f64; ENCODER_INPUTS * n];
    let mut mask = vec![0.0f64; n];
    for f in 0..n {
        if counts[f] > 0 {
            let inv = 1.0 / counts[f] as f64;
            grid[f] = sums[f] * inv;
            grid[n + f] = sums[n + f] * inv;
            grid[2 * n + f] = sums[2 * n + f] * inv;
            grid[3 * n + f] = sums[3 * n + f] * inv;
            grid[4 * n + f] = (counts[f] as f64 / 5.0).min(1.0);
            mask[f] = 1.0;
        }
    }
    (
        Tensor::new(vec![1, ENCODER_INPUTS, nz, ny, nx], grid),
        Tensor::new(vec![1, 1, nz, ny, nx], mask),
    )
}

/// Flatten depth into channels: `[N,C,D,H,W] -> [N,C*D,H,W]`. Lossless;
/// the layout already stores depth-major channels contiguously.
pub fn bev_project(sess: &mut Session, feat3d: TensorId) -> Result<TensorId> {
    let s = sess.tape.shape(feat3d).to_vec();
    if s.len() != 5 {
        return Err(CoreError::shape(format!("bev_project expects 5-d, got {s:?}")));
    }
    sess.tape.reshape(feat3d, vec![s[0], s[1] * s[2], s[3], s[4]])
}

/// Inverse of [`bev_project`].
pub fn bev_unproject(sess: &mut Session, bev: TensorId, depth: usize) -> Result<TensorId> {
    let s = sess.tape.shape(bev).to_vec();
    if s.len() != 4 || s[1] % depth != 0 {
        return Err(CoreError::shape(format!("bev_unproject {s:?} with depth {depth}")));
    }
    sess.tape.reshape(bev, vec![s[0], s[1] / depth, depth, s[2], s[3]])
}

/// Everything the training loop needs from one backbone pass.
pub struct DetectorFeatures {
    /// Masked BEV feature `[1, W, H', W']` (the pre-densification tap).
    pub f_c: TensorId,
    /// BEV occupancy `[1, 1, H', W']`, constant.
    pub bev_mask: Tensor,
}

/// Head outputs: per-class heatmap probabilities and box regression.
pub struct DetectorOutputs {
    /// `[1, K, H', W']` in (0,1).
    pub heatmap: TensorId,
    /// `[1, 8, H', W']`.
    pub regression: TensorId,
}

pub struct Detector {
    pub voxel: VoxelSpec,
    pub arch: ArchConfig,
    enc1: Conv3d,
    enc2: Conv3d,
    stage1: Conv3d,
    bn1: BatchNorm,
    stage2: Conv3d,
    bn2: BatchNorm,
    bev_reduce: Conv2d,
    bev_bn: BatchNorm,
    hm_c1: Conv2d,
    hm_c2: Conv2d,
    reg_c1: Conv2d,
    reg_c2: Conv2d,
}

impl Detector {
    pub fn new(voxel: VoxelSpec, arch: ArchConfig) -> Self {
        for a in 0..3 {
            assert!(
                voxel.shape[a] % BEV_FACTOR == 0,
                "voxel shape {:?} must be divisible by {BEV_FACTOR}",
                voxel.shape
            );
        }
        let c0 = arch.encoder_channels;
        let [c1, c2] = arch.backbone_channels;
        let bev_in = c2 * (voxel.shape[2] / BEV_FACTOR);
        let w = arch.bev_channels;
        Detector {
            voxel,
            arch,
            enc1: Conv3d::new("enc.c1", ENCODER_INPUTS, c0, 1, 1, 0),
            enc2: Conv3d::new("enc.c2", c0, c0, 1, 1, 0),
            stage1: Conv3d::new("bb.s1.conv", c0, c1, 3, 2, 1),
            bn1: BatchNorm::new("bb.s1.bn", c1),
            stage2: Conv3d::new("bb.s2.conv", c1, c2, 3, 2, 1),
            bn2: BatchNorm::new("bb.s2.bn", c2),
            bev_reduce: Conv2d::new("bev.conv", bev_in, w, 1, 1, 0),
            bev_bn: BatchNorm::new("bev.bn", w),
            hm_c1: Conv2d::new("head.hm.c1", w, w, 3, 1, 1),
            hm_c2: Conv2d::new("head.hm.c2", w, NUM_CLASSES, 1, 1, 0),
            reg_c1: Conv2d::new("head.reg.c1", w, w, 3, 1, 1),
            reg_c2: Conv2d::new("head.reg.c2", w, REG_CHANNELS, 1, 1, 0),
        }
    }

    /// Register freshly initialized parameters into `store`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.enc1.init(store, rng);
        self.enc2.init(store, rng);
        self.stage1.init(store, rng);
        self.bn1.init(store);
        self.stage2.init(store, rng);
        self.bn2.init(store);
        self.bev_reduce.init(store, rng);
        self.bev_bn.init(store);
        self.hm_c1.init(store, rng);
        self.hm_c2.init(store, rng);
        self.reg_c1.init(store, rng);
        self.reg_c2.init(store, rng);
        // Start the heatmap near probability 0.1 so early focal loss is tame.
        store.set_value(
            "head.hm.c2.b",
            Tensor::full(&[NUM_CLASSES], HEATMAP_BIAS_INIT),
        );
    }

    /// Encode a cloud into masked voxel features.
    pub fn encode_voxels(&self, sess: &mut Session, cloud: &[Point3]) -> Result<VoxelFeatures> {
        let (grid, mask) = voxel_input_grid(cloud, &self.voxel);
        let g = sess.tape.constant(grid);
        let h = self.enc1.forward(sess, g)?;
        let h = sess.tape.gelu(h);
        let h = self.enc2.forward(sess, h)?;
        let m = sess.tape.constant(mask.clone());
        let features = sess.tape.mul_bcast_c(h, m)?;
        Ok(VoxelFeatures { features, mask })
    }

    /// Two masked stride-2 stages. Returns the 3D feature and its mask.
    pub fn backbone_forward(
        &self,
        sess: &mut Session,
        vf: &VoxelFeatures,
    ) -> Result<(TensorId, Tensor)> {
        let h = self.stage1.forward(sess, vf.features)?;
        let h = self.bn1.forward(sess, h)?;
        let h = sess.tape.gelu(h);
        let mask1 = maxpool_mask3d(&vf.mask, 3, 2, 1);
        let m1 = sess.tape.constant(mask1.clone());
        let h = sess.tape.mul_bcast_c(h, m1)?;

        let h = self.stage2.forward(sess, h)?;
        let h = self.bn2.forward(sess, h)?;
        let h = sess.tape.gelu(h);
        let mask2 = maxpool_mask3d(&mask1, 3, 2, 1);
        let m2 = sess.tape.constant(mask2.clone());
        let h = sess.tape.mul_bcast_c(h, m2)?;
        Ok((h, mask2))
    }

    /// Full feature path: encode, backbone, BEV projection, BEV reduce,
    /// then re-mask so empty BEV columns stay exactly zero.
    pub fn forward_features(
        &self,
        sess: &mut Session,
        cloud: &[Point3],
    ) -> Result<DetectorFeatures> {
        let vf = self.encode_voxels(sess, cloud)?;
        let (feat3d, mask3d) = self.backbone_forward(sess, &vf)?;
        let bev = bev_project(sess, feat3d)?;
        let h = self.bev_reduce.forward(sess, bev)?;
        let h = self.bev_bn.forward(sess, h)?;
        let h = sess.tape.gelu(h);
        let bev_mask = mask_depth_max(&mask3d);
        let m = sess.tape.constant(bev_mask.clone());
        let f_c = sess.tape.mul_bcast_c(h, m)?;
        Ok(DetectorFeatures { f_c, bev_mask })
    }

    /// Heatmap + regression heads on the fused feature.
    pub fn forward_heads(&self, sess: &mut Session, f_a: TensorId) -> Result<DetectorOutputs> {
        let h = self.hm_c1.forward(sess, f_a)?;
        let h = sess.tape.gelu(h);
        let logits = self.hm_c2.forward(sess, h)?;
        let heatmap = sess.tape.sigmoid(logits);

        let r = self.reg_c1.forward(sess, f_a)?;
        let r = sess.tape.gelu(r);
        let regression = self.reg_c2.forward(sess, r)?;
        Ok(DetectorOutputs { heatmap, regression })
    }

    pub fn bev_grid(&self) -> BevGrid {
        BevGrid::of(&self.voxel)
    }
}

/// BEV cell geometry of the head outputs.
#[derive(Debug, Clone, Copy)]
pub struct BevGrid {
    pub origin: [f64; 2],
    pub cell: [f64; 2],
    /// (rows = y cells, cols = x cells)
    pub shape: [usize; 2],
}

impl BevGrid {
    pub fn of(voxel: &VoxelSpec) -> BevGrid {
        BevGrid {
            origin: [voxel.origin[0], voxel.origin[1]],
            cell: [
                voxel.cell[0] * BEV_FACTOR as f64,
                voxel.cell[1] * BEV_FACTOR as f64,
            ],
            shape: [voxel.shape[1] / BEV_FACTOR, voxel.shape[0] / BEV_FACTOR],
        }
    }

    /// Cell indices (iy, ix) of a world xy position, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<[usize; 2]> {
        let fx = (x - self.origin[0]) / self.cell[0];
        let fy = (y - self.origin[1]) / self.cell[1];
        if fx < 0.0 || fy < 0.0 || fx >= self.shape[1] as f64 || fy >= self.shape[0] as f64 {
            return None;
        }
        Some([fy as usize, fx as usize])
    }
}

/// CenterNet-style gaussian radius for a BEV footprint (cells), clamped to
/// a minimum of 2 cells.
pub fn gaussian_radius(height: f64, width: f64) -> f64 {
    let min_overlap = 0.7;
    let a1 = 1.0;
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let sq1 = (b1 * b1 - 4.0 * a1 * c1).max(0.0).sqrt();
    let r1 = (b1 + sq1) / 2.0;
    let a2 = 4.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let sq2 = (b2 * b2 - 4.0 * a2 * c2).max(0.0).sqrt();
    let r2 = (b2 + sq2) / (2.0 * a2);
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let sq3 = (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt();
    let r3 = (b3 + sq3) / (2.0 * a3);
    r1.min(r2).min(r3).max(2.0)
}

/// Per-class heatmap targets `[1, K, H', W']`: a gaussian splat per object,
/// overlaps resolved by elementwise max. Peak value is exactly 1 at the
/// center cell.
pub fn make_heatmap_targets(boxes: &[OrientedBox], voxel: &VoxelSpec) -> Tensor {
    let grid = BevGrid::of(voxel);
    let [rows, cols] = grid.shape;
    let mut data = vec![0.0f64; NUM_CLASSES * rows * cols];
    for b in boxes {
        let Some([iy, ix]) = grid.cell_of(b.center[0], b.center[1]) else { continue };
        let radius = gaussian_radius(b.dims[1] / grid.cell[1], b.dims[0] / grid.cell[0]);
        let r = radius.ceil() as i64;
        let sigma = (2.0 * radius + 1.0) / 6.0;
        let k = b.class_id.index();
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (iy as i64 + dy, ix as i64 + dx);
                if y < 0 || x < 0 || y >= rows as i64 || x >= cols as i64 {
                    continue;
                }
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut data[(k * rows + y as usize) * cols + x as usize];
                *cell = cell.max(g);
            }
        }
    }
    Tensor::new(vec![1, NUM_CLASSES, rows, cols], data)
}

/// Regression targets and the peak mask. Channels per peak cell:
/// `[dx, dy, z, ln l, ln w, ln h, sin yaw, cos yaw]` where dx/dy are cell
/// offsets of the true center from the cell midpoint.
pub fn make_regression_targets(boxes: &[OrientedBox], voxel: &VoxelSpec) -> (Tensor, Tensor) {
    let grid = BevGrid::of(voxel);
    let [rows, cols] = grid.shape;
    let mut reg = vec![0.0f64; REG_CHANNELS * rows * cols];
    let mut peaks = vec![0.0f64; rows * cols];
    let plane = rows * cols;
    for b in boxes {
        let Some([iy, ix]) = grid.cell_of(b.center[0], b.center[1]) else { continue };
        let fx = (b.center[0] - grid.origin[0]) / grid.cell[0];
        let fy = (b.center[1] - grid.origin[1]) / grid.cell[1];
        let cell = iy * cols + ix;
        peaks[cell] = 1.0;
        let vals = [
            fx - (ix as f64 + 0.5),
            fy - (iy as f64 + 0.5),
            b.center[2],
            b.dims[0].ln(),
            b.dims[1].ln(),
            b.dims[2].ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ];
        for (c, v) in vals.iter().enumerate() {
            reg[c * plane + cell] = *v;
        }
    }
    (
        Tensor::new(vec![1, REG_CHANNELS, rows, cols], reg),
        Tensor::new(vec![1, 1, rows, cols], peaks),
    )
}

/// One decoded detection.
#[derive(Debug, Clone)]
pub struct Detection {
    pub class_id: ClassId,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub score: f64,
}

impl Detection {
    pub fn to_box(&self) -> OrientedBox {
        OrientedBox::new(self.center, self.dims, self.yaw, self.class_id, 0)
    }
}

/// Peak decode: 3x3 local maxima above `score_thresh`, regression channels
/// read at each peak, sorted by descending score, truncated to `max_dets`.
pub fn decode(
    heatmap: &Tensor,
    regression: &Tensor,
    voxel: &VoxelSpec,
    score_thresh: f64,
    max_dets: usize,
) -> Vec<Detection> {
    let grid = BevGrid::of(voxel);
    let [rows, cols] = grid.shape;
    assert_eq!(heatmap.shape(), &[1, NUM_CLASSES, rows, cols]);
    assert_eq!(regression.shape(), &[1, REG_CHANNELS, rows, cols]);
    let hm = heatmap.data();
    let rg = regression.data();
    let plane = rows * cols;
    let mut dets: Vec<Detection> = Vec::new();
    for k in 0..NUM_CLASSES {
        for iy in 0..rows {
            for ix in 0..cols {
                let p = hm[(k * rows + iy) * cols + ix];
                if p <= score_thresh {
                    continue;
                }
                let mut is_peak = true;
                'nb: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (y, x) = (iy as i64 + dy, ix as i64 + dx);
                        if y < 0 || x < 0 || y >= rows as i64 || x >= cols as i64 {
                            continue;
                        }
                        if hm[(k * rows + y as usize) * cols + x as usize] > p {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if !is_peak {
                    continue;
                }
                let cell = iy * cols + ix;
                let dx = rg[cell];
                let dy = rg[plane + cell];
                let z = rg[2 * plane + cell];
                let dims = [
                    rg[3 * plane + cell].exp(),
                    rg[4 * plane + cell].exp(),
                    rg[5 * plane + cell].exp(),
                ];
                let yaw = rg[6 * plane + cell].atan2(rg[7 * plane + cell]);
                dets.push(Detection {
                    class_id: ClassId::from_index(k).unwrap(),
                    center: [
                        grid.origin[0] + (ix as f64 + 0.5 + dx) * grid.cell[0],
                        grid.origin[1] + (iy as f64 + 0.5 + dy) * grid.cell[1],
                        z,
                    ],
                    dims,
                    yaw: wrap_angle(yaw),
                    score: p,
                });
            }
        }
    }
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.index().cmp(&b.class_id.index()))
            .then(a.center[0].total_cmp(&b.center[0]))
            .then(a.center[1].total_cmp(&b.center[1]))
    });
    dets.truncate(max_dets);
    dets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid_f;
    use rand::prelude::*;

    fn toy_spec() -> VoxelSpec {
        // 16 x 16 x 4 voxels of 0.5 m -> BEV 4x4 of 2 m.
        VoxelSpec::new([-4.0, -4.0, -1.0], [0.5, 0.5, 0.5], [16, 16, 4])
    }

    fn make_detector() -> (Detector, ParamStore) {
        let det = Detector::new(toy_spec(), ArchConfig { encoder_channels: 4, backbone_channels: [6, 8], bev_channels: 8, pcr_channels: 4 });
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        det.init(&mut store, &mut rng);
        (det, store)
    }

    #[test]
    fn empty_cloud_gives_zero_grid_and_mask() {
        let (grid, mask) = voxel_input_grid(&[], &toy_spec());
        assert!(grid.data().iter().all(|v| *v == 0.0));
        assert!(mask.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn point_at_voxel_center_has_zero_offset() {
        let spec = toy_spec();
        let c = spec.voxel_center([3, 4, 1]);
        let (grid, mask) = voxel_input_grid(&[Point3::with_feat(c[0], c[1], c[2], 0.8)], &spec);
        let n = spec.num_voxels();
        let f = spec.flat([3, 4, 1]);
        assert_eq!(mask.data()[f], 1.0);
        assert!(grid.data()[f].abs() < 1e-12);
        assert!(grid.data()[n + f].abs() < 1e-12);
        assert!(grid.data()[2 * n + f].abs() < 1e-12);
        assert!((grid.data()[3 * n + f] - 0.8).abs() < 1e-12);
        assert!((grid.data()[4 * n + f] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn mask_matches_bruteforce_occupancy() {
        let spec = toy_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud: Vec<Point3> = (0..200)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-2.0..2.0),
                )
            })
            .collect();
        let (_, mask) = voxel_input_grid(&cloud, &spec);
        // Brute-force oracle over all voxels.
        let [nx, ny, nz] = spec.shape;
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let occupied = cloud
                        .iter()
                        .any(|p| voxel_index(p, &spec) == Some([ix, iy, iz]));
                    let got = mask.data()[spec.flat([ix, iy, iz])] > 0.0;
                    assert_eq!(got, occupied, "voxel {ix},{iy},{iz}");
                }
            }
        }
    }

    #[test]
    fn encoder_zeroes_empty_voxels_despite_biases() {
        let (det, mut store) = make_detector();
        // Nonzero biases would leak into empty voxels without the mask.
        store.set_value("enc.c1.b", Tensor::full(&[4], 0.5));
        store.set_value("enc.c2.b", Tensor::full(&[4], -0.3));
        let mut sess = Session::train(&mut store);
        let cloud = vec![Point3::new(0.1, 0.1, 0.0)];
        let vf = det.encode_voxels(&mut sess, &cloud).unwrap();
        let feats = sess.tape.value(vf.features).data();
        let mask = vf.mask.data();
        let spatial = det.voxel.num_voxels();
        for c in 0..4 {
            for i in 0..spatial {
                if mask[i] == 0.0 {
                    assert_eq!(feats[c * spatial + i], 0.0);
                }
            }
        }
        assert!(feats.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backbone_empty_input_all_zero() {
        let (det, mut store) = make_detector();
        let mut sess = Session::train(&mut store);
        let vf = det.encode_voxels(&mut sess, &[]).unwrap();
        let (f3d, mask) = det.backbone_forward(&mut sess, &vf).unwrap();
        assert!(sess.tape.value(f3d).data().iter().all(|v| *v == 0.0));
        assert!(mask.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backbone_support_confined_to_pooled_mask() {
        let (det, mut store) = make_detector();
        let mut sess = Session::train(&mut store);
        let cloud = vec![Point3::new(0.1, 0.1, 0.0)];
        let vf = det.encode_voxels(&mut sess, &cloud).unwrap();
        let (f3d, mask2) = det.backbone_forward(&mut sess, &vf).unwrap();
        // Oracle: pool the occupancy twice by hand.
        let m1 = maxpool_mask3d(&vf.mask, 3, 2, 1);
        let want = maxpool_mask3d(&m1, 3, 2, 1);
        assert_eq!(mask2.data(), want.data());
        let d = sess.tape.value(f3d).data();
        let spatial: usize = want.data().len();
        let ch = sess.tape.shape(f3d)[1];
        for c in 0..ch {
            for i in 0..spatial {
                if want.data()[i] == 0.0 {
                    assert_eq!(d[c * spatial + i], 0.0, "leak at channel {c} site {i}");
                }
            }
        }
        // And the mask has limited support (single occupied voxel spreads
        // to at most a 2x2x2 output block per pool stage).
        let support = want.data().iter().filter(|v| **v > 0.0).count();
        assert!(support > 0 && support <= 8, "support {support}");
    }

    #[test]
    fn fully_occupied_mask_equals_unmasked_stack() {
        let (det, mut store) = make_detector();
        // Occupy every voxel so the masks are all ones.
        let spec = det.voxel;
        let mut cloud = Vec::new();
        let [nx, ny, nz] = spec.shape;
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let c = spec.voxel_center([ix, iy, iz]);
                    cloud.push(Point3::new(c[0], c[1], c[2]));
                }
            }
        }
        let mut sess = Session::eval_recording(&store);
        let vf = det.encode_voxels(&mut sess, &cloud).unwrap();
        assert!(vf.mask.data().iter().all(|v| *v == 1.0));
        let (masked, _) = det.backbone_forward(&mut sess, &vf).unwrap();
        // Unmasked oracle: the same convs without the mask multiplies.
        let h = det.stage1.forward(&mut sess, vf.features).unwrap();
        let h = det.bn1.forward(&mut sess, h).unwrap();
        let h = sess.tape.gelu(h);
        let h = det.stage2.forward(&mut sess, h).unwrap();
        let h = det.bn2.forward(&mut sess, h).unwrap();
        let h = sess.tape.gelu(h);
        let a = sess.tape.value(masked).data();
        let b = sess.tape.value(h).data();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bev_projection_shape_and_round_trip() {
        let (_, mut store) = make_detector();
        let mut sess = Session::train(&mut store);
        let x = sess.tape.constant(Tensor::new(
            vec![1, 4, 2, 8, 8],
            (0..512).map(|i| i as f64).collect(),
        ));
        let bev = bev_project(&mut sess, x).unwrap();
        assert_eq!(sess.tape.shape(bev), &[1, 8, 8, 8]);
        let back = bev_unproject(&mut sess, bev, 2).unwrap();
        assert_eq!(sess.tape.value(back).data(), sess.tape.value(x).data());
    }

    #[test]
    fn zero_features_give_point_one_heatmap() {
        let (det, mut store) = make_detector();
        let mut sess = Session::eval_recording(&store);
        let f_a = sess.tape.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let out = det.forward_heads(&mut sess, f_a).unwrap();
        let hm = sess.tape.value(out.heatmap).data();
        let want = sigmoid_f(HEATMAP_BIAS_INIT);
        assert!((want - 0.1).abs() < 0.001);
        for v in hm {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_target_peak_is_one() {
        let spec = toy_spec();
        let b = OrientedBox::new([0.3, -0.5, 0.0], [2.0, 1.0, 1.0], 0.4, ClassId::Vehicle, 1);
        let t = make_heatmap_targets(&[b], &spec);
        let grid = BevGrid::of(&spec);
        let [iy, ix] = grid.cell_of(0.3, -0.5).unwrap();
        let [rows, cols] = grid.shape;
        assert_eq!(t.data()[(0 * rows + iy) * cols + ix], 1.0);
        // Empty scene -> all zero.
        let empty = make_heatmap_targets(&[], &spec);
        assert!(empty.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn overlapping_objects_take_elementwise_max() {
        let spec = toy_spec();
        let b1 = OrientedBox::new([0.2, 0.2, 0.0], [2.0, 1.0, 1.0], 0.0, ClassId::Vehicle, 1);
        let b2 = OrientedBox::new([2.2, 0.2, 0.0], [2.0, 1.0, 1.0], 0.0, ClassId::Vehicle, 2);
        let t = make_heatmap_targets(&[b1, b2], &spec);
        let grid = BevGrid::of(&spec);
        let [rows, cols] = grid.shape;
        // Evaluate both gaussians explicitly at every cell.
        let eval = |b: &OrientedBox, iy: usize, ix: usize| -> f64 {
            let [cy, cx] = grid.cell_of(b.center[0], b.center[1]).unwrap();
            let radius = gaussian_radius(b.dims[1] / grid.cell[1], b.dims[0] / grid.cell[0]);
            let r = radius.ceil() as i64;
            let (dy, dx) = (iy as i64 - cy as i64, ix as i64 - cx as i64);
            if dy.abs() > r || dx.abs() > r {
                return 0.0;
            }
            let sigma = (2.0 * radius + 1.0) / 6.0;
            (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()
        };
        for iy in 0..rows {
            for ix in 0..cols {
                let want = eval(&b1, iy, ix).max(eval(&b2, iy, ix));
                let got = t.data()[(0 * rows + iy) * cols + ix];
                assert!((got - want).abs() < 1e-12, "cell {iy},{ix}");
            }
        }
    }

    #[test]
    fn decode_inverts_target_construction() {
        let spec = toy_spec();
        let boxes = vec![
            OrientedBox::new([0.3, -0.5, 0.2], [2.0, 1.0, 1.2], 0.4, ClassId::Vehicle, 1),
            OrientedBox::new([-2.4, 2.2, -0.1], [0.8, 0.8, 1.7], -1.2, ClassId::Pedestrian, 2),
            OrientedBox::new([2.6, 2.6, 0.0], [1.7, 0.7, 1.6], 2.0, ClassId::Cyclist, 3),
        ];
        let hm = make_heatmap_targets(&boxes, &spec);
        let (reg, _) = make_regression_targets(&boxes, &spec);
        let dets = decode(&hm, &reg, &spec, 0.5, 10);
        assert_eq!(dets.len(), 3, "expected exactly 3 detections, got {dets:?}");
        for b in &boxes {
            let d = dets
                .iter()
                .find(|d| d.class_id == b.class_id)
                .expect("class missing");
            for a in 0..3 {
                assert!((d.center[a] - b.center[a]).abs() < 1e-6, "center axis {a}");
                assert!((d.dims[a] - b.dims[a]).abs() < 1e-6, "dims axis {a}");
            }
            assert!((wrap_angle(d.yaw - b.yaw)).abs() < 1e-6, "yaw");
            assert_eq!(d.score, 1.0);
        }
        // All below threshold -> empty.
        let none = decode(&hm, &reg, &spec, 1.1, 10);
        assert!(none.is_empty());
    }
}
