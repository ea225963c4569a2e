//! Voxel point-cloud reconstruction head: predicts a soft occupancy mask
//! and per-voxel mean-point offsets at 1/4 and 1/2 of the base voxel
//! resolution, plus the reconstructed points
//! `P_c = (P_offset + V_c) * V_mask`.
//!
//! Training-only: inference never runs this head.

use rand_chacha::ChaCha8Rng;

use crate::detector::{bev_unproject, BEV_FACTOR};
use crate::error::{CoreError, Result};
use crate::geom::VoxelSpec;
use crate::nn::{Conv3d, ConvTranspose3d, ParamStore, Session};
use crate::tensor::{Tensor, TensorId};

/// Outputs at one reconstruction scale.
pub struct PcrScaleOutput {
    /// Scale factor relative to the base grid (4 or 2).
    pub factor: usize,
    /// Soft occupancy in (0,1): `[1, 1, D, H, W]`.
    pub v_mask: TensorId,
    /// Offsets in meters: `[1, 3, D, H, W]`.
    pub p_offset: TensorId,
}

pub struct PcrOutputs {
    /// Coarse (1/4) first, then 1/2, matching `targets::TARGET_SCALES`.
    pub scales: Vec<PcrScaleOutput>,
}

pub struct PcrHead {
    pub voxel: VoxelSpec,
    pub channels: usize,
    /// Depth of the 3D grid the BEV feature reshapes into (= nz / 4).
    pub depth_plan: usize,
    proj: Conv3d,
    s1c1: Conv3d,
    s1c2: Conv3d,
    up1: ConvTranspose3d,
    mask1: Conv3d,
    off1: Conv3d,
    s2c1: Conv3d,
    s2c2: Conv3d,
    up2: ConvTranspose3d,
    mask2: Conv3d,
    off2: Conv3d,
}

impl PcrHead {
    /// `bev_channels` is the width of the incoming BEV feature; it must be
    /// divisible by the depth plan `nz / 4`. The base shape must divide by 8
    /// so the stage-1 bottleneck can halve the 1/4-scale grid.
    pub fn new(voxel: VoxelSpec, bev_channels: usize, channels: usize) -> Result<Self> {
        for a in 0..3 {
            if voxel.shape[a] % 8 != 0 {
                return Err(CoreError::shape(format!(
                    "reconstruction head needs voxel shape divisible by 8, got {:?}",
                    voxel.shape
                )));
            }
        }
        let depth_plan = voxel.shape[2] / BEV_FACTOR;
        if depth_plan == 0 || bev_channels % depth_plan != 0 {
            return Err(CoreError::shape(format!(
                "bev channels {bev_channels} not divisible by depth plan {depth_plan}"
            )));
        }
        let c_in = bev_channels / depth_plan;
        let c = channels;
        Ok(PcrHead {
            voxel,
            channels,
            depth_plan,
            proj: Conv3d::new("pcr.proj", c_in, c, 1, 1, 0),
            // Stage 1 dips to 1/8 scale and transposes back up so the first
            // prediction grid lands exactly on 1/4 of the base resolution.
            s1c1: Conv3d::new("pcr.s1.c1", c, c, 3, 2, 1),
            s1c2: Conv3d::new("pcr.s1.c2", c, c, 3, 1, 1),
            up1: ConvTranspose3d::new("pcr.s1.up", c, c, 2, 2),
            mask1: Conv3d::new("pcr.s1.mask", c, 1, 1, 1, 0),
            off1: Conv3d::new("pcr.s1.off", c, 3, 1, 1, 0),
            s2c1: Conv3d::new("pcr.s2.c1", c, c, 3, 1, 1),
            s2c2: Conv3d::new("pcr.s2.c2", c, c, 3, 1, 1),
            up2: ConvTranspose3d::new("pcr.s2.up", c, c, 2, 2),
            mask2: Conv3d::new("pcr.s2.mask", c, 1, 1, 1, 0),
            off2: Conv3d::new("pcr.s2.off", c, 3, 1, 1, 0),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.proj.init(store, rng);
        self.s1c1.init(store, rng);
        self.s1c2.init(store, rng);
        self.up1.init(store, rng);
        self.mask1.init(store, rng);
        self.off1.init(store, rng);
        self.s2c1.init(store, rng);
        self.s2c2.init(store, rng);
        self.up2.init(store, rng);
        self.mask2.init(store, rng);
        self.off2.init(store, rng);
    }

    /// `f_b: [1, W, H', W']` (the densified BEV feature).
    pub fn forward(&self, sess: &mut Session, f_b: TensorId) -> Result<PcrOutputs> {
        let x = bev_unproject(sess, f_b, self.depth_plan)?;
        let x = self.proj.forward(sess, x)?;
        let x = sess.tape.gelu(x);

        let h = self.s1c1.forward(sess, x)?;
        let h = sess.tape.gelu(h);
        let h = self.s1c2.forward(sess, h)?;
        let h = sess.tape.gelu(h);
        let q = self.up1.forward(sess, h)?;
        let quarter = sess.tape.gelu(q);
        let m1 = self.mask1.forward(sess, quarter)?;
        let m1 = sess.tape.sigmoid(m1);
        let o1 = self.off1.forward(sess, quarter)?;

        let h = self.s2c1.forward(sess, quarter)?;
        let h = sess.tape.gelu(h);
        let h = self.s2c2.forward(sess, h)?;
        let h = sess.tape.gelu(h);
        let hf = self.up2.forward(sess, h)?;
        let half = sess.tape.gelu(hf);
        let m2 = self.mask2.forward(sess, half)?;
        let m2 = sess.tape.sigmoid(m2);
        let o2 = self.off2.forward(sess, half)?;

        // Contract: grids at exactly 1/4 and 1/2 of the base resolution.
        let q_shape = sess.tape.shape(m1).to_vec();
        let want_q = self.voxel.coarser(4);
        if q_shape[2..] != [want_q.shape[2], want_q.shape[1], want_q.shape[0]] {
            return Err(CoreError::shape(format!(
                "pcr quarter grid {q_shape:?} vs spec {:?}",
                want_q.shape
            )));
        }
        let h_shape = sess.tape.shape(m2).to_vec();
        let want_h = self.voxel.coarser(2);
        if h_shape[2..] != [want_h.shape[2], want_h.shape[1], want_h.shape[0]] {
            return Err(CoreError::shape(format!(
                "pcr half grid {h_shape:?} vs spec {:?}",
                want_h.shape
            )));
        }

        Ok(PcrOutputs {
            scales: vec![
                PcrScaleOutput { factor: 4, v_mask: m1, p_offset: o1 },
                PcrScaleOutput { factor: 2, v_mask: m2, p_offset: o2 },
            ],
        })
    }
}

/// `P_c = (P_offset + V_c) * V_mask`, the soft mask broadcast over xyz.
/// `v_c` holds the voxel-center coordinates as a constant `[1,3,D,H,W]`.
pub fn reconstruct_points(
    sess: &mut Session,
    v_mask: TensorId,
    p_offset: TensorId,
    v_c: &Tensor,
) -> Result<TensorId> {
    let centers = sess.tape.constant(v_c.clone());
    let absolute = sess.tape.add(p_offset, centers)?;
    sess.tape.mul_bcast_c(absolute, v_mask)
}
