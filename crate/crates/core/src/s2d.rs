//! The BEV densification block: a stride-2/stride-2 encoder, three
//! ConvNeXt residual blocks at 1/4 resolution, a skip-concat decoder back
//! to full resolution, and a two-branch 1x1 fusion.
//!
//! Unlike the masked backbone, nothing here is occupancy-masked, so the
//! block can spread features into BEV cells the raw input left empty.

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::{
    BatchNorm, Conv2d, ConvTranspose2d, DepthwiseConv2d, LayerNorm, ParamStore, Session,
};
use crate::tensor::TensorId;

/// ConvNeXt channel expansion ratio (width -> 4*width -> width).
pub const EXPAND_RATIO: usize = 4;

struct ConvNextBlock {
    dw: DepthwiseConv2d,
    ln: LayerNorm,
    expand: Conv2d,
    contract: Conv2d,
}

impl ConvNextBlock {
    fn new(name: &str, channels: usize) -> Self {
        ConvNextBlock {
            dw: DepthwiseConv2d::new(&format!("{name}.dw"), channels, 7, 3),
            ln: LayerNorm::new(&format!("{name}.ln"), channels),
            expand: Conv2d::new(&format!("{name}.pw1"), channels, channels * EXPAND_RATIO, 1, 1, 0),
            contract: Conv2d::new(&format!("{name}.pw2"), channels * EXPAND_RATIO, channels, 1, 1, 0),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.dw.init(store, rng);
        self.ln.init(store);
        self.expand.init(store, rng);
        self.contract.init(store, rng);
    }

    /// The pre-residual inner path: dw7x7 -> LN -> 1x1 expand -> GELU ->
    /// 1x1 contract.
    fn inner(&self, sess: &mut Session, x: TensorId) -> Result<TensorId> {
        let h = self.dw.forward(sess, x)?;
        let h = self.ln.forward(sess, h)?;
        let h = self.expand.forward(sess, h)?;
        let h = sess.tape.gelu(h);
        self.contract.forward(sess, h)
    }

    fn forward(&self, sess: &mut Session, x: TensorId) -> Result<TensorId> {
        let inner = self.inner(sess, x)?;
        sess.tape.add(x, inner)
    }
}

pub struct S2dBlock {
    pub channels: usize,
    down1: Conv2d,
    bn_d1: BatchNorm,
    down2: Conv2d,
    bn_d2: BatchNorm,
    blocks: Vec<ConvNextBlock>,
    up1: ConvTranspose2d,
    bn_u1: BatchNorm,
    mid: Conv2d,
    bn_mid: BatchNorm,
    up2: ConvTranspose2d,
    bn_u2: BatchNorm,
    fuse_dense: Conv2d,
    fuse_skip: Conv2d,
}

impl S2dBlock {
    pub fn new(channels: usize) -> Self {
        S2dBlock {
            channels,
            down1: Conv2d::new("s2d.down1.conv", channels, channels, 3, 2, 1),
            bn_d1: BatchNorm::new("s2d.down1.bn", channels),
            down2: Conv2d::new("s2d.down2.conv", channels, channels, 3, 2, 1),
            bn_d2: BatchNorm::new("s2d.down2.bn", channels),
            blocks: (0..3).map(|i| ConvNextBlock::new(&format!("s2d.block{i}"), channels)).collect(),
            up1: ConvTranspose2d::new("s2d.up1.conv", channels, channels, 2, 2),
            bn_u1: BatchNorm::new("s2d.up1.bn", channels),
            mid: Conv2d::new("s2d.mid.conv", channels * 2, channels, 3, 1, 1),
            bn_mid: BatchNorm::new("s2d.mid.bn", channels),
            up2: ConvTranspose2d::new("s2d.up2.conv", channels, channels, 2, 2),
            bn_u2: BatchNorm::new("s2d.up2.bn", channels),
            fuse_dense: Conv2d::new("s2d.fuse_b", channels, channels, 1, 1, 0),
            fuse_skip: Conv2d::new("s2d.fuse_c", channels, channels, 1, 1, 0),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.down1.init(store, rng);
        self.bn_d1.init(store);
        self.down2.init(store, rng);
        self.bn_d2.init(store);
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.up1.init(store, rng);
        self.bn_u1.init(store);
        self.mid.init(store, rng);
        self.bn_mid.init(store);
        self.up2.init(store, rng);
        self.bn_u2.init(store);
        self.fuse_dense.init(store, rng);
        self.fuse_skip.init(store, rng);
    }

    fn conv_bn_gelu(
        sess: &mut Session,
        conv_out: TensorId,
        bn: &BatchNorm,
    ) -> Result<TensorId> {
        let h = bn.forward(sess, conv_out)?;
        Ok(sess.tape.gelu(h))
    }

    /// Densify `f_c` (`[1,C,H,W]`, H and W divisible by 4). Returns
    /// `(f_b, f_a)`: the densified feature and the fused head input.
    pub fn forward(&self, sess: &mut Session, f_c: TensorId) -> Result<(TensorId, TensorId)> {
        let s = sess.tape.shape(f_c).to_vec();
        if s.len() != 4 || s[1] != self.channels || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(CoreError::shape(format!(
                "s2d input must be [1,{},4k,4k], got {s:?}",
                self.channels
            )));
        }
        let d1 = self.down1.forward(sess, f_c)?;
        let d1 = Self::conv_bn_gelu(sess, d1, &self.bn_d1)?;
        let d2 = self.down2.forward(sess, d1)?;
        let d2 = Self::conv_bn_gelu(sess, d2, &self.bn_d2)?;

        let mut h = d2;
        for b in &self.blocks {
            h = b.forward(sess, h)?;
        }

        let u1 = self.up1.forward(sess, h)?;
        let u1 = Self::conv_bn_gelu(sess, u1, &self.bn_u1)?;
        let cat = sess.tape.concat(1, &[u1, d1])?;
        let m = self.mid.forward(sess, cat)?;
        let m = Self::conv_bn_gelu(sess, m, &self.bn_mid)?;
        let u2 = self.up2.forward(sess, m)?;
        let f_b = Self::conv_bn_gelu(sess, u2, &self.bn_u2)?;

        let fb_path = self.fuse_dense.forward(sess, f_b)?;
        let fc_path = self.fuse_skip.forward(sess, f_c)?;
        let f_a = sess.tape.add(fb_path, fc_path)?;
        Ok((f_b, f_a))
    }
}
