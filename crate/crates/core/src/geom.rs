//! Core point/box/voxel geometry: canonical transforms, in-box tests,
//! radius outlier removal, voxel indexing, and axial flips.
//!
//! Everything here is a pure function over immutable inputs.

use serde::{Deserialize, Serialize};

/// A single LiDAR return. `feat` is an optional reflectance-like scalar in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    #[serde(default)]
    pub feat: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z, feat: 0.0 }
    }

    pub fn with_feat(x: f64, y: f64, z: f64, feat: f64) -> Self {
        Point3 { x, y, z, feat }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.feat.is_finite()
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Object category. The index doubles as the heatmap channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassId {
    Vehicle,
    Pedestrian,
    Cyclist,
}

pub const NUM_CLASSES: usize = 3;

impl ClassId {
    pub fn index(self) -> usize {
        match self {
            ClassId::Vehicle => 0,
            ClassId::Pedestrian => 1,
            ClassId::Cyclist => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ClassId> {
        match i {
            0 => Some(ClassId::Vehicle),
            1 => Some(ClassId::Pedestrian),
            2 => Some(ClassId::Cyclist),
            _ => None,
        }
    }

    pub fn all() -> [ClassId; NUM_CLASSES] {
        [ClassId::Vehicle, ClassId::Pedestrian, ClassId::Cyclist]
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Vehicle => "vehicle",
            ClassId::Pedestrian => "pedestrian",
            ClassId::Cyclist => "cyclist",
        }
    }
}

/// Normalize an angle to [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    // rem_euclid can land exactly on +pi for inputs like -pi - 2^-52.
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// A 7-DoF oriented box: center, length/width/height, yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 3],
    /// (l, w, h), strictly positive. `l` extends along the box x axis at yaw 0.
    pub dims: [f64; 3],
    /// Radians in [-pi, pi).
    pub yaw: f64,
    pub class_id: ClassId,
    /// Persistent identifier across frames of a sequence.
    pub track_id: u64,
}

impl OrientedBox {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64, class_id: ClassId, track_id: u64) -> Self {
        OrientedBox { center, dims, yaw: wrap_angle(yaw), class_id, track_id }
    }

    pub fn is_valid(&self) -> bool {
        self.dims.iter().all(|d| *d > 0.0 && d.is_finite())
            && self.center.iter().all(|c| c.is_finite())
            && self.yaw.is_finite()
            && (-std::f64::consts::PI..std::f64::consts::PI).contains(&self.yaw)
    }

    /// BEV footprint corners, counter-clockwise, world frame.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.dims[0] / 2.0;
        let hw = self.dims[1] / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        let mut out = [[0.0; 2]; 4];
        for (o, p) in out.iter_mut().zip(local.iter()) {
            o[0] = self.center[0] + c * p[0] - s * p[1];
            o[1] = self.center[1] + s * p[0] + c * p[1];
        }
        out
    }
}

/// Express `point` in the box frame: translate by -center, rotate by -yaw about z.
pub fn to_canonical(point: &Point3, b: &OrientedBox) -> Point3 {
    let dx = point.x - b.center[0];
    let dy = point.y - b.center[1];
    let dz = point.z - b.center[2];
    let (s, c) = b.yaw.sin_cos();
    Point3 {
        x: c * dx + s * dy,
        y: -s * dx + c * dy,
        z: dz,
        feat: point.feat,
    }
}

/// Inverse of [`to_canonical`]: box frame back to world frame.
pub fn from_canonical(point: &Point3, b: &OrientedBox) -> Point3 {
    let (s, c) = b.yaw.sin_cos();
    Point3 {
        x: b.center[0] + c * point.x - s * point.y,
        y: b.center[1] + s * point.x + c * point.y,
        z: b.center[2] + point.z,
        feat: point.feat,
    }
}

/// True if the point's canonical coordinates are within the half-extents
/// (boundary inclusive).
pub fn point_in_box(point: &Point3, b: &OrientedBox) -> bool {
    let p = to_canonical(point, b);
    p.x.abs() <= b.dims[0] / 2.0 && p.y.abs() <= b.dims[1] / 2.0 && p.z.abs() <= b.dims[2] / 2.0
}

/// Filter to exactly the points inside the box; order preserved.
pub fn points_in_box(points: &[Point3], b: &OrientedBox) -> Vec<Point3> {
    points.iter().filter(|p| point_in_box(p, b)).copied().collect()
}

/// Keep the maximal subset in which every point has at least
/// `min_neighbors` *other* surviving points within Euclidean distance
/// `radius`. Deterministic and order-preserving.
///
/// Counting neighbors among survivors (rather than among the raw input)
/// makes the filter a fixpoint: applying it twice equals applying it once.
/// Desk scale keeps each pass O(n^2) with an axis presort to prune pairs.
pub fn radius_outlier_removal(points: &[Point3], radius: f64, min_neighbors: usize) -> Vec<Point3> {
    assert!(radius > 0.0, "radius must be positive");
    assert!(min_neighbors >= 1, "min_neighbors must be >= 1");
    let mut current: Vec<Point3> = points.to_vec();
    loop {
        let kept = single_pass_filter(&current, radius, min_neighbors);
        let stable = kept.len() == current.len();
        current = kept;
        if stable {
            return current;
        }
    }
}

fn single_pass_filter(points: &[Point3], radius: f64, min_neighbors: usize) -> Vec<Point3> {
    let n = points.len();
    let mut counts = vec![0usize; n];
    // Sort indices by x so the inner scan can stop once |dx| > radius.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].x.total_cmp(&points[b].x));
    for (rank, &i) in order.iter().enumerate() {
        for &j in &order[rank + 1..] {
            if points[j].x - points[i].x > radius {
                break;
            }
            if points[i].dist(&points[j]) <= radius {
                counts[i] += 1;
                counts[j] += 1;
            }
        }
    }
    points
        .iter()
        .zip(counts.iter())
        .filter(|(_, &c)| c >= min_neighbors)
        .map(|(p, _)| *p)
        .collect()
}

/// A regular voxel grid: origin corner, per-axis cell size, per-axis cell count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub origin: [f64; 3],
    pub cell: [f64; 3],
    pub shape: [usize; 3],
}

impl VoxelSpec {
    pub fn new(origin: [f64; 3], cell: [f64; 3], shape: [usize; 3]) -> Self {
        let s = VoxelSpec { origin, cell, shape };
        assert!(s.is_valid(), "invalid voxel spec: {s:?}");
        s
    }

    pub fn is_valid(&self) -> bool {
        self.cell.iter().all(|c| *c > 0.0 && c.is_finite())
            && self.shape.iter().all(|s| *s > 0)
            && self.origin.iter().all(|o| o.is_finite())
    }

    /// Full-scale grid matching the production detect range:
    /// x,y in [-75.2, 75.2], z in [-2, 4], cells (0.1, 0.1, 0.15).
    pub fn full_scale() -> Self {
        VoxelSpec::new([-75.2, -75.2, -2.0], [0.1, 0.1, 0.15], [1504, 1504, 40])
    }

    /// Canonical-frame grid covering a box of `dims` with one cell of margin
    /// on each side, at the given cell size.
    pub fn covering_box(dims: [f64; 3], cell: [f64; 3]) -> Self {
        let mut origin = [0.0; 3];
        let mut shape = [0usize; 3];
        for a in 0..3 {
            let half = dims[a] / 2.0;
            let cells = ((half + cell[a]) / cell[a]).ceil() as usize;
            origin[a] = -(cells as f64) * cell[a];
            shape[a] = cells * 2;
        }
        VoxelSpec::new(origin, cell, shape)
    }

    pub fn num_voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    /// Scale cells up by `factor` per axis (shape shrinks by the same factor;
    /// shape must be divisible).
    pub fn coarser(&self, factor: usize) -> Self {
        assert!(factor >= 1);
        for a in 0..3 {
            assert!(
                self.shape[a] % factor == 0,
                "shape {:?} not divisible by {factor}",
                self.shape
            );
        }
        VoxelSpec::new(
            self.origin,
            [
                self.cell[0] * factor as f64,
                self.cell[1] * factor as f64,
                self.cell[2] * factor as f64,
            ],
            [
                self.shape[0] / factor,
                self.shape[1] / factor,
                self.shape[2] / factor,
            ],
        )
    }

    /// Center of voxel (ix, iy, iz) in meters.
    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + (idx[0] as f64 + 0.5) * self.cell[0],
            self.origin[1] + (idx[1] as f64 + 0.5) * self.cell[1],
            self.origin[2] + (idx[2] as f64 + 0.5) * self.cell[2],
        ]
    }

    /// Flat index with x fastest, then y, then z: `(iz * ny + iy) * nx + ix`.
    pub fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[2] * self.shape[1] + idx[1]) * self.shape[0] + idx[0]
    }
}

/// Voxel coordinates of a point, or `None` when outside the grid.
///
/// Cells are half-open `[lower, upper)`: a coordinate exactly on an upper
/// cell edge belongs to the higher cell (plain floor semantics).
pub fn voxel_index(point: &Point3, spec: &VoxelSpec) -> Option<[usize; 3]> {
    let coords = [point.x, point.y, point.z];
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let i = ((coords[a] - spec.origin[a]) / spec.cell[a]).floor();
        if i < 0.0 || i >= spec.shape[a] as f64 {
            return None;
        }
        idx[a] = i as usize;
    }
    Some(idx)
}

/// Axis selecting which coordinate an axial flip negates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror across the x-z plane (negate y).
    X,
    /// Mirror across the y-z plane (negate x).
    Y,
}

/// Mirror a canonical-frame cloud across an axial plane.
pub fn flip_about_axial_plane(points: &[Point3], axis: FlipAxis) -> Vec<Point3> {
    points
        .iter()
        .map(|p| match axis {
            FlipAxis::X => Point3 { x: p.x, y: -p.y, z: p.z, feat: p.feat },
            FlipAxis::Y => Point3 { x: -p.x, y: p.y, z: p.z, feat: p.feat },
        })
        .collect()
}
