//! Offline dense object generation: fuse one object's points across a
//! tracked multi-frame sequence, fill a capacity-capped voxel grid frame by
//! frame, mirror vehicles about their long axis, and compose dense scenes.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{
    flip_about_axial_plane, from_canonical, point_in_box, points_in_box, radius_outlier_removal,
    to_canonical, ClassId, FlipAxis, OrientedBox, Point3, VoxelSpec,
};

/// One LiDAR frame: raw points plus annotated boxes.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    pub points: Vec<Point3>,
    pub boxes: Vec<OrientedBox>,
}

/// An ordered multi-frame sequence with persistent track ids.
#[derive(Debug, Clone, Default)]
pub struct TrackedSequence {
    pub frames: Vec<Frame>,
}

impl TrackedSequence {
    /// Validates that no frame carries the same track id twice.
    pub fn validate(&self) -> Result<()> {
        for (fi, f) in self.frames.iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            for b in &f.boxes {
                if !seen.insert(b.track_id) {
                    return Err(CoreError::Format(format!(
                        "frame {fi} has duplicate track id {}",
                        b.track_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn track_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self
            .frames
            .iter()
            .flat_map(|f| f.boxes.iter().map(|b| b.track_id))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// The box for `track_id` in each frame that contains it, with frame index.
    pub fn track_boxes(&self, track_id: u64) -> Vec<(usize, OrientedBox)> {
        self.frames
            .iter()
            .enumerate()
            .filter_map(|(i, f)| {
                f.boxes.iter().find(|b| b.track_id == track_id).map(|b| (i, *b))
            })
            .collect()
    }
}

/// Filling statistics for one generated dense object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillStats {
    pub voxels_filled: usize,
    pub voxels_union: usize,
    pub frames_used: usize,
}

/// A fused, voxel-filled (and possibly mirrored) object cloud in box frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseObject {
    pub track_id: u64,
    pub class_id: ClassId,
    /// Box dims the canonical points were fused under.
    pub dims: [f64; 3],
    pub canonical_points: Vec<Point3>,
    pub fill_stats: FillStats,
}

/// A bank of dense objects keyed by track id.
#[derive(Debug, Clone, Default)]
pub struct DenseBank {
    pub objects: BTreeMap<u64, DenseObject>,
}

impl DenseBank {
    pub fn get(&self, track_id: u64) -> Option<&DenseObject> {
        self.objects.get(&track_id)
    }

    pub fn insert(&mut self, obj: DenseObject) {
        self.objects.insert(obj.track_id, obj);
    }
}

/// One composed dense scene: the source frame with object regions replaced
/// by their dense clouds.
#[derive(Debug, Clone)]
pub struct DenseScene {
    /// Background points plus dense object points (the dense scene cloud).
    pub dense_cloud: Vec<Point3>,
    /// Only the dense object points, in world frame.
    pub object_only_cloud: Vec<Point3>,
    pub source_frame_index: usize,
}

/// Defaults for the generation pipeline ("densify" stage).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyParams {
    /// Radius outlier removal ball radius, meters.
    pub outlier_radius: f64,
    /// Minimum neighbor count inside the ball.
    pub outlier_min_neighbors: usize,
    /// Canonical fill-grid cell size, meters.
    pub fill_cell: [f64; 3],
    /// Per-voxel point capacity during filling.
    pub voxel_capacity: usize,
    /// Stop consuming frames once filled/union exceeds this.
    pub fill_ratio_target: f64,
    /// Vehicles with fewer fused points than this skip mirroring.
    pub symmetrize_min_points: usize,
}

impl Default for DensifyParams {
    fn default() -> Self {
        DensifyParams {
            outlier_radius: 0.5,
            outlier_min_neighbors: 2,
            fill_cell: [0.1, 0.1, 0.15],
            voxel_capacity: 5,
            fill_ratio_target: 0.95,
            symmetrize_min_points: 10,
        }
    }
}

/// Per-frame canonical point lists for one track, after outlier removal on
/// the fused (concatenated) cloud. The per-frame split is preserved so the
/// fill stage can consume frames in order.
#[derive(Debug, Clone)]
pub struct FusedTrack {
    pub track_id: u64,
    pub class_id: ClassId,
    pub dims: [f64; 3],
    pub per_frame: Vec<Vec<Point3>>,
    /// Source frame index for each entry of `per_frame`.
    pub frame_indices: Vec<usize>,
}

/// Gather the track's in-box points per frame, express them in the box
/// frame, and drop fused-cloud outliers.
///
/// Outlier removal runs on the concatenation of all frames (neighbors count
/// across frames) and the survivors are split back into their frames.
pub fn fuse_object(
    seq: &TrackedSequence,
    track_id: u64,
    params: &DensifyParams,
) -> Result<FusedTrack> {
    let boxes = seq.track_boxes(track_id);
    if boxes.is_empty() {
        return Err(CoreError::UnknownTrack(track_id));
    }
    let class_id = boxes[0].1.class_id;
    // Dims can drift slightly between frames in real data; use the maximum
    // per axis so every frame's points stay within the canonical extents.
    let mut dims = [0.0f64; 3];
    for (_, b) in &boxes {
        for a in 0..3 {
            dims[a] = dims[a].max(b.dims[a]);
        }
    }

    let mut fused: Vec<Point3> = Vec::new();
    let mut frame_of: Vec<usize> = Vec::new(); // index into `boxes`
    for (bi, (fi, b)) in boxes.iter().enumerate() {
        for p in points_in_box(&seq.frames[*fi].points, b) {
            fused.push(to_canonical(&p, b));
            frame_of.push(bi);
        }
    }

    let kept = radius_outlier_removal(&fused, params.outlier_radius, params.outlier_min_neighbors);
    // radius_outlier_removal preserves order, so walk both lists in lockstep
    // to recover each survivor's frame.
    let mut per_frame: Vec<Vec<Point3>> = vec![Vec::new(); boxes.len()];
    let mut cursor = 0usize;
    for (p, &bi) in fused.iter().zip(frame_of.iter()) {
        if cursor < kept.len() && kept[cursor] == *p {
            per_frame[bi].push(*p);
            cursor += 1;
        }
    }

    Ok(FusedTrack {
        track_id,
        class_id,
        dims,
        per_frame,
        frame_indices: boxes.iter().map(|(fi, _)| *fi).collect(),
    })
}

/// Stable sort permutation: descending point count, ties by ascending
/// original index.
pub fn sort_frames_by_count(per_frame: &[Vec<Point3>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..per_frame.len()).collect();
    order.sort_by(|&a, &b| {
        per_frame[b]
            .len()
            .cmp(&per_frame[a].len())
            .then(a.cmp(&b))
    });
    order
}

/// Fill a canonical voxel grid from frames in the given order.
///
/// Per voxel, at most `voxel_capacity` points are accepted, and only from
/// the first frame that touches the voxel: once a later frame starts, voxels
/// touched by earlier frames are closed. Filling stops consuming new frames
/// once filled/union exceeds `fill_ratio_target`, where the union counts
/// voxels occupied by the track in any frame.
pub fn fill_voxel_grid(
    per_frame: &[Vec<Point3>],
    order: &[usize],
    object_spec: &VoxelSpec,
    params: &DensifyParams,
) -> Result<(Vec<Point3>, FillStats)> {
    if per_frame.iter().all(|f| f.is_empty()) {
        return Err(CoreError::EmptyInput("fill_voxel_grid: no points in any frame"));
    }

    let mut union = std::collections::HashSet::new();
    for frame in per_frame {
        for p in frame {
            if let Some(idx) = voxel_or_none(p, object_spec) {
                union.insert(idx);
            }
        }
    }
    let union_voxels = union.len();

    // voxel -> (frame rank that opened it, accepted count)
    let mut filled: HashMap<usize, (usize, usize)> = HashMap::new();
    let mut accepted: Vec<Point3> = Vec::new();
    let mut frames_used = 0usize;

    for (rank, &fi) in order.iter().enumerate() {
        if frames_used > 0 {
            let ratio = filled.len() as f64 / union_voxels as f64;
            if ratio > params.fill_ratio_target {
                break;
            }
        }
        for p in &per_frame[fi] {
            let Some(idx) = voxel_or_none(p, object_spec) else { continue };
            match filled.get_mut(&idx) {
                None => {
                    filled.insert(idx, (rank, 1));
                    accepted.push(*p);
                }
                Some((opened_by, count)) => {
                    if *opened_by == rank && *count < params.voxel_capacity {
                        *count += 1;
                        accepted.push(*p);
                    }
                }
            }
        }
        frames_used += 1;
    }

    Ok((
        accepted,
        FillStats {
            voxels_filled: filled.len(),
            voxels_union: union_voxels,
            frames_used,
        },
    ))
}

fn voxel_or_none(p: &Point3, spec: &VoxelSpec) -> Option<usize> {
    crate::geom::voxel_index(p, spec).map(|idx| spec.flat(idx))
}

/// Mirror the denser lateral side of a vehicle cloud about y'=0.
///
/// Non-vehicle classes and clouds below `min_points` pass through unchanged.
pub fn symmetrize_vehicle(
    points: &[Point3],
    class_id: ClassId,
    min_points: usize,
) -> Vec<Point3> {
    if class_id != ClassId::Vehicle || points.len() < min_points {
        return points.to_vec();
    }
    let pos = points.iter().filter(|p| p.y > 0.0).count();
    let neg = points.iter().filter(|p| p.y < 0.0).count();
    let side: Vec<Point3> = if pos >= neg {
        points.iter().filter(|p| p.y >= 0.0).copied().collect()
    } else {
        points.iter().filter(|p| p.y <= 0.0).copied().collect()
    };
    let mut out = side.clone();
    out.extend(flip_about_axial_plane(&side, FlipAxis::X));
    out
}

/// Run the full per-track pipeline: fuse, sort, fill, symmetrize.
pub fn generate_dense_object(
    seq: &TrackedSequence,
    track_id: u64,
    params: &DensifyParams,
) -> Result<DenseObject> {
    let fused = fuse_object(seq, track_id, params)?;
    let order = sort_frames_by_count(&fused.per_frame);
    let spec = VoxelSpec::covering_box(fused.dims, params.fill_cell);
    let (filled, fill_stats) = fill_voxel_grid(&fused.per_frame, &order, &spec, params)?;
    let canonical_points = symmetrize_vehicle(&filled, fused.class_id, params.symmetrize_min_points);
    Ok(DenseObject {
        track_id,
        class_id: fused.class_id,
        dims: fused.dims,
        canonical_points,
        fill_stats,
    })
}

/// Build the dense bank for every track in the sequence. Tracks with no
/// points in any frame are skipped (nothing to densify).
pub fn build_dense_bank(seq: &TrackedSequence, params: &DensifyParams) -> Result<DenseBank> {
    let mut bank = DenseBank::default();
    for track_id in seq.track_ids() {
        match generate_dense_object(seq, track_id, params) {
            Ok(obj) => bank.insert(obj),
            Err(CoreError::EmptyInput(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(bank)
}

/// Replace each object region of `frame` with its dense bank cloud.
///
/// Background points (outside every box) are carried over exactly. Boxes
/// without a bank entry fall back to their raw in-box points.
pub fn compose_dense_scene(
    frame: &Frame,
    source_frame_index: usize,
    bank: &DenseBank,
) -> DenseScene {
    let background: Vec<Point3> = frame
        .points
        .iter()
        .filter(|p| !frame.boxes.iter().any(|b| point_in_box(p, b)))
        .copied()
        .collect();

    let mut object_only: Vec<Point3> = Vec::new();
    for b in &frame.boxes {
        match bank.get(b.track_id) {
            Some(obj) => {
                object_only.extend(obj.canonical_points.iter().map(|p| from_canonical(p, b)));
            }
            None => {
                object_only.extend(points_in_box(&frame.points, b));
            }
        }
    }

    let mut dense_cloud = background;
    dense_cloud.extend(object_only.iter().copied());
    DenseScene {
        dense_cloud,
        object_only_cloud: object_only,
        source_frame_index,
    }
}
