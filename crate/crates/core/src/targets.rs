//! Reconstruction supervision: multi-scale voxel occupancy masks and
//! mean-point offsets derived from the dense object cloud.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{voxel_index, Point3, VoxelSpec};

/// Grid-coarsening factors the reconstruction head predicts at, relative to
/// the base voxel grid: 1/4 resolution and 1/2 resolution per axis.
pub const TARGET_SCALES: [usize; 2] = [4, 2];

/// Occupancy supervision at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTarget {
    pub spec: VoxelSpec,
    /// 1 where the voxel contains at least one object point, flat layout
    /// `(iz * ny + iy) * nx + ix`.
    pub mask: Vec<u8>,
    /// Mean of contained points per voxel (zeros where mask = 0), xyz
    /// channel-major: `[3 * num_voxels]` with channel stride `num_voxels`.
    pub mean_points: Vec<f64>,
    pub n_foreground: usize,
    pub n_background: usize,
}

impl ScaleTarget {
    /// Voxel-center coordinates, same layout as `mean_points`.
    pub fn voxel_centers(&self) -> Vec<f64> {
        let n = self.spec.num_voxels();
        let [nx, ny, nz] = self.spec.shape;
        let mut out = vec![0.0; 3 * n];
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let f = self.spec.flat([ix, iy, iz]);
                    let c = self.spec.voxel_center([ix, iy, iz]);
                    out[f] = c[0];
                    out[n + f] = c[1];
                    out[2 * n + f] = c[2];
                }
            }
        }
        out
    }

    /// Regression targets `mean - center` (zeros on background).
    pub fn offsets(&self) -> Vec<f64> {
        let n = self.spec.num_voxels();
        let centers = self.voxel_centers();
        let mut out = vec![0.0; 3 * n];
        for f in 0..n {
            if self.mask[f] == 1 {
                for c in 0..3 {
                    out[c * n + f] = self.mean_points[c * n + f] - centers[c * n + f];
                }
            }
        }
        out
    }
}

/// Occupancy supervision at every scale in [`TARGET_SCALES`].
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTarget {
    /// Ordered as `TARGET_SCALES` (coarse 1/4 first, then 1/2).
    pub scales: Vec<ScaleTarget>,
}

/// Accumulate the object cloud into per-scale occupancy masks and means.
///
/// Points outside the grid are ignored. An empty cloud yields an all-zero
/// mask with `n_foreground = 0`.
pub fn build_targets(object_cloud: &[Point3], base_spec: &VoxelSpec) -> OccupancyTarget {
    let scales = TARGET_SCALES
        .iter()
        .map(|&factor| {
            let spec = base_spec.coarser(factor);
            let n = spec.num_voxels();
            let mut sum = vec![0.0f64; 3 * n];
            let mut count = vec![0u32; n];
            for p in object_cloud {
                if let Some(idx) = voxel_index(p, &spec) {
                    let f = spec.flat(idx);
                    sum[f] += p.x;
                    sum[n + f] += p.y;
                    sum[2 * n + f] += p.z;
                    count[f] += 1;
                }
            }
            let mut mask = vec![0u8; n];
            let mut mean_points = vec![0.0f64; 3 * n];
            let mut n_foreground = 0usize;
            for f in 0..n {
                if count[f] > 0 {
                    mask[f] = 1;
                    n_foreground += 1;
                    for c in 0..3 {
                        mean_points[c * n + f] = sum[c * n + f] / count[f] as f64;
                    }
                }
            }
            ScaleTarget {
                spec,
                mask,
                mean_points,
                n_foreground,
                n_background: n - n_foreground,
            }
        })
        .collect();
    OccupancyTarget { scales }
}

/// JSON header written next to the binary grid payload.
#[derive(Debug, Serialize, Deserialize)]
struct TargetHeader {
    scales: Vec<ScaleHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScaleHeader {
    spec: VoxelSpec,
    n_foreground: usize,
    n_background: usize,
}

/// Serialize as `<stem>.json` (shape header) plus `<stem>.bin`: per scale,
/// `num_voxels` u8 mask bytes then `3 * num_voxels` f32 offsets.
pub fn save_targets(path_stem: &Path, t: &OccupancyTarget) -> Result<()> {
    let header = TargetHeader {
        scales: t
            .scales
            .iter()
            .map(|s| ScaleHeader {
                spec: s.spec,
                n_foreground: s.n_foreground,
                n_background: s.n_background,
            })
            .collect(),
    };
    crate::io::write_json_pretty(&path_stem.with_extension("json"), &header)?;
    let mut buf = Vec::new();
    for s in &t.scales {
        buf.extend_from_slice(&s.mask);
        for v in s.offsets() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path_stem.with_extension("bin"))?;
    f.write_all(&buf)?;
    Ok(())
}

/// Load masks and offset grids. Mean points are reconstructed from the
/// offsets, so `load(save(t))` matches `t` up to f32 rounding of offsets.
pub fn load_targets(path_stem: &Path) -> Result<OccupancyTarget> {
    let header: TargetHeader = crate::io::read_json(&path_stem.with_extension("json"))?;
    let mut bytes = Vec::new();
    fs::File::open(path_stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let mut scales = Vec::new();
    for h in header.scales {
        let n = h.spec.num_voxels();
        if bytes.len() < off + n + 12 * n {
            return Err(CoreError::Format("targets payload truncated".into()));
        }
        let mask = bytes[off..off + n].to_vec();
        off += n;
        let mut offsets = vec![0.0f64; 3 * n];
        for v in offsets.iter_mut() {
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
        let mut scale = ScaleTarget {
            spec: h.spec,
            mask,
            mean_points: vec![0.0; 3 * n],
            n_foreground: h.n_foreground,
            n_background: h.n_background,
        };
        let centers = scale.voxel_centers();
        for f in 0..n {
            if scale.mask[f] == 1 {
                for c in 0..3 {
                    scale.mean_points[c * n + f] = centers[c * n + f] + offsets[c * n + f];
                }
            }
        }
        scales.push(scale);
    }
    if off != bytes.len() {
        return Err(CoreError::Format("targets payload has trailing bytes".into()));
    }
    Ok(OccupancyTarget { scales })
}
