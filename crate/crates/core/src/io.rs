//! On-disk formats: little-endian binary point clouds (`S2DC`), JSON box
//! sidecars, sequence directories, dense-bank layout, and PLY export.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dense::{DenseBank, DenseObject, DenseScene, FillStats, Frame, TrackedSequence};
use crate::error::{CoreError, Result};
use crate::geom::{ClassId, OrientedBox, Point3};

pub const CLOUD_MAGIC: &[u8; 4] = b"S2DC";
pub const CLOUD_VERSION: u32 = 1;

/// Write a cloud: magic, u32 version, u64 count, then 4 x f32 per point.
pub fn write_cloud(path: &Path, points: &[Point3]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + points.len() * 16);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        buf.extend_from_slice(&(p.x as f32).to_le_bytes());
        buf.extend_from_slice(&(p.y as f32).to_le_bytes());
        buf.extend_from_slice(&(p.z as f32).to_le_bytes());
        buf.extend_from_slice(&(p.feat as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<Vec<Point3>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_cloud(&bytes).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
}

fn parse_cloud(bytes: &[u8]) -> std::result::Result<Vec<Point3>, String> {
    if bytes.len() < 16 {
        return Err("truncated header".into());
    }
    if &bytes[0..4] != CLOUD_MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CLOUD_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let want = 16 + count * 16;
    if bytes.len() != want {
        return Err(format!("expected {want} bytes, found {}", bytes.len()));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let o = 16 + i * 16;
        let f = |k: usize| f32::from_le_bytes(bytes[o + 4 * k..o + 4 * k + 4].try_into().unwrap());
        points.push(Point3::with_feat(f(0) as f64, f(1) as f64, f(2) as f64, f(3) as f64));
    }
    Ok(points)
}

/// JSON sidecar carried next to each frame's cloud.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_index: usize,
    pub boxes: Vec<BoxMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxMeta {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub class_id: ClassId,
    pub track_id: u64,
}

impl From<&OrientedBox> for BoxMeta {
    fn from(b: &OrientedBox) -> Self {
        BoxMeta {
            center: b.center,
            dims: b.dims,
            yaw: b.yaw,
            class_id: b.class_id,
            track_id: b.track_id,
        }
    }
}

impl BoxMeta {
    pub fn to_box(&self) -> OrientedBox {
        OrientedBox::new(self.center, self.dims, self.yaw, self.class_id, self.track_id)
    }
}

fn frame_cloud_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:06}.s2dc"))
}

fn frame_meta_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:06}.json"))
}

/// Write every frame of a sequence into `dir` (created if missing).
pub fn save_sequence(dir: &Path, seq: &TrackedSequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        write_cloud(&frame_cloud_path(dir, i), &frame.points)?;
        let meta = FrameMeta {
            frame_index: i,
            boxes: frame.boxes.iter().map(BoxMeta::from).collect(),
        };
        write_json_pretty(&frame_meta_path(dir, i), &meta)?;
    }
    Ok(())
}

/// Load a sequence saved by [`save_sequence`]. Frames are discovered by
/// consecutive index starting at zero.
pub fn load_sequence(dir: &Path) -> Result<TrackedSequence> {
    let mut frames = Vec::new();
    let mut i = 0usize;
    loop {
        let cloud_path = frame_cloud_path(dir, i);
        if !cloud_path.exists() {
            break;
        }
        let points = read_cloud(&cloud_path)?;
        let meta: FrameMeta = read_json(&frame_meta_path(dir, i))?;
        if meta.frame_index != i {
            return Err(CoreError::Format(format!(
                "frame sidecar index {} does not match file index {i}",
                meta.frame_index
            )));
        }
        frames.push(Frame {
            points,
            boxes: meta.boxes.iter().map(BoxMeta::to_box).collect(),
        });
        i += 1;
    }
    if frames.is_empty() {
        return Err(CoreError::Format(format!(
            "no frames found under {}",
            dir.display()
        )));
    }
    let seq = TrackedSequence { frames };
    seq.validate()?;
    Ok(seq)
}

/// Dense bank index entry (one per generated track).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankEntry {
    pub track_id: u64,
    pub class_id: ClassId,
    pub dims: [f64; 3],
    pub fill_stats: FillStats,
    pub num_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankIndex {
    pub tracks: Vec<BankEntry>,
}

/// Write one cloud per track plus `index.json`.
pub fn save_dense_bank(dir: &Path, bank: &DenseBank) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tracks = Vec::new();
    for (id, obj) in &bank.objects {
        write_cloud(&dir.join(format!("track_{id:06}.s2dc")), &obj.canonical_points)?;
        tracks.push(BankEntry {
            track_id: *id,
            class_id: obj.class_id,
            dims: obj.dims,
            fill_stats: obj.fill_stats,
            num_points: obj.canonical_points.len(),
        });
    }
    write_json_pretty(&dir.join("index.json"), &BankIndex { tracks })
}

pub fn load_dense_bank(dir: &Path) -> Result<DenseBank> {
    let index: BankIndex = read_json(&dir.join("index.json"))?;
    let mut bank = DenseBank::default();
    for e in index.tracks {
        let points = read_cloud(&dir.join(format!("track_{:06}.s2dc", e.track_id)))?;
        bank.insert(DenseObject {
            track_id: e.track_id,
            class_id: e.class_id,
            dims: e.dims,
            canonical_points: points,
            fill_stats: e.fill_stats,
        });
    }
    Ok(bank)
}

/// Write a composed scene as `<stem>_dense.s2dc` + `<stem>_obj.s2dc`.
pub fn save_dense_scene(dir: &Path, scene: &DenseScene) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stem = format!("frame_{:06}", scene.source_frame_index);
    write_cloud(&dir.join(format!("{stem}_dense.s2dc")), &scene.dense_cloud)?;
    write_cloud(&dir.join(format!("{stem}_obj.s2dc")), &scene.object_only_cloud)?;
    Ok(())
}

pub fn load_dense_scene(dir: &Path, frame_index: usize) -> Result<DenseScene> {
    let stem = format!("frame_{frame_index:06}");
    Ok(DenseScene {
        dense_cloud: read_cloud(&dir.join(format!("{stem}_dense.s2dc")))?,
        object_only_cloud: read_cloud(&dir.join(format!("{stem}_obj.s2dc")))?,
        source_frame_index: frame_index,
    })
}

/// ASCII PLY export for eyeballing clouds in external viewers.
pub fn write_ply(path: &Path, points: &[Point3]) -> Result<()> {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", points.len()));
    s.push_str("property float x\nproperty float y\nproperty float z\nproperty float intensity\n");
    s.push_str("end_header\n");
    for p in points {
        s.push_str(&format!("{} {} {} {}\n", p.x as f32, p.y as f32, p.z as f32, p.feat as f32));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&s)?)
}
