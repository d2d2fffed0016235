//! Episode files, dataset manifests and action normalization.
//!
//! An episode is the unit of demonstration data: a time-ordered sequence of
//! camera-frame object poses plus optional RGBD patch pairs. Episodes are
//! stored as a small binary format (text metadata header, little-endian
//! binary frame records); a dataset directory holds numbered episodes and a
//! `manifest.txt` listing files with SHA-256 content hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rgbd::{BBox, PatchPair, RgbdPatch, CHANNELS};
use crate::se3::{r6d_to_rot, relative_pose, rot_to_r6d, ActionVec9, Frame, Pose, Rot6d};

// ---------------------------------------------------------------------------
// Action normalization
// ---------------------------------------------------------------------------

/// Per-dimension min/max normalization of relative-pose translations to
/// `[-1, 1]`. Rotations stay as raw R6D entries (already order one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionNorm {
    pub center: [f64; 3],
    pub half_range: [f64; 3],
}

impl ActionNorm {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            half_range: [1.0; 3],
        }
    }

    /// Fit from the translations of a pose collection.
    pub fn fit<'a>(poses: impl Iterator<Item = &'a Pose>) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in poses {
            for i in 0..3 {
                min[i] = min[i].min(p.translation()[i]);
                max[i] = max[i].max(p.translation()[i]);
            }
        }
        let mut center = [0.0; 3];
        let mut half_range = [1.0; 3];
        for i in 0..3 {
            if min[i].is_finite() && max[i].is_finite() {
                center[i] = 0.5 * (min[i] + max[i]);
                let h = 0.5 * (max[i] - min[i]);
                half_range[i] = if h > 1e-9 { h } else { 1.0 };
            }
        }
        Self { center, half_range }
    }

    /// Encode a relative pose as a normalized 9-vector.
    pub fn encode(&self, pose: &Pose) -> ActionVec9 {
        let t = pose.translation();
        ActionVec9 {
            t: [
                (t[0] - self.center[0]) / self.half_range[0],
                (t[1] - self.center[1]) / self.half_range[1],
                (t[2] - self.center[2]) / self.half_range[2],
            ],
            r6: rot_to_r6d(pose.rotation()).expect("stored pose rotations are orthonormal"),
        }
    }

    /// Decode a normalized 9-vector back into a pose (Gram-Schmidt on the
    /// rotation part).
    pub fn decode(&self, v: &ActionVec9, parent: Frame, child: Frame) -> Result<Pose> {
        let rot = r6d_to_rot(&v.r6)?;
        let t = nalgebra::Vector3::new(
            v.t[0] * self.half_range[0] + self.center[0],
            v.t[1] * self.half_range[1] + self.center[1],
            v.t[2] * self.half_range[2] + self.center[2],
        );
        Pose::new(rot, t, parent, child)
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for i in 0..3 {
            out.push((format!("norm.center.{i}"), format!("{:?}", self.center[i])));
            out.push((
                format!("norm.half_range.{i}"),
                format!("{:?}", self.half_range[i]),
            ));
        }
        out
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: String| -> Result<f64> {
            meta.get(&key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("missing {key}")))
        };
        let mut center = [0.0; 3];
        let mut half_range = [1.0; 3];
        for i in 0..3 {
            center[i] = get(format!("norm.center.{i}"))?;
            half_range[i] = get(format!("norm.half_range.{i}"))?;
        }
        Ok(Self { center, half_range })
    }
}

/// Normalized observation 9-vector for a frame of a relative trajectory.
pub fn obs_vec(rel: &[Pose], frame: usize, norm: &ActionNorm) -> [f64; 9] {
    norm.encode(&rel[frame]).to_array()
}

/// Flattened `(horizon * 9)` action chunk starting after `frame`.
///
/// Episodes shorter than `frame + horizon` are padded by repeating the final
/// relative pose: the terminal pose is the goal state, so padding encodes
/// "stay inserted".
pub fn chunk_vec(rel: &[Pose], frame: usize, horizon: usize, norm: &ActionNorm) -> Vec<f64> {
    let mut out = Vec::with_capacity(horizon * 9);
    let last = rel.len() - 1;
    for step in 1..=horizon {
        let idx = (frame + step).min(last);
        out.extend_from_slice(&norm.encode(&rel[idx]).to_array());
    }
    out
}

/// Decode a flattened chunk into relative poses tagged `target -> source`.
pub fn decode_chunk(chunk: &[f64], horizon: usize, norm: &ActionNorm) -> Result<Vec<Pose>> {
    if chunk.len() != horizon * 9 {
        return Err(Error::ShapeMismatch {
            context: "action chunk",
            expected: format!("{}", horizon * 9),
            got: format!("{}", chunk.len()),
        });
    }
    let mut out = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let s = &chunk[step * 9..(step + 1) * 9];
        let v = ActionVec9 {
            t: [s[0], s[1], s[2]],
            r6: Rot6d([s[3], s[4], s[5], s[6], s[7], s[8]]),
        };
        out.push(norm.decode(&v, Frame::Target, Frame::Source)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// One recorded observation frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: u32,
    /// Source object pose in the camera frame, as observed (noise included).
    pub t_c_s: Pose,
    /// Target object pose in the camera frame, as observed.
    pub t_c_t: Pose,
    /// Union bounding box used for the patch crop (zero box when no patches).
    pub bbox: BBox,
    pub patches: Option<PatchPair>,
}

/// A demonstration episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub meta: BTreeMap<String, String>,
    pub frames: Vec<FrameRecord>,
}

const EPISODE_MAGIC: &[u8; 8] = b"PGDPEPI1";

impl Episode {
    pub fn has_patches(&self) -> bool {
        self.frames.iter().all(|f| f.patches.is_some()) && !self.frames.is_empty()
    }

    /// Canonicalized relative-pose trajectory `T_t^s` per frame.
    pub fn relative_trajectory(&self) -> Result<Vec<Pose>> {
        self.frames
            .iter()
            .map(|f| relative_pose(&f.t_c_t, &f.t_c_s))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(EPISODE_MAGIC);
        let mut meta_text = String::new();
        for (k, v) in &self.meta {
            meta_text.push_str(k);
            meta_text.push('=');
            meta_text.push_str(v);
            meta_text.push('\n');
        }
        buf.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta_text.as_bytes());
        buf.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        let has_patches = self.has_patches();
        buf.push(has_patches as u8);
        for f in &self.frames {
            buf.extend_from_slice(&f.index.to_le_bytes());
            for v in f.t_c_s.to_row_major() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in f.t_c_t.to_row_major() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in [f.bbox.x1, f.bbox.y1, f.bbox.x2, f.bbox.y2] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            if has_patches {
                let pair = f.patches.as_ref().expect("has_patches checked");
                let s = pair.current.size as u32;
                // Shape header, then current and goal pixel blocks.
                buf.extend_from_slice(&s.to_le_bytes());
                buf.extend_from_slice(&s.to_le_bytes());
                buf.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
                for v in pair.current.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                for v in pair.goal.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Episode> {
        let data = std::fs::read(path)?;
        let err = |reason: &str| Error::Format {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > data.len() {
                return Err(err("truncated"));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != EPISODE_MAGIC {
            return Err(err("bad magic"));
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta_text = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
            .map_err(|_| err("invalid metadata"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let has_patches = take(&mut pos, 1)?[0] != 0;
        let mut frames = Vec::with_capacity(count);
        let read_f64s = |pos: &mut usize, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
            }
            Ok(out)
        };
        for _ in 0..count {
            let index = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            let cs = read_f64s(&mut pos, 12)?;
            let ct = read_f64s(&mut pos, 12)?;
            let bb = read_f64s(&mut pos, 4)?;
            let t_c_s = Pose::from_row_major(
                cs.as_slice().try_into().unwrap(),
                Frame::Camera,
                Frame::Source,
            )
            .map_err(|e| err(&format!("bad source pose: {e}")))?;
            let t_c_t = Pose::from_row_major(
                ct.as_slice().try_into().unwrap(),
                Frame::Camera,
                Frame::Target,
            )
            .map_err(|e| err(&format!("bad target pose: {e}")))?;
            let patches = if has_patches {
                let h = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                let w = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                let c = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                if h != w || c != CHANNELS {
                    return Err(err("unsupported patch shape"));
                }
                let read_patch = |pos: &mut usize| -> Result<RgbdPatch> {
                    let n = h * w * CHANNELS;
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        v.push(f32::from_le_bytes(take(pos, 4)?.try_into().unwrap()));
                    }
                    RgbdPatch::from_data(h, v)
                };
                let current = read_patch(&mut pos)?;
                let goal = read_patch(&mut pos)?;
                Some(PatchPair::new(current, goal)?)
            } else {
                None
            };
            frames.push(FrameRecord {
                index,
                t_c_s,
                t_c_t,
                bbox: BBox::new(bb[0], bb[1], bb[2], bb[3]),
                patches,
            });
        }
        Ok(Episode { meta, frames })
    }
}

// ---------------------------------------------------------------------------
// Manifests and datasets
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Dataset manifest: metadata lines plus `file hash` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub files: Vec<(String, String)>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.meta {
            text.push_str(&format!("{k}={v}\n"));
        }
        for (name, hash) in &self.files {
            text.push_str(&format!("{name} {hash}\n"));
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let mut meta = BTreeMap::new();
        let mut files = Vec::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            } else if let Some((name, hash)) = line.rsplit_once(' ') {
                files.push((name.to_string(), hash.to_string()));
            }
        }
        Ok(Manifest { meta, files })
    }
}

/// An in-memory demonstration dataset loaded from a directory.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Load all episodes listed in the manifest, verifying content hashes.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = Manifest::read(&dir.join("manifest.txt"))?;
        let mut episodes = Vec::new();
        for (name, hash) in &manifest.files {
            if !name.ends_with(".bin") {
                continue;
            }
            let path = dir.join(name);
            let actual = sha256_file(&path)?;
            if &actual != hash {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: "content hash mismatch".to_string(),
                });
            }
            episodes.push(Episode::read(&path)?);
        }
        if episodes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            episodes,
        })
    }

    pub fn has_patches(&self) -> bool {
        self.episodes.iter().all(|e| e.has_patches())
    }

    pub fn max_episode_len(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).max().unwrap_or(0)
    }

    /// Fit translation normalization over every relative pose in the dataset.
    pub fn fit_norm(&self) -> Result<ActionNorm> {
        let mut all = Vec::new();
        for e in &self.episodes {
            all.extend(e.relative_trajectory()?);
        }
        if all.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(ActionNorm::fit(all.iter()))
    }

    /// The dataset-level frozen goal patch: the final frame of the first
    /// episode, as observed after insertion.
    pub fn goal_patch(&self) -> Option<RgbdPatch> {
        self.episodes
            .first()
            .and_then(|e| e.frames.last())
            .and_then(|f| f.patches.as_ref())
            .map(|p| p.current.clone())
    }
}

/// (episode, frame) indices of every training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainPair {
    pub episode: usize,
    pub frame: usize,
}

/// Enumerate training pairs at a frame stride.
pub fn build_pairs(dataset: &Dataset, stride: usize) -> Vec<TrainPair> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for (ei, e) in dataset.episodes.iter().enumerate() {
        let mut frame = 0;
        while frame < e.frames.len() {
            out.push(TrainPair { episode: ei, frame });
            frame += stride;
        }
    }
    out
}
