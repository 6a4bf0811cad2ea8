//! Sequence manifests: one JSON document listing frame files plus optional
//! per-frame poses and boxes.
//!
//! ```json
//! {"fps": 50.0, "frames": ["frames/000000.pgm", ...],
//!  "poses": [[[x, y, z], ...], ...], "boxes": [[cu, cv, w, h], ...]}
//! ```
//!
//! Relative frame paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, Pose3D};
use crate::error::{Error, Result};
use crate::image::{load_frame, Frame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawManifest {
    fps: f64,
    frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poses: Option<Vec<Vec<[f64; 3]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub fps: f64,
    pub frames: Vec<PathBuf>,
    pub poses: Option<Vec<Pose3D>>,
    pub boxes: Option<Vec<BoundingBox>>,
    /// Directory relative frame paths resolve against.
    pub base_dir: PathBuf,
}

impl SequenceManifest {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::InvalidInput(format!("fps must be positive, got {}", self.fps)));
        }
        let n = self.frames.len();
        if let Some(p) = &self.poses {
            if p.len() != n {
                return Err(Error::ShapeMismatch(format!("{} poses for {n} frames", p.len())));
            }
            if let Some(d) = p.first().map(Pose3D::joint_count) {
                if p.iter().any(|q| q.joint_count() != d) {
                    return Err(Error::ShapeMismatch("poses have differing joint counts".into()));
                }
            }
        }
        if let Some(b) = &self.boxes {
            if b.len() != n {
                return Err(Error::ShapeMismatch(format!("{} boxes for {n} frames", b.len())));
            }
        }
        Ok(())
    }

    pub fn poses(&self) -> Result<&[Pose3D]> {
        self.poses
            .as_deref()
            .ok_or_else(|| Error::Missing("manifest has no poses".into()))
    }

    pub fn boxes(&self) -> Result<&[BoundingBox]> {
        self.boxes
            .as_deref()
            .ok_or_else(|| Error::Missing("manifest has no boxes".into()))
    }

    pub fn frame_path(&self, i: usize) -> PathBuf {
        let p = &self.frames[i];
        if p.is_absolute() {
            p.clone()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_frames(&self) -> Result<Vec<Frame>> {
        (0..self.len())
            .map(|i| load_frame(&self.frame_path(i), i))
            .collect()
    }

    pub fn parse(json: &[u8], base_dir: &Path) -> Result<Self> {
        let raw: RawManifest = serde_json::from_slice(json)?;
        let poses = raw
            .poses
            .map(|ps| ps.into_iter().map(Pose3D::new).collect::<Result<Vec<_>>>())
            .transpose()?;
        let boxes = raw
            .boxes
            .map(|bs| {
                bs.into_iter()
                    .map(|[cu, cv, w, h]| {
                        if !(w >= 1.0 && h >= 1.0 && w <= f64::from(u32::MAX) && h <= f64::from(u32::MAX))
                            || w.fract() != 0.0
                            || h.fract() != 0.0
                        {
                            return Err(Error::InvalidInput(format!(
                                "box size {w}x{h} must be positive integers"
                            )));
                        }
                        BoundingBox::new(cu, cv, w as u32, h as u32)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let m = Self {
            fps: raw.fps,
            frames: raw.frames.into_iter().map(PathBuf::from).collect(),
            poses,
            boxes,
            base_dir: base_dir.to_path_buf(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&bytes, &base)
    }

    /// Serializes with frame paths expressed relative to `dir`.
    pub fn to_json(&self, dir: &Path) -> Result<String> {
        let frames = (0..self.len())
            .map(|i| {
                let abs = self.frame_path(i);
                let rel = relative_to(&abs, dir);
                path_string(&rel)
            })
            .collect::<Result<Vec<_>>>()?;
        let raw = RawManifest {
            fps: self.fps,
            frames,
            poses: self
                .poses
                .as_ref()
                .map(|ps| ps.iter().map(|p| p.joints.clone()).collect()),
            boxes: self.boxes.as_ref().map(|bs| {
                bs.iter()
                    .map(|b| [b.center_u, b.center_v, f64::from(b.width), f64::from(b.height)])
                    .collect()
            }),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new(""));
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = self.to_json(dir)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|c| c.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn relative_to(path: &Path, dir: &Path) -> PathBuf {
    let (p, d) = (absolute(path), absolute(dir));
    pathdiff::diff_paths(&p, &d).unwrap_or(p)
}

fn path_string(p: &Path) -> Result<String> {
    p.to_str()
        .map(|s| s.replace('\\', "/"))
        .ok_or_else(|| Error::InvalidInput(format!("non-UTF-8 path {}", p.display())))
}

/// A manifest with its frames decoded into memory.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub fps: f64,
    pub frames: Vec<Frame>,
    pub poses: Option<Vec<Pose3D>>,
    pub boxes: Option<Vec<BoundingBox>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn poses(&self) -> Result<&[Pose3D]> {
        self.poses
            .as_deref()
            .ok_or_else(|| Error::Missing("sequence has no poses".into()))
    }

    pub fn boxes(&self) -> Result<&[BoundingBox]> {
        self.boxes
            .as_deref()
            .ok_or_else(|| Error::Missing("sequence has no boxes".into()))
    }

    pub fn with_boxes(&self, boxes: Vec<BoundingBox>) -> Self {
        Self {
            boxes: Some(boxes),
            ..self.clone()
        }
    }
}

impl SequenceManifest {
    pub fn load_sequence(&self) -> Result<Sequence> {
        Ok(Sequence {
            fps: self.fps,
            frames: self.load_frames()?,
            poses: self.poses.clone(),
            boxes: self.boxes.clone(),
        })
    }
}
