//! Shared domain types: skeletons, root-relative poses, boxes and the
//! temporal block bookkeeping that turns a sequence into volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint tree plus the limb list used for PCP scoring. Joint 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    /// Parent index per joint; the root is its own parent.
    pub parent: Vec<usize>,
    pub limbs: Vec<(usize, usize)>,
}

impl SkeletonSpec {
    pub fn new(
        joint_names: Vec<String>,
        parent: Vec<usize>,
        limbs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let s = Self {
            joint_names,
            parent,
            limbs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.parent.len();
        if d < 2 {
            return Err(Error::InvalidInput("skeleton needs at least 2 joints".into()));
        }
        if self.joint_names.len() != d {
            return Err(Error::InvalidInput(format!(
                "{} joint names for {} joints",
                self.joint_names.len(),
                d
            )));
        }
        let roots: Vec<usize> = (0..d).filter(|&j| self.parent[j] == j).collect();
        if roots != [0] {
            return Err(Error::InvalidInput(format!(
                "skeleton must have exactly one root at joint 0, found {roots:?}"
            )));
        }
        for j in 0..d {
            let mut cur = j;
            let mut steps = 0;
            while cur != 0 {
                let p = self.parent[cur];
                if p >= d {
                    return Err(Error::InvalidInput(format!("joint {cur} has parent {p} out of range")));
                }
                cur = p;
                steps += 1;
                if steps > d {
                    return Err(Error::InvalidInput(format!("cycle through joint {j}")));
                }
            }
        }
        if let Some(&(a, b)) = self.limbs.iter().find(|&&(a, b)| a >= d || b >= d) {
            return Err(Error::InvalidInput(format!("limb ({a},{b}) references a missing joint")));
        }
        Ok(())
    }

    /// 17-joint body: pelvis, legs, spine, head and arms.
    pub fn human17() -> Self {
        const NAMES: [&str; 17] = [
            "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine",
            "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
            "r_elbow", "r_wrist",
        ];
        let parent = vec![0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
        let limbs = (1..17).map(|j| (parent[j], j)).collect();
        Self {
            joint_names: NAMES.iter().map(|s| s.to_string()).collect(),
            parent,
            limbs,
        }
    }
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        Self::human17()
    }
}

/// Root-relative 3D joint positions in millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose3D {
    pub joints: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>) -> Result<Self> {
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("pose has non-finite coordinates".into()));
        }
        Ok(Self { joints })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            joints: vec![[0.0; 3]; d],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 || values.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "flat pose length {} is not a positive multiple of 3",
                values.len()
            )));
        }
        Self::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// Subtracts the root joint from every joint.
pub fn root_relativize(absolute: &[[f64; 3]], root_index: usize) -> Result<Pose3D> {
    let root = *absolute.get(root_index).ok_or_else(|| {
        Error::InvalidInput(format!(
            "root index {root_index} out of range for {} joints",
            absolute.len()
        ))
    })?;
    Pose3D::new(
        absolute
            .iter()
            .map(|j| [j[0] - root[0], j[1] - root[1], j[2] - root[2]])
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center_u: f64,
    pub center_v: f64,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub fn new(center_u: f64, center_v: f64, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("bounding box must have positive size".into()));
        }
        if !center_u.is_finite() || !center_v.is_finite() {
            return Err(Error::InvalidInput("bounding box center is not finite".into()));
        }
        Ok(Self {
            center_u,
            center_v,
            width,
            height,
        })
    }

    pub fn shifted(&self, du: f64, dv: f64) -> Self {
        Self {
            center_u: self.center_u + du,
            center_v: self.center_v + dv,
            ..*self
        }
    }

    pub fn recentered(&self, u: f64, v: f64) -> Self {
        Self {
            center_u: u,
            center_v: v,
            ..*self
        }
    }
}

/// A block of `window` consecutive frames around `center`, covering
/// `center - window/2 + 1 ..= center + window/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeIndex {
    pub center: usize,
    pub window: usize,
}

impl VolumeIndex {
    pub fn first(&self) -> usize {
        self.center + 1 - self.window / 2
    }

    pub fn last(&self) -> usize {
        self.center + self.window / 2
    }

    pub fn members(&self) -> std::ops::RangeInclusive<usize> {
        self.first()..=self.last()
    }
}

/// Every full block of `window` frames in a sequence of `len` frames.
pub fn extract_blocks(len: usize, window: usize) -> Result<Vec<VolumeIndex>> {
    if window == 0 || window % 2 != 0 {
        return Err(Error::InvalidWindow(format!("window {window} must be even and positive")));
    }
    if window > len {
        return Err(Error::InvalidWindow(format!(
            "window {window} exceeds sequence length {len}"
        )));
    }
    let half = window / 2;
    Ok((half - 1..len - half)
        .map(|center| VolumeIndex { center, window })
        .collect())
}
