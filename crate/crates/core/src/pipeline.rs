//! End-to-end plumbing: the resolved run configuration, box alignment
//! (raw boxes or motion compensation), per-block descriptors, the
//! `RSTVFEAT` feature file and model training on a sequence.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binfmt::{self, Reader};
use crate::domain::{extract_blocks, BoundingBox, Pose3D};
use crate::error::{Error, Result};
use crate::hog3d::{descriptor, Descriptor, Hog3DConfig};
use crate::image::Frame;
use crate::manifest::Sequence;
use crate::motioncomp::{build_rstv, compensate, CompensationConfig, ShiftRegressor};
use crate::regress::{DnHyper, KernelConfig, ModelKind, PoseModel};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Temporal window T (frames per volume).
    pub window: usize,
    pub hog: Hog3DConfig,
    pub compensation: CompensationConfig,
    pub kernel: KernelConfig,
    pub dn: DnHyper,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// 64-px patches, T = 24, 2000/800 embedding dims, 512-unit DN layers.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            window: 24,
            hog: Hog3DConfig::default(),
            compensation: CompensationConfig::default(),
            kernel: KernelConfig {
                input_dim: 2000,
                output_dim: 800,
                ..KernelConfig::default()
            },
            dn: DnHyper {
                hidden: 512,
                ..DnHyper::default()
            },
        }
        .with_seed(0)
    }

    /// Full-size embeddings (15000/4000) and 3000-unit DN layers.
    pub fn paper_dims(mut self) -> Self {
        self.kernel.input_dim = 15000;
        self.kernel.output_dim = 4000;
        self.dn.hidden = 3000;
        self
    }

    /// Sets the master seed and derives every component seed from it.
    pub fn with_seed(mut self, seed_: u64) -> Self {
        self.seed = seed_;
        self.kernel.seed = seed::derive(seed_, "kernel");
        self.dn.seed = seed::derive(seed_, "dn");
        self
    }

    pub fn shift_seed(&self) -> u64 {
        seed::derive(self.seed, "shift")
    }

    pub fn validate(&self) -> Result<()> {
        self.hog.validate()?;
        self.compensation.validate()?;
        self.kernel.validate()?;
        self.dn.validate()?;
        if self.window < 4 || self.window % 2 != 0 {
            return Err(Error::InvalidWindow(format!("window must be even and at least 4, got {}", self.window)));
        }
        if self.window % self.hog.temporal_cell != 0 {
            return Err(Error::InvalidConfig(format!(
                "temporal cell {} does not divide window {}",
                self.hog.temporal_cell, self.window
            )));
        }
        let patch = self.compensation.patch;
        if let Some(s) = self.hog.spatial_levels.iter().find(|&&s| patch % s != 0) {
            return Err(Error::InvalidConfig(format!("spatial grid {s} does not divide patch {patch}")));
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Accepts a bare config or any report that embeds one under `config`
    /// next to `config_hash`.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let mut v: serde_json::Value = serde_json::from_slice(bytes)?;
        if let Some(obj) = v.as_object_mut() {
            if obj.contains_key("config_hash") {
                v = obj.remove("config").ok_or_else(|| Error::InvalidConfig("report has no embedded config".into()))?;
            }
        }
        let cfg: Self = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// How volumes are positioned over the frames.
#[derive(Clone, Copy)]
pub enum Alignment<'a> {
    /// Use the sequence's boxes as given (STV).
    Boxes,
    /// Refine from the first box with shift regressors (RSTV).
    Compensate {
        coarse: &'a dyn ShiftRegressor,
        fine: &'a dyn ShiftRegressor,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "STV")]
    Stv,
    #[serde(rename = "RSTV")]
    Rstv,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Stv => "STV",
            Variant::Rstv => "RSTV",
        })
    }
}

impl Alignment<'_> {
    pub fn variant(&self) -> Variant {
        match self {
            Alignment::Boxes => Variant::Stv,
            Alignment::Compensate { .. } => Variant::Rstv,
        }
    }
}

pub fn aligned_boxes(seq: &Sequence, align: Alignment<'_>, cfg: &CompensationConfig) -> Result<Vec<BoundingBox>> {
    let boxes = seq.boxes()?;
    match align {
        Alignment::Boxes => Ok(boxes.to_vec()),
        Alignment::Compensate { coarse, fine } => {
            let first = boxes.first().ok_or_else(|| Error::Missing("sequence has no boxes".into()))?;
            compensate(&seq.frames, first, cfg, coarse, fine)
        }
    }
}

/// One descriptor per valid block center, in center order. Blocks are
/// computed in parallel; the collected order is fixed.
pub fn block_descriptors(frames: &[Frame], boxes: &[BoundingBox], window: usize, patch: usize, hog: &Hog3DConfig) -> Result<Vec<Descriptor>> {
    extract_blocks(frames.len(), window)?
        .into_par_iter()
        .map(|vi| {
            let r = build_rstv(frames, boxes, vi, patch)?;
            Ok(Descriptor {
                values: descriptor(&r.volume, hog)?,
                source: Some(vi),
            })
        })
        .collect()
}

pub fn sequence_descriptors(seq: &Sequence, align: Alignment<'_>, cfg: &PipelineConfig) -> Result<Vec<Descriptor>> {
    let boxes = aligned_boxes(seq, align, &cfg.compensation)?;
    block_descriptors(&seq.frames, &boxes, cfg.window, cfg.compensation.patch, &cfg.hog)
}

/// Ground-truth poses at each descriptor's center frame.
pub fn center_poses(descriptors: &[Descriptor], poses: &[Pose3D]) -> Result<Vec<Pose3D>> {
    descriptors
        .iter()
        .map(|d| {
            let c = d.source.ok_or_else(|| Error::Missing("descriptor has no source block".into()))?.center;
            poses
                .get(c)
                .cloned()
                .ok_or_else(|| Error::Missing(format!("no ground-truth pose for frame {c}")))
        })
        .collect()
}

pub fn fit_model(kind: ModelKind, descriptors: &[Descriptor], poses: &[Pose3D], cfg: &PipelineConfig) -> Result<PoseModel> {
    let ys = center_poses(descriptors, poses)?;
    let xs: Vec<Vec<f32>> = descriptors.iter().map(|d| d.values.clone()).collect();
    PoseModel::fit(kind, &xs, &ys, &cfg.kernel, &cfg.dn)
}

pub fn train_on_sequence(kind: ModelKind, seq: &Sequence, align: Alignment<'_>, cfg: &PipelineConfig) -> Result<PoseModel> {
    cfg.validate()?;
    let d = sequence_descriptors(seq, align, cfg)?;
    fit_model(kind, &d, seq.poses()?, cfg)
}

pub const FEAT_MAGIC: &[u8; 8] = b"RSTVFEAT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFooter {
    pub variant: Variant,
    pub centers: Vec<usize>,
    pub window: usize,
    pub config: PipelineConfig,
}

/// Descriptor rows plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub footer: FeatureFooter,
}

impl FeatureMatrix {
    pub fn from_descriptors(d: &[Descriptor], variant: Variant, cfg: &PipelineConfig) -> Result<Self> {
        let cols = d.first().map_or(0, |x| x.values.len());
        if d.iter().any(|x| x.values.len() != cols) {
            return Err(Error::ShapeMismatch("descriptors have different lengths".into()));
        }
        let centers = d
            .iter()
            .map(|x| x.source.map(|s| s.center).ok_or_else(|| Error::Missing("descriptor has no source block".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows: d.len(),
            cols,
            data: d.iter().flat_map(|x| x.values.iter().copied()).collect(),
            footer: FeatureFooter {
                variant,
                centers,
                window: cfg.window,
                config: cfg.clone(),
            },
        })
    }

    pub fn descriptors(&self) -> Vec<Descriptor> {
        (0..self.rows)
            .map(|i| Descriptor {
                values: self.data[i * self.cols..(i + 1) * self.cols].to_vec(),
                source: Some(crate::domain::VolumeIndex {
                    center: self.footer.centers[i],
                    window: self.footer.window,
                }),
            })
            .collect()
    }

    /// `magic | version u32 | rows u32 | cols u32 | f32 rows | JSON footer`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let rows = u32::try_from(self.rows).map_err(|_| Error::InvalidInput("too many rows".into()))?;
        let cols = u32::try_from(self.cols).map_err(|_| Error::InvalidInput("too many columns".into()))?;
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        out.extend_from_slice(FEAT_MAGIC);
        out.extend_from_slice(&binfmt::VERSION.to_le_bytes());
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&cols.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&serde_json::to_vec(&self.footer)?);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "feature file";
        let mut r = Reader::new(WHAT, bytes);
        r.magic(FEAT_MAGIC)?;
        r.version()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(WHAT, "dimensions overflow"))?;
        let data = binfmt::f32s(r.take(n)?);
        let footer: FeatureFooter = serde_json::from_slice(r.rest())?;
        if footer.centers.len() != rows {
            return Err(Error::format(WHAT, "footer lists a different number of rows"));
        }
        Ok(Self { rows, cols, data, footer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&binfmt::read_file(path)?)
    }
}
