//! Synthetic articulated walkers: a 17-joint stick figure animated by
//! sinusoidal joint angles, seen in profile with orthographic projection.
//! Limbs nearer the camera render brighter, which is the only depth cue.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::domain::{root_relativize, BoundingBox, SkeletonSpec};
use crate::error::{Error, Result};
use crate::image::{save_pgm, Frame};
use crate::manifest::{Sequence, SequenceManifest};
use crate::motioncomp::Shift;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
    /// Joint-angle amplitude in radians.
    pub amplitude: f64,
    /// Gait period in frames.
    pub period: f64,
    /// Global drift of the subject in px/frame.
    pub drift: (f64, f64),
    pub limb_width: f64,
    pub noise_sigma: f64,
    /// Pixels per millimeter.
    pub scale: f64,
    /// Ground-truth box side in pixels.
    pub box_size: u32,
    /// Phase of the gait at frame 0, in radians.
    pub phase: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 112,
            frames: 200,
            fps: 50.0,
            amplitude: 0.5,
            period: 30.0,
            drift: (0.2, 0.0),
            limb_width: 2.0,
            noise_sigma: 0.02,
            scale: 0.036,
            box_size: 64,
            phase: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 48 {
            return Err(Error::InvalidConfig(format!(
                "need at least 48 frames, got {}",
                self.frames
            )));
        }
        if !(self.period > 0.0) {
            return Err(Error::InvalidConfig("gait period must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise sigma must be non-negative".into()));
        }
        if self.width == 0 || self.height == 0 || self.box_size == 0 {
            return Err(Error::InvalidConfig("image and box sizes must be positive".into()));
        }
        if !(self.scale > 0.0 && self.limb_width > 0.0) {
            return Err(Error::InvalidConfig("scale and limb width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub max_shift_u: f64,
    pub max_shift_v: f64,
    pub seed: u64,
}

impl JitterConfig {
    pub fn uniform(max_shift: f64, seed: u64) -> Self {
        Self {
            max_shift_u: max_shift,
            max_shift_v: max_shift,
            seed,
        }
    }
}

// Rest-pose offsets of each joint from its parent, in mm. X points along the
// walking direction, Y up, Z toward the camera (the subject's left side).
const REST: [[f64; 3]; 17] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.0, -100.0],
    [0.0, -420.0, 0.0],
    [0.0, -400.0, 0.0],
    [0.0, 0.0, 100.0],
    [0.0, -420.0, 0.0],
    [0.0, -400.0, 0.0],
    [0.0, 230.0, 0.0],
    [0.0, 250.0, 0.0],
    [0.0, 110.0, 0.0],
    [0.0, 130.0, 0.0],
    [0.0, -20.0, 170.0],
    [0.0, -280.0, 0.0],
    [0.0, -250.0, 0.0],
    [0.0, -20.0, -170.0],
    [0.0, -280.0, 0.0],
    [0.0, -250.0, 0.0],
];

/// Ground-truth boxes are centered this far below the root (in mm), close
/// to the figure's center of edge mass over a gait cycle.
pub const BOX_BELOW_ROOT_MM: f64 = 80.0;

/// Local sagittal rotation (about Z) of each joint's outgoing bone at gait
/// phase `p`. Positive angles swing a downward bone forward.
fn joint_angles(p: f64, amp: f64) -> [f64; 17] {
    use std::f64::consts::PI;
    let mut a = [0.0; 17];
    let flex = |x: f64| 0.5 * (1.0 + x.sin());
    // hips swing the thighs, knees bend the shins backwards
    a[2] = amp * (p + PI).sin();
    a[3] = -amp * 1.1 * flex(p + PI / 2.0);
    a[5] = amp * p.sin();
    a[6] = -amp * 1.1 * flex(p - PI / 2.0);
    // slight forward lean of the trunk
    a[8] = -0.08 * amp * (2.0 * p).sin();
    a[10] = 0.1 * amp * p.cos();
    // arms counter-swing the legs, elbows flex forward
    a[12] = amp * 0.8 * (p + PI).sin();
    a[13] = amp * 0.7 * flex(p + 0.6);
    a[15] = amp * 0.8 * p.sin();
    a[16] = amp * 0.7 * flex(p + PI + 0.6);
    a
}

fn rotate_z([x, y, z]: [f64; 3], t: f64) -> [f64; 3] {
    let (s, c) = t.sin_cos();
    [x * c - y * s, x * s + y * c, z]
}

/// Forward kinematics: absolute joint positions with the root at the origin.
/// Each joint's angle rotates the bone arriving at it, accumulated down the
/// chain.
pub fn walker_pose(skeleton: &SkeletonSpec, phase: f64, amp: f64) -> Vec<[f64; 3]> {
    let angles = joint_angles(phase, amp);
    let d = skeleton.joint_count();
    let mut pos = vec![[0.0; 3]; d];
    let mut total = vec![0.0; d];
    for j in 1..d {
        let p = skeleton.parent[j];
        total[j] = total[p] + angles.get(j).copied().unwrap_or(0.0);
        let off = rotate_z(REST.get(j).copied().unwrap_or([0.0, 100.0, 0.0]), total[j]);
        pos[j] = [pos[p][0] + off[0], pos[p][1] + off[1], pos[p][2] + off[2]];
    }
    pos
}

fn draw_segment(img: &mut [f32], w: usize, h: usize, a: (f64, f64), b: (f64, f64), half: f64, bright: f32) {
    let reach = half + 1.0;
    let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(w);
    let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(h);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64, y as f64);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            let dist = (qx * qx + qy * qy).sqrt();
            let cover = (half + 0.5 - dist).clamp(0.0, 1.0) as f32;
            let v = cover * bright;
            let px = &mut img[y * w + x];
            if v > *px {
                *px = v;
            }
        }
    }
}

/// Renders one frame of the skeleton with its root at pixel `(cu, cv)`.
pub fn render(cfg: &SynthConfig, skeleton: &SkeletonSpec, joints: &[[f64; 3]], cu: f64, cv: f64) -> Vec<f32> {
    let (w, h) = (cfg.width, cfg.height);
    let mut img = vec![0.0f32; w * h];
    let project = |j: &[f64; 3]| (cu + cfg.scale * j[0], cv - cfg.scale * j[1]);
    let head = skeleton.joint_names.iter().position(|n| n == "head");
    for j in 1..skeleton.joint_count() {
        let p = skeleton.parent[j];
        let depth = 0.5 * (joints[j][2] + joints[p][2]);
        let bright = (0.65 + depth / 600.0).clamp(0.25, 1.0) as f32;
        let mut half = cfg.limb_width / 2.0;
        if Some(j) == head {
            half *= 2.5;
        }
        draw_segment(&mut img, w, h, project(&joints[p]), project(&joints[j]), half, bright);
    }
    img
}

/// Generates a walker sequence with exact root-relative poses and boxes
/// centered just below the projected root.
pub fn gen_sequence(cfg: &SynthConfig) -> Result<Sequence> {
    cfg.validate()?;
    let skeleton = SkeletonSpec::human17();
    let n = cfg.frames;
    let span = (n - 1) as f64;
    let u0 = cfg.width as f64 / 2.0 - cfg.drift.0 * span / 2.0;
    let v0 = cfg.height as f64 / 2.0 - cfg.drift.1 * span / 2.0;
    let mut rng = seed::rng_for(cfg.seed, "synth-noise");
    let noise = Normal::new(0.0f64, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut frames = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    for t in 0..n {
        let phase = cfg.phase + 2.0 * std::f64::consts::PI * t as f64 / cfg.period;
        let joints = walker_pose(&skeleton, phase, cfg.amplitude);
        let (cu, cv) = (u0 + cfg.drift.0 * t as f64, v0 + cfg.drift.1 * t as f64);
        let mut px = render(cfg, &skeleton, &joints, cu, cv - BOX_BELOW_ROOT_MM * cfg.scale);
        if cfg.noise_sigma > 0.0 {
            for v in px.iter_mut() {
                *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        frames.push(Frame::new(cfg.width, cfg.height, px, t)?);
        poses.push(root_relativize(&joints, 0)?);
        boxes.push(BoundingBox::new(cu, cv, cfg.box_size, cfg.box_size)?);
    }
    Ok(Sequence {
        fps: cfg.fps,
        frames,
        poses: Some(poses),
        boxes: Some(boxes),
    })
}

/// Writes frames as `frames/NNNNNN.pgm` plus `manifest.json` into `dir`.
pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<SequenceManifest> {
    let frame_dir = dir.join("frames");
    std::fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
    let mut paths = Vec::with_capacity(seq.len());
    for f in &seq.frames {
        let rel = Path::new("frames").join(format!("{:06}.pgm", f.index));
        save_pgm(&dir.join(&rel), f)?;
        paths.push(rel);
    }
    let m = SequenceManifest {
        fps: seq.fps,
        frames: paths,
        poses: seq.poses.clone(),
        boxes: seq.boxes.clone(),
        base_dir: dir.to_path_buf(),
    };
    m.save(&dir.join("manifest.json"))?;
    Ok(m)
}

/// Offsets every box center by independent uniform draws in
/// `[-max, +max]` per axis. Returns the perturbed boxes and the offsets.
pub fn jitter_boxes(boxes: &[BoundingBox], cfg: &JitterConfig) -> Result<(Vec<BoundingBox>, Vec<Shift>)> {
    if !(cfg.max_shift_u >= 0.0 && cfg.max_shift_v >= 0.0) {
        return Err(Error::InvalidConfig("jitter ranges must be non-negative".into()));
    }
    let mut rng = seed::rng_for(cfg.seed, "jitter");
    let draw = |m: f64, rng: &mut seed::Rng| -> f64 {
        if m == 0.0 {
            // keep the stream aligned with the non-degenerate case
            let _: f64 = rng.random();
            0.0
        } else {
            Uniform::new_inclusive(-m, m).expect("finite range").sample(rng)
        }
    };
    let mut out = Vec::with_capacity(boxes.len());
    let mut offsets = Vec::with_capacity(boxes.len());
    for b in boxes {
        let du = draw(cfg.max_shift_u, &mut rng);
        let dv = draw(cfg.max_shift_v, &mut rng);
        out.push(b.shifted(du, dv));
        offsets.push(Shift { du, dv });
    }
    Ok((out, offsets))
}

pub fn jitter_manifest(m: &SequenceManifest, cfg: &JitterConfig) -> Result<(SequenceManifest, Vec<Shift>)> {
    let (boxes, offsets) = jitter_boxes(m.boxes()?, cfg)?;
    let mut out = m.clone();
    out.boxes = Some(boxes);
    Ok((out, offsets))
}
