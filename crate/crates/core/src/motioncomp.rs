//! Object-centric motion compensation. Shift regressors look at a patch
//! cropped around the current box center and predict where the subject
//! sits relative to that center; iterating crop-and-shift over a sequence
//! yields boxes that keep the subject centered, from which rectified
//! spatiotemporal volumes are built.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, VolumeIndex};
use crate::error::{Error, Result};
use crate::hog3d::{gradients2d, Volume};
use crate::image::{crop_patch, Frame, Patch};
use crate::nnet::{self, AdamState, LayerSpec, Network};
use crate::seed;

/// Offset of the subject from the patch center, in image pixels. Adding it
/// to the crop center moves the box onto the subject.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Shift {
    pub du: f64,
    pub dv: f64,
}

impl Shift {
    pub fn norm(&self) -> f64 {
        self.du.hypot(self.dv)
    }
}

/// What a regressor gets to see: the patch, plus where it was cut from
/// (only oracles use the latter).
#[derive(Debug, Clone, Copy)]
pub struct ShiftQuery<'a> {
    pub patch: &'a Patch,
    pub frame_index: usize,
    pub center_u: f64,
    pub center_v: f64,
}

pub trait ShiftRegressor {
    /// Side of the square patch the regressor expects.
    fn patch_size(&self) -> usize;

    fn predict(&self, q: &ShiftQuery<'_>) -> Result<Shift>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Coarse,
    Fine,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(ShiftKind::Coarse),
            "fine" => Ok(ShiftKind::Fine),
            other => Err(Error::InvalidConfig(format!("unknown shift regressor kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftTrainConfig {
    pub samples_per_frame: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ShiftTrainConfig {
    fn default() -> Self {
        Self {
            samples_per_frame: 8,
            epochs: 6,
            batch: 32,
            lr: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompensationConfig {
    pub max_iter: usize,
    pub coarse_iters: usize,
    pub coarse_range: f64,
    pub fine_range: f64,
    /// Side of the square box (and patch) in pixels.
    pub patch: usize,
    /// Side of the network input; the coarse net sees the whole patch
    /// downsampled to this size, the fine net the central window of this
    /// size at full resolution.
    pub net_input: usize,
    pub train: ShiftTrainConfig,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self {
            max_iter: 4,
            coarse_iters: 2,
            coarse_range: 16.0,
            fine_range: 4.0,
            patch: 64,
            net_input: 32,
            train: ShiftTrainConfig::default(),
        }
    }
}

impl CompensationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_iters > self.max_iter {
            return Err(Error::InvalidConfig("coarse_iters must not exceed max_iter".into()));
        }
        if !(self.coarse_range >= 0.0 && self.fine_range >= 0.0) {
            return Err(Error::InvalidConfig("shift ranges must be non-negative".into()));
        }
        if self.patch == 0 || self.net_input == 0 || self.patch % self.net_input != 0 {
            return Err(Error::InvalidConfig("patch size must be a positive multiple of the network input size".into()));
        }
        if self.net_input < 16 {
            return Err(Error::InvalidConfig("network input must be at least 16 pixels".into()));
        }
        if self.train.batch == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn range(&self, kind: ShiftKind) -> f64 {
        match kind {
            ShiftKind::Coarse => self.coarse_range,
            ShiftKind::Fine => self.fine_range,
        }
    }
}

fn square_box(u: f64, v: f64, side: usize) -> BoundingBox {
    BoundingBox {
        center_u: u,
        center_v: v,
        width: side as u32,
        height: side as u32,
    }
}

pub fn crop_at(frame: &Frame, u: f64, v: f64, side: usize) -> Patch {
    crop_patch(frame, &square_box(u, v, side), side, side)
}

/// For every frame, `n_per_frame` patches cut at the ground-truth center
/// minus a uniform offset in `[-range, range]²`; the offset is the label.
pub fn make_shift_training_set(
    frames: &[Frame],
    boxes: &[BoundingBox],
    patch: usize,
    range: f64,
    n_per_frame: usize,
    seed_: u64,
) -> Result<Vec<(Patch, Shift)>> {
    if boxes.len() != frames.len() {
        return Err(Error::Missing(format!("{} boxes for {} frames", boxes.len(), frames.len())));
    }
    if !(range >= 0.0 && range.is_finite()) || patch == 0 {
        return Err(Error::InvalidConfig("shift range must be finite and non-negative".into()));
    }
    let mut rng = seed::rng_for(seed_, "shift-samples");
    let dist = Uniform::new_inclusive(-range, range).expect("valid range");
    let mut out = Vec::with_capacity(frames.len() * n_per_frame);
    for (f, b) in frames.iter().zip(boxes) {
        for _ in 0..n_per_frame {
            let label = Shift {
                du: dist.sample(&mut rng),
                dv: dist.sample(&mut rng),
            };
            let p = crop_at(f, b.center_u - label.du, b.center_v - label.dv, patch);
            out.push((p, label));
        }
    }
    Ok(out)
}

/// Network input for a patch: 2×2 (or k×k) block means for the coarse
/// net, the central window for the fine net; mean-subtracted either way.
pub fn network_input(patch: &Patch, kind: ShiftKind, side: usize) -> Result<Vec<f32>> {
    if patch.width != patch.height || patch.width % side != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} patch does not fit a {side}-pixel network input",
            patch.width, patch.height
        )));
    }
    let mut x = Vec::with_capacity(side * side);
    match kind {
        ShiftKind::Coarse => {
            let k = patch.width / side;
            let norm = 1.0 / (k * k) as f32;
            for y in 0..side {
                for xx in 0..side {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += patch.at(xx * k + dx, y * k + dy);
                        }
                    }
                    x.push(s * norm);
                }
            }
        }
        ShiftKind::Fine => {
            let off = (patch.width - side) / 2;
            for y in 0..side {
                for xx in 0..side {
                    x.push(patch.at(off + xx, off + y));
                }
            }
        }
    }
    let mean = x.iter().sum::<f32>() / x.len() as f32;
    for v in &mut x {
        *v -= mean;
    }
    Ok(x)
}

pub fn shift_layers(side: usize) -> Vec<LayerSpec> {
    let s1 = side - 4;
    let s2 = s1 - 4;
    let s3 = (s2 / 2 - 2) / 2;
    vec![
        LayerSpec::Conv2d { in_ch: 1, out_ch: 8, kernel: 5, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv2d { in_ch: 8, out_ch: 16, kernel: 5, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::Maxpool2d { kernel: 2 },
        LayerSpec::Conv2d { in_ch: 16, out_ch: 32, kernel: 3, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::Maxpool2d { kernel: 2 },
        LayerSpec::Dense { input: 32 * s3 * s3, output: 256 },
        LayerSpec::Relu,
        LayerSpec::Dense { input: 256, output: 2 },
        LayerSpec::Linear,
    ]
}

/// Sidecar metadata stored next to a shift network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSidecar {
    pub kind: ShiftKind,
    pub range: f64,
    pub patch: usize,
    pub net_input: usize,
}

/// CNN shift regressor; outputs are scaled by `range`.
#[derive(Debug, Clone)]
pub struct CnnShiftRegressor {
    pub net: Network<f32>,
    pub meta: ShiftSidecar,
}

impl CnnShiftRegressor {
    pub fn predict_patches(&self, patches: &[&Patch]) -> Result<Vec<Shift>> {
        let mut input = Vec::with_capacity(patches.len() * self.net.input_len());
        for p in patches {
            input.extend(network_input(p, self.meta.kind, self.meta.net_input)?);
        }
        let scale = self.meta.range.max(1e-6);
        let y = self.net.predict(&input)?;
        Ok(y
            .chunks(2)
            .map(|o| {
                let s = Shift {
                    du: f64::from(o[0]) * scale,
                    dv: f64::from(o[1]) * scale,
                };
                if s.du.is_finite() && s.dv.is_finite() {
                    s
                } else {
                    Shift::default()
                }
            })
            .collect())
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the network to `path` and the sidecar next to it (`.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        nnet::save_network(&self.net, path)?;
        let side = Self::sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(&self.meta)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let net = nnet::load_network(path)?;
        let side = Self::sidecar_path(path);
        let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        Self::from_parts(net, parse_sidecar(&bytes)?)
    }

    pub fn from_parts(net: Network<f32>, meta: ShiftSidecar) -> Result<Self> {
        if net.input_shape != [1, meta.net_input, meta.net_input] || net.output_len() != 2 {
            return Err(Error::format("shift regressor", "network shape does not match sidecar"));
        }
        Ok(Self { net, meta })
    }
}

pub fn parse_sidecar(bytes: &[u8]) -> Result<ShiftSidecar> {
    let meta: ShiftSidecar = serde_json::from_slice(bytes)?;
    if meta.net_input == 0 || meta.patch == 0 || meta.patch % meta.net_input != 0 || !(meta.range >= 0.0 && meta.range.is_finite()) {
        return Err(Error::format("shift sidecar", "inconsistent patch sizes or range"));
    }
    Ok(meta)
}

impl ShiftRegressor for CnnShiftRegressor {
    fn patch_size(&self) -> usize {
        self.meta.patch
    }

    fn predict(&self, q: &ShiftQuery<'_>) -> Result<Shift> {
        Ok(self.predict_patches(&[q.patch])?[0])
    }
}

/// Trains the shift CNN on `(patch, label)` pairs with ADAM on the mean
/// squared error of range-normalized labels.
pub fn train_shift_regressor(
    samples: &[(Patch, Shift)],
    kind: ShiftKind,
    cfg: &CompensationConfig,
    seed_: u64,
) -> Result<CnnShiftRegressor> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty shift training set".into()));
    }
    let side = cfg.net_input;
    let range = cfg.range(kind);
    let scale = range.max(1e-6);
    let mut x = Vec::with_capacity(samples.len() * side * side);
    let mut y = Vec::with_capacity(samples.len() * 2);
    for (p, s) in samples {
        if p.width != cfg.patch || p.height != cfg.patch {
            return Err(Error::ShapeMismatch("training patch does not match configured size".into()));
        }
        x.extend(network_input(p, kind, side)?);
        y.push((s.du / scale) as f32);
        y.push((s.dv / scale) as f32);
    }
    let label = match kind {
        ShiftKind::Coarse => "shift-coarse",
        ShiftKind::Fine => "shift-fine",
    };
    let mut net = Network::<f32>::new(vec![1, side, side], shift_layers(side), seed::derive(seed_, label))?;
    let mut adam = AdamState::with_lr(&net, cfg.train.lr);
    net.train(&x, &y, cfg.train.epochs, cfg.train.batch, &mut adam)?;
    Ok(CnnShiftRegressor {
        net,
        meta: ShiftSidecar {
            kind,
            range,
            patch: cfg.patch,
            net_input: side,
        },
    })
}

/// Coarse and fine regressors trained on one sequence with ground-truth
/// boxes.
pub fn train_shift_pair(frames: &[Frame], boxes: &[BoundingBox], cfg: &CompensationConfig, seed_: u64) -> Result<(CnnShiftRegressor, CnnShiftRegressor)> {
    cfg.validate()?;
    let mut out = Vec::new();
    for kind in [ShiftKind::Coarse, ShiftKind::Fine] {
        let set = make_shift_training_set(
            frames,
            boxes,
            cfg.patch,
            cfg.range(kind),
            cfg.train.samples_per_frame,
            seed::derive(seed_, &format!("{kind:?}")),
        )?;
        out.push(train_shift_regressor(&set, kind, cfg, seed_)?);
    }
    let fine = out.pop().expect("two regressors");
    Ok((out.pop().expect("two regressors"), fine))
}

/// Predicts the gradient-magnitude centroid's offset from the patch center.
#[derive(Debug, Clone, Copy)]
pub struct CentroidRegressor {
    pub patch: usize,
}

/// Centroid of squared gradient magnitude relative to the patch center, in
/// patch pixels; `None` for a flat patch. Squaring keeps sensor noise from
/// pulling the centroid toward the center.
pub fn gradient_centroid(patch: &Patch) -> Option<(f64, f64)> {
    let (gx, gy) = gradients2d(&patch.data, patch.width, patch.height);
    let (mut m, mut su, mut sv) = (0.0, 0.0, 0.0);
    for y in 0..patch.height {
        for x in 0..patch.width {
            let i = y * patch.width + x;
            let g = f64::from(gx[i] * gx[i] + gy[i] * gy[i]);
            m += g;
            su += g * x as f64;
            sv += g * y as f64;
        }
    }
    if m <= 0.0 {
        return None;
    }
    let c = |n: usize| (n as f64 - 1.0) / 2.0;
    Some((su / m - c(patch.width), sv / m - c(patch.height)))
}

impl ShiftRegressor for CentroidRegressor {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn predict(&self, q: &ShiftQuery<'_>) -> Result<Shift> {
        Ok(gradient_centroid(q.patch).map_or(Shift::default(), |(du, dv)| Shift { du, dv }))
    }
}

/// Always predicts no shift.
#[derive(Debug, Clone, Copy)]
pub struct ZeroRegressor {
    pub patch: usize,
}

impl ShiftRegressor for ZeroRegressor {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn predict(&self, _: &ShiftQuery<'_>) -> Result<Shift> {
        Ok(Shift::default())
    }
}

/// Knows the true centers and returns the exact residual.
#[derive(Debug, Clone)]
pub struct OracleRegressor {
    pub patch: usize,
    pub centers: Vec<(f64, f64)>,
}

impl ShiftRegressor for OracleRegressor {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn predict(&self, q: &ShiftQuery<'_>) -> Result<Shift> {
        let (u, v) = *self
            .centers
            .get(q.frame_index)
            .ok_or_else(|| Error::Missing(format!("no ground truth for frame {}", q.frame_index)))?;
        Ok(Shift {
            du: u - q.center_u,
            dv: v - q.center_v,
        })
    }
}

/// Runs the iterative refinement over a sequence. The first frame starts
/// at `init`; each later frame starts from the previous frame's refined
/// center. Within a frame, the first `coarse_iters` of `max_iter`
/// iterations use `coarse`, the rest `fine`. Centers are clamped to the
/// frame.
pub fn compensate(
    frames: &[Frame],
    init: &BoundingBox,
    cfg: &CompensationConfig,
    coarse: &dyn ShiftRegressor,
    fine: &dyn ShiftRegressor,
) -> Result<Vec<BoundingBox>> {
    cfg.validate()?;
    let mut u = init.center_u;
    let mut v = init.center_v;
    let mut out = Vec::with_capacity(frames.len());
    for (pos, f) in frames.iter().enumerate() {
        for it in 0..cfg.max_iter {
            let reg = if it < cfg.coarse_iters { coarse } else { fine };
            let patch = crop_at(f, u, v, reg.patch_size());
            let s = reg.predict(&ShiftQuery {
                patch: &patch,
                frame_index: pos,
                center_u: u,
                center_v: v,
            })?;
            if s.du.is_finite() && s.dv.is_finite() {
                u += s.du;
                v += s.dv;
            }
            u = u.clamp(0.0, (f.width - 1) as f64);
            v = v.clamp(0.0, (f.height - 1) as f64);
        }
        out.push(init.recentered(u, v));
    }
    Ok(out)
}

/// A stack of aligned patches for one temporal window.
#[derive(Debug, Clone, PartialEq)]
pub struct Rstv {
    pub volume: Volume,
    pub boxes: Vec<BoundingBox>,
    pub index: VolumeIndex,
}

/// Crops every member frame of `index` at its box, resampled to
/// `patch × patch`.
pub fn build_rstv(frames: &[Frame], boxes: &[BoundingBox], index: VolumeIndex, patch: usize) -> Result<Rstv> {
    if patch == 0 {
        return Err(Error::InvalidConfig("patch size must be positive".into()));
    }
    if index.window == 0 || index.center + 1 < index.window / 2 {
        return Err(Error::InvalidWindow(format!("{index:?} starts before frame 0")));
    }
    let members: Vec<usize> = index.members().collect();
    let last = *members.last().expect("non-empty window");
    if last >= frames.len() {
        return Err(Error::InvalidWindow(format!("window ends at {last}, sequence has {} frames", frames.len())));
    }
    if last >= boxes.len() {
        return Err(Error::Missing(format!("no box for frame {last}")));
    }
    let mut data = Vec::with_capacity(members.len() * patch * patch);
    let mut used = Vec::with_capacity(members.len());
    for &i in &members {
        data.extend(crop_patch(&frames[i], &boxes[i], patch, patch).data);
        used.push(boxes[i]);
    }
    Ok(Rstv {
        volume: Volume::new(members.len(), patch, patch, data)?,
        boxes: used,
        index,
    })
}

/// Variance (summed over both axes) of the per-slice gradient centroids;
/// low values mean the subject stays put inside the volume.
pub fn centroid_dispersion(vol: &Volume) -> f64 {
    let cs: Vec<(f64, f64)> = (0..vol.frames)
        .filter_map(|t| {
            gradient_centroid(&Patch {
                width: vol.width,
                height: vol.height,
                data: vol.slice(t).to_vec(),
            })
        })
        .collect();
    if cs.len() < 2 {
        return 0.0;
    }
    let n = cs.len() as f64;
    let (mu, mv) = cs.iter().fold((0.0, 0.0), |a, c| (a.0 + c.0 / n, a.1 + c.1 / n));
    cs.iter().map(|c| (c.0 - mu).powi(2) + (c.1 - mv).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_sequence, jitter_boxes, JitterConfig, SynthConfig};
    use proptest::prelude::*;

    fn seq(frames: usize, seed_: u64) -> crate::manifest::Sequence {
        gen_sequence(&SynthConfig {
            frames,
            seed: seed_,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_range_gives_centered_patches() {
        let s = seq(48, 1);
        let set = make_shift_training_set(&s.frames[..3], &s.boxes().unwrap()[..3], 64, 0.0, 4, 0).unwrap();
        assert_eq!(set.len(), 12);
        for (i, (p, l)) in set.iter().enumerate() {
            assert_eq!(*l, Shift::default());
            let b = s.boxes().unwrap()[i / 4];
            assert_eq!(*p, crop_at(&s.frames[i / 4], b.center_u, b.center_v, 64));
        }
    }

    #[test]
    fn label_convention_round_trips() {
        let s = seq(48, 2);
        let boxes = s.boxes().unwrap();
        let set = make_shift_training_set(&s.frames[..1], &boxes[..1], 64, 8.0, 20, 3).unwrap();
        let b = boxes[0];
        for (p, l) in &set {
            let (cu, cv) = (b.center_u - l.du, b.center_v - l.dv);
            assert_eq!(*p, crop_at(&s.frames[0], cu, cv, 64));
            assert!(((cu + l.du) - b.center_u).abs() < 1e-12);
            assert!(((cv + l.dv) - b.center_v).abs() < 1e-12);
        }
        // a subject 5 px right of the patch center is labelled +5
        let f = &s.frames[0];
        let p = crop_at(f, b.center_u - 5.0, b.center_v, 64);
        let (du, _) = gradient_centroid(&p).unwrap();
        let (du0, _) = gradient_centroid(&crop_at(f, b.center_u, b.center_v, 64)).unwrap();
        assert!((du - du0 - 5.0).abs() < 0.75, "{du} vs {du0}");
    }

    #[test]
    fn labels_are_uniform() {
        let s = seq(48, 3);
        let set = make_shift_training_set(&s.frames[..1], &s.boxes().unwrap()[..1], 8, 16.0, 10_000, 4).unwrap();
        let mut u: Vec<f64> = set.iter().map(|(_, l)| (l.du + 16.0) / 32.0).collect();
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max);
        // 1% critical value of the one-sample KS statistic
        assert!(d < 1.63 / n.sqrt(), "{d}");
    }

    #[test]
    fn missing_boxes_rejected() {
        let s = seq(48, 4);
        assert!(make_shift_training_set(&s.frames, &[], 64, 4.0, 1, 0).is_err());
    }

    fn oracle_for(s: &crate::manifest::Sequence) -> OracleRegressor {
        OracleRegressor {
            patch: 64,
            centers: s.boxes().unwrap().iter().map(|b| (b.center_u, b.center_v)).collect(),
        }
    }

    #[test]
    fn oracle_converges_in_one_iteration() {
        let s = seq(48, 5);
        let oracle = oracle_for(&s);
        let cfg = CompensationConfig {
            max_iter: 1,
            coarse_iters: 1,
            ..Default::default()
        };
        let init = s.boxes().unwrap()[0].shifted(9.0, -7.0);
        let out = compensate(&s.frames, &init, &cfg, &oracle, &oracle).unwrap();
        for (a, b) in out.iter().zip(s.boxes().unwrap()) {
            assert!((a.center_u - b.center_u).abs() < 1e-9 && (a.center_v - b.center_v).abs() < 1e-9);
            let p = crop_at(&s.frames[0], a.center_u, a.center_v, 64);
            let again = oracle
                .predict(&ShiftQuery {
                    patch: &p,
                    frame_index: s.boxes().unwrap().iter().position(|x| x == b).unwrap(),
                    center_u: a.center_u,
                    center_v: a.center_v,
                })
                .unwrap();
            assert!(again.norm() < 1e-9);
        }
    }

    #[test]
    fn zero_regressor_propagates_init() {
        let s = seq(48, 6);
        let init = BoundingBox::new(70.0, 50.0, 64, 64).unwrap();
        let z = ZeroRegressor { patch: 64 };
        let out = compensate(&s.frames, &init, &CompensationConfig::default(), &z, &z).unwrap();
        assert!(out.iter().all(|b| *b == init));
    }

    #[test]
    fn divergent_shifts_are_clamped() {
        struct Wild;
        impl ShiftRegressor for Wild {
            fn patch_size(&self) -> usize {
                16
            }
            fn predict(&self, _: &ShiftQuery<'_>) -> Result<Shift> {
                Ok(Shift { du: 1e9, dv: -1e9 })
            }
        }
        let s = seq(48, 7);
        let init = BoundingBox::new(70.0, 50.0, 64, 64).unwrap();
        let out = compensate(&s.frames[..3], &init, &CompensationConfig::default(), &Wild, &Wild).unwrap();
        for b in out {
            assert_eq!((b.center_u, b.center_v), ((s.frames[0].width - 1) as f64, 0.0));
        }
    }

    #[test]
    fn build_rstv_stacks_crops() {
        let s = seq(48, 8);
        let idx = VolumeIndex { center: 11, window: 24 };
        let r = build_rstv(&s.frames, s.boxes().unwrap(), idx, 64).unwrap();
        assert_eq!((r.volume.frames, r.volume.height, r.volume.width), (24, 64, 64));
        assert_eq!(r.boxes.len(), 24);
        for (t, i) in idx.members().enumerate() {
            let b = s.boxes().unwrap()[i];
            assert_eq!(r.volume.slice(t), &crop_patch(&s.frames[i], &b, 64, 64).data[..]);
            let (du, dv) = gradient_centroid(&crop_patch(&s.frames[i], &b, 64, 64)).unwrap();
            assert!(du.hypot(dv) < 3.0, "frame {i}: ({du:.2}, {dv:.2})");
        }
        assert!(build_rstv(&s.frames, s.boxes().unwrap(), VolumeIndex { center: 40, window: 24 }, 64).is_err());
        assert!(build_rstv(&s.frames, &s.boxes().unwrap()[..20], idx, 64).is_err());

        let same = vec![s.frames[0].clone(); 24];
        let boxes = vec![s.boxes().unwrap()[0]; 24];
        let r = build_rstv(&same, &boxes, idx, 32).unwrap();
        assert!((1..24).all(|t| r.volume.slice(t) == r.volume.slice(0)));
    }

    #[test]
    fn oracle_compensation_reduces_dispersion() {
        let s = seq(60, 9);
        let gt = s.boxes().unwrap();
        let (jittered, _) = jitter_boxes(gt, &JitterConfig::uniform(8.0, 1)).unwrap();
        let oracle = oracle_for(&s);
        let comp = compensate(&s.frames, &jittered[0], &CompensationConfig::default(), &oracle, &oracle).unwrap();
        let idx = VolumeIndex { center: 30, window: 24 };
        let stv = build_rstv(&s.frames, &jittered, idx, 64).unwrap();
        let rstv = build_rstv(&s.frames, &comp, idx, 64).unwrap();
        assert!(centroid_dispersion(&rstv.volume) < centroid_dispersion(&stv.volume));
    }

    #[test]
    fn network_input_views() {
        let p = Patch {
            width: 4,
            height: 4,
            data: (0..16).map(|v| v as f32).collect(),
        };
        let c = network_input(&p, ShiftKind::Coarse, 2).unwrap();
        // block means 2.5, 4.5, 10.5, 12.5 minus their mean 7.5
        assert_eq!(c, vec![-5.0, -3.0, 3.0, 5.0]);
        let f = network_input(&p, ShiftKind::Fine, 2).unwrap();
        assert_eq!(f, vec![-2.5, -1.5, 1.5, 2.5]);
        assert!(network_input(&p, ShiftKind::Fine, 3).is_err());
    }

    #[test]
    fn shift_net_shapes_and_io() {
        let cfg = CompensationConfig {
            train: ShiftTrainConfig {
                samples_per_frame: 2,
                epochs: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let s = seq(48, 10);
        let set = make_shift_training_set(&s.frames[..4], &s.boxes().unwrap()[..4], 64, 4.0, 2, 0).unwrap();
        let a = train_shift_regressor(&set, ShiftKind::Fine, &cfg, 1).unwrap();
        let b = train_shift_regressor(&set, ShiftKind::Fine, &cfg, 1).unwrap();
        assert_eq!(a.net.params, b.net.params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fine.nnet");
        a.save(&path).unwrap();
        let back = CnnShiftRegressor::load(&path).unwrap();
        assert_eq!(back.meta, a.meta);
        let q = ShiftQuery {
            patch: &set[0].0,
            frame_index: 0,
            center_u: 0.0,
            center_v: 0.0,
        };
        assert_eq!(back.predict(&q).unwrap(), a.predict(&q).unwrap());
        assert!(train_shift_regressor(&[], ShiftKind::Fine, &cfg, 1).is_err());
        assert!(parse_sidecar(br#"{"kind":"fine","range":4,"patch":64,"net_input":24}"#).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CompensationConfig::default().validate().is_ok());
        let bad = CompensationConfig {
            coarse_iters: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn compensate_is_deterministic(du in -10.0f64..10.0, dv in -10.0f64..10.0) {
            let s = seq(48, 11);
            let init = s.boxes().unwrap()[0].shifted(du, dv);
            let c = CentroidRegressor { patch: 64 };
            let a = compensate(&s.frames[..5], &init, &CompensationConfig::default(), &c, &c).unwrap();
            let b = compensate(&s.frames[..5], &init, &CompensationConfig::default(), &c, &c).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
