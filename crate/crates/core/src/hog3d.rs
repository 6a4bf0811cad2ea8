//! Dense multi-scale histograms of oriented spatio-temporal gradients.
//!
//! A `T × h × w` volume is differentiated once; every pyramid level then tiles
//! it into `s × s` spatial cells of `tau` frames and accumulates hard,
//! magnitude-weighted orientation votes. Orientation axes are the face
//! normals of a regular polyhedron folded by sign (10 axes from the
//! icosahedron, 6 from the dodecahedron), rotated so that axis 0 is the
//! x axis.

use serde::{Deserialize, Serialize};

use crate::domain::VolumeIndex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hog3DConfig {
    pub spatial_levels: Vec<usize>,
    pub temporal_cell: usize,
    pub orientation_bins: usize,
    pub epsilon: f64,
}

impl Default for Hog3DConfig {
    fn default() -> Self {
        Self {
            spatial_levels: vec![2, 4, 8],
            temporal_cell: 4,
            orientation_bins: 10,
            epsilon: 1e-6,
        }
    }
}

impl Hog3DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_levels.is_empty() || self.spatial_levels.contains(&0) {
            return Err(Error::InvalidConfig("spatial levels must be positive".into()));
        }
        if self.temporal_cell == 0 {
            return Err(Error::InvalidConfig("temporal cell must be positive".into()));
        }
        if !matches!(self.orientation_bins, 6 | 10) {
            return Err(Error::InvalidConfig(format!(
                "orientation bins must be 6 or 10, got {}",
                self.orientation_bins
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn check_volume(&self, frames: usize, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        if frames % self.temporal_cell != 0 {
            return Err(Error::ShapeMismatch(format!(
                "temporal cell {} does not divide {frames} frames",
                self.temporal_cell
            )));
        }
        for &s in &self.spatial_levels {
            if h % s != 0 || w % s != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "grid {s} does not divide patch {h}x{w}"
                )));
            }
        }
        Ok(())
    }

    pub fn descriptor_len(&self, frames: usize) -> usize {
        let cells: usize = self.spatial_levels.iter().map(|s| s * s).sum();
        cells * (frames / self.temporal_cell) * self.orientation_bins
    }

    pub fn axes(&self) -> Vec<[f64; 3]> {
        orientation_axes(self.orientation_bins)
    }
}

/// Stack of `frames` patches of `height × width`, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {frames}x{height}x{width} volume",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(frames: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(frames * height * width);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(t, y, x));
                }
            }
        }
        Self {
            frames,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.height + y) * self.width + x
    }

    pub fn slice(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub gx: Vec<f32>,
    pub gy: Vec<f32>,
    pub gt: Vec<f32>,
}

/// Central difference along one axis with one-sided differences at the ends.
#[inline]
fn diff(v: &[f32], i: usize, pos: usize, len: usize, stride: usize) -> f32 {
    if pos == 0 {
        v[i + stride] - v[i]
    } else if pos + 1 == len {
        v[i] - v[i - stride]
    } else {
        0.5 * (v[i + stride] - v[i - stride])
    }
}

pub fn gradients3d(vol: &Volume) -> Result<Gradients> {
    if vol.frames < 3 || vol.height < 3 || vol.width < 3 {
        return Err(Error::InvalidInput(format!(
            "volume {}x{}x{} too small for gradients (need 3 per axis)",
            vol.frames, vol.height, vol.width
        )));
    }
    let n = vol.data.len();
    let (mut gx, mut gy, mut gt) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let plane = vol.height * vol.width;
    for t in 0..vol.frames {
        for y in 0..vol.height {
            for x in 0..vol.width {
                let i = vol.idx(t, y, x);
                gx[i] = diff(&vol.data, i, x, vol.width, 1);
                gy[i] = diff(&vol.data, i, y, vol.height, vol.width);
                gt[i] = diff(&vol.data, i, t, vol.frames, plane);
            }
        }
    }
    Ok(Gradients { gx, gy, gt })
}

/// Spatial gradients of a single image, same differencing as [`gradients3d`].
pub fn gradients2d(img: &[f32], width: usize, height: usize) -> (Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0; img.len()];
    let mut gy = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if width > 1 {
                gx[i] = diff(img, i, x, width, 1);
            }
            if height > 1 {
                gy[i] = diff(img, i, y, height, width);
            }
        }
    }
    (gx, gy)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Rotation taking unit vector `a` onto the x axis (Rodrigues).
fn rotation_to_x(a: [f64; 3]) -> [[f64; 3]; 3] {
    let b = [1.0, 0.0, 0.0];
    let k = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let s = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    let c = a[0];
    if s < 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = [k[0] / s, k[1] / s, k[2] / s];
    let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let kk: f64 = (0..3).map(|m| kx[i][m] * kx[m][j]).sum();
            r[i][j] = f64::from(u8::from(i == j)) + s * kx[i][j] + (1.0 - c) * kk;
        }
    }
    r
}

/// Sign-folded polyhedron axes (unit vectors), axis 0 aligned with +x.
pub fn orientation_axes(bins: usize) -> Vec<[f64; 3]> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let ip = 1.0 / phi;
    let raw: Vec<[f64; 3]> = match bins {
        // icosahedron face normals = dodecahedron vertices, one per antipodal pair
        10 => vec![
            [1.0, 1.0, 1.0],
            [1.0, 1.0, -1.0],
            [1.0, -1.0, 1.0],
            [1.0, -1.0, -1.0],
            [0.0, ip, phi],
            [0.0, ip, -phi],
            [ip, phi, 0.0],
            [ip, -phi, 0.0],
            [phi, 0.0, ip],
            [phi, 0.0, -ip],
        ],
        // dodecahedron face normals = icosahedron vertices
        6 => vec![
            [0.0, 1.0, phi],
            [0.0, 1.0, -phi],
            [1.0, phi, 0.0],
            [1.0, -phi, 0.0],
            [phi, 0.0, 1.0],
            [phi, 0.0, -1.0],
        ],
        _ => panic!("unsupported orientation bin count {bins}"),
    };
    let raw: Vec<[f64; 3]> = raw.into_iter().map(normalize).collect();
    let r = rotation_to_x(raw[0]);
    raw.iter()
        .map(|a| {
            let v = [
                r[0][0] * a[0] + r[0][1] * a[1] + r[0][2] * a[2],
                r[1][0] * a[0] + r[1][1] * a[1] + r[1][2] * a[2],
                r[2][0] * a[0] + r[2][1] * a[1] + r[2][2] * a[2],
            ];
            normalize(v)
        })
        .collect()
}

/// Hard-assigns `g` to the axis with the largest |cosine|; ties go to the
/// lowest index. Returns `(bin, |g|)`; the zero vector maps to `(0, 0)`.
#[inline]
pub fn quantize_orientation(g: [f32; 3], axes: &[[f64; 3]]) -> (usize, f64) {
    let (x, y, z) = (f64::from(g[0]), f64::from(g[1]), f64::from(g[2]));
    let mag = (x * x + y * y + z * z).sqrt();
    if mag == 0.0 {
        return (0, 0.0);
    }
    let mut best = 0;
    let mut best_dot = -1.0;
    for (b, a) in axes.iter().enumerate() {
        let d = (a[0] * x + a[1] * y + a[2] * z).abs();
        if d > best_dot {
            best_dot = d;
            best = b;
        }
    }
    (best, mag)
}

/// Cell extent: `[t0, t1) × [y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellBounds {
    pub t: (usize, usize),
    pub y: (usize, usize),
    pub x: (usize, usize),
}

/// Per-voxel orientation bins and magnitudes, computed once per volume and
/// shared by every pyramid level.
pub struct Votes {
    frames: usize,
    height: usize,
    width: usize,
    bin: Vec<u8>,
    mag: Vec<f64>,
}

impl Votes {
    pub fn new(vol: &Volume, grads: &Gradients, axes: &[[f64; 3]]) -> Self {
        let n = vol.data.len();
        let mut bin = Vec::with_capacity(n);
        let mut mag = Vec::with_capacity(n);
        for i in 0..n {
            let (b, m) = quantize_orientation([grads.gx[i], grads.gy[i], grads.gt[i]], axes);
            bin.push(b as u8);
            mag.push(m);
        }
        Self {
            frames: vol.frames,
            height: vol.height,
            width: vol.width,
            bin,
            mag,
        }
    }

    /// Magnitude-weighted hard votes inside one cell, visited in t, y, x order.
    pub fn cell_histogram(&self, cell: CellBounds, bins: usize) -> Result<Vec<f64>> {
        let CellBounds { t, y, x } = cell;
        if t.0 >= t.1 || y.0 >= y.1 || x.0 >= x.1 {
            return Err(Error::InvalidInput("empty cell".into()));
        }
        if t.1 > self.frames || y.1 > self.height || x.1 > self.width {
            return Err(Error::InvalidInput("cell exceeds volume".into()));
        }
        let mut h = vec![0.0; bins];
        for tt in t.0..t.1 {
            for yy in y.0..y.1 {
                let row = (tt * self.height + yy) * self.width;
                for i in row + x.0..row + x.1 {
                    h[self.bin[i] as usize] += self.mag[i];
                }
            }
        }
        Ok(h)
    }
}

pub fn cell_histogram(vol: &Volume, grads: &Gradients, cell: CellBounds, axes: &[[f64; 3]]) -> Result<Vec<f64>> {
    Votes::new(vol, grads, axes).cell_histogram(cell, axes.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f32>,
    pub source: Option<VolumeIndex>,
}

/// Concatenated per-level cell histograms: levels in config order; within a
/// level cells run t-major, then row, then column; bins innermost. Each
/// cell is scaled by `1 / sqrt(|h|^2 + eps^2)`.
pub fn descriptor(vol: &Volume, cfg: &Hog3DConfig) -> Result<Vec<f32>> {
    cfg.check_volume(vol.frames, vol.height, vol.width)?;
    let axes = cfg.axes();
    let grads = gradients3d(vol)?;
    let votes = Votes::new(vol, &grads, &axes);
    let bins = cfg.orientation_bins;
    let tau = cfg.temporal_cell;
    let eps2 = cfg.epsilon * cfg.epsilon;
    let mut out = Vec::with_capacity(cfg.descriptor_len(vol.frames));
    for &s in &cfg.spatial_levels {
        let (ch, cw) = (vol.height / s, vol.width / s);
        for ct in 0..vol.frames / tau {
            for cy in 0..s {
                for cx in 0..s {
                    let cell = CellBounds {
                        t: (ct * tau, (ct + 1) * tau),
                        y: (cy * ch, (cy + 1) * ch),
                        x: (cx * cw, (cx + 1) * cw),
                    };
                    let h = votes.cell_histogram(cell, bins)?;
                    let norm = (h.iter().map(|v| v * v).sum::<f64>() + eps2).sqrt();
                    out.extend(h.iter().map(|v| (v / norm) as f32));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn interior(v: &Volume, g: &[f32], want: f32) {
        for t in 1..v.frames - 1 {
            for y in 1..v.height - 1 {
                for x in 1..v.width - 1 {
                    assert!((g[v.idx(t, y, x)] - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn ramp_gradients() {
        let v = Volume::from_fn(5, 6, 7, |_, _, x| x as f32);
        let g = gradients3d(&v).unwrap();
        assert!(g.gx.iter().all(|&d| d == 1.0));
        assert!(g.gy.iter().chain(&g.gt).all(|&d| d == 0.0));

        let v = Volume::from_fn(5, 6, 7, |t, y, x| 2.0 * x as f32 + 3.0 * y as f32 - t as f32);
        let g = gradients3d(&v).unwrap();
        interior(&v, &g.gx, 2.0);
        interior(&v, &g.gy, 3.0);
        interior(&v, &g.gt, -1.0);

        let c = gradients3d(&Volume::from_fn(4, 4, 4, |_, _, _| 0.7)).unwrap();
        assert!(c.gx.iter().chain(&c.gy).chain(&c.gt).all(|&d| d == 0.0));

        assert!(gradients3d(&Volume::from_fn(2, 4, 4, |_, _, _| 0.0)).is_err());
    }

    #[test]
    fn axes_are_unit_and_start_on_x() {
        for bins in [6, 10] {
            let axes = orientation_axes(bins);
            assert_eq!(axes.len(), bins);
            assert!((axes[0][0] - 1.0).abs() < 1e-12);
            for a in &axes {
                let n = a.iter().map(|v| v * v).sum::<f64>();
                assert!((n - 1.0).abs() < 1e-12);
            }
            // no two axes are the same line
            for i in 0..bins {
                for j in i + 1..bins {
                    let d: f64 = (0..3).map(|k| axes[i][k] * axes[j][k]).sum();
                    assert!(d.abs() < 0.95);
                }
            }
        }
    }

    #[test]
    fn quantize_cases() {
        let axes = orientation_axes(10);
        assert_eq!(quantize_orientation([1.0, 0.0, 0.0], &axes), (0, 1.0));
        assert_eq!(quantize_orientation([-1.0, 0.0, 0.0], &axes), (0, 1.0));
        assert_eq!(quantize_orientation([0.0, 0.0, 0.0], &axes).1, 0.0);
    }

    #[test]
    fn cell_histogram_cases() {
        let axes = orientation_axes(10);
        let cell = CellBounds { t: (0, 4), y: (0, 4), x: (0, 4) };
        let c = Volume::from_fn(4, 4, 4, |_, _, _| 0.3);
        let h = cell_histogram(&c, &gradients3d(&c).unwrap(), cell, &axes).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));

        let r = Volume::from_fn(4, 4, 4, |_, _, x| x as f32);
        let h = cell_histogram(&r, &gradients3d(&r).unwrap(), cell, &axes).unwrap();
        assert_eq!(h[0], 64.0);
        assert!(h[1..].iter().all(|&v| v == 0.0));

        let empty = CellBounds { t: (1, 1), y: (0, 4), x: (0, 4) };
        assert!(cell_histogram(&r, &gradients3d(&r).unwrap(), empty, &axes).is_err());
    }

    #[test]
    fn two_populations_match_manual_count() {
        // x-ramp in the left half, t-ramp in the right half
        let v = Volume::from_fn(4, 4, 4, |t, _, x| if x < 2 { x as f32 } else { 10.0 * t as f32 });
        let axes = orientation_axes(10);
        let g = gradients3d(&v).unwrap();
        let h = cell_histogram(&v, &g, CellBounds { t: (0, 4), y: (0, 4), x: (0, 4) }, &axes).unwrap();
        let mut want = vec![0.0; 10];
        for i in 0..v.data.len() {
            let (b, m) = quantize_orientation([g.gx[i], g.gy[i], g.gt[i]], &axes);
            want[b] += m;
        }
        assert_eq!(h, want);
        assert!(h.iter().filter(|&&x| x > 0.0).count() >= 2);
    }

    #[test]
    fn default_length_is_5040() {
        let cfg = Hog3DConfig::default();
        assert_eq!(cfg.descriptor_len(24), 5040);
        let v = Volume::from_fn(24, 64, 64, |t, y, x| ((x * 3 + y * 5 + t * 7) % 11) as f32 / 11.0);
        let d = descriptor(&v, &cfg).unwrap();
        assert_eq!(d.len(), 5040);
    }

    #[test]
    fn constant_volume_gives_zero_descriptor() {
        let v = Volume::from_fn(8, 16, 16, |_, _, _| 0.5);
        let d = descriptor(&v, &Hog3DConfig::default()).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn periodic_shift_is_invisible() {
        let f = |t: usize, y: usize, x: usize| (((t % 4) * 5 + x * y) % 9) as f32 / 9.0;
        let a = Volume::from_fn(8, 16, 16, f);
        let b = Volume::from_fn(8, 16, 16, |t, y, x| f(t + 4, y, x));
        let cfg = Hog3DConfig::default();
        assert_eq!(descriptor(&a, &cfg).unwrap(), descriptor(&b, &cfg).unwrap());
    }

    #[test]
    fn incompatible_dims() {
        let cfg = Hog3DConfig::default();
        assert!(descriptor(&Volume::from_fn(6, 16, 16, |_, _, _| 0.0), &cfg).is_err());
        assert!(descriptor(&Volume::from_fn(8, 12, 16, |_, _, _| 0.0), &cfg).is_err());
        assert!(Hog3DConfig { orientation_bins: 8, ..cfg }.validate().is_err());
    }

    fn vol_strategy() -> impl Strategy<Value = Volume> {
        proptest::collection::vec(0.0f32..1.0, 4 * 8 * 8)
            .prop_map(|d| Volume::new(4, 8, 8, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cells_are_unit_bounded(v in vol_strategy()) {
            let cfg = Hog3DConfig { spatial_levels: vec![2, 4], ..Default::default() };
            let d = descriptor(&v, &cfg).unwrap();
            for cell in d.chunks(10) {
                let n: f32 = cell.iter().map(|x| x * x).sum::<f32>().sqrt();
                prop_assert!(n <= 1.0 + 1e-5);
                prop_assert!(cell.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn intensity_scale_invariant(v in vol_strategy(), c in 0.1f32..10.0) {
            let cfg = Hog3DConfig { spatial_levels: vec![2, 4], ..Default::default() };
            let scaled = Volume::new(4, 8, 8, v.data.iter().map(|x| x * c).collect()).unwrap();
            let a = descriptor(&v, &cfg).unwrap();
            let b = descriptor(&scaled, &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
            }
        }

        #[test]
        fn bin_ignores_magnitude(g in proptest::array::uniform3(-1.0f32..1.0), c in 0.01f32..100.0) {
            let axes = orientation_axes(10);
            let (b1, _) = quantize_orientation(g, &axes);
            let (b2, _) = quantize_orientation([g[0] * c, g[1] * c, g[2] * c], &axes);
            prop_assume!(g.iter().any(|&x| x != 0.0));
            // near-ties can flip under rounding; compare scores instead
            let score = |b: usize| (axes[b][0] * f64::from(g[0]) + axes[b][1] * f64::from(g[1]) + axes[b][2] * f64::from(g[2])).abs();
            prop_assert!((score(b1) - score(b2)).abs() < 1e-9);
        }
    }
}
