//! Exact χ² / exponential-χ² / RBF kernels and their random-feature maps.
//!
//! The input map approximates `exp(-γ χ²(x, y))` in two stages: a sampled
//! homogeneous χ² feature map `ψ` (for which `‖ψ(x) − ψ(y)‖² ≈ χ²(x, y)`),
//! followed by Gaussian random Fourier features on `ψ(x)`. The output map
//! is plain random Fourier features for `exp(-γ ‖y − y'‖²)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{Error, Result};
use crate::nnet::Scalar;
use crate::seed;

pub const MAGIC: &[u8; 8] = b"RSTVEMBD";

fn check_hist(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("histograms of length {} and {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidInput("histograms must be non-negative".into()));
    }
    Ok(())
}

/// `Σ (x_i − y_i)² / (x_i + y_i)`, skipping bins where both are zero.
pub fn chi2_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    check_hist(x, y)?;
    Ok(x.iter()
        .zip(y)
        .map(|(&a, &b)| if a + b > 0.0 { (a - b) * (a - b) / (a + b) } else { 0.0 })
        .sum())
}

pub fn exp_chi2_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidInput("gamma must be positive".into()));
    }
    Ok((-gamma * chi2_distance(x, y)?).exp())
}

pub fn l1_normalize(x: &[f64]) -> Vec<f64> {
    let s: f64 = x.iter().sum();
    if s > 0.0 {
        x.iter().map(|v| v / s).collect()
    } else {
        x.to_vec()
    }
}

/// Median of pairwise values over up to `pairs` random index pairs.
fn median_over_pairs(n: usize, pairs: usize, seed: u64, dist: impl Fn(usize, usize) -> f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidInput("bandwidth needs at least two samples".into()));
    }
    let mut rng = seed::rng_for(seed, "median-pairs");
    let idx: Vec<usize> = (0..n).collect();
    let mut d: Vec<f64> = (0..pairs)
        .map(|_| {
            let i = *idx.choose(&mut rng).expect("non-empty");
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            dist(i, j)
        })
        .filter(|v| *v > 0.0)
        .collect();
    if d.is_empty() {
        return Err(Error::Numerical("all sampled distances are zero".into()));
    }
    d.sort_by(f64::total_cmp);
    Ok(d[d.len() / 2])
}

/// `1 / median χ²` over L1-normalized rows.
pub fn median_chi2_gamma(rows: &[Vec<f64>], seed: u64) -> Result<f64> {
    let norm: Vec<Vec<f64>> = rows.iter().map(|r| l1_normalize(r)).collect();
    let m = median_over_pairs(norm.len(), 1000, seed, |i, j| chi2_distance(&norm[i], &norm[j]).unwrap_or(0.0))?;
    Ok(1.0 / m)
}

/// `1 / median ‖y − y'‖²`.
pub fn median_rbf_gamma(rows: &[Vec<f64>], seed: u64) -> Result<f64> {
    let m = median_over_pairs(rows.len(), 1000, seed, |i, j| {
        rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum()
    })?;
    Ok(1.0 / m)
}

fn sech(x: f64) -> f64 {
    1.0 / x.cosh()
}

/// Gaussian frequencies with variance `2γ` (so `E cos(ωᵀd) = exp(-γ‖d‖²)`)
/// and uniform phases.
fn sample_rff(dim: usize, in_dim: usize, gamma: f64, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = seed::rng_for(seed, "rff");
    let sd = (2.0 * gamma).sqrt();
    let freqs = (0..dim * in_dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            (sd * g) as f32
        })
        .collect();
    let u = Uniform::new(0.0, 2.0 * PI).expect("valid range");
    let phases = (0..dim).map(|_| u.sample(&mut rng) as f32).collect();
    (freqs, phases)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    ExpChi2 {
        in_dim: usize,
        dim: usize,
        order: usize,
        period: f64,
        gamma: f64,
        seed: u64,
    },
    Rbf {
        in_dim: usize,
        dim: usize,
        gamma: f64,
        seed: u64,
    },
}

/// Random features for the exponential-χ² kernel on L1-normalized
/// histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpChi2Embedding {
    pub in_dim: usize,
    pub dim: usize,
    pub order: usize,
    pub period: f64,
    pub gamma: f64,
    pub seed: u64,
    /// `dim × psi_dim`, row-major.
    freqs: Vec<f32>,
    phases: Vec<f32>,
}

impl ExpChi2Embedding {
    pub fn new(in_dim: usize, dim: usize, gamma: f64, seed: u64) -> Result<Self> {
        Self::with_map(in_dim, dim, 2, 0.6, gamma, seed)
    }

    pub fn with_map(in_dim: usize, dim: usize, order: usize, period: f64, gamma: f64, seed: u64) -> Result<Self> {
        if in_dim == 0 || dim == 0 {
            return Err(Error::InvalidConfig("embedding dims must be positive".into()));
        }
        if !(gamma > 0.0 && gamma.is_finite() && period > 0.0) {
            return Err(Error::InvalidConfig("gamma and period must be positive".into()));
        }
        let psi = in_dim * (2 * order + 1);
        let (freqs, phases) = sample_rff(dim, psi, gamma, seed);
        Ok(Self {
            in_dim,
            dim,
            order,
            period,
            gamma,
            seed,
            freqs,
            phases,
        })
    }

    pub fn psi_dim(&self) -> usize {
        self.in_dim * (2 * self.order + 1)
    }

    /// Homogeneous χ² feature map of an (already normalized) histogram.
    pub fn homogeneous_map(&self, x: &[f64]) -> Vec<f64> {
        let reps = 2 * self.order + 1;
        let l = self.period;
        let mut out = vec![0.0; x.len() * reps];
        for (i, &v) in x.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            let o = &mut out[i * reps..(i + 1) * reps];
            let lx = v.ln();
            o[0] = (v * l).sqrt();
            for j in 1..=self.order {
                let a = (2.0 * v * l * sech(PI * j as f64 * l)).sqrt();
                let (s, c) = (j as f64 * l * lx).sin_cos();
                o[2 * j - 1] = a * c;
                o[2 * j] = a * s;
            }
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(Error::ShapeMismatch(format!("expected {} inputs, got {}", self.in_dim, x.len())));
        }
        if x.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidInput("embedding input must be non-negative".into()));
        }
        Ok(())
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f32>> {
        Ok(self.embed_batch(&[x.to_vec()])?.pop().expect("one row"))
    }

    /// Embeds many histograms; rows are L1-normalized first.
    pub fn embed_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f32>>> {
        for r in rows {
            self.check_input(r)?;
        }
        let p = self.psi_dim();
        let scale = (2.0 / self.dim as f64).sqrt() as f32;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(128) {
            let mut psi = Vec::with_capacity(chunk.len() * p);
            for r in chunk {
                psi.extend(self.homogeneous_map(&l1_normalize(r)).into_iter().map(|v| v as f32));
            }
            let mut z = vec![0.0f32; chunk.len() * self.dim];
            for row in z.chunks_mut(self.dim) {
                row.copy_from_slice(&self.phases);
            }
            f32::gemm(chunk.len(), p, self.dim, &psi, false, &self.freqs, true, 1.0, &mut z);
            for row in z.chunks(self.dim) {
                out.push(row.iter().map(|&v| scale * v.cos()).collect());
            }
        }
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let h = Header::ExpChi2 {
            in_dim: self.in_dim,
            dim: self.dim,
            order: self.order,
            period: self.period,
            gamma: self.gamma,
            seed: self.seed,
        };
        let mut payload = self.freqs.clone();
        payload.extend_from_slice(&self.phases);
        binfmt::encode(MAGIC, &h, &payload)
    }
}

/// Random Fourier features for `exp(-γ ‖y − y'‖²)` on flattened poses.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfEmbedding {
    pub in_dim: usize,
    pub dim: usize,
    pub gamma: f64,
    pub seed: u64,
    /// `dim × in_dim`, row-major.
    freqs: Vec<f64>,
    phases: Vec<f64>,
}

impl RbfEmbedding {
    pub fn new(in_dim: usize, dim: usize, gamma: f64, seed: u64) -> Result<Self> {
        if in_dim == 0 || dim == 0 {
            return Err(Error::InvalidConfig("embedding dims must be positive".into()));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig("gamma must be positive".into()));
        }
        let (f, p) = sample_rff(dim, in_dim, gamma, seed);
        Ok(Self {
            in_dim,
            dim,
            gamma,
            seed,
            freqs: f.into_iter().map(f64::from).collect(),
            phases: p.into_iter().map(f64::from).collect(),
        })
    }

    fn scale(&self) -> f64 {
        (2.0 / self.dim as f64).sqrt()
    }

    fn args(&self, y: &[f64]) -> Vec<f64> {
        self.freqs
            .chunks(self.in_dim)
            .zip(&self.phases)
            .map(|(w, b)| w.iter().zip(y).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect()
    }

    pub fn embed(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.in_dim {
            return Err(Error::ShapeMismatch(format!("expected {} outputs, got {}", self.in_dim, y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("pose has non-finite values".into()));
        }
        let s = self.scale();
        Ok(self.args(y).into_iter().map(|a| s * a.cos()).collect())
    }

    /// `J(y)ᵀ v` where `J` is the Jacobian of [`Self::embed`] at `y`.
    pub fn vjp(&self, y: &[f64], v: &[f64]) -> Vec<f64> {
        let s = self.scale();
        let mut out = vec![0.0; self.in_dim];
        for ((w, a), vk) in self.freqs.chunks(self.in_dim).zip(self.args(y)).zip(v) {
            let c = -s * a.sin() * vk;
            for (o, wi) in out.iter_mut().zip(w) {
                *o += c * wi;
            }
        }
        out
    }

    /// Row `k` of the frequency matrix.
    pub fn frequency(&self, k: usize) -> &[f64] {
        &self.freqs[k * self.in_dim..(k + 1) * self.in_dim]
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let h = Header::Rbf {
            in_dim: self.in_dim,
            dim: self.dim,
            gamma: self.gamma,
            seed: self.seed,
        };
        let payload: Vec<f32> = self.freqs.iter().chain(&self.phases).map(|&v| v as f32).collect();
        binfmt::encode(MAGIC, &h, &payload)
    }
}

/// Either embedding, as stored in an `RSTVEMBD` file.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    ExpChi2(ExpChi2Embedding),
    Rbf(RbfEmbedding),
}

impl Embedding {
    pub fn encode(&self) -> Result<Vec<u8>> {
        match self {
            Embedding::ExpChi2(e) => e.encode(),
            Embedding::Rbf(e) => e.encode(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = binfmt::decode::<Header>("embedding file", MAGIC, bytes)?;
        let bad = |r: &str| Error::format("embedding file", r);
        match c.header {
            Header::ExpChi2 { in_dim, dim, order, period, gamma, seed } => {
                let psi = in_dim
                    .checked_mul(2usize.saturating_mul(order).saturating_add(1))
                    .and_then(|p| p.checked_mul(dim))
                    .ok_or_else(|| bad("dimensions overflow"))?;
                let parts = binfmt::split("embedding file", &c.payload, &[psi, dim])?;
                if in_dim == 0 || dim == 0 || !(gamma > 0.0 && period > 0.0) {
                    return Err(bad("invalid parameters"));
                }
                Ok(Embedding::ExpChi2(ExpChi2Embedding {
                    in_dim,
                    dim,
                    order,
                    period,
                    gamma,
                    seed,
                    freqs: parts[0].to_vec(),
                    phases: parts[1].to_vec(),
                }))
            }
            Header::Rbf { in_dim, dim, gamma, seed } => {
                let n = in_dim.checked_mul(dim).ok_or_else(|| bad("dimensions overflow"))?;
                let parts = binfmt::split("embedding file", &c.payload, &[n, dim])?;
                if in_dim == 0 || dim == 0 || !(gamma > 0.0) {
                    return Err(bad("invalid parameters"));
                }
                Ok(Embedding::Rbf(RbfEmbedding {
                    in_dim,
                    dim,
                    gamma,
                    seed,
                    freqs: parts[0].iter().map(|&v| f64::from(v)).collect(),
                    phases: parts[1].iter().map(|&v| f64::from(v)).collect(),
                }))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&binfmt::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_hist(rng: &mut seed::Rng, n: usize) -> Vec<f64> {
        l1_normalize(&(0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>())
    }

    fn dot<A: Copy + Into<f64>>(a: &[A], b: &[A]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
    }

    #[test]
    fn chi2_examples() {
        assert_eq!(chi2_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(chi2_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(chi2_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(chi2_distance(&[1.0], &[1.0, 2.0]).is_err());
        assert!(chi2_distance(&[-1.0], &[1.0]).is_err());
    }

    #[test]
    fn exp_chi2_examples() {
        assert_eq!(exp_chi2_kernel(&[0.3, 0.7], &[0.3, 0.7], 2.0).unwrap(), 1.0);
        let k = exp_chi2_kernel(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-12);
        assert!(exp_chi2_kernel(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn homogeneous_map_approximates_chi2() {
        // per-bin: ψ(x)·ψ(y) ≈ 2xy/(x+y), tight near x = y and bounded by
        // the truncation error of the sampled spectrum for large ratios
        let e = ExpChi2Embedding::new(1, 4, 1.0, 0).unwrap();
        for i in -60..=60 {
            let lambda = i as f64 / 10.0;
            let (x, y) = (0.3, 0.3 * lambda.exp());
            let (px, py) = (e.homogeneous_map(&[x]), e.homogeneous_map(&[y]));
            let approx: f64 = px.iter().zip(&py).map(|(a, b)| a * b).sum();
            let exact = 2.0 * x * y / (x + y);
            let tol = if lambda.abs() <= 1.0 { 0.03 } else { 0.25 };
            assert!((approx - exact).abs() <= tol * (x * y).sqrt(), "λ={lambda}: {approx} vs {exact}");
        }
        // ‖ψ(x) − ψ(y)‖² tracks χ² on histograms
        let e = ExpChi2Embedding::new(16, 4, 1.0, 0).unwrap();
        let mut rng = seed::rng(1);
        for _ in 0..50 {
            let x = random_hist(&mut rng, 16);
            let y = random_hist(&mut rng, 16);
            let (px, py) = (e.homogeneous_map(&x), e.homogeneous_map(&y));
            let d: f64 = px.iter().zip(&py).map(|(a, b)| (a - b) * (a - b)).sum();
            let exact = chi2_distance(&x, &y).unwrap();
            assert!((d - exact).abs() < 0.1 * exact, "{d} vs {exact}");
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let a = ExpChi2Embedding::new(8, 50, 1.0, 3).unwrap();
        let b = ExpChi2Embedding::new(8, 50, 1.0, 3).unwrap();
        let x = [0.1, 0.2, 0.0, 0.3, 0.1, 0.1, 0.1, 0.1];
        assert_eq!(a.embed(&x).unwrap(), b.embed(&x).unwrap());
        assert!(a.embed(&[-0.1; 8]).is_err());
        assert!(a.embed(&[0.1; 7]).is_err());
    }

    #[test]
    fn rbf_self_product_near_one() {
        let e = RbfEmbedding::new(51, 4000, 1e-5, 5).unwrap();
        let mut rng = seed::rng(6);
        for _ in 0..20 {
            let y: Vec<f64> = (0..51).map(|_| rng.random_range(-500.0..500.0)).collect();
            let z = e.embed(&y).unwrap();
            assert!((dot(&z, &z) - 1.0).abs() <= 0.04);
        }
    }

    #[test]
    fn rbf_jacobian_matches_finite_differences() {
        let e = RbfEmbedding::new(6, 40, 0.3, 8).unwrap();
        let mut rng = seed::rng(9);
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let an = e.vjp(&y, &v);
        let h = 1e-6;
        for i in 0..6 {
            let mut a = y.clone();
            let mut b = y.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (dot(&e.embed(&a).unwrap(), &v) - dot(&e.embed(&b).unwrap(), &v)) / (2.0 * h);
            assert!((fd - an[i]).abs() < 1e-5, "{fd} vs {}", an[i]);
        }
        // Jacobian rows are bounded by √(2/m)·‖ω_k‖
        let s = (2.0 / 40.0f64).sqrt();
        for k in 0..40 {
            let mut unit = vec![0.0; 40];
            unit[k] = 1.0;
            let row = e.vjp(&y, &unit);
            let bound = s * dot(e.frequency(k), e.frequency(k)).sqrt();
            assert!(dot(&row, &row).sqrt() <= bound + 1e-12);
        }
    }

    #[test]
    fn rff_average_is_unbiased() {
        let mut rng = seed::rng(11);
        let x = random_hist(&mut rng, 10);
        let y = random_hist(&mut rng, 10);
        let gamma = 1.0 / chi2_distance(&x, &y).unwrap();
        let exact = exp_chi2_kernel(&x, &y, gamma).unwrap();
        let est: Vec<f64> = (0..20)
            .map(|s| {
                let e = ExpChi2Embedding::new(10, 500, gamma, 100 + s).unwrap();
                let z = e.embed_batch(&[x.clone(), y.clone()]).unwrap();
                dot(&z[0], &z[1])
            })
            .collect();
        let mean = est.iter().sum::<f64>() / 20.0;
        let var = est.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 19.0;
        let se = (var / 20.0).sqrt();
        // the homogeneous map adds a small deterministic bias on top of the RFF noise
        assert!((mean - exact).abs() <= 3.0 * se + 0.01, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn median_bandwidths() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]];
        let g = median_rbf_gamma(&rows, 0).unwrap();
        assert!([1.0, 0.25, 0.2].iter().any(|v| (g - v).abs() < 1e-12));
        assert!(median_rbf_gamma(&rows[..1], 0).is_err());
        let h = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((median_chi2_gamma(&h, 0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn file_round_trip() {
        let e = Embedding::ExpChi2(ExpChi2Embedding::new(4, 8, 0.7, 1).unwrap());
        let back = Embedding::decode(&e.encode().unwrap()).unwrap();
        assert_eq!(back, e);
        let r = Embedding::Rbf(RbfEmbedding::new(3, 5, 0.5, 2).unwrap());
        let back = Embedding::decode(&r.encode().unwrap()).unwrap();
        assert_eq!(back.encode().unwrap(), r.encode().unwrap());
        let bytes = r.encode().unwrap();
        assert!(Embedding::decode(&bytes[..bytes.len() - 4]).is_err());
    }

    proptest! {
        #[test]
        fn chi2_symmetric_and_kernel_monotone(
            x in proptest::collection::vec(0.0f64..1.0, 8),
            y in proptest::collection::vec(0.0f64..1.0, 8),
            z in proptest::collection::vec(0.0f64..1.0, 8),
        ) {
            let dxy = chi2_distance(&x, &y).unwrap();
            prop_assert!((dxy - chi2_distance(&y, &x).unwrap()).abs() < 1e-12);
            let dxz = chi2_distance(&x, &z).unwrap();
            let (kxy, kxz) = (exp_chi2_kernel(&x, &y, 0.7).unwrap(), exp_chi2_kernel(&x, &z, 0.7).unwrap());
            prop_assert!(kxy > 0.0 && kxy <= 1.0);
            if dxy < dxz { prop_assert!(kxy >= kxz); }
        }
    }
}
