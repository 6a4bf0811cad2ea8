//! Embedded invariant suite behind `rstv selftest`: small, fast versions of
//! the library's correctness checks plus a miniature end-to-end run. Every
//! check is seeded, so the JSON report is byte-identical across runs.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::Serialize;

use crate::domain::{BoundingBox, Pose3D, SkeletonSpec};
use crate::error::Result;
use crate::eval::{evaluate, mpjpe, pcp};
use crate::hog3d::{cell_histogram, gradients3d, orientation_axes, quantize_orientation, CellBounds, Hog3DConfig, Volume};
use crate::kernels::{exp_chi2_kernel, ExpChi2Embedding, RbfEmbedding};
use crate::motioncomp::{compensate, CompensationConfig, OracleRegressor};
use crate::nnet::{LayerSpec, Network};
use crate::pipeline::{train_on_sequence, Alignment, PipelineConfig};
use crate::regress::{preimage_gradient, preimage_objective, ridge_solve, ModelKind, OutputMap, PoseRegressor};
use crate::seed;
use crate::synth::{gen_sequence, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl SelftestReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn at_most(name: &'static str, value: f64, bound: f64) -> Check {
    Check {
        name,
        value,
        bound,
        passed: value <= bound,
    }
}

fn histogram(rng: &mut seed::Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn kernel_error(seed_: u64) -> Result<f64> {
    let mut rng = seed::rng_for(seed_, "selftest-chi2");
    let d = 32;
    let hs: Vec<Vec<f64>> = (0..100).map(|_| histogram(&mut rng, d)).collect();
    let gamma = 1.0;
    let e = ExpChi2Embedding::new(d, 2000, gamma, seed_)?;
    let z = e.embed_batch(&hs)?;
    let mut worst: f64 = 0.0;
    for i in 0..hs.len() {
        let j = (i + 1) % hs.len();
        let dot: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
        worst = worst.max((dot - exp_chi2_kernel(&hs[i], &hs[j], gamma)?).abs());
    }
    Ok(worst)
}

fn rbf_error(seed_: u64) -> Result<f64> {
    let mut rng = seed::rng_for(seed_, "selftest-rbf");
    let e = RbfEmbedding::new(6, 4000, 0.5, seed_)?;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = (-0.5 * x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).exp();
        let dot: f64 = e.embed(&x)?.iter().zip(&e.embed(&y)?).map(|(a, b)| a * b).sum();
        worst = worst.max((dot - exact).abs());
    }
    Ok(worst)
}

/// Closed-form ridge against plain gradient descent on the primal objective.
fn ridge_gap(seed_: u64) -> Result<f64> {
    let mut rng = seed::rng_for(seed_, "selftest-ridge");
    let (n, m, k, lambda) = (30, 10, 3, 0.5);
    let phi = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let y = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
    let closed = ridge_solve(&phi, &y, lambda)?;
    let h = phi.transpose() * &phi + DMatrix::identity(m, m) * lambda;
    let step = 1.0 / h.symmetric_eigenvalues().max();
    let b = phi.transpose() * &y;
    let mut w = DMatrix::zeros(m, k);
    for _ in 0..20_000 {
        w -= (&h * &w - &b) * step;
    }
    Ok((w - closed).abs().max())
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

fn nnet_grad_error(seed_: u64) -> Result<f64> {
    let layers = vec![
        LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::Maxpool2d { kernel: 2 },
        LayerSpec::Dense { input: 8, output: 3 },
    ];
    let net = Network::<f64>::new(vec![1, 6, 6], layers, seed_)?;
    let mut rng = seed::rng_for(seed_, "selftest-nnet");
    let x: Vec<f64> = (0..2 * 36).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t: Vec<f64> = (0..2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, grads) = net.clone().loss_and_grads(&x, &t, false)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for li in 0..net.params.len() {
        for k in 0..net.params[li].w.len() {
            let eval = |d: f64| -> Result<f64> {
                let mut n2 = net.clone();
                n2.params[li].w[k] += d;
                Ok(n2.loss_and_grads(&x, &t, false)?.0)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            worst = worst.max(relative(fd, grads[li].w[k]));
        }
    }
    Ok(worst)
}

fn preimage_grad_error(seed_: u64) -> Result<f64> {
    let out = OutputMap::Rbf(RbfEmbedding::new(6, 300, 0.3, seed_)?);
    let mut rng = seed::rng_for(seed_, "selftest-preimage");
    let target = out.embed(&(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())?;
    let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = preimage_gradient(&out, &target, &y)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, gk) in g.iter().enumerate() {
        let mut p = y.clone();
        let mut m = y.clone();
        p[k] += h;
        m[k] -= h;
        let fd = (preimage_objective(&out, &target, &p)? - preimage_objective(&out, &target, &m)?) / (2.0 * h);
        worst = worst.max(relative(fd, *gk));
    }
    Ok(worst)
}

/// Largest difference between cell histograms and a per-voxel loop.
fn hog_gap(seed_: u64) -> Result<f64> {
    let mut rng = seed::rng_for(seed_, "selftest-hog");
    let data: Vec<f32> = (0..512).map(|_| rng.random::<f32>()).collect();
    let vol = Volume::new(8, 8, 8, data)?;
    let g = gradients3d(&vol)?;
    let axes = orientation_axes(10);
    let cell = CellBounds {
        t: (0, 4),
        y: (2, 6),
        x: (4, 8),
    };
    let fast = cell_histogram(&vol, &g, cell, &axes)?;
    let mut slow = vec![0.0; 10];
    for t in cell.t.0..cell.t.1 {
        for y in cell.y.0..cell.y.1 {
            for x in cell.x.0..cell.x.1 {
                let i = vol.idx(t, y, x);
                let (bin, mag) = quantize_orientation([g.gx[i], g.gy[i], g.gt[i]], &axes);
                slow[bin] += mag;
            }
        }
    }
    Ok(fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn oracle_error(seed_: u64) -> Result<f64> {
    let s = gen_sequence(&SynthConfig {
        frames: 48,
        seed: seed_,
        ..Default::default()
    })?;
    let gt = s.boxes()?;
    let oracle = OracleRegressor {
        patch: 64,
        centers: gt.iter().map(|b| (b.center_u, b.center_v)).collect(),
    };
    let cfg = CompensationConfig {
        max_iter: 1,
        coarse_iters: 1,
        ..Default::default()
    };
    let start = BoundingBox::new(gt[0].center_u + 9.0, gt[0].center_v - 7.0, 64, 64)?;
    let out = compensate(&s.frames, &start, &cfg, &oracle, &oracle)?;
    Ok(out
        .iter()
        .zip(gt)
        .map(|(a, b)| (a.center_u - b.center_u).hypot(a.center_v - b.center_v))
        .fold(0.0, f64::max))
}

fn metric_gap() -> Result<f64> {
    let a = Pose3D::new(vec![[1.0, 1.0, 1.0], [0.0; 3]])?;
    let b = Pose3D::new(vec![[4.0, 1.0, 5.0], [3.0, 0.0, 4.0]])?;
    let sk = SkeletonSpec::new(vec!["a".into(), "b".into()], vec![0, 0], vec![(0, 1)])?;
    let gt = Pose3D::new(vec![[0.0; 3], [2.0, 0.0, 0.0]])?;
    let edge = Pose3D::new(vec![[0.0; 3], [2.0, 1.0, 0.0]])?;
    let inclusive = pcp(&edge, &gt, &sk, 0.5)?.score;
    Ok((mpjpe(&a, &b)? - 5.0).abs() + (inclusive - 1.0).abs())
}

/// Trains a small KRR model and scores it on a second sequence.
fn mini_pipeline(seed_: u64) -> Result<(f64, f64)> {
    let train = gen_sequence(&SynthConfig {
        frames: 64,
        seed: seed::derive(seed_, "train"),
        ..Default::default()
    })?;
    let test = gen_sequence(&SynthConfig {
        frames: 48,
        seed: seed::derive(seed_, "test"),
        phase: 0.7,
        ..Default::default()
    })?;
    let mut cfg = PipelineConfig::desk().with_seed(seed_);
    cfg.window = 8;
    cfg.kernel.input_dim = 300;
    let model = train_on_sequence(ModelKind::Krr, &train, Alignment::Boxes, &cfg)?;
    let r = evaluate(&model as &dyn PoseRegressor, &test, Alignment::Boxes, &cfg)?;
    Ok((r.mean, r.excluded as f64))
}

pub fn run(seed_: u64) -> Result<SelftestReport> {
    let (mean, excluded) = mini_pipeline(seed_)?;
    let hog_len = Hog3DConfig::default().descriptor_len(24) as f64;
    let checks = vec![
        at_most("exp-chi2 approximation m=2000", kernel_error(seed_)?, 0.10),
        at_most("rbf approximation m=4000", rbf_error(seed_)?, 0.06),
        at_most("ridge closed form vs gradient descent", ridge_gap(seed_)?, 1e-5),
        at_most("nnet gradient vs finite differences", nnet_grad_error(seed_)?, 1e-4),
        at_most("pre-image gradient vs finite differences", preimage_grad_error(seed_)?, 1e-4),
        at_most("hog3d cell histogram vs per-voxel loop", hog_gap(seed_)?, 1e-9),
        at_most("hog3d descriptor length 5040", (hog_len - 5040.0).abs(), 0.0),
        at_most("oracle compensation one iteration (px)", oracle_error(seed_)?, 1e-9),
        at_most("mpjpe 3-4-5 and inclusive pcp", metric_gap()?, 0.0),
        at_most("end-to-end excluded frames (48 - 8 + 1 centers)", (excluded - 7.0).abs(), 0.0),
        at_most("end-to-end krr mpjpe (mm)", mean, 200.0),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(SelftestReport {
        seed: seed_,
        checks,
        passed,
    })
}
