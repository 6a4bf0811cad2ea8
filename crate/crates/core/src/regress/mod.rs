//! Pose regressors: kernel ridge regression on the χ² embedding (KRR),
//! kernel dependency estimation with an RBF output embedding and a
//! gradient-descent pre-image (KDE), and a dense network (DN).

mod dn;
mod io;

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::domain::{root_relativize, Pose3D};
use crate::error::{Error, Result};
use crate::kernels::{median_chi2_gamma, median_rbf_gamma, ExpChi2Embedding, RbfEmbedding};

pub use dn::{dn_fit, DnHyper, DnInput, DnModel};
pub use io::{MAGIC as POSE_MAGIC, MAX_EMBEDDING_ELEMS};

/// Shared by every model: `predict` is a pure function of the model and
/// the descriptor.
pub trait PoseRegressor {
    fn predict(&self, descriptor: &[f32]) -> Result<Pose3D>;

    fn predict_batch(&self, descriptors: &[Vec<f32>]) -> Result<Vec<Pose3D>> {
        descriptors.iter().map(|d| self.predict(d)).collect()
    }
}

fn finite_matrix(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

/// `W = argmin Σ‖Y_i − Wᵀφ_i‖² + λ‖W‖²`, i.e. `(ΦᵀΦ + λI)⁻¹ΦᵀY`. Uses the
/// equivalent dual form `Φᵀ(ΦΦᵀ + λI)⁻¹Y` when there are fewer rows than
/// features.
pub fn ridge_solve(phi: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig("ridge lambda must be positive".into()));
    }
    if phi.nrows() == 0 || phi.nrows() != y.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows against {} target rows",
            phi.nrows(),
            y.nrows()
        )));
    }
    finite_matrix(phi, "feature matrix")?;
    finite_matrix(y, "target matrix")?;
    let (n, m) = phi.shape();
    let fail = || Error::Numerical("ridge system is not positive definite".into());
    if n < m {
        let mut k = phi * phi.transpose();
        for i in 0..n {
            k[(i, i)] += lambda;
        }
        let alpha = Cholesky::new(k).ok_or_else(fail)?.solve(y);
        Ok(phi.tr_mul(&alpha))
    } else {
        let mut g = phi.tr_mul(phi);
        for i in 0..m {
            g[(i, i)] += lambda;
        }
        Ok(Cholesky::new(g).ok_or_else(fail)?.solve(&phi.tr_mul(y)))
    }
}

pub fn rows_to_matrix<T: Copy + Into<f64>>(rows: &[Vec<T>]) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch("rows have different lengths".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j].into()))
}

fn pose_matrix(poses: &[Pose3D]) -> Result<DMatrix<f64>> {
    rows_to_matrix(&poses.iter().map(Pose3D::flatten).collect::<Vec<_>>())
}

fn to_f64(d: &[f32]) -> Vec<f64> {
    d.iter().map(|&v| f64::from(v)).collect()
}

fn finish_pose(flat: &[f64]) -> Result<Pose3D> {
    let p = Pose3D::from_flat(flat)?;
    root_relativize(&p.joints, 0)
}

/// Settings for both kernel regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub lambda: f64,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Bandwidths; the median heuristic is used when unset.
    pub gamma_in: Option<f64>,
    pub gamma_out: Option<f64>,
    pub preimage: PreimageConfig,
    pub seed: u64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            input_dim: 15000,
            output_dim: 4000,
            gamma_in: None,
            gamma_out: None,
            preimage: PreimageConfig::default(),
            seed: 0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("lambda must be positive".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("embedding dims must be positive".into()));
        }
        for g in [self.gamma_in, self.gamma_out].into_iter().flatten() {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::InvalidConfig("bandwidths must be positive".into()));
            }
        }
        self.preimage.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreimageConfig {
    pub steps: usize,
    /// Initial step as a multiple of `1 / γ_Y`.
    pub step_scale: f64,
    pub max_backtracks: usize,
}

impl Default for PreimageConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            step_scale: 0.25,
            max_backtracks: 30,
        }
    }
}

impl PreimageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("pre-image needs at least one step".into()));
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::InvalidConfig("pre-image step must be positive".into()));
        }
        Ok(())
    }
}

fn check_training(descriptors: &[Vec<f32>], poses: &[Pose3D]) -> Result<()> {
    if descriptors.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if descriptors.len() != poses.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} descriptors for {} poses",
            descriptors.len(),
            poses.len()
        )));
    }
    Ok(())
}

fn build_input_embedding(rows: &[Vec<f64>], cfg: &KernelConfig) -> Result<ExpChi2Embedding> {
    let gamma = match cfg.gamma_in {
        Some(g) => g,
        None => median_chi2_gamma(rows, cfg.seed)?,
    };
    ExpChi2Embedding::new(rows[0].len(), cfg.input_dim, gamma, crate::seed::derive(cfg.seed, "input-embedding"))
}

fn embed_matrix(e: &ExpChi2Embedding, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    rows_to_matrix(&e.embed_batch(rows)?)
}

/// Kernel ridge regression from the χ² embedding straight to pose
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KrrModel {
    pub embedding: ExpChi2Embedding,
    /// `embedding.dim × 3D`.
    pub w: DMatrix<f64>,
    pub lambda: f64,
}

pub fn krr_fit(phi: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    ridge_solve(phi, y, lambda)
}

impl KrrModel {
    pub fn fit(descriptors: &[Vec<f32>], poses: &[Pose3D], cfg: &KernelConfig) -> Result<Self> {
        check_training(descriptors, poses)?;
        cfg.validate()?;
        let rows: Vec<Vec<f64>> = descriptors.iter().map(|d| to_f64(d)).collect();
        let embedding = build_input_embedding(&rows, cfg)?;
        let w = krr_fit(&embed_matrix(&embedding, &rows)?, &pose_matrix(poses)?, cfg.lambda)?;
        Ok(Self {
            embedding,
            w,
            lambda: cfg.lambda,
        })
    }

    /// `Wᵀφ` before root-relativization.
    pub fn predict_raw(&self, phi: &[f32]) -> Result<Vec<f64>> {
        if phi.len() != self.w.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "embedding of length {}, model expects {}",
                phi.len(),
                self.w.nrows()
            )));
        }
        let mut out = vec![0.0; self.w.ncols()];
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.w.column(j).iter().zip(phi).map(|(w, &p)| w * f64::from(p)).sum();
        }
        Ok(out)
    }

    pub fn predict_embedded(&self, phi: &[f32]) -> Result<Pose3D> {
        finish_pose(&self.predict_raw(phi)?)
    }
}

impl PoseRegressor for KrrModel {
    fn predict(&self, descriptor: &[f32]) -> Result<Pose3D> {
        self.predict_embedded(&self.embedding.embed(&to_f64(descriptor))?)
    }

    fn predict_batch(&self, descriptors: &[Vec<f32>]) -> Result<Vec<Pose3D>> {
        let rows: Vec<Vec<f64>> = descriptors.iter().map(|d| to_f64(d)).collect();
        self.embedding
            .embed_batch(&rows)?
            .iter()
            .map(|phi| self.predict_embedded(phi))
            .collect()
    }
}

/// Output side of a KDE model.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputMap {
    /// `Φ_Y(y) = y`; reduces KDE to KRR.
    Identity(usize),
    Rbf(RbfEmbedding),
}

impl OutputMap {
    pub fn in_dim(&self) -> usize {
        match self {
            OutputMap::Identity(d) => *d,
            OutputMap::Rbf(e) => e.in_dim,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            OutputMap::Identity(d) => *d,
            OutputMap::Rbf(e) => e.dim,
        }
    }

    pub fn embed(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            OutputMap::Identity(d) if y.len() == *d => Ok(y.to_vec()),
            OutputMap::Identity(d) => Err(Error::ShapeMismatch(format!("expected {d} outputs, got {}", y.len()))),
            OutputMap::Rbf(e) => e.embed(y),
        }
    }

    pub fn vjp(&self, y: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            OutputMap::Identity(_) => v.to_vec(),
            OutputMap::Rbf(e) => e.vjp(y, v),
        }
    }

    fn gamma(&self) -> f64 {
        match self {
            OutputMap::Identity(_) => 0.5,
            OutputMap::Rbf(e) => e.gamma,
        }
    }
}

/// Outcome of one pre-image search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreimageInfo {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub accepted_steps: usize,
    /// Set when the objective was non-finite and the initialization was
    /// returned unchanged.
    pub warning: bool,
}

/// Kernel dependency estimation: ridge regression between the input and
/// output embeddings, inverted by gradient descent from the KRR estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    pub krr: KrrModel,
    pub output: OutputMap,
    /// `input dim × output dim`.
    pub w: DMatrix<f64>,
    pub preimage: PreimageConfig,
}

pub fn kde_fit(phi_z: &DMatrix<f64>, phi_y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    ridge_solve(phi_z, phi_y, lambda)
}

/// `g(y) = ‖t − Φ_Y(y)‖²`.
pub fn preimage_objective(output: &OutputMap, target: &[f64], y: &[f64]) -> Result<f64> {
    Ok(output
        .embed(y)?
        .iter()
        .zip(target)
        .map(|(a, b)| (b - a) * (b - a))
        .sum())
}

/// `∇g(y) = −2 J(y)ᵀ (t − Φ_Y(y))`.
pub fn preimage_gradient(output: &OutputMap, target: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let r: Vec<f64> = output.embed(y)?.iter().zip(target).map(|(a, b)| -2.0 * (b - a)).collect();
    Ok(output.vjp(y, &r))
}

/// Gradient descent with Armijo backtracking on [`preimage_objective`].
/// The step grows after each accepted move and halves on rejection; the
/// best iterate seen is returned.
pub fn solve_preimage(output: &OutputMap, target: &[f64], init: &[f64], cfg: &PreimageConfig) -> Result<(Vec<f64>, PreimageInfo)> {
    if target.len() != output.dim() {
        return Err(Error::ShapeMismatch("pre-image target does not match output embedding".into()));
    }
    if init.len() != output.in_dim() || init.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("pre-image initialization must be finite and match the pose size".into()));
    }
    let f0 = preimage_objective(output, target, init)?;
    let mut info = PreimageInfo {
        initial_objective: f0,
        final_objective: f0,
        accepted_steps: 0,
        warning: false,
    };
    if !f0.is_finite() {
        info.warning = true;
        return Ok((init.to_vec(), info));
    }
    let mut y = init.to_vec();
    let mut f = f0;
    let mut step = cfg.step_scale / output.gamma();
    for _ in 0..cfg.steps {
        let g = preimage_gradient(output, target, &y)?;
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if gg == 0.0 || !gg.is_finite() {
            break;
        }
        let mut moved = false;
        for _ in 0..=cfg.max_backtracks {
            let cand: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let fc = preimage_objective(output, target, &cand)?;
            if fc.is_finite() && fc <= f - 1e-4 * step * gg {
                y = cand;
                f = fc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        info.accepted_steps += 1;
        step *= 2.0;
    }
    info.final_objective = f;
    Ok((y, info))
}

impl KdeModel {
    pub fn fit(descriptors: &[Vec<f32>], poses: &[Pose3D], cfg: &KernelConfig) -> Result<Self> {
        check_training(descriptors, poses)?;
        cfg.validate()?;
        let krr = KrrModel::fit(descriptors, poses, cfg)?;
        let rows: Vec<Vec<f64>> = descriptors.iter().map(|d| to_f64(d)).collect();
        let phi_z = embed_matrix(&krr.embedding, &rows)?;
        let flat: Vec<Vec<f64>> = poses.iter().map(Pose3D::flatten).collect();
        let gamma = match cfg.gamma_out {
            Some(g) => g,
            None => median_rbf_gamma(&flat, cfg.seed)?,
        };
        let rbf = RbfEmbedding::new(flat[0].len(), cfg.output_dim, gamma, crate::seed::derive(cfg.seed, "output-embedding"))?;
        let phi_y = rows_to_matrix(&flat.iter().map(|y| rbf.embed(y)).collect::<Result<Vec<_>>>()?)?;
        let w = kde_fit(&phi_z, &phi_y, cfg.lambda)?;
        Ok(Self {
            krr,
            output: OutputMap::Rbf(rbf),
            w,
            preimage: cfg.preimage,
        })
    }

    /// `Wᵀφ_Z(z)`: the predicted output embedding.
    pub fn target(&self, phi: &[f32]) -> Result<Vec<f64>> {
        if phi.len() != self.w.nrows() {
            return Err(Error::ShapeMismatch("embedding does not match KDE model".into()));
        }
        Ok((0..self.w.ncols())
            .map(|j| self.w.column(j).iter().zip(phi).map(|(w, &p)| w * f64::from(p)).sum())
            .collect())
    }

    pub fn predict_embedded(&self, phi: &[f32]) -> Result<(Pose3D, PreimageInfo)> {
        let init = self.krr.predict_raw(phi)?;
        let (y, info) = solve_preimage(&self.output, &self.target(phi)?, &init, &self.preimage)?;
        Ok((finish_pose(&y)?, info))
    }
}

impl PoseRegressor for KdeModel {
    fn predict(&self, descriptor: &[f32]) -> Result<Pose3D> {
        let phi = self.krr.embedding.embed(&to_f64(descriptor))?;
        Ok(self.predict_embedded(&phi)?.0)
    }

    fn predict_batch(&self, descriptors: &[Vec<f32>]) -> Result<Vec<Pose3D>> {
        let rows: Vec<Vec<f64>> = descriptors.iter().map(|d| to_f64(d)).collect();
        self.krr
            .embedding
            .embed_batch(&rows)?
            .iter()
            .map(|phi| Ok(self.predict_embedded(phi)?.0))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Krr,
    Kde,
    Dn,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "krr" => Ok(ModelKind::Krr),
            "kde" => Ok(ModelKind::Kde),
            "dn" => Ok(ModelKind::Dn),
            other => Err(Error::InvalidConfig(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Krr => "KRR",
            ModelKind::Kde => "KDE",
            ModelKind::Dn => "DN",
        })
    }
}

/// Any trained pose model.
#[derive(Debug, Clone)]
pub enum PoseModel {
    Krr(KrrModel),
    Kde(KdeModel),
    Dn(DnModel),
}

impl PoseModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            PoseModel::Krr(_) => ModelKind::Krr,
            PoseModel::Kde(_) => ModelKind::Kde,
            PoseModel::Dn(_) => ModelKind::Dn,
        }
    }

    pub fn fit(
        kind: ModelKind,
        descriptors: &[Vec<f32>],
        poses: &[Pose3D],
        kernel: &KernelConfig,
        dn: &DnHyper,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::Krr => PoseModel::Krr(KrrModel::fit(descriptors, poses, kernel)?),
            ModelKind::Kde => PoseModel::Kde(KdeModel::fit(descriptors, poses, kernel)?),
            ModelKind::Dn => PoseModel::Dn(dn_fit(descriptors, poses, dn, kernel)?.0),
        })
    }
}

impl PoseRegressor for PoseModel {
    fn predict(&self, descriptor: &[f32]) -> Result<Pose3D> {
        match self {
            PoseModel::Krr(m) => m.predict(descriptor),
            PoseModel::Kde(m) => m.predict(descriptor),
            PoseModel::Dn(m) => m.predict(descriptor),
        }
    }

    fn predict_batch(&self, descriptors: &[Vec<f32>]) -> Result<Vec<Pose3D>> {
        match self {
            PoseModel::Krr(m) => m.predict_batch(descriptors),
            PoseModel::Kde(m) => m.predict_batch(descriptors),
            PoseModel::Dn(m) => m.predict_batch(descriptors),
        }
    }
}
