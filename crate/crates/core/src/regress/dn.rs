use serde::{Deserialize, Serialize};

use super::{build_input_embedding, check_training, finish_pose, to_f64, KernelConfig, PoseRegressor};
use crate::domain::Pose3D;
use crate::error::{Error, Result};
use crate::kernels::ExpChi2Embedding;
use crate::nnet::{AdamState, LayerSpec, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DnInput {
    /// The HOG descriptor as is.
    Raw,
    /// The χ² random-feature embedding, rescaled to `cos` values.
    Embedded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DnHyper {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub input: DnInput,
    pub seed: u64,
}

impl Default for DnHyper {
    fn default() -> Self {
        Self {
            hidden: 3000,
            epochs: 50,
            batch: 64,
            lr: 0.001,
            dropout: 0.5,
            input: DnInput::Raw,
            seed: 0,
        }
    }
}

impl DnHyper {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("hidden width and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn layers(&self, input: usize, output: usize) -> Vec<LayerSpec> {
        let h = self.hidden;
        vec![
            LayerSpec::Dense { input, output: h },
            LayerSpec::Relu,
            LayerSpec::Dropout { p: self.dropout },
            LayerSpec::Dense { input: h, output: h },
            LayerSpec::Relu,
            LayerSpec::Dropout { p: self.dropout },
            LayerSpec::Dense { input: h, output },
            LayerSpec::Linear,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct DnModel {
    pub net: Network<f32>,
    pub hyper: DnHyper,
    pub embedding: Option<ExpChi2Embedding>,
}

impl DnModel {
    fn features(&self, descriptors: &[Vec<f32>]) -> Result<Vec<f32>> {
        network_inputs(self.embedding.as_ref(), descriptors)
    }
}

fn network_inputs(embedding: Option<&ExpChi2Embedding>, descriptors: &[Vec<f32>]) -> Result<Vec<f32>> {
    match embedding {
        None => Ok(descriptors.iter().flatten().copied().collect()),
        Some(e) => {
            let rows: Vec<Vec<f64>> = descriptors.iter().map(|d| to_f64(d)).collect();
            let s = (e.dim as f32 / 2.0).sqrt();
            Ok(e.embed_batch(&rows)?.into_iter().flatten().map(|v| v * s).collect())
        }
    }
}

/// Trains the dense regressor. Targets are standardized per coordinate
/// during training and the scaling is folded back into the last layer, so
/// the returned network outputs millimeters directly.
pub fn dn_fit(descriptors: &[Vec<f32>], poses: &[Pose3D], hyper: &DnHyper, kernel: &KernelConfig) -> Result<(DnModel, Vec<f64>)> {
    check_training(descriptors, poses)?;
    hyper.validate()?;
    let dim = descriptors[0].len();
    if dim == 0 || descriptors.iter().any(|d| d.len() != dim) {
        return Err(Error::ShapeMismatch("descriptors have inconsistent lengths".into()));
    }
    let embedding = match hyper.input {
        DnInput::Raw => None,
        DnInput::Embedded => {
            let rows: Vec<Vec<f64>> = descriptors.iter().map(|d| to_f64(d)).collect();
            Some(build_input_embedding(&rows, kernel)?)
        }
    };
    let inputs = network_inputs(embedding.as_ref(), descriptors)?;
    let in_len = inputs.len() / descriptors.len();

    let flat: Vec<Vec<f64>> = poses.iter().map(Pose3D::flatten).collect();
    let out = flat[0].len();
    if flat.iter().any(|y| y.len() != out) {
        return Err(Error::ShapeMismatch("poses have different joint counts".into()));
    }
    let n = flat.len() as f64;
    let mean: Vec<f64> = (0..out).map(|j| flat.iter().map(|y| y[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..out)
        .map(|j| {
            let v = flat.iter().map(|y| (y[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let targets: Vec<f32> = flat
        .iter()
        .flat_map(|y| (0..out).map(|j| ((y[j] - mean[j]) / std[j]) as f32).collect::<Vec<_>>())
        .collect();

    let mut net = Network::<f32>::new(vec![in_len], hyper.layers(in_len, out), hyper.seed)?;
    let mut adam = AdamState::with_lr(&net, hyper.lr);
    let trace = net.train(&inputs, &targets, hyper.epochs, hyper.batch, &mut adam)?;

    let last = net
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
        .expect("dense output layer");
    let p = &mut net.params[last];
    let h = p.w.len() / out;
    for j in 0..out {
        for w in &mut p.w[j * h..(j + 1) * h] {
            *w = (f64::from(*w) * std[j]) as f32;
        }
        p.b[j] = (f64::from(p.b[j]) * std[j] + mean[j]) as f32;
    }
    Ok((
        DnModel {
            net,
            hyper: *hyper,
            embedding,
        },
        trace,
    ))
}

impl PoseRegressor for DnModel {
    fn predict(&self, descriptor: &[f32]) -> Result<Pose3D> {
        Ok(self.predict_batch(std::slice::from_ref(&descriptor.to_vec()))?.remove(0))
    }

    fn predict_batch(&self, descriptors: &[Vec<f32>]) -> Result<Vec<Pose3D>> {
        if descriptors.is_empty() {
            return Ok(Vec::new());
        }
        let expect = match &self.embedding {
            Some(e) => e.in_dim,
            None => self.net.input_len(),
        };
        if let Some(d) = descriptors.iter().find(|d| d.len() != expect) {
            return Err(Error::ShapeMismatch(format!(
                "descriptor of length {}, model expects {expect}",
                d.len()
            )));
        }
        let mut out = Vec::with_capacity(descriptors.len());
        for chunk in descriptors.chunks(256) {
            let y = self.net.predict(&self.features(chunk)?)?;
            for row in y.chunks(self.net.output_len()) {
                out.push(finish_pose(&to_f64(row))?);
            }
        }
        Ok(out)
    }
}
