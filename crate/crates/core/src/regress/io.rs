//! `RSTVPOSE` model files. Random-feature embeddings are stored by
//! reference (dims, bandwidth, seed) and regenerated on load; weight
//! matrices are stored row-major as f32.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{DnHyper, DnModel, KdeModel, KrrModel, OutputMap, PoseModel, PreimageConfig};
use crate::binfmt;
use crate::error::{Error, Result};
use crate::kernels::{ExpChi2Embedding, RbfEmbedding};
use crate::nnet::{LayerSpec, Network, Params};

pub const MAGIC: &[u8; 8] = b"RSTVPOSE";

/// Largest frequency matrix a model file may ask to regenerate.
pub const MAX_EMBEDDING_ELEMS: usize = 1 << 29;

const WHAT: &str = "pose model file";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingRef {
    in_dim: usize,
    dim: usize,
    order: usize,
    period: f64,
    gamma: f64,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum OutputRef {
    Identity { dim: usize },
    Rbf { in_dim: usize, dim: usize, gamma: f64, seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Dims {
    descriptor: usize,
    pose: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Header {
    Krr {
        dims: Dims,
        lambda: f64,
        input: EmbeddingRef,
    },
    Kde {
        dims: Dims,
        lambda: f64,
        input: EmbeddingRef,
        output: OutputRef,
        preimage: PreimageConfig,
    },
    Dn {
        dims: Dims,
        hyper: DnHyper,
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        net_seed: u64,
        input: Option<EmbeddingRef>,
    },
}

fn embedding_ref(e: &ExpChi2Embedding) -> EmbeddingRef {
    EmbeddingRef {
        in_dim: e.in_dim,
        dim: e.dim,
        order: e.order,
        period: e.period,
        gamma: e.gamma,
        seed: e.seed,
    }
}

fn regenerate(r: &EmbeddingRef, limit: usize) -> Result<ExpChi2Embedding> {
    let elems = r
        .in_dim
        .checked_mul(r.order.saturating_mul(2).saturating_add(1))
        .and_then(|p| p.checked_mul(r.dim));
    match elems {
        Some(n) if n <= limit => {}
        _ => return Err(Error::format(WHAT, "input embedding is too large")),
    }
    ExpChi2Embedding::with_map(r.in_dim, r.dim, r.order, r.period, r.gamma, r.seed)
        .map_err(|e| Error::format(WHAT, e.to_string()))
}

fn push_matrix(out: &mut Vec<f32>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter().map(|&v| v as f32));
    }
}

fn matrix(rows: usize, cols: usize, data: &[f32]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| f64::from(data[i * cols + j]))
}

fn checked(a: usize, b: usize) -> Result<usize> {
    a.checked_mul(b).ok_or_else(|| Error::format(WHAT, "dimensions overflow"))
}

impl PoseModel {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let header = match self {
            PoseModel::Krr(m) => {
                push_matrix(&mut payload, &m.w);
                Header::Krr {
                    dims: Dims {
                        descriptor: m.embedding.in_dim,
                        pose: m.w.ncols(),
                    },
                    lambda: m.lambda,
                    input: embedding_ref(&m.embedding),
                }
            }
            PoseModel::Kde(m) => {
                push_matrix(&mut payload, &m.krr.w);
                push_matrix(&mut payload, &m.w);
                let output = match &m.output {
                    OutputMap::Identity(d) => OutputRef::Identity { dim: *d },
                    OutputMap::Rbf(e) => OutputRef::Rbf {
                        in_dim: e.in_dim,
                        dim: e.dim,
                        gamma: e.gamma,
                        seed: e.seed,
                    },
                };
                Header::Kde {
                    dims: Dims {
                        descriptor: m.krr.embedding.in_dim,
                        pose: m.krr.w.ncols(),
                    },
                    lambda: m.krr.lambda,
                    input: embedding_ref(&m.krr.embedding),
                    output,
                    preimage: m.preimage,
                }
            }
            PoseModel::Dn(m) => {
                for p in &m.net.params {
                    payload.extend_from_slice(&p.w);
                    payload.extend_from_slice(&p.b);
                }
                Header::Dn {
                    dims: Dims {
                        descriptor: m.embedding.as_ref().map_or(m.net.input_len(), |e| e.in_dim),
                        pose: m.net.output_len(),
                    },
                    hyper: m.hyper,
                    input_shape: m.net.input_shape.clone(),
                    layers: m.net.layers.clone(),
                    net_seed: m.net.seed,
                    input: m.embedding.as_ref().map(embedding_ref),
                }
            }
        };
        binfmt::encode(MAGIC, &header, &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::decode_with_limit(bytes, MAX_EMBEDDING_ELEMS)
    }

    /// Like [`Self::decode`], refusing embeddings with more than `limit`
    /// frequency entries.
    pub fn decode_with_limit(bytes: &[u8], limit: usize) -> Result<Self> {
        let c = binfmt::decode::<Header>(WHAT, MAGIC, bytes)?;
        match c.header {
            Header::Krr { dims, lambda, input } => {
                if dims.descriptor != input.in_dim || !(lambda > 0.0) {
                    return Err(Error::format(WHAT, "inconsistent KRR header"));
                }
                let parts = binfmt::split(WHAT, &c.payload, &[checked(input.dim, dims.pose)?])?;
                let w = matrix(input.dim, dims.pose, parts[0]);
                let embedding = regenerate(&input, limit)?;
                Ok(PoseModel::Krr(KrrModel { embedding, w, lambda }))
            }
            Header::Kde {
                dims,
                lambda,
                input,
                output,
                preimage,
            } => {
                let (out_in, out_dim) = match output {
                    OutputRef::Identity { dim } => (dim, dim),
                    OutputRef::Rbf { in_dim, dim, .. } => (in_dim, dim),
                };
                if dims.descriptor != input.in_dim || out_in != dims.pose || !(lambda > 0.0) {
                    return Err(Error::format(WHAT, "inconsistent KDE header"));
                }
                preimage.validate().map_err(|e| Error::format(WHAT, e.to_string()))?;
                let parts = binfmt::split(
                    WHAT,
                    &c.payload,
                    &[checked(input.dim, dims.pose)?, checked(input.dim, out_dim)?],
                )?;
                let output = match output {
                    OutputRef::Identity { dim } => OutputMap::Identity(dim),
                    OutputRef::Rbf { in_dim, dim, gamma, seed } => OutputMap::Rbf(
                        RbfEmbedding::new(in_dim, dim, gamma, seed).map_err(|e| Error::format(WHAT, e.to_string()))?,
                    ),
                };
                let krr = KrrModel {
                    embedding: regenerate(&input, limit)?,
                    w: matrix(input.dim, dims.pose, parts[0]),
                    lambda,
                };
                Ok(PoseModel::Kde(KdeModel {
                    krr,
                    output,
                    w: matrix(input.dim, out_dim, parts[1]),
                    preimage,
                }))
            }
            Header::Dn {
                dims,
                hyper,
                input_shape,
                layers,
                net_seed,
                input,
            } => {
                let lens: Vec<usize> = layers
                    .iter()
                    .flat_map(|l| {
                        let (w, b) = l.param_lens();
                        [w, b]
                    })
                    .collect();
                let parts = binfmt::split(WHAT, &c.payload, &lens)?;
                let params = parts
                    .chunks(2)
                    .map(|wb| Params {
                        w: wb[0].to_vec(),
                        b: wb[1].to_vec(),
                    })
                    .collect();
                let net = Network::with_params(input_shape, layers, params, net_seed)
                    .map_err(|e| Error::format(WHAT, e.to_string()))?;
                let embedding = input.as_ref().map(|r| regenerate(r, limit)).transpose()?;
                let expect_in = embedding.as_ref().map_or(dims.descriptor, |e| e.dim);
                if net.input_len() != expect_in || net.output_len() != dims.pose {
                    return Err(Error::format(WHAT, "network shape does not match header dims"));
                }
                if embedding.as_ref().is_some_and(|e| e.in_dim != dims.descriptor) {
                    return Err(Error::format(WHAT, "embedding does not match descriptor size"));
                }
                Ok(PoseModel::Dn(DnModel { net, hyper, embedding }))
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
