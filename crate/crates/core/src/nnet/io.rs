//! `RSTVNNET` model files: container header `{input_shape, layers, seed}`,
//! then each layer's weights followed by its bias, in layer order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network, Params};
use crate::binfmt;
use crate::error::Result;

pub const MAGIC: &[u8; 8] = b"RSTVNNET";

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    seed: u64,
}

pub fn encode_network(net: &Network<f32>) -> Result<Vec<u8>> {
    let header = Header {
        input_shape: net.input_shape.clone(),
        layers: net.layers.clone(),
        seed: net.seed,
    };
    let mut payload = Vec::with_capacity(net.param_count());
    for p in &net.params {
        payload.extend_from_slice(&p.w);
        payload.extend_from_slice(&p.b);
    }
    binfmt::encode(MAGIC, &header, &payload)
}

pub fn decode_network(bytes: &[u8]) -> Result<Network<f32>> {
    let c = binfmt::decode::<Header>("network file", MAGIC, bytes)?;
    let h = c.header;
    // shapes are validated before any parameter-sized allocation
    Network::<f32>::infer_shapes(&h.input_shape, &h.layers)?;
    let lens: Vec<usize> = h
        .layers
        .iter()
        .flat_map(|l| {
            let (w, b) = l.param_lens();
            [w, b]
        })
        .collect();
    let parts = binfmt::split("network file", &c.payload, &lens)?;
    let params = parts
        .chunks(2)
        .map(|wb| Params {
            w: wb[0].to_vec(),
            b: wb[1].to_vec(),
        })
        .collect();
    Network::with_params(h.input_shape, h.layers, params, h.seed)
}

pub fn save_network(net: &Network<f32>, path: &Path) -> Result<()> {
    binfmt::write_file(path, &encode_network(net)?)
}

pub fn load_network(path: &Path) -> Result<Network<f32>> {
    decode_network(&binfmt::read_file(path)?)
}
