//! Replays the checked-in fuzz seeds through the same entry points the fuzz
//! targets call. Every seed is a valid input, so each must decode.

use std::path::{Path, PathBuf};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn replay<T, E: std::fmt::Display>(target: &str, f: impl Fn(&[u8]) -> Result<T, E>) {
    for (path, bytes) in seeds(target) {
        if let Err(e) = f(&bytes) {
            panic!("{}: {e}", path.display());
        }
        // truncations must fail cleanly rather than panic
        for cut in [0, 1, bytes.len() / 2, bytes.len().saturating_sub(1)] {
            let _ = f(&bytes[..cut]);
        }
    }
}

#[test]
fn manifest_seeds() {
    replay("manifest", |b| rstv::manifest::SequenceManifest::parse(b, Path::new(".")));
}

#[test]
fn frame_seeds() {
    replay("frame", |b| rstv::image::decode_frame(b, 0));
}

#[test]
fn feature_seeds() {
    replay("features", rstv::pipeline::FeatureMatrix::decode);
}

#[test]
fn network_seeds() {
    replay("network", rstv::nnet::decode_network);
}

#[test]
fn embedding_seeds() {
    replay("embedding", rstv::kernels::Embedding::decode);
}

#[test]
fn pose_model_seeds() {
    replay("pose_model", |b| rstv::regress::PoseModel::decode_with_limit(b, 1 << 16));
}

#[test]
fn sidecar_seeds() {
    replay("sidecar", rstv::motioncomp::parse_sidecar);
}

#[test]
fn config_seeds() {
    replay("json_config", rstv::pipeline::PipelineConfig::from_json);
}
