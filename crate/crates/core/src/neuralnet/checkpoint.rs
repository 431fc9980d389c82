//! Versioned network checkpoints: `"NNCK"`, u32 version, u64 header length,
//! JSON header, then the parameters and BatchNorm running statistics as
//! little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mlp, MlpSpec, NetError};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"NNCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: MlpSpec,
    n_params: usize,
    n_stats: usize,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode_checkpoint<T: Real>(net: &Mlp<T>, meta: serde_json::Value) -> Vec<u8> {
    let params = net.params();
    let stats = net.running_stats();
    let header = Header {
        spec: net.spec().clone(),
        n_params: params.len(),
        n_stats: stats.len(),
        meta,
    };
    let hjson = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + hjson.len() + 8 * (params.len() + stats.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    for v in params.iter().chain(&stats) {
        out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
    }
    out
}

/// Returns the network and the free-form metadata stored with it.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Mlp<T>, serde_json::Value), NetError> {
    let bad = |m: &str| NetError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a network checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
    if hlen > body.len() {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let blob = &body[hlen..];
    if blob.len() != 8 * (header.n_params + header.n_stats) {
        return Err(bad("parameter blob has the wrong length"));
    }
    let vals: Vec<T> = blob
        .chunks_exact(8)
        .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut net = Mlp::new(header.spec, &mut rng)?;
    net.set_params(&vals[..header.n_params])?;
    net.set_running_stats(&vals[header.n_params..])?;
    Ok((net, header.meta))
}

pub fn save_checkpoint<T: Real>(
    net: &Mlp<T>,
    path: &Path,
    meta: serde_json::Value,
) -> Result<(), NetError> {
    std::fs::write(path, encode_checkpoint(net, meta))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Mlp<T>, serde_json::Value), NetError> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{Activation, LayerSpec, Mode};
    use crate::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = MlpSpec {
            input: 3,
            layers: vec![
                LayerSpec {
                    batchnorm: true,
                    ..LayerSpec::new(5, Activation::Elu)
                },
                LayerSpec::new(2, Activation::Tanh),
            ],
        };
        let mut net = Mlp::<f64>::new(spec, &mut rng).unwrap();
        let x = Matrix::from_fn(3, 7, |i, j| (i as f64 - j as f64) * 0.3);
        net.forward(&x, Mode::Train).unwrap();
        let bytes = encode_checkpoint(&net, serde_json::json!({"tag": "ae"}));
        let (back, meta) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(meta["tag"], "ae");
        assert_eq!(back.params(), net.params());
        assert_eq!(back.running_stats(), net.running_stats());
        assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint::<f64>(b"NOPE").is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::<f64>::new(
            MlpSpec {
                input: 1,
                layers: vec![LayerSpec::new(1, Activation::Linear)],
            },
            &mut rng,
        )
        .unwrap();
        let mut b = encode_checkpoint(&net, serde_json::Value::Null);
        b.pop();
        assert!(decode_checkpoint::<f64>(&b).is_err());
    }
}
