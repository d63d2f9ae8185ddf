//! Binary checkpoint format.
//!
//! ```text
//! "RSCK" | u32 version | u64 len | spec JSON
//! per trainable tensor:           u64 count | f32 × count
//! per batchnorm layer (mean, var): u64 count | f32 × count
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use super::spec::NetworkSpec;
use super::state::NetworkState;
use crate::error::{CheckpointFault, Error, Result};
use crate::tensor::{RunningStats, Tensor};

pub const MAGIC: &[u8; 4] = b"RSCK";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(state: &NetworkState) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&state.spec)
        .map_err(|e| Error::checkpoint(CheckpointFault::MalformedSpec, e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |values: &[f32]| {
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in &state.params {
        put(p.values());
    }
    for s in &state.running {
        put(&s.mean);
        put(&s.var);
    }
    Ok(out)
}

pub fn save_checkpoint(state: &NetworkState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::checkpoint(
                CheckpointFault::Truncated,
                format!("file ends inside {what} at byte {}", self.pos),
            ));
        };
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, expected: usize, what: &str) -> Result<Vec<f32>> {
        let count = self.u64(what)?;
        if count != expected as u64 {
            return Err(Error::checkpoint(
                CheckpointFault::LengthMismatch,
                format!("{what} holds {count} values but the spec implies {expected}"),
            ));
        }
        let raw = self.take(expected * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| bad_magic())? != MAGIC {
        return Err(bad_magic());
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::checkpoint(
            CheckpointFault::VersionMismatch,
            format!("format version {version}, expected {VERSION}"),
        ));
    }
    let len = r.u64("spec length")?;
    let len = usize::try_from(len).map_err(|_| {
        Error::checkpoint(CheckpointFault::Truncated, format!("spec length {len}"))
    })?;
    let json = r.take(len, "spec")?;
    let spec: NetworkSpec = serde_json::from_slice(json)
        .map_err(|e| Error::checkpoint(CheckpointFault::MalformedSpec, e.to_string()))?;
    spec.validate()
        .map_err(|e| Error::checkpoint(CheckpointFault::MalformedSpec, e.to_string()))?;

    let mut params = Vec::new();
    for (i, shape) in spec.param_shapes()?.into_iter().enumerate() {
        let n = shape.iter().product();
        let values = r.floats(n, &format!("parameter tensor {i}"))?;
        params.push(Tensor::new(shape, values)?.with_grad());
    }
    let mut running = Vec::new();
    for (i, c) in spec.batchnorm_channels()?.into_iter().enumerate() {
        let mean = r.floats(c, &format!("running mean {i}"))?;
        let var = r.floats(c, &format!("running variance {i}"))?;
        running.push(RunningStats {
            mean,
            var,
            initialized: true,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::checkpoint(
            CheckpointFault::LengthMismatch,
            format!("{} trailing bytes after the last tensor", bytes.len() - r.pos),
        ));
    }
    let rng_seed = spec
        .metadata
        .get("seed")
        .and_then(serde_json::Value::as_u64)
        .unwrap_or(0);
    Ok(NetworkState {
        spec,
        params,
        running,
        rng_seed,
    })
}

fn bad_magic() -> Error {
    Error::checkpoint(CheckpointFault::BadMagic, "not a checkpoint file")
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::spec::{tower_spec, LayerSpec};
    use crate::network::state::{build_network, count_parameters};

    fn small() -> NetworkState {
        let spec = NetworkSpec::new(
            vec![2, 4, 4],
            vec![
                LayerSpec::conv(3, 3, 1, 1e-4),
                LayerSpec::Batchnorm,
                LayerSpec::relu(),
                LayerSpec::Flatten,
                LayerSpec::dense(5, 0.0),
            ],
        );
        let mut s = build_network(&spec, 11).unwrap();
        s.running[0].mean = vec![0.1, -0.2, 0.3];
        s.running[0].var = vec![1.5, 0.5, 2.0];
        s
    }

    fn fault(bytes: &[u8]) -> CheckpointFault {
        match decode_checkpoint(bytes) {
            Err(Error::Checkpoint { fault, .. }) => fault,
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let s = small();
        let bytes = encode_checkpoint(&s).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.spec, s.spec);
        assert_eq!(back.params, s.params);
        assert_eq!(back.running, s.running);
        assert_eq!(count_parameters(&back), count_parameters(&s));
        let img = Tensor::full(&[2, 4, 4], 0.25f32);
        assert_eq!(back.embed(&img).unwrap(), s.embed(&img).unwrap());
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&small()).unwrap();
        assert_eq!(&bytes[..4], b"RSCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let spec: NetworkSpec = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(spec, small().spec);
        let first = u64::from_le_bytes(bytes[16 + len..24 + len].try_into().unwrap());
        assert_eq!(first, 3 * 2 * 3 * 3);
    }

    #[test]
    fn distinct_faults() {
        let bytes = encode_checkpoint(&small()).unwrap();
        for cut in [0, 3, 10, 40, bytes.len() - 1] {
            let f = fault(&bytes[..cut]);
            assert!(
                matches!(f, CheckpointFault::Truncated | CheckpointFault::BadMagic),
                "cut {cut}: {f:?}"
            );
        }
        assert_eq!(fault(&bytes[..bytes.len() - 1]), CheckpointFault::Truncated);

        let mut flipped = bytes.clone();
        flipped[1] ^= 0x20;
        assert_eq!(fault(&flipped), CheckpointFault::BadMagic);
        let mut flipped = bytes.clone();
        flipped[4] ^= 0x01;
        assert_eq!(fault(&flipped), CheckpointFault::VersionMismatch);

        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(fault(&extra), CheckpointFault::LengthMismatch);

        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut wrong = bytes.clone();
        wrong[16 + len] += 1;
        assert_eq!(fault(&wrong), CheckpointFault::LengthMismatch);

        let mut bad_json = bytes.clone();
        bad_json[16] = b'[';
        assert_eq!(fault(&bad_json), CheckpointFault::MalformedSpec);
    }

    #[test]
    fn tower_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rsck");
        let s = build_network(&tower_spec("roadscan_head", 32).unwrap(), 1).unwrap();
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, s.params);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
