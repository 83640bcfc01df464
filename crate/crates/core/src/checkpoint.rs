//! Binary checkpoints: the magic line `IATCNN1\n`, a one-line JSON manifest
//! terminated by `\n`, then every tensor as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attenet::{AtteNet, AtteNetConfig};
use crate::error::{Error, Result};
use crate::fusion::{Arcp, FusionConfig};
use crate::iatcnn::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IATCNN1\n";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length; always `8 · ∏ shape`.
    pub length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
}

/// A model that can be written to and rebuilt from a checkpoint.
pub trait Persist: Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug;

    fn config(&self) -> Self::Config;
    fn entries(&self) -> Vec<(String, &Tensor)>;
    fn from_parts(config: Self::Config, tensors: Vec<(String, Tensor)>) -> Result<Self>;
}

impl Persist for Model {
    const KIND: &'static str = "iatcnn";
    type Config = ModelConfig;

    fn config(&self) -> ModelConfig {
        self.config.clone()
    }

    fn entries(&self) -> Vec<(String, &Tensor)> {
        self.params.named_entries().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn from_parts(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        Model::from_named(config, tensors)
    }
}

impl Persist for AtteNet {
    const KIND: &'static str = "attenet";
    type Config = AtteNetConfig;

    fn config(&self) -> AtteNetConfig {
        self.config.clone()
    }

    fn entries(&self) -> Vec<(String, &Tensor)> {
        self.params.named_entries().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn from_parts(config: AtteNetConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        AtteNet::from_named(config, tensors)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcpConfig {
    pub fusion: FusionConfig,
    pub trajectory: ModelConfig,
    pub light: AtteNetConfig,
}

const PARTS: [&str; 3] = ["trajectory/", "light/", "head/"];

impl Persist for Arcp {
    const KIND: &'static str = "arcp";
    type Config = ArcpConfig;

    fn config(&self) -> ArcpConfig {
        ArcpConfig {
            fusion: self.head.config.clone(),
            trajectory: self.trajectory.config.clone(),
            light: self.light.config.clone(),
        }
    }

    fn entries(&self) -> Vec<(String, &Tensor)> {
        let stores = [&self.trajectory.params, &self.light.params, &self.head.params];
        PARTS
            .iter()
            .zip(stores)
            .flat_map(|(p, s)| s.named_entries().map(move |(n, t)| (format!("{p}{n}"), t)))
            .collect()
    }

    fn from_parts(config: ArcpConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut split: [Vec<(String, Tensor)>; 3] = Default::default();
        for (name, t) in tensors {
            let i = PARTS
                .iter()
                .position(|p| name.starts_with(p))
                .ok_or_else(|| Error::InvalidArgument(format!("tensor {name} belongs to no sub-model")))?;
            split[i].push((name[PARTS[i].len()..].to_string(), t));
        }
        let [traj, light, head] = split;
        let trajectory = Model::from_named(config.trajectory, traj)?;
        let light = AtteNet::from_named(config.light, light)?;
        let mut arcp = Arcp::build(config.fusion, trajectory, light, 0)?;
        if head.len() != arcp.head.params.entry_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} head tensors, got {}",
                arcp.head.params.entry_count(),
                head.len()
            )));
        }
        for (name, t) in head {
            arcp.head.params.assign(&name, t)?;
        }
        Ok(arcp)
    }
}

/// Serialises a model into checkpoint bytes.
pub fn to_bytes<P: Persist>(model: &P) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.entries() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        kind: P::KIND.to_string(),
        config: serde_json::to_value(model.config())?,
        tensors,
        payload_bytes: payload.len() as u64,
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&manifest)?);
    out.push(b'\n');
    out.extend(payload);
    Ok(out)
}

/// Splits checkpoint bytes into a validated manifest and its payload.
pub fn read_manifest<'b>(bytes: &'b [u8], path: &Path) -> Result<(Manifest, &'b [u8])> {
    let bad = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    if !bytes.starts_with(MAGIC) {
        return Err(bad("bad magic bytes, not an IATCNN1 checkpoint".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("manifest is not terminated".into()))?;
    let manifest: Manifest = serde_json::from_slice(&rest[..nl]).map_err(|e| bad(format!("bad manifest: {e}")))?;
    let payload = &rest[nl + 1..];
    if (payload.len() as u64) < manifest.payload_bytes {
        return Err(bad(format!(
            "truncated payload: manifest declares {} bytes, file holds {}",
            manifest.payload_bytes,
            payload.len()
        )));
    }
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(bad(format!(
            "payload length mismatch: manifest declares {} bytes, file holds {}",
            manifest.payload_bytes,
            payload.len()
        )));
    }
    for e in &manifest.tensors {
        let expect = 8 * e.shape.iter().product::<usize>() as u64;
        if e.length != expect {
            return Err(bad(format!("tensor {} declares {} bytes but its shape needs {expect}", e.name, e.length)));
        }
        if e.offset.checked_add(e.length).is_none_or(|end| end > manifest.payload_bytes) {
            return Err(bad(format!("tensor {} lies outside the payload", e.name)));
        }
    }
    Ok((manifest, payload))
}

/// Rebuilds a model from checkpoint bytes; `expected`, when given, must
/// equal the stored configuration.
pub fn from_bytes<P: Persist>(bytes: &[u8], path: &Path, expected: Option<&P::Config>) -> Result<P> {
    let bad = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    let (manifest, payload) = read_manifest(bytes, path)?;
    if manifest.kind != P::KIND {
        return Err(bad(format!("holds a {} model, expected {}", manifest.kind, P::KIND)));
    }
    let config: P::Config = serde_json::from_value(manifest.config).map_err(|e| bad(format!("bad config: {e}")))?;
    if let Some(exp) = expected {
        if *exp != config {
            return Err(bad(format!("config mismatch: stored {config:?}, expected {exp:?}")));
        }
    }
    let tensors = manifest
        .tensors
        .into_iter()
        .map(|e| {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            Ok((e.name, Tensor::new(e.shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    P::from_parts(config, tensors).map_err(|e| bad(e.to_string()))
}

pub fn save<P: Persist>(path: impl AsRef<Path>, model: &P) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<P: Persist>(path: impl AsRef<Path>) -> Result<P> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path, None)
}

pub fn load_expecting<P: Persist>(path: impl AsRef<Path>, expected: &P::Config) -> Result<P> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path, Some(expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iatcnn::Variant;

    fn tiny() -> Model {
        let cfg = ModelConfig { kernel_size: 2, filters: vec![3, 3, 3], t_obs: 3, t_pred: 2, n_max: 2, ..ModelConfig::desk(Variant::IaDResTcnn) };
        Model::build(cfg, 9).unwrap()
    }

    #[test]
    fn bytes_round_trip_bit_exactly() {
        let m = tiny();
        let bytes = to_bytes(&m).unwrap();
        assert!(bytes.starts_with(MAGIC));
        let back: Model = from_bytes(&bytes, Path::new("mem"), Some(&m.config)).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected_with_the_path() {
        let m = tiny();
        let bytes = to_bytes(&m).unwrap();
        let p = Path::new("model.ckpt");

        let mut magic = bytes.clone();
        magic[0] = b'X';
        let e = from_bytes::<Model>(&magic, p, None).unwrap_err().to_string();
        assert!(e.contains("model.ckpt") && e.contains("magic"), "{e}");

        let e = from_bytes::<Model>(&bytes[..bytes.len() - 3], p, None).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");

        let mut extra = bytes.clone();
        extra.extend([0u8; 8]);
        assert!(from_bytes::<Model>(&extra, p, None).unwrap_err().to_string().contains("mismatch"));

        let other = ModelConfig { kernel_size: 3, ..m.config.clone() };
        let e = from_bytes::<Model>(&bytes, p, Some(&other)).unwrap_err().to_string();
        assert!(e.contains("config mismatch"), "{e}");

        assert!(from_bytes::<AtteNet>(&bytes, p, None).unwrap_err().to_string().contains("iatcnn"));
    }

    #[test]
    fn declared_tensor_length_must_match_its_shape() {
        let m = tiny();
        let bytes = to_bytes(&m).unwrap();
        let (mut manifest, payload) = read_manifest(&bytes, Path::new("m")).unwrap();
        manifest.tensors[0].length += 8;
        let mut forged = MAGIC.to_vec();
        forged.extend(serde_json::to_vec(&manifest).unwrap());
        forged.push(b'\n');
        forged.extend(payload);
        let e = from_bytes::<Model>(&forged, Path::new("m"), None).unwrap_err().to_string();
        assert!(e.contains("declares"), "{e}");
    }
}
