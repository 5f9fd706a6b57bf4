//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SMRD"  version:u32  tensor_count:u32
//! tensor_count × { name_len:u16 name:utf8 rank:u8 dims:u32×rank data:f32×Π dims }
//! label_count:u16  label_count × { len:u16 label:utf8 }
//! crc32:u32   (over every preceding byte)
//! ```
//!
//! Besides the model parameters, a checkpoint stores `centers` and a rank-1
//! `meta.config` tensor describing the architecture.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{is_detector_param, BackboneConfig, ConvBlock, Model};
use crate::tensor::{ParamStore, Parameter, Tensor};

pub const MAGIC: &[u8; 4] = b"SMRD";
pub const FORMAT_VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "meta.config";
const CENTERS_TENSOR: &str = "centers";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {found:?}, not a checkpoint")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor '{tensor}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: String },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint has no tensor '{name}'")]
    MissingTensor { name: String },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Raw decoded contents.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointContents {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub labels: Vec<String>,
    pub crc: u32,
}

pub fn encode(tensors: &[(String, Tensor<f32>)], labels: &[String]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(too_many)?.to_le_bytes());
    for (name, tensor) in tensors {
        write_str(&mut out, name)?;
        let rank = u8::try_from(tensor.shape().len()).map_err(too_many)?;
        out.push(rank);
        for &d in tensor.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(too_many)?.to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&u16::try_from(labels.len()).map_err(too_many)?.to_le_bytes());
    for label in labels {
        write_str(&mut out, label)?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn too_many<T>(_: T) -> CheckpointError {
    CheckpointError::Invalid("value does not fit its field".into())
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(too_many)?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &dyn Fn() -> String) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated { context: context() })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, context: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn string(&mut self, context: &dyn Fn() -> String) -> Result<String> {
        let len = self.u16(context)? as usize;
        let bytes = self.take(len, context)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Invalid(format!("{} is not UTF-8", context())))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointContents> {
    let mut r = Reader { bytes, pos: 0 };
    let header = || "header".to_string();
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    r.pos = 4;
    let version = r.u32(&header)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32(&header)? as usize;
    let mut tensors = Vec::new();
    for index in 0..count {
        let name = r.string(&|| format!("name of tensor #{index}"))?;
        let ctx = || format!("tensor '{name}'");
        let rank = r.u8(&ctx)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&ctx)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Invalid(format!("tensor '{name}' is too large")))?;
        let payload = r.take(numel, &ctx)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Invalid(format!("tensor '{name}': {e}")))?;
        tensors.push((name, tensor));
    }
    let registry = || "class registry".to_string();
    let label_count = r.u16(&registry)? as usize;
    let mut labels = Vec::with_capacity(label_count);
    for _ in 0..label_count {
        labels.push(r.string(&registry)?);
    }
    let body_end = r.pos;
    let stored = r.u32(&|| "checksum".to_string())?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Invalid(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    Ok(CheckpointContents {
        tensors,
        labels,
        crc: stored,
    })
}

fn config_tensor(model: &Model) -> Tensor<f32> {
    let cfg = model.config();
    let mut v = vec![
        cfg.input_size,
        cfg.embedding_dim,
        cfg.num_classes,
        model.detector_hidden().unwrap_or(0),
        cfg.blocks.len(),
    ];
    for b in &cfg.blocks {
        v.extend([b.out_channels, b.stride, b.pool as usize]);
    }
    let n = v.len();
    Tensor::new(vec![n], v.into_iter().map(|x| x as f32).collect()).expect("non-empty")
}

fn parse_config(t: &Tensor<f32>) -> Result<(BackboneConfig, Option<usize>)> {
    let bad = || CheckpointError::Invalid("malformed architecture record".into());
    let v: Vec<usize> = t
        .data()
        .iter()
        .map(|&x| (x >= 0.0 && x.fract() == 0.0).then_some(x as usize).ok_or_else(bad))
        .collect::<Result<_>>()?;
    if v.len() < 5 || v.len() != 5 + 3 * v[4] {
        return Err(bad());
    }
    let blocks = v[5..]
        .chunks_exact(3)
        .map(|b| ConvBlock {
            out_channels: b[0],
            stride: b[1],
            pool: b[2] != 0,
        })
        .collect();
    let config = BackboneConfig {
        blocks,
        embedding_dim: v[1],
        num_classes: v[2],
        input_size: v[0],
    };
    config.validate().map_err(CheckpointError::Invalid)?;
    Ok((config, (v[3] > 0).then_some(v[3])))
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Tensor<f32>)> = vec![(CONFIG_TENSOR.into(), config_tensor(model))];
    for p in model.params().iter() {
        tensors.push((p.name().to_string(), Tensor::new(p.value.shape().to_vec(), p.value.data().to_vec()).expect("valid")));
    }
    tensors.push((CENTERS_TENSOR.into(), model.centers().clone()));
    encode(&tensors, model.labels())
}

/// Rebuilds a model, checking every tensor against the recorded architecture.
pub fn model_from_bytes(bytes: &[u8]) -> Result<(Model, u32)> {
    let contents = decode(bytes)?;
    let find = |name: &str| {
        contents
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.into() })
    };
    let (config, hidden) = parse_config(find(CONFIG_TENSOR)?)?;
    if contents.labels.len() != config.num_classes {
        return Err(CheckpointError::Invalid(format!(
            "class registry has {} labels for {} classes",
            contents.labels.len(),
            config.num_classes
        )));
    }
    let mut expected = config.parameter_shapes();
    if let Some(h) = hidden {
        expected.extend(config.detector_shapes(h));
    }
    let mut params = ParamStore::new();
    for (name, shape) in expected {
        let t = find(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                tensor: name,
                expected: shape,
                found: t.shape().to_vec(),
            });
        }
        let p = Parameter::new(name, t.clone()).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        params.insert(p).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    }
    let known = |n: &str| {
        n == CONFIG_TENSOR || n == CENTERS_TENSOR || params.get(n).is_some()
    };
    if let Some((extra, _)) = contents.tensors.iter().find(|(n, _)| !known(n)) {
        let hint = if is_detector_param(extra) { " (detector head not declared)" } else { "" };
        return Err(CheckpointError::Invalid(format!("unexpected tensor '{extra}'{hint}")));
    }
    let centers = find(CENTERS_TENSOR)?;
    let center_shape = vec![config.num_classes, config.embedding_dim];
    if centers.shape() != center_shape.as_slice() {
        return Err(CheckpointError::ShapeMismatch {
            tensor: CENTERS_TENSOR.into(),
            expected: center_shape,
            found: centers.shape().to_vec(),
        });
    }
    let model = Model::from_parts(config, params, centers.clone(), contents.labels, hidden);
    Ok((model, contents.crc))
}

/// Writes the checkpoint and returns its CRC.
pub fn save(model: &Model, path: &Path) -> Result<u32> {
    let bytes = model_to_bytes(model)?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    fs::write(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(crc)
}

pub fn load(path: &Path) -> Result<(Model, u32)> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model {
        let cfg = BackboneConfig {
            blocks: vec![ConvBlock {
                out_channels: 3,
                stride: 1,
                pool: true,
            }],
            embedding_dim: 4,
            num_classes: 2,
            input_size: 8,
        };
        let mut m = Model::init(cfg, vec!["a".into(), "b".into()], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        m.centers_mut().data_mut()[1] = -0.25;
        m
    }

    /// Byte-level oracle for a single-tensor file.
    #[test]
    fn layout_matches_hand_encoding() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode(&[("w".into(), t)], &["x".into()]).unwrap();
        let mut expected = b"SMRD".to_vec();
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend([1, 0, b'w', 1, 2, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        expected.extend([1, 0, 1, 0, b'x']);
        let crc = crc32fast::hash(&expected);
        expected.extend(crc.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny();
        let bytes = model_to_bytes(&m).unwrap();
        let (back, crc) = model_from_bytes(&bytes).unwrap();
        assert_eq!(crc, crc32fast::hash(&bytes[..bytes.len() - 4]));
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name(), b.name());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back.centers(), m.centers());
        assert_eq!(back.labels(), m.labels());
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn round_trip_with_detector() {
        let mut m = tiny();
        m.init_detector(2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = model_to_bytes(&m).unwrap();
        let (back, _) = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.detector_hidden(), Some(2));
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn flipped_bytes_are_rejected() {
        let bytes = model_to_bytes(&tiny()).unwrap();
        for pos in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(model_from_bytes(&bad).is_err(), "flip at {pos} accepted");
        }
        let mut bad = bytes.clone();
        let mid = bytes.len() - 40;
        bad[mid] ^= 1;
        assert!(matches!(model_from_bytes(&bad), Err(CheckpointError::Checksum { .. })));
    }

    #[test]
    fn distinct_errors() {
        let bytes = model_to_bytes(&tiny()).unwrap();
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(model_from_bytes(&magic), Err(CheckpointError::BadMagic { .. })));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(
            model_from_bytes(&version),
            Err(CheckpointError::VersionMismatch { found: 9, expected: 1 })
        ));

        match model_from_bytes(&bytes[..110]) {
            Err(CheckpointError::Truncated { context }) => assert!(context.contains("backbone.conv1.weight"), "{context}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let m = tiny();
        let mut tensors: Vec<(String, Tensor<f32>)> = vec![(CONFIG_TENSOR.into(), config_tensor(&m))];
        for p in m.params().iter() {
            let value = if p.name() == "embed.bias" {
                Tensor::zeros(&[5])
            } else {
                p.value.clone()
            };
            tensors.push((p.name().into(), value));
        }
        tensors.push((CENTERS_TENSOR.into(), m.centers().clone()));
        let bytes = encode(&tensors, m.labels()).unwrap();
        match model_from_bytes(&bytes) {
            Err(CheckpointError::ShapeMismatch { tensor, expected, found }) => {
                assert_eq!(tensor, "embed.bias");
                assert_eq!((expected, found), (vec![4], vec![5]));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_count_must_match() {
        let m = tiny();
        let mut bytes = model_to_bytes(&m).unwrap();
        // Rewrite the registry with a single label.
        let registry_len = 2 + (2 + 1) * 2 + 4;
        bytes.truncate(bytes.len() - registry_len);
        bytes.extend([1, 0, 1, 0, b'a']);
        let crc = crc32fast::hash(&bytes);
        bytes.extend(crc.to_le_bytes());
        assert!(matches!(model_from_bytes(&bytes), Err(CheckpointError::Invalid(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        let crc = save(&m, &path).unwrap();
        let (back, crc2) = load(&path).unwrap();
        assert_eq!(crc, crc2);
        assert_eq!(back.centers(), m.centers());
        assert!(matches!(load(&dir.path().join("none")), Err(CheckpointError::Io { .. })));
    }
}
