//! Versioned binary model container. The byte layout is described in
//! `docs/model-format.md`; all integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::convnet::{ArchConfig, ConvNetParams, ParamSlot};
use super::forest::{ForestConfig, ForestModel, Node, Tree};
use super::hybrid::{HybridModel, Provenance};
use super::ModelError;

pub const MAGIC: &[u8; 4] = b"ICSM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    layout: Vec<ParamSlot>,
    provenance: Provenance,
    seed: u64,
    train_samples: u64,
    forest: ForestConfig,
}

const LEAF: u8 = 0;
const SPLIT: u8 = 1;

impl HybridModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            arch: self.convnet.arch().clone(),
            layout: self.convnet.layout().to_vec(),
            provenance: self.provenance.clone(),
            seed: self.seed,
            train_samples: self.train_samples,
            forest: self.forest_config.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.patch_threshold.to_le_bytes());
        out.extend_from_slice(&self.slide_threshold.to_le_bytes());
        out.extend_from_slice(&(self.convnet.len() as u64).to_le_bytes());
        for v in self.convnet.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.forest.n_features as u32).to_le_bytes());
        out.extend_from_slice(&(self.forest.trees.len() as u32).to_le_bytes());
        for t in &self.forest.trees {
            out.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
            for n in &t.nodes {
                match *n {
                    Node::Leaf { value } => {
                        out.push(LEAF);
                        out.extend_from_slice(&value.to_le_bytes());
                    }
                    Node::Split { feature, threshold, left, right } => {
                        out.push(SPLIT);
                        out.extend_from_slice(&feature.to_le_bytes());
                        out.extend_from_slice(&threshold.to_le_bytes());
                        out.extend_from_slice(&left.to_le_bytes());
                        out.extend_from_slice(&right.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::Format("not a model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelError::VersionMismatch { found: version, expected: MODEL_FORMAT_VERSION });
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| ModelError::Format(format!("header: {e}")))?;
        let patch_threshold = r.f64()?;
        let slide_threshold = r.f64()?;
        let n = r.u64()? as usize;
        if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(ModelError::Format("parameter count exceeds file size".into()));
        }
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let convnet = ConvNetParams::from_values(header.arch, values)?;
        if convnet.layout() != header.layout.as_slice() {
            return Err(ModelError::Format("parameter layout does not match the architecture".into()));
        }
        let n_features = r.u32()? as usize;
        let n_trees = r.u32()? as usize;
        let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
        for _ in 0..n_trees {
            let nn = r.u32()? as usize;
            if nn > r.remaining() {
                return Err(ModelError::Format("node count exceeds file size".into()));
            }
            let mut nodes = Vec::with_capacity(nn);
            for _ in 0..nn {
                nodes.push(match r.u8()? {
                    LEAF => Node::Leaf { value: r.f64()? },
                    SPLIT => Node::Split { feature: r.u32()?, threshold: r.f64()?, left: r.u32()?, right: r.u32()? },
                    t => return Err(ModelError::Format(format!("unknown node tag {t}"))),
                });
            }
            trees.push(Tree { nodes });
        }
        if r.remaining() != 0 {
            return Err(ModelError::Format(format!("{} trailing bytes", r.remaining())));
        }
        let model = HybridModel {
            convnet,
            forest: ForestModel { n_features, trees },
            patch_threshold,
            slide_threshold,
            provenance: header.provenance,
            seed: header.seed,
            train_samples: header.train_samples,
            forest_config: header.forest,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io { path: path.to_path_buf(), source };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if n > self.remaining() {
            return Err(ModelError::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train_forest;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> HybridModel {
        let arch = ArchConfig { input_side: 16, ..Default::default() };
        let convnet = ConvNetParams::init(arch, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..32).map(|_| rng.random()).collect()).collect();
        let y: Vec<bool> = x.iter().map(|v| v[0] > 0.5).collect();
        let cfg = ForestConfig { n_trees: 5, ..Default::default() };
        let forest = train_forest(&x, &y, &cfg, 1).unwrap();
        HybridModel {
            convnet,
            forest,
            patch_threshold: 0.4321,
            slide_threshold: 0.1 + 0.2,
            provenance: Provenance::Calibrated { center: "target".into() },
            seed: u64::MAX,
            train_samples: 123,
            forest_config: cfg,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let bytes = m.to_bytes();
        let back = HybridModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.icsm");
        m.save(&p).unwrap();
        assert_eq!(HybridModel::load(&p).unwrap(), m);
    }

    #[test]
    fn rejects_bad_files() {
        let mut bytes = model().to_bytes();
        assert!(matches!(HybridModel::from_bytes(&bytes[..bytes.len() - 1]), Err(ModelError::Format(_))));
        assert!(matches!(HybridModel::from_bytes(b"nope"), Err(ModelError::Format(_))));
        bytes[4] = 9;
        assert!(matches!(HybridModel::from_bytes(&bytes), Err(ModelError::VersionMismatch { found: 9, expected: 1 })));
    }
}
