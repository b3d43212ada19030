//! Checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (metadata, architectures, latent track order), then every parameter as a
//! little-endian `f64` in [`SceneModel::param_groups`] order. Floats are
//! stored as raw bits, so save/load round-trips exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FieldArch, LatentTable, RadianceField, SceneMeta, SceneModel};
use crate::error::{Error, Result};
use crate::scene_graph::{ClassId, TrackId};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NSGCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: SceneMeta,
    background: FieldArch,
    classes: Vec<(ClassId, FieldArch)>,
    latent_tracks: Vec<TrackId>,
    latent_dim: usize,
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable config");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl SceneModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: 1,
            meta: self.meta.clone(),
            background: self.background.arch().clone(),
            classes: self
                .classes
                .iter()
                .map(|(c, m)| (*c, m.arch().clone()))
                .collect(),
            latent_tracks: self.latents.tracks(),
            latent_dim: self.latents.dim(),
        };
        let json = serde_json::to_vec(&header).expect("serializable header");
        let n_params: usize = self.param_groups().iter().map(|g| g.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n_params);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for group in self.param_groups() {
            for v in group {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let mut floats = bytes[16 + hlen..].chunks_exact(8).map(|c| {
            f64::from_le_bytes(c.try_into().expect("8 bytes"))
        });
        if (bytes.len() - 16 - hlen) % 8 != 0 {
            return Err(bad("trailing bytes"));
        }
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = floats.by_ref().take(n).collect();
            if v.len() != n {
                return Err(bad("truncated parameters"));
            }
            Ok(v)
        };

        let bg_len = header.background.param_count();
        let background = RadianceField::from_params(header.background, take(bg_len)?)?;
        let mut classes = BTreeMap::new();
        for (c, arch) in header.classes {
            let n = arch.param_count();
            classes.insert(c, RadianceField::from_params(arch, take(n)?)?);
        }
        let n_lat = header.latent_tracks.len() * header.latent_dim;
        let codes = Array2::from_shape_vec((header.latent_tracks.len(), header.latent_dim), take(n_lat)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let latents = LatentTable::from_rows(&header.latent_tracks, codes)?;
        if floats.next().is_some() {
            return Err(bad("unexpected trailing parameters"));
        }
        Ok(SceneModel {
            meta: header.meta,
            background,
            classes,
            latents,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ModelConfig;
    use crate::scene_graph::{BackgroundNode, BoxDims, RigidTransform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> SceneModel {
        let meta = SceneMeta {
            background: BackgroundNode::new(1.0, 10.0, 4, RigidTransform::identity()).unwrap(),
            object_samples: 5,
            class_dims: vec![(ClassId(0), BoxDims::new(4.0, 1.5, 1.8).unwrap())],
            model: ModelConfig {
                latent_dim: 8,
                stage1_width: 16,
                stage2_width: 8,
                ..ModelConfig::default()
            },
            bg_color: [0.0; 3],
            config_hash: "abc".into(),
        };
        SceneModel::new(meta, &[TrackId(1), TrackId(4)], &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn byte_stable_round_trip() {
        let m = small_model();
        let bytes = m.to_bytes();
        let back = SceneModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = small_model().to_bytes();
        assert!(SceneModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(SceneModel::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SceneModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let cfg = ModelConfig::default();
        assert_eq!(config_hash(&cfg), config_hash(&cfg.clone()));
        assert_ne!(config_hash(&cfg), config_hash(&ModelConfig::full_scale()));
    }
}
