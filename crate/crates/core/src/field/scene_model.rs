use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{InputNorm, LatentTable, ModelConfig, RadianceField};
use crate::error::{Error, Result};
use crate::scene_graph::{BackgroundNode, BoxDims, ClassId, TrackId};

/// Scene-level settings stored next to the trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub background: BackgroundNode,
    pub object_samples: usize,
    /// Mean (shadow-scaled) box dimensions per class seen in training.
    pub class_dims: Vec<(ClassId, BoxDims)>,
    pub model: ModelConfig,
    pub bg_color: [f64; 3],
    pub config_hash: String,
}

impl SceneMeta {
    /// Positions and object locations are centred on the reference camera and
    /// scaled by the far clip before encoding.
    pub fn scene_norm(&self) -> InputNorm {
        let c = self.background.reference_pose.translation();
        InputNorm {
            offset: [c.x, c.y, c.z],
            scale: 1.0 / self.background.far,
        }
    }

    pub fn class_dims(&self, class: ClassId) -> Option<BoxDims> {
        self.class_dims
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, d)| *d)
    }
}

/// Everything a trained neural scene graph needs to render: the background
/// network, one network per object class and the latent table.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub meta: SceneMeta,
    pub background: RadianceField,
    pub classes: BTreeMap<ClassId, RadianceField>,
    pub latents: LatentTable,
}

impl SceneModel {
    pub fn new(meta: SceneMeta, tracks: &[TrackId], rng: &mut ChaCha8Rng) -> Result<Self> {
        if meta.object_samples < 2 {
            return Err(Error::Config("need at least 2 object samples".into()));
        }
        let norm = meta.scene_norm();
        let background = RadianceField::new(meta.model.background_arch(norm), rng)?;
        let mut classes = BTreeMap::new();
        for (class, _) in &meta.class_dims {
            classes.insert(*class, RadianceField::new(meta.model.object_arch(norm), rng)?);
        }
        let latents = LatentTable::random(tracks, meta.model.latent_dim, meta.model.latent_init_std, rng);
        Ok(Self {
            meta,
            background,
            classes,
            latents,
        })
    }

    pub fn class_model(&self, class: ClassId) -> Result<&RadianceField> {
        self.classes.get(&class).ok_or(Error::MissingClassModel(class.0))
    }

    /// Parameter groups in a fixed order: background, classes by id, latents.
    pub fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut groups: Vec<&mut [f64]> = vec![self.background.params_mut()];
        for m in self.classes.values_mut() {
            groups.push(m.params_mut());
        }
        groups.push(self.latents.as_slice_mut());
        groups
    }

    pub fn param_groups(&self) -> Vec<&[f64]> {
        let mut groups: Vec<&[f64]> = vec![self.background.params()];
        for m in self.classes.values() {
            groups.push(m.params());
        }
        groups.push(self.latents.as_slice());
        groups
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            background: vec![0.0; self.background.n_params()],
            classes: self
                .classes
                .iter()
                .map(|(c, m)| (*c, vec![0.0; m.n_params()]))
                .collect(),
            latents: vec![0.0; self.latents.as_slice().len()],
        }
    }
}

/// Gradient buffers shaped like a [`SceneModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub background: Vec<f64>,
    pub classes: BTreeMap<ClassId, Vec<f64>>,
    /// Row-major, same layout as the latent table.
    pub latents: Vec<f64>,
}

impl ModelGrads {
    pub fn groups(&self) -> Vec<&[f64]> {
        let mut g: Vec<&[f64]> = vec![&self.background];
        for v in self.classes.values() {
            g.push(v);
        }
        g.push(&self.latents);
        g
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.background, &other.background);
        for (c, g) in &mut self.classes {
            if let Some(o) = other.classes.get(c) {
                add(g, o);
            }
        }
        add(&mut self.latents, &other.latents);
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.groups()
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
