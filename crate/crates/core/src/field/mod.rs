//! Radiance field models: Fourier encodings, the background and
//! latent-conditioned object networks, and the latent table.

mod checkpoint;
mod encoding;
mod latent;
mod mlp;
mod scene_model;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, CHECKPOINT_MAGIC};
pub use encoding::FourierEncoding;
pub use latent::LatentTable;
pub use mlp::{
    FieldArch, FieldBatch, FieldEval, FieldTrace, InputGradRequest, InputGrads, InputNorm,
    RadianceField,
};
pub use scene_model::{ModelGrads, SceneMeta, SceneModel};

use crate::error::{Error, Result};
use crate::scene_graph::Vec3;

/// Field value at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub color: [f64; 3],
    pub density: f64,
    pub feature: Vec<f64>,
}

/// Network sizes and encodings shared by the background and class models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub position_freqs: usize,
    pub direction_freqs: usize,
    pub pose_freqs: usize,
    pub stage1_depth: usize,
    pub stage1_width: usize,
    pub skips: Vec<usize>,
    pub stage2_depth: usize,
    pub stage2_width: usize,
    pub latent_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            position_freqs: 10,
            direction_freqs: 4,
            pose_freqs: 4,
            stage1_depth: 4,
            stage1_width: 64,
            skips: vec![2],
            stage2_depth: 1,
            stage2_width: 32,
            latent_init_std: 0.01,
        }
    }
}

impl ModelConfig {
    /// Eight 256-wide stage-one layers with a skip at layer four.
    pub fn full_scale() -> Self {
        Self {
            stage1_depth: 8,
            stage1_width: 256,
            skips: vec![4],
            stage2_depth: 1,
            stage2_width: 128,
            ..Self::default()
        }
    }

    pub fn background_arch(&self, position_norm: InputNorm) -> FieldArch {
        FieldArch {
            position_encoding: FourierEncoding::new(self.position_freqs, true),
            direction_encoding: FourierEncoding::new(self.direction_freqs, true),
            pose_encoding: None,
            latent_dim: 0,
            stage1_depth: self.stage1_depth,
            stage1_width: self.stage1_width,
            skips: self.skips.clone(),
            feature_dim: self.stage1_width,
            stage2_depth: self.stage2_depth,
            stage2_width: self.stage2_width,
            position_norm,
            pose_norm: InputNorm::IDENTITY,
        }
    }

    pub fn object_arch(&self, pose_norm: InputNorm) -> FieldArch {
        FieldArch {
            pose_encoding: Some(FourierEncoding::new(self.pose_freqs, true)),
            latent_dim: self.latent_dim,
            position_norm: InputNorm::IDENTITY,
            pose_norm,
            ..self.background_arch(InputNorm::IDENTITY)
        }
    }
}

fn row(v: &Vec3) -> Array2<f64> {
    Array2::from_shape_vec((1, 3), vec![v.x, v.y, v.z]).expect("1x3")
}

fn single_output(model: &RadianceField, batch: &FieldBatch) -> Result<FieldOutput> {
    let eval = model.forward(batch, true)?;
    let feature = eval.features().expect("recorded").row(0).to_vec();
    Ok(FieldOutput {
        color: [eval.rgb[[0, 0]], eval.rgb[[0, 1]], eval.rgb[[0, 2]]],
        density: eval.sigma[0],
        feature,
    })
}

/// Background field at world point `x` seen along unit direction `d`.
pub fn background_forward(model: &RadianceField, x: &Vec3, d: &Vec3) -> Result<FieldOutput> {
    if model.arch().is_object_model() {
        return Err(Error::Config("expected a background model".into()));
    }
    let (xr, dr) = (row(x), row(d));
    single_output(
        model,
        &FieldBatch {
            x: xr.view(),
            d: dr.view(),
            p: None,
            latents: None,
        },
    )
}

/// Class field for the object with latent `latent`, at object-frame point
/// `x_o`, object-frame direction `d_o` and world location `p_o`.
pub fn object_forward(
    model: &RadianceField,
    latent: &[f64],
    x_o: &Vec3,
    d_o: &Vec3,
    p_o: &Vec3,
) -> Result<FieldOutput> {
    if !model.arch().is_object_model() {
        return Err(Error::Config("expected an object class model".into()));
    }
    if latent.len() != model.arch().latent_dim {
        return Err(Error::Shape(format!(
            "latent dimension {} but model expects {}",
            latent.len(),
            model.arch().latent_dim
        )));
    }
    let (xr, dr, pr) = (row(x_o), row(d_o), row(p_o));
    let table = ArrayView2::from_shape((1, latent.len()), latent).expect("1xL");
    single_output(
        model,
        &FieldBatch {
            x: xr.view(),
            d: dr.view(),
            p: Some(pr.view()),
            latents: Some((table, &[0])),
        },
    )
}

#[cfg(test)]
mod tests;
