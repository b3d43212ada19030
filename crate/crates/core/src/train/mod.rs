//! Joint optimization of the background network, the class networks and the
//! latent table against ground-truth pixels.

mod adam;
mod batch;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, LinearSchedule};
pub use batch::{sample_ray_batch, PixelPools, PixelRef, RayBatch};

use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::field::{config_hash, ModelConfig, ModelGrads, SceneMeta, SceneModel};
use crate::image::ImageBuffer;
use crate::metrics::{psnr, psnr_from_mse};
use crate::render::{render_model_image, render_rays_backward, GraphView, NodeFilter};
use crate::sampling::{box_hit, Ray};
use crate::scene_graph::{graph_for_frame, SceneGraph, TrackId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_base: f64,
    pub lr_final: f64,
    /// Standard deviation of the Gaussian latent prior.
    pub sigma_lat: f64,
    pub seed: u64,
    /// Minimum fraction of each batch drawn inside projected object boxes.
    pub f_obj: f64,
    pub n_planes: usize,
    pub object_samples: usize,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Apply the latent prior to the whole table instead of only the latents
    /// of objects hit by the batch.
    pub regularize_all: bool,
    /// Uniform sub-pixel jitter of training rays.
    pub jitter: bool,
    /// Rays per gradient work item; fixes the reduction order.
    pub chunk_rays: usize,
    pub bg_color: [f64; 3],
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            iterations: 20_000,
            lr_base: 5e-4,
            lr_final: 5e-5,
            sigma_lat: 1.0,
            seed: 0,
            f_obj: 0.5,
            n_planes: 6,
            object_samples: 7,
            checkpoint_every: 5000,
            log_every: 500,
            regularize_all: false,
            jitter: false,
            chunk_rays: 128,
            bg_color: [0.0; 3],
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale network and schedule.
    pub fn full_scale() -> Self {
        Self {
            iterations: 350_000,
            model: ModelConfig::full_scale(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.f_obj) {
            return bad("f_obj must lie in [0, 1]");
        }
        if !(self.sigma_lat > 0.0 && self.sigma_lat.is_finite()) {
            return bad("sigma_lat must be positive");
        }
        if !(self.lr_base > 0.0 && self.lr_final >= 0.0) {
            return bad("learning rates must be positive");
        }
        if self.n_planes == 0 || self.object_samples < 2 {
            return bad("need n_planes >= 1 and object_samples >= 2");
        }
        if self.chunk_rays == 0 || self.log_every == 0 {
            return bad("chunk_rays and log_every must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule {
            base: self.lr_base,
            last: self.lr_final,
            total: self.iterations,
        }
    }
}

/// `sum ||pred - target||^2 + sum ||l||^2 / sigma_lat^2`.
pub fn photometric_loss(
    predicted: &[[f64; 3]],
    target: &[[f64; 3]],
    latents: &[&[f64]],
    sigma_lat: f64,
) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            target.len()
        )));
    }
    Ok(squared_error(predicted, target) + latent_prior(latents, sigma_lat))
}

fn squared_error(predicted: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).powi(2)).sum::<f64>())
        .sum()
}

fn latent_prior(latents: &[&[f64]], sigma_lat: f64) -> f64 {
    latents
        .iter()
        .map(|l| l.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / (sigma_lat * sigma_lat)
}

/// Tracks whose boxes are crossed by at least one ray.
pub fn touched_tracks(views: &[GraphView], rays: &[(usize, Ray)]) -> BTreeSet<TrackId> {
    let mut out = BTreeSet::new();
    for (v, ray) in rays {
        for (k, node) in views[*v].graph.objects.iter().enumerate() {
            if box_hit(ray, k, node).is_some() {
                out.insert(node.track_id);
            }
        }
    }
    out
}

/// Value and gradient of the loss on one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub squared_error: f64,
    pub grads: ModelGrads,
}

/// Loss over `rays` with the given targets, differentiated through the
/// renderer. Gradients are reduced over fixed chunks of `chunk_rays` rays in
/// order, so the result does not depend on the number of worker threads.
pub fn loss_and_gradients(
    model: &SceneModel,
    views: &[GraphView],
    rays: &[(usize, Ray)],
    targets: &[[f64; 3]],
    sigma_lat: f64,
    regularize_all: bool,
    chunk_rays: usize,
) -> Result<BatchLoss> {
    if rays.len() != targets.len() {
        return Err(Error::Shape("one target per ray".into()));
    }
    let bg = model.meta.bg_color;
    let parts: Vec<(f64, ModelGrads)> = rays
        .par_chunks(chunk_rays)
        .zip(targets.par_chunks(chunk_rays))
        .map(|(r, t)| {
            let mut g = model.zero_grads();
            let colors = render_rays_backward(
                model,
                views,
                r,
                bg,
                |k, c| [0, 1, 2].map(|ch| 2.0 * (c[ch] - t[k][ch])),
                &mut g,
            )?;
            Ok((squared_error(&colors, t), g))
        })
        .collect::<Result<_>>()?;
    let mut grads = model.zero_grads();
    let mut sse = 0.0;
    for (e, g) in &parts {
        sse += e;
        grads.add_assign(g);
    }

    let tracks = if regularize_all {
        model.latents.tracks()
    } else {
        touched_tracks(views, rays).into_iter().collect()
    };
    let dim = model.latents.dim();
    let mut rows = Vec::with_capacity(tracks.len());
    for t in &tracks {
        let r = model.latents.row_of(*t)?;
        rows.push(&model.latents.as_slice()[r * dim..(r + 1) * dim]);
        let scale = 2.0 / (sigma_lat * sigma_lat);
        for (g, v) in grads.latents[r * dim..(r + 1) * dim]
            .iter_mut()
            .zip(&model.latents.as_slice()[r * dim..(r + 1) * dim])
        {
            *g += scale * v;
        }
    }
    Ok(BatchLoss {
        loss: sse + latent_prior(&rows, sigma_lat),
        squared_error: sse,
        grads,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub psnr: f64,
    pub lr: f64,
}

impl LogEntry {
    pub fn line(&self) -> String {
        format!("{},{:.6e},{:.4},{:.6e}", self.iter, self.loss, self.psnr, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: usize,
    pub adam: Adam,
    pub lr: f64,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// PSNR of the batch colors.
    pub psnr: f64,
    pub lr: f64,
    pub fallback: bool,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: SceneModel,
    pub state: TrainState,
    graphs: Vec<SceneGraph>,
    images: Vec<ImageBuffer>,
    pools: PixelPools,
    warned_fallback: bool,
}

impl Trainer {
    pub fn new(dataset: &SceneDataset, config: TrainConfig) -> Result<Self> {
        let images = dataset.load_images()?;
        Self::with_images(dataset, images, config)
    }

    pub fn with_images(
        dataset: &SceneDataset,
        images: Vec<ImageBuffer>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.frames.is_empty() {
            return Err(Error::validation("dataset", "no frames"));
        }
        if images.len() != dataset.frames.len() {
            return Err(Error::Shape("one image per frame".into()));
        }
        let bg = dataset.background_node(config.n_planes)?;
        let graphs = (0..dataset.frames.len())
            .map(|k| graph_for_frame(dataset, k, &bg))
            .collect::<Result<Vec<_>>>()?;
        let meta = SceneMeta {
            background: bg,
            object_samples: config.object_samples,
            class_dims: dataset.class_mean_dims(),
            model: config.model.clone(),
            bg_color: config.bg_color,
            config_hash: config_hash(&config),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SceneModel::new(meta, &dataset.track_ids(), &mut rng)?;
        let sizes: Vec<usize> = model.param_groups().iter().map(|g| g.len()).collect();
        let pools = PixelPools::new(&graphs)?;
        Ok(Self {
            state: TrainState {
                iteration: 0,
                adam: Adam::new(&sizes),
                lr: config.schedule().lr(0),
                rng,
            },
            config,
            model,
            graphs,
            images,
            pools,
            warned_fallback: false,
        })
    }

    pub fn graphs(&self) -> &[SceneGraph] {
        &self.graphs
    }

    pub fn images(&self) -> &[ImageBuffer] {
        &self.images
    }

    fn views(&self) -> Vec<GraphView<'_>> {
        self.graphs
            .iter()
            .map(|g| GraphView::new(g, self.config.object_samples))
            .collect()
    }

    /// Rays and targets for a batch of pixels.
    pub fn batch_rays(
        &mut self,
        batch: &RayBatch,
    ) -> Result<(Vec<(usize, Ray)>, Vec<[f64; 3]>)> {
        let mut rays = Vec::with_capacity(batch.pixels.len());
        let mut targets = Vec::with_capacity(batch.pixels.len());
        for p in &batch.pixels {
            let jitter = self
                .config
                .jitter
                .then(|| (self.state.rng.gen_range(-0.5..0.5), self.state.rng.gen_range(-0.5..0.5)));
            let view = GraphView::new(&self.graphs[p.frame], self.config.object_samples);
            rays.push((p.frame, view.ray((p.i, p.j), jitter)?));
            targets.push(self.images[p.frame].get(p.i, p.j));
        }
        Ok((rays, targets))
    }

    /// Loss and gradients on an explicit batch without updating anything.
    pub fn evaluate_batch(&self, rays: &[(usize, Ray)], targets: &[[f64; 3]]) -> Result<BatchLoss> {
        let views = self.views();
        loss_and_gradients(
            &self.model,
            &views,
            rays,
            targets,
            self.config.sigma_lat,
            self.config.regularize_all,
            self.config.chunk_rays,
        )
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let lr = self.config.schedule().lr(self.state.iteration);
        self.state.lr = lr;
        let batch = sample_ray_batch(
            &self.pools,
            self.config.batch_size,
            self.config.f_obj,
            &mut self.state.rng,
        )?;
        if batch.fallback && !self.warned_fallback {
            log::warn!("no projected object boxes in any frame; sampling rays uniformly");
            self.warned_fallback = true;
        }
        let (rays, targets) = self.batch_rays(&batch)?;
        let out = self.evaluate_batch(&rays, &targets)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged(self.state.iteration));
        }
        let grads = out.grads.groups();
        let mut params = self.model.param_groups_mut();
        if !self.state.adam.step(&mut params, &grads, lr) {
            return Err(Error::Diverged(self.state.iteration));
        }
        self.state.iteration += 1;
        Ok(StepStats {
            loss: out.loss,
            psnr: psnr_from_mse(out.squared_error / (3 * rays.len()) as f64),
            lr,
            fallback: batch.fallback,
        })
    }

    /// Renders every training frame with the current model.
    pub fn render_frames(&self) -> Result<Vec<ImageBuffer>> {
        self.graphs
            .iter()
            .map(|g| render_model_image(g, &self.model, NodeFilter::All))
            .collect()
    }

    /// Mean per-frame PSNR over the training images.
    pub fn train_psnr(&self) -> Result<f64> {
        mean_psnr(&self.render_frames()?, &self.images)
    }

    /// Runs the remaining iterations. Log lines carry the batch PSNR except
    /// the last one, which carries the mean per-frame PSNR over all training
    /// frames. On divergence the last good model is written to `checkpoint`.
    pub fn run(
        &mut self,
        checkpoint: Option<&Path>,
        mut on_log: impl FnMut(&LogEntry),
    ) -> Result<Vec<LogEntry>> {
        let total = self.config.iterations;
        let mut log = Vec::new();
        while self.state.iteration < total {
            let stats = match self.step() {
                Ok(s) => s,
                Err(Error::Diverged(it)) => {
                    if let Some(p) = checkpoint {
                        self.model.save(p)?;
                    }
                    return Err(Error::Diverged(it));
                }
                Err(e) => return Err(e),
            };
            let it = self.state.iteration;
            if it == total || it % self.config.log_every == 0 {
                let psnr = if it == total { self.train_psnr()? } else { stats.psnr };
                let entry = LogEntry {
                    iter: it,
                    loss: stats.loss,
                    psnr,
                    lr: stats.lr,
                };
                on_log(&entry);
                log.push(entry);
            }
            if let Some(p) = checkpoint {
                let every = self.config.checkpoint_every;
                if it == total || (every > 0 && it % every == 0) {
                    self.model.save(p)?;
                }
            }
        }
        Ok(log)
    }
}

/// Mean of per-image PSNR values.
pub fn mean_psnr(rendered: &[ImageBuffer], truth: &[ImageBuffer]) -> Result<f64> {
    if rendered.len() != truth.len() || rendered.is_empty() {
        return Err(Error::Shape("need matching, non-empty image lists".into()));
    }
    let mut sum = 0.0;
    for (a, b) in rendered.iter().zip(truth) {
        sum += psnr(a, b)?;
    }
    Ok(sum / rendered.len() as f64)
}

/// Metrics log written next to the checkpoint `out`.
pub fn log_path_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}
