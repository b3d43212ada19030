//! Object detection by inverse rendering: candidate boxes placed on a
//! bird's-eye-view anchor grid are refined by gradient descent on an l1
//! image loss through the frozen scene model.

mod bev;
mod candidate;
mod dual;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bev::{footprint, footprint_iou};
pub use candidate::{BackgroundRay, BoxMode, Candidate, Evaluation, Scene, N_GEO};
pub use dual::Dual;

use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::field::SceneModel;
use crate::image::ImageBuffer;
use crate::render::{composite, FieldSource};
use crate::sampling::{assemble_samples, PlaneStack};
use crate::scene_graph::{projected_box, BoxDims, ClassId, PixelRect, RigidTransform, SceneGraph, Vec3};
use crate::train::Adam;

/// Mean absolute RGB difference over a pixel rectangle.
pub fn region_l1(observed: &ImageBuffer, rendered: &ImageBuffer, region: &PixelRect) -> Result<f64> {
    if !observed.same_size(rendered) {
        return Err(Error::Shape("observed and rendered sizes differ".into()));
    }
    if region.x1 > observed.width() || region.y1 > observed.height() || region.is_empty() {
        return Err(Error::Shape(format!("region {region:?} outside the image")));
    }
    let sum: f64 = region
        .pixels()
        .map(|(i, j)| {
            let (a, b) = (observed.get(i, j), rendered.get(i, j));
            (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>()
        })
        .sum();
    Ok(sum / (3 * region.area()) as f64)
}

/// Candidate positions on the ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub x_range: [f64; 2],
    pub z_range: [f64; 2],
    pub spacing: f64,
    pub yaws_deg: Vec<f64>,
    /// Boxes rest with their bottom face at this height.
    pub ground_y: f64,
}

impl AnchorGrid {
    pub fn validate(&self) -> Result<()> {
        let ok = self.spacing > 0.0
            && self.x_range[1] > self.x_range[0]
            && self.z_range[1] > self.z_range[0]
            && !self.yaws_deg.is_empty()
            && self.ground_y.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config("anchor grid needs spacing > 0, non-empty ranges and yaws".into()))
        }
    }

    /// Covers every training track position with `margin` to spare; the
    /// ground height is the mean bottom of the training boxes.
    pub fn from_dataset(ds: &SceneDataset, margin: f64, spacing: f64) -> Result<Self> {
        let boxes: Vec<_> = ds.frames.iter().flat_map(|f| &f.tracks).collect();
        if boxes.is_empty() {
            return Err(Error::Config("no tracks to place anchors around".into()));
        }
        let (mut x0, mut x1, mut z0, mut z1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        let mut ground = 0.0;
        for b in &boxes {
            let t = b.pose.translation();
            x0 = x0.min(t.x);
            x1 = x1.max(t.x);
            z0 = z0.min(t.z);
            z1 = z1.max(t.z);
            ground += t.y - b.raw_dims.height / 2.0;
        }
        let g = Self {
            x_range: [x0 - margin, x1 + margin],
            z_range: [z0 - margin, z1 + margin],
            spacing,
            yaws_deg: vec![0.0, 90.0, 180.0, 270.0],
            ground_y: ground / boxes.len() as f64,
        };
        g.validate()?;
        Ok(g)
    }

    /// `(x, z, yaw radians)` in row-major order.
    pub fn anchors(&self) -> Vec<(f64, f64, f64)> {
        let nx = ((self.x_range[1] - self.x_range[0]) / self.spacing).floor() as usize + 1;
        let nz = ((self.z_range[1] - self.z_range[0]) / self.spacing).floor() as usize + 1;
        let mut out = Vec::with_capacity(nx * nz * self.yaws_deg.len());
        for a in 0..nz {
            for b in 0..nx {
                for y in &self.yaws_deg {
                    out.push((
                        self.x_range[0] + b as f64 * self.spacing,
                        self.z_range[0] + a as f64 * self.spacing,
                        y.to_radians(),
                    ));
                }
            }
        }
        out
    }
}

/// Pose gradient used by refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseGradient {
    /// Pointwise derivative through the renderer of the soft-silhouette
    /// loss.
    Analytic,
    /// Derivative of the exact loss smoothed over a small box around the
    /// pose. The exact loss is piecewise constant in the silhouette and its
    /// pointwise derivative follows the networks' fine detail rather than
    /// the overall alignment.
    Smoothed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub steps: usize,
    pub lr_position: f64,
    pub lr_yaw: f64,
    pub lr_dims: f64,
    pub lr_latent: f64,
    /// Silhouette softness in pixels for analytic pose gradients, annealed
    /// from the first to the second.
    pub tau: [f64; 2],
    pub pose_gradient: PoseGradient,
    /// Smoothing half-width in meters, annealed from the first to the second.
    pub smoothing: [f64; 2],
    /// Anchors refined after prescreening.
    pub max_candidates: usize,
    /// Absolute residual threshold; calibrated when absent.
    pub threshold: Option<f64>,
    pub calibration_regions: usize,
    pub calibration_quantile: f64,
    /// An accepted candidate must also explain the region at least this much
    /// better than the background alone (residual ratio).
    pub empty_ratio: f64,
    pub nms_iou: f64,
    /// Dimensions stay within this relative distance of the class mean.
    pub dims_bound: f64,
    /// Candidates are scored over their projected box grown by this factor.
    pub region_scale: f64,
    /// Starting latent codes tried per anchor.
    pub latent_inits: usize,
    pub seed: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            steps: 60,
            lr_position: 0.08,
            lr_yaw: 0.03,
            lr_dims: 0.03,
            lr_latent: 1e-4,
            tau: [1.5, 0.3],
            pose_gradient: PoseGradient::Smoothed,
            smoothing: [0.1, 0.02],
            max_candidates: 6,
            threshold: None,
            calibration_regions: 200,
            calibration_quantile: 0.99,
            empty_ratio: 0.5,
            nms_iou: 0.3,
            dims_bound: 0.3,
            region_scale: 1.5,
            latent_inits: 8,
            seed: 0,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self
            .tau.iter().all(|t| *t > 0.0)
            && self.smoothing.iter().all(|h| *h > 0.0)
            && (0.0..=1.0).contains(&self.calibration_quantile)
            && self.empty_ratio > 0.0
            && (0.0..1.0).contains(&self.dims_bound)
            && self.calibration_regions > 0
            && self.region_scale >= 1.0
            && self.latent_inits > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid detection settings".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: ClassId,
    pub pose: RigidTransform,
    pub dims: BoxDims,
    pub latent: Vec<f64>,
    pub residual: f64,
    /// Residual of the anchor before refinement.
    pub initial_residual: f64,
    /// Residual of the background alone over the same region.
    pub empty_residual: f64,
    pub accepted: bool,
}

impl Detection {
    /// `x z yaw L H W residual accepted`, yaw in degrees.
    pub fn line(&self) -> String {
        let t = self.pose.translation();
        format!(
            "{:.4} {:.4} {:.3} {:.4} {:.4} {:.4} {:.6} {}",
            t.x,
            t.z,
            self.pose.yaw().to_degrees(),
            self.dims.length,
            self.dims.height,
            self.dims.width,
            self.residual,
            u8::from(self.accepted)
        )
    }
}

#[derive(Debug, Clone)]
pub struct DetectOutput {
    /// Accepted detections after suppression, then rejected candidates.
    pub detections: Vec<Detection>,
    pub threshold: f64,
}

impl DetectOutput {
    pub fn accepted(&self) -> impl Iterator<Item = &Detection> {
        self.detections.iter().filter(|d| d.accepted)
    }
}

/// Shades the background of every pixel of `graph`'s camera once.
pub fn background_rays(model: &SceneModel, graph: &SceneGraph) -> Result<Vec<BackgroundRay>> {
    let mut g = graph.clone();
    g.objects.clear();
    let planes = PlaneStack::new(&g.background);
    let k = g.intrinsics;
    let mut sets = Vec::with_capacity(k.width * k.height);
    for j in 0..k.height {
        for i in 0..k.width {
            let ray = crate::sampling::generate_ray(&k, &g.camera_pose, (i, j), None)?;
            sets.push(assemble_samples(&planes.bound(ray), &g, &planes, 2)?);
        }
    }
    let n: usize = sets.iter().map(|s| s.len()).sum();
    let mut x = ndarray::Array2::zeros((n, 3));
    let mut d = ndarray::Array2::zeros((n, 3));
    let mut r = 0;
    for s in &sets {
        for p in &s.samples {
            for a in 0..3 {
                x[[r, a]] = p.x[a];
                d[[r, a]] = s.ray.direction[a];
            }
            r += 1;
        }
    }
    let (sigma, rgb) = model.shade_background(x.view(), d.view())?;
    let mut r = 0;
    let bg = model.meta.bg_color;
    sets.into_iter()
        .map(|s| {
            let samples: Vec<_> = s
                .samples
                .iter()
                .map(|p| {
                    let out = crate::render::ShadedSample {
                        t: p.t,
                        sigma: sigma[r],
                        rgb: [rgb[[r, 0]], rgb[[r, 1]], rgb[[r, 2]]],
                    };
                    r += 1;
                    out
                })
                .collect();
            let color = composite(&samples, s.ray.t_far, bg)?;
            Ok(BackgroundRay {
                ray: s.ray,
                samples,
                color,
            })
        })
        .collect()
}

/// Image of the cached background composites.
pub fn background_image(bg: &[BackgroundRay], width: usize, height: usize) -> Result<ImageBuffer> {
    ImageBuffer::from_pixels(width, height, bg.iter().map(|b| b.color).collect())
}

fn anchor_region(
    graph: &SceneGraph,
    grid: &AnchorGrid,
    a: (f64, f64, f64),
    dims: &BoxDims,
    scale: f64,
) -> Option<PixelRect> {
    let pose = RigidTransform::from_yaw(a.2, Vec3::new(a.0, grid.ground_y + dims.height / 2.0, a.1));
    let grown = BoxDims::new(dims.length * scale, dims.height * scale, dims.width * scale).ok()?;
    projected_box(&graph.intrinsics, &graph.camera_pose, &pose, &grown)
}

/// Quantile of the l1 difference between `observed` and `background` over
/// the scoring regions of randomly drawn anchors.
pub fn calibrate_threshold(
    observed: &ImageBuffer,
    background: &ImageBuffer,
    graph: &SceneGraph,
    grid: &AnchorGrid,
    dims: &BoxDims,
    config: &DetectConfig,
) -> Result<f64> {
    let regions: Vec<PixelRect> = grid
        .anchors()
        .into_iter()
        .filter_map(|a| anchor_region(graph, grid, a, dims, config.region_scale))
        .collect();
    if regions.is_empty() {
        return Err(Error::Config("no anchor projects into the image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut vals = (0..config.calibration_regions)
        .map(|_| region_l1(observed, background, regions.choose(&mut rng).expect("non-empty")))
        .collect::<Result<Vec<f64>>>()?;
    vals.sort_by(f64::total_cmp);
    let idx = ((vals.len() - 1) as f64 * config.calibration_quantile).round() as usize;
    Ok(vals[idx])
}

/// Starting latent codes: the table mean, then up to `n - 1` evenly spaced
/// trained codes.
fn initial_codes(model: &SceneModel, n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![model.latents.mean()];
    let codes = model.latents.codes();
    let rows = codes.nrows();
    let k = rows.min(n.saturating_sub(1));
    for r in 0..k {
        out.push(codes.row(r * rows / k).to_vec());
    }
    out
}

/// Derivative of the loss averaged over a box of half-width `h` in each
/// coordinate, by central differences. Yaw uses the angle that moves the box
/// ends by `h`.
fn smoothed_gradient(
    scene: &Scene,
    cand: &Candidate,
    region: &PixelRect,
    mode: BoxMode,
    h: f64,
) -> Result<[f64; N_GEO]> {
    let g = cand.geo();
    let mut out = [0.0; N_GEO];
    for (k, o) in out.iter_mut().enumerate() {
        let hk = if k == 2 { 2.0 * h / g[3] } else { h };
        let at = |s: f64| -> Result<f64> {
            let mut c = cand.clone();
            let mut p = g;
            p[k] += s * hk;
            c.set_geo(&p);
            Ok(scene.evaluate(&c, region, mode, false)?.residual)
        };
        *o = (at(1.0)? - at(-1.0)?) / (2.0 * hk);
    }
    Ok(out)
}

/// Refinement result; the region is fixed for the whole run so residuals
/// are comparable.
struct Refined {
    class_id: ClassId,
    cand: Candidate,
    region: PixelRect,
    initial: f64,
    /// Reduction of the summed l1 error over the region.
    gain: f64,
}

fn refine(
    scene: &Scene,
    start: Candidate,
    region: PixelRect,
    mean_dims: [f64; 3],
    config: &DetectConfig,
) -> Result<(Candidate, f64)> {
    let exact = |c: &Candidate| -> Result<f64> {
        Ok(scene.evaluate(c, &region, BoxMode::Exact, false)?.residual)
    };
    let mut cand = start;
    let initial = exact(&cand)?;
    let mut best = (initial, cand.clone());
    let mut adams = [Adam::new(&[2]), Adam::new(&[1]), Adam::new(&[3]), Adam::new(&[cand.latent.len()])];
    for step in 0..config.steps {
        let f = if config.steps > 1 { step as f64 / (config.steps - 1) as f64 } else { 0.0 };
        let tau = config.tau[0] + (config.tau[1] - config.tau[0]) * f;
        let mode = match config.pose_gradient {
            PoseGradient::Analytic => BoxMode::Relaxed { tau },
            PoseGradient::Smoothed => BoxMode::Exact,
        };
        let ev = scene.evaluate(&cand, &region, mode, true)?;
        let decay = 1.0 - 0.8 * f;
        let g = cand.geo();
        let gg = match config.pose_gradient {
            PoseGradient::Analytic => ev.geo_grad,
            PoseGradient::Smoothed => {
                let h = config.smoothing[0] + (config.smoothing[1] - config.smoothing[0]) * f;
                smoothed_gradient(scene, &cand, &region, mode, h)?
            }
        };
        let (mut pos, mut yaw, mut dims) = ([g[0], g[1]], [g[2]], [g[3], g[4], g[5]]);
        let ok = adams[0].step(&mut [&mut pos], &[&[gg[0], gg[1]]], config.lr_position * decay)
            && adams[1].step(&mut [&mut yaw], &[&[gg[2]]], config.lr_yaw * decay)
            && adams[2].step(&mut [&mut dims], &[&[gg[3], gg[4], gg[5]]], config.lr_dims * decay)
            && adams[3].step(&mut [&mut cand.latent], &[&ev.latent_grad], config.lr_latent * decay);
        if !ok {
            break;
        }
        for k in 0..3 {
            let m = mean_dims[k];
            dims[k] = dims[k].clamp(m * (1.0 - config.dims_bound), m * (1.0 + config.dims_bound));
        }
        cand.set_geo(&[pos[0], pos[1], yaw[0], dims[0], dims[1], dims[2]]);
        let res = exact(&cand)?;
        if res < best.0 {
            best = (res, cand.clone());
        }
    }
    Ok((best.1, initial))
}

/// Searches `observed` for objects of every trained class.
///
/// Anchors are ranked by how much better than the bare background they
/// explain their region, the best few are refined, and the refined
/// candidates are then accepted greedily: each is scored against the
/// background plus every candidate accepted before it.
pub fn detect(
    observed: &ImageBuffer,
    model: &SceneModel,
    graph: &SceneGraph,
    grid: &AnchorGrid,
    config: &DetectConfig,
) -> Result<DetectOutput> {
    grid.validate()?;
    config.validate()?;
    if model.classes.is_empty() {
        return Err(Error::Config("checkpoint has no trained object classes".into()));
    }
    let k = graph.intrinsics;
    if observed.width() != k.width || observed.height() != k.height {
        return Err(Error::Shape("observed image does not match the camera".into()));
    }
    let bg = background_rays(model, graph)?;
    let bg_img = background_image(&bg, k.width, k.height)?;
    let codes = initial_codes(model, config.latent_inits);
    let first_field = model.classes.values().next().expect("non-empty");
    let template = Scene {
        field: first_field,
        width: k.width,
        background: &bg,
        observed,
        ground_y: grid.ground_y,
        object_samples: model.meta.object_samples,
        intrinsics: &graph.intrinsics,
        camera: &graph.camera_pose,
        bg_color: model.meta.bg_color,
    };

    let mut refined = Vec::new();
    let mut threshold = config.threshold;
    for (class, field) in &model.classes {
        let dims = model
            .meta
            .class_dims(*class)
            .ok_or(Error::MissingClassModel(class.0))?;
        if threshold.is_none() {
            threshold = Some(calibrate_threshold(observed, &bg_img, graph, grid, &dims, config)?);
        }
        let scene = Scene { field, ..template };
        let mean_dims = [dims.length, dims.height, dims.width];
        let make = |a: (f64, f64, f64), code: &[f64]| Candidate {
            x: a.0,
            z: a.1,
            yaw: a.2,
            dims: mean_dims,
            latent: code.to_vec(),
        };

        // Prescreen every anchor with every starting code.
        let jobs: Vec<((f64, f64, f64), PixelRect, usize)> = grid
            .anchors()
            .into_iter()
            .filter_map(|a| anchor_region(graph, grid, a, &dims, config.region_scale).map(|r| (a, r)))
            .flat_map(|(a, r)| (0..codes.len()).map(move |c| (a, r, c)))
            .collect();
        let mut scored: Vec<(f64, f64, (f64, f64, f64), PixelRect, usize)> = jobs
            .into_par_iter()
            .map(|(a, r, c)| {
                let res = scene.evaluate(&make(a, &codes[c]), &r, BoxMode::Exact, false)?.residual;
                Ok((res / scene.empty_residual(&r).max(1e-12), res, a, r, c))
            })
            .collect::<Result<_>>()?;
        scored.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut picked: Vec<((f64, f64, f64), PixelRect, usize)> = Vec::new();
        for (ratio, _, a, r, c) in scored {
            if picked.len() >= config.max_candidates || ratio >= 1.0 {
                break;
            }
            let fa = footprint(a.0, a.1, a.2, dims.length, dims.width);
            let clear = picked.iter().all(|(p, _, _)| {
                footprint_iou(&fa, &footprint(p.0, p.1, p.2, dims.length, dims.width)) < 0.1
            });
            if clear {
                picked.push((a, r, c));
            }
        }

        let done: Vec<Refined> = picked
            .into_par_iter()
            .map(|(a, region, c)| {
                let (cand, initial) = refine(&scene, make(a, &codes[c]), region, mean_dims, config)?;
                let res = scene.evaluate(&cand, &region, BoxMode::Exact, false)?.residual;
                let gain = (scene.empty_residual(&region) - res) * region.area() as f64;
                Ok(Refined {
                    class_id: *class,
                    cand,
                    region,
                    initial,
                    gain,
                })
            })
            .collect::<Result<_>>()?;
        refined.extend(done);
    }
    let thr = threshold.unwrap_or(f64::INFINITY);

    // Greedy acceptance, largest error reduction first.
    refined.sort_by(|a, b| b.gain.total_cmp(&a.gain));
    let mut cache: Option<Vec<BackgroundRay>> = None;
    let mut all = Vec::with_capacity(refined.len());
    for r in refined {
        let field = &model.classes[&r.class_id];
        let scene = Scene {
            field,
            background: cache.as_deref().unwrap_or(&bg),
            ..template
        };
        let residual = scene.evaluate(&r.cand, &r.region, BoxMode::Exact, false)?.residual;
        let empty = scene.empty_residual(&r.region);
        let accepted = residual < thr && residual < config.empty_ratio * empty;
        let pose = r.cand.pose(grid.ground_y);
        let dims = r.cand.box_dims()?;
        let inserted = match projected_box(&graph.intrinsics, &graph.camera_pose, &pose, &dims) {
            Some(region) if accepted => Some(scene.insert(&r.cand, &region)?),
            _ => None,
        };
        if inserted.is_some() {
            cache = inserted;
        }
        all.push(Detection {
            class_id: r.class_id,
            pose,
            dims,
            latent: r.cand.latent,
            residual,
            initial_residual: r.initial,
            empty_residual: empty,
            accepted,
        });
    }

    // Suppression among accepted candidates, lowest residual first.
    all.sort_by(|a, b| b.accepted.cmp(&a.accepted).then(a.residual.total_cmp(&b.residual)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in all {
        if d.accepted {
            let fd = det_footprint(&d);
            if kept
                .iter()
                .any(|k| k.accepted && footprint_iou(&fd, &det_footprint(k)) > config.nms_iou)
            {
                continue;
            }
        }
        kept.push(d);
    }
    Ok(DetectOutput {
        detections: kept,
        threshold: thr,
    })
}

fn det_footprint(d: &Detection) -> [[f64; 2]; 4] {
    let t = d.pose.translation();
    footprint(t.x, t.z, d.pose.yaw(), d.dims.length, d.dims.width)
}
