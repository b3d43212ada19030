//! Synthetic scenes with analytic radiance fields.
//!
//! Every primitive has constant density and a color that is constant on the
//! cells of an axis-aligned grid, so each ray splits into finitely many
//! segments of constant `(sigma, c)` and can be composited in closed form.
//! Ground-truth images come from that closed form, not from quadrature.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Frame, Orientation, SceneDataset, TrackBox};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::render::{FieldSource, ObjectRows};
use crate::scene_graph::{BoxDims, ClassId, Intrinsics, RigidTransform, TrackId, Vec3};

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub resolution: usize,
    pub n_objects: usize,
    pub object_density: f64,
    pub background_density: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 20,
            resolution: 64,
            n_objects: 2,
            object_density: 10.0,
            background_density: 20.0,
            near: 3.0,
            far: 23.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::Config("resolution must be at least 16".into()));
        }
        if self.n_frames == 0 {
            return Err(Error::Config("need at least one frame".into()));
        }
        if self.n_objects > LANES.len() {
            return Err(Error::Config(format!("at most {} objects", LANES.len())));
        }
        if !(self.object_density >= 0.0 && self.background_density >= 0.0) {
            return Err(Error::Config("densities must be non-negative".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config("need 0 < near < far".into()));
        }
        Ok(())
    }
}

/// Color constant on the cells of a grid over `axes` with spacing `cell`;
/// cell `(i, j, ..)` takes `palette[(i + j + ..) mod len]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPattern {
    pub cell: f64,
    pub axes: Vec<usize>,
    pub offset: f64,
    pub palette: Vec<[f64; 3]>,
}

impl GridPattern {
    pub fn solid(rgb: [f64; 3]) -> Self {
        Self {
            cell: 1.0,
            axes: vec![],
            offset: 0.0,
            palette: vec![rgb],
        }
    }

    fn color(&self, p: &Vec3) -> [f64; 3] {
        let sum: i64 = self
            .axes
            .iter()
            .map(|&a| ((p[a] - self.offset) / self.cell).floor() as i64)
            .sum();
        self.palette[sum.rem_euclid(self.palette.len() as i64) as usize]
    }

    /// Ray parameters in `(t0, t1)` where the ray crosses a cell boundary.
    fn crossings(&self, o: &Vec3, d: &Vec3, t0: f64, t1: f64, out: &mut Vec<f64>) {
        for &a in &self.axes {
            if d[a] == 0.0 {
                continue;
            }
            let (u0, u1) = (o[a] + d[a] * t0, o[a] + d[a] * t1);
            let (lo, hi) = (u0.min(u1), u0.max(u1));
            let k0 = ((lo - self.offset) / self.cell).ceil() as i64;
            let k1 = ((hi - self.offset) / self.cell).floor() as i64;
            for k in k0..=k1 {
                let t = (self.offset + k as f64 * self.cell - o[a]) / d[a];
                if t > t0 && t < t1 {
                    out.push(t);
                }
            }
        }
    }
}

/// Axis-aligned world-space slab of the static background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlabPrimitive {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub sigma: f64,
    pub pattern: GridPattern,
}

/// Pose of an object in one frame; yaw in degrees as written to scene files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub translation: [f64; 3],
    pub yaw_deg: f64,
}

impl ObjectState {
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_euler(
            self.yaw_deg.to_radians(),
            0.0,
            0.0,
            Vec3::from(self.translation),
        )
    }
}

/// Box of constant density, two-toned along its length so that its heading
/// is visible: object-frame `x >= front_start` takes the front color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticObject {
    pub track_id: TrackId,
    pub class_id: ClassId,
    pub dims: BoxDims,
    pub sigma: f64,
    pub body: [f64; 3],
    pub front: [f64; 3],
    pub front_start: f64,
    /// Per frame; `None` where the object is absent.
    pub states: Vec<Option<ObjectState>>,
}

impl AnalyticObject {
    fn local_color(&self, x_o: &Vec3) -> [f64; 3] {
        if x_o.x >= self.front_start {
            self.front
        } else {
            self.body
        }
    }
}

/// Constant-medium piece of a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub sigma: f64,
    pub rgb: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub camera_poses: Vec<RigidTransform>,
    pub background: Vec<SlabPrimitive>,
    pub objects: Vec<AnalyticObject>,
}

fn slab_interval(min: &Vec3, max: &Vec3, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let (p, q) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
        t0 = t0.max(p.min(q));
        t1 = t1.min(p.max(q));
    }
    (t1 > t0).then_some((t0, t1))
}

impl AnalyticScene {
    pub fn n_frames(&self) -> usize {
        self.camera_poses.len()
    }

    /// Pinhole ray for pixel `(i, j)` of `frame` (camera looks along `-z`).
    pub fn pixel_ray(&self, frame: usize, i: usize, j: usize) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let cam = &self.camera_poses[frame];
        let local = Vec3::new(
            (i as f64 + 0.5 - k.cx) / k.fx,
            -(j as f64 + 0.5 - k.cy) / k.fy,
            -1.0,
        );
        (*cam.translation(), (cam.rotation() * local).normalize())
    }

    fn live_objects(&self, frame: usize) -> impl Iterator<Item = (&AnalyticObject, RigidTransform)> {
        self.objects
            .iter()
            .filter_map(move |o| o.states.get(frame).copied().flatten().map(|s| (o, s.pose())))
    }

    /// Density and color at a world point (density-weighted mix where
    /// primitives overlap).
    pub fn point(&self, frame: usize, x: &Vec3, with_objects: bool) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        let mut add = |s: f64, c: [f64; 3]| {
            sigma += s;
            for k in 0..3 {
                acc[k] += s * c[k];
            }
        };
        for b in &self.background {
            if (0..3).all(|a| x[a] >= b.min[a] && x[a] <= b.max[a]) {
                add(b.sigma, b.pattern.color(x));
            }
        }
        if with_objects {
            for (o, pose) in self.live_objects(frame) {
                let x_o = pose.apply_inverse(x).component_mul(&o.dims.inv_half_extents());
                if x_o.amax() <= 1.0 {
                    add(o.sigma, o.local_color(&x_o));
                }
            }
        }
        if sigma > 0.0 {
            (sigma, [acc[0] / sigma, acc[1] / sigma, acc[2] / sigma])
        } else {
            (0.0, [0.0; 3])
        }
    }

    /// Splits the ray `o + t d` (`t >= 0`) into constant-medium segments.
    pub fn segments(&self, frame: usize, o: &Vec3, d: &Vec3, with_objects: bool) -> Vec<Segment> {
        let mut cuts = Vec::new();
        for b in &self.background {
            let (min, max) = (Vec3::from(b.min), Vec3::from(b.max));
            if let Some((t0, t1)) = slab_interval(&min, &max, o, d) {
                cuts.extend([t0, t1]);
                b.pattern.crossings(o, d, t0, t1, &mut cuts);
            }
        }
        if with_objects {
            for (obj, pose) in self.live_objects(frame) {
                let s = obj.dims.inv_half_extents();
                let oo = pose.apply_inverse(o).component_mul(&s);
                let dd = (pose.rotation().transpose() * d).component_mul(&s);
                let one = Vec3::repeat(1.0);
                if let Some((t0, t1)) = slab_interval(&-one, &one, &oo, &dd) {
                    cuts.extend([t0, t1]);
                    if dd.x != 0.0 {
                        let t = (obj.front_start - oo.x) / dd.x;
                        if t > t0 && t < t1 {
                            cuts.push(t);
                        }
                    }
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.windows(2)
            .filter(|w| w[1] > w[0])
            .filter_map(|w| {
                let mid = o + d * (0.5 * (w[0] + w[1]));
                let (sigma, rgb) = self.point(frame, &mid, with_objects);
                (sigma > 0.0).then_some(Segment {
                    t0: w[0],
                    t1: w[1],
                    sigma,
                    rgb,
                })
            })
            .collect()
    }

    /// Closed-form composite of constant segments over a black backdrop.
    pub fn composite_segments(segments: &[Segment]) -> [f64; 3] {
        let mut trans = 1.0;
        let mut c = [0.0; 3];
        for s in segments {
            let a = 1.0 - (-s.sigma * (s.t1 - s.t0)).exp();
            for k in 0..3 {
                c[k] += trans * a * s.rgb[k];
            }
            trans *= 1.0 - a;
        }
        c
    }

    pub fn render_pixel(&self, frame: usize, i: usize, j: usize, with_objects: bool) -> [f64; 3] {
        let (o, d) = self.pixel_ray(frame, i, j);
        Self::composite_segments(&self.segments(frame, &o, &d, with_objects))
    }

    pub fn render(&self, frame: usize, with_objects: bool) -> ImageBuffer {
        let k = &self.intrinsics;
        let mut img = ImageBuffer::new(k.width, k.height);
        for j in 0..k.height {
            for i in 0..k.width {
                img.set(i, j, self.render_pixel(frame, i, j, with_objects));
            }
        }
        img
    }

    /// Point-wise field for one frame, usable wherever a trained model is.
    pub fn field(&self, frame: usize) -> AnalyticField<'_> {
        AnalyticField { scene: self, frame }
    }
}

/// Analytic densities and colors of one frame, exposed as a [`FieldSource`].
#[derive(Debug, Clone, Copy)]
pub struct AnalyticField<'a> {
    pub scene: &'a AnalyticScene,
    pub frame: usize,
}

impl FieldSource for AnalyticField<'_> {
    fn shade_background(
        &self,
        x: ArrayView2<f64>,
        _d: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let n = x.nrows();
        let mut sigma = Array1::zeros(n);
        let mut rgb = Array2::zeros((n, 3));
        for r in 0..n {
            let p = Vec3::new(x[[r, 0]], x[[r, 1]], x[[r, 2]]);
            let (s, c) = self.scene.point(self.frame, &p, false);
            sigma[r] = s;
            for k in 0..3 {
                rgb[[r, k]] = c[k];
            }
        }
        Ok((sigma, rgb))
    }

    fn shade_objects(&self, rows: &ObjectRows) -> Result<(Array1<f64>, Array2<f64>)> {
        let n = rows.x_o.nrows();
        let mut sigma = Array1::zeros(n);
        let mut rgb = Array2::zeros((n, 3));
        for r in 0..n {
            let obj = self
                .scene
                .objects
                .iter()
                .find(|o| o.track_id == rows.latent_refs[r])
                .ok_or(Error::MissingLatent(rows.latent_refs[r]))?;
            let x_o = Vec3::new(rows.x_o[[r, 0]], rows.x_o[[r, 1]], rows.x_o[[r, 2]]);
            if x_o.amax() <= 1.0 + 1e-9 {
                sigma[r] = obj.sigma;
                let c = obj.local_color(&x_o);
                for k in 0..3 {
                    rgb[[r, k]] = c[k];
                }
            }
        }
        Ok((sigma, rgb))
    }
}

/// Lane depths and travel directions of the generated objects.
const LANES: [(f64, f64); 4] = [(-9.0, 1.0), (-13.0, -1.0), (-11.0, 1.0), (-15.0, -1.0)];
const CAMERA_HEIGHT: f64 = 1.5;
pub const DEFAULT_CLASS_DIMS: [f64; 3] = [4.0, 1.5, 1.8];

fn jitter_color(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.02, 0.98))
}

/// Builds the analytic scene described by `spec`: a static camera facing a
/// striped wall over a checkered ground, and boxes of one class driving on
/// straight lanes in alternating directions.
pub fn build_scene(spec: &SynthSpec) -> Result<AnalyticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let res = spec.resolution as f64;
    let intrinsics = Intrinsics::new(res, res, res / 2.0, res / 2.0, spec.resolution, spec.resolution)?;
    let cam = RigidTransform::from_translation(Vec3::new(0.0, CAMERA_HEIGHT, 0.0));
    let bs = spec.background_density;
    let wall_z = -(spec.far - 1.5);

    let lower = vec![
        jitter_color(&mut rng, [0.75, 0.55, 0.35], 0.1),
        jitter_color(&mut rng, [0.35, 0.5, 0.65], 0.1),
        jitter_color(&mut rng, [0.55, 0.7, 0.4], 0.1),
    ];
    let upper = vec![
        jitter_color(&mut rng, [0.85, 0.8, 0.7], 0.08),
        jitter_color(&mut rng, [0.6, 0.6, 0.75], 0.08),
    ];
    let ground = vec![
        jitter_color(&mut rng, [0.4, 0.4, 0.42], 0.05),
        jitter_color(&mut rng, [0.55, 0.53, 0.5], 0.05),
    ];
    let background = vec![
        SlabPrimitive {
            min: [-20.0, 0.0, wall_z - 0.5],
            max: [20.0, 3.0, wall_z],
            sigma: bs,
            pattern: GridPattern {
                cell: 3.0,
                axes: vec![0],
                offset: rng.gen_range(0.0..3.0),
                palette: lower,
            },
        },
        SlabPrimitive {
            min: [-20.0, 3.0, wall_z - 0.5],
            max: [20.0, 9.0, wall_z],
            sigma: bs,
            pattern: GridPattern {
                cell: 5.0,
                axes: vec![0],
                offset: rng.gen_range(0.0..5.0),
                palette: upper,
            },
        },
        SlabPrimitive {
            min: [-25.0, -0.5, wall_z],
            max: [25.0, 0.0, -0.5],
            sigma: bs,
            pattern: GridPattern {
                cell: 4.0,
                axes: vec![0, 2],
                offset: 0.0,
                palette: ground,
            },
        },
    ];

    let bodies = [[0.8, 0.15, 0.1], [0.1, 0.25, 0.8], [0.15, 0.6, 0.2], [0.6, 0.2, 0.6]];
    let fronts = [[0.95, 0.9, 0.3], [0.9, 0.95, 0.95], [0.95, 0.6, 0.1], [0.3, 0.9, 0.9]];
    let [l, h, w] = DEFAULT_CLASS_DIMS;
    let dims = BoxDims::new(l, h, w)?;
    let mut objects = Vec::with_capacity(spec.n_objects);
    for (k, &(lane_z, dir)) in LANES.iter().take(spec.n_objects).enumerate() {
        let z0 = lane_z + rng.gen_range(-0.5..0.5);
        let z1 = z0 + rng.gen_range(-1.0..1.0);
        let reach = 0.35 * z0.abs();
        let (x0, x1) = (-dir * reach, dir * reach);
        let yaw_deg = (-(z1 - z0)).atan2(x1 - x0).to_degrees();
        let states = (0..spec.n_frames)
            .map(|f| {
                let a = if spec.n_frames > 1 {
                    f as f64 / (spec.n_frames - 1) as f64
                } else {
                    0.5
                };
                Some(ObjectState {
                    translation: [x0 + a * (x1 - x0), h / 2.0, z0 + a * (z1 - z0)],
                    yaw_deg,
                })
            })
            .collect();
        objects.push(AnalyticObject {
            track_id: TrackId(k as u32 + 1),
            class_id: ClassId(0),
            dims,
            sigma: spec.object_density,
            body: jitter_color(&mut rng, bodies[k], 0.05),
            front: jitter_color(&mut rng, fronts[k], 0.05),
            front_start: 0.5,
            states,
        });
    }
    Ok(AnalyticScene {
        intrinsics,
        near: spec.near,
        far: spec.far,
        camera_poses: vec![cam; spec.n_frames],
        background,
        objects,
    })
}

pub fn frame_image_name(k: usize) -> String {
    format!("frame_{k:04}.ppm")
}

pub fn background_image_name(k: usize) -> String {
    format!("background_{k:04}.ppm")
}

pub const SCENE_FILE: &str = "scene.nsg";
pub const ANALYTIC_FILE: &str = "analytic.json";

/// Scene description matching an analytic scene; boxes are written with a
/// unit scale multiplier since the synthetic objects cast no shadows.
pub fn scene_dataset(scene: &AnalyticScene, root: &Path) -> Result<SceneDataset> {
    let mut frames = Vec::with_capacity(scene.n_frames());
    for (k, cam) in scene.camera_poses.iter().enumerate() {
        let mut tracks = Vec::new();
        for o in &scene.objects {
            if let Some(s) = o.states[k] {
                let scale = Vec3::repeat(1.0);
                tracks.push(TrackBox {
                    track_id: o.track_id,
                    class_id: o.class_id,
                    translation: Vec3::from(s.translation),
                    orientation: Orientation::yaw_deg(s.yaw_deg),
                    raw_dims: o.dims,
                    scale: Some(scale),
                    pose: s.pose(),
                    dims: o.dims,
                });
            }
        }
        if cam.rotation() != &RigidTransform::identity().rotation().clone_owned() {
            return Err(Error::Config("synthetic cameras must be axis-aligned".into()));
        }
        frames.push(Frame {
            id: k,
            image: frame_image_name(k),
            cam_translation: *cam.translation(),
            cam_orientation: Orientation::Euler {
                yaw: 0.0,
                pitch: 0.0,
                roll: 0.0,
            },
            camera_pose: *cam,
            tracks,
        });
    }
    Ok(SceneDataset {
        intrinsics: scene.intrinsics,
        near: scene.near,
        far: scene.far,
        box_scale: Vec3::repeat(1.0),
        frames,
        root: root.to_path_buf(),
    })
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: SceneDataset,
    pub scene: AnalyticScene,
    pub scene_path: PathBuf,
}

/// Writes ground-truth frames, background-only frames, the scene file and
/// the analytic description into `dir`.
pub fn generate_synthetic(spec: &SynthSpec, dir: &Path) -> Result<SynthOutput> {
    let scene = build_scene(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for k in 0..scene.n_frames() {
        scene.render(k, true).save_ppm(&dir.join(frame_image_name(k)))?;
        scene
            .render(k, false)
            .save_ppm(&dir.join(background_image_name(k)))?;
    }
    let dataset = scene_dataset(&scene, dir)?;
    let scene_path = dir.join(SCENE_FILE);
    dataset.save(&scene_path)?;
    let json = serde_json::to_string_pretty(&scene).map_err(|e| Error::Config(e.to_string()))?;
    let apath = dir.join(ANALYTIC_FILE);
    fs::write(&apath, json).map_err(|e| Error::io(&apath, e))?;
    Ok(SynthOutput {
        dataset,
        scene,
        scene_path,
    })
}

pub fn load_analytic(path: &Path) -> Result<AnalyticScene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scene_shape() {
        let s = build_scene(&SynthSpec::default()).unwrap();
        assert_eq!(s.n_frames(), 20);
        assert_eq!(s.objects.len(), 2);
        let img = s.render(0, true);
        assert_eq!((img.width(), img.height()), (64, 64));
        // Sky above the wall is empty.
        assert_eq!(img.get(32, 0), [0.0; 3]);
        assert!(img.pixels().iter().filter(|p| p[0] + p[1] + p[2] > 0.0).count() > 2000);
    }

    #[test]
    fn vacuum_is_black() {
        let spec = SynthSpec {
            object_density: 0.0,
            background_density: 0.0,
            n_frames: 2,
            ..SynthSpec::default()
        };
        let s = build_scene(&spec).unwrap();
        assert!(s.render(1, true).pixels().iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn opaque_box_shows_its_color() {
        let spec = SynthSpec {
            object_density: 1e4,
            background_density: 0.0,
            n_objects: 1,
            n_frames: 3,
            ..SynthSpec::default()
        };
        let s = build_scene(&spec).unwrap();
        let obj = &s.objects[0];
        let pose = obj.states[1].unwrap().pose();
        // Ray from the camera to the box centre.
        let o = Vec3::new(0.0, 1.5, 0.0);
        let d = (pose.translation() - o).normalize();
        let segs = s.segments(1, &o, &d, true);
        let c = AnalyticScene::composite_segments(&segs);
        let first = segs[0];
        assert!((-first.sigma * (first.t1 - first.t0)).exp() < 1e-6);
        for k in 0..3 {
            assert!((c[k] - first.rgb[k]).abs() < 1e-9);
        }
        assert!(first.rgb == obj.body || first.rgb == obj.front);
    }

    #[test]
    fn heading_matches_motion() {
        let s = build_scene(&SynthSpec::default()).unwrap();
        for o in &s.objects {
            let a = o.states[0].unwrap();
            let b = o.states[19].unwrap();
            let motion = Vec3::from(b.translation) - Vec3::from(a.translation);
            let heading = a.pose().rotation() * Vec3::x();
            assert!((motion.normalize() - heading).norm() < 1e-9);
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let spec = SynthSpec {
            n_frames: 2,
            resolution: 16,
            ..SynthSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        for name in [SCENE_FILE, ANALYTIC_FILE, "frame_0001.ppm", "background_0000.ppm"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        let ds = SceneDataset::load(&a.path().join(SCENE_FILE)).unwrap();
        assert_eq!(ds.frames.len(), 2);
        assert_eq!(ds.frames[1].tracks.len(), 2);
        let back = load_analytic(&a.path().join(ANALYTIC_FILE)).unwrap();
        assert_eq!(back.objects[1].states, build_scene(&spec).unwrap().objects[1].states);
    }
}
