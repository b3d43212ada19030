//! Rendering of one hypothesised object over a cached background, with
//! derivatives of an image-space l1 loss with respect to its pose, box
//! dimensions and latent code.

use ndarray::{Array1, Array2};

use super::dual::Dual;
use crate::error::Result;
use crate::field::{FieldBatch, InputGradRequest, RadianceField};
use crate::image::ImageBuffer;
use crate::render::{composite, composite_backward, composite_traced, ShadedSample};
use crate::sampling::{Ray, GRAZING_EPS};
use crate::scene_graph::{BoxDims, Intrinsics, PixelRect, RigidTransform, Vec3};

/// Pose and shape parameters: `x, z, yaw, L, H, W`.
pub const N_GEO: usize = 6;
type D = Dual<N_GEO>;

/// A candidate object resting on the ground plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub x: f64,
    pub z: f64,
    /// Radians.
    pub yaw: f64,
    pub dims: [f64; 3],
    pub latent: Vec<f64>,
}

impl Candidate {
    pub fn geo(&self) -> [f64; N_GEO] {
        [self.x, self.z, self.yaw, self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn set_geo(&mut self, g: &[f64; N_GEO]) {
        self.x = g[0];
        self.z = g[1];
        self.yaw = g[2];
        self.dims = [g[3], g[4], g[5]];
    }

    pub fn pose(&self, ground_y: f64) -> RigidTransform {
        RigidTransform::from_yaw(self.yaw, Vec3::new(self.x, ground_y + self.dims[1] / 2.0, self.z))
    }

    pub fn box_dims(&self) -> Result<BoxDims> {
        BoxDims::new(self.dims[0], self.dims[1], self.dims[2])
    }
}

/// Background samples of one pixel, shaded once and reused by every
/// candidate.
#[derive(Debug, Clone)]
pub struct BackgroundRay {
    pub ray: Ray,
    pub samples: Vec<ShadedSample>,
    /// Composite of the background alone.
    pub color: [f64; 3],
}

/// How the candidate's box is sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoxMode {
    /// The same box and quadrature as the renderer.
    Exact,
    /// Soft silhouette: each ray's density is scaled by a sigmoid of the
    /// pixel's signed distance (in pixels, positive inside) to the projected
    /// outline of the box, with width `tau`. Rays just outside the outline
    /// are sampled on a slightly grown box with positions clamped to the
    /// unit cube; rays inside are sampled exactly as by the renderer.
    Relaxed { tau: f64 },
}

/// Normalized distance by which a ray outside the silhouette is sampled
/// inside the grown box.
const RELAX_MARGIN: f64 = 0.02;

/// Rays farther than this many `tau` outside the outline are not sampled.
const RELAX_REACH: f64 = 6.0;

/// Geometry of one candidate sample.
#[derive(Debug, Clone, Copy)]
struct Row {
    t: D,
    x: [D; 3],
    occupancy: D,
}

struct RayGeometry {
    rows: Vec<Row>,
    dir: [D; 3],
}

/// Cached background plus frozen class network for one observed frame.
pub struct Scene<'a> {
    pub field: &'a RadianceField,
    pub width: usize,
    pub background: &'a [BackgroundRay],
    pub observed: &'a ImageBuffer,
    pub ground_y: f64,
    pub object_samples: usize,
    pub intrinsics: &'a Intrinsics,
    pub camera: &'a RigidTransform,
    /// Color behind the last sample.
    pub bg_color: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Mean absolute difference over the region's pixels and channels.
    pub residual: f64,
    pub geo_grad: [f64; N_GEO],
    pub latent_grad: Vec<f64>,
}

/// Scale of the smallest origin-centred cube the ray segment touches:
/// `min over t in [t0, t1] of max_k |o_k + d_k t|`. The minimum of this
/// convex piecewise-linear function lies at an endpoint, a zero of one
/// term or a crossing of two terms.
fn closest_scale(o: &[D; 3], d: &[D; 3], t0: f64, t1: f64) -> D {
    let mut cands: Vec<D> = vec![D::constant(t0), D::constant(t1)];
    for k in 0..3 {
        if d[k].v != 0.0 {
            cands.push(-o[k] / d[k]);
        }
        for j in k + 1..3 {
            for s in [1.0, -1.0] {
                let den = d[k] - d[j] * s;
                if den.v != 0.0 {
                    cands.push((o[j] * s - o[k]) / den);
                }
            }
        }
    }
    let f = |t: &D| (0..3).map(|k| (o[k] + d[k] * *t).abs()).fold(D::constant(0.0), |a, b| a.max(b));
    cands
        .iter()
        .filter(|t| t.v >= t0 && t.v <= t1)
        .map(f)
        .fold(None, |best: Option<D>, v| match best {
            Some(b) if b.v <= v.v => Some(b),
            _ => Some(v),
        })
        .expect("endpoints are candidates")
}

/// Pixel-space outline of the box: the convex hull of its projected
/// corners, counter-clockwise in `(u, v)`. `None` when a corner is not in
/// front of the camera.
fn outline(params: &[D; N_GEO], ground_y: f64, intr: &Intrinsics, cam: &RigidTransform) -> Option<Vec<[D; 2]>> {
    let [x, z, yaw, l, h, w] = *params;
    let (s, c) = (yaw.sin(), yaw.cos());
    let y = h * 0.5 + ground_y;
    let r = cam.rotation();
    let t = cam.translation();
    let mut pts = Vec::with_capacity(8);
    for k in 0..8 {
        let sign = |bit: usize| if k & bit == 0 { -0.5 } else { 0.5 };
        let (lx, ly, lz) = (l * sign(1), h * sign(2), w * sign(4));
        let world = [x + c * lx + s * lz - t.x, y + ly - t.y, z - s * lx + c * lz - t.z];
        // Camera frame: transpose of the camera rotation.
        let cam_xyz: [D; 3] = std::array::from_fn(|i| {
            world[0] * r[(0, i)] + world[1] * r[(1, i)] + world[2] * r[(2, i)]
        });
        if cam_xyz[2].v >= -1e-9 {
            return None;
        }
        let depth = -cam_xyz[2];
        pts.push([
            cam_xyz[0] * intr.fx / depth + intr.cx,
            D::constant(intr.cy) - cam_xyz[1] * intr.fy / depth,
        ]);
    }
    // Monotone chain on the values.
    pts.sort_by(|a, b| a[0].v.total_cmp(&b[0].v).then(a[1].v.total_cmp(&b[1].v)));
    let cross = |o: &[D; 2], a: &[D; 2], b: &[D; 2]| {
        (a[0].v - o[0].v) * (b[1].v - o[1].v) - (a[1].v - o[1].v) * (b[0].v - o[0].v)
    };
    let mut hull: Vec<[D; 2]> = Vec::with_capacity(16);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[D; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    (hull.len() >= 3).then_some(hull)
}

/// Signed distance from `(u, v)` to a convex counter-clockwise polygon,
/// positive inside: the smallest distance to an edge line.
fn signed_distance(poly: &[[D; 2]], u: f64, v: f64) -> D {
    let n = poly.len();
    (0..n)
        .map(|k| {
            let (a, b) = (poly[k], poly[(k + 1) % n]);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len = (ex * ex + ey * ey).sqrt();
            (ex * (D::constant(v) - a[1]) - ey * (D::constant(u) - a[0])) / len
        })
        .fold(D::constant(f64::INFINITY), |a, b| a.min(b))
}

fn ray_geometry(
    ray: &Ray,
    params: &[D; N_GEO],
    ground_y: f64,
    mode: BoxMode,
    silhouette: Option<D>,
    n_exact: usize,
) -> Option<RayGeometry> {
    let [x, z, yaw, l, h, w] = *params;
    let (s, c) = (yaw.sin(), yaw.cos());
    let y = h * 0.5 + ground_y;
    let o = ray.origin;
    let dx = D::constant(o.x) - x;
    let dy = D::constant(o.y) - y;
    let dz = D::constant(o.z) - z;
    let two = D::constant(2.0);
    let (sx, sy, sz) = (two / l, two / h, two / w);
    let origin = [(c * dx - s * dz) * sx, dy * sy, (s * dx + c * dz) * sz];
    let rd = ray.direction;
    let dir = [
        (c * rd.x - s * rd.z) * sx,
        D::constant(rd.y) * sy,
        (s * rd.x + c * rd.z) * sz,
    ];
    let (half, coverage) = match mode {
        BoxMode::Exact => (D::constant(1.0), D::constant(1.0)),
        BoxMode::Relaxed { tau } => {
            let coverage = match silhouette {
                Some(sd) if sd.v < -RELAX_REACH * tau => return None,
                Some(sd) => (sd * (1.0 / tau)).sigmoid(),
                None => D::constant(1.0),
            };
            let e = closest_scale(&origin, &dir, ray.t_near, ray.t_far);
            if silhouette.is_none() && e.v > 1.0 {
                return None;
            }
            // Rays inside the outline keep the exact box; rays just outside
            // it sample a box grown until they cross it.
            let grown = e + RELAX_MARGIN;
            let half = if grown.v > 1.0 { grown } else { D::constant(1.0) };
            (half, coverage)
        }
    };
    let mut t0 = D::constant(ray.t_near);
    let mut t1 = D::constant(ray.t_far);
    for k in 0..3 {
        if dir[k].v == 0.0 {
            if origin[k].v.abs() > half.v {
                return None;
            }
            continue;
        }
        let a = (-half - origin[k]) / dir[k];
        let b = (half - origin[k]) / dir[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if !(t1.v - t0.v >= GRAZING_EPS) {
        return None;
    }
    let n = n_exact;
    let span = t1 - t0;
    let rows = (0..n)
        .map(|k| {
            let t = if k + 1 == n {
                t1
            } else {
                t0 + span * (k as f64 / (n - 1) as f64)
            };
            let p = [0, 1, 2].map(|a| origin[a] + dir[a] * t);
            let x = match mode {
                BoxMode::Exact => p,
                BoxMode::Relaxed { .. } => p.map(|v| v.clamp(-1.0, 1.0)),
            };
            Row {
                t,
                x,
                occupancy: coverage,
            }
        })
        .collect();
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    Some(RayGeometry {
        rows,
        dir: dir.map(|v| v / norm),
    })
}

/// Background and candidate samples merged by t, background first on ties,
/// with the merged index of every candidate row.
fn merge_rows(
    bg: &BackgroundRay,
    geo: &RayGeometry,
    eval: &crate::field::FieldEval,
    base: usize,
) -> (Vec<ShadedSample>, Vec<usize>) {
    let m = geo.rows.len();
    let mut merged = Vec::with_capacity(bg.samples.len() + m);
    let mut slot = Vec::with_capacity(m);
    let mut b = 0;
    for (k, row) in geo.rows.iter().enumerate() {
        while b < bg.samples.len() && bg.samples[b].t <= row.t.v {
            merged.push(bg.samples[b]);
            b += 1;
        }
        let q = base + k;
        slot.push(merged.len());
        merged.push(ShadedSample {
            t: row.t.v,
            sigma: eval.sigma[q] * row.occupancy.v,
            rgb: [eval.rgb[[q, 0]], eval.rgb[[q, 1]], eval.rgb[[q, 2]]],
        });
    }
    merged.extend_from_slice(&bg.samples[b..]);
    (merged, slot)
}

/// Network inputs of one candidate over a list of pixels.
struct Inputs {
    geoms: Vec<Option<RayGeometry>>,
    xs: Array2<f64>,
    ds: Array2<f64>,
    ps: Array2<f64>,
    codes: Array2<f64>,
    groups: Vec<usize>,
}

impl Inputs {
    fn batch(&self) -> FieldBatch<'_> {
        FieldBatch {
            x: self.xs.view(),
            d: self.ds.view(),
            p: Some(self.ps.view()),
            latents: Some((self.codes.view(), &self.groups)),
        }
    }
}

impl Scene<'_> {
    fn inputs(
        &self,
        params: &[D; N_GEO],
        cand: &Candidate,
        pixels: &[(usize, usize)],
        mode: BoxMode,
    ) -> Result<Inputs> {
        let poly = match mode {
            BoxMode::Exact => None,
            BoxMode::Relaxed { .. } => outline(params, self.ground_y, self.intrinsics, self.camera),
        };
        let mut geoms = Vec::with_capacity(pixels.len());
        let mut n_rows = 0;
        for &(i, j) in pixels {
            let bg = &self.background[j * self.width + i];
            let sd = poly.as_ref().map(|p| signed_distance(p, i as f64 + 0.5, j as f64 + 0.5));
            let geo = ray_geometry(&bg.ray, params, self.ground_y, mode, sd, self.object_samples);
            n_rows += geo.as_ref().map_or(0, |r| r.rows.len());
            geoms.push(geo);
        }
        let mut xs = Array2::zeros((n_rows, 3));
        let mut ds = Array2::zeros((n_rows, 3));
        let mut ps = Array2::zeros((n_rows, 3));
        let pos = [params[0].v, params[4].v * 0.5 + self.ground_y, params[1].v];
        let mut r = 0;
        for geo in geoms.iter().flatten() {
            for row in &geo.rows {
                for a in 0..3 {
                    xs[[r, a]] = row.x[a].v;
                    ds[[r, a]] = geo.dir[a].v;
                    ps[[r, a]] = pos[a];
                }
                r += 1;
            }
        }
        let codes = Array2::from_shape_vec((1, cand.latent.len()), cand.latent.clone())
            .map_err(|e| crate::error::Error::Shape(e.to_string()))?;
        Ok(Inputs {
            geoms,
            xs,
            ds,
            ps,
            codes,
            groups: vec![0; n_rows],
        })
    }

    /// Background cache with the candidate rendered into it (exact box),
    /// so later candidates are scored against it.
    pub fn insert(&self, cand: &Candidate, region: &PixelRect) -> Result<Vec<BackgroundRay>> {
        let g = cand.geo();
        let params: [D; N_GEO] = std::array::from_fn(|i| D::constant(g[i]));
        let pixels: Vec<(usize, usize)> = region.pixels().collect();
        let inputs = self.inputs(&params, cand, &pixels, BoxMode::Exact)?;
        let eval = self.field.forward(&inputs.batch(), false)?;
        let mut out = self.background.to_vec();
        let mut base = 0;
        for (&(i, j), geo) in pixels.iter().zip(&inputs.geoms) {
            let Some(geo) = geo else { continue };
            let bg = &mut out[j * self.width + i];
            let (merged, _) = merge_rows(bg, geo, &eval, base);
            bg.color = composite(&merged, bg.ray.t_far, self.bg_color)?;
            bg.samples = merged;
            base += geo.rows.len();
        }
        Ok(out)
    }

    /// Colors of the region's pixels with the candidate inserted, and the
    /// l1 residual against the observed image. With `grad`, also the
    /// derivatives of that residual.
    pub fn evaluate(
        &self,
        cand: &Candidate,
        region: &PixelRect,
        mode: BoxMode,
        grad: bool,
    ) -> Result<Evaluation> {
        let g = cand.geo();
        let params: [D; N_GEO] = std::array::from_fn(|i| D::var(g[i], i));
        let pixels: Vec<(usize, usize)> = region.pixels().collect();
        let n_px = pixels.len().max(1);

        let inputs = self.inputs(&params, cand, &pixels, mode)?;
        let batch = inputs.batch();
        let geoms = &inputs.geoms;
        let n_rows = inputs.groups.len();
        let eval = self.field.forward(&batch, grad)?;

        let mut residual = 0.0;
        let mut d_sigma = Array1::zeros(n_rows);
        let mut d_rgb = Array2::zeros((n_rows, 3));
        let mut d_occ = vec![0.0; n_rows];
        let mut d_t = vec![0.0; n_rows];
        let mut base = 0;
        for (&(i, j), geo) in pixels.iter().zip(geoms) {
            let bg = &self.background[j * self.width + i];
            let obs = self.observed.get(i, j);
            let Some(geo) = geo else {
                residual += (0..3).map(|c| (bg.color[c] - obs[c]).abs()).sum::<f64>();
                continue;
            };
            let (merged, slot) = merge_rows(bg, geo, &eval, base);
            let (color, trace) = composite_traced(&merged, bg.ray.t_far, self.bg_color)?;
            residual += (0..3).map(|c| (color[c] - obs[c]).abs()).sum::<f64>();
            if grad {
                let up = [0, 1, 2].map(|c| {
                    let diff = color[c] - obs[c];
                    if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                } / (3 * n_px) as f64);
                let cg = composite_backward(&merged, &trace, self.bg_color, up);
                for (k, row) in geo.rows.iter().enumerate() {
                    let (q, s) = (base + k, slot[k]);
                    d_sigma[q] = cg.sigma[s] * row.occupancy.v;
                    d_occ[q] = cg.sigma[s] * eval.sigma[q];
                    d_t[q] = cg.t[s];
                    for c in 0..3 {
                        d_rgb[[q, c]] = cg.rgb[s][c];
                    }
                }
            }
            base += geo.rows.len();
        }
        residual /= (3 * n_px) as f64;

        let mut geo_grad = [0.0; N_GEO];
        let mut latent_grad = vec![0.0; cand.latent.len()];
        if grad && n_rows > 0 {
            let mut weight_grads = vec![0.0; self.field.n_params()];
            let ig = self.field.backward(
                &batch,
                eval.trace.as_ref().expect("recorded"),
                d_sigma.view(),
                d_rgb.view(),
                &mut weight_grads,
                InputGradRequest::ALL,
            )?;
            let (gx, gd, gp) = (
                ig.x.expect("x grads"),
                ig.d.expect("d grads"),
                ig.p.expect("p grads"),
            );
            let py = params[4] * 0.5 + self.ground_y;
            let p = [params[0], py, params[1]];
            let mut q = 0;
            for geo in geoms.iter().flatten() {
                for row in &geo.rows {
                    for a in 0..3 {
                        row.x[a].pull(gx[[q, a]], &mut geo_grad);
                        geo.dir[a].pull(gd[[q, a]], &mut geo_grad);
                        p[a].pull(gp[[q, a]], &mut geo_grad);
                    }
                    row.occupancy.pull(d_occ[q], &mut geo_grad);
                    row.t.pull(d_t[q], &mut geo_grad);
                    q += 1;
                }
            }
            if let Some(lg) = ig.latents {
                latent_grad = lg.row(0).to_vec();
            }
        }
        Ok(Evaluation {
            residual,
            geo_grad,
            latent_grad,
        })
    }

    /// Residual of the background alone over a region.
    pub fn empty_residual(&self, region: &PixelRect) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, j) in region.pixels() {
            let c = self.background[j * self.width + i].color;
            let o = self.observed.get(i, j);
            sum += (0..3).map(|k| (c[k] - o[k]).abs()).sum::<f64>();
            n += 1;
        }
        sum / (3 * n.max(1)) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn outline_sign_matches_hit_test(
            x in -4.0f64..4.0,
            z in -14.0f64..-6.0,
            yaw in -3.2f64..3.2,
        ) {
            let intr = Intrinsics::new(48.0, 48.0, 24.0, 24.0, 48, 48).unwrap();
            let cam = RigidTransform::from_yaw(0.0, Vec3::new(0.0, 1.5, 0.0));
            let params = [x, z, yaw, 4.0, 1.5, 1.8].map(D::constant);
            let poly = outline(&params, 0.0, &intr, &cam).unwrap();
            for j in 0..48 {
                for i in 0..48 {
                    let ray = crate::sampling::generate_ray(&intr, &cam, (i, j), None).unwrap();
                    let sd = signed_distance(&poly, i as f64 + 0.5, j as f64 + 0.5).v;
                    let hit = ray_geometry(&ray, &params, 0.0, BoxMode::Exact, None, 7).is_some();
                    prop_assert!(sd.abs() < 1e-6 || hit == (sd > 0.0), "pixel {i},{j} sd {sd}");
                }
            }
        }

        #[test]
        fn outline_distance_derivatives(
            x in -4.0f64..4.0,
            z in -14.0f64..-6.0,
            yaw in -3.2f64..3.2,
            u in 0.0f64..48.0,
            v in 0.0f64..48.0,
        ) {
            let intr = Intrinsics::new(48.0, 48.0, 24.0, 24.0, 48, 48).unwrap();
            // Away from the camera height, where the top face is seen edge-on.
            let cam = RigidTransform::from_yaw(0.0, Vec3::new(0.0, 1.1, 0.0));
            let g = [x, z, yaw, 4.0, 1.5, 1.8];
            let sd = |g: &[f64]| {
                let params: [D; N_GEO] = std::array::from_fn(|i| D::var(g[i], i));
                signed_distance(&outline(&params, 0.0, &intr, &cam).unwrap(), u, v)
            };
            let d = sd(&g);
            for k in 0..N_GEO {
                let h = 1e-6;
                let mut p = g;
                p[k] += h;
                let mut m = g;
                m[k] -= h;
                let fd = (sd(&p).v - sd(&m).v) / (2.0 * h);
                prop_assert!((fd - d.d[k]).abs() < 1e-4 * (1.0 + fd.abs()), "k {k}: {} vs {fd}", d.d[k]);
            }
        }

        #[test]
        fn closest_scale_matches_dense_search(
            o in prop::array::uniform3(-3.0f64..3.0),
            d in prop::array::uniform3(-1.0f64..1.0),
            t1 in 0.5f64..6.0,
        ) {
            let od = o.map(D::constant);
            let dd = d.map(D::constant);
            let e = closest_scale(&od, &dd, 0.0, t1).v;
            let f = |t: f64| (0..3).map(|k| (o[k] + d[k] * t).abs()).fold(0.0, f64::max);
            let dense = (0..=20000).map(|i| f(t1 * i as f64 / 20000.0)).fold(f64::MAX, f64::min);
            prop_assert!(e <= dense + 1e-12);
            prop_assert!(dense - e <= 2.0 * t1 / 20000.0 * 1.8);
        }
    }
}
