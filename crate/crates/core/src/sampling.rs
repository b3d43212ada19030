//! Ray generation and per-ray sample placement: background planes, box
//! intersections and object quadrature, merged into one ordered set.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scene_graph::{
    direction_to_object_unnormalized, world_to_object, BackgroundNode, Intrinsics, ObjectNode,
    RigidTransform, SceneGraph, TrackId, Vec3,
};

/// Rays parallel to the plane normal within this bound miss every plane.
pub const PARALLEL_EPS: f64 = 1e-9;
/// Box hits shorter than this (world units) are treated as misses.
pub const GRAZING_EPS: f64 = 1e-6;
/// Samples closer than this in `t` are ordered by source instead.
pub const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        if ((direction.norm() - 1.0).abs()) > 1e-9 {
            return Err(Error::validation("ray", "direction must have unit length"));
        }
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(Error::validation("ray", format!("need 0 <= t_near < t_far, got {t_near}, {t_far}")));
        }
        Ok(Self {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Camera ray through pixel `(i, j)`. The camera looks along its local `-z`
/// with `+y` up. `jitter` shifts the sample off the pixel centre by up to
/// half a pixel per axis. The returned ray is unbounded (`t_far = inf`);
/// [`PlaneStack::bound`] gives it a finite far limit.
pub fn generate_ray(
    intr: &Intrinsics,
    cam_pose: &RigidTransform,
    pixel: (usize, usize),
    jitter: Option<(f64, f64)>,
) -> Result<Ray> {
    let (i, j) = pixel;
    if i >= intr.width || j >= intr.height {
        return Err(Error::PixelOutOfBounds(i, j));
    }
    let (ju, jv) = jitter.unwrap_or((0.0, 0.0));
    let u = i as f64 + 0.5 + ju;
    let v = j as f64 + 0.5 + jv;
    let local = Vec3::new((u - intr.cx) / intr.fx, -(v - intr.cy) / intr.fy, -1.0);
    let direction = (cam_pose.rotation() * local).normalize();
    Ok(Ray {
        origin: *cam_pose.translation(),
        direction,
        t_near: 0.0,
        t_far: f64::INFINITY,
    })
}

/// Planes orthogonal to the reference camera's viewing axis, equispaced in
/// depth between the near and far clips.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneStack {
    pub anchor: Vec3,
    /// Unit normal pointing away from the reference camera.
    pub normal: Vec3,
    pub depths: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHit {
    pub plane: usize,
    pub t: f64,
}

impl PlaneStack {
    pub fn new(bg: &BackgroundNode) -> Self {
        let n = bg.n_planes;
        let step = (bg.far - bg.near) / (n - 1) as f64;
        let depths = (0..n)
            .map(|k| if k == n - 1 { bg.far } else { bg.near + step * k as f64 })
            .collect();
        Self {
            anchor: *bg.reference_pose.translation(),
            normal: -bg.reference_pose.rotation().column(2).into_owned(),
            depths,
        }
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        (self.depths[self.len() - 1] - self.depths[0]) / (self.len() - 1) as f64
    }

    /// Ray parameter at which `ray` reaches depth `depth`, if it is not
    /// parallel to the planes.
    pub fn t_at_depth(&self, ray: &Ray, depth: f64) -> Option<f64> {
        let denom = self.normal.dot(&ray.direction);
        if denom.abs() <= PARALLEL_EPS {
            return None;
        }
        Some((depth - self.normal.dot(&(ray.origin - self.anchor))) / denom)
    }

    /// Finite far limit: the ray parameter one plane spacing beyond the far
    /// plane, so the last plane sample gets an interval of one spacing. Rays
    /// that never reach that depth keep a limit of the same length.
    pub fn bound(&self, mut ray: Ray) -> Ray {
        let limit = self.depths[self.len() - 1] + self.spacing();
        ray.t_far = match self.t_at_depth(&ray, limit) {
            Some(t) if t > ray.t_near => t,
            _ => ray.t_near + limit,
        };
        ray
    }
}

/// Intersections of `ray` with every plane it crosses inside
/// `[t_near, t_far]`, ascending in `t`.
pub fn plane_intersections(ray: &Ray, planes: &PlaneStack) -> Vec<PlaneHit> {
    let mut hits: Vec<PlaneHit> = planes
        .depths
        .iter()
        .enumerate()
        .filter_map(|(k, &s)| {
            let t = planes.t_at_depth(ray, s)?;
            (t >= ray.t_near && t <= ray.t_far).then_some(PlaneHit { plane: k, t })
        })
        .collect();
    hits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.plane.cmp(&b.plane)));
    hits
}

/// Slab test of the ray `origin + t * dir` against `[-1, 1]^3`, restricted
/// to `[t_near, t_far]`. `dir` need not be unit length, so `t` can stay in
/// world units after an object-frame change of coordinates.
pub fn ray_aabb_unit(origin: &Vec3, dir: &Vec3, t_near: f64, t_far: f64) -> Option<(f64, f64)> {
    let mut t0 = t_near;
    let mut t1 = t_far;
    for k in 0..3 {
        let (o, d) = (origin[k], dir[k]);
        if d == 0.0 {
            if o.abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut a, mut b) = ((-1.0 - o) * inv, (1.0 - o) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t1 - t0 >= GRAZING_EPS).then_some((t0, t1))
}

/// `n_d` equidistant parameters from `t_in` to `t_out`, endpoints included.
pub fn object_quadrature(t_in: f64, t_out: f64, n_d: usize) -> Result<Vec<f64>> {
    if n_d < 2 {
        return Err(Error::validation("object quadrature", "need at least 2 points"));
    }
    if !(t_in < t_out) {
        return Err(Error::validation("object quadrature", "need t_in < t_out"));
    }
    let span = t_out - t_in;
    let last = (n_d - 1) as f64;
    Ok((0..n_d)
        .map(|n| if n + 1 == n_d { t_out } else { t_in + span * n as f64 / last })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    Background { plane: usize },
    /// `node` indexes `SceneGraph::objects`; `k` is the quadrature index.
    Object { track: TrackId, node: usize, k: usize },
}

impl SampleSource {
    fn rank(&self) -> (u8, u32, usize) {
        match *self {
            SampleSource::Background { plane } => (0, 0, plane),
            SampleSource::Object { track, k, .. } => (1, track.0, k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub t: f64,
    pub source: SampleSource,
    /// World position.
    pub x: Vec3,
    /// Object-frame position for object samples.
    pub x_o: Option<Vec3>,
}

/// An object box crossed by a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxHit {
    pub node: usize,
    pub track: TrackId,
    pub t_in: f64,
    pub t_out: f64,
    /// Object-frame ray origin and unnormalized direction; the object-frame
    /// point at world parameter `t` is `origin_o + t * dir_o`.
    pub origin_o: Vec3,
    pub dir_o: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub ray: Ray,
    pub samples: Vec<SamplePoint>,
    pub hits: Vec<BoxHit>,
    /// Planes skipped because the ray is parallel or out of range.
    pub skipped_planes: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ts(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }
}

/// Ray crossing of one object's box.
pub fn box_hit(ray: &Ray, node_index: usize, node: &ObjectNode) -> Option<BoxHit> {
    let origin_o = world_to_object(&node.pose, &node.dims, &ray.origin);
    let dir_o = direction_to_object_unnormalized(&node.pose, &node.dims, &ray.direction);
    let (t_in, t_out) = ray_aabb_unit(&origin_o, &dir_o, ray.t_near, ray.t_far)?;
    Some(BoxHit {
        node: node_index,
        track: node.track_id,
        t_in,
        t_out,
        origin_o,
        dir_o,
    })
}

fn order(a: &SamplePoint, b: &SamplePoint) -> Ordering {
    a.t.total_cmp(&b.t).then(a.source.rank().cmp(&b.source.rank()))
}

/// Plane samples plus `n_d` samples in every box the ray crosses, sorted by
/// `t`. Near-ties are broken by source: background first, then objects by
/// ascending track id, then quadrature index.
pub fn assemble_samples(
    ray: &Ray,
    graph: &SceneGraph,
    planes: &PlaneStack,
    n_d: usize,
) -> Result<SampleSet> {
    let plane_hits = plane_intersections(ray, planes);
    let skipped_planes = planes.len() - plane_hits.len();
    let mut samples: Vec<SamplePoint> = plane_hits
        .iter()
        .map(|h| SamplePoint {
            t: h.t,
            source: SampleSource::Background { plane: h.plane },
            x: ray.at(h.t),
            x_o: None,
        })
        .collect();
    let mut hits = Vec::new();
    for (idx, node) in graph.objects.iter().enumerate() {
        if let Some(hit) = box_hit(ray, idx, node) {
            for (k, t) in object_quadrature(hit.t_in, hit.t_out, n_d)?.into_iter().enumerate() {
                samples.push(SamplePoint {
                    t,
                    source: SampleSource::Object {
                        track: node.track_id,
                        node: idx,
                        k,
                    },
                    x: ray.at(t),
                    x_o: Some(hit.origin_o + hit.dir_o * t),
                });
            }
            hits.push(hit);
        }
    }
    samples.sort_by(order);
    // Within tolerance, source order wins over a sub-tolerance t difference.
    let mut swapped = true;
    while swapped {
        swapped = false;
        for i in 1..samples.len() {
            let (a, b) = (&samples[i - 1], &samples[i]);
            if (b.t - a.t).abs() < TIE_EPS && b.source.rank() < a.source.rank() {
                samples.swap(i - 1, i);
                swapped = true;
            }
        }
    }
    Ok(SampleSet {
        ray: *ray,
        samples,
        hits,
        skipped_planes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::{BoxDims, ClassId};
    use proptest::prelude::*;

    fn axis_ray() -> Ray {
        Ray::new(Vec3::zeros(), Vec3::new(0.0, 0.0, -1.0), 0.0, f64::INFINITY).unwrap()
    }

    fn stack(near: f64, far: f64, n: usize) -> PlaneStack {
        PlaneStack::new(&BackgroundNode::new(near, far, n, RigidTransform::identity()).unwrap())
    }

    #[test]
    fn principal_ray() {
        let k = Intrinsics::new(1.0, 1.0, 0.5, 0.5, 1, 1).unwrap();
        let r = generate_ray(&k, &RigidTransform::identity(), (0, 0), None).unwrap();
        assert!((r.direction - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        let k = Intrinsics::new(1.0, 1.0, 0.5, 0.5, 2, 1).unwrap();
        let r = generate_ray(&k, &RigidTransform::identity(), (1, 0), None).unwrap();
        let expect = Vec3::new(1.0, 0.0, -1.0).normalize();
        assert!((r.direction - expect).norm() < 1e-15);
        assert!(generate_ray(&k, &RigidTransform::identity(), (2, 0), None).is_err());
    }

    #[test]
    fn full_frame_unit_directions() {
        let k = Intrinsics::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap();
        let pose = RigidTransform::from_euler(0.3, -0.1, 0.05, Vec3::new(1.0, 2.0, 3.0));
        for j in 0..64 {
            for i in 0..64 {
                let r = generate_ray(&k, &pose, (i, j), None).unwrap();
                assert!((r.direction.norm() - 1.0).abs() < 1e-9);
                assert_eq!(r.origin, Vec3::new(1.0, 2.0, 3.0));
            }
        }
    }

    #[test]
    fn plane_hits_on_axis() {
        let ts: Vec<f64> = plane_intersections(&axis_ray(), &stack(1.0, 6.0, 6))
            .iter()
            .map(|h| h.t)
            .collect();
        assert_eq!(ts, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn parallel_ray_misses_planes() {
        let r = Ray::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), 0.0, f64::INFINITY).unwrap();
        assert!(plane_intersections(&r, &stack(1.0, 6.0, 6)).is_empty());
    }

    #[test]
    fn oblique_ray_doubles_t() {
        let a = 60f64.to_radians();
        let r = Ray::new(Vec3::zeros(), Vec3::new(a.sin(), 0.0, -a.cos()), 0.0, f64::INFINITY).unwrap();
        let hits = plane_intersections(&r, &stack(1.0, 6.0, 6));
        for (h, depth) in hits.iter().zip(1..) {
            assert!((h.t - 2.0 * depth as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn bounded_ray_ends_one_spacing_past_far() {
        let planes = stack(1.0, 6.0, 6);
        let r = planes.bound(axis_ray());
        assert!((r.t_far - 7.0).abs() < 1e-12);
        let hits = plane_intersections(&Ray { t_far: 3.5, ..r }, &planes);
        assert_eq!(hits.len(), 3);
    }

    #[test]
    fn slab_examples() {
        let d = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(
            ray_aabb_unit(&Vec3::new(-2.0, 0.0, 0.0), &d, 0.0, f64::INFINITY),
            Some((1.0, 3.0))
        );
        assert_eq!(ray_aabb_unit(&Vec3::new(-2.0, 2.0, 0.0), &d, 0.0, f64::INFINITY), None);
        assert_eq!(ray_aabb_unit(&Vec3::new(-2.0, 0.0, 0.0), &d, 0.0, 0.5), None);
        assert_eq!(ray_aabb_unit(&Vec3::new(2.0, 0.0, 0.0), &d, 0.0, 9.0), None);
        // Inside the box: entrance clipped to t_near.
        assert_eq!(ray_aabb_unit(&Vec3::zeros(), &d, 0.0, 9.0), Some((0.0, 1.0)));
        // Running along a face counts; touching a corner does not.
        assert_eq!(ray_aabb_unit(&Vec3::new(-2.0, 1.0, 1.0), &d, 0.0, 9.0), Some((1.0, 3.0)));
        assert_eq!(
            ray_aabb_unit(&Vec3::new(-2.0, 0.0, 0.0), &Vec3::new(1.0, 1.0, 0.0), 0.0, 9.0),
            None
        );
    }

    #[test]
    fn quadrature_examples() {
        assert_eq!(
            object_quadrature(2.0, 5.0, 7).unwrap(),
            vec![2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0]
        );
        assert_eq!(object_quadrature(1.25, 3.0, 2).unwrap(), vec![1.25, 3.0]);
        assert!(object_quadrature(1.0, 2.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn quadrature_spacing_constant(t0 in -10.0..10.0f64, len in 0.01..20.0f64, n in 2usize..40) {
            let ts = object_quadrature(t0, t0 + len, n).unwrap();
            let step = len / (n - 1) as f64;
            for w in ts.windows(2) {
                prop_assert!((w[1] - w[0] - step).abs() < 1e-12);
            }
            prop_assert_eq!(ts[0], t0);
            prop_assert_eq!(ts[n - 1], t0 + len);
        }
    }

    fn graph_with(objects: Vec<ObjectNode>) -> SceneGraph {
        let k = Intrinsics::new(32.0, 32.0, 16.0, 16.0, 32, 32).unwrap();
        let bg = BackgroundNode::new(1.0, 6.0, 6, RigidTransform::identity()).unwrap();
        SceneGraph::new(0, k, RigidTransform::identity(), bg, objects).unwrap()
    }

    fn cube_at(track: u32, z: f64, size: f64) -> ObjectNode {
        ObjectNode::new(
            TrackId(track),
            ClassId(0),
            RigidTransform::from_translation(Vec3::new(0.0, 0.0, z)),
            BoxDims::new(size, size, size).unwrap(),
        )
    }

    #[test]
    fn object_between_planes_is_contiguous() {
        let g = graph_with(vec![cube_at(1, -2.5, 0.5)]);
        let planes = PlaneStack::new(&g.background);
        let ray = planes.bound(axis_ray());
        let set = assemble_samples(&ray, &g, &planes, 7).unwrap();
        assert_eq!(set.len(), 13);
        let kinds: Vec<bool> = set
            .samples
            .iter()
            .map(|s| matches!(s.source, SampleSource::Object { .. }))
            .collect();
        assert_eq!(&kinds[..2], &[false, false]);
        assert!(kinds[2..9].iter().all(|&k| k));
        assert!(kinds[9..].iter().all(|&k| !k));
        for s in &set.samples {
            assert!((s.x - ray.at(s.t)).norm() < 1e-9);
            if let Some(xo) = s.x_o {
                assert!(xo.amax() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn two_disjoint_objects_count() {
        let g = graph_with(vec![cube_at(4, -2.5, 0.5), cube_at(2, -4.5, 0.5)]);
        let planes = PlaneStack::new(&g.background);
        let set = assemble_samples(&planes.bound(axis_ray()), &g, &planes, 7).unwrap();
        assert_eq!(set.len(), 20);
        assert_eq!(set.skipped_planes, 0);
        assert!(set.ts().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ties_prefer_background_then_track_order() {
        // Both boxes span exactly [2, 3]; the plane at depth 2 coincides with
        // their entrance.
        let g = graph_with(vec![cube_at(9, -2.5, 1.0), cube_at(3, -2.5, 1.0)]);
        let planes = PlaneStack::new(&g.background);
        let set = assemble_samples(&planes.bound(axis_ray()), &g, &planes, 2).unwrap();
        let at2: Vec<SampleSource> = set
            .samples
            .iter()
            .filter(|s| (s.t - 2.0).abs() < 1e-9)
            .map(|s| s.source)
            .collect();
        assert_eq!(
            at2,
            vec![
                SampleSource::Background { plane: 1 },
                SampleSource::Object { track: TrackId(3), node: 1, k: 0 },
                SampleSource::Object { track: TrackId(9), node: 0, k: 0 },
            ]
        );
        let again = assemble_samples(&planes.bound(axis_ray()), &g, &planes, 2).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn rotated_box_keeps_world_t() {
        let node = ObjectNode::new(
            TrackId(1),
            ClassId(0),
            RigidTransform::from_yaw(0.7, Vec3::new(0.3, 0.1, -3.0)),
            BoxDims::new(2.0, 1.0, 0.8).unwrap(),
        );
        let ray = axis_ray();
        let hit = box_hit(&ray, 0, &node).unwrap();
        for t in [hit.t_in, hit.t_out] {
            let xo = world_to_object(&node.pose, &node.dims, &ray.at(t));
            assert!((xo.amax() - 1.0).abs() < 1e-9);
            assert!((xo - (hit.origin_o + hit.dir_o * t)).norm() < 1e-12);
        }
    }
}
