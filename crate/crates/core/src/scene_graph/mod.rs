//! Per-frame scene graphs: a world root with one camera, one background node
//! and a set of dynamic object nodes, each hanging off the root by a rigid
//! edge transform.

mod transform;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use transform::{
    direction_to_object, direction_to_object_unnormalized, object_to_world, world_to_object,
    yaw_matrix, BoxDims, Mat3, RigidTransform, Vec3,
};

use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::field::LatentTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrackId(pub u32);

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation("intrinsics", "focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::validation("intrinsics", "cx outside image"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::validation("intrinsics", "cy outside image"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous image coordinates of a camera-frame point (camera looks
    /// along -z, y up). `None` for points at or behind the camera plane.
    pub fn project(&self, x_cam: &Vec3) -> Option<(f64, f64)> {
        if x_cam.z >= -1e-9 {
            return None;
        }
        let depth = -x_cam.z;
        Some((
            self.cx + self.fx * x_cam.x / depth,
            self.cy - self.fy * x_cam.y / depth,
        ))
    }
}

/// Inclusive-exclusive pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn area(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.x1 - self.x0) * (self.y1 - self.y0)
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.x0 && i < self.x1 && j >= self.y0 && j < self.y1
    }

    pub fn intersects(&self, other: &PixelRect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y1).flat_map(move |j| (self.x0..self.x1).map(move |i| (i, j)))
    }

    pub fn padded(&self, pad: usize, width: usize, height: usize) -> Self {
        Self {
            x0: self.x0.saturating_sub(pad),
            y0: self.y0.saturating_sub(pad),
            x1: (self.x1 + pad).min(width),
            y1: (self.y1 + pad).min(height),
        }
    }
}

/// Pixel rectangle covered by the projection of a box's eight corners,
/// clipped to the image. `None` when any corner is behind the camera or the
/// clipped rectangle is empty.
pub fn projected_box(
    intr: &Intrinsics,
    cam_pose: &RigidTransform,
    pose: &RigidTransform,
    dims: &BoxDims,
) -> Option<PixelRect> {
    let (mut u0, mut v0) = (f64::INFINITY, f64::INFINITY);
    let (mut u1, mut v1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in 0..8 {
        let corner = Vec3::new(
            if k & 1 == 0 { -1.0 } else { 1.0 },
            if k & 2 == 0 { -1.0 } else { 1.0 },
            if k & 4 == 0 { -1.0 } else { 1.0 },
        );
        let x = object_to_world(pose, dims, &corner);
        let (u, v) = intr.project(&cam_pose.apply_inverse(&x))?;
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    // A pixel (i, j) is inside when its centre (i + 0.5, j + 0.5) is.
    let lo = |a: f64| (a - 0.5).ceil().max(0.0) as usize;
    let hi = |a: f64, n: usize| ((a - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
    let rect = PixelRect {
        x0: lo(u0).min(intr.width),
        y0: lo(v0).min(intr.height),
        x1: hi(u1, intr.width),
        y1: hi(v1, intr.height),
    };
    (!rect.is_empty()).then_some(rect)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub track_id: TrackId,
    pub class_id: ClassId,
    pub pose: RigidTransform,
    pub dims: BoxDims,
    /// Key into the latent table; equal to `track_id` for tracked objects.
    pub latent_ref: TrackId,
}

impl ObjectNode {
    pub fn new(track_id: TrackId, class_id: ClassId, pose: RigidTransform, dims: BoxDims) -> Self {
        Self {
            track_id,
            class_id,
            pose,
            dims,
            latent_ref: track_id,
        }
    }

    /// Global location `p_o`, the translation of the node's pose.
    pub fn position(&self) -> Vec3 {
        *self.pose.translation()
    }
}

/// Static node: a stack of planes parallel to the image plane of the
/// reference (first) camera pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundNode {
    pub near: f64,
    pub far: f64,
    pub n_planes: usize,
    pub reference_pose: RigidTransform,
}

impl BackgroundNode {
    pub fn new(near: f64, far: f64, n_planes: usize, reference_pose: RigidTransform) -> Result<Self> {
        let node = Self {
            near,
            far,
            n_planes,
            reference_pose,
        };
        node.validate()?;
        Ok(node)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::validation(
                "background node",
                format!("need 0 < near < far, got {} / {}", self.near, self.far),
            ));
        }
        if self.n_planes < 2 {
            return Err(Error::validation("background node", "need at least 2 planes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphEdit {
    RemoveNode(TrackId),
    SetPose(TrackId, RigidTransform),
    AddNode(ObjectNode),
    SetCameraPose(RigidTransform),
}

/// Scene graph for one frame. Depth is at most two: every node is a direct
/// child of the world root.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub frame_id: usize,
    pub intrinsics: Intrinsics,
    pub camera_pose: RigidTransform,
    pub background: BackgroundNode,
    pub objects: Vec<ObjectNode>,
}

impl SceneGraph {
    pub fn new(
        frame_id: usize,
        intrinsics: Intrinsics,
        camera_pose: RigidTransform,
        background: BackgroundNode,
        objects: Vec<ObjectNode>,
    ) -> Result<Self> {
        let g = Self {
            frame_id,
            intrinsics,
            camera_pose,
            background,
            objects,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.background.validate()?;
        let mut seen = BTreeSet::new();
        for o in &self.objects {
            o.dims.validate()?;
            if !seen.insert(o.track_id) {
                return Err(Error::DuplicateTrack(o.track_id));
            }
        }
        Ok(())
    }

    pub fn object(&self, id: TrackId) -> Option<&ObjectNode> {
        self.objects.iter().find(|o| o.track_id == id)
    }

    pub fn track_ids(&self) -> Vec<TrackId> {
        self.objects.iter().map(|o| o.track_id).collect()
    }

    /// Every object's latent resolves in `latents`.
    pub fn check_latents(&self, latents: &LatentTable) -> Result<()> {
        for o in &self.objects {
            if !latents.contains(o.latent_ref) {
                return Err(Error::MissingLatent(o.latent_ref));
            }
        }
        Ok(())
    }

    /// Applies one edit to a copy of the graph.
    pub fn edit(&self, edit: &GraphEdit, latents: &LatentTable) -> Result<SceneGraph> {
        let mut g = self.clone();
        match edit {
            GraphEdit::RemoveNode(id) => {
                let idx = g.index_of(*id)?;
                g.objects.remove(idx);
            }
            GraphEdit::SetPose(id, pose) => {
                let idx = g.index_of(*id)?;
                g.objects[idx].pose = *pose;
            }
            GraphEdit::AddNode(node) => {
                if g.object(node.track_id).is_some() {
                    return Err(Error::DuplicateTrack(node.track_id));
                }
                if !latents.contains(node.latent_ref) {
                    return Err(Error::MissingLatent(node.latent_ref));
                }
                g.objects.push(node.clone());
            }
            GraphEdit::SetCameraPose(pose) => g.camera_pose = *pose,
        }
        g.validate()?;
        Ok(g)
    }

    fn index_of(&self, id: TrackId) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o.track_id == id)
            .ok_or(Error::UnknownTrack(id))
    }
}

/// Assembles the graph for one frame of a dataset. The background node is
/// shared by every frame of the dataset.
pub fn graph_for_frame(
    dataset: &SceneDataset,
    frame_id: usize,
    background: &BackgroundNode,
) -> Result<SceneGraph> {
    let frame = dataset.frame(frame_id)?;
    let mut objects = Vec::with_capacity(frame.tracks.len());
    for t in &frame.tracks {
        t.dims.validate().map_err(|e| {
            Error::validation(format!("track {} in frame {frame_id}", t.track_id), e.to_string())
        })?;
        objects.push(ObjectNode::new(t.track_id, t.class_id, t.pose, t.dims));
    }
    SceneGraph::new(
        frame_id,
        dataset.intrinsics,
        frame.camera_pose,
        *background,
        objects,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_graph() -> SceneGraph {
        let k = Intrinsics::new(32.0, 32.0, 16.0, 16.0, 32, 32).unwrap();
        let bg = BackgroundNode::new(1.0, 10.0, 6, RigidTransform::identity()).unwrap();
        let node = ObjectNode::new(
            TrackId(3),
            ClassId(0),
            RigidTransform::from_translation(Vec3::new(0.0, 0.0, -5.0)),
            BoxDims::new(2.0, 1.0, 1.0).unwrap(),
        );
        SceneGraph::new(0, k, RigidTransform::identity(), bg, vec![node]).unwrap()
    }

    fn latents() -> LatentTable {
        LatentTable::zeros(&[TrackId(3), TrackId(4)], 4)
    }

    #[test]
    fn remove_only_object_leaves_background() {
        let g = base_graph();
        let edited = g.edit(&GraphEdit::RemoveNode(TrackId(3)), &latents()).unwrap();
        assert!(edited.objects.is_empty());
        assert_eq!(g.objects.len(), 1, "input graph must be untouched");
    }

    #[test]
    fn set_pose_rotates_by_exact_yaw() {
        let g = base_graph();
        let node = g.object(TrackId(3)).unwrap();
        let step = 5f64.to_radians();
        let new_pose = RigidTransform::from_yaw(node.pose.yaw() + step, node.position());
        let edited = g
            .edit(&GraphEdit::SetPose(TrackId(3), new_pose), &latents())
            .unwrap();
        let diff = edited.object(TrackId(3)).unwrap().pose.yaw() - node.pose.yaw();
        assert!((diff - step).abs() < 1e-12);
    }

    #[test]
    fn add_duplicate_and_unknown_fail() {
        let g = base_graph();
        let dup = g.objects[0].clone();
        assert!(matches!(
            g.edit(&GraphEdit::AddNode(dup), &latents()),
            Err(Error::DuplicateTrack(_))
        ));
        assert!(matches!(
            g.edit(&GraphEdit::RemoveNode(TrackId(9)), &latents()),
            Err(Error::UnknownTrack(_))
        ));
        let mut orphan = g.objects[0].clone();
        orphan.track_id = TrackId(10);
        orphan.latent_ref = TrackId(10);
        assert!(matches!(
            g.edit(&GraphEdit::AddNode(orphan), &latents()),
            Err(Error::MissingLatent(_))
        ));
    }

    #[test]
    fn add_node_reusing_latent() {
        let g = base_graph();
        let mut extra = g.objects[0].clone();
        extra.track_id = TrackId(11);
        extra.latent_ref = TrackId(4);
        let edited = g.edit(&GraphEdit::AddNode(extra), &latents()).unwrap();
        assert_eq!(edited.objects.len(), 2);
    }

    #[test]
    fn projected_box_contains_center() {
        let g = base_graph();
        let o = &g.objects[0];
        let rect = projected_box(&g.intrinsics, &g.camera_pose, &o.pose, &o.dims).unwrap();
        assert!(rect.contains(16, 16));
        // Half-length 1 at depth 5 spans +/- 6.4 px horizontally around cx.
        assert!(rect.x1 - rect.x0 >= 12 && rect.x1 - rect.x0 <= 16);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 2.0, 2.0, 4, 4).is_ok());
    }
}
