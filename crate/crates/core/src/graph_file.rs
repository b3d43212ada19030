//! Text description of a single scene graph, used to compose novel scenes
//! from trained nodes.
//!
//! ```text
//! nsg-graph v1
//! intrinsics fx fy cx cy W H
//! camera tx ty tz yaw pitch roll
//! object track class tx ty tz yaw L H W [latent T]
//! ```
//!
//! Angles are in degrees. `latent T` renders the object with the latent code
//! of track `T`; by default an object uses its own track's code.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scene_graph::{
    BackgroundNode, BoxDims, ClassId, Intrinsics, ObjectNode, RigidTransform, SceneGraph, TrackId,
    Vec3,
};

pub const GRAPH_HEADER: &str = "nsg-graph v1";

#[derive(Debug, Clone, PartialEq)]
pub struct GraphFile {
    pub intrinsics: Intrinsics,
    pub camera_pose: RigidTransform,
    pub objects: Vec<ObjectNode>,
}

impl GraphFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_graph(&text, path)
    }

    /// Scene graph over a trained background node.
    pub fn to_graph(&self, background: BackgroundNode) -> Result<SceneGraph> {
        SceneGraph::new(0, self.intrinsics, self.camera_pose, background, self.objects.clone())
    }
}

fn numbers(fields: &[&str], path: &Path, line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected a number, found `{f}`"),
            })
        })
        .collect()
}

pub fn parse_graph(text: &str, path: &Path) -> Result<GraphFile> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, h)) if h == GRAPH_HEADER => {}
        Some((n, h)) => return Err(err(n, format!("expected `{GRAPH_HEADER}`, found `{h}`"))),
        None => return Err(err(1, "empty graph file".into())),
    }
    let mut intrinsics = None;
    let mut camera = None;
    let mut objects: Vec<ObjectNode> = Vec::new();
    for (n, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        let wrap = |e: Error| err(n, e.to_string());
        match f[0] {
            "intrinsics" if f.len() == 7 => {
                let v = numbers(&f[1..5], path, n)?;
                let size: Vec<usize> = f[5..7]
                    .iter()
                    .map(|s| s.parse().map_err(|_| err(n, format!("bad image size `{s}`"))))
                    .collect::<Result<_>>()?;
                intrinsics =
                    Some(Intrinsics::new(v[0], v[1], v[2], v[3], size[0], size[1]).map_err(wrap)?);
            }
            "camera" if f.len() == 7 => {
                let v = numbers(&f[1..], path, n)?;
                camera = Some(RigidTransform::from_euler(
                    v[3].to_radians(),
                    v[4].to_radians(),
                    v[5].to_radians(),
                    Vec3::new(v[0], v[1], v[2]),
                ));
            }
            "object" if f.len() == 10 || f.len() == 12 => {
                let ids: Vec<u32> = [f[1], f[2]]
                    .iter()
                    .map(|s| s.parse().map_err(|_| err(n, format!("bad id `{s}`"))))
                    .collect::<Result<_>>()?;
                let v = numbers(&f[3..10], path, n)?;
                let track = TrackId(ids[0]);
                let dims = BoxDims::new(v[4], v[5], v[6])
                    .map_err(|e| err(n, format!("object {track}: {e}")))?;
                let pose = RigidTransform::from_yaw(v[3].to_radians(), Vec3::new(v[0], v[1], v[2]));
                let mut node = ObjectNode::new(track, ClassId(ids[1]), pose, dims);
                if f.len() == 12 {
                    if f[10] != "latent" {
                        return Err(err(n, format!("expected `latent`, found `{}`", f[10])));
                    }
                    node.latent_ref =
                        TrackId(f[11].parse().map_err(|_| err(n, format!("bad id `{}`", f[11])))?);
                }
                if objects.iter().any(|o| o.track_id == track) {
                    return Err(err(n, format!("duplicate object {track}")));
                }
                objects.push(node);
            }
            other => return Err(err(n, format!("unrecognized line `{other} ...`"))),
        }
    }
    Ok(GraphFile {
        intrinsics: intrinsics.ok_or_else(|| err(1, "missing `intrinsics` line".into()))?,
        camera_pose: camera.ok_or_else(|| err(1, "missing `camera` line".into()))?,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "nsg-graph v1\n\
        intrinsics 64 64 32 32 64 64\n\
        camera 0 1.5 0 0 0 0  # looking down -z\n\
        object 1 0 -2 0.75 -10 0 4 1.5 1.8\n\
        object 9 0 3 0.75 -12 180 4 1.5 1.8 latent 1\n";

    #[test]
    fn parses_objects_and_latent_refs() {
        let g = parse_graph(GOOD, Path::new("g")).unwrap();
        assert_eq!(g.objects.len(), 2);
        assert_eq!(g.objects[0].latent_ref, TrackId(1));
        assert_eq!(g.objects[1].latent_ref, TrackId(1));
        assert!((g.objects[1].pose.yaw().abs() - std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(g.intrinsics.width, 64);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = GOOD.replace("4 1.5 1.8 latent", "4 -1.5 1.8 latent");
        let e = parse_graph(&bad, Path::new("g")).unwrap_err().to_string();
        assert!(e.contains("g:5:") && e.contains("object 9"), "{e}");
        assert!(parse_graph("nsg-scene v1\n", Path::new("g")).is_err());
        let dup = format!("{GOOD}object 1 0 0 0.75 -9 0 4 1.5 1.8\n");
        assert!(parse_graph(&dup, Path::new("g")).unwrap_err().to_string().contains(":6:"));
    }
}
