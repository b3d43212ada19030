//! Scene-description files.
//!
//! Line-oriented text, `#` starts a comment:
//!
//! ```text
//! nsg-scene v1
//! intrinsics fx fy cx cy W H
//! clips near far
//! box_scale sL sH sW                       (optional, default 1.4 1.0 1.4)
//! frame k image <path> cam tx ty tz yaw pitch roll
//! frame k image <path> cam tx ty tz R r00 r01 r02 r10 r11 r12 r20 r21 r22
//! track id class tx ty tz yaw L H W [scale sL sH sW]
//! track id class tx ty tz R r00 .. r22 L H W [scale sL sH sW]
//! ```
//!
//! Angles are in degrees. Track lines belong to the preceding frame line.
//! Image paths are relative to the scene file's directory. The box scale
//! multiplier enlarges tracked boxes (e.g. to include shadows) at load time.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{ppm_dimensions, ImageBuffer};
use crate::scene_graph::{
    BackgroundNode, BoxDims, ClassId, Intrinsics, Mat3, RigidTransform, TrackId, Vec3,
};

pub const SCENE_HEADER: &str = "nsg-scene v1";
pub const DEFAULT_BOX_SCALE: [f64; 3] = [1.4, 1.0, 1.4];

/// Orientation as written in a scene file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Orientation {
    /// Degrees; `R = Ry(yaw) Rx(pitch) Rz(roll)`.
    Euler { yaw: f64, pitch: f64, roll: f64 },
    Matrix(Mat3),
}

impl Orientation {
    pub fn yaw_deg(yaw: f64) -> Self {
        Orientation::Euler {
            yaw,
            pitch: 0.0,
            roll: 0.0,
        }
    }

    pub fn to_transform(&self, translation: Vec3) -> Result<RigidTransform> {
        match *self {
            Orientation::Euler { yaw, pitch, roll } => Ok(RigidTransform::from_euler(
                yaw.to_radians(),
                pitch.to_radians(),
                roll.to_radians(),
                translation,
            )),
            Orientation::Matrix(r) => RigidTransform::new(r, translation),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackBox {
    pub track_id: TrackId,
    pub class_id: ClassId,
    pub translation: Vec3,
    pub orientation: Orientation,
    /// Box dimensions as annotated, before the scale multiplier.
    pub raw_dims: BoxDims,
    /// Explicit per-track multiplier; `None` uses the file-wide default.
    pub scale: Option<Vec3>,
    pub pose: RigidTransform,
    /// Dimensions used for rendering: `raw_dims` times the multiplier.
    pub dims: BoxDims,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: usize,
    /// As written in the file.
    pub image: String,
    pub cam_translation: Vec3,
    pub cam_orientation: Orientation,
    pub camera_pose: RigidTransform,
    pub tracks: Vec<TrackBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub box_scale: Vec3,
    pub frames: Vec<Frame>,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
}

impl SceneDataset {
    pub fn frame(&self, id: usize) -> Result<&Frame> {
        self.frames.get(id).ok_or(Error::UnknownFrame(id))
    }

    pub fn image_path(&self, id: usize) -> Result<PathBuf> {
        Ok(self.root.join(&self.frame(id)?.image))
    }

    pub fn load_image(&self, id: usize) -> Result<ImageBuffer> {
        ImageBuffer::load_ppm(&self.image_path(id)?)
    }

    pub fn load_images(&self) -> Result<Vec<ImageBuffer>> {
        (0..self.frames.len()).map(|k| self.load_image(k)).collect()
    }

    /// Background node anchored at the first camera pose.
    pub fn background_node(&self, n_planes: usize) -> Result<BackgroundNode> {
        let first = self.frame(0)?;
        BackgroundNode::new(self.near, self.far, n_planes, first.camera_pose)
    }

    /// Sorted ids of every track in the dataset.
    pub fn track_ids(&self) -> Vec<TrackId> {
        let mut ids: Vec<TrackId> = self
            .frames
            .iter()
            .flat_map(|f| f.tracks.iter().map(|t| t.track_id))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Mean rendering dimensions per class, sorted by class id.
    pub fn class_mean_dims(&self) -> Vec<(ClassId, BoxDims)> {
        let mut acc: std::collections::BTreeMap<ClassId, (Vec3, usize)> = Default::default();
        for t in self.frames.iter().flat_map(|f| f.tracks.iter()) {
            let e = acc.entry(t.class_id).or_insert((Vec3::zeros(), 0));
            e.0 += t.dims.as_vec();
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(c, (sum, n))| {
                let m = sum / n as f64;
                (c, BoxDims::new(m.x, m.y, m.z).expect("mean of positive dims"))
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let ds = parse_scene(&text, path, root)?;
        ds.check_images()?;
        Ok(ds)
    }

    /// Every referenced image exists and matches the intrinsics.
    pub fn check_images(&self) -> Result<()> {
        for f in &self.frames {
            let p = self.root.join(&f.image);
            let (w, h) = ppm_dimensions(&p)?;
            if (w, h) != (self.intrinsics.width, self.intrinsics.height) {
                return Err(Error::validation(
                    p.display().to_string(),
                    format!(
                        "image is {w}x{h}, intrinsics say {}x{}",
                        self.intrinsics.width, self.intrinsics.height
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        let mut s = String::new();
        writeln!(s, "{SCENE_HEADER}").unwrap();
        writeln!(s, "intrinsics {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height).unwrap();
        writeln!(s, "clips {} {}", self.near, self.far).unwrap();
        let b = self.box_scale;
        writeln!(s, "box_scale {} {} {}", b.x, b.y, b.z).unwrap();
        for f in &self.frames {
            let t = f.cam_translation;
            write!(s, "frame {} image {} cam {} {} {} ", f.id, f.image, t.x, t.y, t.z).unwrap();
            write_orientation(&mut s, &f.cam_orientation, true);
            s.push('\n');
            for tr in &f.tracks {
                let p = tr.translation;
                write!(s, "track {} {} {} {} {} ", tr.track_id, tr.class_id, p.x, p.y, p.z).unwrap();
                write_orientation(&mut s, &tr.orientation, false);
                let d = tr.raw_dims;
                write!(s, " {} {} {}", d.length, d.height, d.width).unwrap();
                if let Some(sc) = tr.scale {
                    write!(s, " scale {} {} {}", sc.x, sc.y, sc.z).unwrap();
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn write_orientation(s: &mut String, o: &Orientation, camera: bool) {
    match o {
        Orientation::Euler { yaw, pitch, roll } if camera => {
            write!(s, "{yaw} {pitch} {roll}").unwrap()
        }
        Orientation::Euler { yaw, .. } => write!(s, "{yaw}").unwrap(),
        Orientation::Matrix(r) => {
            s.push('R');
            for i in 0..3 {
                for j in 0..3 {
                    write!(s, " {}", r[(i, j)]).unwrap();
                }
            }
        }
    }
}

struct Tokens<'a> {
    items: Vec<&'a str>,
    pos: usize,
    path: &'a Path,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        let t = self
            .items
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err(format!("missing {what}")))?;
        self.pos += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&'a str> {
        self.items.get(self.pos).copied()
    }

    fn expect(&mut self, kw: &str) -> Result<()> {
        let t = self.next(kw)?;
        if t != kw {
            return Err(self.err(format!("expected '{kw}', found '{t}'")));
        }
        Ok(())
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let t = self.next(what)?;
        let v: f64 = t
            .parse()
            .map_err(|_| self.err(format!("{what}: '{t}' is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(format!("{what} must be finite")));
        }
        Ok(v)
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let t = self.next(what)?;
        t.parse()
            .map_err(|_| self.err(format!("{what}: '{t}' is not a non-negative integer")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let t = self.next(what)?;
        t.parse()
            .map_err(|_| self.err(format!("{what}: '{t}' is not a non-negative integer")))
    }

    fn vec3(&mut self, what: &str) -> Result<Vec3> {
        Ok(Vec3::new(self.f64(what)?, self.f64(what)?, self.f64(what)?))
    }

    fn orientation(&mut self, camera: bool) -> Result<Orientation> {
        if self.peek() == Some("R") {
            self.pos += 1;
            let mut m = Mat3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    m[(i, j)] = self.f64("rotation entry")?;
                }
            }
            return Ok(Orientation::Matrix(m));
        }
        let yaw = self.f64("yaw")?;
        if camera {
            Ok(Orientation::Euler {
                yaw,
                pitch: self.f64("pitch")?,
                roll: self.f64("roll")?,
            })
        } else {
            Ok(Orientation::yaw_deg(yaw))
        }
    }

    fn finish(&self) -> Result<()> {
        match self.peek() {
            Some(t) => Err(self.err(format!("unexpected token '{t}'"))),
            None => Ok(()),
        }
    }
}

/// Parses scene text; `path` is used for messages and `root` for images.
pub fn parse_scene(text: &str, path: &Path, root: PathBuf) -> Result<SceneDataset> {
    let mut intrinsics = None;
    let mut clips = None;
    let mut box_scale = Vec3::from(DEFAULT_BOX_SCALE);
    let mut frames: Vec<Frame> = Vec::new();
    let mut seen_header = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = Tokens {
            items: line.split_whitespace().collect(),
            pos: 0,
            path,
            line: idx + 1,
        };
        if !seen_header {
            if line.split_whitespace().collect::<Vec<_>>().join(" ") != SCENE_HEADER {
                return Err(tok.err(format!("expected header '{SCENE_HEADER}'")));
            }
            seen_header = true;
            continue;
        }
        match tok.next("keyword")? {
            "intrinsics" => {
                let (fx, fy, cx, cy) = (tok.f64("fx")?, tok.f64("fy")?, tok.f64("cx")?, tok.f64("cy")?);
                let (w, h) = (tok.usize("width")?, tok.usize("height")?);
                tok.finish()?;
                intrinsics =
                    Some(Intrinsics::new(fx, fy, cx, cy, w, h).map_err(|e| tok.err(e.to_string()))?);
            }
            "clips" => {
                let (n, f) = (tok.f64("near")?, tok.f64("far")?);
                tok.finish()?;
                if !(n > 0.0 && n < f) {
                    return Err(tok.err("clips need 0 < near < far"));
                }
                clips = Some((n, f));
            }
            "box_scale" => {
                let s = tok.vec3("box scale")?;
                tok.finish()?;
                if !s.iter().all(|&v| v > 0.0) {
                    return Err(tok.err("box scale must be positive"));
                }
                box_scale = s;
            }
            "frame" => {
                let id = tok.usize("frame id")?;
                if id != frames.len() {
                    return Err(tok.err(format!(
                        "frame ids must be contiguous from 0; expected {}, found {id}",
                        frames.len()
                    )));
                }
                tok.expect("image")?;
                let image = tok.next("image path")?.to_string();
                tok.expect("cam")?;
                let t = tok.vec3("camera translation")?;
                let o = tok.orientation(true)?;
                tok.finish()?;
                let pose = o.to_transform(t).map_err(|e| tok.err(e.to_string()))?;
                frames.push(Frame {
                    id,
                    image,
                    cam_translation: t,
                    cam_orientation: o,
                    camera_pose: pose,
                    tracks: Vec::new(),
                });
            }
            "track" => {
                let track_id = TrackId(tok.u32("track id")?);
                let class_id = ClassId(tok.u32("class id")?);
                let t = tok.vec3("track translation")?;
                let o = tok.orientation(false)?;
                let (l, h, w) = (tok.f64("length")?, tok.f64("height")?, tok.f64("width")?);
                let scale = if tok.peek() == Some("scale") {
                    tok.pos += 1;
                    let s = tok.vec3("scale")?;
                    if !s.iter().all(|&v| v > 0.0) {
                        return Err(tok.err(format!("track {track_id}: scale must be positive")));
                    }
                    Some(s)
                } else {
                    None
                };
                tok.finish()?;
                let raw_dims = BoxDims::new(l, h, w)
                    .map_err(|e| tok.err(format!("track {track_id}: {e}")))?;
                let pose = o.to_transform(t).map_err(|e| tok.err(e.to_string()))?;
                let frame = frames
                    .last_mut()
                    .ok_or_else(|| tok.err("track line before any frame"))?;
                if frame.tracks.iter().any(|x| x.track_id == track_id) {
                    return Err(tok.err(format!("track {track_id} repeated in frame {}", frame.id)));
                }
                frame.tracks.push(TrackBox {
                    track_id,
                    class_id,
                    translation: t,
                    orientation: o,
                    raw_dims,
                    scale,
                    pose,
                    dims: raw_dims, // multiplier applied below
                });
            }
            other => return Err(tok.err(format!("unknown keyword '{other}'"))),
        }
    }

    let missing = |what: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("missing {what} line"),
    };
    if !seen_header {
        return Err(missing("header"));
    }
    let intrinsics = intrinsics.ok_or_else(|| missing("intrinsics"))?;
    let (near, far) = clips.ok_or_else(|| missing("clips"))?;
    if frames.is_empty() {
        return Err(missing("frame"));
    }
    for f in &mut frames {
        for t in &mut f.tracks {
            let s = t.scale.unwrap_or(box_scale);
            t.dims = t.raw_dims.scaled(&s);
        }
    }
    Ok(SceneDataset {
        intrinsics,
        near,
        far,
        box_scale,
        frames,
        root,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::graph_for_frame;

    fn parse(text: &str) -> Result<SceneDataset> {
        parse_scene(text, Path::new("test.scene"), PathBuf::new())
    }

    const MINIMAL: &str = "nsg-scene v1\nintrinsics 32 32 16 16 32 32\nclips 1 20\nframe 0 image f0.ppm cam 0 0 0 0 0 0\n";

    #[test]
    fn minimal_file() {
        let ds = parse(MINIMAL).unwrap();
        assert_eq!(ds.frames.len(), 1);
        assert!(ds.frames[0].tracks.is_empty());
        let bg = ds.background_node(6).unwrap();
        let g = graph_for_frame(&ds, 0, &bg).unwrap();
        assert!(g.objects.is_empty());
    }

    #[test]
    fn negative_width_names_track() {
        let text = format!("{MINIMAL}track 7 0 0 0 -5 0 4 1.5 -1.8\n");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("track 7"), "{err}");
        assert!(err.contains(":5:"), "line number in {err}");
    }

    #[test]
    fn sparse_tracks_and_scale() {
        let text = "nsg-scene v1\nintrinsics 32 32 16 16 32 32\nclips 1 20\n\
            frame 0 image a.ppm cam 0 0 0 0 0 0\ntrack 3 0 0 0 -8 90 4 1.5 2\n\
            frame 1 image b.ppm cam 0 0 0 0 0 0\n\
            frame 2 image c.ppm cam 0 0 0 0 0 0\ntrack 3 0 1 0 -8 90 4 1.5 2 scale 1 1 1\n";
        let ds = parse(text).unwrap();
        let bg = ds.background_node(6).unwrap();
        assert!(graph_for_frame(&ds, 1, &bg).unwrap().objects.is_empty());
        let g0 = graph_for_frame(&ds, 0, &bg).unwrap();
        assert_eq!(g0.objects.len(), 1);
        assert!((g0.objects[0].dims.length - 5.6).abs() < 1e-12);
        assert!((g0.objects[0].dims.height - 1.5).abs() < 1e-12);
        assert!((g0.objects[0].pose.yaw() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let g2 = graph_for_frame(&ds, 2, &bg).unwrap();
        assert!((g2.objects[0].dims.length - 4.0).abs() < 1e-12);
        assert!(matches!(graph_for_frame(&ds, 3, &bg), Err(Error::UnknownFrame(3))));
    }

    #[test]
    fn rotation_matrix_alternative() {
        let text = format!("{MINIMAL}track 1 2 0 0 -5 R 0 0 1 0 1 0 -1 0 0 4 1.5 1.8\n");
        let ds = parse(&text).unwrap();
        assert!((ds.frames[0].tracks[0].pose.yaw() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let bad = format!("{MINIMAL}track 1 2 0 0 -5 R 2 0 0 0 1 0 0 0 1 4 1.5 1.8\n");
        assert!(parse(&bad).is_err());
    }

    #[test]
    fn structural_errors() {
        assert!(parse("intrinsics 1 1 1 1 2 2\n").is_err());
        assert!(parse(&MINIMAL.replace("frame 0", "frame 1")).is_err());
        assert!(parse(&format!("{MINIMAL}bogus 1\n")).is_err());
        assert!(parse("nsg-scene v1\nclips 1 20\nframe 0 image a cam 0 0 0 0 0 0\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let text = "nsg-scene v1\nintrinsics 40 41 20.5 19 40 38\nclips 0.5 30\nbox_scale 1.2 1 1.3\n\
            frame 0 image a.ppm cam 0.1 1.5 0 2.5 -1 0.25\ntrack 3 0 0.3 0.75 -8.125 17.5 4 1.5 2\n\
            frame 1 image b.ppm cam 0 1.5 -0.5 R 1 0 0 0 1 0 0 0 1\ntrack 4 1 0 0 -9 -33 3 1 1 scale 1 1 1\n";
        let ds = parse(text).unwrap();
        let again = parse(&ds.to_text()).unwrap();
        assert_eq!(ds, again);
    }
}
