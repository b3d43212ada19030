//! Ray batches balanced between object and background pixels.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene_graph::{projected_box, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PixelRef {
    pub frame: usize,
    pub i: usize,
    pub j: usize,
}

/// Every training pixel, plus those inside some projected object box.
#[derive(Debug, Clone)]
pub struct PixelPools {
    width: usize,
    height: usize,
    n_frames: usize,
    object: Vec<usize>,
}

impl PixelPools {
    pub fn new(graphs: &[SceneGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::validation("dataset", "no frames"))?;
        let (width, height) = (first.intrinsics.width, first.intrinsics.height);
        let mut object = Vec::new();
        for (f, g) in graphs.iter().enumerate() {
            let rects: Vec<_> = g
                .objects
                .iter()
                .filter_map(|o| projected_box(&g.intrinsics, &g.camera_pose, &o.pose, &o.dims))
                .collect();
            for j in 0..height {
                for i in 0..width {
                    if rects.iter().any(|r| r.contains(i, j)) {
                        object.push((f * height + j) * width + i);
                    }
                }
            }
        }
        Ok(Self {
            width,
            height,
            n_frames: graphs.len(),
            object,
        })
    }

    pub fn total(&self) -> usize {
        self.n_frames * self.width * self.height
    }

    pub fn object_count(&self) -> usize {
        self.object.len()
    }

    pub fn pixel(&self, flat: usize) -> PixelRef {
        let per = self.width * self.height;
        let r = flat % per;
        PixelRef {
            frame: flat / per,
            i: r % self.width,
            j: r / self.width,
        }
    }

    pub fn is_object(&self, p: &PixelRef) -> bool {
        let flat = (p.frame * self.height + p.j) * self.width + p.i;
        self.object.binary_search(&flat).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub pixels: Vec<PixelRef>,
    /// Rays drawn from the object pool.
    pub n_object: usize,
    /// Set when objects were requested but no frame has any.
    pub fallback: bool,
}

/// Draws `batch_size` distinct pixels, at least `ceil(f_obj * batch_size)`
/// of them inside projected object boxes (or the whole object pool if it is
/// smaller), the rest uniformly over all pixels of all frames.
pub fn sample_ray_batch(
    pools: &PixelPools,
    batch_size: usize,
    f_obj: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RayBatch> {
    if batch_size == 0 || batch_size > pools.total() {
        return Err(Error::Config(format!(
            "batch size {batch_size} outside 1..={}",
            pools.total()
        )));
    }
    if !(0.0..=1.0).contains(&f_obj) {
        return Err(Error::Config("f_obj must lie in [0, 1]".into()));
    }
    let want = (f_obj * batch_size as f64).ceil() as usize;
    let fallback = want > 0 && pools.object.is_empty();
    let n_object = want.min(pools.object.len());
    let mut chosen = BTreeSet::new();
    let mut flat = Vec::with_capacity(batch_size);
    for k in index::sample(rng, pools.object.len(), n_object).into_iter() {
        let p = pools.object[k];
        chosen.insert(p);
        flat.push(p);
    }
    while flat.len() < batch_size {
        let p = rng.gen_range(0..pools.total());
        if chosen.insert(p) {
            flat.push(p);
        }
    }
    Ok(RayBatch {
        pixels: flat.into_iter().map(|p| pools.pixel(p)).collect(),
        n_object,
        fallback,
    })
}
