//! Rendering of scene graphs: batched field evaluation over the ordered
//! sample sets of many rays, compositing, and the matching reverse pass used
//! for training.

mod composite;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

pub use composite::{
    composite, composite_backward, composite_traced, deltas, CompositeGrads, CompositeTrace,
    ShadedSample,
};

use crate::error::{Error, Result};
use crate::field::{FieldBatch, FieldEval, InputGradRequest, ModelGrads, SceneModel};
use crate::image::ImageBuffer;
use crate::sampling::{assemble_samples, generate_ray, PlaneStack, Ray, SampleSet, SampleSource};
use crate::scene_graph::{ClassId, SceneGraph, TrackId};

/// Rays per work item when rendering images.
const IMAGE_CHUNK: usize = 512;

/// Which nodes contribute to a render.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum NodeFilter {
    #[default]
    All,
    BackgroundOnly,
    ObjectsOnly,
    /// Only the listed objects, without the background.
    Tracks(BTreeSet<TrackId>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub filter: NodeFilter,
    pub bg_color: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            filter: NodeFilter::All,
            bg_color: [0.0; 3],
        }
    }
}

/// Object samples of one class, one row each.
#[derive(Debug, Clone, Copy)]
pub struct ObjectRows<'a> {
    pub class: ClassId,
    pub latent_refs: &'a [TrackId],
    /// Object-frame positions.
    pub x_o: ArrayView2<'a, f64>,
    /// Object-frame unit directions.
    pub d_o: ArrayView2<'a, f64>,
    /// World locations of the objects.
    pub p_o: ArrayView2<'a, f64>,
}

/// Anything that assigns density and color to background and object samples.
pub trait FieldSource: Sync {
    fn shade_background(
        &self,
        x: ArrayView2<f64>,
        d: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)>;

    fn shade_objects(&self, rows: &ObjectRows) -> Result<(Array1<f64>, Array2<f64>)>;
}

impl SceneModel {
    fn latent_groups(&self, refs: &[TrackId]) -> Result<Vec<usize>> {
        refs.iter().map(|&t| self.latents.row_of(t)).collect()
    }

    fn eval_objects(&self, rows: &ObjectRows, record: bool) -> Result<FieldEval> {
        let model = self.class_model(rows.class)?;
        let groups = self.latent_groups(rows.latent_refs)?;
        model.forward(
            &FieldBatch {
                x: rows.x_o.reborrow(),
                d: rows.d_o.reborrow(),
                p: Some(rows.p_o.reborrow()),
                latents: Some((self.latents.codes(), &groups)),
            },
            record,
        )
    }
}

impl FieldSource for SceneModel {
    fn shade_background(
        &self,
        x: ArrayView2<f64>,
        d: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let e = self.background.forward(
            &FieldBatch {
                x: x.reborrow(),
                d: d.reborrow(),
                p: None,
                latents: None,
            },
            false,
        )?;
        Ok((e.sigma, e.rgb))
    }

    fn shade_objects(&self, rows: &ObjectRows) -> Result<(Array1<f64>, Array2<f64>)> {
        let e = self.eval_objects(rows, false)?;
        Ok((e.sigma, e.rgb))
    }
}

/// A graph prepared for ray sampling.
#[derive(Debug, Clone)]
pub struct GraphView<'a> {
    pub graph: &'a SceneGraph,
    pub planes: PlaneStack,
    pub background: bool,
    pub object_samples: usize,
}

impl<'a> GraphView<'a> {
    pub fn new(graph: &'a SceneGraph, object_samples: usize) -> Self {
        Self {
            graph,
            planes: PlaneStack::new(&graph.background),
            background: true,
            object_samples,
        }
    }

    /// Camera ray through a pixel, bounded by the plane stack.
    pub fn ray(&self, pixel: (usize, usize), jitter: Option<(f64, f64)>) -> Result<Ray> {
        let r = generate_ray(&self.graph.intrinsics, &self.graph.camera_pose, pixel, jitter)?;
        Ok(self.planes.bound(r))
    }
}

/// Applies a node filter, returning the reduced graph and whether the
/// background takes part.
pub fn filter_graph(graph: &SceneGraph, filter: &NodeFilter) -> (SceneGraph, bool) {
    let mut g = graph.clone();
    let background = match filter {
        NodeFilter::All => true,
        NodeFilter::BackgroundOnly => {
            g.objects.clear();
            true
        }
        NodeFilter::ObjectsOnly => false,
        NodeFilter::Tracks(ids) => {
            g.objects.retain(|o| ids.contains(&o.track_id));
            false
        }
    };
    (g, background)
}

/// Sample placement for a batch of rays, grouped by the network that shades
/// each sample.
struct Layout {
    sets: Vec<SampleSet>,
    bg: Vec<(usize, usize)>,
    objects: BTreeMap<ClassId, Vec<(usize, usize)>>,
}

struct ObjectInputs {
    refs: Vec<TrackId>,
    x_o: Array2<f64>,
    d_o: Array2<f64>,
    p_o: Array2<f64>,
}

impl Layout {
    fn new(views: &[GraphView], rays: &[(usize, Ray)]) -> Result<Self> {
        let mut sets = Vec::with_capacity(rays.len());
        let mut bg = Vec::new();
        let mut objects: BTreeMap<ClassId, Vec<(usize, usize)>> = BTreeMap::new();
        for (r, (v, ray)) in rays.iter().enumerate() {
            let view = &views[*v];
            let mut set = assemble_samples(ray, view.graph, &view.planes, view.object_samples)?;
            if !view.background {
                set.samples
                    .retain(|s| !matches!(s.source, SampleSource::Background { .. }));
            }
            for (i, s) in set.samples.iter().enumerate() {
                match s.source {
                    SampleSource::Background { .. } => bg.push((r, i)),
                    SampleSource::Object { node, .. } => {
                        let class = view.graph.objects[node].class_id;
                        objects.entry(class).or_default().push((r, i));
                    }
                }
            }
            sets.push(set);
        }
        Ok(Self { sets, bg, objects })
    }

    fn background_inputs(&self) -> (Array2<f64>, Array2<f64>) {
        let n = self.bg.len();
        let mut x = Array2::zeros((n, 3));
        let mut d = Array2::zeros((n, 3));
        for (k, &(r, i)) in self.bg.iter().enumerate() {
            let set = &self.sets[r];
            let s = &set.samples[i];
            for c in 0..3 {
                x[[k, c]] = s.x[c];
                d[[k, c]] = set.ray.direction[c];
            }
        }
        (x, d)
    }

    fn object_inputs(&self, views: &[GraphView], rays: &[(usize, Ray)], rows: &[(usize, usize)]) -> ObjectInputs {
        let n = rows.len();
        let mut out = ObjectInputs {
            refs: Vec::with_capacity(n),
            x_o: Array2::zeros((n, 3)),
            d_o: Array2::zeros((n, 3)),
            p_o: Array2::zeros((n, 3)),
        };
        for (k, &(r, i)) in rows.iter().enumerate() {
            let set = &self.sets[r];
            let s = &set.samples[i];
            let SampleSource::Object { node, .. } = s.source else {
                unreachable!("object row")
            };
            let obj = &views[rays[r].0].graph.objects[node];
            let hit = set.hits.iter().find(|h| h.node == node).expect("hit for sample");
            let d_o = hit.dir_o.normalize();
            let x_o = s.x_o.expect("object sample");
            let p_o = obj.position();
            for c in 0..3 {
                out.x_o[[k, c]] = x_o[c];
                out.d_o[[k, c]] = d_o[c];
                out.p_o[[k, c]] = p_o[c];
            }
            out.refs.push(obj.latent_ref);
        }
        out
    }

    fn empty_shaded(&self) -> Vec<Vec<ShadedSample>> {
        self.sets
            .iter()
            .map(|s| {
                s.samples
                    .iter()
                    .map(|p| ShadedSample {
                        t: p.t,
                        sigma: 0.0,
                        rgb: [0.0; 3],
                    })
                    .collect()
            })
            .collect()
    }
}

fn scatter(shaded: &mut [Vec<ShadedSample>], rows: &[(usize, usize)], sigma: &Array1<f64>, rgb: &Array2<f64>) {
    for (k, &(r, i)) in rows.iter().enumerate() {
        let s = &mut shaded[r][i];
        s.sigma = sigma[k];
        s.rgb = [rgb[[k, 0]], rgb[[k, 1]], rgb[[k, 2]]];
    }
}

fn check_graph_refs(views: &[GraphView], model_classes: Option<&SceneModel>) -> Result<()> {
    if let Some(m) = model_classes {
        for v in views {
            v.graph.check_latents(&m.latents)?;
            for o in &v.graph.objects {
                m.class_model(o.class_id)?;
            }
        }
    }
    Ok(())
}

/// Colors of `rays`, each paired with the index of the view it belongs to.
pub fn render_rays<F: FieldSource>(
    field: &F,
    views: &[GraphView],
    rays: &[(usize, Ray)],
    bg_color: [f64; 3],
) -> Result<Vec<[f64; 3]>> {
    let layout = Layout::new(views, rays)?;
    let mut shaded = layout.empty_shaded();
    if !layout.bg.is_empty() {
        let (x, d) = layout.background_inputs();
        let (sigma, rgb) = field.shade_background(x.view(), d.view())?;
        scatter(&mut shaded, &layout.bg, &sigma, &rgb);
    }
    for (class, rows) in &layout.objects {
        let inp = layout.object_inputs(views, rays, rows);
        let (sigma, rgb) = field.shade_objects(&ObjectRows {
            class: *class,
            latent_refs: &inp.refs,
            x_o: inp.x_o.view(),
            d_o: inp.d_o.view(),
            p_o: inp.p_o.view(),
        })?;
        scatter(&mut shaded, rows, &sigma, &rgb);
    }
    shaded
        .iter()
        .zip(&layout.sets)
        .map(|(s, set)| composite(s, set.ray.t_far, bg_color))
        .collect()
}

/// Renders `rays` with a trained model and accumulates the gradient of a
/// per-ray loss into `grads`. `upstream(r, color)` returns `dLoss/dColor`
/// for ray `r`.
pub fn render_rays_backward(
    model: &SceneModel,
    views: &[GraphView],
    rays: &[(usize, Ray)],
    bg_color: [f64; 3],
    mut upstream: impl FnMut(usize, &[f64; 3]) -> [f64; 3],
    grads: &mut ModelGrads,
) -> Result<Vec<[f64; 3]>> {
    check_graph_refs(views, Some(model))?;
    let layout = Layout::new(views, rays)?;
    let mut shaded = layout.empty_shaded();

    let bg_inputs = (!layout.bg.is_empty()).then(|| layout.background_inputs());
    let bg_eval = match &bg_inputs {
        Some((x, d)) => {
            let e = model.background.forward(
                &FieldBatch {
                    x: x.view(),
                    d: d.view(),
                    p: None,
                    latents: None,
                },
                true,
            )?;
            scatter(&mut shaded, &layout.bg, &e.sigma, &e.rgb);
            Some(e)
        }
        None => None,
    };
    let mut obj_evals = Vec::new();
    for (class, rows) in &layout.objects {
        let inp = layout.object_inputs(views, rays, rows);
        let e = model.eval_objects(
            &ObjectRows {
                class: *class,
                latent_refs: &inp.refs,
                x_o: inp.x_o.view(),
                d_o: inp.d_o.view(),
                p_o: inp.p_o.view(),
            },
            true,
        )?;
        scatter(&mut shaded, rows, &e.sigma, &e.rgb);
        obj_evals.push((*class, rows, inp, e));
    }

    // Composite, then push dLoss/dColor back to per-sample sigma and rgb.
    let mut colors = Vec::with_capacity(rays.len());
    let mut sample_grads = Vec::with_capacity(rays.len());
    for (r, (s, set)) in shaded.iter().zip(&layout.sets).enumerate() {
        let (c, trace) = composite_traced(s, set.ray.t_far, bg_color)?;
        let up = upstream(r, &c);
        sample_grads.push(composite_backward(s, &trace, bg_color, up));
        colors.push(c);
    }
    let gather = |rows: &[(usize, usize)]| {
        let mut ds = Array1::zeros(rows.len());
        let mut dc = Array2::zeros((rows.len(), 3));
        for (k, &(r, i)) in rows.iter().enumerate() {
            ds[k] = sample_grads[r].sigma[i];
            for c in 0..3 {
                dc[[k, c]] = sample_grads[r].rgb[i][c];
            }
        }
        (ds, dc)
    };

    if let (Some((x, d)), Some(e)) = (&bg_inputs, &bg_eval) {
        let (ds, dc) = gather(&layout.bg);
        model.background.backward(
            &FieldBatch {
                x: x.view(),
                d: d.view(),
                p: None,
                latents: None,
            },
            e.trace.as_ref().expect("recorded"),
            ds.view(),
            dc.view(),
            &mut grads.background,
            InputGradRequest::NONE,
        )?;
    }
    let ld = model.latents.dim();
    for (class, rows, inp, e) in &obj_evals {
        let (ds, dc) = gather(rows);
        let groups = model.latent_groups(&inp.refs)?;
        let field = model.class_model(*class)?;
        let g = grads
            .classes
            .get_mut(class)
            .ok_or(Error::MissingClassModel(class.0))?;
        let ig = field.backward(
            &FieldBatch {
                x: inp.x_o.view(),
                d: inp.d_o.view(),
                p: Some(inp.p_o.view()),
                latents: Some((model.latents.codes(), &groups)),
            },
            e.trace.as_ref().expect("recorded"),
            ds.view(),
            dc.view(),
            g,
            InputGradRequest {
                latents: true,
                ..InputGradRequest::NONE
            },
        )?;
        if let Some(lg) = ig.latents {
            for (row, src) in lg.outer_iter().enumerate() {
                for (dst, v) in grads.latents[row * ld..(row + 1) * ld].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
    }
    Ok(colors)
}

/// Color of one ray through `graph`.
pub fn render_pixel<F: FieldSource>(
    ray: &Ray,
    graph: &SceneGraph,
    field: &F,
    object_samples: usize,
    options: &RenderOptions,
) -> Result<[f64; 3]> {
    let (g, background) = filter_graph(graph, &options.filter);
    let view = GraphView {
        background,
        ..GraphView::new(&g, object_samples)
    };
    Ok(render_rays(field, &[view], &[(0, *ray)], options.bg_color)?[0])
}

/// Renders every pixel of the graph's camera. Output is independent of the
/// number of worker threads.
pub fn render_image<F: FieldSource>(
    graph: &SceneGraph,
    field: &F,
    object_samples: usize,
    options: &RenderOptions,
) -> Result<ImageBuffer> {
    let (g, background) = filter_graph(graph, &options.filter);
    let view = GraphView {
        background,
        ..GraphView::new(&g, object_samples)
    };
    let k = &g.intrinsics;
    let pixels: Vec<(usize, usize)> = (0..k.height)
        .flat_map(|j| (0..k.width).map(move |i| (i, j)))
        .collect();
    let views = std::slice::from_ref(&view);
    let chunks: Vec<Vec<[f64; 3]>> = pixels
        .par_chunks(IMAGE_CHUNK)
        .map(|chunk| {
            let rays = chunk
                .iter()
                .map(|&p| Ok((0, view.ray(p, None)?)))
                .collect::<Result<Vec<_>>>()?;
            render_rays(field, views, &rays, options.bg_color)
        })
        .collect::<Result<_>>()?;
    ImageBuffer::from_pixels(k.width, k.height, chunks.concat())
}

/// Renders with a trained model after checking that every class and latent
/// the graph refers to exists.
pub fn render_model_image(
    graph: &SceneGraph,
    model: &SceneModel,
    filter: NodeFilter,
) -> Result<ImageBuffer> {
    let view = GraphView::new(graph, model.meta.object_samples);
    check_graph_refs(std::slice::from_ref(&view), Some(model))?;
    render_image(
        graph,
        model,
        model.meta.object_samples,
        &RenderOptions {
            filter,
            bg_color: model.meta.bg_color,
        },
    )
}
