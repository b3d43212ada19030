//! Neural scene graphs for dynamic scenes.
//!
//! A scene is a shallow graph: a world root with one camera, one static
//! background node and one node per tracked rigid object. Every node carries
//! an implicit radiance field. The background is sampled on a fixed stack of
//! planes; objects are sampled inside their boxes and share one network per
//! class, specialized by a per-object latent code. Samples are composited
//! along camera rays, which makes the whole pipeline differentiable with
//! respect to network weights, latent codes and object poses.

pub mod cli;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod field;
pub mod graph_file;
pub mod image;
pub mod metrics;
pub mod numdiff;
pub mod render;
pub mod sampling;
pub mod scene_graph;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
