//! Command-line front end.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::SceneDataset;
use crate::detect::{detect, AnchorGrid, DetectConfig};
use crate::error::{Error, Result};
use crate::field::SceneModel;
use crate::graph_file::GraphFile;
use crate::image::ImageBuffer;
use crate::metrics::{psnr, ssim};
use crate::render::{render_model_image, NodeFilter};
use crate::scene_graph::{graph_for_frame, GraphEdit, RigidTransform, SceneGraph, TrackId, Vec3};
use crate::synth::{generate_synthetic, SynthSpec};
use crate::train::{log_path_for, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "nsg", version, about = "Neural scene graphs for dynamic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterArg {
    All,
    Background,
    Objects,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct EditOp {
    /// Rotate the object about its vertical axis (degrees).
    #[arg(long, allow_negative_numbers = true)]
    yaw: Option<f64>,
    /// Move the object by a world-space offset.
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], allow_negative_numbers = true)]
    translate: Option<Vec<f64>>,
    /// Drop the object from the graph.
    #[arg(long)]
    remove: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a scene model.
    Train {
        scene: PathBuf,
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Render one frame of a dataset.
    Render {
        checkpoint: PathBuf,
        scene: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long, value_enum, default_value = "all")]
        filter: FilterArg,
        /// Shift the camera by a world-space offset.
        #[arg(long, num_args = 3, value_names = ["DX", "DY", "DZ"], allow_negative_numbers = true)]
        camera_offset: Option<Vec<f64>>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Render a frame after editing one object node.
    Edit {
        checkpoint: PathBuf,
        scene: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        track: u32,
        #[command(flatten)]
        op: EditOp,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Render a graph described in a graph file.
    Compose {
        checkpoint: PathBuf,
        graph: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Detect objects in a frame by inverse rendering.
    Detect {
        checkpoint: PathBuf,
        scene: PathBuf,
        #[arg(long)]
        frame: usize,
        /// Detection settings (TOML); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// PSNR and SSIM of every frame against its image.
    Eval {
        checkpoint: PathBuf,
        scene: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

impl Error {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Checkpoint(_) | Error::Diverged(_) | Error::NonFinite(_) => {
                EXIT_RUNTIME
            }
            _ => EXIT_VALIDATION,
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn frame_graph(model: &SceneModel, ds: &SceneDataset, frame: usize) -> Result<SceneGraph> {
    graph_for_frame(ds, frame, &model.meta.background)
}

/// Per-frame metrics lines and their means.
pub fn eval_report(model: &SceneModel, ds: &SceneDataset) -> Result<(String, f64, f64)> {
    let mut out = String::from("frame,psnr,ssim\n");
    let (mut sp, mut ss) = (0.0, 0.0);
    for k in 0..ds.frames.len() {
        let img = render_model_image(&frame_graph(model, ds, k)?, model, NodeFilter::All)?;
        let truth = ds.load_image(k)?;
        let (p, s) = (psnr(&img, &truth)?, ssim(&img, &truth)?);
        writeln!(out, "{k},{p:.4},{s:.4}").expect("string write");
        sp += p;
        ss += s;
    }
    let n = ds.frames.len() as f64;
    let (mp, ms) = (sp / n, ss / n);
    writeln!(out, "mean,{mp:.4},{ms:.4}").expect("string write");
    Ok((out, mp, ms))
}

fn edit_graph(graph: &SceneGraph, model: &SceneModel, track: TrackId, op: &EditOp) -> Result<SceneGraph> {
    let node = graph.object(track).ok_or(Error::UnknownTrack(track))?;
    let edit = if op.remove {
        GraphEdit::RemoveNode(track)
    } else if let Some(deg) = op.yaw {
        let r = RigidTransform::from_yaw(deg.to_radians(), Vec3::zeros());
        let pose = RigidTransform::new(r.rotation() * node.pose.rotation(), *node.pose.translation())?;
        GraphEdit::SetPose(track, pose)
    } else if let Some(v) = &op.translate {
        let t = node.pose.translation() + Vec3::new(v[0], v[1], v[2]);
        GraphEdit::SetPose(track, node.pose.with_translation(t))
    } else {
        return Err(Error::Config("no edit given".into()));
    };
    graph.edit(&edit, &model.latents)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            scene,
            config,
            output,
        } => {
            let ds = SceneDataset::load(&scene)?;
            let config = TrainConfig::load(&config)?;
            let mut trainer = Trainer::new(&ds, config)?;
            let log_path = log_path_for(&output);
            let mut log = String::from("iter,loss,psnr,lr\n");
            let result = trainer.run(Some(&output), |e| {
                log::info!("{}", e.line());
                log.push_str(&e.line());
                log.push('\n');
            });
            write_text(&log_path, &log)?;
            result.map(|_| ())
        }
        Command::Render {
            checkpoint,
            scene,
            frame,
            filter,
            camera_offset,
            output,
        } => {
            let model = SceneModel::load(&checkpoint)?;
            let ds = SceneDataset::load(&scene)?;
            let mut graph = frame_graph(&model, &ds, frame)?;
            if let Some(o) = camera_offset {
                let t = graph.camera_pose.translation() + Vec3::new(o[0], o[1], o[2]);
                graph = graph.edit(&GraphEdit::SetCameraPose(graph.camera_pose.with_translation(t)), &model.latents)?;
            }
            let filter = match filter {
                FilterArg::All => NodeFilter::All,
                FilterArg::Background => NodeFilter::BackgroundOnly,
                FilterArg::Objects => NodeFilter::ObjectsOnly,
            };
            render_model_image(&graph, &model, filter)?.save_ppm(&output)
        }
        Command::Edit {
            checkpoint,
            scene,
            frame,
            track,
            op,
            output,
        } => {
            let model = SceneModel::load(&checkpoint)?;
            let ds = SceneDataset::load(&scene)?;
            let graph = edit_graph(&frame_graph(&model, &ds, frame)?, &model, TrackId(track), &op)?;
            render_model_image(&graph, &model, NodeFilter::All)?.save_ppm(&output)
        }
        Command::Compose {
            checkpoint,
            graph,
            output,
        } => {
            let model = SceneModel::load(&checkpoint)?;
            let g = GraphFile::load(&graph)?.to_graph(model.meta.background)?;
            let refs: BTreeSet<TrackId> = g.objects.iter().map(|o| o.latent_ref).collect();
            if let Some(missing) = refs.into_iter().find(|r| !model.latents.contains(*r)) {
                return Err(Error::MissingLatent(missing));
            }
            render_model_image(&g, &model, NodeFilter::All)?.save_ppm(&output)
        }
        Command::Detect {
            checkpoint,
            scene,
            frame,
            config,
            output,
        } => {
            let model = SceneModel::load(&checkpoint)?;
            let ds = SceneDataset::load(&scene)?;
            let config = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    let c: DetectConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
                    c.validate()?;
                    c
                }
                None => DetectConfig::default(),
            };
            let mut graph = frame_graph(&model, &ds, frame)?;
            graph.objects.clear();
            let grid = AnchorGrid::from_dataset(&ds, 2.0, 1.0)?;
            let observed: ImageBuffer = ds.load_image(frame)?;
            let out = detect(&observed, &model, &graph, &grid, &config)?;
            log::info!("threshold {:.6}", out.threshold);
            let text: String = out.detections.iter().map(|d| d.line() + "\n").collect();
            write_text(&output, &text)
        }
        Command::Eval {
            checkpoint,
            scene,
            output,
        } => {
            let model = SceneModel::load(&checkpoint)?;
            let ds = SceneDataset::load(&scene)?;
            let (text, _, _) = eval_report(&model, &ds)?;
            write_text(&output, &text)
        }
        Command::Synth { spec, output } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let spec: SynthSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            generate_synthetic(&spec, &output).map(|_| ())
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
