//! The closed-form synthetic renderer against the quadrature compositor, and
//! the dataset file round trip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nsg::dataset::SceneDataset;
use nsg::render::{composite, ShadedSample};
use nsg::sampling::object_quadrature;
use nsg::synth::{generate_synthetic, AnalyticScene, SynthSpec, SCENE_FILE};

const PER_SEGMENT: usize = 128;

/// Quadrature over each constant-medium segment, with a vacuum sample
/// closing every gap between segments.
fn quadrature_pixel(scene: &AnalyticScene, frame: usize, i: usize, j: usize) -> [f64; 3] {
    let (o, d) = scene.pixel_ray(frame, i, j);
    let segments = scene.segments(frame, &o, &d, true);
    let mut samples = Vec::new();
    for (n, s) in segments.iter().enumerate() {
        let ts = object_quadrature(s.t0, s.t1, PER_SEGMENT + 1).unwrap();
        for w in ts.windows(2) {
            let (sigma, rgb) = scene.point(frame, &(o + d * (0.5 * (w[0] + w[1]))), true);
            samples.push(ShadedSample { t: w[0], sigma, rgb });
        }
        if segments.get(n + 1).map_or(true, |next| next.t0 > s.t1) {
            samples.push(ShadedSample {
                t: s.t1,
                sigma: 0.0,
                rgb: [0.0; 3],
            });
        }
    }
    let t_far = samples.last().map_or(1.0, |s| s.t + 1.0);
    composite(&samples, t_far, [0.0; 3]).unwrap()
}

#[test]
fn closed_form_matches_quadrature() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate_synthetic(&SynthSpec::default(), dir.path()).unwrap();
    let scene = &out.scene;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..400 {
        let frame = rng.gen_range(0..scene.n_frames());
        let (i, j) = (rng.gen_range(0..64), rng.gen_range(0..64));
        let exact = scene.render_pixel(frame, i, j, true);
        let quad = quadrature_pixel(scene, frame, i, j);
        for c in 0..3 {
            worst = worst.max((exact[c] - quad[c]).abs());
        }
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_frames: 4,
        resolution: 16,
        ..SynthSpec::default()
    };
    let out = generate_synthetic(&spec, dir.path()).unwrap();
    let loaded = SceneDataset::load(&dir.path().join(SCENE_FILE)).unwrap();
    assert_eq!(loaded.frames.len(), 4);
    let copy = dir.path().join("copy.nsg");
    loaded.save(&copy).unwrap();
    assert_eq!(SceneDataset::load(&copy).unwrap(), loaded);
    for (a, b) in loaded.frames.iter().zip(&out.dataset.frames) {
        assert_eq!(a.tracks.len(), b.tracks.len());
        for (x, y) in a.tracks.iter().zip(&b.tracks) {
            assert!((x.pose.translation() - y.pose.translation()).norm() < 1e-9);
            assert!((x.pose.yaw() - y.pose.yaw()).abs() < 1e-9);
        }
    }
}
