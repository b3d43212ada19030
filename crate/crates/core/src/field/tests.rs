use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numdiff::{central_gradient, max_relative_error};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn small_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        position_freqs: 2,
        direction_freqs: 1,
        pose_freqs: 1,
        stage1_depth: 2,
        stage1_width: 8,
        skips: vec![1],
        stage2_depth: 1,
        stage2_width: 8,
        latent_init_std: 0.3,
    }
}

fn norm() -> InputNorm {
    InputNorm {
        offset: [0.5, -0.2, 1.0],
        scale: 0.25,
    }
}

struct Case {
    model: RadianceField,
    x: Array2<f64>,
    d: Array2<f64>,
    p: Option<Array2<f64>>,
    table: Option<Array2<f64>>,
    groups: Vec<usize>,
    wsig: Array1<f64>,
    wrgb: Array2<f64>,
}

fn unit_rows(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut d = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
    for mut r in d.outer_iter_mut() {
        let len: f64 = r.dot(&r);
        let len = len.sqrt();
        r /= len;
    }
    d
}

fn case(object: bool, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_config();
    let arch = if object {
        cfg.object_arch(norm())
    } else {
        cfg.background_arch(norm())
    };
    let mut model = RadianceField::new(arch, &mut rng).unwrap();
    // Non-zero biases so that every bias gradient is exercised.
    let n_params = model.n_params();
    for v in model.params_mut().iter_mut().take(n_params) {
        *v += rng.gen_range(-0.05..0.05);
    }
    let n = 6;
    let x = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
    let d = unit_rows(n, &mut rng);
    let (p, table, groups) = if object {
        let p = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-3.0..3.0));
        let t = Array2::from_shape_fn((2, cfg.latent_dim), |_| rng.gen_range(-0.5..0.5));
        (Some(p), Some(t), vec![0, 1, 0, 1, 1, 0])
    } else {
        (None, None, vec![])
    };
    Case {
        model,
        x,
        d,
        p,
        table,
        groups,
        wsig: Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0)),
        wrgb: Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0)),
    }
}

impl Case {
    fn objective_with(
        &self,
        model: &RadianceField,
        x: &Array2<f64>,
        d: &Array2<f64>,
        p: Option<&Array2<f64>>,
        table: Option<&Array2<f64>>,
    ) -> f64 {
        let batch = FieldBatch {
            x: x.view(),
            d: d.view(),
            p: p.map(|a| a.view()),
            latents: table.map(|t| (t.view(), self.groups.as_slice())),
        };
        let e = model.forward(&batch, false).unwrap();
        (&e.sigma * &self.wsig).sum() + (&e.rgb * &self.wrgb).sum()
    }

    fn analytic(&self) -> (Vec<f64>, InputGrads) {
        let batch = FieldBatch {
            x: self.x.view(),
            d: self.d.view(),
            p: self.p.as_ref().map(|a| a.view()),
            latents: self.table.as_ref().map(|t| (t.view(), self.groups.as_slice())),
        };
        let e = self.model.forward(&batch, true).unwrap();
        let mut g = vec![0.0; self.model.n_params()];
        let ig = self
            .model
            .backward(
                &batch,
                e.trace.as_ref().unwrap(),
                self.wsig.view(),
                self.wrgb.view(),
                &mut g,
                InputGradRequest::ALL,
            )
            .unwrap();
        (g, ig)
    }
}

fn matrix_fd(base: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Vec<f64> {
    let shape = base.raw_dim();
    central_gradient(
        |v| f(&Array2::from_shape_vec(shape, v.to_vec()).unwrap()),
        base.as_slice().unwrap(),
        H,
    )
}

fn check_all_gradients(object: bool) {
    let c = case(object, if object { 11 } else { 7 });
    let (g, ig) = c.analytic();

    let fd = central_gradient(
        |v| {
            let m = RadianceField::from_params(c.model.arch().clone(), v.to_vec()).unwrap();
            c.objective_with(&m, &c.x, &c.d, c.p.as_ref(), c.table.as_ref())
        },
        c.model.params(),
        H,
    );
    let err = max_relative_error(&g, &fd, FLOOR);
    assert!(err < TOL, "parameter gradient error {err}");

    let fx = matrix_fd(&c.x, |x| {
        c.objective_with(&c.model, x, &c.d, c.p.as_ref(), c.table.as_ref())
    });
    let err = max_relative_error(ig.x.unwrap().as_slice().unwrap(), &fx, FLOOR);
    assert!(err < TOL, "position gradient error {err}");

    let fdd = matrix_fd(&c.d, |d| {
        c.objective_with(&c.model, &c.x, d, c.p.as_ref(), c.table.as_ref())
    });
    let err = max_relative_error(ig.d.unwrap().as_slice().unwrap(), &fdd, FLOOR);
    assert!(err < TOL, "direction gradient error {err}");

    if object {
        let p = c.p.as_ref().unwrap();
        let fp = matrix_fd(p, |p| c.objective_with(&c.model, &c.x, &c.d, Some(p), c.table.as_ref()));
        let err = max_relative_error(ig.p.unwrap().as_slice().unwrap(), &fp, FLOOR);
        assert!(err < TOL, "location gradient error {err}");

        let t = c.table.as_ref().unwrap();
        let fl = matrix_fd(t, |t| c.objective_with(&c.model, &c.x, &c.d, c.p.as_ref(), Some(t)));
        let err = max_relative_error(ig.latents.unwrap().as_slice().unwrap(), &fl, FLOOR);
        assert!(err < TOL, "latent gradient error {err}");
    } else {
        assert!(ig.p.is_none() && ig.latents.is_none());
    }
}

#[test]
fn background_gradients_match_finite_differences() {
    check_all_gradients(false);
}

#[test]
fn object_gradients_match_finite_differences() {
    check_all_gradients(true);
}

#[test]
fn latent_gradient_of_color_norm() {
    let c = case(true, 5);
    let t = c.table.as_ref().unwrap();
    let color_norm = |t: &Array2<f64>| {
        let batch = FieldBatch {
            x: c.x.view(),
            d: c.d.view(),
            p: c.p.as_ref().map(|a| a.view()),
            latents: Some((t.view(), c.groups.as_slice())),
        };
        let e = c.model.forward(&batch, false).unwrap();
        e.rgb.mapv(|v| v * v).sum()
    };
    let batch = FieldBatch {
        x: c.x.view(),
        d: c.d.view(),
        p: c.p.as_ref().map(|a| a.view()),
        latents: Some((t.view(), c.groups.as_slice())),
    };
    let e = c.model.forward(&batch, true).unwrap();
    let drgb = e.rgb.mapv(|v| 2.0 * v);
    let dsig = Array1::zeros(c.x.nrows());
    let mut g = vec![0.0; c.model.n_params()];
    let want = InputGradRequest {
        latents: true,
        ..InputGradRequest::NONE
    };
    let ig = c
        .model
        .backward(&batch, e.trace.as_ref().unwrap(), dsig.view(), drgb.view(), &mut g, want)
        .unwrap();
    let fd = matrix_fd(t, color_norm);
    let err = max_relative_error(ig.latents.unwrap().as_slice().unwrap(), &fd, FLOOR);
    assert!(err < TOL, "{err}");
}

#[test]
fn density_ignores_direction_and_location() {
    for object in [false, true] {
        for seed in 0..20 {
            let c = case(object, 100 + seed);
            let batch = FieldBatch {
                x: c.x.view(),
                d: c.d.view(),
                p: c.p.as_ref().map(|a| a.view()),
                latents: c.table.as_ref().map(|t| (t.view(), c.groups.as_slice())),
            };
            let e = c.model.forward(&batch, true).unwrap();
            let ones = Array1::ones(c.x.nrows());
            let zeros = Array2::zeros((c.x.nrows(), 3));
            let mut g = vec![0.0; c.model.n_params()];
            let ig = c
                .model
                .backward(&batch, e.trace.as_ref().unwrap(), ones.view(), zeros.view(), &mut g, InputGradRequest::ALL)
                .unwrap();
            assert!(ig.d.unwrap().iter().all(|&v| v == 0.0));
            if object {
                assert!(ig.p.unwrap().iter().all(|&v| v == 0.0));
            }

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d2 = unit_rows(c.x.nrows(), &mut rng);
            let p2 = c.p.as_ref().map(|p| p.mapv(|v| v + 1.7));
            let batch2 = FieldBatch {
                d: d2.view(),
                p: p2.as_ref().map(|a| a.view()),
                ..batch
            };
            let e2 = c.model.forward(&batch2, false).unwrap();
            assert_eq!(e.sigma, e2.sigma);
            assert_ne!(e.rgb, e2.rgb);
        }
    }
}

#[test]
fn unused_parameters_get_zero_gradient() {
    // With only a density seed, the colour branch receives no gradient.
    let c = case(true, 3);
    let batch = FieldBatch {
        x: c.x.view(),
        d: c.d.view(),
        p: c.p.as_ref().map(|a| a.view()),
        latents: c.table.as_ref().map(|t| (t.view(), c.groups.as_slice())),
    };
    let e = c.model.forward(&batch, true).unwrap();
    let ones = Array1::ones(c.x.nrows());
    let zeros = Array2::zeros((c.x.nrows(), 3));
    let mut g = vec![0.0; c.model.n_params()];
    c.model
        .backward(&batch, e.trace.as_ref().unwrap(), ones.view(), zeros.view(), &mut g, InputGradRequest::NONE)
        .unwrap();
    let arch = c.model.arch();
    let s2_in = arch.feature_dim
        + arch.direction_encoding.out_dim(3)
        + arch.pose_encoding.unwrap().out_dim(3);
    let tail = s2_in * arch.stage2_width + arch.stage2_width + arch.stage2_width * 3 + 3;
    let n = g.len();
    assert!(g[n - tail..].iter().all(|&v| v == 0.0));
    assert!(g[..n - tail].iter().any(|&v| v != 0.0));
}

#[test]
fn negative_density_bias_gives_empty_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = RadianceField::new(small_config().background_arch(norm()), &mut rng).unwrap();
    m.reset_density_head(-10.0);
    for _ in 0..50 {
        let x = Vec3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-5.0..5.0), rng.gen_range(-30.0..0.0));
        let out = background_forward(&m, &x, &Vec3::new(0.0, 0.0, -1.0)).unwrap();
        assert!(out.density < 1e-4 && out.density >= 0.0);
        assert!(out.color.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}

#[test]
fn latent_distinguishes_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = RadianceField::new(small_config().object_arch(norm()), &mut rng).unwrap();
    let x = Vec3::new(0.2, -0.1, 0.4);
    let d = Vec3::new(0.0, 0.0, -1.0);
    let p = Vec3::new(1.0, 0.0, -10.0);
    let a = object_forward(&m, &[0.5, -0.5, 0.2, 0.1], &x, &d, &p).unwrap();
    let b = object_forward(&m, &[-0.4, 0.3, 0.0, 0.6], &x, &d, &p).unwrap();
    assert_ne!(a.density, b.density);
    assert_ne!(a.color, b.color);
    assert_eq!(a.feature.len(), small_config().stage1_width);
    assert!(object_forward(&m, &[0.0; 3], &x, &d, &p).is_err());
    assert!(background_forward(&m, &x, &d).is_err());
}

#[test]
fn non_finite_parameters_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = RadianceField::new(small_config().background_arch(norm()), &mut rng).unwrap();
    m.params_mut()[0] = f64::NAN;
    let z = Vec3::zeros();
    assert!(background_forward(&m, &z, &Vec3::new(1.0, 0.0, 0.0)).is_err());
}
