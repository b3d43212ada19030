//! Two-stage radiance MLP over a flat parameter vector, with batched forward
//! evaluation and layer-wise reverse-mode gradients.
//!
//! Stage one maps `[gamma_x(x), l]` to `[sigma_raw, y]`; stage two maps
//! `[y, gamma_d(d), gamma_p(p)]` to RGB. Concatenated inputs are never
//! materialized: each dense layer splits its weight rows per input block.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::encoding::FourierEncoding;
use crate::error::{Error, Result};

/// Affine normalization `(v - offset) * scale` applied before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub offset: [f64; 3],
    pub scale: f64,
}

impl InputNorm {
    pub const IDENTITY: InputNorm = InputNorm {
        offset: [0.0; 3],
        scale: 1.0,
    };
}

impl Default for InputNorm {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Architecture of one representation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldArch {
    pub position_encoding: FourierEncoding,
    pub direction_encoding: FourierEncoding,
    /// Encoding of the object location; `None` for the background model.
    pub pose_encoding: Option<FourierEncoding>,
    /// Zero for the background model.
    pub latent_dim: usize,
    pub stage1_depth: usize,
    pub stage1_width: usize,
    /// Stage-one layer indices whose input also receives the stage-one input.
    pub skips: Vec<usize>,
    pub feature_dim: usize,
    pub stage2_depth: usize,
    pub stage2_width: usize,
    pub position_norm: InputNorm,
    pub pose_norm: InputNorm,
}

impl FieldArch {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_depth == 0 || self.stage1_width == 0 || self.feature_dim == 0 {
            return Err(Error::Config("stage one needs depth, width and features".into()));
        }
        if self.stage2_depth > 0 && self.stage2_width == 0 {
            return Err(Error::Config("stage two width must be positive".into()));
        }
        if self.skips.iter().any(|&k| k == 0 || k >= self.stage1_depth) {
            return Err(Error::Config("skip indices must lie in 1..stage1_depth".into()));
        }
        if !(self.position_norm.scale > 0.0 && self.pose_norm.scale > 0.0) {
            return Err(Error::Config("input normalization scale must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).len
    }

    pub fn is_object_model(&self) -> bool {
        self.pose_encoding.is_some()
    }

    fn enc_x_dim(&self) -> usize {
        self.position_encoding.out_dim(3)
    }

    fn enc_d_dim(&self) -> usize {
        self.direction_encoding.out_dim(3)
    }

    fn enc_p_dim(&self) -> usize {
        self.pose_encoding.map_or(0, |e| e.out_dim(3))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// Row counts of the input blocks, in order.
    blocks: Vec<usize>,
    out_dim: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn in_dim(&self) -> usize {
        self.blocks.iter().sum()
    }

    fn weight_block<'a>(&self, params: &'a [f64], block: usize) -> ArrayView2<'a, f64> {
        let row0: usize = self.blocks[..block].iter().sum();
        let start = self.w + row0 * self.out_dim;
        let len = self.blocks[block] * self.out_dim;
        ArrayView2::from_shape((self.blocks[block], self.out_dim), &params[start..start + len])
            .expect("layout")
    }

    fn weight_block_mut<'a>(&self, params: &'a mut [f64], block: usize) -> ArrayViewMut2<'a, f64> {
        let row0: usize = self.blocks[..block].iter().sum();
        let start = self.w + row0 * self.out_dim;
        let len = self.blocks[block] * self.out_dim;
        ArrayViewMut2::from_shape((self.blocks[block], self.out_dim), &mut params[start..start + len])
            .expect("layout")
    }

    fn bias<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[self.b..self.b + self.out_dim])
    }

    /// `bias + sum_k input_k * W_k`. Blocks given as `None` are skipped (the
    /// latent block, which is added per group by the caller).
    fn forward(&self, params: &[f64], inputs: &[Option<ArrayView2<f64>>], n: usize) -> Array2<f64> {
        let bias = self.bias(params);
        let mut z = Array2::from_shape_fn((n, self.out_dim), |(_, j)| bias[j]);
        for (k, input) in inputs.iter().enumerate() {
            if let Some(x) = input {
                general_mat_mul(1.0, x, &self.weight_block(params, k), 1.0, &mut z);
            }
        }
        z
    }

    /// Accumulates weight and bias gradients for `dz` and returns the input
    /// gradient for every block flagged in `want`.
    fn backward(
        &self,
        params: &[f64],
        grad: &mut [f64],
        inputs: &[Option<ArrayView2<f64>>],
        dz: &ArrayView2<f64>,
        want: &[bool],
    ) -> Vec<Option<Array2<f64>>> {
        for (k, input) in inputs.iter().enumerate() {
            if let Some(x) = input {
                general_mat_mul(1.0, &x.t(), dz, 1.0, &mut self.weight_block_mut(grad, k));
            }
        }
        let db = dz.sum_axis(Axis(0));
        for (g, v) in grad[self.b..self.b + self.out_dim].iter_mut().zip(db.iter()) {
            *g += v;
        }
        want.iter()
            .enumerate()
            .map(|(k, &w)| w.then(|| dz.dot(&self.weight_block(params, k).t())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stage1: Vec<Dense>,
    head1: Dense,
    stage2: Vec<Dense>,
    head2: Dense,
    len: usize,
}

impl Layout {
    fn new(arch: &FieldArch) -> Self {
        let mut off = 0;
        let mut dense = |blocks: Vec<usize>, out_dim: usize| {
            let in_dim: usize = blocks.iter().sum();
            let d = Dense {
                blocks,
                out_dim,
                w: off,
                b: off + in_dim * out_dim,
            };
            off += in_dim * out_dim + out_dim;
            d
        };
        let s1_blocks = vec![arch.enc_x_dim(), arch.latent_dim];
        let mut stage1 = Vec::with_capacity(arch.stage1_depth);
        for i in 0..arch.stage1_depth {
            let blocks = if i == 0 {
                s1_blocks.clone()
            } else if arch.skips.contains(&i) {
                vec![arch.stage1_width, s1_blocks[0], s1_blocks[1]]
            } else {
                vec![arch.stage1_width]
            };
            stage1.push(dense(blocks, arch.stage1_width));
        }
        let head1 = dense(vec![arch.stage1_width], 1 + arch.feature_dim);
        let s2_blocks = vec![arch.feature_dim, arch.enc_d_dim(), arch.enc_p_dim()];
        let mut stage2 = Vec::with_capacity(arch.stage2_depth);
        for i in 0..arch.stage2_depth {
            let blocks = if i == 0 {
                s2_blocks.clone()
            } else {
                vec![arch.stage2_width]
            };
            stage2.push(dense(blocks, arch.stage2_width));
        }
        let head2 = if arch.stage2_depth == 0 {
            dense(s2_blocks, 3)
        } else {
            dense(vec![arch.stage2_width], 3)
        };
        Self {
            stage1,
            head1,
            stage2,
            head2,
            len: off,
        }
    }

    fn all(&self) -> impl Iterator<Item = &Dense> {
        self.stage1
            .iter()
            .chain(std::iter::once(&self.head1))
            .chain(self.stage2.iter())
            .chain(std::iter::once(&self.head2))
    }
}

/// Inputs for a batch of `n` evaluation points.
#[derive(Debug, Clone, Copy)]
pub struct FieldBatch<'a> {
    /// Positions, `n x 3` (world for the background, object frame otherwise).
    pub x: ArrayView2<'a, f64>,
    /// Unit directions, `n x 3`.
    pub d: ArrayView2<'a, f64>,
    /// Object locations `p_o`, `n x 3`; object models only.
    pub p: Option<ArrayView2<'a, f64>>,
    /// Latent codes `groups x latent_dim` and the group of each row.
    pub latents: Option<(ArrayView2<'a, f64>, &'a [usize])>,
}

impl FieldBatch<'_> {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activations recorded by a forward pass, consumed by [`RadianceField::backward`].
#[derive(Debug, Clone)]
pub struct FieldTrace {
    enc_x: Array2<f64>,
    enc_d: Array2<f64>,
    enc_p: Option<Array2<f64>>,
    latent_rows: Option<Array2<f64>>,
    s1_act: Vec<Array2<f64>>,
    head1: Array2<f64>,
    s2_act: Vec<Array2<f64>>,
    rgb: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct FieldEval {
    /// Densities, non-negative.
    pub sigma: Array1<f64>,
    /// Colors in `[0, 1]`, `n x 3`.
    pub rgb: Array2<f64>,
    pub trace: Option<FieldTrace>,
}

impl FieldEval {
    /// Intermediate feature `y` of each row, when a trace was recorded.
    pub fn features(&self) -> Option<ArrayView2<'_, f64>> {
        self.trace.as_ref().map(|t| t.head1.slice(s![.., 1..]))
    }
}

/// Which input gradients [`RadianceField::backward`] should return.
#[derive(Debug, Clone, Copy, Default)]
pub struct InputGradRequest {
    pub x: bool,
    pub d: bool,
    pub p: bool,
    pub latents: bool,
}

impl InputGradRequest {
    pub const NONE: Self = Self {
        x: false,
        d: false,
        p: false,
        latents: false,
    };
    pub const ALL: Self = Self {
        x: true,
        d: true,
        p: true,
        latents: true,
    };
}

#[derive(Debug, Clone, Default)]
pub struct InputGrads {
    pub x: Option<Array2<f64>>,
    pub d: Option<Array2<f64>>,
    pub p: Option<Array2<f64>>,
    /// Per latent group, `groups x latent_dim`.
    pub latents: Option<Array2<f64>>,
}

/// One representation network: architecture plus flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    arch: FieldArch,
    layout: Layout,
    params: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn encode_rows(enc: &FourierEncoding, v: &ArrayView2<f64>, norm: &InputNorm) -> Array2<f64> {
    let n = v.nrows();
    let dim = enc.out_dim(3);
    let mut out = Array2::zeros((n, dim));
    for (row, mut o) in v.outer_iter().zip(out.outer_iter_mut()) {
        let u = [
            (row[0] - norm.offset[0]) * norm.scale,
            (row[1] - norm.offset[1]) * norm.scale,
            (row[2] - norm.offset[2]) * norm.scale,
        ];
        enc.encode_into(&u, o.as_slice_mut().expect("contiguous"));
    }
    out
}

fn encode_backward(
    enc: &FourierEncoding,
    encoded: &Array2<f64>,
    grad: &Array2<f64>,
    norm: &InputNorm,
) -> Array2<f64> {
    let n = encoded.nrows();
    let mut out = Array2::zeros((n, 3));
    for r in 0..n {
        let mut g = [0.0; 3];
        enc.backward_into(
            encoded.row(r).as_slice().expect("contiguous"),
            grad.row(r).as_slice().expect("contiguous"),
            &mut g,
        );
        for c in 0..3 {
            out[[r, c]] = g[c] * norm.scale;
        }
    }
    out
}

fn check_rows(name: &str, v: &ArrayView2<f64>, n: usize, cols: usize) -> Result<()> {
    if v.nrows() != n || v.ncols() != cols {
        return Err(Error::Shape(format!(
            "{name}: expected {n}x{cols}, got {}x{}",
            v.nrows(),
            v.ncols()
        )));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(name.into()));
    }
    Ok(())
}

impl RadianceField {
    /// Glorot-uniform weights, zero biases.
    pub fn new(arch: FieldArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.len];
        for layer in layout.all() {
            let fan_in = layer.in_dim();
            let limit = (6.0 / (fan_in + layer.out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            for p in &mut params[layer.w..layer.b] {
                *p = dist.sample(rng);
            }
        }
        Ok(Self {
            arch,
            layout,
            params,
        })
    }

    pub fn from_params(arch: FieldArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.len {
            return Err(Error::Shape(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                layout.len
            )));
        }
        Ok(Self {
            arch,
            layout,
            params,
        })
    }

    pub fn arch(&self) -> &FieldArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout.len
    }

    /// Zeroes the density row of the stage-one head and sets its bias.
    pub fn reset_density_head(&mut self, bias: f64) {
        let head = &self.layout.head1;
        let out = head.out_dim;
        for r in 0..head.in_dim() {
            self.params[head.w + r * out] = 0.0;
        }
        self.params[head.b] = bias;
    }

    fn check_batch(&self, batch: &FieldBatch) -> Result<()> {
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("field parameters".into()));
        }
        let n = batch.len();
        check_rows("positions", &batch.x, n, 3)?;
        check_rows("directions", &batch.d, n, 3)?;
        match (&self.arch.pose_encoding, &batch.p) {
            (Some(_), Some(p)) => check_rows("object locations", p, n, 3)?,
            (None, None) => {}
            (Some(_), None) => return Err(Error::Shape("object model needs locations".into())),
            (None, Some(_)) => return Err(Error::Shape("background model takes no locations".into())),
        }
        match (self.arch.latent_dim, &batch.latents) {
            (0, None) => {}
            (ld, Some((table, groups))) if ld > 0 => {
                if table.ncols() != ld {
                    return Err(Error::Shape(format!(
                        "latent dimension {} but model expects {ld}",
                        table.ncols()
                    )));
                }
                if groups.len() != n || groups.iter().any(|&g| g >= table.nrows()) {
                    return Err(Error::Shape("latent group index out of range".into()));
                }
                if !table.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("latent codes".into()));
                }
            }
            (ld, _) => {
                return Err(Error::Shape(format!("model expects latent dimension {ld}")));
            }
        }
        Ok(())
    }

    /// Evaluates a batch. With `record` set, the returned trace can be fed to
    /// [`RadianceField::backward`].
    pub fn forward(&self, batch: &FieldBatch, record: bool) -> Result<FieldEval> {
        self.check_batch(batch)?;
        let n = batch.len();
        let arch = &self.arch;
        let p = &self.params;

        let enc_x = encode_rows(&arch.position_encoding, &batch.x, &arch.position_norm);
        let enc_d = encode_rows(&arch.direction_encoding, &batch.d, &InputNorm::IDENTITY);
        let enc_p = match (&arch.pose_encoding, &batch.p) {
            (Some(e), Some(pv)) => Some(encode_rows(e, pv, &arch.pose_norm)),
            _ => None,
        };
        // Latent contribution per stage-one layer that sees the stage-one input,
        // computed once per group and scattered to rows.
        let latent_rows = batch.latents.map(|(table, groups)| {
            let mut rows = Array2::zeros((n, arch.latent_dim));
            for (r, &g) in groups.iter().enumerate() {
                rows.row_mut(r).assign(&table.row(g));
            }
            rows
        });

        let mut s1_act: Vec<Array2<f64>> = Vec::with_capacity(arch.stage1_depth);
        for (i, layer) in self.layout.stage1.iter().enumerate() {
            let mut z = if i == 0 {
                layer.forward(p, &[Some(enc_x.view()), latent_rows.as_ref().map(|l| l.view())], n)
            } else if layer.blocks.len() == 3 {
                layer.forward(
                    p,
                    &[
                        Some(s1_act[i - 1].view()),
                        Some(enc_x.view()),
                        latent_rows.as_ref().map(|l| l.view()),
                    ],
                    n,
                )
            } else {
                layer.forward(p, &[Some(s1_act[i - 1].view())], n)
            };
            z.mapv_inplace(|v| v.max(0.0));
            s1_act.push(z);
        }
        let head1 = self
            .layout
            .head1
            .forward(p, &[Some(s1_act.last().expect("depth >= 1").view())], n);
        let sigma = head1.column(0).mapv(softplus);
        let feature = head1.slice(s![.., 1..]);

        let mut s2_act: Vec<Array2<f64>> = Vec::with_capacity(arch.stage2_depth);
        let s2_inputs = [Some(feature), Some(enc_d.view()), enc_p.as_ref().map(|e| e.view())];
        for (i, layer) in self.layout.stage2.iter().enumerate() {
            let mut z = if i == 0 {
                layer.forward(p, &s2_inputs, n)
            } else {
                layer.forward(p, &[Some(s2_act[i - 1].view())], n)
            };
            z.mapv_inplace(|v| v.max(0.0));
            s2_act.push(z);
        }
        let mut rgb = match s2_act.last() {
            Some(h) => self.layout.head2.forward(p, &[Some(h.view())], n),
            None => self.layout.head2.forward(p, &s2_inputs, n),
        };
        rgb.mapv_inplace(logistic);

        let trace = record.then(|| FieldTrace {
            enc_x,
            enc_d,
            enc_p,
            latent_rows,
            s1_act,
            head1,
            s2_act,
            rgb: rgb.clone(),
        });
        Ok(FieldEval { sigma, rgb, trace })
    }

    /// Reverse pass for upstream gradients `dsigma` (n) and `drgb` (n x 3).
    /// Parameter gradients are accumulated into `param_grad`.
    pub fn backward(
        &self,
        batch: &FieldBatch,
        trace: &FieldTrace,
        dsigma: ArrayView1<f64>,
        drgb: ArrayView2<f64>,
        param_grad: &mut [f64],
        want: InputGradRequest,
    ) -> Result<InputGrads> {
        let n = batch.len();
        if dsigma.len() != n || drgb.nrows() != n || drgb.ncols() != 3 {
            return Err(Error::Shape("upstream gradient does not match batch".into()));
        }
        if trace.rgb.nrows() != n {
            return Err(Error::Shape("trace does not match batch".into()));
        }
        if param_grad.len() != self.layout.len {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        let arch = &self.arch;
        let p = &self.params;

        // Stage two.
        let mut dz = Array2::from_shape_fn((n, 3), |(r, c)| {
            let y = trace.rgb[[r, c]];
            drgb[[r, c]] * y * (1.0 - y)
        });
        let feature = trace.head1.slice(s![.., 1..]);
        let s2_inputs = [
            Some(feature),
            Some(trace.enc_d.view()),
            trace.enc_p.as_ref().map(|e| e.view()),
        ];
        let want_s2 = [true, want.d, want.p && trace.enc_p.is_some()];
        let s2_grads = if arch.stage2_depth == 0 {
            self.layout
                .head2
                .backward(p, param_grad, &s2_inputs, &dz.view(), &want_s2)
        } else {
            let last = trace.s2_act.last().expect("stage two depth");
            let mut g = self.layout.head2.backward(
                p,
                param_grad,
                &[Some(last.view())],
                &dz.view(),
                &[true],
            );
            let mut grads = Vec::new();
            for i in (0..arch.stage2_depth).rev() {
                let mut dh = g.swap_remove(0).expect("requested");
                dh.zip_mut_with(&trace.s2_act[i], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                dz = dh;
                if i == 0 {
                    grads = self.layout.stage2[0].backward(p, param_grad, &s2_inputs, &dz.view(), &want_s2);
                } else {
                    g = self.layout.stage2[i].backward(
                        p,
                        param_grad,
                        &[Some(trace.s2_act[i - 1].view())],
                        &dz.view(),
                        &[true],
                    );
                }
            }
            grads
        };
        let mut s2_grads = s2_grads.into_iter();
        let dfeature = s2_grads.next().flatten().expect("feature gradient");
        let d_enc_d = s2_grads.next().flatten();
        let d_enc_p = s2_grads.next().flatten();

        // Stage-one head.
        let mut dhead = Array2::zeros((n, 1 + arch.feature_dim));
        for r in 0..n {
            dhead[[r, 0]] = dsigma[r] * logistic(trace.head1[[r, 0]]);
        }
        dhead.slice_mut(s![.., 1..]).assign(&dfeature);
        let last = trace.s1_act.last().expect("depth >= 1");
        let mut dh = self
            .layout
            .head1
            .backward(p, param_grad, &[Some(last.view())], &dhead.view(), &[true])
            .swap_remove(0)
            .expect("requested");

        let want_input = want.x;
        let want_latent = want.latents && trace.latent_rows.is_some();
        let mut d_enc_x: Option<Array2<f64>> = None;
        let mut d_latent_rows: Option<Array2<f64>> = None;
        let add = |slot: &mut Option<Array2<f64>>, g: Option<Array2<f64>>| {
            if let Some(g) = g {
                match slot {
                    Some(s) => *s += &g,
                    None => *slot = Some(g),
                }
            }
        };
        let latent_view = trace.latent_rows.as_ref().map(|l| l.view());
        for i in (0..arch.stage1_depth).rev() {
            dh.zip_mut_with(&trace.s1_act[i], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            let layer = &self.layout.stage1[i];
            if i == 0 {
                let mut g = layer.backward(
                    p,
                    param_grad,
                    &[Some(trace.enc_x.view()), latent_view],
                    &dh.view(),
                    &[want_input, want_latent],
                );
                add(&mut d_latent_rows, g.pop().flatten());
                add(&mut d_enc_x, g.pop().flatten());
            } else if layer.blocks.len() == 3 {
                let mut g = layer.backward(
                    p,
                    param_grad,
                    &[Some(trace.s1_act[i - 1].view()), Some(trace.enc_x.view()), latent_view],
                    &dh.view(),
                    &[true, want_input, want_latent],
                );
                add(&mut d_latent_rows, g.pop().flatten());
                add(&mut d_enc_x, g.pop().flatten());
                dh = g.pop().flatten().expect("requested");
            } else {
                dh = layer
                    .backward(p, param_grad, &[Some(trace.s1_act[i - 1].view())], &dh.view(), &[true])
                    .swap_remove(0)
                    .expect("requested");
            }
        }

        let mut out = InputGrads::default();
        if let Some(g) = d_enc_x {
            out.x = Some(encode_backward(
                &arch.position_encoding,
                &trace.enc_x,
                &g,
                &arch.position_norm,
            ));
        }
        if let Some(g) = d_enc_d {
            out.d = Some(encode_backward(
                &arch.direction_encoding,
                &trace.enc_d,
                &g,
                &InputNorm::IDENTITY,
            ));
        }
        if let (Some(g), Some(enc), Some(e)) = (d_enc_p, &trace.enc_p, &arch.pose_encoding) {
            out.p = Some(encode_backward(e, enc, &g, &arch.pose_norm));
        }
        if let (Some(g), Some((table, groups))) = (d_latent_rows, batch.latents) {
            let mut per_group = Array2::zeros(table.raw_dim());
            for (r, &grp) in groups.iter().enumerate() {
                let mut row = per_group.row_mut(grp);
                row += &g.row(r);
            }
            out.latents = Some(per_group);
        }
        Ok(out)
    }
}
