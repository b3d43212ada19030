//! Front-to-back alpha compositing of ordered samples and its reverse pass.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadedSample {
    pub t: f64,
    pub sigma: f64,
    pub rgb: [f64; 3],
}

/// Per-sample quantities of one composited ray.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeTrace {
    pub delta: Vec<f64>,
    /// Transmittance in front of each sample.
    pub transmittance: Vec<f64>,
    /// `T_i * alpha_i`.
    pub weights: Vec<f64>,
    /// Transmittance behind the last sample.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGrads {
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    pub t: Vec<f64>,
    pub t_far: f64,
}

fn check_order(samples: &[ShadedSample], t_far: f64) -> Result<()> {
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[0].t <= w[1].t) {
            return Err(Error::Unsorted(i + 1));
        }
    }
    if let Some(last) = samples.last() {
        if !(last.t <= t_far) {
            return Err(Error::Unsorted(samples.len()));
        }
    }
    Ok(())
}

/// Intervals `delta_i = t_{i+1} - t_i`, with `t_far - t_N` for the last one.
pub fn deltas(samples: &[ShadedSample], t_far: f64) -> Vec<f64> {
    let n = samples.len();
    (0..n)
        .map(|i| {
            let next = if i + 1 < n { samples[i + 1].t } else { t_far };
            next - samples[i].t
        })
        .collect()
}

/// Composited color and the per-sample weights.
pub fn composite_traced(
    samples: &[ShadedSample],
    t_far: f64,
    bg_color: [f64; 3],
) -> Result<([f64; 3], CompositeTrace)> {
    check_order(samples, t_far)?;
    let delta = deltas(samples, t_far);
    let n = samples.len();
    let mut transmittance = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut color = [0.0; 3];
    let mut acc = 0.0f64;
    for (s, &d) in samples.iter().zip(&delta) {
        let tau = s.sigma * d;
        let t_i = (-acc).exp();
        let w = t_i * (1.0 - (-tau).exp());
        for c in 0..3 {
            color[c] += w * s.rgb[c];
        }
        transmittance.push(t_i);
        weights.push(w);
        acc += tau;
    }
    let residual = (-acc).exp();
    for c in 0..3 {
        color[c] += residual * bg_color[c];
    }
    Ok((
        color,
        CompositeTrace {
            delta,
            transmittance,
            weights,
            residual,
        },
    ))
}

/// `sum_i T_i alpha_i c_i + T_{N+1} bg_color` over samples sorted by `t`.
pub fn composite(samples: &[ShadedSample], t_far: f64, bg_color: [f64; 3]) -> Result<[f64; 3]> {
    composite_traced(samples, t_far, bg_color).map(|(c, _)| c)
}

/// Gradients of `upstream . C` with respect to every sample's density,
/// color and ray parameter, and to `t_far`.
///
/// With `tau_j = sigma_j delta_j`, `dC/dtau_j = T_{j+1} c_j - S_{j+1}` where
/// `S_{j+1}` is everything composited behind sample `j`.
pub fn composite_backward(
    samples: &[ShadedSample],
    trace: &CompositeTrace,
    bg_color: [f64; 3],
    upstream: [f64; 3],
) -> CompositeGrads {
    let n = samples.len();
    let dot = |a: &[f64; 3]| a[0] * upstream[0] + a[1] * upstream[1] + a[2] * upstream[2];
    let mut g = CompositeGrads {
        sigma: vec![0.0; n],
        rgb: vec![[0.0; 3]; n],
        t: vec![0.0; n],
        t_far: 0.0,
    };
    // Running upstream-weighted color behind the current sample.
    let mut behind = trace.residual * dot(&bg_color);
    for j in (0..n).rev() {
        let s = &samples[j];
        let t_next = if j + 1 < n {
            trace.transmittance[j + 1]
        } else {
            trace.residual
        };
        let dtau = t_next * dot(&s.rgb) - behind;
        let w = trace.weights[j];
        g.rgb[j] = [w * upstream[0], w * upstream[1], w * upstream[2]];
        g.sigma[j] = dtau * trace.delta[j];
        let ddelta = dtau * s.sigma;
        g.t[j] -= ddelta;
        if j + 1 < n {
            g.t[j + 1] += ddelta;
        } else {
            g.t_far += ddelta;
        }
        behind += w * dot(&s.rgb);
    }
    g
}
