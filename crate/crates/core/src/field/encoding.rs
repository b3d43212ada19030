use serde::{Deserialize, Serialize};

/// Sinusoidal feature map `[v, sin(2^j pi v), cos(2^j pi v)]_{j < n_freq}`.
///
/// Layout per octave is the sine block for all components followed by the
/// cosine block, preceded by the raw input when `include_input` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourierEncoding {
    pub n_freq: usize,
    pub include_input: bool,
}

impl FourierEncoding {
    pub const fn new(n_freq: usize, include_input: bool) -> Self {
        Self {
            n_freq,
            include_input,
        }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        in_dim * (2 * self.n_freq + usize::from(self.include_input))
    }

    /// Writes the encoding of `v` into `out` (length `out_dim(v.len())`).
    ///
    /// Higher octaves come from the double-angle recurrence rather than fresh
    /// `sin_cos` calls; the drift is a few ulps per octave.
    pub fn encode_into(&self, v: &[f64], out: &mut [f64]) {
        let k = v.len();
        debug_assert_eq!(out.len(), self.out_dim(k));
        let mut off = 0;
        if self.include_input {
            out[..k].copy_from_slice(v);
            off = k;
        }
        if self.n_freq == 0 {
            return;
        }
        for (c, &x) in v.iter().enumerate() {
            let (mut s, mut co) = (std::f64::consts::PI * x).sin_cos();
            for j in 0..self.n_freq {
                let base = off + 2 * k * j;
                out[base + c] = s;
                out[base + k + c] = co;
                let s2 = 2.0 * s * co;
                co = (co - s) * (co + s);
                s = s2;
            }
        }
    }

    pub fn encode(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim(v.len())];
        self.encode_into(v, &mut out);
        out
    }

    /// Accumulates `d(encoding)/dv^T * grad_out` into `grad_in`, using the
    /// already-computed encoding `encoded`.
    pub fn backward_into(&self, encoded: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
        let k = grad_in.len();
        let mut off = 0;
        if self.include_input {
            for c in 0..k {
                grad_in[c] += grad_out[c];
            }
            off = k;
        }
        let mut freq = std::f64::consts::PI;
        for j in 0..self.n_freq {
            let base = off + 2 * k * j;
            for c in 0..k {
                let s = encoded[base + c];
                let co = encoded[base + k + c];
                grad_in[c] += freq * (co * grad_out[base + c] - s * grad_out[base + k + c]);
            }
            freq *= 2.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_blocks() {
        let enc = FourierEncoding::new(4, true);
        let out = enc.encode(&[0.0, 0.0, 0.0]);
        assert_eq!(out.len(), 27);
        assert!(out[..3].iter().all(|&v| v == 0.0));
        for j in 0..4 {
            let base = 3 + 6 * j;
            assert!(out[base..base + 3].iter().all(|&v| v == 0.0));
            assert!(out[base + 3..base + 6].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn identity_when_no_octaves() {
        let enc = FourierEncoding::new(0, true);
        assert_eq!(enc.encode(&[0.25, -3.0, 7.5]), vec![0.25, -3.0, 7.5]);
    }

    #[test]
    fn output_length() {
        assert_eq!(FourierEncoding::new(10, true).out_dim(3), 63);
        assert_eq!(FourierEncoding::new(4, false).out_dim(3), 24);
    }

    #[test]
    fn recurrence_matches_direct_evaluation() {
        let enc = FourierEncoding::new(10, false);
        let v = [0.123, -0.987, 0.5001];
        let out = enc.encode(&v);
        for j in 0..10 {
            let f = 2f64.powi(j as i32) * std::f64::consts::PI;
            for c in 0..3 {
                assert!((out[6 * j + c] - (f * v[c]).sin()).abs() < 1e-11);
                assert!((out[6 * j + 3 + c] - (f * v[c]).cos()).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let enc = FourierEncoding::new(6, true);
        let v = [0.31, -0.42, 0.07];
        let n = enc.out_dim(3);
        let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let f = |v: &[f64]| -> f64 { enc.encode(v).iter().zip(&w).map(|(a, b)| a * b).sum() };
        let mut grad = [0.0; 3];
        enc.backward_into(&enc.encode(&v), &w, &mut grad);
        let h = 1e-6;
        for c in 0..3 {
            let mut vp = v;
            let mut vm = v;
            vp[c] += h;
            vm[c] -= h;
            let fd = (f(&vp) - f(&vm)) / (2.0 * h);
            assert!((fd - grad[c]).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {}", grad[c]);
        }
    }
}
