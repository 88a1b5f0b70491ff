//! Gaussian Parzen window weights of intensities against bin centers.

use rayon::prelude::*;

use super::ParzenConfig;

/// Kernel support in bandwidths past the nearest bin center; beyond it the
/// weight is below 1.3e-14 of the largest one.
const SUPPORT: f64 = 8.0;

/// Sparse table of window weights, normalized over bins for each sample:
/// `w[i][k] = g(x_i - bin_k) / sum_j g(x_i - bin_j)` with `g(d) = exp(-d^2 / 2h^2)`,
/// and optionally `dw/dx_i`. Only bins inside the kernel support are stored.
#[derive(Debug, Clone)]
pub(crate) struct Windows {
    stride: usize,
    first: Vec<u32>,
    count: Vec<u16>,
    weights: Vec<f64>,
    derivs: Option<Vec<f64>>,
}

impl Windows {
    /// Window weights for every sample. Samples with `skip[i]` set get an
    /// empty window.
    pub fn compute(x: &[f64], cfg: &ParzenConfig, skip: Option<&[f64]>, with_derivs: bool) -> Self {
        let k = cfg.num_bins;
        let h = cfg.bandwidth();
        let radius = SUPPORT * cfg.bandwidth_ratio + 0.5; // in bins
        let stride = ((2.0 * radius).floor() as usize + 2).min(k);
        let inv_2h2 = 1.0 / (2.0 * h * h);
        let inv_h2 = 1.0 / (h * h);
        let kf = k as f64;
        let n = x.len();
        let mut first = vec![0u32; n];
        let mut count = vec![0u16; n];
        let mut weights = vec![0.0; n * stride];
        let mut derivs = if with_derivs { vec![0.0; n * stride] } else { Vec::new() };

        const CHUNK: usize = 1024;
        let fill = |start: usize, f: &mut [u32], c: &mut [u16], w: &mut [f64], d: Option<&mut [f64]>| {
            let mut d = d;
            for local in 0..f.len() {
                let i = start + local;
                if skip.is_some_and(|s| s[i] <= 0.0) {
                    continue;
                }
                let xi = x[i];
                let p = xi * kf - 0.5;
                let lo = (p - radius).ceil().max(0.0);
                let hi = (p + radius).floor().min(kf - 1.0);
                if !(lo <= hi) {
                    continue;
                }
                let (lo, hi) = (lo as usize, hi as usize);
                let cnt = (hi - lo + 1).min(stride);
                f[local] = lo as u32;
                c[local] = cnt as u16;
                let w = &mut w[local * stride..local * stride + cnt];
                let near = (p.round().clamp(0.0, kf - 1.0) + 0.5) / kf;
                let d0 = (xi - near) * (xi - near);
                let mut total = 0.0;
                for (t, wt) in w.iter_mut().enumerate() {
                    let diff = xi - ((lo + t) as f64 + 0.5) / kf;
                    *wt = (-(diff * diff - d0) * inv_2h2).exp();
                    total += *wt;
                }
                let mut mean_slope = 0.0;
                for (t, wt) in w.iter_mut().enumerate() {
                    *wt /= total;
                    mean_slope += *wt * -(xi - ((lo + t) as f64 + 0.5) / kf) * inv_h2;
                }
                if let Some(d) = d.as_deref_mut() {
                    for (t, &wt) in w.iter().enumerate() {
                        let slope = -(xi - ((lo + t) as f64 + 0.5) / kf) * inv_h2;
                        d[local * stride + t] = wt * (slope - mean_slope);
                    }
                }
            }
        };
        if with_derivs {
            first
                .par_chunks_mut(CHUNK)
                .zip(count.par_chunks_mut(CHUNK))
                .zip(weights.par_chunks_mut(CHUNK * stride))
                .zip(derivs.par_chunks_mut(CHUNK * stride))
                .enumerate()
                .for_each(|(ci, (((f, c), w), d))| fill(ci * CHUNK, f, c, w, Some(d)));
        } else {
            first
                .par_chunks_mut(CHUNK)
                .zip(count.par_chunks_mut(CHUNK))
                .zip(weights.par_chunks_mut(CHUNK * stride))
                .enumerate()
                .for_each(|(ci, ((f, c), w))| fill(ci * CHUNK, f, c, w, None));
        }
        Self {
            stride,
            first,
            count,
            weights,
            derivs: with_derivs.then_some(derivs),
        }
    }

    /// First bin index and the weights of the window of sample `i`.
    #[inline]
    pub fn window(&self, i: usize) -> (usize, &[f64]) {
        let c = self.count[i] as usize;
        let off = i * self.stride;
        (self.first[i] as usize, &self.weights[off..off + c])
    }

    /// Derivatives of the window weights with respect to the sample value.
    #[inline]
    pub fn window_derivs(&self, i: usize) -> &[f64] {
        let c = self.count[i] as usize;
        let off = i * self.stride;
        let d = self.derivs.as_ref().expect("windows computed without derivatives");
        &d[off..off + c]
    }
}
