//! Gaussian smoothing and extent-preserving downsampling.

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Normalized 1D Gaussian kernel truncated at 3 sigma. Returns `[1.0]` for
/// `sigma <= 0`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Applies `f(line_in, line_out)` to every line of `src` along `axis`,
/// producing a volume whose extent along that axis is `out_len`.
fn map_lines(
    src: &[f64],
    dims: [usize; 3],
    axis: usize,
    out_len: usize,
    mut f: impl FnMut(&[f64], &mut [f64]),
) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = out_len;
    let mut out = vec![0.0; out_dims.iter().product()];
    let n = dims[axis];
    let mut line = vec![0.0; n];
    let mut line_out = vec![0.0; out_len];
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let stride = |d: [usize; 3], a: usize| match a {
        0 => 1,
        1 => d[0],
        _ => d[0] * d[1],
    };
    let (si, so) = (stride(dims, axis), stride(out_dims, axis));
    for b in 0..dims[o2] {
        for a in 0..dims[o1] {
            let base_in = a * stride(dims, o1) + b * stride(dims, o2);
            let base_out = a * stride(out_dims, o1) + b * stride(out_dims, o2);
            for (t, v) in line.iter_mut().enumerate() {
                *v = src[base_in + t * si];
            }
            f(&line, &mut line_out);
            for (t, v) in line_out.iter().enumerate() {
                out[base_out + t * so] = *v;
            }
        }
    }
    (out, out_dims)
}

/// Convolves a line with a centered kernel; taps falling outside the line are
/// dropped and the remaining weights renormalized, so constants are preserved.
fn convolve_line(kernel: &[f64], line: &[f64], out: &mut [f64]) {
    let r = (kernel.len() / 2) as i64;
    let n = line.len() as i64;
    for (i, o) in out.iter_mut().enumerate() {
        let i = i as i64;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (t, &k) in kernel.iter().enumerate() {
            let j = i + t as i64 - r;
            if j >= 0 && j < n {
                acc += k * line[j as usize];
                norm += k;
            }
        }
        *o = acc / norm;
    }
}

/// Separable Gaussian smoothing with per-axis sigma in voxels.
pub fn gaussian_blur(vol: &Volume, sigma_voxels: [f64; 3]) -> Result<Volume> {
    let mut data = vol.data().to_vec();
    let dims = vol.dims();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma_voxels[axis]);
        if kernel.len() == 1 {
            continue;
        }
        let (next, _) = map_lines(&data, dims, axis, dims[axis], |l, o| {
            convolve_line(&kernel, l, o)
        });
        data = next;
    }
    vol.with_data(data)
}

/// Gaussian smoothing (sigma = 0.5 * factor voxels, truncated at 3 sigma)
/// followed by resampling onto a grid of `ceil(dim / factor)` voxels per axis
/// with the same physical extent.
///
/// Each output voxel takes the smoothed value at its own physical center
/// (linear interpolation along each axis), so coarse and fine grids agree on
/// where every sample lives. A factor of 1 returns an exact copy.
pub fn gaussian_downsample(vol: &Volume, factor: usize) -> Result<Volume> {
    if factor < 1 {
        return Err(Error::invalid("downsampling factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(vol.clone());
    }
    let dims = vol.dims();
    let spacing = vol.spacing();
    let extent = vol.extent();
    let mut out_dims = [0usize; 3];
    let mut out_spacing = [0.0; 3];
    for a in 0..3 {
        out_dims[a] = dims[a].div_ceil(factor);
        if out_dims[a] == 0 {
            return Err(Error::invalid("downsampled dimension would be zero"));
        }
        out_spacing[a] = extent[a] / out_dims[a] as f64;
    }
    let kernel = gaussian_kernel(0.5 * factor as f64);
    let mut data = vol.data().to_vec();
    let mut cur_dims = dims;
    let mut blurred = vec![0.0; dims.iter().copied().max().unwrap_or(0)];
    for a in 0..3 {
        let n_in = dims[a];
        let ratio = out_spacing[a] / spacing[a];
        let (next, next_dims) = map_lines(&data, cur_dims, a, out_dims[a], |line, out| {
            let b = &mut blurred[..n_in];
            convolve_line(&kernel, line, b);
            for (j, o) in out.iter_mut().enumerate() {
                // continuous source index of the output voxel center
                let u = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = (u.floor() as usize).min(n_in.saturating_sub(2));
                let t = u - i0 as f64;
                *o = if n_in == 1 {
                    b[0]
                } else {
                    (1.0 - t) * b[i0] + t * b[i0 + 1]
                };
            }
        });
        data = next;
        cur_dims = next_dims;
    }
    Ok(Volume::new(out_dims, out_spacing, data)?.with_header(vol.header().map(<[u8]>::to_vec)))
}
