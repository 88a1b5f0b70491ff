//! Parzen-windowed correlation ratio, its reverse-mode derivatives, and the
//! hard-binned oracle.

use rayon::prelude::*;

use super::parzen::Windows;
use super::{check_pair, ParzenConfig, Span, EMPTY_BIN_MASS, MIN_VARIANCE};
use crate::error::{Error, Result};

/// Forward state of a weighted `eta(Y|X)` evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct CrForward {
    pub eta: f64,
    pub var: f64,
    w_sum: f64,
    ybar: f64,
    /// d(var_cond)/d(S_k)
    g_s: Vec<f64>,
    /// d(var_cond)/d(T_k)
    g_t: Vec<f64>,
    /// d(var_cond)/d(ybar)
    g_ybar: f64,
}

struct Moments {
    w_sum: f64,
    wy: f64,
    s: Vec<f64>,
    t: Vec<f64>,
}

#[inline]
fn weight_at(w: Option<&[f64]>, i: usize) -> f64 {
    w.map_or(1.0, |w| w[i])
}

/// Weighted population variance of `y` about `mean`.
pub(crate) fn weighted_var(y: &[f64], w: Option<&[f64]>, span: Span, mean: f64, w_sum: f64) -> f64 {
    let parts: Vec<f64> = (0..span.chunks())
        .into_par_iter()
        .map(|c| {
            let mut acc = 0.0;
            for pos in span.chunk_range(c) {
                let i = span.at(pos);
                let d = y[i] - mean;
                acc += weight_at(w, i) * d * d;
            }
            acc
        })
        .collect();
    parts.iter().sum::<f64>() / w_sum
}

fn moments(xw: &Windows, y: &[f64], w: Option<&[f64]>, span: Span, k: usize) -> Moments {
    let parts: Vec<Moments> = (0..span.chunks())
        .into_par_iter()
        .map(|c| {
            let mut m = Moments {
                w_sum: 0.0,
                wy: 0.0,
                s: vec![0.0; k],
                t: vec![0.0; k],
            };
            for pos in span.chunk_range(c) {
                let i = span.at(pos);
                let wi = weight_at(w, i);
                if wi == 0.0 {
                    continue;
                }
                let yi = y[i];
                m.w_sum += wi;
                m.wy += wi * yi;
                let (first, win) = xw.window(i);
                for (t, &g) in win.iter().enumerate() {
                    let wg = wi * g;
                    m.s[first + t] += wg;
                    m.t[first + t] += wg * yi;
                }
            }
            m
        })
        .collect();
    let mut total = Moments {
        w_sum: 0.0,
        wy: 0.0,
        s: vec![0.0; k],
        t: vec![0.0; k],
    };
    for p in &parts {
        total.w_sum += p.w_sum;
        total.wy += p.wy;
        for b in 0..k {
            total.s[b] += p.s[b];
            total.t[b] += p.t[b];
        }
    }
    total
}

/// Weighted Parzen `eta(Y|X)`; `xw` holds the windows of `X`.
pub(crate) fn cr_forward(
    xw: &Windows,
    y: &[f64],
    w: Option<&[f64]>,
    span: Span,
    num_bins: usize,
) -> Result<CrForward> {
    let m = moments(xw, y, w, span, num_bins);
    if !(m.w_sum > 0.0) {
        return Err(Error::NoOverlap { valid_fraction: 0.0 });
    }
    let ybar = m.wy / m.w_sum;
    let var = weighted_var(y, w, span, ybar, m.w_sum);
    if !(var >= MIN_VARIANCE) {
        return Err(Error::ConstantTarget { variance: var });
    }
    let s_total: f64 = m.s.iter().sum();
    let mut g_s = vec![0.0; num_bins];
    let mut g_t = vec![0.0; num_bins];
    let mut g_ybar = 0.0;
    let mut cond_var = 0.0;
    if s_total > 0.0 {
        let mut q = 0.0;
        let mut ybar_k = vec![0.0; num_bins];
        for b in 0..num_bins {
            if m.s[b] >= EMPTY_BIN_MASS {
                ybar_k[b] = m.t[b] / m.s[b];
                let d = ybar_k[b] - ybar;
                q += m.s[b] * d * d;
            }
        }
        cond_var = q / s_total;
        for b in 0..num_bins {
            if m.s[b] >= EMPTY_BIN_MASS {
                let d = ybar_k[b] - ybar;
                g_s[b] = (ybar * ybar - ybar_k[b] * ybar_k[b] - cond_var) / s_total;
                g_t[b] = 2.0 * d / s_total;
                g_ybar -= 2.0 * m.s[b] * d / s_total;
            } else {
                g_s[b] = -cond_var / s_total;
            }
        }
    }
    Ok(CrForward {
        eta: cond_var / var,
        var,
        w_sum: m.w_sum,
        ybar,
        g_s,
        g_t,
        g_ybar,
    })
}

/// Which partial derivatives to produce in [`cr_backward`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Wants {
    pub dx: bool,
    pub dy: bool,
    pub dw: bool,
}

/// Partial derivatives `scale * (d eta/dx_i, d eta/dy_i, d eta/dw_i)` for every
/// position of `span`, in span order. `dx` requires windows with derivatives.
pub(crate) fn cr_backward(
    f: &CrForward,
    xw: &Windows,
    y: &[f64],
    w: Option<&[f64]>,
    span: Span,
    scale: f64,
    wants: Wants,
) -> Vec<[f64; 3]> {
    let inv_var = scale / f.var;
    let inv_w = 1.0 / f.w_sum;
    let parts: Vec<Vec<[f64; 3]>> = (0..span.chunks())
        .into_par_iter()
        .map(|c| {
            let range = span.chunk_range(c);
            let mut out = Vec::with_capacity(range.len());
            for pos in range {
                let i = span.at(pos);
                let wi = weight_at(w, i);
                let yi = y[i];
                let dev = yi - f.ybar;
                let (first, win) = xw.window(i);
                let mut g = [0.0; 3];
                if wants.dx && wi != 0.0 {
                    let der = xw.window_derivs(i);
                    let mut acc = 0.0;
                    for (t, &d) in der.iter().enumerate() {
                        acc += d * (f.g_s[first + t] + f.g_t[first + t] * yi);
                    }
                    g[0] = wi * acc * inv_var;
                }
                if wants.dy || wants.dw {
                    let mut acc_t = 0.0;
                    let mut acc_st = 0.0;
                    for (t, &v) in win.iter().enumerate() {
                        acc_t += v * f.g_t[first + t];
                        acc_st += v * (f.g_s[first + t] + f.g_t[first + t] * yi);
                    }
                    if wants.dy {
                        g[1] = (wi * acc_t + f.g_ybar * wi * inv_w
                            - f.eta * 2.0 * wi * dev * inv_w)
                            * inv_var;
                    }
                    if wants.dw {
                        g[2] = (acc_st + f.g_ybar * dev * inv_w
                            - f.eta * (dev * dev - f.var) * inv_w)
                            * inv_var;
                    }
                }
                out.push(g);
            }
            out
        })
        .collect();
    parts.concat()
}

/// Symmetric loss `-(eta(Y|X) + eta(X|Y)) / 2` over `span`, and optionally
/// `scale * (dL/dx_i, dL/dw_i)` per span position. Gradients need `xw` with
/// derivatives; `y` is treated as fixed.
pub(crate) fn symmetric_term(
    xw: &Windows,
    x: &[f64],
    yw: &Windows,
    y: &[f64],
    w: Option<&[f64]>,
    span: Span,
    num_bins: usize,
    grad_scale: Option<f64>,
) -> Result<(f64, Option<Vec<[f64; 2]>>)> {
    let a = cr_forward(xw, y, w, span, num_bins)?;
    let b = cr_forward(yw, x, w, span, num_bins)?;
    let value = -0.5 * (a.eta + b.eta);
    let Some(scale) = grad_scale else {
        return Ok((value, None));
    };
    let dw = w.is_some();
    let ga = cr_backward(&a, xw, y, w, span, -0.5 * scale, Wants { dx: true, dy: false, dw });
    let gb = cr_backward(&b, yw, x, w, span, -0.5 * scale, Wants { dx: false, dy: true, dw });
    let g = ga.iter().zip(&gb).map(|(p, q)| [p[0] + q[1], p[2] + q[2]]).collect();
    Ok((value, Some(g)))
}

/// Parzen-windowed correlation ratio `eta(Y|X)`; only `x` is binned.
pub fn correlation_ratio(x: &[f64], y: &[f64], cfg: &ParzenConfig) -> Result<f64> {
    check_pair(x, y)?;
    cfg.validate()?;
    let xw = Windows::compute(x, cfg, None, false);
    Ok(cr_forward(&xw, y, None, Span::All(x.len()), cfg.num_bins)?.eta)
}

/// Symmetric loss `-(eta(Y|X) + eta(X|Y)) / 2`.
pub fn cr_loss_symmetric(x: &[f64], y: &[f64], cfg: &ParzenConfig) -> Result<f64> {
    check_pair(x, y)?;
    cfg.validate()?;
    let xw = Windows::compute(x, cfg, None, false);
    let yw = Windows::compute(y, cfg, None, false);
    let span = Span::All(x.len());
    let a = cr_forward(&xw, y, None, span, cfg.num_bins)?.eta;
    let b = cr_forward(&yw, x, None, span, cfg.num_bins)?.eta;
    Ok(-0.5 * (a + b))
}

/// Hard-binned correlation ratio: sample `i` belongs to class
/// `floor(x_i * K)` (clamped to `[0, K-1]`), and
/// `eta = between / (between + within)` with between- and within-class sums
/// of squares, which equals `Var[E(Y|X)] / Var(Y)` and stays in `[0, 1]`.
pub fn discrete_cr_oracle(x: &[f64], y: &[f64], num_bins: usize) -> Result<f64> {
    check_pair(x, y)?;
    if num_bins < 2 {
        return Err(Error::invalid("need at least 2 bins"));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let total = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    if !(total / n >= MIN_VARIANCE) {
        return Err(Error::ConstantTarget { variance: total / n });
    }
    let class = |xi: f64| ((xi * num_bins as f64).floor().max(0.0) as usize).min(num_bins - 1);
    let mut count = vec![0usize; num_bins];
    let mut sum = vec![0.0; num_bins];
    for (&xi, &yi) in x.iter().zip(y) {
        let c = class(xi);
        count[c] += 1;
        sum[c] += yi;
    }
    let class_mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let between: f64 = class_mean
        .iter()
        .zip(&count)
        .map(|(m, &c)| c as f64 * (m - mean).powi(2))
        .sum();
    let within: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| (yi - class_mean[class(xi)]).powi(2))
        .sum();
    if between + within == 0.0 {
        return Ok(0.0);
    }
    Ok(between / (between + within))
}
