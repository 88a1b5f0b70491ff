//! Mutual information from a Parzen joint histogram.

use rayon::prelude::*;

use super::parzen::Windows;
use super::{check_pair, ParzenConfig, Span};
use crate::error::{Error, Result};

/// Cells with probability at or below this are left out of the sum.
const MIN_CELL: f64 = 1e-12;

pub(crate) struct MiForward {
    pub mi: f64,
    k: usize,
    /// d(MI)/d(J) for the unnormalized joint histogram J.
    g_joint: Vec<f64>,
}

/// Visits cell pairs `(a, b)` and `(b, a)` together so a transposed histogram
/// is reduced in exactly the same order.
fn symmetric_sum(k: usize, f: impl Fn(usize, usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for a in 0..k {
        acc += f(a, a);
        for b in a + 1..k {
            acc += f(a, b) + f(b, a);
        }
    }
    acc
}

pub(crate) fn mi_forward(
    xw: &Windows,
    yw: &Windows,
    w: Option<&[f64]>,
    span: Span,
    k: usize,
) -> Result<MiForward> {
    let parts: Vec<Vec<f64>> = (0..span.chunks())
        .into_par_iter()
        .map(|c| {
            let mut joint = vec![0.0; k * k];
            for pos in span.chunk_range(c) {
                let i = span.at(pos);
                let wi = w.map_or(1.0, |w| w[i]);
                if wi == 0.0 {
                    continue;
                }
                let (fx, ax) = xw.window(i);
                let (fy, by) = yw.window(i);
                for (s, &a) in ax.iter().enumerate() {
                    let row = (fx + s) * k;
                    for (t, &b) in by.iter().enumerate() {
                        joint[row + fy + t] += wi * (a * b);
                    }
                }
            }
            joint
        })
        .collect();
    let mut joint = vec![0.0; k * k];
    for p in &parts {
        for (j, v) in joint.iter_mut().zip(p) {
            *j += v;
        }
    }
    let z = symmetric_sum(k, |a, b| joint[a * k + b]);
    if !(z > 0.0) {
        return Err(Error::NoOverlap { valid_fraction: 0.0 });
    }
    let p: Vec<f64> = joint.iter().map(|v| v / z).collect();
    let px: Vec<f64> = (0..k).map(|a| (0..k).map(|b| p[a * k + b]).sum()).collect();
    let py: Vec<f64> = (0..k).map(|b| (0..k).map(|a| p[a * k + b]).sum()).collect();
    let included = |a: usize, b: usize| p[a * k + b] > MIN_CELL;
    let mi = symmetric_sum(k, |a, b| {
        if included(a, b) {
            let v = p[a * k + b];
            v * (v / (px[a] * py[b])).ln()
        } else {
            0.0
        }
    });

    // d(MI)/dP, accounting for the marginals' dependence on every cell
    let row_frac: Vec<f64> = (0..k)
        .map(|a| (0..k).filter(|&b| included(a, b)).map(|b| p[a * k + b]).sum::<f64>() / px[a].max(f64::MIN_POSITIVE))
        .collect();
    let col_frac: Vec<f64> = (0..k)
        .map(|b| (0..k).filter(|&a| included(a, b)).map(|a| p[a * k + b]).sum::<f64>() / py[b].max(f64::MIN_POSITIVE))
        .collect();
    let mut g_p = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let mut g = -row_frac[a] - col_frac[b];
            if included(a, b) {
                g += (p[a * k + b] / (px[a] * py[b])).ln() + 1.0;
            }
            g_p[a * k + b] = g;
        }
    }
    let mean_g: f64 = g_p.iter().zip(&p).map(|(g, v)| g * v).sum();
    let g_joint = g_p.iter().map(|g| (g - mean_g) / z).collect();
    Ok(MiForward { mi, k, g_joint })
}

/// `scale * (dMI/dx_i, dMI/dy_i, dMI/dw_i)` per span position. `dx` needs
/// derivatives in `xw`, `dy` in `yw`.
pub(crate) fn mi_backward(
    f: &MiForward,
    xw: &Windows,
    yw: &Windows,
    w: Option<&[f64]>,
    span: Span,
    scale: f64,
    want_dx: bool,
    want_dy: bool,
) -> Vec<[f64; 3]> {
    let k = f.k;
    let parts: Vec<Vec<[f64; 3]>> = (0..span.chunks())
        .into_par_iter()
        .map(|c| {
            let range = span.chunk_range(c);
            let mut out = Vec::with_capacity(range.len());
            for pos in range {
                let i = span.at(pos);
                let wi = w.map_or(1.0, |w| w[i]);
                let (fx, ax) = xw.window(i);
                let (fy, by) = yw.window(i);
                let dax = if want_dx && wi != 0.0 { Some(xw.window_derivs(i)) } else { None };
                let dby = if want_dy && wi != 0.0 { Some(yw.window_derivs(i)) } else { None };
                let mut g = [0.0; 3];
                for (s, &a) in ax.iter().enumerate() {
                    let row = (fx + s) * k + fy;
                    let mut u = 0.0;
                    let mut uy = 0.0;
                    for (t, &b) in by.iter().enumerate() {
                        let gj = f.g_joint[row + t];
                        u += b * gj;
                        if let Some(d) = dby {
                            uy += d[t] * gj;
                        }
                    }
                    if let Some(d) = dax {
                        g[0] += d[s] * u;
                    }
                    g[1] += a * uy;
                    g[2] += a * u;
                }
                out.push([g[0] * wi * scale, g[1] * wi * scale, g[2] * scale]);
            }
            out
        })
        .collect();
    parts.concat()
}

/// Parzen mutual information (natural log) with Gaussian windows of the same
/// bin count and bandwidth on both axes.
pub fn mutual_information(x: &[f64], y: &[f64], cfg: &ParzenConfig) -> Result<f64> {
    check_pair(x, y)?;
    cfg.validate()?;
    let xw = Windows::compute(x, cfg, None, false);
    let yw = Windows::compute(y, cfg, None, false);
    Ok(mi_forward(&xw, &yw, None, Span::All(x.len()), cfg.num_bins)?.mi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_x_has_no_information() {
        let x = vec![0.37; 100];
        let y: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let mi = mutual_information(&x, &y, &ParzenConfig::default()).unwrap();
        assert!(mi.abs() < 1e-6, "{mi}");
    }

    #[test]
    fn identical_sharp_windows_approach_marginal_entropy() {
        let k = 16;
        let cfg = ParzenConfig::new(k, 0.05).unwrap();
        let x: Vec<f64> = (0..400).map(|i| ((i * 7) % k) as f64 / k as f64 + 0.5 / k as f64).collect();
        let mi = mutual_information(&x, &x, &cfg).unwrap();
        // entropy of the binned marginal from the same histogram
        let mut counts = vec![0.0; k];
        for v in &x {
            counts[(v * k as f64) as usize] += 1.0;
        }
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|c| {
                let p = c / x.len() as f64;
                -p * p.ln()
            })
            .sum();
        assert!((mi - h).abs() < 1e-6, "{mi} vs {h}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = x.iter().map(|v| (v * 3.0 + rng.random::<f64>()).fract()).collect();
            let cfg = ParzenConfig::default();
            let a = mutual_information(&x, &y, &cfg).unwrap();
            let b = mutual_information(&y, &x, &cfg).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
            assert!(a >= -1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 150;
        let cfg = ParzenConfig::new(12, 0.8).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| (v * 4.0).sin().abs() * 0.8 + 0.2 * rng.random::<f64>()).collect();
        let w: Vec<f64> = (0..n).map(|_| 0.1 + 0.9 * rng.random::<f64>()).collect();
        let span = Span::All(n);
        let eval = |x: &[f64], y: &[f64], w: &[f64]| {
            let xw = Windows::compute(x, &cfg, None, false);
            let yw = Windows::compute(y, &cfg, None, false);
            mi_forward(&xw, &yw, Some(w), span, cfg.num_bins).unwrap().mi
        };
        let xw = Windows::compute(&x, &cfg, None, true);
        let yw = Windows::compute(&y, &cfg, None, true);
        let f = mi_forward(&xw, &yw, Some(&w), span, cfg.num_bins).unwrap();
        let g = mi_backward(&f, &xw, &yw, Some(&w), span, 1.0, true, true);
        let h = 1e-6;
        for i in [0, 33, 77, 149] {
            for which in 0..3 {
                let (mut xp, mut yp, mut wp) = (x.clone(), y.clone(), w.clone());
                let (mut xm, mut ym, mut wm) = (x.clone(), y.clone(), w.clone());
                let (vp, vm) = match which {
                    0 => (&mut xp, &mut xm),
                    1 => (&mut yp, &mut ym),
                    _ => (&mut wp, &mut wm),
                };
                vp[i] += h;
                vm[i] -= h;
                let fd = (eval(&xp, &yp, &wp) - eval(&xm, &ym, &wm)) / (2.0 * h);
                assert!((fd - g[i][which]).abs() < 1e-7, "i={i} part={which}: {fd} vs {}", g[i][which]);
            }
        }
    }
}
