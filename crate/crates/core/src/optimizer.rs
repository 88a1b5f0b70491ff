//! Multi-scale instance-specific optimization of the affine parameters.

use std::io::Write;
use std::time::{Duration, Instant};

use crate::affine::AffineParams;
use crate::error::{Error, Result};
use crate::pyramid::gaussian_downsample;
use crate::similarity::{Metric, Objective, ParzenConfig, PatchConfig};
use crate::volume::Volume;

/// Loss family requested by the user; the per-scale metric is derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricFamily {
    /// Global correlation ratio at factors of 8 and above, patch-averaged below.
    Cr,
    /// Parzen mutual information at every scale.
    Mi,
}

impl MetricFamily {
    pub fn metric_for_factor(self, factor: usize) -> Metric {
        match self {
            MetricFamily::Cr if factor >= 8 => Metric::CrGlobal,
            MetricFamily::Cr => Metric::CrPatch,
            MetricFamily::Mi => Metric::Mi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    factors: Vec<usize>,
    iters: Vec<usize>,
    metrics: Vec<Metric>,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        Self::for_family(vec![16, 8, 4, 2, 1], vec![100, 100, 120, 140, 160], MetricFamily::Cr)
            .expect("default schedule is valid")
    }
}

impl ScaleSchedule {
    pub fn new(factors: Vec<usize>, iters: Vec<usize>, metrics: Vec<Metric>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::invalid("schedule needs at least one scale"));
        }
        if factors.len() != iters.len() || factors.len() != metrics.len() {
            return Err(Error::invalid(format!(
                "schedule lengths differ: {} factors, {} iteration counts, {} metrics",
                factors.len(),
                iters.len(),
                metrics.len()
            )));
        }
        if factors.windows(2).any(|w| w[0] <= w[1]) || factors.last() != Some(&1) {
            return Err(Error::invalid(format!(
                "factors must be strictly decreasing and end at 1, got {factors:?}"
            )));
        }
        if iters.contains(&0) {
            return Err(Error::invalid("every scale needs at least one iteration"));
        }
        Ok(Self {
            factors,
            iters,
            metrics,
        })
    }

    pub fn for_family(factors: Vec<usize>, iters: Vec<usize>, family: MetricFamily) -> Result<Self> {
        let metrics = factors.iter().map(|&f| family.metric_for_factor(f)).collect();
        Self::new(factors, iters, metrics)
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn iters(&self) -> &[usize] {
        &self.iters
    }

    pub fn metrics(&self) -> &[Metric] {
        &self.metrics
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Method::Adam),
            "sgd" => Ok(Method::Sgd),
            _ => Err(Error::invalid(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub method: Method,
    /// Learning rate per scale; a single value is a base rate for every scale.
    pub lr: Vec<f64>,
    /// Scales a single base rate by `min(1, 2 / factor)`. An explicit
    /// per-scale list is used as given.
    pub damp_coarse: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum gradient norm; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            lr: vec![0.01],
            damp_coarse: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_empty() || self.lr.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("eps must be positive and grad_clip non-negative"));
        }
        Ok(())
    }

    /// Learning rate of scale `idx` with downsampling `factor`.
    pub fn lr_at(&self, idx: usize, factor: usize) -> Result<f64> {
        match self.lr.len() {
            1 if self.damp_coarse => Ok(self.lr[0] * (2.0 / factor as f64).min(1.0)),
            1 => Ok(self.lr[0]),
            _ => self
                .lr
                .get(idx)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no learning rate for scale {idx}"))),
        }
    }
}

/// Per-iteration record of one scale. `losses[i]` is the loss at the
/// parameters before update `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTrace {
    pub factor: usize,
    pub metric: Metric,
    pub losses: Vec<f64>,
    pub valid_fractions: Vec<f64>,
    /// Loss at the parameters left after the last update.
    pub final_loss: f64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub params: AffineParams,
    pub traces: Vec<ScaleTrace>,
    /// Validity fraction at the final parameters on the finest scale.
    pub valid_fraction: f64,
}

impl RegistrationResult {
    pub fn trace_lengths(&self) -> Vec<usize> {
        self.traces.iter().map(|t| t.losses.len()).collect()
    }

    /// CSV with one row per iteration: `scale_factor,iteration,loss,valid_fraction`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::invalid(format!("trace CSV: {e}"));
        w.write_record(["scale_factor", "iteration", "loss", "valid_fraction"])
            .map_err(csv_err)?;
        for t in &self.traces {
            for (i, (l, v)) in t.losses.iter().zip(&t.valid_fractions).enumerate() {
                w.write_record([t.factor.to_string(), i.to_string(), format!("{l:?}"), format!("{v:?}")])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::invalid(format!("trace CSV: {e}")))?;
        Ok(())
    }
}

struct Adam {
    m: [f64; 12],
    v: [f64; 12],
    t: i32,
}

fn clip(mut g: [f64; 12], max_norm: f64) -> [f64; 12] {
    if max_norm > 0.0 {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    g
}

/// Runs exactly `iters` update steps of `metric` at a single resolution.
#[allow(clippy::too_many_arguments)]
pub fn single_scale_optimize(
    moving: &Volume,
    fixed: &Volume,
    init: &AffineParams,
    iters: usize,
    metric: Metric,
    cfg: &ParzenConfig,
    patch: &PatchConfig,
    opt: &OptimizerConfig,
    lr: f64,
) -> Result<(AffineParams, ScaleTrace)> {
    if iters == 0 {
        return Err(Error::invalid("iteration count must be at least 1"));
    }
    opt.validate()?;
    init.validate()?;
    let start = Instant::now();
    let obj = Objective::new(moving, fixed, metric, *cfg, *patch)?;
    let mut alpha = init.to_array();
    let mut adam = Adam {
        m: [0.0; 12],
        v: [0.0; 12],
        t: 0,
    };
    let mut losses = Vec::with_capacity(iters);
    let mut valid_fractions = Vec::with_capacity(iters);
    for _ in 0..iters {
        let e = obj.evaluate(&AffineParams::from_array(alpha))?;
        losses.push(e.loss);
        valid_fractions.push(e.valid_fraction);
        let g = clip(e.grad, opt.grad_clip);
        match opt.method {
            Method::Sgd => {
                for (a, gi) in alpha.iter_mut().zip(g) {
                    *a -= lr * gi;
                }
            }
            Method::Adam => {
                adam.t += 1;
                let c1 = 1.0 - opt.beta1.powi(adam.t);
                let c2 = 1.0 - opt.beta2.powi(adam.t);
                for i in 0..12 {
                    adam.m[i] = opt.beta1 * adam.m[i] + (1.0 - opt.beta1) * g[i];
                    adam.v[i] = opt.beta2 * adam.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                    alpha[i] -= lr * (adam.m[i] / c1) / ((adam.v[i] / c2).sqrt() + opt.eps);
                }
            }
        }
    }
    let params = AffineParams::from_array(alpha);
    let final_loss = obj.value(&params)?.loss;
    let trace = ScaleTrace {
        factor: 1,
        metric,
        losses,
        valid_fractions,
        final_loss,
        wall_time: start.elapsed(),
    };
    Ok((params, trace))
}

/// Coarse-to-fine optimization: at each scale both volumes are downsampled by
/// the scale's factor and the parameters are refined for the scheduled
/// number of iterations, restarting the optimizer state.
pub fn multiscale_iso(
    moving: &Volume,
    fixed: &Volume,
    init: &AffineParams,
    sched: &ScaleSchedule,
    cfg: &ParzenConfig,
    patch: &PatchConfig,
    opt: &OptimizerConfig,
) -> Result<RegistrationResult> {
    opt.validate()?;
    init.validate()?;
    let mut params = *init;
    let mut traces = Vec::with_capacity(sched.len());
    let mut valid_fraction = 0.0;
    for (idx, ((&factor, &iters), &metric)) in sched
        .factors
        .iter()
        .zip(&sched.iters)
        .zip(&sched.metrics)
        .enumerate()
    {
        let m = gaussian_downsample(moving, factor)?;
        let f = gaussian_downsample(fixed, factor)?;
        let lr = opt.lr_at(idx, factor)?;
        let (p, mut trace) = single_scale_optimize(&m, &f, &params, iters, metric, cfg, patch, opt, lr)?;
        trace.factor = factor;
        log::info!(
            "scale {factor}: {metric} loss {:.6} -> {:.6} in {:.2?}",
            trace.losses[0],
            trace.final_loss,
            trace.wall_time
        );
        valid_fraction = *trace.valid_fractions.last().expect("at least one iteration");
        params = p;
        traces.push(trace);
    }
    Ok(RegistrationResult {
        params,
        traces,
        valid_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phantom(dims: [usize; 3], shift: f64) -> Volume {
        let mut data = Vec::new();
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let (x, y, z) = (i as f64 - 9.0 - shift, j as f64 - 10.0, k as f64 - 9.5);
                    let a = (-(x * x + y * y) / 18.0 - z * z / 30.0).exp();
                    let b = (-((x - 5.0).powi(2) + (y + 4.0).powi(2) + (z - 3.0).powi(2)) / 8.0).exp();
                    data.push((0.1 + 0.6 * a + 0.3 * b).min(1.0));
                }
            }
        }
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert!(ScaleSchedule::for_family(vec![4, 2, 1], vec![1, 1, 1], MetricFamily::Cr).is_ok());
        assert!(ScaleSchedule::for_family(vec![2, 4, 1], vec![1, 1, 1], MetricFamily::Cr).is_err());
        assert!(ScaleSchedule::for_family(vec![4, 2], vec![1, 1], MetricFamily::Cr).is_err());
        assert!(ScaleSchedule::for_family(vec![2, 1], vec![1, 0], MetricFamily::Cr).is_err());
        assert!(ScaleSchedule::for_family(vec![2, 1], vec![1], MetricFamily::Cr).is_err());
        let d = ScaleSchedule::default();
        assert_eq!(d.factors(), &[16, 8, 4, 2, 1]);
        assert_eq!(d.iters(), &[100, 100, 120, 140, 160]);
        assert_eq!(
            d.metrics(),
            &[Metric::CrGlobal, Metric::CrGlobal, Metric::CrPatch, Metric::CrPatch, Metric::CrPatch]
        );
    }

    #[test]
    fn learning_rate_lookup() {
        let d = OptimizerConfig::default();
        let got: Vec<f64> = [16, 8, 4, 2, 1].iter().enumerate().map(|(i, &f)| d.lr_at(i, f).unwrap()).collect();
        assert_eq!(got, vec![0.00125, 0.0025, 0.005, 0.01, 0.01]);
        let flat = OptimizerConfig {
            damp_coarse: false,
            ..d.clone()
        };
        assert_eq!(flat.lr_at(0, 16).unwrap(), 0.01);
        let listed = OptimizerConfig {
            lr: vec![0.1, 0.2],
            ..d
        };
        assert_eq!(listed.lr_at(1, 16).unwrap(), 0.2);
        assert!(listed.lr_at(2, 1).is_err());
    }

    #[test]
    fn sgd_single_step_is_bounded_by_clip() {
        let f = phantom([20, 20, 20], 0.0);
        let m = phantom([20, 20, 20], 1.5);
        let opt = OptimizerConfig {
            method: Method::Sgd,
            ..OptimizerConfig::default()
        };
        let lr = 0.01;
        let init = AffineParams::identity();
        let (p, trace) = single_scale_optimize(
            &m,
            &f,
            &init,
            1,
            Metric::CrGlobal,
            &ParzenConfig::default(),
            &PatchConfig::default(),
            &opt,
            lr,
        )
        .unwrap();
        assert_eq!(trace.losses.len(), 1);
        for (a, b) in p.to_array().iter().zip(init.to_array()) {
            assert!((a - b).abs() <= lr * opt.grad_clip + 1e-15);
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let f = phantom([20, 20, 20], 0.0);
        let m = phantom([20, 20, 20], 1.0);
        let sched = ScaleSchedule::for_family(vec![2, 1], vec![5, 5], MetricFamily::Cr).unwrap();
        let run = || {
            multiscale_iso(
                &m,
                &f,
                &AffineParams::identity(),
                &sched,
                &ParzenConfig::default(),
                &PatchConfig {
                    patch_size: 10,
                    ..PatchConfig::default()
                },
                &OptimizerConfig::default(),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            assert_eq!(ta.losses, tb.losses);
        }
        assert_eq!(a.trace_lengths(), vec![5, 5]);
    }

    #[test]
    fn recovers_translation() {
        let f = phantom([20, 20, 20], 0.0);
        let m = phantom([20, 20, 20], 1.5);
        let sched = ScaleSchedule::for_family(vec![2, 1], vec![60, 60], MetricFamily::Cr).unwrap();
        let r = multiscale_iso(
            &m,
            &f,
            &AffineParams::identity(),
            &sched,
            &ParzenConfig::default(),
            &PatchConfig {
                patch_size: 20,
                ..PatchConfig::default()
            },
            &OptimizerConfig::default(),
        )
        .unwrap();
        let expected = 1.5 / f.max_half_extent();
        assert!((r.params.translation[0] - expected).abs() < 0.3 / f.max_half_extent(), "{:?}", r.params);
        assert!(r.traces[1].final_loss <= r.traces[0].losses[0]);
    }

    #[test]
    fn trace_csv_has_one_row_per_iteration() {
        let r = RegistrationResult {
            params: AffineParams::identity(),
            traces: vec![ScaleTrace {
                factor: 2,
                metric: Metric::CrGlobal,
                losses: vec![-0.5, -0.6],
                valid_fractions: vec![1.0, 0.9],
                final_loss: -0.7,
                wall_time: Duration::ZERO,
            }],
            valid_fraction: 0.9,
        };
        let mut buf = Vec::new();
        r.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "scale_factor,iteration,loss,valid_fraction\n2,0,-0.5,1.0\n2,1,-0.6,0.9\n");
    }
}
