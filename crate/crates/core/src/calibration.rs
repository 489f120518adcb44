//! Online calibration of the linear cost coefficients.
//!
//! Two exponentially weighted recursive least-squares estimators — one for
//! latency `[ms/Mega-mop, ms/Mega-flop]`, one for carbon — share a
//! measurement buffer. Forgetting lets the estimate track drift (thermal
//! throttling, firmware updates, grid carbon-intensity changes); a guarded
//! trigger publishes refreshed coefficients to the sampler only when enough
//! evidence of mis-calibration has accumulated, which prevents oscillation
//! from reacting to noise.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;

use crate::config_space::Configuration;
use crate::error::{Error, Result};

/// Regressor dimension: `[mega-mops, mega-flops]`.
pub const COEF_DIM: usize = 2;

/// One measured deployment appended to the calibration buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub query_id: u64,
    pub config: Configuration,
    /// `[mop_mega, flop_mega]` actually executed.
    pub x: [f64; 2],
    pub latency_ms: f64,
    pub carbon_g: f64,
}

impl MeasurementRecord {
    pub fn validate(&self) -> Result<()> {
        if self.x.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Parameter("operation counts must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Tunables for one recursive estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibratorConfig {
    /// Forgetting factor; the sanctioned operating range is (0.95, 0.99).
    /// Exactly 1.0 is also accepted as the degenerate no-forgetting mode,
    /// which reproduces ordinary recursive least squares.
    pub lambda: f64,
    /// Initial covariance is `p0_scale * I`: large, to encode ignorance.
    pub p0_scale: f64,
    /// Minimum buffered measurements before recalibration may trigger.
    pub n_min: usize,
    /// Window for the recent mean absolute relative error.
    pub mae_window: usize,
    /// Relative-error threshold of the trigger.
    pub eps_mae: f64,
}

impl Default for CalibratorConfig {
    fn default() -> Self {
        CalibratorConfig {
            lambda: 0.98,
            p0_scale: 1e6,
            n_min: 200,
            mae_window: 50,
            eps_mae: 0.05,
        }
    }
}

impl CalibratorConfig {
    pub fn validate(&self) -> Result<()> {
        let in_range = self.lambda > 0.95 && self.lambda < 0.99;
        let degenerate = self.lambda == 1.0;
        if !(in_range || degenerate) {
            return Err(Error::Parameter(format!(
                "forgetting factor {} outside (0.95, 0.99) and not the degenerate 1.0",
                self.lambda
            )));
        }
        if !(self.p0_scale > 0.0 && self.p0_scale.is_finite()) {
            return Err(Error::Parameter("initial covariance scale must be positive".into()));
        }
        if self.mae_window == 0 {
            return Err(Error::Parameter("MAE window must be nonzero".into()));
        }
        if !(self.eps_mae > 0.0) {
            return Err(Error::Parameter("MAE threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Recursive least-squares estimator with exponential forgetting for a
/// two-coefficient linear model `y = x · theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub theta: [f64; 2],
    /// Covariance, kept symmetric positive definite.
    pub p: [[f64; 2]; 2],
    pub lambda: f64,
    p0_scale: f64,
    /// How many times positive definiteness was lost and the covariance was
    /// reset. Nonzero values signal numerically hostile streams.
    pub reinit_count: u32,
    pub updates: u64,
}

impl Calibrator {
    pub fn new(config: &CalibratorConfig, theta0: [f64; 2]) -> Result<Self> {
        config.validate()?;
        Ok(Calibrator {
            theta: theta0,
            p: [[config.p0_scale, 0.0], [0.0, config.p0_scale]],
            lambda: config.lambda,
            p0_scale: config.p0_scale,
            reinit_count: 0,
            updates: 0,
        })
    }

    pub fn predict(&self, x: [f64; 2]) -> f64 {
        self.theta[0] * x[0] + self.theta[1] * x[1]
    }

    /// Gain, coefficient, and covariance recursion:
    ///
    /// ```text
    /// K = P x / (lambda + x' P x)
    /// theta += K (y - x' theta)
    /// P = (P - K x' P) / lambda,  then resymmetrized
    /// ```
    ///
    /// Losing positive definiteness resets P to its initial value and bumps
    /// `reinit_count`.
    pub fn update(&mut self, x: [f64; 2], y: f64) {
        let px = [
            self.p[0][0] * x[0] + self.p[0][1] * x[1],
            self.p[1][0] * x[0] + self.p[1][1] * x[1],
        ];
        let xpx = x[0] * px[0] + x[1] * px[1];
        let denom = self.lambda + xpx;
        let k = [px[0] / denom, px[1] / denom];
        let residual = y - self.predict(x);
        self.theta[0] += k[0] * residual;
        self.theta[1] += k[1] * residual;
        // x' P equals (P x)' by symmetry.
        for i in 0..2 {
            for j in 0..2 {
                self.p[i][j] = (self.p[i][j] - k[i] * px[j]) / self.lambda;
            }
        }
        let off = 0.5 * (self.p[0][1] + self.p[1][0]);
        self.p[0][1] = off;
        self.p[1][0] = off;
        if !self.p_is_positive_definite() {
            self.p = [[self.p0_scale, 0.0], [0.0, self.p0_scale]];
            self.reinit_count += 1;
        }
        self.updates += 1;
    }

    fn p_is_positive_definite(&self) -> bool {
        let det = self.p[0][0] * self.p[1][1] - self.p[0][1] * self.p[1][0];
        self.p[0][0] > 0.0
            && self.p[1][1] > 0.0
            && det > 0.0
            && self.p.iter().flatten().all(|v| v.is_finite())
    }

    pub fn p_trace(&self) -> f64 {
        self.p[0][0] + self.p[1][1]
    }

    /// Trace of the information matrix `P^{-1}`, which obeys the exact
    /// recursion `tr(I_t) = lambda * tr(I_{t-1}) + |x|^2`.
    pub fn information_trace(&self) -> f64 {
        let det = self.p[0][0] * self.p[1][1] - self.p[0][1] * self.p[1][0];
        (self.p[1][1] + self.p[0][0]) / det
    }
}

/// Ordinary (batch) least squares on the same two-regressor model, via the
/// normal equations. Returns `None` for singular designs.
pub fn batch_least_squares(xs: &[[f64; 2]], ys: &[f64]) -> Option<[f64; 2]> {
    debug_assert_eq!(xs.len(), ys.len());
    let mut xtx = [[0.0f64; 2]; 2];
    let mut xty = [0.0f64; 2];
    for (x, &y) in xs.iter().zip(ys) {
        for i in 0..2 {
            for j in 0..2 {
                xtx[i][j] += x[i] * x[j];
            }
            xty[i] += x[i] * y;
        }
    }
    let a = vec![xtx[0].to_vec(), xtx[1].to_vec()];
    let sol = crate::nn::solve_dense(&a, &xty)?;
    Some([sol[0], sol[1]])
}

/// Multiplicative facility-overhead correction for a carbon coefficient.
pub fn pue_correct(k0: f64, pue_t: f64, pue_ref: f64) -> f64 {
    debug_assert!(pue_ref > 0.0);
    k0 * pue_t / pue_ref
}

/// Power-usage-effectiveness source: a constant, or a step-interpolated
/// time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PueSource {
    pub pue_ref: f64,
    pub series: PueSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PueSeries {
    Constant(f64),
    /// `(timestamp, pue)` points sorted by timestamp; lookups take the last
    /// point at or before the query time.
    Series(Vec<(f64, f64)>),
}

impl PueSource {
    pub fn constant(pue: f64) -> Result<Self> {
        let src = PueSource { pue_ref: pue, series: PueSeries::Constant(pue) };
        src.validate()?;
        Ok(src)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pue_ref >= 1.0) {
            return Err(Error::Parameter("reference PUE must be at least 1".into()));
        }
        let ok = match &self.series {
            PueSeries::Constant(v) => *v >= 1.0,
            PueSeries::Series(points) => {
                !points.is_empty()
                    && points.iter().all(|(_, v)| *v >= 1.0)
                    && points.windows(2).all(|w| w[0].0 <= w[1].0)
            }
        };
        if !ok {
            return Err(Error::Parameter("PUE values must be at least 1 and sorted".into()));
        }
        Ok(())
    }

    pub fn value_at(&self, t: f64) -> f64 {
        match &self.series {
            PueSeries::Constant(v) => *v,
            PueSeries::Series(points) => {
                let mut current = points[0].1;
                for (ts, v) in points {
                    if *ts <= t {
                        current = *v;
                    } else {
                        break;
                    }
                }
                current
            }
        }
    }

    /// Parse a `timestamp,pue` CSV (comment lines start with `#`).
    pub fn from_csv(path: &Path, pue_ref: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("timestamp") {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| {
                    Error::parse(path, format!("bad PUE row at line {}", lineno + 1))
                })
            };
            let ts = parse(parts.next())?;
            let pue = parse(parts.next())?;
            points.push((ts, pue));
        }
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite timestamps"));
        let src = PueSource { pue_ref, series: PueSeries::Series(points) };
        src.validate()?;
        Ok(src)
    }
}

/// One published snapshot of the coefficient trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub t: u64,
    pub latency_theta: [f64; 2],
    pub carbon_theta: [f64; 2],
    pub latency_p_trace: f64,
    pub mae_recent: f64,
    pub published: bool,
}

/// The full calibration loop: shared buffer, two estimators, published
/// coefficient snapshots, and the guarded trigger.
#[derive(Debug, Clone)]
pub struct CalibrationLoop {
    pub config: CalibratorConfig,
    pub latency: Calibrator,
    pub carbon: Calibrator,
    pub buffer: Vec<MeasurementRecord>,
    /// Coefficients the sampler currently uses; only refreshed when the
    /// trigger fires.
    pub published_latency: [f64; 2],
    pub published_carbon: [f64; 2],
    recent_rel_err: VecDeque<f64>,
    pub history: Vec<HistoryPoint>,
}

impl CalibrationLoop {
    pub fn new(
        config: CalibratorConfig,
        latency0: [f64; 2],
        carbon0: [f64; 2],
    ) -> Result<Self> {
        Ok(CalibrationLoop {
            latency: Calibrator::new(&config, latency0)?,
            carbon: Calibrator::new(&config, carbon0)?,
            config,
            buffer: Vec::new(),
            published_latency: latency0,
            published_carbon: carbon0,
            recent_rel_err: VecDeque::new(),
            history: Vec::new(),
        })
    }

    /// Mean absolute relative latency error of the *published* coefficients
    /// over the recent window; this is what the trigger watches.
    pub fn mae_recent(&self) -> f64 {
        if self.recent_rel_err.is_empty() {
            return 0.0;
        }
        self.recent_rel_err.iter().sum::<f64>() / self.recent_rel_err.len() as f64
    }

    /// Both trigger conditions: enough buffered evidence, and recent
    /// relative error above threshold.
    pub fn should_calibrate(&self) -> bool {
        self.buffer.len() > self.config.n_min && self.mae_recent() > self.config.eps_mae
    }

    /// Ingest one measurement: update both estimators, track prediction
    /// error of the published coefficients, and publish refreshed
    /// coefficients if the trigger fires. Returns whether publication
    /// happened.
    pub fn observe(&mut self, record: MeasurementRecord) -> Result<bool> {
        record.validate()?;
        let predicted = self.published_latency[0] * record.x[0]
            + self.published_latency[1] * record.x[1];
        let rel = (predicted - record.latency_ms).abs() / record.latency_ms.abs().max(1e-9);
        if self.recent_rel_err.len() == self.config.mae_window {
            self.recent_rel_err.pop_front();
        }
        self.recent_rel_err.push_back(rel);
        self.latency.update(record.x, record.latency_ms);
        self.carbon.update(record.x, record.carbon_g);
        self.buffer.push(record);
        let publish = self.should_calibrate();
        if publish {
            self.published_latency = self.latency.theta;
            self.published_carbon = self.carbon.theta;
            self.recent_rel_err.clear();
        }
        self.history.push(HistoryPoint {
            t: self.latency.updates,
            latency_theta: self.latency.theta,
            carbon_theta: self.carbon.theta,
            latency_p_trace: self.latency.p_trace(),
            mae_recent: self.mae_recent(),
            published: publish,
        });
        Ok(publish)
    }
}

/// Theoretical ceiling for the Monte Carlo estimation error at step `t`:
/// `sigma^2 (lambda^t * trace_p0 + d * b_x / (1 - lambda))`, where `b_x`
/// bounds the squared magnitude of each regressor component.
pub fn mse_bound(sigma: f64, lambda: f64, t: u64, trace_p0: f64, d: f64, b_x: f64) -> f64 {
    debug_assert!(lambda < 1.0);
    sigma * sigma * (lambda.powi(t as i32) * trace_p0 + d * b_x / (1.0 - lambda))
}

/// Check a measured mean-squared-error trajectory against the bound at
/// every provided checkpoint.
pub fn mse_bound_check(
    trajectory: &[(u64, f64)],
    sigma: f64,
    lambda: f64,
    trace_p0: f64,
    d: f64,
    b_x: f64,
) -> bool {
    trajectory
        .iter()
        .all(|&(t, mse)| mse <= mse_bound(sigma, lambda, t, trace_p0, d, b_x))
}
