//! Differentiable operation-count performance model.
//!
//! Query processing cost is summarized by per-branch operation counters
//! (postings scanned, blocks skipped, scoring flops, heap updates). Each
//! counter has a closed form in the configuration: `c = a0 + a1*k +
//! a2*k/block + a3*k*pen(bits)` where `pen(bits) = (8 - bits) / 4` captures
//! the extra work (or savings) of reduced-precision scoring. Memory-op and
//! flop totals are nonnegative weighted sums of branch counters, and latency
//! and carbon are linear in those totals.
//!
//! The optimizer needs gradients through counts, so each branch also carries
//! a soft exceedance `f = sigmoid((c - mu) / tau)` fitted on a training grid
//! (`mu` = median counter; `tau` starts at half the interquartile range and
//! widens to the observed range so gradients stay level across it). The
//! differentiable estimate un-squashes `f` back onto the observed counter
//! span, which keeps values calibrated while the temperature controls how
//! sharp the response is; an annealing schedule tightens `tau` after an
//! exploration phase. Branches whose soft estimate fails a Pearson
//! correlation check against raw counts fall back to the raw value with a
//! detached gradient, so a poorly-behaved branch can never steer the
//! sampler, only inform reporting.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config_space::{FeasibleSpaceSpec, SoftConfiguration};
use crate::error::{Error, Result};

pub const PEIR_FORMAT_VERSION: u32 = 1;

/// Minimum per-branch Pearson correlation for the soft estimate to be
/// trusted with gradients.
pub const CERTIFICATION_THRESHOLD: f64 = 0.98;

/// Logistic sigmoid, clamped to avoid overflow in the tails.
pub fn sigmoid(x: f64) -> f64 {
    if x > 60.0 {
        1.0
    } else if x < -60.0 {
        0.0
    } else {
        1.0 / (1.0 + (-x).exp())
    }
}

/// Reduced-precision work factor: 0 at 8-bit scoring, 1 at 4-bit.
pub fn quant_penalty(bits: f64) -> f64 {
    (8.0 - bits) / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchKind {
    Memory,
    Flop,
}

/// Closed-form counter for one instrumented branch:
/// `count = base + per_k*k + per_k_over_block*k/block + per_k_penalty*k*pen(bits)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BranchSpec {
    pub name: String,
    pub kind: BranchKind,
    pub base: f64,
    pub per_k: f64,
    pub per_k_over_block: f64,
    pub per_k_penalty: f64,
}

impl BranchSpec {
    pub fn count(&self, omega: &SoftConfiguration) -> f64 {
        let k = omega.k();
        let b = omega.block_size();
        let pen = quant_penalty(omega.quant_bits());
        self.base + self.per_k * k + self.per_k_over_block * k / b + self.per_k_penalty * k * pen
    }

    /// Gradient of the count with respect to `(k, block, bits)`.
    pub fn grad(&self, omega: &SoftConfiguration) -> [f64; 3] {
        let k = omega.k();
        let b = omega.block_size();
        let pen = quant_penalty(omega.quant_bits());
        [
            self.per_k + self.per_k_over_block / b + self.per_k_penalty * pen,
            -self.per_k_over_block * k / (b * b),
            self.per_k_penalty * k * (-0.25),
        ]
    }
}

/// The instrumented branches of the scoring loop, shared with the workload
/// simulator so estimates and telemetry agree on structure.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CounterFamily {
    pub branches: Vec<BranchSpec>,
}

impl CounterFamily {
    /// Branch constants for the block-max scoring loop this model ships
    /// with. Memory traffic is dominated by postings reads (per candidate
    /// document) plus block-skip metadata (per block); flops by similarity
    /// accumulation and heap maintenance. 4-bit scoring reads fewer posting
    /// bytes but pays a dequantization flop penalty.
    pub fn standard() -> Self {
        CounterFamily {
            branches: vec![
                BranchSpec {
                    name: "postings_read".into(),
                    kind: BranchKind::Memory,
                    base: 0.0,
                    per_k: 5005.0666666666666,
                    per_k_over_block: 0.0,
                    per_k_penalty: -1000.0,
                },
                BranchSpec {
                    name: "block_skip".into(),
                    kind: BranchKind::Memory,
                    base: 0.0,
                    per_k: 0.0,
                    per_k_over_block: 52036.266666666666,
                    per_k_penalty: 0.0,
                },
                BranchSpec {
                    name: "score_accumulate".into(),
                    kind: BranchKind::Flop,
                    base: 0.0,
                    per_k: 900.0,
                    per_k_over_block: 137600.0,
                    per_k_penalty: 150.0,
                },
                BranchSpec {
                    name: "heap_update".into(),
                    kind: BranchKind::Flop,
                    base: 0.0,
                    per_k: 125.0,
                    per_k_over_block: 0.0,
                    per_k_penalty: 0.0,
                },
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn counters(&self, omega: &SoftConfiguration) -> CounterVector {
        CounterVector(self.branches.iter().map(|b| b.count(omega)).collect())
    }
}

/// Raw per-branch counts for one configuration (and, in telemetry, one
/// query).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterVector(pub Vec<f64>);

/// Temperature annealing: hold at `tau0` for `explore_steps`, then decay
/// geometrically.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub explore_steps: u32,
    pub decay: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        // The hold phase covers the sampler's whole step budget. Tightening
        // the squash mid-walk is doubly harmful: readings of a *fixed*
        // configuration shift while the band narrows (stalling the relative
        // convergence test), and once the band has passed a configuration
        // the cost terms go flat, leaving the quality term free to drag the
        // walk toward expensive configurations. The fitted temperature
        // already keeps soft readings value-calibrated, so serving runs
        // simply stay in the exploration phase; decaying schedules remain
        // available through configuration.
        TemperatureSchedule { tau0: 1.0, explore_steps: 50, decay: 0.45 }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0) {
            return Err(Error::Parameter("temperature tau0 must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Parameter("temperature decay must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Multiplier applied to every branch's base temperature at step `t`.
    pub fn factor_at(&self, t: u32) -> f64 {
        if t < self.explore_steps {
            self.tau0
        } else {
            self.tau0 * self.decay.powi((t - self.explore_steps) as i32)
        }
    }
}

/// Which side of an ordered work pair the monotonicity hinge penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonotonicityForm {
    /// Penalize a soft count that *decreases* when work increases.
    ForwardHinge,
    /// Historical variant with the operands swapped; kept selectable for
    /// comparisons.
    ReverseHinge,
}

/// Hinge penalty for a pair `(f_at, f_more_work)` where the second operand
/// comes from a configuration doing at least as much work on this branch.
pub fn mono_loss(f_at: f64, f_more_work: f64, form: MonotonicityForm) -> f64 {
    match form {
        MonotonicityForm::ForwardHinge => (f_at - f_more_work).max(0.0),
        MonotonicityForm::ReverseHinge => (f_more_work - f_at).max(0.0),
    }
}

/// Per-Mega-op cost coefficients for one deployment target.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CostCoefficients {
    /// Milliseconds per million memory ops.
    pub ms_per_mega_mop: f64,
    /// Milliseconds per million flops.
    pub ms_per_mega_flop: f64,
    /// Grams CO2e per million memory ops.
    pub g_per_mega_mop: f64,
    /// Grams CO2e per million flops.
    pub g_per_mega_flop: f64,
}

impl CostCoefficients {
    /// Memory-bandwidth-lean Xeon-class profile.
    pub fn intel() -> Self {
        CostCoefficients {
            ms_per_mega_mop: 2.1971795,
            ms_per_mega_flop: 0.1760682,
            g_per_mega_mop: 5.0e-4,
            g_per_mega_flop: 1.5e-4,
        }
    }

    /// EPYC-class profile: slightly slower memory path, markedly costlier
    /// scalar flops for this workload's instruction mix.
    pub fn amd() -> Self {
        CostCoefficients {
            ms_per_mega_mop: 2.2664312,
            ms_per_mega_flop: 0.7785613,
            g_per_mega_mop: 5.0e-4,
            g_per_mega_flop: 1.5e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.ms_per_mega_mop,
            self.ms_per_mega_flop,
            self.g_per_mega_mop,
            self.g_per_mega_flop,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("cost coefficients must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for CostCoefficients {
    fn default() -> Self {
        CostCoefficients::intel()
    }
}

/// Fitted soft-count statistics for one branch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BranchCalibration {
    /// Median counter over the training grid.
    pub mu: f64,
    /// Base temperature: half-IQR widened to the observed counter range.
    pub tau: f64,
    /// Smallest counter observed on the grid.
    pub lo: f64,
    /// Largest counter observed on the grid.
    pub hi: f64,
    /// Correlation of the soft estimate with raw counts over the grid.
    pub pearson: f64,
    pub certified: bool,
}

/// Differentiable operation totals with gradients in `(k, block, bits)`.
#[derive(Debug, Clone, Copy)]
pub struct SoftOps {
    pub mop_mega: f64,
    pub flop_mega: f64,
    pub grad_mop: [f64; 3],
    pub grad_flop: [f64; 3],
}

/// Exact operation totals (reporting / telemetry path), in Mega-ops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpsEstimate {
    pub mop_mega: f64,
    pub flop_mega: f64,
}

/// The full fitted performance model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OpCountModel {
    pub format_version: u32,
    pub family: CounterFamily,
    pub calibration: Vec<BranchCalibration>,
    /// Nonnegative aggregation weights, one per branch; memory branches feed
    /// the mop total, flop branches the flop total.
    pub weights: Vec<f64>,
    pub schedule: TemperatureSchedule,
    pub cost: CostCoefficients,
}

/// Pearson correlation coefficient of two equal-length samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.is_empty() {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Linear-interpolation quantile of an unsorted sample (the common "type 7"
/// estimator).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Training grid for fitting soft counts: a space-covering design whose
/// points are spread so that every branch's counter histogram is roughly
/// uniform (ramping `k` at a fixed block for the per-document branches, and
/// ramping `k/block` directly for the block-sensitive ones), plus the hull
/// corners so spans match the full space.
pub fn default_fit_grid(space: &FeasibleSpaceSpec) -> Result<Vec<SoftConfiguration>> {
    if space.n_dims() != 3 {
        return Err(Error::Config(
            "default fit grid expects the canonical (k, block, bits) space".into(),
        ));
    }
    let (k_lo, k_hi) = space.dimensions[0].hull();
    let (b_lo, b_hi) = space.dimensions[1].hull();
    let (q_lo, q_hi) = space.dimensions[2].hull();
    let clamp_block = |b: f64| -> f64 {
        let m = 64.0;
        ((b / m).round() * m).clamp(b_lo, b_hi)
    };
    let bits_for = |j: usize| if j % 3 == 0 { q_lo } else { q_hi };

    let mut grid = Vec::new();
    // Ramps are arcsine-warped: extra density at the ends pins down each
    // counter's observed extremes, which set both the un-squash span and
    // the fitted temperature.
    let warp = |t: f64| (std::f64::consts::FRAC_PI_2 * t).sin().powi(2);
    // Stratum 1: k ramp at mid block; covers the per-document branches.
    let k_min = (k_lo + 249.0).min(k_hi);
    let n1 = 32;
    for j in 0..n1 {
        let t = warp(j as f64 / (n1 - 1) as f64);
        let k = k_min + t * (k_hi - k_min);
        grid.push(SoftConfiguration::new(vec![k, clamp_block(0.5 * (b_lo + b_hi)), bits_for(j)]));
    }
    // Stratum 2: one ramp in the k/block ratio across its whole feasible
    // range, with k decorrelated via a golden-ratio shuffle inside each
    // ratio's feasible band. This keeps the block-sensitive counters'
    // histograms flat.
    let n2 = 80;
    let s_lo = 0.4;
    let s_hi = k_hi / b_lo;
    for j in 0..n2 {
        let t = warp(j as f64 / (n2 - 1) as f64);
        let s = s_lo + t * (s_hi - s_lo);
        let feas_lo = (b_lo * s).max(k_min).min(k_hi);
        let feas_hi = (b_hi * s).clamp(feas_lo, k_hi);
        let u = (0.5 + j as f64 * 0.6180339887498949).fract();
        let k = feas_lo + u * (feas_hi - feas_lo);
        let b = clamp_block(k / s);
        grid.push(SoftConfiguration::new(vec![k, b, bits_for(j + 1)]));
    }
    // Hull corners and center.
    for (k, b, q) in [
        (k_lo, b_lo, q_lo),
        (k_lo, b_hi, q_hi),
        (k_hi, b_lo, q_hi),
        (k_hi, b_hi, q_lo),
        (0.5 * (k_lo + k_hi), clamp_block(0.5 * (b_lo + b_hi)), 0.5 * (q_lo + q_hi)),
    ] {
        grid.push(SoftConfiguration::new(vec![k, b, q]));
    }
    Ok(grid)
}

impl OpCountModel {
    /// Fit soft-count statistics for `family` on a training grid and certify
    /// each branch.
    pub fn fit(
        family: CounterFamily,
        schedule: TemperatureSchedule,
        cost: CostCoefficients,
        grid: &[SoftConfiguration],
    ) -> Result<Self> {
        schedule.validate()?;
        cost.validate()?;
        if family.is_empty() {
            return Err(Error::Config("counter family has no branches".into()));
        }
        if grid.len() < 8 {
            return Err(Error::Config("fit grid needs at least 8 points".into()));
        }
        let mut calibration = Vec::with_capacity(family.len());
        for branch in &family.branches {
            let counts: Vec<f64> = grid.iter().map(|w| branch.count(w)).collect();
            let mu = quantile(&counts, 0.5);
            let iqr = quantile(&counts, 0.75) - quantile(&counts, 0.25);
            let lo = counts.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let hi = if hi > lo { hi } else { lo + 1.0 };
            // The temperature starts at half the interquartile range, then
            // widens until the whole observed count range sits inside the
            // squash's near-linear band. That keeps the slope of every
            // branch within a few percent of its grid-wide mean, so descent
            // steps are equally informative at the extremes of the range as
            // at its center; correlation is certified after the widening.
            let tau = (0.5 * iqr).max(hi - lo);
            let soft: Vec<f64> =
                counts.iter().map(|&c| lo + (hi - lo) * sigmoid((c - mu) / tau)).collect();
            let r = pearson(&counts, &soft);
            calibration.push(BranchCalibration {
                mu,
                tau,
                lo,
                hi,
                pearson: r,
                certified: r > CERTIFICATION_THRESHOLD,
            });
        }
        let weights = vec![1.0; family.len()];
        Ok(OpCountModel {
            format_version: PEIR_FORMAT_VERSION,
            family,
            calibration,
            weights,
            schedule,
            cost,
        })
    }

    /// Convenience: standard family fitted on the default grid.
    pub fn standard(space: &FeasibleSpaceSpec, cost: CostCoefficients) -> Result<Self> {
        let grid = default_fit_grid(space)?;
        OpCountModel::fit(CounterFamily::standard(), TemperatureSchedule::default(), cost, &grid)
    }

    pub fn counters(&self, omega: &SoftConfiguration) -> CounterVector {
        self.family.counters(omega)
    }

    /// Exact totals from raw counters.
    pub fn ops_of_counters(&self, counters: &CounterVector) -> OpsEstimate {
        let mut mop = 0.0;
        let mut flop = 0.0;
        for ((branch, &c), &w) in self.family.branches.iter().zip(&counters.0).zip(&self.weights) {
            match branch.kind {
                BranchKind::Memory => mop += w * c,
                BranchKind::Flop => flop += w * c,
            }
        }
        OpsEstimate { mop_mega: mop / 1e6, flop_mega: flop / 1e6 }
    }

    /// Exact totals for a configuration (reporting path).
    pub fn ops_of(&self, omega: &SoftConfiguration) -> OpsEstimate {
        self.ops_of_counters(&self.counters(omega))
    }

    /// Differentiable totals at sampler step `t`. Certified branches
    /// contribute their un-squashed soft count and its gradient; uncertified
    /// branches contribute the raw count with a detached (zero) gradient.
    pub fn soft_ops(&self, omega: &SoftConfiguration, t: u32) -> SoftOps {
        let factor = self.schedule.factor_at(t);
        let mut out = SoftOps {
            mop_mega: 0.0,
            flop_mega: 0.0,
            grad_mop: [0.0; 3],
            grad_flop: [0.0; 3],
        };
        for ((branch, calib), &w) in
            self.family.branches.iter().zip(&self.calibration).zip(&self.weights)
        {
            let c = branch.count(omega);
            let (value, slope) = if calib.certified {
                let tau = calib.tau * factor;
                let f = sigmoid((c - calib.mu) / tau);
                let span = calib.hi - calib.lo;
                (calib.lo + span * f, span * f * (1.0 - f) / tau)
            } else {
                (c, 0.0)
            };
            let g = branch.grad(omega);
            let (total, grad) = match branch.kind {
                BranchKind::Memory => (&mut out.mop_mega, &mut out.grad_mop),
                BranchKind::Flop => (&mut out.flop_mega, &mut out.grad_flop),
            };
            *total += w * value / 1e6;
            for d in 0..3 {
                grad[d] += w * slope * g[d] / 1e6;
            }
        }
        out
    }

    pub fn latency_ms(&self, ops: OpsEstimate) -> f64 {
        self.cost.ms_per_mega_mop * ops.mop_mega + self.cost.ms_per_mega_flop * ops.flop_mega
    }

    pub fn carbon_g(&self, ops: OpsEstimate) -> f64 {
        self.cost.g_per_mega_mop * ops.mop_mega + self.cost.g_per_mega_flop * ops.flop_mega
    }

    /// Round aggregation weights to multiples of `delta` (deployment
    /// quantization of the model itself).
    pub fn quantize_weights(&mut self, delta: f64) -> Result<()> {
        if !(delta > 0.0) {
            return Err(Error::Parameter("quantization delta must be positive".into()));
        }
        for w in &mut self.weights {
            *w = (*w / delta).round() * delta;
        }
        Ok(())
    }

    /// Worst-case carbon estimate shift from quantizing aggregation weights
    /// with step `delta`: each weight moves at most `delta / 2`, so the
    /// error is bounded by `delta/2 * (g_mop * |c_mem|_1 + g_flop * |c_flop|_1)`.
    pub fn quantization_carbon_bound(&self, counters: &CounterVector, delta: f64) -> f64 {
        let mut l1_mem = 0.0;
        let mut l1_flop = 0.0;
        for (branch, &c) in self.family.branches.iter().zip(&counters.0) {
            match branch.kind {
                BranchKind::Memory => l1_mem += c.abs(),
                BranchKind::Flop => l1_flop += c.abs(),
            }
        }
        0.5 * delta * (self.cost.g_per_mega_mop * l1_mem + self.cost.g_per_mega_flop * l1_flop)
            / 1e6
    }

    /// All branches certified?
    pub fn fully_certified(&self) -> bool {
        self.calibration.iter().all(|c| c.certified)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("model serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ModelMissing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: OpCountModel =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if model.format_version != PEIR_FORMAT_VERSION {
            return Err(Error::ModelFormat {
                path: path.to_path_buf(),
                message: format!(
                    "format version {} (supported: {})",
                    model.format_version, PEIR_FORMAT_VERSION
                ),
            });
        }
        if model.calibration.len() != model.family.len()
            || model.weights.len() != model.family.len()
        {
            return Err(Error::ModelFormat {
                path: path.to_path_buf(),
                message: "calibration/weight arity does not match the counter family".into(),
            });
        }
        Ok(model)
    }
}
