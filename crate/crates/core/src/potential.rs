//! The scalar objective the sampler descends.
//!
//! For a configuration `w` and a query-specific effectiveness surrogate `Q`,
//! the potential is
//!
//! ```text
//! U(w) = alpha * s_c * Carbon(w) + beta * s_l * Latency(w) - gamma * s_r * Q(w)
//! ```
//!
//! with `(s_c, s_l, s_r)` fixed term scales that bring the three terms to a
//! common magnitude (identity when unset; deployments usually scale carbon
//! and effectiveness to latency-commensurate units so one step size serves
//! all three). Carbon and latency come from the differentiable
//! operation-count path, so `U` carries an exact gradient in `(k, block,
//! bits)`; with `alpha = beta = 0` the potential reduces to `-gamma * s_r *
//! Q`, which pins the sign convention: lower `U` is always better.

use serde::{Deserialize, Serialize};

use crate::config_space::SoftConfiguration;
use crate::diff_peir::OpCountModel;
use crate::error::{Error, Result};

/// Relative emphasis of the three objective terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for PotentialWeights {
    fn default() -> Self {
        PotentialWeights { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

impl PotentialWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter(
                "potential weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-term normalization constants (configuration data, not learned).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TermScales {
    pub carbon: f64,
    pub latency: f64,
    pub quality: f64,
}

impl Default for TermScales {
    fn default() -> Self {
        TermScales { carbon: 1.0, latency: 1.0, quality: 1.0 }
    }
}

impl TermScales {
    /// Scales that express every term in milliseconds-of-median-latency
    /// units for the standard workload: carbon and effectiveness are mapped
    /// onto the same O(10) range as latency, so the published step sizes
    /// traverse the hull in a handful of steps.
    pub fn latency_commensurate() -> Self {
        TermScales { carbon: 4200.0, latency: 1.0, quality: 13.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.carbon, self.latency, self.quality].iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Parameter("term scales must be finite and positive".into()));
        }
        Ok(())
    }
}

/// Differentiable effectiveness surrogate for one query.
pub trait QualitySurrogate {
    /// Expected effectiveness (e.g. recall@10) of `omega` for this query.
    fn quality(&self, omega: &SoftConfiguration) -> f64;
    /// Gradient of the effectiveness in `(k, block, bits)`.
    fn quality_grad(&self, omega: &SoftConfiguration) -> [f64; 3];
}

/// Evaluated potential with its gradient and term breakdown.
#[derive(Debug, Clone, Copy)]
pub struct Potential {
    pub value: f64,
    /// Gradient in `(k, block, bits)`.
    pub grad: [f64; 3],
    pub carbon_g: f64,
    pub latency_ms: f64,
    pub quality: f64,
}

/// Evaluate `U` and its configuration gradient at sampler step `t` (the step
/// index selects the soft-count temperature).
pub fn green_potential(
    model: &OpCountModel,
    weights: &PotentialWeights,
    scales: &TermScales,
    surrogate: &dyn QualitySurrogate,
    omega: &SoftConfiguration,
    t: u32,
) -> Potential {
    let ops = model.soft_ops(omega, t);
    let carbon = model.cost.g_per_mega_mop * ops.mop_mega + model.cost.g_per_mega_flop * ops.flop_mega;
    let latency =
        model.cost.ms_per_mega_mop * ops.mop_mega + model.cost.ms_per_mega_flop * ops.flop_mega;
    let quality = surrogate.quality(omega);
    let q_grad = surrogate.quality_grad(omega);

    let ca = weights.alpha * scales.carbon;
    let cb = weights.beta * scales.latency;
    let cg = weights.gamma * scales.quality;
    let value = ca * carbon + cb * latency - cg * quality;
    let mut grad = [0.0; 3];
    for d in 0..3 {
        let d_carbon = model.cost.g_per_mega_mop * ops.grad_mop[d]
            + model.cost.g_per_mega_flop * ops.grad_flop[d];
        let d_latency = model.cost.ms_per_mega_mop * ops.grad_mop[d]
            + model.cost.ms_per_mega_flop * ops.grad_flop[d];
        grad[d] = ca * d_carbon + cb * d_latency - cg * q_grad[d];
    }
    Potential { value, grad, carbon_g: carbon, latency_ms: latency, quality }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config_space::FeasibleSpaceSpec;
    use crate::diff_peir::CostCoefficients;

    /// Smooth synthetic surrogate: saturating in k, mildly penalizing wide
    /// blocks and low bit widths.
    struct MockSurrogate;

    impl QualitySurrogate for MockSurrogate {
        fn quality(&self, omega: &SoftConfiguration) -> f64 {
            let k = omega.k();
            let b = omega.block_size();
            let q = omega.quant_bits();
            (1.0 - (-k / 400.0).exp()) * (1.0 - 1e-4 * (b - 64.0)) * (0.9 + 0.0125 * q)
        }

        fn quality_grad(&self, omega: &SoftConfiguration) -> [f64; 3] {
            let k = omega.k();
            let b = omega.block_size();
            let q = omega.quant_bits();
            let fk = 1.0 - (-k / 400.0).exp();
            let gb = 1.0 - 1e-4 * (b - 64.0);
            let hq = 0.9 + 0.0125 * q;
            [
                (-k / 400.0).exp() / 400.0 * gb * hq,
                fk * (-1e-4) * hq,
                fk * gb * 0.0125,
            ]
        }
    }

    fn model() -> OpCountModel {
        let space = FeasibleSpaceSpec::default_space();
        OpCountModel::standard(&space, CostCoefficients::intel()).unwrap()
    }

    #[test]
    fn zero_cost_weights_reduce_to_scaled_quality() {
        let m = model();
        let weights = PotentialWeights { alpha: 0.0, beta: 0.0, gamma: 2.5 };
        let scales = TermScales::default();
        let omega = SoftConfiguration::new(vec![900.0, 256.0, 8.0]);
        let p = green_potential(&m, &weights, &scales, &MockSurrogate, &omega, 0);
        assert!((p.value - (-2.5 * MockSurrogate.quality(&omega))).abs() < 1e-12);
        // And the quality partial is exactly -gamma * s_r.
        let g = MockSurrogate.quality_grad(&omega);
        for d in 0..3 {
            assert!((p.grad[d] - (-2.5 * g[d])).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let m = model();
        let weights = PotentialWeights { alpha: 0.8, beta: 1.1, gamma: 0.9 };
        let scales = TermScales { carbon: 4200.0, latency: 1.0, quality: 13.0 };
        let omega = SoftConfiguration::new(vec![1500.0, 320.0, 6.5]);
        let p = green_potential(&m, &weights, &scales, &MockSurrogate, &omega, 2);
        let h = [1e-2, 1e-2, 1e-4];
        for d in 0..3 {
            let mut up = omega.clone();
            up.values[d] += h[d];
            let mut dn = omega.clone();
            dn.values[d] -= h[d];
            let fd = (green_potential(&m, &weights, &scales, &MockSurrogate, &up, 2).value
                - green_potential(&m, &weights, &scales, &MockSurrogate, &dn, 2).value)
                / (2.0 * h[d]);
            let denom = p.grad[d].abs().max(1e-9);
            assert!(
                ((fd - p.grad[d]) / denom).abs() < 1e-4,
                "dim {d}: fd {fd} analytic {}",
                p.grad[d]
            );
        }
    }

    #[test]
    fn cost_terms_push_toward_cheaper_configurations() {
        let m = model();
        let weights = PotentialWeights { alpha: 1.0, beta: 1.0, gamma: 0.0 };
        let scales = TermScales::latency_commensurate();
        let omega = SoftConfiguration::new(vec![2000.0, 256.0, 8.0]);
        let p = green_potential(&m, &weights, &scales, &MockSurrogate, &omega, 0);
        assert!(p.grad[0] > 0.0, "descending U must shrink k when quality is ignored");
        assert!(p.carbon_g > 0.0 && p.latency_ms > 0.0);
    }

    #[test]
    fn weights_and_scales_reject_bad_values() {
        assert!(PotentialWeights { alpha: -1.0, beta: 0.0, gamma: 0.0 }.validate().is_err());
        assert!(PotentialWeights::default().validate().is_ok());
        assert!(TermScales { carbon: 0.0, latency: 1.0, quality: 1.0 }.validate().is_err());
        assert!(TermScales::latency_commensurate().validate().is_ok());
    }
}
