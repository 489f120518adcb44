//! Latent space and decoder.
//!
//! The sampler never walks the discrete lattice directly; it walks a smooth
//! latent space `R^n` (default `n = 16`) whose prior is standard normal and
//! whose iterates are kept inside a norm ball of radius `3 * sqrt(n)`. A
//! decoder maps latents onto the continuous hull of the configuration space:
//! two affine layers with a tanh between them, then a per-dimension tanh
//! squash onto `[lo, hi]`, so decoded points are always strictly inside the
//! hull and the map stays differentiable everywhere.
//!
//! `invert` recovers a latent for a given hull point by gradient descent on
//! the hull-normalized residual; decoder fitting (`train_decoder`) drives
//! that residual below a coverage tolerance on a grid of hull targets, so
//! every operating region stays reachable from the prior's basin.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config_space::{FeasibleSpaceSpec, SoftConfiguration};
use crate::error::{Error, Result};
use crate::nn::{self, Affine};

pub type LatentVector = Vec<f64>;

pub const DECODER_FORMAT_VERSION: u32 = 1;

/// Default latent dimension.
pub const LATENT_DIM: usize = 16;

/// Ball radius for the default latent dimension: `3 * sqrt(n)`.
pub fn default_manifold_radius(latent_dim: usize) -> f64 {
    3.0 * (latent_dim as f64).sqrt()
}

/// Draw `z ~ N(0, I)`.
pub fn sample_prior(latent_dim: usize, rng: &mut impl Rng) -> LatentVector {
    (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Project a latent onto the norm ball of the given radius: interior points
/// pass through untouched, exterior points are rescaled onto the sphere.
pub fn project_to_manifold(z: &mut [f64], radius: f64) -> Result<()> {
    if radius <= 0.0 {
        return Err(Error::Parameter("manifold radius must be positive".into()));
    }
    let norm = nn::dot(z, z).sqrt();
    if !norm.is_finite() {
        return Err(Error::Diagnostic("project_to_manifold: non-finite latent".into()));
    }
    if norm > radius {
        let s = radius / norm;
        for v in z {
            *v *= s;
        }
    }
    Ok(())
}

/// Decoder from latent space onto the continuous hull.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderModel {
    pub format_version: u32,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Per-output `[lo, hi]` hull bounds the squash maps onto.
    pub hull: Vec<(f64, f64)>,
    pub l1: Affine,
    pub l2: Affine,
}

/// Forward-pass activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub hidden: Vec<f64>,
    /// Pre-squash outputs.
    pub y: Vec<f64>,
    pub omega: SoftConfiguration,
}

impl DecoderModel {
    pub fn out_dim(&self) -> usize {
        self.hull.len()
    }

    pub fn decode(&self, z: &[f64]) -> SoftConfiguration {
        self.decode_state(z).omega
    }

    pub fn decode_state(&self, z: &[f64]) -> DecodeState {
        debug_assert_eq!(z.len(), self.latent_dim);
        let mut hidden = vec![0.0; self.hidden_dim];
        self.l1.forward(z, &mut hidden);
        nn::tanh_inplace(&mut hidden);
        let mut y = vec![0.0; self.out_dim()];
        self.l2.forward(&hidden, &mut y);
        let omega = SoftConfiguration::new(
            y.iter()
                .zip(&self.hull)
                .map(|(&yi, &(lo, hi))| {
                    let mid = 0.5 * (lo + hi);
                    let half = 0.5 * (hi - lo);
                    mid + half * yi.tanh()
                })
                .collect(),
        );
        DecodeState { hidden, y, omega }
    }

    /// Pull a gradient on the decoded configuration back to the latent:
    /// `g_z = J^T g_omega`.
    pub fn backward(&self, state: &DecodeState, g_omega: &[f64], g_z: &mut [f64]) {
        debug_assert_eq!(g_omega.len(), self.out_dim());
        let mut g_y: Vec<f64> = g_omega
            .iter()
            .zip(&state.y)
            .zip(&self.hull)
            .map(|((&g, &yi), &(lo, hi))| {
                let half = 0.5 * (hi - lo);
                let t = yi.tanh();
                g * half * (1.0 - t * t)
            })
            .collect();
        let mut g_hidden = vec![0.0; self.hidden_dim];
        self.l2.backward_input(&g_y, &mut g_hidden);
        nn::tanh_backward_inplace(&state.hidden, &mut g_hidden);
        self.l1.backward_input(&g_hidden, g_z);
        // Keep the borrow checker quiet about the temporary.
        g_y.clear();
    }

    /// Full Jacobian `d omega / d z`, row per output dimension.
    pub fn jacobian(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let state = self.decode_state(z);
        let mut rows = Vec::with_capacity(self.out_dim());
        let mut g_omega = vec![0.0; self.out_dim()];
        for d in 0..self.out_dim() {
            g_omega.fill(0.0);
            g_omega[d] = 1.0;
            let mut g_z = vec![0.0; self.latent_dim];
            self.backward(&state, &g_omega, &mut g_z);
            rows.push(g_z);
        }
        rows
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("decoder serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, space: &FeasibleSpaceSpec) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ModelMissing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: DecoderModel =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if model.format_version != DECODER_FORMAT_VERSION {
            return Err(Error::ModelFormat {
                path: path.to_path_buf(),
                message: format!(
                    "format version {} (supported: {})",
                    model.format_version, DECODER_FORMAT_VERSION
                ),
            });
        }
        let hull: Vec<(f64, f64)> = space.dimensions.iter().map(|d| d.hull()).collect();
        if model.hull != hull {
            return Err(Error::ModelFormat {
                path: path.to_path_buf(),
                message: "decoder hull does not match the configuration space".into(),
            });
        }
        if model.l1.in_dim != model.latent_dim
            || model.l1.out_dim != model.hidden_dim
            || model.l2.in_dim != model.hidden_dim
            || model.l2.out_dim != model.hull.len()
        {
            return Err(Error::ModelFormat {
                path: path.to_path_buf(),
                message: "inconsistent layer dimensions".into(),
            });
        }
        Ok(model)
    }
}

/// Result of a latent inversion.
#[derive(Debug, Clone)]
pub struct InvertOutcome {
    pub z: LatentVector,
    /// Hull-normalized L2 residual of `decode(z)` against the target.
    pub residual: f64,
}

/// Analytic warm start for inversion: peel the squash and both layers with
/// least-norm solves (`W W^T` systems), clamping into the invertible band of
/// each tanh. Gradient descent from this point dodges the local minima that
/// cold starts occasionally hit.
pub fn warm_start_target(decoder: &DecoderModel, target: &SoftConfiguration) -> LatentVector {
    let n_out = decoder.out_dim();
    let hid = decoder.hidden_dim;
    // Desired pre-squash outputs.
    let y_star: Vec<f64> = target
        .values
        .iter()
        .zip(&decoder.hull)
        .map(|(&t, &(lo, hi))| {
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            let u = ((t - mid) / half).clamp(-0.995, 0.995);
            u.atanh()
        })
        .collect();
    // Least-norm hidden activation: h = W2^T (W2 W2^T + eps I)^{-1} (y* - b2).
    let mut gram = vec![vec![0.0; n_out]; n_out];
    for i in 0..n_out {
        for j in 0..n_out {
            let ri = &decoder.l2.w[i * hid..(i + 1) * hid];
            let rj = &decoder.l2.w[j * hid..(j + 1) * hid];
            gram[i][j] = nn::dot(ri, rj) + if i == j { 1e-9 } else { 0.0 };
        }
    }
    let rhs: Vec<f64> = y_star.iter().zip(&decoder.l2.b).map(|(y, b)| y - b).collect();
    let alpha = match nn::solve_dense(&gram, &rhs) {
        Some(a) => a,
        None => return vec![0.0; decoder.latent_dim],
    };
    let mut h_star = vec![0.0; hid];
    for (i, &a) in alpha.iter().enumerate() {
        for (hj, w) in h_star.iter_mut().zip(&decoder.l2.w[i * hid..(i + 1) * hid]) {
            *hj += a * w;
        }
    }
    // Pre-activation of the hidden layer, then a transpose-as-pseudo-inverse
    // hop back to the latent (the seeded first layer is near-orthonormal).
    let mut z = vec![0.0; decoder.latent_dim];
    for (j, h) in h_star.iter().enumerate() {
        let a = (h.clamp(-0.97, 0.97)).atanh() - decoder.l1.b[j];
        for (zi, w) in z.iter_mut().zip(&decoder.l1.w[j * decoder.latent_dim..(j + 1) * decoder.latent_dim])
        {
            *zi += a * w;
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return vec![0.0; decoder.latent_dim];
    }
    z
}

fn normalized_residual(
    decoder: &DecoderModel,
    widths: &[f64],
    z: &[f64],
    target: &[f64],
) -> (f64, DecodeState) {
    let state = decoder.decode_state(z);
    let r2: f64 = state
        .omega
        .values
        .iter()
        .zip(target)
        .zip(widths)
        .map(|((&o, &t), &w)| {
            let e = (o - t) / w;
            e * e
        })
        .sum();
    (r2, state)
}

/// Recover a latent whose decode approximates `target` (a point in or near
/// the hull). Runs exactly `iterations` gradient steps on the normalized
/// squared residual, each with step-halving if the proposed step fails to
/// improve. `z0` seeds the search (the hull midpoint's preimage `0` works
/// well).
pub fn invert(
    decoder: &DecoderModel,
    space: &FeasibleSpaceSpec,
    target: &SoftConfiguration,
    z0: &[f64],
    iterations: u32,
    step: f64,
) -> Result<InvertOutcome> {
    if target.values.len() != decoder.out_dim() {
        return Err(Error::DimensionMismatch {
            expected: decoder.out_dim(),
            got: target.values.len(),
        });
    }
    if step <= 0.0 {
        return Err(Error::Parameter("invert: step must be positive".into()));
    }
    let widths: Vec<f64> = space.dimensions.iter().map(|d| d.width()).collect();
    let mut z = z0.to_vec();
    let (mut r2, mut state) = normalized_residual(decoder, &widths, &z, &target.values);
    for _ in 0..iterations {
        // Gradient of the normalized squared residual through the decoder.
        let g_omega: Vec<f64> = state
            .omega
            .values
            .iter()
            .zip(&target.values)
            .zip(&widths)
            .map(|((&o, &t), &w)| 2.0 * (o - t) / (w * w))
            .collect();
        let mut g_z = vec![0.0; decoder.latent_dim];
        decoder.backward(&state, &g_omega, &mut g_z);
        let mut lr = step;
        let mut accepted = false;
        for _ in 0..24 {
            let cand: Vec<f64> = z.iter().zip(&g_z).map(|(zi, gi)| zi - lr * gi).collect();
            let (cand_r2, cand_state) = normalized_residual(decoder, &widths, &cand, &target.values);
            if cand_r2 <= r2 {
                z = cand;
                r2 = cand_r2;
                state = cand_state;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break; // Converged to machine precision for this landscape.
        }
    }
    Ok(InvertOutcome { z, residual: r2.sqrt() })
}

/// Decoder fitting hyperparameters. Defaults are tuned for the canonical
/// three-dimensional space.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderTrainParams {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// First-layer weight scale (see `Affine::seeded`).
    pub w1_scale: f64,
    /// Target standard deviation of each pre-squash output under the prior;
    /// the init is moment-matched to this by rescaling second-layer rows.
    pub output_std: Vec<f64>,
    /// Pre-squash output bias under the prior. Positive values start prior
    /// draws on the high (conservative) side of the corresponding dimension.
    pub output_bias: Vec<f64>,
    /// Quantile levels per dimension for the coverage target grid.
    pub coverage_levels: Vec<f64>,
    pub coverage_tolerance: f64,
    pub epochs: u32,
    /// Inversion refinements per target per epoch.
    pub invert_steps: u32,
    pub invert_lr: f64,
    pub param_lr: f64,
}

impl Default for DecoderTrainParams {
    fn default() -> Self {
        DecoderTrainParams {
            latent_dim: LATENT_DIM,
            hidden_dim: 32,
            w1_scale: 1.0,
            output_std: vec![1.05, 0.45, 0.5],
            output_bias: vec![-0.55, -0.26, 0.8],
            coverage_levels: vec![0.08, 0.25, 0.5, 0.75, 0.92],
            coverage_tolerance: 1e-3,
            epochs: 600,
            invert_steps: 12,
            invert_lr: 4.0,
            param_lr: 0.02,
        }
    }
}

/// Per-dimension quantile grid of hull points used as coverage targets.
pub fn coverage_targets(space: &FeasibleSpaceSpec, levels: &[f64]) -> Vec<SoftConfiguration> {
    let mut targets: Vec<SoftConfiguration> = vec![SoftConfiguration::new(vec![])];
    for dim in &space.dimensions {
        let (lo, hi) = dim.hull();
        let mut next = Vec::with_capacity(targets.len() * levels.len());
        for t in &targets {
            for &q in levels {
                let mut v = t.values.clone();
                v.push(lo + q * (hi - lo));
                next.push(SoftConfiguration::new(v));
            }
        }
        targets = next;
    }
    targets
}

/// Best inversion residual for `target`, trying a warm start plus a few
/// seeded jitters of it; returns the winning latent too.
pub fn best_inversion(
    decoder: &DecoderModel,
    space: &FeasibleSpaceSpec,
    target: &SoftConfiguration,
    iterations: u32,
    step: f64,
    restarts: u32,
    seed: u64,
) -> Result<InvertOutcome> {
    use rand::SeedableRng;
    let warm = warm_start_target(decoder, target);
    let mut best = invert(decoder, space, target, &warm, iterations, step)?;
    if restarts > 0 && best.residual >= 1e-9 {
        let origin = invert(decoder, space, target, &vec![0.0; decoder.latent_dim], iterations, step)?;
        if origin.residual < best.residual {
            best = origin;
        }
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        for attempt in 0..restarts {
            if best.residual < 1e-9 {
                break;
            }
            let spread = 0.4 + 0.3 * attempt as f64;
            let jittered: Vec<f64> = warm
                .iter()
                .map(|v| v + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let cand = invert(decoder, space, target, &jittered, iterations, step)?;
            if cand.residual < best.residual {
                best = cand;
            }
        }
    }
    Ok(best)
}

/// Fit a decoder for `space`: moment-matched init, then coverage training
/// that alternates latent refinement and parameter steps until every grid
/// target is reachable within the tolerance. Fails if the final audit still
/// finds an unreachable target.
pub fn train_decoder(
    space: &FeasibleSpaceSpec,
    params: &DecoderTrainParams,
    seed: u64,
) -> Result<DecoderModel> {
    let (model, worst) = train_decoder_unchecked(space, params, seed)?;
    if worst >= params.coverage_tolerance {
        return Err(Error::Certification(format!(
            "decoder coverage residual {worst:.3e} exceeds tolerance {:.1e}",
            params.coverage_tolerance
        )));
    }
    Ok(model)
}

/// As `train_decoder`, but reports the audit residual instead of enforcing
/// it, for callers that surface coverage diagnostics themselves.
pub fn train_decoder_unchecked(
    space: &FeasibleSpaceSpec,
    params: &DecoderTrainParams,
    seed: u64,
) -> Result<(DecoderModel, f64)> {
    use rand::SeedableRng;
    let n_out = space.n_dims();
    if params.output_std.len() != n_out || params.output_bias.len() != n_out {
        return Err(Error::Parameter(format!(
            "decoder params expect {n_out} output scales/biases"
        )));
    }
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let l1 = Affine::seeded(params.latent_dim, params.hidden_dim, params.w1_scale, &mut rng);
    let mut l2 = Affine::seeded(params.hidden_dim, n_out, 1.0, &mut rng);
    // Orthogonalize the output rows so the decoded dimensions can be steered
    // independently; correlated rows make joint hull corners unreachable.
    for i in 0..n_out {
        for j in 0..i {
            let (head, tail) = l2.w.split_at_mut(i * params.hidden_dim);
            let prev = &head[j * params.hidden_dim..(j + 1) * params.hidden_dim];
            let row = &mut tail[..params.hidden_dim];
            let f = nn::dot(row, prev) / nn::dot(prev, prev).max(1e-12);
            for (r, p) in row.iter_mut().zip(prev) {
                *r -= f * p;
            }
        }
    }
    let hull: Vec<(f64, f64)> = space.dimensions.iter().map(|d| d.hull()).collect();

    // Moment-match the pre-squash outputs against the prior: rescale each
    // second-layer row to the requested std, then set its bias.
    let mut probe_hidden = vec![0.0; params.hidden_dim];
    let n_probe = 512;
    let mut sums = vec![0.0; n_out];
    let mut sq_sums = vec![0.0; n_out];
    let mut y = vec![0.0; n_out];
    let probes: Vec<LatentVector> =
        (0..n_probe).map(|_| sample_prior(params.latent_dim, &mut rng)).collect();
    for z in &probes {
        l1.forward(z, &mut probe_hidden);
        nn::tanh_inplace(&mut probe_hidden);
        l2.forward(&probe_hidden, &mut y);
        for d in 0..n_out {
            sums[d] += y[d];
            sq_sums[d] += y[d] * y[d];
        }
    }
    for d in 0..n_out {
        let mean = sums[d] / n_probe as f64;
        let var = (sq_sums[d] / n_probe as f64 - mean * mean).max(1e-12);
        let gain = params.output_std[d] / var.sqrt();
        for w in l2.w[d * params.hidden_dim..(d + 1) * params.hidden_dim].iter_mut() {
            *w *= gain;
        }
        l2.b[d] = params.output_bias[d] - mean * gain;
    }

    let mut model = DecoderModel {
        format_version: DECODER_FORMAT_VERSION,
        latent_dim: params.latent_dim,
        hidden_dim: params.hidden_dim,
        hull,
        l1,
        l2,
    };

    // Coverage targets: per-dimension quantiles of the hull, full grid.
    let targets = coverage_targets(space, &params.coverage_levels);

    let widths: Vec<f64> = space.dimensions.iter().map(|d| d.width()).collect();
    let mut bank: Vec<LatentVector> =
        targets.iter().map(|t| warm_start_target(&model, t)).collect();
    let mut g_z = vec![0.0; params.latent_dim];
    for epoch in 0..params.epochs {
        let mut worst: f64 = 0.0;
        let mut weight_sum = 0.0;
        let mut g1 = model.l1.grad_buffer();
        let mut g2 = model.l2.grad_buffer();
        for (idx, (z, target)) in bank.iter_mut().zip(&targets).enumerate() {
            let mut refined =
                invert(&model, space, target, z, params.invert_steps, params.invert_lr)?;
            if refined.residual > 5.0 * params.coverage_tolerance {
                // Stuck in a poor basin; multi-start from fresh warm starts
                // (parameters have moved since the bank was seeded).
                let retry = best_inversion(
                    &model,
                    space,
                    target,
                    params.invert_steps * 4,
                    params.invert_lr,
                    4,
                    seed ^ (idx as u64) << 16 ^ epoch as u64,
                )?;
                if retry.residual < refined.residual {
                    refined = retry;
                }
            }
            *z = refined.z;
            worst = worst.max(refined.residual);

            // Parameter gradient of the residual at the refined latent,
            // weighted toward the hardest targets so parameter capacity goes
            // where inversion alone cannot reach.
            let weight = refined.residual * refined.residual + 1e-12;
            weight_sum += weight;
            let state = model.decode_state(z);
            let g_omega: Vec<f64> = state
                .omega
                .values
                .iter()
                .zip(&target.values)
                .zip(&widths)
                .map(|((&o, &t), &w)| weight * 2.0 * (o - t) / (w * w))
                .collect();
            let mut g_y: Vec<f64> = g_omega
                .iter()
                .zip(&state.y)
                .zip(&model.hull)
                .map(|((&g, &yi), &(lo, hi))| {
                    let half = 0.5 * (hi - lo);
                    let th = yi.tanh();
                    g * half * (1.0 - th * th)
                })
                .collect();
            model.l2.backward_params(&state.hidden, &g_y, &mut g2);
            let mut g_hidden = vec![0.0; params.hidden_dim];
            model.l2.backward_input(&g_y, &mut g_hidden);
            nn::tanh_backward_inplace(&state.hidden, &mut g_hidden);
            model.l1.backward_params(z, &g_hidden, &mut g1);
            model.l1.backward_input(&g_hidden, &mut g_z);
            g_y.clear();
        }
        if worst < params.coverage_tolerance {
            return Ok((model, worst));
        }
        let scale = 1.0 / weight_sum.max(1e-12);
        g1.scale(scale);
        g2.scale(scale);
        model.l1.apply_step(&g1, params.param_lr);
        model.l2.apply_step(&g2, params.param_lr);
    }

    // Final coverage audit after the last parameter step.
    let worst = coverage_residual(&model, space, &targets, params, seed)?;
    Ok((model, worst))
}

/// Worst inversion residual across `targets` (multi-start per target).
pub fn coverage_residual(
    model: &DecoderModel,
    space: &FeasibleSpaceSpec,
    targets: &[SoftConfiguration],
    params: &DecoderTrainParams,
    seed: u64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (idx, target) in targets.iter().enumerate() {
        let out = best_inversion(
            model,
            space,
            target,
            params.invert_steps * 8,
            params.invert_lr,
            4,
            seed ^ 0x5eed ^ ((idx as u64) << 24),
        )?;
        worst = worst.max(out.residual);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn space() -> FeasibleSpaceSpec {
        FeasibleSpaceSpec::default_space()
    }

    fn small_decoder(seed: u64) -> DecoderModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let sp = space();
        let l1 = Affine::seeded(4, 8, 1.0, &mut rng);
        let l2 = Affine::seeded(8, 3, 0.8, &mut rng);
        DecoderModel {
            format_version: DECODER_FORMAT_VERSION,
            latent_dim: 4,
            hidden_dim: 8,
            hull: sp.dimensions.iter().map(|d| d.hull()).collect(),
            l1,
            l2,
        }
    }

    #[test]
    fn prior_is_reproducible_for_a_fixed_seed() {
        let a = sample_prior(16, &mut ChaCha12Rng::seed_from_u64(42));
        let b = sample_prior(16, &mut ChaCha12Rng::seed_from_u64(42));
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_decoder_lands_on_hull_midpoints() {
        let sp = space();
        let model = DecoderModel {
            format_version: DECODER_FORMAT_VERSION,
            latent_dim: 4,
            hidden_dim: 8,
            hull: sp.dimensions.iter().map(|d| d.hull()).collect(),
            l1: Affine::zeros(4, 8),
            l2: Affine::zeros(8, 3),
        };
        let omega = model.decode(&vec![3.0, -1.0, 0.5, 0.0]);
        assert_eq!(omega.values, vec![5000.5, 544.0, 6.0]);
    }

    #[test]
    fn decoded_points_stay_strictly_inside_the_hull() {
        let model = small_decoder(3);
        let sp = space();
        for mag in [0.1, 1.0, 10.0, 1e3] {
            let z = vec![mag, -mag, mag, mag];
            let omega = model.decode(&z);
            assert!(sp.in_hull(&omega).unwrap());
            for (v, dim) in omega.values.iter().zip(&sp.dimensions) {
                let (lo, hi) = dim.hull();
                assert!(*v > lo && *v < hi);
            }
        }
    }

    #[test]
    fn backward_matches_finite_difference_jacobian() {
        let model = small_decoder(11);
        let z = vec![0.3, -0.8, 1.2, 0.05];
        let jac = model.jacobian(&z);
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += h;
            let op = model.decode(&zp);
            let mut zm = z.clone();
            zm[i] -= h;
            let om = model.decode(&zm);
            for d in 0..3 {
                let fd = (op.values[d] - om.values[d]) / (2.0 * h);
                let an = jac[d][i];
                let denom = an.abs().max(1e-8);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "dim {d} coord {i}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn manifold_projection_rescales_only_outside_points() {
        let radius = default_manifold_radius(4);
        let mut inside = vec![1.0, 1.0, -1.0, 0.5];
        let orig = inside.clone();
        project_to_manifold(&mut inside, radius).unwrap();
        assert_eq!(inside, orig);

        // A latent at twice the radius comes back with its norm halved.
        let mut outside = vec![2.0 * radius, 0.0, 0.0, 0.0];
        project_to_manifold(&mut outside, radius).unwrap();
        let norm = nn::dot(&outside, &outside).sqrt();
        assert!((norm - radius).abs() < 1e-12);

        let mut bad = vec![f64::INFINITY, 0.0, 0.0, 0.0];
        assert!(project_to_manifold(&mut bad, radius).is_err());
    }

    #[test]
    fn invert_with_one_iteration_takes_exactly_one_step() {
        let model = small_decoder(5);
        let sp = space();
        let target = SoftConfiguration::new(vec![2000.0, 512.0, 6.0]);
        let z0 = vec![0.0; 4];
        let widths: Vec<f64> = sp.dimensions.iter().map(|d| d.width()).collect();

        // Reference: one explicit gradient step at the same base learning
        // rate (the mild landscape here never triggers step-halving).
        let (_, state) = normalized_residual(&model, &widths, &z0, &target.values);
        let g_omega: Vec<f64> = state
            .omega
            .values
            .iter()
            .zip(&target.values)
            .zip(&widths)
            .map(|((&o, &t), &w)| 2.0 * (o - t) / (w * w))
            .collect();
        let mut g_z = vec![0.0; 4];
        model.backward(&state, &g_omega, &mut g_z);
        let want: Vec<f64> = z0.iter().zip(&g_z).map(|(zi, gi)| zi - 0.5 * gi).collect();

        let got = invert(&model, &sp, &target, &z0, 1, 0.5).unwrap();
        for (a, b) in got.z.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trained_decoder_covers_the_hull_grid() {
        let sp = space();
        let params = DecoderTrainParams::default();
        let model = train_decoder(&sp, &params, 17).unwrap();
        // Cold-start inversion should be sharp across the serving region
        // (high-bit, any retrieval depth or block size).
        for (i, target) in [
            vec![700.0, 256.0, 7.7],
            vec![220.0, 128.0, 7.0],
            vec![6000.0, 384.0, 7.7],
            vec![150.0, 128.0, 7.7],
        ]
        .into_iter()
        .enumerate()
        {
            let soft = SoftConfiguration::new(target);
            let out = best_inversion(&model, &sp, &soft, 220, 4.0, 6, 7 + i as u64).unwrap();
            assert!(
                out.residual < 2e-3,
                "target {:?} residual {}",
                soft.values,
                out.residual
            );
        }
        // The far low-bit corner lies many prior widths out; the training
        // audit reaches it by warm-starting across epochs, while a cold
        // search only lands nearby.
        let corner = SoftConfiguration::new(vec![5000.0, 960.0, 4.5]);
        let out = best_inversion(&model, &sp, &corner, 220, 4.0, 6, 3).unwrap();
        assert!(out.residual < 5e-2, "corner residual {}", out.residual);
        // Hull-edge values sit at the squash rails and are only reachable
        // asymptotically; what matters is that an edge target inverts to a
        // point whose lattice projection lands on the edge.
        let edge = SoftConfiguration::new(vec![700.0, 256.0, 8.0]);
        let out = best_inversion(&model, &sp, &edge, 220, 4.0, 6, 11).unwrap();
        let projected = sp.project(&model.decode(&out.z)).unwrap();
        assert_eq!(projected.values[2], 8);
        assert!((projected.values[0] - 700).abs() <= 1);
        assert_eq!(projected.values[1], 256);
    }

    #[test]
    fn save_load_round_trip_checks_version_and_space() {
        let model = small_decoder(9);
        let dir = std::env::temp_dir().join(format!("verdin-dec-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("decoder.json");
        model.save(&path).unwrap();
        let loaded = DecoderModel::load(&path, &space()).unwrap();
        assert_eq!(loaded, model);

        let missing = DecoderModel::load(&dir.join("absent.json"), &space()).unwrap_err();
        assert!(matches!(missing, Error::ModelMissing(_)));

        let mut stale = model.clone();
        stale.format_version = 99;
        stale.save(&path).unwrap();
        let err = DecoderModel::load(&path, &space()).unwrap_err();
        assert!(matches!(err, Error::ModelFormat { .. }));
        std::fs::remove_dir_all(&dir).ok();
    }
}
