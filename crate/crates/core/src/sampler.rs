//! Per-query configuration search: guided Langevin dynamics on the latent
//! manifold.
//!
//! The serving loop alternates a descent step on the scalarized cost
//! potential with an ascent step toward retrieval-guided similarity, plus
//! isotropic exploration noise, all inside the latent norm ball. A sliding
//! relative-improvement window grants early exit; a per-step validity check
//! rolls bad steps back while halving the guidance coefficient; the final
//! latent is decoded, snapped to the feasible lattice, and locally repaired
//! if the snap cost quality.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cache::ConfigCache;
use crate::calibration::{CalibrationLoop, MeasurementRecord};
use crate::config_space::{
    repair, Configuration, FeasibleSpaceSpec, RepairOutcome, SoftConfiguration,
};
use crate::diff_peir::{CounterFamily, OpCountModel};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceModel, GuidanceScratch};
use crate::latent::{project_to_manifold, sample_prior, DecoderModel, LatentVector};
use crate::potential::{green_potential, PotentialWeights, QualitySurrogate, TermScales};
use crate::workload::{observe, gen_queries, substream, HardwareProfile, Query, RecallSurrogate, WorkloadSpec};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Step coefficients and exit policy for one sampler run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerParams {
    /// Descent step on the cost potential.
    pub gamma1: f64,
    /// Ascent step on retrieval-guided similarity.
    pub gamma2: f64,
    /// Exploration noise scale (variance `2·gamma3` per coordinate).
    pub gamma3: f64,
    /// Hard step budget.
    pub n_max: u32,
    /// Sliding-window width for the relative-improvement exit test.
    pub window: usize,
    /// Relative-improvement threshold below which the run exits.
    pub eps_u: f64,
    /// Earliest step at which the exit test may fire.
    pub t_min: u32,
    /// Quality slack allowed during per-step validation, relative to the
    /// baseline configuration's quality.
    pub eps_recall: f64,
    /// Quality slack allowed for lattice snapping before repair kicks in.
    pub eps_proj: f64,
    /// Rollbacks tolerated before the run degrades to the baseline.
    pub max_rollbacks: u32,
    /// Neighbor moves the repair search may spend.
    pub repair_budget: u32,
    /// Latent ball radius as a multiple of `sqrt(latent_dim)`.
    pub manifold_radius_factor: f64,
    /// Disable to always run the full step budget.
    pub early_exit_enabled: bool,
    /// Master seed; each query derives its own noise stream from it.
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            gamma1: 2.0e-3,
            gamma2: 2.0e-3,
            gamma3: 1.0e-4,
            n_max: 50,
            window: 5,
            eps_u: 1.0e-3,
            t_min: 6,
            eps_recall: 0.25,
            eps_proj: 0.01,
            max_rollbacks: 8,
            repair_budget: 16,
            manifold_radius_factor: 3.0,
            early_exit_enabled: true,
            seed: 42,
        }
    }
}

impl SamplerParams {
    /// Strict check for user-supplied parameter files: every step
    /// coefficient must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("gamma3", self.gamma3)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        self.check_runtime()
    }

    /// Looser interior check: ablation variants intentionally zero one
    /// coefficient, so the run loop accepts non-negative values.
    fn check_runtime(&self) -> Result<()> {
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("gamma3", self.gamma3)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.n_max == 0 {
            return Err(Error::Parameter("n_max must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Parameter("window must be at least 1".into()));
        }
        if !(self.eps_u > 0.0 && self.eps_u.is_finite()) {
            return Err(Error::Parameter("eps_u must be positive".into()));
        }
        for (name, v) in [("eps_recall", self.eps_recall), ("eps_proj", self.eps_proj)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.manifold_radius_factor > 0.0 && self.manifold_radius_factor.is_finite()) {
            return Err(Error::Parameter("manifold_radius_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Why a run stopped stepping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    EarlyExit,
    MaxSteps,
    CacheHit,
}

impl ExitReason {
    pub fn label(&self) -> &'static str {
        match self {
            ExitReason::EarlyExit => "early-exit",
            ExitReason::MaxSteps => "max-steps",
            ExitReason::CacheHit => "cache-hit",
        }
    }
}

/// One row of the per-step trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: u32,
    pub z: LatentVector,
    pub u: f64,
    pub grad_u_norm: f64,
    pub grad_v_norm: f64,
    pub rollback: bool,
}

/// Full observability record for one optimize call.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerTrace {
    pub query_id: u64,
    pub steps: u32,
    pub rollbacks: u32,
    pub exit: ExitReason,
    /// Set when the deployed configuration could not be driven back above
    /// the quality floor and the baseline (or best effort) shipped instead.
    pub degraded: bool,
    pub repair: Option<RepairOutcome>,
    pub records: Vec<StepRecord>,
    /// Potential after each accepted or rolled-back step, index = step.
    pub u_history: Vec<f64>,
    pub final_config: Configuration,
    pub predicted_latency_ms: f64,
    pub predicted_carbon_g: f64,
    /// Surrogate quality of the deployed configuration.
    pub quality: f64,
    /// Guidance coefficient left after any halvings.
    pub gamma2_final: f64,
}

/// Everything immutable a run needs. The operation-count model is expected
/// to already carry deployment-quantized weights.
pub struct SamplerModels<'a> {
    pub space: &'a FeasibleSpaceSpec,
    pub decoder: &'a DecoderModel,
    pub op_model: &'a OpCountModel,
    pub guidance: Option<&'a GuidanceModel>,
    pub weights: PotentialWeights,
    pub scales: TermScales,
    pub baseline: Configuration,
}

/// One query as the sampler sees it.
pub struct QueryInput<'a> {
    pub id: u64,
    pub features: &'a [f64],
    pub surrogate: &'a (dyn QualitySurrogate + Sync),
}

/// Deployment side effects: measure the shipped configuration and feed the
/// online calibrator (which republishes coefficients when its trigger
/// fires). Appends must stay single-writer; batch runs deploy sequentially.
pub struct DeployHooks<'a> {
    pub calibration: &'a mut CalibrationLoop,
    pub measure: &'a mut dyn FnMut(u64, &Configuration) -> MeasurementRecord,
}

/// One iterate: descend the potential, ascend guidance, add exploration
/// noise, and project back onto the latent ball.
pub fn langevin_step(
    z: &[f64],
    grad_u: &[f64],
    grad_v: &[f64],
    gamma1: f64,
    gamma2: f64,
    gamma3: f64,
    noise: &[f64],
    radius: f64,
) -> Result<LatentVector> {
    if grad_u.iter().any(|g| !g.is_finite()) || grad_v.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diagnostic("langevin step: non-finite gradient".into()));
    }
    let noise_scale = (2.0 * gamma3).sqrt();
    let mut out: LatentVector = z
        .iter()
        .zip(grad_u)
        .zip(grad_v)
        .zip(noise)
        .map(|(((&zi, &gu), &gv), &xi)| zi - gamma1 * gu + gamma2 * gv + noise_scale * xi)
        .collect();
    project_to_manifold(&mut out, radius)?;
    Ok(out)
}

/// Sliding-window exit test on the potential history (index = step).
/// Requires `t >= t_min` and a full window; a zero reference value counts
/// as converged.
pub fn early_exit(u_history: &[f64], window: usize, eps_u: f64, t: u32, t_min: u32) -> bool {
    if t < t_min || u_history.len() <= window {
        return false;
    }
    let cur = *u_history.last().expect("nonempty history");
    let prev = u_history[u_history.len() - 1 - window];
    if prev == 0.0 {
        return true;
    }
    // The reference magnitude normalizes the drop; the potential itself may
    // be negative when the quality term dominates.
    (prev - cur) / prev.abs() < eps_u
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn soft_of(config: &Configuration) -> SoftConfiguration {
    SoftConfiguration::new(config.values.iter().map(|&v| v as f64).collect())
}

/// The full per-query pipeline: cache fast path, guided Langevin loop with
/// validation rollback, decode, lattice snap, quality repair, deployment,
/// and (through `deploy`) the calibration append + trigger check.
pub fn optimize(
    query: &QueryInput,
    params: &SamplerParams,
    models: &SamplerModels,
    cache: Option<&ConfigCache>,
    mut deploy: Option<DeployHooks>,
) -> Result<(Configuration, SamplerTrace)> {
    params.check_runtime()?;
    let space = models.space;
    if models.decoder.out_dim() != space.n_dims() || space.n_dims() != 3 {
        return Err(Error::Parameter(format!(
            "decoder emits {} dims for a {}-dim space (3 expected)",
            models.decoder.out_dim(),
            space.n_dims()
        )));
    }
    if !space.validate(&models.baseline)? {
        return Err(Error::Parameter("baseline configuration is infeasible".into()));
    }
    if let Some(g) = models.guidance {
        if g.feature_dim != query.features.len() {
            return Err(Error::Parameter(format!(
                "query has {} features, guidance expects {}",
                query.features.len(),
                g.feature_dim
            )));
        }
    }

    let baseline_q = query.surrogate.quality(&soft_of(&models.baseline));
    let quality_floor = baseline_q - params.eps_recall;

    let finalize = |config: Configuration,
                    trace: &mut SamplerTrace,
                    deploy: &mut Option<DeployHooks>|
     -> Result<Configuration> {
        let ops = models.op_model.ops_of(&soft_of(&config));
        trace.predicted_latency_ms = models.op_model.latency_ms(ops);
        trace.predicted_carbon_g = models.op_model.carbon_g(ops);
        trace.quality = query.surrogate.quality(&soft_of(&config));
        trace.final_config = config.clone();
        if let Some(hooks) = deploy.as_mut() {
            let record = (hooks.measure)(query.id, &config);
            hooks.calibration.observe(record)?;
        }
        Ok(config)
    };

    let mut trace = SamplerTrace {
        query_id: query.id,
        steps: 0,
        rollbacks: 0,
        exit: ExitReason::MaxSteps,
        degraded: false,
        repair: None,
        records: Vec::new(),
        u_history: Vec::new(),
        final_config: models.baseline.clone(),
        predicted_latency_ms: 0.0,
        predicted_carbon_g: 0.0,
        quality: 0.0,
        gamma2_final: params.gamma2,
    };

    // Fast path: nearest cached cluster, no sampling at all.
    if let (Some(cache), Some(guidance)) = (cache, models.guidance) {
        let u = guidance.query_encode(query.features);
        if let Some((_, config)) = cache.probe(&u) {
            trace.exit = ExitReason::CacheHit;
            let config = finalize(config.clone(), &mut trace, &mut deploy)?;
            return Ok((config, trace));
        }
    }

    let latent_dim = models.decoder.latent_dim;
    let radius = params.manifold_radius_factor * (latent_dim as f64).sqrt();
    let mut rng = substream(params.seed, query.id);
    let mut z = sample_prior(latent_dim, &mut rng);
    project_to_manifold(&mut z, radius)?;

    let mut scratch = models.guidance.map(GuidanceScratch::new);
    let mut grad_u_z = vec![0.0; latent_dim];
    let mut grad_v_z = vec![0.0; latent_dim];
    let mut noise = vec![0.0; latent_dim];

    let mut gamma2_current = params.gamma2;
    let mut state = models.decoder.decode_state(&z);
    let mut potential =
        green_potential(models.op_model, &models.weights, &models.scales, query.surrogate, &state.omega, 0);
    trace.u_history.push(potential.value);

    let mut t: u32 = 0;
    while t < params.n_max {
        models.decoder.backward(&state, &potential.grad, &mut grad_u_z);
        let grad_v_norm = match (models.guidance, scratch.as_mut()) {
            (Some(guidance), Some(scratch)) => {
                guidance.similarity_grad_z(query.features, &z, &mut grad_v_z, scratch);
                norm(&grad_v_z)
            }
            _ => {
                grad_v_z.fill(0.0);
                0.0
            }
        };
        let grad_u_norm = norm(&grad_u_z);
        for slot in noise.iter_mut() {
            *slot = rng.sample::<f64, _>(StandardNormal);
        }
        let z_new = langevin_step(
            &z,
            &grad_u_z,
            &grad_v_z,
            params.gamma1,
            gamma2_current,
            params.gamma3,
            &noise,
            radius,
        )?;
        let state_new = models.decoder.decode_state(&z_new);
        let potential_new = green_potential(
            models.op_model,
            &models.weights,
            &models.scales,
            query.surrogate,
            &state_new.omega,
            t + 1,
        );
        let valid = space.in_hull(&state_new.omega)?
            && potential_new.value.is_finite()
            && potential_new.quality >= quality_floor;

        t += 1;
        if valid {
            z = z_new;
            state = state_new;
            potential = potential_new;
            trace.u_history.push(potential.value);
            trace.records.push(StepRecord {
                t,
                z: z.clone(),
                u: potential.value,
                grad_u_norm,
                grad_v_norm,
                rollback: false,
            });
            // A rolled-back step repeats the previous potential and carries
            // no convergence information, so the exit test only runs after
            // accepted steps.
            if params.early_exit_enabled
                && early_exit(&trace.u_history, params.window, params.eps_u, t, params.t_min)
            {
                trace.exit = ExitReason::EarlyExit;
                break;
            }
        } else {
            trace.rollbacks += 1;
            gamma2_current *= 0.5;
            if trace.rollbacks > params.max_rollbacks {
                // Pathological run: ship the baseline and say so.
                trace.steps = t;
                trace.degraded = true;
                trace.exit = ExitReason::MaxSteps;
                trace.gamma2_final = gamma2_current;
                let config = finalize(models.baseline.clone(), &mut trace, &mut deploy)?;
                return Ok((config, trace));
            }
            trace.u_history.push(potential.value);
            trace.records.push(StepRecord {
                t,
                z: z.clone(),
                u: potential.value,
                grad_u_norm,
                grad_v_norm,
                rollback: true,
            });
        }
    }
    trace.steps = t;
    trace.gamma2_final = gamma2_current;

    let projected = space.project(&state.omega)?;
    let quality_of = |config: &Configuration| query.surrogate.quality(&soft_of(config));
    let (repaired, outcome) = repair(
        &projected,
        space,
        &quality_of,
        quality_floor,
        params.eps_proj,
        params.repair_budget,
    )?;
    trace.repair = Some(outcome);
    trace.degraded = quality_of(&repaired) < quality_floor - params.eps_proj - 1e-12;
    let config = finalize(repaired, &mut trace, &mut deploy)?;
    Ok((config, trace))
}

/// Sequential batch driver (deployment-free; calibrate afterwards if
/// needed, keeping the calibrator a single writer).
pub fn optimize_batch_seq(
    queries: &[QueryInput],
    params: &SamplerParams,
    models: &SamplerModels,
    cache: Option<&ConfigCache>,
) -> Result<Vec<(Configuration, SamplerTrace)>> {
    queries.iter().map(|q| optimize(q, params, models, cache, None)).collect()
}

/// Data-parallel batch driver; per-query streams make the output identical
/// to the sequential one.
#[cfg(feature = "parallel")]
pub fn optimize_batch(
    queries: &[QueryInput],
    params: &SamplerParams,
    models: &SamplerModels,
    cache: Option<&ConfigCache>,
) -> Result<Vec<(Configuration, SamplerTrace)>> {
    queries.par_iter().map(|q| optimize(q, params, models, cache, None)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn optimize_batch(
    queries: &[QueryInput],
    params: &SamplerParams,
    models: &SamplerModels,
    cache: Option<&ConfigCache>,
) -> Result<Vec<(Configuration, SamplerTrace)>> {
    optimize_batch_seq(queries, params, models, cache)
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// Which step coefficient an ablation run zeroes out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    Gamma1Zero,
    Gamma2Zero,
}

impl AblationVariant {
    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::Gamma1Zero => "gamma1-zero",
            AblationVariant::Gamma2Zero => "gamma2-zero",
        }
    }

    pub fn apply(&self, base: &SamplerParams) -> SamplerParams {
        let mut params = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::Gamma1Zero => params.gamma1 = 0.0,
            AblationVariant::Gamma2Zero => params.gamma2 = 0.0,
        }
        params
    }
}

/// Per-query measured outcome of one variant. Latency and carbon include
/// the sampler's own per-step serving overhead, so variants that take more
/// steps pay for them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRecord {
    pub query_id: u64,
    pub latency_ms: f64,
    pub mop_mega: f64,
    pub recall: f64,
    pub carbon_g: f64,
    pub steps: f64,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub n: usize,
    pub mean_latency_ms: f64,
    pub mean_mop_mega: f64,
    pub mean_recall: f64,
    pub mean_carbon_g: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub variant: &'static str,
    pub records: Vec<AblationRecord>,
}

impl AblationRun {
    pub fn summarize(&self) -> AblationSummary {
        let n = self.records.len().max(1) as f64;
        let sum = |f: fn(&AblationRecord) -> f64| self.records.iter().map(f).sum::<f64>() / n;
        AblationSummary {
            n: self.records.len(),
            mean_latency_ms: sum(|r| r.latency_ms),
            mean_mop_mega: sum(|r| r.mop_mega),
            mean_recall: sum(|r| r.recall),
            mean_carbon_g: sum(|r| r.carbon_g),
            mean_steps: sum(|r| r.steps),
        }
    }
}

/// Shared fixtures for an ablation study. `measurement_salt` seeds the
/// per-query measurement-noise streams, which are identical across variants
/// so per-query comparisons pair cleanly.
pub struct AblationContext<'a> {
    pub spec: &'a WorkloadSpec,
    pub family: &'a CounterFamily,
    pub profile: &'a HardwareProfile,
    pub models: &'a SamplerModels<'a>,
    pub params: SamplerParams,
    pub measurement_salt: u64,
    pub step_overhead_ms: f64,
    pub step_overhead_g: f64,
}

fn ablate_one(
    variant_params: &SamplerParams,
    query: &Query,
    ctx: &AblationContext,
) -> Result<AblationRecord> {
    let surrogate = RecallSurrogate { spec: ctx.spec, query };
    let input = QueryInput { id: query.id, features: &query.features, surrogate: &surrogate };
    let (config, trace) = optimize(&input, variant_params, ctx.models, None, None)?;
    let mut noise_rng = substream(ctx.measurement_salt, query.id);
    let obs = observe(ctx.spec, ctx.family, ctx.profile, query, &config, &mut noise_rng);
    let steps = trace.steps as f64;
    Ok(AblationRecord {
        query_id: query.id,
        latency_ms: obs.latency_ms + steps * ctx.step_overhead_ms,
        mop_mega: obs.mop_mega,
        recall: obs.recall,
        carbon_g: obs.carbon_g + steps * ctx.step_overhead_g,
        steps,
        degraded: trace.degraded,
    })
}

/// Run one variant over a fixed query set.
pub fn ablate_variant(
    variant: AblationVariant,
    queries: &[Query],
    ctx: &AblationContext,
) -> Result<AblationRun> {
    let params = variant.apply(&ctx.params);
    #[cfg(feature = "parallel")]
    let records: Result<Vec<AblationRecord>> =
        queries.par_iter().map(|q| ablate_one(&params, q, ctx)).collect();
    #[cfg(not(feature = "parallel"))]
    let records: Result<Vec<AblationRecord>> =
        queries.iter().map(|q| ablate_one(&params, q, ctx)).collect();
    Ok(AblationRun { variant: variant.label(), records: records? })
}

/// Paired comparison between two variants run on the same queries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationComparison {
    pub base: &'static str,
    pub other: &'static str,
    pub base_summary: AblationSummary,
    pub other_summary: AblationSummary,
    /// Paired t statistic on per-query latency (other − base).
    pub latency_t_stat: f64,
    pub latency_p_value: f64,
}

pub fn ablation_compare(base: &AblationRun, other: &AblationRun) -> Result<AblationComparison> {
    if base.records.len() != other.records.len()
        || base
            .records
            .iter()
            .zip(&other.records)
            .any(|(a, b)| a.query_id != b.query_id)
    {
        return Err(Error::Parameter("ablation runs cover different query sets".into()));
    }
    let a: Vec<f64> = other.records.iter().map(|r| r.latency_ms).collect();
    let b: Vec<f64> = base.records.iter().map(|r| r.latency_ms).collect();
    let (t_stat, p) = paired_t_test(&a, &b)?;
    Ok(AblationComparison {
        base: base.variant,
        other: other.variant,
        base_summary: base.summarize(),
        other_summary: other.summarize(),
        latency_t_stat: t_stat,
        latency_p_value: p,
    })
}

/// Complementary error function (Abramowitz–Stegun 7.1.26 rational fit,
/// absolute error below 1.5e-7).
fn erfc(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-x * x).exp();
    if sign < 0.0 {
        1.0 + erf
    } else {
        1.0 - erf
    }
}

/// Two-tailed paired t test with a normal tail approximation (adequate for
/// the sample sizes used here). Returns `(t statistic, p value)`. Identical
/// samples give `(0, 1)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Parameter("paired test needs two equal-length samples".into()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 { (0.0, 1.0) } else { (f64::INFINITY, 0.0) });
    }
    let t_stat = mean / (var / n).sqrt();
    let p = erfc(t_stat.abs() / std::f64::consts::SQRT_2);
    Ok((t_stat, p))
}

// ---------------------------------------------------------------------------
// Coupled-chain contraction check
// ---------------------------------------------------------------------------

/// Empirical check of the coupled-chain contraction property on a quadratic
/// potential with known curvature bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    /// Largest realized per-step distance ratio across the run.
    pub max_factor: f64,
    /// The claimed per-step ceiling `1 − m·γ3/2 + γ2·L_V`.
    pub factor_bound: f64,
    /// Mean coupled distance over the final quarter of the run.
    pub plateau: f64,
    /// Twice the claimed long-run plateau `3·γ2·L_V·D / m`.
    pub plateau_bound: f64,
    /// Guidance-gradient Lipschitz constant actually used (input estimate
    /// sharpened by ratios realized along the trajectories).
    pub lipschitz_v: f64,
}

/// Run two chains from different starts under shared noise, identical
/// query, quadratic potential gradient `H·z` (diagonal `hessian`), and the
/// guidance field; report realized contraction factors against the claimed
/// bound. `m` is the smallest Hessian eigenvalue, `sup_grad_v` a bound on
/// the guidance gradient norm, `lipschitz_v` an a-priori estimate of its
/// Lipschitz constant.
#[allow(clippy::too_many_arguments)]
pub fn contraction_check(
    guidance: &GuidanceModel,
    features: &[f64],
    hessian: &[f64],
    m: f64,
    gamma1: f64,
    gamma2: f64,
    gamma3: f64,
    sup_grad_v: f64,
    lipschitz_v: f64,
    steps: u32,
    radius: f64,
    seed: u64,
) -> Result<ContractionReport> {
    let dim = hessian.len();
    if guidance.latent_dim != dim {
        return Err(Error::Parameter("hessian dimension must match the latent".into()));
    }
    let mut rng = substream(seed, 0xC0);
    let mut z1 = sample_prior(dim, &mut rng);
    project_to_manifold(&mut z1, radius)?;
    let mut z2: Vec<f64> = z1.iter().map(|v| -v).collect();
    project_to_manifold(&mut z2, radius)?;

    let mut scratch = GuidanceScratch::new(guidance);
    let mut gv1 = vec![0.0; dim];
    let mut gv2 = vec![0.0; dim];
    let mut noise = vec![0.0; dim];
    let mut max_factor: f64 = 0.0;
    let mut l_v = lipschitz_v;
    let mut distances = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let d_before = z1.iter().zip(&z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if d_before < 1e-13 {
            distances.push(d_before);
            continue;
        }
        let gu1: Vec<f64> = z1.iter().zip(hessian).map(|(z, h)| h * z).collect();
        let gu2: Vec<f64> = z2.iter().zip(hessian).map(|(z, h)| h * z).collect();
        guidance.similarity_grad_z(features, &z1, &mut gv1, &mut scratch);
        guidance.similarity_grad_z(features, &z2, &mut gv2, &mut scratch);
        let dv = gv1.iter().zip(&gv2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        l_v = l_v.max(dv / d_before);
        for slot in noise.iter_mut() {
            *slot = rng.sample::<f64, _>(StandardNormal);
        }
        z1 = langevin_step(&z1, &gu1, &gv1, gamma1, gamma2, gamma3, &noise, radius)?;
        z2 = langevin_step(&z2, &gu2, &gv2, gamma1, gamma2, gamma3, &noise, radius)?;
        let d_after = z1.iter().zip(&z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        max_factor = max_factor.max(d_after / d_before);
        distances.push(d_after);
    }
    let tail = &distances[distances.len() - distances.len() / 4..];
    let plateau = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    Ok(ContractionReport {
        max_factor,
        factor_bound: 1.0 - m * gamma3 / 2.0 + gamma2 * l_v,
        plateau,
        plateau_bound: 2.0 * (3.0 * gamma2 * l_v * sup_grad_v / m),
        lipschitz_v: l_v,
    })
}

/// Deterministic query set for experiments: thin wrapper kept here so the
/// sampler tests and the experiment drivers share one entry point.
pub fn experiment_queries(spec: &WorkloadSpec, n: usize, master_seed: u64) -> Vec<Query> {
    gen_queries(spec, n, master_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff_peir::CostCoefficients;
    use crate::guidance::{train_guidance, GuidanceTrainParams, LogEntry, PerformanceLog};
    use crate::latent::default_manifold_radius;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::collections::HashMap;

    #[test]
    fn gradient_only_step_decays_geometrically_on_a_quadratic() {
        // One-dimensional-per-axis quadratic with eigenvalues in [1, 2]:
        // with gamma2 = gamma3 = 0 the iteration is plain gradient descent
        // and contracts by exactly max(|1−γ1·m|, |1−γ1·L|) per step.
        let dim = 16;
        let hessian: Vec<f64> = (0..dim).map(|i| 1.0 + (i as f64) / (dim as f64 - 1.0)).collect();
        let gamma1 = 0.2;
        let expected = hessian
            .iter()
            .map(|h| (1.0 - gamma1 * h).abs())
            .fold(0.0f64, f64::max);
        let radius = 100.0;
        let mut z: Vec<f64> = (0..dim).map(|i| ((i * 7919 + 3) % 11) as f64 / 11.0 + 0.1).collect();
        let noise = vec![0.0; dim];
        let zeros = vec![0.0; dim];
        let mut prev = norm(&z);
        for _ in 0..40 {
            let gu: Vec<f64> = z.iter().zip(&hessian).map(|(zi, h)| h * zi).collect();
            z = langevin_step(&z, &gu, &zeros, gamma1, 0.0, 0.0, &noise, radius).unwrap();
            let cur = norm(&z);
            assert!(cur <= expected * prev + 1e-12, "ratio {} > {}", cur / prev, expected);
            prev = cur;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn zero_gradients_and_zero_noise_leave_z_unchanged() {
        let z = vec![0.5, -0.25, 1.0, 0.0];
        let zeros = vec![0.0; 4];
        let out = langevin_step(&z, &zeros, &zeros, 2e-3, 2e-3, 0.0, &zeros, 10.0).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn noise_only_steps_have_the_advertised_mean_and_covariance() {
        let dim = 4;
        let gamma3 = 1.0e-4;
        let z = vec![0.3, -0.2, 0.1, 0.4];
        let zeros = vec![0.0; dim];
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let trials = 20_000;
        let mut mean = vec![0.0; dim];
        let mut second = vec![0.0; dim];
        let mut cross = 0.0; // one off-diagonal moment as an isotropy probe
        for _ in 0..trials {
            let noise: Vec<f64> =
                (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let out = langevin_step(&z, &zeros, &zeros, 0.0, 0.0, gamma3, &noise, 50.0).unwrap();
            for d in 0..dim {
                let delta = out[d] - z[d];
                mean[d] += delta;
                second[d] += delta * delta;
            }
            cross += (out[0] - z[0]) * (out[1] - z[1]);
        }
        let n = trials as f64;
        let var_expected = 2.0 * gamma3;
        // Standard error of the variance estimate is var·sqrt(2/n) ≈ 2%.
        for d in 0..dim {
            assert!((mean[d] / n).abs() < 4.0 * (var_expected / n).sqrt());
            let var = second[d] / n;
            assert!(
                (var - var_expected).abs() < 0.08 * var_expected,
                "var[{d}] = {var}, expected {var_expected}"
            );
        }
        assert!((cross / n).abs() < 4.0 * var_expected * (2.0 / n).sqrt());
    }

    #[test]
    fn non_finite_gradients_abort_the_step() {
        let z = vec![0.0; 3];
        let bad = vec![f64::NAN, 0.0, 0.0];
        let zeros = vec![0.0; 3];
        let err = langevin_step(&z, &bad, &zeros, 1e-3, 1e-3, 1e-4, &zeros, 5.0);
        assert!(matches!(err, Err(Error::Diagnostic(_))));
        let err = langevin_step(&z, &zeros, &bad, 1e-3, 1e-3, 1e-4, &zeros, 5.0);
        assert!(matches!(err, Err(Error::Diagnostic(_))));
    }

    #[test]
    fn early_exit_fires_on_flat_history_only_after_the_floor() {
        let flat = vec![5.0; 12];
        assert!(early_exit(&flat[..7], 5, 1e-3, 6, 6));
        assert!(!early_exit(&flat[..6], 5, 1e-3, 5, 6));
        // Halving every step is a 50% window drop — far above eps.
        let halving: Vec<f64> = (0..10).map(|t| 100.0 * 0.5f64.powi(t)).collect();
        assert!(!early_exit(&halving, 5, 1e-3, 9, 6));
        // Zero reference value counts as converged.
        let mut zeroed = vec![0.0; 8];
        zeroed[7] = -0.5;
        assert!(early_exit(&zeroed, 5, 1e-3, 7, 6));
        // Negative-valued history: an 0.01% drop on a negative potential.
        let neg: Vec<f64> = (0..8).map(|t| -100.0 - 1e-4 * t as f64).collect();
        assert!(early_exit(&neg, 5, 1e-3, 7, 6));
    }

    #[test]
    fn paired_t_test_handles_degenerate_and_strong_signals() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(paired_t_test(&a, &a).unwrap(), (0.0, 1.0));
        let b: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        let (t, p) = paired_t_test(&b, &a).unwrap();
        assert!(t.is_infinite() && p == 0.0);
        // Large-sample strong effect: shift of one noise SD.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x: Vec<f64> =
            (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 1.0 + 0.1 * v.sin()).collect();
        let (t, p) = paired_t_test(&y, &x).unwrap();
        assert!(t > 10.0 && p < 1e-6);
        // erfc sanity against known values.
        assert!((erfc(0.0) - 1.0).abs() < 1e-7);
        assert!((erfc(1.0) - 0.157_299_2).abs() < 1e-6);
        assert!((erfc(-1.0) - 1.842_700_8).abs() < 1e-6);
    }

    // -- Optimize-level tests on a hand-built stack ------------------------

    /// Flat quality everywhere: the validation floor can never trip, so
    /// optimize-level mechanics can be tested in isolation.
    struct ConstSurrogate(f64);

    impl QualitySurrogate for ConstSurrogate {
        fn quality(&self, _omega: &SoftConfiguration) -> f64 {
            self.0
        }

        fn quality_grad(&self, _omega: &SoftConfiguration) -> [f64; 3] {
            [0.0; 3]
        }
    }

    /// Decoder with identity-ish linear maps so latent moves translate to
    /// configuration moves predictably.
    fn test_decoder(space: &FeasibleSpaceSpec) -> DecoderModel {
        let latent_dim = 16;
        let hidden_dim = 24;
        let mut l1 = crate::nn::Affine::zeros(latent_dim, hidden_dim);
        for d in 0..hidden_dim {
            l1.w[d * latent_dim + (d % latent_dim)] = 0.35;
        }
        let mut l2 = crate::nn::Affine::zeros(hidden_dim, 3);
        for d in 0..3 {
            l2.w[d * hidden_dim + d] = 1.1;
            l2.w[d * hidden_dim + d + 3] = 0.2;
        }
        DecoderModel {
            format_version: crate::latent::DECODER_FORMAT_VERSION,
            latent_dim,
            hidden_dim,
            hull: space.dimensions.iter().map(|d| d.hull()).collect(),
            l1,
            l2,
        }
    }

    struct Stack {
        space: FeasibleSpaceSpec,
        decoder: DecoderModel,
        op_model: OpCountModel,
    }

    fn test_stack() -> Stack {
        let space = FeasibleSpaceSpec::default_space();
        let decoder = test_decoder(&space);
        let mut op_model = OpCountModel::standard(&space, CostCoefficients::intel()).unwrap();
        op_model.quantize_weights(8.0e-4).unwrap();
        Stack { space, decoder, op_model }
    }

    fn models_of(stack: &Stack) -> SamplerModels<'_> {
        SamplerModels {
            space: &stack.space,
            decoder: &stack.decoder,
            op_model: &stack.op_model,
            guidance: None,
            weights: PotentialWeights::default(),
            scales: TermScales { carbon: 4200.0, latency: 1.0, quality: 30.0 },
            baseline: Configuration::new(vec![1000, 128, 8]),
        }
    }

    #[test]
    fn optimize_is_deterministic_and_respects_the_step_budget() {
        let stack = test_stack();
        let models = models_of(&stack);
        let surrogate = ConstSurrogate(0.9);
        let query = QueryInput { id: 7, features: &[], surrogate: &surrogate };
        let params = SamplerParams::default();
        let (c1, t1) = optimize(&query, &params, &models, None, None).unwrap();
        let (c2, t2) = optimize(&query, &params, &models, None, None).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(t1, t2);
        assert!(t1.steps <= params.n_max);
        assert!(t1.u_history.len() as u32 == t1.steps + 1);
        assert!(stack.space.validate(&c1).unwrap());
        assert!(!t1.degraded);
        // The trace is internally consistent: record index = step.
        for (i, r) in t1.records.iter().enumerate() {
            assert_eq!(r.t as usize, i + 1);
        }
    }

    #[test]
    fn early_exit_stops_at_the_floor_and_matches_the_exhaustive_run() {
        // Quality-only weights and a flat surrogate make U exactly constant,
        // so the window test must fire at the earliest legal step and the
        // exit-disabled run must land on the same final potential.
        let stack = test_stack();
        let mut models = models_of(&stack);
        models.weights = PotentialWeights { alpha: 0.0, beta: 0.0, gamma: 1.0 };
        let surrogate = ConstSurrogate(0.9);
        let query = QueryInput { id: 3, features: &[], surrogate: &surrogate };
        let params = SamplerParams::default();
        let (_, fast) = optimize(&query, &params, &models, None, None).unwrap();
        let mut slow_params = params.clone();
        slow_params.early_exit_enabled = false;
        let (_, slow) = optimize(&query, &slow_params, &models, None, None).unwrap();
        assert_eq!(fast.exit, ExitReason::EarlyExit);
        assert_eq!(fast.steps, params.t_min);
        assert_eq!(slow.exit, ExitReason::MaxSteps);
        assert_eq!(slow.steps, params.n_max);
        let u_fast = *fast.u_history.last().unwrap();
        let u_slow = *slow.u_history.last().unwrap();
        let rel = (u_fast - u_slow).abs() / u_slow.abs().max(1e-12);
        assert!(rel < 5.0 * params.eps_u, "relative U gap {rel}");
    }

    /// Quality surrogate that hates everything except the baseline: every
    /// step fails validation, so the run must degrade to the baseline after
    /// exhausting its rollbacks, halving gamma2 each time.
    struct HostileSurrogate;

    impl QualitySurrogate for HostileSurrogate {
        fn quality(&self, omega: &SoftConfiguration) -> f64 {
            // Baseline [1000, 128, 8] scores 1; everything else scores 0.
            let near = (omega.values[0] - 1000.0).abs() < 1e-6
                && (omega.values[1] - 128.0).abs() < 1e-6
                && (omega.values[2] - 8.0).abs() < 1e-6;
            if near {
                1.0
            } else {
                0.0
            }
        }

        fn quality_grad(&self, _omega: &SoftConfiguration) -> [f64; 3] {
            [0.0; 3]
        }
    }

    #[test]
    fn pathological_validation_degrades_to_the_baseline() {
        let stack = test_stack();
        let models = models_of(&stack);
        let query = QueryInput { id: 11, features: &[], surrogate: &HostileSurrogate };
        let params = SamplerParams::default();
        let (config, trace) = optimize(&query, &params, &models, None, None).unwrap();
        assert_eq!(config, models.baseline);
        assert!(trace.degraded);
        assert_eq!(trace.rollbacks, params.max_rollbacks + 1);
        assert!(trace.records.iter().all(|r| r.rollback));
        // gamma2 halved exactly once per validation failure.
        assert!(
            (trace.gamma2_final - params.gamma2 * 0.5f64.powi(trace.rollbacks as i32)).abs()
                < 1e-18
        );
        // Rolled-back steps keep the potential history flat.
        assert!(trace.u_history.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rollback_halves_gamma2_and_never_raises_it() {
        // A surrogate that fails validation only in a band of k values:
        // runs that wander there roll back, others don't; in all cases the
        // final gamma2 must be gamma2 / 2^rollbacks.
        struct BandSurrogate;
        impl QualitySurrogate for BandSurrogate {
            fn quality(&self, omega: &SoftConfiguration) -> f64 {
                if omega.values[0] > 6000.0 {
                    0.0
                } else {
                    0.9
                }
            }
            fn quality_grad(&self, _omega: &SoftConfiguration) -> [f64; 3] {
                [1e-4, 0.0, 0.0] // gentle push toward larger k
            }
        }
        let stack = test_stack();
        let mut models = models_of(&stack);
        models.scales.quality = 3.0e5; // make the quality pull dominate
        let params = SamplerParams { early_exit_enabled: false, ..SamplerParams::default() };
        let mut saw_rollback = false;
        for id in 0..12u64 {
            let query = QueryInput { id, features: &[], surrogate: &BandSurrogate };
            let (_, trace) = optimize(&query, &params, &models, None, None).unwrap();
            let expected = params.gamma2 * 0.5f64.powi(trace.rollbacks as i32);
            assert!((trace.gamma2_final - expected).abs() < 1e-18);
            saw_rollback |= trace.rollbacks > 0;
        }
        assert!(saw_rollback, "test never exercised a rollback");
    }

    #[test]
    fn cache_hit_skips_sampling_and_deploys_the_cached_config() {
        let stack = test_stack();
        let mut models = models_of(&stack);
        let guidance = GuidanceModel::new(4, 16, 0.1, 9).unwrap();
        models.guidance = Some(&guidance);
        let features = vec![0.4, -0.2, 0.1, 0.8];
        let cached_config = Configuration::new(vec![2000, 256, 8]);
        let centroid = guidance.query_encode(&features);
        let cache = ConfigCache {
            version: crate::cache::CACHE_FORMAT_VERSION,
            hit_threshold: 0.9,
            entries: vec![crate::cache::CacheEntry {
                centroid,
                config: cached_config.clone(),
            }],
        };
        let surrogate = ConstSurrogate(0.9);
        let query = QueryInput { id: 21, features: &features, surrogate: &surrogate };
        let (config, trace) =
            optimize(&query, &SamplerParams::default(), &models, Some(&cache), None).unwrap();
        assert_eq!(config, cached_config);
        assert_eq!(trace.exit, ExitReason::CacheHit);
        assert_eq!(trace.steps, 0);
        assert!(trace.records.is_empty());
        assert!(trace.predicted_latency_ms > 0.0);
    }

    #[test]
    fn deploy_hooks_feed_the_calibrator() {
        use crate::calibration::CalibratorConfig;
        let stack = test_stack();
        let models = models_of(&stack);
        let surrogate = ConstSurrogate(0.9);
        let query = QueryInput { id: 2, features: &[], surrogate: &surrogate };
        let mut loop_ = CalibrationLoop::new(
            CalibratorConfig::default(),
            [2.1971795, 0.1760682],
            [5.0e-4, 1.5e-4],
        )
        .unwrap();
        let op_model = &stack.op_model;
        let mut measure = |qid: u64, config: &Configuration| {
            let soft = soft_of(config);
            let ops = op_model.ops_of(&soft);
            MeasurementRecord {
                query_id: qid,
                config: config.clone(),
                x: [ops.mop_mega, ops.flop_mega],
                latency_ms: op_model.latency_ms(ops).max(0.01),
                carbon_g: op_model.carbon_g(ops),
            }
        };
        let hooks = DeployHooks { calibration: &mut loop_, measure: &mut measure };
        let (_, trace) =
            optimize(&query, &SamplerParams::default(), &models, None, Some(hooks)).unwrap();
        assert!(!trace.degraded);
        assert_eq!(loop_.buffer.len(), 1);
    }

    #[test]
    fn batch_drivers_agree_with_single_runs() {
        let stack = test_stack();
        let models = models_of(&stack);
        let surrogates: Vec<ConstSurrogate> =
            (0..6).map(|i| ConstSurrogate(0.8 + 0.02 * i as f64)).collect();
        let queries: Vec<QueryInput> = surrogates
            .iter()
            .enumerate()
            .map(|(i, s)| QueryInput { id: i as u64, features: &[], surrogate: s })
            .collect();
        let params = SamplerParams::default();
        let seq = optimize_batch_seq(&queries, &params, &models, None).unwrap();
        let par = optimize_batch(&queries, &params, &models, None).unwrap();
        assert_eq!(seq, par);
        for (i, (config, trace)) in seq.iter().enumerate() {
            let (c, t) = optimize(&queries[i], &params, &models, None, None).unwrap();
            assert_eq!(&c, config);
            assert_eq!(&t, trace);
        }
    }

    #[test]
    fn contraction_stays_under_the_theorem_bound() {
        // Quadratic with eigenvalues in [1, 2] (m = 1, L = 2), gamma1 = 0.2
        // below 2/L, default guidance/noise coefficients. Shared noise
        // cancels in the coupling, so the chains must contract at least as
        // fast as the claimed per-step factor, and the long-run coupled
        // distance must sit far below the plateau ceiling.
        let dim = 16;
        let hessian: Vec<f64> =
            (0..dim).map(|i| 1.0 + (i as f64) / (dim as f64 - 1.0)).collect();
        let guidance = trained_guidance_fixture(dim);
        let features = vec![0.3, -0.4, 0.2, 0.6];
        let radius = default_manifold_radius(dim);
        let stats = crate::guidance::gradient_field_stats(
            &guidance,
            &[features.clone()],
            200,
            radius,
            17,
        )
        .unwrap();
        let report = contraction_check(
            &guidance,
            &features,
            &hessian,
            1.0,
            0.2,
            2.0e-3,
            1.0e-4,
            stats.sup_norm,
            stats.lipschitz,
            200,
            radius,
            23,
        )
        .unwrap();
        assert!(
            report.max_factor <= report.factor_bound + 1e-9,
            "factor {} > bound {}",
            report.max_factor,
            report.factor_bound
        );
        assert!(
            report.plateau <= report.plateau_bound,
            "plateau {} > bound {}",
            report.plateau,
            report.plateau_bound
        );
    }

    /// Small trained guidance model shared by the contraction tests.
    fn trained_guidance_fixture(latent_dim: usize) -> GuidanceModel {
        let mut model = GuidanceModel::new(4, latent_dim, 0.1, 31).unwrap();
        let mut log = PerformanceLog::default();
        let mut features = HashMap::new();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for qid in 0..24u64 {
            let family = qid % 2;
            let feat: Vec<f64> = (0..4)
                .map(|d| {
                    if d == 0 {
                        family as f64 * 2.0 - 1.0
                    } else {
                        0.3 * rng.sample::<f64, _>(StandardNormal)
                    }
                })
                .collect();
            features.insert(qid, feat);
            for rep in 0..2u64 {
                let key = family * 10 + rep;
                let mut z = vec![0.0; latent_dim];
                z[family as usize] = 1.5;
                z[2 + rep as usize] = 0.5;
                log.push(LogEntry {
                    query_id: qid,
                    config_key: key,
                    z,
                    recall: 0.8 + 0.1 * family as f64,
                })
                .unwrap();
            }
        }
        let params = GuidanceTrainParams {
            epochs: 8,
            batch_size: 12,
            lr: 0.03,
            pair_delta: 0.01,
            ..GuidanceTrainParams::default()
        };
        train_guidance(&mut model, &log, &features, &params, 13).unwrap();
        model
    }

    #[test]
    fn ablation_comparisons_pair_by_query_and_refuse_mismatches() {
        let spec = WorkloadSpec::default();
        let family = CounterFamily::standard();
        let profile = HardwareProfile::intel();
        let stack = test_stack();
        let models = models_of(&stack);
        let ctx = AblationContext {
            spec: &spec,
            family: &family,
            profile: &profile,
            models: &models,
            params: SamplerParams::default(),
            measurement_salt: 0xA5A5,
            step_overhead_ms: 1.0,
            step_overhead_g: 2.4e-4,
        };
        let queries = experiment_queries(&spec, 8, 1234);
        let full = ablate_variant(AblationVariant::Full, &queries, &ctx).unwrap();
        // Self-comparison: all deltas zero, p = 1.
        let again = ablate_variant(AblationVariant::Full, &queries, &ctx).unwrap();
        let cmp = ablation_compare(&full, &again).unwrap();
        assert_eq!(cmp.latency_t_stat, 0.0);
        assert_eq!(cmp.latency_p_value, 1.0);
        assert_eq!(cmp.base_summary, cmp.other_summary);
        // Mismatched query sets are refused: different ids and different
        // lengths both count.
        let mut renumbered = queries.clone();
        for q in &mut renumbered {
            q.id += 1000;
        }
        let shifted = ablate_variant(AblationVariant::Full, &renumbered, &ctx).unwrap();
        assert!(ablation_compare(&full, &shifted).is_err());
        let short = ablate_variant(AblationVariant::Full, &queries[..7], &ctx).unwrap();
        assert!(ablation_compare(&full, &short).is_err());
        // Records carry the per-step serving overhead.
        for r in &full.records {
            assert!(r.latency_ms > 0.0 && r.steps <= ctx.params.n_max as f64);
        }
    }
}
