//! Synthetic retrieval workload for desk-scale verification.
//!
//! The simulator stands in for a production query log plus hardware
//! telemetry. Each query carries latent difficulty structure:
//!
//! * `mem_scale` / `flop_scale` — how much work this query does per unit of
//!   configured effort (driven by term count with lognormal scatter, mean 1);
//! * `kappa` — how many candidates must be scored before recall saturates
//!   (heavy-tailed across queries);
//! * `ceiling` — the best recall any configuration can reach for this query.
//!
//! True telemetry scales the shared branch-counter family by the query's
//! work factors and prices it with a hardware profile (linear in mega-ops,
//! Gaussian timing noise). The recall surface
//!
//! ```text
//! R(w, q) = ceiling * (1 - exp(-k / kappa))
//!         * (1 - bit_penalty * pen(bits))
//!         * (1 - block_coeff * ((block - 64) / 960)^2)
//! ```
//!
//! is smooth in the configuration, so it doubles as the per-query
//! effectiveness surrogate the sampler differentiates.
//!
//! Observable features (term count, a collection-statistics proxy
//! correlated with the ceiling, a noisy saturation estimate, and pure-noise
//! padding) expose enough signal for retrieval-guided steering to learn
//! from, without leaking the latent variables directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config_space::{Configuration, SoftConfiguration};
use crate::diff_peir::{quant_penalty, CostCoefficients, CounterFamily, CounterVector};
use crate::error::{Error, Result};
use crate::potential::QualitySurrogate;

/// 64-bit FNV-1a hash; used to derive independent per-query substreams from
/// a master seed, and for content hashes in reports.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic RNG for one (master seed, stream id) pair.
pub fn substream(master_seed: u64, stream: u64) -> ChaCha12Rng {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&master_seed.to_le_bytes());
    bytes[8..].copy_from_slice(&stream.to_le_bytes());
    ChaCha12Rng::seed_from_u64(fnv1a64(&bytes))
}

/// Hardware profile: linear cost coefficients plus timing noise and the
/// facility power-usage-effectiveness the carbon factors were measured at.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    pub cost: CostCoefficients,
    /// Standard deviation of additive per-query timing noise, ms.
    pub latency_noise_ms: f64,
    /// Power usage effectiveness at measurement time.
    pub pue: f64,
}

impl HardwareProfile {
    pub fn intel() -> Self {
        HardwareProfile {
            name: "intel".into(),
            cost: CostCoefficients::intel(),
            latency_noise_ms: 0.15,
            pue: 1.2,
        }
    }

    pub fn amd() -> Self {
        HardwareProfile {
            name: "amd".into(),
            cost: CostCoefficients::amd(),
            latency_noise_ms: 0.15,
            pue: 1.2,
        }
    }

    /// The same machine class as `intel` after a memory-timing and firmware
    /// refresh: coefficients a few percent apart, used to exercise
    /// cross-deployment transfer at realistic gaps.
    pub fn intel_refresh() -> Self {
        let base = CostCoefficients::intel();
        HardwareProfile {
            name: "intel-refresh".into(),
            cost: CostCoefficients {
                ms_per_mega_mop: base.ms_per_mega_mop * 1.025,
                ms_per_mega_flop: base.ms_per_mega_flop * 0.97,
                ..base
            },
            latency_noise_ms: 0.15,
            pue: 1.2,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "intel" => Some(HardwareProfile::intel()),
            "amd" => Some(HardwareProfile::amd()),
            "intel-refresh" => Some(HardwareProfile::intel_refresh()),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let profile: HardwareProfile =
            toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        self.cost.validate()?;
        if !(self.latency_noise_ms >= 0.0 && self.latency_noise_ms.is_finite()) {
            return Err(Error::Parameter("latency noise must be nonnegative".into()));
        }
        if !(self.pue >= 1.0 && self.pue.is_finite()) {
            return Err(Error::Parameter("PUE must be at least 1".into()));
        }
        Ok(())
    }
}

/// Generator parameters for the synthetic workload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub term_count_min: u32,
    pub term_count_max: u32,
    /// Work grows as `(terms / 4)^exponent`.
    pub mem_scale_exponent: f64,
    /// Lognormal scatter (log-sigma) of per-query memory work.
    pub mem_scale_sigma: f64,
    /// `E[(terms/4)^exponent]` for the term-count range; divides the memory
    /// scale so it averages exactly one.
    pub mem_scale_norm: f64,
    /// Fraction of flop work tied to memory work (the rest is independent).
    pub flop_mix: f64,
    /// Median of the per-query recall saturation constant.
    pub kappa_median: f64,
    /// Log-sigma of the saturation constant.
    pub kappa_sigma_log: f64,
    /// Best reachable recall before per-query losses.
    pub ceiling_base: f64,
    /// Mean of the exponentially-distributed per-query ceiling loss.
    pub ceiling_loss_mean: f64,
    pub ceiling_floor: f64,
    /// Quadratic recall penalty coefficient for wide skip blocks.
    pub block_smooth_coeff: f64,
    /// Linear recall penalty for 4-bit scoring.
    pub bit_recall_penalty: f64,
    /// Total feature dimensions (informative ones plus noise padding).
    pub n_features: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            term_count_min: 2,
            term_count_max: 6,
            mem_scale_exponent: 0.7,
            mem_scale_sigma: 0.18,
            mem_scale_norm: 0.986114,
            flop_mix: 0.7,
            kappa_median: 165.0,
            kappa_sigma_log: 0.7,
            ceiling_base: 0.995,
            ceiling_loss_mean: 0.108,
            ceiling_floor: 0.25,
            block_smooth_coeff: 0.01,
            bit_recall_penalty: 0.035,
            n_features: 8,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.term_count_min < 1 || self.term_count_max < self.term_count_min {
            return Err(Error::Parameter("term count range is empty".into()));
        }
        if !(self.flop_mix >= 0.0 && self.flop_mix <= 1.0) {
            return Err(Error::Parameter("flop mix must lie in [0, 1]".into()));
        }
        if !(self.kappa_median > 0.0) {
            return Err(Error::Parameter("kappa median must be positive".into()));
        }
        if !(self.ceiling_base > self.ceiling_floor && self.ceiling_base <= 1.0) {
            return Err(Error::Parameter("ceiling range is invalid".into()));
        }
        if self.n_features < 3 {
            return Err(Error::Parameter("need at least 3 features".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: WorkloadSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("workload config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: WorkloadSpec =
            toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Generate query `id` from its own substream of `master_seed`.
    pub fn query(&self, id: u64, master_seed: u64) -> Query {
        let mut rng = substream(master_seed, id);
        let span = self.term_count_max - self.term_count_min + 1;
        let term_count = self.term_count_min + rng.random_range(0..span);

        let sigma = self.mem_scale_sigma;
        let log_draw: f64 = rng.sample::<f64, _>(StandardNormal) * sigma - 0.5 * sigma * sigma;
        let mem_scale = (term_count as f64 / 4.0).powf(self.mem_scale_exponent) * log_draw.exp()
            / self.mem_scale_norm;
        let extra: f64 = rng.sample::<f64, _>(StandardNormal) * sigma - 0.5 * sigma * sigma;
        let flop_scale = self.flop_mix * mem_scale + (1.0 - self.flop_mix) * extra.exp();

        let kappa = self.kappa_median
            * (rng.sample::<f64, _>(StandardNormal) * self.kappa_sigma_log).exp();
        let loss: f64 = rng.sample::<f64, _>(Exp1) * self.ceiling_loss_mean;
        let ceiling = (self.ceiling_base - loss).clamp(self.ceiling_floor, self.ceiling_base);

        // Observable features: informative but noisy views of the latents.
        let mut features = Vec::with_capacity(self.n_features);
        features.push((term_count as f64 - 4.0) / 2.0);
        let idf_noise: f64 = rng.sample(StandardNormal);
        features.push((ceiling - 0.87) * 10.0 + 0.5 * idf_noise);
        let sat_noise: f64 = rng.sample(StandardNormal);
        features
            .push((kappa / self.kappa_median).ln() / self.kappa_sigma_log + 0.35 * sat_noise);
        for _ in 3..self.n_features {
            features.push(rng.sample(StandardNormal));
        }

        Query { id, term_count, mem_scale, flop_scale, kappa, ceiling, features }
    }

    /// Expected recall of a (possibly relaxed) configuration for `query`.
    pub fn recall(&self, query: &Query, k: f64, block: f64, bits: f64) -> f64 {
        let saturation = 1.0 - (-k.max(0.0) / query.kappa).exp();
        let bit_factor = 1.0 - self.bit_recall_penalty * quant_penalty(bits);
        let rel = (block - 64.0) / 960.0;
        let block_factor = 1.0 - self.block_smooth_coeff * rel * rel;
        (query.ceiling * saturation * bit_factor * block_factor).max(0.0)
    }
}

/// One synthetic query with its latent difficulty and observable features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub term_count: u32,
    pub mem_scale: f64,
    pub flop_scale: f64,
    pub kappa: f64,
    pub ceiling: f64,
    pub features: Vec<f64>,
}

/// Generate `n` queries deterministically from a master seed.
pub fn gen_queries(spec: &WorkloadSpec, n: usize, master_seed: u64) -> Vec<Query> {
    (0..n as u64).map(|id| spec.query(id, master_seed)).collect()
}

/// Differentiable effectiveness surrogate for one query.
pub struct RecallSurrogate<'a> {
    pub spec: &'a WorkloadSpec,
    pub query: &'a Query,
}

impl QualitySurrogate for RecallSurrogate<'_> {
    fn quality(&self, omega: &SoftConfiguration) -> f64 {
        self.spec.recall(self.query, omega.k(), omega.block_size(), omega.quant_bits())
    }

    fn quality_grad(&self, omega: &SoftConfiguration) -> [f64; 3] {
        let q = self.query;
        let k = omega.k().max(0.0);
        let block = omega.block_size();
        let bits = omega.quant_bits();
        let sat = 1.0 - (-k / q.kappa).exp();
        let bit_factor = 1.0 - self.spec.bit_recall_penalty * quant_penalty(bits);
        let rel = (block - 64.0) / 960.0;
        let block_factor = 1.0 - self.spec.block_smooth_coeff * rel * rel;
        let base = q.ceiling;
        [
            base * ((-k / q.kappa).exp() / q.kappa) * bit_factor * block_factor,
            base * sat * bit_factor * (-2.0 * self.spec.block_smooth_coeff * rel / 960.0),
            base * sat * (self.spec.bit_recall_penalty / 4.0) * block_factor,
        ]
    }
}

/// Measured telemetry for one (query, configuration) execution.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// True branch counters, scaled by the query's work factors.
    pub counters: CounterVector,
    pub mop_mega: f64,
    pub flop_mega: f64,
    pub latency_ms: f64,
    pub carbon_g: f64,
    pub recall: f64,
}

/// Execute `omega` for `query` on `profile`: true counters, noisy latency,
/// carbon at the profile's PUE (relative to itself; see the calibration
/// module for drift handling).
pub fn observe(
    spec: &WorkloadSpec,
    family: &CounterFamily,
    profile: &HardwareProfile,
    query: &Query,
    omega: &Configuration,
    rng: &mut impl Rng,
) -> Observation {
    let soft = SoftConfiguration::new(omega.values.iter().map(|&v| v as f64).collect());
    let mut counters = Vec::with_capacity(family.len());
    let mut mop = 0.0;
    let mut flop = 0.0;
    for branch in &family.branches {
        let scale = match branch.kind {
            crate::diff_peir::BranchKind::Memory => query.mem_scale,
            crate::diff_peir::BranchKind::Flop => query.flop_scale,
        };
        let c = branch.count(&soft) * scale;
        match branch.kind {
            crate::diff_peir::BranchKind::Memory => mop += c,
            crate::diff_peir::BranchKind::Flop => flop += c,
        }
        counters.push(c);
    }
    let mop_mega = mop / 1e6;
    let flop_mega = flop / 1e6;
    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * profile.latency_noise_ms;
    let latency_ms = (profile.cost.ms_per_mega_mop * mop_mega
        + profile.cost.ms_per_mega_flop * flop_mega
        + noise)
        .max(0.01);
    let carbon_g =
        profile.cost.g_per_mega_mop * mop_mega + profile.cost.g_per_mega_flop * flop_mega;
    let recall = spec.recall(query, soft.k(), soft.block_size(), soft.quant_bits());
    Observation { counters: CounterVector(counters), mop_mega, flop_mega, latency_ms, carbon_g, recall }
}

/// The fixed system-wide default configuration (the static baseline every
/// per-query decision is validated against).
pub fn baseline_configuration() -> Configuration {
    Configuration::new(vec![1000, 128, 8])
}

/// A fixed reference retrieval pipeline for the comparison suite, expressed
/// as multiples of the static baseline's operation counts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodAnalogue {
    pub name: String,
    pub mop_ratio: f64,
    pub flop_ratio: f64,
    /// Mean recall this method attains on the workload.
    pub recall_scale: f64,
}

/// Reference methods, ordered from lightest to heaviest.
pub fn reference_methods() -> Vec<MethodAnalogue> {
    let mk = |name: &str, mop_ratio: f64, flop_ratio: f64, recall_scale: f64| MethodAnalogue {
        name: name.into(),
        mop_ratio,
        flop_ratio,
        recall_scale,
    };
    vec![
        mk("bm25", 1.0, 1.0, 0.9762),
        mk("bm25-t5", 1.35342, 1.35342, 0.9876),
        mk("deepimpact", 3.32103, 3.32103, 0.9968),
        mk("unicoil-tilde", 4.90549, 4.90549, 1.0011),
        mk("unicoil-t5", 6.00142, 6.00142, 1.0032),
        mk("spladev2", 29.90278, 29.90278, 1.0103),
    ]
}

/// Telemetry for a reference method on one query.
pub fn observe_method(
    spec: &WorkloadSpec,
    family: &CounterFamily,
    profile: &HardwareProfile,
    query: &Query,
    method: &MethodAnalogue,
    rng: &mut impl Rng,
) -> Observation {
    let base = observe(spec, family, profile, query, &baseline_configuration(), rng);
    let mop_mega = base.mop_mega * method.mop_ratio;
    let flop_mega = base.flop_mega * method.flop_ratio;
    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * profile.latency_noise_ms;
    let latency_ms = (profile.cost.ms_per_mega_mop * mop_mega
        + profile.cost.ms_per_mega_flop * flop_mega
        + noise)
        .max(0.01);
    let carbon_g =
        profile.cost.g_per_mega_mop * mop_mega + profile.cost.g_per_mega_flop * flop_mega;
    let recall = (base.recall * method.recall_scale).min(0.999);
    let counters =
        CounterVector(base.counters.0.iter().map(|c| c * method.mop_ratio).collect());
    Observation { counters, mop_mega, flop_mega, latency_ms, carbon_g, recall }
}
