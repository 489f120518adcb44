//! Retrieval guidance: two-tower query/configuration embeddings, the hybrid
//! similarity `V(q, z)`, performance-positive pair mining, and contrastive
//! training.
//!
//! The similarity combines a dot product of the towers with a small
//! cross-interaction network over `[u; v; u ⊙ v]`, so it can express
//! query-conditional preferences a pure bilinear form cannot. Training pulls
//! each query toward latent configurations that performed well for queries
//! with empirically similar behavior — pairs are mined from measured recall
//! under a *shared* configuration, not from lexical similarity — so the
//! learned gradient field `∇_z V` points toward regions of latent space that
//! historically suited queries like this one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{dot, tanh_backward_inplace, tanh_inplace, Affine, AffineGrad};

/// Embedding width shared by both towers.
pub const EMBED_DIM: usize = 256;
/// Hidden width of the configuration tower.
pub const EMBED_HIDDEN: usize = 64;
/// Hidden width of the cross-interaction network.
pub const CROSS_HIDDEN: usize = 128;
/// Cross-network input: `[u; v; u ⊙ v]`.
pub const CROSS_INPUT: usize = 3 * EMBED_DIM;

pub const GUIDANCE_FORMAT_VERSION: u32 = 1;

/// Two-tower similarity model with a cross-interaction head.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GuidanceModel {
    pub version: u32,
    pub feature_dim: usize,
    pub latent_dim: usize,
    /// Query tower: one affine map, features -> 256.
    pub encoder: Affine,
    /// Configuration tower: latent -> 64 (tanh) -> 256 (tanh).
    pub embed1: Affine,
    pub embed2: Affine,
    /// Cross head: [u; v; u0v] -> 128 (tanh) -> 1.
    pub cross1: Affine,
    pub cross2: Affine,
    /// Contrastive temperature.
    pub tau_c: f64,
    /// Uniform scale applied to the similarity and its gradient. Training
    /// runs at gain 1; `train_guidance` then calibrates the gain so the mean
    /// gradient norm over the prior shell matches its `pull_target`, which
    /// sets how hard retrieval can steer the sampler per step.
    #[serde(default = "default_gain")]
    pub gain: f64,
}

fn default_gain() -> f64 {
    1.0
}

/// Scratch space for one forward/backward pass; reused across calls to keep
/// the sampler loop allocation-free.
#[derive(Debug, Clone)]
pub struct GuidanceScratch {
    u: Vec<f64>,
    h: Vec<f64>,
    v: Vec<f64>,
    c: Vec<f64>,
    g1: Vec<f64>,
    dc: Vec<f64>,
    dg1: Vec<f64>,
    dv: Vec<f64>,
    dh: Vec<f64>,
}

impl GuidanceScratch {
    pub fn new(_model: &GuidanceModel) -> Self {
        GuidanceScratch {
            u: vec![0.0; EMBED_DIM],
            h: vec![0.0; EMBED_HIDDEN],
            v: vec![0.0; EMBED_DIM],
            c: vec![0.0; CROSS_INPUT],
            g1: vec![0.0; CROSS_HIDDEN],
            dc: vec![0.0; CROSS_INPUT],
            dg1: vec![0.0; CROSS_HIDDEN],
            dv: vec![0.0; EMBED_DIM],
            dh: vec![0.0; EMBED_HIDDEN],
        }
    }
}

impl GuidanceModel {
    /// Fresh model. The cross head's output layer starts at zero, so the
    /// similarity begins as a pure dot product and the head learns residual
    /// interactions.
    pub fn new(feature_dim: usize, latent_dim: usize, tau_c: f64, seed: u64) -> Result<Self> {
        if !(tau_c > 0.0 && tau_c.is_finite()) {
            return Err(Error::Parameter("contrastive temperature must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Ok(GuidanceModel {
            version: GUIDANCE_FORMAT_VERSION,
            feature_dim,
            latent_dim,
            encoder: Affine::seeded(feature_dim, EMBED_DIM, 0.3, &mut rng),
            embed1: Affine::seeded(latent_dim, EMBED_HIDDEN, 1.0, &mut rng),
            embed2: Affine::seeded(EMBED_HIDDEN, EMBED_DIM, 1.0, &mut rng),
            cross1: Affine::seeded(CROSS_INPUT, CROSS_HIDDEN, 1.0, &mut rng),
            cross2: Affine::zeros(CROSS_HIDDEN, 1),
            tau_c,
            gain: 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let shape_ok = self.encoder.in_dim == self.feature_dim
            && self.encoder.out_dim == EMBED_DIM
            && self.embed1.in_dim == self.latent_dim
            && self.embed1.out_dim == EMBED_HIDDEN
            && self.embed2.in_dim == EMBED_HIDDEN
            && self.embed2.out_dim == EMBED_DIM
            && self.cross1.in_dim == CROSS_INPUT
            && self.cross1.out_dim == CROSS_HIDDEN
            && self.cross2.in_dim == CROSS_HIDDEN
            && self.cross2.out_dim == 1;
        if !shape_ok {
            return Err(Error::Parameter("guidance model has inconsistent shapes".into()));
        }
        if !(self.tau_c > 0.0 && self.tau_c.is_finite()) {
            return Err(Error::Parameter("contrastive temperature must be positive".into()));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::Parameter("guidance gain must be positive".into()));
        }
        Ok(())
    }

    /// Deterministic query embedding `u`.
    pub fn query_encode(&self, features: &[f64]) -> Vec<f64> {
        debug_assert_eq!(features.len(), self.feature_dim);
        let mut u = vec![0.0; EMBED_DIM];
        self.encoder.forward(features, &mut u);
        u
    }

    /// Configuration embedding `v(z)`, keeping the hidden activation for
    /// backprop.
    fn embed_config(&self, z: &[f64], h: &mut [f64], v: &mut [f64]) {
        self.embed1.forward(z, h);
        tanh_inplace(h);
        self.embed2.forward(h, v);
        tanh_inplace(v);
    }

    /// Hybrid similarity from a precomputed query embedding.
    fn similarity_from_u(&self, u: &[f64], z: &[f64], s: &mut GuidanceScratch) -> f64 {
        s.u.copy_from_slice(u);
        self.embed_config(z, &mut s.h, &mut s.v);
        for i in 0..EMBED_DIM {
            s.c[i] = s.u[i];
            s.c[EMBED_DIM + i] = s.v[i];
            s.c[2 * EMBED_DIM + i] = s.u[i] * s.v[i];
        }
        self.cross1.forward(&s.c, &mut s.g1);
        tanh_inplace(&mut s.g1);
        let mut out = [0.0];
        self.cross2.forward(&s.g1, &mut out);
        self.gain * (dot(&s.u, &s.v) + out[0])
    }

    /// `V(q, z)`.
    pub fn similarity(&self, features: &[f64], z: &[f64]) -> f64 {
        let mut s = GuidanceScratch::new(self);
        let u = self.query_encode(features);
        self.similarity_from_u(&u, z, &mut s)
    }

    /// `V(q, z)` together with `∇_z V`, written into `grad_z`.
    pub fn similarity_grad_z(
        &self,
        features: &[f64],
        z: &[f64],
        grad_z: &mut [f64],
        s: &mut GuidanceScratch,
    ) -> f64 {
        let u = self.query_encode(features);
        let value = self.similarity_from_u(&u, z, s);
        // dV/dg1 via the cross head; the gain enters once at the output.
        self.cross2.backward_input(&[self.gain], &mut s.dg1);
        tanh_backward_inplace(&s.g1, &mut s.dg1);
        self.cross1.backward_input(&s.dg1, &mut s.dc);
        // dV/dv: dot-product term, direct v slot, and the u0v slot.
        for i in 0..EMBED_DIM {
            s.dv[i] = self.gain * s.u[i] + s.dc[EMBED_DIM + i] + s.u[i] * s.dc[2 * EMBED_DIM + i];
        }
        tanh_backward_inplace(&s.v, &mut s.dv);
        self.embed2.backward_input(&s.dv, &mut s.dh);
        tanh_backward_inplace(&s.h, &mut s.dh);
        self.embed1.backward_input(&s.dh, grad_z);
        value
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize guidance model: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::ModelMissing(path.to_path_buf()))?;
        let model: GuidanceModel = serde_json::from_str(&text)
            .map_err(|e| Error::ModelFormat { path: path.to_path_buf(), message: e.to_string() })?;
        if model.version != GUIDANCE_FORMAT_VERSION {
            return Err(Error::ModelFormat {
                path: path.to_path_buf(),
                message: format!(
                    "guidance format version {} (expected {})",
                    model.version, GUIDANCE_FORMAT_VERSION
                ),
            });
        }
        model.validate()?;
        Ok(model)
    }
}

/// One measured deployment: a query, the latent configuration it ran, a key
/// identifying the projected discrete configuration, and the recall.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogEntry {
    pub query_id: u64,
    pub config_key: u64,
    pub z: Vec<f64>,
    pub recall: f64,
}

/// Accumulated telemetry used to mine training pairs.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct PerformanceLog {
    pub entries: Vec<LogEntry>,
}

impl PerformanceLog {
    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        if !(0.0..=1.0).contains(&entry.recall) {
            return Err(Error::Parameter(format!(
                "logged recall {} outside [0, 1]",
                entry.recall
            )));
        }
        self.entries.push(entry);
        Ok(())
    }
}

/// Symmetric set of performance-positive query pairs. A query is always
/// positive with itself.
#[derive(Debug, Clone, Default)]
pub struct PairSet {
    pairs: HashSet<(u64, u64)>,
}

impl PairSet {
    pub fn insert(&mut self, a: u64, b: u64) {
        if a != b {
            self.pairs.insert((a.min(b), a.max(b)));
        }
    }

    pub fn is_positive(&self, a: u64, b: u64) -> bool {
        a == b || self.pairs.contains(&(a.min(b), a.max(b)))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Mine performance-positive query pairs: two queries pair when their
/// measured recalls under the *same* configuration differ by less than
/// `delta`.
pub fn mine_pairs(log: &PerformanceLog, delta: f64) -> Result<PairSet> {
    if !(delta > 0.0) {
        return Err(Error::Parameter("pair threshold delta must be positive".into()));
    }
    let mut by_config: HashMap<u64, Vec<&LogEntry>> = HashMap::new();
    for entry in &log.entries {
        by_config.entry(entry.config_key).or_default().push(entry);
    }
    let mut pairs = PairSet::default();
    for group in by_config.values() {
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                if a.query_id != b.query_id && (a.recall - b.recall).abs() < delta {
                    pairs.insert(a.query_id, b.query_id);
                }
            }
        }
    }
    Ok(pairs)
}

/// Parameter gradients for one contrastive batch.
#[derive(Debug, Clone)]
pub struct GuidanceGrads {
    pub encoder: AffineGrad,
    pub embed1: AffineGrad,
    pub embed2: AffineGrad,
    pub cross1: AffineGrad,
    pub cross2: AffineGrad,
}

impl GuidanceGrads {
    pub fn new(model: &GuidanceModel) -> Self {
        GuidanceGrads {
            encoder: model.encoder.grad_buffer(),
            embed1: model.embed1.grad_buffer(),
            embed2: model.embed2.grad_buffer(),
            cross1: model.cross1.grad_buffer(),
            cross2: model.cross2.grad_buffer(),
        }
    }

    fn reset(&mut self) {
        self.encoder.reset();
        self.embed1.reset();
        self.embed2.reset();
        self.cross1.reset();
        self.cross2.reset();
    }
}

struct PairActivation {
    h: Vec<f64>,
    v: Vec<f64>,
    c: Vec<f64>,
    g1: Vec<f64>,
    value: f64,
}

/// Loss and gradients for one batch of log entries under the multi-positive
/// temperature-scaled objective
///
/// ```text
/// L = mean over anchors q of  -(1/|P|) Σ_{z+ ∈ P} log softmax(V(q, z+)/τ)
/// ```
///
/// where the softmax runs over every configuration in the batch plus the
/// `background` latent points, and `P` is the set of batch configurations
/// whose query is `q` itself or a mined positive partner of `q`. Background
/// points are positive for no anchor: they anchor the similarity surface
/// *between* and beyond the logged configurations, where the sampler
/// actually walks, so the field cannot grow spurious off-data ridges.
/// Anchors with an empty candidate or positive set are skipped and counted.
pub fn batch_loss_and_grads(
    model: &GuidanceModel,
    batch: &[LogEntry],
    features: &HashMap<u64, Vec<f64>>,
    pairs: &PairSet,
    background: &[Vec<f64>],
    grads: &mut GuidanceGrads,
) -> Result<(f64, usize)> {
    grads.reset();
    if batch.is_empty() {
        return Ok((0.0, 0));
    }
    let tau = model.tau_c;
    let mut anchors: Vec<(u64, &Vec<f64>)> = Vec::new();
    let mut seen = HashSet::new();
    for entry in batch {
        if seen.insert(entry.query_id) {
            let f = features
                .get(&entry.query_id)
                .ok_or_else(|| Error::Parameter(format!("no features for query {}", entry.query_id)))?;
            anchors.push((entry.query_id, f));
        }
    }
    let cand_z: Vec<&[f64]> = batch
        .iter()
        .map(|e| e.z.as_slice())
        .chain(background.iter().map(|z| z.as_slice()))
        .collect();
    let cand_query: Vec<Option<u64>> = batch
        .iter()
        .map(|e| Some(e.query_id))
        .chain(background.iter().map(|_| None))
        .collect();

    // Precompute all pair activations once; reuse them in the backward pass.
    let mut total_loss = 0.0;
    let mut skipped = 0;
    let mut contributing = 0usize;
    let mut scratch = GuidanceScratch::new(model);
    let mut per_anchor: Vec<(usize, Vec<PairActivation>, Vec<f64>, Vec<bool>)> = Vec::new();

    for (a_idx, (qid, f)) in anchors.iter().enumerate() {
        let u = model.query_encode(f);
        let mut acts = Vec::with_capacity(cand_z.len());
        for z in &cand_z {
            let value = model.similarity_from_u(&u, z, &mut scratch);
            acts.push(PairActivation {
                h: scratch.h.clone(),
                v: scratch.v.clone(),
                c: scratch.c.clone(),
                g1: scratch.g1.clone(),
                value,
            });
        }
        let positive: Vec<bool> = cand_query
            .iter()
            .map(|c| matches!(c, Some(other) if pairs.is_positive(*qid, *other)))
            .collect();
        let n_pos = positive.iter().filter(|&&p| p).count();
        if n_pos == 0 {
            skipped += 1;
            continue;
        }
        contributing += 1;
        // Stable softmax over the batch.
        let max_v = acts.iter().map(|a| a.value).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = acts.iter().map(|a| ((a.value - max_v) / tau).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let mut anchor_loss = 0.0;
        for (j, &is_pos) in positive.iter().enumerate() {
            if is_pos {
                anchor_loss -= (exps[j] / denom).ln();
            }
        }
        total_loss += anchor_loss / n_pos as f64;
        let softmax: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        per_anchor.push((a_idx, acts, softmax, positive));
    }

    if contributing == 0 {
        return Ok((0.0, skipped));
    }
    let inv_anchors = 1.0 / contributing as f64;

    // Backward: dL/dV(q, z_j) = (softmax_j - pos_j / |P|) / tau, averaged
    // over anchors.
    let mut dg1 = vec![0.0; CROSS_HIDDEN];
    let mut dc = vec![0.0; CROSS_INPUT];
    let mut du = vec![0.0; EMBED_DIM];
    let mut dv = vec![0.0; EMBED_DIM];
    let mut dh = vec![0.0; EMBED_HIDDEN];
    for (a_idx, acts, softmax, positive) in &per_anchor {
        let (qid, f) = anchors[*a_idx];
        let _ = qid;
        let u = model.query_encode(f);
        let n_pos = positive.iter().filter(|&&p| p).count() as f64;
        for (j, act) in acts.iter().enumerate() {
            let pos_term = if positive[j] { 1.0 / n_pos } else { 0.0 };
            let w = (softmax[j] - pos_term) / tau * inv_anchors;
            if w == 0.0 {
                continue;
            }
            // Cross head parameters and input gradient.
            let gout = [w];
            model.cross2.backward_params(&act.g1, &gout, &mut grads.cross2);
            model.cross2.backward_input(&gout, &mut dg1);
            tanh_backward_inplace(&act.g1, &mut dg1);
            model.cross1.backward_params(&act.c, &dg1, &mut grads.cross1);
            model.cross1.backward_input(&dg1, &mut dc);
            // Tower gradients: dot product plus the cross-input slots.
            for i in 0..EMBED_DIM {
                du[i] = w * act.v[i] + dc[i] + act.v[i] * dc[2 * EMBED_DIM + i];
                dv[i] = w * u[i] + dc[EMBED_DIM + i] + u[i] * dc[2 * EMBED_DIM + i];
            }
            model.encoder.backward_params(f, &du, &mut grads.encoder);
            tanh_backward_inplace(&act.v, &mut dv);
            model.embed2.backward_params(&act.h, &dv, &mut grads.embed2);
            model.embed2.backward_input(&dv, &mut dh);
            tanh_backward_inplace(&act.h, &mut dh);
            model.embed1.backward_params(cand_z[j], &dh, &mut grads.embed1);
        }
    }

    Ok((total_loss * inv_anchors, skipped))
}

/// One gradient step on a batch; returns the batch loss and the number of
/// skipped anchors.
pub fn train_contrastive(
    model: &mut GuidanceModel,
    batch: &[LogEntry],
    features: &HashMap<u64, Vec<f64>>,
    pairs: &PairSet,
    background: &[Vec<f64>],
    lr: f64,
) -> Result<(f64, usize)> {
    let mut grads = GuidanceGrads::new(model);
    let (loss, skipped) =
        batch_loss_and_grads(model, batch, features, pairs, background, &mut grads)?;
    model.encoder.apply_step(&grads.encoder, lr);
    model.embed1.apply_step(&grads.embed1, lr);
    model.embed2.apply_step(&grads.embed2, lr);
    model.cross1.apply_step(&grads.cross1, lr);
    model.cross2.apply_step(&grads.cross2, lr);
    Ok((loss, skipped))
}

/// Training hyperparameters for the full driver.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceTrainParams {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub pair_delta: f64,
    /// Mean `‖∇_z V‖` over the prior shell that the fitted field is rescaled
    /// to (via the model gain). Zero leaves the raw field untouched.
    pub pull_target: f64,
    /// Random latent points mixed into each batch's candidate set as
    /// universal negatives; they pin the similarity surface down away from
    /// the logged configurations. Zero disables.
    pub background_per_batch: usize,
}

impl Default for GuidanceTrainParams {
    fn default() -> Self {
        GuidanceTrainParams {
            epochs: 30,
            batch_size: 16,
            lr: 0.05,
            pair_delta: 0.01,
            pull_target: 200.0,
            background_per_batch: 8,
        }
    }
}

/// Shuffled mini-batch training over a performance log. Returns the per-step
/// loss curve.
///
/// Fitting runs at gain 1; afterwards the gain is set so the mean gradient
/// norm over the prior shell (radius `sqrt(latent_dim)`) equals
/// `pull_target`. The contrastive objective only constrains the field's
/// direction, so its overall strength is a free scale that must be pinned
/// independently for the sampler's step sizes to mean anything.
pub fn train_guidance(
    model: &mut GuidanceModel,
    log: &PerformanceLog,
    features: &HashMap<u64, Vec<f64>>,
    params: &GuidanceTrainParams,
    seed: u64,
) -> Result<Vec<f64>> {
    if log.entries.is_empty() {
        return Err(Error::Parameter("performance log is empty".into()));
    }
    model.gain = 1.0;
    let pairs = mine_pairs(log, params.pair_delta)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..log.entries.len()).collect();
    let mut curve = Vec::new();
    // Background negatives cover the region the sampler can reach: the prior
    // concentrates near radius sqrt(dim), so half again that radius brackets
    // both the initialization shell and the interior the walk contracts into.
    let dim = model.latent_dim;
    let n_bg = params.background_per_batch;
    let bg_radius = 1.5 * (dim as f64).sqrt();
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    // Half the backgrounds are uniform over the reachable ball and pin the
    // far field down; the other half are jittered copies of the batch's own
    // configurations, which carve the similarity surface into local peaks
    // *at* the logged optima rather than broad ridges past them. A peaked
    // field both points the walk at the right neighborhood and stiffens the
    // basin once it arrives.
    let sample_background = move |rng: &mut ChaCha12Rng, batch: &[LogEntry]| -> Vec<Vec<f64>> {
        (0..n_bg)
            .map(|i| {
                if i % 2 == 1 && !batch.is_empty() {
                    let src = &batch[rng.random_range(0..batch.len())].z;
                    src.iter().map(|&v| v + 0.75 * rng.sample(normal)).collect()
                } else {
                    let mut z: Vec<f64> = (0..dim).map(|_| rng.sample(normal)).collect();
                    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let r = bg_radius * rng.random_range(0.0f64..1.0).powf(1.0 / dim as f64);
                    for v in &mut z {
                        *v *= r / norm;
                    }
                    z
                }
            })
            .collect()
    };
    for _ in 0..params.epochs {
        // Fisher-Yates shuffle.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(params.batch_size) {
            let batch: Vec<LogEntry> =
                chunk.iter().map(|&i| log.entries[i].clone()).collect();
            let background = sample_background(&mut rng, &batch);
            let (loss, _) =
                train_contrastive(model, &batch, features, &pairs, &background, params.lr)?;
            curve.push(loss);
        }
    }
    if params.pull_target > 0.0 {
        let mut ids: Vec<u64> = log.entries.iter().map(|e| e.query_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let rows: Vec<Vec<f64>> =
            ids.iter().filter_map(|id| features.get(id).cloned()).collect();
        let shell = (model.latent_dim as f64).sqrt();
        let stats = gradient_field_stats(model, &rows, 128, shell, seed ^ 0x5CA1E)?;
        if stats.mean_norm > 1e-9 {
            model.gain = params.pull_target / stats.mean_norm;
        }
    }
    Ok(curve)
}

/// Empirical statistics of the guidance gradient field over a sampled region
/// of latent space: the supremum bound `D`, the mean norm, and a
/// finite-difference Lipschitz estimate `L_V` of the gradient map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientFieldStats {
    pub sup_norm: f64,
    pub mean_norm: f64,
    pub lipschitz: f64,
    pub samples: usize,
}

/// Sample `n` points inside the manifold ball of the given radius and probe
/// `∇_z V` for each query in `feature_rows`.
pub fn gradient_field_stats(
    model: &GuidanceModel,
    feature_rows: &[Vec<f64>],
    n: usize,
    radius: f64,
    seed: u64,
) -> Result<GradientFieldStats> {
    if feature_rows.is_empty() || n == 0 {
        return Err(Error::Parameter("gradient probe needs queries and samples".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dim = model.latent_dim;
    let mut scratch = GuidanceScratch::new(model);
    let mut grad = vec![0.0; dim];
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut sup_norm: f64 = 0.0;
    let mut sum_norm = 0.0;
    let mut lipschitz: f64 = 0.0;
    let mut count = 0usize;
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..n {
        // Uniform direction, radius warped toward the boundary measure.
        let mut z: Vec<f64> = (0..dim).map(|_| rng.sample(normal)).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let r = radius * rng.random_range(0.0f64..1.0).powf(1.0 / dim as f64);
        for v in &mut z {
            *v *= r / norm;
        }
        let features = &feature_rows[i % feature_rows.len()];
        model.similarity_grad_z(features, &z, &mut grad, &mut scratch);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        sup_norm = sup_norm.max(gnorm);
        sum_norm += gnorm;
        count += 1;
        if let Some((pz, pg)) = &prev {
            let dz: f64 = z.iter().zip(pz).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dz > 1e-9 {
                let dg: f64 =
                    grad.iter().zip(pg).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                lipschitz = lipschitz.max(dg / dz);
            }
        }
        // A close-by probe sharpens the local Lipschitz estimate.
        let mut z2 = z.clone();
        z2[i % dim] += 1e-3;
        let mut grad2 = vec![0.0; dim];
        model.similarity_grad_z(features, &z2, &mut grad2, &mut scratch);
        let dg: f64 =
            grad2.iter().zip(&grad).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        lipschitz = lipschitz.max(dg / 1e-3);
        prev = Some((z, grad.clone()));
    }
    let stats = GradientFieldStats {
        sup_norm,
        mean_norm: sum_norm / count as f64,
        lipschitz,
        samples: count,
    };
    if !stats.sup_norm.is_finite() || !stats.lipschitz.is_finite() {
        return Err(Error::Diagnostic("guidance gradient field is unbounded".into()));
    }
    Ok(stats)
}
