//! The discrete configuration lattice and the maps between it and the
//! continuous relaxation the sampler works in.
//!
//! A space is a list of named dimensions. Each dimension is either a strided
//! lattice (`kind = "range"`, anchored at `min`, or `modulus = m` for plain
//! multiples of `m`) or an explicit value set (`kind = "set"`). The default
//! space is three-dimensional: candidate depth `k` in `[1, 10000]`, block
//! size as multiples of 64 in `[64, 1024]`, and quantization bits in
//! `{4, 8}`.
//!
//! Projection minimizes per-dimension range-width-normalized squared
//! distance. The metric is separable, so the exact minimizer is the nearest
//! feasible value in each dimension independently; ties break toward the
//! smaller (cheaper) value. `project` does lattice rounding plus a one-stride
//! check in each direction, which is exact under this metric — the test suite
//! holds it against a brute-force enumeration oracle.

use serde::Deserialize;
use std::path::Path;

use crate::error::{Error, Result};

/// A feasible point: one integer per dimension, in the order the space
/// declares them. For the default space, `values[0]` is `k`, `values[1]` is
/// `block_size`, `values[2]` is `quant_bits`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Configuration {
    pub values: Vec<i64>,
}

impl Configuration {
    pub fn new(values: Vec<i64>) -> Self {
        Configuration { values }
    }

    /// Candidate depth in the canonical three-dimensional space.
    pub fn k(&self) -> i64 {
        self.values[0]
    }

    pub fn block_size(&self) -> i64 {
        self.values[1]
    }

    pub fn quant_bits(&self) -> i64 {
        self.values[2]
    }
}

/// A relaxed point in the continuous hull of the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftConfiguration {
    pub values: Vec<f64>,
}

impl SoftConfiguration {
    pub fn new(values: Vec<f64>) -> Self {
        SoftConfiguration { values }
    }

    pub fn k(&self) -> f64 {
        self.values[0]
    }

    pub fn block_size(&self) -> f64 {
        self.values[1]
    }

    pub fn quant_bits(&self) -> f64 {
        self.values[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
enum DimensionValues {
    /// `first + i * step` for `i` in `0..count`.
    Lattice { first: i64, step: i64, count: i64 },
    /// Sorted, unique, non-empty.
    Set { values: Vec<i64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimensionSpec {
    pub name: String,
    values: DimensionValues,
}

impl DimensionSpec {
    pub fn lattice(name: &str, min: i64, max: i64, stride: i64) -> Result<Self> {
        if stride <= 0 {
            return Err(Error::Config(format!("dimension {name}: stride must be positive")));
        }
        if max < min {
            return Err(Error::EmptyFeasibleSet(format!("dimension {name}: max < min")));
        }
        let count = (max - min) / stride + 1;
        Ok(DimensionSpec {
            name: name.to_string(),
            values: DimensionValues::Lattice { first: min, step: stride, count },
        })
    }

    /// Multiples of `modulus` inside `[min, max]`.
    pub fn multiples(name: &str, min: i64, max: i64, modulus: i64) -> Result<Self> {
        if modulus <= 0 {
            return Err(Error::Config(format!("dimension {name}: modulus must be positive")));
        }
        let first = min.div_euclid(modulus) * modulus;
        let first = if first < min { first + modulus } else { first };
        if first > max {
            return Err(Error::EmptyFeasibleSet(format!(
                "dimension {name}: no multiple of {modulus} in [{min}, {max}]"
            )));
        }
        let count = (max - first) / modulus + 1;
        Ok(DimensionSpec {
            name: name.to_string(),
            values: DimensionValues::Lattice { first, step: modulus, count },
        })
    }

    pub fn set(name: &str, mut values: Vec<i64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyFeasibleSet(format!("dimension {name}: empty value set")));
        }
        values.sort_unstable();
        if values.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("dimension {name}: duplicate values in set")));
        }
        Ok(DimensionSpec { name: name.to_string(), values: DimensionValues::Set { values } })
    }

    pub fn min_value(&self) -> i64 {
        match &self.values {
            DimensionValues::Lattice { first, .. } => *first,
            DimensionValues::Set { values } => values[0],
        }
    }

    pub fn max_value(&self) -> i64 {
        match &self.values {
            DimensionValues::Lattice { first, step, count } => first + step * (count - 1),
            DimensionValues::Set { values } => *values.last().unwrap(),
        }
    }

    /// Continuous hull `[min, max]` as floats.
    pub fn hull(&self) -> (f64, f64) {
        (self.min_value() as f64, self.max_value() as f64)
    }

    /// Hull width used by the normalized metric; single-valued dimensions
    /// count as width 1 so they contribute zero distance without dividing
    /// by zero.
    pub fn width(&self) -> f64 {
        let (lo, hi) = self.hull();
        if hi > lo {
            hi - lo
        } else {
            1.0
        }
    }

    pub fn cardinality(&self) -> u128 {
        match &self.values {
            DimensionValues::Lattice { count, .. } => *count as u128,
            DimensionValues::Set { values } => values.len() as u128,
        }
    }

    pub fn contains(&self, v: i64) -> bool {
        match &self.values {
            DimensionValues::Lattice { first, step, count } => {
                v >= *first && (v - first) % step == 0 && (v - first) / step < *count
            }
            DimensionValues::Set { values } => values.binary_search(&v).is_ok(),
        }
    }

    /// Nearest feasible value to `x`; exact ties go to the smaller value.
    pub fn nearest(&self, x: f64) -> i64 {
        match &self.values {
            DimensionValues::Lattice { first, step, count } => {
                let t = (x - *first as f64) / *step as f64;
                let i = t.floor();
                let frac = t - i;
                let mut idx = if frac > 0.5 { i + 1.0 } else { i };
                if idx < 0.0 {
                    idx = 0.0;
                }
                let max_idx = (*count - 1) as f64;
                if idx > max_idx {
                    idx = max_idx;
                }
                first + step * idx as i64
            }
            DimensionValues::Set { values } => {
                let mut best = values[0];
                let mut best_d = (x - best as f64).abs();
                for &v in &values[1..] {
                    let d = (x - v as f64).abs();
                    // Strict inequality keeps the smaller value on ties.
                    if d < best_d {
                        best = v;
                        best_d = d;
                    }
                }
                best
            }
        }
    }

    /// Next smaller / next larger feasible value, if any.
    pub fn step_down(&self, v: i64) -> Option<i64> {
        match &self.values {
            DimensionValues::Lattice { first, step, .. } => {
                let down = v - step;
                (down >= *first).then_some(down)
            }
            DimensionValues::Set { values } => match values.binary_search(&v) {
                Ok(i) if i > 0 => Some(values[i - 1]),
                _ => None,
            },
        }
    }

    pub fn step_up(&self, v: i64) -> Option<i64> {
        match &self.values {
            DimensionValues::Lattice { first, step, count } => {
                let up = v + step;
                (up <= first + step * (count - 1)).then_some(up)
            }
            DimensionValues::Set { values } => match values.binary_search(&v) {
                Ok(i) if i + 1 < values.len() => Some(values[i + 1]),
                _ => None,
            },
        }
    }

    pub fn iter_values(&self) -> Box<dyn Iterator<Item = i64> + '_> {
        match &self.values {
            DimensionValues::Lattice { first, step, count } => {
                let (first, step) = (*first, *step);
                Box::new((0..*count).map(move |i| first + step * i))
            }
            DimensionValues::Set { values } => Box::new(values.iter().copied()),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimensionFile {
    name: String,
    kind: String,
    min: Option<i64>,
    max: Option<i64>,
    stride: Option<i64>,
    modulus: Option<i64>,
    values: Option<Vec<i64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    dimension: Vec<DimensionFile>,
}

/// The feasible configuration space: an ordered list of dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSpaceSpec {
    pub dimensions: Vec<DimensionSpec>,
}

impl FeasibleSpaceSpec {
    pub fn new(dimensions: Vec<DimensionSpec>) -> Result<Self> {
        if dimensions.is_empty() {
            return Err(Error::EmptyFeasibleSet("space has no dimensions".into()));
        }
        Ok(FeasibleSpaceSpec { dimensions })
    }

    /// The canonical serving space: `k`, `block_size`, `quant_bits`.
    pub fn default_space() -> Self {
        FeasibleSpaceSpec {
            dimensions: vec![
                DimensionSpec::lattice("k", 1, 10_000, 1).unwrap(),
                DimensionSpec::multiples("block_size", 64, 1024, 64).unwrap(),
                DimensionSpec::set("quant_bits", vec![4, 8]).unwrap(),
            ],
        }
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let file: SpaceFile =
            toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        let mut dims = Vec::with_capacity(file.dimension.len());
        for d in &file.dimension {
            let dim = match d.kind.as_str() {
                "range" => {
                    let min = d.min.ok_or_else(|| {
                        Error::Config(format!("dimension {}: range needs min", d.name))
                    })?;
                    let max = d.max.ok_or_else(|| {
                        Error::Config(format!("dimension {}: range needs max", d.name))
                    })?;
                    if d.values.is_some() {
                        return Err(Error::Config(format!(
                            "dimension {}: values not allowed for kind = range",
                            d.name
                        )));
                    }
                    match (d.stride, d.modulus) {
                        (Some(_), Some(_)) => {
                            return Err(Error::Config(format!(
                                "dimension {}: give stride or modulus, not both",
                                d.name
                            )))
                        }
                        (Some(s), None) => DimensionSpec::lattice(&d.name, min, max, s)?,
                        (None, Some(m)) => DimensionSpec::multiples(&d.name, min, max, m)?,
                        (None, None) => DimensionSpec::lattice(&d.name, min, max, 1)?,
                    }
                }
                "set" => {
                    let values = d.values.clone().ok_or_else(|| {
                        Error::Config(format!("dimension {}: set needs values", d.name))
                    })?;
                    if d.min.is_some() || d.max.is_some() || d.stride.is_some() || d.modulus.is_some()
                    {
                        return Err(Error::Config(format!(
                            "dimension {}: min/max/stride/modulus not allowed for kind = set",
                            d.name
                        )));
                    }
                    DimensionSpec::set(&d.name, values)?
                }
                other => {
                    return Err(Error::Config(format!(
                        "dimension {}: unknown kind {other:?} (expected \"range\" or \"set\")",
                        d.name
                    )))
                }
            };
            dims.push(dim);
        }
        FeasibleSpaceSpec::new(dims)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn n_dims(&self) -> usize {
        self.dimensions.len()
    }

    fn check_arity(&self, got: usize) -> Result<()> {
        if got != self.n_dims() {
            return Err(Error::DimensionMismatch { expected: self.n_dims(), got });
        }
        Ok(())
    }

    /// Is `omega` a feasible lattice point?
    pub fn validate(&self, omega: &Configuration) -> Result<bool> {
        self.check_arity(omega.values.len())?;
        Ok(self
            .dimensions
            .iter()
            .zip(&omega.values)
            .all(|(dim, &v)| dim.contains(v)))
    }

    /// Is `soft` inside the continuous hull (inclusive)?
    pub fn in_hull(&self, soft: &SoftConfiguration) -> Result<bool> {
        self.check_arity(soft.values.len())?;
        Ok(self.dimensions.iter().zip(&soft.values).all(|(dim, &x)| {
            let (lo, hi) = dim.hull();
            x.is_finite() && x >= lo && x <= hi
        }))
    }

    /// Clamp a relaxed point onto the continuous hull.
    pub fn clamp_to_hull(&self, soft: &SoftConfiguration) -> Result<SoftConfiguration> {
        self.check_arity(soft.values.len())?;
        let values = self
            .dimensions
            .iter()
            .zip(&soft.values)
            .map(|(dim, &x)| {
                let (lo, hi) = dim.hull();
                x.clamp(lo, hi)
            })
            .collect();
        Ok(SoftConfiguration::new(values))
    }

    /// Exact projection onto the lattice under the normalized metric.
    /// Separability makes the per-dimension nearest value exact; a one-stride
    /// neighborhood check guards the rounding step.
    pub fn project(&self, soft: &SoftConfiguration) -> Result<Configuration> {
        self.check_arity(soft.values.len())?;
        if soft.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diagnostic("project: non-finite soft configuration".into()));
        }
        let mut out = Vec::with_capacity(self.n_dims());
        for (dim, &x) in self.dimensions.iter().zip(&soft.values) {
            let mut best = dim.nearest(x);
            let mut best_d = (x - best as f64).abs();
            for cand in [dim.step_down(best), dim.step_up(best)].into_iter().flatten() {
                let d = (x - cand as f64).abs();
                if d < best_d || (d == best_d && cand < best) {
                    best = cand;
                    best_d = d;
                }
            }
            out.push(best);
        }
        Ok(Configuration::new(out))
    }

    /// Lift a lattice point into the continuous hull.
    pub fn embed(&self, omega: &Configuration) -> Result<SoftConfiguration> {
        self.check_arity(omega.values.len())?;
        Ok(SoftConfiguration::new(omega.values.iter().map(|&v| v as f64).collect()))
    }

    /// Range-width-normalized squared distance between a relaxed point and a
    /// lattice point; this is the metric `project` minimizes.
    pub fn normalized_distance(&self, soft: &SoftConfiguration, omega: &Configuration) -> f64 {
        self.dimensions
            .iter()
            .zip(&soft.values)
            .zip(&omega.values)
            .map(|((dim, &x), &v)| {
                let d = (x - v as f64) / dim.width();
                d * d
            })
            .sum()
    }

    pub fn cardinality(&self) -> u128 {
        self.dimensions.iter().map(|d| d.cardinality()).product()
    }

    /// All feasible points, last dimension fastest. Refuses to materialize
    /// more than `max_points`.
    pub fn enumerate(&self, max_points: u128) -> Result<Vec<Configuration>> {
        let cardinality = self.cardinality();
        if cardinality > max_points {
            return Err(Error::CardinalityOverflow { cardinality, max_points });
        }
        let mut out = Vec::with_capacity(cardinality as usize);
        let mut current: Vec<i64> = self.dimensions.iter().map(|d| d.min_value()).collect();
        'outer: loop {
            out.push(Configuration::new(current.clone()));
            for i in (0..self.n_dims()).rev() {
                if let Some(next) = self.dimensions[i].step_up(current[i]) {
                    current[i] = next;
                    for j in i + 1..self.n_dims() {
                        current[j] = self.dimensions[j].min_value();
                    }
                    continue 'outer;
                }
            }
            break;
        }
        Ok(out)
    }
}

/// Outcome of a repair pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepairOutcome {
    /// Quality already met the bound; configuration returned as-is.
    Unchanged,
    /// Local search recovered the bound.
    Recovered,
    /// Move budget ran out; best configuration found so far is returned.
    BudgetExhausted,
}

/// Discrete quality repair: greedy coordinate search over one-stride
/// neighbors, driven by the supplied quality estimator. `budget` counts
/// coordinate moves; each move evaluates every one-stride neighbor and takes
/// the best. Returns the best configuration seen when the budget runs out.
pub fn repair(
    omega: &Configuration,
    spec: &FeasibleSpaceSpec,
    quality: &dyn Fn(&Configuration) -> f64,
    baseline_recall: f64,
    eps_proj: f64,
    budget: u32,
) -> Result<(Configuration, RepairOutcome)> {
    spec.check_arity(omega.values.len())?;
    if !spec.validate(omega)? {
        return Err(Error::Config("repair: starting configuration is infeasible".into()));
    }
    if eps_proj < 0.0 {
        return Err(Error::Parameter("repair: eps_proj must be nonnegative".into()));
    }
    let bound = baseline_recall - eps_proj;
    let mut current = omega.clone();
    let mut current_q = quality(&current);
    if current_q >= bound {
        return Ok((current, RepairOutcome::Unchanged));
    }
    let mut best = current.clone();
    let mut best_q = current_q;
    for _ in 0..budget {
        let mut chosen: Option<(Configuration, f64)> = None;
        for (i, dim) in spec.dimensions.iter().enumerate() {
            for cand_v in [dim.step_down(current.values[i]), dim.step_up(current.values[i])]
                .into_iter()
                .flatten()
            {
                let mut cand = current.clone();
                cand.values[i] = cand_v;
                let q = quality(&cand);
                // Strict improvement over the incumbent candidate keeps the
                // scan order (dimension-major, smaller value first) as the
                // deterministic tie-break.
                if chosen.as_ref().is_none_or(|(_, cq)| q > *cq) {
                    chosen = Some((cand, q));
                }
            }
        }
        let Some((next, next_q)) = chosen else { break };
        // A strictly worse best neighbor means a local maximum; stop early.
        if next_q <= current_q && next_q <= best_q {
            break;
        }
        current = next;
        current_q = next_q;
        if current_q > best_q {
            best = current.clone();
            best_q = current_q;
        }
        if current_q >= bound {
            return Ok((current, RepairOutcome::Recovered));
        }
    }
    Ok((best, RepairOutcome::BudgetExhausted))
}
