//! Deterministic stratified Monte Carlo integration over boxes and
//! implicitly defined regions.
//!
//! Determinism contract: the sample set is a pure function of
//! `(seed, config, box)`. Each stratum draws from its own counter-based
//! substream (ChaCha8 keyed by the seed with the stratum index as stream id),
//! and results are reduced in stratum order, so the estimate is bit-identical
//! no matter how many worker threads participate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::BoundingBox;

/// Number of interleaved batches kept per sweep; downstream quotient error
/// propagation re-estimates from these.
pub const BATCHES: usize = 10;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Substream master seed.
    pub seed: u64,
    /// Total sample count for the initial stratified pass.
    pub budget: u64,
    /// Equal-volume strata per axis; total strata = strata_per_axis^N.
    pub strata_per_axis: u32,
    /// Optional relative standard error target; triggers refinement.
    pub target_rel_stderr: Option<f64>,
    /// Maximum number of highest-variance stratum splits.
    pub max_refinements: u32,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            budget: 1_000_000,
            strata_per_axis: 8,
            target_rel_stderr: None,
            max_refinements: 8,
        }
    }
}

impl QuadratureConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.budget == 0 || self.strata_per_axis == 0 {
            return Err(Error::InvalidConfig(
                "budget and strata_per_axis must be positive".into(),
            ));
        }
        let strata = (self.strata_per_axis as u64).checked_pow(dim as u32);
        match strata {
            Some(s) if s <= self.budget && s <= (1 << 24) => Ok(()),
            Some(_) => Err(Error::InvalidConfig(format!(
                "strata_per_axis^{dim} exceeds the budget (need budget >= strata count)"
            ))),
            None => Err(Error::InvalidConfig("stratum count overflows".into())),
        }
    }
}

/// Status flags attached to an estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateFlags {
    pub budget_exhausted: bool,
    pub singular_region_excluded: bool,
    pub fallback_box: bool,
    pub zero_hits: bool,
}

impl EstimateFlags {
    pub fn any(&self) -> bool {
        self.budget_exhausted || self.singular_region_excluded || self.fallback_box || self.zero_hits
    }
}

/// A Monte Carlo integral estimate with its stratified standard error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntegralEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
    pub flags: EstimateFlags,
}

impl IntegralEstimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            stderr: 0.0,
            samples: 0,
            flags: EstimateFlags::default(),
        }
    }

    /// Quadrature-combined standard error of several estimates.
    pub fn combined_stderr(parts: &[&IntegralEstimate]) -> f64 {
        parts
            .iter()
            .map(|e| e.stderr * e.stderr)
            .sum::<f64>()
            .sqrt()
    }
}

/// One integration subdomain with its dedicated RNG stream.
#[derive(Clone, Debug)]
struct Stratum {
    lo: Vec<f64>,
    hi: Vec<f64>,
    stream: u64,
    n: u64,
}

impl Stratum {
    fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    fn longest_axis(&self) -> usize {
        let mut best = 0;
        let mut best_w = f64::NEG_INFINITY;
        for (i, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            let w = h - l;
            if w > best_w {
                best_w = w;
                best = i;
            }
        }
        best
    }
}

/// Raw per-stratum accumulation for a set of integrands sharing one sample set.
struct StratumSums {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    batch_sum: Vec<[f64; BATCHES]>,
    batch_count: [u64; BATCHES],
    hits: u64,
    n: u64,
    bad: Option<(Vec<f64>, f64)>,
}

fn sample_stratum(
    stratum: &Stratum,
    seed: u64,
    integrands: &[&(dyn Fn(&[f64]) -> f64 + Sync)],
    indicator: Option<&(dyn Fn(&[f64]) -> bool + Sync)>,
) -> StratumSums {
    let k = integrands.len();
    let dim = stratum.lo.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stratum.stream);
    let mut out = StratumSums {
        sum: vec![0.0; k],
        sumsq: vec![0.0; k],
        batch_sum: vec![[0.0; BATCHES]; k],
        batch_count: [0; BATCHES],
        hits: 0,
        n: stratum.n,
        bad: None,
    };
    let mut point = vec![0.0; dim];
    for j in 0..stratum.n {
        for d in 0..dim {
            let u: f64 = rng.gen();
            point[d] = stratum.lo[d] + u * (stratum.hi[d] - stratum.lo[d]);
        }
        let batch = (j % BATCHES as u64) as usize;
        out.batch_count[batch] += 1;
        let inside = indicator.map_or(true, |ind| ind(&point));
        if !inside {
            continue;
        }
        out.hits += 1;
        for (idx, f) in integrands.iter().enumerate() {
            let v = f(&point);
            if !v.is_finite() {
                if out.bad.is_none() {
                    out.bad = Some((point.clone(), v));
                }
                continue;
            }
            out.sum[idx] += v;
            out.sumsq[idx] += v * v;
            out.batch_sum[idx][batch] += v;
        }
    }
    out
}

/// Result of a multi-integrand sweep over one shared sample set.
pub(crate) struct SweepOutput {
    pub estimates: Vec<IntegralEstimate>,
    /// Per integrand, per batch: the stratified estimate restricted to that batch.
    pub batch_values: Vec<[f64; BATCHES]>,
    pub hit_fraction: f64,
}

/// Stratified sweep evaluating several integrands on one deterministic sample
/// set. No refinement: the sample set depends only on (seed, config, box).
pub(crate) fn sweep(
    integrands: &[&(dyn Fn(&[f64]) -> f64 + Sync)],
    indicator: Option<&(dyn Fn(&[f64]) -> bool + Sync)>,
    bbox: &BoundingBox,
    config: &QuadratureConfig,
) -> Result<SweepOutput> {
    config.validate(bbox.dim())?;
    let strata = initial_strata(bbox, config);
    let results: Vec<StratumSums> = strata
        .par_iter()
        .map(|s| sample_stratum(s, config.seed, integrands, indicator))
        .collect();
    reduce(&strata, &results, integrands.len())
}

fn initial_strata(bbox: &BoundingBox, config: &QuadratureConfig) -> Vec<Stratum> {
    let dim = bbox.dim();
    let m = config.strata_per_axis as u64;
    let count = m.pow(dim as u32);
    let base = config.budget / count;
    let extra = config.budget % count;
    let widths = bbox.widths();
    let mut out = Vec::with_capacity(count as usize);
    for idx in 0..count {
        let mut rem = idx;
        let mut lo = vec![0.0; dim];
        let mut hi = vec![0.0; dim];
        for d in 0..dim {
            let cell = rem % m;
            rem /= m;
            let w = widths[d] / m as f64;
            lo[d] = bbox.lo[d] + cell as f64 * w;
            hi[d] = if cell + 1 == m {
                bbox.hi[d]
            } else {
                bbox.lo[d] + (cell + 1) as f64 * w
            };
        }
        out.push(Stratum {
            lo,
            hi,
            stream: idx,
            n: base + u64::from(idx < extra),
        });
    }
    out
}

fn reduce(strata: &[Stratum], results: &[StratumSums], k: usize) -> Result<SweepOutput> {
    // First non-finite sample wins, in stratum order, for deterministic errors.
    for r in results {
        if let Some((point, value)) = &r.bad {
            return Err(Error::NonFiniteSample {
                point: point.clone(),
                value: *value,
            });
        }
    }
    let mut estimates = Vec::with_capacity(k);
    let mut batch_values = vec![[0.0; BATCHES]; k];
    let mut total_samples = 0u64;
    let mut total_hits = 0u64;
    for r in results {
        total_samples += r.n;
        total_hits += r.hits;
    }
    for idx in 0..k {
        let mut value = 0.0;
        let mut var = 0.0;
        for (s, r) in strata.iter().zip(results) {
            if r.n == 0 {
                continue;
            }
            let vol = s.volume();
            let n = r.n as f64;
            let mean = r.sum[idx] / n;
            value += vol * mean;
            if r.n >= 2 {
                let sv = ((r.sumsq[idx] - r.sum[idx] * r.sum[idx] / n) / (n - 1.0)).max(0.0);
                var += vol * vol * sv / n;
            }
            for b in 0..BATCHES {
                if r.batch_count[b] > 0 {
                    batch_values[idx][b] += vol * r.batch_sum[idx][b] / r.batch_count[b] as f64;
                }
            }
        }
        estimates.push(IntegralEstimate {
            value,
            stderr: var.sqrt(),
            samples: total_samples,
            flags: EstimateFlags::default(),
        });
    }
    let hit_fraction = if total_samples == 0 {
        0.0
    } else {
        total_hits as f64 / total_samples as f64
    };
    Ok(SweepOutput {
        estimates,
        batch_values,
        hit_fraction,
    })
}

/// Estimate `integral of f over the box`.
///
/// Deterministic given `(seed, config)`, independent of worker thread count.
/// Fails with the offending point if the integrand returns a non-finite value.
pub fn integrate_box(
    integrand: impl Fn(&[f64]) -> f64 + Sync,
    bbox: &BoundingBox,
    config: &QuadratureConfig,
) -> Result<IntegralEstimate> {
    integrate_impl(&integrand, None, bbox, config)
}

/// Estimate `integral of f * 1_region` where the region is given by an
/// indicator, true only inside the box. Zero hits yields a flagged zero.
pub fn integrate_region(
    integrand: impl Fn(&[f64]) -> f64 + Sync,
    indicator: impl Fn(&[f64]) -> bool + Sync,
    bbox: &BoundingBox,
    config: &QuadratureConfig,
) -> Result<IntegralEstimate> {
    integrate_impl(&integrand, Some(&indicator), bbox, config)
}

fn integrate_impl(
    integrand: &(dyn Fn(&[f64]) -> f64 + Sync),
    indicator: Option<&(dyn Fn(&[f64]) -> bool + Sync)>,
    bbox: &BoundingBox,
    config: &QuadratureConfig,
) -> Result<IntegralEstimate> {
    config.validate(bbox.dim())?;
    let mut strata = initial_strata(bbox, config);
    let mut results: Vec<StratumSums> = strata
        .par_iter()
        .map(|s| sample_stratum(s, config.seed, &[integrand], indicator))
        .collect();

    let mut next_stream = strata.len() as u64;
    let mut refinements = 0u32;
    let mut flags = EstimateFlags::default();
    loop {
        let out = reduce(&strata, &results, 1)?;
        let est = &out.estimates[0];
        let target_met = match config.target_rel_stderr {
            None => true,
            Some(t) => est.stderr <= t * est.value.abs().max(f64::MIN_POSITIVE),
        };
        if target_met || refinements >= config.max_refinements {
            let mut est = out.estimates.into_iter().next().unwrap();
            if !target_met {
                flags.budget_exhausted = true;
            }
            if indicator.is_some() && out.hit_fraction == 0.0 {
                flags.zero_hits = true;
            }
            est.flags = flags;
            return Ok(est);
        }

        // Split the stratum with the largest variance contribution; ties break
        // to the lowest index so the refinement path is deterministic.
        let mut worst = 0usize;
        let mut worst_contrib = f64::NEG_INFINITY;
        for (i, (s, r)) in strata.iter().zip(&results).enumerate() {
            if r.n < 2 {
                continue;
            }
            let n = r.n as f64;
            let sv = ((r.sumsq[0] - r.sum[0] * r.sum[0] / n) / (n - 1.0)).max(0.0);
            let contrib = s.volume() * s.volume() * sv / n;
            if contrib > worst_contrib {
                worst_contrib = contrib;
                worst = i;
            }
        }
        if !worst_contrib.is_finite() || worst_contrib <= 0.0 {
            let mut est = reduce(&strata, &results, 1)?.estimates.into_iter().next().unwrap();
            flags.budget_exhausted = true;
            est.flags = flags;
            return Ok(est);
        }

        let parent = strata.remove(worst);
        results.remove(worst);
        let axis = parent.longest_axis();
        let mid = 0.5 * (parent.lo[axis] + parent.hi[axis]);
        let mut left = parent.clone();
        let mut right = parent.clone();
        left.hi[axis] = mid;
        right.lo[axis] = mid;
        left.stream = next_stream;
        right.stream = next_stream + 1;
        next_stream += 2;
        let (lr, rr) = rayon::join(
            || sample_stratum(&left, config.seed, &[integrand], indicator),
            || sample_stratum(&right, config.seed, &[integrand], indicator),
        );
        strata.push(left);
        results.push(lr);
        strata.push(right);
        results.push(rr);
        refinements += 1;
    }
}
