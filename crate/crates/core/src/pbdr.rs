//! Price-based demand response: the two synthetic customer families, population
//! sampling and price→demand dataset synthesis.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::model::Session;

/// Customer who trades charging cost against how closely the final battery level
/// meets a trip requirement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityMaxPattern {
    pub gamma1: f64,
    pub gamma2: f64,
    pub eta: f64,
    pub e_init: f64,
    pub e_trip: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub p_max: f64,
    pub t_arrival: usize,
    pub t_depart: usize,
}

impl UtilityMaxPattern {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma1 > 0.0
            && self.gamma2 > 0.0
            && self.eta > 0.0
            && self.eta < 1.0
            && self.p_max > 0.0
            && self.soc_min <= self.e_init
            && self.e_init <= self.soc_max
            && self.soc_min <= self.e_trip
            && self.e_trip <= self.soc_max
            && self.t_arrival < self.t_depart;
        if !ok {
            return Err(Error::Config(format!(
                "utility-max pattern violates its invariants: {self:?}"
            )));
        }
        Ok(())
    }

    /// Feasible demand interval implied by the battery bounds, non-negativity and
    /// the average-power limit.
    pub fn demand_bounds(&self) -> (f64, f64) {
        let lower = ((self.soc_min - self.e_init) / self.eta).max(0.0);
        let upper = ((self.soc_max - self.e_init) / self.eta)
            .min(self.p_max * (self.t_depart - self.t_arrival) as f64);
        (lower, upper)
    }
}

/// Customer with flat demand up to a threshold price, then a quadratic decline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseQuadraticPattern {
    pub e_base: f64,
    pub mu: f64,
    pub c_s: f64,
}

impl PiecewiseQuadraticPattern {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_base >= 0.0 && self.mu >= 0.0 && self.c_s >= 0.0) {
            return Err(Error::Config(format!(
                "piecewise-quadratic pattern has negative parameters: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PbdrPattern {
    UtilityMax(UtilityMaxPattern),
    PiecewiseQuadratic(PiecewiseQuadraticPattern),
}

impl PbdrPattern {
    pub fn demand(&self, c: f64) -> Result<f64> {
        match self {
            PbdrPattern::UtilityMax(p) => utility_max_demand(p, c),
            PbdrPattern::PiecewiseQuadratic(p) => Ok(piecewise_quadratic_demand(p, c)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PbdrPattern::UtilityMax(p) => p.validate(),
            PbdrPattern::PiecewiseQuadratic(p) => p.validate(),
        }
    }
}

/// Minimizer of `γ₁ce + γ₂(e_init + eη − e_trip)²` over the feasible demand
/// interval. The objective is a convex parabola in `e`, so the constrained
/// optimum is its vertex clipped to the interval.
pub fn utility_max_demand(pattern: &UtilityMaxPattern, c: f64) -> Result<f64> {
    let (lower, upper) = pattern.demand_bounds();
    if lower > upper {
        return Err(Error::Config(format!(
            "utility-max pattern has an empty demand interval [{lower}, {upper}]"
        )));
    }
    let eta = pattern.eta;
    let vertex = (pattern.e_trip - pattern.e_init) / eta
        - pattern.gamma1 * c / (2.0 * pattern.gamma2 * eta * eta);
    Ok(vertex.clamp(lower, upper))
}

pub fn piecewise_quadratic_demand(pattern: &PiecewiseQuadraticPattern, c: f64) -> f64 {
    if c <= pattern.c_s {
        pattern.e_base
    } else {
        let d = c - pattern.c_s;
        (pattern.e_base - pattern.mu * d * d).max(0.0)
    }
}

/// Controls population sampling and dataset synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub n_utility: usize,
    pub n_quadratic: usize,
    pub price_low: f64,
    pub price_high: f64,
    pub demand_low: f64,
    pub demand_high: f64,
    /// Standard deviation of additive Gaussian demand noise, kWh.
    pub noise_std: f64,
    pub max_attempts: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            n_utility: 3,
            n_quadratic: 2,
            price_low: 0.2,
            price_high: 0.6,
            demand_low: 5.0,
            demand_high: 20.0,
            noise_std: 0.0,
            max_attempts: 10_000,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.price_low >= 0.0 && self.price_low < self.price_high) {
            return Err(Error::Config("price range must satisfy 0 <= low < high".into()));
        }
        if !(self.demand_low >= 0.0 && self.demand_low < self.demand_high) {
            return Err(Error::Config(
                "demand range must satisfy 0 <= low < high".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_customers(&self) -> usize {
        self.n_utility + self.n_quadratic
    }
}

/// Minimum demand drop across the price range for a utility-max customer to count
/// as price sensitive.
const MIN_SENSITIVITY_KWH: f64 = 0.1;

fn within_range(cfg: &PopulationConfig, pattern: &PbdrPattern) -> bool {
    // Both families are non-increasing in price, so the endpoints bound the range.
    match (pattern.demand(cfg.price_low), pattern.demand(cfg.price_high)) {
        (Ok(hi), Ok(lo)) => hi <= cfg.demand_high && lo >= cfg.demand_low,
        _ => false,
    }
}

fn sample_utility_max(
    cfg: &PopulationConfig,
    session: &Session,
    rng: &mut ChaCha8Rng,
) -> Result<UtilityMaxPattern> {
    for _ in 0..cfg.max_attempts {
        let soc_max = rng.gen_range(40.0..80.0);
        let soc_min = soc_max * rng.gen_range(0.05..0.2);
        let e_init = rng.gen_range(soc_min..soc_min + 0.4 * soc_max);
        let e_trip = rng.gen_range(e_init..soc_max);
        let p = UtilityMaxPattern {
            gamma1: rng.gen_range(10.0..60.0),
            gamma2: rng.gen_range(0.5..1.5),
            eta: rng.gen_range(0.85..0.95),
            e_init,
            e_trip,
            soc_min,
            soc_max,
            p_max: session.max_power,
            t_arrival: session.t_arrival,
            t_depart: session.t_depart,
        };
        if p.validate().is_err() {
            continue;
        }
        let wrapped = PbdrPattern::UtilityMax(p.clone());
        if !within_range(cfg, &wrapped) {
            continue;
        }
        let spread = utility_max_demand(&p, cfg.price_low)? - utility_max_demand(&p, cfg.price_high)?;
        if spread > MIN_SENSITIVITY_KWH {
            return Ok(p);
        }
    }
    Err(Error::SamplingExhausted {
        family: "utility_max",
        attempts: cfg.max_attempts,
    })
}

fn sample_piecewise_quadratic(
    cfg: &PopulationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PiecewiseQuadraticPattern> {
    let span = cfg.price_high - cfg.price_low;
    for _ in 0..cfg.max_attempts {
        let e_base = rng.gen_range((cfg.demand_low + 0.2 * (cfg.demand_high - cfg.demand_low))..cfg.demand_high);
        let c_s = rng.gen_range(cfg.price_low..cfg.price_low + 0.6 * span);
        let mu_max = (e_base - cfg.demand_low) / (cfg.price_high - c_s).powi(2);
        let p = PiecewiseQuadraticPattern {
            e_base,
            mu: mu_max * rng.gen_range(0.2..1.0),
            c_s,
        };
        if within_range(cfg, &PbdrPattern::PiecewiseQuadratic(p.clone())) {
            return Ok(p);
        }
    }
    Err(Error::SamplingExhausted {
        family: "piecewise_quadratic",
        attempts: cfg.max_attempts,
    })
}

/// Samples `n_utility` utility-max customers followed by `n_quadratic`
/// piecewise-quadratic customers. Customer `i` takes its session window and power
/// cap from `sessions[i]`.
pub fn generate_population(
    cfg: &PopulationConfig,
    sessions: &[Session],
    seed: u64,
) -> Result<Vec<PbdrPattern>> {
    cfg.validate()?;
    ensure_len("sessions", cfg.n_customers(), sessions.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.n_customers());
    for session in &sessions[..cfg.n_utility] {
        out.push(PbdrPattern::UtilityMax(sample_utility_max(cfg, session, &mut rng)?));
    }
    for _ in 0..cfg.n_quadratic {
        out.push(PbdrPattern::PiecewiseQuadratic(sample_piecewise_quadratic(
            cfg, &mut rng,
        )?));
    }
    Ok(out)
}

/// Ground-truth demands of every customer at prices `c`.
pub fn true_demands(patterns: &[PbdrPattern], c: &[f64]) -> Result<Vec<f64>> {
    ensure_len("prices", patterns.len(), c.len())?;
    patterns.iter().zip(c).map(|(p, &ci)| p.demand(ci)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Selling price per customer, $/kWh.
    pub c: Vec<f64>,
    /// Realized demand per customer, kWh.
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub patterns_id: String,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_customers(&self) -> usize {
        self.samples.first().map_or(0, |s| s.c.len())
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples[..n.min(self.len())].to_vec(),
            patterns_id: self.patterns_id.clone(),
            seed: self.seed,
        }
    }

    /// Writes `c_1..c_N,e_1..e_N`, one sample per row. Twelve decimals keep every
    /// value in range to at most fifteen significant digits, so reading the file
    /// back and writing it again reproduces it byte for byte.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.n_customers();
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (1..=n)
            .map(|i| format!("c_{i}"))
            .chain((1..=n).map(|i| format!("e_{i}")))
            .collect();
        w.write_record(&header)?;
        for s in &self.samples {
            let row: Vec<String> = s.c.iter().chain(&s.e).map(|v| format!("{v:.12}")).collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, patterns_id: &str, seed: u64) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() % 2 != 0 || header.is_empty() {
            return Err(Error::Config(format!(
                "dataset header must have 2N columns, got {}",
                header.len()
            )));
        }
        let n = header.len() / 2;
        for (k, name) in header.iter().enumerate() {
            let expect = if k < n {
                format!("c_{}", k + 1)
            } else {
                format!("e_{}", k - n + 1)
            };
            if name != expect {
                return Err(Error::Config(format!(
                    "dataset column {k} is `{name}`, expected `{expect}`"
                )));
            }
        }
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad dataset value `{v}`: {e}")))
                })
                .collect::<Result<_>>()?;
            samples.push(Sample {
                c: vals[..n].to_vec(),
                e: vals[n..].to_vec(),
            });
        }
        Ok(Dataset {
            samples,
            patterns_id: patterns_id.to_string(),
            seed,
        })
    }
}

/// Draws `n_samples` price vectors uniformly on `[price_low, price_high]` per
/// customer and evaluates the matching pattern. Sample `k` uses its own
/// ChaCha stream `k` under `seed`, so any sample can be regenerated on its own.
pub fn generate_dataset(
    patterns: &[PbdrPattern],
    cfg: &PopulationConfig,
    n_samples: usize,
    seed: u64,
    patterns_id: &str,
) -> Result<Dataset> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let samples = (0..n_samples)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let c: Vec<f64> = patterns
                .iter()
                .map(|_| rng.gen_range(cfg.price_low..=cfg.price_high))
                .collect();
            let mut e = true_demands(patterns, &c)?;
            if let Some(dist) = &noise {
                for v in &mut e {
                    *v = (*v + dist.sample(&mut rng)).max(0.0);
                }
            }
            Ok(Sample { c, e })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        patterns_id: patterns_id.to_string(),
        seed,
    })
}
