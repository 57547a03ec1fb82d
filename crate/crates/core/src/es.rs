//! (1+1)-Evolution Strategy with Rechenberg's 1/5th success rule.
//!
//! The step size follows the exponential update
//! `sigma <- sigma * exp(tau * (I[f(x') <= f(x)] - 1/5))`, applied after every
//! generation whether or not the offspring was accepted.
//!
//! Randomness comes from [`EsRng`]: ChaCha8 seeded with `seed_from_u64`,
//! uniforms built from the top 53 bits of `next_u64`, and normals from the
//! trigonometric Box-Muller transform (both outputs used, cosine first).

use std::fmt;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp applied to objective values before taking the log.
pub const SCORE_FLOOR: f64 = 1e-300;

/// Target success probability of the 1/5th rule.
pub const SUCCESS_TARGET: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown objective `{name}` (available: {available})")]
    UnknownObjective { name: String, available: String },
}

/// A finite, non-empty point in the search space.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionVector(Vec<f64>);

impl SolutionVector {
    pub fn new(coordinates: Vec<f64>) -> Result<Self, EsError> {
        if coordinates.is_empty() {
            return Err(EsError::InvalidInput("solution vector must have at least one coordinate".into()));
        }
        if let Some(i) = coordinates.iter().position(|v| !v.is_finite()) {
            return Err(EsError::InvalidInput(format!("coordinate {i} is not finite ({})", coordinates[i])));
        }
        Ok(Self(coordinates))
    }

    pub fn zeros(dimension: usize) -> Result<Self, EsError> {
        Self::new(vec![0.0; dimension])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Registered benchmark objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Sphere,
}

impl Objective {
    pub const ALL: &'static [Objective] = &[Objective::Sphere];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Sphere => "sphere",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, EsError> {
        Self::ALL
            .iter()
            .copied()
            .find(|o| o.name() == name)
            .ok_or_else(|| EsError::UnknownObjective { name: name.to_string(), available: Self::names().join(", ") })
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|o| o.name()).collect()
    }

    fn eval_raw(self, x: &[f64]) -> f64 {
        match self {
            Objective::Sphere => sphere_raw(x),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Objective plus the dimension it is evaluated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub name: Objective,
    pub dimension: usize,
}

impl ObjectiveSpec {
    pub fn new(name: &str, dimension: usize) -> Result<Self, EsError> {
        let name = Objective::from_name(name)?;
        if dimension == 0 {
            return Err(EsError::Config("dimension must be at least 1".into()));
        }
        Ok(Self { name, dimension })
    }

    pub fn sphere(dimension: usize) -> Self {
        Self { name: Objective::Sphere, dimension }
    }

    pub fn eval(&self, x: &SolutionVector) -> Result<f64, EsError> {
        if x.len() != self.dimension {
            return Err(EsError::Config(format!("expected a vector of length {}, got {}", self.dimension, x.len())));
        }
        Ok(self.name.eval_raw(x.as_slice()))
    }
}

/// Full parameterization of one ES run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsConfig {
    pub tau: f64,
    pub sigma0: f64,
    pub dimension: usize,
    pub max_generations: u64,
    pub init_low: f64,
    pub init_high: f64,
    pub seed: u64,
}

impl EsConfig {
    /// Defaults: `sigma0 = 1`, 1000 generations, initialization box `[-5, 5]`.
    pub fn new(tau: f64, dimension: usize, seed: u64) -> Self {
        Self { tau, sigma0: 1.0, dimension, max_generations: 1000, init_low: -5.0, init_high: 5.0, seed }
    }

    pub fn validate(&self) -> Result<(), EsError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(EsError::Config(format!("tau must be positive and finite, got {}", self.tau)));
        }
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(EsError::Config(format!("sigma0 must be positive and finite, got {}", self.sigma0)));
        }
        if self.dimension == 0 {
            return Err(EsError::Config("dimension must be at least 1".into()));
        }
        if self.max_generations == 0 {
            return Err(EsError::Config("max_generations must be at least 1".into()));
        }
        if !(self.init_low.is_finite() && self.init_high.is_finite() && self.init_low < self.init_high) {
            return Err(EsError::Config(format!(
                "initialization box must satisfy init_low < init_high, got [{}, {}]",
                self.init_low, self.init_high
            )));
        }
        Ok(())
    }
}

/// Outcome of one ES run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsRunResult {
    pub best_f: f64,
    pub score: f64,
    pub final_sigma: f64,
    pub generations_run: u64,
    pub seed: u64,
}

/// Seeded random stream used by the ES.
#[derive(Debug, Clone)]
pub struct EsRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl EsRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed), spare_normal: None }
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Sphere function `sum x_i^2`, summed left to right.
pub fn sphere_eval(x: &[f64]) -> Result<f64, EsError> {
    if x.is_empty() {
        return Err(EsError::InvalidInput("sphere needs at least one coordinate".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EsError::InvalidInput("sphere input contains a non-finite entry".into()));
    }
    Ok(sphere_raw(x))
}

fn sphere_raw(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |acc, v| acc + v * v)
}

/// Fitness score `-ln(max(f, SCORE_FLOOR))`.
pub fn score_of(f_value: f64) -> Result<f64, EsError> {
    if f_value.is_nan() || f_value < 0.0 {
        return Err(EsError::InvalidInput(format!("objective value must be non-negative, got {f_value}")));
    }
    Ok(score_raw(f_value))
}

fn score_raw(f_value: f64) -> f64 {
    -(f_value.max(SCORE_FLOOR)).ln()
}

/// Step-size update of the 1/5th rule.
///
/// The result is clamped to the positive normal range of `f64` so that extreme
/// `tau` values cannot drive sigma to zero or infinity.
pub fn update_sigma(sigma: f64, tau: f64, success: bool) -> f64 {
    let indicator = if success { 1.0 } else { 0.0 };
    (sigma * (tau * (indicator - SUCCESS_TARGET)).exp()).clamp(f64::MIN_POSITIVE, f64::MAX)
}

/// Gaussian mutation `x + sigma * g`, `g ~ N(0, I)`.
pub fn mutate(x: &SolutionVector, sigma: f64, rng: &mut EsRng) -> SolutionVector {
    SolutionVector(mutate_raw(x.as_slice(), sigma, rng))
}

fn mutate_raw(x: &[f64], sigma: f64, rng: &mut EsRng) -> Vec<f64> {
    x.iter().map(|v| v + sigma * rng.standard_normal()).collect()
}

/// Per-generation observer for [`run_es_traced`].
pub trait GenerationObserver {
    fn on_generation(&mut self, generation: u64, f_current: f64, sigma: f64, accepted: bool);
}

impl<F: FnMut(u64, f64, f64, bool)> GenerationObserver for F {
    fn on_generation(&mut self, generation: u64, f_current: f64, sigma: f64, accepted: bool) {
        self(generation, f_current, sigma, accepted)
    }
}

pub fn run_es(config: &EsConfig, objective: &ObjectiveSpec) -> Result<EsRunResult, EsError> {
    run_es_traced(config, objective, &mut |_, _, _, _| {})
}

/// Runs the ES and reports the accepted objective value and step size after
/// each generation.
pub fn run_es_traced(
    config: &EsConfig,
    objective: &ObjectiveSpec,
    observer: &mut dyn GenerationObserver,
) -> Result<EsRunResult, EsError> {
    config.validate()?;
    if objective.dimension != config.dimension {
        return Err(EsError::Config(format!(
            "objective dimension {} does not match config dimension {}",
            objective.dimension, config.dimension
        )));
    }

    let mut rng = EsRng::seed_from_u64(config.seed);
    let width = config.init_high - config.init_low;
    let mut x: Vec<f64> = (0..config.dimension).map(|_| config.init_low + width * rng.uniform()).collect();
    let mut fx = objective.name.eval_raw(&x);
    let mut sigma = config.sigma0;

    for generation in 0..config.max_generations {
        let candidate = mutate_raw(&x, sigma, &mut rng);
        let f_candidate = objective.name.eval_raw(&candidate);
        let success = f_candidate <= fx;
        if success {
            x = candidate;
            fx = f_candidate;
        }
        sigma = update_sigma(sigma, config.tau, success);
        observer.on_generation(generation, fx, sigma, success);
    }

    Ok(EsRunResult {
        best_f: fx,
        score: score_raw(fx),
        final_sigma: sigma,
        generations_run: config.max_generations,
        seed: config.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_examples() {
        assert_eq!(sphere_eval(&[0.0; 5]).unwrap(), 0.0);
        assert_eq!(sphere_eval(&[1.0; 5]).unwrap(), 5.0);
        assert_eq!(sphere_eval(&[3.0, 4.0]).unwrap(), 25.0);
    }

    #[test]
    fn sphere_rejects_bad_input() {
        assert!(sphere_eval(&[1.0, f64::NAN]).is_err());
        assert!(sphere_eval(&[f64::INFINITY]).is_err());
        assert!(sphere_eval(&[]).is_err());
    }

    #[test]
    fn solution_vector_invariants() {
        assert!(SolutionVector::new(vec![]).is_err());
        assert!(SolutionVector::new(vec![0.0, f64::NEG_INFINITY]).is_err());
        assert_eq!(SolutionVector::zeros(3).unwrap().len(), 3);
    }

    #[test]
    fn objective_registry() {
        assert_eq!(Objective::from_name("sphere").unwrap(), Objective::Sphere);
        let err = Objective::from_name("rosenbrock").unwrap_err();
        assert!(err.to_string().contains("sphere"));
        assert!(ObjectiveSpec::new("sphere", 0).is_err());
    }

    #[test]
    fn update_sigma_examples() {
        // Reference values from mpmath at 30 digits.
        let up = update_sigma(1.0, 0.95, true);
        assert!((up - 2.138_276_220_496_818_6).abs() / up < 1e-14);
        let down = update_sigma(2.0, 0.5, false);
        assert!((down - 1.809_674_836_071_92).abs() / down < 1e-14);
        assert!((update_sigma(3.7, 1e-300, true) - 3.7).abs() < 1e-15);
        assert!((update_sigma(3.7, 1e-300, false) - 3.7).abs() < 1e-15);
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_of(1.0).unwrap(), 0.0);
        assert!((score_of((-10.0f64).exp()).unwrap() - 10.0).abs() < 1e-12);
        // -ln(1e-300) = 300 ln 10
        assert!((score_of(0.0).unwrap() - 690.775_527_898_213_7).abs() < 1e-9);
        assert!(score_of(-1e-3).is_err());
        assert!(score_of(f64::NAN).is_err());
    }

    #[test]
    fn mutate_vanishing_noise_and_seeding() {
        let x = SolutionVector::new(vec![0.0, 0.0]).unwrap();
        let mut rng = EsRng::seed_from_u64(3);
        let y = mutate(&x, 1e-300, &mut rng);
        assert!(y.as_slice().iter().all(|v| v.abs() < 1e-290));

        let ones = SolutionVector::new(vec![1.0, 1.0]).unwrap();
        let a = mutate(&ones, 1.0, &mut EsRng::seed_from_u64(42));
        let b = mutate(&ones, 1.0, &mut EsRng::seed_from_u64(42));
        assert_eq!(a, b);
        assert_eq!(ones.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn mutate_sample_std() {
        let x = SolutionVector::zeros(2).unwrap();
        let mut rng = EsRng::seed_from_u64(11);
        let n = 100_000;
        let mut sums = [0.0f64; 2];
        let mut squares = [0.0f64; 2];
        for _ in 0..n {
            let y = mutate(&x, 2.0, &mut rng);
            for (i, v) in y.as_slice().iter().enumerate() {
                sums[i] += v;
                squares[i] += v * v;
            }
        }
        for i in 0..2 {
            let mean = sums[i] / n as f64;
            let var = (squares[i] - n as f64 * mean * mean) / (n as f64 - 1.0);
            let std = var.sqrt();
            assert!((1.97..=2.03).contains(&std), "coordinate {i}: std {std}");
        }
    }

    #[test]
    fn single_generation_rejected_trace() {
        // Search for a seed whose first mutation is rejected, then check the trace.
        let objective = ObjectiveSpec::sphere(5);
        let mut found = false;
        for seed in 0..64 {
            let mut cfg = EsConfig::new(0.95, 5, seed);
            cfg.max_generations = 1;
            let mut accepted = None;
            let res = run_es_traced(&cfg, &objective, &mut |_, _, _, ok| accepted = Some(ok)).unwrap();
            if accepted == Some(false) {
                let mut rng = EsRng::seed_from_u64(seed);
                let x0: Vec<f64> = (0..5).map(|_| -5.0 + 10.0 * rng.uniform()).collect();
                assert_eq!(res.best_f, sphere_raw(&x0));
                assert_eq!(res.final_sigma, (0.95f64 * -0.2).exp());
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn run_es_rejects_bad_config() {
        let objective = ObjectiveSpec::sphere(5);
        let mut cfg = EsConfig::new(0.95, 4, 1);
        assert!(matches!(run_es(&cfg, &objective), Err(EsError::Config(_))));
        cfg.dimension = 5;
        cfg.tau = -1.0;
        assert!(run_es(&cfg, &objective).is_err());
        cfg.tau = 1.0;
        cfg.init_low = 5.0;
        assert!(run_es(&cfg, &objective).is_err());
        cfg.init_low = -5.0;
        cfg.max_generations = 0;
        assert!(run_es(&cfg, &objective).is_err());
    }

    #[test]
    fn extreme_tau_keeps_sigma_positive() {
        let objective = ObjectiveSpec::sphere(3);
        let cfg = EsConfig { tau: 1e6, ..EsConfig::new(1.0, 3, 9) };
        let res = run_es(&cfg, &objective).unwrap();
        assert!(res.final_sigma > 0.0);
        assert!(res.best_f >= 0.0);
    }
}
