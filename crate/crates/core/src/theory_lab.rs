//! Numerical checks of the theoretical predictions: the generalization-bound
//! rate function, Monte Carlo convergence rates of empirical W2 for
//! homogeneous and heterogeneous Gaussian scales, and the quadratic
//! sensitivity of SNN output laws to parameter perturbations.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ot::{self, EmpiricalMeasure, OtError};
use crate::rng::{self, substream, tag};
use crate::snn::{self, SnnError, SnnParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid study configuration: {0}")]
    Config(String),
    #[error("assignment failed at N = {n}, replicate {replicate}: {source}")]
    Solver {
        n: usize,
        replicate: usize,
        source: OtError,
    },
    #[error("fit needs at least 3 positive finite points, got {0}")]
    TooFewPoints(usize),
    #[error("inconclusive: only {cleared} of {total} eps values exceed 3x the baseline floor ({floor:e}); raise K or use larger eps")]
    Inconclusive {
        cleared: usize,
        total: usize,
        floor: f64,
    },
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Snn(#[from] SnnError),
}

/// Inputs of the rate function `h(N, d)` and of the full bound.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs {
    pub n: f64,
    pub d: usize,
    /// `sigma_i / sigma_1`, first entry 1.
    pub ratios: Vec<f64>,
    pub m0: Option<f64>,
    pub lipschitz: Option<f64>,
    pub delta: Option<f64>,
    pub c: Option<f64>,
}

impl BoundInputs {
    pub fn homogeneous(n: f64, d: usize) -> Self {
        BoundInputs {
            n,
            d,
            ratios: vec![1.0; d],
            m0: None,
            lipschitz: None,
            delta: None,
            c: None,
        }
    }

    fn ratio_product(&self) -> f64 {
        self.ratios.iter().product()
    }

    fn check(&self) -> Result<(), TheoryError> {
        if !(self.n >= 1.0) {
            return Err(TheoryError::Config(format!("N must be >= 1, got {}", self.n)));
        }
        if self.d == 0 {
            return Err(TheoryError::Config("d must be >= 1".into()));
        }
        if self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) && self.d > 4 {
            return Err(TheoryError::Config("scale ratios must lie in (0, 1] when d > 4".into()));
        }
        Ok(())
    }
}

/// `N^{-1/4}` term of the `d > 4` branch.
pub fn h_first_term(n: f64) -> f64 {
    n.powf(-0.25)
}

/// `(prod ratios * N)^{-1/d}` term of the `d > 4` branch.
pub fn h_second_term(n: f64, d: usize, ratio_product: f64) -> f64 {
    (ratio_product * n).powf(-1.0 / d as f64)
}

/// Rate function: `2 N^{-1/4} ln(1 + N)^{1/2}` for `d <= 4`, otherwise
/// `2 (N^{-1/4} + (prod ratios N)^{-1/d})`.
pub fn h_bound(inputs: &BoundInputs) -> Result<f64, TheoryError> {
    inputs.check()?;
    let n = inputs.n;
    if inputs.d <= 4 {
        Ok(2.0 * n.powf(-0.25) * (1.0 + n).ln().sqrt())
    } else {
        Ok(2.0 * (h_first_term(n) + h_second_term(n, inputs.d, inputs.ratio_product())))
    }
}

/// `4 M0 / sqrt(N) + 8 C M0 h + 8 sqrt(M0) L delta` when every constant is
/// supplied.
pub fn full_bound(inputs: &BoundInputs) -> Result<Option<f64>, TheoryError> {
    let h = h_bound(inputs)?;
    Ok(match (inputs.m0, inputs.c, inputs.lipschitz, inputs.delta) {
        (Some(m0), Some(c), Some(l), Some(delta)) => {
            Some(4.0 * m0 / inputs.n.sqrt() + 8.0 * c * m0 * h + 8.0 * m0.sqrt() * l * delta)
        }
        _ => None,
    })
}

/// `N` at which the two `d > 4` terms are equal: `P^{4 / (d - 4)}`.
pub fn crossover_n(d: usize, ratio_product: f64) -> Option<f64> {
    (d > 4).then(|| ratio_product.powf(4.0 / (d as f64 - 4.0)))
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlopeFit {
    pub log_x: Vec<f64>,
    pub log_y: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
}

pub fn fit_loglog(x: &[f64], y: &[f64]) -> Result<SlopeFit, TheoryError> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 3 || pts.len() != x.len() {
        return Err(TheoryError::TooFewPoints(pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(TheoryError::Config("all x values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    Ok(SlopeFit {
        log_x: pts.iter().map(|p| p.0).collect(),
        log_y: pts.iter().map(|p| p.1).collect(),
        slope,
        intercept,
        residual_rms: (rss / n).sqrt(),
    })
}

/// Per-coordinate scales of a centered Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub enum ScaleSpec {
    Homogeneous,
    /// `sigma_i = exp(-c0 i)`, `i = 1..=d`
    Heterogeneous { c0: f64 },
    Custom(Vec<f64>),
}

impl ScaleSpec {
    pub fn scales(&self, d: usize) -> Vec<f64> {
        match self {
            ScaleSpec::Homogeneous => vec![1.0; d],
            ScaleSpec::Heterogeneous { c0 } => (1..=d).map(|i| (-c0 * i as f64).exp()).collect(),
            ScaleSpec::Custom(s) => s.clone(),
        }
    }
}

/// `M = (E ||y||_6^6)^{1/6} = (15 sum sigma_i^6)^{1/6}` for a centered
/// Gaussian with independent coordinates.
pub fn sixth_moment_constant(scales: &[f64]) -> f64 {
    (15.0 * scales.iter().map(|s| s.powi(6)).sum::<f64>()).powf(1.0 / 6.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateStudyConfig {
    pub d: usize,
    pub scales: ScaleSpec,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
}

impl RateStudyConfig {
    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.d == 0 {
            return Err(TheoryError::Config("d must be >= 1".into()));
        }
        if self.scales.scales(self.d).len() != self.d {
            return Err(TheoryError::Config("custom scale list must have d entries".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) || self.n_grid[0] == 0 {
            return Err(TheoryError::Config(format!("N grid must be positive and increasing, got {:?}", self.n_grid)));
        }
        if self.replicates < 5 {
            return Err(TheoryError::Config(format!("need at least 5 replicates, got {}", self.replicates)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateStudy {
    pub n_grid: Vec<usize>,
    pub mean_cost: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `None` when some mean cost is not positive.
    pub fit: Option<SlopeFit>,
    pub moment_constant: f64,
}

fn gaussian_sample<R: Rng + ?Sized>(n: usize, scales: &[f64], rng: &mut R) -> Result<EmpiricalMeasure, OtError> {
    let d = scales.len();
    let mut data = vec![0.0; n * d];
    rng::fill_standard_normal(rng, &mut data);
    for row in data.chunks_mut(d) {
        row.iter_mut().zip(scales).for_each(|(v, s)| *v *= s);
    }
    EmpiricalMeasure::from_flat(n, d, data)
}

/// Mean two-sample `W2^2(mu_N, mu'_N)` over replicates for each `N`, with a
/// log-log slope. Replicate `r` at size `N` always consumes the same
/// standard normals, whatever the scales.
pub fn two_sample_w2_rate(config: &RateStudyConfig) -> Result<RateStudy, TheoryError> {
    config.validate()?;
    let scales = config.scales.scales(config.d);
    let jobs: Vec<(usize, usize)> = config
        .n_grid
        .iter()
        .flat_map(|&n| (0..config.replicates).map(move |r| (n, r)))
        .collect();
    let costs: Vec<f64> = jobs
        .par_iter()
        .map(|&(n, r)| {
            let ctx = |source| TheoryError::Solver { n, replicate: r, source };
            let mut ra = substream(config.seed, &[tag::REPLICATE, n as u64, r as u64, 0]);
            let mut rb = substream(config.seed, &[tag::REPLICATE, n as u64, r as u64, 1]);
            let a = gaussian_sample(n, &scales, &mut ra).map_err(ctx)?;
            let b = gaussian_sample(n, &scales, &mut rb).map_err(ctx)?;
            ot::squared_w2_cost(&a, &b).map_err(ctx)
        })
        .collect::<Result<_, _>>()?;
    let r = config.replicates;
    let mut mean_cost = Vec::new();
    let mut stderr = Vec::new();
    for block in costs.chunks(r) {
        let m = block.iter().sum::<f64>() / r as f64;
        let var = block.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (r - 1) as f64;
        mean_cost.push(m);
        stderr.push((var / r as f64).sqrt());
    }
    let x: Vec<f64> = config.n_grid.iter().map(|&n| n as f64).collect();
    let fit = if mean_cost.iter().all(|c| *c > 0.0) {
        Some(fit_loglog(&x, &mean_cost)?)
    } else {
        None
    };
    Ok(RateStudy {
        n_grid: config.n_grid.clone(),
        mean_cost,
        stderr,
        fit,
        moment_constant: sixth_moment_constant(&scales),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeterogeneityComparison {
    pub homogeneous: RateStudy,
    pub heterogeneous: RateStudy,
    pub slope_hom: f64,
    pub slope_het: f64,
}

impl HeterogeneityComparison {
    /// Slopes differ by less than twice their combined residual scatter.
    pub fn indistinguishable(&self) -> bool {
        let noise = self.homogeneous.fit.as_ref().map_or(0.0, |f| f.residual_rms)
            + self.heterogeneous.fit.as_ref().map_or(0.0, |f| f.residual_rms);
        (self.slope_hom - self.slope_het).abs() <= 2.0 * noise.max(1e-12)
    }
}

pub fn heterogeneity_comparison(
    d: usize,
    c0: f64,
    n_grid: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<HeterogeneityComparison, TheoryError> {
    let base = RateStudyConfig {
        d,
        scales: ScaleSpec::Homogeneous,
        n_grid: n_grid.to_vec(),
        replicates,
        seed,
    };
    let homogeneous = two_sample_w2_rate(&base)?;
    let heterogeneous = two_sample_w2_rate(&RateStudyConfig {
        scales: ScaleSpec::Heterogeneous { c0 },
        ..base
    })?;
    let slope = |s: &RateStudy| s.fit.as_ref().map_or(f64::NAN, |f| f.slope);
    Ok(HeterogeneityComparison {
        slope_hom: slope(&homogeneous),
        slope_het: slope(&heterogeneous),
        homogeneous,
        heterogeneous,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessConfig {
    pub eps_grid: Vec<f64>,
    pub k: usize,
    pub repeats: usize,
    pub direction_seed: u64,
    pub seed: u64,
    /// Restrict the direction to the output-layer biases.
    pub bias_only: bool,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            eps_grid: vec![0.05, 0.1, 0.2, 0.4],
            k: 4096,
            repeats: 10,
            direction_seed: 0,
            seed: 0,
            bias_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessStudy {
    pub eps_grid: Vec<f64>,
    pub mean_w2: Vec<f64>,
    pub floor: f64,
    /// Whether each eps cleared 3x the floor.
    pub cleared: Vec<bool>,
    /// Log-log fit over cleared eps; `None` when fewer than 3 cleared.
    pub fit: Option<SlopeFit>,
    /// Constant of the least-squares `C eps^2` envelope over cleared eps.
    pub quadratic_constant: Option<f64>,
}

impl RobustnessStudy {
    /// The fit, or the inconclusive verdict with advice.
    pub fn conclusive_fit(&self) -> Result<&SlopeFit, TheoryError> {
        self.fit.as_ref().ok_or(TheoryError::Inconclusive {
            cleared: self.cleared.iter().filter(|c| **c).count(),
            total: self.eps_grid.len(),
            floor: self.floor,
        })
    }

    /// Every cleared mean lies below `slack * C eps^2`.
    pub fn within_envelope(&self, slack: f64) -> bool {
        let Some(c) = self.quadratic_constant else {
            return false;
        };
        self.eps_grid
            .iter()
            .zip(&self.mean_w2)
            .zip(&self.cleared)
            .filter(|(_, c)| **c)
            .all(|((e, w), _)| *w <= slack * c * e * e)
    }
}

/// Unit direction in the `(a, sigma, b)` perturbation space.
pub fn random_direction(params: &SnnParams, seed: u64, bias_only: bool) -> Vec<f64> {
    let n = params.perturbation_len();
    let mut r = substream(seed, &[tag::DIRECTION]);
    let mut dir = vec![0.0; n];
    let range = if bias_only { params.output_bias_range() } else { 0..n };
    for i in range {
        dir[i] = rng::standard_normal(&mut r);
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    dir
}

fn ensemble_with_stream(params: &SnnParams, x: &[f64], k: usize, seed: u64, path: &[u64]) -> Result<EmpiricalMeasure, TheoryError> {
    Ok(snn::forward_ensemble(params, x, k, &mut substream(seed, path))?)
}

/// Mean `W2^2` between base and perturbed output ensembles at `x` for each
/// eps, drawn with common random numbers, against the finite-sample floor
/// of two independent ensembles from the base parameters.
pub fn robustness_slope(base: &SnnParams, x: &[f64], config: &RobustnessConfig) -> Result<RobustnessStudy, TheoryError> {
    if config.eps_grid.is_empty() || config.eps_grid.windows(2).any(|w| w[0] >= w[1]) || config.eps_grid[0] < 0.0 {
        return Err(TheoryError::Config(format!("eps grid must be non-negative and increasing, got {:?}", config.eps_grid)));
    }
    if config.k < 2 || config.repeats == 0 {
        return Err(TheoryError::Config("need K >= 2 and at least one repeat".into()));
    }
    let dir = random_direction(base, config.direction_seed, config.bias_only);
    let floor_terms: Vec<f64> = (0..config.repeats)
        .into_par_iter()
        .map(|r| {
            let a = ensemble_with_stream(base, x, config.k, config.seed, &[tag::EVAL, r as u64, 0])?;
            let b = ensemble_with_stream(base, x, config.k, config.seed, &[tag::EVAL, r as u64, 1])?;
            Ok(ot::squared_w2_cost(&a, &b)?)
        })
        .collect::<Result<_, TheoryError>>()?;
    let floor = floor_terms.iter().sum::<f64>() / config.repeats as f64;

    let mut mean_w2 = Vec::with_capacity(config.eps_grid.len());
    for &eps in &config.eps_grid {
        let pert = base.perturb(&dir, eps)?;
        let terms: Vec<f64> = (0..config.repeats)
            .into_par_iter()
            .map(|r| {
                let path = [tag::EVAL, r as u64, 2];
                let a = ensemble_with_stream(base, x, config.k, config.seed, &path)?;
                let b = ensemble_with_stream(&pert, x, config.k, config.seed, &path)?;
                Ok(ot::squared_w2_cost(&a, &b)?)
            })
            .collect::<Result<_, TheoryError>>()?;
        mean_w2.push(terms.iter().sum::<f64>() / config.repeats as f64);
    }
    let cleared: Vec<bool> = config
        .eps_grid
        .iter()
        .zip(&mean_w2)
        .map(|(e, w)| *e > 0.0 && *w > 3.0 * floor)
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = config
        .eps_grid
        .iter()
        .zip(&mean_w2)
        .zip(&cleared)
        .filter(|(_, c)| **c)
        .map(|((e, w), _)| (*e, *w))
        .unzip();
    let (fit, quadratic_constant) = if xs.len() >= 3 {
        let log_c = xs
            .iter()
            .zip(&ys)
            .map(|(e, w)| w.ln() - 2.0 * e.ln())
            .sum::<f64>()
            / xs.len() as f64;
        (Some(fit_loglog(&xs, &ys)?), Some(log_c.exp()))
    } else {
        (None, None)
    };
    Ok(RobustnessStudy {
        eps_grid: config.eps_grid.clone(),
        mean_w2,
        floor,
        cleared,
        fit,
        quadratic_constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::snn::SnnConfig;

    #[test]
    fn h_bound_closed_forms() {
        let v = h_bound(&BoundInputs::homogeneous(1.0, 2)).unwrap();
        assert!((v - 2.0 * 2f64.ln().sqrt()).abs() < 1e-12);
        assert!((v - 1.6651).abs() < 1e-4);
        let v = h_bound(&BoundInputs::homogeneous(256.0, 8)).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
        assert!(h_bound(&BoundInputs::homogeneous(0.5, 2)).is_err());
        let mut bad = BoundInputs::homogeneous(10.0, 6);
        bad.ratios[3] = 0.0;
        assert!(h_bound(&bad).is_err());
    }

    #[test]
    fn h_bound_decreases_in_n() {
        for d in [2, 8] {
            // for d <= 4 the log factor makes h rise on [1, 4]
            let mut prev = f64::INFINITY;
            for k in 0..50 {
                let n = 4.0 * 1.3f64.powi(k);
                let v = h_bound(&BoundInputs::homogeneous(n, d)).unwrap();
                assert!(v < prev);
                prev = v;
            }
        }
    }

    #[test]
    fn full_bound_needs_every_constant() {
        let mut b = BoundInputs::homogeneous(100.0, 2);
        assert_eq!(full_bound(&b).unwrap(), None);
        b.m0 = Some(4.0);
        b.c = Some(0.5);
        b.lipschitz = Some(2.0);
        b.delta = Some(0.1);
        let h = h_bound(&b).unwrap();
        let expect = 4.0 * 4.0 / 10.0 + 8.0 * 0.5 * 4.0 * h + 8.0 * 2.0 * 2.0 * 0.1;
        assert!((full_bound(&b).unwrap().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn crossover_matches_term_comparison() {
        for (d, p) in [(8usize, 1e-6f64), (6, 1e-3), (12, 0.2)] {
            let nstar = crossover_n(d, p).unwrap();
            let a = h_first_term(nstar);
            let b = h_second_term(nstar, d, p);
            assert!((a - b).abs() <= 1e-12 * a.max(b));
            // second term decays more slowly, so it dominates beyond N*
            assert!(h_second_term(2.0 * nstar, d, p) > h_first_term(2.0 * nstar));
            assert!(h_second_term(0.5 * nstar, d, p) < h_first_term(0.5 * nstar));
        }
        assert_eq!(crossover_n(4, 0.5), None);
    }

    #[test]
    fn loglog_fit_recovers_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.7)).collect();
        let f = fit_loglog(&x, &y).unwrap();
        assert!((f.slope + 0.7).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(f.residual_rms < 1e-12);
        assert!(fit_loglog(&x[..2], &y[..2]).is_err());
    }

    #[test]
    fn moment_constant() {
        assert!((sixth_moment_constant(&[1.0]) - 15f64.powf(1.0 / 6.0)).abs() < 1e-15);
        assert!((sixth_moment_constant(&[2.0, 2.0]) - 2.0 * 30f64.powf(1.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn point_mass_costs_nothing() {
        let s = two_sample_w2_rate(&RateStudyConfig {
            d: 3,
            scales: ScaleSpec::Custom(vec![0.0; 3]),
            n_grid: vec![4, 8, 16],
            replicates: 5,
            seed: 1,
        })
        .unwrap();
        assert!(s.mean_cost.iter().all(|c| *c == 0.0));
        assert!(s.fit.is_none());
    }

    #[test]
    fn one_dimensional_rate_is_parametric() {
        let s = two_sample_w2_rate(&RateStudyConfig {
            d: 1,
            scales: ScaleSpec::Homogeneous,
            n_grid: vec![32, 64, 128, 256, 512, 1024],
            replicates: 40,
            seed: 3,
        })
        .unwrap();
        let slope = s.fit.unwrap().slope;
        assert!((-1.2..=-0.8).contains(&slope), "{slope}");
    }

    #[test]
    fn zero_c0_gives_identical_studies() {
        let c = heterogeneity_comparison(6, 0.0, &[8, 16, 32], 5, 2).unwrap();
        assert_eq!(c.homogeneous, c.heterogeneous);
        assert!(c.indistinguishable());
    }

    #[test]
    fn rate_study_is_reproducible() {
        let cfg = RateStudyConfig {
            d: 2,
            scales: ScaleSpec::Heterogeneous { c0: 0.5 },
            n_grid: vec![8, 16, 32],
            replicates: 6,
            seed: 9,
        };
        let a = two_sample_w2_rate(&cfg).unwrap();
        let b = two_sample_w2_rate(&cfg).unwrap();
        assert_eq!(a, b);
        let mut bad = cfg.clone();
        bad.replicates = 2;
        assert!(two_sample_w2_rate(&bad).is_err());
        bad.replicates = 6;
        bad.n_grid = vec![16, 8];
        assert!(two_sample_w2_rate(&bad).is_err());
    }

    fn relu_net(seed: u64) -> SnnParams {
        let c = SnnConfig {
            input_dim: 2,
            output_dim: 1,
            activation: Activation::Relu,
            ..SnnConfig::default()
        };
        snn::init(&c, &mut substream(seed, &[tag::INIT])).unwrap()
    }

    #[test]
    fn bias_only_perturbation_is_a_translation() {
        let p = relu_net(1);
        let cfg = RobustnessConfig {
            k: 512,
            repeats: 3,
            bias_only: true,
            ..RobustnessConfig::default()
        };
        let s = robustness_slope(&p, &[0.3, -0.4], &cfg).unwrap();
        for (e, w) in s.eps_grid.iter().zip(&s.mean_w2) {
            assert!((w - e * e).abs() <= 1e-12 * e * e, "{w} vs {}", e * e);
        }
        assert!((s.conclusive_fit().unwrap().slope - 2.0).abs() < 1e-9);
        assert!(s.within_envelope(2.0));
    }

    #[test]
    fn generic_direction_is_quadratic() {
        let p = relu_net(2);
        let cfg = RobustnessConfig {
            k: 1024,
            repeats: 4,
            ..RobustnessConfig::default()
        };
        let s = robustness_slope(&p, &[0.3, -0.4], &cfg).unwrap();
        let slope = s.conclusive_fit().unwrap().slope;
        assert!((1.5..=2.5).contains(&slope), "{s:?}");
        assert!(s.within_envelope(2.0));
    }

    #[test]
    fn zero_eps_sits_at_the_floor_and_tiny_grids_are_inconclusive() {
        let p = relu_net(3);
        let cfg = RobustnessConfig {
            eps_grid: vec![0.0, 1e-9, 2e-9, 4e-9],
            k: 256,
            repeats: 2,
            ..RobustnessConfig::default()
        };
        let s = robustness_slope(&p, &[0.1, 0.1], &cfg).unwrap();
        assert!(!s.cleared[0]);
        let e = s.conclusive_fit().unwrap_err();
        assert!(matches!(e, TheoryError::Inconclusive { .. }), "{e}");
        assert!(e.to_string().contains("raise K"));
    }
}
