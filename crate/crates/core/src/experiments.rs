//! Data generators, surrogate-ODE training and error metrics for the two
//! numerical examples: a sin-of-linear random field with Gaussian noise and
//! a chain of 48 damped oscillators with random damping coefficients.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::locality::{self, Dataset, LocalityError, MinibatchSelection, NeighborhoodIndex};
use crate::ot::{self, EmpiricalMeasure, OtError};
use crate::rng::{self, substream, tag};
use crate::snn::{self, ParamVars, SnnError, SnnParams, WeightRealization};
use crate::trainer::{self, Objective, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("non-finite state at time slice {slice}")]
    NonFiniteState { slice: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Locality(#[from] LocalityError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Snn(#[from] SnnError),
}

impl From<ExperimentError> for TrainError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(t) => t,
            ExperimentError::NonFiniteState { slice } => TrainError::Diverged(format!(
                "surrogate rollout diverged at time slice {slice}; consider enabling gradient clipping (train.clip_norm)"
            )),
            other => TrainError::Config(other.to_string()),
        }
    }
}

/// Values below this are treated as zero normalizers.
pub const DIVISION_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// `sigma_k = s`
    Constant,
    /// `sigma_k = s exp(-k)`
    Exponential,
    /// `sigma_k = s sqrt(3 / d0)`
    Scaled,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Constant => "constant",
            NoiseKind::Exponential => "exponential",
            NoiseKind::Scaled => "scaled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(NoiseKind::Constant),
            "exponential" => Some(NoiseKind::Exponential),
            "scaled" => Some(NoiseKind::Scaled),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example1Config {
    /// Output dimension.
    pub d: usize,
    /// Number of noise variables.
    pub d0: usize,
    pub noise: NoiseKind,
    pub noise_scale: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub test_draws: usize,
    pub coefficient_seed: u64,
}

impl Default for Example1Config {
    fn default() -> Self {
        Example1Config {
            d: 10,
            d0: 3,
            noise: NoiseKind::Constant,
            noise_scale: 0.1,
            n_train: 4000,
            n_test: 100,
            test_draws: 20,
            coefficient_seed: 0,
        }
    }
}

impl Example1Config {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.d == 0 || self.d0 == 0 {
            return Err(ExperimentError::Config(format!("need d >= 1 and d0 >= 1, got d = {}, d0 = {}", self.d, self.d0)));
        }
        if self.noise == NoiseKind::Constant && self.d0 > self.d {
            return Err(ExperimentError::Config(format!(
                "constant-noise configs need d0 <= d, got d0 = {} > d = {}",
                self.d0, self.d
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(ExperimentError::Config(format!("noise scale must be >= 0, got {}", self.noise_scale)));
        }
        if self.n_train == 0 || self.n_test == 0 || self.test_draws == 0 {
            return Err(ExperimentError::Config("sample counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Standard deviations of the `d0` noise variables.
    pub fn sigmas(&self) -> Vec<f64> {
        (1..=self.d0)
            .map(|k| match self.noise {
                NoiseKind::Constant => self.noise_scale,
                NoiseKind::Exponential => self.noise_scale * (-(k as f64)).exp(),
                NoiseKind::Scaled => self.noise_scale * (3.0 / self.d0 as f64).sqrt(),
            })
            .collect()
    }
}

/// Linear maps `z_j^k(x) = c[j,k,0] x_1 + c[j,k,1] x_2`, `k = 0..=d0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example1Model {
    pub coefficients: Array3<f64>,
    pub sigmas: Vec<f64>,
}

impl Example1Model {
    pub fn new(config: &Example1Config) -> Result<Self, ExperimentError> {
        config.validate()?;
        let mut r = substream(config.coefficient_seed, &[tag::COEFFICIENTS]);
        let coefficients = Array3::from_shape_fn((config.d, config.d0 + 1, 2), |_| rng::standard_normal(&mut r));
        Ok(Example1Model {
            coefficients,
            sigmas: config.sigmas(),
        })
    }

    pub fn d(&self) -> usize {
        self.coefficients.dim().0
    }

    pub fn z(&self, x: &[f64], j: usize, k: usize) -> f64 {
        self.coefficients[[j, k, 0]] * x[0] + self.coefficients[[j, k, 1]] * x[1]
    }

    /// Argument of the sine for component `j` given noise values `eps`.
    pub fn argument(&self, x: &[f64], j: usize, eps: &[f64]) -> f64 {
        let mut s = self.z(x, j, 0);
        for (k, e) in eps.iter().enumerate() {
            s += self.z(x, j, k + 1) * e;
        }
        s / 16.0
    }

    /// One draw of `y_x`. The `d0` noise variables are shared by every
    /// output component.
    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = self.sigmas.iter().map(|s| s * rng::standard_normal(rng)).collect();
        (0..self.d()).map(|j| self.argument(x, j, &eps).sin()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example1Data {
    pub model: Example1Model,
    pub train: Dataset,
    pub test_x: Array2<f64>,
    /// `test_draws` truth samples at each test input.
    pub test_truth: Vec<EmpiricalMeasure>,
}

/// Training set with `x ~ N(0, I_2)` and a test set of uniform inputs on
/// `[-1/4, 1/4]^2`, each with independent truth draws.
pub fn gen_example1(config: &Example1Config, seed: u64) -> Result<Example1Data, ExperimentError> {
    let model = Example1Model::new(config)?;
    let mut r = substream(seed, &[tag::DATA]);
    let mut xs = Array2::zeros((config.n_train, 2));
    let mut ys = Array2::zeros((config.n_train, config.d));
    for i in 0..config.n_train {
        let x = [rng::standard_normal(&mut r), rng::standard_normal(&mut r)];
        xs.row_mut(i).assign(&ndarray::aview1(&x));
        let y = model.sample(&x, &mut r);
        ys.row_mut(i).assign(&ndarray::aview1(&y));
    }
    let train = Dataset::new(xs, ys)?;
    let mut rt = substream(seed, &[tag::TEST]);
    let test_x = Array2::from_shape_fn((config.n_test, 2), |_| rt.random_range(-0.25..0.25));
    let test_truth = (0..config.n_test)
        .map(|i| {
            let x = test_x.row(i).to_vec();
            let mut r = substream(seed, &[tag::TEST, i as u64]);
            let rows: Vec<Vec<f64>> = (0..config.test_draws).map(|_| model.sample(&x, &mut r)).collect();
            EmpiricalMeasure::from_rows(&rows)
        })
        .collect::<Result<_, _>>()?;
    Ok(Example1Data {
        model,
        train,
        test_x,
        test_truth,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeErrors {
    pub mean_err: f64,
    pub sd_err: f64,
    /// (test point, component) pairs dropped for a near-zero truth mean.
    pub excluded_mean: usize,
    /// Pairs dropped for a near-zero truth SD.
    pub excluded_sd: usize,
}

fn column_mean_sd(m: &EmpiricalMeasure, j: usize) -> (f64, f64) {
    let col = m.points().column(j).to_owned();
    let mean = col.mean().unwrap_or(0.0);
    let sd = if m.len() > 1 { col.std(1.0) } else { 0.0 };
    (mean, sd)
}

/// Average relative errors in the ensemble mean and SD over test inputs and
/// output components.
pub fn relative_errors(
    truth: &[EmpiricalMeasure],
    pred: &[EmpiricalMeasure],
) -> Result<RelativeErrors, ExperimentError> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(ExperimentError::Config(format!(
            "test grids differ: {} truth vs {} predicted ensembles",
            truth.len(),
            pred.len()
        )));
    }
    let (mut sm, mut nm, mut ss, mut ns) = (0.0, 0usize, 0.0, 0usize);
    let (mut xm, mut xs) = (0, 0);
    for (t, p) in truth.iter().zip(pred) {
        if t.dim() != p.dim() {
            return Err(ExperimentError::Config(format!(
                "component counts differ: {} vs {}",
                t.dim(),
                p.dim()
            )));
        }
        for j in 0..t.dim() {
            let (tm, tsd) = column_mean_sd(t, j);
            let (pm, psd) = column_mean_sd(p, j);
            if tm.abs() < DIVISION_GUARD {
                xm += 1;
            } else {
                sm += (pm - tm).abs() / tm.abs();
                nm += 1;
            }
            if tsd < DIVISION_GUARD {
                xs += 1;
            } else {
                ss += (psd - tsd).abs() / tsd;
                ns += 1;
            }
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(RelativeErrors {
        mean_err: avg(sm, nm),
        sd_err: avg(ss, ns),
        excluded_mean: xm,
        excluded_sd: xs,
    })
}

pub const N_OSCILLATORS: usize = 48;
pub const STATE_DIM: usize = 2 * N_OSCILLATORS;
const COUPLING: f64 = 1.0 / 50.0;

/// Right-hand side of the oscillator chain. `state` holds 48 positions then
/// 48 velocities; the chain is pinned to zero at both phantom ends.
pub fn oscillator_rhs(state: &[f64], c: &[f64], out: &mut [f64]) {
    let n = N_OSCILLATORS;
    let (x, v) = state.split_at(n);
    for j in 0..n {
        let left = if j == 0 { 0.0 } else { x[j - 1] };
        let right = if j + 1 == n { 0.0 } else { x[j + 1] };
        out[j] = v[j];
        out[n + j] = COUPLING * (left - x[j]) + COUPLING * (right - x[j]) - c[j] * v[j];
    }
}

/// `sum v^2 + (1/50) sum (x_{j+1} - x_j)^2` including both boundary bonds.
pub fn oscillator_energy(state: &[f64]) -> f64 {
    let n = N_OSCILLATORS;
    let (x, v) = state.split_at(n);
    let mut e: f64 = v.iter().map(|u| u * u).sum();
    let mut prev = 0.0;
    for &xj in x.iter().chain(std::iter::once(&0.0)) {
        e += COUPLING * (xj - prev) * (xj - prev);
        prev = xj;
    }
    e
}

/// Damping coefficients `c_j = exp(xi_j / 4 - 1.6)` with `d` independent
/// `xi ~ N(0, sigma^2)`; components `j >= d` share the last draw.
pub fn sample_damping<R: Rng + ?Sized>(d: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    assert!((1..=N_OSCILLATORS).contains(&d), "d must lie in 1..=48");
    let xi: Vec<f64> = (0..d).map(|_| sigma * rng::standard_normal(rng)).collect();
    (0..N_OSCILLATORS)
        .map(|j| (xi[j.min(d - 1)] / 4.0 - 1.6).exp())
        .collect()
}

/// Arithmetic needed by one RK4 step, implemented for plain vectors and for
/// graph nodes with identical operation order.
trait Rk4Ops {
    type S: Clone;
    fn rhs(&mut self, y: &Self::S) -> Result<Self::S, ExperimentError>;
    /// `y + a * k`
    fn axpy(&mut self, y: &Self::S, a: f64, k: &Self::S) -> Result<Self::S, ExperimentError>;
    fn add(&mut self, a: &Self::S, b: &Self::S) -> Result<Self::S, ExperimentError>;
}

fn rk4_step<O: Rk4Ops>(ops: &mut O, y: &O::S, h: f64) -> Result<O::S, ExperimentError> {
    let k1 = ops.rhs(y)?;
    let y2 = ops.axpy(y, 0.5 * h, &k1)?;
    let k2 = ops.rhs(&y2)?;
    let y3 = ops.axpy(y, 0.5 * h, &k2)?;
    let k3 = ops.rhs(&y3)?;
    let y4 = ops.axpy(y, h, &k3)?;
    let k4 = ops.rhs(&y4)?;
    let t = ops.axpy(&k1, 2.0, &k2)?;
    let t = ops.axpy(&t, 2.0, &k3)?;
    let t = ops.add(&t, &k4)?;
    ops.axpy(y, h / 6.0, &t)
}

fn rollout<O: Rk4Ops>(
    ops: &mut O,
    y0: O::S,
    dt: f64,
    n_t: usize,
    substeps: usize,
    finite: impl Fn(&O, &O::S) -> bool,
) -> Result<Vec<O::S>, ExperimentError> {
    let h = dt / substeps as f64;
    let mut y = y0;
    let mut out = Vec::with_capacity(n_t);
    for slice in 0..n_t {
        for _ in 0..substeps {
            y = rk4_step(ops, &y, h)?;
        }
        if !finite(ops, &y) {
            return Err(ExperimentError::NonFiniteState { slice: slice + 1 });
        }
        out.push(y.clone());
    }
    Ok(out)
}

struct PlainOps<F: FnMut(&[f64], &mut [f64])> {
    f: F,
}

impl<F: FnMut(&[f64], &mut [f64])> Rk4Ops for PlainOps<F> {
    type S = Vec<f64>;

    fn rhs(&mut self, y: &Vec<f64>) -> Result<Vec<f64>, ExperimentError> {
        let mut out = vec![0.0; y.len()];
        (self.f)(y, &mut out);
        Ok(out)
    }

    fn axpy(&mut self, y: &Vec<f64>, a: f64, k: &Vec<f64>) -> Result<Vec<f64>, ExperimentError> {
        Ok(y.iter().zip(k).map(|(y, k)| y + k * a).collect())
    }

    fn add(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Result<Vec<f64>, ExperimentError> {
        Ok(a.iter().zip(b).map(|(a, b)| a + b).collect())
    }
}

/// Classical RK4 with step `dt / substeps`, returning the states at
/// `t_i = i dt` for `i = 1..=n_t`.
pub fn integrate_rk4<F: FnMut(&[f64], &mut [f64])>(
    rhs: F,
    y0: &[f64],
    dt: f64,
    n_t: usize,
    substeps: usize,
) -> Result<Vec<Vec<f64>>, ExperimentError> {
    if substeps == 0 || !(dt > 0.0) {
        return Err(ExperimentError::Config(format!("need substeps >= 1 and dt > 0, got {substeps} and {dt}")));
    }
    let mut ops = PlainOps { f: rhs };
    rollout(&mut ops, y0.to_vec(), dt, n_t, substeps, |_, y| y.iter().all(|v| v.is_finite()))
}

struct SnnPlainOps<'a> {
    params: &'a SnnParams,
    realization: &'a WeightRealization,
}

impl Rk4Ops for SnnPlainOps<'_> {
    type S = Vec<f64>;

    fn rhs(&mut self, y: &Vec<f64>) -> Result<Vec<f64>, ExperimentError> {
        Ok(snn::forward_values(self.params, y, self.realization)?)
    }

    fn axpy(&mut self, y: &Vec<f64>, a: f64, k: &Vec<f64>) -> Result<Vec<f64>, ExperimentError> {
        Ok(y.iter().zip(k).map(|(y, k)| y + k * a).collect())
    }

    fn add(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Result<Vec<f64>, ExperimentError> {
        Ok(a.iter().zip(b).map(|(a, b)| a + b).collect())
    }
}

struct SnnGraphOps<'g, 'p> {
    graph: &'g mut Graph<'p>,
    vars: &'g ParamVars,
    weights: &'g [Var],
    activation: crate::autodiff::Activation,
}

impl Rk4Ops for SnnGraphOps<'_, '_> {
    type S = Var;

    fn rhs(&mut self, y: &Var) -> Result<Var, ExperimentError> {
        Ok(snn::forward_graph(self.graph, self.activation, self.vars, self.weights, *y)?)
    }

    fn axpy(&mut self, y: &Var, a: f64, k: &Var) -> Result<Var, ExperimentError> {
        let s = self.graph.scale(*k, a);
        Ok(self.graph.add(*y, s).map_err(SnnError::from)?)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, ExperimentError> {
        Ok(self.graph.add(*a, *b).map_err(SnnError::from)?)
    }
}

/// Surrogate trajectory `dy/dt = SNN(y)` with one frozen realization.
pub fn rollout_snn(
    params: &SnnParams,
    realization: &WeightRealization,
    y0: &[f64],
    dt: f64,
    n_t: usize,
    substeps: usize,
) -> Result<Vec<Vec<f64>>, ExperimentError> {
    let mut ops = SnnPlainOps { params, realization };
    rollout(&mut ops, y0.to_vec(), dt, n_t, substeps, |_, y| y.iter().all(|v| v.is_finite()))
}

/// Trajectory ensemble: `states[[traj, slice, comp]]` at `times[slice]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEnsemble {
    pub initial: Array2<f64>,
    pub states: Array3<f64>,
    pub times: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn n_traj(&self) -> usize {
        self.states.dim().0
    }

    pub fn n_slices(&self) -> usize {
        self.states.dim().1
    }

    pub fn dim(&self) -> usize {
        self.states.dim().2
    }

    fn from_rollouts(initial: Array2<f64>, rollouts: Vec<Vec<Vec<f64>>>, dt: f64) -> Self {
        let n = rollouts.len();
        let n_t = rollouts.first().map_or(0, Vec::len);
        let dim = initial.ncols();
        let mut states = Array3::zeros((n, n_t, dim));
        for (i, traj) in rollouts.iter().enumerate() {
            for (s, y) in traj.iter().enumerate() {
                states
                    .index_axis_mut(Axis(0), i)
                    .row_mut(s)
                    .assign(&ndarray::aview1(y));
            }
        }
        TrajectoryEnsemble {
            initial,
            states,
            times: (1..=n_t).map(|i| i as f64 * dt).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeConfig {
    /// Number of independent damping draws.
    pub d: usize,
    /// Log-noise scale of the damping.
    pub sigma: f64,
    /// Initial-condition noise.
    pub sigma0: f64,
    pub dt: f64,
    pub n_t: usize,
    pub n_traj: usize,
    pub substeps: usize,
    /// RHS ensemble size for the vector-field error.
    pub k_f: usize,
    /// Sampled states per time slice for the vector-field error.
    pub states_per_slice: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig {
            d: 5,
            sigma: 1.0,
            sigma0: 0.01,
            dt: 0.1,
            n_t: 30,
            n_traj: 300,
            substeps: 5,
            k_f: 64,
            states_per_slice: 10,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if !(1..=N_OSCILLATORS).contains(&self.d) {
            return bad(format!("d must lie in 1..=48, got {}", self.d));
        }
        if self.n_t == 0 || self.n_traj == 0 || self.substeps == 0 || self.k_f == 0 {
            return bad("n_t, n_traj, substeps and k_f must be >= 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.sigma >= 0.0 && self.sigma0 >= 0.0) {
            return bad("noise scales must be >= 0".into());
        }
        Ok(())
    }
}

/// Ground-truth ensemble and the damping vector used by each trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeTruth {
    pub ensemble: TrajectoryEnsemble,
    pub dampings: Vec<Vec<f64>>,
}

/// Initial states `y0 ~ N(1, sigma0^2 I)` and per-trajectory dampings.
pub fn gen_ode_truth(config: &OdeConfig, seed: u64) -> Result<OdeTruth, ExperimentError> {
    config.validate()?;
    let per: Vec<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> = (0..config.n_traj)
        .into_par_iter()
        .map(|i| {
            let mut r = substream(seed, &[tag::INITIAL_STATE, i as u64]);
            let y0: Vec<f64> = (0..STATE_DIM)
                .map(|_| 1.0 + config.sigma0 * rng::standard_normal(&mut r))
                .collect();
            let c = sample_damping(config.d, config.sigma, &mut substream(seed, &[tag::DAMPING, i as u64]));
            let traj = integrate_rk4(|y, o| oscillator_rhs(y, &c, o), &y0, config.dt, config.n_t, config.substeps)?;
            Ok((y0, c, traj))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let mut initial = Array2::zeros((config.n_traj, STATE_DIM));
    let mut dampings = Vec::with_capacity(config.n_traj);
    let mut rollouts = Vec::with_capacity(config.n_traj);
    for (i, (y0, c, traj)) in per.into_iter().enumerate() {
        initial.row_mut(i).assign(&ndarray::aview1(&y0));
        dampings.push(c);
        rollouts.push(traj);
    }
    Ok(OdeTruth {
        ensemble: TrajectoryEnsemble::from_rollouts(initial, rollouts, config.dt),
        dampings,
    })
}

/// Surrogate rollouts from each initial state of `truth`, one frozen
/// realization per trajectory drawn from `(seed, path, traj)`.
pub fn predict_ensemble(
    params: &SnnParams,
    initial: ArrayView2<'_, f64>,
    dt: f64,
    n_t: usize,
    substeps: usize,
    seed: u64,
    path: &[u64],
) -> Result<TrajectoryEnsemble, ExperimentError> {
    let rollouts: Vec<Vec<Vec<f64>>> = (0..initial.nrows())
        .into_par_iter()
        .map(|i| {
            let mut p = path.to_vec();
            p.push(i as u64);
            let w = snn::sample_realization(params, &mut substream(seed, &p));
            rollout_snn(params, &w, initial.row(i).as_slice().unwrap(), dt, n_t, substeps)
        })
        .collect::<Result<_, _>>()?;
    Ok(TrajectoryEnsemble::from_rollouts(
        initial.to_owned(),
        rollouts,
        dt,
    ))
}

/// Time-decoupled local loss for a surrogate ODE, differentiated through
/// every RK4 stage of each rollout.
pub struct OdeObjective<'a> {
    pub truth: &'a TrajectoryEnsemble,
    pub index: NeighborhoodIndex,
    eligible: Vec<usize>,
    dt: f64,
    substeps: usize,
    seed: u64,
}

impl<'a> OdeObjective<'a> {
    pub fn new(truth: &'a TrajectoryEnsemble, dt: f64, substeps: usize, config: &TrainConfig) -> Result<Self, ExperimentError> {
        if truth.dim() != config.snn.input_dim || truth.dim() != config.snn.output_dim {
            return Err(ExperimentError::Config(format!(
                "state dimension {} does not match network {} -> {}",
                truth.dim(),
                config.snn.input_dim,
                config.snn.output_dim
            )));
        }
        let index = locality::build_index(truth.initial.view(), config.delta)?;
        let eligible = locality::eligible(&index, config.n0);
        Ok(OdeObjective {
            truth,
            index,
            eligible,
            dt,
            substeps,
            seed: config.seed,
        })
    }

    fn realization(&self, params: &SnnParams, epoch: usize, traj: usize) -> WeightRealization {
        snn::sample_realization(
            params,
            &mut substream(self.seed, &[tag::REALIZATION, epoch as u64, traj as u64]),
        )
    }

    fn loss_and_grad_inner(
        &self,
        params: &SnnParams,
        batch: &MinibatchSelection,
        epoch: usize,
        grad: &mut [f64],
    ) -> Result<f64, ExperimentError> {
        let rows = self.index.union(&batch.indices);
        let n_t = self.truth.n_slices();
        let realizations: Vec<WeightRealization> = rows
            .par_iter()
            .map(|&r| self.realization(params, epoch, r))
            .collect();
        let rollouts: Vec<Vec<Vec<f64>>> = rows
            .par_iter()
            .zip(&realizations)
            .map(|(&r, w)| {
                rollout_snn(params, w, self.truth.initial.row(r).as_slice().unwrap(), self.dt, n_t, self.substeps)
            })
            .collect::<Result<_, _>>()?;
        let mut preds = Array3::zeros(self.truth.states.dim());
        for (&r, traj) in rows.iter().zip(&rollouts) {
            for (s, y) in traj.iter().enumerate() {
                preds.index_axis_mut(Axis(0), r).row_mut(s).assign(&ndarray::aview1(y));
            }
        }
        let loss = locality::time_decoupled_loss(self.truth.states.view(), preds.view(), &batch.indices, &self.index)?;

        let n_params = params.param_count();
        let partials: Vec<Vec<f64>> = rows
            .par_iter()
            .zip(&realizations)
            .map(|(&r, w)| -> Result<Vec<f64>, ExperimentError> {
                let mut g = Graph::new();
                let vars = ParamVars::register(&mut g, params)?;
                let weights = vars.realize(&mut g, w)?;
                let y0 = g.vector(self.truth.initial.row(r).to_vec());
                let mut ops = SnnGraphOps {
                    graph: &mut g,
                    vars: &vars,
                    weights: &weights,
                    activation: params.config.activation,
                };
                let states = rollout(&mut ops, y0, self.dt, n_t, self.substeps, |_, _| true)?;
                let g_traj = loss.grad.index_axis(Axis(0), r);
                let seeds: Vec<(Var, Vec<f64>)> = states
                    .into_iter()
                    .enumerate()
                    .map(|(s, v)| (v, g_traj.row(s).to_vec()))
                    .collect();
                let out = g.external_scalar(0.0, seeds).map_err(SnnError::from)?;
                g.backward(out).map_err(SnnError::from)?;
                let mut acc = vec![0.0; n_params];
                vars.accumulate_grads(&g, &mut acc);
                Ok(acc)
            })
            .collect::<Result<_, _>>()?;
        for p in partials {
            grad.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
        Ok(loss.value)
    }
}

impl Objective for OdeObjective<'_> {
    fn eligible(&self) -> &[usize] {
        &self.eligible
    }

    fn loss_and_grad(
        &self,
        params: &SnnParams,
        batch: &MinibatchSelection,
        epoch: usize,
        grad: &mut [f64],
    ) -> Result<f64, TrainError> {
        Ok(self.loss_and_grad_inner(params, batch, epoch, grad)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeRun {
    pub params: SnnParams,
    pub history: TrainHistory,
    pub truth: OdeTruth,
    /// Surrogate rollouts after training, from the truth initial states.
    pub predicted: TrajectoryEnsemble,
}

/// Trains a surrogate on a freshly generated truth ensemble.
pub fn train_ode_recon(ode: &OdeConfig, train: &TrainConfig) -> Result<OdeRun, ExperimentError> {
    ode.validate()?;
    let truth = gen_ode_truth(ode, train.seed)?;
    let params = trainer::init_params(train)?;
    let (params, history) = if train.epoch_max == 0 {
        (params, TrainHistory::default())
    } else {
        let objective = OdeObjective::new(&truth.ensemble, ode.dt, ode.substeps, train)?;
        trainer::run(&objective, params, train)?
    };
    let predicted = predict_ensemble(
        &params,
        truth.ensemble.initial.view(),
        ode.dt,
        ode.n_t,
        ode.substeps,
        train.seed,
        &[tag::EVAL],
    )?;
    Ok(OdeRun {
        params,
        history,
        truth,
        predicted,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeErrors {
    pub err_y_per_slice: Vec<f64>,
    pub err_y: f64,
    pub err_f: f64,
    /// Normalizers below [`DIVISION_GUARD`] that were skipped.
    pub excluded: usize,
}

fn ensemble_slice(e: &TrajectoryEnsemble, s: usize) -> Result<EmpiricalMeasure, OtError> {
    EmpiricalMeasure::new(e.states.index_axis(Axis(1), s).to_owned())
}

/// Per-slice state error between two equal-size ensembles.
pub fn err_y(truth: &TrajectoryEnsemble, pred: &TrajectoryEnsemble) -> Result<(Vec<f64>, usize), ExperimentError> {
    if truth.states.dim() != pred.states.dim() {
        return Err(ExperimentError::Config(format!(
            "ensembles differ in shape: {:?} vs {:?}",
            truth.states.dim(),
            pred.states.dim()
        )));
    }
    let per: Vec<Option<f64>> = (0..truth.n_slices())
        .into_par_iter()
        .map(|s| -> Result<Option<f64>, ExperimentError> {
            let t = ensemble_slice(truth, s)?;
            let p = ensemble_slice(pred, s)?;
            let norm = t.points().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
            if norm < DIVISION_GUARD {
                return Ok(None);
            }
            Ok(Some(ot::squared_w2_cost(&t, &p)? / norm))
        })
        .collect::<Result<_, _>>()?;
    let excluded = per.iter().filter(|v| v.is_none()).count();
    Ok((per.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect(), excluded))
}

/// State error per slice and its average, plus the vector-field error at
/// states sampled from the truth ensemble.
pub fn ode_errors(
    truth: &OdeTruth,
    pred: &TrajectoryEnsemble,
    params: &SnnParams,
    config: &OdeConfig,
    seed: u64,
) -> Result<OdeErrors, ExperimentError> {
    let (per, mut excluded) = err_y(&truth.ensemble, pred)?;
    let kept: Vec<f64> = per.iter().copied().filter(|v| v.is_finite()).collect();
    let err_y = kept.iter().sum::<f64>() / kept.len().max(1) as f64;

    let e = &truth.ensemble;
    let per_slice = config.states_per_slice.min(e.n_traj());
    let jobs: Vec<(usize, usize)> = (0..e.n_slices())
        .flat_map(|s| {
            let mut r = substream(seed, &[tag::RHS_ENSEMBLE, s as u64]);
            rand::seq::index::sample(&mut r, e.n_traj(), per_slice)
                .into_iter()
                .map(move |i| (s, i))
                .collect::<Vec<_>>()
        })
        .collect();
    let ratios: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(s, i)| -> Result<Option<f64>, ExperimentError> {
            let y = e.states.index_axis(Axis(0), i).row(s).to_vec();
            let mut rc = substream(seed, &[tag::RHS_ENSEMBLE, s as u64, i as u64, 0]);
            let mut rs = substream(seed, &[tag::RHS_ENSEMBLE, s as u64, i as u64, 1]);
            let mut tf = Vec::with_capacity(config.k_f * STATE_DIM);
            let mut pf = Vec::with_capacity(config.k_f * STATE_DIM);
            let mut out = vec![0.0; STATE_DIM];
            for _ in 0..config.k_f {
                let c = sample_damping(config.d, config.sigma, &mut rc);
                oscillator_rhs(&y, &c, &mut out);
                tf.extend_from_slice(&out);
                pf.extend(snn::forward(params, &y, &mut rs, snn::Mode::Fresh)?);
            }
            let norm = tf.iter().map(|v| v * v).sum::<f64>() / config.k_f as f64;
            if norm < DIVISION_GUARD {
                return Ok(None);
            }
            let t = EmpiricalMeasure::from_flat(config.k_f, STATE_DIM, tf)?;
            let p = EmpiricalMeasure::from_flat(config.k_f, STATE_DIM, pf)?;
            Ok(Some(ot::squared_w2_cost(&t, &p)? / norm))
        })
        .collect::<Result<_, _>>()?;
    excluded += ratios.iter().filter(|v| v.is_none()).count();
    let kept: Vec<f64> = ratios.into_iter().flatten().collect();
    let err_f = kept.iter().sum::<f64>() / kept.len().max(1) as f64;
    Ok(OdeErrors {
        err_y_per_slice: per,
        err_y,
        err_f,
        excluded,
    })
}
