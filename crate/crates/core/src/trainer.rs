//! Adam training of a stochastic network against a minibatch local W2 loss.
//!
//! The epoch loop is shared by every experiment: refresh the minibatch every
//! `epoch_update` epochs, ask the [`Objective`] for the loss and parameter
//! gradient at fresh weight realizations, then take one Adam step.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Shape};
use crate::locality::{self, Dataset, LocalityError, MinibatchSelection, NeighborhoodIndex};
use crate::ot::EmpiricalMeasure;
use crate::rng::{substream, tag};
use crate::snn::{self, ForwardMode, ParamVars, SnnConfig, SnnError, SnnParams, WeightRealization, SIGMA_FLOOR};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient at {location}")]
    NonFiniteGradient { location: String },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("{0}")]
    Diverged(String),
    #[error(transparent)]
    Locality(#[from] LocalityError),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epoch_max: usize,
    pub epoch_update: usize,
    pub n_batch: usize,
    pub delta: f64,
    pub n0: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Rows per autodiff graph in the backward pass.
    pub chunk_size: usize,
    /// Keep a parameter snapshot every this many epochs (0 disables).
    pub snapshot_every: usize,
    pub snn: SnnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            epoch_max: 1000,
            epoch_update: 20,
            n_batch: 128,
            delta: 0.25,
            n0: 4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
            chunk_size: 32,
            snapshot_every: 0,
            snn: SnnConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Table-1 settings for the sin-of-linear random field example.
    pub fn example1(input_dim: usize, output_dim: usize) -> Self {
        TrainConfig {
            epoch_max: 1000,
            delta: 0.25,
            snn: SnnConfig {
                input_dim,
                output_dim,
                widths: vec![40; 4],
                activation: crate::autodiff::Activation::Elu,
                forward_mode: ForwardMode::Resnet,
                ..SnnConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    /// Table-1 settings for the damped-oscillator example.
    pub fn example2(state_dim: usize) -> Self {
        TrainConfig {
            epoch_max: 400,
            delta: 0.125,
            snn: SnnConfig {
                input_dim: state_dim,
                output_dim: state_dim,
                widths: vec![60; 2],
                activation: crate::autodiff::Activation::Elu,
                forward_mode: ForwardMode::Normal,
                ..SnnConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.epoch_update == 0 {
            return bad("epoch_update must be >= 1".into());
        }
        if self.n_batch == 0 {
            return bad("n_batch must be >= 1".into());
        }
        if self.n0 == 0 {
            return bad("n0 must be >= 1".into());
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return bad(format!("delta must be > 0, got {}", self.delta));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be >= 1".into());
        }
        self.snn.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

/// In-place Adam update with bias correction on a flat parameter vector.
pub fn adam_update(theta: &mut [f64], grads: &[f64], state: &mut AdamState, h: AdamHyper) {
    assert_eq!(theta.len(), grads.len());
    assert_eq!(theta.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// Adam step on network parameters followed by the sigma floor.
pub fn adam_step(
    params: &mut SnnParams,
    grads: &[f64],
    state: &mut AdamState,
    h: AdamHyper,
) -> Result<(), TrainError> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            location: params.describe_flat_index(i),
        });
    }
    let mut theta = params.to_flat();
    adam_update(&mut theta, grads, state, h);
    params.set_flat(&theta);
    params.clamp_sigma(SIGMA_FLOOR);
    Ok(())
}

/// Scales `grads` to global norm `max_norm` if it is larger.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub minibatch_id: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub snapshots: Vec<(usize, SnnParams)>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Loss and gradient provider for the epoch loop.
pub trait Objective: Sync {
    /// Reference indices that may enter a minibatch.
    fn eligible(&self) -> &[usize];

    /// Loss at fresh realizations for `epoch`; adds the parameter gradient
    /// (layout of [`SnnParams::to_flat`]) into `grad`.
    fn loss_and_grad(
        &self,
        params: &SnnParams,
        batch: &MinibatchSelection,
        epoch: usize,
        grad: &mut [f64],
    ) -> Result<f64, TrainError>;
}

/// Runs the epoch loop from `params`.
pub fn run<O: Objective>(
    objective: &O,
    mut params: SnnParams,
    config: &TrainConfig,
) -> Result<(SnnParams, TrainHistory), TrainError> {
    config.validate()?;
    let mut history = TrainHistory::default();
    if config.epoch_max == 0 {
        return Ok((params, history));
    }
    if objective.eligible().is_empty() {
        return Err(LocalityError::NoEligible {
            delta: config.delta,
            n0: config.n0,
        }
        .into());
    }
    let hyper = AdamHyper::from(config);
    let mut state = AdamState::new(params.param_count());
    let mut batch: Option<MinibatchSelection> = None;
    let mut grad = vec![0.0; params.param_count()];
    for epoch in 0..config.epoch_max {
        let start = Instant::now();
        if epoch % config.epoch_update == 0 {
            let id = epoch / config.epoch_update;
            batch = Some(locality::select_minibatch(
                objective.eligible(),
                config.n_batch,
                config.delta,
                config.n0,
                id,
                &mut substream(config.seed, &[tag::MINIBATCH, id as u64]),
            )?);
        }
        let sel = batch.as_ref().expect("selected at epoch 0");
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = objective.loss_and_grad(&params, sel, epoch, &mut grad)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        if let Some(c) = config.clip_norm {
            clip_global_norm(&mut grad, c);
        }
        adam_step(&mut params, &grad, &mut state, hyper)?;
        history.epochs.push(EpochRecord {
            epoch,
            loss,
            minibatch_id: sel.id,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if config.snapshot_every > 0 && (epoch + 1) % config.snapshot_every == 0 {
            history.snapshots.push((epoch + 1, params.clone()));
        }
    }
    Ok((params, history))
}

/// Network predictions `y_i = SNN(x_i)` with an independent realization per
/// row, compared with the observed outputs through the local loss.
pub struct RegressionObjective<'a> {
    pub data: &'a Dataset,
    pub index: NeighborhoodIndex,
    eligible: Vec<usize>,
    seed: u64,
    chunk_size: usize,
}

impl<'a> RegressionObjective<'a> {
    pub fn new(data: &'a Dataset, config: &TrainConfig) -> Result<Self, TrainError> {
        if data.input_dim() != config.snn.input_dim || data.output_dim() != config.snn.output_dim {
            return Err(TrainError::Config(format!(
                "dataset is {} -> {}, network is {} -> {}",
                data.input_dim(),
                data.output_dim(),
                config.snn.input_dim,
                config.snn.output_dim
            )));
        }
        let index = locality::build_index(data.xs.view(), config.delta)?;
        let eligible = locality::eligible(&index, config.n0);
        Ok(RegressionObjective {
            data,
            index,
            eligible,
            seed: config.seed,
            chunk_size: config.chunk_size,
        })
    }

    fn realization(&self, params: &SnnParams, epoch: usize, row: usize) -> WeightRealization {
        snn::sample_realization(
            params,
            &mut substream(self.seed, &[tag::REALIZATION, epoch as u64, row as u64]),
        )
    }
}

impl Objective for RegressionObjective<'_> {
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
        let rows = self.index.union(&batch.indices);
        let realizations: Vec<WeightRealization> = rows
            .par_iter()
            .map(|&r| self.realization(params, epoch, r))
            .collect();
        let outputs: Vec<Vec<f64>> = rows
            .par_iter()
            .zip(&realizations)
            .map(|(&r, w)| snn::forward_values(params, self.data.xs.row(r).as_slice().unwrap(), w))
            .collect::<Result<_, _>>()?;
        // predictions at unused rows never enter a loss term
        let mut preds = Array2::zeros(self.data.ys.dim());
        for (&r, y) in rows.iter().zip(&outputs) {
            preds.row_mut(r).assign(&ndarray::ArrayView1::from(y.as_slice()));
        }
        let loss = locality::local_w2_loss(self.data.ys.view(), preds.view(), &batch.indices, &self.index)?;

        let n_params = params.param_count();
        let chunks: Vec<(Vec<usize>, Vec<&WeightRealization>)> = rows
            .chunks(self.chunk_size)
            .zip(realizations.chunks(self.chunk_size))
            .map(|(r, w)| (r.to_vec(), w.iter().collect()))
            .collect();
        let partials: Vec<Vec<f64>> = chunks
            .par_iter()
            .map(|(chunk_rows, chunk_real)| -> Result<Vec<f64>, TrainError> {
                let mut g = Graph::new();
                let vars = ParamVars::register(&mut g, params)?;
                let mut seeds = Vec::with_capacity(chunk_rows.len());
                for (&r, w) in chunk_rows.iter().zip(chunk_real) {
                    let weights = vars.realize(&mut g, w)?;
                    let x = g.leaf(self.data.xs.row(r).to_vec(), Shape::vector(self.data.input_dim()))?;
                    let y = snn::forward_graph(&mut g, params.config.activation, &vars, &weights, x)?;
                    seeds.push((y, loss.grad.row(r).to_vec()));
                }
                let out = g.external_scalar(0.0, seeds)?;
                g.backward(out)?;
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

/// Initial parameters for `config` from its seed.
pub fn init_params(config: &TrainConfig) -> Result<SnnParams, TrainError> {
    Ok(snn::init(&config.snn, &mut substream(config.seed, &[tag::INIT]))?)
}

/// Algorithm 1 on a regression dataset.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<(SnnParams, TrainHistory), TrainError> {
    config.validate()?;
    let params = init_params(config)?;
    if config.epoch_max == 0 {
        return Ok((params, TrainHistory::default()));
    }
    let objective = RegressionObjective::new(data, config)?;
    run(&objective, params, config)
}

/// `k` fresh-mode outputs at each input, one independent stream per input.
pub fn evaluate(
    params: &SnnParams,
    inputs: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
) -> Result<Vec<EmpiricalMeasure>, TrainError> {
    if k == 0 {
        return Err(TrainError::Config("evaluation ensemble size must be >= 1".into()));
    }
    (0..inputs.nrows())
        .into_par_iter()
        .map(|i| {
            let x = inputs.row(i).to_vec();
            let mut r = substream(seed, &[tag::EVAL, i as u64]);
            Ok(snn::forward_ensemble(params, &x, k, &mut r)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::rng;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        // y = 2x + 0.3 eps, x on [0, 1]
        let mut xs = Array2::zeros((n, 1));
        let mut ys = Array2::zeros((n, 1));
        let mut r = substream(seed, &[tag::DATA]);
        for i in 0..n {
            let x = i as f64 / n as f64;
            xs[[i, 0]] = x;
            ys[[i, 0]] = 2.0 * x + 0.3 * rng::standard_normal(&mut r);
        }
        Dataset::new(xs, ys).unwrap()
    }

    fn toy_config(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            epoch_max: 40,
            epoch_update: 7,
            n_batch: 8,
            delta: 0.1,
            n0: 4,
            seed,
            chunk_size: 5,
            snn: SnnConfig {
                input_dim: 1,
                output_dim: 1,
                widths: vec![6, 6],
                activation: Activation::Elu,
                forward_mode: ForwardMode::Resnet,
                init_scale: 0.1,
                sigma_init: 0.1,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut theta = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.25, 0.25];
        let h = AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let before = theta.clone();
        // with nonzero moments the step moves; with zero moments it does not
        let mut z = AdamState::new(2);
        adam_update(&mut theta, &[0.0, 0.0], &mut z, h);
        assert_eq!(theta, before);
        adam_update(&mut theta, &[0.0, 0.0], &mut st, h);
        assert_eq!(st.m, vec![0.45, 0.45]);
    }

    #[test]
    fn adam_first_step() {
        let mut theta = vec![0.0];
        let mut st = AdamState::new(1);
        let h = AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        adam_update(&mut theta, &[1.0], &mut st, h);
        assert!((theta[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // scalar re-derivation with running products instead of powi
        let h = AdamHyper { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut theta = vec![0.7];
        let mut st = AdamState::new(1);
        let (mut x, mut m, mut v, mut p1, mut p2) = (0.7f64, 0.0f64, 0.0f64, 1.0f64, 1.0f64);
        for k in 0..100 {
            let g = (x - 0.2) * 2.0 + (k as f64 * 0.37).sin();
            let gt = (theta[0] - 0.2) * 2.0 + (k as f64 * 0.37).sin();
            adam_update(&mut theta, &[gt], &mut st, h);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            p1 *= 0.9;
            p2 *= 0.999;
            x -= 0.01 * (m / (1.0 - p1)) / ((v / (1.0 - p2)).sqrt() + 1e-8);
            assert!((theta[0] - x).abs() <= 1e-12, "step {k}: {} vs {x}", theta[0]);
        }
    }

    #[test]
    fn adam_step_rejects_nonfinite_and_floors_sigma() {
        let mut p = init_params(&toy_config(1)).unwrap();
        let mut st = AdamState::new(p.param_count());
        let h = AdamHyper { lr: 10.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut g = vec![0.0; p.param_count()];
        g[7] = f64::NAN;
        let e = adam_step(&mut p, &g, &mut st, h).unwrap_err();
        assert_eq!(e, TrainError::NonFiniteGradient { location: p.describe_flat_index(7) });
        assert!(e.to_string().contains("layer 0"));
        let g = vec![1.0; p.param_count()];
        adam_step(&mut p, &g, &mut st, h).unwrap();
        assert!(p.layers.iter().all(|l| l.std.iter().all(|s| *s >= SIGMA_FLOOR)));
    }

    #[test]
    fn clip_scales_to_norm() {
        let mut g = vec![3.0, 4.0];
        clip_global_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.3, 0.4];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = toy_data(50, 1);
        let mut c = toy_config(3);
        c.epoch_max = 0;
        let (p, h) = train(&data, &c).unwrap();
        assert_eq!(p, init_params(&c).unwrap());
        assert!(h.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_thread_count_free() {
        let data = toy_data(60, 1);
        let c = toy_config(5);
        let (p1, h1) = train(&data, &c).unwrap();
        let (p2, h2) = train(&data, &c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (p3, h3) = pool.install(|| train(&data, &c)).unwrap();
        let bits = |p: &SnnParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1), bits(&p2));
        assert_eq!(bits(&p1), bits(&p3));
        assert_eq!(h1.losses(), h2.losses());
        assert_eq!(h1.losses(), h3.losses());
        let mut c2 = c.clone();
        c2.chunk_size = 64;
        let (p4, _) = train(&data, &c2).unwrap();
        let diff = p1
            .to_flat()
            .iter()
            .zip(p4.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "chunking changes results by {diff}");
    }

    #[test]
    fn refresh_schedule() {
        let data = toy_data(60, 1);
        let c = toy_config(2);
        let (_, h) = train(&data, &c).unwrap();
        for w in h.epochs.windows(2) {
            let changed = w[1].minibatch_id != w[0].minibatch_id;
            assert_eq!(changed, w[1].epoch % c.epoch_update == 0);
        }
        assert_eq!(h.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_learning_rate_barely_moves() {
        let data = toy_data(60, 1);
        let mut c = toy_config(2);
        c.learning_rate = 1e-300;
        c.snapshot_every = 10;
        let (p, h) = train(&data, &c).unwrap();
        let init = init_params(&c).unwrap();
        assert_eq!(p, init);
        assert_eq!(h.snapshots.len(), 4);
        assert!(h.snapshots.iter().all(|(_, s)| *s == init));
    }

    #[test]
    fn empty_eligible_set_is_a_config_error() {
        let data = toy_data(10, 1);
        let mut c = toy_config(1);
        c.delta = 1e-6;
        c.n0 = 2;
        let e = train(&data, &c).unwrap_err();
        assert!(e.to_string().contains("smaller N0"), "{e}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = toy_data(30, 4);
        let mut c = toy_config(7);
        c.snn.forward_mode = ForwardMode::Normal;
        c.delta = 0.2;
        let obj = RegressionObjective::new(&data, &c).unwrap();
        let params = init_params(&c).unwrap();
        let batch = MinibatchSelection { indices: vec![3, 11, 20], id: 0 };
        let mut g = vec![0.0; params.param_count()];
        obj.loss_and_grad(&params, &batch, 0, &mut g).unwrap();
        let flat = params.to_flat();
        let h = 1e-5;
        let mut q = params.clone();
        let mut worst: f64 = 0.0;
        for i in 0..flat.len() {
            let mut f = flat.clone();
            f[i] += h;
            q.set_flat(&f);
            let mut sink = vec![0.0; flat.len()];
            let up = obj.loss_and_grad(&q, &batch, 0, &mut sink).unwrap();
            f[i] -= 2.0 * h;
            q.set_flat(&f);
            let down = obj.loss_and_grad(&q, &batch, 0, &mut sink).unwrap();
            let num = (up - down) / (2.0 * h);
            worst = worst.max((num - g[i]).abs() / g[i].abs().max(1.0));
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn training_reduces_loss_on_toy_problem() {
        let data = toy_data(200, 9);
        let mut c = toy_config(11);
        c.epoch_max = 300;
        c.n_batch = 32;
        let (p, _) = train(&data, &c).unwrap();
        let init = init_params(&c).unwrap();
        let obj = RegressionObjective::new(&data, &c).unwrap();
        let all = MinibatchSelection { indices: obj.eligible().to_vec(), id: 0 };
        let mut sink = vec![0.0; p.param_count()];
        let before = obj.loss_and_grad(&init, &all, 10_000, &mut sink).unwrap();
        let after = obj.loss_and_grad(&p, &all, 10_000, &mut sink).unwrap();
        assert!(after < 0.5 * before, "{after} vs {before}");
    }

    #[test]
    fn evaluation_shapes_and_zero_sigma() {
        let mut c = toy_config(1);
        c.snn.sigma_init = 0.0;
        let p = init_params(&c).unwrap();
        let xs = Array2::from_shape_vec((3, 1), vec![0.1, 0.2, 0.3]).unwrap();
        let ens = evaluate(&p, xs.view(), 20, 4).unwrap();
        assert_eq!(ens.len(), 3);
        for e in &ens {
            assert_eq!(e.len(), 20);
            let first = e.points().row(0).to_owned();
            assert!(e.points().rows().into_iter().all(|r| r == first));
        }
        assert!(evaluate(&p, xs.view(), 0, 4).is_err());
    }
}
