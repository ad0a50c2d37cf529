//! Stochastic neural network with independently sampled Gaussian weights.
//!
//! Each weight is `w = a + sigma * eps` with `eps ~ N(0, 1)` drawn per
//! forward pass (fresh mode) or once per rollout (frozen mode). Biases and
//! the optional ResNet skip weights are deterministic. The network has `L`
//! hidden layers followed by a linear output layer; in ResNet mode every
//! hidden layer after the first adds `skip * h_prev` to its pre-activation.

use std::borrow::Cow;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::autodiff::{kernels, Activation, AutodiffError, Graph, Shape, Var};
use crate::ot::EmpiricalMeasure;
use crate::rng;

/// Lower bound on every standard deviation after an optimizer step.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SnnError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("input has dimension {got}, network expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("perturbation direction has length {got}, expected {expected}")]
    DirectionLength { expected: usize, got: usize },
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ForwardMode {
    Normal,
    Resnet,
}

impl ForwardMode {
    pub fn name(&self) -> &'static str {
        match self {
            ForwardMode::Normal => "normal",
            ForwardMode::Resnet => "resnet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Some(ForwardMode::Normal),
            "resnet" => Some(ForwardMode::Resnet),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnnConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub forward_mode: ForwardMode,
    /// Standard deviation of the normal used to initialize means and biases.
    pub init_scale: f64,
    pub sigma_init: f64,
}

impl Default for SnnConfig {
    fn default() -> Self {
        SnnConfig {
            input_dim: 1,
            output_dim: 1,
            widths: vec![40, 40],
            activation: Activation::Elu,
            forward_mode: ForwardMode::Normal,
            init_scale: 0.01,
            sigma_init: 0.01,
        }
    }
}

impl SnnConfig {
    pub fn validate(&self) -> Result<(), SnnError> {
        let bad = |m: String| Err(SnnError::InvalidConfig(m));
        if self.widths.is_empty() {
            return bad("at least one hidden layer is required".into());
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.widths.contains(&0) {
            return bad(format!(
                "all widths must be >= 1 (input {}, hidden {:?}, output {})",
                self.input_dim, self.widths, self.output_dim
            ));
        }
        if self.forward_mode == ForwardMode::Resnet && self.widths.windows(2).any(|w| w[0] != w[1]) {
            return bad(format!(
                "resnet mode needs equal hidden widths, got {:?}",
                self.widths
            ));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be finite and >= 0, got {}", self.init_scale));
        }
        if !(self.sigma_init >= 0.0 && self.sigma_init.is_finite()) {
            return bad(format!("sigma_init must be finite and >= 0, got {}", self.sigma_init));
        }
        Ok(())
    }

    pub fn hidden_layers(&self) -> usize {
        self.widths.len()
    }

    /// `(rows, cols)` of each affine map, input layer first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = Vec::with_capacity(self.widths.len() + 2);
        sizes.push(self.input_dim);
        sizes.extend_from_slice(&self.widths);
        sizes.push(self.output_dim);
        sizes.windows(2).map(|w| (w[1], w[0])).collect()
    }

    fn has_skip(&self, layer: usize) -> bool {
        self.forward_mode == ForwardMode::Resnet && layer >= 1 && layer < self.widths.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub rows: usize,
    pub cols: usize,
    /// Weight means, row-major `rows x cols`.
    pub mean: Vec<f64>,
    /// Weight standard deviations, same layout as `mean`.
    pub std: Vec<f64>,
    pub bias: Vec<f64>,
    /// Deterministic ResNet skip weights, `rows x cols`.
    pub skip: Option<Vec<f64>>,
}

impl LayerParams {
    fn weight_len(&self) -> usize {
        self.rows * self.cols
    }

    fn param_len(&self) -> usize {
        2 * self.weight_len() + self.rows + self.skip.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnnParams {
    pub config: SnnConfig,
    pub layers: Vec<LayerParams>,
}

/// One draw of standard-normal noise for every stochastic weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightRealization {
    pub noise: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    Fresh,
    Frozen(&'a WeightRealization),
}

/// Parameters drawn per the configured initialization law.
pub fn init<R: Rng + ?Sized>(config: &SnnConfig, rng: &mut R) -> Result<SnnParams, SnnError> {
    config.validate()?;
    let mut layers = Vec::new();
    for (l, (rows, cols)) in config.layer_dims().into_iter().enumerate() {
        let mut mean = vec![0.0; rows * cols];
        let mut bias = vec![0.0; rows];
        for v in mean.iter_mut() {
            *v = config.init_scale * rng::standard_normal(rng);
        }
        for v in bias.iter_mut() {
            *v = config.init_scale * rng::standard_normal(rng);
        }
        let skip = if config.has_skip(l) {
            let bound = 1.0 / (cols as f64).sqrt();
            let u = Uniform::new(-bound, bound).expect("finite fan-in bound");
            Some((0..rows * cols).map(|_| u.sample(rng)).collect())
        } else {
            None
        };
        layers.push(LayerParams {
            rows,
            cols,
            mean,
            std: vec![config.sigma_init; rows * cols],
            bias,
            skip,
        });
    }
    Ok(SnnParams {
        config: config.clone(),
        layers,
    })
}

pub fn sample_realization<R: Rng + ?Sized>(params: &SnnParams, rng: &mut R) -> WeightRealization {
    WeightRealization {
        noise: params
            .layers
            .iter()
            .map(|l| {
                let mut e = vec![0.0; l.weight_len()];
                rng::fill_standard_normal(rng, &mut e);
                e
            })
            .collect(),
    }
}

impl SnnParams {
    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    /// Total number of trainable scalars (means, stds, biases, skips).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_len).sum()
    }

    /// Flattened parameters, per layer: mean, std, bias, skip.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.mean);
            out.extend_from_slice(&l.std);
            out.extend_from_slice(&l.bias);
            if let Some(s) = &l.skip {
                out.extend_from_slice(s);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut off = 0;
        let mut take = |dst: &mut Vec<f64>| {
            let n = dst.len();
            dst.copy_from_slice(&flat[off..off + n]);
            off += n;
        };
        for l in &mut self.layers {
            take(&mut l.mean);
            take(&mut l.std);
            take(&mut l.bias);
            if let Some(s) = &mut l.skip {
                take(s);
            }
        }
    }

    /// Name of the layer and parameter group owning a flat index.
    pub fn describe_flat_index(&self, mut idx: usize) -> String {
        for (li, l) in self.layers.iter().enumerate() {
            let groups = [
                ("mean", l.weight_len()),
                ("std", l.weight_len()),
                ("bias", l.rows),
                ("skip", l.skip.as_ref().map_or(0, Vec::len)),
            ];
            for (name, n) in groups {
                if idx < n {
                    return format!("layer {li} {name}[{idx}]");
                }
                idx -= n;
            }
        }
        "out of range".into()
    }

    pub fn clamp_sigma(&mut self, floor: f64) {
        for l in &mut self.layers {
            for s in &mut l.std {
                if *s < floor {
                    *s = floor;
                }
            }
        }
    }

    /// Length of the flattened `(a, sigma, b)` space used for perturbations.
    pub fn perturbation_len(&self) -> usize {
        self.layers.iter().map(|l| 2 * l.weight_len() + l.rows).sum()
    }

    /// Index range of the output-layer biases inside the perturbation space.
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        let last = self.layers.last().expect("at least one layer");
        let end = self.perturbation_len();
        end - last.rows..end
    }

    /// `params + eps * direction` over `(a, sigma, b)` (skip weights are
    /// untouched), with sigma re-floored.
    pub fn perturb(&self, direction: &[f64], eps: f64) -> Result<SnnParams, SnnError> {
        self.perturb_with_floor(direction, eps, SIGMA_FLOOR)
    }

    pub fn perturb_with_floor(&self, direction: &[f64], eps: f64, floor: f64) -> Result<SnnParams, SnnError> {
        if direction.len() != self.perturbation_len() {
            return Err(SnnError::DirectionLength {
                expected: self.perturbation_len(),
                got: direction.len(),
            });
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in &mut out.layers {
            for group in [&mut l.mean, &mut l.std, &mut l.bias] {
                for v in group.iter_mut() {
                    *v += eps * direction[off];
                    off += 1;
                }
            }
        }
        out.clamp_sigma(floor);
        Ok(out)
    }

    fn check_input(&self, x: &[f64]) -> Result<(), SnnError> {
        if x.len() != self.input_dim() {
            return Err(SnnError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Tape-free forward pass with a fixed realization. Uses the same kernels
/// and operation order as [`forward_graph`], so values agree bitwise.
pub fn forward_values(
    params: &SnnParams,
    x: &[f64],
    realization: &WeightRealization,
) -> Result<Vec<f64>, SnnError> {
    params.check_input(x)?;
    let mut h = x.to_vec();
    let last = params.layers.len() - 1;
    let mut w = Vec::new();
    for (li, l) in params.layers.iter().enumerate() {
        w.resize(l.weight_len(), 0.0);
        kernels::reparameterize(&l.mean, &l.std, &realization.noise[li], &mut w);
        let mut pre = vec![0.0; l.rows];
        kernels::affine(&w, l.cols, &h, &l.bias, &mut pre);
        if let Some(skip) = &l.skip {
            let zeros = vec![0.0; l.rows];
            let mut s = vec![0.0; l.rows];
            kernels::affine(skip, l.cols, &h, &zeros, &mut s);
            pre.iter_mut().zip(&s).for_each(|(p, v)| *p += v);
        }
        if li < last {
            let mut act = vec![0.0; l.rows];
            kernels::activate(params.config.activation, &pre, &mut act);
            h = act;
        } else {
            h = pre;
        }
    }
    Ok(h)
}

pub fn forward<R: Rng + ?Sized>(
    params: &SnnParams,
    x: &[f64],
    rng: &mut R,
    mode: Mode<'_>,
) -> Result<Vec<f64>, SnnError> {
    match mode {
        Mode::Fresh => {
            let r = sample_realization(params, rng);
            forward_values(params, x, &r)
        }
        Mode::Frozen(r) => forward_values(params, x, r),
    }
}

/// `k` independent fresh-mode forwards at the same input.
pub fn forward_ensemble<R: Rng + ?Sized>(
    params: &SnnParams,
    x: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<EmpiricalMeasure, SnnError> {
    if k == 0 {
        return Err(SnnError::InvalidConfig("ensemble size must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(k * params.output_dim());
    for _ in 0..k {
        data.extend(forward(params, x, rng, Mode::Fresh)?);
    }
    Ok(EmpiricalMeasure::from_flat(k, params.output_dim(), data)
        .map_err(|e| SnnError::InvalidConfig(format!("ensemble output: {e}")))?)
}

/// Graph handles for every parameter tensor of a network.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub mean: Vec<Var>,
    pub std: Vec<Var>,
    pub bias: Vec<Var>,
    pub skip: Vec<Option<Var>>,
    zero_bias: Vec<Option<Var>>,
}

impl ParamVars {
    /// Registers the parameters as borrowed leaves of `graph`.
    pub fn register<'p>(graph: &mut Graph<'p>, params: &'p SnnParams) -> Result<Self, SnnError> {
        let mut pv = ParamVars {
            mean: Vec::new(),
            std: Vec::new(),
            bias: Vec::new(),
            skip: Vec::new(),
            zero_bias: Vec::new(),
        };
        for l in &params.layers {
            let ws = Shape::matrix(l.rows, l.cols);
            pv.mean.push(graph.borrowed_leaf(&l.mean, ws)?);
            pv.std.push(graph.borrowed_leaf(&l.std, ws)?);
            pv.bias.push(graph.borrowed_leaf(&l.bias, Shape::vector(l.rows))?);
            match &l.skip {
                Some(s) => {
                    pv.skip.push(Some(graph.borrowed_leaf(s, ws)?));
                    pv.zero_bias.push(Some(graph.vector(vec![0.0; l.rows])));
                }
                None => {
                    pv.skip.push(None);
                    pv.zero_bias.push(None);
                }
            }
        }
        Ok(pv)
    }

    /// Realized weight nodes `mean + std * noise` for one realization.
    pub fn realize<'p>(
        &self,
        graph: &mut Graph<'p>,
        realization: &'p WeightRealization,
    ) -> Result<Vec<Var>, SnnError> {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(&realization.noise)
            .map(|((&m, &s), e)| Ok(graph.reparameterize(m, s, Cow::Borrowed(e.as_slice()))?))
            .collect()
    }

    /// Adds the accumulated gradients into `out`, laid out like
    /// [`SnnParams::to_flat`].
    pub fn accumulate_grads(&self, graph: &Graph<'_>, out: &mut [f64]) {
        let mut off = 0;
        let mut add = |v: Var| {
            let g = graph.grad(v);
            out[off..off + g.len()]
                .iter_mut()
                .zip(g.iter())
                .for_each(|(o, x)| *o += x);
            off += g.len();
        };
        for l in 0..self.mean.len() {
            add(self.mean[l]);
            add(self.std[l]);
            add(self.bias[l]);
            if let Some(s) = self.skip[l] {
                add(s);
            }
        }
    }
}

/// Differentiable forward pass through realized weights.
pub fn forward_graph(
    graph: &mut Graph<'_>,
    activation: Activation,
    vars: &ParamVars,
    weights: &[Var],
    x: Var,
) -> Result<Var, SnnError> {
    let last = weights.len() - 1;
    let mut h = x;
    for (li, &w) in weights.iter().enumerate() {
        let mut pre = graph.matvec_affine(w, h, vars.bias[li])?;
        if let (Some(skip), Some(zero)) = (vars.skip[li], vars.zero_bias[li]) {
            let s = graph.matvec_affine(skip, h, zero)?;
            pre = graph.add(pre, s)?;
        }
        h = if li < last {
            graph.activation(pre, activation)
        } else {
            pre
        };
    }
    Ok(h)
}

const CHECKPOINT_MAGIC: &str = "w2rf-snn-checkpoint v1";

fn push_block(out: &mut String, name: &str, data: &[f64], rows: usize, cols: usize) {
    let _ = writeln!(out, "{name}");
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

impl SnnParams {
    /// Self-describing text checkpoint. Header first, then per layer the
    /// mean, std, bias and (if present) skip blocks as row-major rows of
    /// shortest round-trip decimal floats.
    pub fn to_checkpoint_string(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "input_dim {}", c.input_dim);
        let _ = writeln!(out, "output_dim {}", c.output_dim);
        let widths: Vec<String> = c.widths.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(out, "widths {}", widths.join(" "));
        let _ = writeln!(out, "activation {}", c.activation.name());
        let _ = writeln!(out, "forward_mode {}", c.forward_mode.name());
        let _ = writeln!(out, "init_scale {:?}", c.init_scale);
        let _ = writeln!(out, "sigma_init {:?}", c.sigma_init);
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                out,
                "layer {i} rows {} cols {} skip {}",
                l.rows,
                l.cols,
                u8::from(l.skip.is_some())
            );
            push_block(&mut out, "mean", &l.mean, l.rows, l.cols);
            push_block(&mut out, "std", &l.std, l.rows, l.cols);
            push_block(&mut out, "bias", &l.bias, 1, l.rows);
            if let Some(s) = &l.skip {
                push_block(&mut out, "skip", s, l.rows, l.cols);
            }
        }
        let _ = writeln!(out, "end");
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<SnnParams, SnnError> {
        let mut r = LineReader::new(text);
        let (ln, magic) = r.next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ckpt_err(ln, format!("expected '{CHECKPOINT_MAGIC}', got '{magic}'")));
        }
        let (ln, v) = r.field("input_dim")?;
        let input_dim = parse_usize(ln, v)?;
        let (ln, v) = r.field("output_dim")?;
        let output_dim = parse_usize(ln, v)?;
        let (ln, v) = r.field("widths")?;
        let widths = v
            .split_whitespace()
            .map(|s| parse_usize(ln, s))
            .collect::<Result<Vec<_>, _>>()?;
        let (ln, v) = r.field("activation")?;
        let activation = Activation::parse(v).ok_or_else(|| ckpt_err(ln, format!("unknown activation '{v}'")))?;
        let (ln, v) = r.field("forward_mode")?;
        let forward_mode =
            ForwardMode::parse(v).ok_or_else(|| ckpt_err(ln, format!("unknown forward mode '{v}'")))?;
        let (ln, v) = r.field("init_scale")?;
        let init_scale = parse_f64(ln, v)?;
        let (ln, v) = r.field("sigma_init")?;
        let sigma_init = parse_f64(ln, v)?;
        let config = SnnConfig {
            input_dim,
            output_dim,
            widths,
            activation,
            forward_mode,
            init_scale,
            sigma_init,
        };
        config.validate().map_err(|e| ckpt_err(ln, e.to_string()))?;

        let mut layers = Vec::new();
        for (i, (rows, cols)) in config.layer_dims().into_iter().enumerate() {
            let (ln, header) = r.field("layer")?;
            let expect = format!("{i} rows {rows} cols {cols} skip ");
            let skip_flag = header
                .strip_prefix(&expect)
                .ok_or_else(|| ckpt_err(ln, format!("expected 'layer {expect}<0|1>', got 'layer {header}'")))?;
            let has_skip = match skip_flag {
                "0" => false,
                "1" => true,
                other => return Err(ckpt_err(ln, format!("invalid skip flag '{other}'"))),
            };
            if has_skip != config.has_skip(i) {
                return Err(ckpt_err(ln, format!("skip flag inconsistent with forward mode for layer {i}")));
            }
            let mean = r.block("mean", rows, cols)?;
            let std = r.block("std", rows, cols)?;
            let bias = r.block("bias", 1, rows)?;
            let skip = if has_skip {
                Some(r.block("skip", rows, cols)?)
            } else {
                None
            };
            layers.push(LayerParams {
                rows,
                cols,
                mean,
                std,
                bias,
                skip,
            });
        }
        let (ln, l) = r.next("end")?;
        if l != "end" {
            return Err(ckpt_err(ln, format!("expected 'end', got '{l}'")));
        }
        Ok(SnnParams { config, layers })
    }
}

fn ckpt_err(line: usize, msg: String) -> SnnError {
    SnnError::Checkpoint { line, msg }
}

fn parse_usize(ln: usize, s: &str) -> Result<usize, SnnError> {
    s.parse::<usize>()
        .map_err(|_| ckpt_err(ln, format!("invalid integer '{s}'")))
}

fn parse_f64(ln: usize, s: &str) -> Result<f64, SnnError> {
    s.parse::<f64>()
        .map_err(|_| ckpt_err(ln, format!("invalid number '{s}'")))
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        LineReader {
            lines: text.lines().enumerate(),
        }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str), SnnError> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l.trim_end()))
            .ok_or_else(|| ckpt_err(0, format!("unexpected end of file, expected {what}")))
    }

    fn field(&mut self, key: &str) -> Result<(usize, &'a str), SnnError> {
        let (ln, l) = self.next(key)?;
        let rest = l
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| ckpt_err(ln, format!("expected key '{key}'")))?;
        Ok((ln, rest))
    }

    fn block(&mut self, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>, SnnError> {
        let (ln, l) = self.next(name)?;
        if l != name {
            return Err(ckpt_err(ln, format!("expected block '{name}', got '{l}'")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, l) = self.next(name)?;
            let before = data.len();
            for s in l.split_whitespace() {
                data.push(parse_f64(ln, s)?);
            }
            if data.len() - before != cols {
                return Err(ckpt_err(
                    ln,
                    format!("expected {cols} values in {name} row, got {}", data.len() - before),
                ));
            }
        }
        Ok(data)
    }
}
