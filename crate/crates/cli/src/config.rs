//! Flat key-value run configuration.
//!
//! A config file is TOML whose tables are flattened into dotted keys
//! (`[train] learning_rate = 0.005` and `"train.learning_rate" = 0.005` are
//! the same key). Every key must appear in [`SCHEMA`]. A `preset` key fills
//! in defaults for keys the file leaves out.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use w2rf::autodiff::Activation;
use w2rf::experiments::{Example1Config, NoiseKind, OdeConfig};
use w2rf::snn::{ForwardMode, SnnConfig};
use w2rf::theory_lab::RobustnessConfig;
use w2rf::trainer::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Float,
    Int,
    Bool,
    Str,
    IntList,
    FloatList,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Float => "float",
            Kind::Int => "integer",
            Kind::Bool => "bool",
            Kind::Str => "string",
            Kind::IntList => "[integer, ...]",
            Kind::FloatList => "[float, ...]",
        }
    }
}

pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub doc: &'static str,
}

const fn spec(key: &'static str, kind: Kind, doc: &'static str) -> KeySpec {
    KeySpec { key, kind, doc }
}

pub const SCHEMA: &[KeySpec] = &[
    spec("preset", Kind::Str, "example1 | example2 | theory; supplies defaults for omitted keys"),
    spec("experiment", Kind::Str, "example1 | example2; dataset written by gen-data"),
    spec("seed", Kind::Int, "master seed for data, initialization and training"),
    spec("train.learning_rate", Kind::Float, "Adam step size, > 0"),
    spec("train.epoch_max", Kind::Int, "number of Adam steps"),
    spec("train.epoch_update", Kind::Int, "minibatch refresh period in epochs"),
    spec("train.n_batch", Kind::Int, "minibatch size"),
    spec("train.delta", Kind::Float, "neighborhood radius, may be inf"),
    spec("train.n0", Kind::Int, "minimum neighborhood size for a minibatch center"),
    spec("train.beta1", Kind::Float, "Adam first-moment decay"),
    spec("train.beta2", Kind::Float, "Adam second-moment decay"),
    spec("train.adam_eps", Kind::Float, "Adam denominator offset"),
    spec("train.clip_norm", Kind::Float, "optional global-norm gradient clip"),
    spec("train.chunk_size", Kind::Int, "rows per autodiff graph"),
    spec("train.snapshot_every", Kind::Int, "parameter snapshot period, 0 disables"),
    spec("snn.widths", Kind::IntList, "hidden layer widths"),
    spec("snn.activation", Kind::Str, "relu | elu | identity"),
    spec("snn.forward_mode", Kind::Str, "normal | resnet"),
    spec("snn.init_scale", Kind::Float, "std of the initial weight means and biases"),
    spec("snn.sigma_init", Kind::Float, "initial weight standard deviation"),
    spec("example1.d", Kind::Int, "output dimension"),
    spec("example1.d0", Kind::Int, "number of noise variables"),
    spec("example1.noise", Kind::Str, "constant | exponential | scaled"),
    spec("example1.noise_scale", Kind::Float, "noise level s"),
    spec("example1.n_train", Kind::Int, "training samples"),
    spec("example1.n_test", Kind::Int, "test inputs"),
    spec("example1.test_draws", Kind::Int, "truth draws per test input"),
    spec("example1.coefficient_seed", Kind::Int, "seed of the linear coefficients"),
    spec("ode.d", Kind::Int, "independent damping parameters, 1..=48"),
    spec("ode.sigma", Kind::Float, "damping log-noise scale"),
    spec("ode.sigma0", Kind::Float, "initial-state noise"),
    spec("ode.dt", Kind::Float, "time between slices"),
    spec("ode.n_t", Kind::Int, "number of slices"),
    spec("ode.n_traj", Kind::Int, "number of trajectories"),
    spec("ode.substeps", Kind::Int, "RK4 steps per slice"),
    spec("ode.k_f", Kind::Int, "vector-field draws per evaluation state"),
    spec("ode.states_per_slice", Kind::Int, "evaluation states per slice for err_f"),
    spec("eval.k", Kind::Int, "predicted samples per test input"),
    spec("rate.d", Kind::Int, "dimension of the Gaussian"),
    spec("rate.c0", Kind::Float, "heterogeneity exponent, scales exp(-c0 i)"),
    spec("rate.n_grid", Kind::IntList, "increasing sample sizes"),
    spec("rate.replicates", Kind::Int, "replicates per sample size, >= 5"),
    spec("robust.x", Kind::FloatList, "network input at which ensembles are compared"),
    spec("robust.output_dim", Kind::Int, "output dimension of a freshly initialized network"),
    spec("robust.checkpoint", Kind::Str, "optional checkpoint path replacing the fresh network"),
    spec("robust.eps_grid", Kind::FloatList, "increasing perturbation sizes"),
    spec("robust.k", Kind::Int, "ensemble size"),
    spec("robust.repeats", Kind::Int, "independent repeats per eps"),
    spec("robust.direction_seed", Kind::Int, "seed of the perturbation direction"),
    spec("robust.bias_only", Kind::Bool, "perturb only the output biases"),
];

pub fn schema_line(key: &str) -> String {
    match SCHEMA.iter().find(|s| s.key == key) {
        Some(s) => format!("{} = <{}>  # {}", s.key, s.kind.name(), s.doc),
        None => format!("{key} is not a schema key"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Float(f64),
    Int(i64),
    Bool(bool),
    Str(String),
    IntList(Vec<i64>),
    FloatList(Vec<f64>),
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

impl Value {
    fn to_toml(&self) -> String {
        match self {
            Value::Float(v) => fmt_float(*v),
            Value::Int(v) => v.to_string(),
            Value::Bool(v) => v.to_string(),
            Value::Str(s) => toml::Value::String(s.clone()).to_string(),
            Value::IntList(v) => format!("[{}]", v.iter().map(i64::to_string).collect::<Vec<_>>().join(", ")),
            Value::FloatList(v) => format!("[{}]", v.iter().map(|x| fmt_float(*x)).collect::<Vec<_>>().join(", ")),
        }
    }
}

fn convert(key: &str, kind: Kind, v: &toml::Value) -> Result<Value, CliError> {
    let bad = || CliError::Schema {
        key: key.to_string(),
        msg: format!("expected {}, got `{v}`", kind.name()),
        line: schema_line(key),
    };
    let float = |v: &toml::Value| match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    };
    Ok(match (kind, v) {
        (Kind::Float, _) => Value::Float(float(v).ok_or_else(bad)?),
        (Kind::Int, toml::Value::Integer(i)) => Value::Int(*i),
        (Kind::Bool, toml::Value::Boolean(b)) => Value::Bool(*b),
        (Kind::Str, toml::Value::String(s)) => Value::Str(s.clone()),
        (Kind::IntList, toml::Value::Array(a)) => Value::IntList(
            a.iter()
                .map(|e| e.as_integer().ok_or_else(bad))
                .collect::<Result<_, _>>()?,
        ),
        (Kind::FloatList, toml::Value::Array(a)) => {
            Value::FloatList(a.iter().map(|e| float(e).ok_or_else(bad)).collect::<Result<_, _>>()?)
        }
        _ => return Err(bad()),
    })
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

impl Config {
    /// Parses a document, checks every key against [`SCHEMA`], then fills
    /// omitted keys from the named preset.
    pub fn parse(text: &str) -> Result<Config, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(format!("malformed config: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        let mut values = BTreeMap::new();
        for (key, v) in flat {
            let Some(spec) = SCHEMA.iter().find(|s| s.key == key) else {
                return Err(CliError::Schema {
                    key: key.clone(),
                    msg: "unknown key".into(),
                    line: "see the schema table in the README".into(),
                });
            };
            values.insert(key, convert(spec.key, spec.kind, &v)?);
        }
        let mut config = Config { values };
        if let Some(name) = config.opt_str("preset")? {
            let preset = preset(&name)?;
            for (k, v) in preset.values {
                config.values.entry(k).or_insert(v);
            }
        }
        Ok(config)
    }

    pub fn from_preset(name: &str) -> Result<Config, CliError> {
        Config::parse(&format!("preset = \"{name}\""))
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.values.insert(key.to_string(), value);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Canonical flat document; parsing it yields an equal config.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "\"{k}\" = {}", v.to_toml());
        }
        s
    }

    fn get(&self, key: &str) -> Result<&Value, CliError> {
        self.values.get(key).ok_or_else(|| CliError::Schema {
            key: key.to_string(),
            msg: "missing key".into(),
            line: schema_line(key),
        })
    }

    fn mismatch(&self, key: &str) -> CliError {
        CliError::Schema {
            key: key.to_string(),
            msg: "wrong type".into(),
            line: schema_line(key),
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        match self.get(key)? {
            Value::Float(v) => Ok(*v),
            _ => Err(self.mismatch(key)),
        }
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        if self.contains(key) { self.f64(key).map(Some) } else { Ok(None) }
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        match self.get(key)? {
            Value::Int(v) => usize::try_from(*v).map_err(|_| CliError::Schema {
                key: key.to_string(),
                msg: format!("must be non-negative, got {v}"),
                line: schema_line(key),
            }),
            _ => Err(self.mismatch(key)),
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        Ok(self.usize(key)? as u64)
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key)? {
            Value::Bool(v) => Ok(*v),
            _ => Err(self.mismatch(key)),
        }
    }

    pub fn str(&self, key: &str) -> Result<&str, CliError> {
        match self.get(key)? {
            Value::Str(v) => Ok(v),
            _ => Err(self.mismatch(key)),
        }
    }

    pub fn opt_str(&self, key: &str) -> Result<Option<String>, CliError> {
        if self.contains(key) { self.str(key).map(|s| Some(s.to_string())) } else { Ok(None) }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        match self.get(key)? {
            Value::IntList(v) => v
                .iter()
                .map(|x| usize::try_from(*x))
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Schema {
                    key: key.to_string(),
                    msg: "entries must be non-negative".into(),
                    line: schema_line(key),
                }),
            _ => Err(self.mismatch(key)),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        match self.get(key)? {
            Value::FloatList(v) => Ok(v.clone()),
            Value::IntList(v) => Ok(v.iter().map(|x| *x as f64).collect()),
            _ => Err(self.mismatch(key)),
        }
    }

    fn parsed<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T, CliError> {
        let s = self.str(key)?;
        parse(s).ok_or_else(|| CliError::Schema {
            key: key.to_string(),
            msg: format!("unrecognized value `{s}`"),
            line: schema_line(key),
        })
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.u64("seed")
    }

    pub fn snn(&self, input_dim: usize, output_dim: usize) -> Result<SnnConfig, CliError> {
        Ok(SnnConfig {
            input_dim,
            output_dim,
            widths: self.usize_list("snn.widths")?,
            activation: self.parsed("snn.activation", Activation::parse)?,
            forward_mode: self.parsed("snn.forward_mode", ForwardMode::parse)?,
            init_scale: self.f64("snn.init_scale")?,
            sigma_init: self.f64("snn.sigma_init")?,
        })
    }

    pub fn train(&self, input_dim: usize, output_dim: usize) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            learning_rate: self.f64("train.learning_rate")?,
            epoch_max: self.usize("train.epoch_max")?,
            epoch_update: self.usize("train.epoch_update")?,
            n_batch: self.usize("train.n_batch")?,
            delta: self.f64("train.delta")?,
            n0: self.usize("train.n0")?,
            seed: self.seed()?,
            beta1: self.f64("train.beta1")?,
            beta2: self.f64("train.beta2")?,
            adam_eps: self.f64("train.adam_eps")?,
            clip_norm: self.opt_f64("train.clip_norm")?,
            chunk_size: self.usize("train.chunk_size")?,
            snapshot_every: self.usize("train.snapshot_every")?,
            snn: self.snn(input_dim, output_dim)?,
        })
    }

    pub fn example1(&self) -> Result<Example1Config, CliError> {
        Ok(Example1Config {
            d: self.usize("example1.d")?,
            d0: self.usize("example1.d0")?,
            noise: self.parsed("example1.noise", NoiseKind::parse)?,
            noise_scale: self.f64("example1.noise_scale")?,
            n_train: self.usize("example1.n_train")?,
            n_test: self.usize("example1.n_test")?,
            test_draws: self.usize("example1.test_draws")?,
            coefficient_seed: self.u64("example1.coefficient_seed")?,
        })
    }

    pub fn ode(&self) -> Result<OdeConfig, CliError> {
        Ok(OdeConfig {
            d: self.usize("ode.d")?,
            sigma: self.f64("ode.sigma")?,
            sigma0: self.f64("ode.sigma0")?,
            dt: self.f64("ode.dt")?,
            n_t: self.usize("ode.n_t")?,
            n_traj: self.usize("ode.n_traj")?,
            substeps: self.usize("ode.substeps")?,
            k_f: self.usize("ode.k_f")?,
            states_per_slice: self.usize("ode.states_per_slice")?,
        })
    }

    pub fn robustness(&self) -> Result<RobustnessConfig, CliError> {
        Ok(RobustnessConfig {
            eps_grid: self.f64_list("robust.eps_grid")?,
            k: self.usize("robust.k")?,
            repeats: self.usize("robust.repeats")?,
            direction_seed: self.u64("robust.direction_seed")?,
            seed: self.seed()?,
            bias_only: self.bool("robust.bias_only")?,
        })
    }
}

fn push_train(v: &mut Vec<(&'static str, Value)>, t: &TrainConfig) {
    v.extend([
        ("train.learning_rate", Value::Float(t.learning_rate)),
        ("train.epoch_max", Value::Int(t.epoch_max as i64)),
        ("train.epoch_update", Value::Int(t.epoch_update as i64)),
        ("train.n_batch", Value::Int(t.n_batch as i64)),
        ("train.delta", Value::Float(t.delta)),
        ("train.n0", Value::Int(t.n0 as i64)),
        ("train.beta1", Value::Float(t.beta1)),
        ("train.beta2", Value::Float(t.beta2)),
        ("train.adam_eps", Value::Float(t.adam_eps)),
        ("train.chunk_size", Value::Int(t.chunk_size as i64)),
        ("train.snapshot_every", Value::Int(t.snapshot_every as i64)),
        ("snn.widths", Value::IntList(t.snn.widths.iter().map(|w| *w as i64).collect())),
        ("snn.activation", Value::Str(t.snn.activation.name().into())),
        ("snn.forward_mode", Value::Str(t.snn.forward_mode.name().into())),
        ("snn.init_scale", Value::Float(t.snn.init_scale)),
        ("snn.sigma_init", Value::Float(t.snn.sigma_init)),
    ]);
}

/// Default values for a named preset.
pub fn preset(name: &str) -> Result<Config, CliError> {
    let mut v: Vec<(&'static str, Value)> = vec![("seed", Value::Int(0))];
    match name {
        "example1" => {
            let e = Example1Config::default();
            v.push(("experiment", Value::Str("example1".into())));
            push_train(&mut v, &TrainConfig::example1(2, e.d));
            v.extend([
                ("example1.d", Value::Int(e.d as i64)),
                ("example1.d0", Value::Int(e.d0 as i64)),
                ("example1.noise", Value::Str(e.noise.name().into())),
                ("example1.noise_scale", Value::Float(e.noise_scale)),
                ("example1.n_train", Value::Int(e.n_train as i64)),
                ("example1.n_test", Value::Int(e.n_test as i64)),
                ("example1.test_draws", Value::Int(e.test_draws as i64)),
                ("example1.coefficient_seed", Value::Int(e.coefficient_seed as i64)),
                ("eval.k", Value::Int(20)),
            ]);
        }
        "example2" => {
            let o = OdeConfig::default();
            v.push(("experiment", Value::Str("example2".into())));
            push_train(&mut v, &TrainConfig::example2(w2rf::experiments::STATE_DIM));
            v.extend([
                ("ode.d", Value::Int(o.d as i64)),
                ("ode.sigma", Value::Float(o.sigma)),
                ("ode.sigma0", Value::Float(o.sigma0)),
                ("ode.dt", Value::Float(o.dt)),
                ("ode.n_t", Value::Int(o.n_t as i64)),
                ("ode.n_traj", Value::Int(o.n_traj as i64)),
                ("ode.substeps", Value::Int(o.substeps as i64)),
                ("ode.k_f", Value::Int(o.k_f as i64)),
                ("ode.states_per_slice", Value::Int(o.states_per_slice as i64)),
            ]);
        }
        "theory" => {
            let r = RobustnessConfig::default();
            let relu = TrainConfig {
                snn: SnnConfig {
                    activation: Activation::Relu,
                    ..SnnConfig::default()
                },
                ..TrainConfig::default()
            };
            push_train(&mut v, &relu);
            v.retain(|(k, _)| !k.starts_with("train."));
            v.extend([
                ("rate.d", Value::Int(8)),
                ("rate.c0", Value::Float(1.0)),
                ("rate.n_grid", Value::IntList(vec![32, 64, 128, 256, 512, 1024])),
                ("rate.replicates", Value::Int(20)),
                ("robust.x", Value::FloatList(vec![0.3, -0.2])),
                ("robust.output_dim", Value::Int(1)),
                ("robust.eps_grid", Value::FloatList(r.eps_grid)),
                ("robust.k", Value::Int(r.k as i64)),
                ("robust.repeats", Value::Int(r.repeats as i64)),
                ("robust.direction_seed", Value::Int(r.direction_seed as i64)),
                ("robust.bias_only", Value::Bool(r.bias_only)),
            ]);
        }
        other => {
            return Err(CliError::Schema {
                key: "preset".into(),
                msg: format!("unknown preset `{other}`"),
                line: schema_line("preset"),
            })
        }
    }
    Ok(Config {
        values: v.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_and_dotted_keys_flatten_alike() {
        let a = Config::parse("[train]\nlearning_rate = 0.01\n").unwrap();
        let b = Config::parse("\"train.learning_rate\" = 0.01\n").unwrap();
        let c = Config::parse("train.learning_rate = 0.01\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.f64("train.learning_rate").unwrap(), 0.01);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let e = Config::parse("train.lr = 0.01\n").unwrap_err();
        assert!(e.to_string().contains("train.lr"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn missing_key_names_key_and_schema_line() {
        let c = Config::parse("seed = 1\n").unwrap();
        let e = c.train(2, 1).unwrap_err().to_string();
        assert!(e.contains("train.learning_rate"), "{e}");
        assert!(e.contains("train.learning_rate = <float>  # Adam step size"), "{e}");
    }

    #[test]
    fn type_errors_name_the_key() {
        let e = Config::parse("train.epoch_max = \"many\"\n").unwrap_err().to_string();
        assert!(e.contains("train.epoch_max") && e.contains("integer"), "{e}");
    }

    #[test]
    fn table1_example1_defaults_resolve() {
        let t = Config::from_preset("example1").unwrap().train(2, 10).unwrap();
        assert_eq!(t.learning_rate, 0.005);
        assert_eq!(t.delta, 0.25);
        assert_eq!(t.snn.widths, vec![40; 4]);
        assert_eq!(t.snn.activation, Activation::Elu);
        assert_eq!(t.snn.forward_mode, ForwardMode::Resnet);
    }

    #[test]
    fn table1_example2_defaults_resolve() {
        let t = Config::from_preset("example2").unwrap().train(96, 96).unwrap();
        assert_eq!(t.learning_rate, 0.005);
        assert_eq!(t.delta, 0.125);
        assert_eq!(t.snn.widths, vec![60; 2]);
        assert_eq!(t.snn.activation, Activation::Elu);
        assert_eq!(t.snn.forward_mode, ForwardMode::Normal);
    }

    #[test]
    fn file_values_override_preset() {
        let c = Config::parse("preset = \"example1\"\n[train]\nepoch_max = 3\ndelta = inf\n").unwrap();
        assert_eq!(c.usize("train.epoch_max").unwrap(), 3);
        assert_eq!(c.f64("train.delta").unwrap(), f64::INFINITY);
        assert_eq!(c.usize("example1.n_train").unwrap(), 4000);
    }

    #[test]
    fn canonical_toml_round_trips() {
        for p in ["example1", "example2", "theory"] {
            let mut c = Config::from_preset(p).unwrap();
            c.set("train.clip_norm", Value::Float(1e-7));
            c.set("train.delta", Value::Float(f64::INFINITY));
            let back = Config::parse(&c.to_toml()).unwrap();
            assert_eq!(back, c, "{p}");
        }
    }

    #[test]
    fn every_schema_key_has_a_line() {
        for s in SCHEMA {
            assert!(schema_line(s.key).starts_with(s.key));
        }
    }
}
