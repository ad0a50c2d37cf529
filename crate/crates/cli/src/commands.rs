//! Command implementations shared by the binary and the tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde_json::json;
use w2rf::experiments::{self, OdeConfig, OdeErrors, OdeTruth, STATE_DIM};
use w2rf::locality::Dataset;
use w2rf::ot::EmpiricalMeasure;
use w2rf::rng::{substream, tag};
use w2rf::snn::{self, SnnParams};
use w2rf::theory_lab::{self, SlopeFit};
use w2rf::trainer::{self, TrainHistory};

use crate::config::{Config, Value};
use crate::error::CliError;
use crate::io::{self, num, OutDir};
use crate::manifest::{self, FileHash, RunManifest, MANIFEST_FILE};
use crate::svg::{Plot, Series, Style};

pub const DEFAULT_EVAL_K: usize = 20;

/// A command with its non-config arguments resolved.
#[derive(Clone, Debug, PartialEq)]
pub enum Invocation {
    GenData,
    Train { data: PathBuf },
    Eval { checkpoint: PathBuf, data: PathBuf },
    OdeRecon,
    RateLab,
    Robustness,
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::GenData => "gen-data",
            Invocation::Train { .. } => "train",
            Invocation::Eval { .. } => "eval",
            Invocation::OdeRecon => "ode-recon",
            Invocation::RateLab => "rate-lab",
            Invocation::Robustness => "robustness",
        }
    }

    fn args(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        match self {
            Invocation::Train { data } => {
                m.insert("data".into(), data.display().to_string());
            }
            Invocation::Eval { checkpoint, data } => {
                m.insert("checkpoint".into(), checkpoint.display().to_string());
                m.insert("data".into(), data.display().to_string());
            }
            _ => {}
        }
        m
    }

    pub fn from_manifest(m: &RunManifest) -> Result<Self, CliError> {
        let arg = |k: &str| {
            m.args
                .get(k)
                .map(PathBuf::from)
                .ok_or_else(|| CliError::Config(format!("manifest lacks argument `{k}`")))
        };
        Ok(match m.command.as_str() {
            "gen-data" => Invocation::GenData,
            "train" => Invocation::Train { data: arg("data")? },
            "eval" => Invocation::Eval {
                checkpoint: arg("checkpoint")?,
                data: arg("data")?,
            },
            "ode-recon" => Invocation::OdeRecon,
            "rate-lab" => Invocation::RateLab,
            "robustness" => Invocation::Robustness,
            other => return Err(CliError::Config(format!("manifest names unknown command `{other}`"))),
        })
    }
}

enum Status {
    Ok,
    Inconclusive(String),
}

struct Run<'a> {
    config: &'a Config,
    out: OutDir,
    inputs: Vec<FileHash>,
}

impl Run<'_> {
    fn input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let abs = std::fs::canonicalize(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(FileHash {
            path: abs.display().to_string(),
            sha256: io::artifact_hash(path)?,
        });
        Ok(bytes)
    }

    fn text_input(&mut self, path: &Path) -> Result<String, CliError> {
        String::from_utf8(self.input(path)?).map_err(|_| CliError::Format {
            path: path.to_path_buf(),
            msg: "not UTF-8 text".into(),
        })
    }
}

/// Fills `seed` (and `eval.k` for eval) when absent so the manifest
/// records every value the command used.
pub fn resolve(config: &mut Config, inv: &Invocation) {
    if !config.contains("seed") {
        config.set("seed", Value::Int(0));
    }
    if matches!(inv, Invocation::Eval { .. }) && !config.contains("eval.k") {
        config.set("eval.k", Value::Int(DEFAULT_EVAL_K as i64));
    }
}

/// Runs `inv` on a pool of `threads` workers and writes its manifest.
/// Inconclusive studies still write every artifact before returning the
/// error.
pub fn execute(inv: &Invocation, config: &Config, out: &Path, threads: usize) -> Result<RunManifest, CliError> {
    let mut config = config.clone();
    resolve(&mut config, inv);
    let seed = config.seed()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let started = manifest::unix_ms();
    let mut run = Run {
        config: &config,
        out: OutDir::create(out)?,
        inputs: Vec::new(),
    };
    let status = pool.install(|| match inv {
        Invocation::GenData => gen_data(&mut run),
        Invocation::Train { data } => train(&mut run, data),
        Invocation::Eval { checkpoint, data } => eval(&mut run, checkpoint, data),
        Invocation::OdeRecon => ode_recon(&mut run),
        Invocation::RateLab => rate_lab(&mut run),
        Invocation::Robustness => robustness(&mut run),
    })?;
    let artifacts = run
        .out
        .written
        .iter()
        .map(|name| {
            Ok(FileHash {
                path: name.clone(),
                sha256: io::artifact_hash(&run.out.path.join(name))?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let m = RunManifest {
        command: inv.name().into(),
        config: config.to_toml(),
        seed,
        args: inv.args(),
        input_hash: manifest::hash_inputs(&run.inputs),
        inputs: run.inputs,
        out_dir: out.display().to_string(),
        threads,
        status: match &status {
            Status::Ok => "ok".into(),
            Status::Inconclusive(_) => "inconclusive".into(),
        },
        started_unix_ms: started,
        finished_unix_ms: manifest::unix_ms(),
        artifacts,
    };
    io::write_atomic(&out.join(MANIFEST_FILE), &m.to_bytes())?;
    match status {
        Status::Ok => Ok(m),
        Status::Inconclusive(msg) => Err(CliError::Inconclusive(msg)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub original: RunManifest,
    pub replayed: RunManifest,
    /// Artifact names whose hashes differ or that are missing on one side.
    pub mismatched: Vec<String>,
}

/// Reruns a manifest into `out` and compares artifact hashes.
pub fn replay(manifest_path: &Path, out: &Path, threads: usize) -> Result<ReplayReport, CliError> {
    let original = RunManifest::load(manifest_path)?;
    for input in &original.inputs {
        let now = io::artifact_hash(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(CliError::ReplayMismatch(format!("input {} changed since the run", input.path)));
        }
    }
    let config = Config::parse(&original.config)?;
    let inv = Invocation::from_manifest(&original)?;
    let replayed = match execute(&inv, &config, out, threads) {
        Ok(m) => m,
        Err(CliError::Inconclusive(_)) if original.status == "inconclusive" => RunManifest::load(&out.join(MANIFEST_FILE))?,
        Err(e) => return Err(e),
    };
    let mut mismatched: Vec<String> = original
        .artifacts
        .iter()
        .filter(|a| replayed.artifact(&a.path) != Some(*a))
        .map(|a| a.path.clone())
        .collect();
    mismatched.extend(
        replayed
            .artifacts
            .iter()
            .filter(|a| original.artifact(&a.path).is_none())
            .map(|a| a.path.clone()),
    );
    Ok(ReplayReport {
        original,
        replayed,
        mismatched,
    })
}

fn data_file(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn loss_plot(history: &TrainHistory) -> String {
    Plot {
        title: "training loss".into(),
        x_label: "epoch".into(),
        y_label: "minibatch local W2^2".into(),
        log_y: true,
        series: vec![Series::new(
            "loss",
            history.epochs.iter().map(|e| (e.epoch as f64, e.loss)).collect(),
            Style::Line,
        )],
        ..Plot::default()
    }
    .render()
}

fn write_training(out: &mut OutDir, params: &SnnParams, history: &TrainHistory) -> Result<(), CliError> {
    out.write("checkpoint.txt", params.to_checkpoint_string().as_bytes())?;
    out.write("history.csv", &io::history_csv(history))?;
    out.write("loss.svg", loss_plot(history).as_bytes())?;
    for (epoch, snap) in &history.snapshots {
        out.write(&format!("snapshot_{epoch:06}.txt"), snap.to_checkpoint_string().as_bytes())?;
    }
    Ok(())
}

fn gen_data(run: &mut Run) -> Result<Status, CliError> {
    let seed = run.config.seed()?;
    match run.config.str("experiment")? {
        "example1" => {
            let data = experiments::gen_example1(&run.config.example1()?, seed)?;
            run.out.write("train.csv", &io::dataset_csv(&data.train.xs, &data.train.ys))?;
            let (xs, ys) = test_rows(&data.test_x, &data.test_truth);
            run.out.write("test.csv", &io::dataset_csv(&xs, &ys))?;
        }
        "example2" => {
            let truth = experiments::gen_ode_truth(&run.config.ode()?, seed)?;
            run.out.write("ensemble.csv", &io::ensemble_csv(&truth.ensemble))?;
        }
        other => {
            return Err(CliError::Schema {
                key: "experiment".into(),
                msg: format!("unknown experiment `{other}`"),
                line: crate::config::schema_line("experiment"),
            })
        }
    }
    Ok(Status::Ok)
}

/// One row per truth draw, draws of a test input kept consecutive.
fn test_rows(test_x: &Array2<f64>, truth: &[EmpiricalMeasure]) -> (Array2<f64>, Array2<f64>) {
    let n: usize = truth.iter().map(EmpiricalMeasure::len).sum();
    let d = truth.first().map_or(0, EmpiricalMeasure::dim);
    let mut xs = Array2::zeros((n, test_x.ncols()));
    let mut ys = Array2::zeros((n, d));
    let mut r = 0;
    for (i, m) in truth.iter().enumerate() {
        for y in m.points().rows() {
            xs.row_mut(r).assign(&test_x.row(i));
            ys.row_mut(r).assign(&y);
            r += 1;
        }
    }
    (xs, ys)
}

fn train(run: &mut Run, data: &Path) -> Result<Status, CliError> {
    let path = data_file(data, "train.csv");
    run.input(&path)?;
    let (xs, ys) = io::read_dataset(&path)?;
    let dataset = Dataset::new(xs, ys)?;
    let config = run.config.train(dataset.input_dim(), dataset.output_dim())?;
    let (params, history) = trainer::train(&dataset, &config)?;
    write_training(&mut run.out, &params, &history)?;
    Ok(Status::Ok)
}

fn column(measures: &[EmpiricalMeasure], j: usize) -> Result<Vec<EmpiricalMeasure>, CliError> {
    measures
        .iter()
        .map(|m| EmpiricalMeasure::new(m.points().slice(ndarray::s![.., j..j + 1]).to_owned()))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Numerical(e.to_string()))
}

fn eval(run: &mut Run, checkpoint: &Path, data: &Path) -> Result<Status, CliError> {
    let k = run.config.usize("eval.k")?;
    let seed = run.config.seed()?;
    let text = run.text_input(checkpoint)?;
    let params = SnnParams::from_checkpoint_str(&text)?;
    let path = data_file(data, "test.csv");
    run.input(&path)?;
    let (xs, ys) = io::read_dataset(&path)?;
    if xs.ncols() != params.input_dim() || ys.ncols() != params.output_dim() {
        return Err(CliError::Config(format!(
            "checkpoint maps dim {} to dim {} but the test set has inputs of dim {} and outputs of dim {}",
            params.input_dim(),
            params.output_dim(),
            xs.ncols(),
            ys.ncols()
        )));
    }
    let (test_x, truth) = io::group_test_set(&xs, &ys)?;
    let pred = trainer::evaluate(&params, test_x.view(), k, seed)?;
    let errs = experiments::relative_errors(&truth, &pred)?;
    let header = ["mean_err", "sd_err", "excluded_mean", "excluded_sd"].map(String::from);
    run.out.write(
        "metrics.csv",
        &io::csv_bytes(
            &header,
            [vec![
                num(errs.mean_err),
                num(errs.sd_err),
                errs.excluded_mean.to_string(),
                errs.excluded_sd.to_string(),
            ]],
        ),
    )?;

    let d = params.output_dim();
    let per: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            let e = experiments::relative_errors(&column(&truth, j)?, &column(&pred, j)?)?;
            Ok((e.mean_err, e.sd_err))
        })
        .collect::<Result<_, CliError>>()?;
    let header = ["component", "mean_err", "sd_err"].map(String::from);
    run.out.write(
        "components.csv",
        &io::csv_bytes(
            &header,
            per.iter().enumerate().map(|(j, (m, s))| vec![j.to_string(), num(*m), num(*s)]),
        ),
    )?;
    let comp = |f: fn(&(f64, f64)) -> f64| per.iter().enumerate().map(|(j, e)| (j as f64, f(e))).collect();
    let errors = Plot {
        title: "relative error per output component".into(),
        x_label: "component".into(),
        y_label: "relative error".into(),
        series: vec![
            Series::new("mean", comp(|e| e.0), Style::LineMarkers),
            Series::new("SD", comp(|e| e.1), Style::LineMarkers),
        ],
        ..Plot::default()
    };
    run.out.write("errors.svg", errors.render().as_bytes())?;

    let (cx, cy) = if d >= 2 { (0, 1) } else { (0, 0) };
    let joint = |m: &EmpiricalMeasure| m.points().rows().into_iter().map(|r| (r[cx], r[cy])).collect();
    let scatter = Plot {
        title: format!("joint samples at test input 0, components {cx} and {cy}"),
        x_label: format!("y_{cx}"),
        y_label: format!("y_{cy}"),
        series: vec![
            Series::new("truth", joint(&truth[0]), Style::Markers),
            Series::new("predicted", joint(&pred[0]), Style::Markers),
        ],
        ..Plot::default()
    };
    run.out.write("scatter.svg", scatter.render().as_bytes())?;
    Ok(Status::Ok)
}

fn ode_summary(e: &OdeErrors) -> serde_json::Value {
    json!({ "err_y": e.err_y, "err_f": e.err_f, "excluded": e.excluded })
}

fn ode_recon(run: &mut Run) -> Result<Status, CliError> {
    let ode: OdeConfig = run.config.ode()?;
    let train = run.config.train(STATE_DIM, STATE_DIM)?;
    let seed = train.seed;
    let result = experiments::train_ode_recon(&ode, &train)?;
    let untrained = trainer::init_params(&train)?;
    let before = predict(&untrained, &result.truth, &ode, seed)?;
    let err_before = experiments::ode_errors(&result.truth, &before, &untrained, &ode, seed)?;
    let err_after = experiments::ode_errors(&result.truth, &result.predicted, &result.params, &ode, seed)?;

    write_training(&mut run.out, &result.params, &result.history)?;
    run.out.write("truth.csv", &io::ensemble_csv(&result.truth.ensemble))?;
    run.out.write("predicted.csv", &io::ensemble_csv(&result.predicted))?;
    let times = &result.truth.ensemble.times;
    let header = ["slice", "t", "err_y_untrained", "err_y_trained"].map(String::from);
    run.out.write(
        "err_y.csv",
        &io::csv_bytes(
            &header,
            times.iter().enumerate().map(|(s, t)| {
                vec![
                    (s + 1).to_string(),
                    num(*t),
                    num(err_before.err_y_per_slice[s]),
                    num(err_after.err_y_per_slice[s]),
                ]
            }),
        ),
    )?;
    let summary = json!({
        "untrained": ode_summary(&err_before),
        "trained": ode_summary(&err_after),
        "err_y_ratio": err_after.err_y / err_before.err_y,
    });
    run.out.write("summary.json", &io::json_bytes(&summary))?;
    let series = |name: &str, e: &OdeErrors| {
        Series::new(
            name,
            times.iter().copied().zip(e.err_y_per_slice.iter().copied()).collect(),
            Style::LineMarkers,
        )
    };
    let plot = Plot {
        title: "state error per time slice".into(),
        x_label: "t".into(),
        y_label: "err_y".into(),
        log_y: true,
        series: vec![series("untrained", &err_before), series("trained", &err_after)],
        ..Plot::default()
    };
    run.out.write("err_y.svg", plot.render().as_bytes())?;
    Ok(Status::Ok)
}

fn predict(params: &SnnParams, truth: &OdeTruth, ode: &OdeConfig, seed: u64) -> Result<w2rf::experiments::TrajectoryEnsemble, CliError> {
    Ok(experiments::predict_ensemble(
        params,
        truth.ensemble.initial.view(),
        ode.dt,
        ode.n_t,
        ode.substeps,
        seed,
        &[tag::EVAL],
    )?)
}

fn fit_json(f: Option<&SlopeFit>) -> serde_json::Value {
    match f {
        Some(f) => json!({ "slope": f.slope, "intercept": f.intercept, "residual_rms": f.residual_rms }),
        None => serde_json::Value::Null,
    }
}

fn rate_lab(run: &mut Run) -> Result<Status, CliError> {
    let c = run.config;
    let d = c.usize("rate.d")?;
    let c0 = c.f64("rate.c0")?;
    let grid = c.usize_list("rate.n_grid")?;
    let cmp = theory_lab::heterogeneity_comparison(d, c0, &grid, c.usize("rate.replicates")?, c.seed()?)?;
    run.out.write("rate_hom.csv", &io::rate_csv(&cmp.homogeneous))?;
    run.out.write("rate_het.csv", &io::rate_csv(&cmp.heterogeneous))?;
    let summary = json!({
        "d": d,
        "c0": c0,
        "homogeneous": fit_json(cmp.homogeneous.fit.as_ref()),
        "heterogeneous": fit_json(cmp.heterogeneous.fit.as_ref()),
        "slope_hom": cmp.slope_hom,
        "slope_het": cmp.slope_het,
        "slope_difference": cmp.slope_het - cmp.slope_hom,
        "indistinguishable": cmp.indistinguishable(),
        "moment_constant_hom": cmp.homogeneous.moment_constant,
        "moment_constant_het": cmp.heterogeneous.moment_constant,
    });
    run.out.write("summary.json", &io::json_bytes(&summary))?;
    let series = |name: &str, s: &theory_lab::RateStudy| {
        Series::new(
            name,
            s.n_grid.iter().map(|n| *n as f64).zip(s.mean_cost.iter().copied()).collect(),
            Style::LineMarkers,
        )
    };
    let plot = Plot {
        title: format!("two-sample W2^2 rate, d = {d}"),
        x_label: "N".into(),
        y_label: "mean W2^2".into(),
        log_x: true,
        log_y: true,
        series: vec![
            series("homogeneous", &cmp.homogeneous),
            series(&format!("heterogeneous c0 = {c0}"), &cmp.heterogeneous),
        ],
    };
    run.out.write("rate.svg", plot.render().as_bytes())?;
    Ok(Status::Ok)
}

fn robustness(run: &mut Run) -> Result<Status, CliError> {
    let c = run.config;
    let x = c.f64_list("robust.x")?;
    let rc = c.robustness()?;
    let base = match c.opt_str("robust.checkpoint")? {
        Some(p) => SnnParams::from_checkpoint_str(&run.text_input(Path::new(&p))?)?,
        None => {
            let sc = c.snn(x.len(), c.usize("robust.output_dim")?)?;
            snn::init(&sc, &mut substream(rc.seed, &[tag::INIT]))?
        }
    };
    if base.input_dim() != x.len() {
        return Err(CliError::Config(format!(
            "network input dim {} but robust.x has {} entries",
            base.input_dim(),
            x.len()
        )));
    }
    let study = theory_lab::robustness_slope(&base, &x, &rc)?;
    let header = ["eps", "mean_w2", "cleared"].map(String::from);
    run.out.write(
        "robustness.csv",
        &io::csv_bytes(
            &header,
            study
                .eps_grid
                .iter()
                .zip(&study.mean_w2)
                .zip(&study.cleared)
                .map(|((e, w), c)| vec![num(*e), num(*w), c.to_string()]),
        ),
    )?;
    let verdict = study.conclusive_fit().err().map(|e| e.to_string());
    let summary = json!({
        "floor": study.floor,
        "cleared": study.cleared.iter().filter(|c| **c).count(),
        "fit": fit_json(study.fit.as_ref()),
        "quadratic_constant": study.quadratic_constant,
        "within_envelope_x2": study.within_envelope(2.0),
        "bias_only": rc.bias_only,
        "conclusive": verdict.is_none(),
    });
    run.out.write("summary.json", &io::json_bytes(&summary))?;
    let mut series = vec![
        Series::new(
            "mean W2^2",
            study.eps_grid.iter().copied().zip(study.mean_w2.iter().copied()).collect(),
            Style::LineMarkers,
        ),
        Series::new(
            "floor",
            study.eps_grid.iter().map(|e| (*e, study.floor)).collect(),
            Style::Line,
        ),
    ];
    if let Some(q) = study.quadratic_constant {
        series.push(Series::new(
            "C eps^2",
            study.eps_grid.iter().map(|e| (*e, q * e * e)).collect(),
            Style::Line,
        ));
    }
    let plot = Plot {
        title: "output sensitivity to parameter perturbation".into(),
        x_label: "eps".into(),
        y_label: "mean W2^2".into(),
        log_x: true,
        log_y: true,
        series,
    };
    run.out.write("robustness.svg", plot.render().as_bytes())?;
    Ok(match verdict {
        None => Status::Ok,
        Some(msg) => Status::Inconclusive(msg),
    })
}
