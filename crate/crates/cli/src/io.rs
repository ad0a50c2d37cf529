//! CSV formats, content hashes and atomic artifact writes.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use sha2::{Digest, Sha256};
use w2rf::experiments::TrajectoryEnsemble;
use w2rf::ot::EmpiricalMeasure;
use w2rf::theory_lab::RateStudy;
use w2rf::trainer::TrainHistory;

use crate::error::CliError;

/// Shortest text that parses back to the same bits.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Git-style content hash: SHA-256 of `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Drops any `wall_ms` column so timing noise does not enter the hash.
fn strip_wall_clock(bytes: &[u8]) -> Option<Vec<u8>> {
    let text = std::str::from_utf8(bytes).ok()?;
    let header = text.lines().next()?;
    let col = header.split(',').position(|c| c == "wall_ms")?;
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let kept: Vec<&str> = line
            .split(',')
            .enumerate()
            .filter(|(i, _)| *i != col)
            .map(|(_, f)| f)
            .collect();
        out.push_str(&kept.join(","));
        out.push('\n');
    }
    Some(out.into_bytes())
}

/// Hash of an artifact file, ignoring wall-clock columns of CSV files.
pub fn artifact_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let is_csv = path.extension().is_some_and(|e| e == "csv");
    Ok(match is_csv.then(|| strip_wall_clock(&bytes)).flatten() {
        Some(stripped) => content_hash(&stripped),
        None => content_hash(&bytes),
    })
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Output directory that remembers what was written to it.
pub struct OutDir {
    pub path: PathBuf,
    pub written: Vec<String>,
}

impl OutDir {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        Ok(OutDir {
            path: path.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path.join(name), bytes)?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }
}

pub fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}_{i}"))
}

fn format_err(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Header plus numeric rows.
fn read_numeric(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| format_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format_err(path, format!("row {}: {e}", i + 1)))?;
        if row.len() != header.len() {
            return Err(format_err(path, format!("row {} has {} fields, header has {}", i + 1, row.len(), header.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// `x_0,x_1,...,y_0,...` rows.
pub fn dataset_csv(xs: &Array2<f64>, ys: &Array2<f64>) -> Vec<u8> {
    let header: Vec<String> = numbered("x", xs.ncols()).chain(numbered("y", ys.ncols())).collect();
    let rows = xs
        .rows()
        .into_iter()
        .zip(ys.rows())
        .map(|(x, y)| x.iter().chain(y.iter()).map(|v| num(*v)).collect());
    csv_bytes(&header, rows)
}

pub fn read_dataset(path: &Path) -> Result<(Array2<f64>, Array2<f64>), CliError> {
    let (header, rows) = read_numeric(path)?;
    let dx = header.iter().take_while(|h| h.starts_with("x_")).count();
    let dy = header.len() - dx;
    let expected: Vec<String> = numbered("x", dx).chain(numbered("y", dy)).collect();
    if dx == 0 || dy == 0 || header != expected {
        return Err(format_err(path, format!("expected header x_0..x_k,y_0..y_m, got {}", header.join(","))));
    }
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let all = Array2::from_shape_vec((n, dx + dy), flat).expect("rows checked");
    Ok((
        all.slice(ndarray::s![.., ..dx]).to_owned(),
        all.slice(ndarray::s![.., dx..]).to_owned(),
    ))
}

/// Groups consecutive rows that share an input into one truth ensemble.
pub fn group_test_set(xs: &Array2<f64>, ys: &Array2<f64>) -> Result<(Array2<f64>, Vec<EmpiricalMeasure>), CliError> {
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut groups: Vec<Vec<Vec<f64>>> = Vec::new();
    for (x, y) in xs.rows().into_iter().zip(ys.rows()) {
        let x = x.to_vec();
        if inputs.last() != Some(&x) {
            inputs.push(x);
            groups.push(Vec::new());
        }
        groups.last_mut().expect("pushed").push(y.to_vec());
    }
    let n = inputs.len();
    let d = xs.ncols();
    let test_x = Array2::from_shape_vec((n, d), inputs.into_iter().flatten().collect()).expect("consistent widths");
    let truth = groups
        .iter()
        .map(|g| EmpiricalMeasure::from_rows(g))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((test_x, truth))
}

/// `traj,slice,t,comp_0..` rows; slice 0 is the initial state at t = 0.
pub fn ensemble_csv(e: &TrajectoryEnsemble) -> Vec<u8> {
    let header: Vec<String> = ["traj", "slice", "t"]
        .into_iter()
        .map(String::from)
        .chain(numbered("comp", e.dim()))
        .collect();
    let mut rows = Vec::with_capacity(e.n_traj() * (e.n_slices() + 1));
    for i in 0..e.n_traj() {
        let traj = e.states.index_axis(Axis(0), i);
        let slices = std::iter::once((0.0, e.initial.row(i))).chain(e.times.iter().copied().zip(traj.rows()));
        for (s, (t, y)) in slices.enumerate() {
            let mut r = vec![i.to_string(), s.to_string(), num(t)];
            r.extend(y.iter().map(|v| num(*v)));
            rows.push(r);
        }
    }
    csv_bytes(&header, rows)
}

pub fn read_ensemble(path: &Path) -> Result<TrajectoryEnsemble, CliError> {
    let (header, rows) = read_numeric(path)?;
    if header.len() < 4 || header[..3] != ["traj", "slice", "t"] {
        return Err(format_err(path, "expected header traj,slice,t,comp_0,..."));
    }
    let dim = header.len() - 3;
    let n_traj = rows.iter().map(|r| r[0] as usize + 1).max().unwrap_or(0);
    let n_slices = rows.iter().map(|r| r[1] as usize).max().unwrap_or(0);
    if n_traj == 0 || rows.len() != n_traj * (n_slices + 1) {
        return Err(format_err(path, "ragged ensemble"));
    }
    let mut initial = Array2::zeros((n_traj, dim));
    let mut states = Array3::zeros((n_traj, n_slices, dim));
    let mut times = vec![0.0; n_slices];
    for r in &rows {
        let (i, s) = (r[0] as usize, r[1] as usize);
        let y = ndarray::aview1(&r[3..]);
        if s == 0 {
            initial.row_mut(i).assign(&y);
        } else {
            times[s - 1] = r[2];
            states.index_axis_mut(Axis(0), i).row_mut(s - 1).assign(&y);
        }
    }
    Ok(TrajectoryEnsemble { initial, states, times })
}

pub fn history_csv(h: &TrainHistory) -> Vec<u8> {
    let header = ["epoch", "loss", "minibatch_id", "wall_ms"].map(String::from);
    csv_bytes(
        &header,
        h.epochs
            .iter()
            .map(|e| vec![e.epoch.to_string(), num(e.loss), e.minibatch_id.to_string(), format!("{:.3}", e.wall_ms)]),
    )
}

pub fn rate_csv(s: &RateStudy) -> Vec<u8> {
    let header = ["N", "mean_cost", "stderr"].map(String::from);
    csv_bytes(
        &header,
        s.n_grid
            .iter()
            .zip(&s.mean_cost)
            .zip(&s.stderr)
            .map(|((n, m), e)| vec![n.to_string(), num(*m), num(*e)]),
    )
}

pub fn json_bytes(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trips_bitwise() {
        let xs = Array2::from_shape_fn((5, 2), |(i, j)| (i as f64 + 0.1) / (j as f64 + 3.0));
        let ys = Array2::from_shape_fn((5, 3), |(i, j)| ((i * j) as f64).sin() * 1e-9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_atomic(&p, &dataset_csv(&xs, &ys)).unwrap();
        let (bx, by) = read_dataset(&p).unwrap();
        assert_eq!(bx, xs);
        assert_eq!(by, ys);
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("x_0,x_1,y_0,y_1,y_2\n"));
    }

    #[test]
    fn ensemble_round_trips_bitwise() {
        let e = TrajectoryEnsemble {
            initial: Array2::from_shape_fn((3, 4), |(i, j)| i as f64 - j as f64 / 7.0),
            states: Array3::from_shape_fn((3, 2, 4), |(i, s, j)| (i + s) as f64 / (j as f64 + 1.3)),
            times: vec![0.1, 0.2],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_atomic(&p, &ensemble_csv(&e)).unwrap();
        assert_eq!(read_ensemble(&p).unwrap(), e);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("traj,slice,t,comp_0,comp_1,comp_2,comp_3\n"));
    }

    #[test]
    fn wall_clock_column_does_not_change_hash() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_atomic(&a, b"epoch,loss,minibatch_id,wall_ms\n1,0.5,0,3.2\n").unwrap();
        write_atomic(&b, b"epoch,loss,minibatch_id,wall_ms\n1,0.5,0,9.9\n").unwrap();
        assert_eq!(artifact_hash(&a).unwrap(), artifact_hash(&b).unwrap());
        write_atomic(&b, b"epoch,loss,minibatch_id,wall_ms\n1,0.6,0,9.9\n").unwrap();
        assert_ne!(artifact_hash(&a).unwrap(), artifact_hash(&b).unwrap());
    }

    #[test]
    fn content_hash_matches_git_blob_framing() {
        // sha256 of "blob 0\0", the SHA-256 git object id of the empty blob
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn consecutive_rows_group_by_input() {
        let xs = Array2::from_shape_vec((4, 1), vec![0.1, 0.1, 0.2, 0.2]).unwrap();
        let ys = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (tx, truth) = group_test_set(&xs, &ys).unwrap();
        assert_eq!(tx.nrows(), 2);
        assert_eq!(truth[1].points().column(0).to_vec(), vec![3.0, 4.0]);
    }
}
