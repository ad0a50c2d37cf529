//! Neighborhoods in input space and the local squared-W2 losses built on
//! them.
//!
//! For a reference input `x_i` the neighborhood `B_i` holds every sample
//! whose input lies within `delta` of `x_i` (boundary inclusive). The local
//! loss compares the truth outputs and the predicted outputs restricted to
//! the same index set, so both measures always have equal size.

use std::collections::HashMap;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ot::{self, OtError};

/// Above this many points [`build_index`] buckets inputs on a uniform grid.
pub const GRID_THRESHOLD: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalityError {
    #[error("neighborhood radius must be positive, got {0}")]
    BadDelta(f64),
    #[error("inputs have {xs} rows but outputs have {ys}")]
    RowMismatch { xs: usize, ys: usize },
    #[error("dataset must contain at least one sample")]
    EmptyDataset,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no sample has at least {n0} neighbors within delta = {delta}; use a larger delta or a smaller N0")]
    NoEligible { delta: f64, n0: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Ot(#[from] OtError),
}

/// Paired inputs and outputs, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub xs: Array2<f64>,
    pub ys: Array2<f64>,
}

impl Dataset {
    pub fn new(xs: Array2<f64>, ys: Array2<f64>) -> Result<Self, LocalityError> {
        if xs.nrows() != ys.nrows() {
            return Err(LocalityError::RowMismatch {
                xs: xs.nrows(),
                ys: ys.nrows(),
            });
        }
        if xs.nrows() == 0 {
            return Err(LocalityError::EmptyDataset);
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(LocalityError::NonFinite("dataset inputs"));
        }
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(LocalityError::NonFinite("dataset outputs"));
        }
        Ok(Dataset {
            xs: xs.as_standard_layout().into_owned(),
            ys: ys.as_standard_layout().into_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.xs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.xs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.ys.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodIndex {
    pub delta: f64,
    neighbors: Vec<Vec<usize>>,
}

impl NeighborhoodIndex {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Sorted indices within `delta` of sample `i`, including `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn count(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Sorted union of the neighborhoods of `selection`.
    pub fn union(&self, selection: &[usize]) -> Vec<usize> {
        let mut mark = vec![false; self.len()];
        for &i in selection {
            for &j in &self.neighbors[i] {
                mark[j] = true;
            }
        }
        mark.iter()
            .enumerate()
            .filter_map(|(j, &m)| m.then_some(j))
            .collect()
    }
}

fn within(a: &[f64], b: &[f64], delta: f64) -> bool {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d2.sqrt() <= delta
}

/// Exact radius search. `delta` may be `+inf` (every sample is a neighbor of
/// every other).
pub fn build_index(xs: ArrayView2<'_, f64>, delta: f64) -> Result<NeighborhoodIndex, LocalityError> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(LocalityError::BadDelta(delta));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(LocalityError::NonFinite("inputs"));
    }
    let xs = xs.as_standard_layout();
    let n = xs.nrows();
    let dim = xs.ncols();
    let flat = xs.as_slice().expect("standard layout");
    let row = |i: usize| &flat[i * dim..(i + 1) * dim];

    let neighbors: Vec<Vec<usize>> = if delta.is_infinite() {
        vec![(0..n).collect(); n]
    } else if n <= GRID_THRESHOLD || dim == 0 {
        (0..n)
            .into_par_iter()
            .map(|i| (0..n).filter(|&j| within(row(i), row(j), delta)).collect())
            .collect()
    } else {
        let g = dim.min(3);
        let cell = |i: usize| -> Vec<i64> { row(i)[..g].iter().map(|v| (v / delta).floor() as i64).collect() };
        let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for i in 0..n {
            buckets.entry(cell(i)).or_default().push(i);
        }
        let offsets: Vec<Vec<i64>> = (0..3usize.pow(g as u32))
            .map(|mut k| {
                (0..g)
                    .map(|_| {
                        let o = (k % 3) as i64 - 1;
                        k /= 3;
                        o
                    })
                    .collect()
            })
            .collect();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let c = cell(i);
                let mut out = Vec::new();
                for off in &offsets {
                    let key: Vec<i64> = c.iter().zip(off).map(|(a, b)| a + b).collect();
                    if let Some(list) = buckets.get(&key) {
                        out.extend(list.iter().copied().filter(|&j| within(row(i), row(j), delta)));
                    }
                }
                out.sort_unstable();
                out
            })
            .collect()
    };
    Ok(NeighborhoodIndex { delta, neighbors })
}

/// Sorted indices whose neighborhood holds at least `n0` samples.
pub fn eligible(index: &NeighborhoodIndex, n0: usize) -> Vec<usize> {
    (0..index.len()).filter(|&i| index.count(i) >= n0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinibatchSelection {
    /// Sorted reference indices.
    pub indices: Vec<usize>,
    pub id: usize,
}

/// Uniform sample without replacement of `min(n_batch, |eligible|)`
/// reference points, returned sorted.
pub fn select_minibatch<R: Rng + ?Sized>(
    eligible: &[usize],
    n_batch: usize,
    delta: f64,
    n0: usize,
    id: usize,
    rng: &mut R,
) -> Result<MinibatchSelection, LocalityError> {
    if eligible.is_empty() {
        return Err(LocalityError::NoEligible { delta, n0 });
    }
    let mut indices = if n_batch >= eligible.len() {
        eligible.to_vec()
    } else {
        rand::seq::index::sample(rng, eligible.len(), n_batch)
            .into_iter()
            .map(|k| eligible[k])
            .collect()
    };
    indices.sort_unstable();
    Ok(MinibatchSelection { indices, id })
}

/// Loss value with its gradient with respect to every prediction row.
#[derive(Clone, Debug, PartialEq)]
pub struct LossAndGrad<G> {
    pub value: f64,
    pub grad: G,
}

/// Optimal matching of rows of `a` onto rows of `b` (both `n x d`, flat)
/// and its mean cost. One-dimensional outputs use the sorted matching.
fn matching(a: &[f64], b: &[f64], n: usize, d: usize) -> Result<(Vec<usize>, f64), OtError> {
    if d != 1 {
        return ot::assign_flat(a, b, n, d);
    }
    let mut ia: Vec<usize> = (0..n).collect();
    let mut ib: Vec<usize> = (0..n).collect();
    ia.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    ib.sort_by(|&i, &j| b[i].total_cmp(&b[j]));
    let mut perm = vec![0; n];
    for (&i, &j) in ia.iter().zip(&ib) {
        perm[i] = j;
    }
    let total: f64 = ia.iter().zip(&ib).map(|(&i, &j)| (a[i] - b[j]) * (a[i] - b[j])).sum();
    if !total.is_finite() {
        return Err(OtError::NonFinite("1-d sample"));
    }
    Ok((perm, total / n as f64))
}

fn gather(m: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&m[r * d..(r + 1) * d]);
    }
    out
}

/// Per-term (value, gradient scatter) pieces, computed in parallel and
/// reduced in selection order.
fn local_terms(
    truth: &[f64],
    preds: &[f64],
    d: usize,
    selection: &[usize],
    index: &NeighborhoodIndex,
) -> Result<Vec<(f64, Vec<usize>, Vec<f64>)>, LocalityError> {
    selection
        .par_iter()
        .map(|&x| {
            let rows = index.neighbors(x);
            let n = rows.len();
            let p = gather(preds, d, rows);
            let t = gather(truth, d, rows);
            let (perm, cost) = matching(&p, &t, n, d)?;
            let scale = 2.0 / n as f64;
            let mut g = vec![0.0; n * d];
            for (i, &j) in perm.iter().enumerate() {
                for k in 0..d {
                    g[i * d + k] = scale * (p[i * d + k] - t[j * d + k]);
                }
            }
            Ok((cost, rows.to_vec(), g))
        })
        .collect()
}

fn check_rows(truth: &ArrayView2<'_, f64>, preds: &ArrayView2<'_, f64>, index: &NeighborhoodIndex) -> Result<(), LocalityError> {
    if truth.dim() != preds.dim() {
        return Err(LocalityError::Shape(format!(
            "truth is {:?}, predictions are {:?}",
            truth.dim(),
            preds.dim()
        )));
    }
    if truth.nrows() != index.len() {
        return Err(LocalityError::Shape(format!(
            "index covers {} samples, outputs have {} rows",
            index.len(),
            truth.nrows()
        )));
    }
    Ok(())
}

/// Minibatch local loss `(1/|X0|) sum_x W2^2(truth|B_x, preds|B_x)` with its
/// gradient in the predictions, holding each optimal matching fixed. Rows
/// outside every selected neighborhood get an exactly zero gradient.
pub fn local_w2_loss(
    truth: ArrayView2<'_, f64>,
    preds: ArrayView2<'_, f64>,
    selection: &[usize],
    index: &NeighborhoodIndex,
) -> Result<LossAndGrad<Array2<f64>>, LocalityError> {
    check_rows(&truth, &preds, index)?;
    if selection.is_empty() {
        return Err(LocalityError::Shape("empty minibatch".into()));
    }
    let d = truth.ncols();
    let t = truth.as_standard_layout();
    let p = preds.as_standard_layout();
    let terms = local_terms(t.as_slice().unwrap(), p.as_slice().unwrap(), d, selection, index)?;
    let w = 1.0 / selection.len() as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(truth.dim());
    for (cost, rows, g) in terms {
        value += cost;
        for (i, &r) in rows.iter().enumerate() {
            for k in 0..d {
                grad[[r, k]] += w * g[i * d + k];
            }
        }
    }
    Ok(LossAndGrad {
        value: value * w,
        grad,
    })
}

/// Mean over time slices of the local loss applied to the states at each
/// slice. Ensembles are `n_traj x n_slices x dim`; neighborhoods are taken
/// over the trajectories' initial states.
pub fn time_decoupled_loss(
    truth: ArrayView3<'_, f64>,
    preds: ArrayView3<'_, f64>,
    selection: &[usize],
    index: &NeighborhoodIndex,
) -> Result<LossAndGrad<Array3<f64>>, LocalityError> {
    if truth.dim() != preds.dim() {
        return Err(LocalityError::Shape(format!(
            "time grids differ: truth {:?}, predictions {:?}",
            truth.dim(),
            preds.dim()
        )));
    }
    let n_slices = truth.dim().1;
    if n_slices == 0 {
        return Err(LocalityError::Shape("no time slices".into()));
    }
    let per_slice: Vec<LossAndGrad<Array2<f64>>> = (0..n_slices)
        .into_par_iter()
        .map(|s| {
            local_w2_loss(
                truth.index_axis(Axis(1), s),
                preds.index_axis(Axis(1), s),
                selection,
                index,
            )
        })
        .collect::<Result<_, _>>()?;
    let w = 1.0 / n_slices as f64;
    let mut value = 0.0;
    let mut grad = Array3::zeros(truth.dim());
    for (s, term) in per_slice.into_iter().enumerate() {
        value += term.value;
        grad.index_axis_mut(Axis(1), s).scaled_add(w, &term.grad);
    }
    Ok(LossAndGrad {
        value: value * w,
        grad,
    })
}
