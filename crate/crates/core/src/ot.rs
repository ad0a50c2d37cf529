//! Exact squared Wasserstein-2 distance between equal-size uniform empirical
//! measures.
//!
//! With uniform weights and equal sizes the optimal coupling is a
//! permutation, so the distance reduces to a linear assignment problem on
//! the squared-Euclidean cost matrix. The solver is Jonker-Volgenant:
//! column reduction, reduction transfer, two rounds of augmenting row
//! reduction, then shortest augmenting paths for the remaining free rows.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("measure sizes differ: {left} vs {right} points")]
    SizeMismatch { left: usize, right: usize },
    #[error("measure dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("empirical measure must contain at least one point")]
    Empty,
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("brute force limited to N <= {max}, got {n}")]
    TooLarge { n: usize, max: usize },
}

/// Uniform-weight point cloud: `N x d`, every row carries mass `1/N`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    points: Array2<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: Array2<f64>) -> Result<Self, OtError> {
        if points.nrows() == 0 {
            return Err(OtError::Empty);
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(OtError::NonFinite("empirical measure"));
        }
        Ok(EmpiricalMeasure {
            points: points.as_standard_layout().into_owned(),
        })
    }

    pub fn from_flat(n: usize, d: usize, data: Vec<f64>) -> Result<Self, OtError> {
        let points = Array2::from_shape_vec((n, d), data).map_err(|_| OtError::DimensionMismatch {
            left: n * d,
            right: 0,
        })?;
        Self::new(points)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, OtError> {
        let n = rows.len();
        if n == 0 {
            return Err(OtError::Empty);
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(OtError::DimensionMismatch {
                left: d,
                right: bad.len(),
            });
        }
        Self::from_flat(n, d, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }

    pub(crate) fn flat(&self) -> &[f64] {
        self.points
            .as_slice()
            .expect("empirical measure is stored in standard layout")
    }

    /// Column-wise sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim())
            .map(|j| self.points.column(j).sum() / n)
            .collect()
    }
}

/// An optimal matching: row `i` of the source goes to row `permutation[i]`
/// of the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub permutation: Vec<usize>,
    pub cost: f64,
}

fn check_pair(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<(), OtError> {
    if a.len() != b.len() {
        return Err(OtError::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.dim() != b.dim() {
        return Err(OtError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Dense `n x n` matrix of squared Euclidean distances between rows.
pub(crate) fn cost_matrix(a: &[f64], b: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        let row = &mut c[i * n..(i + 1) * n];
        for (j, cij) in row.iter_mut().enumerate() {
            let bj = &b[j * d..(j + 1) * d];
            let mut s = 0.0;
            for (x, y) in ai.iter().zip(bj) {
                let t = x - y;
                s += t * t;
            }
            *cij = s;
        }
    }
    c
}

/// Mean matched cost for a given permutation.
pub(crate) fn matched_cost(cost: &[f64], n: usize, perm: &[usize]) -> f64 {
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    total / n as f64
}

/// Assignment on flat row-major point buffers. Returns the permutation and
/// the mean matched squared distance.
pub(crate) fn assign_flat(a: &[f64], b: &[f64], n: usize, d: usize) -> Result<(Vec<usize>, f64), OtError> {
    let cost = cost_matrix(a, b, n, d);
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(OtError::NonFinite("cost matrix"));
    }
    let perm = lapjv(&cost, n);
    let c = matched_cost(&cost, n, &perm);
    Ok((perm, c))
}

/// Exact W2^2 between two equal-size uniform empirical measures, with the
/// optimal matching.
pub fn squared_w2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<Coupling, OtError> {
    check_pair(a, b)?;
    let (permutation, cost) = assign_flat(a.flat(), b.flat(), a.len(), a.dim())?;
    Ok(Coupling { permutation, cost })
}

/// Gradient of W2^2 with respect to the rows of `a`, holding the optimal
/// matching fixed: `(2/N) (a_i - b_{pi(i)})`.
pub fn squared_w2_grad(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<Array2<f64>, OtError> {
    let coupling = squared_w2(a, b)?;
    Ok(matching_grad(a, b, &coupling.permutation))
}

pub(crate) fn matching_grad(a: &EmpiricalMeasure, b: &EmpiricalMeasure, perm: &[usize]) -> Array2<f64> {
    let n = a.len();
    let scale = 2.0 / n as f64;
    let mut g = Array2::zeros((n, a.dim()));
    for (i, &j) in perm.iter().enumerate() {
        for k in 0..a.dim() {
            g[[i, k]] = scale * (a.points[[i, k]] - b.points[[j, k]]);
        }
    }
    g
}

/// One-dimensional W2^2 through the sorted (monotone) matching.
pub fn squared_w2_1d(a: &[f64], b: &[f64]) -> Result<f64, OtError> {
    if a.len() != b.len() {
        return Err(OtError::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(OtError::Empty);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(OtError::NonFinite("1-d sample"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let total: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(total / a.len() as f64)
}

/// W2^2 cost only, taking the sorted route in one dimension.
pub fn squared_w2_cost(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64, OtError> {
    check_pair(a, b)?;
    if a.dim() == 1 {
        squared_w2_1d(a.flat(), b.flat())
    } else {
        Ok(squared_w2(a, b)?.cost)
    }
}

pub const BRUTE_FORCE_MAX: usize = 8;

/// Minimum over all `N!` permutations. Test oracle; `N <= 8`.
pub fn brute_force_w2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64, OtError> {
    check_pair(a, b)?;
    let n = a.len();
    if n > BRUTE_FORCE_MAX {
        return Err(OtError::TooLarge {
            n,
            max: BRUTE_FORCE_MAX,
        });
    }
    let cost = cost_matrix(a.flat(), b.flat(), n, a.dim());
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = matched_cost(&cost, n, &perm);
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(matched_cost(&cost, n, &perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

const NONE: usize = usize::MAX;

/// Jonker-Volgenant linear assignment on a dense row-major `n x n` cost
/// matrix. Returns `x` with `x[row] = column`.
pub(crate) fn lapjv(cost: &[f64], n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0];
    }
    let c = |i: usize, j: usize| cost[i * n + j];
    let mut x = vec![NONE; n];
    let mut y = vec![NONE; n];
    let mut v = vec![0.0f64; n];
    let mut matches = vec![0usize; n];

    // column reduction
    for j in (0..n).rev() {
        let mut min = c(0, j);
        let mut imin = 0;
        for i in 1..n {
            if c(i, j) < min {
                min = c(i, j);
                imin = i;
            }
        }
        v[j] = min;
        matches[imin] += 1;
        if matches[imin] == 1 {
            x[imin] = j;
            y[j] = imin;
        } else {
            y[j] = NONE;
        }
    }
    // reduction transfer
    let mut free = Vec::with_capacity(n);
    for i in 0..n {
        match matches[i] {
            0 => free.push(i),
            1 => {
                let j1 = x[i];
                let mut min = f64::INFINITY;
                for j in 0..n {
                    if j != j1 {
                        let h = c(i, j) - v[j];
                        if h < min {
                            min = h;
                        }
                    }
                }
                v[j1] -= min;
            }
            _ => {}
        }
    }

    // augmenting row reduction
    let mut num_free = free.len();
    for _ in 0..2 {
        if num_free == 0 {
            break;
        }
        let prev_free = num_free;
        num_free = 0;
        let mut k = 0;
        let mut requeue_budget = 10 * n;
        while k < prev_free {
            let i = free[k];
            k += 1;

            let mut umin = c(i, 0) - v[0];
            let mut j1 = 0;
            let mut usubmin = f64::INFINITY;
            let mut j2 = NONE;
            for j in 1..n {
                let h = c(i, j) - v[j];
                if h < usubmin {
                    if h >= umin {
                        usubmin = h;
                        j2 = j;
                    } else {
                        usubmin = umin;
                        umin = h;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }

            let mut i0 = y[j1];
            let mut lowered = false;
            if umin < usubmin {
                let before = v[j1];
                v[j1] -= usubmin - umin;
                lowered = v[j1] < before;
            } else if i0 != NONE && j2 != NONE {
                j1 = j2;
                i0 = y[j2];
            }

            if i0 != NONE {
                x[i0] = NONE;
            }
            x[i] = j1;
            y[j1] = i;

            if i0 != NONE {
                if lowered && requeue_budget > 0 {
                    requeue_budget -= 1;
                    k -= 1;
                    free[k] = i0;
                } else {
                    free[num_free] = i0;
                    num_free += 1;
                }
            }
        }
    }

    // shortest augmenting paths
    let mut d = vec![0.0f64; n];
    let mut pred = vec![0usize; n];
    let mut collist = vec![0usize; n];
    for f in 0..num_free {
        let free_row = free[f];
        for j in 0..n {
            d[j] = c(free_row, j) - v[j];
            pred[j] = free_row;
            collist[j] = j;
        }
        let mut low = 0;
        let mut up = 0;
        let mut scanned = 0;
        let mut min = 0.0;
        let endofpath;
        'search: loop {
            if up == low {
                scanned = low;
                min = d[collist[up]];
                up += 1;
                for k in up..n {
                    let j = collist[k];
                    let h = d[j];
                    if h <= min {
                        if h < min {
                            up = low;
                            min = h;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                }
                for &j in &collist[low..up] {
                    if y[j] == NONE {
                        endofpath = j;
                        break 'search;
                    }
                }
            }

            let j1 = collist[low];
            low += 1;
            let i = y[j1];
            let u1 = c(i, j1) - v[j1] - min;
            let mut k = up;
            while k < n {
                let j = collist[k];
                let v2 = c(i, j) - v[j] - u1;
                if v2 < d[j] {
                    pred[j] = i;
                    if v2 == min {
                        if y[j] == NONE {
                            endofpath = j;
                            break 'search;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                    d[j] = v2;
                }
                k += 1;
            }
        }

        for &j in &collist[..scanned] {
            v[j] += d[j] - min;
        }

        let mut end = endofpath;
        loop {
            let i = pred[end];
            y[end] = i;
            let prev = x[i];
            x[i] = end;
            end = prev;
            if i == free_row {
                break;
            }
        }
    }

    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_measure<R: Rng>(rng: &mut R, n: usize, d: usize) -> EmpiricalMeasure {
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        EmpiricalMeasure::from_flat(n, d, data).unwrap()
    }

    /// O(n^3) Hungarian method with potentials, independent of the JV code.
    fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
        let inf = f64::INFINITY;
        let mut u = vec![0.0; n + 1];
        let mut v = vec![0.0; n + 1];
        let mut p = vec![0usize; n + 1];
        let mut way = vec![0usize; n + 1];
        for i in 1..=n {
            p[0] = i;
            let mut j0 = 0;
            let mut minv = vec![inf; n + 1];
            let mut used = vec![false; n + 1];
            loop {
                used[j0] = true;
                let i0 = p[j0];
                let mut delta = inf;
                let mut j1 = 0;
                for j in 1..=n {
                    if !used[j] {
                        let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                        if cur < minv[j] {
                            minv[j] = cur;
                            way[j] = j0;
                        }
                        if minv[j] < delta {
                            delta = minv[j];
                            j1 = j;
                        }
                    }
                }
                for j in 0..=n {
                    if used[j] {
                        u[p[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                j0 = j1;
                if p[j0] == 0 {
                    break;
                }
            }
            loop {
                let j1 = way[j0];
                p[j0] = p[j1];
                j0 = j1;
                if j0 == 0 {
                    break;
                }
            }
        }
        let mut ans = vec![0; n];
        for j in 1..=n {
            ans[p[j] - 1] = j - 1;
        }
        ans
    }

    fn is_permutation(p: &[usize]) -> bool {
        let mut seen = vec![false; p.len()];
        p.iter().all(|&j| j < p.len() && !std::mem::replace(&mut seen[j], true))
    }

    #[test]
    fn identical_measures_cost_zero() {
        let a = EmpiricalMeasure::new(array![[1.0, 2.0], [3.0, 4.0], [1.0, 2.0]]).unwrap();
        let b = EmpiricalMeasure::new(array![[3.0, 4.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert_eq!(squared_w2(&a, &b).unwrap().cost, 0.0);
        assert!(squared_w2_grad(&a, &a).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn one_dimensional_worked_example() {
        let a = EmpiricalMeasure::new(array![[0.0], [2.0]]).unwrap();
        let b = EmpiricalMeasure::new(array![[1.0], [3.0]]).unwrap();
        let c = squared_w2(&a, &b).unwrap();
        assert_eq!(c.permutation, vec![0, 1]);
        assert_eq!(c.cost, 1.0);
        assert_eq!(brute_force_w2(&a, &b).unwrap(), 1.0);
        let g = squared_w2_grad(&a, &b).unwrap();
        assert_eq!(g, array![[-1.0], [-1.0]]);
        assert_eq!(squared_w2_1d(&[0.0, 2.0], &[3.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn single_point() {
        let a = EmpiricalMeasure::new(array![[1.0, 1.0]]).unwrap();
        let b = EmpiricalMeasure::new(array![[4.0, 5.0]]).unwrap();
        assert_eq!(brute_force_w2(&a, &b).unwrap(), 25.0);
        assert_eq!(squared_w2(&a, &b).unwrap().cost, 25.0);
    }

    #[test]
    fn errors() {
        let a = EmpiricalMeasure::new(array![[1.0], [2.0]]).unwrap();
        let b = EmpiricalMeasure::new(array![[1.0]]).unwrap();
        assert!(matches!(squared_w2(&a, &b), Err(OtError::SizeMismatch { left: 2, right: 1 })));
        let c = EmpiricalMeasure::new(array![[1.0, 0.0], [2.0, 0.0]]).unwrap();
        assert!(matches!(squared_w2(&a, &c), Err(OtError::DimensionMismatch { .. })));
        assert!(EmpiricalMeasure::new(array![[f64::NAN]]).is_err());
        assert!(EmpiricalMeasure::new(Array2::zeros((0, 2))).is_err());
        let big = EmpiricalMeasure::from_flat(9, 1, (0..9).map(f64::from).collect()).unwrap();
        assert!(matches!(brute_force_w2(&big, &big), Err(OtError::TooLarge { n: 9, .. })));
        // overflow to infinity in the cost matrix
        let huge = EmpiricalMeasure::new(array![[1e200], [0.0]]).unwrap();
        let neg = EmpiricalMeasure::new(array![[-1e200], [0.0]]).unwrap();
        assert_eq!(squared_w2(&huge, &neg), Err(OtError::NonFinite("cost matrix")));
    }

    #[test]
    fn three_points_not_above_any_permutation() {
        let mut rng = crate::rng::substream(3, &[]);
        let a = random_measure(&mut rng, 3, 2);
        let b = random_measure(&mut rng, 3, 2);
        let best = squared_w2(&a, &b).unwrap().cost;
        let cost = cost_matrix(a.flat(), b.flat(), 3, 2);
        for p in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            assert!(best <= matched_cost(&cost, 3, &p) + 1e-15);
        }
    }

    #[test]
    fn matches_hungarian_on_larger_instances() {
        let mut rng = crate::rng::substream(4, &[]);
        for trial in 0..60 {
            let n = 2 + trial % 40;
            let d = 1 + trial % 4;
            let a = random_measure(&mut rng, n, d);
            let b = random_measure(&mut rng, n, d);
            let c = squared_w2(&a, &b).unwrap();
            assert!(is_permutation(&c.permutation));
            let cost = cost_matrix(a.flat(), b.flat(), n, d);
            let h = matched_cost(&cost, n, &hungarian(&cost, n));
            assert!((c.cost - h).abs() <= 1e-10 * h.max(1e-300), "n={n}: {} vs {h}", c.cost);
        }
    }

    #[test]
    fn integer_costs_with_many_ties() {
        let mut rng = crate::rng::substream(8, &[]);
        for _ in 0..100 {
            let n = rng.random_range(2..30);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
            let ma = EmpiricalMeasure::from_flat(n, 1, a.clone()).unwrap();
            let mb = EmpiricalMeasure::from_flat(n, 1, b.clone()).unwrap();
            let c = squared_w2(&ma, &mb).unwrap();
            assert!(is_permutation(&c.permutation));
            assert_eq!(c.cost, squared_w2_1d(&a, &b).unwrap());
            // ties resolve the same way every time
            assert_eq!(c, squared_w2(&ma, &mb).unwrap());
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::rng::substream(12, &[]);
        let a = random_measure(&mut rng, 6, 3);
        let b = random_measure(&mut rng, 6, 3);
        let g = squared_w2_grad(&a, &b).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..6 {
            for k in 0..3 {
                let mut p = a.points().to_owned();
                p[[i, k]] += h;
                let fp = squared_w2(&EmpiricalMeasure::new(p.clone()).unwrap(), &b).unwrap().cost;
                p[[i, k]] -= 2.0 * h;
                let fm = squared_w2(&EmpiricalMeasure::new(p).unwrap(), &b).unwrap().cost;
                let num = (fp - fm) / (2.0 * h);
                worst = worst.max((num - g[[i, k]]).abs() / g[[i, k]].abs().max(1.0));
            }
        }
        assert!(worst <= 1e-5, "{worst}");
    }

    fn measure_strategy(n: usize, d: usize) -> impl Strategy<Value = EmpiricalMeasure> {
        proptest::collection::vec(-3.0f64..3.0, n * d)
            .prop_map(move |v| EmpiricalMeasure::from_flat(n, d, v).unwrap())
    }

    fn triple() -> impl Strategy<Value = (EmpiricalMeasure, EmpiricalMeasure, EmpiricalMeasure)> {
        (1usize..12, 1usize..4).prop_flat_map(|(n, d)| {
            (measure_strategy(n, d), measure_strategy(n, d), measure_strategy(n, d))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]

        #[test]
        fn symmetric((a, b, _) in triple()) {
            let ab = squared_w2(&a, &b).unwrap().cost;
            let ba = squared_w2(&b, &a).unwrap().cost;
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        }

        #[test]
        fn translation((a, b, _) in triple(), shift in -2.0f64..2.0) {
            let d = a.dim();
            let t: Vec<f64> = (0..d).map(|k| shift * (k as f64 + 1.0) / d as f64).collect();
            let move_by = |m: &EmpiricalMeasure| {
                let mut p = m.points().to_owned();
                for mut row in p.rows_mut() {
                    row.iter_mut().zip(&t).for_each(|(x, s)| *x += s);
                }
                EmpiricalMeasure::new(p).unwrap()
            };
            let base = squared_w2(&a, &b).unwrap().cost;
            let both = squared_w2(&move_by(&a), &move_by(&b)).unwrap().cost;
            prop_assert!((base - both).abs() <= 1e-10 * (1.0 + base));
            // shifting one side: cost + |t|^2 + 2 t.(mean a - mean b)
            let one = squared_w2(&move_by(&a), &b).unwrap().cost;
            let (ma, mb) = (a.mean(), b.mean());
            let t2: f64 = t.iter().map(|x| x * x).sum();
            let cross: f64 = t.iter().zip(ma.iter().zip(&mb)).map(|(ti, (x, y))| ti * (x - y)).sum();
            prop_assert!((one - (base + t2 + 2.0 * cross)).abs() <= 1e-9 * (1.0 + one));
        }

        #[test]
        fn triangle_inequality((a, b, c) in triple()) {
            let ab = squared_w2(&a, &b).unwrap().cost.sqrt();
            let bc = squared_w2(&b, &c).unwrap().cost.sqrt();
            let ac = squared_w2(&a, &c).unwrap().cost.sqrt();
            prop_assert!(ab + bc - ac >= -1e-9);
        }

        #[test]
        fn permutation_invariant((a, b, _) in triple(), seed in 0u64..1000) {
            let mut rng = crate::rng::substream(seed, &[]);
            let n = a.len();
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let shuffled = EmpiricalMeasure::new(a.points().select(ndarray::Axis(0), &order)).unwrap();
            let x = squared_w2(&a, &b).unwrap().cost;
            let y = squared_w2(&shuffled, &b).unwrap().cost;
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x));
        }

        #[test]
        fn quadratic_scaling((a, b, _) in triple(), s in 0.1f64..5.0) {
            let sa = EmpiricalMeasure::new(a.points().mapv(|v| v * s)).unwrap();
            let sb = EmpiricalMeasure::new(b.points().mapv(|v| v * s)).unwrap();
            let base = squared_w2(&a, &b).unwrap().cost;
            let scaled = squared_w2(&sa, &sb).unwrap().cost;
            prop_assert!((scaled - s * s * base).abs() <= 1e-10 * (s * s * base).max(1e-12));
        }
    }
}
