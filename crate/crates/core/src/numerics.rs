//! Dense vector/matrix helpers, a reproducible random stream, and the two
//! small convex solvers the aggregators share: the min-norm point of a
//! convex hull and the positive solution of `M a = 1 / a`.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot tolerance for [`solve_linear`].
pub const PIVOT_TOL: f64 = 1e-12;

pub const MIN_NORM_MAX_ITER: usize = 250;
pub const MIN_NORM_TOL: f64 = 1e-7;

/// Damping applied to every Newton step of [`positive_fixed_point`].
pub const FIXED_POINT_DAMPING: f64 = 0.7;
pub const FIXED_POINT_ITERS: usize = 20;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scaled(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Angle in radians between two nonzero vectors.
pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Mat::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec length mismatch");
        self.row_iter().map(|r| dot(r, x)).collect()
    }

    /// `xᵀ A`, i.e. `Aᵀ x`.
    pub fn tmatvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "tmatvec length mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, xi) in self.row_iter().zip(x) {
            axpy(*xi, r, &mut out);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simplex(Vec<f64>);

impl Simplex {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty simplex".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "simplex weight {w} is negative or non-finite"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "simplex weights sum to {sum}"
            )));
        }
        Ok(Simplex(weights))
    }

    pub fn uniform(n: usize) -> Self {
        Simplex(vec![1.0 / n as f64; n])
    }

    /// Renormalizes away accumulated rounding; callers guarantee
    /// nonnegativity.
    fn from_iterate(mut w: Vec<f64>) -> Self {
        for v in &mut w {
            *v = v.max(0.0);
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        Simplex(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Seeded random stream. Each `(seed, stream)` pair names an independent
/// ChaCha8 keystream, so results do not depend on thread scheduling.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A generator on a different stream of the same seed.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::with_stream(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gamma(&mut self, shape: f64) -> f64 {
        Gamma::new(shape, 1.0)
            .expect("gamma shape must be positive")
            .sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// Pairwise dot products of the rows of `g`.
pub fn gram(g: &Mat) -> Mat {
    let n = g.rows();
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(g.row(i), g.row(j));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct MinNorm {
    pub weights: Simplex,
    /// Norm of the combined vector `Σ w_i g_i`.
    pub norm: f64,
    pub iterations: usize,
    /// Set when every row is zero; weights are then uniform.
    pub degenerate: bool,
}

/// Smallest-norm point of the convex hull of the rows of `g`.
///
/// Frank–Wolfe on the Gram matrix. Each step moves towards the vertex that
/// minimizes the linearization, with the exact line search along that
/// segment. Starts from the best of the uniform point and the vertices, so
/// the result is never worse than any of them.
pub fn min_norm_in_hull(g: &Mat, max_iter: usize, tol: f64) -> Result<MinNorm> {
    let n = g.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("min-norm of an empty hull".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("min-norm input".into()));
    }
    let m = gram(g);
    min_norm_from_gram(&m, max_iter, tol)
}

/// [`min_norm_in_hull`] given the Gram matrix directly.
pub fn min_norm_from_gram(m: &Mat, max_iter: usize, tol: f64) -> Result<MinNorm> {
    let n = m.rows();
    if n == 0 || m.cols() != n {
        return Err(Error::Shape("min-norm needs a square nonempty Gram matrix".into()));
    }
    let max_diag = (0..n).fold(0.0f64, |a, i| a.max(m[(i, i)]));
    if max_diag <= f64::MIN_POSITIVE {
        return Ok(MinNorm {
            weights: Simplex::uniform(n),
            norm: 0.0,
            iterations: 0,
            degenerate: true,
        });
    }
    if n == 1 {
        return Ok(MinNorm {
            weights: Simplex(vec![1.0]),
            norm: m[(0, 0)].sqrt(),
            iterations: 0,
            degenerate: false,
        });
    }

    let quad = |w: &[f64]| dot(w, &m.matvec(w));
    let mut w = vec![1.0 / n as f64; n];
    let mut best = quad(&w);
    for i in 0..n {
        if m[(i, i)] < best {
            best = m[(i, i)];
            w = vec![0.0; n];
            w[i] = 1.0;
        }
    }

    let mut iterations = 0;
    for _ in 0..max_iter {
        let mw = m.matvec(&w);
        let vv = dot(&w, &mw);
        let (t, mw_t) = mw
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        // Frank-Wolfe duality gap on the squared norm.
        if vv - mw_t <= tol {
            break;
        }
        iterations += 1;
        let denom = vv - 2.0 * mw_t + m[(t, t)];
        if denom <= 0.0 {
            break;
        }
        let gamma = ((vv - mw_t) / denom).clamp(0.0, 1.0);
        for (i, wi) in w.iter_mut().enumerate() {
            *wi *= 1.0 - gamma;
            if i == t {
                *wi += gamma;
            }
        }
    }

    let weights = Simplex::from_iterate(w);
    let norm = quad(weights.as_slice()).max(0.0).sqrt();
    Ok(MinNorm {
        weights,
        norm,
        iterations,
        degenerate: false,
    })
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
///
/// A pivot smaller than `PIVOT_TOL` times the largest entry of `A` makes the
/// system singular.
pub fn solve_linear(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Shape(format!(
            "solve needs square A and matching b, got {}x{} and {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    if !a.is_finite() || !all_finite(b) {
        return Err(Error::NonFinite("linear system".into()));
    }
    let scale = a.max_abs();
    let mut lu = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let (piv_row, piv) = (col..n)
            .map(|r| (r, lu[(r, col)].abs()))
            .fold((col, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
        if scale == 0.0 || piv <= PIVOT_TOL * scale {
            return Err(Error::Singular { column: col, pivot: piv });
        }
        if piv_row != col {
            for j in 0..n {
                let tmp = lu[(col, j)];
                lu[(col, j)] = lu[(piv_row, j)];
                lu[(piv_row, j)] = tmp;
            }
            x.swap(col, piv_row);
        }
        let p = lu[(col, col)];
        for r in col + 1..n {
            let f = lu[(r, col)] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[(r, j)] -= f * lu[(col, j)];
            }
            x[r] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| lu[(i, j)] * x[j]).sum();
        x[i] = (x[i] - s) / lu[(i, i)];
    }
    Ok(x)
}

/// Matrix inverse through column-wise solves.
pub fn invert(a: &Mat) -> Result<Mat> {
    let n = a.rows();
    let mut inv = Mat::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = solve_linear(a, &e)?;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub alpha: Vec<f64>,
    /// `‖M α − 1/α‖₂` at the returned point.
    pub residual: f64,
    pub iterations: usize,
}

fn fixed_point_residual(m: &Mat, alpha: &[f64]) -> Vec<f64> {
    m.matvec(alpha)
        .iter()
        .zip(alpha)
        .map(|(ma, a)| ma - 1.0 / a)
        .collect()
}

/// Positive solution of `M α = 1/α` for a PSD `M` with positive diagonal.
///
/// Damped Newton on `f(α) = M α − 1/α` (Jacobian `M + diag(1/α²)`), started
/// from the diagonal solution `α_i = M_ii^{-1/2}` rescaled along its ray.
/// Steps that would leave the positive orthant are halved until they do not.
pub fn positive_fixed_point(m: &Mat, iters: usize) -> Result<FixedPoint> {
    let n = m.rows();
    if n == 0 || m.cols() != n {
        return Err(Error::Shape("fixed point needs a square nonempty matrix".into()));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("fixed point needs at least one iteration".into()));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("fixed point matrix".into()));
    }
    let scale = m.max_abs();
    if let Some(task) = (0..n).find(|&i| m[(i, i)] <= 1e-24 * scale.max(1e-300) || m[(i, i)] <= 0.0) {
        return Err(Error::ZeroGradient { task });
    }

    let mut alpha: Vec<f64> = (0..n).map(|i| m[(i, i)].sqrt().recip()).collect();
    let q = dot(&alpha, &m.matvec(&alpha));
    if q > 0.0 {
        // minimizer of ½αᵀMα − Σ log α along the ray through α
        let s = (n as f64 / q).sqrt();
        alpha.iter_mut().for_each(|a| *a *= s);
    }

    let mut iterations = 0;
    for _ in 0..iters {
        let f = fixed_point_residual(m, &alpha);
        if norm(&f) == 0.0 {
            break;
        }
        let mut jac = m.clone();
        for i in 0..n {
            jac[(i, i)] += 1.0 / (alpha[i] * alpha[i]);
        }
        let delta = solve_linear(&jac, &f)?;
        let mut step = FIXED_POINT_DAMPING;
        while alpha.iter().zip(&delta).any(|(a, d)| a - step * d <= 0.0) {
            step *= 0.5;
        }
        for (a, d) in alpha.iter_mut().zip(&delta) {
            *a -= step * d;
        }
        iterations += 1;
    }
    let residual = norm(&fixed_point_residual(m, &alpha));
    if !all_finite(&alpha) || !residual.is_finite() {
        return Err(Error::NonFinite("fixed point iterate".into()));
    }
    Ok(FixedPoint {
        alpha,
        residual,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    fn naive_gram(g: &Mat) -> Mat {
        let mut m = Mat::zeros(g.rows(), g.rows());
        for i in 0..g.rows() {
            for j in 0..g.rows() {
                for k in 0..g.cols() {
                    m[(i, j)] += g[(i, k)] * g[(j, k)];
                }
            }
        }
        m
    }

    #[test]
    fn gram_examples() {
        assert_eq!(gram(&mat(&[&[1., 0.], &[0., 1.]])), Mat::identity(2));
        assert_eq!(
            gram(&mat(&[&[1., 0.], &[1., 0.]])),
            mat(&[&[1., 1.], &[1., 1.]])
        );
        let g = mat(&[&[2., 0.], &[0., 1.]]);
        assert_eq!(gram(&g), mat(&[&[4., 0.], &[0., 1.]]));
        assert_eq!(gram(&g), naive_gram(&g));
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let n = 2 + rng.below(4);
            let d = 1 + rng.below(6);
            let g = Mat::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
            let m = gram(&g);
            assert_eq!(m, m.transpose());
            // PSD: xᵀMx = ‖Gᵀx‖² ≥ 0 for random probes
            for _ in 0..20 {
                let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
                assert!(dot(&x, &m.matvec(&x)) >= -1e-9);
            }
        }
    }

    #[test]
    fn min_norm_orthonormal_pair_matches_grid() {
        let g = mat(&[&[1., 0.], &[0., 1.]]);
        let r = min_norm_in_hull(&g, MIN_NORM_MAX_ITER, MIN_NORM_TOL).unwrap();
        // grid oracle at 1e-4 resolution
        let best = (0..=10_000)
            .map(|k| k as f64 / 10_000.0)
            .min_by(|a, b| {
                let fa = a * a + (1. - a) * (1. - a);
                let fb = b * b + (1. - b) * (1. - b);
                fa.partial_cmp(&fb).unwrap()
            })
            .unwrap();
        assert!((r.weights.as_slice()[0] - best).abs() < 1e-4);
        assert!((r.weights.as_slice()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn min_norm_single_row_and_opposites() {
        let r = min_norm_in_hull(&mat(&[&[3., 4.]]), 10, 1e-7).unwrap();
        assert_eq!(r.weights.as_slice(), &[1.0]);
        assert!((r.norm - 5.0).abs() < 1e-12);

        let r = min_norm_in_hull(&mat(&[&[1., 0.], &[-1., 0.]]), 250, 1e-7).unwrap();
        assert!(r.norm <= 1e-7);
    }

    #[test]
    fn min_norm_all_zero_is_degenerate() {
        let r = min_norm_in_hull(&Mat::zeros(3, 4), 250, 1e-7).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.weights, Simplex::uniform(3));
    }

    #[test]
    fn min_norm_rejects_bad_input() {
        assert!(min_norm_in_hull(&Mat::zeros(0, 2), 10, 1e-7).is_err());
        assert!(min_norm_in_hull(&Mat::identity(2), 10, 0.0).is_err());
    }

    #[test]
    fn solve_examples() {
        let x = solve_linear(&Mat::identity(3), &[1., 2., 3.]).unwrap();
        assert_eq!(x, vec![1., 2., 3.]);
        let x = solve_linear(&mat(&[&[2., 0.], &[0., 4.]]), &[2., 2.]).unwrap();
        assert_eq!(x, vec![1., 0.5]);
    }

    #[test]
    fn solve_random_residual() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let mut a = Mat::from_vec(4, 4, (0..16).map(|_| rng.normal()).collect()).unwrap();
            for i in 0..4 {
                a[(i, i)] += 4.0;
            }
            let b: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let x = solve_linear(&a, &b).unwrap();
            let r = norm(&sub(&a.matvec(&x), &b));
            assert!(r <= 1e-8 * (1.0 + norm(&b)), "residual {r}");
        }
    }

    #[test]
    fn solve_singular_is_an_error() {
        let a = mat(&[&[1., 2.], &[2., 4.]]);
        assert!(matches!(solve_linear(&a, &[1., 1.]), Err(Error::Singular { .. })));
        assert!(matches!(
            solve_linear(&Mat::zeros(2, 2), &[1., 1.]),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn invert_roundtrip() {
        let a = mat(&[&[2., 1.], &[1., 3.]]);
        let inv = invert(&a).unwrap();
        let p = a.matmul(&inv).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((p[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_point_examples() {
        let r = positive_fixed_point(&Mat::identity(2), FIXED_POINT_ITERS).unwrap();
        assert!((r.alpha[0] - 1.0).abs() < 1e-12 && (r.alpha[1] - 1.0).abs() < 1e-12);

        let r = positive_fixed_point(&Mat::diag(&[1.0, 4.0]), FIXED_POINT_ITERS).unwrap();
        assert!((r.alpha[0] - 1.0).abs() < 1e-12);
        assert!((r.alpha[1] - 0.5).abs() < 1e-12);
        assert!(r.residual < 1e-12);

        // symmetric case: α₁ = α₂ = a with 1.5 a² = 1
        let r = positive_fixed_point(&mat(&[&[1., 0.5], &[0.5, 1.]]), FIXED_POINT_ITERS).unwrap();
        let a = (2.0f64 / 3.0).sqrt();
        assert!(r.residual <= 1e-6);
        assert!((r.alpha[0] - a).abs() < 1e-8 && (r.alpha[1] - a).abs() < 1e-8);
    }

    #[test]
    fn fixed_point_diagonal_is_inverse_sqrt() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let n = 1 + rng.below(8);
            let d: Vec<f64> = (0..n).map(|_| 0.01 + 10.0 * rng.uniform()).collect();
            let r = positive_fixed_point(&Mat::diag(&d), 20).unwrap();
            for (a, m) in r.alpha.iter().zip(&d) {
                assert!((a - m.powf(-0.5)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fixed_point_zero_diagonal_names_task() {
        let m = mat(&[&[1., 0.], &[0., 0.]]);
        assert!(matches!(
            positive_fixed_point(&m, 20),
            Err(Error::ZeroGradient { task: 1 })
        ));
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::with_stream(42, 1);
        let mut d = Rng::new(42);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn simplex_validation() {
        assert!(Simplex::new(vec![0.3, 0.7]).is_ok());
        assert!(Simplex::new(vec![0.3, 0.6]).is_err());
        assert!(Simplex::new(vec![-0.1, 1.1]).is_err());
        assert!(Simplex::new(vec![]).is_err());
    }
}
