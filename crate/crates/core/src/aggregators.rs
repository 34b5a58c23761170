//! Gradient-based balancing methods.
//!
//! Each method takes the per-task gradients of the shared parameters and
//! returns a combined update direction together with the effective per-task
//! coefficients. For every method except GradDrop the direction equals
//! `Σ weights_i · g_i`.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    all_finite, axpy, dot, gram, min_norm_in_hull, norm, positive_fixed_point,
    solve_linear, Mat, Rng, MIN_NORM_MAX_ITER, MIN_NORM_TOL,
};
use crate::weighters::{Convention, WeightVector};

/// Below this norm a task gradient counts as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Largest magnitude an IMTL-G coefficient may take before it is clamped.
pub const IMTL_ALPHA_MAX: f64 = 1e3;

pub const CAGRAD_MAX_ITER: usize = 2000;

/// Per-task gradients of the shared parameters, one row per task.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    g: Mat,
    norms: Vec<f64>,
    names: Vec<String>,
}

impl GradientBundle {
    pub fn new(g: Mat) -> Result<Self> {
        let names = (0..g.rows()).map(|i| format!("task{i}")).collect();
        Self::with_names(g, names)
    }

    pub fn with_names(g: Mat, names: Vec<String>) -> Result<Self> {
        if g.rows() == 0 {
            return Err(Error::InvalidArgument("gradient bundle needs at least one task".into()));
        }
        if names.len() != g.rows() {
            return Err(Error::Shape(format!(
                "{} task names for {} gradients",
                names.len(),
                g.rows()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient bundle".into()));
        }
        let norms = g.row_iter().map(norm).collect();
        Ok(GradientBundle { g, norms, names })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?)
    }

    pub fn n_tasks(&self) -> usize {
        self.g.rows()
    }

    pub fn dim(&self) -> usize {
        self.g.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.g.row(i)
    }

    pub fn matrix(&self) -> &Mat {
        &self.g
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scaled(&self, s: f64) -> Result<GradientBundle> {
        let mut g = self.g.clone();
        g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        Self::with_names(g, self.names.clone())
    }

    fn require_nonzero(&self) -> Result<()> {
        match self.norms.iter().position(|n| *n <= ZERO_NORM) {
            Some(task) => Err(Error::ZeroGradient { task }),
            None => Ok(()),
        }
    }

    /// Rows scaled to unit norm; errors on a zero row.
    pub fn unit_rows(&self) -> Result<Mat> {
        self.require_nonzero()?;
        let mut u = self.g.clone();
        for i in 0..u.rows() {
            let n = self.norms[i];
            u.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        Ok(u)
    }

    /// `Σ c_i g_i`
    pub fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        self.g.tmatvec(coeffs)
    }

    fn mean(&self) -> Vec<f64> {
        let n = self.n_tasks() as f64;
        self.combine(&vec![1.0 / n; self.n_tasks()])
    }
}

/// Named scalar diagnostics; flags are stored as `1.0`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics(BTreeMap<String, f64>);

impl Diagnostics {
    pub fn set(&mut self, key: &str, value: f64) {
        self.0.insert(key.to_string(), value);
    }

    pub fn raise(&mut self, flag: &str) {
        self.set(flag, 1.0);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied()
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key).is_some_and(|v| v != 0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    pub direction: Vec<f64>,
    pub weights: WeightVector,
    pub diagnostics: Diagnostics,
}

fn finish(
    direction: Vec<f64>,
    weights: Vec<f64>,
    convention: Convention,
    diagnostics: Diagnostics,
) -> Result<AggregationResult> {
    if !all_finite(&direction) {
        return Err(Error::NonFinite("aggregated direction".into()));
    }
    Ok(AggregationResult {
        direction,
        weights: WeightVector::new(weights, convention)?,
        diagnostics,
    })
}

/// Min-norm element of the convex hull of the task gradients.
pub fn mgda_ub(bundle: &GradientBundle) -> Result<AggregationResult> {
    let r = min_norm_in_hull(bundle.matrix(), MIN_NORM_MAX_ITER, MIN_NORM_TOL)?;
    let mut diag = Diagnostics::default();
    diag.set("iterations", r.iterations as f64);
    if r.degenerate {
        diag.raise("degenerate");
    }
    let w = r.weights.into_vec();
    finish(bundle.combine(&w), w, Convention::SumToOne, diag)
}

/// Gradient surgery: each task gradient has its component along every
/// conflicting task gradient removed, visiting the others in random order.
pub fn pcgrad(bundle: &GradientBundle, rng: &mut Rng) -> Result<AggregationResult> {
    let n = bundle.n_tasks();
    if n < 2 {
        return Err(Error::InvalidArgument("pcgrad needs at least two tasks".into()));
    }
    let sq: Vec<f64> = bundle.norms().iter().map(|v| v * v).collect();
    // coeffs[i][k]: weight of g_k inside the surgered g_i
    let mut coeffs = vec![vec![0.0; n]; n];
    let mut direction = vec![0.0; bundle.dim()];
    let mut projections = 0usize;
    let mut min_post_dot = f64::INFINITY;
    for (i, ci) in coeffs.iter_mut().enumerate() {
        ci[i] = 1.0;
        let mut gi = bundle.row(i).to_vec();
        for j in rng.permutation(n) {
            if j == i {
                continue;
            }
            let gj = bundle.row(j);
            let d = dot(&gi, gj);
            if d < 0.0 && sq[j] > 0.0 {
                let c = d / sq[j];
                axpy(-c, gj, &mut gi);
                ci[j] -= c;
                projections += 1;
                min_post_dot = min_post_dot.min(dot(&gi, gj));
            }
        }
        axpy(1.0, &gi, &mut direction);
    }
    let weights: Vec<f64> = (0..n).map(|k| coeffs.iter().map(|c| c[k]).sum()).collect();
    let mut diag = Diagnostics::default();
    diag.set("projections", projections as f64);
    if projections > 0 {
        diag.set("min_post_projection_dot", min_post_dot);
    }
    finish(direction, weights, Convention::Free, diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradDropParams {
    /// Slope of the sign-purity transfer around `P = 0.5`.
    pub k: f64,
    /// Fraction of every task gradient that bypasses the mask.
    pub leak: f64,
}

impl Default for GradDropParams {
    fn default() -> Self {
        GradDropParams { k: 1.0, leak: 0.5 }
    }
}

/// Sign-purity transfer `f(P) = clamp(½ + k(P − ½), 0, 1)`.
pub fn graddrop_transfer(purity: f64, k: f64) -> f64 {
    (0.5 + k * (purity - 0.5)).clamp(0.0, 1.0)
}

/// Per-coordinate sign purity `P = ½(1 + Σ g / Σ |g|)`; `None` when every
/// task gradient is zero at that coordinate.
pub fn sign_purity(column: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let s: f64 = column.clone().sum();
    let a: f64 = column.map(f64::abs).sum();
    (a > 0.0).then(|| 0.5 * (1.0 + s / a))
}

/// GradDrop: per coordinate, keep either the positive or the negative task
/// contributions, choosing positives with probability `f(P)`.
///
/// Reported weights are `⟨contribution_i, g_i⟩ / ‖g_i‖²`, i.e. 1 for a task
/// whose gradient passed through untouched.
pub fn graddrop(
    bundle: &GradientBundle,
    rng: &mut Rng,
    params: GradDropParams,
) -> Result<AggregationResult> {
    if !(0.0..=1.0).contains(&params.leak) || !(params.k >= 0.0) {
        return Err(Error::InvalidArgument(format!("bad graddrop params {params:?}")));
    }
    let n = bundle.n_tasks();
    let d = bundle.dim();
    let g = bundle.matrix();
    let mut direction = vec![0.0; d];
    let mut kept_dot = vec![0.0; n];
    let mut dead = 0usize;
    for j in 0..d {
        let col = (0..n).map(|i| g[(i, j)]);
        let Some(p) = sign_purity(col) else {
            dead += 1;
            continue;
        };
        let keep_positive = rng.uniform() < graddrop_transfer(p, params.k);
        for i in 0..n {
            let v = g[(i, j)];
            let kept = (v > 0.0 && keep_positive) || (v < 0.0 && !keep_positive);
            let m = if kept { 1.0 } else { 0.0 };
            let c = (params.leak + (1.0 - params.leak) * m) * v;
            direction[j] += c;
            kept_dot[i] += c * v;
        }
    }
    let weights = (0..n)
        .map(|i| {
            let sq = bundle.norms()[i].powi(2);
            if sq > 0.0 {
                kept_dot[i] / sq
            } else {
                0.0
            }
        })
        .collect();
    let mut diag = Diagnostics::default();
    diag.set("zero_coordinates", dead as f64);
    finish(direction, weights, Convention::Free, diag)
}

/// Equiangular direction.
///
/// Two tasks use the closed form `(Σ 1/‖g_i‖)⁻¹ Σ g_i/‖g_i‖`. For more tasks
/// the direction is the min-norm element `m` of the hull of the normalized
/// gradients, scaled by `N / Σ 1/‖g_i‖`, which reproduces the closed form at
/// `N = 2`.
pub fn edm(bundle: &GradientBundle) -> Result<AggregationResult> {
    let u = bundle.unit_rows()?;
    let n = bundle.n_tasks();
    let inv_sum: f64 = bundle.norms().iter().map(|v| 1.0 / v).sum();
    let mut diag = Diagnostics::default();
    let lambda = if n <= 2 {
        diag.raise("closed_form");
        vec![1.0 / n as f64; n]
    } else {
        let r = min_norm_in_hull(&u, MIN_NORM_MAX_ITER, MIN_NORM_TOL)?;
        diag.set("min_norm_iterations", r.iterations as f64);
        r.weights.into_vec()
    };
    let s = n as f64 / inv_sum;
    let coeffs: Vec<f64> = lambda
        .iter()
        .zip(bundle.norms())
        .map(|(l, g)| s * l / g)
        .collect();
    let direction = if n <= 2 {
        let mut d = u.tmatvec(&vec![1.0; n]);
        d.iter_mut().for_each(|v| *v /= inv_sum);
        d
    } else {
        bundle.combine(&coeffs)
    };
    finish(direction, coeffs, Convention::Free, diag)
}

/// Impartial gradient: weights summing to one whose combination has the same
/// projection onto every normalized task gradient.
pub fn imtl_g(bundle: &GradientBundle) -> Result<AggregationResult> {
    let n = bundle.n_tasks();
    if n < 2 {
        return Err(Error::InvalidArgument("imtl-g needs at least two tasks".into()));
    }
    let u = bundle.unit_rows()?;
    let dim = bundle.dim();
    let g1 = bundle.row(0);
    let u1 = u.row(0);
    let mut d_rows = Mat::zeros(n - 1, dim);
    let mut u_rows = Mat::zeros(n - 1, dim);
    for k in 1..n {
        for j in 0..dim {
            d_rows[(k - 1, j)] = g1[j] - bundle.row(k)[j];
            u_rows[(k - 1, j)] = u1[j] - u.row(k)[j];
        }
    }
    // α_{2..N} = g₁Uᵀ (DUᵀ)⁻¹  ⇔  (DUᵀ)ᵀ αᵀ = U g₁
    let du = d_rows.matmul(&u_rows.transpose())?;
    let rhs = u_rows.matvec(g1);
    let tail = solve_linear(&du.transpose(), &rhs).map_err(|e| match e {
        Error::Singular { .. } => Error::Degenerate(format!("imtl-g system is singular ({e})")),
        other => other,
    })?;
    let mut alpha = Vec::with_capacity(n);
    alpha.push(1.0 - tail.iter().sum::<f64>());
    alpha.extend(tail);

    let mut diag = Diagnostics::default();
    if alpha.iter().any(|a| a.abs() > IMTL_ALPHA_MAX) {
        diag.raise("clamped");
        alpha
            .iter_mut()
            .for_each(|a| *a = a.clamp(-IMTL_ALPHA_MAX, IMTL_ALPHA_MAX));
        let s: f64 = alpha.iter().sum();
        if s.abs() > 0.0 {
            alpha.iter_mut().for_each(|a| *a /= s);
        }
    }
    if alpha.iter().any(|a| *a < 0.0) {
        diag.raise("negative_weights");
    }
    let direction = bundle.combine(&alpha);
    let proj = u.matvec(&direction);
    let spread = proj.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - proj.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    diag.set("projection_spread", spread);
    finish(direction, alpha, Convention::SumToOne, diag)
}

/// `g_wᵀ g₀ + c‖g₀‖ ‖g_w‖` for simplex weights `w`.
pub fn cagrad_objective(bundle: &GradientBundle, w: &[f64], c: f64) -> f64 {
    let g0 = bundle.mean();
    let gw = bundle.combine(w);
    dot(&gw, &g0) + c * norm(&g0) * norm(&gw)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, x) in s.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Conflict-averse direction `d = g₀ + (√φ/‖g_w‖) g_w` with
/// `φ = c²‖g₀‖²` and `w` minimizing [`cagrad_objective`] over the simplex.
///
/// The inner problem is solved by projected gradient descent with
/// backtracking, working on the Gram matrix.
pub fn cagrad(bundle: &GradientBundle, c: f64) -> Result<AggregationResult> {
    if !(0.0..1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!("cagrad c must lie in [0, 1), got {c}")));
    }
    let n = bundle.n_tasks();
    let m = gram(bundle.matrix());
    let b: Vec<f64> = m.matvec(&vec![1.0 / n as f64; n]);
    let g0_sq = dot(&b, &vec![1.0 / n as f64; n]).max(0.0);
    let sqrt_phi = c * g0_sq.sqrt();
    let objective = |w: &[f64]| dot(w, &b) + sqrt_phi * dot(w, &m.matvec(w)).max(0.0).sqrt();

    let mut w = vec![1.0 / n as f64; n];
    let mut f = objective(&w);
    let mut iterations = 0;
    if n > 1 && sqrt_phi > 0.0 {
        let trace: f64 = (0..n).map(|i| m[(i, i)]).sum();
        let mut step = 1.0 / trace.max(f64::MIN_POSITIVE);
        for _ in 0..CAGRAD_MAX_ITER {
            let mw = m.matvec(&w);
            let gw_norm = dot(&w, &mw).max(0.0).sqrt();
            let grad: Vec<f64> = if gw_norm > ZERO_NORM {
                b.iter().zip(&mw).map(|(bi, mi)| bi + sqrt_phi * mi / gw_norm).collect()
            } else {
                b.clone()
            };
            // backtracking on the projected step
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> =
                    project_simplex(&w.iter().zip(&grad).map(|(wi, gi)| wi - step * gi).collect::<Vec<_>>());
                let ft = objective(&trial);
                let diff: Vec<f64> = trial.iter().zip(&w).map(|(a, b)| a - b).collect();
                let bound = f + dot(&grad, &diff) + dot(&diff, &diff) / (2.0 * step);
                if ft <= bound + 1e-15 * f.abs().max(1.0) {
                    accepted = Some((trial, ft, diff));
                    break;
                }
                step *= 0.5;
            }
            let Some((trial, ft, diff)) = accepted else { break };
            iterations += 1;
            let moved = norm(&diff);
            w = trial;
            f = ft;
            step *= 1.5;
            if moved < 1e-13 {
                break;
            }
        }
    }

    let mut diag = Diagnostics::default();
    diag.set("objective", f);
    diag.set("iterations", iterations as f64);
    let gw_norm = dot(&w, &m.matvec(&w)).max(0.0).sqrt();
    let coeffs: Vec<f64> = if gw_norm < ZERO_NORM {
        if sqrt_phi > 0.0 {
            diag.raise("fallback_mean");
        }
        vec![1.0 / n as f64; n]
    } else {
        let s = sqrt_phi / gw_norm;
        w.iter().map(|wi| 1.0 / n as f64 + s * wi).collect()
    };
    for (i, wi) in w.iter().enumerate() {
        diag.set(&format!("inner_weight_{i}"), *wi);
    }
    finish(bundle.combine(&coeffs), coeffs, Convention::Free, diag)
}

/// Bargaining weights `α > 0` solving `GᵀG α = 1/α`.
pub fn nash_mtl(bundle: &GradientBundle, iters: usize) -> Result<AggregationResult> {
    bundle.require_nonzero()?;
    let m = gram(bundle.matrix());
    let fp = positive_fixed_point(&m, iters)?;
    let mut diag = Diagnostics::default();
    diag.set("residual", fp.residual);
    diag.set("iterations", fp.iterations as f64);
    finish(bundle.combine(&fp.alpha), fp.alpha, Convention::Free, diag)
}

/// Running per-task gradient-norm statistics for [`cdtt`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdttState {
    pub window: usize,
    pub alpha_tension: f64,
    history: Vec<VecDeque<f64>>,
    prev_zeta: Option<Vec<f64>>,
}

impl CdttState {
    pub const DEFAULT_WINDOW: usize = 5;

    pub fn new(n_tasks: usize, alpha_tension: f64, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("cdtt window must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&alpha_tension) {
            return Err(Error::InvalidArgument(format!(
                "tension sensitivity must lie in [0, 1], got {alpha_tension}"
            )));
        }
        Ok(CdttState {
            window,
            alpha_tension,
            history: vec![VecDeque::with_capacity(window); n_tasks],
            prev_zeta: None,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self, task: usize) -> impl Iterator<Item = f64> + '_ {
        self.history[task].iter().copied()
    }

    pub fn prev_zeta(&self) -> Option<&[f64]> {
        self.prev_zeta.as_deref()
    }
}

/// Tension factor `c = α / (1 + e^{−δe + e}) + 1 − α`.
pub fn cdtt_tension(delta: f64, alpha: f64) -> f64 {
    let e = std::f64::consts::E;
    alpha / (1.0 + (-delta * e + e).exp()) + 1.0 - alpha
}

/// Equiangular direction plus a tension vector pulling towards tasks with
/// large loss or growing gradient norm.
pub fn cdtt(
    bundle: &GradientBundle,
    losses: &[f64],
    state: &mut CdttState,
) -> Result<AggregationResult> {
    let n = bundle.n_tasks();
    if losses.len() != n || state.n_tasks() != n {
        return Err(Error::Shape(format!(
            "cdtt: {n} gradients, {} losses, state for {} tasks",
            losses.len(),
            state.n_tasks()
        )));
    }
    if let Some(task) = losses.iter().position(|l| !(*l > 0.0)) {
        return Err(Error::NonPositiveLoss {
            task,
            loss: losses[task],
        });
    }
    let base = edm(bundle)?;
    let d_star = &base.direction;

    let mut zeta = Vec::with_capacity(n);
    for (h, g) in state.history.iter_mut().zip(bundle.norms()) {
        if h.len() == state.window {
            h.pop_front();
        }
        h.push_back(*g);
        zeta.push(h.iter().sum::<f64>() / h.len() as f64);
    }
    let ratios: Vec<f64> = match &state.prev_zeta {
        Some(prev) => zeta
            .iter()
            .zip(prev)
            .map(|(z, p)| if *p > 0.0 { z / p } else { 1.0 })
            .collect(),
        None => vec![1.0; n],
    };
    state.prev_zeta = Some(zeta);

    let mut diag = base.diagnostics.clone();
    let mut direction = d_star.clone();
    // direction = (1 − Σ k_i) d* + Σ k_i g_i with k_i = c_i/‖g_i − d*‖
    let mut pull = vec![0.0; n];
    let mut skipped = 0;
    for i in 0..n {
        let delta = ratios[i] + losses[i].log10();
        let c = cdtt_tension(delta, state.alpha_tension);
        diag.set(&format!("tension_{i}"), c);
        let diff: Vec<f64> = bundle.row(i).iter().zip(d_star).map(|(a, b)| a - b).collect();
        let dn = norm(&diff);
        if dn < ZERO_NORM {
            skipped += 1;
            continue;
        }
        pull[i] = c / dn;
        axpy(pull[i], &diff, &mut direction);
    }
    if skipped > 0 {
        diag.set("skipped_tension_terms", skipped as f64);
    }
    let keep = 1.0 - pull.iter().sum::<f64>();
    let coeffs: Vec<f64> = base
        .weights
        .as_slice()
        .iter()
        .zip(&pull)
        .map(|(e, k)| keep * e + k)
        .collect();
    finish(direction, coeffs, Convention::Free, diag)
}
