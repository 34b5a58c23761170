//! Per-task feature rotations parameterized by the Cayley transform of a
//! skew-symmetric generator, trained to align the task feature gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{adam_step, AdamState};
use crate::numerics::{dot, invert, norm, Mat};

/// Mean-direction norm below which the alignment target is flagged.
pub const DEGENERATE_TARGET: f64 = 1e-12;

/// `R = (I − A)(I + A)⁻¹`
pub fn cayley(a: &Mat) -> Result<Mat> {
    let n = a.rows();
    let mut plus = Mat::identity(n);
    let mut minus = Mat::identity(n);
    for i in 0..n {
        for j in 0..n {
            plus[(i, j)] += a[(i, j)];
            minus[(i, j)] -= a[(i, j)];
        }
    }
    minus.matmul(&invert(&plus)?)
}

/// Skew-symmetric matrix from its strict upper triangle, row by row.
fn skew_from_upper(f: usize, theta: &[f64]) -> Mat {
    let mut a = Mat::zeros(f, f);
    let mut k = 0;
    for i in 0..f {
        for j in i + 1..f {
            a[(i, j)] = theta[k];
            a[(j, i)] = -theta[k];
            k += 1;
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSet {
    feature_dim: usize,
    /// Strict upper triangle of each generator.
    generators: Vec<Vec<f64>>,
    rotations: Vec<Mat>,
    optimizers: Vec<AdamState>,
    pub lr_scale: f64,
}

impl RotationSet {
    /// Identity rotations for `n_tasks` tasks with `feature_dim` features.
    pub fn new(n_tasks: usize, feature_dim: usize, base_lr: f64, lr_scale: f64) -> Self {
        let k = feature_dim * feature_dim.saturating_sub(1) / 2;
        RotationSet {
            feature_dim,
            generators: vec![vec![0.0; k]; n_tasks],
            rotations: vec![Mat::identity(feature_dim); n_tasks],
            optimizers: (0..n_tasks)
                .map(|_| AdamState::new(k, base_lr * lr_scale, 0.0))
                .collect(),
            lr_scale,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.generators.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn rotations(&self) -> &[Mat] {
        &self.rotations
    }

    pub fn generator(&self, task: usize) -> Mat {
        skew_from_upper(self.feature_dim, &self.generators[task])
    }

    pub fn set_generator(&mut self, task: usize, a: &Mat) -> Result<()> {
        let f = self.feature_dim;
        if a.rows() != f || a.cols() != f {
            return Err(Error::Shape(format!("generator must be {f}×{f}")));
        }
        let mut theta = Vec::with_capacity(self.generators[task].len());
        for i in 0..f {
            for j in i + 1..f {
                if (a[(i, j)] + a[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument("generator is not skew-symmetric".into()));
                }
                theta.push(a[(i, j)]);
            }
        }
        self.generators[task] = theta;
        self.refresh(task)
    }

    fn refresh(&mut self, task: usize) -> Result<()> {
        self.rotations[task] = cayley(&self.generator(task))?;
        Ok(())
    }

    /// `R_i z`
    pub fn rotate_features(&self, z: &[f64], task: usize) -> Result<Vec<f64>> {
        if z.len() != self.feature_dim {
            return Err(Error::Shape(format!(
                "feature vector of length {} for dimension {}",
                z.len(),
                self.feature_dim
            )));
        }
        Ok(self.rotations[task].matvec(z))
    }

    /// Gradient of [`rotation_loss`] w.r.t. each generator's upper triangle.
    pub fn loss_gradient(&self, head_grads: &Mat, v: &[f64]) -> Result<Vec<Vec<f64>>> {
        let f = self.feature_dim;
        let units = unit_rows(head_grads)?;
        let mut out = Vec::with_capacity(self.n_tasks());
        for t in 0..self.n_tasks() {
            let r = &self.rotations[t];
            let u = units.row(t);
            // L_t = ‖Rᵀu − v‖², ∂L_t/∂R = 2 u (Rᵀu − v)ᵀ
            let rtu = r.tmatvec(u);
            let mut gr = Mat::zeros(f, f);
            for i in 0..f {
                for j in 0..f {
                    gr[(i, j)] = 2.0 * u[i] * (rtu[j] - v[j]);
                }
            }
            // dR = −(I + R) dA (I + A)⁻¹  ⇒  ∇_A = −(I + R)ᵀ G (I + A)⁻ᵀ
            let a = self.generator(t);
            let mut plus_a = Mat::identity(f);
            let mut plus_r = r.clone();
            for i in 0..f {
                for j in 0..f {
                    plus_a[(i, j)] += a[(i, j)];
                }
                plus_r[(i, i)] += 1.0;
            }
            let ga = plus_r
                .transpose()
                .matmul(&gr)?
                .matmul(&invert(&plus_a)?.transpose())?;
            let mut g = Vec::with_capacity(self.generators[t].len());
            for i in 0..f {
                for j in i + 1..f {
                    g.push(-(ga[(i, j)] - ga[(j, i)]));
                }
            }
            out.push(g);
        }
        Ok(out)
    }

    /// One Adam step on every generator; returns the loss before the step.
    pub fn step(&mut self, head_grads: &Mat, v: &[f64]) -> Result<f64> {
        let loss = rotation_loss(self, head_grads, v)?;
        let grads = self.loss_gradient(head_grads, v)?;
        for (t, g) in grads.iter().enumerate() {
            adam_step(&mut self.optimizers[t], &mut self.generators[t], g)?;
            self.refresh(t)?;
        }
        Ok(loss)
    }

    /// Plain gradient-descent step, used to check descent on a fixed batch.
    pub fn sgd_step(&mut self, head_grads: &Mat, v: &[f64], lr: f64) -> Result<()> {
        let grads = self.loss_gradient(head_grads, v)?;
        for (t, g) in grads.iter().enumerate() {
            for (p, gi) in self.generators[t].iter_mut().zip(g) {
                *p -= lr * gi;
            }
            self.refresh(t)?;
        }
        Ok(())
    }

    /// Largest `|RᵀR − I|` entry over all tasks.
    pub fn orthogonality_error(&self) -> f64 {
        self.rotations
            .iter()
            .map(|r| {
                let rtr = r.transpose().matmul(r).expect("square");
                let mut e: f64 = 0.0;
                for i in 0..self.feature_dim {
                    for j in 0..self.feature_dim {
                        let want = if i == j { 1.0 } else { 0.0 };
                        e = e.max((rtr[(i, j)] - want).abs());
                    }
                }
                e
            })
            .fold(0.0, f64::max)
    }
}

fn unit_rows(g: &Mat) -> Result<Mat> {
    let mut u = g.clone();
    for i in 0..u.rows() {
        let n = norm(u.row(i));
        if n <= 0.0 {
            return Err(Error::ZeroGradient { task: i });
        }
        u.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationTarget {
    pub v: Vec<f64>,
    pub degenerate: bool,
}

/// Mean of the normalized rows.
pub fn rotation_target(feature_grads: &Mat) -> Result<RotationTarget> {
    let u = unit_rows(feature_grads)?;
    let n = u.rows() as f64;
    let v: Vec<f64> = u.tmatvec(&vec![1.0 / n; u.rows()]);
    let degenerate = norm(&v) < DEGENERATE_TARGET;
    Ok(RotationTarget { v, degenerate })
}

/// `Σ_i ‖R_iᵀ u_i − v‖²` where `u_i` is the normalized gradient w.r.t. the
/// rotated head input of task `i`, so `R_iᵀ u_i` lives in the shared space.
pub fn rotation_loss(rot: &RotationSet, head_grads: &Mat, v: &[f64]) -> Result<f64> {
    if head_grads.rows() != rot.n_tasks() || head_grads.cols() != rot.feature_dim {
        return Err(Error::Shape("rotation loss: gradient matrix does not match rotations".into()));
    }
    let u = unit_rows(head_grads)?;
    Ok((0..rot.n_tasks())
        .map(|t| {
            let d: Vec<f64> = rot.rotations[t]
                .tmatvec(u.row(t))
                .iter()
                .zip(v)
                .map(|(a, b)| a - b)
                .collect();
            dot(&d, &d)
        })
        .sum())
}

/// Shared-space feature gradients `R_iᵀ g_i` of head-input gradients `g_i`.
pub fn shared_feature_grads(rot: &RotationSet, head_grads: &Mat) -> Mat {
    let mut out = head_grads.clone();
    for t in 0..rot.n_tasks() {
        let g = rot.rotations[t].tmatvec(head_grads.row(t));
        out.row_mut(t).copy_from_slice(&g);
    }
    out
}
